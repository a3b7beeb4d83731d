//! Partition agreement (AMI, ARI) and ranking (AP) metrics.

use std::collections::HashMap;
use std::hash::Hash;

use super::EvalError;

/// Dense label ids in order of first appearance.
pub fn encode<L: Hash + Eq>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let codes = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(l).or_insert(next)
        })
        .collect();
    (codes, ids.len())
}

struct Contingency {
    n: usize,
    table: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn contingency<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<Contingency, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let (ca, ka) = encode(a);
    let (cb, kb) = encode(b);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&i, &j) in ca.iter().zip(&cb) {
        table[i][j] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency {
        n: a.len(),
        table,
        rows,
        cols,
    })
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_info(c: &Contingency) -> f64 {
    let n = c.n as f64;
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.rows[i] as f64 * c.cols[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Expected mutual information under the hypergeometric permutation model.
fn expected_mutual_info(c: &Contingency) -> f64 {
    let n = c.n;
    let mut log_fact = vec![0.0f64; n + 1];
    for i in 1..=n {
        log_fact[i] = log_fact[i - 1] + (i as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &c.rows {
        for &b in &c.cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = log_fact[a] + log_fact[b] + log_fact[n - a] + log_fact[n - b] - log_fact[n];
            for nij in lo..=hi {
                let log_p = fixed
                    - log_fact[nij]
                    - log_fact[a - nij]
                    - log_fact[b - nij]
                    - log_fact[n + nij - a - b];
                let x = nij as f64;
                emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with the arithmetic-mean normalizer.
pub fn ami<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<f64, EvalError> {
    if a.is_empty() {
        return Err(EvalError::Empty("ami"));
    }
    let c = contingency(a, b)?;
    // one cluster each, or singletons on both sides: identical partitions
    // whose chance-corrected score is 0/0
    if c.rows.len() == c.cols.len() && (c.rows.len() <= 1 || c.rows.len() == c.n) {
        return Ok(1.0);
    }
    let mi = mutual_info(&c);
    let emi = expected_mutual_info(&c);
    let norm = 0.5 * (entropy(&c.rows, c.n) + entropy(&c.cols, c.n));
    let mut denom = norm - emi;
    denom = if denom < 0.0 {
        denom.min(-f64::EPSILON)
    } else {
        denom.max(f64::EPSILON)
    };
    Ok((mi - emi) / denom)
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Pair-counting adjusted Rand index.
pub fn ari<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<f64, EvalError> {
    let c = contingency(a, b)?;
    let (ka, kb) = (c.rows.len(), c.cols.len());
    if (ka == kb && (ka <= 1 || ka == c.n)) || c.n == 0 {
        return Ok(1.0);
    }
    let index: f64 = c.table.iter().flatten().map(|&x| comb2(x)).sum();
    let sum_a: f64 = c.rows.iter().map(|&x| comb2(x)).sum();
    let sum_b: f64 = c.cols.iter().map(|&x| comb2(x)).sum();
    let expected = sum_a * sum_b / comb2(c.n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Non-interpolated average precision. Ranks by descending score with ties
/// broken by original index. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NonFinite("average_precision scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// E[MI] by averaging MI over every permutation of `b`.
    fn brute_force_ami(a: &[usize], b: &[usize]) -> f64 {
        fn mi(a: &[usize], b: &[usize]) -> f64 {
            mutual_info(&contingency(a, b).unwrap())
        }
        fn permute(v: &mut Vec<usize>, k: usize, acc: &mut (f64, usize), a: &[usize]) {
            if k == v.len() {
                acc.0 += mi(a, v);
                acc.1 += 1;
                return;
            }
            for i in k..v.len() {
                v.swap(k, i);
                permute(v, k + 1, acc, a);
                v.swap(k, i);
            }
        }
        let mut acc = (0.0, 0);
        permute(&mut b.to_vec(), 0, &mut acc, a);
        let emi = acc.0 / acc.1 as f64;
        let c = contingency(a, b).unwrap();
        let h = 0.5 * (entropy(&c.rows, c.n) + entropy(&c.cols, c.n));
        (mi(a, b) - emi) / (h - emi)
    }

    #[test]
    fn ami_examples() {
        assert!((ami(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(ami(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap().abs() < 1e-12);
        let v = ami(&[0, 0, 1, 1, 2], &[0, 1, 1, 2, 2]).unwrap();
        assert!((v - brute_force_ami(&[0, 0, 1, 1, 2], &[0, 1, 1, 2, 2])).abs() < 1e-12);
        assert!((v + 0.25).abs() < 1e-12, "{v}");
        assert_eq!(ami(&[3, 3], &["x", "x"]).unwrap(), 1.0);
        assert_eq!(ami(&[0, 1, 2], &[5, 4, 3]).unwrap(), 1.0);
        assert!(ami(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 1, 1, 2], &[5, 6, 6, 7]).unwrap(), 1.0);
        assert!((ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        let mut rng = crate::util::seeded_rng(7);
        use rand::Rng;
        let a: Vec<u8> = (0..1000).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<u8> = (0..1000).map(|_| rng.random_range(0..4)).collect();
        assert!(ari(&a, &b).unwrap().abs() < 0.05);
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap().unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[3.0, 2.0, 1.0], &[true, true, false]).unwrap(), Some(1.0));
        let ap = average_precision(&[5.0, 4.0, 3.0, 2.0, 1.0], &[false, false, false, false, true]).unwrap();
        assert!((ap.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(average_precision(&[1.0], &[false]).unwrap(), None);
        // ties resolve by index: positive at index 1 ranks second
        let ap = average_precision(&[1.0, 1.0], &[false, true]).unwrap().unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
    }

    fn labels(max: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..8).prop_flat_map(move |n| {
            (
                proptest::collection::vec(0..max, n),
                proptest::collection::vec(0..max, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ami_matches_permutation_oracle((a, b) in labels(4)) {
            let ka = encode(&a).1;
            let kb = encode(&b).1;
            prop_assume!(!(ka == 1 && kb == 1));
            let c = contingency(&a, &b).unwrap();
            let h = 0.5 * (entropy(&c.rows, c.n) + entropy(&c.cols, c.n));
            prop_assume!(h - expected_mutual_info(&c) > 1e-6);
            prop_assert!((ami(&a, &b).unwrap() - brute_force_ami(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn scores_symmetric_and_relabel_invariant((a, b) in labels(5), shift in 1usize..50) {
            let relabeled: Vec<usize> = a.iter().map(|x| x * 7 + shift).collect();
            let ami_ab = ami(&a, &b).unwrap();
            prop_assert!((ami_ab - ami(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ami_ab - ami(&relabeled, &b).unwrap()).abs() < 1e-12);
            prop_assert!(ami_ab <= 1.0 + 1e-12);
            let ari_ab = ari(&a, &b).unwrap();
            prop_assert!((ari_ab - ari(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ari_ab - ari(&relabeled, &b).unwrap()).abs() < 1e-12);
            prop_assert!(ari_ab <= 1.0 + 1e-12);
        }

        #[test]
        fn ap_monotone_invariant(
            pairs in proptest::collection::vec((-1000i32..1000, any::<bool>()), 1..60)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 100.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() * 4.0 - 1.0).collect();
            prop_assert_eq!(
                average_precision(&scores, &labels).unwrap(),
                average_precision(&warped, &labels).unwrap()
            );
        }
    }
}
