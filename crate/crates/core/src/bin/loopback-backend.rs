//! Loopback child for the external backend protocol: answers every frame with
//! its first `dim` samples. Used by the integration tests.
//!
//! Usage: loopback-backend --dim D --rate HZ --window-samples N
//!        [--die-after FRAMES] [--delay-ms MS]

use std::io::{self, BufWriter, Write};
use std::process::ExitCode;
use std::time::Duration;

use sonoscope::backends::external::{handshake_line, read_record, write_record};

struct Args {
    dim: usize,
    rate: u32,
    window: usize,
    die_after: Option<usize>,
    delay: Duration,
}

fn parse_args() -> Result<Args, String> {
    let mut args = Args {
        dim: 0,
        rate: 0,
        window: 0,
        die_after: None,
        delay: Duration::ZERO,
    };
    let mut it = std::env::args().skip(1);
    while let Some(flag) = it.next() {
        let value = it.next().ok_or_else(|| format!("{flag} needs a value"))?;
        let num = |v: &str| v.parse::<u64>().map_err(|_| format!("{flag}: bad number {v:?}"));
        match flag.as_str() {
            "--dim" => args.dim = num(&value)? as usize,
            "--rate" => args.rate = num(&value)? as u32,
            "--window-samples" => args.window = num(&value)? as usize,
            "--die-after" => args.die_after = Some(num(&value)? as usize),
            "--delay-ms" => args.delay = Duration::from_millis(num(&value)?),
            other => return Err(format!("unknown flag {other}")),
        }
    }
    if args.dim == 0 || args.rate == 0 || args.window == 0 {
        return Err("--dim, --rate and --window-samples are required".into());
    }
    Ok(args)
}

fn main() -> ExitCode {
    let args = match parse_args() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("loopback-backend: {e}");
            return ExitCode::from(2);
        }
    };
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut out = BufWriter::new(io::stdout().lock());
    if out
        .write_all(handshake_line(args.dim, args.rate, args.window).as_bytes())
        .and_then(|_| out.flush())
        .is_err()
    {
        return ExitCode::from(1);
    }
    let mut answered = 0usize;
    loop {
        let frame = match read_record(&mut input) {
            Ok(Some(f)) => f,
            Ok(None) => return ExitCode::SUCCESS,
            Err(_) => return ExitCode::from(1),
        };
        if args.die_after == Some(answered) {
            return ExitCode::from(3);
        }
        if !args.delay.is_zero() {
            std::thread::sleep(args.delay);
        }
        let mut reply: Vec<f32> = frame.iter().copied().take(args.dim).collect();
        reply.resize(args.dim, 0.0);
        if write_record(&mut out, &reply).and_then(|_| out.flush()).is_err() {
            return ExitCode::from(1);
        }
        answered += 1;
    }
}
