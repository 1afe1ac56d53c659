use std::path::PathBuf;
use std::process::ExitCode;

use hype::config::ExperimentConfig;
use hype::report::OutputFormat;

const USAGE: &str = "\
usage: hype --config PATH [--out DIR] [--format json,csv] [--seed-override N] [--threads N]

  --config PATH      experiment config file (required)
  --out DIR          output directory (default: out)
  --format LIST      comma-separated output formats: json, csv (default: json,csv)
  --seed-override N  replace the config's seed
  --threads N        size of the worker pool for grid cells
";

struct Args {
    config: PathBuf,
    out: PathBuf,
    formats: Vec<OutputFormat>,
    seed_override: Option<u64>,
    threads: Option<usize>,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    let mut config = None;
    let mut out = PathBuf::from("out");
    let mut formats = vec![OutputFormat::Json, OutputFormat::Csv];
    let mut seed_override = None;
    let mut threads = None;
    let mut it = argv.iter();
    while let Some(arg) = it.next() {
        let mut value = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| format!("{name} requires a value"))
        };
        match arg.as_str() {
            "--config" => config = Some(PathBuf::from(value("--config")?)),
            "--out" => out = PathBuf::from(value("--out")?),
            "--format" => {
                formats = OutputFormat::parse_list(&value("--format")?)
                    .map_err(|e| e.to_string())?
            }
            "--seed-override" => {
                seed_override = Some(
                    value("--seed-override")?
                        .parse()
                        .map_err(|_| "--seed-override expects an integer".to_string())?,
                )
            }
            "--threads" => {
                threads = Some(
                    value("--threads")?
                        .parse()
                        .map_err(|_| "--threads expects a positive integer".to_string())?,
                )
            }
            "--help" | "-h" => return Err(String::new()),
            other => return Err(format!("unknown argument {other:?}")),
        }
    }
    Ok(Args {
        config: config.ok_or("--config is required")?,
        out,
        formats,
        seed_override,
        threads,
    })
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = match parse_args(&argv) {
        Ok(a) => a,
        Err(msg) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            eprint!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = args.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        // Ignore the error when a pool already exists (e.g. under tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = ExperimentConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(seed) = args.seed_override {
            cfg.seed = seed;
        }
        hype::config::run(&cfg, &args.out, &args.formats)
    });
    match result {
        Ok(written) => {
            for path in written {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
