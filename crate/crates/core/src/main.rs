use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iosim::harness::{self, apply_sweep_value, Mode, RunConfig, SweepParam};
use iosim::ios::Protocol;
use iosim::Result;

#[derive(Parser)]
#[command(name = "iosim", version, about = "Omni-surface assisted multi-user downlink simulator and learning agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write its outputs to a run directory.
    Run(RunArgs),
    /// Grid over one parameter, one run directory per (mode, value, seed).
    Sweep(SweepArgs),
    /// Aggregate run directories into comparison tables and plot data.
    Report(ReportArgs),
    /// Quick built-in consistency checks.
    Selftest,
}

#[derive(Args)]
struct Overrides {
    /// JSON run configuration; omitted keys take their defaults.
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long = "gamma-inner")]
    gamma_inner: Option<usize>,
    /// Increment set: small, medium or large.
    #[arg(long)]
    increments: Option<String>,
    /// Amplitude set: small, medium or large.
    #[arg(long)]
    amplitudes: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    /// lambda, omega, increments, amplitudes or gamma_inner.
    #[arg(long, value_parser = parse_param)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "random,mab,deepios")]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories or parents of run directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    s.parse().map_err(|e: iosim::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: iosim::Error| e.to_string())
}

fn parse_param(s: &str) -> std::result::Result<SweepParam, String> {
    s.parse().map_err(|e: iosim::Error| e.to_string())
}

fn build_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(n) = o.slots {
        cfg.horizon = n;
    }
    if let Some(p) = o.protocol {
        cfg.set_protocol(p);
    }
    if let Some(l) = o.lambda {
        cfg.env.rician_factor = l;
    }
    if let Some(w) = o.omega {
        cfg.env.reward.penalty = w;
    }
    if let Some(g) = o.gamma_inner {
        cfg.gamma_inner = g;
    }
    if let Some(v) = &o.increments {
        apply_sweep_value(&mut cfg, SweepParam::Increments, v)?;
    }
    if let Some(v) = &o.amplitudes {
        apply_sweep_value(&mut cfg, SweepParam::Amplitudes, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Whether the JSON config at `path` names `key` at the top level.
fn config_sets(path: Option<&std::path::Path>, key: &str) -> Result<bool> {
    let Some(path) = path else { return Ok(false) };
    let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    Ok(value.get(key).is_some())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = build_config(&args.common)?;
            if let Some(m) = args.mode {
                cfg.mode = m;
            }
            let s = harness::run(&cfg, &args.out)?;
            println!(
                "{} seed {}: tail mean {:.4} bits/s/Hz, convergence {}, {:.1}s -> {}",
                s.mode,
                s.seed,
                s.tail_mean,
                s.convergence_slot.map_or("none".into(), |c| c.to_string()),
                s.wall_seconds,
                args.out.display()
            );
        }
        Command::Sweep(args) => {
            let mut cfg = build_config(&args.common)?;
            if args.common.gamma_inner.is_none() && !config_sets(args.common.config.as_deref(), "gamma_inner")? {
                cfg.gamma_inner = harness::SWEEP_GAMMA_INNER;
            }
            let jobs = args
                .jobs
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let done = harness::sweep(&cfg, &args.modes, args.param, &args.values, &args.seeds, &args.out, jobs)?;
            for (dir, s) in done {
                println!("{}: tail mean {:.4}", dir.display(), s.tail_mean);
            }
        }
        Command::Report(args) => {
            let rows = harness::report(&args.dirs, &args.out)?;
            println!("mode,protocol,lambda,omega,runs,tail_mean,convergence_slot");
            for r in rows {
                println!(
                    "{},{},{},{},{},{:.4},{}",
                    r.mode,
                    r.protocol,
                    r.rician_factor,
                    r.penalty,
                    r.runs,
                    r.tail_mean,
                    r.convergence_slot_mean.map_or("none".into(), |c| format!("{c:.0}"))
                );
            }
        }
        Command::Selftest => {
            let results = harness::selftest();
            let mut failed = 0;
            for (name, ok, detail) in &results {
                println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
                failed += usize::from(!ok);
            }
            if failed > 0 {
                return Err(iosim::Error::State(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
