use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sotta_core::checkpoint::save_checkpoint;
use sotta_core::harness::csv::{read_csv, write_csv, CsvRow};
use sotta_core::harness::sweep::{sweep, thread_count, SweepSpec};
use sotta_core::harness::{
    gradcheck_suite, load_for, pretrain, render_report, run_methods, ConfigBuilder, RunConfig,
};
use sotta_core::{Error, Method, Network, Scenario};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "sotta",
    version,
    about = "Noise-robust streaming test-time adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set adapt.rho=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the source model and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method on one stream.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenario: Option<Scenario>,
        /// source, bnstats, em, sotta, or an ablation such as abl:hc+esm.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Run a scenario x method x seed grid, optionally crossed with one key.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "noise")]
        scenarios: Vec<Scenario>,
        /// Comma-separated methods; `ablations` expands to all eight flag settings.
        #[arg(long, value_delimiter = ',', default_value = "source,bnstats,em,sotta")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, requires = "sweep_values")]
        sweep_key: Option<String>,
        #[arg(long, value_delimiter = ',', requires = "sweep_key")]
        sweep_values: Vec<String>,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Check tape gradients against finite differences on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        nets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Print a mean ± std table of a results CSV.
    Report {
        #[arg(long)]
        in_csv: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        b.apply_text(&text)?;
    }
    for o in &args.overrides {
        b.apply_override(o)?;
    }
    Ok(b.finish()?)
}

fn load_net(cfg: &RunConfig, path: &Path) -> Result<Network, Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Ok(load_for(cfg, &bytes)?)
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, Failure> {
    let mut out = Vec::new();
    for n in names {
        if n.eq_ignore_ascii_case("ablations") {
            out.extend(Method::ablations());
        } else {
            out.push(
                n.parse()
                    .map_err(|e: Error| Failure::Usage(e.to_string()))?,
            );
        }
    }
    Ok(out)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Pretrain { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let (net, log) = pretrain(&cfg)?;
            std::fs::write(&out, save_checkpoint(&net))
                .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", out.display())))?;
            println!(
                "pretrained {} for {} epochs: final loss {:.4}, holdout accuracy {:.4}",
                net.spec().describe(),
                cfg.pretrain.epochs,
                log.epoch_loss.last().copied().unwrap_or(f64::NAN),
                log.holdout_accuracy.unwrap_or(f64::NAN)
            );
            println!(
                "wrote {} (fingerprint {:016x})",
                out.display(),
                net.fingerprint()
            );
        }
        Command::Run {
            cfg,
            ckpt,
            scenario,
            method,
            seed,
            out_csv,
        } => {
            let cfg = load_config(&cfg)?;
            let net = load_net(&cfg, &ckpt)?;
            let scenario = scenario.unwrap_or(cfg.stream.scenario);
            let method = method.unwrap_or(cfg.adapt.method);
            let seed = seed.unwrap_or(cfg.seed);
            let results = run_methods(&cfg, &net, scenario, &[method], seed)?;
            let rows: Vec<CsvRow> = results
                .iter()
                .map(|r| CsvRow::from_result(r, &cfg))
                .collect();
            write_csv(&rows, &out_csv)?;
            for r in &results {
                println!(
                    "{} {} seed {}: benign accuracy {:.4}, {} insertions ({} noisy), {} skipped events",
                    r.scenario,
                    r.method,
                    r.seed,
                    r.benign_accuracy,
                    r.insertions,
                    r.noisy_insertions,
                    r.skipped_events
                );
            }
        }
        Command::Sweep {
            cfg,
            ckpt,
            scenarios,
            methods,
            seeds,
            sweep_key,
            sweep_values,
            out_csv,
        } => {
            let cfg = load_config(&cfg)?;
            let net = load_net(&cfg, &ckpt)?;
            let spec = SweepSpec {
                scenarios,
                methods: parse_methods(&methods)?,
                seeds,
                vary: sweep_key.map(|k| (k, sweep_values)),
            };
            let rows = sweep(&cfg, &spec, &net, thread_count()).map_err(|e| match e {
                Error::InvalidArgument(msg) => Failure::Usage(msg),
                other => other.into(),
            })?;
            write_csv(&rows, &out_csv)?;
            println!("wrote {} rows to {}", rows.len(), out_csv.display());
        }
        Command::Gradcheck { nets, seed, h } => {
            let s = gradcheck_suite(nets, seed, h)?;
            println!(
                "gradcheck: {} networks, max relative error {:.3e} (tolerance {:.0e}), {:.2}s",
                s.nets,
                s.max_rel_err,
                GRADCHECK_TOLERANCE,
                s.elapsed.as_secs_f64()
            );
            if s.max_rel_err.is_nan() || s.max_rel_err >= GRADCHECK_TOLERANCE {
                return Err(Failure::Internal(
                    "gradient check exceeded tolerance".into(),
                ));
            }
        }
        Command::Report { in_csv } => {
            let rows = read_csv(&in_csv)?;
            print!("{}", render_report(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
