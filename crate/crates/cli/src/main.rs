use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use superkernel::app::{self, RunConfig};
use superkernel::Error;

#[derive(Parser, Debug)]
#[command(name = "superkernel", version, about = "Kernel-superposition attention: checks, training, probes, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run numerical verification suites and write a JSON report.
    Verify(Common),
    /// MAE pretraining.
    Pretrain(Common),
    /// Finetune a classifier from a pretraining checkpoint.
    Finetune {
        /// Pretraining checkpoint directory (sets `finetune.checkpoint`).
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump attention maps of a checkpoint as CSV and PGM.
    Probe {
        /// Checkpoint directory (sets `probe.checkpoint`).
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time materialized against streamed kernel-tensor evaluation.
    Bench(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file, or a run manifest to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Verification suite: superposition, conv, embed, variance, params, bspline or all.
    #[arg(long)]
    suite: Option<String>,
    /// Finetune: blocks kept. Probe: 1-based layers, e.g. `1-6`.
    #[arg(long)]
    layers: Option<String>,
    /// Materialization budget for bench.
    #[arg(long)]
    budget_bytes: Option<u64>,
    /// Any other config key, e.g. `--set pretrain.lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut o = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        let quoted = |s: &str| format!("{s:?}");
        if let Some(s) = self.seed {
            o.push(("seed".into(), s.to_string()));
        }
        if let Some(p) = &self.precision {
            o.push(("precision".into(), quoted(p)));
        }
        if let Some(p) = &self.out {
            o.push(("out".into(), quoted(&p.to_string_lossy())));
        }
        if let Some(s) = &self.suite {
            o.push(("verify.suite".into(), quoted(s)));
        }
        if let Some(l) = &self.layers {
            o.push(("layers".into(), quoted(l)));
        }
        if let Some(b) = self.budget_bytes {
            o.push(("bench.budget_bytes".into(), b.to_string()));
        }
        Ok(o)
    }

    fn load(&self, extra: Option<(&str, &PathBuf)>) -> Result<RunConfig, Error> {
        let mut o = self.overrides()?;
        if let Some((key, path)) = extra {
            o.push((key.into(), format!("{:?}", path.to_string_lossy())));
        }
        RunConfig::load(self.config.as_deref(), &o)
    }
}

fn print_json<S: Serialize>(value: &S) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("could not render summary: {e}"),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Verify(c) => {
            let cfg = c.load(None)?;
            let report = app::verify(&cfg, c.config.as_deref())?;
            for check in &report.checks {
                println!(
                    "{:<5} {:<14} {:<40} {:e}",
                    if check.pass { "PASS" } else { "FAIL" },
                    check.suite,
                    check.name,
                    check.measured
                );
            }
            println!("{} failure(s); report in {}", report.failures, cfg.out.join("verify_report.json").display());
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Pretrain(c) => {
            let cfg = c.load(None)?;
            print_json(&app::pretrain(&cfg, c.config.as_deref())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Finetune { checkpoint, common } => {
            let cfg = common.load(checkpoint.as_ref().map(|p| ("finetune.checkpoint", p)))?;
            print_json(&app::finetune(&cfg, common.config.as_deref())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Probe { checkpoint, common } => {
            let cfg = common.load(checkpoint.as_ref().map(|p| ("probe.checkpoint", p)))?;
            print_json(&app::probe(&cfg, common.config.as_deref())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(c) => {
            let cfg = c.load(None)?;
            let rows = app::bench(&cfg, c.config.as_deref())?;
            for r in &rows {
                println!(
                    "B={:<2} S={:<4} D={:<4} {:<12} {:?} est={} bytes median={:?} ms diff={:?}",
                    r.b, r.s, r.d, r.mode, r.status, r.estimate_bytes, r.median_ms, r.max_abs_diff
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
