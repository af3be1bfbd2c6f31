use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tada::datagen::{Domain, Split};
use tada::diagnostics::{label_distribution_report, pca_feature_scatter, ProbeLocations};
use tada::metrics::evaluate;
use tada::model::TadaNet;
use tada::runner::{
    ensure_dataset, require_dataset, run_dir, run_matrix, run_one, write_comparison, write_config_echo, write_report,
    ExperimentConfig, MethodId, RunOutcome,
};

#[derive(Parser)]
#[command(name = "tada", version, about = "Task-assisted domain adaptation on a procedural toy world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; every artifact path is relative to it.
    #[arg(long)]
    out: PathBuf,
    /// Override a config key, e.g. `--set training.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides)?,
            None => ExperimentConfig::from_toml("", &self.overrides)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunSelect {
    #[arg(long)]
    regime: String,
    /// Adaptation mode: none, feature, output or multi_level.
    #[arg(long, default_value = "none")]
    da: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunSelect {
    fn method(&self) -> Result<MethodId> {
        let text = if self.da == "none" {
            self.regime.clone()
        } else {
            format!("{}+{}", self.regime, self.da)
        };
        Ok(MethodId::parse(&text)?)
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).with_context(|| format!("unknown split `{s}`; expected train, val or test"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain dataset into `<out>/data`.
    GenData(Common),
    /// Train and evaluate one (method, seed) into `<out>/runs`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunSelect,
    },
    /// Evaluate a trained run on one domain and split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunSelect,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Label-distribution divergence, plus a feature PCA scatter when a run
    /// is selected.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long, default_value = "none")]
        da: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Rebuild report tables from run artifacts; with several directories,
    /// also write a side-by-side comparison.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Comparison table path; defaults to `comparison.csv` in the first directory.
        #[arg(long)]
        to: Option<PathBuf>,
    },
    /// Run every (method, seed) of the config, resuming completed runs.
    RunMatrix(Common),
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            write_config_echo(&cfg, &common.out)?;
            let data = ensure_dataset(&cfg, &common.out)?;
            println!("dataset {} with {} samples in {}", data.spec.hash(), data.len(), common.out.display());
        }
        Command::Train { common, run } => {
            let cfg = common.load()?;
            let method = run.method()?;
            write_config_echo(&cfg, &common.out)?;
            let data = require_dataset(&cfg, &common.out)?;
            let outcome = run_one(&cfg, &data, method, run.seed, &common.out)?;
            let m = &outcome.report().metrics;
            let verb = match outcome {
                RunOutcome::Completed(_) => "trained",
                RunOutcome::Skipped(_) => "already complete",
            };
            println!(
                "{method} seed {}: {verb}; target {} mean {:.3} median {:.3} rmse {:.3} deg",
                run.seed,
                cfg.eval_split.name(),
                m.mean_deg,
                m.median_deg,
                m.rmse_deg
            );
        }
        Command::Eval {
            common,
            run,
            domain,
            split,
        } => {
            let cfg = common.load()?;
            let domain = match domain.as_str() {
                "source" => Domain::Source,
                "target" => Domain::Target,
                d => bail!("unknown domain `{d}`; expected source or target"),
            };
            let dir = run_dir(&common.out, run.method()?, run.seed);
            let data = require_dataset(&cfg, &common.out)?;
            let model = TadaNet::load(&dir.join("model.ckpt"))
                .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
            let metrics = evaluate(&model, &data, domain, split, 16)?;
            write_json(&dir.join(format!("eval_{}_{}.json", domain.name(), split.name())), &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Diagnose {
            common,
            regime,
            da,
            seed,
            split,
            bins,
        } => {
            let cfg = common.load()?;
            let data = require_dataset(&cfg, &common.out)?;
            let report = label_distribution_report(&data, split, bins)?;
            write_json(&common.out.join("divergence.json"), &report)?;
            for c in &report.components {
                println!("W1 {}: {:.6}", c.component, c.wasserstein1);
            }
            if let Some(regime) = regime {
                let run = RunSelect { regime, da, seed };
                let dir = run_dir(&common.out, run.method()?, seed);
                let model = TadaNet::load(&dir.join("model.ckpt"))
                    .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
                let table = pca_feature_scatter(&model, &data, split, &ProbeLocations::default_for(&data))?;
                let path = dir.join(format!("pca_{}.csv", split.name()));
                table.write_csv(&path)?;
                println!("PCA scatter written to {}", path.display());
            }
        }
        Command::Report { dirs, to } => {
            for d in &dirs {
                let verdicts = write_report(d)?;
                println!("{}", d.display());
                for v in verdicts {
                    println!("  claim {:<16} {:<13} {}", v.claim, v.status.name(), v.description);
                }
            }
            if dirs.len() > 1 {
                let dest = to.unwrap_or_else(|| dirs[0].join("comparison.csv"));
                write_comparison(&dirs, &dest)?;
                println!("comparison written to {}", dest.display());
            }
        }
        Command::RunMatrix(common) => {
            let cfg = common.load()?;
            let outcome = run_matrix(&cfg, &common.out)?;
            println!(
                "{} runs ({} already complete), {} failed",
                outcome.reports.len(),
                outcome.skipped,
                outcome.failures.len()
            );
            if !outcome.failures.is_empty() {
                for (method, seed, err) in &outcome.failures {
                    eprintln!("{method} seed {seed}: {err}");
                }
                bail!("{} runs failed", outcome.failures.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
