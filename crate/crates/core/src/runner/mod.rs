//! Experiment orchestration: dataset acquisition, resumable per-run training
//! and evaluation, the method matrix, and report generation.

mod config;
mod report;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

pub use config::{apply_override, ExperimentConfig, MethodId};
pub use report::{
    collect_reports, reproduce_orderings, write_comparison, write_report, ClaimStatus, ClaimVerdict,
    PairComparison,
};

use crate::datagen::{generate_dataset, load_dataset, save_dataset, Dataset, Domain};
use crate::error::{Result, TadaError};
use crate::metrics::{evaluate, MetricsReport, RunMeta};
use crate::trainer::{LogRecord, Trainer};

pub const DATA_DIR: &str = "data";
pub const RUNS_DIR: &str = "runs";
pub const CONFIG_ECHO: &str = "experiment.json";

pub fn data_dir(out: &Path) -> PathBuf {
    out.join(DATA_DIR)
}

pub fn run_dir(out: &Path, method: MethodId, seed: u64) -> PathBuf {
    out.join(RUNS_DIR).join(format!("{method}_s{seed}"))
}

/// Loads the dataset under `out`, generating and saving it if absent. A
/// stored dataset built from a different spec is an error.
pub fn ensure_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let dir = data_dir(out);
    if dir.join("index.json").exists() {
        let data = load_dataset(&dir)?;
        if data.spec.hash() != cfg.world.hash() {
            return Err(TadaError::MetadataMismatch(format!(
                "{} holds a dataset for spec {}, config asks for {}",
                dir.display(),
                data.spec.hash(),
                cfg.world.hash()
            )));
        }
        return Ok(data);
    }
    let data = generate_dataset(&cfg.world)?;
    save_dataset(&data, &dir)?;
    Ok(data)
}

/// Loads an existing dataset under `out` without generating one.
pub fn require_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let dir = data_dir(out);
    if !dir.join("index.json").exists() {
        return Err(TadaError::Config(format!(
            "no dataset at {}; run gen-data first",
            dir.display()
        )));
    }
    ensure_dataset(cfg, out)
}

pub fn write_config_echo(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn append_log(path: &Path, records: &[LogRecord]) -> Result<usize> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(records.len())
}

fn count_lines(path: &Path) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    Ok(BufReader::new(fs::File::open(path)?).lines().count())
}

/// Keeps the first `n` lines of a log written before an interruption.
fn truncate_lines(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(fs::File::open(path)?)
        .lines()
        .take(n)
        .collect::<std::io::Result<_>>()?;
    let mut text = kept.join("\n");
    if !kept.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Outcome of [`run_one`].
#[derive(Debug)]
pub enum RunOutcome {
    Completed(MetricsReport),
    /// Results already on disk for the same configuration.
    Skipped(MetricsReport),
}

impl RunOutcome {
    pub fn report(&self) -> &MetricsReport {
        match self {
            RunOutcome::Completed(r) | RunOutcome::Skipped(r) => r,
        }
    }
}

/// Trains and evaluates one (method, seed) into its run directory, resuming
/// from saved state if a previous attempt was interrupted.
pub fn run_one(cfg: &ExperimentConfig, data: &Dataset, method: MethodId, seed: u64, out: &Path) -> Result<RunOutcome> {
    let dir = run_dir(out, method, seed);
    let meta = RunMeta {
        method: method.to_string(),
        seed,
        spec_hash: data.spec.hash(),
        config_hash: cfg.method_hash(method),
    };
    let metrics_path = dir.join("metrics.json");
    if metrics_path.exists() {
        let existing: MetricsReport = serde_json::from_slice(&fs::read(&metrics_path)?)?;
        if existing.meta == meta {
            return Ok(RunOutcome::Skipped(existing));
        }
        return Err(TadaError::MetadataMismatch(format!(
            "{} holds results of another configuration; use a fresh output directory",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir)?;
    let rc = cfg.regime_config(method, seed);
    let state_dir = dir.join("state");
    let log_path = dir.join("log.jsonl");
    let mut trainer = if state_dir.join("state.json").exists() {
        let lines: usize = fs::read_to_string(state_dir.join("log_lines"))?
            .trim()
            .parse()
            .map_err(|_| TadaError::format(&state_dir, "unreadable log_lines"))?;
        truncate_lines(&log_path, lines)?;
        log::info!("resuming {method} seed {seed}");
        Trainer::resume(rc, data, &state_dir)?
    } else {
        truncate_lines(&log_path, 0)?;
        Trainer::new(rc, data)?
    };
    loop {
        let limit = (cfg.checkpoint_every > 0).then(|| trainer.state().step + cfg.checkpoint_every);
        let result = trainer.run_until(limit);
        append_log(&log_path, &trainer.drain_log())?;
        match result {
            Ok(true) => break,
            Ok(false) => {
                trainer.save_state(&state_dir)?;
                fs::write(state_dir.join("log_lines"), count_lines(&log_path)?.to_string())?;
            }
            Err(e) => {
                trainer.model().save(&dir.join("model.ckpt"))?;
                return Err(e);
            }
        }
    }
    let summary = trainer.summary()?;
    let model = trainer.into_model();
    model.save(&dir.join("model.ckpt"))?;
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    let metrics = evaluate(&model, data, Domain::Target, cfg.eval_split, 16)?;
    let report = MetricsReport { metrics, meta };
    write_atomic(&metrics_path, &serde_json::to_vec_pretty(&report)?)?;
    if state_dir.exists() {
        fs::remove_dir_all(&state_dir)?;
    }
    Ok(RunOutcome::Completed(report))
}

#[derive(Debug, Default)]
pub struct MatrixOutcome {
    pub reports: Vec<MetricsReport>,
    pub skipped: usize,
    /// `(method, seed, error)` for runs that did not finish.
    pub failures: Vec<(String, u64, String)>,
}

/// Runs every (method, seed) of the config, skipping completed runs, then
/// writes the report tables.
pub fn run_matrix(cfg: &ExperimentConfig, out: &Path) -> Result<MatrixOutcome> {
    cfg.validate()?;
    write_config_echo(cfg, out)?;
    let data = ensure_dataset(cfg, out)?;
    let mut outcome = MatrixOutcome::default();
    for method in cfg.method_ids()? {
        for &seed in &cfg.seeds {
            match run_one(cfg, &data, method, seed, out) {
                Ok(RunOutcome::Completed(r)) => {
                    log::info!("{method} seed {seed}: target mean error {:.3} deg", r.metrics.mean_deg);
                    outcome.reports.push(r);
                }
                Ok(RunOutcome::Skipped(r)) => {
                    outcome.skipped += 1;
                    outcome.reports.push(r);
                }
                Err(e) => {
                    log::error!("{method} seed {seed} failed: {e}");
                    outcome.failures.push((method.to_string(), seed, e.to_string()));
                }
            }
        }
    }
    write_report(out)?;
    Ok(outcome)
}
