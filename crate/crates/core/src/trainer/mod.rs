//! Regime controller: label visibility, paired batch sampling, the
//! optimization loop with validation-based stopping, and the two-stage
//! HeadFreeze schedule.

mod optim;
mod regime;
mod sampler;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use regime::{stage_switch_criterion, Regime, Stage, Visibility};
pub use sampler::{EpochSampler, PairedSampler};

use crate::adversarial::{AdaptHealth, AdaptHealthSnapshot, Adversary, DaMode, DiscriminatorConfig};
use crate::datagen::{downsample_classes, downsample_normals, render_keypoint_heatmaps, short_hash, splitmix, Anchor, Dataset, Domain, DomainSample, Split};
use crate::error::{Result, TadaError};
use crate::losses::{regime_loss, term_loss, AnchorTargets, LossTerm, LossWeights, MainTargets, TaskBatch};
use crate::model::{load_archive, save_archive, ArchiveEntry, ModelConfig, Outputs, ParamGroup, TadaNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageLimits {
    pub max_steps: usize,
    /// Evaluations without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
}

impl Default for StageLimits {
    fn default() -> Self {
        StageLimits {
            max_steps: 1000,
            patience: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub da_mode: DaMode,
    pub weights: LossWeights,
    /// Limits for single-stage regimes.
    pub single: StageLimits,
    /// HeadFreeze stage 1, stopped on the source-val main loss.
    pub stage1: StageLimits,
    /// HeadFreeze stage 2, stopped on the target-val anchor loss.
    pub stage2: StageLimits,
    pub rel_tol: f64,
    pub optimizer: OptimizerConfig,
    /// Learning-rate multiplier for HeadFreeze stage 2.
    pub stage2_lr_scale: f64,
    /// Samples per domain per step.
    pub batch_size: usize,
    pub eval_every: usize,
    pub log_every: usize,
    /// Freeze the head between the HeadFreeze stages.
    pub freeze_head: bool,
    /// Widths and branch placement; size and anchor fields follow the dataset.
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub seed: u64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            regime: Regime::Baseline,
            da_mode: DaMode::None,
            weights: LossWeights::default(),
            single: StageLimits::default(),
            stage1: StageLimits::default(),
            stage2: StageLimits::default(),
            rel_tol: 1e-3,
            optimizer: OptimizerConfig::default(),
            stage2_lr_scale: 1.0,
            batch_size: 8,
            eval_every: 50,
            log_every: 10,
            freeze_head: true,
            model: ModelConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            seed: 0,
        }
    }
}

impl RegimeConfig {
    /// Method label such as `head_freeze` or `baseline+feature`.
    pub fn method_name(&self) -> String {
        match self.da_mode {
            DaMode::None => self.regime.name().to_string(),
            m => format!("{}+{}", self.regime.name(), m.name()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(TadaError::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.rel_tol >= 0.0 && self.rel_tol.is_finite()) {
            return Err(TadaError::Config(format!("rel_tol {} must be >= 0", self.rel_tol)));
        }
        if !(self.stage2_lr_scale > 0.0 && self.stage2_lr_scale.is_finite()) {
            return Err(TadaError::Config(format!("stage2_lr_scale {} must be positive", self.stage2_lr_scale)));
        }
        let v = self.regime.visibility();
        if self.regime == Regime::HeadFreeze && !(v.source_anchor && v.target_anchor) {
            return Err(TadaError::Config("head_freeze needs anchor labels on both domains".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        short_hash(json.as_bytes())
    }

    fn optimizer_config(&self, stage: Stage) -> OptimizerConfig {
        let mut c = self.optimizer.clone();
        if stage == Stage::Two {
            c.lr *= self.stage2_lr_scale;
        }
        c
    }

    fn limits(&self, stage: Stage) -> StageLimits {
        match stage {
            Stage::Single => self.single,
            Stage::One => self.stage1,
            Stage::Two => self.stage2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Running(Stage),
    Done,
}

/// Everything beyond tensors needed to continue a run exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunState {
    pub step: usize,
    pub phase: Phase,
    pub phase_step: usize,
    pub pending_eval: bool,
    pub lambda: f64,
    /// Stopping signal of the current phase, one value per evaluation.
    pub history: Vec<f64>,
    pub best_score: Option<f64>,
    pub best_step: Option<usize>,
    pub stage1_steps: Option<usize>,
    pub stage1_head_checksum: Option<String>,
    pub stage1_complete: bool,
    pub frozen: bool,
    pub sampler: PairedSampler,
    pub health: Option<AdaptHealth>,
    pub model_optimizer_steps: u64,
    pub disc_optimizer_steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Train,
    Val,
    Event,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptHealthSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: String,
    pub steps: usize,
    pub stage1_steps: Option<usize>,
    pub lambda: f64,
    pub stage1_head_checksum: Option<String>,
    pub head_checksum: String,
    pub best_step: Option<usize>,
}

enum PreparedAnchor {
    Segmentation(Vec<u32>),
    Keypoints { heatmaps: Vec<f32>, depths: Vec<f32> },
}

/// A sample reduced to the labels the regime may see, at output resolution.
struct Prepared {
    image: Vec<f32>,
    main: Option<(Vec<f32>, Vec<f32>)>,
    anchor: Option<PreparedAnchor>,
}

fn prepare(samples: &[DomainSample], main: bool, anchor: bool, size: usize, sigma: f64) -> Result<Vec<Prepared>> {
    let half = size / 2;
    samples
        .iter()
        .map(|s| {
            let main = if main {
                if s.normals.iter().any(|v| !v.is_finite()) {
                    return Err(TadaError::Config(format!(
                        "visible {} main labels contain non-finite values",
                        s.domain.name()
                    )));
                }
                let (n, m) = downsample_normals(&s.normals, &s.valid_mask, size);
                Some((n, m.iter().map(|&b| b as u8 as f32).collect()))
            } else {
                None
            };
            let anchor = anchor.then(|| match &s.anchor {
                Anchor::Segmentation(seg) => PreparedAnchor::Segmentation(downsample_classes(&seg.classes, size)),
                Anchor::Keypoints(kp) => PreparedAnchor::Keypoints {
                    heatmaps: render_keypoint_heatmaps(kp, half, sigma).data,
                    depths: kp.points.iter().map(|p| p.depth).collect(),
                },
            });
            Ok(Prepared {
                image: s.image.clone(),
                main,
                anchor,
            })
        })
        .collect()
}

fn batch_of(items: &[&Prepared], size: usize, device: &Device) -> Result<TaskBatch> {
    let n = items.len();
    let half = size / 2;
    let images = Tensor::from_vec(
        items.iter().flat_map(|p| p.image.iter().copied()).collect::<Vec<f32>>(),
        (n, 3, size, size),
        device,
    )?;
    let main = if items.iter().all(|p| p.main.is_some()) {
        let normals: Vec<f32> = items.iter().flat_map(|p| p.main.as_ref().unwrap().0.iter().copied()).collect();
        let mask: Vec<f32> = items.iter().flat_map(|p| p.main.as_ref().unwrap().1.iter().copied()).collect();
        Some(MainTargets {
            normals: Tensor::from_vec(normals, (n, 3, half, half), device)?,
            mask: Tensor::from_vec(mask, (n, half, half), device)?,
        })
    } else {
        None
    };
    let anchor = match items.first().and_then(|p| p.anchor.as_ref()) {
        _ if items.iter().any(|p| p.anchor.is_none()) => None,
        Some(PreparedAnchor::Segmentation(_)) => {
            let classes = items
                .iter()
                .flat_map(|p| match &p.anchor {
                    Some(PreparedAnchor::Segmentation(c)) => c.clone(),
                    _ => unreachable!("anchor kinds are uniform within a dataset"),
                })
                .collect();
            Some(AnchorTargets::Segmentation {
                classes,
                mask: Tensor::ones((n, half, half), candle_core::DType::F32, device)?,
            })
        }
        Some(PreparedAnchor::Keypoints { heatmaps, depths }) => {
            let (hl, k) = (heatmaps.len(), depths.len());
            let mut h = Vec::with_capacity(n * hl);
            let mut d = Vec::with_capacity(n * k);
            for p in items {
                if let Some(PreparedAnchor::Keypoints { heatmaps, depths }) = &p.anchor {
                    h.extend_from_slice(heatmaps);
                    d.extend_from_slice(depths);
                }
            }
            Some(AnchorTargets::Keypoints {
                heatmaps: Tensor::from_vec(h, (n, k, half, half), device)?,
                depths: Tensor::from_vec(d, (n, k), device)?,
            })
        }
        None => None,
    };
    Ok(TaskBatch { images, main, anchor })
}

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SOURCE_ORDER: u64 = 2;
const STREAM_TARGET_ORDER: u64 = 3;
const STREAM_CALIBRATION: u64 = 4;
const STREAM_DISCRIMINATOR: u64 = 5;

pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn divergence(step: usize, detail: String) -> TadaError {
    TadaError::Divergence { step, detail }
}

const VAL_CHUNK: usize = 16;

pub struct Trainer<'a> {
    cfg: RegimeConfig,
    data: &'a Dataset,
    model: TadaNet,
    optimizer: Optimizer,
    adversary: Option<Adversary>,
    state: RunState,
    best: Option<Vec<Tensor>>,
    train: [Vec<Prepared>; 2],
    val: [Vec<Prepared>; 2],
    log: Vec<LogRecord>,
}

impl<'a> Trainer<'a> {
    /// Checks regime/dataset consistency, initializes the model and, unless
    /// fixed in the config, calibrates the anchor weight.
    pub fn new(cfg: RegimeConfig, data: &'a Dataset) -> Result<Self> {
        let mut t = Self::build(cfg, data)?;
        t.state.lambda = match t.cfg.weights.lambda_anchor {
            Some(l) => l,
            None => t.calibrate()?,
        };
        t.log.push(LogRecord {
            step: 0,
            stage: t.current_stage(),
            kind: RecordKind::Event,
            values: BTreeMap::from([("lambda_anchor".to_string(), t.state.lambda)]),
            adapt: None,
            message: Some(format!("start {}", t.cfg.method_name())),
        });
        Ok(t)
    }

    fn build(mut cfg: RegimeConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let spec = &data.spec;
        cfg.model.image_size = spec.image_size;
        cfg.model.anchor_kind = spec.anchor_kind;
        cfg.model.anchor_channels = spec.anchor_channels();
        let vis = cfg.regime.visibility();
        let size = spec.image_size;
        let sigma = spec.heatmap_sigma;
        let needs = |d: Domain, s: Split| {
            let slice = data.split(d, s);
            if slice.is_empty() {
                Err(TadaError::EmptySplit(format!("{}/{} is empty", d.name(), s.name())))
            } else {
                Ok(slice)
            }
        };
        let src_train = needs(Domain::Source, Split::Train)?;
        let tgt_train = needs(Domain::Target, Split::Train)?;
        let src_val = needs(Domain::Source, Split::Val)?;
        let uses_target_val = cfg.regime.final_terms().iter().any(|t| matches!(t, LossTerm::TargetAnchor | LossTerm::TargetMain));
        let tgt_val = if uses_target_val { needs(Domain::Target, Split::Val)? } else { &[] };
        let train = [
            prepare(src_train, vis.source_main, vis.source_anchor, size, sigma)?,
            prepare(tgt_train, vis.target_main, vis.target_anchor, size, sigma)?,
        ];
        let val = [
            prepare(src_val, vis.source_main, vis.source_anchor, size, sigma)?,
            prepare(tgt_val, vis.target_main, vis.target_anchor, size, sigma)?,
        ];
        let model = TadaNet::new(cfg.model.clone(), stream_seed(cfg.seed, STREAM_INIT))?;
        let optimizer = Optimizer::new(cfg.optimizer_config(cfg.regime.stages()[0]), trainable_vars(&model))?;
        let adversary = match cfg.da_mode {
            DaMode::None => None,
            mode => Some(Adversary::new(
                mode,
                cfg.model.widths[1],
                &cfg.discriminator,
                stream_seed(cfg.seed, STREAM_DISCRIMINATOR),
            )?),
        };
        let sampler = PairedSampler::new(
            src_train.len(),
            tgt_train.len(),
            cfg.batch_size,
            (
                stream_seed(cfg.seed, STREAM_SOURCE_ORDER),
                stream_seed(cfg.seed, STREAM_TARGET_ORDER),
            ),
        )?;
        let state = RunState {
            step: 0,
            phase: Phase::Running(cfg.regime.stages()[0]),
            phase_step: 0,
            pending_eval: true,
            lambda: 1.0,
            history: Vec::new(),
            best_score: None,
            best_step: None,
            stage1_steps: None,
            stage1_head_checksum: None,
            stage1_complete: false,
            frozen: false,
            sampler,
            health: adversary.as_ref().map(|a| a.health.clone()),
            model_optimizer_steps: 0,
            disc_optimizer_steps: 0,
        };
        Ok(Trainer {
            cfg,
            data,
            model,
            optimizer,
            adversary,
            state,
            best: None,
            train,
            val,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &RegimeConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TadaNet {
        &self.model
    }

    pub fn into_model(self) -> TadaNet {
        self.model
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn lambda(&self) -> f64 {
        self.state.lambda
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// Removes and returns the records produced since the last call.
    pub fn drain_log(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.log)
    }

    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    fn current_stage(&self) -> Stage {
        match self.state.phase {
            Phase::Running(s) => s,
            Phase::Done => *self.cfg.regime.stages().last().expect("at least one stage"),
        }
    }

    fn device(&self) -> Device {
        self.model.device().clone()
    }

    fn batch(&self, domain: Domain, split: Split, idx: &[usize]) -> Result<TaskBatch> {
        let pool = match split {
            Split::Val => &self.val[domain as usize],
            _ => &self.train[domain as usize],
        };
        let items: Vec<&Prepared> = idx.iter().map(|&i| &pool[i]).collect();
        batch_of(&items, self.data.spec.image_size, &self.device())
    }

    /// Ratio of the source main loss to the mean visible anchor loss on a
    /// batch drawn from a dedicated stream, at initialization.
    fn calibrate(&self) -> Result<f64> {
        let anchors: Vec<LossTerm> = self.cfg.regime.final_terms().into_iter().filter(|t| t.is_anchor()).collect();
        if anchors.is_empty() {
            return Ok(1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, STREAM_CALIBRATION));
        let b = self.cfg.batch_size;
        let si: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.train[0].len())).collect();
        let ti: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.train[1].len())).collect();
        let src = self.batch(Domain::Source, Split::Train, &si)?;
        let src_out = self.model.forward(&src.images)?;
        let tgt = self.batch(Domain::Target, Split::Train, &ti)?;
        let tgt_out = self.model.forward(&tgt.images)?;
        let w = &self.cfg.weights;
        let scalar = |t: LossTerm| -> Result<f64> {
            let v = term_loss(t, self.cfg.regime, (&src, &src_out), Some((&tgt, &tgt_out)), w)?;
            Ok(v.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        };
        let main = scalar(LossTerm::SourceMain)?;
        let mut anchor = 0.0;
        for &t in &anchors {
            anchor += scalar(t)?;
        }
        anchor /= anchors.len() as f64;
        let lambda = main / anchor;
        if lambda.is_finite() && lambda > 0.0 {
            Ok(lambda)
        } else {
            log::warn!("anchor weight calibration gave {lambda}; using 1");
            Ok(1.0)
        }
    }

    fn da_active(&self, stage: Stage) -> bool {
        self.adversary.is_some() && stage != Stage::One
    }

    fn train_step(&mut self, stage: Stage) -> Result<()> {
        let step = self.state.step + 1;
        let (si, ti) = self.state.sampler.next_pair();
        let terms = self.cfg.regime.terms(stage);
        let da = self.da_active(stage);
        let needs_target = da || terms.iter().any(|t| matches!(t, LossTerm::TargetAnchor | LossTerm::TargetMain));
        let src = self.batch(Domain::Source, Split::Train, &si)?;
        let src_out = self.model.forward(&src.images)?;
        let tgt: Option<(TaskBatch, Outputs)> = if needs_target {
            let b = self.batch(Domain::Target, Split::Train, &ti)?;
            let o = self.model.forward(&b.images)?;
            Some((b, o))
        } else {
            None
        };
        let tgt_ref = tgt.as_ref().map(|(b, o)| (b, o));
        let breakdown = regime_loss(
            self.cfg.regime,
            stage,
            (&src, &src_out),
            tgt_ref,
            &self.cfg.weights,
            self.state.lambda,
        )?;
        if let Some((t, v)) = breakdown.terms.iter().find(|(_, v)| !v.is_finite()) {
            return Err(divergence(step, format!("{} loss is {v}", t.name())));
        }
        let mut total = breakdown.total;
        let adv = match (&self.adversary, &tgt) {
            (Some(a), Some((_, tgt_out))) if da => Some(
                a.terms(&src_out, tgt_out, self.cfg.weights.lambda_adv)
                    .map_err(|e| match e {
                        TadaError::Divergence { detail, .. } => divergence(step, detail),
                        e => e,
                    })?,
            ),
            _ => None,
        };
        if let Some(a) = &adv {
            total = (total + &a.generator_term)?;
        }
        let grads = total.backward()?;
        self.optimizer.step(&grads)?;
        if let (Some(a), Some(terms)) = (self.adversary.as_mut(), adv.as_ref()) {
            a.update(terms, &grads)?;
            self.state.health = Some(a.health.clone());
        }
        self.state.step = step;
        self.state.phase_step += 1;
        if step % self.cfg.log_every.max(1) == 0 {
            let mut values: BTreeMap<String, f64> =
                breakdown.terms.iter().map(|(t, v)| (t.name().to_string(), *v)).collect();
            if let Some(a) = &adv {
                values.insert("disc_loss".into(), a.disc_loss);
                values.insert("disc_accuracy".into(), a.accuracy);
            }
            self.log.push(LogRecord {
                step,
                stage,
                kind: RecordKind::Train,
                values,
                adapt: self.adversary.as_ref().map(|a| a.health.snapshot()),
                message: None,
            });
        }
        Ok(())
    }

    /// Validation value of one term over the whole split, weighting chunks by
    /// their sample count.
    fn val_term(&self, term: LossTerm) -> Result<f64> {
        let domain = match term {
            LossTerm::SourceMain | LossTerm::SourceAnchor => Domain::Source,
            LossTerm::TargetAnchor | LossTerm::TargetMain => Domain::Target,
        };
        let n = self.val[domain as usize].len();
        let mut acc = 0.0;
        for start in (0..n).step_by(VAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + VAL_CHUNK).min(n)).collect();
            let b = self.batch(domain, Split::Val, &idx)?;
            let o = self.model.forward(&b.images)?;
            let pair = (&b, &o);
            let (src, tgt) = match domain {
                Domain::Source => (pair, None),
                Domain::Target => (pair, Some(pair)),
            };
            let v = term_loss(term, self.cfg.regime, src, tgt, &self.cfg.weights)?;
            acc += v.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * idx.len() as f64;
        }
        Ok(acc / n as f64)
    }

    /// Returns (selection score, stopping signal, per-term values).
    fn validate(&self, stage: Stage) -> Result<(f64, f64, BTreeMap<String, f64>)> {
        let mut values = BTreeMap::new();
        let mut score = 0.0;
        for term in self.cfg.regime.terms(stage) {
            let v = self.val_term(term)?;
            score += if term.is_anchor() { self.state.lambda * v } else { v };
            values.insert(format!("val_{}", term.name()), v);
        }
        let signal = match stage {
            Stage::Single => score,
            Stage::One => values["val_source_main"],
            Stage::Two => values["val_target_anchor"],
        };
        values.insert("val_score".into(), score);
        Ok((score, signal, values))
    }

    fn end_phase(&mut self, stage: Stage) -> Result<()> {
        if let Some(best) = self.best.take() {
            self.model.restore(&best)?;
        }
        self.log.push(LogRecord {
            step: self.state.step,
            stage,
            kind: RecordKind::Event,
            values: BTreeMap::new(),
            adapt: None,
            message: Some(format!(
                "stage end after {} steps, best at step {:?}",
                self.state.phase_step, self.state.best_step
            )),
        });
        self.state.phase = match stage {
            Stage::Single | Stage::Two => Phase::Done,
            Stage::One => {
                self.model.mark_stage1_complete();
                self.state.stage1_complete = true;
                if self.cfg.freeze_head {
                    self.model.set_frozen(ParamGroup::Head)?;
                    self.state.frozen = true;
                }
                self.state.stage1_head_checksum = Some(self.model.group_checksum(ParamGroup::Head)?);
                self.state.stage1_steps = Some(self.state.phase_step);
                let keep: Vec<String> = trainable_vars(&self.model).into_iter().map(|(n, _)| n).collect();
                self.optimizer.restrict(&keep);
                self.optimizer.set_lr(self.cfg.optimizer_config(Stage::Two).lr);
                Phase::Running(Stage::Two)
            }
        };
        self.state.phase_step = 0;
        self.state.history.clear();
        self.state.best_score = None;
        self.state.pending_eval = true;
        Ok(())
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<TrainSummary> {
        self.run_until(None)?;
        self.summary()
    }

    /// Advances until done or until `limit` optimization steps have been
    /// taken in total; returns whether the run is done. On divergence the
    /// best parameters seen so far are restored before the error is returned.
    pub fn run_until(&mut self, limit: Option<usize>) -> Result<bool> {
        match self.advance(limit) {
            Err(e @ TadaError::Divergence { .. }) => {
                if let Some(best) = &self.best {
                    self.model.restore(best)?;
                }
                self.log.push(LogRecord {
                    step: self.state.step,
                    stage: self.current_stage(),
                    kind: RecordKind::Event,
                    values: BTreeMap::new(),
                    adapt: None,
                    message: Some(format!("aborted: {e}")),
                });
                Err(e)
            }
            other => other,
        }
    }

    fn advance(&mut self, limit: Option<usize>) -> Result<bool> {
        loop {
            let Phase::Running(stage) = self.state.phase else {
                return Ok(true);
            };
            let limits = self.cfg.limits(stage);
            if limits.max_steps == 0 {
                self.end_phase(stage)?;
                continue;
            }
            if self.state.pending_eval {
                self.state.pending_eval = false;
                let (score, signal, values) = self.validate(stage)?;
                if !score.is_finite() {
                    return Err(divergence(self.state.step, format!("validation score is {score}")));
                }
                if self.state.best_score.is_none_or(|b| score < b) {
                    self.state.best_score = Some(score);
                    self.state.best_step = Some(self.state.step);
                    self.best = Some(self.model.snapshot()?);
                }
                self.state.history.push(signal);
                self.log.push(LogRecord {
                    step: self.state.step,
                    stage,
                    kind: RecordKind::Val,
                    values,
                    adapt: None,
                    message: None,
                });
                if self.state.phase_step >= limits.max_steps
                    || stage_switch_criterion(&self.state.history, limits.patience, self.cfg.rel_tol)
                {
                    self.end_phase(stage)?;
                }
                continue;
            }
            if limit.is_some_and(|l| self.state.step >= l) {
                return Ok(false);
            }
            self.train_step(stage)?;
            if self.state.phase_step % self.cfg.eval_every == 0 || self.state.phase_step >= limits.max_steps {
                self.state.pending_eval = true;
            }
        }
    }

    pub fn summary(&self) -> Result<TrainSummary> {
        Ok(TrainSummary {
            method: self.cfg.method_name(),
            steps: self.state.step,
            stage1_steps: self.state.stage1_steps,
            lambda: self.state.lambda,
            stage1_head_checksum: self.state.stage1_head_checksum.clone(),
            head_checksum: self.model.group_checksum(ParamGroup::Head)?,
            best_step: self.state.best_step,
        })
    }

    /// Writes `state.json` and `state.ckpt` into `dir`.
    pub fn save_state(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.state.model_optimizer_steps = self.optimizer.steps();
        self.state.disc_optimizer_steps = self.adversary.as_ref().map_or(0, |a| a.optimizer().steps());
        let mut entries: Vec<ArchiveEntry> = self
            .model
            .params()
            .iter()
            .map(|p| ArchiveEntry {
                name: format!("model.{}", p.name),
                group: Some(p.group),
                tensor: p.var.as_tensor().clone(),
            })
            .collect();
        if let Some(best) = &self.best {
            for (p, t) in self.model.params().iter().zip(best) {
                entries.push(ArchiveEntry {
                    name: format!("best.{}", p.name),
                    group: Some(p.group),
                    tensor: t.clone(),
                });
            }
        }
        entries.extend(self.optimizer.export("opt"));
        if let Some(a) = &self.adversary {
            for (i, v) in a.vars().iter().enumerate() {
                entries.push(ArchiveEntry {
                    name: format!("disc.{i}"),
                    group: None,
                    tensor: v.as_tensor().clone(),
                });
            }
            entries.extend(a.optimizer().export("dopt"));
        }
        let meta = serde_json::json!({ "kind": "run_state", "config_hash": self.cfg.hash() });
        save_archive(&dir.join("state.ckpt"), &meta, &entries)?;
        let tmp = dir.join("state.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.state)?)?;
        std::fs::rename(tmp, dir.join("state.json"))?;
        Ok(())
    }

    /// Rebuilds a trainer from [`Trainer::save_state`] output; the continued
    /// run follows the same trajectory as an uninterrupted one.
    pub fn resume(cfg: RegimeConfig, data: &'a Dataset, dir: &Path) -> Result<Self> {
        let mut t = Self::build(cfg, data)?;
        let ckpt = dir.join("state.ckpt");
        let archive = load_archive(&ckpt)?;
        if archive.meta["config_hash"].as_str() != Some(t.cfg.hash().as_str()) {
            return Err(TadaError::MetadataMismatch(format!(
                "{} was written by a different configuration",
                ckpt.display()
            )));
        }
        let state: RunState = serde_json::from_slice(&std::fs::read(dir.join("state.json"))?)?;
        let fetch = |name: String| -> Result<Tensor> {
            archive
                .get(&name)
                .map(|e| e.tensor.clone())
                .ok_or_else(|| TadaError::format(&ckpt, format!("missing {name}")))
        };
        let current: Vec<Tensor> = t
            .model
            .params()
            .iter()
            .map(|p| fetch(format!("model.{}", p.name)))
            .collect::<Result<_>>()?;
        t.model.restore(&current)?;
        if archive.get(&format!("best.{}", t.model.params()[0].name)).is_some() {
            t.best = Some(
                t.model
                    .params()
                    .iter()
                    .map(|p| fetch(format!("best.{}", p.name)))
                    .collect::<Result<_>>()?,
            );
        }
        if state.stage1_complete {
            t.model.mark_stage1_complete();
        }
        if state.frozen {
            t.model.set_frozen(ParamGroup::Head)?;
        }
        let stage = match state.phase {
            Phase::Running(stage) => stage,
            Phase::Done => *t.cfg.regime.stages().last().expect("at least one stage"),
        };
        t.optimizer = Optimizer::new(t.cfg.optimizer_config(stage), trainable_vars(&t.model))?;
        t.optimizer.import("opt", &archive, state.model_optimizer_steps)?;
        if let Some(a) = t.adversary.as_mut() {
            for (i, v) in a.vars().iter().enumerate() {
                v.set(&fetch(format!("disc.{i}"))?)?;
            }
            a.optimizer_mut().import("dopt", &archive, state.disc_optimizer_steps)?;
            if let Some(h) = &state.health {
                a.health = h.clone();
            }
        }
        t.state = state;
        Ok(t)
    }
}

fn trainable_vars(model: &TadaNet) -> Vec<(String, candle_core::Var)> {
    model
        .trainable_parameters()
        .into_iter()
        .map(|p| (p.name.clone(), p.var.clone()))
        .collect()
}
