//! Unsupervised adaptation add-ons: gradient reversal with a feature-level
//! domain classifier (optionally at two decoder depths) and an output-space
//! discriminator on the normal map.

use std::collections::VecDeque;

use candle_core::{backprop::GradStore, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TadaError};
use crate::model::Outputs;
use crate::trainer::{Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaMode {
    None,
    /// Domain classifier on the second-to-last layer through gradient reversal.
    Feature,
    /// Discriminator on the normal map with a fooling loss on target outputs.
    Output,
    /// Domain classifiers after the first and second upsampling layers.
    MultiLevel,
}

impl DaMode {
    pub fn name(self) -> &'static str {
        match self {
            DaMode::None => "none",
            DaMode::Feature => "feature",
            DaMode::Output => "output",
            DaMode::MultiLevel => "multi_level",
        }
    }
}

struct GradReverse {
    scale: f64,
}

impl CustomOp1 for GradReverse {
    fn name(&self) -> &'static str {
        "grad-reverse"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("grad-reverse needs a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            _ => return Err(candle_core::Error::Msg("grad-reverse supports f32 and f64".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.affine(-self.scale, 0.0)?))
    }
}

/// Identity on the forward pass; multiplies the incoming gradient by
/// `-lambda_adv` on the backward pass.
pub fn grad_reverse(x: &Tensor, lambda_adv: f64) -> Result<Tensor> {
    if !(lambda_adv >= 0.0 && lambda_adv.is_finite()) {
        return Err(TadaError::Config(format!("lambda_adv {lambda_adv} must be >= 0")));
    }
    Ok(x.contiguous()?.apply_op1(GradReverse { scale: lambda_adv })?)
}

/// Mean binary cross-entropy of logits against a constant label.
pub fn bce_with_logits(logits: &Tensor, label: f64) -> Result<Tensor> {
    // max(z, 0) - z y + log(1 + exp(-|z|))
    let abs = (logits.relu()? + logits.neg()?.relu()?)?;
    let soft = (abs.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * label)?)? + soft)?.mean_all()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub optimizer: OptimizerConfig,
    pub leaky_slope: f64,
    /// Window of the rolling accuracy.
    pub health_window: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            width: 64,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-4,
                beta1: 0.5,
                ..OptimizerConfig::default()
            },
            leaky_slope: 0.2,
            health_window: 50,
        }
    }
}

struct Layer {
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

impl Layer {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let n = c_out * c_in * k * k;
        let w: Vec<f32> = (0..n).map(|_| rand::Rng::random_range(rng, -bound..bound) as f32).collect();
        let dev = candle_core::Device::Cpu;
        Ok(Layer {
            w: Var::from_tensor(&Tensor::from_vec(w, (c_out, c_in, k, k), &dev)?)?,
            b: Var::zeros(c_out, DType::F32, &dev)?,
            stride,
            pad: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.b.dim(0)?;
        Ok(crate::model::conv2d(x, &self.w, self.stride, self.pad)?.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

/// A binary domain classifier emitting one logit per spatial location.
struct DiscNet {
    layers: Vec<Layer>,
    slope: f64,
    /// Scale each input location to unit length first. The normal head is
    /// scale-invariant, so without this the reversed gradient can inflate
    /// feature magnitudes at no cost to the task loss until they overflow.
    unit_input: bool,
}

/// Guard inside the per-location normalization of discriminator inputs.
const UNIT_EPS: f64 = 1e-8;

impl DiscNet {
    /// Three strided convolutions over an output map.
    fn conv(rng: &mut ChaCha8Rng, c_in: usize, width: usize, slope: f64) -> Result<Self> {
        Ok(DiscNet {
            layers: vec![
                Layer::new(rng, c_in, width, 3, 2)?,
                Layer::new(rng, width, width, 3, 2)?,
                Layer::new(rng, width, 1, 3, 1)?,
            ],
            slope,
            unit_input: false,
        })
    }

    /// Per-location MLP over feature vectors (1x1 convolutions).
    fn mlp(rng: &mut ChaCha8Rng, c_in: usize, width: usize, slope: f64) -> Result<Self> {
        Ok(DiscNet {
            layers: vec![
                Layer::new(rng, c_in, width, 1, 1)?,
                Layer::new(rng, width, width, 1, 1)?,
                Layer::new(rng, width, 1, 1, 1)?,
            ],
            slope,
            unit_input: true,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = if self.unit_input {
            let norm = (x.sqr()?.sum_keepdim(1)? + UNIT_EPS)?.sqrt()?;
            x.broadcast_div(&norm)?
        } else {
            x.clone()
        };
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = crate::model::leaky_relu(&h, self.slope)?;
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = &Var> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }
}

/// Rolling discriminator accuracy; adaptation is considered healthy when the
/// accuracy is frequently below 55%.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptHealth {
    window: usize,
    history: VecDeque<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptHealthSnapshot {
    pub rolling_accuracy: f64,
    pub fraction_below_55: f64,
    pub samples: usize,
}

impl AdaptHealth {
    pub const THRESHOLD: f64 = 0.55;

    pub fn new(window: usize) -> Self {
        AdaptHealth {
            window: window.max(1),
            history: VecDeque::new(),
        }
    }

    pub fn record(&mut self, accuracy: f64) {
        self.history.push_back(accuracy.clamp(0.0, 1.0));
        while self.history.len() > self.window {
            self.history.pop_front();
        }
    }

    pub fn snapshot(&self) -> AdaptHealthSnapshot {
        let n = self.history.len();
        let (mean, below) = if n == 0 {
            (0.0, 0.0)
        } else {
            (
                self.history.iter().sum::<f64>() / n as f64,
                self.history.iter().filter(|&&a| a < Self::THRESHOLD).count() as f64 / n as f64,
            )
        };
        AdaptHealthSnapshot {
            rolling_accuracy: mean,
            fraction_below_55: below,
            samples: n,
        }
    }
}

/// Result of the adversarial part of one training step.
pub struct AdversarialTerms {
    /// Term to add to the generator objective before its backward pass.
    pub generator_term: Tensor,
    /// Discriminator cross-entropy on both domains.
    pub disc_loss: f64,
    /// Domain classification accuracy over all locations of both batches.
    pub accuracy: f64,
    /// Loss whose gradient w.r.t. the discriminator parameters is the
    /// discriminator update; `None` when it shares the generator backward pass.
    disc_objective: Option<Tensor>,
}

/// Discriminator(s), their optimizer and health tracking.
pub struct Adversary {
    mode: DaMode,
    nets: Vec<DiscNet>,
    optimizer: Optimizer,
    pub health: AdaptHealth,
}

const SOURCE_LABEL: f64 = 1.0;
const TARGET_LABEL: f64 = 0.0;

impl Adversary {
    /// `feature_channels` is the decoder width; normal maps have three channels.
    pub fn new(mode: DaMode, feature_channels: usize, config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let s = config.leaky_slope;
        let nets = match mode {
            DaMode::None => return Err(TadaError::Config("no discriminator for da_mode none".into())),
            DaMode::Feature => vec![DiscNet::mlp(&mut rng, feature_channels, w, s)?],
            DaMode::MultiLevel => vec![
                DiscNet::mlp(&mut rng, feature_channels, w, s)?,
                DiscNet::mlp(&mut rng, feature_channels, w, s)?,
            ],
            DaMode::Output => vec![DiscNet::conv(&mut rng, 3, w, s)?],
        };
        let vars = nets
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.vars().enumerate().map(move |(j, v)| (format!("disc{i}.{j}"), v.clone())))
            .collect();
        Ok(Adversary {
            mode,
            nets,
            optimizer: Optimizer::new(config.optimizer.clone(), vars)?,
            health: AdaptHealth::new(config.health_window),
        })
    }

    pub fn mode(&self) -> DaMode {
        self.mode
    }

    pub fn vars(&self) -> Vec<Var> {
        self.nets.iter().flat_map(|n| n.vars().cloned()).collect()
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn optimizer_mut(&mut self) -> &mut Optimizer {
        &mut self.optimizer
    }

    fn inputs<'a>(&self, out: &'a Outputs) -> Vec<&'a Tensor> {
        match self.mode {
            DaMode::Feature => vec![&out.features],
            DaMode::MultiLevel => vec![&out.levels[0], &out.levels[1]],
            DaMode::Output => vec![&out.main],
            DaMode::None => vec![],
        }
    }

    /// Domain logits for raw inputs, one tensor per discriminator.
    pub fn logits(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        self.nets.iter().zip(inputs).map(|(n, x)| n.forward(x)).collect()
    }

    fn accuracy(src_logits: &[Tensor], tgt_logits: &[Tensor]) -> Result<f64> {
        let (mut right, mut total) = (0usize, 0usize);
        for (s, t) in src_logits.iter().zip(tgt_logits) {
            let s: Vec<f32> = s.flatten_all()?.to_vec1()?;
            let t: Vec<f32> = t.flatten_all()?.to_vec1()?;
            right += s.iter().filter(|&&z| z > 0.0).count() + t.iter().filter(|&&z| z <= 0.0).count();
            total += s.len() + t.len();
        }
        Ok(right as f64 / total.max(1) as f64)
    }

    /// Builds the adversarial terms for one paired batch. The caller adds
    /// `generator_term` to the task loss, runs backward, steps the model
    /// optimizer, then calls [`Adversary::update`] with the same gradients.
    pub fn terms(&self, source: &Outputs, target: &Outputs, lambda_adv: f64) -> Result<AdversarialTerms> {
        let src_in = self.inputs(source);
        let tgt_in = self.inputs(target);
        match self.mode {
            DaMode::Feature | DaMode::MultiLevel => {
                let mut total: Option<Tensor> = None;
                let (mut sl, mut tl) = (Vec::new(), Vec::new());
                for (net, (s, t)) in self.nets.iter().zip(src_in.iter().zip(&tgt_in)) {
                    let ls = net.forward(&grad_reverse(s, lambda_adv)?)?;
                    let lt = net.forward(&grad_reverse(t, lambda_adv)?)?;
                    let l = ((bce_with_logits(&ls, SOURCE_LABEL)? + bce_with_logits(&lt, TARGET_LABEL)?)? * 0.5)?;
                    total = Some(match total {
                        Some(x) => (x + l)?,
                        None => l,
                    });
                    sl.push(ls);
                    tl.push(lt);
                }
                let total = (total.expect("at least one discriminator") / self.nets.len() as f64)?;
                let disc_loss = total.to_scalar::<f32>()? as f64;
                check_finite(disc_loss)?;
                Ok(AdversarialTerms {
                    generator_term: total,
                    disc_loss,
                    accuracy: Self::accuracy(&sl, &tl)?,
                    disc_objective: None,
                })
            }
            DaMode::Output => {
                let net = &self.nets[0];
                let fool = (bce_with_logits(&net.forward(tgt_in[0])?, SOURCE_LABEL)? * lambda_adv)?;
                let ls = net.forward(&src_in[0].detach())?;
                let lt = net.forward(&tgt_in[0].detach())?;
                let d = ((bce_with_logits(&ls, SOURCE_LABEL)? + bce_with_logits(&lt, TARGET_LABEL)?)? * 0.5)?;
                let disc_loss = d.to_scalar::<f32>()? as f64;
                check_finite(disc_loss)?;
                check_finite(fool.to_scalar::<f32>()? as f64)?;
                Ok(AdversarialTerms {
                    generator_term: fool,
                    disc_loss,
                    accuracy: Self::accuracy(&[ls], &[lt])?,
                    disc_objective: Some(d),
                })
            }
            DaMode::None => Err(TadaError::Config("da_mode none has no adversarial terms".into())),
        }
    }

    /// Applies the discriminator update. `shared` holds the gradients of the
    /// generator backward pass (used when the reversal layer shares it).
    pub fn update(&mut self, terms: &AdversarialTerms, shared: &GradStore) -> Result<()> {
        self.health.record(terms.accuracy);
        match &terms.disc_objective {
            Some(obj) => {
                let grads = obj.backward()?;
                self.optimizer.step(&grads)
            }
            None => self.optimizer.step(shared),
        }
    }
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TadaError::Divergence {
            step: 0,
            detail: format!("adversarial loss is {v}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn forward_is_identity() {
        let x = Tensor::new(&[[1.5f32, -2.0, 0.1], [3.0, 4.0, -0.0]], &Device::Cpu).unwrap();
        let y = grad_reverse(&x, 0.3).unwrap();
        assert_eq!(x.to_vec2::<f32>().unwrap(), y.to_vec2::<f32>().unwrap());
        let xt = x.t().unwrap();
        assert_eq!(grad_reverse(&xt, 1.0).unwrap().to_vec2::<f32>().unwrap(), xt.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let x = Tensor::new(&[1f32], &Device::Cpu).unwrap();
        assert!(grad_reverse(&x, -0.1).is_err());
    }

    #[test]
    fn bce_matches_closed_form() {
        let z = Tensor::new(&[0.0f64, 2.0, -3.0], &Device::Cpu).unwrap();
        let expect = |y: f64| {
            [0.0f64, 2.0, -3.0]
                .iter()
                .map(|&z| -(y * (1.0 / (1.0 + (-z).exp())).ln() + (1.0 - y) * (1.0 / (1.0 + z.exp())).ln()))
                .sum::<f64>()
                / 3.0
        };
        for y in [0.0, 1.0] {
            let got = bce_with_logits(&z, y).unwrap().to_scalar::<f64>().unwrap();
            assert!((got - expect(y)).abs() < 1e-12);
        }
    }

    fn train_disc(adv: &mut Adversary, src: &Tensor, tgt: &Tensor, steps: usize) -> (f64, f64) {
        let mut last = (0.0, 0.0);
        for _ in 0..steps {
            let ls = adv.nets[0].forward(src).unwrap();
            let lt = adv.nets[0].forward(tgt).unwrap();
            let loss = ((bce_with_logits(&ls, SOURCE_LABEL).unwrap() + bce_with_logits(&lt, TARGET_LABEL).unwrap()).unwrap() * 0.5).unwrap();
            last = (
                Adversary::accuracy(&[ls], &[lt]).unwrap(),
                loss.to_scalar::<f32>().unwrap() as f64,
            );
            let g = loss.backward().unwrap();
            adv.optimizer.step(&g).unwrap();
        }
        last
    }

    fn gaussian_features(n: usize, d: usize, shift: f64, seed: u64) -> (Tensor, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let v: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng) + shift).collect();
        // Bayes rule for N(+s, I) vs N(-s, I) is the sign of the coordinate sum.
        let sums = (0..n).map(|i| (0..d).map(|k| v[i * d + k]).sum()).collect();
        let t = Tensor::from_vec(v.iter().map(|&x| x as f32).collect::<Vec<_>>(), (n, d), &Device::Cpu)
            .unwrap()
            .reshape((n, d, 1, 1))
            .unwrap();
        (t, sums)
    }

    #[test]
    fn separable_features_are_learned_to_oracle_accuracy() {
        let cfg = DiscriminatorConfig {
            width: 16,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-2,
                ..OptimizerConfig::default()
            },
            ..DiscriminatorConfig::default()
        };
        let mut adv = Adversary::new(DaMode::Feature, 4, &cfg, 1).unwrap();
        let (src, src_sums) = gaussian_features(128, 4, 1.5, 2);
        let (tgt, tgt_sums) = gaussian_features(128, 4, -1.5, 3);
        let oracle = (src_sums.iter().filter(|&&s| s > 0.0).count() + tgt_sums.iter().filter(|&&s| s <= 0.0).count())
            as f64
            / 256.0;
        let (acc, _) = train_disc(&mut adv, &src, &tgt, 300);
        assert!(oracle > 0.98);
        assert!(acc >= oracle - 0.02, "disc {acc} vs oracle {oracle}");
    }

    #[test]
    fn identical_domains_sit_at_chance() {
        let cfg = DiscriminatorConfig {
            width: 8,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-2,
                ..OptimizerConfig::default()
            },
            ..DiscriminatorConfig::default()
        };
        let mut adv = Adversary::new(DaMode::Feature, 4, &cfg, 5).unwrap();
        let (x, _) = gaussian_features(64, 4, 0.0, 7);
        let (acc, loss) = train_disc(&mut adv, &x, &x, 200);
        assert_eq!(acc, 0.5);
        assert!((loss - 2f64.ln()).abs() < 0.02, "{loss}");
    }

    #[test]
    fn health_tracks_rolling_window() {
        let mut h = AdaptHealth::new(4);
        for a in [0.9, 0.5, 0.4, 0.6, 0.52] {
            h.record(a);
        }
        let s = h.snapshot();
        assert_eq!(s.samples, 4);
        assert!((s.rolling_accuracy - 0.505).abs() < 1e-12);
        assert!((s.fraction_below_55 - 0.75).abs() < 1e-12);
    }
}
