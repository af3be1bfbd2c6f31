//! Encoder-decoder multitask network with a normal head, an anchor head, an
//! optional keypoint-depth branch, and an explicit trunk/head partition.
//!
//! Layout for an `H x H` input with widths `(c1, c2, c3)` and decoder width `c2`:
//!
//! ```text
//! stem   conv s2          -> e0  H/2   c1
//! down1  conv s2, conv    -> e1  H/4   c2
//! down2  conv s2, conv    -> e2  H/8   c3
//! down3  conv s2, conv    -> e3  H/16  c3
//! up1    deconv(e3) + lateral(e2), conv -> u1  H/8    trunk
//! up2    deconv(u1) + lateral(e1), conv -> u2  H/4    trunk   <- freeze boundary
//! up3    deconv(u2) + lateral(e0), conv -> u3  H/2    head    (features)
//! main   deconv k3 s1 -> normals H/2, anchor deconv k3 s1 -> logits/heatmaps H/2
//! depth  avgpool(u2) -> fc 256 -> fc K                 head
//! ```

mod checkpoint;
mod layers;
mod unfold;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_archive, save_archive, Archive, ArchiveEntry, CHECKPOINT_VERSION};
pub use layers::{Param, ParamGroup};
pub(crate) use layers::leaky_relu;
pub(crate) use unfold::conv2d;

use crate::datagen::AnchorKind;
use crate::error::{Result, TadaError};
use layers::{Conv, Deconv, Gain, Init, Linear};

/// Guard inside the per-pixel normalization of the main output.
pub const NORMAL_EPS: f64 = 1e-8;
/// Added to the per-channel standard deviation of an input image.
pub const INPUT_STD_EPS: f64 = 1e-3;

/// Per-image, per-channel `(x - mean) / (std + eps)` over the spatial extent.
fn standardize(images: &Tensor) -> Result<Tensor> {
    let mean = images.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = images.broadcast_sub(&mean)?;
    let std = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?.sqrt()?;
    Ok(centered.broadcast_div(&(std + INPUT_STD_EPS)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub widths: [usize; 3],
    pub anchor_kind: AnchorKind,
    /// Segmentation classes or keypoint count.
    pub anchor_channels: usize,
    pub depth_hidden: usize,
    /// Side of the freeze boundary for the keypoint-depth branch.
    pub depth_branch_group: ParamGroup,
    /// Standardize each image channel to zero mean and unit variance before
    /// the stem, removing global colour and brightness offsets.
    pub standardize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            widths: [32, 64, 128],
            anchor_kind: AnchorKind::Segmentation,
            anchor_channels: 4,
            depth_hidden: 256,
            depth_branch_group: ParamGroup::Head,
            standardize_input: true,
        }
    }
}

impl ModelConfig {
    pub fn output_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(TadaError::Config(format!(
                "model image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.anchor_channels == 0 {
            return Err(TadaError::Config("zero channel width".into()));
        }
        Ok(())
    }
}

struct Stage {
    down: Conv,
    refine: Conv,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.refine.forward(&self.down.forward(x)?.relu()?)?.relu().map_err(Into::into)
    }
}

struct Up {
    deconv: Deconv,
    lateral: Conv,
    fuse: Conv,
}

impl Up {
    fn forward(&self, coarse: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let x = (self.deconv.forward(coarse)? + self.lateral.forward(skip)?)?.relu()?;
        Ok(self.fuse.forward(&x)?.relu()?)
    }
}

/// All intermediate outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `N x 3 x H/2 x W/2`, unit length per pixel.
    pub main: Tensor,
    /// `N x A x H/2 x W/2` raw logits or heatmaps.
    pub anchor: Tensor,
    /// `N x K` keypoint depths.
    pub depth: Option<Tensor>,
    /// Second-to-last layer activations, `N x c2 x H/2 x W/2`.
    pub features: Tensor,
    /// Outputs of the first and second upsampling layers.
    pub levels: [Tensor; 2],
}

/// Feature vectors sampled at probe locations of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProbe {
    /// Probe `(row, col)` locations in feature-map coordinates.
    pub locations: Vec<(usize, usize)>,
    pub vectors: Vec<Vec<f32>>,
}

pub struct TadaNet {
    config: ModelConfig,
    device: Device,
    stem: Conv,
    stages: [Stage; 3],
    top: Conv,
    ups: [Up; 3],
    main_out: Deconv,
    anchor_out: Deconv,
    depth_fc: Option<(Linear, Linear)>,
    params: Vec<Param>,
    stage1_complete: bool,
    frozen: bool,
}

impl TadaNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            device: &device,
            params: Vec::new(),
        };
        let [c1, c2, c3] = config.widths;
        let d = c2;
        let t = ParamGroup::Trunk;
        let h = ParamGroup::Head;
        let stem = Conv::new(&mut init, "trunk.stem", t, 3, c1, 3, 2, Gain::Relu)?;
        let stage = |init: &mut Init<'_>, name: &str, cin: usize, cout: usize| -> Result<Stage> {
            Ok(Stage {
                down: Conv::new(init, &format!("{name}.down"), t, cin, cout, 3, 2, Gain::Relu)?,
                refine: Conv::new(init, &format!("{name}.refine"), t, cout, cout, 3, 1, Gain::Relu)?,
            })
        };
        let stages = [
            stage(&mut init, "trunk.enc1", c1, c2)?,
            stage(&mut init, "trunk.enc2", c2, c3)?,
            stage(&mut init, "trunk.enc3", c3, c3)?,
        ];
        let top = Conv::new(&mut init, "trunk.top", t, c3, d, 1, 1, Gain::Relu)?;
        let up = |init: &mut Init<'_>, name: &str, group: ParamGroup, skip: usize| -> Result<Up> {
            Ok(Up {
                deconv: Deconv::new(init, &format!("{name}.deconv"), group, d, d, 4, 2, Gain::Relu, vec![0.0; d])?,
                lateral: Conv::new(init, &format!("{name}.lateral"), group, skip, d, 1, 1, Gain::Relu)?,
                fuse: Conv::new(init, &format!("{name}.fuse"), group, d, d, 3, 1, Gain::Relu)?,
            })
        };
        let ups = [
            up(&mut init, "trunk.up1", t, c3)?,
            up(&mut init, "trunk.up2", t, c2)?,
            up(&mut init, "head.up3", h, c1)?,
        ];
        // Main output starts out pointing at the viewer.
        let main_out = Deconv::new(&mut init, "head.main_out", h, d, 3, 3, 1, Gain::Linear, vec![0.0, 0.0, 1.0])?;
        let a = config.anchor_channels;
        let anchor_out = Deconv::new(&mut init, "head.anchor_out", h, d, a, 3, 1, Gain::Linear, vec![0.0; a])?;
        let depth_fc = match config.anchor_kind {
            AnchorKind::Keypoints => {
                let g = config.depth_branch_group;
                let prefix = match g {
                    ParamGroup::Head => "head",
                    ParamGroup::Trunk => "trunk",
                };
                Some((
                    Linear::new(&mut init, &format!("{prefix}.depth_fc1"), g, d, config.depth_hidden, Gain::Relu)?,
                    Linear::new(&mut init, &format!("{prefix}.depth_fc2"), g, config.depth_hidden, a, Gain::Linear)?,
                ))
            }
            AnchorKind::Segmentation => None,
        };
        let params = init.params;
        Ok(TadaNet {
            config,
            device,
            stem,
            stages,
            top,
            ups,
            main_out,
            anchor_out,
            depth_fc,
            params,
            stage1_complete: false,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn forward(&self, images: &Tensor) -> Result<Outputs> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(TadaError::Shape(format!(
                "expected N x 3 x {s} x {s} images, got {:?}",
                images.dims()
            )));
        }
        let x = if self.config.standardize_input { standardize(images)? } else { images.clone() };
        let e0 = self.stem.forward(&x)?.relu()?;
        let e1 = self.stages[0].forward(&e0)?;
        let e2 = self.stages[1].forward(&e1)?;
        let e3 = self.stages[2].forward(&e2)?;
        let p3 = self.top.forward(&e3)?.relu()?;
        let u1 = self.ups[0].forward(&p3, &e2)?;
        let u2 = self.ups[1].forward(&u1, &e1)?;
        let u3 = self.ups[2].forward(&u2, &e0)?;
        let raw = self.main_out.forward(&u3)?;
        let norm = (raw.sqr()?.sum_keepdim(1)? + NORMAL_EPS)?.sqrt()?;
        let main = raw.broadcast_div(&norm)?;
        let anchor = self.anchor_out.forward(&u3)?;
        let depth = match &self.depth_fc {
            Some((fc1, fc2)) => {
                let pooled = u2.mean(D::Minus1)?.mean(D::Minus1)?;
                Some(fc2.forward(&fc1.forward(&pooled)?.relu()?)?)
            }
            None => None,
        };
        Ok(Outputs {
            main,
            anchor,
            depth,
            features: u3,
            levels: [u1, u2],
        })
    }

    /// Feature vectors of a single image at `(row, col)` feature-map locations.
    pub fn extract_features(&self, image: &Tensor, locations: &[(usize, usize)]) -> Result<FeatureProbe> {
        let image = if image.rank() == 3 { image.unsqueeze(0)? } else { image.clone() };
        if image.dim(0)? != 1 {
            return Err(TadaError::Shape("extract_features takes a single image".into()));
        }
        let fs = self.config.output_size();
        let bad: Vec<usize> = locations
            .iter()
            .enumerate()
            .filter(|(_, &(r, c))| r >= fs || c >= fs)
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(TadaError::OutOfBounds { indices: bad });
        }
        let feats = self.forward(&image)?.features.squeeze(0)?.to_dtype(DType::F32)?;
        let (ch, _, _) = feats.dims3()?;
        let flat: Vec<f32> = feats.flatten_all()?.to_vec1()?;
        let vectors = locations
            .iter()
            .map(|&(r, c)| (0..ch).map(|k| flat[k * fs * fs + r * fs + c]).collect())
            .collect();
        Ok(FeatureProbe {
            locations: locations.to_vec(),
            vectors,
        })
    }

    /// Called by the trainer once the first stage has converged.
    pub fn mark_stage1_complete(&mut self) {
        self.stage1_complete = true;
    }

    pub fn stage1_complete(&self) -> bool {
        self.stage1_complete
    }

    pub fn set_frozen(&mut self, group: ParamGroup) -> Result<()> {
        if group != ParamGroup::Head {
            return Err(TadaError::FreezeRefused("only the head group can be frozen"));
        }
        if !self.stage1_complete {
            return Err(TadaError::FreezeRefused("stage 1 has not completed"));
        }
        self.frozen = true;
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Parameters the optimizer may update.
    pub fn trainable_parameters(&self) -> Vec<&Param> {
        self.params
            .iter()
            .filter(|p| !self.frozen || p.group == ParamGroup::Trunk)
            .collect()
    }

    /// SHA-256 over names and raw values of one parameter group.
    pub fn group_checksum(&self, group: ParamGroup) -> Result<String> {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            let v: Vec<f32> = p.var.flatten_all()?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Copies of all parameter values, in parameter order.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|p| Ok(p.var.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(TadaError::Shape("snapshot has wrong parameter count".into()));
        }
        for (p, t) in self.params.iter().zip(snapshot) {
            if p.var.dims() != t.dims() {
                return Err(TadaError::Shape(format!("snapshot shape mismatch for {}", p.name)));
            }
            p.var.set(t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "model",
            "config": self.config,
            "stage1_complete": self.stage1_complete,
            "frozen": self.frozen,
        });
        let entries = self
            .params
            .iter()
            .map(|p| ArchiveEntry {
                name: p.name.clone(),
                group: Some(p.group),
                tensor: p.var.as_tensor().clone(),
            })
            .collect::<Vec<_>>();
        save_archive(path, &meta, &entries)
    }

    /// Rebuilds the network from a checkpoint, validating every shape and tag.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let archive = load_archive(path)?;
        let config: ModelConfig = serde_json::from_value(archive.meta["config"].clone())
            .map_err(|e| TadaError::format(path, format!("bad config echo: {e}")))?;
        let mut net = TadaNet::new(config, 0)?;
        net.load_params_from(&archive, path)?;
        net.stage1_complete = archive.meta["stage1_complete"].as_bool().unwrap_or(false);
        net.frozen = archive.meta["frozen"].as_bool().unwrap_or(false);
        Ok(net)
    }

    pub(crate) fn load_params_from(&mut self, archive: &Archive, path: &std::path::Path) -> Result<()> {
        for p in &self.params {
            let e = archive
                .get(&p.name)
                .ok_or_else(|| TadaError::format(path, format!("missing parameter {}", p.name)))?;
            if e.group != Some(p.group) {
                return Err(TadaError::format(path, format!("partition tag mismatch for {}", p.name)));
            }
            if e.tensor.dims() != p.var.dims() {
                return Err(TadaError::format(
                    path,
                    format!("shape {:?} != {:?} for {}", e.tensor.dims(), p.var.dims(), p.name),
                ));
            }
            p.var.set(&e.tensor)?;
        }
        Ok(())
    }
}
