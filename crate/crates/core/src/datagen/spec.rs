use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TadaError};

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Segmentation,
    Keypoints,
}

/// Appearance parameters of one domain. Geometry labels never depend on these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Style {
    pub albedo: [f64; 3],
    /// Cycles of the albedo texture across the image width.
    pub texture_frequency: f64,
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    /// Light elevation above the image plane, degrees.
    pub light_elevation_deg: Range,
    /// Light azimuth in the image plane, degrees, counter-clockwise from +x.
    pub light_azimuth_deg: Range,
    pub light_intensity: f64,
    pub ambient: f64,
}

impl Style {
    /// Clean, evenly lit renders.
    pub fn synthetic() -> Self {
        Style {
            albedo: [0.8, 0.8, 0.8],
            texture_frequency: 1.0,
            texture_amplitude: 0.05,
            noise_sigma: 0.0,
            light_elevation_deg: Range::new(50.0, 70.0),
            light_azimuth_deg: Range::new(100.0, 170.0),
            light_intensity: 0.8,
            ambient: 0.15,
        }
    }

    /// Textured, noisy, tinted renders with a different lighting distribution.
    pub fn real_like() -> Self {
        Style {
            albedo: [0.85, 0.6, 0.45],
            texture_frequency: 6.0,
            texture_amplitude: 0.35,
            noise_sigma: 0.04,
            light_elevation_deg: Range::new(35.0, 60.0),
            light_azimuth_deg: Range::new(-20.0, 60.0),
            light_intensity: 0.9,
            ambient: 0.1,
        }
    }
}

impl Default for Style {
    fn default() -> Self {
        Style::synthetic()
    }
}

/// Global scene tilt distribution per domain, degrees about the image y axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseShift {
    pub source_tilt_deg: Range,
    pub target_tilt_deg: Range,
}

impl PoseShift {
    pub fn matched() -> Self {
        PoseShift {
            source_tilt_deg: Range::new(-10.0, 10.0),
            target_tilt_deg: Range::new(-10.0, 10.0),
        }
    }

    pub fn mismatched() -> Self {
        PoseShift {
            source_tilt_deg: Range::new(-40.0, 40.0),
            target_tilt_deg: Range::new(-10.0, 10.0),
        }
    }
}

impl Default for PoseShift {
    fn default() -> Self {
        PoseShift::mismatched()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

/// Parameters of the paired-domain procedural generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyWorldSpec {
    pub image_size: usize,
    /// Scenes per split, per domain.
    pub scenes: SplitSizes,
    pub primitives: CountRange,
    /// Multiplier on every primitive height.
    pub relief: f64,
    pub anchor_kind: AnchorKind,
    pub n_keypoints: usize,
    /// Heatmap Gaussian width in output-resolution pixels.
    pub heatmap_sigma: f64,
    pub n_classes: usize,
    pub source_style: Style,
    pub target_style: Style,
    pub pose_shift: PoseShift,
    /// Fraction of target pixels removed from the validity mask in random blobs.
    pub target_dropout: f64,
    /// Border width in pixels excluded from the validity mask.
    pub border: usize,
    pub seed: u64,
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        ToyWorldSpec {
            image_size: 64,
            scenes: SplitSizes {
                train: 256,
                val: 32,
                test: 64,
            },
            primitives: CountRange { min: 2, max: 5 },
            relief: 1.0,
            anchor_kind: AnchorKind::Segmentation,
            n_keypoints: 5,
            heatmap_sigma: 1.5,
            n_classes: super::scene::PrimitiveKind::ALL.len() + 1,
            source_style: Style::synthetic(),
            target_style: Style::real_like(),
            pose_shift: PoseShift::mismatched(),
            target_dropout: 0.05,
            border: 2,
            seed: 0,
        }
    }
}

impl ToyWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TadaError::InvalidSpec(msg));
        // The encoder halves the resolution four times.
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return bad(format!(
                "image_size must be >= 16 and divisible by 16, got {}",
                self.image_size
            ));
        }
        if !(self.relief > 0.0 && self.relief.is_finite()) {
            return bad(format!("relief must be positive, got {}", self.relief));
        }
        if 2 * self.border >= self.image_size {
            return bad(format!("border {} leaves no interior", self.border));
        }
        match self.anchor_kind {
            AnchorKind::Keypoints if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) => {
                return bad(format!("heatmap_sigma must be positive, got {}", self.heatmap_sigma));
            }
            AnchorKind::Keypoints if self.n_keypoints < 3 => {
                return bad(format!("need at least 3 keypoints, got {}", self.n_keypoints));
            }
            AnchorKind::Segmentation
                if self.n_classes != super::scene::PrimitiveKind::ALL.len() + 1 =>
            {
                return bad(format!(
                    "segmentation uses background plus one class per primitive kind ({}), got n_classes = {}",
                    super::scene::PrimitiveKind::ALL.len() + 1,
                    self.n_classes
                ));
            }
            _ => {}
        }
        if self.primitives.min > self.primitives.max {
            return bad("primitive count range is empty".into());
        }
        if !(0.0..0.5).contains(&self.target_dropout) {
            return bad(format!("target_dropout {} outside [0, 0.5)", self.target_dropout));
        }
        for (name, r) in [
            ("source tilt", self.pose_shift.source_tilt_deg),
            ("target tilt", self.pose_shift.target_tilt_deg),
        ] {
            if r.lo > r.hi || r.lo <= -80.0 || r.hi >= 80.0 {
                return bad(format!("{name} range {r:?} invalid"));
            }
        }
        for (name, s) in [("source", &self.source_style), ("target", &self.target_style)] {
            let finite = s.albedo.iter().all(|a| a.is_finite() && *a >= 0.0)
                && s.noise_sigma >= 0.0
                && s.texture_amplitude >= 0.0
                && s.texture_amplitude < 1.0
                && s.light_intensity >= 0.0
                && s.ambient >= 0.0;
            if !finite || s.light_elevation_deg.lo > s.light_elevation_deg.hi {
                return bad(format!("{name} style has invalid parameters"));
            }
        }
        Ok(())
    }

    /// Number of anchor channels the network must emit.
    pub fn anchor_channels(&self) -> usize {
        match self.anchor_kind {
            AnchorKind::Segmentation => self.n_classes,
            AnchorKind::Keypoints => self.n_keypoints,
        }
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        short_hash(json.as_bytes())
    }
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}
