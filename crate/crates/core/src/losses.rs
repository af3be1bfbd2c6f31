//! Supervised task losses and their per-regime composition.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TadaError};
use crate::model::Outputs;
use crate::trainer::{Regime, Stage};

/// Loss weights; `lambda_anchor = None` means "calibrate at run start".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_anchor: Option<f64>,
    pub lambda_adv: f64,
    pub heatmap_scale: f64,
    pub depth_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_anchor: None,
            lambda_adv: 0.1,
            heatmap_scale: 1.0,
            depth_scale: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if self.lambda_anchor.is_some_and(|l| !ok(l))
            || !ok(self.lambda_adv)
            || !ok(self.heatmap_scale)
            || !ok(self.depth_scale)
        {
            return Err(TadaError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn mask_count(mask: &Tensor, what: &'static str) -> Result<f64> {
    let n = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if n <= 0.0 {
        return Err(TadaError::EmptyMask(what));
    }
    Ok(n)
}

/// Masked mean of `1 - <pred, gt>` over `N x 3 x H x W` normal maps; `mask` is
/// `N x H x W` with 0/1 entries in the prediction dtype.
pub fn cosine_normal_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(TadaError::Shape(format!("normals {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let n = mask_count(mask, "cosine loss")?;
    let dot = (pred * gt)?.sum(1)?;
    let per_pixel = dot.affine(-1.0, 1.0)?;
    Ok(((per_pixel * mask)?.sum_all()? / n)?)
}

/// Heatmap MSE plus depth MSE, equally weighted.
pub fn keypoint_loss(
    pred_heatmaps: &Tensor,
    pred_depths: &Tensor,
    gt_heatmaps: &Tensor,
    gt_depths: &Tensor,
) -> Result<Tensor> {
    Ok((heatmap_mse(pred_heatmaps, gt_heatmaps)? + depth_mse(pred_depths, gt_depths)?)?)
}

pub fn heatmap_mse(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(TadaError::Shape(format!("heatmaps {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok((pred - gt)?.sqr()?.mean_all()?)
}

pub fn depth_mse(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(TadaError::Shape(format!("depths {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok((pred - gt)?.sqr()?.mean_all()?)
}

/// Masked mean cross-entropy of `N x C x H x W` logits against row-major class ids.
pub fn segmentation_loss(logits: &Tensor, classes: &[u32], mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if classes.len() != n * h * w {
        return Err(TadaError::Shape(format!(
            "{} labels for {n} x {h} x {w} logits",
            classes.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k as usize >= c) {
        return Err(TadaError::LabelOutOfRange { label: bad, classes: c });
    }
    let count = mask_count(mask, "segmentation loss")?;
    let mut onehot = vec![0f64; n * c * h * w];
    for img in 0..n {
        for p in 0..h * w {
            let k = classes[img * h * w + p] as usize;
            onehot[(img * c + k) * h * w + p] = 1.0;
        }
    }
    let onehot = Tensor::from_vec(onehot, (n, c, h, w), logits.device())?.to_dtype(logits.dtype())?;
    let log_probs = log_softmax_channels(logits)?;
    let nll = (onehot * log_probs)?.sum(1)?.neg()?;
    Ok(((nll * mask)?.sum_all()? / count)?)
}

/// Log-softmax over dimension 1 with the max subtracted for stability.
pub fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Labels of one domain's batch, present only when visible to the regime.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub images: Tensor,
    pub main: Option<MainTargets>,
    pub anchor: Option<AnchorTargets>,
}

#[derive(Clone, Debug)]
pub struct MainTargets {
    /// `N x 3 x H/2 x W/2`.
    pub normals: Tensor,
    /// `N x H/2 x W/2`, 0/1.
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub enum AnchorTargets {
    Segmentation {
        classes: Vec<u32>,
        mask: Tensor,
    },
    Keypoints {
        heatmaps: Tensor,
        depths: Tensor,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    SourceMain,
    SourceAnchor,
    TargetAnchor,
    TargetMain,
}

impl LossTerm {
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::SourceMain => "source_main",
            LossTerm::SourceAnchor => "source_anchor",
            LossTerm::TargetAnchor => "target_anchor",
            LossTerm::TargetMain => "target_main",
        }
    }

    pub fn is_anchor(self) -> bool {
        matches!(self, LossTerm::SourceAnchor | LossTerm::TargetAnchor)
    }
}

/// Weighted total plus the unweighted value of every term.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub terms: Vec<(LossTerm, f64)>,
}

impl LossBreakdown {
    pub fn term(&self, t: LossTerm) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == t).map(|(_, v)| *v)
    }
}

pub fn main_loss(out: &Outputs, targets: &MainTargets) -> Result<Tensor> {
    cosine_normal_loss(&out.main, &targets.normals, &targets.mask)
}

pub fn anchor_loss(out: &Outputs, targets: &AnchorTargets, weights: &LossWeights) -> Result<Tensor> {
    match targets {
        AnchorTargets::Segmentation { classes, mask } => segmentation_loss(&out.anchor, classes, mask),
        AnchorTargets::Keypoints { heatmaps, depths } => {
            let depth = out
                .depth
                .as_ref()
                .ok_or_else(|| TadaError::Shape("keypoint targets need the depth branch".into()))?;
            let hm = (heatmap_mse(&out.anchor, heatmaps)? * weights.heatmap_scale)?;
            Ok((hm + (depth_mse(depth, depths)? * weights.depth_scale)?)?)
        }
    }
}

/// One evaluated loss term, before weighting.
pub fn term_loss(
    term: LossTerm,
    regime: Regime,
    source: (&TaskBatch, &Outputs),
    target: Option<(&TaskBatch, &Outputs)>,
    weights: &LossWeights,
) -> Result<Tensor> {
    let hidden = |label| TadaError::HiddenLabel {
        regime: regime.name().into(),
        label,
    };
    let target = || target.ok_or_else(|| hidden("a target batch"));
    match term {
        LossTerm::SourceMain => {
            let t = source.0.main.as_ref().ok_or_else(|| hidden("source main labels"))?;
            main_loss(source.1, t)
        }
        LossTerm::SourceAnchor => {
            let t = source.0.anchor.as_ref().ok_or_else(|| hidden("source anchor labels"))?;
            anchor_loss(source.1, t, weights)
        }
        LossTerm::TargetAnchor => {
            let (b, o) = target()?;
            let t = b.anchor.as_ref().ok_or_else(|| hidden("target anchor labels"))?;
            anchor_loss(o, t, weights)
        }
        LossTerm::TargetMain => {
            let (b, o) = target()?;
            let t = b.main.as_ref().ok_or_else(|| hidden("target main labels"))?;
            main_loss(o, t)
        }
    }
}

/// Assembles the terms the regime uses at `stage`: main terms with weight 1,
/// anchor terms with weight `lambda`.
pub fn regime_loss(
    regime: Regime,
    stage: Stage,
    source: (&TaskBatch, &Outputs),
    target: Option<(&TaskBatch, &Outputs)>,
    weights: &LossWeights,
    lambda: f64,
) -> Result<LossBreakdown> {
    let mut total: Option<Tensor> = None;
    let mut terms = Vec::new();
    for term in regime.terms(stage) {
        let value = term_loss(term, regime, source, target, weights)?;
        terms.push((term, value.to_dtype(DType::F64)?.to_scalar::<f64>()?));
        let weighted = if term.is_anchor() { (value * lambda)? } else { value };
        total = Some(match total {
            Some(t) => (t + weighted)?,
            None => weighted,
        });
    }
    let total = total.ok_or_else(|| TadaError::Config(format!("{} has no loss terms", regime.name())))?;
    Ok(LossBreakdown { total, terms })
}

/// Channel-wise arg-max helper used by evaluation code.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits.argmax(1)?.flatten_all()?.to_dtype(DType::U32)?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t4(v: Vec<f64>, s: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, s, &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn normals(v: &[[f64; 3]], h: usize, w: usize) -> Tensor {
        let hw = h * w;
        let mut out = vec![0.0; 3 * hw];
        for (i, n) in v.iter().enumerate() {
            for c in 0..3 {
                out[c * hw + i] = n[c];
            }
        }
        t4(out, (1, 3, h, w))
    }

    fn ones_mask(h: usize, w: usize) -> Tensor {
        Tensor::ones((1, h, w), DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn cosine_identity_antipodal_and_mixed() {
        let a = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.0, 0.8]];
        let gt = normals(&a, 2, 2);
        let m = ones_mask(2, 2);
        assert_eq!(scalar(cosine_normal_loss(&gt, &gt, &m).unwrap()), 0.0);
        let neg = gt.neg().unwrap();
        assert!((scalar(cosine_normal_loss(&neg, &gt, &m).unwrap()) - 2.0).abs() < 1e-12);
        // Two identical, two orthogonal.
        let p = normals(&[a[0], a[1], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 2, 2);
        assert!((scalar(cosine_normal_loss(&p, &gt, &m).unwrap()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_empty_mask_errors() {
        let gt = normals(&[[0.0, 0.0, 1.0]], 1, 1);
        let m = Tensor::zeros((1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(cosine_normal_loss(&gt, &gt, &m), Err(TadaError::EmptyMask(_))));
    }

    #[test]
    fn keypoint_constant_prediction() {
        let gt = Tensor::zeros((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let pred = (gt.ones_like().unwrap() * 0.3).unwrap();
        let d = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(keypoint_loss(&pred, &d, &gt, &d).unwrap());
        assert!((l - 0.09).abs() < 1e-12);
        assert_eq!(scalar(keypoint_loss(&gt, &d, &gt, &d).unwrap()), 0.0);
        let bad = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(keypoint_loss(&gt, &bad, &gt, &d).is_err());
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(segmentation_loss(&logits, &[0, 1, 2, 3], &ones_mask(2, 2)).unwrap());
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_ce_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut v = vec![0.0; 3 * 2];
            v[0] = margin; // pixel 0 -> class 0
            v[2 + 1] = margin; // pixel 1 -> class 1
            let l = scalar(
                segmentation_loss(&t4(v, (1, 3, 1, 2)), &[0, 1], &ones_mask(1, 2)).unwrap(),
            );
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn mask_excludes_mislabeled_pixels() {
        let mut v = vec![0.0; 2 * 2];
        v[0] = 3.0; // pixel 0 predicts class 0
        v[2 + 1] = 3.0; // pixel 1 predicts class 1
        let logits = t4(v, (1, 2, 1, 2));
        let mask = Tensor::from_vec(vec![1.0, 0.0], (1, 1, 2), &Device::Cpu).unwrap();
        let full = scalar(segmentation_loss(&logits, &[0, 0], &ones_mask(1, 2)).unwrap());
        let masked = scalar(segmentation_loss(&logits, &[0, 0], &mask).unwrap());
        let only_first = scalar(
            segmentation_loss(&logits.narrow(3, 0, 1).unwrap(), &[0], &ones_mask(1, 1)).unwrap(),
        );
        assert!(masked < full);
        assert!((masked - only_first).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_class_errors() {
        let logits = Tensor::zeros((1, 2, 1, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            segmentation_loss(&logits, &[2], &ones_mask(1, 1)),
            Err(TadaError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }
}
