//! Helpers shared by the integration tests.
#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Straightforward reference: loop over pixels, accumulate plain sums, sort
/// for the median, count threshold hits.
pub fn reference(pred: &[f32], gt: &[f32], mask: &[bool]) -> [f64; 5] {
    let hw = mask.len();
    let mut errs = Vec::new();
    for p in 0..hw {
        if !mask[p] {
            continue;
        }
        let mut dot = 0.0f64;
        for c in 0..3 {
            dot += f64::from(pred[c * hw + p]) * f64::from(gt[c * hw + p]);
        }
        let dot = dot.clamp(-1.0, 1.0);
        errs.push(dot.acos() * 180.0 / std::f64::consts::PI);
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mut sorted = errs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[(sorted.len() - 1) / 2];
    let fine = errs.iter().filter(|&&e| e < 11.25).count() as f64 / n;
    let coarse = errs.iter().filter(|&&e| e < 30.0).count() as f64 / n;
    [rmse, mean, median, fine, coarse]
}

pub fn unit_map(rng: &mut ChaCha8Rng, hw: usize) -> Vec<f32> {
    let mut v = vec![0f32; 3 * hw];
    for p in 0..hw {
        let mut n = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.05..1.0f64)];
        let len = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        n.iter_mut().for_each(|x| *x /= len);
        for c in 0..3 {
            v[c * hw + p] = n[c] as f32;
        }
    }
    v
}

/// Random pair of 8x8 normal maps with a random, non-empty mask.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>, Vec<bool>) {
    let hw = 64;
    let gt = unit_map(rng, hw);
    // Predictions near the ground truth so every threshold bin is populated.
    let mut pred = gt.clone();
    let noise = rng.random_range(0.05..1.0);
    for p in 0..hw {
        let mut n: Vec<f64> = (0..3).map(|c| f64::from(gt[c * hw + p]) + rng.random_range(-noise..noise)).collect();
        let len = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        n.iter_mut().for_each(|x| *x /= len);
        for c in 0..3 {
            pred[c * hw + p] = n[c] as f32;
        }
    }
    let keep = rng.random_range(0.2..1.0);
    let mut mask: Vec<bool> = (0..hw).map(|_| rng.random_bool(keep)).collect();
    mask[rng.random_range(0..hw)] = true;
    (pred, gt, mask)
}


use tada::datagen::{AnchorKind, SplitSizes, ToyWorldSpec};
use tada::model::TadaNet;
use tada::trainer::{Regime, RegimeConfig, StageLimits};

/// A quick two-domain world for training tests.
pub fn tiny_spec(anchor_kind: AnchorKind) -> ToyWorldSpec {
    ToyWorldSpec {
        image_size: 16,
        scenes: SplitSizes {
            train: 12,
            val: 6,
            test: 6,
        },
        anchor_kind,
        n_keypoints: 3,
        ..Default::default()
    }
}

/// Narrow network, fixed step budgets without early stopping.
pub fn tiny_config(regime: Regime, steps: usize) -> RegimeConfig {
    let limits = StageLimits {
        max_steps: steps,
        patience: 0,
    };
    let mut cfg = RegimeConfig {
        regime,
        single: limits,
        stage1: limits,
        stage2: limits,
        batch_size: 4,
        eval_every: 5,
        log_every: 5,
        ..Default::default()
    };
    cfg.model.widths = [4, 8, 8];
    cfg.model.depth_hidden = 16;
    cfg.discriminator.width = 8;
    cfg
}

/// Every parameter value, in declaration order.
pub fn param_values(model: &TadaNet) -> Vec<f32> {
    model
        .snapshot()
        .unwrap()
        .iter()
        .flat_map(|t| t.flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect()
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Relative error between the autograd gradient of `f` at `x0` and a central
/// difference estimate, measured in the Euclidean norm over all entries.
pub fn fd_relative_error(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let dev = Device::Cpu;
    let x = Var::from_vec(x0.to_vec(), shape, &dev).unwrap();
    let loss = f(x.as_tensor());
    let analytic: Vec<f64> = loss.backward().unwrap().get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let eval = |v: Vec<f64>| f(&Tensor::from_vec(v, shape, &dev).unwrap()).to_scalar::<f64>().unwrap();
    let mut diff = 0.0;
    let mut norm = 0.0;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += FD_STEP;
        let mut minus = x0.to_vec();
        minus[i] -= FD_STEP;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
        diff += (numeric - analytic[i]).powi(2);
        norm += numeric.powi(2).max(analytic[i].powi(2));
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

pub fn unit_normals(rng: &mut ChaCha8Rng, n: usize, hw: usize) -> Vec<f64> {
    let mut v = randn(rng, n * 3 * hw);
    for b in 0..n {
        for p in 0..hw {
            let idx = |c: usize| (b * 3 + c) * hw + p;
            v[idx(2)] = v[idx(2)].abs() + 0.5;
            let len = (0..3).map(|c| v[idx(c)].powi(2)).sum::<f64>().sqrt();
            for c in 0..3 {
                v[idx(c)] /= len;
            }
        }
    }
    v
}

pub fn mask(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut m: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.7))).collect();
    m[0] = 1.0;
    Tensor::from_vec(m, n, &Device::Cpu).unwrap()
}

