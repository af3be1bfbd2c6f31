//! Masked angular-error metrics, pixel-pooled over a test split, and
//! aggregation across seeds.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::{downsample_normals, Dataset, Domain, Split};
use crate::error::{Result, TadaError};
use crate::model::TadaNet;

pub const METRIC_NAMES: [&str; 5] = ["rmse_deg", "mean_deg", "median_deg", "pct_below_11_25", "pct_below_30"];

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Angular errors in degrees at the valid pixels of one channel-major image.
pub fn angular_error_map(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<Vec<f64>> {
    let hw = mask.len();
    if pred.len() != 3 * hw || gt.len() != 3 * hw {
        return Err(TadaError::Shape(format!(
            "normal maps of {} and {} values for {hw} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let errors: Vec<f64> = (0..hw)
        .filter(|&i| mask[i])
        .map(|i| {
            let dot: f64 = (0..3).map(|c| pred[c * hw + i] as f64 * gt[c * hw + i] as f64).sum();
            dot.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect();
    if errors.is_empty() {
        return Err(TadaError::EmptyMask("angular error"));
    }
    Ok(errors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_deg: f64,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub pct_below_11_25: f64,
    pub pct_below_30: f64,
    pub n_pixels: u64,
}

impl Metrics {
    pub fn values(&self) -> [f64; 5] {
        [
            self.rmse_deg,
            self.mean_deg,
            self.median_deg,
            self.pct_below_11_25,
            self.pct_below_30,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Pixel-pooled summary of angular errors; the median of an even count is the
/// lower middle value and thresholds are strict.
pub fn aggregate(errors: &[f64]) -> Result<Metrics> {
    if errors.is_empty() {
        return Err(TadaError::EmptyMask("metrics aggregation"));
    }
    let n = errors.len() as f64;
    let (mut sum, mut sq) = (CompensatedSum::default(), CompensatedSum::default());
    let (mut below_fine, mut below_coarse) = (0u64, 0u64);
    for &e in errors {
        sum.add(e);
        sq.add(e * e);
        below_fine += (e < 11.25) as u64;
        below_coarse += (e < 30.0) as u64;
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sum.value() / n;
    // Rounding can leave the root of the mean square a hair below the mean.
    let rmse = (sq.value() / n).sqrt().max(mean);
    Ok(Metrics {
        rmse_deg: rmse,
        mean_deg: mean,
        median_deg: sorted[(sorted.len() - 1) / 2],
        pct_below_11_25: below_fine as f64 / n,
        pct_below_30: below_coarse as f64 / n,
        n_pixels: errors.len() as u64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub method: String,
    pub seed: u64,
    pub spec_hash: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(flatten)]
    pub meta: RunMeta,
}

/// Target-domain main-task metrics of `model` on one split, evaluated at the
/// output resolution against 2x2-averaged ground truth.
pub fn evaluate(model: &TadaNet, dataset: &Dataset, domain: Domain, split: Split, chunk: usize) -> Result<Metrics> {
    let samples = dataset.split(domain, split);
    if samples.is_empty() {
        return Err(TadaError::EmptySplit(format!("{}/{}", domain.name(), split.name())));
    }
    let size = dataset.image_size();
    let half = size / 2;
    let mut errors = Vec::new();
    for group in samples.chunks(chunk.max(1)) {
        let mut pixels = Vec::with_capacity(group.len() * 3 * size * size);
        for s in group {
            pixels.extend_from_slice(&s.image);
        }
        let images = Tensor::from_vec(pixels, (group.len(), 3, size, size), model.device())?;
        let pred: Vec<f32> = model.forward(&images)?.main.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let per = 3 * half * half;
        for (i, s) in group.iter().enumerate() {
            let (gt, mask) = downsample_normals(&s.normals, &s.valid_mask, size);
            match angular_error_map(&pred[i * per..(i + 1) * per], &gt, &mask) {
                Ok(e) => errors.extend(e),
                Err(TadaError::EmptyMask(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    aggregate(&errors)
}

/// Mean and sample standard deviation of each metric across runs of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: String,
    pub spec_hash: String,
    pub seeds: Vec<u64>,
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl AggregateReport {
    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|&m| m == metric).map(|i| self.mean[i])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut s = CompensatedSum::default();
    values.iter().for_each(|&v| s.add(v));
    let mean = s.value() / n;
    if values.len() < 2 || values.iter().all(|&v| v == values[0]) {
        return (mean, 0.0);
    }
    let mut d = CompensatedSum::default();
    values.iter().for_each(|&v| d.add((v - mean) * (v - mean)));
    (mean, (d.value() / (n - 1.0)).sqrt())
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.len() < 2 {
        return Err(TadaError::MetadataMismatch(format!(
            "aggregation needs at least 2 runs, got {}",
            reports.len()
        )));
    }
    let first = &reports[0].meta;
    for r in &reports[1..] {
        if r.meta.method != first.method || r.meta.spec_hash != first.spec_hash {
            return Err(TadaError::MetadataMismatch(format!(
                "{} on {} vs {} on {}",
                first.method, first.spec_hash, r.meta.method, r.meta.spec_hash
            )));
        }
    }
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.meta.seed).collect();
    seeds.sort_unstable();
    if seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(TadaError::MetadataMismatch(format!("duplicate seed among {seeds:?}")));
    }
    let mut mean = [0.0; 5];
    let mut std = [0.0; 5];
    for k in 0..5 {
        let v: Vec<f64> = reports.iter().map(|r| r.metrics.values()[k]).collect();
        (mean[k], std[k]) = mean_std(&v);
    }
    Ok(AggregateReport {
        method: first.method.clone(),
        spec_hash: first.spec_hash.clone(),
        seeds,
        mean,
        std,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// First method has lower error by more than the threshold.
    Better,
    Worse,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b - mean_a`; positive when `a` has the lower error.
    pub gap: f64,
    pub pooled_std: f64,
    /// Welch statistic of `b - a`; `None` when both samples have zero spread.
    pub welch_t: Option<f64>,
    pub verdict: Verdict,
}

/// Compares per-seed error values of two methods (lower is better). The
/// ordering is decided when the gap exceeds `margin_factor` pooled stds.
pub fn compare_errors(a: &[f64], b: &[f64], margin_factor: f64) -> Comparison {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let pooled = ((sa * sa + sb * sb) / 2.0).sqrt();
    let se = (sa * sa / a.len() as f64 + sb * sb / b.len() as f64).sqrt();
    let gap = mb - ma;
    let welch_t = if se > 0.0 { Some(gap / se) } else { None };
    let margin = margin_factor * pooled;
    let verdict = if gap > margin {
        Verdict::Better
    } else if -gap > margin {
        Verdict::Worse
    } else {
        Verdict::Inconclusive
    };
    Comparison {
        mean_a: ma,
        mean_b: mb,
        gap,
        pooled_std: pooled,
        welch_t,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn identical_and_orthogonal_maps() {
        let gt = [0f32, 0.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(angular_error_map(&gt, &gt, &[true, true]).unwrap(), vec![0.0, 0.0]);
        let ortho = [1f32, 1.0, 0.0, 0.0, 0.0, 0.0];
        let e = angular_error_map(&ortho, &gt, &[true, false]).unwrap();
        assert_eq!(e.len(), 1);
        assert!(close(e[0], 90.0));
    }

    #[test]
    fn rounding_above_one_is_clamped() {
        let v = [0.0f32, 0.0, 1.000_000_1];
        let e = angular_error_map(&v, &v, &[true]).unwrap();
        assert_eq!(e, vec![0.0]);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let v = [0.0f32, 0.0, 1.0];
        assert!(matches!(angular_error_map(&v, &v, &[false]), Err(TadaError::EmptyMask(_))));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn two_value_summary() {
        let m = aggregate(&[40.0, 10.0]).unwrap();
        assert!(close(m.pct_below_11_25, 0.5));
        assert!(close(m.pct_below_30, 0.5));
        assert!(close(m.mean_deg, 25.0));
        assert!(close(m.median_deg, 10.0));
        assert!(close(m.rmse_deg, (1700f64 / 2.0).sqrt()));
        assert!((m.rmse_deg - 29.155).abs() < 1e-3);
    }

    #[test]
    fn zeros_and_strict_boundary() {
        let m = aggregate(&[0.0; 7]).unwrap();
        assert_eq!(m.values(), [0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(aggregate(&[29.9]).unwrap().pct_below_30, 1.0);
        assert_eq!(aggregate(&[30.0]).unwrap().pct_below_30, 0.0);
        assert_eq!(aggregate(&[11.25]).unwrap().pct_below_11_25, 0.0);
    }

    fn report(method: &str, seed: u64, mean: f64) -> MetricsReport {
        MetricsReport {
            metrics: Metrics {
                rmse_deg: mean + 1.0,
                mean_deg: mean,
                median_deg: mean,
                pct_below_11_25: 0.1,
                pct_below_30: 0.5,
                n_pixels: 10,
            },
            meta: RunMeta {
                method: method.into(),
                seed,
                spec_hash: "abc".into(),
                config_hash: "def".into(),
            },
        }
    }

    #[test]
    fn run_aggregation() {
        let agg = aggregate_runs(&[report("m", 0, 10.0), report("m", 1, 12.0), report("m", 2, 14.0)]).unwrap();
        assert!(close(agg.mean_of("mean_deg").unwrap(), 12.0));
        assert!(close(agg.std[1], 2.0));
        assert_eq!(agg.std[3], 0.0);
        assert!(aggregate_runs(&[report("m", 0, 1.0), report("n", 1, 1.0)]).is_err());
        assert!(aggregate_runs(&[report("m", 0, 1.0)]).is_err());
        assert!(aggregate_runs(&[report("m", 0, 1.0), report("m", 0, 2.0)]).is_err());
    }

    #[test]
    fn verdicts() {
        let c = compare_errors(&[10.0, 10.5, 11.0], &[13.0, 13.5, 14.0], 1.0);
        assert_eq!(c.verdict, Verdict::Better);
        assert!(c.welch_t.unwrap() > 0.0);
        assert_eq!(compare_errors(&[13.0, 14.0], &[10.0, 11.0], 1.0).verdict, Verdict::Worse);
        assert_eq!(compare_errors(&[10.0, 14.0], &[11.0, 15.0], 1.0).verdict, Verdict::Inconclusive);
        let same = compare_errors(&[1.0, 1.0], &[1.0, 1.0], 1.0);
        assert_eq!(same.verdict, Verdict::Inconclusive);
        assert_eq!(same.welch_t, None);
    }
}
