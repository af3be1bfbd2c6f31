//! Feature-space PCA at probe locations and per-domain label-distribution
//! divergence.

use std::path::Path;

use candle_core::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datagen::{Anchor, Dataset, Domain, Split};
use crate::error::{Result, TadaError};
use crate::model::TadaNet;

/// Top-two principal axes of a point set and the projections onto them.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit directions ordered by decreasing variance; the largest-magnitude
    /// entry of each is positive.
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
    pub projections: Vec<[f64; 2]>,
}

/// PCA of the rows of `data`; fails when every row is identical.
pub fn pca_top2(data: &[Vec<f64>]) -> Result<Pca> {
    let n = data.len();
    if n < 2 {
        return Err(TadaError::DegenerateFeatures(format!("{n} samples")));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return Err(TadaError::Shape("feature rows of unequal or zero length".into()));
    }
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let total: f64 = centered.iter().map(|v| v * v).sum();
    if total <= f64::EPSILON * (1.0 + mean.iter().map(|m| m * m).sum::<f64>()) * n as f64 {
        return Err(TadaError::DegenerateFeatures("all feature vectors are identical".into()));
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut dir: Vec<f64> = v_t.row(k).iter().copied().collect();
        let lead = dir.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            dir.iter_mut().for_each(|x| *x = -*x);
        }
        components[slot] = dir;
        variances[slot] = svd.singular_values[k].powi(2) / (n - 1) as f64;
    }
    let projections = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        variances,
        projections,
    })
}

/// Where features are probed in each image, in output-resolution pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLocations {
    /// The same `(row, col)` points in every image.
    Grid(Vec<(usize, usize)>),
    /// Each sample's own keypoints, one location per keypoint index.
    Keypoints,
}

impl ProbeLocations {
    /// Keypoints for keypoint datasets, otherwise a 3x3 grid at the quartiles.
    pub fn default_for(dataset: &Dataset) -> Self {
        match dataset.spec.anchor_kind {
            crate::datagen::AnchorKind::Keypoints => ProbeLocations::Keypoints,
            crate::datagen::AnchorKind::Segmentation => {
                let h = dataset.image_size() / 2;
                let q = [h / 4, h / 2, 3 * h / 4];
                ProbeLocations::Grid(q.iter().flat_map(|&r| q.iter().map(move |&c| (r, c))).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub location: usize,
    pub domain: Domain,
    pub sample: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterTable {
    pub rows: Vec<ScatterRow>,
    /// Variance along the two axes, per location.
    pub variances: Vec<[f64; 2]>,
}

impl ScatterTable {
    /// CSV with header `location,domain,sample,pc1,pc2`, one row per point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["location", "domain", "sample", "pc1", "pc2"])?;
        for r in &self.rows {
            w.write_record([
                r.location.to_string(),
                r.domain.name().to_string(),
                r.sample.to_string(),
                format!("{:.6}", r.pc1),
                format!("{:.6}", r.pc2),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn probe_points(sample: &crate::datagen::DomainSample, probes: &ProbeLocations, half: usize) -> Vec<(usize, usize)> {
    match probes {
        ProbeLocations::Grid(g) => g.clone(),
        ProbeLocations::Keypoints => match &sample.anchor {
            Anchor::Keypoints(kp) => {
                let scale = half as f64 / kp.image_size as f64;
                let max = half as f64 - 1.0;
                kp.points
                    .iter()
                    .map(|p| {
                        let c = ((p.u as f64 + 0.5) * scale - 0.5).round().clamp(0.0, max);
                        let r = ((p.v as f64 + 0.5) * scale - 0.5).round().clamp(0.0, max);
                        (r as usize, c as usize)
                    })
                    .collect()
            }
            Anchor::Segmentation(_) => Vec::new(),
        },
    }
}

/// Per-location PCA of features from `split` of both domains, fitted on the
/// pooled set so both domains share one plane.
pub fn pca_feature_scatter(
    model: &TadaNet,
    dataset: &Dataset,
    split: Split,
    probes: &ProbeLocations,
) -> Result<ScatterTable> {
    let size = dataset.image_size();
    let half = size / 2;
    // features[location][row] with rows tagged by (domain, sample).
    let mut features: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut tags: Vec<(Domain, usize)> = Vec::new();
    for domain in Domain::ALL {
        let samples = dataset.split(domain, split);
        if samples.len() < 2 {
            return Err(TadaError::EmptySplit(format!(
                "PCA needs at least 2 {} samples in {}",
                domain.name(),
                split.name()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            let locs = probe_points(s, probes, half);
            if locs.is_empty() {
                return Err(TadaError::Config("no probe locations for this dataset".into()));
            }
            if features.is_empty() {
                features = vec![Vec::new(); locs.len()];
            } else if features.len() != locs.len() {
                return Err(TadaError::Shape("probe count varies between samples".into()));
            }
            let image = Tensor::from_vec(s.image.clone(), (1, 3, size, size), model.device())?;
            let probe = model.extract_features(&image, &locs)?;
            for (slot, v) in features.iter_mut().zip(probe.vectors) {
                slot.push(v.into_iter().map(f64::from).collect());
            }
            tags.push((domain, i));
        }
    }
    let mut rows = Vec::new();
    let mut variances = Vec::new();
    for (loc, data) in features.iter().enumerate() {
        let pca = pca_top2(data).map_err(|e| match e {
            TadaError::DegenerateFeatures(m) => TadaError::DegenerateFeatures(format!("location {loc}: {m}")),
            e => e,
        })?;
        variances.push(pca.variances);
        for (&(domain, sample), p) in tags.iter().zip(&pca.projections) {
            rows.push(ScatterRow {
                location: loc,
                domain,
                sample,
                pc1: p[0],
                pc2: p[1],
            });
        }
    }
    Ok(ScatterTable { rows, variances })
}

/// Exact 1-Wasserstein distance between two empirical distributions on the line.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        // Integrate |F_a - F_b| over [prev, x) before stepping the CDFs.
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev = x;
    }
    total
}

/// Normalized histogram over `[-1, 1]` with `bins` equal bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    for &v in values {
        let k = (((v + 1.0) / 2.0) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        h[k] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDivergence {
    pub component: String,
    pub wasserstein1: f64,
    pub source_histogram: Vec<f64>,
    pub target_histogram: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub spec_hash: String,
    pub split: Split,
    pub bins: usize,
    pub source_pixels: usize,
    pub target_pixels: usize,
    pub components: Vec<ComponentDivergence>,
}

impl DivergenceReport {
    pub fn w1(&self, component: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.component == component)
            .map(|c| c.wasserstein1)
    }
}

/// Per-component normal distributions of valid pixels in `split` of each
/// domain, with histograms and exact 1-Wasserstein distances.
pub fn label_distribution_report(dataset: &Dataset, split: Split, bins: usize) -> Result<DivergenceReport> {
    if bins == 0 {
        return Err(TadaError::Config("histogram needs at least one bin".into()));
    }
    let hw = dataset.image_size() * dataset.image_size();
    let collect = |domain: Domain| -> Result<[Vec<f64>; 3]> {
        let mut out: [Vec<f64>; 3] = Default::default();
        for s in dataset.split(domain, split) {
            for i in (0..hw).filter(|&i| s.valid_mask[i]) {
                for (c, o) in out.iter_mut().enumerate() {
                    o.push(s.normals[c * hw + i] as f64);
                }
            }
        }
        if out[0].is_empty() {
            return Err(TadaError::EmptySplit(format!(
                "no valid {} pixels in {}",
                domain.name(),
                split.name()
            )));
        }
        Ok(out)
    };
    let src = collect(Domain::Source)?;
    let tgt = collect(Domain::Target)?;
    let components = ["x", "y", "z"]
        .iter()
        .enumerate()
        .map(|(c, name)| ComponentDivergence {
            component: name.to_string(),
            wasserstein1: wasserstein1(&src[c], &tgt[c]),
            source_histogram: histogram(&src[c], bins),
            target_histogram: histogram(&tgt[c], bins),
        })
        .collect();
    Ok(DivergenceReport {
        spec_hash: dataset.spec.hash(),
        split,
        bins,
        source_pixels: src[0].len(),
        target_pixels: tgt[0].len(),
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_points_are_recovered() {
        let data: Vec<Vec<f64>> = [(-3.0, 0.5), (3.0, 0.5), (1.0, -0.5), (-1.0, -0.5)]
            .iter()
            .map(|&(x, y)| vec![x, y])
            .collect();
        let pca = pca_top2(&data).unwrap();
        assert!((pca.components[0][0].abs() - 1.0).abs() < 1e-12);
        assert!((pca.components[1][1].abs() - 1.0).abs() < 1e-12);
        for (p, r) in pca.projections.iter().zip(&data) {
            assert!((p[0].abs() - r[0].abs()).abs() < 1e-12);
            assert!((p[1].abs() - r[1].abs()).abs() < 1e-12);
        }
        assert!(pca.variances[0] >= pca.variances[1]);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let data = vec![vec![1.0, 2.0, 3.0]; 5];
        assert!(matches!(pca_top2(&data), Err(TadaError::DegenerateFeatures(_))));
    }

    #[test]
    fn duplicated_rows_share_projections() {
        let base = vec![vec![0.0, 1.0, 2.0], vec![1.0, -1.0, 0.5], vec![2.0, 0.0, -1.0]];
        let mut data = base.clone();
        data.extend(base.clone());
        let pca = pca_top2(&data).unwrap();
        for i in 0..3 {
            assert_eq!(pca.projections[i], pca.projections[i + 3]);
        }
    }

    #[test]
    fn wasserstein_basics() {
        assert_eq!(wasserstein1(&[0.1, 0.5, 0.9], &[0.9, 0.1, 0.5]), 0.0);
        assert!((wasserstein1(&[0.0], &[1.0]) - 1.0).abs() < 1e-15);
        // Half the mass moves by 1.
        assert!((wasserstein1(&[0.0, 0.0], &[0.0, 1.0]) - 0.5).abs() < 1e-15);
        assert!((wasserstein1(&[0.0], &[0.0, 1.0, 2.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_covers_closed_range() {
        let h = histogram(&[-1.0, 1.0, 0.0, 0.999], 4);
        assert_eq!(h, vec![0.25, 0.0, 0.25, 0.5]);
    }
}
