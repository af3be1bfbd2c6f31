use super::KeypointLabel;

/// `K` heatmaps of `size x size`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmaps {
    pub data: Vec<f32>,
    pub size: usize,
    /// Keypoints whose scaled location fell outside the map and was clamped.
    pub clamped: Vec<bool>,
}

impl Heatmaps {
    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[k * n..(k + 1) * n]
    }
}

/// Renders one unnormalized Gaussian per keypoint with peak 1 at the keypoint
/// location rescaled from the label's image size to `out_size`.
pub fn render_keypoint_heatmaps(label: &KeypointLabel, out_size: usize, sigma: f64) -> Heatmaps {
    assert!(sigma > 0.0, "heatmap sigma must be positive");
    let n = out_size * out_size;
    let scale = out_size as f64 / label.image_size as f64;
    let max = (out_size - 1) as f64;
    let mut data = vec![0f32; label.points.len() * n];
    let mut clamped = Vec::with_capacity(label.points.len());
    let denom = 2.0 * sigma * sigma;
    for (k, p) in label.points.iter().enumerate() {
        // Pixel centers map to pixel centers.
        let u = (p.u as f64 + 0.5) * scale - 0.5;
        let v = (p.v as f64 + 0.5) * scale - 0.5;
        let (uc, vc) = (u.clamp(0.0, max), v.clamp(0.0, max));
        clamped.push(uc != u || vc != v);
        let ch = &mut data[k * n..(k + 1) * n];
        for row in 0..out_size {
            for col in 0..out_size {
                let d2 = (col as f64 - uc).powi(2) + (row as f64 - vc).powi(2);
                ch[row * out_size + col] = (-d2 / denom).exp() as f32;
            }
        }
    }
    Heatmaps {
        data,
        size: out_size,
        clamped,
    }
}
