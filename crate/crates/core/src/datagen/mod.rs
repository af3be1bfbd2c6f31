//! Procedural paired-domain dataset: height-field scenes with analytic
//! normals, free anchor labels and controllable appearance and pose shift.

mod heatmap;
mod io;
mod scene;
mod spec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use heatmap::{render_keypoint_heatmaps, Heatmaps};
pub use io::{load_dataset, save_dataset, FORMAT_VERSION};
pub use scene::{
    normal_from_gradient, pixel_to_scene, scene_to_pixel, Patch, Primitive, PrimitiveKind, Scene,
    SurfacePoint,
};
pub(crate) use spec::short_hash;
pub use spec::{AnchorKind, CountRange, PoseShift, Range, SplitSizes, Style, ToyWorldSpec};

use crate::error::{Result, TadaError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Source, Domain::Target];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Column, in pixels of the source image.
    pub u: f32,
    /// Row, in pixels of the source image.
    pub v: f32,
    /// Apex height in scene units.
    pub depth: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointLabel {
    pub points: Vec<Keypoint>,
    /// Resolution the pixel coordinates refer to.
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLabel {
    /// Row-major class ids.
    pub classes: Vec<u32>,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Anchor {
    Segmentation(SegLabel),
    Keypoints(KeypointLabel),
}

impl Anchor {
    pub fn kind(&self) -> AnchorKind {
        match self {
            Anchor::Segmentation(_) => AnchorKind::Segmentation,
            Anchor::Keypoints(_) => AnchorKind::Keypoints,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub tilt_deg: f64,
    pub light: [f64; 3],
}

/// One rendered scene with every label the generator knows.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    /// Channel-major `3 x H x W` in [0, 1].
    pub image: Vec<f32>,
    /// Channel-major `3 x H x W` unit normals.
    pub normals: Vec<f32>,
    /// Row-major `H x W`.
    pub valid_mask: Vec<bool>,
    pub anchor: Anchor,
    pub domain: Domain,
    pub split: Split,
    pub meta: SampleMeta,
}

/// Both domains, all splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: ToyWorldSpec,
    parts: Vec<Vec<DomainSample>>,
}

fn part_index(domain: Domain, split: Split) -> usize {
    (domain as usize) * Split::ALL.len() + split as usize
}

impl Dataset {
    pub fn from_parts(spec: ToyWorldSpec, mut samples: Vec<DomainSample>) -> Self {
        let mut parts = vec![Vec::new(); Domain::ALL.len() * Split::ALL.len()];
        for s in samples.drain(..) {
            parts[part_index(s.domain, s.split)].push(s);
        }
        Dataset { spec, parts }
    }

    pub fn split(&self, domain: Domain, split: Split) -> &[DomainSample] {
        &self.parts[part_index(domain, split)]
    }

    pub fn split_mut(&mut self, domain: Domain, split: Split) -> &mut Vec<DomainSample> {
        &mut self.parts[part_index(domain, split)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DomainSample> {
        self.parts.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-scene seed; generation order does not matter.
pub(crate) fn scene_seed(seed: u64, domain: Domain, split: Split, index: usize) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ domain as u64);
    h = splitmix(h ^ ((split as u64) << 8));
    splitmix(h ^ ((index as u64) << 16))
}

fn sample_range<R: Rng + ?Sized>(r: Range, rng: &mut R) -> f64 {
    if r.hi > r.lo {
        rng.random_range(r.lo..r.hi)
    } else {
        r.lo
    }
}

/// Random non-overlapping layout of primitives.
pub fn sample_scene<R: Rng + ?Sized>(spec: &ToyWorldSpec, tilt_deg: f64, rng: &mut R) -> Scene {
    let mut primitives: Vec<Primitive> = Vec::new();
    match spec.anchor_kind {
        AnchorKind::Segmentation => {
            let n = rng.random_range(spec.primitives.min..=spec.primitives.max);
            for _ in 0..n {
                let kind = PrimitiveKind::ALL[rng.random_range(0..PrimitiveKind::ALL.len())];
                let prim = Primitive::sample(kind, rng).with_relief(spec.relief);
                let (_, r) = prim.bounds();
                for _ in 0..100 {
                    let lim = 0.95 - r;
                    let c = [rng.random_range(-lim..lim), rng.random_range(-lim..lim)];
                    let free = primitives.iter().all(|p| {
                        let (pc, pr) = p.bounds();
                        (pc[0] - c[0]).hypot(pc[1] - c[1]) > pr + r + 0.04
                    });
                    if free {
                        primitives.push(prim.translated_to(c));
                        break;
                    }
                }
            }
        }
        AnchorKind::Keypoints => {
            // One primitive per ring slot, so keypoint k has a fixed identity.
            let k = spec.n_keypoints;
            let ring = 0.55;
            let chord = 2.0 * ring * (std::f64::consts::PI / k as f64).sin();
            let max_r = (0.45 * chord - 0.03).min(0.3);
            for slot in 0..k {
                let kind = PrimitiveKind::ALL[slot % PrimitiveKind::ALL.len()];
                let mut prim = Primitive::sample(kind, rng).with_relief(spec.relief);
                let (_, r) = prim.bounds();
                if r > max_r {
                    prim = prim.scaled(max_r / r);
                }
                let a = std::f64::consts::TAU * slot as f64 / k as f64 + std::f64::consts::FRAC_PI_2;
                let jitter = 0.05;
                let c = [
                    ring * a.cos() + rng.random_range(-jitter..jitter),
                    ring * a.sin() + rng.random_range(-jitter..jitter),
                ];
                primitives.push(prim.translated_to(c));
            }
        }
    }
    Scene {
        primitives,
        tilt_deg,
    }
}

/// Everything needed to render one sample apart from the scene geometry.
#[derive(Clone, Debug)]
pub struct RenderSettings<'a> {
    pub size: usize,
    pub style: &'a Style,
    pub anchor_kind: AnchorKind,
    pub border: usize,
    pub dropout: f64,
}

/// Renders a scene into a sample; randomness covers lighting, texture, noise
/// and the dropout blobs.
pub fn render_scene<R: Rng + ?Sized>(
    scene: &Scene,
    settings: &RenderSettings<'_>,
    domain: Domain,
    split: Split,
    rng: &mut R,
) -> DomainSample {
    let size = settings.size;
    let style = settings.style;
    let hw = size * size;
    let elev = sample_range(style.light_elevation_deg, rng).to_radians();
    let azim = sample_range(style.light_azimuth_deg, rng).to_radians();
    let light = [elev.cos() * azim.cos(), elev.cos() * azim.sin(), elev.sin()];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            (a.cos(), a.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");

    let mut image = vec![0f32; 3 * hw];
    let mut normals = vec![0f32; 3 * hw];
    let mut classes = vec![0u32; hw];
    for row in 0..size {
        for col in 0..size {
            let (x, y) = pixel_to_scene(row, col, size);
            let p = scene.surface(x, y);
            let n = normal_from_gradient(p.dzdx, p.dzdy);
            let i = row * size + col;
            for c in 0..3 {
                normals[c * hw + i] = n[c] as f32;
            }
            classes[i] = p.owner.map_or(0, |o| scene.primitives[o].kind().class_id());
            let tex = 1.0
                + style.texture_amplitude
                    * waves
                        .iter()
                        .map(|(cx, cy, ph)| {
                            (std::f64::consts::PI * style.texture_frequency * (x * cx + y * cy) + ph)
                                .sin()
                        })
                        .sum::<f64>()
                    / waves.len() as f64;
            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            let shade = style.ambient + style.light_intensity * lambert;
            for c in 0..3 {
                let mut v = style.albedo[c] * tex * shade;
                if style.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                image[c * hw + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut valid_mask = vec![true; hw];
    let b = settings.border;
    for row in 0..size {
        for col in 0..size {
            if row < b || col < b || row >= size - b || col >= size - b {
                valid_mask[row * size + col] = false;
            }
        }
    }
    if settings.dropout > 0.0 {
        let goal = (settings.dropout * hw as f64).round() as usize;
        let scale = size as f64 / 64.0;
        let mut dropped = 0;
        let mut blobs = 0;
        while dropped < goal && blobs < 10_000 {
            blobs += 1;
            let r = rng.random_range(2.0..5.0) * scale;
            let cu = rng.random_range(0.0..size as f64);
            let cv = rng.random_range(0.0..size as f64);
            for row in 0..size {
                for col in 0..size {
                    let i = row * size + col;
                    if valid_mask[i] && (col as f64 - cu).hypot(row as f64 - cv) <= r {
                        valid_mask[i] = false;
                        dropped += 1;
                    }
                }
            }
        }
    }

    let anchor = match settings.anchor_kind {
        AnchorKind::Segmentation => Anchor::Segmentation(SegLabel { classes, size }),
        AnchorKind::Keypoints => Anchor::Keypoints(KeypointLabel {
            points: scene
                .primitives
                .iter()
                .map(|p| {
                    let [ax, ay] = p.apex();
                    let (u, v) = scene_to_pixel(ax, ay, size);
                    Keypoint {
                        u: u as f32,
                        v: v as f32,
                        depth: scene.height(ax, ay) as f32,
                    }
                })
                .collect(),
            image_size: size,
        }),
    };

    DomainSample {
        image,
        normals,
        valid_mask,
        anchor,
        domain,
        split,
        meta: SampleMeta {
            tilt_deg: scene.tilt_deg,
            light,
        },
    }
}

/// Generates a scene for `(domain, split, index)`; deterministic in the spec seed.
pub fn generate_sample(
    spec: &ToyWorldSpec,
    domain: Domain,
    split: Split,
    index: usize,
) -> DomainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, domain, split, index));
    let (style, tilt_range, dropout) = match domain {
        Domain::Source => (&spec.source_style, spec.pose_shift.source_tilt_deg, 0.0),
        Domain::Target => (
            &spec.target_style,
            spec.pose_shift.target_tilt_deg,
            spec.target_dropout,
        ),
    };
    let tilt = sample_range(tilt_range, &mut rng);
    let scene = sample_scene(spec, tilt, &mut rng);
    let settings = RenderSettings {
        size: spec.image_size,
        style,
        anchor_kind: spec.anchor_kind,
        border: spec.border,
        dropout,
    };
    render_scene(&scene, &settings, domain, split, &mut rng)
}

/// Generates every split of both domains.
pub fn generate_dataset(spec: &ToyWorldSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::new();
    for domain in Domain::ALL {
        for split in Split::ALL {
            let n = match split {
                Split::Train => spec.scenes.train,
                Split::Val => spec.scenes.val,
                Split::Test => spec.scenes.test,
            };
            samples.extend((0..n).map(|i| generate_sample(spec, domain, split, i)));
        }
    }
    let data = Dataset::from_parts(spec.clone(), samples);
    for domain in Domain::ALL {
        let images = Split::ALL
            .iter()
            .flat_map(|&s| data.split(domain, s))
            .map(|s| s.image.as_slice());
        if pixel_variance(images) < 1e-10 {
            return Err(TadaError::DegenerateStyle {
                domain: domain.name().into(),
            });
        }
    }
    Ok(data)
}

fn pixel_variance<'a>(images: impl Iterator<Item = &'a [f32]>) -> f64 {
    let (mut n, mut mean, mut m2) = (0f64, 0f64, 0f64);
    for v in images.flatten() {
        n += 1.0;
        let d = *v as f64 - mean;
        mean += d / n;
        m2 += d * (*v as f64 - mean);
    }
    if n < 2.0 {
        0.0
    } else {
        m2 / (n - 1.0)
    }
}

/// Averages 2x2 blocks of a channel-major normal map and renormalizes; a
/// half-resolution pixel is valid only if all four children are.
pub fn downsample_normals(normals: &[f32], mask: &[bool], size: usize) -> (Vec<f32>, Vec<bool>) {
    let half = size / 2;
    let (hw, qw) = (size * size, half * half);
    let mut out = vec![0f32; 3 * qw];
    let mut out_mask = vec![false; qw];
    for r in 0..half {
        for c in 0..half {
            let kids = [
                (2 * r) * size + 2 * c,
                (2 * r) * size + 2 * c + 1,
                (2 * r + 1) * size + 2 * c,
                (2 * r + 1) * size + 2 * c + 1,
            ];
            let mut v = [0f64; 3];
            for &k in &kids {
                for ch in 0..3 {
                    v[ch] += normals[ch * hw + k] as f64;
                }
            }
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let i = r * half + c;
            for ch in 0..3 {
                out[ch * qw + i] = if n > 0.0 { (v[ch] / n) as f32 } else { v[ch] as f32 };
            }
            out_mask[i] = kids.iter().all(|&k| mask[k]);
        }
    }
    (out, out_mask)
}

/// Majority class of each 2x2 block; ties go to the smallest class id.
pub fn downsample_classes(classes: &[u32], size: usize) -> Vec<u32> {
    let half = size / 2;
    let mut out = vec![0u32; half * half];
    for r in 0..half {
        for c in 0..half {
            let mut kids = [
                classes[(2 * r) * size + 2 * c],
                classes[(2 * r) * size + 2 * c + 1],
                classes[(2 * r + 1) * size + 2 * c],
                classes[(2 * r + 1) * size + 2 * c + 1],
            ];
            kids.sort_unstable();
            let mut best = (kids[0], 0);
            let mut i = 0;
            while i < 4 {
                let j = kids[i..].iter().take_while(|&&k| k == kids[i]).count();
                if j > best.1 {
                    best = (kids[i], j);
                }
                i += j;
            }
            out[r * half + c] = best.0;
        }
    }
    out
}

/// Fraction of segmentation boundary pixels that are also normal-map
/// discontinuities (largest neighbor normal difference above `threshold`).
/// Returns `(coherent, boundary)` pixel counts; the outermost ring is skipped.
pub fn boundary_coherence(sample: &DomainSample, size: usize, threshold: f64) -> (usize, usize) {
    let Anchor::Segmentation(seg) = &sample.anchor else {
        return (0, 0);
    };
    let hw = size * size;
    let normal = |i: usize| {
        [
            sample.normals[i] as f64,
            sample.normals[hw + i] as f64,
            sample.normals[2 * hw + i] as f64,
        ]
    };
    let (mut coherent, mut boundary) = (0, 0);
    for r in 1..size - 1 {
        for c in 1..size - 1 {
            let i = r * size + c;
            let nbrs = [i - 1, i + 1, i - size, i + size];
            if nbrs.iter().all(|&j| seg.classes[j] == seg.classes[i]) {
                continue;
            }
            boundary += 1;
            let ni = normal(i);
            let jump = nbrs
                .iter()
                .map(|&j| {
                    let nj = normal(j);
                    ((ni[0] - nj[0]).powi(2) + (ni[1] - nj[1]).powi(2) + (ni[2] - nj[2]).powi(2))
                        .sqrt()
                })
                .fold(0.0, f64::max);
            if jump > threshold {
                coherent += 1;
            }
        }
    }
    (coherent, boundary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ToyWorldSpec {
        ToyWorldSpec {
            image_size: 32,
            scenes: SplitSizes {
                train: 4,
                val: 2,
                test: 2,
            },
            ..ToyWorldSpec::default()
        }
    }

    fn settings(style: &Style, size: usize) -> RenderSettings<'_> {
        RenderSettings {
            size,
            style,
            anchor_kind: AnchorKind::Keypoints,
            border: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn flat_plane_has_upward_normals() {
        let style = Style::synthetic();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = render_scene(
            &Scene::flat(0.0),
            &settings(&style, 32),
            Domain::Source,
            Split::Train,
            &mut rng,
        );
        let hw = 32 * 32;
        for i in (0..hw).filter(|&i| s.valid_mask[i]) {
            assert_eq!(
                [s.normals[i], s.normals[hw + i], s.normals[2 * hw + i]],
                [0.0, 0.0, 1.0]
            );
        }
    }

    #[test]
    fn centered_bump_keypoint_and_apex_normal() {
        let scene = Scene {
            primitives: vec![Primitive::Bump {
                center: [0.0, 0.0],
                radius: 0.4,
                height: 0.2,
            }],
            tilt_deg: 0.0,
        };
        let style = Style::synthetic();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = render_scene(&scene, &settings(&style, 64), Domain::Source, Split::Train, &mut rng);
        let Anchor::Keypoints(kp) = &s.anchor else {
            panic!("expected keypoints")
        };
        assert_eq!(kp.points.len(), 1);
        assert_eq!((kp.points[0].u, kp.points[0].v), (31.5, 31.5));
        assert!((kp.points[0].depth - 0.2).abs() < 1e-7);
        assert_eq!(scene.normal_at(0.0, 0.0), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn normals_are_unit_and_front_facing() {
        let data = generate_dataset(&small_spec()).unwrap();
        let hw = 32 * 32;
        for s in data.iter() {
            for i in (0..hw).filter(|&i| s.valid_mask[i]) {
                let n = [s.normals[i], s.normals[hw + i], s.normals[2 * hw + i]].map(|v| v as f64);
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
                assert!(n[2] > 0.0);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&ToyWorldSpec {
            seed: 9,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generation_order_does_not_matter() {
        let spec = small_spec();
        let data = generate_dataset(&spec).unwrap();
        let late = generate_sample(&spec, Domain::Target, Split::Test, 1);
        assert_eq!(&data.split(Domain::Target, Split::Test)[1], &late);
    }

    #[test]
    fn dropout_only_hits_target() {
        let data = generate_dataset(&small_spec()).unwrap();
        let interior = (32 - 4) * (32 - 4);
        for s in data.iter() {
            let valid = s.valid_mask.iter().filter(|v| **v).count();
            match s.domain {
                Domain::Source => assert_eq!(valid, interior),
                Domain::Target => assert!(valid < interior),
            }
        }
    }

    #[test]
    fn anchors_exist_in_both_domains() {
        let spec = ToyWorldSpec {
            anchor_kind: AnchorKind::Keypoints,
            ..small_spec()
        };
        let data = generate_dataset(&spec).unwrap();
        for s in data.iter() {
            let Anchor::Keypoints(kp) = &s.anchor else {
                panic!("missing keypoints")
            };
            assert_eq!(kp.points.len(), spec.n_keypoints);
            for p in &kp.points {
                assert!(p.u >= 0.0 && p.u < 32.0 && p.v >= 0.0 && p.v < 32.0, "{p:?}");
            }
        }
    }

    #[test]
    fn zero_variance_style_is_rejected() {
        let dark = Style {
            albedo: [0.0; 3],
            noise_sigma: 0.0,
            ..Style::synthetic()
        };
        let spec = ToyWorldSpec {
            target_style: dark,
            ..small_spec()
        };
        assert!(matches!(
            generate_dataset(&spec),
            Err(TadaError::DegenerateStyle { .. })
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            ToyWorldSpec {
                image_size: 40,
                ..small_spec()
            },
            ToyWorldSpec {
                anchor_kind: AnchorKind::Keypoints,
                n_keypoints: 2,
                ..small_spec()
            },
            ToyWorldSpec {
                n_classes: 1,
                ..small_spec()
            },
        ] {
            assert!(matches!(spec.validate(), Err(TadaError::InvalidSpec(_))));
        }
    }

    #[test]
    fn class_majority_downsampling() {
        let classes = vec![1, 1, 0, 2, 3, 0, 2, 2, 0, 0, 1, 1, 0, 0, 1, 3];
        assert_eq!(downsample_classes(&classes, 4), vec![1, 2, 0, 1]);
    }
}
