//! Acceptance suite. Each test prints one `PASS`/`FAIL` line naming its
//! criterion and the measured values, then asserts.
//!
//! The toy-scale matrices train with the shipped `configs/*.toml` and cache
//! their runs under the cargo target directory, keyed by config hash, so a
//! rerun only recomputes what changed.

mod common;

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fd_relative_error, mask, param_values, randn, random_pair, reference, tiny_config, tiny_spec, unit_normals, FD_TOL};
use tada::adversarial::{grad_reverse, DaMode};
use tada::datagen::{
    boundary_coherence, generate_dataset, normal_from_gradient, pixel_to_scene, render_scene, sample_scene, AnchorKind,
    Domain, RenderSettings, Split, ToyWorldSpec,
};
use tada::diagnostics::label_distribution_report;
use tada::losses::{cosine_normal_loss, keypoint_loss, segmentation_loss};
use tada::metrics::{aggregate, angular_error_map, MetricsReport};
use tada::runner::{reproduce_orderings, run_dir, run_matrix, run_one, ClaimStatus, ExperimentConfig, MethodId};
use tada::trainer::{Regime, Trainer};

fn report(criterion: &str, pass: bool, detail: String) {
    println!("{} {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion} failed: {detail}");
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"))
}

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name), &[]).unwrap()
}

fn cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(format!("{}-{}", cfg.name, cfg.hash()))
}

// Matrices are shared between tests; train each at most once per process.
static MATRIX_LOCK: Mutex<()> = Mutex::new(());

fn matrix(name: &str) -> (ExperimentConfig, Vec<MetricsReport>) {
    let _guard = MATRIX_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = shipped(name);
    let out = cache_dir(&cfg);
    let t = Instant::now();
    let outcome = run_matrix(&cfg, &out).unwrap();
    assert!(outcome.failures.is_empty(), "{name} runs failed: {:?}", outcome.failures);
    println!(
        "{name}: {} runs ({} cached) in {:.0?} under {}",
        outcome.reports.len(),
        outcome.skipped,
        t.elapsed(),
        out.display()
    );
    (cfg, outcome.reports)
}

#[test]
fn metric_oracle_equivalence() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (pred, gt, m) = random_pair(&mut rng);
        let got = aggregate(&angular_error_map(&pred, &gt, &m).unwrap()).unwrap().values();
        for (g, w) in got.iter().zip(reference(&pred, &gt, &m)) {
            worst = worst.max((g - w).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        "metric oracle (100 random 8x8 pairs, 5 metrics)",
        worst < 1e-6 && secs < 10.0,
        format!("max abs deviation {worst:.2e} (< 1e-6), {secs:.3} s (< 10 s)"),
    );
}

#[test]
fn loss_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dev = Device::Cpu;
    let (n, h, w) = (2, 4, 4);
    let gt = Tensor::from_vec(unit_normals(&mut rng, n, h * w), (n, 3, h, w), &dev).unwrap();
    let m = mask(&mut rng, n * h * w).reshape((n, h, w)).unwrap();
    let cosine = fd_relative_error(&randn(&mut rng, n * 3 * h * w), &[n, 3, h, w], |p| {
        cosine_normal_loss(p, &gt, &m).unwrap()
    });
    let k = 3;
    let gt_maps = Tensor::from_vec(randn(&mut rng, n * k * h * w), (n, k, h, w), &dev).unwrap();
    let gt_depth = Tensor::from_vec(randn(&mut rng, n * k), (n, k), &dev).unwrap();
    let depth = Tensor::from_vec(randn(&mut rng, n * k), (n, k), &dev).unwrap();
    let maps0 = randn(&mut rng, n * k * h * w);
    let maps = Tensor::from_vec(maps0.clone(), (n, k, h, w), &dev).unwrap();
    let keypoint = fd_relative_error(&maps0, &[n, k, h, w], |p| keypoint_loss(p, &depth, &gt_maps, &gt_depth).unwrap())
        .max(fd_relative_error(&randn(&mut rng, n * k), &[n, k], |d| {
            keypoint_loss(&maps, d, &gt_maps, &gt_depth).unwrap()
        }));
    let c = 4;
    let classes: Vec<u32> = (0..n * h * w).map(|_| rng.random_range(0..c as u32)).collect();
    let seg = fd_relative_error(&randn(&mut rng, n * c * h * w), &[n, c, h, w], |l| {
        segmentation_loss(l, &classes, &m).unwrap()
    });
    report(
        "gradient checks (f64, 4x4, central differences)",
        cosine < FD_TOL && keypoint < FD_TOL && seg < FD_TOL,
        format!("relative errors cosine {cosine:.1e}, keypoint {keypoint:.1e}, segmentation {seg:.1e} (< 1e-4)"),
    );
}

#[test]
fn gradient_reversal_exactness() {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = randn(&mut rng, 96);
    let up = randn(&mut rng, 96);
    let upstream = Tensor::from_vec(up.clone(), 96, &dev).unwrap();
    let mut worst = 0.0f64;
    for lambda in [0.0, 0.3, 1.0] {
        let x = candle_core::Var::from_vec(x0.clone(), 96, &dev).unwrap();
        let y = grad_reverse(x.as_tensor(), lambda).unwrap();
        let g: Vec<f64> = (y * &upstream).unwrap().sum_all().unwrap().backward().unwrap().get(&x).unwrap().to_vec1().unwrap();
        for (gi, ui) in g.iter().zip(&up) {
            worst = worst.max((gi + lambda * ui).abs());
        }
    }
    report(
        "gradient reversal (lambda in {0, 0.3, 1})",
        worst == 0.0,
        format!("max |grad + lambda * upstream| = {worst:e}"),
    );
}

#[test]
fn freeze_invariance() {
    let data = generate_dataset(&tiny_spec(AnchorKind::Segmentation)).unwrap();
    let mut cfg = tiny_config(Regime::HeadFreeze, 500);
    cfg.stage1.max_steps = 40;
    cfg.eval_every = 50;
    let mut t = Trainer::new(cfg, &data).unwrap();
    let s = t.run().unwrap();
    let stage2 = s.steps - s.stage1_steps.unwrap_or(0);
    let head_kept = s.stage1_head_checksum.as_deref() == Some(s.head_checksum.as_str());
    let frozen = t.model().is_frozen();
    report(
        "freeze invariance (head checksum across stage 2)",
        head_kept && frozen && stage2 >= 500,
        format!(
            "{stage2} stage-2 steps, stage-1 head {} vs final head {}",
            s.stage1_head_checksum.unwrap_or_default(),
            s.head_checksum
        ),
    );
}

#[test]
fn anti_leak() {
    let mut failures = Vec::new();
    let mut checked = 0;
    for kind in [AnchorKind::Segmentation, AnchorKind::Keypoints] {
        let mut data = generate_dataset(&tiny_spec(kind)).unwrap();
        for s in data.split_mut(Domain::Target, Split::Train) {
            s.normals.iter_mut().for_each(|v| *v = f32::NAN);
        }
        for regime in Regime::ALL.into_iter().filter(|&r| r != Regime::Oracle) {
            for da in [DaMode::None, DaMode::Feature, DaMode::Output, DaMode::MultiLevel] {
                let mut cfg = tiny_config(regime, 8);
                cfg.da_mode = da;
                let name = format!("{kind:?}/{}", cfg.method_name());
                let result = Trainer::new(cfg, &data).and_then(|mut t| {
                    t.run()?;
                    let losses_finite = t.log().iter().all(|r| r.values.values().all(|v| v.is_finite()));
                    let m = tada::metrics::evaluate(t.model(), &data, Domain::Target, Split::Test, 8)?;
                    Ok(losses_finite && m.is_finite() && param_values(t.model()).iter().all(|v| v.is_finite()))
                });
                checked += 1;
                match result {
                    Ok(true) => {}
                    Ok(false) => failures.push(format!("{name}: non-finite values")),
                    Err(e) => failures.push(format!("{name}: {e}")),
                }
            }
        }
        let oracle = Trainer::new(tiny_config(Regime::Oracle, 8), &data);
        if oracle.is_ok() {
            failures.push(format!("{kind:?}/oracle accepted poisoned visible labels"));
        }
    }
    report(
        "anti-leak (target-train main labels set to NaN)",
        failures.is_empty(),
        format!("{checked} non-oracle runs finite; oracle rejects visible NaN labels; problems: {failures:?}"),
    );
}

#[test]
fn generator_consistency() {
    let spec = ToyWorldSpec {
        image_size: 64,
        ..Default::default()
    };
    let size = spec.image_size;
    let hw = size * size;
    let step = 2.0 / size as f64;
    let (mut sum, mut count) = (0.0, 0usize);
    let (mut coherent, mut boundary) = (0, 0);
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let tilt = rng.random_range(-40.0..40.0);
        let scene = sample_scene(&spec, tilt, &mut rng);
        let settings = RenderSettings {
            size,
            style: &spec.source_style,
            anchor_kind: AnchorKind::Segmentation,
            border: 0,
            dropout: 0.0,
        };
        let sample = render_scene(&scene, &settings, Domain::Source, Split::Train, &mut rng);
        for r in 0..size {
            for c in 0..size {
                let p = r * size + c;
                if !sample.valid_mask[p] {
                    continue;
                }
                // Central differences of the height field at pixel spacing.
                let (x, y) = pixel_to_scene(r, c, size);
                let dzdx = (scene.height(x + step / 2.0, y) - scene.height(x - step / 2.0, y)) / step;
                let dzdy = (scene.height(x, y + step / 2.0) - scene.height(x, y - step / 2.0)) / step;
                let fd = normal_from_gradient(dzdx, dzdy);
                let dot: f64 = (0..3).map(|k| fd[k] * f64::from(sample.normals[k * hw + p])).sum();
                sum += dot.clamp(-1.0, 1.0).acos().to_degrees();
                count += 1;
            }
        }
        let (c, b) = boundary_coherence(&sample, size, 0.02);
        coherent += c;
        boundary += b;
    }
    let mean = sum / count as f64;
    let coherence = coherent as f64 / boundary.max(1) as f64;
    report(
        "generator consistency (64x64)",
        mean < 2.0 && coherence >= 0.9,
        format!(
            "finite-difference normal error {mean:.3} deg over {count} px (< 2), boundary coherence {:.1}% of {boundary} px (>= 90%)",
            100.0 * coherence
        ),
    );
}

#[test]
fn divergence_knob() {
    let w1 = |name: &str| {
        let cfg = shipped(name);
        let data = generate_dataset(&cfg.world).unwrap();
        label_distribution_report(&data, Split::Train, 20).unwrap().w1("z").unwrap()
    };
    let (matched, mismatched) = (w1("matched"), w1("mismatched"));
    report(
        "divergence knob (normal-z W1, train split)",
        mismatched > matched,
        format!("mismatched {mismatched:.5} > matched {matched:.5}"),
    );
}

fn claim_line(v: &tada::runner::ClaimVerdict) -> String {
    let pairs: Vec<String> = v
        .pairs
        .iter()
        .map(|p| match &p.comparison {
            Some(c) => format!(
                "{} {:.2} vs {} {:.2} (gap {:.2}, pooled std {:.2})",
                p.lower, c.mean_a, p.higher, c.mean_b, c.gap, c.pooled_std
            ),
            None => format!("{} vs {}: missing", p.lower, p.higher),
        })
        .collect();
    format!("{} [{}]", v.status.name(), pairs.join("; "))
}

#[test]
fn toy_ordering_mismatched() {
    let (cfg, reports) = matrix("mismatched");
    let verdicts = reproduce_orderings(&reports, cfg.margin_factor);
    let a = verdicts.iter().find(|v| v.claim == "a").unwrap();
    let b = verdicts.iter().find(|v| v.claim == "b").unwrap();
    let ok_a = a.status == ClaimStatus::Holds;
    let ok_b = b.status == ClaimStatus::Holds;
    println!("{} toy ordering (a): {}", if ok_a { "PASS" } else { "FAIL" }, claim_line(a));
    println!("{} toy ordering (b): {}", if ok_b { "PASS" } else { "FAIL" }, claim_line(b));
    assert!(ok_a && ok_b, "toy ordering failed");
}

#[test]
fn matched_da_benefit() {
    let (cfg, reports) = matrix("matched");
    let verdicts = reproduce_orderings(&reports, cfg.margin_factor);
    let c: Vec<_> = verdicts.iter().filter(|v| v.claim.starts_with("c:")).collect();
    assert!(!c.is_empty(), "matched config has no adaptation methods");
    let ok = c.iter().all(|v| v.mean_order_holds == Some(true));
    let detail: Vec<String> = c.iter().map(|v| format!("{}: {}", v.claim, claim_line(v))).collect();
    report("matched-condition DA benefit (seed means)", ok, detail.join(" | "));
}

#[test]
fn determinism() {
    let cfg = shipped("mismatched");
    let method = MethodId::new(Regime::HeadFreeze, DaMode::None);
    let (_, reports) = matrix("mismatched");
    let cached = reports
        .iter()
        .find(|r| r.meta.method == method.to_string() && r.meta.seed == cfg.seeds[0])
        .expect("matrix has the run")
        .metrics
        .mean_deg;
    let fresh_dir = tempfile::tempdir().unwrap();
    let data = tada::runner::ensure_dataset(&cfg, fresh_dir.path()).unwrap();
    let fresh = run_one(&cfg, &data, method, cfg.seeds[0], fresh_dir.path()).unwrap().report().metrics.mean_deg;
    assert!(run_dir(fresh_dir.path(), method, cfg.seeds[0]).join("metrics.json").exists());
    report(
        "determinism (head_freeze rerun, same seed)",
        (fresh - cached).abs() <= 1e-6,
        format!("rerun {fresh:.9} vs first {cached:.9} deg"),
    );
}
