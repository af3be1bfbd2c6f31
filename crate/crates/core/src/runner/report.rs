use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MethodId};
use super::{CONFIG_ECHO, RUNS_DIR};
use crate::adversarial::DaMode;
use crate::error::Result;
use crate::metrics::{aggregate_runs, compare_errors, Comparison, MetricsReport, Verdict, METRIC_NAMES};
use crate::trainer::Regime;

fn sort_key(r: &MetricsReport) -> (Option<MethodId>, String, u64) {
    (MethodId::parse(&r.meta.method).ok(), r.meta.method.clone(), r.meta.seed)
}

/// Every `runs/*/metrics.json` under `out`, ordered by method then seed.
pub fn collect_reports(out: &Path) -> Result<Vec<MetricsReport>> {
    let runs = out.join(RUNS_DIR);
    let mut reports = Vec::new();
    if runs.is_dir() {
        for entry in fs::read_dir(&runs)? {
            let path = entry?.path().join("metrics.json");
            if path.is_file() {
                reports.push(serde_json::from_slice::<MetricsReport>(&fs::read(&path)?)?);
            }
        }
    }
    reports.sort_by_key(sort_key);
    Ok(reports)
}

fn read_echo(out: &Path) -> Option<ExperimentConfig> {
    let bytes = fs::read(out.join(CONFIG_ECHO)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn group_by_method(reports: &[MetricsReport]) -> Vec<(String, Vec<&MetricsReport>)> {
    let mut groups: Vec<(String, Vec<&MetricsReport>)> = Vec::new();
    for r in reports {
        match groups.last_mut() {
            Some((m, g)) if *m == r.meta.method => g.push(r),
            _ => groups.push((r.meta.method.clone(), vec![r])),
        }
    }
    groups
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn write_results_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["kind".to_string(), "method".into(), "seed".into(), "n_runs".into()];
    header.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
    header.extend(METRIC_NAMES.iter().map(|m| format!("{m}_std")));
    header.extend(["n_pixels", "spec_hash", "config_hash"].map(String::from));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec!["run".to_string(), r.meta.method.clone(), r.meta.seed.to_string(), "1".into()];
        row.extend(r.metrics.values().iter().map(|&v| fmt(v)));
        row.extend(std::iter::repeat_n(String::new(), 5));
        row.extend([
            r.metrics.n_pixels.to_string(),
            r.meta.spec_hash.clone(),
            r.meta.config_hash.clone(),
        ]);
        w.write_record(&row)?;
    }
    for (method, group) in group_by_method(reports) {
        let owned: Vec<MetricsReport> = group.iter().map(|&r| r.clone()).collect();
        let Ok(agg) = aggregate_runs(&owned) else {
            continue;
        };
        let mut row = vec!["aggregate".to_string(), method, String::new(), owned.len().to_string()];
        row.extend(agg.mean.iter().map(|&v| fmt(v)));
        row.extend(agg.std.iter().map(|&v| fmt(v)));
        let pixels: u64 = owned.iter().map(|r| r.metrics.n_pixels).sum();
        row.extend([pixels.to_string(), agg.spec_hash.clone(), owned[0].meta.config_hash.clone()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimStatus {
    Holds,
    Fails,
    Inconclusive,
    /// Reported without a pass/fail reading.
    Observational,
}

impl ClaimStatus {
    pub fn name(self) -> &'static str {
        match self {
            ClaimStatus::Holds => "holds",
            ClaimStatus::Fails => "fails",
            ClaimStatus::Inconclusive => "inconclusive",
            ClaimStatus::Observational => "observational",
        }
    }
}

/// Expected-lower vs expected-higher error comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub lower: String,
    pub higher: String,
    /// `None` when either side has fewer than two runs.
    pub comparison: Option<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimVerdict {
    pub claim: String,
    pub description: String,
    pub status: ClaimStatus,
    /// Whether every seed-mean ordering points the expected way.
    pub mean_order_holds: Option<bool>,
    pub pairs: Vec<PairComparison>,
}

fn errors_by_method(reports: &[MetricsReport]) -> BTreeMap<String, Vec<f64>> {
    let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        m.entry(r.meta.method.clone()).or_default().push(r.metrics.mean_deg);
    }
    m
}

fn pair(errors: &BTreeMap<String, Vec<f64>>, lower: MethodId, higher: MethodId, margin: f64) -> PairComparison {
    let (l, h) = (lower.to_string(), higher.to_string());
    let comparison = match (errors.get(&l), errors.get(&h)) {
        (Some(a), Some(b)) if a.len() >= 2 && b.len() >= 2 => Some(compare_errors(a, b, margin)),
        _ => None,
    };
    PairComparison {
        lower: l,
        higher: h,
        comparison,
    }
}

fn mean_order(pairs: &[PairComparison]) -> Option<bool> {
    pairs
        .iter()
        .map(|p| p.comparison.as_ref().map(|c| c.mean_a < c.mean_b))
        .collect::<Option<Vec<bool>>>()
        .map(|v| v.iter().all(|&b| b))
}

/// Holds when every expected ordering is decided the expected way, fails when
/// any is decided the other way.
fn all_better(pairs: &[PairComparison]) -> ClaimStatus {
    let mut status = ClaimStatus::Holds;
    for p in pairs {
        match p.comparison.as_ref().map(|c| c.verdict) {
            None => return ClaimStatus::Inconclusive,
            Some(Verdict::Worse) => return ClaimStatus::Fails,
            Some(Verdict::Inconclusive) => status = ClaimStatus::Inconclusive,
            Some(Verdict::Better) => {}
        }
    }
    status
}

/// Verdicts of the directional claims on the seed-aggregated target-domain
/// mean angular error. Claims about adaptation are emitted per mode present.
pub fn reproduce_orderings(reports: &[MetricsReport], margin_factor: f64) -> Vec<ClaimVerdict> {
    let errors = errors_by_method(reports);
    let id = |r: Regime| MethodId::new(r, DaMode::None);
    let hf = id(Regime::HeadFreeze);
    let both = id(Regime::MtlBoth);
    let base = id(Regime::Baseline);
    let mut out = Vec::new();

    let pairs_a = vec![
        pair(&errors, hf, both, margin_factor),
        pair(&errors, both, id(Regime::MtlSrc), margin_factor),
        pair(&errors, both, id(Regime::MtlTgt), margin_factor),
        pair(&errors, both, base, margin_factor),
    ];
    out.push(ClaimVerdict {
        claim: "a".into(),
        description: "head_freeze < mtl_both < {mtl_src, mtl_tgt, baseline}".into(),
        status: all_better(&pairs_a),
        mean_order_holds: mean_order(&pairs_a),
        pairs: pairs_a,
    });

    let pairs_b = vec![pair(&errors, base, id(Regime::MtlTgt), margin_factor)];
    let status_b = match pairs_b[0].comparison.as_ref().map(|c| c.verdict) {
        None => ClaimStatus::Inconclusive,
        // mtl_tgt beating baseline beyond the margin contradicts the claim.
        Some(Verdict::Worse) => ClaimStatus::Fails,
        Some(_) => ClaimStatus::Holds,
    };
    out.push(ClaimVerdict {
        claim: "b".into(),
        description: "mtl_tgt does not beat baseline".into(),
        status: status_b,
        mean_order_holds: pairs_b[0].comparison.as_ref().map(|c| c.mean_a <= c.mean_b),
        pairs: pairs_b,
    });

    let mut modes: Vec<DaMode> = errors
        .keys()
        .filter_map(|m| MethodId::parse(m).ok())
        .map(|m| m.da_mode)
        .filter(|&d| d != DaMode::None)
        .collect();
    modes.sort();
    modes.dedup();
    for mode in modes {
        let pairs_c = vec![
            pair(&errors, MethodId::new(Regime::Baseline, mode), base, margin_factor),
            pair(&errors, MethodId::new(Regime::HeadFreeze, mode), hf, margin_factor),
        ];
        out.push(ClaimVerdict {
            claim: format!("c:{}", mode.name()),
            description: format!("+{} improves baseline and head_freeze", mode.name()),
            status: all_better(&pairs_c),
            mean_order_holds: mean_order(&pairs_c),
            pairs: pairs_c,
        });
        let pairs_d = vec![pair(&errors, hf, MethodId::new(Regime::HeadFreeze, mode), margin_factor)];
        out.push(ClaimVerdict {
            claim: format!("d:{}", mode.name()),
            description: format!("head_freeze without adaptation vs head_freeze+{}", mode.name()),
            status: ClaimStatus::Observational,
            mean_order_holds: mean_order(&pairs_d),
            pairs: pairs_d,
        });
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn write_orderings_csv(path: &Path, verdicts: &[ClaimVerdict]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "claim",
        "status",
        "mean_order_holds",
        "expected_lower",
        "expected_higher",
        "mean_lower",
        "mean_higher",
        "gap",
        "pooled_std",
        "welch_t",
        "pair_verdict",
        "description",
    ])?;
    for v in verdicts {
        for p in &v.pairs {
            let c = p.comparison.as_ref();
            w.write_record([
                v.claim.clone(),
                v.status.name().to_string(),
                v.mean_order_holds.map(|b| b.to_string()).unwrap_or_default(),
                p.lower.clone(),
                p.higher.clone(),
                opt(c.map(|c| c.mean_a)),
                opt(c.map(|c| c.mean_b)),
                opt(c.map(|c| c.gap)),
                opt(c.map(|c| c.pooled_std)),
                opt(c.and_then(|c| c.welch_t)),
                c.map(|c| format!("{:?}", c.verdict).to_lowercase()).unwrap_or("missing".into()),
                v.description.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `orderings.csv` and `orderings.json` under `out`
/// from the run artifacts alone; rerunning yields identical bytes.
pub fn write_report(out: &Path) -> Result<Vec<ClaimVerdict>> {
    let reports = collect_reports(out)?;
    let margin = read_echo(out).map_or(1.0, |c| c.margin_factor);
    write_results_csv(&out.join("results.csv"), &reports)?;
    let verdicts = reproduce_orderings(&reports, margin);
    write_orderings_csv(&out.join("orderings.csv"), &verdicts)?;
    fs::write(out.join("orderings.json"), serde_json::to_vec_pretty(&verdicts)?)?;
    Ok(verdicts)
}

/// Side-by-side seed-aggregated mean error per method for several conditions.
pub fn write_comparison(dirs: &[PathBuf], dest: &Path) -> Result<()> {
    let mut columns = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for d in dirs {
        let name = read_echo(d)
            .map(|c| c.name)
            .unwrap_or_else(|| d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        let errors = errors_by_method(&collect_reports(d)?);
        methods.extend(errors.keys().cloned());
        columns.push((name, errors));
    }
    methods.sort_by_key(|m| (MethodId::parse(m).ok(), m.clone()));
    methods.dedup();
    let mut w = csv::Writer::from_path(dest)?;
    let mut header = vec!["method".to_string()];
    for (name, _) in &columns {
        header.extend([format!("{name}_mean_deg"), format!("{name}_mean_deg_std"), format!("{name}_n_runs")]);
    }
    w.write_record(&header)?;
    for m in &methods {
        let mut row = vec![m.clone()];
        for (_, errors) in &columns {
            match errors.get(m) {
                Some(v) => {
                    let (mean, std) = crate::metrics::mean_std(v);
                    row.extend([fmt(mean), fmt(std), v.len().to_string()]);
                }
                None => row.extend([String::new(), String::new(), "0".into()]),
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Metrics, RunMeta};

    fn report(method: &str, seed: u64, mean: f64) -> MetricsReport {
        MetricsReport {
            metrics: Metrics {
                rmse_deg: mean * 1.2,
                mean_deg: mean,
                median_deg: mean * 0.9,
                pct_below_11_25: 0.3,
                pct_below_30: 0.8,
                n_pixels: 100,
            },
            meta: RunMeta {
                method: method.into(),
                seed,
                spec_hash: "s".into(),
                config_hash: format!("c-{method}"),
            },
        }
    }

    fn matrix(means: &[(&str, [f64; 3])]) -> Vec<MetricsReport> {
        means
            .iter()
            .flat_map(|(m, v)| v.iter().enumerate().map(move |(s, &e)| report(m, s as u64, e)))
            .collect()
    }

    fn claim<'a>(v: &'a [ClaimVerdict], id: &str) -> &'a ClaimVerdict {
        v.iter().find(|c| c.claim == id).unwrap()
    }

    #[test]
    fn head_freeze_best_holds() {
        let r = matrix(&[
            ("head_freeze", [10.0, 10.2, 9.8]),
            ("mtl_both", [12.0, 12.2, 11.8]),
            ("mtl_src", [15.0, 15.2, 14.8]),
            ("mtl_tgt", [16.0, 16.2, 15.8]),
            ("baseline", [15.5, 15.7, 15.3]),
        ]);
        let v = reproduce_orderings(&r, 1.0);
        assert_eq!(claim(&v, "a").status, ClaimStatus::Holds);
        assert_eq!(claim(&v, "a").mean_order_holds, Some(true));
        assert_eq!(claim(&v, "b").status, ClaimStatus::Holds);
    }

    #[test]
    fn overlapping_noise_is_inconclusive() {
        let r = matrix(&[
            ("head_freeze", [10.0, 14.0, 12.0]),
            ("mtl_both", [11.0, 13.0, 12.5]),
            ("mtl_src", [10.5, 14.5, 12.0]),
            ("mtl_tgt", [11.0, 13.5, 12.0]),
            ("baseline", [12.0, 11.0, 13.0]),
        ]);
        let v = reproduce_orderings(&r, 1.0);
        assert_eq!(claim(&v, "a").status, ClaimStatus::Inconclusive);
        assert_eq!(claim(&v, "b").status, ClaimStatus::Holds);
    }

    #[test]
    fn missing_runs_are_inconclusive_and_reversals_fail() {
        let r = matrix(&[("head_freeze", [10.0, 10.1, 10.2]), ("baseline", [20.0, 20.1, 20.2])]);
        let v = reproduce_orderings(&r, 1.0);
        assert_eq!(claim(&v, "a").status, ClaimStatus::Inconclusive);
        assert_eq!(claim(&v, "a").mean_order_holds, None);
        let r = matrix(&[("mtl_tgt", [10.0, 10.1, 10.2]), ("baseline", [20.0, 20.1, 20.2])]);
        assert_eq!(claim(&reproduce_orderings(&r, 1.0), "b").status, ClaimStatus::Fails);
    }

    #[test]
    fn adaptation_claims_follow_the_modes_present() {
        let r = matrix(&[
            ("baseline", [15.0, 15.1, 15.2]),
            ("baseline+feature", [14.0, 14.1, 14.2]),
            ("head_freeze", [12.0, 12.1, 12.2]),
            ("head_freeze+feature", [11.0, 11.1, 11.2]),
        ]);
        let v = reproduce_orderings(&r, 1.0);
        assert_eq!(claim(&v, "c:feature").status, ClaimStatus::Holds);
        assert_eq!(claim(&v, "d:feature").status, ClaimStatus::Observational);
        assert!(v.iter().all(|c| !c.claim.starts_with("c:output")));
    }

    #[test]
    fn report_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        for r in matrix(&[("baseline", [15.0, 15.1, 15.2]), ("mtl_both", [14.0, 14.5, 14.2])]) {
            let d = dir.path().join(RUNS_DIR).join(format!("{}_s{}", r.meta.method, r.meta.seed));
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join("metrics.json"), serde_json::to_vec(&r).unwrap()).unwrap();
        }
        write_report(dir.path()).unwrap();
        let first: Vec<Vec<u8>> = ["results.csv", "orderings.csv", "orderings.json"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        write_report(dir.path()).unwrap();
        for (f, bytes) in ["results.csv", "orderings.csv", "orderings.json"].iter().zip(first) {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), bytes);
        }
        let text = String::from_utf8(fs::read(dir.path().join("results.csv")).unwrap()).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("run,")).count(), 6);
        assert_eq!(text.lines().filter(|l| l.starts_with("aggregate,")).count(), 2);
    }
}
