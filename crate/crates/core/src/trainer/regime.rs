use serde::{Deserialize, Serialize};

use crate::losses::LossTerm;

/// Which supervised losses are used and which labels may be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    MtlSrc,
    MtlTgt,
    MtlBoth,
    HeadFreeze,
    Oracle,
}

/// Phase of a run: single-stage regimes use `Single`, HeadFreeze uses `One`
/// then `Two`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Single,
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility {
    pub source_main: bool,
    pub source_anchor: bool,
    pub target_anchor: bool,
    pub target_main: bool,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Baseline,
        Regime::MtlSrc,
        Regime::MtlTgt,
        Regime::MtlBoth,
        Regime::HeadFreeze,
        Regime::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::MtlSrc => "mtl_src",
            Regime::MtlTgt => "mtl_tgt",
            Regime::MtlBoth => "mtl_both",
            Regime::HeadFreeze => "head_freeze",
            Regime::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        Regime::ALL.into_iter().find(|r| r.name() == s)
    }

    pub fn visibility(self) -> Visibility {
        use Regime::*;
        Visibility {
            source_main: true,
            source_anchor: matches!(self, MtlSrc | MtlBoth | HeadFreeze | Oracle),
            target_anchor: matches!(self, MtlTgt | MtlBoth | HeadFreeze | Oracle),
            target_main: self == Oracle,
        }
    }

    pub fn stages(self) -> &'static [Stage] {
        match self {
            Regime::HeadFreeze => &[Stage::One, Stage::Two],
            _ => &[Stage::Single],
        }
    }

    /// Loss terms optimized in `stage`, in a fixed order.
    pub fn terms(self, stage: Stage) -> Vec<LossTerm> {
        use LossTerm::*;
        match (self, stage) {
            (Regime::Baseline, _) => vec![SourceMain],
            (Regime::MtlSrc, _) | (Regime::HeadFreeze, Stage::One) => vec![SourceMain, SourceAnchor],
            (Regime::MtlTgt, _) => vec![SourceMain, TargetAnchor],
            (Regime::MtlBoth, _) | (Regime::HeadFreeze, _) => vec![SourceMain, SourceAnchor, TargetAnchor],
            (Regime::Oracle, _) => vec![SourceMain, SourceAnchor, TargetAnchor, TargetMain],
        }
    }

    /// Terms of the last stage, which fix the calibrated anchor weight.
    pub fn final_terms(self) -> Vec<LossTerm> {
        self.terms(*self.stages().last().expect("at least one stage"))
    }
}

impl Visibility {
    pub fn allows(&self, term: LossTerm) -> bool {
        match term {
            LossTerm::SourceMain => self.source_main,
            LossTerm::SourceAnchor => self.source_anchor,
            LossTerm::TargetAnchor => self.target_anchor,
            LossTerm::TargetMain => self.target_main,
        }
    }
}

/// True once the signal has gone `patience` evaluations without improving on
/// its best value by more than `rel_tol` (relative).
pub fn stage_switch_criterion(history: &[f64], patience: usize, rel_tol: f64) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &v in history {
        if v < best - rel_tol * best.abs() || best == f64::INFINITY {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience
}
