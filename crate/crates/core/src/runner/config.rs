use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::DaMode;
use crate::datagen::{short_hash, Split, ToyWorldSpec};
use crate::error::{Result, TadaError};
use crate::trainer::{Regime, RegimeConfig};

/// A regime plus its adaptation mode, written `regime` or `regime+mode`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodId {
    pub regime: Regime,
    pub da_mode: DaMode,
}

impl MethodId {
    pub fn new(regime: Regime, da_mode: DaMode) -> Self {
        MethodId { regime, da_mode }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (r, d) = s.split_once('+').unwrap_or((s, "none"));
        let regime = Regime::parse(r.trim()).ok_or_else(|| TadaError::Config(format!("unknown regime {r:?}")))?;
        let da_mode = match d.trim() {
            "none" => DaMode::None,
            "feature" => DaMode::Feature,
            "output" => DaMode::Output,
            "multi_level" => DaMode::MultiLevel,
            other => return Err(TadaError::Config(format!("unknown adaptation mode {other:?}"))),
        };
        Ok(MethodId { regime, da_mode })
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.da_mode {
            DaMode::None => write!(f, "{}", self.regime.name()),
            m => write!(f, "{}+{}", self.regime.name(), m.name()),
        }
    }
}

/// One dataset condition and the method matrix run on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Condition label used in comparison tables.
    pub name: String,
    pub world: ToyWorldSpec,
    /// Template for every run; regime, da_mode and seed are set per run.
    pub training: RegimeConfig,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub eval_split: Split,
    /// Steps between resumable state saves within a run; 0 disables.
    pub checkpoint_every: usize,
    /// Pooled-std multiple a gap must exceed for an ordering to count.
    pub margin_factor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            world: ToyWorldSpec::default(),
            training: RegimeConfig::default(),
            methods: ["baseline", "mtl_src", "mtl_tgt", "mtl_both", "head_freeze"]
                .map(String::from)
                .to_vec(),
            seeds: vec![0, 1, 2],
            eval_split: Split::Test,
            checkpoint_every: 0,
            margin_factor: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn method_ids(&self) -> Result<Vec<MethodId>> {
        self.methods.iter().map(|m| MethodId::parse(m)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.training.validate()?;
        let mut ids = self.method_ids()?;
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TadaError::Config("duplicate method in the matrix".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.is_empty() || seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(TadaError::Config("seeds must be a non-empty list of distinct values".into()));
        }
        if !(self.margin_factor >= 0.0) {
            return Err(TadaError::Config("margin_factor must be >= 0".into()));
        }
        Ok(())
    }

    pub fn regime_config(&self, method: MethodId, seed: u64) -> RegimeConfig {
        let mut c = self.training.clone();
        c.regime = method.regime;
        c.da_mode = method.da_mode;
        c.seed = seed;
        c
    }

    /// Seed-independent hash of a method's training configuration.
    pub fn method_hash(&self, method: MethodId) -> String {
        self.regime_config(method, 0).hash()
    }

    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| TadaError::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| TadaError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TadaError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }
}

/// Applies `dotted.key=value`; the value is read as TOML and falls back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| TadaError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(TadaError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| TadaError::Config(format!("override {key:?} descends into a non-table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for s in ["baseline", "head_freeze+feature", "mtl_both+output", "oracle", "baseline+multi_level"] {
            assert_eq!(MethodId::parse(s).unwrap().to_string(), s);
        }
        assert!(MethodId::parse("nope").is_err());
        assert!(MethodId::parse("baseline+magic").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::from_toml(
            "name = \"x\"\nseeds = [4, 5]\n[training]\nbatch_size = 4\n",
            &["training.optimizer.lr=0.01".into(), "world.image_size=32".into(), "name=renamed".into()],
        )
        .unwrap();
        assert_eq!(cfg.training.batch_size, 4);
        assert_eq!(cfg.training.optimizer.lr, 0.01);
        assert_eq!(cfg.world.image_size, 32);
        assert_eq!(cfg.name, "renamed");
        assert_eq!(cfg.seeds, vec![4, 5]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[training]\nbatch_sise = 4\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["world.image_size=30".into()]).is_err());
        assert!(ExperimentConfig::from_toml("methods = [\"baseline\", \"baseline\"]", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["noequals".into()]).is_err());
    }

    #[test]
    fn method_hash_ignores_seed() {
        let cfg = ExperimentConfig::default();
        let m = MethodId::parse("head_freeze").unwrap();
        assert_eq!(cfg.regime_config(m, 3).hash(), cfg.regime_config(m, 3).hash());
        assert_eq!(cfg.method_hash(m), cfg.method_hash(m));
        assert_ne!(cfg.method_hash(m), cfg.method_hash(MethodId::parse("baseline").unwrap()));
    }
}
