use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TadaError};
use crate::model::{ArchiveEntry, Archive};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Per-parameter adaptive step without momentum.
    Rmsprop,
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over an explicit list of variables. Variables not in
/// the list are never touched, whatever gradients they receive.
pub struct Optimizer {
    config: OptimizerConfig,
    vars: Vec<(String, Var)>,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, vars: Vec<(String, Var)>) -> Result<Self> {
        if !(config.lr.is_finite() && config.lr > 0.0) {
            return Err(TadaError::Config(format!("learning rate {} must be positive", config.lr)));
        }
        let n = vars.len();
        Ok(Optimizer {
            config,
            vars,
            first: vec![None; n],
            second: vec![None; n],
            steps: 0,
        })
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    /// Drops every variable not named in `keep`, retaining the moment
    /// buffers of those that remain.
    pub fn restrict(&mut self, keep: &[String]) {
        let mut vars = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for ((v, m), s) in self.vars.drain(..).zip(self.first.drain(..)).zip(self.second.drain(..)) {
            if keep.contains(&v.0) {
                vars.push(v);
                first.push(m);
                second.push(s);
            }
        }
        self.vars = vars;
        self.first = first;
        self.second = second;
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            match c.kind {
                OptimizerKind::Sgd => {
                    var.set(&(var.as_tensor() - (g * c.lr)?)?)?;
                }
                OptimizerKind::Rmsprop => {
                    let v = match &self.second[i] {
                        Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                        None => (g.sqr()? * (1.0 - c.beta2))?,
                    };
                    let step = (g / (v.sqrt()? + c.eps)?)?;
                    var.set(&(var.as_tensor() - (step * c.lr)?)?)?;
                    self.second[i] = Some(v);
                }
                OptimizerKind::Adam => {
                    let m = match &self.first[i] {
                        Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                        None => (g * (1.0 - c.beta1))?,
                    };
                    let v = match &self.second[i] {
                        Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                        None => (g.sqr()? * (1.0 - c.beta2))?,
                    };
                    let mhat = (&m / (1.0 - c.beta1.powi(t)))?;
                    let vhat = (&v / (1.0 - c.beta2.powi(t)))?;
                    let step = (mhat / (vhat.sqrt()? + c.eps)?)?;
                    var.set(&(var.as_tensor() - (step * c.lr)?)?)?;
                    self.first[i] = Some(m);
                    self.second[i] = Some(v);
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as archive entries under `prefix`.
    pub fn export(&self, prefix: &str) -> Vec<ArchiveEntry> {
        let mut out = Vec::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            for (tag, buf) in [("m", &self.first[i]), ("v", &self.second[i])] {
                if let Some(t) = buf {
                    out.push(ArchiveEntry {
                        name: format!("{prefix}.{tag}.{name}"),
                        group: None,
                        tensor: t.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn import(&mut self, prefix: &str, archive: &Archive, steps: u64) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (tag, buf) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                *buf = match archive.get(&format!("{prefix}.{tag}.{name}")) {
                    Some(e) if e.tensor.dims() == var.dims() => Some(e.tensor.clone()),
                    Some(_) => {
                        return Err(TadaError::Shape(format!("optimizer state shape for {name}")))
                    }
                    None => None,
                };
            }
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn quadratic_descent(kind: OptimizerKind) -> f32 {
        let x = Var::from_tensor(&Tensor::new(&[3.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind,
                lr: 0.05,
                ..OptimizerConfig::default()
            },
            vec![("x".into(), x.clone())],
        )
        .unwrap();
        for _ in 0..400 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        x.as_tensor().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn every_kind_minimizes_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            assert!(quadratic_descent(kind) < 1e-2, "{kind:?}");
        }
    }

    #[test]
    fn unlisted_vars_are_untouched() {
        let a = Var::ones(3, DType::F32, &Device::Cpu).unwrap();
        let b = Var::ones(3, DType::F32, &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default(), vec![("a".into(), a.clone())]).unwrap();
        let loss = (a.as_tensor() * b.as_tensor()).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
        assert_ne!(a.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
    }
}
