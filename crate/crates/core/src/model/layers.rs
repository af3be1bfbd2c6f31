use candle_core::{Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Which side of the freeze boundary a parameter lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Trunk,
    Head,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

/// Builds parameters from a seeded stream so initialization is reproducible.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub device: &'a Device,
    pub params: Vec<Param>,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, group: ParamGroup, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.random_range(-bound..bound) as f32
                } else {
                    0.0
                }
            })
            .collect();
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, self.device)?)?;
        self.params.push(Param {
            name,
            group,
            var: var.clone(),
        });
        Ok(var)
    }

    fn values(&mut self, name: String, group: ParamGroup, data: Vec<f32>) -> Result<Var> {
        let n = data.len();
        let var = Var::from_tensor(&Tensor::from_vec(data, n, self.device)?)?;
        self.params.push(Param {
            name,
            group,
            var: var.clone(),
        });
        Ok(var)
    }
}

/// He-uniform bound for ReLU layers.
fn he(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// LeCun-uniform bound for linear output layers.
fn lecun(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Gain {
    Relu,
    Linear,
}

fn bound(gain: Gain, fan_in: usize) -> f64 {
    match gain {
        Gain::Relu => he(fan_in),
        Gain::Linear => lecun(fan_in),
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        init: &mut Init<'_>,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: Gain,
    ) -> Result<Self> {
        let w = init.uniform(format!("{name}.weight"), group, &[c_out, c_in, k, k], bound(gain, c_in * k * k))?;
        let b = init.values(format!("{name}.bias"), group, vec![0.0; c_out])?;
        Ok(Conv {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.b.dim(0)?;
        let y = super::unfold::conv2d(x, &self.w, self.stride, self.pad)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

/// Transposed convolution; `k = 4, stride = 2, pad = 1` doubles the resolution,
/// `k = 3, stride = 1, pad = 1` keeps it.
#[derive(Clone, Debug)]
pub struct Deconv {
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

impl Deconv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        init: &mut Init<'_>,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: Gain,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k / (stride * stride)).max(1);
        let w = init.uniform(format!("{name}.weight"), group, &[c_in, c_out, k, k], bound(gain, fan_in))?;
        debug_assert_eq!(bias.len(), c_out);
        let b = init.values(format!("{name}.bias"), group, bias)?;
        let pad = if stride == 1 { k / 2 } else { (k - stride) / 2 };
        Ok(Deconv { w, b, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.b.dim(0)?;
        let y = super::unfold::conv_transpose2d(x, &self.w, self.stride, self.pad)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub(crate) fn new(
        init: &mut Init<'_>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        gain: Gain,
    ) -> Result<Self> {
        let w = init.uniform(format!("{name}.weight"), group, &[d_out, d_in], bound(gain, d_in))?;
        let b = init.values(format!("{name}.bias"), group, vec![0.0; d_out])?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.t()?)?.broadcast_add(&self.b)?)
    }
}

pub(crate) fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

