//! Parameterized building blocks shared by both branches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wsrpn_autodiff::{Float, Graph, Tensor, Var};

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};

pub(crate) fn normal<F: Float>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::from_f64(dist.sample(rng)))
}

pub(crate) fn uniform<F: Float>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::from_f64(rng.random_range(-bound..=bound)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[fan_in, fan_out], bound),
        );
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound));
        Self {
            weight,
            bias: Some(bias),
        }
    }

    pub fn without_bias<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[fan_in, fan_out], bound),
        );
        Self { weight, bias: None }
    }

    /// `[..., in] -> [..., out]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => Ok(g.add(y, p.var(b))?),
            None => Ok(y),
        }
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: (usize, usize, usize),
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), dims.0, dims.1),
            out: Linear::new(store, rng, &format!("{name}.out"), dims.1, dims.2),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.gelu(h);
        self.out.forward(g, p, h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], F::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, F::from_f64(1e-5))?;
        let s = g.mul(n, p.var(self.gain))?;
        Ok(g.add(s, p.var(self.bias))?)
    }
}

/// NHWC convolution followed by a bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                normal(rng, &[kernel, kernel, in_channels, out_channels], std),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            stride,
            pad,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.weight), self.stride, self.pad)?;
        Ok(g.add(y, p.var(self.bias))?)
    }
}
