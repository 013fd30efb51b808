//! Parameterized building blocks shared by the deformable modules and the model.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::trunc_normal;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
}

/// Fully connected layer `x·W + b` applied to the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = match init {
            Init::TruncNormal(std) => {
                Tensor::from_fn(&[fan_in, fan_out], |_| trunc_normal(rng, std))
            }
            Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
        };
        Self {
            weight: store.add(format!("{name}.w"), w),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    /// Applies the layer to `[..., fan_in]`, returning `[..., fan_out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&1);
        if c != self.fan_in {
            return Err(Error::Shape(format!(
                "linear expects {} input channels, got {shape:?}",
                self.fan_in
            )));
        }
        let rows = g.value(x).len() / c;
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, c])?
        };
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(flat, w)?;
        let y = g.add_row(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().expect("rank >= 1") = self.fan_out;
            g.reshape(y, &out)
        }
    }
}

/// Layer normalization parameters (`gamma = 1`, `beta = 0` at init).
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-6;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layernorm(x, gamma, beta, NORM_EPS)
    }
}
