use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Real;
use crate::error::{Error, Result};

/// Negative-side slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Log-variance heads saturate smoothly at `±LOGVAR_BOUND`.
pub const LOGVAR_BOUND: f64 = 10.0;

/// `LOGVAR_BOUND * tanh(raw / LOGVAR_BOUND)`: identity near zero, bounded far
/// from it, so `exp(logvar)` cannot overflow when inputs are large.
pub fn bounded_logvar<T: Real>(g: &mut Graph<T>, raw: Var) -> Var {
    let s = g.scale(raw, 1.0 / LOGVAR_BOUND);
    let t = g.tanh(s);
    g.scale(t, LOGVAR_BOUND)
}

/// Affine map `x W + b` applied along the trailing dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng);
        let bias = store.add_zeros(format!("{name}.b"), &[1, out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        linear(g, x, self.weight, self.bias)
    }
}

/// `x[n, in] * w[in, out] + b[1, out]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, weight: ParamId, bias: ParamId) -> Var {
    let w = g.param(weight);
    let b = g.param(bias);
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

/// Fallible variant of [`linear`] that validates shapes first.
pub fn try_linear<T: Real>(g: &mut Graph<T>, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
    let xin = g.value(x).cols();
    let w = g.store().value(weight);
    let b = g.store().value(bias);
    if w.shape().len() != 2 || w.shape()[0] != xin {
        return Err(Error::Shape(format!(
            "input width {xin} does not match weights {:?}",
            w.shape()
        )));
    }
    if b.shape() != [1, w.shape()[1]] {
        return Err(Error::Shape(format!(
            "bias {:?} does not match weights {:?}",
            b.shape(),
            w.shape()
        )));
    }
    Ok(linear(g, x, weight, bias))
}
