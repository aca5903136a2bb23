//! Affine coupling flow conditioned on a pooled set embedding.

use rand::Rng;

use super::gaussian::row_sum;
use crate::nn::{Graph, Linear, ParamId, ParamStore, Real, Var, LEAKY_SLOPE};

/// One coupling layer: half of the vector passes through unchanged and
/// parameterizes an elementwise affine map of the other half.
#[derive(Clone, Debug)]
pub struct Coupling {
    /// Column range that conditions the transform.
    cond: (usize, usize),
    /// Column range that is transformed.
    moved: (usize, usize),
    w_cond: ParamId,
    w_ctx: ParamId,
    bias: ParamId,
    out: Linear,
    bound: f64,
}

impl Coupling {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        flip: bool,
        ctx_dim: usize,
        hidden: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let split = dim / 2;
        let (cond, moved) = if flip {
            ((split, dim), (0, split))
        } else {
            ((0, split), (split, dim))
        };
        let cond_len = cond.1 - cond.0;
        let moved_len = moved.1 - moved.0;
        // the first affine map acts on [cond ⊕ ctx]; its weight is stored in two blocks
        Self {
            cond,
            moved,
            w_cond: store.add_glorot(format!("{name}.in.w_cond"), cond_len, hidden, rng),
            w_ctx: store.add_glorot(format!("{name}.in.w_ctx"), ctx_dim, hidden, rng),
            bias: store.add_zeros(format!("{name}.in.b"), &[1, hidden]),
            out: Linear::new(store, &format!("{name}.out"), hidden, 2 * moved_len, rng),
            bound,
        }
    }

    /// Log-scales and shifts for the moved half.
    fn scale_shift<T: Real>(&self, g: &mut Graph<T>, a: Var, ctx: Var) -> (Var, Var) {
        let wa = g.param(self.w_cond);
        let wc = g.param(self.w_ctx);
        let b = g.param(self.bias);
        let ha = g.matmul(a, wa);
        let hc = g.matmul(ctx, wc);
        let hc = g.add(hc, b);
        let h = g.add_row(ha, hc);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let o = self.out.forward(g, h);
        let n = self.moved.1 - self.moved.0;
        let raw = g.slice_cols(o, 0, n);
        let t = g.slice_cols(o, n, n);
        let s = g.tanh(raw);
        let s = g.scale(s, self.bound);
        (s, t)
    }

    fn split<T: Real>(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let a = g.slice_cols(x, self.cond.0, self.cond.1 - self.cond.0);
        let b = g.slice_cols(x, self.moved.0, self.moved.1 - self.moved.0);
        (a, b)
    }

    fn join<T: Real>(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        if self.cond.0 == 0 {
            g.concat_cols(&[a, b])
        } else {
            g.concat_cols(&[b, a])
        }
    }

    /// `y = [a, b * exp(s) + t]`; returns `(y, log|det dy/dx|)` with the
    /// log-determinant shaped `[n, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, ctx: Var) -> (Var, Var) {
        let (a, b) = self.split(g, x);
        let (s, t) = self.scale_shift(g, a, ctx);
        let es = g.exp(s);
        let bs = g.mul(b, es);
        let b2 = g.add(bs, t);
        let y = self.join(g, a, b2);
        (y, row_sum(g, s))
    }

    /// Inverse map; the log-determinant returned is that of the inverse.
    pub fn inverse<T: Real>(&self, g: &mut Graph<T>, y: Var, ctx: Var) -> (Var, Var) {
        let (a, b2) = self.split(g, y);
        let (s, t) = self.scale_shift(g, a, ctx);
        let shifted = g.sub(b2, t);
        let neg = g.scale(s, -1.0);
        let es = g.exp(neg);
        let b = g.mul(shifted, es);
        let x = self.join(g, a, b);
        (x, row_sum(g, neg))
    }
}

/// Stack of couplings alternating which half is transformed.
#[derive(Clone, Debug)]
pub struct CouplingFlow {
    layers: Vec<Coupling>,
}

impl CouplingFlow {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        num_layers: usize,
        ctx_dim: usize,
        hidden: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|k| {
                Coupling::new(store, &format!("{name}.{k}"), dim, k % 2 == 1, ctx_dim, hidden, bound, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Base sample to flow output; `None` log-determinant when there are no layers.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, ctx: Var) -> (Var, Option<Var>) {
        let mut y = x;
        let mut total: Option<Var> = None;
        for layer in &self.layers {
            let (next, ld) = layer.forward(g, y, ctx);
            y = next;
            total = Some(match total {
                Some(t) => g.add(t, ld),
                None => ld,
            });
        }
        (y, total)
    }

    /// Flow output back to the base space, with the inverse log-determinant.
    pub fn inverse<T: Real>(&self, g: &mut Graph<T>, y: Var, ctx: Var) -> (Var, Option<Var>) {
        let mut x = y;
        let mut total: Option<Var> = None;
        for layer in self.layers.iter().rev() {
            let (prev, ld) = layer.inverse(g, x, ctx);
            x = prev;
            total = Some(match total {
                Some(t) => g.add(t, ld),
                None => ld,
            });
        }
        (x, total)
    }
}
