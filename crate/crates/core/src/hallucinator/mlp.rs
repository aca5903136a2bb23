//! MLP whose layers are conditioned on `theta` and `g_i` by concatenation
//! and by sigmoid gates.

use rand::Rng;

use super::config::AblationFlags;
use crate::nn::{Graph, Linear, ParamId, ParamStore, Real, Var, LEAKY_SLOPE};

/// Conditioning inputs. Either may be a single row shared by all data rows.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub theta: Var,
    /// `None` when equivariant embeddings are disabled (all-zero `g`).
    pub g: Option<Var>,
}

#[derive(Clone, Debug)]
struct Gate {
    theta_w: ParamId,
    g_w: Option<ParamId>,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModulatedMlp {
    data_w: ParamId,
    theta_w: Option<ParamId>,
    g_w: Option<ParamId>,
    bias: ParamId,
    layers: Vec<Linear>,
    gates: Vec<Gate>,
    hidden: usize,
}

/// `a + b` where `b` may be a single row.
fn add_broadcast<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    if g.value(b).rows() == 1 && g.value(a).rows() != 1 {
        g.add_row(a, b)
    } else {
        g.add(a, b)
    }
}

fn mul_broadcast<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    if g.value(b).rows() == 1 && g.value(a).rows() != 1 {
        g.mul_row(a, b)
    } else {
        g.mul(a, b)
    }
}

impl ModulatedMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        theta_dim: usize,
        g_dim: usize,
        hidden: usize,
        num_layers: usize,
        flags: AblationFlags,
        rng: &mut impl Rng,
    ) -> Self {
        // first layer acts on [x ⊕ theta ⊕ g]; its weight is kept as row blocks
        let fan_in = in_dim + if flags.cat { theta_dim + if flags.peq { g_dim } else { 0 } } else { 0 };
        let glorot_block = |store: &mut ParamStore<T>, n: String, rows: usize, rng: &mut _| {
            let limit = (6.0 / (fan_in + hidden) as f64).sqrt();
            let data = (0..rows * hidden)
                .map(|_| T::lit(Rng::random_range(rng, -limit..limit)))
                .collect();
            store.add(n, crate::nn::Tensor::matrix(rows, hidden, data).expect("positive dims"))
        };
        let data_w = glorot_block(store, format!("{name}.0.w_x"), in_dim, rng);
        let theta_w = flags
            .cat
            .then(|| glorot_block(store, format!("{name}.0.w_theta"), theta_dim, rng));
        let g_w = (flags.cat && flags.peq).then(|| glorot_block(store, format!("{name}.0.w_g"), g_dim, rng));
        let bias = store.add_zeros(format!("{name}.0.b"), &[1, hidden]);
        let layers = (1..num_layers)
            .map(|l| Linear::new(store, &format!("{name}.{l}"), hidden, hidden, rng))
            .collect();
        let gates = if flags.modulate {
            (0..num_layers)
                .map(|l| Gate {
                    theta_w: store.add_glorot(format!("{name}.gate{l}.w_theta"), theta_dim, hidden, rng),
                    g_w: flags
                        .peq
                        .then(|| store.add_glorot(format!("{name}.gate{l}.w_g"), g_dim, hidden, rng)),
                    bias: store.add_zeros(format!("{name}.gate{l}.b"), &[1, hidden]),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            data_w,
            theta_w,
            g_w,
            bias,
            layers,
            gates,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() + 1
    }

    fn gate<T: Real>(&self, g: &mut Graph<T>, l: usize, cond: Conditioning) -> Option<Var> {
        let gate = self.gates.get(l)?;
        let wt = g.param(gate.theta_w);
        let b = g.param(gate.bias);
        let t = g.matmul(cond.theta, wt);
        let mut pre = add_broadcast(g, t, b);
        if let (Some(gw), Some(gv)) = (gate.g_w, cond.g) {
            let w = g.param(gw);
            let gg = g.matmul(gv, w);
            pre = if g.value(gg).rows() >= g.value(pre).rows() {
                add_broadcast(g, gg, pre)
            } else {
                add_broadcast(g, pre, gg)
            };
        }
        Some(g.sigmoid(pre))
    }

    /// Hidden features `[n, hidden]` after the last gated layer.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, cond: Conditioning) -> Var {
        let w = g.param(self.data_w);
        let mut pre = g.matmul(x, w);
        // the per-set part of the first affine map is computed once and broadcast
        let b = g.param(self.bias);
        let mut shared = b;
        if let Some(tw) = self.theta_w {
            let w = g.param(tw);
            let t = g.matmul(cond.theta, w);
            shared = add_broadcast(g, t, shared);
        }
        if let (Some(gw), Some(gv)) = (self.g_w, cond.g) {
            let w = g.param(gw);
            let gg = g.matmul(gv, w);
            shared = if g.value(gg).rows() >= g.value(shared).rows() {
                add_broadcast(g, gg, shared)
            } else {
                add_broadcast(g, shared, gg)
            };
        }
        pre = add_broadcast(g, pre, shared);
        let mut h = g.leaky_relu(pre, LEAKY_SLOPE);
        if let Some(c) = self.gate(g, 0, cond) {
            h = mul_broadcast(g, h, c);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(g, h);
            h = g.leaky_relu(pre, LEAKY_SLOPE);
            if let Some(c) = self.gate(g, i + 1, cond) {
                h = mul_broadcast(g, h, c);
            }
        }
        h
    }
}
