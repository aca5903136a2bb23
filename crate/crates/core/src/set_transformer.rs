//! Induced set attention stacks and mean-pooled invariant heads.
//!
//! No normalization layers are used anywhere in this module.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::MaskedSet;
use crate::nn::{bounded_logvar, multihead_attention, Graph, Linear, ParamId, ParamStore, Real, Tensor, Var, LEAKY_SLOPE};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetEncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_inducing: usize,
    pub heads: usize,
    /// Evaluate slots in a canonical (sorted) order so that permuted inputs
    /// produce bit-identical results.
    pub canonical_order: bool,
}

impl SetEncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 256,
            num_blocks: 4,
            num_inducing: 16,
            heads: 4,
            canonical_order: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("set encoder dims must be positive".into()));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.num_inducing == 0 {
            return Err(Error::Config("num_inducing must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Multihead attention block: `H = X + Att(X, Y, Y)`, `out = H + FF(H)`.
#[derive(Clone, Debug)]
pub struct Mab {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff1: Linear,
    ff2: Linear,
}

impl Mab {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), hidden, hidden, rng),
            k: Linear::new(store, &format!("{name}.k"), hidden, hidden, rng),
            v: Linear::new(store, &format!("{name}.v"), hidden, hidden, rng),
            o: Linear::new(store, &format!("{name}.o"), hidden, hidden, rng),
            ff1: Linear::new(store, &format!("{name}.ff1"), hidden, hidden, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), hidden, hidden, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        let h = self.q.in_dim;
        if g.value(x).cols() != h || g.value(y).cols() != h {
            return Err(Error::Shape(format!(
                "attention block expects width {h}, got {:?} and {:?}",
                g.shape(x),
                g.shape(y)
            )));
        }
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, y);
        let v = self.v.forward(g, y);
        let att = multihead_attention(g, q, k, v, self.heads)?;
        let att = self.o.forward(g, att);
        let hdn = g.add(x, att);
        let f = self.ff1.forward(g, hdn);
        let f = g.leaky_relu(f, LEAKY_SLOPE);
        let f = self.ff2.forward(g, f);
        Ok(g.add(hdn, f))
    }
}

/// `ISAB(X) = MAB(X, MAB(I, X))` with learned inducing points `I`.
#[derive(Clone, Debug)]
pub struct Isab {
    inducing: ParamId,
    induce: Mab,
    broadcast: Mab,
}

impl Isab {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &SetEncoderConfig, rng: &mut impl Rng) -> Self {
        let inducing = store.add_normal(format!("{name}.inducing"), cfg.num_inducing, cfg.hidden_dim, rng);
        Self {
            inducing,
            induce: Mab::new(store, &format!("{name}.mab0"), cfg.hidden_dim, cfg.heads, rng),
            broadcast: Mab::new(store, &format!("{name}.mab1"), cfg.hidden_dim, cfg.heads, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let i = g.param(self.inducing);
        let summary = self.induce.forward(g, i, x)?;
        self.broadcast.forward(g, x, summary)
    }
}

/// Slot order that depends only on slot contents (lexicographic, stable).
pub fn canonical_order<T: Real>(rows: &Tensor<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.rows()).collect();
    idx.sort_by(|&a, &b| {
        for (x, y) in rows.row(a).iter().zip(rows.row(b)) {
            match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    });
    idx
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (pos, &src) in perm.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

/// Slot values concatenated with their observed flag: `[N, dim + 1]`.
pub fn slot_tensor<T: Real>(set: &MaskedSet) -> Tensor<T> {
    let dim = set.dim();
    let mut data = Vec::with_capacity(set.len() * (dim + 1));
    for i in 0..set.len() {
        data.extend(set.value(i).iter().map(|&v| T::lit(v as f64)));
        data.push(if set.is_observed(i) { T::one() } else { T::zero() });
    }
    Tensor::matrix(set.len(), dim + 1, data).expect("masked sets are non-empty")
}

/// Permutation-equivariant stack: input affine map then `num_blocks` ISABs.
#[derive(Clone, Debug)]
pub struct SetEncoder {
    config: SetEncoderConfig,
    input: Linear,
    blocks: Vec<Isab>,
}

impl SetEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        config: SetEncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let input = Linear::new(store, &format!("{name}.in"), config.input_dim, config.hidden_dim, rng);
        let blocks = (0..config.num_blocks)
            .map(|b| Isab::new(store, &format!("{name}.isab{b}"), &config, rng))
            .collect();
        Ok(Self {
            config,
            input,
            blocks,
        })
    }

    pub fn config(&self) -> &SetEncoderConfig {
        &self.config
    }

    /// Runs the stack on rows in the order given.
    pub fn forward_rows<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "set encoder expects width {}, got {}",
                self.config.input_dim,
                g.value(x).cols()
            )));
        }
        let mut h = self.input.forward(g, x);
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        Ok(h)
    }

    /// Per-slot embeddings `[N, hidden]`; row `i` belongs to slot `i`.
    pub fn encode_equivariant<T: Real>(&self, g: &mut Graph<T>, slots: &Tensor<T>) -> Result<Var> {
        if !self.config.canonical_order {
            let x = g.input(slots.clone());
            return self.forward_rows(g, x);
        }
        let order = canonical_order(slots);
        let x = g.input(slots.select_rows(&order));
        let h = self.forward_rows(g, x)?;
        Ok(g.select_rows(h, &inverse_permutation(&order)))
    }

    /// Mean of the equivariant embeddings, `[1, hidden]`.
    pub fn encode_pooled<T: Real>(&self, g: &mut Graph<T>, slots: &Tensor<T>) -> Result<Var> {
        let x = if self.config.canonical_order {
            g.input(slots.select_rows(&canonical_order(slots)))
        } else {
            g.input(slots.clone())
        };
        let h = self.forward_rows(g, x)?;
        Ok(g.mean_rows(h))
    }
}

/// Graph handles of a diagonal Gaussian produced from a pooled set embedding.
#[derive(Clone, Copy, Debug)]
pub struct GaussianHead {
    pub mu: Var,
    pub logvar: Var,
    pub pooled: Var,
}

/// Equivariant stack, mean pooling, then affine heads for `mu` and `logvar`.
#[derive(Clone, Debug)]
pub struct InvariantEncoder {
    encoder: SetEncoder,
    mu: Linear,
    logvar: Linear,
}

impl InvariantEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        config: SetEncoderConfig,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = config.hidden_dim;
        let encoder = SetEncoder::new(store, name, config, rng)?;
        Ok(Self {
            encoder,
            mu: Linear::new(store, &format!("{name}.mu"), hidden, out_dim, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), hidden, out_dim, rng),
        })
    }

    pub fn encoder(&self) -> &SetEncoder {
        &self.encoder
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, slots: &Tensor<T>) -> Result<GaussianHead> {
        let pooled = self.encoder.encode_pooled(g, slots)?;
        let mu = self.mu.forward(g, pooled);
        let raw = self.logvar.forward(g, pooled);
        let logvar = bounded_logvar(g, raw);
        Ok(GaussianHead { mu, logvar, pooled })
    }

    /// Convenience evaluation returning plain tensors.
    pub fn encode_invariant<T: Real>(
        &self,
        store: &ParamStore<T>,
        slots: &MaskedSet,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new(store);
        let head = self.encode(&mut g, &slot_tensor(slots))?;
        Ok((g.value(head.mu).clone(), g.value(head.logvar).clone()))
    }
}
