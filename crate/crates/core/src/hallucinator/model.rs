use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::HallucinatorConfig;
use super::flow::CouplingFlow;
use super::gaussian::{kl_standard_normal, log_density, reparameterize, standard_log_density};
use super::mlp::{Conditioning, ModulatedMlp};
use crate::error::{Error, Result};
use crate::feature_store::{subsample_indices, FeatureSet, MaskedSet};
use crate::nn::{bounded_logvar, Graph, Linear, ParamStore, Real, Tensor, Var};
use crate::set_transformer::{slot_tensor, GaussianHead, InvariantEncoder, SetEncoder};

/// Variational bound terms for one set; `total = recon - kl_z - kl_theta`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_theta: f64,
    pub total: f64,
}

/// Scalar tape handles of the bound terms.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub recon: Var,
    pub kl_z: Var,
    pub kl_theta: Var,
    pub total: Var,
}

impl ElboTerms {
    pub fn read<T: Real>(&self, g: &Graph<T>) -> ElboBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        ElboBreakdown {
            recon: v(self.recon),
            kl_z: v(self.kl_z),
            kl_theta: v(self.kl_theta),
            total: v(self.total),
        }
    }
}

/// Standard normal draws consumed by one bound evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise<T> {
    /// `[1, theta_dim]`
    pub theta: Tensor<T>,
    /// `[N_e, z_dim]`
    pub z: Tensor<T>,
}

pub(crate) fn standard_normal<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(StandardNormal.sample(rng)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("noise shape is positive")
}

impl<T: Real> ElboNoise<T> {
    pub fn sample(config: &HallucinatorConfig, num_missing: usize, rng: &mut impl Rng) -> Self {
        let theta = standard_normal(1, config.theta_dim, rng);
        let z = standard_normal(num_missing, config.z_dim, rng);
        Self { theta, z }
    }
}

/// Prior-side quantities that depend only on the masked set.
#[derive(Clone, Debug)]
struct PriorContext<T> {
    mu: Tensor<T>,
    logvar: Tensor<T>,
    pooled: Tensor<T>,
    /// Embeddings of the generation slots, or one shared row when they coincide.
    g_missing: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct Nets {
    posterior: InvariantEncoder,
    prior: InvariantEncoder,
    flow: CouplingFlow,
    equivariant: Option<SetEncoder>,
    encoder: ModulatedMlp,
    enc_mu: Linear,
    enc_logvar: Linear,
    decoder: ModulatedMlp,
    dec_out: Linear,
}

/// All learned parameters plus the network structure that reads them.
#[derive(Clone, Debug)]
pub struct HallucinatorModel<T> {
    config: HallucinatorConfig,
    params: ParamStore<T>,
    nets: Nets,
    trained_steps: u64,
}

fn flagged_slots<T: Real>(dim: usize, values: &[f32], flags: &[bool]) -> Tensor<T> {
    let mut data = Vec::with_capacity(flags.len() * (dim + 1));
    for (row, &obs) in values.chunks(dim).zip(flags) {
        data.extend(row.iter().map(|&v| T::lit(v as f64)));
        data.push(if obs { T::one() } else { T::zero() });
    }
    Tensor::matrix(flags.len(), dim + 1, data).expect("non-empty slots")
}

fn set_tensor<T: Real>(set: &FeatureSet) -> Tensor<T> {
    Tensor::matrix(set.len(), set.dim(), set.data().iter().map(|&v| T::lit(v as f64)).collect())
        .expect("non-empty set")
}

impl<T: Real> HallucinatorModel<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: HallucinatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let set_cfg = c.set_encoder();
        let posterior = InvariantEncoder::new(&mut store, "posterior", set_cfg.clone(), c.theta_dim, &mut rng)?;
        let prior = InvariantEncoder::new(&mut store, "prior", set_cfg.clone(), c.theta_dim, &mut rng)?;
        let flow = CouplingFlow::new(
            &mut store,
            "flow",
            c.theta_dim,
            c.flow_layers,
            c.set_hidden,
            c.flow_hidden,
            c.flow_scale_bound,
            &mut rng,
        );
        let equivariant = if c.flags.peq {
            Some(SetEncoder::new(&mut store, "equivariant", set_cfg, &mut rng)?)
        } else {
            None
        };
        let g_dim = c.g_dim();
        let encoder = ModulatedMlp::new(
            &mut store,
            "encoder",
            c.feature_dim,
            c.theta_dim,
            g_dim,
            c.mlp_hidden,
            c.mlp_layers,
            c.flags,
            &mut rng,
        );
        let enc_mu = Linear::new(&mut store, "encoder.mu", c.mlp_hidden, c.z_dim, &mut rng);
        let enc_logvar = Linear::new(&mut store, "encoder.logvar", c.mlp_hidden, c.z_dim, &mut rng);
        let decoder = ModulatedMlp::new(
            &mut store,
            "decoder",
            c.z_dim,
            c.theta_dim,
            g_dim,
            c.mlp_hidden,
            c.mlp_layers,
            c.flags,
            &mut rng,
        );
        let dec_out = Linear::new(&mut store, "decoder.out", c.mlp_hidden, c.feature_dim, &mut rng);
        Ok(Self {
            config,
            params: store,
            nets: Nets {
                posterior,
                prior,
                flow,
                equivariant,
                encoder,
                enc_mu,
                enc_logvar,
                decoder,
                dec_out,
            },
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &HallucinatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn set_trained_steps(&mut self, steps: u64) {
        self.trained_steps = steps;
    }

    /// Same model at another precision.
    pub fn cast<U: Real>(&self) -> HallucinatorModel<U> {
        HallucinatorModel {
            config: self.config.clone(),
            params: self.params.cast(),
            nets: self.nets.clone(),
            trained_steps: self.trained_steps,
        }
    }

    fn check_dim(&self, dim: usize, what: &str) -> Result<()> {
        if dim != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "{what} has dim {dim}, model expects {}",
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    // ---- graph-level pieces -------------------------------------------------

    /// Posterior head from slots that carry true values for every element.
    pub fn posterior_head(&self, g: &mut Graph<T>, slots: &Tensor<T>) -> Result<GaussianHead> {
        self.nets.posterior.encode(g, slots)
    }

    /// Base Gaussian and pooled context of the prior.
    pub fn prior_head(&self, g: &mut Graph<T>, slots: &Tensor<T>) -> Result<GaussianHead> {
        self.nets.prior.encode(g, slots)
    }

    /// `log p(theta | X^t)` per row of `theta`, by change of variables.
    pub fn prior_log_density(&self, g: &mut Graph<T>, theta: Var, head: &GaussianHead) -> Var {
        let (base, ld) = self.nets.flow.inverse(g, theta, head.pooled);
        let lp = log_density(g, base, head.mu, head.logvar);
        match ld {
            Some(ld) => g.add(lp, ld),
            None => lp,
        }
    }

    /// Pushes base noise through the prior: `theta = flow(mu + sigma * eps)`.
    pub fn prior_transform(&self, g: &mut Graph<T>, head: &GaussianHead, eps: Tensor<T>) -> Var {
        let base = reparameterize(g, head.mu, head.logvar, eps);
        self.nets.flow.forward(g, base, head.pooled).0
    }

    /// Per-slot embeddings `[N, g_dim]`, or `None` when disabled.
    pub fn equivariant_graph(&self, g: &mut Graph<T>, slots: &Tensor<T>) -> Result<Option<Var>> {
        match &self.nets.equivariant {
            Some(enc) => Ok(Some(enc.encode_equivariant(g, slots)?)),
            None => Ok(None),
        }
    }

    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, cond: Conditioning) -> (Var, Var) {
        let h = self.nets.encoder.forward(g, x, cond);
        let raw = self.nets.enc_logvar.forward(g, h);
        (self.nets.enc_mu.forward(g, h), bounded_logvar(g, raw))
    }

    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var, cond: Conditioning) -> Var {
        let h = self.nets.decoder.forward(g, z, cond);
        self.nets.dec_out.forward(g, h)
    }

    /// Per-frame reconstruction log-likelihood and `KL(q(z) || N(0, I))`,
    /// each `[n, 1]`.
    pub fn frame_terms(&self, g: &mut Graph<T>, x: Var, cond: Conditioning, eps_z: Tensor<T>) -> (Var, Var) {
        let (mu, lv) = self.encode_graph(g, x, cond);
        let z = reparameterize(g, mu, lv, eps_z);
        let x_hat = self.decode_graph(g, z, cond);
        let resid = g.sub(x, x_hat);
        (standard_log_density(g, resid), kl_standard_normal(g, mu, lv))
    }

    /// Bound for one split with explicit noise.
    pub fn elbo_graph(
        &self,
        g: &mut Graph<T>,
        x_e: &FeatureSet,
        masked: &MaskedSet,
        noise: &ElboNoise<T>,
    ) -> Result<ElboTerms> {
        let c = &self.config;
        self.check_dim(masked.dim(), "masked set")?;
        self.check_dim(x_e.dim(), "missing set")?;
        let missing = masked.missing_indices();
        if missing.is_empty() || missing.len() != x_e.len() {
            return Err(Error::InvalidInput(format!(
                "{} missing elements do not align with {} masked slots",
                x_e.len(),
                missing.len()
            )));
        }
        if noise.theta.shape() != [1, c.theta_dim] || noise.z.shape() != [missing.len(), c.z_dim] {
            return Err(Error::Shape("noise does not match the split".into()));
        }

        // posterior sees true values everywhere; the flag still marks membership
        let mut full = masked.values().to_vec();
        let d = masked.dim();
        for (row, &slot) in x_e.rows().zip(&missing) {
            full[slot * d..(slot + 1) * d].copy_from_slice(row);
        }
        let post_slots = flagged_slots::<T>(d, &full, masked.observed_flags());
        let q = self.posterior_head(g, &post_slots)?;
        let theta = reparameterize(g, q.mu, q.logvar, noise.theta.clone());
        let log_q = log_density(g, theta, q.mu, q.logvar);

        let prior_slots = slot_tensor::<T>(masked);
        let p = self.prior_head(g, &prior_slots)?;
        let log_p = self.prior_log_density(g, theta, &p);
        let kl_theta_row = g.sub(log_q, log_p);
        let kl_theta = g.sum(kl_theta_row);

        let g_rows = match self.equivariant_graph(g, &prior_slots)? {
            Some(all) => Some(g.select_rows(all, &missing)),
            None => None,
        };
        let x = g.input(set_tensor(x_e));
        let cond = Conditioning { theta, g: g_rows };
        let (rec, klz) = self.frame_terms(g, x, cond, noise.z.clone());
        let recon = g.sum(rec);
        let kl_z = g.sum(klz);
        let t = g.sub(recon, kl_z);
        let total = g.sub(t, kl_theta);
        Ok(ElboTerms {
            recon,
            kl_z,
            kl_theta,
            total,
        })
    }

    /// Evaluates the bound with noise drawn from `rng` (theta first, then z).
    pub fn elbo(&self, x_e: &FeatureSet, masked: &MaskedSet, rng: &mut impl Rng) -> Result<ElboBreakdown> {
        let noise = ElboNoise::sample(&self.config, x_e.len(), rng);
        let mut g = Graph::new(&self.params);
        let terms = self.elbo_graph(&mut g, x_e, masked, &noise)?;
        Ok(terms.read(&g))
    }

    // ---- tensor-level API ---------------------------------------------------

    /// `(mu, logvar)` of `q(theta | X^e, X^t)`; `full` holds true values of all slots.
    pub fn posterior_theta(&self, full: &FeatureSet, observed: &[bool]) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_dim(full.dim(), "set")?;
        if observed.len() != full.len() {
            return Err(Error::Shape("one observed flag per element is required".into()));
        }
        let mut g = Graph::new(&self.params);
        let head = self.posterior_head(&mut g, &flagged_slots(full.dim(), full.data(), observed))?;
        Ok((g.value(head.mu).clone(), g.value(head.logvar).clone()))
    }

    /// Base `(mu, logvar)` of the prior.
    pub fn prior_base(&self, masked: &MaskedSet) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_dim(masked.dim(), "masked set")?;
        let mut g = Graph::new(&self.params);
        let head = self.prior_head(&mut g, &slot_tensor(masked))?;
        Ok((g.value(head.mu).clone(), g.value(head.logvar).clone()))
    }

    /// `count` draws from `p(theta | X^t)`, one per row.
    pub fn prior_sample(&self, masked: &MaskedSet, count: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
        self.check_dim(masked.dim(), "masked set")?;
        let eps = standard_normal(count, self.config.theta_dim, rng);
        let mut g = Graph::new(&self.params);
        let head = self.prior_head(&mut g, &slot_tensor(masked))?;
        let theta = self.prior_transform(&mut g, &head, eps);
        Ok(g.value(theta).clone())
    }

    /// `log p(theta | X^t)` for each row of `theta`, `[n, 1]`.
    pub fn prior_log_prob(&self, masked: &MaskedSet, theta: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_dim(masked.dim(), "masked set")?;
        if theta.cols() != self.config.theta_dim {
            return Err(Error::Shape(format!("theta width {} != {}", theta.cols(), self.config.theta_dim)));
        }
        let mut g = Graph::new(&self.params);
        let head = self.prior_head(&mut g, &slot_tensor(masked))?;
        let t = g.input(theta.clone());
        let lp = self.prior_log_density(&mut g, t, &head);
        Ok(g.value(lp).clone())
    }

    /// Flow output and forward log-determinant for base samples `eps` (no base shift).
    pub fn flow_forward(&self, masked: &MaskedSet, eps: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new(&self.params);
        let head = self.prior_head(&mut g, &slot_tensor(masked))?;
        let x = g.input(eps.clone());
        let (y, ld) = self.nets.flow.forward(&mut g, x, head.pooled);
        Ok((g.value(y).clone(), ld.map(|v| g.value(v).clone())))
    }

    /// Inverse of [`Self::flow_forward`].
    pub fn flow_inverse(&self, masked: &MaskedSet, y: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new(&self.params);
        let head = self.prior_head(&mut g, &slot_tensor(masked))?;
        let yv = g.input(y.clone());
        let (x, ld) = self.nets.flow.inverse(&mut g, yv, head.pooled);
        Ok((g.value(x).clone(), ld.map(|v| g.value(v).clone())))
    }

    /// Per-slot embeddings `[N, g_dim]`; all zeros when disabled.
    pub fn embed_g(&self, masked: &MaskedSet) -> Result<Tensor<T>> {
        self.check_dim(masked.dim(), "masked set")?;
        let mut g = Graph::new(&self.params);
        match self.equivariant_graph(&mut g, &slot_tensor(masked))? {
            Some(v) => Ok(g.value(v).clone()),
            None => Ok(Tensor::zeros(&[masked.len(), self.config.g_dim()])),
        }
    }

    fn cond_inputs(&self, g: &mut Graph<T>, theta: &Tensor<T>, gi: &Tensor<T>) -> Conditioning {
        let theta = g.input(theta.clone());
        let gv = self.config.flags.peq.then(|| g.input(gi.clone()));
        Conditioning { theta, g: gv }
    }

    /// `(mu_z, logvar_z)` for each row of `x`. `theta` is one row; `gi` one row or one per row of `x`.
    pub fn vae_encode(&self, x: &Tensor<T>, theta: &Tensor<T>, gi: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_dim(x.cols(), "input")?;
        let mut g = Graph::new(&self.params);
        let cond = self.cond_inputs(&mut g, theta, gi);
        let xv = g.input(x.clone());
        let (mu, lv) = self.encode_graph(&mut g, xv, cond);
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    /// Likelihood mean for each row of `z`.
    pub fn vae_decode(&self, z: &Tensor<T>, theta: &Tensor<T>, gi: &Tensor<T>) -> Result<Tensor<T>> {
        if z.cols() != self.config.z_dim {
            return Err(Error::Shape(format!("z width {} != {}", z.cols(), self.config.z_dim)));
        }
        let mut g = Graph::new(&self.params);
        let cond = self.cond_inputs(&mut g, theta, gi);
        let zv = g.input(z.clone());
        let out = self.decode_graph(&mut g, zv, cond);
        Ok(g.value(out).clone())
    }

    fn prior_context(&self, masked: &MaskedSet) -> Result<PriorContext<T>> {
        let mut g = Graph::new(&self.params);
        let slots = slot_tensor(masked);
        let head = self.prior_head(&mut g, &slots)?;
        let g_missing = match self.equivariant_graph(&mut g, &slots)? {
            Some(all) => {
                let rows = g.value(all).select_rows(&masked.missing_indices());
                // masked slots are identical inputs, so their rows normally coincide
                let first = rows.row(0);
                let shared = (1..rows.rows()).all(|r| rows.row(r) == first);
                Some(if shared { rows.select_rows(&[0]) } else { rows })
            }
            None => None,
        };
        Ok(PriorContext {
            mu: g.value(head.mu).clone(),
            logvar: g.value(head.logvar).clone(),
            pooled: g.value(head.pooled).clone(),
            g_missing,
        })
    }

    fn generate(&self, ctx: &PriorContext<T>, n: usize, rng: &mut impl Rng) -> Tensor<T> {
        let eps = standard_normal(1, self.config.theta_dim, rng);
        let z = standard_normal(n, self.config.z_dim, rng);
        let mut g = Graph::new(&self.params);
        let head = GaussianHead {
            mu: g.input(ctx.mu.clone()),
            logvar: g.input(ctx.logvar.clone()),
            pooled: g.input(ctx.pooled.clone()),
        };
        let theta = self.prior_transform(&mut g, &head, eps);
        let gv = ctx.g_missing.as_ref().map(|t| {
            if t.rows() == 1 {
                g.input(t.clone())
            } else {
                let idx: Vec<usize> = (0..n).collect();
                g.input(t.select_rows(&idx))
            }
        });
        let zv = g.input(z);
        let out = self.decode_graph(&mut g, zv, Conditioning { theta, g: gv });
        g.value(out).clone()
    }

    /// Samples `count` new elements conditioned on `x_t` (normalized space).
    ///
    /// Each batch conditions on up to `observed_cap` observed elements and
    /// fills the remaining slots of a set of `set_cardinality`. Batches use
    /// independent streams derived from one draw of `rng`.
    pub fn hallucinate(&self, x_t: &FeatureSet, count: usize, rng: &mut impl Rng) -> Result<FeatureSet> {
        let d = self.config.feature_dim;
        self.check_dim(x_t.dim(), "target set")?;
        if count == 0 {
            return Ok(FeatureSet::empty(d));
        }
        if x_t.is_empty() {
            return Err(Error::InvalidInput("target set is empty".into()));
        }
        if self.trained_steps == 0 {
            log::warn!("hallucinating from an untrained model");
        }
        let n_obs = x_t.len().min(self.config.observed_cap);
        let per_batch = self.config.set_cardinality - n_obs;
        let batches = count.div_ceil(per_batch);
        let base_seed: u64 = rng.random();
        let fixed = if x_t.len() <= self.config.observed_cap {
            Some(self.prior_context(&MaskedSet::from_observed(x_t, per_batch))?)
        } else {
            None
        };
        let parts = (0..batches)
            .into_par_iter()
            .map(|b| -> Result<Vec<f32>> {
                let mut r = ChaCha8Rng::seed_from_u64(base_seed);
                r.set_stream(b as u64);
                let n = per_batch.min(count - b * per_batch);
                let owned;
                let ctx = match &fixed {
                    Some(c) => c,
                    None => {
                        let idx = subsample_indices(x_t.len(), n_obs, &mut r)?;
                        owned = self.prior_context(&MaskedSet::from_observed(&x_t.select(&idx), per_batch))?;
                        &owned
                    }
                };
                let out = self.generate(ctx, n, &mut r);
                if !out.is_finite() {
                    return Err(Error::NonFinite(format!("batch {b} produced non-finite samples")));
                }
                Ok(out.data().iter().map(|v| v.as_f64() as f32).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(d, parts.concat())
    }
}
