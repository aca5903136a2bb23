//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{GradBuffer, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    /// Denominator floor so that near-zero gradients do not inflate the ratio.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            coords_per_param: Some(8),
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn eval_loss<F>(store: &ParamStore<f64>, loss: &F) -> f64
where
    F: Fn(&mut Graph<f64>) -> Var,
{
    let mut g = Graph::new(store);
    let l = loss(&mut g);
    g.value(l).item()
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// `loss` must be deterministic: any sampling inside it has to use a freshly
/// seeded generator on every call.
pub fn grad_check<F>(store: &mut ParamStore<f64>, loss: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l).into_params()
    };
    compare_gradients(store, loss, &analytic, opts)
}

/// Like [`grad_check`] but against externally supplied gradients.
pub fn compare_gradients<F>(
    store: &mut ParamStore<f64>,
    loss: F,
    analytic: &GradBuffer<f64>,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<_> = (0..store.len()).map(super::params::ParamId).collect();
    for id in ids {
        let n = store.get(id).tensor.len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(id).tensor.data()[c];
            store.get_mut(id).tensor.data_mut()[c] = orig + opts.epsilon;
            let plus = eval_loss(store, &loss);
            store.get_mut(id).tensor.data_mut()[c] = orig - opts.epsilon;
            let minus = eval_loss(store, &loss);
            store.get_mut(id).tensor.data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_param = store.get(id).name.clone();
                report.worst_index = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
