//! Diagonal Gaussian densities and divergences on the tape.

use crate::nn::{Graph, Real, Tensor, Var};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Sums each row: `[n, c] -> [n, 1]`.
pub fn row_sum<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let ones = g.input(Tensor::full(&[g.value(x).cols(), 1], T::one()));
    g.matmul(x, ones)
}

/// Tiles a single row to `n` rows; other shapes pass through.
pub fn broadcast_rows<T: Real>(g: &mut Graph<T>, x: Var, n: usize) -> Var {
    if g.value(x).rows() == 1 && n > 1 {
        g.repeat_rows(x, n)
    } else {
        x
    }
}

/// `log N(x; mu, diag(exp(logvar)))` per row, `[n, 1]`.
/// `mu` and `logvar` may be a single row shared by every row of `x`.
pub fn log_density<T: Real>(g: &mut Graph<T>, x: Var, mu: Var, logvar: Var) -> Var {
    let n = g.value(x).rows();
    let d = g.value(x).cols();
    let mu = broadcast_rows(g, mu, n);
    let logvar = broadcast_rows(g, logvar, n);
    let diff = g.sub(x, mu);
    let sq = g.square(diff);
    let neg = g.scale(logvar, -1.0);
    let prec = g.exp(neg);
    let maha = g.mul(sq, prec);
    let inner = g.add(maha, logvar);
    let s = row_sum(g, inner);
    let s = g.add_scalar(s, d as f64 * LOG_2PI);
    g.scale(s, -0.5)
}

/// `log N(x; 0, I)` per row.
pub fn standard_log_density<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let d = g.value(x).cols();
    let sq = g.square(x);
    let s = row_sum(g, sq);
    let s = g.add_scalar(s, d as f64 * LOG_2PI);
    g.scale(s, -0.5)
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` per row.
pub fn kl_standard_normal<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Var {
    let m2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(m2, var);
    let b = g.sub(a, logvar);
    let b = g.add_scalar(b, -1.0);
    let s = row_sum(g, b);
    g.scale(s, 0.5)
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Tensor<T>) -> Var {
    let n = eps.rows();
    let mu = broadcast_rows(g, mu, n);
    let logvar = broadcast_rows(g, logvar, n);
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let e = g.input(eps);
    let noise = g.mul(std, e);
    g.add(mu, noise)
}
