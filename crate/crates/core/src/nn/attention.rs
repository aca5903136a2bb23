use super::graph::{Graph, Var};
use super::Real;
use crate::error::{Error, Result};

/// Scaled dot-product attention split over `heads` column groups.
///
/// `q` is `[n_q, h]`, `k` and `v` are `[n_k, h]`. Each head attends with
/// scaling `1 / sqrt(h / heads)`; head outputs are concatenated back to width
/// `h`. Projections are the caller's business.
pub fn multihead_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let h = g.value(q).cols();
    if heads == 0 || h % heads != 0 {
        return Err(Error::Shape(format!(
            "width {h} is not divisible into {heads} heads"
        )));
    }
    if g.value(k).cols() != h || g.value(v).cols() != h {
        return Err(Error::Shape(format!(
            "query width {h}, key width {}, value width {}",
            g.value(k).cols(),
            g.value(v).cols()
        )));
    }
    if g.value(k).rows() != g.value(v).rows() {
        return Err(Error::Shape("keys and values differ in row count".into()));
    }
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, head * dh, dh),
                g.slice_cols(k, head * dh, dh),
                g.slice_cols(v, head * dh, dh),
            )
        };
        let scores = g.matmul_t(qh, kh, false, true);
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh));
    }
    Ok(g.concat_cols(&outs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamStore, Tensor};

    fn mat(rows: usize, cols: usize, seed: f64) -> Tensor<f64> {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + 1.0) * seed).sin())
                .collect(),
        )
        .unwrap()
    }

    /// Independent loop-based single-head attention.
    fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
        let (nq, nk, h) = (q.rows(), k.rows(), q.cols());
        let mut out = vec![0.0; nq * h];
        for i in 0..nq {
            let s: Vec<f64> = (0..nk)
                .map(|j| (0..h).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / (h as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nk {
                for c in 0..h {
                    out[i * h + c] += e[j] / z * v.row(j)[c];
                }
            }
        }
        out
    }

    #[test]
    fn single_head_matches_naive_reference() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let (qt, kt, vt) = (mat(3, 4, 0.7), mat(3, 4, 1.3), mat(3, 4, 2.1));
        let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
        let y = multihead_attention(&mut g, q, k, v, 1).unwrap();
        let want = naive_attention(&qt, &kt, &vt);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn one_key_passes_value_through() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let q = g.input(mat(5, 8, 0.3));
        let k = g.input(mat(1, 8, 0.9));
        let vt = mat(1, 8, 1.7);
        let v = g.input(vt.clone());
        let y = multihead_attention(&mut g, q, k, v, 4).unwrap();
        for r in 0..5 {
            assert_eq!(g.value(y).row(r), vt.data());
        }
    }

    #[test]
    fn joint_key_value_permutation_is_invisible() {
        let store = ParamStore::<f64>::new();
        let (qt, kt, vt) = (mat(4, 8, 0.5), mat(6, 8, 1.1), mat(6, 8, 0.2));
        let perm = [3, 0, 5, 1, 4, 2];
        let run = |k: Tensor<f64>, v: Tensor<f64>| {
            let mut g = Graph::new(&store);
            let (q, k, v) = (g.input(qt.clone()), g.input(k), g.input(v));
            let y = multihead_attention(&mut g, q, k, v, 2).unwrap();
            g.value(y).clone()
        };
        let a = run(kt.clone(), vt.clone());
        let b = run(kt.select_rows(&perm), vt.select_rows(&perm));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let q = g.input(mat(2, 6, 0.1));
        assert!(multihead_attention(&mut g, q, q, q, 4).is_err());
    }
}
