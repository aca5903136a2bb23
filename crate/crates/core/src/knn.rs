//! Exact cosine k-nearest-neighbor regression over an expanded target set.
//!
//! Candidates are screened with a single-precision GEMM and then rescored in
//! double precision. The screening margin covers the worst-case f32 rounding
//! error, so the final ranking is the one an exhaustive f64 scan produces.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureSequence, FeatureSet, FeatureVector};
use crate::hallucinator::HallucinatorModel;
use crate::nn::Real;

/// Queries screened together in one GEMM call.
const QUERY_BLOCK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 4 }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Sequential f64 dot product. Products of two f32 values are exact in f64,
/// so only the summation rounds, always in index order.
fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

/// Cosine similarity as ranked by the index. A zero query scores 0 against
/// everything, so ties fall back to insertion order.
pub fn cosine(query: &[f32], query_norm: f64, target: &[f32], target_norm: f64) -> f64 {
    if query_norm == 0.0 {
        return 0.0;
    }
    dot64(query, target) / (query_norm * target_norm)
}

/// Immutable search structure over a target set.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    dim: usize,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    /// Unit-normalized rows for screening.
    unit: Vec<f32>,
    margin: f32,
}

/// Indexes `target`. Zero vectors have no direction and are rejected.
pub fn build_index(target: &FeatureSet) -> Result<NeighborIndex> {
    if target.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty target set".into()));
    }
    let dim = target.dim();
    let norms: Vec<f64> = target.rows().map(norm64).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidInput(format!(
            "target vector {i} has zero norm; cosine similarity is undefined"
        )));
    }
    let mut unit = vec![0f32; target.data().len()];
    unit.par_chunks_mut(dim)
        .zip(target.data().par_chunks(dim))
        .zip(norms.par_iter())
        .for_each(|((u, v), &n)| {
            for (o, &x) in u.iter_mut().zip(v) {
                *o = (x as f64 / n) as f32;
            }
        });
    // f32 GEMM error on unit vectors is below (d + 2) * 2^-24 plus the
    // rounding of the normalization itself; doubled for headroom
    let margin = ((dim + 8) as f64 * 2f64.powi(-23)) as f32;
    Ok(NeighborIndex {
        dim,
        vectors: target.data().to_vec(),
        norms,
        unit,
        margin,
    })
}

impl NeighborIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn check_query(&self, len: usize, k: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::Shape(format!(
                "query dim {len} does not match index dim {}",
                self.dim
            )));
        }
        if k == 0 || k > self.len() {
            return Err(Error::InvalidInput(format!(
                "k = {k} must be in 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Indices of the `k` most similar targets, best first; equal scores
    /// rank by lower index.
    pub fn nearest(&self, query: &[f32], k: usize) -> Result<Vec<usize>> {
        self.check_query(query.len(), k)?;
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query contains non-finite values".into()));
        }
        Ok(self.search_block(query, 1, k).pop().expect("one query"))
    }

    /// [`nearest`](Self::nearest) for every row of a row-major query matrix.
    pub fn nearest_batch(&self, queries: &[f32], k: usize) -> Result<Vec<Vec<usize>>> {
        self.check_query(self.dim, k)?;
        if queries.len() % self.dim != 0 {
            return Err(Error::Shape(format!(
                "{} query values do not divide into rows of {}",
                queries.len(),
                self.dim
            )));
        }
        if queries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query contains non-finite values".into()));
        }
        Ok(queries
            .par_chunks(QUERY_BLOCK * self.dim)
            .flat_map_iter(|block| self.search_block(block, block.len() / self.dim, k))
            .collect())
    }

    fn search_block(&self, queries: &[f32], nq: usize, k: usize) -> Vec<Vec<usize>> {
        let (d, n) = (self.dim, self.len());
        let qnorms: Vec<f64> = queries.chunks(d).map(norm64).collect();
        let mut qunit = vec![0f32; queries.len()];
        for ((u, q), &qn) in qunit.chunks_mut(d).zip(queries.chunks(d)).zip(&qnorms) {
            if qn > 0.0 {
                for (o, &x) in u.iter_mut().zip(q) {
                    *o = (x as f64 / qn) as f32;
                }
            }
        }
        let mut approx = vec![0f32; nq * n];
        // SAFETY: buffers hold nq*d, n*d and nq*n elements with the given
        // row-major strides
        unsafe {
            matrixmultiply::sgemm(
                nq,
                d,
                n,
                1.0,
                qunit.as_ptr(),
                d as isize,
                1,
                self.unit.as_ptr(),
                1,
                d as isize,
                0.0,
                approx.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut scratch = Vec::with_capacity(n);
        approx
            .chunks(n)
            .zip(queries.chunks(d))
            .zip(&qnorms)
            .map(|((row, q), &qn)| {
                scratch.clear();
                scratch.extend_from_slice(row);
                let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
                let floor = *kth - 2.0 * self.margin;
                let mut cands: Vec<(f64, usize)> = row
                    .iter()
                    .enumerate()
                    .filter(|&(_, &s)| s >= floor)
                    .map(|(j, _)| (cosine(q, qn, self.vector(j), self.norms[j]), j))
                    .collect();
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                cands.truncate(k);
                cands.into_iter().map(|(_, j)| j).collect()
            })
            .collect()
    }

    /// Unweighted mean of the listed targets, accumulated in f64.
    pub fn mean_of(&self, idx: &[usize]) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        for &j in idx {
            for (a, &v) in acc.iter_mut().zip(self.vector(j)) {
                *a += v as f64;
            }
        }
        let n = idx.len() as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }
}

/// Mean of the `k` nearest targets of `query`.
pub fn knn_regress(query: &FeatureVector, index: &NeighborIndex, k: usize) -> Result<FeatureVector> {
    let idx = index.nearest(query.as_slice(), k)?;
    Ok(FeatureVector(index.mean_of(&idx)))
}

/// Replaces every source frame by its kNN regression onto an indexed target.
pub fn convert_with_index(
    source: &FeatureSequence,
    index: &NeighborIndex,
    config: &KnnConfig,
) -> Result<FeatureSequence> {
    config.validate()?;
    if source.dim() != index.dim() {
        return Err(Error::Shape(format!(
            "source dim {} does not match target dim {}",
            source.dim(),
            index.dim()
        )));
    }
    if source.is_empty() {
        return FeatureSequence::new(source.dim(), Vec::new());
    }
    let nn = index.nearest_batch(source.data(), config.k)?;
    let data = nn.iter().flat_map(|idx| index.mean_of(idx)).collect();
    FeatureSequence::new(source.dim(), data)
}

pub fn convert_sequence(
    source: &FeatureSequence,
    target: &FeatureSet,
    config: &KnnConfig,
) -> Result<FeatureSequence> {
    config.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "source dim {} does not match target dim {}",
            source.dim(),
            target.dim()
        )));
    }
    convert_with_index(source, &build_index(target)?, config)
}

/// `X_t` followed by `count` hallucinated elements.
pub fn expand_target<T: Real>(
    x_t: &FeatureSet,
    model: &HallucinatorModel<T>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<FeatureSet> {
    if count == 0 {
        return Ok(x_t.clone());
    }
    x_t.union(&model.hallucinate(x_t, count, rng)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::hallucinator::HallucinatorConfig;

    fn randn(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n * d).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Scores every target with the textbook formula and sorts.
    fn brute_force(target: &FeatureSet, q: &[f32], k: usize) -> Vec<usize> {
        let qn = q.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        let mut scored: Vec<(f64, usize)> = target
            .rows()
            .enumerate()
            .map(|(j, t)| {
                let tn = t.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                let dot: f64 = q.iter().zip(t).map(|(&a, &b)| a as f64 * b as f64).sum();
                (if qn == 0.0 { 0.0 } else { dot / (qn * tn) }, j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, d) in [(50, 8), (700, 32), (3000, 64)] {
            let t = FeatureSet::new(d, randn(n, d, &mut rng)).unwrap();
            let idx = build_index(&t).unwrap();
            let q = randn(100, d, &mut rng);
            let got = idx.nearest_batch(&q, 4).unwrap();
            for (i, row) in q.chunks(d).enumerate() {
                assert_eq!(got[i], brute_force(&t, row, 4), "n={n} query {i}");
            }
        }
    }

    #[test]
    fn near_ties_are_resolved_exactly() {
        // many targets within f32 rounding of each other
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 16;
        let base = randn(1, d, &mut rng);
        let mut data = Vec::new();
        for j in 0..200 {
            for &b in &base {
                data.push(b * (1.0 + (j % 7) as f32 * 1e-7));
            }
        }
        data.extend(randn(50, d, &mut rng));
        let t = FeatureSet::new(d, data).unwrap();
        let idx = build_index(&t).unwrap();
        for k in [1, 4, 9] {
            let q = base.iter().map(|v| v + 1e-4).collect::<Vec<_>>();
            assert_eq!(idx.nearest(&q, k).unwrap(), brute_force(&t, &q, k));
        }
    }

    #[test]
    fn exact_duplicates_rank_by_insertion_order() {
        let t = FeatureSet::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let idx = build_index(&t).unwrap();
        assert_eq!(idx.nearest(&[3.0, 0.0], 3).unwrap(), vec![0, 2, 3]);
        // a zero query ties everything
        assert_eq!(idx.nearest(&[0.0, 0.0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn trivial_cases() {
        let one = FeatureSet::new(3, vec![0.5, -1.0, 2.0]).unwrap();
        let idx = build_index(&one).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in randn(10, 3, &mut rng).chunks(3) {
            let v = knn_regress(&FeatureVector(q.to_vec()), &idx, 1).unwrap();
            assert_eq!(v.0, one.data());
        }
        let same = FeatureSet::new(3, [0.3f32, 0.7, -0.1].repeat(9)).unwrap();
        let idx = build_index(&same).unwrap();
        for k in 1..=9 {
            let v = knn_regress(&FeatureVector(vec![1.0, 0.0, 0.0]), &idx, k).unwrap();
            assert_eq!(v.0, vec![0.3, 0.7, -0.1], "k={k}");
        }
        assert!(knn_regress(&FeatureVector(vec![1.0; 3]), &idx, 10).is_err());
        assert!(knn_regress(&FeatureVector(vec![1.0; 3]), &idx, 0).is_err());
        assert!(knn_regress(&FeatureVector(vec![1.0; 4]), &idx, 1).is_err());
    }

    #[test]
    fn members_return_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = FeatureSet::new(8, randn(50, 8, &mut rng)).unwrap();
        let idx = build_index(&t).unwrap();
        for i in 0..50 {
            let v = knn_regress(&t.vector(i), &idx, 1).unwrap();
            assert_eq!(v.0, t.row(i));
        }
    }

    #[test]
    fn top4_mean_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = FeatureSet::new(6, randn(50, 6, &mut rng)).unwrap();
        let idx = build_index(&t).unwrap();
        let q = randn(1, 6, &mut rng);
        let got = knn_regress(&FeatureVector(q.clone()), &idx, 4).unwrap();
        let nn = brute_force(&t, &q, 4);
        let expect: Vec<f32> = (0..6)
            .map(|c| (nn.iter().map(|&j| t.row(j)[c] as f64).sum::<f64>() / 4.0) as f32)
            .collect();
        assert_eq!(got.0, expect);
    }

    #[test]
    fn zero_target_rejected() {
        let t = FeatureSet::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(build_index(&t), Err(Error::InvalidInput(m)) if m.contains("vector 1")));
    }

    #[test]
    fn conversion_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = FeatureSet::new(4, randn(30, 4, &mut rng)).unwrap();
        let src = FeatureSequence::new(4, t.data()[..40].to_vec()).unwrap();
        let out = convert_sequence(&src, &t, &KnnConfig { k: 1 }).unwrap();
        assert_eq!(out, src);
        let empty = FeatureSequence::new(4, vec![]).unwrap();
        assert!(convert_sequence(&empty, &t, &KnnConfig::default()).unwrap().is_empty());
        let wrong = FeatureSequence::new(3, vec![1.0; 3]).unwrap();
        assert!(matches!(
            convert_sequence(&wrong, &t, &KnnConfig::default()),
            Err(Error::Shape(_))
        ));
        assert!(convert_sequence(&src, &t, &KnnConfig { k: 0 }).is_err());
    }

    #[test]
    fn expansion_is_a_union() {
        let model = HallucinatorModel::<f32>::new(
            HallucinatorConfig {
                set_blocks: 2,
                ..HallucinatorConfig::tiny(3)
            },
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x_t = FeatureSet::new(3, randn(6, 3, &mut rng)).unwrap();
        assert_eq!(expand_target(&x_t, &model, 0, &mut rng).unwrap(), x_t);
        let e = expand_target(&x_t, &model, 25, &mut rng).unwrap();
        assert_eq!(e.len(), 31);
        assert_eq!(&e.data()[..18], x_t.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn more_targets_never_lower_top1_similarity(seed in 0u64..1000, n in 1usize..40, extra in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 5;
            let a = FeatureSet::new(d, randn(n, d, &mut rng)).unwrap();
            let b = a.union(&FeatureSet::new(d, randn(extra, d, &mut rng)).unwrap()).unwrap();
            let (ia, ib) = (build_index(&a).unwrap(), build_index(&b).unwrap());
            let q = randn(1, d, &mut rng);
            let qn = norm64(&q);
            let ja = ia.nearest(&q, 1).unwrap()[0];
            let jb = ib.nearest(&q, 1).unwrap()[0];
            let sa = cosine(&q, qn, a.row(ja), norm64(a.row(ja)));
            let sb = cosine(&q, qn, b.row(jb), norm64(b.row(jb)));
            prop_assert!(sb >= sa);
        }

        #[test]
        fn conversion_ignores_target_order(seed in 0u64..1000, n in 4usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let t = FeatureSet::new(d, randn(n, d, &mut rng)).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let src = FeatureSequence::new(d, randn(7, d, &mut rng)).unwrap();
            let cfg = KnnConfig::default();
            let a = convert_sequence(&src, &t, &cfg).unwrap();
            let b = convert_sequence(&src, &t.select(&perm), &cfg).unwrap();
            // same neighbors, possibly summed in another order
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
            }
            // frame i depends on source frame i only
            let single = convert_sequence(&FeatureSequence::new(d, src.frame(3).to_vec()).unwrap(), &t, &cfg).unwrap();
            prop_assert_eq!(single.frame(0), a.frame(3));
        }
    }
}
