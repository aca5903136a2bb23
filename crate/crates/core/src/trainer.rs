//! MCAR data pipeline and the optimization loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::feature_store::{subsample_indices, FeatureSet, MaskedSet};
use crate::hallucinator::{ElboBreakdown, ElboNoise, HallucinatorConfig, HallucinatorModel};
use crate::nn::{adam_step, AdamConfig, AdamState, GradBuffer, Graph, Real};

/// One training example: a set `X` partitioned into missing `X^e` and the
/// masked observed remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct McarSplit {
    pub full: FeatureSet,
    /// Ascending slot indices of the missing elements.
    pub missing: Vec<usize>,
    /// Missing elements, index-aligned with `missing`.
    pub x_e: FeatureSet,
    pub masked: MaskedSet,
}

impl McarSplit {
    /// Rebuilds `X` from the two parts.
    pub fn reassemble(&self) -> FeatureSet {
        let d = self.full.dim();
        let mut data = self.masked.values().to_vec();
        for (row, &slot) in self.x_e.rows().zip(&self.missing) {
            data[slot * d..(slot + 1) * d].copy_from_slice(row);
        }
        FeatureSet::new(d, data).expect("split parts are consistent")
    }
}

/// `N_e` uniform on `1..=N`, then `N_e` slots uniformly without replacement.
pub fn mcar_split(x: &FeatureSet, n: usize, rng: &mut impl Rng) -> Result<McarSplit> {
    if x.len() != n || n == 0 {
        return Err(Error::InvalidInput(format!("MCAR split needs exactly {n} elements, got {}", x.len())));
    }
    let n_e = rng.random_range(1..=n);
    let mut missing = subsample_indices(n, n_e, rng)?;
    missing.sort_unstable();
    let mut flags = vec![true; n];
    for &i in &missing {
        flags[i] = false;
    }
    Ok(McarSplit {
        full: x.clone(),
        x_e: x.select(&missing),
        masked: MaskedSet::new(x.dim(), x.data().to_vec(), flags)?,
        missing,
    })
}

/// Indices of utterances long enough to train on.
pub fn trainable_indices(corpus: &[FeatureSet], min_cardinality: usize) -> Vec<usize> {
    let keep: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].len() >= min_cardinality)
        .collect();
    let dropped = corpus.len() - keep.len();
    if dropped > 0 {
        log::warn!("skipping {dropped} utterances shorter than {min_cardinality} elements");
    }
    keep
}

fn sample_split(utt: &FeatureSet, n: usize, rng: &mut impl Rng) -> Result<McarSplit> {
    let idx = subsample_indices(utt.len(), n, rng)?;
    mcar_split(&utt.select(&idx), n, rng)
}

/// `batch_size` splits from utterances drawn uniformly among trainable ones.
pub fn make_batch(
    corpus: &[FeatureSet],
    rng: &mut impl Rng,
    batch_size: usize,
    n: usize,
) -> Result<Vec<McarSplit>> {
    let keep = trainable_indices(corpus, n);
    if keep.is_empty() {
        return Err(Error::InvalidInput("no trainable utterances".into()));
    }
    (0..batch_size)
        .map(|_| {
            let u = keep[rng.random_range(0..keep.len())];
            sample_split(&corpus[u], n, rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Utterances shorter than this are skipped.
    pub min_utterance_cardinality: usize,
    pub seed: u64,
    /// Validate every this many epochs.
    pub val_every: usize,
    pub val_fraction: f64,
    /// Fixed splits drawn per validation utterance.
    pub val_splits_per_utterance: usize,
    pub grad_clip: f64,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    /// Where `best.phck`, `last.phck` and `history.csv` are written.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 250,
            batch_size: 50,
            adam: AdamConfig::default(),
            min_utterance_cardinality: 200,
            seed: 0,
            val_every: 1,
            val_fraction: 0.1,
            val_splits_per_utterance: 2,
            grad_clip: 5.0,
            patience: None,
            out_dir: None,
        }
    }

    /// Settings for the synthetic desk-scale corpus.
    pub fn desk() -> Self {
        Self {
            epochs: 250,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            patience: Some(25),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 || self.val_splits_per_utterance == 0 {
            return Err(Error::Config("epochs, batch_size and validation cadence must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr and grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_theta: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::io(path, e.into())))
        .collect()
}

/// Loop position stored in checkpoints so a run can continue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub next_epoch: usize,
    pub global_step: u64,
    pub best_val: Option<f64>,
    pub since_best: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation bound.
    pub best: HallucinatorModel<f32>,
    /// Parameters after the last step.
    pub last: HallucinatorModel<f32>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Bound on the validation splits before any update.
    pub initial_val: ElboBreakdown,
}

/// Train/validation partition of utterance indices.
pub fn holdout(num: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..num).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_4a11);
    idx.shuffle(&mut rng);
    let n_val = if num >= 2 { ((num as f64 * fraction).round() as usize).clamp(1, num - 1) } else { 0 };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn stream(seed: u64, epoch: usize, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch as u64) << 32) | step);
    r
}

/// Splits with their noise, fixed up front for reproducible evaluation.
pub struct FixedBatch {
    pub items: Vec<(McarSplit, ElboNoise<f32>)>,
}

impl FixedBatch {
    pub fn draw(
        corpus: &[FeatureSet],
        utterances: &[usize],
        per_utterance: usize,
        config: &HallucinatorConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut items = Vec::new();
        for &u in utterances {
            for _ in 0..per_utterance {
                let split = sample_split(&corpus[u], config.set_cardinality, rng)?;
                let noise = ElboNoise::sample(config, split.missing.len(), rng);
                items.push((split, noise));
            }
        }
        Ok(Self { items })
    }

    /// Mean bound over the batch.
    pub fn evaluate<T: Real>(&self, model: &HallucinatorModel<T>) -> Result<ElboBreakdown> {
        let parts = self
            .items
            .par_iter()
            .map(|(split, noise)| {
                let noise = ElboNoise {
                    theta: noise.theta.cast(),
                    z: noise.z.cast(),
                };
                let mut g = Graph::new(model.params());
                let terms = model.elbo_graph(&mut g, &split.x_e, &split.masked, &noise)?;
                Ok(terms.read(&g))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_breakdown(&parts))
    }
}

fn mean_breakdown(parts: &[ElboBreakdown]) -> ElboBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = ElboBreakdown::default();
    for p in parts {
        m.recon += p.recon;
        m.kl_z += p.kl_z;
        m.kl_theta += p.kl_theta;
        m.total += p.total;
    }
    ElboBreakdown {
        recon: m.recon / n,
        kl_z: m.kl_z / n,
        kl_theta: m.kl_theta / n,
        total: m.total / n,
    }
}

/// Loss gradients for one step; the loss is `-total / N` averaged over the batch.
fn step_gradients(
    model: &HallucinatorModel<f32>,
    batch: &[(McarSplit, ElboNoise<f32>)],
) -> Result<(GradBuffer<f32>, Vec<ElboBreakdown>)> {
    let n = model.config().set_cardinality as f64;
    let results = batch
        .par_iter()
        .map(|(split, noise)| {
            let mut g = Graph::new(model.params());
            let terms = model.elbo_graph(&mut g, &split.x_e, &split.masked, noise)?;
            let loss = g.scale(terms.total, -1.0 / n);
            let grads = g.backward(loss);
            Ok((grads.into_params(), terms.read(&g)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradBuffer::empty(model.params().len());
    let mut parts = Vec::with_capacity(results.len());
    // ordered reduction keeps the sum independent of thread scheduling
    for (gb, b) in results {
        total.add(&gb);
        parts.push(b);
    }
    Ok((total, parts))
}

fn save_state(
    dir: &Path,
    file: &str,
    model: &HallucinatorModel<f32>,
    adam: &AdamState<f32>,
    state: &TrainingState,
) -> Result<()> {
    let json = serde_json::to_value(state).map_err(|e| Error::InvalidInput(e.to_string()))?;
    save_checkpoint(&dir.join(file), model, Some(adam), Some(json))
}

/// Resumable training state.
pub struct Trainer {
    pub model: HallucinatorModel<f32>,
    pub adam: AdamState<f32>,
    pub state: TrainingState,
    pub config: TrainConfig,
    best: Option<HallucinatorModel<f32>>,
}

impl Trainer {
    pub fn new(model_config: HallucinatorConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = HallucinatorModel::new(model_config, config.seed)?;
        let adam = AdamState::new(model.params(), config.adam);
        Ok(Self {
            model,
            adam,
            state: TrainingState {
                next_epoch: 0,
                global_step: 0,
                best_val: None,
                since_best: 0,
                history: Vec::new(),
            },
            config,
            best: None,
        })
    }

    /// Continues from a checkpoint written by a previous run.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ck = load_checkpoint(path)?;
        let adam = ck
            .adam
            .ok_or_else(|| Error::InvalidInput(format!("{} has no optimizer state", path.display())))?;
        let state: TrainingState = serde_json::from_value(
            ck.training
                .ok_or_else(|| Error::InvalidInput(format!("{} has no training state", path.display())))?,
        )
        .map_err(|e| Error::InvalidInput(format!("training state: {e}")))?;
        let mut adam = adam;
        adam.config = config.adam;
        Ok(Self {
            model: ck.model,
            adam,
            state,
            config,
            best: None,
        })
    }

    /// Runs the remaining epochs on a normalized corpus.
    pub fn run(mut self, corpus: &[FeatureSet]) -> Result<TrainOutcome> {
        let cfg = self.config.clone();
        let n = self.model.config().set_cardinality;
        let keep = trainable_indices(corpus, cfg.min_utterance_cardinality.max(n));
        if keep.is_empty() {
            return Err(Error::InvalidInput("no trainable utterances".into()));
        }
        for u in &keep {
            if corpus[*u].dim() != self.model.config().feature_dim {
                return Err(Error::Shape(format!(
                    "utterance dim {} does not match model dim {}",
                    corpus[*u].dim(),
                    self.model.config().feature_dim
                )));
            }
        }
        let (train_pos, val_pos) = holdout(keep.len(), cfg.val_fraction, cfg.seed);
        let train_idx: Vec<usize> = train_pos.iter().map(|&i| keep[i]).collect();
        let mut val_idx: Vec<usize> = val_pos.iter().map(|&i| keep[i]).collect();
        if val_idx.is_empty() {
            val_idx = train_idx.clone();
        }
        let val = FixedBatch::draw(
            corpus,
            &val_idx,
            cfg.val_splits_per_utterance,
            self.model.config(),
            &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0a11_da7e),
        )?;
        let initial_val = val.evaluate(&self.model)?;
        if self.state.best_val.is_none() {
            self.state.best_val = Some(initial_val.total);
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_state(dir, "best.phck", &self.model, &self.adam, &self.state)?;
            }
        }
        log::info!(
            "training on {} utterances, validating on {} ({} splits); initial val elbo {:.3}",
            train_idx.len(),
            val_idx.len(),
            val.items.len(),
            initial_val.total
        );

        let mut stopped_early = false;
        for epoch in self.state.next_epoch..cfg.epochs {
            let started = Instant::now();
            let mut order = train_idx.clone();
            order.shuffle(&mut stream(cfg.seed, epoch, u32::MAX as u64));
            let mut parts = Vec::new();
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut rng = stream(cfg.seed, epoch, step as u64);
                let batch = chunk
                    .iter()
                    .map(|&u| {
                        let split = sample_split(&corpus[u], n, &mut rng)?;
                        let noise = ElboNoise::sample(self.model.config(), split.missing.len(), &mut rng);
                        Ok((split, noise))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (grads, bounds) = step_gradients(&self.model, &batch)?;
                if bounds.iter().any(|b| !b.total.is_finite()) {
                    if let Some(dir) = &cfg.out_dir {
                        log::error!("non-finite bound; last good state is in {}", dir.display());
                    }
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite ELBO {:?}", bounds.iter().find(|b| !b.total.is_finite())),
                    });
                }
                let params = self.model.params_mut();
                params.zero_grad();
                params.accumulate(&grads, 1.0 / batch.len() as f32);
                let norm = params.clip_grad_norm(cfg.grad_clip);
                log::debug!("epoch {epoch} step {step}: grad norm {norm:.4}");
                if !norm.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: "non-finite gradient norm".into(),
                    });
                }
                adam_step(params, &mut self.adam);
                self.state.global_step += 1;
                let steps = self.model.trained_steps() + 1;
                self.model.set_trained_steps(steps);
                parts.extend(bounds);
            }
            let train = mean_breakdown(&parts);
            self.state.next_epoch = epoch + 1;

            if (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs {
                let v = val.evaluate(&self.model)?;
                if !v.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: 0,
                        detail: "non-finite validation bound".into(),
                    });
                }
                let record = EpochRecord {
                    epoch,
                    train_elbo: train.total,
                    val_elbo: v.total,
                    recon: v.recon,
                    kl_z: v.kl_z,
                    kl_theta: v.kl_theta,
                };
                self.state.history.push(record);
                log::info!(
                    "epoch {epoch}: train {:.3} val {:.3} (recon {:.3}, kl_z {:.3}, kl_theta {:.3}) in {:.1}s",
                    train.total,
                    v.total,
                    v.recon,
                    v.kl_z,
                    v.kl_theta,
                    started.elapsed().as_secs_f64()
                );
                let improved = self.state.best_val.is_none_or(|b| v.total > b);
                if improved {
                    self.state.best_val = Some(v.total);
                    self.state.since_best = 0;
                    self.best = Some(self.model.clone());
                    if let Some(dir) = &cfg.out_dir {
                        save_state(dir, "best.phck", &self.model, &self.adam, &self.state)?;
                    }
                } else {
                    self.state.since_best += 1;
                }
                if let Some(dir) = &cfg.out_dir {
                    save_state(dir, "last.phck", &self.model, &self.adam, &self.state)?;
                    write_history_csv(&dir.join("history.csv"), &self.state.history)?;
                }
                if cfg.patience.is_some_and(|p| self.state.since_best >= p) {
                    log::info!("no validation improvement for {} checks; stopping", self.state.since_best);
                    stopped_early = true;
                    break;
                }
            }
        }
        let best = match self.best.take() {
            Some(b) => b,
            None => match &cfg.out_dir {
                Some(dir) if dir.join("best.phck").exists() => load_checkpoint(&dir.join("best.phck"))?.model,
                _ => self.model.clone(),
            },
        };
        Ok(TrainOutcome {
            best,
            last: self.model,
            history: self.state.history,
            stopped_early,
            initial_val,
        })
    }
}

/// Trains a fresh model.
pub fn train(corpus: &[FeatureSet], model_config: HallucinatorConfig, config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(model_config, config)?.run(corpus)
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;

    fn randn_set(n: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSet {
        FeatureSet::new(d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn n_e_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20;
        let x = randn_set(n, 1, &mut rng);
        let mut counts = vec![0u64; n];
        let mut slot_hits = vec![0u64; n];
        let draws = 40_000;
        for _ in 0..draws {
            let s = mcar_split(&x, n, &mut rng).unwrap();
            counts[s.missing.len() - 1] += 1;
            for &i in &s.missing {
                slot_hits[i] += 1;
            }
        }
        let expected = draws as f64 / n as f64;
        let chi: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi);
        assert!(p > 0.01, "p = {p}");
        // every slot is equally likely to go missing
        let mean_hits = slot_hits.iter().sum::<u64>() as f64 / n as f64;
        let chi: f64 = slot_hits.iter().map(|&c| (c as f64 - mean_hits).powi(2) / mean_hits).sum();
        let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi);
        assert!(p > 0.001, "slot p = {p}");
    }

    #[test]
    fn split_partitions_the_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn_set(20, 3, &mut rng);
        for _ in 0..200 {
            let s = mcar_split(&x, 20, &mut rng).unwrap();
            assert_eq!(s.reassemble(), x);
            assert_eq!(s.x_e.len(), s.missing.len());
            for i in 0..20 {
                if s.missing.contains(&i) {
                    assert!(!s.masked.is_observed(i));
                    assert!(s.masked.value(i).iter().all(|&v| v == 0.0));
                } else {
                    assert!(s.masked.is_observed(i));
                    assert_eq!(s.masked.value(i), x.row(i));
                }
            }
        }
        assert!(mcar_split(&x, 21, &mut rng).is_err());
    }

    #[test]
    fn batch_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let long = randn_set(300, 2, &mut rng);
        let short = randn_set(150, 2, &mut rng);
        let b = make_batch(&[long.clone()], &mut rng, 2, 200).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|s| s.full.len() == 200));
        assert!(make_batch(&[short.clone()], &mut rng, 2, 200).is_err());
        let corpus = [short, long];
        let a = make_batch(&corpus, &mut ChaCha8Rng::seed_from_u64(9), 3, 200).unwrap();
        let c = make_batch(&corpus, &mut ChaCha8Rng::seed_from_u64(9), 3, 200).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn holdout_is_disjoint() {
        let (t, v) = holdout(20, 0.1, 4);
        assert_eq!(v.len(), 2);
        let mut all = [t, v].concat();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![EpochRecord {
            epoch: 0,
            train_elbo: -1.5,
            val_elbo: -2.25,
            recon: -1.0,
            kl_z: 0.5,
            kl_theta: 0.75,
        }];
        let p = dir.path().join("h.csv");
        write_history_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,train_elbo,val_elbo,recon,kl_z,kl_theta"));
        assert_eq!(read_history_csv(&p).unwrap(), rows);
    }

    fn small_model() -> HallucinatorConfig {
        HallucinatorConfig {
            set_cardinality: 12,
            observed_cap: 6,
            set_blocks: 2,
            ..HallucinatorConfig::tiny(3)
        }
    }

    fn clustered_corpus(seed: u64) -> Vec<FeatureSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..12)
            .map(|_| {
                let center: Vec<f32> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                let data = (0..20 * 3)
                    .map(|i| {
                        let e: f32 = StandardNormal.sample(&mut rng);
                        center[i % 3] + 0.2 * e
                    })
                    .collect();
                FeatureSet::new(3, data).unwrap()
            })
            .collect()
    }

    fn quick(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            min_utterance_cardinality: 12,
            seed,
            val_fraction: 0.25,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn training_raises_validation_bound() {
        let corpus = clustered_corpus(5);
        let out = train(&corpus, small_model(), quick(5, 12)).unwrap();
        let best = out.history.iter().map(|r| r.val_elbo).fold(f64::NEG_INFINITY, f64::max);
        assert!(best > out.initial_val.total, "{} -> {best}", out.initial_val.total);
        assert_eq!(out.last.trained_steps(), 12 * 3);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = clustered_corpus(6);
        let full = train(&corpus, small_model(), quick(6, 4)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let first = TrainConfig {
            out_dir: Some(dir.path().to_path_buf()),
            ..quick(6, 2)
        };
        train(&corpus, small_model(), first).unwrap();
        let resumed = Trainer::resume(&dir.path().join("last.phck"), quick(6, 4))
            .unwrap()
            .run(&corpus)
            .unwrap();
        assert_eq!(resumed.history, full.history);
        for (a, b) in resumed.last.params().iter().zip(full.last.params().iter()) {
            assert_eq!(a.tensor, b.tensor, "{}", a.name);
        }
        assert!(dir.path().join("best.phck").exists());
        assert_eq!(read_history_csv(&dir.path().join("history.csv")).unwrap().len(), 2);
    }

    #[test]
    fn overflowing_data_reports_divergence() {
        let mut corpus = clustered_corpus(7);
        for u in &mut corpus {
            *u = FeatureSet::new(3, u.data().iter().map(|v| v * 1e30).collect()).unwrap();
        }
        let err = train(&corpus, small_model(), quick(7, 2)).err().unwrap();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn short_corpus_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let corpus = vec![randn_set(5, 3, &mut rng)];
        assert!(matches!(
            train(&corpus, small_model(), quick(8, 1)),
            Err(Error::InvalidInput(_))
        ));
    }
}
