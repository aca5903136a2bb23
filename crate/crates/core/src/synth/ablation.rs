use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::SyntheticCorpus;
use super::metrics::{content_error, coverage, fidelity};
use crate::error::{Error, Result};
use crate::feature_store::{denormalize_set, normalize_set, FeatureSequence, FeatureSet};
use crate::hallucinator::{AblationFlags, HallucinatorConfig, HallucinatorModel, Variant};
use crate::knn::{build_index, convert_with_index, KnnConfig};
use crate::nn::Real;
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// How held-out speakers are presented and scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Frames of the target speaker the model gets to see.
    pub observed_frames: usize,
    pub knn: KnnConfig,
    /// Utterances per speaker pooled into the fidelity reference sets.
    pub reference_utterances: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            observed_frames: 100,
            knn: KnnConfig::default(),
            reference_utterances: 2,
            seed: 0,
        }
    }
}

/// Metrics at one hallucination count, averaged over target speakers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub count: usize,
    pub content_error: f64,
    /// Speaker assignment of the converted frames.
    pub fidelity: f64,
    /// Speaker assignment of the hallucinated frames themselves; NaN at count 0.
    pub hallucination_fidelity: f64,
    /// Coverage of the expanded target set.
    pub coverage: f64,
}

/// Held-out speaker material fixed for a corpus and protocol.
pub struct EvalSplit {
    /// `(speaker, observed frames)` per held-out target.
    pub targets: Vec<(usize, FeatureSet)>,
    /// `(speaker, frames, labels)` conversion sources.
    pub sources: Vec<(usize, FeatureSequence, Vec<u8>)>,
    pub references: Vec<(usize, FeatureSet)>,
}

impl EvalSplit {
    /// Utterance 0 of each held-out speaker supplies the observed frames,
    /// utterance 1 is a conversion source for the other targets, and the
    /// following utterances form that speaker's reference set.
    pub fn new(corpus: &SyntheticCorpus, protocol: &EvalProtocol) -> Result<Self> {
        let d = corpus.config.dim;
        let held: Vec<usize> = corpus.held_out_speakers().map(|s| s.id).collect();
        if held.len() < 2 {
            return Err(Error::InvalidInput("evaluation needs at least two held-out speakers".into()));
        }
        let need = 2 + protocol.reference_utterances;
        if corpus.config.utterances_per_speaker < need {
            return Err(Error::InvalidInput(format!(
                "evaluation needs {need} utterances per speaker"
            )));
        }
        if protocol.observed_frames == 0 || protocol.observed_frames > corpus.config.frames_per_utterance {
            return Err(Error::InvalidInput("observed_frames must fit in one utterance".into()));
        }
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        for &s in &held {
            let utts: Vec<_> = corpus.speaker_utterances(s).collect();
            let obs = &utts[0].frames.data()[..protocol.observed_frames * d];
            targets.push((s, FeatureSet::new(d, obs.to_vec())?));
            sources.push((s, utts[1].frames.clone(), utts[1].labels.clone()));
        }
        let references = corpus
            .speakers
            .iter()
            .map(|spk| {
                let skip = if spk.held_out { 2 } else { 0 };
                let data: Vec<f32> = corpus
                    .speaker_utterances(spk.id)
                    .skip(skip)
                    .take(protocol.reference_utterances)
                    .flat_map(|u| u.frames.data().iter().copied())
                    .collect();
                Ok((spk.id, FeatureSet::new(d, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            targets,
            sources,
            references,
        })
    }
}

/// Raw-space hallucinations for an observed raw-space target set.
pub fn hallucinate_raw<T: Real>(
    model: &HallucinatorModel<T>,
    observed: &FeatureSet,
    count: usize,
    seed: u64,
) -> Result<FeatureSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.hallucinate(&normalize_set(observed), count, &mut rng)?;
    Ok(if out.is_empty() { out } else { denormalize_set(&out) })
}

/// Scores `model` at every count. Hallucinations for the largest count are
/// drawn once per target and smaller counts use prefixes of that draw.
pub fn evaluate_counts<T: Real>(
    model: &HallucinatorModel<T>,
    corpus: &SyntheticCorpus,
    split: &EvalSplit,
    counts: &[usize],
    protocol: &EvalProtocol,
) -> Result<Vec<CountMetrics>> {
    protocol.knn.validate()?;
    let d = corpus.config.dim;
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut sums = vec![[0f64; 4]; counts.len()];
    for (ti, (target, observed)) in split.targets.iter().enumerate() {
        let spk = &corpus.speakers[*target];
        let pool = hallucinate_raw(model, observed, max, protocol.seed.wrapping_add(ti as u64))?;
        for (ci, &count) in counts.iter().enumerate() {
            let extra = &pool.data()[..count * d];
            let mut expanded = observed.data().to_vec();
            expanded.extend_from_slice(extra);
            let expanded = FeatureSet::new(d, expanded)?;
            let index = build_index(&expanded)?;
            let (mut wrong, mut frames) = (0.0, 0usize);
            let mut converted = Vec::new();
            for (s, frames_s, labels) in &split.sources {
                if s == target {
                    continue;
                }
                let conv = convert_with_index(frames_s, &index, &protocol.knn)?;
                wrong += content_error(labels, &conv, spk, &corpus.codebook)? * labels.len() as f64;
                frames += labels.len();
                converted.extend_from_slice(conv.data());
            }
            let fid = fidelity(&converted, d, *target, &split.references)?;
            let hfid = if count == 0 { f64::NAN } else { fidelity(extra, d, *target, &split.references)? };
            let m = &mut sums[ci];
            m[0] += wrong / frames as f64;
            m[1] += fid;
            m[2] += hfid;
            m[3] += coverage(&expanded, spk, &corpus.codebook)?;
        }
    }
    let n = split.targets.len() as f64;
    Ok(counts
        .iter()
        .zip(sums)
        .map(|(&count, m)| CountMetrics {
            count,
            content_error: m[0] / n,
            fidelity: m[1] / n,
            hallucination_fidelity: m[2] / n,
            coverage: m[3] / n,
        })
        .collect())
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub peq: bool,
    pub cat: bool,
    #[serde(rename = "mod")]
    pub modulate: bool,
    pub count: usize,
    pub content_error: f64,
    pub fidelity: f64,
    pub coverage: f64,
}

pub fn variant_label(flags: AblationFlags) -> String {
    Variant::ALL
        .into_iter()
        .find(|v| v.flags() == flags)
        .map(|v| v.to_string())
        .unwrap_or_else(|| {
            format!("peq{}-cat{}-mod{}", flags.peq as u8, flags.cat as u8, flags.modulate as u8)
        })
}

/// Normalized training sets of the corpus.
pub fn training_data(corpus: &SyntheticCorpus) -> Vec<FeatureSet> {
    corpus.training_sets().iter().map(normalize_set).collect()
}

pub struct VariantResult {
    pub flags: AblationFlags,
    pub outcome: TrainOutcome,
    pub metrics: Vec<CountMetrics>,
}

/// Trains one model per flag pattern and scores it at every count.
pub fn run_ablation_suite(
    corpus: &SyntheticCorpus,
    variants: &[AblationFlags],
    eval_counts: &[usize],
    model: &HallucinatorConfig,
    training: &TrainConfig,
    protocol: &EvalProtocol,
) -> Result<Vec<VariantResult>> {
    for f in variants {
        f.validate()?;
    }
    let data = training_data(corpus);
    let split = EvalSplit::new(corpus, protocol)?;
    variants
        .iter()
        .map(|&flags| {
            log::info!("training variant {}", variant_label(flags));
            let outcome = train(&data, model.clone().with_flags(flags), training.clone())?;
            let metrics = evaluate_counts(&outcome.best, corpus, &split, eval_counts, protocol)?;
            Ok(VariantResult {
                flags,
                outcome,
                metrics,
            })
        })
        .collect()
}

pub fn ablation_rows(results: &[VariantResult]) -> Vec<AblationRow> {
    results
        .iter()
        .flat_map(|r| {
            r.metrics.iter().map(|m| AblationRow {
                variant: variant_label(r.flags),
                peq: r.flags.peq,
                cat: r.flags.cat,
                modulate: r.flags.modulate,
                count: m.count,
                content_error: m.content_error,
                fidelity: m.fidelity,
                coverage: m.coverage,
            })
        })
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
