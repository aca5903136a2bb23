use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureSequence, FeatureSet};

const MAX_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_phonemes: usize,
    pub dim: usize,
    /// Within-cluster noise, relative to `center_scale`.
    pub sigma_c: f64,
    /// Per-coordinate std of the codebook centers.
    pub center_scale: f64,
    /// Speakers whose data is used for training.
    pub num_speakers: usize,
    /// Extra speakers kept out of training.
    pub held_out_speakers: usize,
    pub frames_per_utterance: usize,
    pub utterances_per_speaker: usize,
    /// Probability that the label chain stays on the current phoneme.
    pub stay_prob: f64,
    /// Size of the perturbation the speaker rotation is built from.
    pub rotation_jitter: f64,
    pub scale_range: (f64, f64),
    /// Dimension of the subspace speaker offsets live in.
    pub offset_rank: usize,
    /// Per-axis std of offsets, relative to `center_scale`.
    pub offset_scale: f64,
    /// Minimum offset distance between speakers, in cluster radii.
    pub min_speaker_separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_phonemes: 16,
            dim: 32,
            sigma_c: 0.05,
            center_scale: 10.0,
            num_speakers: 20,
            held_out_speakers: 4,
            frames_per_utterance: 500,
            utterances_per_speaker: 8,
            stay_prob: 0.9,
            rotation_jitter: 0.01,
            scale_range: (0.8, 1.2),
            offset_rank: 4,
            offset_scale: 1.0,
            min_speaker_separation: 4.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_phonemes == 0 || self.dim == 0 {
            return bad("num_phonemes and dim must be positive");
        }
        if self.num_phonemes > 256 {
            return bad("at most 256 phonemes");
        }
        if self.num_speakers + self.held_out_speakers == 0 || self.utterances_per_speaker == 0 {
            return bad("need at least one speaker and one utterance");
        }
        if self.frames_per_utterance == 0 {
            return bad("frames_per_utterance must be positive");
        }
        if !(self.sigma_c > 0.0 && self.center_scale > 0.0) {
            return bad("sigma_c and center_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.stay_prob) {
            return bad("stay_prob must be in [0, 1)");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("scale_range must be positive and ordered");
        }
        if self.offset_rank > self.dim {
            return bad("offset_rank exceeds dim");
        }
        Ok(())
    }

    /// Absolute within-cluster noise std.
    pub fn noise_std(&self) -> f64 {
        self.sigma_c * self.center_scale
    }

    /// Typical distance of a frame from its cluster center before the speaker map.
    pub fn cluster_radius(&self) -> f64 {
        self.noise_std() * (self.dim as f64).sqrt()
    }
}

/// Phoneme centers in the shared, speaker-free space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeCodebook {
    pub dim: usize,
    /// Row-major `[P, d]`.
    pub centers: Vec<f64>,
    pub sigma_c: f64,
    pub center_scale: f64,
}

impl PhonemeCodebook {
    pub fn len(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, p: usize) -> &[f64] {
        &self.centers[p * self.dim..(p + 1) * self.dim]
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.min(dist(self.center(i), self.center(j)));
            }
        }
        best
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Affine speaker map `x -> A x + b` with `A = s R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub id: usize,
    pub held_out: bool,
    pub scale: f64,
    /// Row-major orthogonal `[d, d]`.
    pub rotation: Vec<f64>,
    pub offset: Vec<f64>,
}

impl SyntheticSpeaker {
    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn name(&self) -> String {
        format!("spk{:03}", self.id)
    }

    pub fn map(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.rotation) * self.scale
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|r| {
                let row = &self.rotation[r * d..(r + 1) * d];
                self.scale * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offset[r]
            })
            .collect()
    }

    /// Mean singular value of `A`.
    pub fn map_scale(&self) -> f64 {
        let sv = self.map().singular_values();
        sv.iter().sum::<f64>() / sv.len() as f64
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.map().singular_values();
        sv.max() / sv.min()
    }

    /// Codebook centers under this speaker's map, row-major `[P, d]`.
    pub fn transformed_centers(&self, codebook: &PhonemeCodebook) -> Vec<f64> {
        (0..codebook.len()).flat_map(|p| self.apply(codebook.center(p))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub frames: FeatureSequence,
    pub labels: Vec<u8>,
}

impl Utterance {
    pub fn to_set(&self) -> FeatureSet {
        self.frames.to_set().expect("utterances are non-empty").with_speaker_tag(format!("spk{:03}", self.speaker))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub seed: u64,
    pub codebook: PhonemeCodebook,
    pub speakers: Vec<SyntheticSpeaker>,
    pub utterances: Vec<Utterance>,
}

impl SyntheticCorpus {
    pub fn speaker_utterances(&self, speaker: usize) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.speaker == speaker)
    }

    pub fn training_speakers(&self) -> impl Iterator<Item = &SyntheticSpeaker> {
        self.speakers.iter().filter(|s| !s.held_out)
    }

    pub fn held_out_speakers(&self) -> impl Iterator<Item = &SyntheticSpeaker> {
        self.speakers.iter().filter(|s| s.held_out)
    }

    /// Raw frame sets of every training-speaker utterance.
    pub fn training_sets(&self) -> Vec<FeatureSet> {
        self.utterances
            .iter()
            .filter(|u| !self.speakers[u.speaker].held_out)
            .map(Utterance::to_set)
            .collect()
    }
}

fn gen_codebook(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<PhonemeCodebook> {
    let normal = Normal::new(0.0, cfg.center_scale).expect("positive scale");
    let need = 6.0 * cfg.noise_std();
    for _ in 0..MAX_RETRIES {
        let cb = PhonemeCodebook {
            dim: cfg.dim,
            centers: (0..cfg.num_phonemes * cfg.dim).map(|_| normal.sample(rng)).collect(),
            sigma_c: cfg.sigma_c,
            center_scale: cfg.center_scale,
        };
        if cb.min_pairwise_distance() > need {
            return Ok(cb);
        }
    }
    Err(Error::Config(format!(
        "could not place {} centers {need:.3} apart in {} dims after {MAX_RETRIES} attempts",
        cfg.num_phonemes, cfg.dim
    )))
}

/// Orthogonal matrix near the identity: Q factor of `I + jitter * G`,
/// with column signs fixed so the diagonal of R is positive.
fn near_identity_rotation(d: usize, jitter: f64, rng: &mut impl Rng) -> Vec<f64> {
    let m = DMatrix::from_fn(d, d, |r, c| {
        let g: f64 = StandardNormal.sample(rng);
        let eye = if r == c { 1.0 } else { 0.0 };
        eye + jitter * g
    });
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    // row-major
    let mut out = Vec::with_capacity(d * d);
    for r in 0..d {
        for c in 0..d {
            out.push(q[(r, c)]);
        }
    }
    out
}

fn offset_basis(cfg: &SynthConfig, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(cfg.dim, cfg.offset_rank.max(1), |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Smallest distance between the same phoneme's transformed centers.
fn speaker_separation(a: &[f64], b: &[f64], dim: usize) -> f64 {
    a.chunks(dim).zip(b.chunks(dim)).map(|(x, y)| dist(x, y)).fold(f64::INFINITY, f64::min)
}

fn gen_speakers(cfg: &SynthConfig, codebook: &PhonemeCodebook, rng: &mut impl Rng) -> Result<Vec<SyntheticSpeaker>> {
    let total = cfg.num_speakers + cfg.held_out_speakers;
    let basis = offset_basis(cfg, rng);
    let coef = Normal::new(0.0, cfg.offset_scale * cfg.center_scale).expect("positive scale");
    let min_sep = cfg.min_speaker_separation * cfg.cluster_radius();
    let (lo, hi) = cfg.scale_range;
    let mut speakers: Vec<SyntheticSpeaker> = Vec::with_capacity(total);
    let mut placed_centers: Vec<Vec<f64>> = Vec::with_capacity(total);
    for id in 0..total {
        let mut placed = None;
        for _ in 0..MAX_RETRIES {
            let offset: Vec<f64> = if cfg.offset_rank == 0 {
                vec![0.0; cfg.dim]
            } else {
                let u: Vec<f64> = (0..basis.ncols()).map(|_| coef.sample(rng)).collect();
                (0..cfg.dim).map(|r| (0..basis.ncols()).map(|c| basis[(r, c)] * u[c]).sum()).collect()
            };
            let spk = SyntheticSpeaker {
                id,
                held_out: id >= cfg.num_speakers,
                scale: if lo == hi { lo } else { rng.random_range(lo..hi) },
                rotation: near_identity_rotation(cfg.dim, cfg.rotation_jitter, rng),
                offset,
            };
            let centers = spk.transformed_centers(codebook);
            if placed_centers.iter().all(|c| speaker_separation(c, &centers, cfg.dim) >= min_sep) {
                placed = Some((spk, centers));
                break;
            }
        }
        let (spk, centers) = placed.ok_or_else(|| {
            Error::Config(format!("could not separate speaker {id} from the others after {MAX_RETRIES} attempts"))
        })?;
        speakers.push(spk);
        placed_centers.push(centers);
    }
    Ok(speakers)
}

/// Labels from a sticky Markov chain whose jump distribution is drawn per utterance.
fn gen_labels(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<u8> {
    let p = cfg.num_phonemes;
    let gamma = Gamma::new(4.0, 1.0).expect("valid shape");
    let weights: Vec<f64> = (0..p).map(|_| gamma.sample(rng)).collect();
    let states: Vec<usize> = (0..p).collect();
    let jump = |rng: &mut _| *states.choose_weighted(rng, |&s| weights[s]).expect("positive weights");
    let mut cur = rng.random_range(0..p);
    let mut out = Vec::with_capacity(cfg.frames_per_utterance);
    for t in 0..cfg.frames_per_utterance {
        if t > 0 && rng.random::<f64>() >= cfg.stay_prob {
            cur = jump(rng);
        }
        out.push(cur as u8);
    }
    out
}

/// Deterministic synthetic corpus for `seed`.
pub fn gen_corpus(seed: u64, config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codebook = gen_codebook(config, &mut rng)?;
    let speakers = gen_speakers(config, &codebook, &mut rng)?;
    let noise = Normal::new(0.0, config.noise_std()).expect("positive scale");
    let d = config.dim;
    let mut utterances = Vec::new();
    for spk in &speakers {
        for _ in 0..config.utterances_per_speaker {
            let labels = gen_labels(config, &mut rng);
            let mut data = Vec::with_capacity(labels.len() * d);
            let mut x = vec![0.0; d];
            for &l in &labels {
                for (xi, &c) in x.iter_mut().zip(codebook.center(l as usize)) {
                    *xi = c + noise.sample(&mut rng);
                }
                data.extend(spk.apply(&x).into_iter().map(|v| v as f32));
            }
            utterances.push(Utterance {
                speaker: spk.id,
                frames: FeatureSequence::new(d, data)?,
                labels,
            });
        }
    }
    Ok(SyntheticCorpus {
        config: config.clone(),
        seed,
        codebook,
        speakers,
        utterances,
    })
}

/// Index of the nearest row of `centers` (row-major, width `x.len()`).
pub fn nearest_center(x: &[f32], centers: &[f64]) -> usize {
    let d = x.len();
    let mut best = (f64::INFINITY, 0);
    for (p, c) in centers.chunks(d).enumerate() {
        let dd: f64 = x.iter().zip(c).map(|(&a, &b)| (a as f64 - b) * (a as f64 - b)).sum();
        if dd < best.0 {
            best = (dd, p);
        }
    }
    best.1
}
