use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{nearest_center, PhonemeCodebook, SyntheticSpeaker};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureSequence, FeatureSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchMetrics {
    pub coverage: f64,
    pub fidelity: f64,
    pub content_error: f64,
}

/// Distance within which a set element counts as covering a transformed center:
/// three noise standard deviations per coordinate, in RMS terms.
pub fn coverage_radius(speaker: &SyntheticSpeaker, codebook: &PhonemeCodebook) -> f64 {
    3.0 * codebook.sigma_c * codebook.center_scale * speaker.map_scale() * (codebook.dim as f64).sqrt()
}

/// Fraction of the speaker's transformed centers with at least one element of
/// `set` inside [`coverage_radius`].
pub fn coverage(set: &FeatureSet, speaker: &SyntheticSpeaker, codebook: &PhonemeCodebook) -> Result<f64> {
    if !set.is_empty() && set.dim() != codebook.dim {
        return Err(Error::Shape(format!("set dim {} vs codebook dim {}", set.dim(), codebook.dim)));
    }
    let r2 = coverage_radius(speaker, codebook).powi(2);
    let centers = speaker.transformed_centers(codebook);
    let covered = centers
        .chunks(codebook.dim)
        .filter(|c| {
            set.rows().any(|x| {
                x.iter().zip(*c).map(|(&a, &b)| (a as f64 - b) * (a as f64 - b)).sum::<f64>() <= r2
            })
        })
        .count();
    Ok(covered as f64 / codebook.len() as f64)
}

/// Index of the nearest (Euclidean) reference row for every query row.
pub fn nearest_rows(queries: &[f32], refs: &[f32], d: usize) -> Vec<usize> {
    let n = refs.len() / d;
    let ref_sq: Vec<f32> = refs.chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
    queries
        .par_chunks(64 * d)
        .flat_map_iter(|block| {
            let nq = block.len() / d;
            let mut dots = vec![0f32; nq * n];
            // SAFETY: slices hold nq*d, n*d and nq*n elements for these strides
            unsafe {
                matrixmultiply::sgemm(
                    nq, d, n, 1.0, block.as_ptr(), d as isize, 1, refs.as_ptr(), 1, d as isize, 0.0,
                    dots.as_mut_ptr(), n as isize, 1,
                );
            }
            let ref_sq = &ref_sq;
            (0..nq).map(move |i| {
                let row = &dots[i * n..(i + 1) * n];
                let mut best = (f32::INFINITY, 0);
                for (j, (&dot, &rs)) in row.iter().zip(ref_sq).enumerate() {
                    let dist = rs - 2.0 * dot;
                    if dist < best.0 {
                        best = (dist, j);
                    }
                }
                best.1
            })
            .collect::<Vec<_>>()
        })
        .collect()
}

/// Fraction of `vectors` whose nearest reference frame belongs to `true_speaker`.
pub fn fidelity(vectors: &[f32], dim: usize, true_speaker: usize, references: &[(usize, FeatureSet)]) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::InvalidInput("fidelity of an empty set is undefined".into()));
    }
    if references.iter().any(|(_, s)| s.dim() != dim) || vectors.len() % dim != 0 {
        return Err(Error::Shape("reference and query dims differ".into()));
    }
    if !references.iter().any(|(s, _)| *s == true_speaker) {
        return Err(Error::InvalidInput(format!("no reference set for speaker {true_speaker}")));
    }
    let mut owners = Vec::new();
    let mut refs = Vec::new();
    for (spk, set) in references {
        owners.extend(std::iter::repeat_n(*spk, set.len()));
        refs.extend_from_slice(set.data());
    }
    let nn = nearest_rows(vectors, &refs, dim);
    let hits = nn.iter().filter(|&&j| owners[j] == true_speaker).count();
    Ok(hits as f64 / nn.len() as f64)
}

pub fn fidelity_metric(
    hallucinated: &FeatureSet,
    true_speaker: usize,
    references: &[(usize, FeatureSet)],
) -> Result<f64> {
    fidelity(hallucinated.data(), hallucinated.dim(), true_speaker, references)
}

/// Fraction of converted frames whose nearest center under the target
/// speaker's map is not the source frame's label.
pub fn content_error(
    source_labels: &[u8],
    converted: &FeatureSequence,
    target: &SyntheticSpeaker,
    codebook: &PhonemeCodebook,
) -> Result<f64> {
    if source_labels.len() != converted.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} converted frames",
            source_labels.len(),
            converted.len()
        )));
    }
    if converted.is_empty() {
        log::warn!("content error of an empty sequence is reported as 0");
        return Ok(0.0);
    }
    let centers = target.transformed_centers(codebook);
    let wrong = converted
        .frames()
        .zip(source_labels)
        .filter(|(f, &l)| nearest_center(f, &centers) != l as usize)
        .count();
    Ok(wrong as f64 / converted.len() as f64)
}
