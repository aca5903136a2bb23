//! Frame-level feature collections, the FSF binary format and the
//! normalization contract shared by every other module.
//!
//! FSF layout (little-endian throughout):
//!
//! | bytes  | field                                   |
//! |--------|-----------------------------------------|
//! | 0..4   | magic `PHFS`                            |
//! | 4      | version, currently 1                    |
//! | 5      | kind: 0 = set, 1 = sequence             |
//! | 6      | dtype: 0 = f32                          |
//! | 7      | reserved, 0                             |
//! | 8..12  | dim, u32                                |
//! | 12..20 | count, u64                              |
//! | 20..   | `count * dim` f32 values, row-major     |

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const FSF_MAGIC: [u8; 4] = *b"PHFS";
pub const FSF_VERSION: u8 = 1;
pub const FSF_HEADER_LEN: usize = 20;

/// Divisor applied to raw features before they enter the model.
pub const NORMALIZATION_SCALE: f32 = 10.0;

/// One frame-level feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

fn check_rows(dim: usize, data: &[f32]) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidInput("dim must be ≥ 1".into()));
    }
    if data.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} values do not divide into rows of {dim}",
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "entry {} of row {} is {}",
            i % dim,
            i / dim,
            data[i]
        )));
    }
    Ok(())
}

/// Unordered multiset of feature vectors. Stored row-major.
///
/// Construction requires at least one element; an empty set only arises as
/// the result of generating zero samples and cannot be written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f32>,
    pub speaker_tag: Option<String>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        check_rows(dim, &data)?;
        if data.is_empty() {
            return Err(Error::InvalidInput("cardinality must be ≥ 1".into()));
        }
        Ok(Self {
            dim,
            data,
            speaker_tag: None,
        })
    }

    /// Zero-cardinality set, e.g. the result of hallucinating nothing.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            speaker_tag: None,
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape(format!("every row must have length {dim}")));
        }
        Self::new(dim, rows.concat())
    }

    pub fn with_speaker_tag(mut self, tag: impl Into<String>) -> Self {
        self.speaker_tag = Some(tag.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn vector(&self, i: usize) -> FeatureVector {
        FeatureVector(self.row(i).to_vec())
    }

    pub fn select(&self, idx: &[usize]) -> FeatureSet {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureSet {
            dim: self.dim,
            data,
            speaker_tag: self.speaker_tag.clone(),
        }
    }

    /// Multiset union; keeps `self`'s speaker tag.
    pub fn union(&self, other: &FeatureSet) -> Result<FeatureSet> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!(
                "cannot join sets of dim {} and {}",
                self.dim, other.dim
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(FeatureSet {
            dim: self.dim,
            data,
            speaker_tag: self.speaker_tag.clone(),
        })
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&v| f(v)).collect(),
            speaker_tag: self.speaker_tag.clone(),
        }
    }
}

/// Ordered list of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    /// Sequences may be empty.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        check_rows(dim, &data)?;
        Ok(Self { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape(format!("every frame must have length {dim}")));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Same frames viewed as an unordered set.
    pub fn to_set(&self) -> Result<FeatureSet> {
        FeatureSet::new(self.dim, self.data.clone())
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Either kind of collection, as stored in an FSF file.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureCollection {
    Set(FeatureSet),
    Sequence(FeatureSequence),
}

impl FeatureCollection {
    pub fn dim(&self) -> usize {
        match self {
            Self::Set(s) => s.dim(),
            Self::Sequence(s) => s.dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Set(s) => s.len(),
            Self::Sequence(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f32] {
        match self {
            Self::Set(s) => s.data(),
            Self::Sequence(s) => s.data(),
        }
    }

    fn kind_code(&self) -> u8 {
        match self {
            Self::Set(_) => 0,
            Self::Sequence(_) => 1,
        }
    }

    /// Set view of either kind (sequence order is dropped).
    pub fn into_set(self) -> Result<FeatureSet> {
        match self {
            Self::Set(s) => Ok(s),
            Self::Sequence(s) => s.to_set(),
        }
    }

    /// Sequence view of either kind (set order becomes frame order).
    pub fn into_sequence(self) -> FeatureSequence {
        match self {
            Self::Set(s) => FeatureSequence {
                dim: s.dim,
                data: s.data,
            },
            Self::Sequence(s) => s,
        }
    }
}

impl From<FeatureSet> for FeatureCollection {
    fn from(s: FeatureSet) -> Self {
        Self::Set(s)
    }
}

impl From<FeatureSequence> for FeatureCollection {
    fn from(s: FeatureSequence) -> Self {
        Self::Sequence(s)
    }
}

/// Fixed-cardinality set whose slots are either observed (carry a value) or
/// masked (value identically zero).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSet {
    dim: usize,
    values: Vec<f32>,
    observed: Vec<bool>,
}

impl MaskedSet {
    /// Builds the set, zeroing the value of every slot that is not observed.
    pub fn new(dim: usize, mut values: Vec<f32>, observed: Vec<bool>) -> Result<Self> {
        check_rows(dim, &values)?;
        if observed.is_empty() {
            return Err(Error::InvalidInput("masked set needs at least one slot".into()));
        }
        if values.len() != observed.len() * dim {
            return Err(Error::Shape(format!(
                "{} flags for {} rows",
                observed.len(),
                values.len() / dim
            )));
        }
        for (row, &obs) in values.chunks_mut(dim).zip(&observed) {
            if !obs {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Self {
            dim,
            values,
            observed,
        })
    }

    /// Observed rows first, followed by `missing` zeroed slots.
    pub fn from_observed(observed: &FeatureSet, missing: usize) -> Self {
        let n_obs = observed.len();
        let mut values = observed.data().to_vec();
        values.resize((n_obs + missing) * observed.dim(), 0.0);
        let mut flags = vec![true; n_obs];
        flags.resize(n_obs + missing, false);
        Self {
            dim: observed.dim(),
            values,
            observed: flags,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    pub fn observed_flags(&self) -> &[bool] {
        &self.observed
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.observed[i]).collect()
    }

    pub fn num_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Reorders slots; `perm[i]` is the source slot placed at position `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            values.extend_from_slice(self.value(p));
        }
        Self {
            dim: self.dim,
            values,
            observed: perm.iter().map(|&p| self.observed[p]).collect(),
        }
    }
}

/// Divides every entry by [`NORMALIZATION_SCALE`].
pub fn normalize_set(s: &FeatureSet) -> FeatureSet {
    s.map(|v| v / NORMALIZATION_SCALE)
}

/// Multiplies every entry by [`NORMALIZATION_SCALE`].
pub fn denormalize_set(s: &FeatureSet) -> FeatureSet {
    s.map(|v| v * NORMALIZATION_SCALE)
}

pub fn normalize_sequence(s: &FeatureSequence) -> FeatureSequence {
    s.map(|v| v / NORMALIZATION_SCALE)
}

pub fn denormalize_sequence(s: &FeatureSequence) -> FeatureSequence {
    s.map(|v| v * NORMALIZATION_SCALE)
}

pub fn normalize(c: &FeatureCollection) -> FeatureCollection {
    match c {
        FeatureCollection::Set(s) => normalize_set(s).into(),
        FeatureCollection::Sequence(s) => normalize_sequence(s).into(),
    }
}

pub fn denormalize(c: &FeatureCollection) -> FeatureCollection {
    match c {
        FeatureCollection::Set(s) => denormalize_set(s).into(),
        FeatureCollection::Sequence(s) => denormalize_sequence(s).into(),
    }
}

/// Indices of a uniform random subset of size `target` drawn without
/// replacement from `0..n`, in draw order.
pub fn subsample_indices(n: usize, target: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if target > n {
        return Err(Error::InvalidInput(format!(
            "cannot draw {target} elements from a set of {n}"
        )));
    }
    Ok(sample(rng, n, target).into_vec())
}

/// Uniform random subset without replacement.
pub fn subsample_set(set: &FeatureSet, target: usize, rng: &mut impl Rng) -> Result<FeatureSet> {
    if target == 0 {
        return Err(Error::InvalidInput("target cardinality must be ≥ 1".into()));
    }
    let idx = subsample_indices(set.len(), target, rng)?;
    Ok(set.select(&idx))
}

/// Sidecar metadata written next to an FSF file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speaker_tag: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_period_ms: Option<f64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Serializes a collection to FSF bytes.
pub fn encode_fsf(c: &FeatureCollection) -> Result<Vec<u8>> {
    let (dim, count) = (c.dim(), c.len());
    if let FeatureCollection::Set(_) = c {
        if count == 0 {
            return Err(Error::InvalidInput("cardinality must be ≥ 1".into()));
        }
    }
    let dim32 = u32::try_from(dim)
        .map_err(|_| Error::InvalidInput(format!("dim {dim} exceeds the format limit")))?;
    check_rows(dim, c.data())?;
    let mut out = Vec::with_capacity(FSF_HEADER_LEN + c.data().len() * 4);
    out.extend_from_slice(&FSF_MAGIC);
    out.push(FSF_VERSION);
    out.push(c.kind_code());
    out.push(0);
    out.push(0);
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for v in c.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses FSF bytes.
pub fn decode_fsf(bytes: &[u8]) -> Result<FeatureCollection> {
    if bytes.len() < 4 || bytes[..4] != FSF_MAGIC {
        return Err(FormatError::BadMagic {
            expected: FSF_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        }
        .into());
    }
    if bytes.len() < FSF_HEADER_LEN {
        return Err(FormatError::TruncatedHeader(bytes.len()).into());
    }
    if bytes[4] != FSF_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4] as u32).into());
    }
    let kind = bytes[5];
    if kind > 1 {
        return Err(FormatError::UnsupportedCode {
            field: "kind",
            value: kind,
        }
        .into());
    }
    if bytes[6] != 0 {
        return Err(FormatError::UnsupportedCode {
            field: "dtype",
            value: bytes[6],
        }
        .into());
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(FormatError::Corrupt("dim is zero".into()).into());
    }
    let expected = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Corrupt("count * dim overflows".into()))?;
    let found = (bytes.len() - FSF_HEADER_LEN) as u64;
    if found < expected {
        return Err(FormatError::TruncatedPayload { expected, found }.into());
    }
    if found > expected {
        return Err(FormatError::TrailingBytes(found - expected).into());
    }
    let data: Vec<f32> = bytes[FSF_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(if kind == 0 {
        FeatureSet::new(dim, data)?.into()
    } else {
        FeatureSequence::new(dim, data)?.into()
    })
}

/// Writes `c` to `path` in FSF and, when given, the sidecar manifest.
pub fn write_feature_file(
    path: &Path,
    c: &FeatureCollection,
    manifest: Option<&Manifest>,
) -> Result<()> {
    let bytes = encode_fsf(c)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    if let Some(m) = manifest {
        let mpath = manifest_path(path);
        let text = serde_json::to_string_pretty(m)
            .map_err(|e| Error::InvalidInput(format!("manifest: {e}")))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    }
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureCollection> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fsf(&bytes)
}

/// Reads the sidecar manifest if one exists.
pub fn read_manifest(path: &Path) -> Result<Option<Manifest>> {
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::InvalidInput(format!("manifest {}: {e}", mpath.display())))
}
