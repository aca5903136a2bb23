//! PHCK checkpoint files.
//!
//! Layout (little-endian): magic `PHCK`, version `u32`, record count `u32`,
//! then per record: name length `u16`, UTF-8 name, rank `u8`, `rank` dims
//! as `u32`, and the `f32` payload. A `u32` length and a JSON document
//! with the model configuration close the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::hallucinator::{HallucinatorConfig, HallucinatorModel};
use crate::nn::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub records: Vec<CheckpointRecord>,
    pub config_json: String,
}

pub fn encode_checkpoint(file: &CheckpointFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(file.records.len())
        .map_err(|_| Error::InvalidInput("too many checkpoint records".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in &file.records {
        let name_len = u16::try_from(r.name.len())
            .map_err(|_| Error::InvalidInput(format!("record name too long: {}", r.name)))?;
        let rank = u8::try_from(r.shape.len())
            .map_err(|_| Error::InvalidInput(format!("rank too large for {}", r.name)))?;
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(Error::Shape(format!("record {} has inconsistent shape", r.name)));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(rank);
        for &d in &r.shape {
            let d = u32::try_from(d).map_err(|_| Error::InvalidInput(format!("dim too large in {}", r.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg = file.config_json.as_bytes();
    let cfg_len = u32::try_from(cfg.len()).map_err(|_| Error::InvalidInput("config too long".into()))?;
    out.extend_from_slice(&cfg_len.to_le_bytes());
    out.extend_from_slice(cfg);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointFile> {
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        }
        .into());
    }
    let mut r = Reader { bytes, pos: 4 };
    let (version, count) = match (r.u32(), r.u32()) {
        (Some(v), Some(c)) => (v, c),
        _ => return Err(FormatError::TruncatedHeader(bytes.len()).into()),
    };
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let mut records = Vec::new();
    for index in 0..count as usize {
        let corrupt = |name: &str, reason: &str| FormatError::CorruptRecord {
            index,
            name: name.to_string(),
            reason: reason.to_string(),
        };
        let name_len = r.u16().ok_or_else(|| corrupt("?", "truncated name length"))?;
        let name_bytes = r.take(name_len as usize).ok_or_else(|| corrupt("?", "truncated name"))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| corrupt("?", "name is not UTF-8"))?;
        let rank = r.u8().ok_or_else(|| corrupt(&name, "truncated rank"))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(|| corrupt(&name, "truncated dims"))? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(&name, "dims overflow"))?;
        let payload = r.take(n).ok_or_else(|| corrupt(&name, "truncated data"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(CheckpointRecord { name, shape, data });
    }
    let cfg_len = r
        .u32()
        .ok_or_else(|| FormatError::Corrupt("missing config length".into()))?;
    let cfg = r
        .take(cfg_len as usize)
        .ok_or_else(|| FormatError::Corrupt("truncated config".into()))?;
    let config_json =
        String::from_utf8(cfg.to_vec()).map_err(|_| FormatError::Corrupt("config is not UTF-8".into()))?;
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes((bytes.len() - r.pos) as u64).into());
    }
    Ok(CheckpointFile { records, config_json })
}

/// JSON document stored after the record table.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: HallucinatorConfig,
    trained_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam: Option<AdamMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
}

/// Everything restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HallucinatorModel<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Opaque trainer state.
    pub training: Option<serde_json::Value>,
}

fn record(name: String, t: &Tensor<f32>) -> CheckpointRecord {
    CheckpointRecord {
        name,
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

pub fn checkpoint_bytes(
    model: &HallucinatorModel<f32>,
    adam: Option<&AdamState<f32>>,
    training: Option<serde_json::Value>,
) -> Result<Vec<u8>> {
    let params = model.params();
    let mut records: Vec<CheckpointRecord> = params.iter().map(|p| record(p.name.clone(), &p.tensor)).collect();
    if let Some(a) = adam {
        for (p, m) in params.iter().zip(&a.m) {
            records.push(record(format!("{ADAM_M_PREFIX}{}", p.name), m));
        }
        for (p, v) in params.iter().zip(&a.v) {
            records.push(record(format!("{ADAM_V_PREFIX}{}", p.name), v));
        }
    }
    let meta = CheckpointMeta {
        config: model.config().clone(),
        trained_steps: model.trained_steps(),
        adam: adam.map(|a| AdamMeta {
            config: a.config,
            step: a.step,
        }),
        training,
    };
    let config_json = serde_json::to_string(&meta).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
    encode_checkpoint(&CheckpointFile { records, config_json })
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let file = decode_checkpoint(bytes)?;
    let meta: CheckpointMeta = serde_json::from_str(&file.config_json)
        .map_err(|e| FormatError::Corrupt(format!("config document: {e}")))?;
    let mut model = HallucinatorModel::<f32>::new(meta.config, 0)?;
    model.set_trained_steps(meta.trained_steps);
    let mut by_name: std::collections::HashMap<&str, (usize, &CheckpointRecord)> =
        file.records.iter().enumerate().map(|(i, r)| (r.name.as_str(), (i, r))).collect();
    let mut fill = |name: &str, target: &mut Tensor<f32>| -> Result<()> {
        let (index, rec) = by_name
            .remove(name)
            .ok_or_else(|| FormatError::Corrupt(format!("missing record {name}")))?;
        if rec.shape != target.shape() {
            return Err(FormatError::CorruptRecord {
                index,
                name: name.to_string(),
                reason: format!("shape {:?}, model expects {:?}", rec.shape, target.shape()),
            }
            .into());
        }
        target.data_mut().copy_from_slice(&rec.data);
        Ok(())
    };
    for p in model.params_mut().iter_mut() {
        let name = p.name.clone();
        fill(&name, &mut p.tensor)?;
    }
    let adam = match meta.adam {
        Some(am) => {
            let mut state = AdamState::new(model.params(), am.config);
            state.step = am.step;
            let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
            for (i, name) in names.iter().enumerate() {
                fill(&format!("{ADAM_M_PREFIX}{name}"), &mut state.m[i])?;
                fill(&format!("{ADAM_V_PREFIX}{name}"), &mut state.v[i])?;
            }
            Some(state)
        }
        None => None,
    };
    if let Some((name, (index, _))) = by_name.into_iter().next() {
        return Err(FormatError::CorruptRecord {
            index,
            name: name.to_string(),
            reason: "not part of the model".into(),
        }
        .into());
    }
    Ok(Checkpoint {
        model,
        adam,
        training: meta.training,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &HallucinatorModel<f32>,
    adam: Option<&AdamState<f32>>,
    training: Option<serde_json::Value>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, adam, training)?;
    // write-then-rename so an interrupted save never leaves a partial file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
