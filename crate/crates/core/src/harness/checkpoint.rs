//! Model checkpoints: a JSON header followed by PADT tensor blobs.
//!
//! Layout: `b"PADC"`, `u16` version, `u64` header length (little endian),
//! the UTF-8 JSON header, then one PADT record per entry of `header.tensors`
//! in order.

use std::path::Path;

use gradkit::{AdamState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::bridge::ScheduleDescriptor;
use crate::error::{io_err, PadmError, Result};
use crate::harness::tensorfile::{decode_prefix, encode, AnyTensor};
use crate::padm::PadmModel;

const MAGIC: &[u8; 4] = b"PADC";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Value,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    slot: Slot,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: PadmModel,
    schedule: ScheduleDescriptor,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PadmModel,
    pub schedule: ScheduleDescriptor,
    pub params: ParamStore<f32>,
    /// Free-form training metadata (epoch, best validation score, config).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut blobs = Vec::new();
        for (name, p) in self.params.iter() {
            let mut push = |slot, t: &Tensor<f32>| -> Result<()> {
                entries.push(Entry { name: name.clone(), slot });
                blobs.extend(encode(t)?);
                Ok(())
            };
            push(Slot::Value, &p.value)?;
            if let Some(state) = &p.state {
                push(Slot::AdamM, &state.m)?;
                push(Slot::AdamV, &state.v)?;
            }
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            schedule: self.schedule,
            step: self.params.step_count(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(14 + header.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: String| PadmError::Format {
            path: origin.to_path_buf(),
            detail,
        };
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(bad("missing PADC magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(14..14usize.saturating_add(len))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 14 + len;
        let mut params = ParamStore::new();
        let mut pending: Option<(String, Tensor<f32>, Option<Tensor<f32>>)> = None;
        for entry in &header.tensors {
            let (t, used) = decode_prefix(&bytes[offset..], origin)?;
            offset += used;
            let AnyTensor::F32(t) = t else {
                return Err(bad(format!("{} is not f32", entry.name)));
            };
            match entry.slot {
                Slot::Value => {
                    params.insert(entry.name.clone(), t)?;
                }
                Slot::AdamM => pending = Some((entry.name.clone(), t, None)),
                Slot::AdamV => {
                    let Some((name, m, None)) = pending.take() else {
                        return Err(bad(format!("{}: second moment without first", entry.name)));
                    };
                    let param = params
                        .get_mut(&name)
                        .filter(|p| name == entry.name && p.value.shape() == m.shape() && m.shape() == t.shape())
                        .ok_or_else(|| bad(format!("{name}: optimizer state does not match")))?;
                    param.state = Some(AdamState { m, v: t });
                }
            }
        }
        if pending.is_some() {
            return Err(bad("dangling first moment".into()));
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        params.set_step_count(header.step);
        Ok(Self {
            model: header.model,
            schedule: header.schedule,
            params,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes, path)
    }

    /// Checks that the stored parameters are exactly those `model` expects.
    pub fn verify(&self) -> Result<()> {
        let fresh: ParamStore<f32> = self.model.init_params(0)?;
        let same = fresh.len() == self.params.len()
            && fresh.iter().zip(self.params.iter()).all(|((a, pa), (b, pb))| {
                a == b && pa.value.shape() == pb.value.shape()
            });
        if !same {
            return Err(PadmError::ConfigMismatch(
                "checkpoint parameters do not match its model configuration".into(),
            ));
        }
        Ok(())
    }
}
