//! Model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "CLIPCKPT" | u32 version
//! u64 header length | header (TOML: [clip] config, [metadata] strings) | u32 CRC-32 of header
//! u64 tensor count
//! per tensor: u32 name length | name (UTF-8) | u8 dtype (1 = f64) | u32 rank | u64 dims..
//!             | payload | u32 CRC-32 of payload
//! ```
//!
//! Tower tensors are stored as `vision.<name>` and `text.<name>`; optimiser
//! moments as `optimizer.m.<key>` and `optimizer.v.<key>` with the step count
//! in the `optimizer_step` metadata entry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use clipladder_core::model::{ClipConfig, ClipModel, TowerWeights};
use clipladder_core::optim::LambState;
use clipladder_core::tensor::Tensor;

use crate::binary::{element_count, get_shape, put_shape, Reader, DTYPE_F64};
use crate::error::{read_file, write_file, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLIPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const OPT_STEP_KEY: &str = "optimizer_step";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ClipConfig,
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    clip: ClipConfig,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &ClipModel, optimizer: Option<&LambState>, metadata: BTreeMap<String, String>) -> Self {
        let mut tensors = BTreeMap::new();
        for (prefix, tower) in [("vision", &model.vision), ("text", &model.text)] {
            for (name, t) in tower.iter() {
                tensors.insert(format!("{prefix}.{name}"), t.clone());
            }
        }
        let mut metadata = metadata;
        if let Some(opt) = optimizer {
            for (key, m, v) in opt.iter_moments() {
                tensors.insert(format!("optimizer.m.{key}"), Tensor::from_slice(m));
                tensors.insert(format!("optimizer.v.{key}"), Tensor::from_slice(v));
            }
            metadata.insert(OPT_STEP_KEY.into(), opt.step_count().to_string());
        }
        Self { config: model.config.clone(), metadata, tensors }
    }

    fn tower(&self, prefix: &str) -> TowerWeights {
        let p = format!("{prefix}.");
        TowerWeights::from_map(
            self.tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(&p).map(|n| (n.to_string(), t.clone())))
                .collect(),
        )
    }

    /// The model; tower tensors are checked against the stored config.
    pub fn model(&self) -> Result<ClipModel> {
        Ok(ClipModel::from_parts(self.config.clone(), self.tower("vision"), self.tower("text"))?)
    }

    /// Optimiser state, when one was saved.
    pub fn optimizer(&self) -> Result<Option<LambState>> {
        let Some(step) = self.metadata.get(OPT_STEP_KEY) else {
            return Ok(None);
        };
        let step: u64 = step.parse().map_err(|_| Error::Format(format!("bad {OPT_STEP_KEY} `{step}`")))?;
        let mut moments = BTreeMap::new();
        for (k, m) in &self.tensors {
            if let Some(key) = k.strip_prefix("optimizer.m.") {
                let v = self
                    .tensors
                    .get(&format!("optimizer.v.{key}"))
                    .ok_or_else(|| Error::Format(format!("optimizer moment `{key}` lacks its second moment")))?;
                moments.insert(key.to_string(), (m.data().to_vec(), v.data().to_vec()));
            }
        }
        Ok(Some(LambState::from_parts(step, moments)))
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = toml::to_string(&Header { clip: ck.config.clone(), metadata: ck.metadata.clone() })
        .map_err(|e| Error::Format(format!("cannot serialise checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&crc32fast::hash(header.as_bytes()).to_le_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u64).to_le_bytes());
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        put_shape(&mut out, t.shape());
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version} is not supported by this reader (version {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = r.len(1)?;
    let htext = r.take(hlen)?;
    if r.u32()? != crc32fast::hash(htext) {
        return Err(Error::Integrity("checkpoint header checksum mismatch".into()));
    }
    let htext = std::str::from_utf8(htext).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let header: Header = toml::from_str(htext).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = r.len(1)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("tensor `{name}` has unsupported dtype tag {dtype}")));
        }
        let shape = get_shape(&mut r)?;
        let n = element_count(&shape)?;
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("tensor `{name}` too large")))?)?;
        if r.u32()? != crc32fast::hash(payload) {
            return Err(Error::Integrity(format!("checksum mismatch in tensor `{name}`")));
        }
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("tensor `{name}` appears twice")));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", r.remaining())));
    }
    debug_assert_eq!(r.position(), bytes.len());
    Ok(Checkpoint { config: header.clip, metadata: header.metadata, tensors })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}
