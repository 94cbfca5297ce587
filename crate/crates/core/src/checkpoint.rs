//! Binary containers for model checkpoints (`CLAB1`), adapters (`CLABA`) and
//! Fisher diagonals (`CLABF`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[5] | version u32 | header_len u32 | header (JSON, header_len bytes)
//! tensor_count u32
//! per tensor: name_len u32 | name | rank u32 | dims u32 * rank | f64 * prod(dims)
//! ```
//!
//! The header carries the model config (plus the merged-LoRA flag), the
//! adapter spec, or the Fisher sample count and source tag.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, AdapterState};
use crate::continual::{FisherDiagonal, FisherHeader};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 5] = b"CLAB1";
pub const ADAPTER_MAGIC: &[u8; 5] = b"CLABA";
pub const FISHER_MAGIC: &[u8; 5] = b"CLABF";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    merged_lora: bool,
}

fn encode<H: Serialize>(magic: &[u8; 5], header: &H, tensors: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + tensors.scalar_count() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let h = serde_json::to_vec(header)?;
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    what: String,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.cur.get_ref().len() - self.cur.position() as usize;
        if n > remaining {
            return Err(Error::Format(format!("{}: truncated ({n} bytes wanted, {remaining} left)", self.what)));
        }
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
}

fn decode<H: DeserializeOwned>(magic: &[u8; 5], bytes: &[u8], what: &str) -> Result<(H, ParamStore)> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
        what: what.to_string(),
    };
    let m = r.bytes(5)?;
    if m != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{what}: unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: H = serde_json::from_slice(&r.bytes(hlen)?)
        .map_err(|e| Error::Format(format!("{what}: bad header: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(nlen)?).map_err(|_| Error::Format(format!("{what}: tensor name is not UTF-8")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n.checked_mul(8).ok_or_else(|| Error::Format(format!("{what}: tensor too large")))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("{what}: duplicate tensor `{name}`")));
        }
    }
    if (r.cur.position() as usize) != bytes.len() {
        return Err(Error::Format(format!("{what}: trailing bytes")));
    }
    Ok((header, store))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn model_to_bytes(config: &ModelConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let header = ModelHeader {
        config: config.clone(),
        merged_lora: params.merged_lora,
    };
    encode(MODEL_MAGIC, &header, params)
}

/// Loads a checkpoint and checks its tensors against the stored config.
pub fn model_from_bytes(bytes: &[u8], what: &str) -> Result<(ModelConfig, ParamStore)> {
    let (header, mut params): (ModelHeader, _) = decode(MODEL_MAGIC, bytes, what)?;
    header.config.validate()?;
    let expected: ParamStore = header
        .config
        .param_shapes()
        .into_iter()
        .map(|(n, s)| (n, Tensor::zeros(&s)))
        .collect();
    expected.check_aligned(&params, what)?;
    params.merged_lora = header.merged_lora;
    Ok((header.config, params))
}

pub fn save_model(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    write_file(path, &model_to_bytes(config, params)?)
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    model_from_bytes(&read_file(path)?, &path.display().to_string())
}

pub fn save_adapter(path: &Path, state: &AdapterState) -> Result<()> {
    write_file(path, &encode(ADAPTER_MAGIC, state.spec(), state.tensors())?)
}

pub fn load_adapter(path: &Path, config: &ModelConfig) -> Result<AdapterState> {
    let (spec, tensors): (AdapterSpec, _) = decode(ADAPTER_MAGIC, &read_file(path)?, &path.display().to_string())?;
    AdapterState::from_parts(spec, tensors, config)
}

pub fn save_fisher(path: &Path, fisher: &FisherDiagonal) -> Result<()> {
    write_file(path, &encode(FISHER_MAGIC, &fisher.header(), &fisher.values)?)
}

pub fn load_fisher(path: &Path) -> Result<FisherDiagonal> {
    let (header, values): (FisherHeader, _) = decode(FISHER_MAGIC, &read_file(path)?, &path.display().to_string())?;
    FisherDiagonal::new(values, header.sample_count, header.source_tag)
}

/// First five bytes of a file, for dispatching on container type.
pub fn sniff_magic(path: &Path) -> Result<[u8; 5]> {
    let mut f = fs::File::open(path)?;
    let mut m = [0u8; 5];
    f.read_exact(&mut m)
        .map_err(|_| Error::Format(format!("{}: too short for a container", path.display())))?;
    Ok(m)
}
