//! Binary checkpoints: magic, format version, a JSON header, then named
//! little-endian f64 blocks in registration order.

use std::path::Path;

use multitune_core::adapters::{AdapterSpec, AdapterState};
use multitune_core::model::{BaseModel, ModelConfig};
use multitune_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_file;

pub const MAGIC: &[u8; 4] = b"MTCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: Kind,
    pub model: ModelConfig,
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
    /// Discipline of a single-discipline expert.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

pub fn encode(header: &Header, params: &[(String, Tensor)]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Header, Vec<(String, Tensor)>), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("header: {e}"))?;
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "block name is not UTF-8".to_string())?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or("block too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("block `{name}`: {e}"))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((header, params))
}

fn read(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}

pub fn save_base(path: &Path, model: &BaseModel, config_hash: Option<&str>) -> Result<()> {
    let header = Header {
        kind: Kind::Base,
        model: model.config().clone(),
        adapter: None,
        label: None,
        config_hash: config_hash.map(str::to_string),
    };
    write_file(path, &encode(&header, &model.named_params()))
}

pub fn save_adapters(
    path: &Path,
    state: &AdapterState,
    label: Option<&str>,
    config_hash: Option<&str>,
) -> Result<()> {
    let header = Header {
        kind: Kind::Adapter,
        model: state.model_config().clone(),
        adapter: Some(state.spec().clone()),
        label: label.map(str::to_string),
        config_hash: config_hash.map(str::to_string),
    };
    write_file(path, &encode(&header, &state.named_params()))
}

pub fn load_base(path: &Path) -> Result<BaseModel> {
    let (header, params) = read(path)?;
    if header.kind != Kind::Base {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "expected a base-model checkpoint, found adapters".into(),
        });
    }
    Ok(BaseModel::from_params(header.model, params)?)
}

pub fn load_adapters(path: &Path) -> Result<(AdapterState, Header)> {
    let (header, params) = read(path)?;
    let spec = match (&header.kind, &header.adapter) {
        (Kind::Adapter, Some(spec)) => spec.clone(),
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "expected an adapter checkpoint".into(),
            })
        }
    };
    let state = AdapterState::from_params(spec, &header.model, params)?;
    Ok((state, header))
}
