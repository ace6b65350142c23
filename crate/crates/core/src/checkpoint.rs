//! Single-file named-tensor container: an 8-byte little-endian header length,
//! a JSON header (format name, version, config echo, free-form metadata and a
//! tensor directory), then raw little-endian `f64` payloads.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::model::{LynxConfig, LynxModel};
use crate::tensor::Matrix;

pub const FORMAT_NAME: &str = "lynx-ckpt";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

pub fn write_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    meta: &serde_json::Value,
    tensors: &[(String, &Matrix)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in tensors {
        let nbytes = (m.data().len() * 8) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: [m.rows(), m.cols()],
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = CheckpointHeader {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: config.clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let hbytes = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(&(hbytes.len() as u64).to_le_bytes())?;
        f.write_all(&hbytes)?;
        for (_, m) in tensors {
            for v in m.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header_from(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|e| LynxError::Checkpoint(format!("truncated header length: {e}")))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(LynxError::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|e| LynxError::Checkpoint(format!("truncated header: {e}")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&buf).map_err(|e| LynxError::Checkpoint(format!("malformed header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(LynxError::Checkpoint(format!("format `{}` is not {FORMAT_NAME}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(LynxError::Checkpoint(format!("unsupported version {}", header.version)));
    }
    Ok(header)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_header_from(&mut f)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header_from(&mut f)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f64" {
            return Err(LynxError::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if e.nbytes as usize != n * 8 || end > payload.len() {
            return Err(LynxError::Checkpoint(format!("{}: payload out of bounds", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name.clone(), Matrix::from_vec(e.shape[0], e.shape[1], data)?));
    }
    Ok(Checkpoint { header, tensors })
}

/// Refuses a checkpoint whose model shapes differ from `expected`, naming
/// both values.
pub fn check_compatible(expected: &LynxConfig, header: &CheckpointHeader) -> Result<()> {
    let found: LynxConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| LynxError::Checkpoint(format!("config echo unreadable: {e}")))?;
    let (a, b) = (&expected.model, &found.model);
    let pairs = [
        ("hidden_dim", a.hidden_dim, b.hidden_dim),
        ("num_blocks", a.num_blocks, b.num_blocks),
        ("num_heads", a.num_heads, b.num_heads),
        ("text_dim", a.text_dim, b.text_dim),
        ("latent_channels", a.latent_channels, b.latent_channels),
        ("time_freq_dim", a.time_freq_dim, b.time_freq_dim),
        ("mlp_ratio", a.mlp_ratio, b.mlp_ratio),
        ("face_dim", expected.id_adapter.face_dim, found.id_adapter.face_dim),
        ("n_id", expected.id_adapter.n_id, found.id_adapter.n_id),
        ("n_reg", expected.id_adapter.n_reg, found.id_adapter.n_reg),
    ];
    for (field, want, got) in pairs {
        if want != got {
            return Err(LynxError::Checkpoint(format!(
                "{field} mismatch: config has {want}, checkpoint has {got}"
            )));
        }
    }
    if a.patch != b.patch {
        return Err(LynxError::Checkpoint(format!(
            "patch mismatch: config has {:?}, checkpoint has {:?}",
            a.patch, b.patch
        )));
    }
    Ok(())
}

impl LynxModel {
    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let tensors: Vec<(String, &Matrix)> = self.store.iter().map(|(_, n, m)| (n.to_string(), m)).collect();
        write_checkpoint(path, &serde_json::to_value(&self.config)?, meta, &tensors)
    }

    /// Rebuilds the model from the config echo and overwrites every tensor.
    /// The frozen reference copy is retaken from the loaded backbone.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let ckpt = read_checkpoint(path)?;
        let config: LynxConfig = serde_json::from_value(ckpt.header.config.clone())
            .map_err(|e| LynxError::Checkpoint(format!("config echo unreadable: {e}")))?;
        let mut model = LynxModel::new(config)?;
        model.load_tensors(&ckpt)?;
        Ok((model, ckpt.header.meta))
    }

    pub fn load_tensors(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut seen = 0;
        for (name, m) in &ckpt.tensors {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| LynxError::Checkpoint(format!("unknown tensor {name}")))?;
            let have = self.store.value(id).shape();
            if have != m.shape() {
                return Err(LynxError::Checkpoint(format!(
                    "{name}: model shape {have:?}, checkpoint shape {:?}",
                    m.shape()
                )));
            }
            self.store.set(id, m.clone())?;
            seen += 1;
        }
        if seen != self.store.len() {
            return Err(LynxError::Checkpoint(format!(
                "checkpoint holds {seen} of {} tensors",
                self.store.len()
            )));
        }
        self.refreeze();
        Ok(())
    }
}
