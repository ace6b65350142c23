use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{LynxError, Result};
use crate::id_adapter::FaceEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairType {
    SingleScene,
    MultiScene,
    AugmentedSingleScene,
}

impl PairType {
    pub const ALL: [PairType; 3] = [PairType::SingleScene, PairType::MultiScene, PairType::AugmentedSingleScene];

    pub fn as_str(&self) -> &'static str {
        match self {
            PairType::SingleScene => "single_scene",
            PairType::MultiScene => "multi_scene",
            PairType::AugmentedSingleScene => "augmented_single_scene",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for PairType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One person–text–target pair. Paths are absolute after loading; unknown
/// manifest keys survive in `extra`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_type: PairType,
    pub condition_image: PathBuf,
    pub target: PathBuf,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_embedding: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resemblance: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl PairRecord {
    pub fn new(pair_type: PairType, condition_image: PathBuf, target: PathBuf, caption: impl Into<String>) -> Self {
        Self {
            pair_type,
            condition_image,
            target,
            caption: caption.into(),
            id_embedding: None,
            resemblance: None,
            extra: Map::new(),
        }
    }
}

const REQUIRED: [&str; 4] = ["pair_type", "condition_image", "target", "caption"];

fn manifest_err(line: usize, field: Option<&str>, message: impl Into<String>) -> LynxError {
    LynxError::Manifest {
        line,
        field: field.map(str::to_string),
        message: message.into(),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses one JSON-lines record. `line` is 1-based and only used in errors.
pub fn parse_record(text: &str, line: usize, base: &Path) -> Result<PairRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| manifest_err(line, None, format!("malformed JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(manifest_err(line, None, "record must be a JSON object"));
    };
    for key in REQUIRED {
        if !obj.contains_key(key) {
            return Err(manifest_err(line, Some(key), "missing required field"));
        }
    }
    let string_field = |obj: &mut Map<String, Value>, key: &str| -> Result<String> {
        match obj.remove(key) {
            Some(Value::String(s)) => Ok(s),
            _ => Err(manifest_err(line, Some(key), "expected a string")),
        }
    };
    let pt = string_field(&mut obj, "pair_type")?;
    let pair_type = PairType::parse(&pt).ok_or_else(|| {
        manifest_err(
            line,
            Some("pair_type"),
            format!("`{pt}` is not one of single_scene, multi_scene, augmented_single_scene"),
        )
    })?;
    let condition_image = resolve(base, &string_field(&mut obj, "condition_image")?);
    let target = resolve(base, &string_field(&mut obj, "target")?);
    let caption = string_field(&mut obj, "caption")?;
    let id_embedding = match obj.remove("id_embedding") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(resolve(base, &s)),
        Some(_) => return Err(manifest_err(line, Some("id_embedding"), "expected a string")),
    };
    let resemblance = match obj.remove("resemblance") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_f64() {
            Some(r) if (-1.0..=1.0).contains(&r) => Some(r),
            _ => return Err(manifest_err(line, Some("resemblance"), "expected a number in [-1, 1]")),
        },
    };
    for (key, path) in [("condition_image", &condition_image), ("target", &target)] {
        if !path.exists() {
            return Err(manifest_err(line, Some(key), format!("{} does not exist", path.display())));
        }
    }
    if let Some(p) = &id_embedding {
        if !p.exists() {
            return Err(manifest_err(line, Some("id_embedding"), format!("{} does not exist", p.display())));
        }
    }
    Ok(PairRecord {
        pair_type,
        condition_image,
        target,
        caption,
        id_embedding,
        resemblance,
        extra: obj,
    })
}

/// Reads a JSON-lines manifest. Blank lines are skipped; relative paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1, &base)?);
    }
    Ok(out)
}

/// Writes records as JSON-lines. Relative paths are made absolute against
/// the working directory, so the manifest reads back from anywhere.
pub fn write_manifest(path: &Path, records: &[PairRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let mut r = r.clone();
        r.condition_image = std::path::absolute(&r.condition_image)?;
        r.target = std::path::absolute(&r.target)?;
        if let Some(e) = &r.id_embedding {
            r.id_embedding = Some(std::path::absolute(e)?);
        }
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Count of records per pair type, in `PairType::ALL` order.
pub fn type_counts(records: &[PairRecord]) -> BTreeMap<PairType, usize> {
    let mut m: BTreeMap<PairType, usize> = PairType::ALL.iter().map(|t| (*t, 0)).collect();
    for r in records {
        *m.entry(r.pair_type).or_default() += 1;
    }
    m
}

/// Sidecar layout: `u64` LE element count followed by that many `f32` LE.
pub fn write_sidecar(path: &Path, v: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * v.len());
    bytes.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        bytes.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| LynxError::invalid(format!("sidecar {}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("shorter than its length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * n {
        return Err(bad(&format!("length prefix {n} does not match {} payload bytes", bytes.len() - 8)));
    }
    Ok(bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// Sidecar embedding, renormalized after the f32 round trip.
pub fn read_embedding(path: &Path) -> Result<FaceEmbedding> {
    FaceEmbedding::normalized(read_sidecar(path)?)
}
