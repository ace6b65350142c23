use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lynx_core::backbone::{BackboneInit, ModelConfig};
use lynx_core::data_pipeline::{PairRecord, PairType, SamplingWeights, DEFAULT_THRESHOLD};
use lynx_core::eval_harness::DEFAULT_STRIDE;
use lynx_core::flow_match::{SamplerConfig, TrainConfig};
use lynx_core::id_adapter::IdAdapterConfig;
use lynx_core::LynxConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Codec downsampling factor between pixels and latents.
pub const LATENT_POOL: usize = 8;

/// Bad configuration or input. Exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleShape {
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Leading target frames kept per clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_frames: Option<usize>,
    pub filter_threshold: f64,
    pub histogram_bins: usize,
    pub weights: SamplingWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub frame_stride: usize,
    pub embedder_dim: usize,
    pub allow_partial: bool,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<PathBuf>,
}

/// Everything a run needs. Files only have to name the keys they change;
/// the rest comes from the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub text_tokens: usize,
    pub init_seed: u64,
    pub backbone_init: BackboneInit,
    pub model: ModelConfig,
    pub id_adapter: IdAdapterConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub sample: SampleShape,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lynx = LynxConfig::default();
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/desk"),
            text_tokens: lynx.text_tokens,
            init_seed: lynx.init_seed,
            backbone_init: lynx.backbone_init,
            model: lynx.model,
            id_adapter: lynx.id_adapter,
            train: TrainConfig {
                image_iters: 500,
                video_iters: 500,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            sample: SampleShape {
                num_frames: 4,
                width: 64,
                height: 64,
            },
            data: DataConfig {
                manifest: None,
                max_frames: None,
                filter_threshold: DEFAULT_THRESHOLD,
                histogram_bins: 10,
                weights: SamplingWeights::default(),
            },
            eval: EvalConfig {
                frame_stride: DEFAULT_STRIDE,
                embedder_dim: 64,
                allow_partial: false,
                max_in_flight: 4,
                timeout_secs: 120,
                max_retries: 3,
                backoff_ms: 500,
                rubric: None,
            },
        }
    }
}

impl RunConfig {
    /// Defaults, then the file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).context("serializing defaults")?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("config {}: {e}", p.display())))?;
            let file: toml::Table = text.parse().map_err(|e| config_err(format!("config {}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lynx_config(&self) -> LynxConfig {
        LynxConfig {
            model: self.model.clone(),
            id_adapter: self.id_adapter.clone(),
            backbone_init: self.backbone_init,
            text_tokens: self.text_tokens,
            init_seed: self.init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lift = |r: lynx_core::Result<()>| r.map_err(|e| config_err(e.to_string()));
        lift(self.lynx_config().validate())?;
        lift(self.train.validate())?;
        lift(self.sampler.validate())?;
        lift(self.data.weights.validate())?;
        let p = self.model.patch;
        let s = &self.sample;
        if s.num_frames == 0 || !s.num_frames.is_multiple_of(p.pt) {
            return Err(config_err(format!("sample.num_frames: {} is not a positive multiple of {}", s.num_frames, p.pt)));
        }
        for (field, v, k) in [("sample.width", s.width, p.pw), ("sample.height", s.height, p.ph)] {
            if v == 0 || v % (LATENT_POOL * k) != 0 {
                return Err(config_err(format!("{field}: {v} is not a positive multiple of {}", LATENT_POOL * k)));
            }
        }
        if !(-1.0..=1.0).contains(&self.data.filter_threshold) {
            return Err(config_err("data.filter_threshold: must lie in [-1, 1]"));
        }
        if self.data.histogram_bins == 0 {
            return Err(config_err("data.histogram_bins: must be positive"));
        }
        if self.data.max_frames == Some(0) {
            return Err(config_err("data.max_frames: must be positive"));
        }
        let e = &self.eval;
        if e.frame_stride == 0 || e.embedder_dim == 0 || e.max_in_flight == 0 {
            return Err(config_err("eval: frame_stride, embedder_dim and max_in_flight must be positive"));
        }
        Ok(())
    }

    /// The manifest named by `flag`, else by `data.manifest`; must exist.
    pub fn manifest(&self, flag: Option<&Path>) -> Result<PathBuf> {
        let p = flag
            .map(Path::to_path_buf)
            .or_else(|| self.data.manifest.clone())
            .ok_or_else(|| config_err("data.manifest: no manifest given (set data.manifest or pass --manifest)"))?;
        if !p.is_file() {
            return Err(config_err(format!("data.manifest: {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Configured pair-type weights with types absent from `records` zeroed.
    pub fn weights_for(&self, records: &[PairRecord]) -> SamplingWeights {
        let mut w = self.data.weights.as_array();
        for (t, w) in PairType::ALL.iter().zip(w.iter_mut()) {
            if *w > 0.0 && !records.iter().any(|r| r.pair_type == *t) {
                log::warn!("no {t} records; its sampling weight is dropped");
                *w = 0.0;
            }
        }
        SamplingWeights::new(w[0], w[1], w[2])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }

    /// Writes the effective config to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal when it parses as one, bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{}` is not a table", parts[..=i].join("."))))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
