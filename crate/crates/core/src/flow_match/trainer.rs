use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Tape};
use crate::backbone::{extract_patches, LatentVideo, Layout, TokenSeq};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{LynxError, Result};
use crate::id_adapter::FaceEmbedding;
use crate::model::{Adapters, LynxModel, SampleCond};
use crate::params::ParamId;
use crate::ref_adapter::RefCache;
use crate::rope_pack::pack;
use crate::tensor::Matrix;

use super::flow::{make_flow_sample, TimeDist};
use super::optim::{Adam, AdamConfig};
use super::schedule::{Stage, StageScheduler, REFERENCE_IMAGE_ITERS, REFERENCE_VIDEO_ITERS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub image_iters: usize,
    pub video_iters: usize,
    pub lr: f64,
    /// Token budget of one pack.
    pub pack_budget: usize,
    /// Examples drawn per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of replacing a sample's identity (face and reference)
    /// with the null conditioning.
    pub id_dropout: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    #[serde(default = "default_time_dist")]
    pub time_dist: TimeDist,
}

fn default_time_dist() -> TimeDist {
    TimeDist::Uniform
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_iters: REFERENCE_IMAGE_ITERS,
            video_iters: REFERENCE_VIDEO_ITERS,
            lr: 1e-4,
            pack_budget: 256,
            batch_size: 4,
            seed: 0,
            id_dropout: 0.1,
            clip_grad_norm: Some(1.0),
            time_dist: TimeDist::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        StageScheduler::new(self.image_iters, self.video_iters)?;
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(LynxError::config("train.lr", "must be finite and nonnegative"));
        }
        if self.pack_budget == 0 {
            return Err(LynxError::config("train.pack_budget", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(LynxError::config("train.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.id_dropout) {
            return Err(LynxError::config("train.id_dropout", "must lie in [0, 1]"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(LynxError::config("train.clip_grad_norm", "must be positive"));
            }
        }
        if let TimeDist::Fixed { t } = self.time_dist {
            if !(0.0..=1.0).contains(&t) {
                return Err(LynxError::config("train.time_dist.t", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn scheduler(&self) -> Result<StageScheduler> {
        StageScheduler::new(self.image_iters, self.video_iters)
    }
}

/// One training clip with its conditioning.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub latent: LatentVideo,
    pub text: Matrix,
    pub face: Option<FaceEmbedding>,
    /// Single-frame reference latent for the reference adapter.
    pub reference: Option<LatentVideo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub packs: usize,
    pub tokens: usize,
    pub dropped_identities: usize,
    /// Largest gradient magnitude seen on any frozen parameter.
    pub frozen_grad_max: f64,
}

/// Owns the model and optimizer; performs seeded updates on the trainable
/// parameters only.
pub struct Trainer {
    pub model: LynxModel,
    pub config: TrainConfig,
    pub optimizer: Adam,
    /// Completed global steps.
    pub step: usize,
    pub ref_cache: RefCache,
}

impl Trainer {
    pub fn new(model: LynxModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        Ok(Self {
            model,
            config,
            optimizer,
            step: 0,
            ref_cache: RefCache::in_memory(),
        })
    }

    /// Per-step generator: resuming at step `k` reproduces the draws of an
    /// uninterrupted run.
    fn step_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }

    /// Examples for the current step: all of them when they fit the batch,
    /// otherwise a seeded draw with replacement.
    pub fn select_batch<'d>(&self, data: &'d [TrainExample]) -> Vec<&'d TrainExample> {
        if data.len() <= self.config.batch_size {
            return data.iter().collect();
        }
        let mut rng = self.step_rng((self.step as u64) << 1 | 1);
        (0..self.config.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect()
    }

    pub fn train_step(&mut self, batch: &[&TrainExample], stage: Stage) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(LynxError::invalid("empty training batch"));
        }
        let started = Instant::now();
        let mut rng = self.step_rng((self.step as u64) << 1);
        let patch = self.model.config.model.patch;
        let mut seqs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut conds = Vec::with_capacity(batch.len());
        let mut dropped = 0;
        for ex in batch {
            let latent = match stage {
                Stage::Image => ex.latent.frame(0),
                Stage::Video => ex.latent.clone(),
            };
            let (patches, grid) = extract_patches(&latent, patch)?;
            let fs = make_flow_sample(&patches, &mut rng, self.config.time_dist)?;
            let drop = rng.random::<f64>() < self.config.id_dropout;
            dropped += drop as usize;
            let reference = match (&ex.reference, drop) {
                (Some(r), false) => Some(self.ref_cache.get_or_encode(r, &self.model.frozen, &self.model.text)?),
                _ => None,
            };
            conds.push(SampleCond {
                t: fs.t,
                text: ex.text.clone(),
                face: if drop { None } else { ex.face.clone() },
                reference,
            });
            seqs.push(TokenSeq::new(fs.xt, grid)?);
            targets.push(fs.v_target);
        }
        let packs = pack(&seqs, self.config.pack_budget)?;
        let total_entries: usize = targets.iter().map(Matrix::len).sum();

        let mut grads: BTreeMap<ParamId, Matrix> = BTreeMap::new();
        let mut loss = 0.0;
        let mut frozen_grad_max = 0.0f64;
        let mut first = 0;
        let mut tokens = 0;
        for p in &packs {
            let n = p.num_segments();
            let seg_targets: Vec<&Matrix> = targets[first..first + n].iter().collect();
            let target = Matrix::concat_rows(&seg_targets)?;
            let layout = Layout::for_pack(p, &self.model.config.model)?;
            let mut tape = Tape::new(&self.model.store, GradMode::Trainable);
            let x = tape.constant(p.tokens().clone());
            let pred = self.model.forward(&mut tape, x, &layout, &conds[first..first + n], Adapters::On)?;
            let l = tape.masked_mse(pred, target, p.loss_mask())?;
            let lv = tape.value(l).get(0, 0);
            if !lv.is_finite() {
                return Err(LynxError::NonFinite(format!(
                    "loss at step {} ({stage} stage, pack of {} segments)",
                    self.step, n
                )));
            }
            let w = (p.valid_len() * p.dim()) as f64 / total_entries as f64;
            loss += w * lv;
            for (id, g) in tape.backward(l)?.into_params() {
                if !self.model.store.is_trainable(id) {
                    frozen_grad_max = frozen_grad_max.max(g.max_abs());
                    continue;
                }
                let g = g.scale(w);
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(id, g);
                    }
                }
            }
            tokens += p.valid_len();
            first += n;
        }
        let grad_norm = grads.values().map(Matrix::sq_norm).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(LynxError::NonFinite(format!("gradient norm at step {}", self.step)));
        }
        let scale = match self.config.clip_grad_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.optimizer.update(&mut self.model.store, &grads, scale)?;
        let metrics = StepMetrics {
            step: self.step,
            stage,
            loss,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            packs: packs.len(),
            tokens,
            dropped_identities: dropped,
            frozen_grad_max,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs every remaining step of every stage. `on_step` sees each step's
    /// metrics; `on_stage_end` runs once a stage finishes.
    pub fn run(
        &mut self,
        data: &[TrainExample],
        on_step: &mut dyn FnMut(&StepMetrics) -> Result<()>,
        on_stage_end: &mut dyn FnMut(&Trainer, Stage) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(LynxError::invalid("no training examples"));
        }
        let sched = self.config.scheduler()?;
        while self.step < sched.total() {
            let pos = sched.locate(self.step)?;
            let batch = self.select_batch(data);
            let m = self.train_step(&batch, pos.stage)?;
            on_step(&m)?;
            if self.step == sched.plans()[pos.index].end() {
                on_stage_end(self, pos.stage)?;
            }
        }
        Ok(())
    }

    /// Model checkpoint plus a sibling optimizer-state file.
    pub fn save(&self, path: &Path, stage: Stage) -> Result<()> {
        let meta = serde_json::json!({
            "step": self.step,
            "stage": stage,
            "train": self.config,
        });
        self.model.save(path, &meta)?;
        let state = self.optimizer.state_tensors(&self.model.store);
        let refs: Vec<(String, &Matrix)> = state.iter().map(|(n, m)| (n.clone(), m)).collect();
        let opt_meta = serde_json::json!({ "step": self.optimizer.step, "adam": self.optimizer.config });
        write_checkpoint(&optimizer_path(path), &serde_json::to_value(&self.model.config)?, &opt_meta, &refs)
    }

    /// Restores model, optimizer and step counter. The stage recorded in the
    /// checkpoint must not be complete unless a later stage remains.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        let (model, meta) = LynxModel::load(path)?;
        let step = meta
            .get("step")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| LynxError::Checkpoint("checkpoint has no step".into()))? as usize;
        config.scheduler()?.locate(step)?;
        let mut t = Trainer::new(model, config)?;
        t.step = step;
        let opt_path = optimizer_path(path);
        if opt_path.exists() {
            let ck = read_checkpoint(&opt_path)?;
            let ostep = ck.header.meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
            t.optimizer.load_state(&t.model.store, ostep, &ck.tensors)?;
        }
        Ok(t)
    }
}

pub fn optimizer_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".opt");
    path.with_file_name(name)
}

/// Append-only JSON-lines metrics stream.
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::json!({
            "step": m.step,
            "stage": m.stage,
            "loss": m.loss,
            "grad_norm": m.grad_norm,
            "wall_ms": m.wall_ms,
        });
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}
