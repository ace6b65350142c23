//! Reference adapter: a frozen copy of the backbone encodes the reference
//! image at noise level zero, the hidden state after every block's
//! self-attention is tapped, and each generation block cross-attends to its
//! own layer through a zero-gated residual.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{AttnPattern, GradMode, Tape, Var};
use crate::backbone::{extract_patches, Backbone, BlockHooks, Grid, LatentVideo, Layout, SegmentCond};
use crate::error::{LynxError, Result};
use crate::layers::GatedCrossAttn;
use crate::params::ParamStore;
use crate::rope_pack::PackedBatch;
use crate::tensor::Matrix;
use crate::text::HashTextEmbedder;

/// Caption used for every reference pass.
pub const REFERENCE_PROMPT: &str = "image of a face";

/// Read-only snapshot of the backbone weights. Storage is shared with the
/// source store until the source writes a tensor.
#[derive(Clone, Debug)]
pub struct FrozenCopy {
    store: ParamStore,
    backbone: Backbone,
    hash: String,
}

impl FrozenCopy {
    pub fn snapshot(store: &ParamStore, backbone: &Backbone) -> Self {
        let mut store = store.clone();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.set_trainable(id, false);
        }
        let hash = store.content_hash(Backbone::owns);
        Self {
            store,
            backbone: backbone.clone(),
            hash,
        }
    }

    /// Content hash recorded at creation.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Content hash recomputed now.
    pub fn current_hash(&self) -> String {
        self.store.content_hash(Backbone::owns)
    }

    pub fn verify(&self) -> Result<()> {
        if self.current_hash() != self.hash {
            return Err(LynxError::invalid("frozen backbone copy was modified"));
        }
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }
}

/// Per-block reference activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefActivationSet {
    pub per_block: Vec<Matrix>,
    pub ref_grid: Grid,
}

impl RefActivationSet {
    pub fn len(&self) -> usize {
        self.per_block.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_block.is_empty()
    }

    pub fn ref_len(&self) -> usize {
        self.ref_grid.len()
    }

    pub fn validate(&self, num_blocks: usize, dim: usize) -> Result<()> {
        if self.per_block.len() != num_blocks {
            return Err(LynxError::invalid(format!(
                "reference activations for {} blocks, model has {num_blocks}",
                self.per_block.len()
            )));
        }
        for (i, m) in self.per_block.iter().enumerate() {
            if m.shape() != (self.ref_grid.len(), dim) {
                return Err(LynxError::dims(format!(
                    "reference layer {i} is {:?}, expected ({}, {dim})",
                    m.shape(),
                    self.ref_grid.len()
                )));
            }
            m.ensure_finite(&format!("reference layer {i}"))?;
        }
        Ok(())
    }
}

struct Tap(Vec<Matrix>);

impl BlockHooks for Tap {
    fn after_self_attn(&mut self, _block: usize, tape: &mut Tape, h: Var) -> Result<()> {
        self.0.push(tape.value(h).clone());
        Ok(())
    }
}

/// Runs the single-frame reference through the frozen backbone at `t = 0`
/// with the fixed prompt and taps every block after self-attention. No
/// gradient is recorded.
pub fn encode_reference(ref_latent: &LatentVideo, frozen: &FrozenCopy, text: &HashTextEmbedder) -> Result<RefActivationSet> {
    if ref_latent.t != 1 {
        return Err(LynxError::invalid(format!(
            "reference must be a single frame, got {} frames",
            ref_latent.t
        )));
    }
    let bb = frozen.backbone();
    let cfg = &bb.config;
    if ref_latent.channels != cfg.latent_channels {
        return Err(LynxError::dims(format!(
            "reference latent has {} channels, model expects {}",
            ref_latent.channels, cfg.latent_channels
        )));
    }
    let (patches, grid) = extract_patches(ref_latent, cfg.patch)?;
    let n = patches.rows();
    let packed = PackedBatch::new(patches, vec![0, n], vec![grid], n)?;
    let layout = Layout::for_pack(&packed, cfg)?;
    let mut tape = Tape::new(frozen.store(), GradMode::None);
    let cond = SegmentCond {
        t: 0.0,
        text: text.embed(REFERENCE_PROMPT),
    };
    let ctx = bb.context(&mut tape, &layout, std::slice::from_ref(&cond))?;
    let x = tape.constant(packed.tokens().clone());
    let mut x = bb.patch_embed.forward(&mut tape, x)?;
    let mut tap = Tap(Vec::with_capacity(bb.blocks.len()));
    for i in 0..bb.blocks.len() {
        x = bb.block_forward(&mut tape, i, x, &ctx, &mut tap)?;
    }
    let set = RefActivationSet {
        per_block: tap.0,
        ref_grid: grid,
    };
    set.validate(bb.blocks.len(), cfg.hidden_dim)?;
    Ok(set)
}

/// Content-addressed store of reference activations keyed by the latent
/// bytes and the frozen-copy hash, optionally mirrored to disk.
#[derive(Debug, Default)]
pub struct RefCache {
    dir: Option<PathBuf>,
    mem: HashMap<String, Arc<RefActivationSet>>,
    pub hits: usize,
    pub misses: usize,
}

impl RefCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn key(latent: &LatentVideo, frozen_hash: &str) -> String {
        let mut h = Sha256::new();
        h.update(latent.to_le_bytes());
        h.update(frozen_hash.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn len(&self) -> usize {
        self.mem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mem.is_empty()
    }

    pub fn get_or_encode(&mut self, latent: &LatentVideo, frozen: &FrozenCopy, text: &HashTextEmbedder) -> Result<Arc<RefActivationSet>> {
        let key = Self::key(latent, frozen.hash());
        if let Some(s) = self.mem.get(&key) {
            self.hits += 1;
            return Ok(Arc::clone(s));
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            if path.exists() {
                let set: RefActivationSet = serde_json::from_slice(&std::fs::read(&path)?)?;
                let bb = frozen.backbone();
                set.validate(bb.blocks.len(), bb.config.hidden_dim)?;
                let set = Arc::new(set);
                self.mem.insert(key, Arc::clone(&set));
                self.hits += 1;
                return Ok(set);
            }
        }
        self.misses += 1;
        let set = Arc::new(encode_reference(latent, frozen, text)?);
        if let Some(dir) = &self.dir {
            std::fs::write(dir.join(format!("{key}.json")), serde_json::to_vec(&*set)?)?;
        }
        self.mem.insert(key, Arc::clone(&set));
        Ok(set)
    }
}

/// One gated cross-attention per backbone block.
#[derive(Clone, Debug)]
pub struct RefAdapter {
    pub blocks: Vec<GatedCrossAttn>,
}

impl RefAdapter {
    pub const PREFIX: &'static str = "ref_adapter.";

    pub fn create<R: Rng + ?Sized>(store: &mut ParamStore, hidden_dim: usize, heads: usize, num_blocks: usize, rng: &mut R) -> Result<Self> {
        let blocks = (0..num_blocks)
            .map(|i| GatedCrossAttn::create(store, &format!("ref_adapter.blocks.{i}"), hidden_dim, hidden_dim, heads, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn inject(&self, tape: &mut Tape, block: usize, x: Var, reference: Var, pattern: Arc<AttnPattern>) -> Result<Var> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| LynxError::invalid(format!("reference adapter has no block {block}")))?;
        b.forward(tape, x, reference, pattern)
    }
}

/// Inference-only `visual + gate_l ⊙ CrossAttn(visual, ref_l)` for block `l`.
pub fn ref_inject(store: &ParamStore, adapter: &RefAdapter, block: usize, visual: &Matrix, ref_l: &Matrix) -> Result<Matrix> {
    if visual.cols() != ref_l.cols() {
        return Err(LynxError::dims(format!(
            "visual width {} vs reference width {}",
            visual.cols(),
            ref_l.cols()
        )));
    }
    let mut tape = Tape::new(store, GradMode::None);
    let x = tape.constant(visual.clone());
    let kv = tape.constant(ref_l.clone());
    let pattern = Arc::new(AttnPattern::full(visual.rows(), ref_l.rows()));
    let out = adapter.inject(&mut tape, block, x, kv, pattern)?;
    Ok(tape.value(out).clone())
}
