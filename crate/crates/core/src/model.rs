//! Backbone plus both adapters, with per-sample conditioning.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnPattern, GradMode, Tape, Var};
use crate::backbone::{Backbone, BackboneInit, BlockHooks, LatentVideo, Layout, ModelConfig, SegmentCond};
use crate::error::{LynxError, Result};
use crate::id_adapter::{FaceEmbedding, IdAdapter, IdAdapterConfig};
use crate::params::ParamStore;
use crate::ref_adapter::{encode_reference, FrozenCopy, RefActivationSet, RefAdapter};
use crate::rope_pack::PackedBatch;
use crate::tensor::Matrix;
use crate::text::HashTextEmbedder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LynxConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub id_adapter: IdAdapterConfig,
    #[serde(default = "default_init")]
    pub backbone_init: BackboneInit,
    /// Caption length cap of the text embedder.
    #[serde(default = "default_text_tokens")]
    pub text_tokens: usize,
    /// Seed of the parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_init() -> BackboneInit {
    BackboneInit::Random { modulation_gain: 0.5 }
}

fn default_text_tokens() -> usize {
    16
}

impl Default for LynxConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            id_adapter: IdAdapterConfig::default(),
            backbone_init: default_init(),
            text_tokens: default_text_tokens(),
            init_seed: 0,
        }
    }
}

impl LynxConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.id_adapter.validate(self.model.hidden_dim)?;
        if self.text_tokens == 0 {
            return Err(LynxError::config("text_tokens", "must be positive"));
        }
        if let BackboneInit::Random { modulation_gain } = self.backbone_init {
            if !modulation_gain.is_finite() || modulation_gain < 0.0 {
                return Err(LynxError::config("backbone_init.modulation_gain", "must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Conditioning of one packed segment.
#[derive(Clone, Debug)]
pub struct SampleCond {
    pub t: f64,
    pub text: Matrix,
    /// `None` selects the learned null identity.
    pub face: Option<FaceEmbedding>,
    /// `None` leaves the segment without reference tokens.
    pub reference: Option<Arc<RefActivationSet>>,
}

/// Whether the adapters take part in a forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adapters {
    Off,
    On,
}

#[derive(Clone, Debug)]
pub struct LynxModel {
    pub config: LynxConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub id_adapter: IdAdapter,
    pub ref_adapter: RefAdapter,
    pub frozen: FrozenCopy,
    pub text: HashTextEmbedder,
}

impl LynxModel {
    /// Fresh model: backbone frozen, adapters trainable with zero gates.
    pub fn new(config: LynxConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let m = &config.model;
        let backbone = Backbone::new(&mut store, m.clone(), config.backbone_init, false, &mut rng)?;
        let id_adapter = IdAdapter::create(&mut store, config.id_adapter.clone(), m.hidden_dim, m.num_blocks, &mut rng)?;
        let ref_adapter = RefAdapter::create(&mut store, m.hidden_dim, m.num_heads, m.num_blocks, &mut rng)?;
        let frozen = FrozenCopy::snapshot(&store, &backbone);
        let text = HashTextEmbedder::new(m.text_dim, config.text_tokens)?;
        Ok(Self {
            config,
            store,
            backbone,
            id_adapter,
            ref_adapter,
            frozen,
            text,
        })
    }

    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        let ids: Vec<_> = self.store.iter().filter(|(_, n, _)| Backbone::owns(n)).map(|(id, _, _)| id).collect();
        for id in ids {
            self.store.set_trainable(id, trainable);
        }
    }

    /// Retakes the frozen reference snapshot from the current backbone.
    pub fn refreeze(&mut self) {
        self.frozen = FrozenCopy::snapshot(&self.store, &self.backbone);
    }

    pub fn backbone_hash(&self) -> String {
        self.store.content_hash(Backbone::owns)
    }

    pub fn encode_reference(&self, latent: &LatentVideo) -> Result<RefActivationSet> {
        encode_reference(latent, &self.frozen, &self.text)
    }

    pub fn embed_text(&self, caption: &str) -> Matrix {
        self.text.embed(caption)
    }

    /// Velocity prediction for the raw patch rows of `patches`.
    pub fn forward(&self, tape: &mut Tape, patches: Var, layout: &Layout, conds: &[SampleCond], adapters: Adapters) -> Result<Var> {
        let seg: Vec<SegmentCond> = conds
            .iter()
            .map(|c| SegmentCond {
                t: c.t,
                text: c.text.clone(),
            })
            .collect();
        match adapters {
            Adapters::Off => self.backbone.forward(tape, patches, layout, &seg, &mut crate::backbone::NoHooks),
            Adapters::On => {
                let mut hooks = self.adapter_hooks(tape, layout, conds)?;
                self.backbone.forward(tape, patches, layout, &seg, &mut hooks)
            }
        }
    }

    fn adapter_hooks(&self, tape: &mut Tape, layout: &Layout, conds: &[SampleCond]) -> Result<AdapterHooks<'_>> {
        let cfg = &self.config.model;
        let mut id_parts = Vec::with_capacity(conds.len());
        let mut id_lens = Vec::with_capacity(conds.len());
        for c in conds {
            let v = self.id_adapter.tokens(tape, c.face.as_ref())?;
            id_lens.push(tape.shape(v).0);
            id_parts.push(v);
        }
        let id_tokens = if id_parts.is_empty() {
            tape.constant(Matrix::zeros(0, cfg.hidden_dim))
        } else {
            tape.concat_rows(&id_parts)?
        };
        let id_pattern = layout.cross_pattern(&id_lens);

        let mut ref_lens = Vec::with_capacity(conds.len());
        for c in conds {
            match &c.reference {
                Some(r) => {
                    r.validate(cfg.num_blocks, cfg.hidden_dim)?;
                    ref_lens.push(r.ref_len());
                }
                None => ref_lens.push(0),
            }
        }
        let mut refs = Vec::with_capacity(cfg.num_blocks);
        for l in 0..cfg.num_blocks {
            let parts: Vec<&Matrix> = conds.iter().filter_map(|c| c.reference.as_ref().map(|r| &r.per_block[l])).collect();
            let m = if parts.is_empty() {
                Matrix::zeros(0, cfg.hidden_dim)
            } else {
                Matrix::concat_rows(&parts)?
            };
            refs.push(tape.constant(m));
        }
        Ok(AdapterHooks {
            model: self,
            id_tokens,
            id_pattern,
            refs,
            ref_pattern: layout.cross_pattern(&ref_lens),
        })
    }

    /// Inference-only prediction over a packed batch of noisy patches.
    pub fn predict(&self, packed: &PackedBatch, conds: &[SampleCond], adapters: Adapters) -> Result<Matrix> {
        let layout = Layout::for_pack(packed, &self.config.model)?;
        let mut tape = Tape::new(&self.store, GradMode::None);
        let x = tape.constant(packed.tokens().clone());
        let out = self.forward(&mut tape, x, &layout, conds, adapters)?;
        Ok(tape.value(out).clone())
    }
}

struct AdapterHooks<'m> {
    model: &'m LynxModel,
    id_tokens: Var,
    id_pattern: Arc<AttnPattern>,
    refs: Vec<Var>,
    ref_pattern: Arc<AttnPattern>,
}

impl BlockHooks for AdapterHooks<'_> {
    fn inject(&mut self, block: usize, tape: &mut Tape, h: Var) -> Result<Var> {
        let h = self
            .model
            .id_adapter
            .inject(tape, block, h, self.id_tokens, Arc::clone(&self.id_pattern))?;
        self.model
            .ref_adapter
            .inject(tape, block, h, self.refs[block], Arc::clone(&self.ref_pattern))
    }
}
