use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnPattern, RotaryFactors, Tape, Var};
use crate::error::{LynxError, Result};
use crate::layers::{AttentionIds, Init, LinearIds, MlpIds};
use crate::params::{ParamId, ParamStore};
use crate::rope_pack::{build_padded_mask, rope_3d, AttentionMask, PackedBatch, RopeBands, ROPE_BASE};
use crate::tensor::Matrix;

use super::patch::PatchSpec;
use super::timestep::timestep_embed;

/// Reference widths of the full-size system, carried for documentation and
/// echoed into checkpoints. None of them drive desk-scale shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScale {
    pub identity_token_dim: usize,
    pub face_dim: usize,
    pub id_tokens: usize,
    pub register_tokens: usize,
}

impl Default for ReferenceScale {
    fn default() -> Self {
        Self {
            identity_token_dim: 5120,
            face_dim: 512,
            id_tokens: 16,
            register_tokens: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub patch: PatchSpec,
    pub text_dim: usize,
    pub latent_channels: usize,
    #[serde(default = "default_freq_dim")]
    pub time_freq_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub reference_scale: ReferenceScale,
}

fn default_freq_dim() -> usize {
    64
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_rope_base() -> f64 {
    ROPE_BASE
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            patch: PatchSpec::new(1, 2, 2),
            text_dim: 32,
            latent_channels: 4,
            time_freq_dim: default_freq_dim(),
            mlp_ratio: default_mlp_ratio(),
            rope_base: ROPE_BASE,
            reference_scale: ReferenceScale::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.patch_dim(self.latent_channels)
    }

    pub fn rope_bands(&self) -> Result<RopeBands> {
        RopeBands::split(self.head_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("text_dim", self.text_dim),
            ("latent_channels", self.latent_channels),
            ("time_freq_dim", self.time_freq_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(LynxError::config(format!("model.{field}"), "must be positive"));
            }
        }
        self.patch.validate()?;
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(LynxError::config(
                "model.num_heads",
                format!("{} does not divide hidden_dim {}", self.num_heads, self.hidden_dim),
            ));
        }
        if !(self.rope_base > 1.0) {
            return Err(LynxError::config("model.rope_base", "must exceed 1"));
        }
        self.rope_bands()?;
        Ok(())
    }
}

/// How backbone weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackboneInit {
    /// adaLN modulation, text cross-attention output and final projection at
    /// zero: every block is the identity and the prediction is zero.
    ZeroGates,
    /// Every weight random, modulation scaled by `modulation_gain`. Stands in
    /// for pretrained weights.
    Random { modulation_gain: f64 },
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub modulation: LinearIds,
    pub self_attn: AttentionIds,
    pub text_attn: AttentionIds,
    pub mlp: MlpIds,
}

impl BlockIds {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.modulation.ids().to_vec();
        v.extend(self.self_attn.ids());
        v.extend(self.text_attn.ids());
        v.extend(self.mlp.ids());
        v
    }
}

/// Per-sample conditioning shared by every block.
#[derive(Clone, Debug)]
pub struct SegmentCond {
    pub t: f64,
    /// Caption token embeddings, `n_words × text_dim` (may have zero rows).
    pub text: Matrix,
}

/// Adapter insertion points inside each block.
pub trait BlockHooks {
    /// Hidden state right after the self-attention residual.
    fn after_self_attn(&mut self, _block: usize, _tape: &mut Tape, _h: Var) -> Result<()> {
        Ok(())
    }

    /// Runs after text cross-attention and before the MLP.
    fn inject(&mut self, _block: usize, _tape: &mut Tape, h: Var) -> Result<Var> {
        Ok(h)
    }
}

pub struct NoHooks;

impl BlockHooks for NoHooks {}

/// Row layout of one forward pass: segment of each row, self-attention
/// pattern and rotary factors.
#[derive(Clone, Debug)]
pub struct Layout {
    pub segment_ids: Vec<Option<usize>>,
    /// Segment index for per-sample gathers; padding rows map to 0.
    pub row_segment: Arc<Vec<usize>>,
    pub self_pattern: Arc<AttnPattern>,
    pub rope: Arc<RotaryFactors>,
    pub num_segments: usize,
}

impl Layout {
    pub fn for_pack(packed: &PackedBatch, cfg: &ModelConfig) -> Result<Self> {
        let mask = build_padded_mask(packed.boundaries(), packed.total_rows())?;
        Self::with_mask(packed, cfg, &mask)
    }

    /// Layout with an explicit self-attention mask.
    pub fn with_mask(packed: &PackedBatch, cfg: &ModelConfig, mask: &AttentionMask) -> Result<Self> {
        if mask.len() != packed.total_rows() {
            return Err(LynxError::dims(format!(
                "mask over {} tokens for a pack of {}",
                mask.len(),
                packed.total_rows()
            )));
        }
        let rope = rope_3d(
            packed.grids(),
            packed.boundaries(),
            cfg.head_dim(),
            cfg.rope_bands()?,
            cfg.rope_base,
            packed.padding(),
        )?;
        let segment_ids = packed.segment_ids();
        Ok(Self {
            row_segment: Arc::new(segment_ids.iter().map(|s| s.unwrap_or(0)).collect()),
            segment_ids,
            self_pattern: Arc::new(mask.to_pattern()),
            rope: rope.factors(),
            num_segments: packed.num_segments(),
        })
    }

    pub fn rows(&self) -> usize {
        self.segment_ids.len()
    }

    /// Cross-attention pattern from these rows to per-segment key blocks with
    /// `kv_lens[s]` rows each (concatenated in segment order).
    pub fn cross_pattern(&self, kv_lens: &[usize]) -> Arc<AttnPattern> {
        let mut kv_seg = Vec::new();
        for (s, n) in kv_lens.iter().enumerate() {
            kv_seg.extend(std::iter::repeat_n(Some(s), *n));
        }
        Arc::new(AttnPattern::from_segments(&self.segment_ids, &kv_seg))
    }
}

/// Quantities shared by all blocks of one forward.
pub struct BlockCtx<'a> {
    pub layout: &'a Layout,
    /// `silu(time embedding)`, one row per segment.
    pub time: Var,
    /// Projected caption tokens, concatenated over segments.
    pub text: Var,
    pub text_pattern: Arc<AttnPattern>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub patch_embed: LinearIds,
    pub text_proj: LinearIds,
    pub time_in: LinearIds,
    pub time_out: LinearIds,
    pub blocks: Vec<BlockIds>,
    pub final_modulation: LinearIds,
    pub final_proj: LinearIds,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ModelConfig,
        init: BackboneInit,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let (mod_init, out_init) = match init {
            BackboneInit::ZeroGates => (Init::Zeros, Init::Zeros),
            BackboneInit::Random { modulation_gain } => (Init::Normal { gain: modulation_gain }, Init::DEFAULT),
        };
        let t = trainable;
        let patch_embed = LinearIds::create(store, "patch_embed", config.patch_dim(), d, Init::DEFAULT, t, rng)?;
        let text_proj = LinearIds::create(store, "text_proj", config.text_dim, d, Init::DEFAULT, t, rng)?;
        let time_in = LinearIds::create(store, "time_mlp.0", config.time_freq_dim, d, Init::DEFAULT, t, rng)?;
        let time_out = LinearIds::create(store, "time_mlp.2", d, d, Init::DEFAULT, t, rng)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let p = format!("blocks.{i}");
            blocks.push(BlockIds {
                modulation: LinearIds::create(store, &format!("{p}.modulation"), d, 6 * d, mod_init, t, rng)?,
                self_attn: AttentionIds::create(store, &format!("{p}.self_attn"), d, d, config.num_heads, Init::DEFAULT, t, rng)?,
                text_attn: AttentionIds::create(store, &format!("{p}.text_attn"), d, d, config.num_heads, out_init, t, rng)?,
                mlp: MlpIds::create(store, &format!("{p}.mlp"), d, config.mlp_ratio * d, Init::DEFAULT, t, rng)?,
            });
        }
        let final_modulation = LinearIds::create(store, "final.modulation", d, 2 * d, mod_init, t, rng)?;
        let final_proj = LinearIds::create(store, "final.proj", d, config.patch_dim(), out_init, t, rng)?;
        Ok(Self {
            config,
            patch_embed,
            text_proj,
            time_in,
            time_out,
            blocks,
            final_modulation,
            final_proj,
        })
    }

    /// Name prefixes of every backbone parameter.
    pub const PREFIXES: [&'static str; 6] = ["patch_embed.", "text_proj.", "time_mlp.", "blocks.", "final.", "final_"];

    pub fn owns(name: &str) -> bool {
        Self::PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// Shared per-forward context: time embedding and projected text.
    pub fn context<'a>(&self, tape: &mut Tape, layout: &'a Layout, conds: &[SegmentCond]) -> Result<BlockCtx<'a>> {
        if conds.len() != layout.num_segments {
            return Err(LynxError::invalid(format!(
                "{} conditioning entries for {} segments",
                conds.len(),
                layout.num_segments
            )));
        }
        let cfg = &self.config;
        let mut sinus = Matrix::zeros(conds.len(), cfg.time_freq_dim);
        for (s, c) in conds.iter().enumerate() {
            sinus.row_mut(s).copy_from_slice(&timestep_embed(c.t, cfg.time_freq_dim)?);
        }
        let sinus = tape.constant(sinus);
        let h = self.time_in.forward(tape, sinus)?;
        let h = tape.silu(h);
        let temb = self.time_out.forward(tape, h)?;
        let time = tape.silu(temb);

        let mut texts = Vec::with_capacity(conds.len());
        for c in conds {
            if c.text.cols() != cfg.text_dim && c.text.rows() > 0 {
                return Err(LynxError::dims(format!(
                    "caption embedding width {} vs text_dim {}",
                    c.text.cols(),
                    cfg.text_dim
                )));
            }
            texts.push(&c.text);
        }
        let lens: Vec<usize> = conds.iter().map(|c| c.text.rows()).collect();
        let all = if lens.iter().sum::<usize>() == 0 {
            Matrix::zeros(0, cfg.text_dim)
        } else {
            let nonempty: Vec<&Matrix> = texts.into_iter().filter(|m| m.rows() > 0).collect();
            Matrix::concat_rows(&nonempty)?
        };
        let all = tape.constant(all);
        let text = self.text_proj.forward(tape, all)?;
        Ok(BlockCtx {
            layout,
            time,
            text,
            text_pattern: layout.cross_pattern(&lens),
        })
    }

    /// One DiT block: adaLN-modulated self-attention with RoPE, text
    /// cross-attention, adapter injection, adaLN-modulated MLP. Every
    /// sublayer is residual.
    pub fn block_forward(&self, tape: &mut Tape, index: usize, x: Var, ctx: &BlockCtx, hooks: &mut dyn BlockHooks) -> Result<Var> {
        let b = self.blocks.get(index).ok_or_else(|| LynxError::invalid(format!("no block {index}")))?;
        let d = self.config.hidden_dim;
        if tape.shape(x) != (ctx.layout.rows(), d) {
            return Err(LynxError::dims(format!(
                "block input {:?}, expected ({}, {d})",
                tape.shape(x),
                ctx.layout.rows()
            )));
        }
        let m = b.modulation.forward(tape, ctx.time)?;
        let m = tape.gather_rows(m, Arc::clone(&ctx.layout.row_segment))?;
        let chunk = |tape: &mut Tape, k: usize| tape.slice_cols(m, k * d, (k + 1) * d);
        let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
        let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

        let h = modulate(tape, x, shift1, scale1)?;
        let rope = Arc::clone(&ctx.layout.rope);
        let a = b.self_attn.forward(
            tape,
            h,
            h,
            Arc::clone(&ctx.layout.self_pattern),
            Some((Arc::clone(&rope), rope)),
        )?;
        let a = tape.mul(gate1, a)?;
        let mut x = tape.add(x, a)?;
        hooks.after_self_attn(index, tape, x)?;

        let h = tape.layer_norm(x);
        let c = b.text_attn.forward(tape, h, ctx.text, Arc::clone(&ctx.text_pattern), None)?;
        x = tape.add(x, c)?;

        x = hooks.inject(index, tape, x)?;

        let h = modulate(tape, x, shift2, scale2)?;
        let f = b.mlp.forward(tape, h)?;
        let f = tape.mul(gate2, f)?;
        let x = tape.add(x, f)?;
        tape.value(x).ensure_finite(&format!("block {index} activations"))?;
        Ok(x)
    }

    /// Patch embedding, all blocks in order, final adaLN and projection back
    /// to patch space. Input rows are raw flattened patches.
    pub fn forward(&self, tape: &mut Tape, patches: Var, layout: &Layout, conds: &[SegmentCond], hooks: &mut dyn BlockHooks) -> Result<Var> {
        if tape.shape(patches) != (layout.rows(), self.config.patch_dim()) {
            return Err(LynxError::dims(format!(
                "input patches {:?}, expected ({}, {})",
                tape.shape(patches),
                layout.rows(),
                self.config.patch_dim()
            )));
        }
        let ctx = self.context(tape, layout, conds)?;
        let mut x = self.patch_embed.forward(tape, patches)?;
        for i in 0..self.blocks.len() {
            x = self.block_forward(tape, i, x, &ctx, hooks)?;
        }
        let d = self.config.hidden_dim;
        let m = self.final_modulation.forward(tape, ctx.time)?;
        let m = tape.gather_rows(m, Arc::clone(&layout.row_segment))?;
        let shift = tape.slice_cols(m, 0, d)?;
        let scale = tape.slice_cols(m, d, 2 * d)?;
        let h = modulate(tape, x, shift, scale)?;
        let out = self.final_proj.forward(tape, h)?;
        tape.value(out).ensure_finite("velocity prediction")?;
        Ok(out)
    }
}

/// `LN(x) · (1 + scale) + shift`.
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x);
    let s = tape.add_scalar(scale, 1.0);
    let h = tape.mul(h, s)?;
    tape.add(h, shift)
}
