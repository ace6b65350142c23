//! Identity adapter: a Perceiver Resampler maps a face embedding to a
//! fixed-length token sequence, shared register tokens are appended, and each
//! block cross-attends to the result through a zero-gated residual.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnPattern, GradMode, Tape, Var};
use crate::error::{LynxError, Result};
use crate::layers::{AttentionIds, GatedCrossAttn, Init, LinearIds, MlpIds};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{l2_norm, Matrix};

pub const NORM_TOLERANCE: f64 = 1e-6;

/// An L2-normalized face-recognition feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FaceEmbedding(Vec<f64>);

impl FaceEmbedding {
    /// Rejects non-finite or non-unit vectors.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(LynxError::invalid("empty face embedding"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LynxError::NonFinite("face embedding".into()));
        }
        let n = l2_norm(&v);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(LynxError::invalid(format!("face embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    /// Scales `v` to unit length.
    pub fn normalized(mut v: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(LynxError::invalid("cannot normalize a zero or non-finite vector"));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Self::new(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &FaceEmbedding) -> f64 {
        crate::tensor::cosine(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for FaceEmbedding {
    type Error = LynxError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FaceEmbedding> for Vec<f64> {
    fn from(f: FaceEmbedding) -> Self {
        f.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdAdapterConfig {
    pub face_dim: usize,
    pub n_id: usize,
    pub n_reg: usize,
    pub depth: usize,
    pub heads: usize,
    /// Tokens the face vector is projected into before resampling.
    pub face_tokens: usize,
}

impl Default for IdAdapterConfig {
    fn default() -> Self {
        Self {
            face_dim: 64,
            n_id: 16,
            n_reg: 16,
            depth: 2,
            heads: 4,
            face_tokens: 4,
        }
    }
}

impl IdAdapterConfig {
    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        for (f, v) in [
            ("face_dim", self.face_dim),
            ("n_id", self.n_id),
            ("depth", self.depth),
            ("heads", self.heads),
            ("face_tokens", self.face_tokens),
        ] {
            if v == 0 {
                return Err(LynxError::config(format!("id_adapter.{f}"), "must be positive"));
            }
        }
        if !hidden_dim.is_multiple_of(self.heads) {
            return Err(LynxError::config(
                "id_adapter.heads",
                format!("{} does not divide hidden_dim {hidden_dim}", self.heads),
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.n_id + self.n_reg
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResamplerLayer {
    pub attn: AttentionIds,
    pub mlp: MlpIds,
}

/// Learned latent queries refined by stacked cross-attention to the
/// projected face feature.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub latents: ParamId,
    pub proj_in: LinearIds,
    pub layers: Vec<ResamplerLayer>,
    pub proj_out: LinearIds,
    pub face_dim: usize,
    pub face_tokens: usize,
    pub dim: usize,
}

impl Resampler {
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &IdAdapterConfig,
        dim: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let latents = store.insert(format!("{name}.latents"), Matrix::randn(cfg.n_id, dim, 1.0, rng), true)?;
        let proj_in = LinearIds::create(store, &format!("{name}.proj_in"), cfg.face_dim, cfg.face_tokens * dim, Init::DEFAULT, true, rng)?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            layers.push(ResamplerLayer {
                attn: AttentionIds::create(store, &format!("{name}.layers.{l}.attn"), dim, dim, cfg.heads, Init::DEFAULT, true, rng)?,
                mlp: MlpIds::create(store, &format!("{name}.layers.{l}.mlp"), dim, 4 * dim, Init::DEFAULT, true, rng)?,
            });
        }
        let proj_out = LinearIds::create(store, &format!("{name}.proj_out"), dim, dim, out_init, true, rng)?;
        Ok(Self {
            latents,
            proj_in,
            layers,
            proj_out,
            face_dim: cfg.face_dim,
            face_tokens: cfg.face_tokens,
            dim,
        })
    }

    /// `n_id × dim` identity tokens for one face vector already on the tape.
    pub fn forward(&self, tape: &mut Tape, face: Var) -> Result<Var> {
        if tape.shape(face) != (1, self.face_dim) {
            return Err(LynxError::dims(format!(
                "face input {:?}, expected (1, {})",
                tape.shape(face),
                self.face_dim
            )));
        }
        let f = self.proj_in.forward(tape, face)?;
        let f = tape.reshape(f, self.face_tokens, self.dim)?;
        let f = tape.layer_norm(f);
        let mut x = tape.param(self.latents);
        let n = tape.shape(x).0;
        for layer in &self.layers {
            let q = tape.layer_norm(x);
            let kv = tape.concat_rows(&[f, q])?;
            let pattern = Arc::new(AttnPattern::full(n, self.face_tokens + n));
            let a = layer.attn.forward(tape, q, kv, pattern, None)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x);
            let m = layer.mlp.forward(tape, h)?;
            x = tape.add(x, m)?;
        }
        let h = tape.layer_norm(x);
        self.proj_out.forward(tape, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.latents];
        v.extend(self.proj_in.ids());
        for l in &self.layers {
            v.extend(l.attn.ids());
            v.extend(l.mlp.ids());
        }
        v.extend(self.proj_out.ids());
        v
    }
}

/// Resampler output followed by the shared registers.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTokens {
    pub id_tokens: Matrix,
    pub registers: Matrix,
}

impl IdentityTokens {
    pub fn len(&self) -> usize {
        self.id_tokens.rows() + self.registers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn combined(&self) -> Result<Matrix> {
        with_registers(&self.id_tokens, &self.registers)
    }
}

/// Identity tokens first, registers second.
pub fn with_registers(id_part: &Matrix, registers: &Matrix) -> Result<Matrix> {
    if registers.rows() == 0 {
        return Ok(id_part.clone());
    }
    if id_part.cols() != registers.cols() {
        return Err(LynxError::dims(format!(
            "identity tokens of width {} with registers of width {}",
            id_part.cols(),
            registers.cols()
        )));
    }
    Matrix::concat_rows(&[id_part, registers])
}

/// Full identity path: resampler, registers, null tokens for dropped
/// identities and one gated cross-attention per backbone block.
#[derive(Clone, Debug)]
pub struct IdAdapter {
    pub config: IdAdapterConfig,
    pub resampler: Resampler,
    pub registers: Option<ParamId>,
    pub null_tokens: ParamId,
    pub blocks: Vec<GatedCrossAttn>,
}

impl IdAdapter {
    pub const PREFIX: &'static str = "id_adapter.";

    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: IdAdapterConfig,
        hidden_dim: usize,
        num_blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(hidden_dim)?;
        let resampler = Resampler::create(store, "id_adapter.resampler", &cfg, hidden_dim, Init::DEFAULT, rng)?;
        let registers = if cfg.n_reg > 0 {
            Some(store.insert("id_adapter.registers", Matrix::randn(cfg.n_reg, hidden_dim, 1.0, rng), true)?)
        } else {
            None
        };
        let null_tokens = store.insert("id_adapter.null_tokens", Matrix::randn(cfg.n_id, hidden_dim, 1.0, rng), true)?;
        let blocks = (0..num_blocks)
            .map(|i| GatedCrossAttn::create(store, &format!("id_adapter.blocks.{i}"), hidden_dim, hidden_dim, cfg.heads, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg,
            resampler,
            registers,
            null_tokens,
            blocks,
        })
    }

    /// Token sequence for one sample; `None` selects the null identity.
    pub fn tokens(&self, tape: &mut Tape, face: Option<&FaceEmbedding>) -> Result<Var> {
        let id = match face {
            Some(f) => {
                if f.dim() != self.config.face_dim {
                    return Err(LynxError::dims(format!(
                        "face embedding of dim {} for face_dim {}",
                        f.dim(),
                        self.config.face_dim
                    )));
                }
                let v = tape.constant(Matrix::row_vector(f.as_slice().to_vec()));
                self.resampler.forward(tape, v)?
            }
            None => tape.param(self.null_tokens),
        };
        match self.registers {
            Some(r) => {
                let r = tape.param(r);
                tape.concat_rows(&[id, r])
            }
            None => Ok(id),
        }
    }

    /// Inference-only evaluation of [`IdAdapter::tokens`].
    pub fn identity_tokens(&self, store: &ParamStore, face: &FaceEmbedding) -> Result<IdentityTokens> {
        let mut tape = Tape::new(store, GradMode::None);
        let v = tape.constant(Matrix::row_vector(face.as_slice().to_vec()));
        let id = self.resampler.forward(&mut tape, v)?;
        let registers = match self.registers {
            Some(r) => store.value(r).clone(),
            None => Matrix::zeros(0, self.resampler.dim),
        };
        Ok(IdentityTokens {
            id_tokens: tape.value(id).clone(),
            registers,
        })
    }

    /// One block's injection.
    pub fn inject(&self, tape: &mut Tape, block: usize, x: Var, tokens: Var, pattern: Arc<AttnPattern>) -> Result<Var> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| LynxError::invalid(format!("identity adapter has no block {block}")))?;
        b.forward(tape, x, tokens, pattern)
    }
}

/// Inference-only resampler output for one face.
pub fn resample(store: &ParamStore, resampler: &Resampler, face: &FaceEmbedding) -> Result<Matrix> {
    if face.dim() != resampler.face_dim {
        return Err(LynxError::dims(format!(
            "face embedding of dim {} for face_dim {}",
            face.dim(),
            resampler.face_dim
        )));
    }
    let mut tape = Tape::new(store, GradMode::None);
    let v = tape.constant(Matrix::row_vector(face.as_slice().to_vec()));
    let out = resampler.forward(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

/// Inference-only `visual + gate ⊙ CrossAttn(visual, tokens)`.
pub fn id_inject(store: &ParamStore, block: &GatedCrossAttn, visual: &Matrix, tokens: &Matrix) -> Result<Matrix> {
    if visual.cols() != tokens.cols() {
        return Err(LynxError::dims(format!(
            "visual width {} vs identity token width {}",
            visual.cols(),
            tokens.cols()
        )));
    }
    let mut tape = Tape::new(store, GradMode::None);
    let x = tape.constant(visual.clone());
    let kv = tape.constant(tokens.clone());
    let pattern = Arc::new(AttnPattern::full(visual.rows(), tokens.rows()));
    let out = block.forward(&mut tape, x, kv, pattern)?;
    Ok(tape.value(out).clone())
}
