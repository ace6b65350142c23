use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Tape};
use crate::backbone::{assemble_patches, extract_patches, LatentVideo, Layout};
use crate::error::{LynxError, Result};
use crate::id_adapter::FaceEmbedding;
use crate::model::{Adapters, LynxModel, SampleCond};
use crate::ref_adapter::RefActivationSet;
use crate::rope_pack::PackedBatch;
use crate::tensor::Matrix;

use super::flow::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Conditional/unconditional mixing scale; `None` runs one pass.
    #[serde(default)]
    pub guidance: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 16,
            guidance: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(LynxError::config("sampler.num_steps", "must be at least 1"));
        }
        if let Some(g) = self.guidance {
            if !g.is_finite() {
                return Err(LynxError::config("sampler.guidance", "must be finite"));
            }
        }
        Ok(())
    }
}

/// A velocity field `v(x, t)` over patch rows.
pub trait VelocityField {
    fn velocity(&mut self, x: &Matrix, t: f64) -> Result<Matrix>;
}

impl<F: FnMut(&Matrix, f64) -> Result<Matrix>> VelocityField for F {
    fn velocity(&mut self, x: &Matrix, t: f64) -> Result<Matrix> {
        self(x, t)
    }
}

/// Euler integration from `t = 1` to `t = 0` in `steps` uniform steps:
/// `x ← x − Δt · v(x, t_k)` with `t_k = (N − k) / N`.
pub fn euler(field: &mut dyn VelocityField, x1: Matrix, steps: usize) -> Result<Matrix> {
    if steps == 0 {
        return Err(LynxError::invalid("sampler needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for k in 0..steps {
        let t = (steps - k) as f64 / steps as f64;
        let v = field.velocity(&x, t)?;
        if v.shape() != x.shape() {
            return Err(LynxError::dims(format!("velocity {:?} for state {:?}", v.shape(), x.shape())));
        }
        x = x.zip_with(&v, |a, b| a - dt * b)?;
        x.ensure_finite(&format!("sampler state after step {}", k + 1))?;
    }
    Ok(x)
}

/// What a generated clip is conditioned on.
#[derive(Clone, Debug)]
pub struct GenerationCond {
    pub text: Matrix,
    pub face: Option<FaceEmbedding>,
    pub reference: Option<Arc<RefActivationSet>>,
}

impl GenerationCond {
    fn at(&self, t: f64) -> SampleCond {
        SampleCond {
            t,
            text: self.text.clone(),
            face: self.face.clone(),
            reference: self.reference.clone(),
        }
    }

    /// Same caption with the null identity and no reference.
    pub fn unconditional(&self) -> Self {
        Self {
            text: self.text.clone(),
            face: None,
            reference: None,
        }
    }
}

/// The model as a velocity field over one segment.
pub struct ModelField<'m> {
    pub model: &'m LynxModel,
    pub layout: Layout,
    pub cond: GenerationCond,
    pub guidance: Option<f64>,
}

impl ModelField<'_> {
    fn eval(&self, x: &Matrix, cond: SampleCond) -> Result<Matrix> {
        let mut tape = Tape::new(&self.model.store, GradMode::None);
        let xv = tape.constant(x.clone());
        let out = self.model.forward(&mut tape, xv, &self.layout, &[cond], Adapters::On)?;
        Ok(tape.value(out).clone())
    }
}

impl VelocityField for ModelField<'_> {
    fn velocity(&mut self, x: &Matrix, t: f64) -> Result<Matrix> {
        let vc = self.eval(x, self.cond.at(t))?;
        match self.guidance {
            None => Ok(vc),
            Some(g) => {
                let vu = self.eval(x, self.cond.unconditional().at(t))?;
                vu.zip_with(&vc, |u, c| u + g * (c - u))
            }
        }
    }
}

/// Draws standard-normal latent noise of shape `(t, h, w)` and integrates the
/// model's velocity field down to `t = 0`.
pub fn sample<R: Rng + ?Sized>(
    model: &LynxModel,
    cond: &GenerationCond,
    shape: (usize, usize, usize),
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<LatentVideo> {
    cfg.validate()?;
    let m = &model.config.model;
    let (t, h, w) = shape;
    let grid = m.patch.grid_for(t, h, w)?;
    let noise = standard_normal(1, t * h * w * m.latent_channels, rng);
    let noise = LatentVideo::new(t, h, w, m.latent_channels, noise.into_vec())?;
    sample_from(model, cond, &noise, cfg).inspect(|x| {
        debug_assert_eq!((x.t, x.h, x.w), (grid.t * m.patch.pt, grid.h * m.patch.ph, grid.w * m.patch.pw));
    })
}

/// Integrates from the given `t = 1` state.
pub fn sample_from(model: &LynxModel, cond: &GenerationCond, noise: &LatentVideo, cfg: &SamplerConfig) -> Result<LatentVideo> {
    cfg.validate()?;
    let m = &model.config.model;
    let (patches, grid) = extract_patches(noise, m.patch)?;
    let n = patches.rows();
    let packed = PackedBatch::new(patches.clone(), vec![0, n], vec![grid], n)?;
    let mut field = ModelField {
        model,
        layout: Layout::for_pack(&packed, m)?,
        cond: cond.clone(),
        guidance: cfg.guidance,
    };
    let x0 = euler(&mut field, patches, cfg.num_steps)?;
    assemble_patches(&x0, grid, m.patch, m.latent_channels)
}
