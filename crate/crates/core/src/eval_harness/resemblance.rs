use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::face::FaceEmbedder;
use crate::media::Frame;

pub const DEFAULT_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub score: f64,
    pub used: usize,
    pub no_face: usize,
}

/// Mean cosine between the reference and every `stride`-th frame, skipping
/// frames without a detected face.
pub fn face_resemblance(frames: &[Frame], reference: &Frame, embedder: &dyn FaceEmbedder, stride: usize) -> Result<FrameScore> {
    if frames.is_empty() {
        return Err(LynxError::invalid("no frames to score"));
    }
    if stride == 0 {
        return Err(LynxError::config("frame_stride", "must be at least 1"));
    }
    let r = embedder
        .embed(reference)?
        .ok_or_else(|| LynxError::NoFace(format!("reference image has no face for {}", embedder.id())))?;
    let (mut sum, mut used, mut no_face) = (0.0, 0, 0);
    for f in frames.iter().step_by(stride) {
        match embedder.embed(f)? {
            Some(e) => {
                sum += e.cosine(&r).clamp(-1.0, 1.0);
                used += 1;
            }
            None => no_face += 1,
        }
    }
    if used == 0 {
        return Err(LynxError::NoFace(format!("{no_face} sampled frames, none with a face")));
    }
    Ok(FrameScore {
        score: sum / used as f64,
        used,
        no_face,
    })
}

/// Per-case resemblance under one embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResemblanceReport {
    pub embedder: String,
    pub per_case: BTreeMap<String, FrameScore>,
}

impl ResemblanceReport {
    pub fn new(embedder: impl Into<String>) -> Self {
        Self {
            embedder: embedder.into(),
            per_case: BTreeMap::new(),
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.per_case.is_empty()).then(|| self.per_case.values().map(|s| s.score).sum::<f64>() / self.per_case.len() as f64)
    }
}
