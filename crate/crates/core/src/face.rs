//! Face embedders: a fixed centre crop stands in for detection and a seeded
//! random projection stands in for a recognition network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LynxError, Result};
use crate::id_adapter::FaceEmbedding;
use crate::media::Frame;
use crate::tensor::Matrix;

pub trait FaceEmbedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// `None` when no face is detected.
    fn embed(&self, frame: &Frame) -> Result<Option<FaceEmbedding>>;
}

/// Centre crop, area downsampling to `grid × grid` RGB, per-image
/// standardization, fixed random projection and L2 normalization. A crop
/// whose pixel standard deviation is below `min_std` counts as "no face".
#[derive(Clone, Debug)]
pub struct StubFaceEmbedder {
    name: String,
    pub crop: f64,
    pub grid: usize,
    pub min_std: f64,
    projection: Matrix,
}

impl StubFaceEmbedder {
    pub fn new(name: impl Into<String>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(LynxError::invalid("embedding dim must be positive"));
        }
        let grid = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            name: name.into(),
            crop: 0.75,
            grid,
            min_std: 0.02,
            projection: Matrix::randn(grid * grid * 3, dim, 1.0, &mut rng),
        })
    }

    /// Default embedder feeding the identity adapter.
    pub fn desk(dim: usize) -> Self {
        Self::new("stub-arc", dim, 0xface).expect("positive dim")
    }

    /// Standardized crop features before projection; `None` for a flat crop.
    pub fn features(&self, frame: &Frame) -> Option<Vec<f64>> {
        let side = ((frame.width.min(frame.height) as f64) * self.crop).round().max(1.0) as usize;
        let (x0, y0) = ((frame.width - side) / 2, (frame.height - side) / 2);
        let g = self.grid;
        let mut feat = vec![0.0; g * g * 3];
        let mut counts = vec![0usize; g * g];
        for y in 0..side {
            for x in 0..side {
                let cell = (y * g / side) * g + x * g / side;
                let p = frame.pixel(x0 + x, y0 + y);
                for k in 0..3 {
                    feat[cell * 3 + k] += p[k];
                }
                counts[cell] += 1;
            }
        }
        for (cell, n) in counts.iter().enumerate() {
            for k in 0..3 {
                feat[cell * 3 + k] /= (*n).max(1) as f64;
            }
        }
        let mean = feat.iter().sum::<f64>() / feat.len() as f64;
        let std = (feat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / feat.len() as f64).sqrt();
        if std < self.min_std {
            return None;
        }
        Some(feat.iter().map(|v| (v - mean) / std).collect())
    }
}

impl FaceEmbedder for StubFaceEmbedder {
    fn id(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.projection.cols()
    }

    fn embed(&self, frame: &Frame) -> Result<Option<FaceEmbedding>> {
        let Some(feat) = self.features(frame) else {
            return Ok(None);
        };
        let v = Matrix::row_vector(feat).matmul(&self.projection)?;
        FaceEmbedding::normalized(v.into_vec()).map(Some)
    }
}

/// Three independent stubs for the evaluation protocol.
pub fn embedder_registry(dim: usize) -> Vec<StubFaceEmbedder> {
    [("stub-a", 11), ("stub-b", 23), ("stub-c", 37)]
        .into_iter()
        .map(|(n, s)| StubFaceEmbedder::new(n, dim, s).expect("positive dim"))
        .collect()
}
