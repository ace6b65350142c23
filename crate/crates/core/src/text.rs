//! Stable hash-based caption embedder standing in for a text encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{LynxError, Result};
use crate::tensor::Matrix;

/// Maps each lowercase word to a fixed pseudo-random vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HashTextEmbedder {
    dim: usize,
    max_tokens: usize,
}

impl HashTextEmbedder {
    pub fn new(dim: usize, max_tokens: usize) -> Result<Self> {
        if dim == 0 || max_tokens == 0 {
            return Err(LynxError::invalid("text embedder needs positive dim and token cap"));
        }
        Ok(Self { dim, max_tokens })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokenize(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric() && c != '\'')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let s = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    }

    /// `n_words × dim`, truncated to the token cap. Empty text gives zero rows.
    pub fn embed(&self, text: &str) -> Matrix {
        let words = Self::tokenize(text);
        let n = words.len().min(self.max_tokens);
        let mut m = Matrix::zeros(n, self.dim);
        for (r, w) in words.iter().take(n).enumerate() {
            m.row_mut(r).copy_from_slice(&self.token_vector(w));
        }
        m
    }
}
