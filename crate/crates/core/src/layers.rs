//! Parameter groups shared by the backbone and both adapters.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{AttnPattern, RotaryFactors, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// How a weight matrix is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// `N(0, gain² / fan_in)`.
    Normal { gain: f64 },
}

impl Init {
    pub const DEFAULT: Init = Init::Normal { gain: 1.0 };

    pub fn sample<R: Rng + ?Sized>(self, rows: usize, cols: usize, rng: &mut R) -> Matrix {
        match self {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Normal { gain } => Matrix::randn(rows, cols, gain / (rows as f64).sqrt(), rng),
        }
    }
}

/// `y = x · W + b`, `W` stored `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    #[allow(clippy::too_many_arguments)]
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), init.sample(fan_in, fan_out, rng), trainable)?;
        let bias = store.insert(format!("{name}.bias"), Matrix::zeros(1, fan_out), trainable)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Multi-head attention projections. Query and key/value sources may differ
/// (cross-attention) and may have different widths.
#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub heads: usize,
}

impl AttentionIds {
    #[allow(clippy::too_many_arguments)]
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        out_init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let q = LinearIds::create(store, &format!("{name}.q"), dim, dim, Init::DEFAULT, trainable, rng)?;
        let k = LinearIds::create(store, &format!("{name}.k"), kv_dim, dim, Init::DEFAULT, trainable, rng)?;
        let v = LinearIds::create(store, &format!("{name}.v"), kv_dim, dim, Init::DEFAULT, trainable, rng)?;
        let o = LinearIds::create(store, &format!("{name}.o"), dim, dim, out_init, trainable, rng)?;
        Ok(Self { q, k, v, o, heads })
    }

    /// `o(softmax(q kᵀ / √d) v)`, with optional rotary factors applied to
    /// queries and keys (self-attention only).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x_q: Var,
        x_kv: Var,
        pattern: Arc<AttnPattern>,
        rope: Option<(Arc<RotaryFactors>, Arc<RotaryFactors>)>,
    ) -> Result<Var> {
        let mut q = self.q.forward(tape, x_q)?;
        let mut k = self.k.forward(tape, x_kv)?;
        let v = self.v.forward(tape, x_kv)?;
        if let Some((rq, rk)) = rope {
            q = tape.rope(q, rq)?;
            k = tape.rope(k, rk)?;
        }
        let a = tape.attention(q, k, v, self.heads, pattern)?;
        self.o.forward(tape, a)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.o].iter().flat_map(|l| l.ids()).collect()
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl MlpIds {
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out_init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fc1 = LinearIds::create(store, &format!("{name}.fc1"), dim, hidden, Init::DEFAULT, trainable, rng)?;
        let fc2 = LinearIds::create(store, &format!("{name}.fc2"), hidden, dim, out_init, trainable, rng)?;
        Ok(Self { fc1, fc2 })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.fc1.ids(), self.fc2.ids()].concat()
    }
}

/// `x + gate ⊙ CrossAttn(LN(x), LN(kv))` with a zero-initialized `1 × dim`
/// gate, the shape of both adapter injections.
#[derive(Clone, Copy, Debug)]
pub struct GatedCrossAttn {
    pub attn: AttentionIds,
    pub gate: ParamId,
}

impl GatedCrossAttn {
    #[allow(clippy::too_many_arguments)]
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = AttentionIds::create(store, &format!("{name}.attn"), dim, kv_dim, heads, Init::DEFAULT, trainable, rng)?;
        let gate = store.insert(format!("{name}.gate"), Matrix::zeros(1, dim), trainable)?;
        Ok(Self { attn, gate })
    }

    /// The gated delta alone.
    pub fn delta(&self, tape: &mut Tape, x: Var, kv: Var, pattern: Arc<AttnPattern>) -> Result<Var> {
        let q = tape.layer_norm(x);
        let kv = tape.layer_norm(kv);
        let a = self.attn.forward(tape, q, kv, pattern, None)?;
        let g = tape.param(self.gate);
        tape.mul_row(a, g)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, kv: Var, pattern: Arc<AttnPattern>) -> Result<Var> {
        let d = self.delta(tape, x, kv, pattern)?;
        tape.add(x, d)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attn.ids();
        v.push(self.gate);
        v
    }
}
