use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{rotate_rows, RotaryFactors};
use crate::backbone::Grid;
use crate::error::{LynxError, Result};
use crate::tensor::Matrix;

use super::pack::validate_boundaries;

pub const ROPE_BASE: f64 = 10_000.0;

/// Channel widths of the time, height and width bands of one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeBands {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl RopeBands {
    /// Time gets `⌈d/3⌉` rounded up to even; height and width split the rest
    /// equally. When that equal share would be odd, time takes two more
    /// channels so all three bands stay even (`d = 16` gives `(8, 4, 4)`).
    pub fn split(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(LynxError::config("num_heads", format!("head dim {head_dim} must be even and positive")));
        }
        let mut t = head_dim.div_ceil(3);
        t += t % 2;
        if !((head_dim - t) / 2).is_multiple_of(2) {
            t += 2;
        }
        let rest = head_dim.checked_sub(t).filter(|r| *r >= 4 && r % 4 == 0);
        match rest {
            Some(rest) => Self::new(t, rest / 2, rest / 2),
            None => Err(LynxError::config(
                "num_heads",
                format!("head dim {head_dim} cannot be split into three even rotary bands"),
            )),
        }
    }

    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        let b = Self { t, h, w };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.t, self.h, self.w].iter().any(|x| *x == 0 || x % 2 != 0) {
            return Err(LynxError::invalid(format!("rotary bands {self:?} must be positive and even")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.t + self.h + self.w
    }

    fn widths(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    /// Rotation angle of every channel pair for axis coordinates `pos`.
    pub fn angles(&self, pos: (usize, usize, usize), base: f64) -> Vec<f64> {
        let coords = [pos.0 as f64, pos.1 as f64, pos.2 as f64];
        let mut out = Vec::with_capacity(self.head_dim() / 2);
        for (width, c) in self.widths().iter().zip(coords) {
            for p in 0..width / 2 {
                out.push(c * band_frequency(p, *width, base));
            }
        }
        out
    }

    /// Range of pair indices covered by axis `axis` (0 = t, 1 = h, 2 = w).
    pub fn pair_range(&self, axis: usize) -> std::ops::Range<usize> {
        let w = self.widths();
        let start: usize = w[..axis].iter().sum::<usize>() / 2;
        start..start + w[axis] / 2
    }
}

#[inline]
fn band_frequency(pair: usize, width: usize, base: f64) -> f64 {
    base.powf(-(2.0 * pair as f64) / width as f64)
}

/// Per-token rotary factors for a packed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub bands: RopeBands,
    pub base: f64,
    factors: Arc<RotaryFactors>,
}

impl RopeTable {
    pub fn factors(&self) -> Arc<RotaryFactors> {
        Arc::clone(&self.factors)
    }

    pub fn rows(&self) -> usize {
        self.factors.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.bands.head_dim()
    }

    pub fn cos(&self) -> &Matrix {
        &self.factors.cos
    }

    pub fn sin(&self) -> &Matrix {
        &self.factors.sin
    }

    /// Table for explicit per-token coordinates.
    pub fn from_coords(coords: &[(usize, usize, usize)], bands: RopeBands, base: f64) -> Result<Self> {
        bands.validate()?;
        let half = bands.head_dim() / 2;
        let mut cos = Matrix::zeros(coords.len(), half);
        let mut sin = Matrix::zeros(coords.len(), half);
        for (r, pos) in coords.iter().enumerate() {
            for (p, a) in bands.angles(*pos, base).into_iter().enumerate() {
                cos.set(r, p, a.cos());
                sin.set(r, p, a.sin());
            }
        }
        Ok(Self {
            bands,
            base,
            factors: Arc::new(RotaryFactors { cos, sin }),
        })
    }
}

/// 3D rotary table for a packed batch. Token `k` of segment `s` takes its
/// `(t, h, w)` coordinates from row-major decoding against `grids[s]`, so
/// positions restart at the origin in every segment. `extra_rows` appends
/// zero-angle rows (padding).
pub fn rope_3d(
    grids: &[Grid],
    boundaries: &[usize],
    head_dim: usize,
    bands: RopeBands,
    base: f64,
    extra_rows: usize,
) -> Result<RopeTable> {
    validate_boundaries(boundaries)?;
    bands.validate()?;
    if bands.head_dim() != head_dim {
        return Err(LynxError::invalid(format!(
            "rotary bands {:?} sum to {}, head dim is {head_dim}",
            bands,
            bands.head_dim()
        )));
    }
    if grids.len() + 1 != boundaries.len() {
        return Err(LynxError::invalid("one grid per segment required"));
    }
    let mut coords = Vec::with_capacity(*boundaries.last().unwrap() + extra_rows);
    for (s, g) in grids.iter().enumerate() {
        let len = boundaries[s + 1] - boundaries[s];
        if g.len() != len {
            return Err(LynxError::invalid(format!("segment {s}: grid {g:?} vs {len} tokens")));
        }
        coords.extend((0..len).map(|k| g.coords(k)));
    }
    coords.extend(std::iter::repeat_n((0, 0, 0), extra_rows));
    RopeTable::from_coords(&coords, bands, base)
}

/// Rotates every head of `x` (`rows × heads·head_dim`); norm-preserving.
pub fn apply_rope(x: &Matrix, table: &RopeTable) -> Result<Matrix> {
    let hd = table.head_dim();
    if x.rows() != table.rows() || !x.cols().is_multiple_of(hd) {
        return Err(LynxError::dims(format!(
            "activations {:?} against rotary table of {} rows and head dim {hd}",
            x.shape(),
            table.rows()
        )));
    }
    let mut out = x.clone();
    rotate_rows(&mut out, &table.factors, false);
    Ok(out)
}
