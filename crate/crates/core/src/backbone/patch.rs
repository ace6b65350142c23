use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::tensor::Matrix;

/// Patch extent along time, height and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PatchSpec {
    pub const fn new(pt: usize, ph: usize, pw: usize) -> Self {
        Self { pt, ph, pw }
    }

    pub fn volume(&self) -> usize {
        self.pt * self.ph * self.pw
    }

    /// Flattened patch width for `channels` latent channels.
    pub fn patch_dim(&self, channels: usize) -> usize {
        self.volume() * channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.pt == 0 || self.ph == 0 || self.pw == 0 {
            return Err(LynxError::config("patch", "patch extents must be positive"));
        }
        Ok(())
    }

    /// Token grid for a latent of extent `(t, h, w)`.
    pub fn grid_for(&self, t: usize, h: usize, w: usize) -> Result<Grid> {
        if !t.is_multiple_of(self.pt) || !h.is_multiple_of(self.ph) || !w.is_multiple_of(self.pw) {
            return Err(LynxError::dims(format!(
                "patch ({}, {}, {}) does not divide latent extent ({t}, {h}, {w})",
                self.pt, self.ph, self.pw
            )));
        }
        Ok(Grid::new(t / self.pt, h / self.ph, w / self.pw))
    }
}

/// Token-grid extent `(t', h', w')`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major decoding of a flat token index into `(t, h, w)` coordinates.
    pub fn coords(&self, k: usize) -> (usize, usize, usize) {
        let hw = self.h * self.w;
        (k / hw, (k % hw) / self.w, k % self.w)
    }
}

/// Dense latent of shape `(t, h, w, channels)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn new(t: usize, h: usize, w: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(LynxError::dims("latent must have at least one channel"));
        }
        if data.len() != t * h * w * channels {
            return Err(LynxError::dims(format!(
                "{} values for latent ({t}, {h}, {w}, {channels})",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LynxError::NonFinite("latent video".into()));
        }
        Ok(Self { t, h, w, channels, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize, channels: usize) -> Self {
        Self {
            t,
            h,
            w,
            channels,
            data: vec![0.0; t * h * w * channels],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.h + y) * self.w + x) * self.channels + c
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(t, y, x, c)]
    }

    /// Frame `t` as a single-frame latent.
    pub fn frame(&self, t: usize) -> LatentVideo {
        let n = self.h * self.w * self.channels;
        LatentVideo {
            t: 1,
            h: self.h,
            w: self.w,
            channels: self.channels,
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    pub fn mse(&self, other: &LatentVideo) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    pub fn l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_diff(&self, other: &LatentVideo) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Bytes of the little-endian values, for content hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 8);
        for d in [self.t, self.h, self.w, self.channels] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Token sequence with its grid; `data` is `len × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub data: Matrix,
    pub grid: Grid,
}

impl TokenSeq {
    pub fn new(data: Matrix, grid: Grid) -> Result<Self> {
        if grid.len() != data.rows() {
            return Err(LynxError::dims(format!(
                "grid {:?} holds {} tokens but sequence has {}",
                grid,
                grid.len(),
                data.rows()
            )));
        }
        data.ensure_finite("token sequence")?;
        Ok(Self { data, grid })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// A standalone affine map `y = x · W + b` (`W` is `in × out`).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl LinearMap {
    pub fn identity(n: usize) -> Self {
        Self {
            weight: Matrix::identity(n),
            bias: None,
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            if b.shape() != (1, y.cols()) {
                return Err(LynxError::dims("bias width"));
            }
            for r in 0..y.rows() {
                for (o, bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *o += bb;
                }
            }
        }
        Ok(y)
    }
}

/// Flattened patches (`len × pt·ph·pw·c`), row-major over the token grid and
/// `(dt, dy, dx, c)` within a patch.
pub fn extract_patches(x: &LatentVideo, p: PatchSpec) -> Result<(Matrix, Grid)> {
    p.validate()?;
    let grid = p.grid_for(x.t, x.h, x.w)?;
    let pd = p.patch_dim(x.channels);
    let mut out = Matrix::zeros(grid.len(), pd);
    for k in 0..grid.len() {
        let (gt, gy, gx) = grid.coords(k);
        let row = out.row_mut(k);
        let mut i = 0;
        for dt in 0..p.pt {
            for dy in 0..p.ph {
                for dx in 0..p.pw {
                    let base = x.index(gt * p.pt + dt, gy * p.ph + dy, gx * p.pw + dx, 0);
                    row[i..i + x.channels].copy_from_slice(&x.data[base..base + x.channels]);
                    i += x.channels;
                }
            }
        }
    }
    Ok((out, grid))
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches(patches: &Matrix, grid: Grid, p: PatchSpec, channels: usize) -> Result<LatentVideo> {
    if patches.rows() != grid.len() || patches.cols() != p.patch_dim(channels) {
        return Err(LynxError::dims(format!(
            "{:?} patches for grid {:?} with patch dim {}",
            patches.shape(),
            grid,
            p.patch_dim(channels)
        )));
    }
    let mut x = LatentVideo::zeros(grid.t * p.pt, grid.h * p.ph, grid.w * p.pw, channels);
    for k in 0..grid.len() {
        let (gt, gy, gx) = grid.coords(k);
        let row = patches.row(k);
        let mut i = 0;
        for dt in 0..p.pt {
            for dy in 0..p.ph {
                for dx in 0..p.pw {
                    let base = x.index(gt * p.pt + dt, gy * p.ph + dy, gx * p.pw + dx, 0);
                    x.data[base..base + channels].copy_from_slice(&row[i..i + channels]);
                    i += channels;
                }
            }
        }
    }
    Ok(x)
}

/// Splits `x` into patches and projects each to the token width.
pub fn patchify(x: &LatentVideo, p: PatchSpec, proj: &LinearMap) -> Result<TokenSeq> {
    let (patches, grid) = extract_patches(x, p)?;
    if proj.weight.rows() != patches.cols() {
        return Err(LynxError::dims(format!(
            "projection expects {} inputs, patches have {}",
            proj.weight.rows(),
            patches.cols()
        )));
    }
    TokenSeq::new(proj.apply(&patches)?, grid)
}

/// Projects tokens back to patch space and reassembles the latent.
pub fn unpatchify(tokens: &TokenSeq, p: PatchSpec, proj_out: &LinearMap, channels: usize) -> Result<LatentVideo> {
    if tokens.grid.len() != tokens.len() {
        return Err(LynxError::dims("token grid does not match sequence length"));
    }
    if proj_out.weight.cols() != p.patch_dim(channels) {
        return Err(LynxError::dims(format!(
            "output projection produces {} values, patch needs {}",
            proj_out.weight.cols(),
            p.patch_dim(channels)
        )));
    }
    let patches = proj_out.apply(&tokens.data)?;
    assemble_patches(&patches, tokens.grid, p, channels)
}
