use serde::Serialize;

use crate::backbone::{Grid, TokenSeq};
use crate::error::{LynxError, Result};
use crate::tensor::Matrix;

/// Token sequences of several samples concatenated into one long sequence.
///
/// `boundaries` are the segment offsets `[0, l1, l1 + l2, …, valid_len]`.
/// Rows past `valid_len` (if any) are padding: a null segment that is never
/// attended and never contributes to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    tokens: Matrix,
    boundaries: Vec<usize>,
    grids: Vec<Grid>,
    budget: usize,
}

impl PackedBatch {
    pub fn new(tokens: Matrix, boundaries: Vec<usize>, grids: Vec<Grid>, budget: usize) -> Result<Self> {
        validate_boundaries(&boundaries)?;
        if grids.len() + 1 != boundaries.len() {
            return Err(LynxError::invalid(format!(
                "{} grids for {} segments",
                grids.len(),
                boundaries.len() - 1
            )));
        }
        for (i, g) in grids.iter().enumerate() {
            if g.len() != boundaries[i + 1] - boundaries[i] {
                return Err(LynxError::invalid(format!(
                    "segment {i} spans {} tokens but its grid {:?} holds {}",
                    boundaries[i + 1] - boundaries[i],
                    g,
                    g.len()
                )));
            }
        }
        let valid = *boundaries.last().unwrap_or(&0);
        if tokens.rows() < valid || tokens.rows() > budget.max(valid) {
            return Err(LynxError::invalid(format!(
                "{} token rows for {valid} packed tokens under budget {budget}",
                tokens.rows()
            )));
        }
        if valid > budget {
            return Err(LynxError::invalid(format!("{valid} packed tokens exceed budget {budget}")));
        }
        Ok(Self {
            tokens,
            boundaries,
            grids,
            budget,
        })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Tokens belonging to real segments.
    pub fn valid_len(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }

    pub fn total_rows(&self) -> usize {
        self.tokens.rows()
    }

    pub fn padding(&self) -> usize {
        self.total_rows() - self.valid_len()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn segment_range(&self, s: usize) -> std::ops::Range<usize> {
        self.boundaries[s]..self.boundaries[s + 1]
    }

    /// Segment of every row; `None` for padding rows.
    pub fn segment_ids(&self) -> Vec<Option<usize>> {
        let mut ids = Vec::with_capacity(self.total_rows());
        for s in 0..self.num_segments() {
            ids.extend(std::iter::repeat_n(Some(s), self.boundaries[s + 1] - self.boundaries[s]));
        }
        ids.extend(std::iter::repeat_n(None, self.padding()));
        ids
    }

    /// Rows that take part in the loss.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.segment_ids().iter().map(Option::is_some).collect()
    }

    /// Same segments with token rows replaced (e.g. by model outputs).
    pub fn with_tokens(&self, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != self.total_rows() {
            return Err(LynxError::dims(format!(
                "{} rows for a pack of {}",
                tokens.rows(),
                self.total_rows()
            )));
        }
        Ok(Self {
            tokens,
            boundaries: self.boundaries.clone(),
            grids: self.grids.clone(),
            budget: self.budget,
        })
    }

    /// Appends zero rows up to the budget as a null segment.
    pub fn pad_to_budget(&self) -> Self {
        let pad = self.budget - self.total_rows();
        let tokens = Matrix::concat_rows(&[&self.tokens, &Matrix::zeros(pad, self.dim())]).unwrap();
        Self {
            tokens,
            boundaries: self.boundaries.clone(),
            grids: self.grids.clone(),
            budget: self.budget,
        }
    }

    /// Drops padding rows.
    pub fn strip_padding(&self) -> Self {
        Self {
            tokens: self.tokens.slice_rows(0, self.valid_len()),
            boundaries: self.boundaries.clone(),
            grids: self.grids.clone(),
            budget: self.budget,
        }
    }
}

pub(crate) fn validate_boundaries(b: &[usize]) -> Result<()> {
    if b.first() != Some(&0) {
        return Err(LynxError::invalid("boundaries must start at 0"));
    }
    if b.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LynxError::invalid(format!("boundaries {b:?} are not strictly increasing")));
    }
    Ok(())
}

/// Greedy first-fit in arrival order: a sample joins the open pack when it
/// fits the budget, otherwise it opens a new pack. Samples are never split or
/// reordered.
pub fn pack(samples: &[TokenSeq], budget: usize) -> Result<Vec<PackedBatch>> {
    let mut packs = Vec::new();
    let mut open: Vec<&TokenSeq> = Vec::new();
    let mut used = 0;
    for (i, s) in samples.iter().enumerate() {
        if s.len() > budget {
            return Err(LynxError::invalid(format!(
                "sample {i} has {} tokens, exceeding the pack budget {budget}",
                s.len()
            )));
        }
        if s.is_empty() {
            return Err(LynxError::invalid(format!("sample {i} has no tokens")));
        }
        if used + s.len() > budget && !open.is_empty() {
            packs.push(close(&open, budget)?);
            open.clear();
            used = 0;
        }
        open.push(s);
        used += s.len();
    }
    if !open.is_empty() {
        packs.push(close(&open, budget)?);
    }
    Ok(packs)
}

fn close(members: &[&TokenSeq], budget: usize) -> Result<PackedBatch> {
    let dim = members[0].dim();
    if members.iter().any(|m| m.dim() != dim) {
        return Err(LynxError::dims("samples in one pack must share a token width"));
    }
    let mut boundaries = vec![0];
    for m in members {
        boundaries.push(boundaries.last().unwrap() + m.len());
    }
    let mats: Vec<&Matrix> = members.iter().map(|m| &m.data).collect();
    let grids = members.iter().map(|m| m.grid).collect();
    PackedBatch::new(Matrix::concat_rows(&mats)?, boundaries, grids, budget)
}

/// Splits a pack back into its samples, dropping padding.
pub fn unpack(packed: &PackedBatch) -> Result<Vec<TokenSeq>> {
    validate_boundaries(packed.boundaries())?;
    if packed.valid_len() > packed.total_rows() {
        return Err(LynxError::invalid("boundaries run past the token rows"));
    }
    (0..packed.num_segments())
        .map(|s| {
            let r = packed.segment_range(s);
            TokenSeq::new(packed.tokens().slice_rows(r.start, r.end), packed.grids()[s])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PackSummary {
    pub boundaries: Vec<usize>,
    pub lengths: Vec<usize>,
    pub used: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PackReport {
    pub budget: usize,
    pub num_samples: usize,
    pub packs: Vec<PackSummary>,
    pub total_padding: usize,
    /// Padding as a fraction of all budgeted slots (zero when there are no packs).
    pub waste_fraction: f64,
}

pub fn pack_report(packs: &[PackedBatch], budget: usize) -> PackReport {
    let summaries: Vec<PackSummary> = packs
        .iter()
        .map(|p| {
            let lengths: Vec<usize> = p.boundaries().windows(2).map(|w| w[1] - w[0]).collect();
            PackSummary {
                boundaries: p.boundaries().to_vec(),
                used: p.valid_len(),
                padding: budget - p.valid_len(),
                lengths,
            }
        })
        .collect();
    let total_padding: usize = summaries.iter().map(|s| s.padding).sum();
    let slots = packs.len() * budget;
    PackReport {
        budget,
        num_samples: summaries.iter().map(|s| s.lengths.len()).sum(),
        total_padding,
        waste_fraction: if slots == 0 {
            0.0
        } else {
            total_padding as f64 / slots as f64
        },
        packs: summaries,
    }
}
