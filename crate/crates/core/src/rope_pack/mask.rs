use crate::autograd::AttnPattern;
use crate::error::{LynxError, Result};

use super::pack::validate_boundaries;

/// Which token pairs may attend to each other.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Row-major `n × n` allow matrix.
    Dense { n: usize, allowed: Vec<bool> },
    /// Block-diagonal over segment ids; `None` rows see nothing.
    Segments(Vec<Option<usize>>),
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        match self {
            AttentionMask::Dense { n, .. } => *n,
            AttentionMask::Segments(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match self {
            AttentionMask::Dense { n, allowed } => allowed[i * n + j],
            AttentionMask::Segments(ids) => matches!((ids[i], ids[j]), (Some(a), Some(b)) if a == b),
        }
    }

    pub fn count_allowed(&self) -> usize {
        let n = self.len();
        (0..n).map(|i| (0..n).filter(|&j| self.allowed(i, j)).count()).sum()
    }

    pub fn to_dense(&self) -> AttentionMask {
        let n = self.len();
        let allowed = (0..n * n).map(|k| self.allowed(k / n.max(1), k % n.max(1))).collect();
        AttentionMask::Dense { n, allowed }
    }

    pub fn to_pattern(&self) -> AttnPattern {
        match self {
            AttentionMask::Segments(ids) => AttnPattern::from_segments(ids, ids),
            AttentionMask::Dense { n, .. } => AttnPattern::from_fn(*n, *n, |i, j| self.allowed(i, j)),
        }
    }
}

/// Block-diagonal mask: tokens attend only within their own segment.
pub fn build_mask(boundaries: &[usize]) -> Result<AttentionMask> {
    validate_boundaries(boundaries)?;
    let mut ids = Vec::with_capacity(*boundaries.last().unwrap());
    for (s, w) in boundaries.windows(2).enumerate() {
        ids.extend(std::iter::repeat_n(Some(s), w[1] - w[0]));
    }
    Ok(AttentionMask::Segments(ids))
}

/// Mask from explicit segment ids with padding rows appended.
pub fn build_padded_mask(boundaries: &[usize], total: usize) -> Result<AttentionMask> {
    let AttentionMask::Segments(mut ids) = build_mask(boundaries)? else {
        unreachable!()
    };
    if total < ids.len() {
        return Err(LynxError::invalid("total rows shorter than the packed tokens"));
    }
    ids.resize(total, None);
    Ok(AttentionMask::Segments(ids))
}
