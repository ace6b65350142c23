//! Central finite-difference verification of parameter gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{GradMode, Tape, Var};
use crate::error::{LynxError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `Σ probe ⊙ build(params)` with central
/// differences of step `eps` for every entry of `ids`. `probe` is a fixed
/// seeded Gaussian so the scalar loss mixes every output entry.
pub fn check_param_grads(
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    floor: f64,
    build: impl Fn(&mut Tape) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new(store, GradMode::All);
    let y = build(&mut tape)?;
    let (r, c) = tape.shape(y);
    let probe = Matrix::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(0x9c));
    let loss = tape.weighted_sum(y, probe.clone())?;
    let grads = tape.backward(loss)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new(s, GradMode::None);
        let y = build(&mut t)?;
        Ok(crate::tensor::dot(t.value(y).data(), probe.data()))
    };
    let mut report = GradCheckReport {
        entries: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work = store.clone();
    for &id in ids {
        let zeros = Matrix::zeros(store.value(id).rows(), store.value(id).cols());
        let analytic = grads.param(id).unwrap_or(&zeros);
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let e = rel_err(analytic.data()[i], numeric, floor);
            if !e.is_finite() {
                return Err(LynxError::NonFinite(format!("gradient check of {}", store.name(id))));
            }
            report.entries += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
