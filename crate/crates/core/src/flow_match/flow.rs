use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::tensor::Matrix;

/// Distribution of training timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeDist {
    Uniform,
    Fixed { t: f64 },
}

impl TimeDist {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeDist::Uniform => rng.random::<f64>(),
            TimeDist::Fixed { t } => t,
        }
    }
}

/// One point on the linear path between data and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Matrix,
    pub noise: Matrix,
    pub t: f64,
    pub xt: Matrix,
    pub v_target: Matrix,
}

impl FlowSample {
    /// `xt = (1 − t)·x0 + t·noise`, `v = noise − x0`.
    pub fn from_parts(x0: Matrix, noise: Matrix, t: f64) -> Result<Self> {
        if x0.shape() != noise.shape() {
            return Err(LynxError::dims(format!("data {:?} vs noise {:?}", x0.shape(), noise.shape())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(LynxError::invalid(format!("timestep {t} outside [0, 1]")));
        }
        x0.ensure_finite("clean latent")?;
        let xt = x0.zip_with(&noise, |a, n| (1.0 - t) * a + t * n)?;
        let v_target = noise.sub(&x0)?;
        Ok(Self {
            x0,
            noise,
            t,
            xt,
            v_target,
        })
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub fn make_flow_sample<R: Rng + ?Sized>(x0: &Matrix, rng: &mut R, t_dist: TimeDist) -> Result<FlowSample> {
    let t = t_dist.draw(rng);
    let noise = standard_normal(x0.rows(), x0.cols(), rng);
    FlowSample::from_parts(x0.clone(), noise, t)
}

/// Mean squared error over rows with `mask[r] == true`.
pub fn fm_loss(pred_v: &Matrix, v_target: &Matrix, mask: &[bool]) -> Result<f64> {
    if pred_v.shape() != v_target.shape() || mask.len() != pred_v.rows() {
        return Err(LynxError::dims(format!(
            "prediction {:?}, target {:?}, mask {}",
            pred_v.shape(),
            v_target.shape(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in (0..pred_v.rows()).filter(|r| mask[*r]) {
        for (a, b) in pred_v.row(r).iter().zip(v_target.row(r)) {
            sum += (a - b) * (a - b);
        }
        n += pred_v.cols();
    }
    if n == 0 {
        return Err(LynxError::invalid("loss mask selects no entries"));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = standard_normal(5, 4, &mut rng);
        let s0 = make_flow_sample(&x0, &mut rng, TimeDist::Fixed { t: 0.0 }).unwrap();
        assert_eq!(s0.xt, x0);
        let s1 = make_flow_sample(&x0, &mut rng, TimeDist::Fixed { t: 1.0 }).unwrap();
        assert_eq!(s1.xt, s1.noise);
        let z = Matrix::zeros(5, 4);
        let h = make_flow_sample(&z, &mut rng, TimeDist::Fixed { t: 0.5 }).unwrap();
        assert_eq!(h.xt, h.noise.scale(0.5));
        assert_eq!(h.v_target, h.noise);
    }

    #[test]
    fn uniform_times_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Matrix::zeros(1, 1);
        for _ in 0..1000 {
            let s = make_flow_sample(&x0, &mut rng, TimeDist::Uniform).unwrap();
            assert!((0.0..=1.0).contains(&s.t));
        }
    }

    #[test]
    fn loss_examples() {
        let t = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(fm_loss(&t, &t, &[true, true]).unwrap(), 0.0);
        let p = t.map(|v| v + 1.0);
        assert_eq!(fm_loss(&p, &t, &[true, true]).unwrap(), 1.0);
        // errors 1,1 on row 0 and 3,3 on row 1: full mean 5, row 1 alone 9.
        let q = Matrix::from_vec(2, 2, vec![2.0, 3.0, 6.0, 7.0]).unwrap();
        assert_eq!(fm_loss(&q, &t, &[true, true]).unwrap(), 5.0);
        assert_eq!(fm_loss(&q, &t, &[false, true]).unwrap(), 9.0);
        assert_eq!(fm_loss(&q, &t, &[true, false]).unwrap(), 1.0);
        assert!(fm_loss(&q, &t, &[false, false]).is_err());
    }
}
