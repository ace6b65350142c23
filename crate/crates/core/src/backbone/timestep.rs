use std::f64::consts::PI;

use crate::error::{LynxError, Result};

/// Ratio between the highest and lowest sinusoid frequency.
pub const TIMESTEP_FREQ_SPAN: f64 = 1000.0;

/// Sinusoidal embedding of a flow time `t ∈ [0, 1]`, before the MLP.
///
/// Layout is `[sin(f_0 t) .. sin(f_{h-1} t), cos(f_0 t) .. cos(f_{h-1} t)]`
/// with `h = dim / 2` and `f_k = π · SPAN^(k / h)`. The lowest frequency is π,
/// so the `(sin, cos)` pair of `f_0` alone separates every `t` in `[0, 1]`.
/// An odd `dim` gets a trailing zero.
pub fn timestep_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(LynxError::invalid(format!("timestep {t} outside [0, 1]")));
    }
    if dim == 0 {
        return Err(LynxError::invalid("timestep embedding width must be positive"));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let f = PI * TIMESTEP_FREQ_SPAN.powf(k as f64 / half as f64);
        out[k] = (f * t).sin();
        out[half + k] = (f * t).cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_is_sin_zero_cos_one() {
        let e = timestep_embed(0.0, 64).unwrap();
        assert!(e[..32].iter().all(|v| *v == 0.0));
        assert!(e[32..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn deterministic() {
        assert_eq!(timestep_embed(0.5, 64).unwrap(), timestep_embed(0.5, 64).unwrap());
    }

    #[test]
    fn endpoint_distance_matches_direct_evaluation() {
        // sqrt(Σ_k sin²(f_k) + (cos f_k − 1)²), evaluated offline for the ladder above.
        let a = timestep_embed(0.0, 64).unwrap();
        let b = timestep_embed(1.0, 64).unwrap();
        let d = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!((d - 8.515391545554213).abs() < 1e-9, "{d}");
        let a = timestep_embed(0.0, 16).unwrap();
        let b = timestep_embed(1.0, 16).unwrap();
        let d = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!((d - 3.97757451092982).abs() < 1e-9, "{d}");
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(timestep_embed(-0.01, 8).is_err());
        assert!(timestep_embed(1.01, 8).is_err());
        assert!(timestep_embed(f64::NAN, 8).is_err());
    }

    #[test]
    fn distinct_times_distinct_embeddings_even_at_width_two() {
        let grid: Vec<Vec<f64>> = (0..=200).map(|i| timestep_embed(i as f64 / 200.0, 2).unwrap()).collect();
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                let d: f64 = grid[i].iter().zip(&grid[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6);
            }
        }
    }
}
