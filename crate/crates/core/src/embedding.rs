//! Sinusoidal embeddings for diffusion steps and time positions.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sinusoidal embedding of `t`: the first half holds `sin(t * f_k)`, the
/// second half `cos(t * f_k)`, with `f_k = 10000^(-k / half)`.
pub fn diffusion_step_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    sinusoidal(t as f64, dim)
}

pub fn sinusoidal(pos: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let (s, c) = (pos * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    Ok(out)
}

/// `len x dim` table of position embeddings `0..len`.
pub fn position_table(len: usize, dim: usize) -> Result<Array2<f64>> {
    let mut table = Array2::zeros((len, dim));
    for l in 0..len {
        let e = sinusoidal(l as f64, dim)?;
        table.row_mut(l).assign(&ndarray::ArrayView1::from(&e));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step() {
        let e = diffusion_step_embedding(0, 8).unwrap();
        assert!(e[..4].iter().all(|v| *v == 0.0));
        assert!(e[4..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = diffusion_step_embedding(1, 16).unwrap();
        assert_eq!(a, diffusion_step_embedding(1, 16).unwrap());
        let b = diffusion_step_embedding(2, 16).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) < 1.0 - 1e-6);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(diffusion_step_embedding(3, 7).is_err());
        assert!(diffusion_step_embedding(3, 0).is_err());
    }
}
