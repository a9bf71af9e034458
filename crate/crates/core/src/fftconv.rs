//! Causal linear convolution through the convolution theorem.
//!
//! Both operands are zero-padded to a power of two `>= 2L - 1`, so the
//! circular product of spectra equals the linear convolution on the first
//! `L` outputs and nothing wraps from the future into the past.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};

/// Work buffers for one thread of [`CausalConv`] calls.
pub struct ConvScratch {
    real: Vec<f64>,
    spec: Vec<Complex64>,
    fwd: Vec<Complex64>,
    inv: Vec<Complex64>,
}

/// Planned real FFT pair for sequences of one fixed length.
#[derive(Clone)]
pub struct CausalConv {
    len: usize,
    nfft: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for CausalConv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CausalConv")
            .field("len", &self.len)
            .field("nfft", &self.nfft)
            .finish()
    }
}

impl CausalConv {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "sequence length must be positive");
        let nfft = (2 * len - 1).next_power_of_two().max(2);
        let mut planner = RealFftPlanner::<f64>::new();
        CausalConv {
            len,
            nfft,
            r2c: planner.plan_fft_forward(nfft),
            c2r: planner.plan_fft_inverse(nfft),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fft_len(&self) -> usize {
        self.nfft
    }

    pub fn spectrum_len(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Reusable buffers for the `*_with` methods.
    pub fn scratch(&self) -> ConvScratch {
        let zero = Complex64::new(0.0, 0.0);
        ConvScratch {
            real: vec![0.0; self.nfft],
            spec: vec![zero; self.spectrum_len()],
            fwd: vec![zero; self.r2c.get_scratch_len()],
            inv: vec![zero; self.c2r.get_scratch_len()],
        }
    }

    /// Spectrum of `x` zero-padded to the transform length.
    pub fn spectrum_into(&self, x: &[f64], out: &mut [Complex64]) {
        self.spectrum_with(x, out, &mut self.scratch());
    }

    pub fn spectrum_with(&self, x: &[f64], out: &mut [Complex64], ws: &mut ConvScratch) {
        debug_assert_eq!(x.len(), self.len);
        ws.real[..self.len].copy_from_slice(x);
        ws.real[self.len..].fill(0.0);
        self.r2c
            .process_with_scratch(&mut ws.real, out, &mut ws.fwd)
            .expect("forward FFT buffer sizes are fixed at planning time");
    }

    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.spectrum_len()];
        self.spectrum_into(x, &mut out);
        out
    }

    /// Inverse transform of `ws.spec`, first `len` samples into `out`.
    fn inverse(&self, out: &mut [f64], ws: &mut ConvScratch) {
        let last = ws.spec.len() - 1;
        ws.spec[0].im = 0.0;
        ws.spec[last].im = 0.0;
        self.c2r
            .process_with_scratch(&mut ws.spec, &mut ws.real, &mut ws.inv)
            .expect("inverse FFT buffer sizes are fixed at planning time");
        let scale = 1.0 / self.nfft as f64;
        for (o, b) in out.iter_mut().zip(&ws.real[..self.len]) {
            *o = b * scale;
        }
    }

    /// `out[t] = sum_{s<=t} a[s] b[t-s]` from the two spectra.
    pub fn convolve_spectra(&self, a: &[Complex64], b: &[Complex64], out: &mut [f64]) {
        self.convolve_spectra_with(a, b, out, &mut self.scratch());
    }

    pub fn convolve_spectra_with(&self, a: &[Complex64], b: &[Complex64], out: &mut [f64], ws: &mut ConvScratch) {
        for ((p, x), y) in ws.spec.iter_mut().zip(a).zip(b) {
            *p = x * y;
        }
        self.inverse(out, ws);
    }

    /// `out[s] = sum_{t>=s} g[t] b[t-s]`, the adjoint of convolution with `b`.
    pub fn correlate_spectra(&self, g: &[Complex64], b: &[Complex64], out: &mut [f64]) {
        self.correlate_spectra_with(g, b, out, &mut self.scratch());
    }

    pub fn correlate_spectra_with(&self, g: &[Complex64], b: &[Complex64], out: &mut [f64], ws: &mut ConvScratch) {
        for ((p, x), y) in ws.spec.iter_mut().zip(g).zip(b) {
            *p = x * y.conj();
        }
        self.inverse(out, ws);
    }

    pub fn convolve(&self, kernel: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        self.convolve_spectra(&self.spectrum(kernel), &self.spectrum(x), &mut out);
        out
    }
}

/// Row-wise causal convolution of `x` with `kernel`, both `n x L`.
pub fn fft_convolve(kernel: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if kernel.dim() != x.dim() {
        return Err(Error::shape("fft_convolve", format!("{:?}", kernel.dim()), format!("{:?}", x.dim())));
    }
    let (n, len) = x.dim();
    if len == 0 {
        return Err(Error::InvalidInput("fft_convolve: empty sequences".into()));
    }
    let conv = CausalConv::new(len);
    let mut out = Array2::zeros((n, len));
    for j in 0..n {
        let k = kernel.row(j).to_vec();
        let xs = x.row(j).to_vec();
        let y = conv.convolve(&k, &xs);
        out.row_mut(j).assign(&ndarray::ArrayView1::from(&y));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn direct(k: &[f64], x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|t| (0..=t).map(|s| k[s] * x[t - s]).sum())
            .collect()
    }

    #[test]
    fn delta_is_identity_and_shift_delays() {
        let x: Vec<f64> = (0..9).map(|i| (i as f64).sin() + 0.5).collect();
        let conv = CausalConv::new(9);
        let mut delta = vec![0.0; 9];
        delta[0] = 1.0;
        let y = conv.convolve(&delta, &x);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
        let mut shift = vec![0.0; 9];
        shift[1] = 1.0;
        let y = conv.convolve(&shift, &x);
        assert!(y[0].abs() < 1e-14);
        for t in 1..9 {
            assert!((y[t] - x[t - 1]).abs() < 1e-14);
        }
    }

    #[test]
    fn length_one() {
        let conv = CausalConv::new(1);
        assert!((conv.convolve(&[3.0], &[-2.0])[0] + 6.0).abs() < 1e-14);
    }

    #[test]
    fn matches_direct_sum() {
        let mut rng = crate::rng::seeded(11);
        let (n, len) = (3, 16);
        let k = Array2::from_shape_fn((n, len), |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((n, len), |_| rng.random_range(-1.0..1.0));
        let y = fft_convolve(k.view(), x.view()).unwrap();
        for j in 0..n {
            let d = direct(&k.row(j).to_vec(), &x.row(j).to_vec());
            for t in 0..len {
                assert!((y[[j, t]] - d[t]).abs() <= 1e-9 * d[t].abs().max(1.0));
            }
        }
    }

    #[test]
    fn correlation_is_adjoint() {
        // <conv(k, x), g> == <x, corr(g, k)>
        let mut rng = crate::rng::seeded(5);
        let len = 13;
        let conv = CausalConv::new(len);
        let k: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv.convolve(&k, &x);
        let mut gx = vec![0.0; len];
        conv.correlate_spectra(&conv.spectrum(&g), &conv.spectrum(&k), &mut gx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = Array2::<f64>::zeros((2, 4));
        let b = Array2::<f64>::zeros((2, 5));
        assert!(fft_convolve(a.view(), b.view()).is_err());
    }
}
