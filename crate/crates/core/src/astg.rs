//! Across spatio-temporal global convolution.
//!
//! Each node owns a bank of damped-cosine kernels `a * exp(-d t) * cos(w t + phi)`.
//! The bank is averaged into one length-`L` kernel per node, the node kernels
//! are mixed through the dynamic adjacency (`Abar * K`), and every node series
//! is convolved causally with its mixed kernel in the frequency domain.
//!
//! A bank may hold several channels: rows are laid out channel-major
//! (`row = c * n + node`) and all channels share the same adjacency.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use realfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fftconv::CausalConv;
use crate::graph::{scaler_backward, sigmoid, softplus, softplus_inv, SpatialGraph, SpectralScaler};
use crate::rng::Rng;

/// `K[t] = a * exp(-d t) * cos(w t + phi)` for `t = 0..len`.
pub fn materialize_kernel(amplitude: f64, decay: f64, frequency: f64, phase: f64, len: usize) -> Result<Vec<f64>> {
    if !(decay >= 0.0) {
        return Err(Error::Constraint(format!("kernel decay must be nonnegative, got {decay}")));
    }
    Ok((0..len)
        .map(|t| {
            let t = t as f64;
            amplitude * (-decay * t).exp() * (frequency * t + phase).cos()
        })
        .collect())
}

/// `(1/z) * sum_i kernels[i]`, elementwise.
pub fn sum_kernels(kernels: &[Vec<f64>], z: f64) -> Result<Vec<f64>> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::InvalidInput("kernel bank is empty".into()))?;
    let mut out = vec![0.0; first.len()];
    for k in kernels {
        if k.len() != out.len() {
            return Err(Error::shape("sum_kernels", out.len(), k.len()));
        }
        for (o, v) in out.iter_mut().zip(k) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= z);
    Ok(out)
}

/// `Abar * K`: mixes node kernels through the dynamic adjacency.
pub fn cross_spatiotemporal_kernel(abar: ArrayView2<f64>, kernels: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = abar.nrows();
    if abar.ncols() != n || kernels.nrows() != n {
        return Err(Error::shape(
            "cross_spatiotemporal_kernel",
            format!("{n}x{n} adjacency and {n} kernel rows"),
            format!("{:?} adjacency and {} kernel rows", abar.dim(), kernels.nrows()),
        ));
    }
    Ok(abar.dot(&kernels))
}

const REANCHOR: usize = 32;

/// Visit `exp(-d t) * (cos(w t + phi), sin(w t + phi))` for `t = 0..len`.
///
/// Uses the complex rotation `c_{t+1} = c_t * exp(-d + i w)`, re-anchored
/// with a direct evaluation every few steps to bound rounding drift.
fn damped_wave(d: f64, w: f64, p: f64, len: usize, mut f: impl FnMut(usize, f64, f64)) {
    let step = Complex64::from_polar((-d).exp(), w);
    let mut c = Complex64::new(0.0, 0.0);
    for t in 0..len {
        if t % REANCHOR == 0 {
            let tf = t as f64;
            c = Complex64::from_polar((-d * tf).exp(), w * tf + p);
        } else {
            c *= step;
        }
        f(t, c.re, c.im);
    }
}

/// Learnable decaying-wave kernels, `rows x n_kernels` of each parameter.
///
/// Decay is stored as a raw value and passed through softplus, so kernels
/// never grow.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalKernelBank {
    pub seq_len: usize,
    pub amplitude: Array2<f64>,
    pub decay_raw: Array2<f64>,
    pub frequency: Array2<f64>,
    pub phase: Array2<f64>,
}

/// Gradients with the same layout as [`TemporalKernelBank`].
#[derive(Debug, Clone, PartialEq)]
pub struct BankGrads {
    pub amplitude: Array2<f64>,
    pub decay_raw: Array2<f64>,
    pub frequency: Array2<f64>,
    pub phase: Array2<f64>,
}

impl TemporalKernelBank {
    /// Random initialization. Decays are log-uniform in `[0.01, 0.5]`,
    /// frequencies uniform in `[0, pi)`, amplitudes `N(0, amp_scale^2)`.
    pub fn init(rows: usize, n_kernels: usize, seq_len: usize, amp_scale: f64, rng: &mut Rng) -> Self {
        let shape = (rows, n_kernels);
        let amplitude = Array2::from_shape_simple_fn(shape, || {
            amp_scale * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let decay_raw = Array2::from_shape_simple_fn(shape, || {
            let ln_d = rng.random_range(0.01f64.ln()..0.5f64.ln());
            softplus_inv(ln_d.exp())
        });
        let frequency = Array2::from_shape_simple_fn(shape, || rng.random_range(0.0..std::f64::consts::PI));
        let phase = Array2::from_shape_simple_fn(shape, || {
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
        });
        TemporalKernelBank {
            seq_len,
            amplitude,
            decay_raw,
            frequency,
            phase,
        }
    }

    /// Bank from explicit decays (must be nonnegative).
    pub fn from_parts(
        seq_len: usize,
        amplitude: Array2<f64>,
        decay: Array2<f64>,
        frequency: Array2<f64>,
        phase: Array2<f64>,
    ) -> Result<Self> {
        let dim = amplitude.dim();
        if decay.dim() != dim || frequency.dim() != dim || phase.dim() != dim {
            return Err(Error::shape("kernel bank", format!("{dim:?}"), "mismatched parameter arrays"));
        }
        if decay.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Constraint("kernel decay must be nonnegative".into()));
        }
        // softplus_inv(0) is -inf; a very negative raw value gives decay ~1e-200
        let decay_raw = decay.mapv(|d| if d == 0.0 { -460.0 } else { softplus_inv(d) });
        Ok(TemporalKernelBank {
            seq_len,
            amplitude,
            decay_raw,
            frequency,
            phase,
        })
    }

    pub fn rows(&self) -> usize {
        self.amplitude.nrows()
    }

    pub fn n_kernels(&self) -> usize {
        self.amplitude.ncols()
    }

    /// Normalizer of the kernel average: the number of kernels per row.
    pub fn normalizer(&self) -> f64 {
        self.n_kernels() as f64
    }

    pub fn decay(&self) -> Array2<f64> {
        self.decay_raw.mapv(softplus)
    }

    /// Averaged kernel of every row, `rows x seq_len`.
    pub fn summed(&self) -> Array2<f64> {
        let (rows, nk) = self.amplitude.dim();
        let len = self.seq_len;
        let z = self.normalizer();
        let mut out = Array2::zeros((rows, len));
        for r in 0..rows {
            let mut row = out.row_mut(r);
            for i in 0..nk {
                let a = self.amplitude[[r, i]];
                let d = softplus(self.decay_raw[[r, i]]);
                let w = self.frequency[[r, i]];
                let p = self.phase[[r, i]];
                damped_wave(d, w, p, len, |t, re, _| row[t] += a * re);
            }
            row.mapv_inplace(|v| v / z);
        }
        out
    }

    /// Chain `d loss / d summed` back to the bank parameters.
    pub fn backward(&self, g_summed: ArrayView2<f64>) -> BankGrads {
        let (rows, nk) = self.amplitude.dim();
        let z = self.normalizer();
        let mut g = BankGrads {
            amplitude: Array2::zeros((rows, nk)),
            decay_raw: Array2::zeros((rows, nk)),
            frequency: Array2::zeros((rows, nk)),
            phase: Array2::zeros((rows, nk)),
        };
        for r in 0..rows {
            let gs = g_summed.row(r);
            for i in 0..nk {
                let a = self.amplitude[[r, i]];
                let raw = self.decay_raw[[r, i]];
                let d = softplus(raw);
                let w = self.frequency[[r, i]];
                let p = self.phase[[r, i]];
                // sums of g*e*cos, g*t*e*cos, g*e*sin, g*t*e*sin
                let (mut sc, mut stc, mut ss, mut sts) = (0.0, 0.0, 0.0, 0.0);
                damped_wave(d, w, p, gs.len(), |t, re, im| {
                    let gt = gs[t];
                    let tf = t as f64;
                    sc += gt * re;
                    stc += gt * tf * re;
                    ss += gt * im;
                    sts += gt * tf * im;
                });
                g.amplitude[[r, i]] = sc / z;
                g.decay_raw[[r, i]] = -a * stc / z * sigmoid(raw);
                g.frequency[[r, i]] = -a * sts / z;
                g.phase[[r, i]] = -a * ss / z;
            }
        }
        g
    }
}

/// Kernels for one parameter setting, shared by every input series that
/// passes through the convolution.
#[derive(Debug, Clone)]
pub struct KernelPlan {
    pub channels: usize,
    pub n_nodes: usize,
    /// Dynamic adjacency `Abar`.
    pub adjacency: Array2<f64>,
    /// Averaged bank kernels, `(channels * n) x L`.
    pub summed: Array2<f64>,
    /// Mixed kernels `Abar * K` per channel, `(channels * n) x L`.
    pub mixed: Array2<f64>,
    mixed_spec: Vec<Complex64>,
    spec_len: usize,
}

/// Gradients of the kernel plan parameters.
#[derive(Debug, Clone)]
pub struct PlanGrads {
    pub bank: BankGrads,
    pub scaler_raw: Array1<f64>,
}

impl KernelPlan {
    pub fn new(
        graph: &SpatialGraph,
        scaler: &SpectralScaler,
        bank: &TemporalKernelBank,
        channels: usize,
        conv: &CausalConv,
    ) -> Result<Self> {
        let n = graph.n_nodes();
        if scaler.len() != n {
            return Err(Error::shape("spectral scaler", n, scaler.len()));
        }
        if bank.rows() != channels * n {
            return Err(Error::shape("kernel bank rows", channels * n, bank.rows()));
        }
        if bank.seq_len != conv.len() {
            return Err(Error::shape("kernel length", conv.len(), bank.seq_len));
        }
        let adjacency = graph.dynamic_adjacency(scaler)?;
        let summed = bank.summed();
        let mut mixed = Array2::zeros(summed.dim());
        for c in 0..channels {
            let block = summed.slice(s![c * n..(c + 1) * n, ..]);
            mixed
                .slice_mut(s![c * n..(c + 1) * n, ..])
                .assign(&cross_spatiotemporal_kernel(adjacency.view(), block)?);
        }
        let spec_len = conv.spectrum_len();
        let mut mixed_spec = vec![Complex64::new(0.0, 0.0); channels * n * spec_len];
        for (row, spec) in mixed.axis_iter(Axis(0)).zip(mixed_spec.chunks_mut(spec_len)) {
            conv.spectrum_into(row.as_slice().unwrap(), spec);
        }
        Ok(KernelPlan {
            channels,
            n_nodes: n,
            adjacency,
            summed,
            mixed,
            mixed_spec,
            spec_len,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.n_nodes
    }

    /// Convolve every row of `x` (`rows x L`) with its mixed kernel. Returns
    /// the output and the input spectra needed by [`KernelPlan::apply_backward`].
    pub fn apply(&self, conv: &CausalConv, x: ArrayView2<f64>) -> (Array2<f64>, Vec<Complex64>) {
        debug_assert_eq!(x.nrows(), self.rows());
        let sl = self.spec_len;
        let mut x_spec = vec![Complex64::new(0.0, 0.0); self.rows() * sl];
        let mut y = Array2::zeros(x.dim());
        let mut buf = vec![0.0; x.ncols()];
        let mut ws = conv.scratch();
        for r in 0..self.rows() {
            buf.iter_mut().zip(x.row(r)).for_each(|(b, v)| *b = *v);
            let xs = &mut x_spec[r * sl..(r + 1) * sl];
            conv.spectrum_with(&buf, xs, &mut ws);
            conv.convolve_spectra_with(&self.mixed_spec[r * sl..(r + 1) * sl], xs, y.row_mut(r).as_slice_mut().unwrap(), &mut ws);
        }
        (y, x_spec)
    }

    /// [`KernelPlan::apply`] without keeping the input spectra.
    pub fn apply_lean(&self, conv: &CausalConv, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros(x.dim());
        let mut buf = vec![0.0; x.ncols()];
        let mut xs = vec![Complex64::new(0.0, 0.0); self.spec_len];
        let mut ws = conv.scratch();
        let sl = self.spec_len;
        for r in 0..self.rows() {
            buf.iter_mut().zip(x.row(r)).for_each(|(b, v)| *b = *v);
            conv.spectrum_with(&buf, &mut xs, &mut ws);
            conv.convolve_spectra_with(&self.mixed_spec[r * sl..(r + 1) * sl], &xs, y.row_mut(r).as_slice_mut().unwrap(), &mut ws);
        }
        y
    }

    /// Adjoint of [`KernelPlan::apply`]: gradients with respect to the input
    /// rows and to the mixed kernels.
    pub fn apply_backward(&self, conv: &CausalConv, x_spec: &[Complex64], gy: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let sl = self.spec_len;
        let mut gx = Array2::zeros(gy.dim());
        let mut gk = Array2::zeros(gy.dim());
        let mut buf = vec![0.0; gy.ncols()];
        let mut gspec = vec![Complex64::new(0.0, 0.0); sl];
        let mut ws = conv.scratch();
        for r in 0..self.rows() {
            buf.iter_mut().zip(gy.row(r)).for_each(|(b, v)| *b = *v);
            conv.spectrum_with(&buf, &mut gspec, &mut ws);
            conv.correlate_spectra_with(&gspec, &self.mixed_spec[r * sl..(r + 1) * sl], gx.row_mut(r).as_slice_mut().unwrap(), &mut ws);
            conv.correlate_spectra_with(&gspec, &x_spec[r * sl..(r + 1) * sl], gk.row_mut(r).as_slice_mut().unwrap(), &mut ws);
        }
        (gx, gk)
    }

    /// Chain the gradient with respect to the mixed kernels back to the bank
    /// and scaler parameters.
    pub fn backward(
        &self,
        graph: &SpatialGraph,
        scaler: &SpectralScaler,
        bank: &TemporalKernelBank,
        g_mixed: ArrayView2<f64>,
    ) -> PlanGrads {
        let n = self.n_nodes;
        let mut g_summed = Array2::zeros(self.summed.dim());
        let mut g_adj = Array2::<f64>::zeros((n, n));
        for c in 0..self.channels {
            let gm = g_mixed.slice(s![c * n..(c + 1) * n, ..]);
            g_summed
                .slice_mut(s![c * n..(c + 1) * n, ..])
                .assign(&self.adjacency.t().dot(&gm));
            g_adj += &gm.dot(&self.summed.slice(s![c * n..(c + 1) * n, ..]).t());
        }
        PlanGrads {
            bank: bank.backward(g_summed.view()),
            scaler_raw: scaler_backward(graph, scaler, g_adj.view()),
        }
    }
}

/// Single-channel convolution of an `n x L` series.
pub fn astgconv_forward(
    graph: &SpatialGraph,
    scaler: &SpectralScaler,
    bank: &TemporalKernelBank,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (n, len) = x.dim();
    if n != graph.n_nodes() {
        return Err(Error::shape("astgconv input nodes", graph.n_nodes(), n));
    }
    let conv = CausalConv::new(len);
    let plan = KernelPlan::new(graph, scaler, bank, 1, &conv)?;
    Ok(plan.apply(&conv, x).0)
}

/// Gradients of `sum(gy * astgconv_forward(x))` with respect to the input
/// and all convolution parameters.
pub fn astgconv_backward(
    graph: &SpatialGraph,
    scaler: &SpectralScaler,
    bank: &TemporalKernelBank,
    x: ArrayView2<f64>,
    gy: ArrayView2<f64>,
) -> Result<(Array2<f64>, PlanGrads)> {
    if gy.dim() != x.dim() {
        return Err(Error::shape("astgconv output gradient", format!("{:?}", x.dim()), format!("{:?}", gy.dim())));
    }
    let conv = CausalConv::new(x.ncols());
    let plan = KernelPlan::new(graph, scaler, bank, 1, &conv)?;
    let (_, x_spec) = plan.apply(&conv, x);
    let (gx, gk) = plan.apply_backward(&conv, &x_spec, gy);
    Ok((gx, plan.backward(graph, scaler, bank, gk.view())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Units;
    use ndarray::array;

    #[test]
    fn kernel_examples() {
        assert_eq!(materialize_kernel(1.0, 0.0, 0.0, 0.0, 4).unwrap(), vec![1.0; 4]);
        let k = materialize_kernel(1.0, std::f64::consts::LN_2, 0.0, 0.0, 3).unwrap();
        for (a, b) in k.iter().zip([1.0, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let k = materialize_kernel(2.0, 0.0, std::f64::consts::PI, 0.0, 4).unwrap();
        for (a, b) in k.iter().zip([2.0, -2.0, 2.0, -2.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(materialize_kernel(1.0, -0.1, 0.0, 0.0, 3).is_err());
    }

    #[test]
    fn sum_examples() {
        assert_eq!(sum_kernels(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2.0).unwrap(), vec![2.0, 3.0]);
        assert_eq!(sum_kernels(&[vec![1.5, -2.0]], 1.0).unwrap(), vec![1.5, -2.0]);
        assert!(sum_kernels(&[], 1.0).is_err());
    }

    #[test]
    fn cross_kernel_examples() {
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        let eye = Array2::eye(2);
        assert_eq!(cross_spatiotemporal_kernel(eye.view(), k.view()).unwrap(), k);
        let ones = Array2::from_elem((2, 2), 1.0);
        let out = cross_spatiotemporal_kernel(ones.view(), k.view()).unwrap();
        assert_eq!(out, array![[1.0, 1.0], [1.0, 1.0]]);
        assert!(cross_spatiotemporal_kernel(Array2::eye(3).view(), k.view()).is_err());
    }

    #[test]
    fn bank_summed_matches_free_functions() {
        let mut rng = crate::rng::seeded(3);
        let bank = TemporalKernelBank::init(2, 5, 7, 1.0, &mut rng);
        let summed = bank.summed();
        let decay = bank.decay();
        for r in 0..2 {
            let ks: Vec<Vec<f64>> = (0..5)
                .map(|i| {
                    materialize_kernel(bank.amplitude[[r, i]], decay[[r, i]], bank.frequency[[r, i]], bank.phase[[r, i]], 7)
                        .unwrap()
                })
                .collect();
            let expect = sum_kernels(&ks, 5.0).unwrap();
            for t in 0..7 {
                assert!((summed[[r, t]] - expect[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_path() {
        // alpha = 1 with coincident nodes far apart gives Abar = I.
        let graph = SpatialGraph::new(vec![[0.0, 0.0], [1000.0, 0.0]], Units::Euclidean, Some(1.0)).unwrap();
        let scaler = SpectralScaler::identity(2);
        let delta_amp = array![[1.0], [1.0]];
        let zeros = Array2::zeros((2, 1));
        let bank = TemporalKernelBank::from_parts(5, delta_amp, Array2::from_elem((2, 1), 50.0), zeros.clone(), zeros).unwrap();
        let x = array![[1.0, 2.0, 3.0, 4.0, 5.0], [-1.0, 0.5, 0.0, 2.0, 1.0]];
        let y = astgconv_forward(&graph, &scaler, &bank, x.view()).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = astgconv_forward(&graph, &scaler, &bank, Array2::zeros((2, 5)).view()).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }
}
