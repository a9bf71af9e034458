//! Conditional mixture residual network that predicts the injected noise.
//!
//! Activations are stored as `(n * L) x C` matrices with row `node * L + t`.
//! Each residual layer runs the spatio-temporal convolution per channel, adds
//! diffusion-step, time-position and node embeddings, applies a
//! `tanh * sigmoid` gate and splits into residual and skip paths. The skip
//! sum feeds a ReLU and a zero-initialized output head.
//!
//! Every primitive has a hand-written adjoint. Parameter-only work (kernel
//! plans, embedding projections) is computed once per parameter setting in a
//! [`ModelPlan`] and differentiated once per batch in [`Denoiser::finish_grads`].

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::astg::{KernelPlan, TemporalKernelBank};
use crate::embedding::{diffusion_step_embedding, position_table};
use crate::error::{Error, Result};
use crate::fftconv::CausalConv;
use crate::graph::{sigmoid, SpatialGraph, SpectralScaler};
use crate::rng::Rng;

const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub channels: usize,
    pub emb_dim: usize,
    pub n_kernels: usize,
    pub seq_len: usize,
    pub n_nodes: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("channels", self.channels),
            ("emb_dim", self.emb_dim),
            ("n_kernels", self.n_kernels),
            ("seq_len", self.seq_len),
            ("n_nodes", self.n_nodes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.emb_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("emb_dim must be even, got {}", self.emb_dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub bank: TemporalKernelBank,
    pub scaler: SpectralScaler,
    pub diff_w: Array2<f64>,
    pub diff_b: Array1<f64>,
    pub side_w: Array2<f64>,
    pub side_b: Array1<f64>,
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
    pub res_w: Array2<f64>,
    pub res_b: Array1<f64>,
    pub skip_w: Array2<f64>,
    pub skip_b: Array1<f64>,
}

/// All learnable tensors of the denoiser. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub in_w: Array2<f64>,
    pub in_b: Array1<f64>,
    pub feat_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub out_w: Array1<f64>,
    pub out_b: Array1<f64>,
}

fn normal(shape: (usize, usize), std: f64, rng: &mut Rng) -> Array2<f64> {
    use rand::Rng as _;
    Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(rand_distr::StandardNormal))
}

impl DenoiserParams {
    /// Random initialization; the output head starts at zero.
    pub fn init(cfg: &DenoiserConfig, graph: &SpatialGraph, rng: &mut Rng) -> Self {
        let (c, e, n) = (cfg.channels, cfg.emb_dim, cfg.n_nodes);
        let row_sum = graph
            .adjacency
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(1.0, f64::max);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                bank: TemporalKernelBank::init(c * n, cfg.n_kernels, cfg.seq_len, 1.0 / row_sum, rng),
                scaler: SpectralScaler::identity(n),
                diff_w: normal((e, c), (1.0 / e as f64).sqrt(), rng),
                diff_b: Array1::zeros(c),
                side_w: normal((e, c), (1.0 / e as f64).sqrt(), rng),
                side_b: Array1::zeros(c),
                gate_w: normal((c, 2 * c), (1.0 / c as f64).sqrt(), rng),
                gate_b: Array1::zeros(2 * c),
                res_w: normal((c, c), (1.0 / c as f64).sqrt(), rng),
                res_b: Array1::zeros(c),
                skip_w: normal((c, c), (1.0 / c as f64).sqrt(), rng),
                skip_b: Array1::zeros(c),
            })
            .collect();
        DenoiserParams {
            in_w: normal((INPUT_CHANNELS, c), (1.0 / INPUT_CHANNELS as f64).sqrt(), rng),
            in_b: Array1::zeros(c),
            feat_emb: normal((n, e), 1.0, rng),
            layers,
            out_w: Array1::zeros(c),
            out_b: Array1::zeros(1),
        }
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visit every tensor as a flat slice in the canonical order:
    /// `in_w, in_b, feat_emb`, then for each layer `bank.amplitude,
    /// bank.decay_raw, bank.frequency, bank.phase, scaler.raw, diff_w, diff_b,
    /// side_w, side_b, gate_w, gate_b, res_w, res_b, skip_w, skip_b`, then
    /// `out_w, out_b`. Matrices are row-major.
    pub fn for_each(&self, mut f: impl FnMut(&str, &[f64])) {
        f("in_w", self.in_w.as_slice().unwrap());
        f("in_b", self.in_b.as_slice().unwrap());
        f("feat_emb", self.feat_emb.as_slice().unwrap());
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.tensors() {
                f(&format!("layer{i}.{name}"), t);
            }
        }
        f("out_w", self.out_w.as_slice().unwrap());
        f("out_b", self.out_b.as_slice().unwrap());
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        f("in_w", self.in_w.as_slice_mut().unwrap());
        f("in_b", self.in_b.as_slice_mut().unwrap());
        f("feat_emb", self.feat_emb.as_slice_mut().unwrap());
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in l.tensors_mut() {
                f(&format!("layer{i}.{name}"), t);
            }
        }
        f("out_w", self.out_w.as_slice_mut().unwrap());
        f("out_b", self.out_b.as_slice_mut().unwrap());
    }

    /// Names and sizes in canonical order.
    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        self.for_each(|name, t| v.push((name.to_string(), t.len())));
        v
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(|(_, n)| n).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        self.for_each(|_, t| v.extend_from_slice(t));
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.n_params();
        if flat.len() != total {
            return Err(Error::shape("parameter vector", total, flat.len()));
        }
        let mut off = 0;
        self.for_each_mut(|_, t| {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        });
        Ok(())
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &DenoiserParams, scale: f64) {
        let flat = other.to_flat();
        let mut off = 0;
        self.for_each_mut(|_, t| {
            let len = t.len();
            for (a, b) in t.iter_mut().zip(&flat[off..off + len]) {
                *a += scale * b;
            }
            off += len;
        });
    }
}

impl LayerParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("bank.amplitude", self.bank.amplitude.as_slice().unwrap()),
            ("bank.decay_raw", self.bank.decay_raw.as_slice().unwrap()),
            ("bank.frequency", self.bank.frequency.as_slice().unwrap()),
            ("bank.phase", self.bank.phase.as_slice().unwrap()),
            ("scaler.raw", self.scaler.raw.as_slice().unwrap()),
            ("diff_w", self.diff_w.as_slice().unwrap()),
            ("diff_b", self.diff_b.as_slice().unwrap()),
            ("side_w", self.side_w.as_slice().unwrap()),
            ("side_b", self.side_b.as_slice().unwrap()),
            ("gate_w", self.gate_w.as_slice().unwrap()),
            ("gate_b", self.gate_b.as_slice().unwrap()),
            ("res_w", self.res_w.as_slice().unwrap()),
            ("res_b", self.res_b.as_slice().unwrap()),
            ("skip_w", self.skip_w.as_slice().unwrap()),
            ("skip_b", self.skip_b.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("bank.amplitude", self.bank.amplitude.as_slice_mut().unwrap()),
            ("bank.decay_raw", self.bank.decay_raw.as_slice_mut().unwrap()),
            ("bank.frequency", self.bank.frequency.as_slice_mut().unwrap()),
            ("bank.phase", self.bank.phase.as_slice_mut().unwrap()),
            ("scaler.raw", self.scaler.raw.as_slice_mut().unwrap()),
            ("diff_w", self.diff_w.as_slice_mut().unwrap()),
            ("diff_b", self.diff_b.as_slice_mut().unwrap()),
            ("side_w", self.side_w.as_slice_mut().unwrap()),
            ("side_b", self.side_b.as_slice_mut().unwrap()),
            ("gate_w", self.gate_w.as_slice_mut().unwrap()),
            ("gate_b", self.gate_b.as_slice_mut().unwrap()),
            ("res_w", self.res_w.as_slice_mut().unwrap()),
            ("res_b", self.res_b.as_slice_mut().unwrap()),
            ("skip_w", self.skip_w.as_slice_mut().unwrap()),
            ("skip_b", self.skip_b.as_slice_mut().unwrap()),
        ]
    }
}

/// Parameter-dependent quantities shared by all inputs.
#[derive(Debug, Clone)]
pub struct ModelPlan {
    layers: Vec<LayerPlan>,
}

#[derive(Debug, Clone)]
struct LayerPlan {
    kernels: KernelPlan,
    /// `L x C`: time-position embedding through the side projection.
    time_proj: Array2<f64>,
    /// `n x C`: node embedding through the side projection, plus bias.
    node_proj: Array2<f64>,
}

/// Activations kept for the backward pass of one input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Array2<f64>,
    diff_emb: Vec<f64>,
    layers: Vec<LayerCache>,
    skip_sum: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x_spec: Vec<realfft::num_complex::Complex64>,
    h: Array2<f64>,
    tanh: Array2<f64>,
    sig: Array2<f64>,
    act: Array2<f64>,
}

/// Gradient of one input, before the parameter-only parts are chained.
#[derive(Debug, Clone)]
pub struct SampleGrads {
    pub dense: DenoiserParams,
    g_mixed: Vec<Array2<f64>>,
    g_time_proj: Vec<Array2<f64>>,
    g_node_proj: Vec<Array2<f64>>,
}

impl SampleGrads {
    pub fn add(&mut self, other: &SampleGrads) {
        self.dense.add_scaled(&other.dense, 1.0);
        for (a, b) in self.g_mixed.iter_mut().zip(&other.g_mixed) {
            *a += b;
        }
        for (a, b) in self.g_time_proj.iter_mut().zip(&other.g_time_proj) {
            *a += b;
        }
        for (a, b) in self.g_node_proj.iter_mut().zip(&other.g_node_proj) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.dense.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v *= k));
        for a in self
            .g_mixed
            .iter_mut()
            .chain(self.g_time_proj.iter_mut())
            .chain(self.g_node_proj.iter_mut())
        {
            *a *= k;
        }
    }
}

/// Inputs of one window, each `n x L`.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub x_noisy: ArrayView2<'a, f64>,
    pub x_observed: ArrayView2<'a, f64>,
    pub mask: ArrayView2<'a, f64>,
    pub t: usize,
}

pub fn check_binary(mask: ArrayView2<f64>) -> Result<()> {
    if let Some(v) = mask.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidInput(format!("mask entries must be 0 or 1, found {v}")));
    }
    Ok(())
}

/// Stack `[x_noisy, mask * x_observed, mask]` per entry, `(n * L) x 3`.
fn input_features(input: &DenoiserInput) -> Result<Array2<f64>> {
    let dim = input.x_noisy.dim();
    if input.x_observed.dim() != dim || input.mask.dim() != dim {
        return Err(Error::shape(
            "denoiser inputs",
            format!("{dim:?}"),
            format!("{:?} / {:?}", input.x_observed.dim(), input.mask.dim()),
        ));
    }
    check_binary(input.mask)?;
    let (n, len) = dim;
    let mut u = Array2::zeros((n * len, INPUT_CHANNELS));
    for j in 0..n {
        for l in 0..len {
            let m = input.mask[[j, l]];
            let r = j * len + l;
            u[[r, 0]] = input.x_noisy[[j, l]];
            u[[r, 1]] = m * input.x_observed[[j, l]];
            u[[r, 2]] = m;
        }
    }
    Ok(u)
}

fn add_bias(m: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in m.rows_mut() {
        row += b;
    }
}

fn column_sums(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

/// `(n * L) x C` to `(C * n) x L`.
fn to_channel_major(x: &Array2<f64>, n: usize, len: usize) -> Array2<f64> {
    let c = x.ncols();
    x.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c * n, len))
        .expect("contiguous reshape")
}

/// `(C * n) x L` to `(n * L) x C`.
fn to_row_major(x: Array2<f64>, c: usize) -> Array2<f64> {
    let rows = x.len() / c;
    x.into_shape_with_order((c, rows))
        .expect("contiguous reshape")
        .t()
        .as_standard_layout()
        .into_owned()
}

/// Conditioning mixture: project `[x_noisy, mask * x_observed, mask]` to `C`
/// channels. Returns an `n x L x C` tensor.
pub fn condition_mixture(
    x_noisy: ArrayView2<f64>,
    x_observed: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    in_w: &Array2<f64>,
    in_b: &Array1<f64>,
) -> Result<Array3<f64>> {
    let input = DenoiserInput {
        x_noisy,
        x_observed,
        mask,
        t: 0,
    };
    let u = input_features(&input)?;
    let mut x = u.dot(in_w);
    add_bias(&mut x, in_b);
    let (n, len) = x_noisy.dim();
    Ok(x.into_shape_with_order((n, len, in_w.ncols())).expect("contiguous reshape"))
}

/// `tanh` through a single `exp`; absolute error stays at rounding level.
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

#[allow(clippy::too_many_arguments)]
fn residual_forward(
    conv: &CausalConv,
    layer: &LayerParams,
    plan: &LayerPlan,
    x: &Array2<f64>,
    diff_emb: &[f64],
    n: usize,
    len: usize,
    keep: bool,
) -> (Array2<f64>, Array2<f64>, Option<LayerCache>) {
    let c = x.ncols();
    let xc = to_channel_major(x, n, len);
    let (yc, x_spec) = if keep {
        let (y, spec) = plan.kernels.apply(conv, xc.view());
        (y, Some(spec))
    } else {
        (plan.kernels.apply_lean(conv, xc.view()), None)
    };
    let mut h = to_row_major(yc, c);

    let mut dproj = ndarray::ArrayView1::from(diff_emb).dot(&layer.diff_w);
    dproj += &layer.diff_b;
    for j in 0..n {
        let node = plan.node_proj.row(j);
        for l in 0..len {
            let mut row = h.row_mut(j * len + l);
            Zip::from(&mut row)
                .and(&plan.time_proj.row(l))
                .and(&node)
                .and(&dproj)
                .for_each(|v, a, b, d| *v += a + b + d);
        }
    }

    let mut g = h.dot(&layer.gate_w);
    add_bias(&mut g, &layer.gate_b);
    let mut tanh = Array2::zeros((g.nrows(), c));
    let mut sig = Array2::zeros((g.nrows(), c));
    Zip::from(tanh.rows_mut())
        .and(sig.rows_mut())
        .and(g.rows())
        .for_each(|mut th, mut sg, gr| {
            for k in 0..c {
                th[k] = fast_tanh(gr[k]);
                sg[k] = sigmoid(gr[c + k]);
            }
        });
    let act = &tanh * &sig;

    let mut res = act.dot(&layer.res_w);
    add_bias(&mut res, &layer.res_b);
    res += x;
    res *= std::f64::consts::FRAC_1_SQRT_2;
    let mut skip = act.dot(&layer.skip_w);
    add_bias(&mut skip, &layer.skip_b);
    let cache = x_spec.map(|x_spec| LayerCache {
        x_spec,
        h,
        tanh,
        sig,
        act,
    });
    (res, skip, cache)
}

/// The noise predictor together with the graph and fixed embedding tables.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub graph: SpatialGraph,
    pub params: DenoiserParams,
    time_table: Array2<f64>,
    conv: CausalConv,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, graph: SpatialGraph, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if graph.n_nodes() != config.n_nodes {
            return Err(Error::shape("graph nodes", config.n_nodes, graph.n_nodes()));
        }
        let params = DenoiserParams::init(&config, &graph, rng);
        Self::with_params(config, graph, params)
    }

    pub fn with_params(config: DenoiserConfig, graph: SpatialGraph, params: DenoiserParams) -> Result<Self> {
        config.validate()?;
        if graph.n_nodes() != config.n_nodes {
            return Err(Error::shape("graph nodes", config.n_nodes, graph.n_nodes()));
        }
        if params.layers.len() != config.n_layers || params.in_w.ncols() != config.channels {
            return Err(Error::shape("denoiser parameters", "layers/channels from config", "other"));
        }
        Ok(Denoiser {
            time_table: position_table(config.seq_len, config.emb_dim)?,
            conv: CausalConv::new(config.seq_len),
            config,
            graph,
            params,
        })
    }

    /// Shape-only skeleton, used to deserialize parameters.
    pub fn skeleton(config: DenoiserConfig, graph: SpatialGraph) -> Result<Self> {
        let mut rng = crate::rng::seeded(0);
        let mut d = Self::new(config, graph, &mut rng)?;
        d.params = d.params.zeros_like();
        Ok(d)
    }

    pub fn plan(&self) -> Result<ModelPlan> {
        let layers = self
            .params
            .layers
            .iter()
            .map(|layer| {
                let kernels = KernelPlan::new(&self.graph, &layer.scaler, &layer.bank, self.config.channels, &self.conv)?;
                let time_proj = self.time_table.dot(&layer.side_w);
                let mut node_proj = self.params.feat_emb.dot(&layer.side_w);
                add_bias(&mut node_proj, &layer.side_b);
                Ok(LayerPlan {
                    kernels,
                    time_proj,
                    node_proj,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelPlan { layers })
    }

    fn check_input(&self, input: &DenoiserInput) -> Result<()> {
        let want = (self.config.n_nodes, self.config.seq_len);
        if input.x_noisy.dim() != want {
            return Err(Error::shape("denoiser input", format!("{want:?}"), format!("{:?}", input.x_noisy.dim())));
        }
        Ok(())
    }

    /// Predicted noise (`n x L`) and the cache needed for gradients.
    pub fn forward(&self, plan: &ModelPlan, input: &DenoiserInput) -> Result<(Array2<f64>, ForwardCache)> {
        let (eps, cache) = self.run(plan, input, true)?;
        Ok((eps, cache.expect("cache requested")))
    }

    fn run(&self, plan: &ModelPlan, input: &DenoiserInput, keep: bool) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        self.check_input(input)?;
        let (n, len) = (self.config.n_nodes, self.config.seq_len);
        let features = input_features(input)?;
        let diff_emb = diffusion_step_embedding(input.t, self.config.emb_dim)?;

        let mut x = features.dot(&self.params.in_w);
        add_bias(&mut x, &self.params.in_b);
        let mut skip_sum = Array2::<f64>::zeros(x.dim());
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for (layer, lp) in self.params.layers.iter().zip(&plan.layers) {
            let (x_next, skip, cache) = residual_forward(&self.conv, layer, lp, &x, &diff_emb, n, len, keep);
            skip_sum += &skip;
            layers.extend(cache);
            x = x_next;
        }
        skip_sum /= (self.config.n_layers as f64).sqrt();
        let relu = skip_sum.mapv(|v| v.max(0.0));
        let mut eps = relu.dot(&self.params.out_w);
        eps += self.params.out_b[0];
        let eps = eps.into_shape_with_order((n, len)).expect("contiguous reshape");
        let cache = keep.then_some(ForwardCache {
            features,
            diff_emb,
            layers,
            skip_sum,
        });
        Ok((eps, cache))
    }

    /// Convenience forward without keeping the cache.
    pub fn predict(&self, plan: &ModelPlan, input: &DenoiserInput) -> Result<Array2<f64>> {
        Ok(self.run(plan, input, false)?.0)
    }

    /// Backpropagate `g_eps = d loss / d eps_hat` through one forward pass.
    pub fn backward(&self, plan: &ModelPlan, cache: &ForwardCache, g_eps: ArrayView2<f64>) -> SampleGrads {
        let (n, len, c) = (self.config.n_nodes, self.config.seq_len, self.config.channels);
        let p = &self.params;
        let mut grads = p.zeros_like();
        let g_eps = g_eps
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(n * len)
            .expect("contiguous reshape");

        let relu = cache.skip_sum.mapv(|v| v.max(0.0));
        grads.out_w = relu.t().dot(&g_eps);
        grads.out_b[0] = g_eps.sum();
        let inv_sqrt_layers = 1.0 / (self.config.n_layers as f64).sqrt();
        let mut g_skip = Array2::<f64>::zeros((n * len, c));
        for (r, &ge) in g_eps.iter().enumerate() {
            for k in 0..c {
                if cache.skip_sum[[r, k]] > 0.0 {
                    g_skip[[r, k]] = ge * p.out_w[k] * inv_sqrt_layers;
                }
            }
        }

        let mut g_mixed = vec![Array2::zeros((0, 0)); self.config.n_layers];
        let mut g_time_proj = vec![Array2::zeros((0, 0)); self.config.n_layers];
        let mut g_node_proj = vec![Array2::zeros((0, 0)); self.config.n_layers];
        let mut gx = Array2::<f64>::zeros((n * len, c));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for li in (0..self.config.n_layers).rev() {
            let lp = &p.layers[li];
            let lc = &cache.layers[li];
            let gl = &mut grads.layers[li];
            let g_res = &gx * h;

            let mut g_act = g_skip.dot(&lp.skip_w.t());
            g_act += &g_res.dot(&lp.res_w.t());
            gl.skip_w = lc.act.t().dot(&g_skip);
            gl.skip_b = column_sums(&g_skip);
            gl.res_w = lc.act.t().dot(&g_res);
            gl.res_b = column_sums(&g_res);

            let mut g_gate = Array2::<f64>::zeros((n * len, 2 * c));
            Zip::from(g_gate.slice_mut(s![.., ..c]))
                .and(&g_act)
                .and(&lc.tanh)
                .and(&lc.sig)
                .for_each(|g, &ga, &th, &sg| *g = ga * sg * (1.0 - th * th));
            Zip::from(g_gate.slice_mut(s![.., c..]))
                .and(&g_act)
                .and(&lc.tanh)
                .and(&lc.sig)
                .for_each(|g, &ga, &th, &sg| *g = ga * th * sg * (1.0 - sg));
            gl.gate_w = lc.h.t().dot(&g_gate);
            gl.gate_b = column_sums(&g_gate);
            let g_h = g_gate.dot(&lp.gate_w.t());

            let g_dproj = column_sums(&g_h);
            let emb = ndarray::ArrayView1::from(&cache.diff_emb);
            gl.diff_w = emb
                .to_owned()
                .into_shape_with_order((emb.len(), 1))
                .unwrap()
                .dot(&g_dproj.view().into_shape_with_order((1, c)).unwrap());
            gl.diff_b = g_dproj;
            let g_h3 = g_h.view().into_shape_with_order((n, len, c)).unwrap();
            g_time_proj[li] = g_h3.sum_axis(Axis(0));
            g_node_proj[li] = g_h3.sum_axis(Axis(1));

            let g_yc = to_channel_major(&g_h, n, len);
            let (g_xc, g_k) = plan.layers[li].kernels.apply_backward(&self.conv, &lc.x_spec, g_yc.view());
            g_mixed[li] = g_k;
            gx = g_res + to_row_major(g_xc, c);
        }
        grads.in_w = cache.features.t().dot(&gx);
        grads.in_b = column_sums(&gx);

        SampleGrads {
            dense: grads,
            g_mixed,
            g_time_proj,
            g_node_proj,
        }
    }

    /// Chain the plan-level gradients into parameter gradients.
    pub fn finish_grads(&self, plan: &ModelPlan, sample: SampleGrads) -> DenoiserParams {
        let mut grads = sample.dense;
        for (li, lp) in self.params.layers.iter().enumerate() {
            let pg = plan.layers[li]
                .kernels
                .backward(&self.graph, &lp.scaler, &lp.bank, sample.g_mixed[li].view());
            let gl = &mut grads.layers[li];
            gl.bank.amplitude = pg.bank.amplitude;
            gl.bank.decay_raw = pg.bank.decay_raw;
            gl.bank.frequency = pg.bank.frequency;
            gl.bank.phase = pg.bank.phase;
            gl.scaler.raw = pg.scaler_raw;

            let gt = &sample.g_time_proj[li];
            let gn = &sample.g_node_proj[li];
            gl.side_w = self.time_table.t().dot(gt) + self.params.feat_emb.t().dot(gn);
            gl.side_b = column_sums(gn);
            grads.feat_emb += &gn.dot(&lp.side_w.t());
        }
        grads
    }

    /// Full parameter gradient of `sum(g_eps * eps_hat)` for one input.
    pub fn gradient(&self, input: &DenoiserInput, g_eps: ArrayView2<f64>) -> Result<DenoiserParams> {
        let plan = self.plan()?;
        let (_, cache) = self.forward(&plan, input)?;
        let sample = self.backward(&plan, &cache, g_eps);
        Ok(self.finish_grads(&plan, sample))
    }
}

/// Forward one residual layer on its own: returns `(x_next, skip)` for an
/// `(n * L) x C` input.
pub fn residual_layer(
    model: &Denoiser,
    layer_index: usize,
    x: &Array2<f64>,
    t: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let plan = model.plan()?;
    let diff_emb = diffusion_step_embedding(t, model.config.emb_dim)?;
    let layer = model
        .params
        .layers
        .get(layer_index)
        .ok_or_else(|| Error::InvalidInput(format!("no layer {layer_index}")))?;
    let (x_next, skip, _) = residual_forward(
        &model.conv,
        layer,
        &plan.layers[layer_index],
        x,
        &diff_emb,
        model.config.n_nodes,
        model.config.seq_len,
        false,
    );
    Ok((x_next, skip))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Units;
    use rand::Rng as _;

    fn small(n_layers: usize, seed: u64) -> Denoiser {
        let graph = SpatialGraph::new(vec![[0.0, 0.0], [0.3, 0.1], [0.1, 0.4]], Units::Euclidean, None).unwrap();
        let cfg = DenoiserConfig {
            n_layers,
            channels: 4,
            emb_dim: 4,
            n_kernels: 2,
            seq_len: 8,
            n_nodes: 3,
        };
        let mut rng = crate::rng::seeded(seed);
        let mut d = Denoiser::new(cfg, graph, &mut rng).unwrap();
        // random head so every path carries gradient
        d.params.out_w = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
        d.params.out_b[0] = 0.1;
        d.params.for_each_mut(|name, t| {
            if name.ends_with("_b") || name.ends_with("scaler.raw") {
                t.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        });
        d
    }

    fn inputs(seed: u64) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = crate::rng::seeded(seed);
        let xn = Array2::from_shape_simple_fn((3, 8), || rng.random_range(-1.0..1.0));
        let xo = Array2::from_shape_simple_fn((3, 8), || rng.random_range(-1.0..1.0));
        let m = Array2::from_shape_simple_fn((3, 8), || if rng.random_bool(0.7) { 1.0 } else { 0.0 });
        let w = Array2::from_shape_simple_fn((3, 8), || rng.random_range(-1.0..1.0));
        (xn, xo, m, w)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = small(2, 1);
        let (xn, xo, m, w) = inputs(2);
        let input = DenoiserInput {
            x_noisy: xn.view(),
            x_observed: xo.view(),
            mask: m.view(),
            t: 7,
        };
        let analytic = model.gradient(&input, w.view()).unwrap().to_flat();
        let base = model.params.to_flat();
        let loss = |model: &Denoiser| {
            let plan = model.plan().unwrap();
            (&model.predict(&plan, &input).unwrap() * &w).sum()
        };
        let step = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += step;
            model.params.set_flat(&p).unwrap();
            let up = loss(&model);
            p[i] -= 2.0 * step;
            model.params.set_flat(&p).unwrap();
            let down = loss(&model);
            let fd = (up - down) / (2.0 * step);
            let err = (fd - analytic[i]).abs();
            let tol = (1e-4 * fd.abs().max(analytic[i].abs())).max(1e-6);
            assert!(err <= tol, "param {i}: analytic {} vs fd {fd}", analytic[i]);
            worst = worst.max(err);
        }
        let live = analytic.iter().filter(|g| g.abs() > 1e-3).count();
        assert!(live * 4 > analytic.len() * 3, "only {live} of {} gradients are non-trivial", analytic.len());
        model.params.set_flat(&base).unwrap();
    }

    #[test]
    fn zero_params_make_dead_layer() {
        let mut model = small(1, 3);
        model.params = model.params.zeros_like();
        let mut rng = crate::rng::seeded(4);
        let x = Array2::from_shape_simple_fn((24, 4), || rng.random_range(-1.0..1.0));
        let (next, skip) = residual_layer(&model, 0, &x, 3).unwrap();
        for (a, b) in next.iter().zip(x.iter()) {
            assert!((a - b * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        }
        assert!(skip.iter().all(|v| *v == 0.0));
        assert!(residual_layer(&model, 1, &x, 3).is_err());
    }

    #[test]
    fn fresh_model_predicts_zero_and_is_pure() {
        let graph = SpatialGraph::new(vec![[0.0, 0.0], [0.3, 0.1], [0.1, 0.4]], Units::Euclidean, None).unwrap();
        let cfg = DenoiserConfig {
            n_layers: 2,
            channels: 4,
            emb_dim: 4,
            n_kernels: 2,
            seq_len: 8,
            n_nodes: 3,
        };
        let model = Denoiser::new(cfg, graph, &mut crate::rng::seeded(9)).unwrap();
        let (xn, xo, m, _) = inputs(5);
        let input = DenoiserInput {
            x_noisy: xn.view(),
            x_observed: xo.view(),
            mask: m.view(),
            t: 3,
        };
        let plan = model.plan().unwrap();
        let a = model.predict(&plan, &input).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));
        let small = small(2, 1);
        let plan = small.plan().unwrap();
        assert_eq!(small.predict(&plan, &input).unwrap(), small.predict(&plan, &input).unwrap());
    }

    #[test]
    fn hidden_observations_do_not_matter() {
        let model = small(2, 6);
        let (xn, mut xo, m, _) = inputs(7);
        let plan = model.plan().unwrap();
        let run = |xo: &Array2<f64>| {
            model
                .predict(
                    &plan,
                    &DenoiserInput {
                        x_noisy: xn.view(),
                        x_observed: xo.view(),
                        mask: m.view(),
                        t: 4,
                    },
                )
                .unwrap()
        };
        let before = run(&xo);
        Zip::from(&mut xo).and(&m).for_each(|x, &mk| {
            if mk == 0.0 {
                *x += 100.0;
            }
        });
        assert_eq!(before, run(&xo));
    }

    #[test]
    fn condition_mixture_channels() {
        let (xn, xo, _, _) = inputs(8);
        let zero = Array2::zeros((3, 8));
        // identity-like projection exposes the raw channels
        let mut w = Array2::zeros((3, 3));
        w[[0, 0]] = 1.0;
        w[[1, 1]] = 1.0;
        w[[2, 2]] = 1.0;
        let b = Array1::zeros(3);
        let out = condition_mixture(xn.view(), xo.view(), zero.view(), &w, &b).unwrap();
        assert_eq!(out.dim(), (3, 8, 3));
        assert!(out.slice(s![.., .., 1]).iter().all(|v| *v == 0.0));
        let ones = Array2::from_elem((3, 8), 1.0);
        let out = condition_mixture(xn.view(), xn.view(), ones.view(), &w, &b).unwrap();
        assert_eq!(out.slice(s![.., .., 0]), out.slice(s![.., .., 1]));
        let bad = Array2::from_elem((3, 8), 0.5);
        assert!(condition_mixture(xn.view(), xo.view(), bad.view(), &w, &b).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let model = small(2, 10);
        let mut p = model.params.zeros_like();
        p.set_flat(&model.params.to_flat()).unwrap();
        assert_eq!(p, model.params);
        assert!(p.set_flat(&[1.0]).is_err());
    }
}
