//! Synthetic series generation, masking, time splits and normalization.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{SpatialGraph, Units};
use crate::rng;

/// Values over (node, time) with a binary observation mask.
///
/// Missing positions hold 0. `norm_mean` / `norm_std` describe the affine map
/// applied by [`normalize`]; they are `0` / `1` for raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTensor {
    pub values: Array2<f64>,
    pub mask: Array2<f64>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

impl SeriesTensor {
    pub fn new(values: Array2<f64>, mask: Array2<f64>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::shape(
                "series mask",
                format!("{:?}", values.dim()),
                format!("{:?}", mask.dim()),
            ));
        }
        if mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
            return Err(Error::InvalidInput("mask entries must be 0 or 1".into()));
        }
        if values.iter().zip(mask.iter()).any(|(v, m)| *m == 1.0 && !v.is_finite()) {
            return Err(Error::InvalidInput("observed values must be finite".into()));
        }
        let n = values.nrows();
        let mut values = values;
        values.zip_mut_with(&mask, |v, m| {
            if *m == 0.0 {
                *v = 0.0;
            }
        });
        Ok(SeriesTensor {
            values,
            mask,
            norm_mean: vec![0.0; n],
            norm_std: vec![1.0; n],
        })
    }

    pub fn fully_observed(values: Array2<f64>) -> Result<Self> {
        let mask = Array2::ones(values.dim());
        Self::new(values, mask)
    }

    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

/// Node coordinates scattered uniformly in a square of side `size`.
/// Lat/lon boxes start at (30 N, 120 E).
pub fn random_coords(n: usize, size: f64, units: Units, seed: u64) -> Vec<[f64; 2]> {
    let mut r = rng::stream(seed, &[3]);
    let origin = match units {
        Units::Latlon => [30.0, 120.0],
        Units::Euclidean => [0.0, 0.0],
    };
    (0..n)
        .map(|_| [origin[0] + size * r.random::<f64>(), origin[1] + size * r.random::<f64>()])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Fully observed noisy series.
    pub series: SeriesTensor,
    /// Copy of the noisy values kept apart as evaluation target.
    pub truth: Array2<f64>,
    /// Noise-free signal.
    pub clean: Array2<f64>,
    /// Frequency bin of each global wave.
    pub bins: Vec<usize>,
}

/// Sum of `n_waves` global sinusoids at distinct integer frequency bins,
/// mixed per node by `A * u` with Gaussian loadings `u`, plus i.i.d. noise.
pub fn generate_synthetic(graph: &SpatialGraph, len: usize, n_waves: usize, noise_std: f64, seed: u64) -> Result<SyntheticData> {
    if n_waves == 0 {
        return Err(Error::Config("n_waves must be at least 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be finite and nonnegative, got {noise_std}")));
    }
    let max_bin = (len / 8).max(n_waves);
    if len < 2 || max_bin >= len.div_ceil(2) {
        return Err(Error::Config(format!("series length {len} too short for {n_waves} waves")));
    }
    let n = graph.n_nodes();
    let mut r = rng::stream(seed, &[0]);

    let mut bins: Vec<usize> = sample(&mut r, max_bin, n_waves).into_iter().map(|k| k + 1).collect();
    bins.sort_unstable();
    let phases: Vec<f64> = (0..n_waves)
        .map(|_| r.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        .collect();
    let mut loadings = Array2::zeros((n, n_waves));
    rng::fill_normal(&mut r, loadings.as_slice_mut().expect("standard layout"));
    let mix = graph.adjacency.dot(&loadings);
    let row_scale = graph.adjacency.sum_axis(Axis(1)).mapv(|s| 1.0 / s);

    let mut clean = Array2::zeros((n, len));
    for w in 0..n_waves {
        let omega = 2.0 * std::f64::consts::PI * bins[w] as f64 / len as f64;
        for t in 0..len {
            let s = (omega * t as f64 + phases[w]).sin();
            for j in 0..n {
                clean[[j, t]] += row_scale[j] * mix[[j, w]] * s;
            }
        }
    }

    let mut noise = Array2::zeros((n, len));
    rng::fill_normal(&mut rng::stream(seed, &[1]), noise.as_slice_mut().expect("standard layout"));
    let noisy = &clean + &(noise * noise_std);
    Ok(SyntheticData {
        series: SeriesTensor::fully_observed(noisy.clone())?,
        truth: noisy,
        clean,
        bins,
    })
}

/// Flip each observed entry to missing with probability `p`.
///
/// Returns the masked series and the evaluation mask of removed entries.
pub fn mask_random(series: &SeriesTensor, p_missing: f64, seed: u64) -> Result<(SeriesTensor, Array2<f64>)> {
    if !(0.0..=1.0).contains(&p_missing) {
        return Err(Error::Config(format!("p_missing must lie in [0, 1], got {p_missing}")));
    }
    let mut r = rng::stream(seed, &[2]);
    let mut out = series.clone();
    let mut removed = Array2::zeros(series.values.dim());
    for ((m, v), e) in out.mask.iter_mut().zip(out.values.iter_mut()).zip(removed.iter_mut()) {
        if *m == 1.0 && r.random::<f64>() < p_missing {
            *m = 0.0;
            *v = 0.0;
            *e = 1.0;
        }
    }
    Ok((out, removed))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous 70/10/20 split along time.
pub fn split_7_1_2(len: usize, window: usize) -> Result<Split> {
    if len < 10 {
        return Err(Error::InvalidInput(format!("series length {len} is below the minimum of 10")));
    }
    let a = len * 7 / 10;
    let b = len * 8 / 10;
    if a < window {
        return Err(Error::InvalidInput(format!(
            "training segment of length {a} is shorter than one window of {window}"
        )));
    }
    Ok(Split {
        train: 0..a,
        val: a..b,
        test: b..len,
    })
}

/// Start offsets of windows of `window` steps at `stride` inside `range`.
pub fn window_starts(range: Range<usize>, window: usize, stride: usize) -> Vec<usize> {
    if window == 0 || stride == 0 || range.len() < window {
        return Vec::new();
    }
    (range.start..=range.end - window).step_by(stride).collect()
}

/// Per-node mean and population std over observed entries of `range`.
/// Falls back to std 1 with fewer than two entries or zero variance.
pub fn fit_normalization(series: &SeriesTensor, range: Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(series.n_nodes());
    let mut stds = Vec::with_capacity(series.n_nodes());
    for j in 0..series.n_nodes() {
        let obs: Vec<f64> = range
            .clone()
            .filter(|&t| series.mask[[j, t]] == 1.0)
            .map(|t| series.values[[j, t]])
            .collect();
        let mean = if obs.is_empty() {
            0.0
        } else {
            obs.iter().sum::<f64>() / obs.len() as f64
        };
        let var = if obs.is_empty() {
            0.0
        } else {
            obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / obs.len() as f64
        };
        let std = var.sqrt();
        means.push(mean);
        stds.push(if obs.len() >= 2 && std > 0.0 { std } else { 1.0 });
    }
    (means, stds)
}

/// Z-score observed entries with statistics fitted on `range`; missing
/// entries stay 0.
pub fn normalize(series: &SeriesTensor, range: Range<usize>) -> SeriesTensor {
    let (mean, std) = fit_normalization(series, range);
    apply_normalization(series, mean, std)
}

pub fn apply_normalization(series: &SeriesTensor, mean: Vec<f64>, std: Vec<f64>) -> SeriesTensor {
    let mut out = series.clone();
    for ((j, t), v) in out.values.indexed_iter_mut() {
        *v = if series.mask[[j, t]] == 1.0 {
            (*v - mean[j]) / std[j]
        } else {
            0.0
        };
    }
    out.norm_mean = mean;
    out.norm_std = std;
    out
}

/// Map normalized values back to the original scale (all entries).
pub fn denormalize(values: ArrayView2<f64>, mean: &[f64], std: &[f64]) -> Array2<f64> {
    let mut out = values.to_owned();
    for (j, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v * std[j] + mean[j]);
    }
    out
}
