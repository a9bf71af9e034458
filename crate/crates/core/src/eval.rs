//! Masked error metrics, naive baselines and amplitude spectra.

use ndarray::{Array2, ArrayView1, ArrayView2};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(imputed: ArrayView2<f64>, truth: ArrayView2<f64>, eval_mask: ArrayView2<f64>) -> Result<usize> {
    if imputed.dim() != truth.dim() || imputed.dim() != eval_mask.dim() {
        return Err(Error::shape(
            "metric inputs",
            format!("{:?}", truth.dim()),
            format!("{:?} / {:?}", imputed.dim(), eval_mask.dim()),
        ));
    }
    let count = eval_mask.iter().filter(|m| **m != 0.0).count();
    if count == 0 {
        return Err(Error::InvalidInput("evaluation mask is empty".into()));
    }
    Ok(count)
}

fn masked_sum(imputed: ArrayView2<f64>, truth: ArrayView2<f64>, eval_mask: ArrayView2<f64>, f: impl Fn(f64) -> f64) -> f64 {
    imputed
        .iter()
        .zip(truth.iter())
        .zip(eval_mask.iter())
        .filter(|(_, m)| **m != 0.0)
        .map(|((a, b), _)| f(a - b))
        .sum()
}

/// Mean absolute error over `eval_mask = 1` entries.
pub fn masked_mae(imputed: ArrayView2<f64>, truth: ArrayView2<f64>, eval_mask: ArrayView2<f64>) -> Result<f64> {
    let n = check(imputed, truth, eval_mask)?;
    Ok(masked_sum(imputed, truth, eval_mask, f64::abs) / n as f64)
}

/// Root mean squared error over `eval_mask = 1` entries.
pub fn masked_rmse(imputed: ArrayView2<f64>, truth: ArrayView2<f64>, eval_mask: ArrayView2<f64>) -> Result<f64> {
    let n = check(imputed, truth, eval_mask)?;
    Ok((masked_sum(imputed, truth, eval_mask, |d| d * d) / n as f64).sqrt())
}

fn check_mask(series: ArrayView2<f64>, mask: ArrayView2<f64>) -> Result<()> {
    if series.dim() != mask.dim() {
        return Err(Error::shape(
            "baseline mask",
            format!("{:?}", series.dim()),
            format!("{:?}", mask.dim()),
        ));
    }
    Ok(())
}

/// Fill missing entries with the node's observed mean (0 if none observed).
pub fn baseline_mean_impute(series: ArrayView2<f64>, mask: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_mask(series, mask)?;
    let mut out = series.to_owned();
    for (mut row, m) in out.rows_mut().into_iter().zip(mask.rows()) {
        let (sum, count) = row
            .iter()
            .zip(m.iter())
            .filter(|(_, m)| **m != 0.0)
            .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        row.iter_mut().zip(m.iter()).filter(|(_, m)| **m == 0.0).for_each(|(v, _)| *v = mean);
    }
    Ok(out)
}

fn interp_row(row: ArrayView1<f64>, mask: ArrayView1<f64>) -> Vec<f64> {
    let obs: Vec<usize> = (0..row.len()).filter(|&t| mask[t] != 0.0).collect();
    let mut out = row.to_vec();
    let (Some(&first), Some(&last)) = (obs.first(), obs.last()) else {
        out.iter_mut().for_each(|v| *v = 0.0);
        return out;
    };
    for v in &mut out[..first] {
        *v = row[first];
    }
    for v in &mut out[last + 1..] {
        *v = row[last];
    }
    for pair in obs.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (ya, yb) = (row[a], row[b]);
        for (t, v) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (t - a) as f64 / (b - a) as f64;
            *v = ya + w * (yb - ya);
        }
    }
    out
}

/// Per-node linear interpolation between observed neighbours; boundary runs
/// hold the nearest observed value.
pub fn baseline_linear_interp(series: ArrayView2<f64>, mask: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_mask(series, mask)?;
    let mut out = series.to_owned();
    for (j, mut row) in out.rows_mut().into_iter().enumerate() {
        let filled = interp_row(series.row(j), mask.row(j));
        row.iter_mut().zip(filled).for_each(|(v, f)| *v = f);
    }
    Ok(out)
}

/// Amplitude spectrum `|FFT(x)| * 2 / L` over bins `0..=L/2`.
pub fn spectrum(x: &[f64]) -> Result<Vec<f64>> {
    let len = x.len();
    if len < 2 {
        return Err(Error::InvalidInput(format!("spectrum needs at least 2 samples, got {len}")));
    }
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(len);
    let mut input = x.to_vec();
    let mut out = fft.make_output_vec();
    fft.process(&mut input, &mut out).expect("buffer sizes come from the plan");
    let scale = 2.0 / len as f64;
    Ok(out.iter().map(|c| c.norm() * scale).collect())
}

/// Fraction of spectral energy (squared amplitude) in the given bins.
pub fn energy_fraction(amplitudes: &[f64], bins: &[usize]) -> f64 {
    let total: f64 = amplitudes.iter().map(|a| a * a).sum();
    if total == 0.0 {
        return 0.0;
    }
    bins.iter().filter_map(|&b| amplitudes.get(b)).map(|a| a * a).sum::<f64>() / total
}

/// Indices of the `k` largest amplitudes, largest first (ties to lower bin).
pub fn top_bins(amplitudes: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..amplitudes.len()).collect();
    idx.sort_by(|&a, &b| amplitudes[b].total_cmp(&amplitudes[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mae: f64,
    pub rmse: f64,
}

/// Metrics record written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub dataset: String,
    pub p_missing: Option<f64>,
    pub seed: u64,
    pub method: String,
    pub mae: f64,
    pub rmse: f64,
    pub n_eval: usize,
    pub baseline_mean: Scores,
    pub baseline_linear: Scores,
}

pub struct EvalInputs<'a> {
    pub imputed: ArrayView2<'a, f64>,
    pub truth: ArrayView2<'a, f64>,
    pub eval_mask: ArrayView2<'a, f64>,
    /// Observation mask the baselines may read.
    pub observed_mask: ArrayView2<'a, f64>,
    /// Observed values (missing entries arbitrary).
    pub observed: ArrayView2<'a, f64>,
}

pub fn scores(imputed: ArrayView2<f64>, truth: ArrayView2<f64>, eval_mask: ArrayView2<f64>) -> Result<Scores> {
    Ok(Scores {
        mae: masked_mae(imputed, truth, eval_mask)?,
        rmse: masked_rmse(imputed, truth, eval_mask)?,
    })
}

pub fn evaluate(inputs: &EvalInputs, dataset: &str, p_missing: Option<f64>, seed: u64, method: &str) -> Result<MetricsReport> {
    let main = scores(inputs.imputed, inputs.truth, inputs.eval_mask)?;
    let mean = baseline_mean_impute(inputs.observed, inputs.observed_mask)?;
    let linear = baseline_linear_interp(inputs.observed, inputs.observed_mask)?;
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        p_missing,
        seed,
        method: method.to_string(),
        mae: main.mae,
        rmse: main.rmse,
        n_eval: inputs.eval_mask.iter().filter(|m| **m != 0.0).count(),
        baseline_mean: scores(mean.view(), inputs.truth, inputs.eval_mask)?,
        baseline_linear: scores(linear.view(), inputs.truth, inputs.eval_mask)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng as _;
    use std::f64::consts::PI;

    fn random_case(seed: u64, n: usize, l: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut r = rng::seeded(seed);
        let a = Array2::from_shape_simple_fn((n, l), || r.random_range(-3.0..3.0));
        let b = Array2::from_shape_simple_fn((n, l), || r.random_range(-3.0..3.0));
        let mut m = Array2::from_shape_simple_fn((n, l), || if r.random_bool(0.4) { 1.0 } else { 0.0 });
        m[[0, 0]] = 1.0;
        (a, b, m)
    }

    #[test]
    fn metric_examples() {
        let t = array![[1.0, 2.0]];
        let i = array![[2.0, 4.0]];
        let m = array![[1.0, 1.0]];
        assert_eq!(masked_mae(i.view(), t.view(), m.view()).unwrap(), 1.5);
        assert_eq!(masked_mae(t.view(), t.view(), m.view()).unwrap(), 0.0);
        assert_eq!(masked_rmse(t.view(), t.view(), m.view()).unwrap(), 0.0);
        let one = array![[1.0, 0.0]];
        assert_eq!(masked_rmse(array![[4.0, 9.0]].view(), array![[1.0, 0.0]].view(), one.view()).unwrap(), 3.0);
        assert!(masked_mae(i.view(), t.view(), array![[0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn metrics_match_loops() {
        for seed in 0..100 {
            let (a, b, m) = random_case(seed, 4, 9);
            let (mut s_abs, mut s_sq, mut c) = (0.0, 0.0, 0.0);
            for j in 0..4 {
                for t in 0..9 {
                    if m[[j, t]] == 1.0 {
                        s_abs += (a[[j, t]] - b[[j, t]]).abs();
                        s_sq += (a[[j, t]] - b[[j, t]]).powi(2);
                        c += 1.0;
                    }
                }
            }
            let mae = masked_mae(a.view(), b.view(), m.view()).unwrap();
            let rmse = masked_rmse(a.view(), b.view(), m.view()).unwrap();
            assert!((mae - s_abs / c).abs() < 1e-12);
            assert!((rmse - (s_sq / c).sqrt()).abs() < 1e-12);
            assert!(rmse >= mae);
        }
    }

    #[test]
    fn metrics_ignore_unmasked() {
        let (a, b, m) = random_case(3, 3, 12);
        let mut perturbed = a.clone();
        perturbed.zip_mut_with(&m, |v, mm| {
            if *mm == 0.0 {
                *v += 100.0;
            }
        });
        assert_eq!(
            masked_mae(a.view(), b.view(), m.view()).unwrap(),
            masked_mae(perturbed.view(), b.view(), m.view()).unwrap()
        );
        assert_eq!(
            masked_rmse(a.view(), b.view(), m.view()).unwrap(),
            masked_rmse(perturbed.view(), b.view(), m.view()).unwrap()
        );
    }

    #[test]
    fn mean_baseline() {
        let s = array![[2.0, 0.0, 4.0]];
        let m = array![[1.0, 0.0, 1.0]];
        assert_eq!(baseline_mean_impute(s.view(), m.view()).unwrap(), array![[2.0, 3.0, 4.0]]);
        let full = Array2::ones((2, 3));
        let (a, _, _) = random_case(1, 2, 3);
        assert_eq!(baseline_mean_impute(a.view(), full.view()).unwrap(), a);
        assert_eq!(baseline_linear_interp(a.view(), full.view()).unwrap(), a);

        let (a, _, m) = random_case(8, 5, 20);
        let got = baseline_mean_impute(a.view(), m.view()).unwrap();
        for j in 0..5 {
            let obs: Vec<f64> = (0..20).filter(|&t| m[[j, t]] == 1.0).map(|t| a[[j, t]]).collect();
            let mean = if obs.is_empty() { 0.0 } else { obs.iter().sum::<f64>() / obs.len() as f64 };
            for t in 0..20 {
                let want = if m[[j, t]] == 1.0 { a[[j, t]] } else { mean };
                assert!((got[[j, t]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_baseline() {
        let s = array![[0.0, 9.0, 2.0]];
        let m = array![[1.0, 0.0, 1.0]];
        assert_eq!(baseline_linear_interp(s.view(), m.view()).unwrap(), array![[0.0, 1.0, 2.0]]);
        let s = array![[0.0, 0.0, 5.0, 7.0, 0.0]];
        let m = array![[0.0, 0.0, 1.0, 1.0, 0.0]];
        assert_eq!(baseline_linear_interp(s.view(), m.view()).unwrap(), array![[5.0, 5.0, 5.0, 7.0, 7.0]]);
    }

    #[test]
    fn linear_baseline_oracle() {
        for seed in 0..50 {
            let (a, _, m) = random_case(seed, 2, 30);
            let got = baseline_linear_interp(a.view(), m.view()).unwrap();
            for j in 0..2 {
                for t in 0..30 {
                    if m[[j, t]] == 1.0 {
                        assert_eq!(got[[j, t]], a[[j, t]]);
                        continue;
                    }
                    let left = (0..t).rev().find(|&s| m[[j, s]] == 1.0);
                    let right = (t + 1..30).find(|&s| m[[j, s]] == 1.0);
                    let want = match (left, right) {
                        (Some(l), Some(r)) => {
                            let w = (t - l) as f64 / (r - l) as f64;
                            (1.0 - w) * a[[j, l]] + w * a[[j, r]]
                        }
                        (Some(l), None) => a[[j, l]],
                        (None, Some(r)) => a[[j, r]],
                        (None, None) => 0.0,
                    };
                    assert!((got[[j, t]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spectrum_examples() {
        let amp = spectrum(&[2.5; 16]).unwrap();
        assert!((amp[0] - 5.0).abs() < 1e-12);
        assert!(amp[1..].iter().all(|a| a.abs() < 1e-12));

        let x: Vec<f64> = (0..64).map(|t| (2.0 * PI * 5.0 * t as f64 / 64.0).sin()).collect();
        let amp = spectrum(&x).unwrap();
        assert_eq!(amp.len(), 33);
        assert_eq!(top_bins(&amp, 1), vec![5]);
        assert!((amp[5] - 1.0).abs() < 1e-9);
        assert!(spectrum(&[1.0]).is_err());
    }

    #[test]
    fn spectrum_matches_dft() {
        let l = 50;
        let x: Vec<f64> = (0..l)
            .map(|t| {
                let t = t as f64;
                0.7 * (2.0 * PI * 3.0 * t / l as f64).sin() + 1.3 * (2.0 * PI * 11.0 * t / l as f64 + 0.4).cos() + 0.2
            })
            .collect();
        let amp = spectrum(&x).unwrap();
        for (k, a) in amp.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let th = -2.0 * PI * (k * t) as f64 / l as f64;
                re += v * th.cos();
                im += v * th.sin();
            }
            assert!((a - (re * re + im * im).sqrt() * 2.0 / l as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn spectrum_periodic_extension() {
        let x: Vec<f64> = (0..32).map(|t| (2.0 * PI * 3.0 * t as f64 / 32.0).cos()).collect();
        let doubled: Vec<f64> = x.iter().chain(x.iter()).copied().collect();
        let a = spectrum(&x).unwrap();
        let b = spectrum(&doubled).unwrap();
        for k in 0..a.len() {
            assert!((a[k] - b[2 * k]).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_energy_in_three_bins() {
        use crate::data::generate_synthetic;
        use crate::graph::{SpatialGraph, Units};
        let mut r = rng::seeded(21);
        let coords = (0..10).map(|_| [r.random_range(0.0..3.0), r.random_range(0.0..3.0)]).collect();
        let g = SpatialGraph::new(coords, Units::Euclidean, None).unwrap();
        let d = generate_synthetic(&g, 128, 3, 0.1, 2).unwrap();
        for row in d.clean.rows() {
            let amp = spectrum(row.as_slice().unwrap()).unwrap();
            assert!(energy_fraction(&amp, &d.bins) >= 0.9);
        }
    }
}
