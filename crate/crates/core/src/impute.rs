//! Conditional reverse sampling over full-length series.
//!
//! A series longer than the model window is covered by consecutive tiles of
//! one window each; the last tile is aligned to the series end. Every
//! (tile, sample) chain has its own seed-derived stream and the chains run
//! through [`crate::par`], so results do not depend on thread count.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::config::SamplerInit;
use crate::data::{denormalize, SeriesTensor};
use crate::denoiser::{Denoiser, DenoiserInput, ModelPlan};
use crate::diffusion::{reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::baseline_linear_interp;
use crate::{par, rng};

const TAG_CHAIN: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    /// Observed values where `mask = 1`, median of samples elsewhere.
    pub values: Array2<f64>,
    /// Population std across samples; 0 on observed entries.
    pub spread: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions {
    pub n_samples: usize,
    pub r: f64,
    pub init: SamplerInit,
    pub seed: u64,
}

/// Tile offsets covering `0..len` with windows of `window` steps.
pub fn tile_starts(len: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || len < window {
        return Err(Error::InvalidInput(format!(
            "series length {len} is shorter than the model window {window}"
        )));
    }
    let mut starts: Vec<usize> = (0..=len - window).step_by(window).collect();
    if starts.last().map(|s| s + window) != Some(len) {
        starts.push(len - window);
    }
    Ok(starts)
}

/// One reverse chain on a single window (normalized space).
#[allow(clippy::too_many_arguments)]
pub fn sample_window(
    model: &Denoiser,
    plan: &ModelPlan,
    sched: &NoiseSchedule,
    observed: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    r: f64,
    init: SamplerInit,
    rng: &mut rng::Rng,
) -> Result<Array2<f64>> {
    let dim = observed.dim();
    let steps = sched.steps();
    let mut noise = Array2::zeros(dim);
    let mut fresh = |rng: &mut rng::Rng| {
        rng::fill_normal(rng, noise.as_slice_mut().expect("standard layout"));
        noise.clone()
    };
    let mut x = match init {
        SamplerInit::Noise => fresh(rng),
        SamplerInit::Interp => {
            let guess = baseline_linear_interp(observed, mask)?;
            let (a, b) = (sched.alpha_bar(steps), sched.beta_bar(steps));
            let z = fresh(rng);
            Zip::from(&guess).and(&z).map_collect(|&g, &z| a * g + b * z)
        }
    };
    for t in (1..=steps).rev() {
        let (a, b) = (sched.alpha_bar(t), sched.beta_bar(t));
        let z_obs = fresh(rng);
        let mut x_in = x.clone();
        Zip::from(&mut x_in)
            .and(&observed)
            .and(&mask)
            .and(&z_obs)
            .for_each(|xi, &o, &m, &z| {
                if m == 1.0 {
                    *xi = a * o + b * z;
                }
            });
        let input = DenoiserInput {
            x_noisy: x_in.view(),
            x_observed: observed,
            mask,
            t,
        };
        let eps_hat = model.predict(plan, &input)?;
        let z = if t > 1 { fresh(rng) } else { Array2::zeros(dim) };
        x = reverse_step(x.view(), eps_hat.view(), t, r, sched, z.view())?;
    }
    Zip::from(&mut x).and(&observed).and(&mask).for_each(|xi, &o, &m| {
        if m == 1.0 {
            *xi = o;
        }
    });
    Ok(x)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Impute a normalized `n x L` series with `opts.n_samples` chains per tile.
pub fn impute(
    model: &Denoiser,
    sched: &NoiseSchedule,
    observed: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    opts: &SamplerOptions,
) -> Result<Imputation> {
    if opts.n_samples < 1 {
        return Err(Error::InvalidInput("n_samples must be at least 1".into()));
    }
    if observed.dim() != mask.dim() {
        return Err(Error::shape("impute mask", format!("{:?}", observed.dim()), format!("{:?}", mask.dim())));
    }
    if observed.nrows() != model.config.n_nodes {
        return Err(Error::shape("impute nodes", model.config.n_nodes, observed.nrows()));
    }
    crate::denoiser::check_binary(mask)?;
    let (n, len) = observed.dim();
    let w = model.config.seq_len;
    let tiles = tile_starts(len, w)?;
    let plan = model.plan()?;
    let s_count = opts.n_samples;

    let samples = par::map_range(tiles.len() * s_count, |job| {
        let (tile, sample) = (job / s_count, job % s_count);
        let start = tiles[tile];
        let mut rng = rng::stream(opts.seed, &[TAG_CHAIN, tile as u64, sample as u64]);
        sample_window(
            model,
            &plan,
            sched,
            observed.slice(s![.., start..start + w]),
            mask.slice(s![.., start..start + w]),
            opts.r,
            opts.init,
            &mut rng,
        )
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;

    let mut values = observed.to_owned();
    let mut spread = Array2::zeros((n, len));
    let mut covered = 0;
    let mut buf = vec![0.0; s_count];
    for (tile, &start) in tiles.iter().enumerate() {
        let chains = &samples[tile * s_count..(tile + 1) * s_count];
        for col in covered.max(start)..start + w {
            for j in 0..n {
                if mask[[j, col]] == 1.0 {
                    continue;
                }
                for (b, c) in buf.iter_mut().zip(chains) {
                    *b = c[[j, col - start]];
                }
                let mean = buf.iter().sum::<f64>() / s_count as f64;
                spread[[j, col]] = (buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s_count as f64).sqrt();
                values[[j, col]] = median(&mut buf);
            }
        }
        covered = start + w;
    }
    Ok(Imputation { values, spread })
}

/// Impute a raw-scale series: normalize with the stored statistics, sample,
/// then map back. Observed entries are copied from the input unchanged.
pub fn impute_series(
    model: &Denoiser,
    sched: &NoiseSchedule,
    series: &SeriesTensor,
    norm_mean: &[f64],
    norm_std: &[f64],
    opts: &SamplerOptions,
) -> Result<Imputation> {
    if norm_mean.len() != series.n_nodes() || norm_std.len() != series.n_nodes() {
        return Err(Error::shape("normalization statistics", series.n_nodes(), norm_mean.len()));
    }
    let normalized = crate::data::apply_normalization(series, norm_mean.to_vec(), norm_std.to_vec());
    let out = impute(model, sched, normalized.values.view(), series.mask.view(), opts)?;
    let mut values = denormalize(out.values.view(), norm_mean, norm_std);
    Zip::from(&mut values).and(&series.values).and(&series.mask).for_each(|v, &o, &m| {
        if m == 1.0 {
            *v = o;
        }
    });
    let mut spread = out.spread;
    for (j, mut row) in spread.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v * norm_std[j]);
    }
    Ok(Imputation { values, spread })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::graph::{SpatialGraph, Units};

    fn tiny_model() -> Denoiser {
        let g = SpatialGraph::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], Units::Euclidean, None).unwrap();
        let cfg = DenoiserConfig {
            n_layers: 1,
            channels: 4,
            emb_dim: 4,
            n_kernels: 2,
            seq_len: 8,
            n_nodes: 3,
        };
        let mut m = Denoiser::new(cfg, g, &mut rng::seeded(1)).unwrap();
        m.params.out_w.fill(0.3);
        m
    }

    fn opts(n_samples: usize, seed: u64) -> SamplerOptions {
        SamplerOptions {
            n_samples,
            r: 0.02,
            init: SamplerInit::Interp,
            seed,
        }
    }

    #[test]
    fn tiles_cover_series() {
        assert_eq!(tile_starts(8, 8).unwrap(), vec![0]);
        assert_eq!(tile_starts(20, 8).unwrap(), vec![0, 8, 12]);
        assert_eq!(tile_starts(16, 8).unwrap(), vec![0, 8]);
        assert!(tile_starts(7, 8).is_err());
    }

    #[test]
    fn fully_observed_passes_through() {
        let m = tiny_model();
        let sched = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
        let obs = Array2::from_shape_fn((3, 20), |(j, t)| (j as f64) - 0.1 * t as f64);
        let out = impute(&m, &sched, obs.view(), Array2::ones((3, 20)).view(), &opts(3, 1)).unwrap();
        assert_eq!(out.values, obs);
        assert!(out.spread.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_and_determinism() {
        let m = tiny_model();
        let sched = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
        let obs = Array2::from_shape_fn((3, 12), |(j, t)| ((j + t) as f64).sin());
        let mask = Array2::from_shape_fn((3, 12), |(j, t)| if (j * 5 + t) % 4 == 0 { 0.0 } else { 1.0 });
        let obs = &obs * &mask;
        let one = impute(&m, &sched, obs.view(), mask.view(), &opts(1, 3)).unwrap();
        let tiles = tile_starts(12, 8).unwrap();
        let plan = m.plan().unwrap();
        let chain = sample_window(
            &m,
            &plan,
            &sched,
            obs.slice(s![.., 0..8]),
            mask.slice(s![.., 0..8]),
            0.02,
            SamplerInit::Interp,
            &mut rng::stream(3, &[TAG_CHAIN, 0, 0]),
        )
        .unwrap();
        assert_eq!(tiles, vec![0, 4]);
        assert_eq!(one.values.slice(s![.., 0..8]), chain);
        assert!(one.spread.iter().all(|v| *v == 0.0));

        let a = impute(&m, &sched, obs.view(), mask.view(), &opts(10, 7)).unwrap();
        let b = impute(&m, &sched, obs.view(), mask.view(), &opts(10, 7)).unwrap();
        assert_eq!(a, b);
        assert!(impute(&m, &sched, obs.view(), mask.view(), &opts(0, 7)).is_err());
        for ((v, o), mm) in a.values.iter().zip(obs.iter()).zip(mask.iter()) {
            if *mm == 1.0 {
                assert_eq!(v, o);
            }
        }
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
