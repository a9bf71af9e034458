//! Run configuration: a flat TOML table, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{NoiseSchedule, SolverState};
use crate::error::{Error, Result};
use crate::graph::Units;

/// How reverse chains are started at step `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerInit {
    /// Forward-noise a linear-interpolation estimate to step `T`.
    #[default]
    Interp,
    /// Standard normal draws.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    // synthetic data
    pub n_nodes: usize,
    pub length: usize,
    pub n_waves: usize,
    pub noise_std: f64,
    pub p_missing: f64,
    /// Side of the square region nodes are scattered in (degrees, or plain
    /// units when `units = "euclidean"`).
    pub region_size: f64,
    pub units: Units,
    /// Gaussian kernel bandwidth; median pairwise distance when absent.
    pub sigma: Option<f64>,

    // denoiser
    pub n_layers: usize,
    pub channels: usize,
    pub emb_dim: usize,
    pub n_kernels: usize,
    pub window: usize,
    pub stride: usize,

    // diffusion
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub r_window: [f64; 2],
    pub r_candidates: usize,
    pub r_candidate_std: f64,

    // training
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub target_ratio: f64,

    // sampling
    pub n_samples: usize,
    pub sampler_init: SamplerInit,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            n_nodes: 20,
            length: 1000,
            n_waves: 3,
            noise_std: 0.1,
            p_missing: 0.25,
            region_size: 1.0,
            units: Units::Latlon,
            sigma: None,
            n_layers: 6,
            channels: 32,
            emb_dim: 64,
            n_kernels: 8,
            window: 64,
            stride: 16,
            diffusion_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            r_window: [0.0, 0.2],
            r_candidates: 5,
            r_candidate_std: 0.1,
            epochs: 200,
            lr: 0.001,
            batch_size: 8,
            target_ratio: 0.1,
            n_samples: 20,
            sampler_init: SamplerInit::Interp,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be at least 1")));
    }
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_nodes", self.n_nodes),
            ("n_waves", self.n_waves),
            ("window", self.window),
            ("stride", self.stride),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_samples", self.n_samples),
        ] {
            positive(name, v)?;
        }
        if self.n_nodes < 2 {
            return Err(Error::Config("n_nodes must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return Err(Error::Config(format!("target_ratio must lie in (0, 1], got {}", self.target_ratio)));
        }
        if !(0.0..=1.0).contains(&self.p_missing) {
            return Err(Error::Config(format!("p_missing must lie in [0, 1], got {}", self.p_missing)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be nonnegative, got {}", self.noise_std)));
        }
        if !(self.region_size > 0.0 && self.region_size.is_finite()) {
            return Err(Error::Config(format!("region_size must be positive, got {}", self.region_size)));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        self.denoiser(self.n_nodes).validate()?;
        self.schedule()?;
        self.solver()?;
        Ok(())
    }

    pub fn denoiser(&self, n_nodes: usize) -> DenoiserConfig {
        DenoiserConfig {
            n_layers: self.n_layers,
            channels: self.channels,
            emb_dim: self.emb_dim,
            n_kernels: self.n_kernels,
            seq_len: self.window,
            n_nodes,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_min, self.beta_max)
    }

    pub fn solver(&self) -> Result<SolverState> {
        SolverState::new((self.r_window[0], self.r_window[1]), self.r_candidates, self.r_candidate_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(Config::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn shipped_default_matches() {
        let text = include_str!("../../../config/default.toml");
        assert_eq!(Config::from_toml_str(text).unwrap(), Config::default());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "lr = 0.0",
            "lr = -1.0",
            "unknown_key = 3",
            "r_window = [0.3, 0.1]",
            "beta_max = 1.5",
            "n_layers = 0",
            "emb_dim = 7",
            "units = \"polar\"",
            "target_ratio = 0.0",
        ] {
            let err = Config::from_toml_str(text).unwrap_err();
            assert!(err.is_usage(), "{text}: {err}");
        }
    }

    #[test]
    fn overrides_apply() {
        let cfg = Config::from_toml_str("epochs = 3\nsigma = 25.0\nsampler_init = \"noise\"").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.sigma, Some(25.0));
        assert_eq!(cfg.sampler_init, SamplerInit::Noise);
    }
}
