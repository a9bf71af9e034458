//! Versioned JSON checkpoints.
//!
//! A checkpoint stores the full configuration, the graph inputs (coordinates,
//! units, resolved bandwidth), every parameter tensor by name, the noise-scale
//! state and the normalization statistics. Floats round-trip exactly, and the
//! graph eigendecomposition is recomputed deterministically on load, so a
//! reloaded model reproduces the saved one bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::denoiser::Denoiser;
use crate::diffusion::SolverState;
use crate::error::{Error, Result};
use crate::graph::{SpatialGraph, Units};

pub const FORMAT: &str = "stimpute-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub units: Units,
    pub sigma: f64,
    pub coords: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: Config,
    pub graph: GraphRecord,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub solver: SolverState,
    pub val_loss: f64,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(
        model: &Denoiser,
        config: &Config,
        seed: u64,
        solver: &SolverState,
        norm_mean: &[f64],
        norm_std: &[f64],
        val_loss: f64,
    ) -> Self {
        let mut tensors = Vec::new();
        model.params.for_each(|name, t| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                values: t.to_vec(),
            })
        });
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            seed,
            config: config.clone(),
            graph: GraphRecord {
                units: model.graph.units,
                sigma: model.graph.sigma,
                coords: model.graph.coords.clone(),
            },
            norm_mean: norm_mean.to_vec(),
            norm_std: norm_std.to_vec(),
            solver: solver.clone(),
            val_loss,
            tensors,
        }
    }

    /// Rebuild the graph and the denoiser with the stored parameters.
    pub fn model(&self) -> Result<Denoiser> {
        let graph = SpatialGraph::new(self.graph.coords.clone(), self.graph.units, Some(self.graph.sigma))?;
        let n = graph.n_nodes();
        let mut model = Denoiser::skeleton(self.config.denoiser(n), graph)?;
        let mut records = self.tensors.iter();
        let mut problem = None;
        model.params.for_each_mut(|name, t| {
            if problem.is_some() {
                return;
            }
            match records.next() {
                Some(rec) if rec.name == name && rec.values.len() == t.len() => t.copy_from_slice(&rec.values),
                Some(rec) => {
                    problem = Some(format!(
                        "tensor `{}` ({} values) where `{name}` ({} values) was expected",
                        rec.name,
                        rec.values.len(),
                        t.len()
                    ))
                }
                None => problem = Some(format!("missing tensor `{name}`")),
            }
        });
        if let Some(rec) = records.next() {
            problem.get_or_insert(format!("unexpected tensor `{}`", rec.name));
        }
        match problem {
            Some(msg) => Err(Error::InvalidInput(format!("checkpoint does not match its config: {msg}"))),
            None => Ok(model),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint format `{}` version {}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(err) => Error::Format {
                path: path.to_path_buf(),
                msg: err.to_string(),
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Units;
    use rand::Rng as _;

    fn model(cfg: &Config) -> Denoiser {
        let g = SpatialGraph::new(vec![[30.0, 120.0], [30.2, 120.1], [30.1, 120.4]], Units::Latlon, None).unwrap();
        let mut rng = crate::rng::seeded(5);
        let mut m = Denoiser::new(cfg.denoiser(3), g, &mut rng).unwrap();
        m.params.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3)));
        m
    }

    fn small_cfg() -> Config {
        Config {
            n_layers: 2,
            channels: 4,
            emb_dim: 4,
            n_kernels: 2,
            window: 8,
            ..Config::default()
        }
    }

    #[test]
    fn exact_round_trip() {
        let cfg = small_cfg();
        let m = model(&cfg);
        let mut solver = cfg.solver().unwrap();
        solver.history = vec![0.1, 0.0123456789012345, -1e-17];
        solver.r_final = Some(0.037448);
        let ck = Checkpoint::new(&m, &cfg, 9, &solver, &[0.5, 1.0 / 3.0, 2.0], &[1.0, 0.7, 1e-5], 0.81234);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.model().unwrap();
        assert_eq!(m2.params.to_flat(), m.params.to_flat());
        assert_eq!(m2.graph.adjacency, m.graph.adjacency);
        assert_eq!(m2.graph.eigvecs(), m.graph.eigvecs());
    }

    #[test]
    fn rejects_mismatch() {
        let cfg = small_cfg();
        let m = model(&cfg);
        let solver = cfg.solver().unwrap();
        let mut ck = Checkpoint::new(&m, &cfg, 1, &solver, &[0.0; 3], &[1.0; 3], 0.0);
        ck.tensors.pop();
        assert!(ck.model().is_err());
        let mut ck2 = Checkpoint::new(&m, &cfg, 1, &solver, &[0.0; 3], &[1.0; 3], 0.0);
        ck2.version = 99;
        assert!(Checkpoint::from_json(&ck2.to_json().unwrap()).is_err());
    }
}
