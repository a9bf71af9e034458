//! Noise schedule, forward corruption, the `(1 + r)`-scaled noise-matching
//! loss, management of the learnable scale `r`, and the ancestral reverse step.
//!
//! Conventions: steps run `t = 1..=T`; `t = 0` is the clean signal.
//! `alpha_bar_t = prod_{s<=t} sqrt(1 - beta_s)` and
//! `beta_bar_t = sqrt(1 - alpha_bar_t^2)`, so `q(x_t | x_0) =
//! N(alpha_bar_t x_0, beta_bar_t^2 I)`.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const R_LIMIT: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `beta` from `beta_min` to `beta_max` over `steps`.
    /// A single-step schedule uses `beta_max`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion steps must be at least 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_max]
        } else {
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= (1.0 - b).sqrt();
            alpha_bar.push(acc);
        }
        let beta_bar = alpha_bar.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        Ok(NoiseSchedule {
            beta,
            alpha_bar,
            beta_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.beta[t - 1]
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.beta_bar[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidInput(format!("step {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }
}

fn same_shape(context: &'static str, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(context, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// `x_t = alpha_bar_t * x0 + beta_bar_t * eps`.
pub fn forward_sample(x0: ArrayView2<f64>, t: usize, eps: ArrayView2<f64>, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    same_shape("forward_sample", x0, eps)?;
    sched.check_step(t)?;
    let (a, b) = (sched.alpha_bar(t), sched.beta_bar(t));
    Ok(Zip::from(&x0).and(&eps).map_collect(|&x, &e| a * x + b * e))
}

/// Score of the Gaussian transition, `-(x_t - alpha_bar_t x0) / beta_bar_t^2`.
pub fn score_target(x_t: ArrayView2<f64>, x0: ArrayView2<f64>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    same_shape("score_target", x_t, x0)?;
    sched.check_step(t)?;
    let (a, b) = (sched.alpha_bar(t), sched.beta_bar(t));
    if b == 0.0 {
        return Err(Error::InvalidInput(format!("score undefined at step {t}: beta_bar is zero")));
    }
    Ok(Zip::from(&x_t).and(&x0).map_collect(|&xt, &x| -(xt - a * x) / (b * b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    /// `d loss / d eps_hat`.
    pub grad_eps_hat: Array2<f64>,
    /// `d loss / d r`.
    pub grad_r: f64,
    pub count: usize,
}

/// Mean of `(eps_hat - (1 + r) eps)^2` over entries where `target_mask = 1`.
pub fn training_loss(eps_hat: ArrayView2<f64>, eps: ArrayView2<f64>, r: f64, target_mask: ArrayView2<f64>) -> Result<Loss> {
    same_shape("training_loss", eps_hat, eps)?;
    same_shape("training_loss mask", eps_hat, target_mask)?;
    if !(r.abs() < 1.0) {
        return Err(Error::Constraint(format!("|r| must stay below 1, got {r}")));
    }
    let count = target_mask.iter().filter(|m| **m != 0.0).count();
    if count == 0 {
        return Err(Error::InvalidInput("training target mask is empty".into()));
    }
    let scale = 1.0 + r;
    let inv = 1.0 / count as f64;
    let mut value = 0.0;
    let mut grad_r = 0.0;
    let mut grad_eps_hat = Array2::zeros(eps_hat.dim());
    Zip::from(&mut grad_eps_hat)
        .and(&eps_hat)
        .and(&eps)
        .and(&target_mask)
        .for_each(|g, &eh, &e, &m| {
            if m != 0.0 {
                let d = eh - scale * e;
                value += d * d;
                grad_r += -2.0 * e * d;
                *g = 2.0 * d * inv;
            }
        });
    Ok(Loss {
        value: value * inv,
        grad_eps_hat,
        grad_r: grad_r * inv,
        count,
    })
}

/// One ancestral step `x_t -> x_{t-1}`:
/// `(x_t - (1 + r) (beta_t / beta_bar_t) eps_hat) / sqrt(1 - beta_t) + sqrt(beta_t) z`.
pub fn reverse_step(
    x_t: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    t: usize,
    r: f64,
    sched: &NoiseSchedule,
    z: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    same_shape("reverse_step", x_t, eps_hat)?;
    same_shape("reverse_step noise", x_t, z)?;
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidInput(format!("reverse step {t} outside 1..={}", sched.steps())));
    }
    let beta = sched.beta(t);
    let coef = (1.0 + r) * (beta / sched.beta_bar(t));
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let sigma = beta.sqrt();
    Ok(Zip::from(&x_t)
        .and(&eps_hat)
        .and(&z)
        .map_collect(|&x, &e, &zz| inv_sqrt_alpha * (x - coef * e) + sigma * zz))
}

/// Learnable noise scale `r`, its candidate window and per-epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub r: f64,
    pub window: (f64, f64),
    pub n_candidates: usize,
    pub candidate_std: f64,
    pub history: Vec<f64>,
    pub r_final: Option<f64>,
}

impl SolverState {
    pub fn new(window: (f64, f64), n_candidates: usize, candidate_std: f64) -> Result<Self> {
        if !(window.0 <= window.1) || window.0.abs() >= 1.0 || window.1.abs() >= 1.0 {
            return Err(Error::Config(format!(
                "r window must be a nonempty interval inside (-1, 1), got [{}, {}]",
                window.0, window.1
            )));
        }
        if n_candidates == 0 || !(candidate_std > 0.0) {
            return Err(Error::Config("need at least one r candidate and a positive candidate std".into()));
        }
        Ok(SolverState {
            r: 0.5 * (window.0 + window.1),
            window,
            n_candidates,
            candidate_std,
            history: Vec::new(),
            r_final: None,
        })
    }

    /// Record the value at the end of an epoch.
    pub fn end_epoch(&mut self) {
        self.history.push(self.r);
    }

    /// The value used for sampling: `r_final` once set, else the current `r`.
    pub fn sampling_r(&self) -> f64 {
        self.r_final.unwrap_or(self.r)
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Draw `n_candidates` points from `N(mid(window), std)` restricted to the
/// window (rejection, clamped after 1000 attempts) and pick one uniformly.
pub fn sample_r_candidate(state: &SolverState, rng: &mut Rng) -> f64 {
    let (lo, hi) = state.window;
    let mid = 0.5 * (lo + hi);
    let candidates: Vec<f64> = (0..state.n_candidates)
        .map(|_| {
            let mut last = mid;
            for _ in 0..MAX_ATTEMPTS {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                last = mid + state.candidate_std * z;
                if (lo..=hi).contains(&last) {
                    return last;
                }
            }
            last.clamp(lo, hi)
        })
        .collect();
    candidates[rng.random_range(0..candidates.len())]
}

/// `r <- clamp(r - lr * grad, -0.99, 0.99)`.
pub fn update_r(state: &mut SolverState, grad_r: f64, lr: f64) -> Result<()> {
    if !grad_r.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite gradient for r: {grad_r}")));
    }
    if !(state.r.abs() < 1.0) {
        return Err(Error::Constraint(format!("|r| must stay below 1, got {}", state.r)));
    }
    state.r = (state.r - lr * grad_r).clamp(-R_LIMIT, R_LIMIT);
    Ok(())
}

/// Average the recorded history into `r_final`.
pub fn finalize_r(state: &mut SolverState) -> Result<f64> {
    if state.history.is_empty() {
        return Err(Error::InvalidInput("cannot finalize r: history is empty".into()));
    }
    let mean = state.history.iter().sum::<f64>() / state.history.len() as f64;
    state.r_final = Some(mean);
    Ok(mean)
}
