//! Training loop: self-supervised target masking, Adam over the network
//! parameters and the noise scale `r`, and a deterministic validation loss.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::Config;
use crate::data::{split_7_1_2, window_starts, SeriesTensor};
use crate::denoiser::{Denoiser, DenoiserInput, ModelPlan, SampleGrads};
use crate::diffusion::{self, NoiseSchedule, SolverState};
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::{par, rng};

// Stream tags, so each consumer of randomness gets its own sequence.
const TAG_INIT: u64 = 1;
const TAG_R: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_BATCH: u64 = 4;
const TAG_VAL: u64 = 5;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    /// Bias-corrected step direction `m_hat / (sqrt(v_hat) + eps)`; the
    /// caller applies `-lr * direction`.
    pub fn direction(&mut self, grads: &[f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        grads
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub r: f64,
}

/// What the model may see during training: normalized values and the
/// observation mask. Ground truth never enters this type.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub values: Array2<f64>,
    pub mask: Array2<f64>,
    pub train: Range<usize>,
    pub val: Range<usize>,
}

impl TrainView {
    /// Split a normalized series and keep the train/val ranges.
    pub fn new(series: &SeriesTensor, window: usize) -> Result<Self> {
        let split = split_7_1_2(series.len(), window)?;
        Ok(TrainView {
            values: series.values.clone(),
            mask: series.mask.clone(),
            train: split.train,
            val: split.val,
        })
    }

    pub fn train_windows(&self, window: usize, stride: usize) -> Vec<usize> {
        window_starts(self.train.clone(), window, stride)
    }

    /// Windows inside the validation segment, or the single window ending at
    /// its end when the segment is shorter than a window.
    pub fn val_windows(&self, window: usize, stride: usize) -> Vec<usize> {
        let inside = window_starts(self.val.clone(), window, stride);
        if inside.is_empty() {
            vec![self.val.end.saturating_sub(window)]
        } else {
            inside
        }
    }
}

/// One training example drawn from a window.
struct Example {
    x0: Array2<f64>,
    cond: Array2<f64>,
    target: Array2<f64>,
    eps: Array2<f64>,
    t: usize,
}

fn draw_example(
    values: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    target_ratio: f64,
    sched: &NoiseSchedule,
    rng: &mut rng::Rng,
) -> Option<Example> {
    let observed: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m == 1.0).map(|(i, _)| i).collect();
    if observed.is_empty() {
        return None;
    }
    let mut target = Array2::zeros(mask.dim());
    let flat = target.as_slice_mut().expect("standard layout");
    for &i in &observed {
        if rng.random::<f64>() < target_ratio {
            flat[i] = 1.0;
        }
    }
    if flat.iter().all(|v| *v == 0.0) {
        flat[observed[rng.random_range(0..observed.len())]] = 1.0;
    }
    let cond = &mask - &target;
    let t = rng.random_range(1..=sched.steps());
    let mut eps = Array2::zeros(mask.dim());
    rng::fill_normal(rng, eps.as_slice_mut().expect("standard layout"));
    Some(Example {
        x0: values.to_owned(),
        cond,
        target,
        eps,
        t,
    })
}

struct ExampleResult {
    loss: f64,
    grad_r: f64,
    grads: SampleGrads,
}

fn run_example(model: &Denoiser, plan: &ModelPlan, sched: &NoiseSchedule, r: f64, ex: &Example) -> Result<ExampleResult> {
    let x_t = diffusion::forward_sample(ex.x0.view(), ex.t, ex.eps.view(), sched)?;
    let input = DenoiserInput {
        x_noisy: x_t.view(),
        x_observed: ex.x0.view(),
        mask: ex.cond.view(),
        t: ex.t,
    };
    let (eps_hat, cache) = model.forward(plan, &input)?;
    let loss = diffusion::training_loss(eps_hat.view(), ex.eps.view(), r, ex.target.view())?;
    let grads = model.backward(plan, &cache, loss.grad_eps_hat.view());
    Ok(ExampleResult {
        loss: loss.value,
        grad_r: loss.grad_r,
        grads,
    })
}

fn window(a: &Array2<f64>, start: usize, len: usize) -> ArrayView2<'_, f64> {
    a.slice(s![.., start..start + len])
}

/// Mean loss over the validation windows with fixed noise draws.
pub fn validation_loss(model: &Denoiser, sched: &NoiseSchedule, r: f64, view: &TrainView, cfg: &Config, seed: u64) -> Result<f64> {
    let plan = model.plan()?;
    let w = model.config.seq_len;
    let starts = view.val_windows(w, cfg.stride);
    let losses = par::map_range(starts.len(), |k| -> Result<Option<f64>> {
        let mut rng = rng::stream(seed, &[TAG_VAL, k as u64]);
        let Some(ex) = draw_example(window(&view.values, starts[k], w), window(&view.mask, starts[k], w), cfg.target_ratio, sched, &mut rng) else {
            return Ok(None);
        };
        let x_t = diffusion::forward_sample(ex.x0.view(), ex.t, ex.eps.view(), sched)?;
        let input = DenoiserInput {
            x_noisy: x_t.view(),
            x_observed: ex.x0.view(),
            mask: ex.cond.view(),
            t: ex.t,
        };
        let eps_hat = model.predict(&plan, &input)?;
        Ok(Some(diffusion::training_loss(eps_hat.view(), ex.eps.view(), r, ex.target.view())?.value))
    });
    let losses: Vec<f64> = losses.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if losses.is_empty() {
        return Err(Error::InvalidInput("validation segment has no observed entries".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Denoiser,
    pub solver: SolverState,
    pub log: Vec<EpochLog>,
    pub val_loss: f64,
}

/// Train from scratch on `view` and finalize `r`.
pub fn train(graph: SpatialGraph, view: &TrainView, cfg: &Config, seed: u64) -> Result<TrainOutcome> {
    train_with_progress(graph, view, cfg, seed, |_| {})
}

pub fn train_with_progress(
    graph: SpatialGraph,
    view: &TrainView,
    cfg: &Config,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if view.values.nrows() != graph.n_nodes() {
        return Err(Error::shape("series rows vs graph nodes", graph.n_nodes(), view.values.nrows()));
    }
    let sched = cfg.schedule()?;
    let mut solver = cfg.solver()?;
    let mut model = Denoiser::new(cfg.denoiser(graph.n_nodes()), graph, &mut rng::stream(seed, &[TAG_INIT]))?;

    let w = cfg.window;
    let starts = view.train_windows(w, cfg.stride);
    if starts.is_empty() {
        return Err(Error::InvalidInput("training segment holds no complete window".into()));
    }
    let mut params = model.params.to_flat();
    let mut adam = Adam::new(params.len() + 1, cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Each epoch starts from a fresh candidate inside the window and
        // refines it with gradient steps; the end-of-epoch values are averaged.
        solver.r = diffusion::sample_r_candidate(&solver, &mut rng::stream(seed, &[TAG_R, epoch as u64]));
        let mut order = starts.clone();
        order.shuffle(&mut rng::stream(seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let plan = model.plan()?;
            let r = solver.r;
            let results = par::map_range(batch.len(), |i| -> Result<Option<ExampleResult>> {
                let mut rng = rng::stream(seed, &[TAG_BATCH, epoch as u64, b as u64, i as u64]);
                let start = batch[i];
                match draw_example(window(&view.values, start, w), window(&view.mask, start, w), cfg.target_ratio, &sched, &mut rng) {
                    Some(ex) => run_example(&model, &plan, &sched, r, &ex).map(Some),
                    None => Ok(None),
                }
            });
            let results: Vec<ExampleResult> = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
            if results.is_empty() {
                continue;
            }
            let k = 1.0 / results.len() as f64;
            let mut iter = results.into_iter();
            let first = iter.next().expect("nonempty");
            let (mut loss, mut grad_r, mut acc) = (first.loss, first.grad_r, first.grads);
            for res in iter {
                loss += res.loss;
                grad_r += res.grad_r;
                acc.add(&res.grads);
            }
            acc.scale(k);
            let grads = model.finish_grads(&plan, acc);
            let mut flat = grads.to_flat();
            flat.push(grad_r * k);
            if flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite gradient at epoch {}", epoch + 1)));
            }
            let dir = adam.direction(&flat);
            let (dir_r, dir_p) = dir.split_last().expect("nonempty");
            for (p, d) in params.iter_mut().zip(dir_p) {
                *p -= cfg.lr * d;
            }
            model.params.set_flat(&params)?;
            diffusion::update_r(&mut solver, *dir_r, cfg.lr)?;
            loss_sum += loss * k;
            batches += 1;
        }
        solver.end_epoch();
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            r: solver.r,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    diffusion::finalize_r(&mut solver)?;
    let val_loss = validation_loss(&model, &sched, solver.sampling_r(), view, cfg, seed)?;
    Ok(TrainOutcome {
        model,
        solver,
        log,
        val_loss,
    })
}
