//! Train and impute on a generated dataset, printing metrics.
//!
//! Usage: `cargo run --release --example synthetic_run -- [seed] [epochs] [channels]`

use std::time::Instant;

use stimpute::config::Config;
use stimpute::data::{generate_synthetic, mask_random, normalize, random_coords, split_7_1_2};
use stimpute::eval::{baseline_linear_interp, baseline_mean_impute, masked_mae, spectrum, top_bins};
use stimpute::graph::SpatialGraph;
use stimpute::impute::{impute_series, SamplerOptions};
use stimpute::train::{train_with_progress, TrainView};

fn main() -> stimpute::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let mut cfg = Config::default();
    if let Some(e) = args.get(2) {
        cfg.epochs = e.parse().unwrap();
    }
    if let Some(c) = args.get(3) {
        cfg.channels = c.parse().unwrap();
    }
    let graph = SpatialGraph::new(random_coords(cfg.n_nodes, cfg.region_size, cfg.units, seed), cfg.units, cfg.sigma)?;
    let data = generate_synthetic(&graph, cfg.length, cfg.n_waves, cfg.noise_std, seed)?;
    let (masked, eval_mask) = mask_random(&data.series, cfg.p_missing, seed)?;
    let split = split_7_1_2(cfg.length, cfg.window)?;
    let norm = normalize(&masked, split.train.clone());
    let view = TrainView::new(&norm, cfg.window)?;

    let clock = Instant::now();
    let out = train_with_progress(graph, &view, &cfg, seed, |e| {
        if e.epoch % 10 == 0 || e.epoch == 1 {
            eprintln!("epoch {} loss {:.4} r {:.4} ({:.0}s)", e.epoch, e.loss, e.r, clock.elapsed().as_secs_f64());
        }
    })?;
    eprintln!("trained in {:.1}s, r_final {:.4}, val {:.4}", clock.elapsed().as_secs_f64(), out.solver.sampling_r(), out.val_loss);

    let sched = cfg.schedule()?;
    let test_mask = {
        let mut m = eval_mask.clone();
        m.slice_mut(ndarray::s![.., ..split.test.start]).fill(0.0);
        m
    };
    let mean = baseline_mean_impute(masked.values.view(), masked.mask.view())?;
    let lin = baseline_linear_interp(masked.values.view(), masked.mask.view())?;
    for init in [stimpute::config::SamplerInit::Interp, stimpute::config::SamplerInit::Noise] {
        let clock = Instant::now();
        let opts = SamplerOptions { n_samples: cfg.n_samples, r: out.solver.sampling_r(), init, seed };
        let imp = impute_series(&out.model, &sched, &masked, &norm.norm_mean, &norm.norm_std, &opts)?;
        let mae = masked_mae(imp.values.view(), data.truth.view(), test_mask.view())?;
        let row: Vec<f64> = imp.values.row(0).to_vec();
        eprintln!(
            "{init:?}: mae {mae:.4} ({:.1}s) top3 {:?} bins {:?}",
            clock.elapsed().as_secs_f64(),
            top_bins(&spectrum(&row)?, 3),
            data.bins
        );
    }
    eprintln!(
        "mean {:.4} linear {:.4}",
        masked_mae(mean.view(), data.truth.view(), test_mask.view())?,
        masked_mae(lin.view(), data.truth.view(), test_mask.view())?
    );
    Ok(())
}
