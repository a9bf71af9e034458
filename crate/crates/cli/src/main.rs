use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::s;

use stimpute::checkpoint::Checkpoint;
use stimpute::config::Config;
use stimpute::data::{generate_synthetic, mask_random, normalize, random_coords, split_7_1_2};
use stimpute::eval::{evaluate, spectrum, EvalInputs};
use stimpute::graph::SpatialGraph;
use stimpute::impute::{impute_series, SamplerOptions};
use stimpute::train::{train_with_progress, TrainView};
use stimpute::{io, Error};

const GRAPH: &str = "graph.csv";
const SERIES: &str = "series.csv";
const MASK: &str = "mask.csv";
const TRUTH: &str = "series_truth.csv";
const EVAL_MASK: &str = "eval_mask.csv";

/// Diffusion-based imputation of spatial time series.
#[derive(Parser)]
#[command(name = "stimpute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random draw of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Output directory (created if needed).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding graph.csv and series.csv.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch `epoch,loss,r` log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Impute the missing entries of a dataset with a trained checkpoint.
    Impute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding series.csv.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for imputed.csv and spread.csv.
        #[arg(long)]
        out: PathBuf,
        /// Reverse chains per window; overrides the config.
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Score an imputation against ground truth, alongside both baselines.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding series.csv, series_truth.csv and eval_mask.csv.
        #[arg(long)]
        data: PathBuf,
        /// Imputed series (long format, every entry present).
        #[arg(long)]
        imputed: PathBuf,
        /// Time range scored.
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Method name written to the report.
        #[arg(long, default_value = "diffusion")]
        method: String,
        /// Dataset name written to the report; defaults to the data directory name.
        #[arg(long)]
        dataset: Option<String>,
        /// Metrics JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Amplitude spectrum of one node's series.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// Series file in long format with every entry present.
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        node_id: usize,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Test,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 1 },
            msg: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(common: &Common) -> std::result::Result<Config, Failure> {
    match &common.config {
        None => Ok(Config::default()),
        Some(path) => Config::load(path).map_err(|e| Failure {
            code: 2,
            msg: e.to_string(),
        }),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn output(path: Option<&Path>) -> std::result::Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_graph(data: &Path, cfg: &Config) -> std::result::Result<SpatialGraph, Failure> {
    let (coords, units) = io::read_graph(&data.join(GRAPH))?;
    Ok(SpatialGraph::new(coords, units, cfg.sigma)?)
}

fn generate_data(common: &Common, out: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let seed = common.seed;
    let graph = SpatialGraph::new(random_coords(cfg.n_nodes, cfg.region_size, cfg.units, seed), cfg.units, cfg.sigma)?;
    let data = generate_synthetic(&graph, cfg.length, cfg.n_waves, cfg.noise_std, seed)?;
    let (observed, eval_mask) = mask_random(&data.series, cfg.p_missing, seed)?;
    create_dir(out)?;
    io::write_graph(&out.join(GRAPH), &graph.coords, graph.units)?;
    io::write_series(&out.join(SERIES), &observed)?;
    io::write_mask(&out.join(MASK), observed.mask.view())?;
    io::write_values(&out.join(TRUTH), data.truth.view())?;
    io::write_mask(&out.join(EVAL_MASK), eval_mask.view())?;
    println!(
        "nodes {} length {} waves {:?} observed {:.4} held out {} sigma {}",
        graph.n_nodes(),
        cfg.length,
        data.bins,
        observed.observed_fraction(),
        eval_mask.iter().filter(|m| **m == 1.0).count(),
        graph.sigma
    );
    Ok(())
}

fn train(common: &Common, data: &Path, out: &Path, log: Option<&Path>) -> Outcome {
    let cfg = load_config(common)?;
    let graph = load_graph(data, &cfg)?;
    let series = io::read_series(&data.join(SERIES), graph.n_nodes())?;
    let split = split_7_1_2(series.len(), cfg.window)?;
    let norm = normalize(&series, split.train.clone());
    let view = TrainView::new(&norm, cfg.window)?;
    let outcome = train_with_progress(graph, &view, &cfg, common.seed, |e| {
        eprintln!("epoch {} loss {:.6} r {:.6}", e.epoch, e.loss, e.r);
    })?;
    let ck = Checkpoint::new(
        &outcome.model,
        &cfg,
        common.seed,
        &outcome.solver,
        &norm.norm_mean,
        &norm.norm_std,
        outcome.val_loss,
    );
    ck.save(out)?;
    let log_path = log.map_or_else(|| PathBuf::from(format!("{}.log.csv", out.display())), Path::to_path_buf);
    io::write_log(&log_path, &outcome.log)?;
    println!(
        "epochs {} r_final {} val_loss {}",
        outcome.log.len(),
        outcome.solver.sampling_r(),
        outcome.val_loss
    );
    Ok(())
}

fn impute(common: &Common, checkpoint: &Path, data: &Path, out: &Path, n_samples: Option<usize>) -> Outcome {
    let ck = Checkpoint::load(checkpoint)?;
    // Sampler settings come from --config when given, else from the checkpoint.
    let (samples, init) = match &common.config {
        Some(_) => {
            let cfg = load_config(common)?;
            (cfg.n_samples, cfg.sampler_init)
        }
        None => (ck.config.n_samples, ck.config.sampler_init),
    };
    let n_samples = n_samples.unwrap_or(samples);
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()).into());
    }
    let model = ck.model()?;
    let series = io::read_series(&data.join(SERIES), model.graph.n_nodes())?;
    let opts = SamplerOptions {
        n_samples,
        r: ck.solver.sampling_r(),
        init,
        seed: common.seed,
    };
    let imp = impute_series(&model, &ck.config.schedule()?, &series, &ck.norm_mean, &ck.norm_std, &opts)?;
    create_dir(out)?;
    io::write_values(&out.join("imputed.csv"), imp.values.view())?;
    io::write_spread(&out.join("spread.csv"), imp.spread.view())?;
    println!(
        "imputed {} missing of {} entries with {} samples, r {}",
        series.mask.iter().filter(|m| **m == 0.0).count(),
        series.mask.len(),
        n_samples,
        opts.r
    );
    Ok(())
}

struct EvalArgs<'a> {
    data: &'a Path,
    imputed: &'a Path,
    split: Split,
    method: &'a str,
    dataset: Option<&'a str>,
    out: Option<&'a Path>,
}

fn evaluate_cmd(common: &Common, a: EvalArgs) -> Outcome {
    let cfg = load_config(common)?;
    let (coords, _) = io::read_graph(&a.data.join(GRAPH))?;
    let n = coords.len();
    let series = io::read_series(&a.data.join(SERIES), n)?;
    let truth = io::read_values(&a.data.join(TRUTH), n)?;
    let mut eval_mask = io::read_mask(&a.data.join(EVAL_MASK), n)?;
    let imputed = io::read_values(a.imputed, n)?;
    let len = series.len();
    for (name, got) in [("truth", truth.ncols()), ("eval mask", eval_mask.ncols()), ("imputed", imputed.ncols())] {
        if got != len {
            return Err(Error::InvalidInput(format!("{name} has {got} time steps, series has {len}")).into());
        }
    }
    if let Split::Test = a.split {
        let test = split_7_1_2(len, cfg.window)?.test;
        eval_mask.slice_mut(s![.., ..test.start]).fill(0.0);
    }
    // Share of entries present in the truth that were held out.
    let p_missing = eval_mask.iter().filter(|m| **m == 1.0).count() as f64 / eval_mask.len() as f64;
    let dataset = a.dataset.map(str::to_string).unwrap_or_else(|| {
        a.data
            .file_name()
            .map_or_else(|| a.data.display().to_string(), |f| f.to_string_lossy().into_owned())
    });
    let inputs = EvalInputs {
        imputed: imputed.view(),
        truth: truth.view(),
        eval_mask: eval_mask.view(),
        observed_mask: series.mask.view(),
        observed: series.values.view(),
    };
    let report = evaluate(&inputs, &dataset, Some(p_missing), common.seed, a.method)?;
    let mut w = output(a.out)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| io_err(a.out.unwrap_or(Path::new("<stdout>")), e))
}

fn spectrum_cmd(common: &Common, series: &Path, node: usize, out: Option<&Path>) -> Outcome {
    load_config(common)?;
    let s = io::read_series_any(series)?;
    if node >= s.n_nodes() {
        return Err(Error::InvalidInput(format!("node_id {node} not in 0..{}", s.n_nodes())).into());
    }
    if s.mask.row(node).iter().any(|m| *m == 0.0) {
        return Err(Error::InvalidInput(format!("node {node} has missing entries; impute before taking a spectrum")).into());
    }
    let row: Vec<f64> = s.values.row(node).to_vec();
    let amps = spectrum(&row)?;
    let mut w = output(out)?;
    io::write_spectrum(&mut w, &amps)?;
    w.flush().map_err(|e| io_err(out.unwrap_or(Path::new("<stdout>")), e))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenerateData { common, out } => generate_data(&common, &out),
        Command::Train { common, data, out, log } => train(&common, &data, &out, log.as_deref()),
        Command::Impute {
            common,
            checkpoint,
            data,
            out,
            n_samples,
        } => impute(&common, &checkpoint, &data, &out, n_samples),
        Command::Evaluate {
            common,
            data,
            imputed,
            split,
            method,
            dataset,
            out,
        } => evaluate_cmd(
            &common,
            EvalArgs {
                data: &data,
                imputed: &imputed,
                split,
                method: &method,
                dataset: dataset.as_deref(),
                out: out.as_deref(),
            },
        ),
        Command::Spectrum {
            common,
            series,
            node_id,
            out,
        } => spectrum_cmd(&common, &series, node_id, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
