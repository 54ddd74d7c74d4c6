//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hessianscope::model::ParamVector;
use hessianscope::rmt::{self, RmtOptions, SpikedModel};
use hessianscope::spectrum::{self, SpectrumReport};
use hessianscope::train::{self, TrainConfig};
use hessianscope::{autodiff, data, ggn, landscape};

use crate::config::{ExperimentConfig, LoadedData, Phase2Config};
use crate::error::{CliError, CliResult};
use crate::output::RunDir;
use crate::recipes;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "HESSIANSCOPE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hessianscope", version, about = "Exact Hessian spectra of small neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write the log and checkpoints.
    Train(TrainArgs),
    /// Exact Hessian spectrum at a checkpoint.
    Spectrum(SpectrumArgs),
    /// Split the Hessian at a checkpoint into Gauss-Newton and residual parts.
    Decompose(CheckpointArgs),
    /// Loss along the straight line between two checkpoints.
    Interpolate(InterpolateArgs),
    /// Sample Gaussian clusters and write them as CSV.
    BlobGen(BlobGenArgs),
    /// Simulate spiked sample covariances and compare with MP and BBP.
    RmtSim(RmtSimArgs),
    /// Run a canned experiment end to end.
    Recipe(RecipeArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Parent of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue with this batch size after the configured run.
    #[arg(long)]
    pub phase2_batch: Option<usize>,
    /// Phase II length; defaults to the phase I length.
    #[arg(long)]
    pub phase2_iterations: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Checkpoint metadata file (`ckpt_*.json`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config whose data section rebuilds the training set.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = autodiff::DEFAULT_DENSE_CAP)]
    pub cap: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArgs,
    /// Also write the Gauss-Newton decomposition report.
    #[arg(long)]
    pub decompose: bool,
    /// Fixed elbow cutoff instead of the scree-plot elbow.
    #[arg(long)]
    pub cutoff: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub to: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Evaluate on [-0.5, 1.5] instead of [0, 1].
    #[arg(long)]
    pub extended: bool,
    #[arg(long, default_value_t = landscape::DEFAULT_EPS_REL)]
    pub eps_rel: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct BlobGenArgs {
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub dim: usize,
    #[arg(long, default_value_t = 500)]
    pub per_cluster: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cov_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct RmtSimArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_delimiter = ',')]
    pub spikes: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub bins: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    /// One of blobs-outliers, width-scaling, lbsb-spectrum, negative-tail,
    /// batch-switch-interp, rmt-logreg, rmt-spiked.
    pub name: String,
    /// Start from this config instead of the recipe defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub spike: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Exit with status 4 when any recipe check fails.
    #[arg(long)]
    pub strict: bool,
    /// Print the resolved config and exit without running.
    #[arg(long)]
    pub print_config: bool,
    /// Parent of the run directory; overrides the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Applies `HESSIANSCOPE_THREADS` to the global worker pool.
pub fn configure_threads() -> CliResult<()> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .to_str()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

pub fn execute(command: Command) -> CliResult<PathBuf> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Spectrum(a) => cmd_spectrum(&a),
        Command::Decompose(a) => cmd_decompose(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::BlobGen(a) => cmd_blob_gen(&a),
        Command::RmtSim(a) => cmd_rmt_sim(&a),
        Command::Recipe(a) => cmd_recipe(&a),
    }
}

fn load_data(cfg: &ExperimentConfig) -> CliResult<LoadedData> {
    cfg.data()?.load(cfg.seed)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<PathBuf> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    let spec = cfg.model()?.clone();
    let tcfg = cfg.train()?.clone();
    if let Some(batch_size) = a.phase2_batch {
        cfg.phase2 = Some(Phase2Config {
            batch_size,
            iterations: a.phase2_iterations.unwrap_or(tcfg.iterations),
        });
    }
    let data = load_data(&cfg)?;
    let dir = RunDir::timestamped(&a.out.out, "train")?;
    dir.write_json("config.json", &cfg)?;
    let start = train::init_params(&spec, tcfg.seed);
    let ckpts = dir.subdir("checkpoints")?;
    let mut log = Vec::new();
    let mut trajectories = Vec::new();
    match &cfg.phase2 {
        None => trajectories.push(train::run_with_test(&spec, &tcfg, &data.train, data.test.as_ref(), &start)?),
        Some(p2) => {
            let small = TrainConfig {
                batch_size: p2.batch_size,
                iterations: p2.iterations,
                ..tcfg.clone()
            };
            let (first, second) =
                train::two_phase_run_with_test(&spec, &tcfg, &small, &data.train, data.test.as_ref(), &start)?;
            trajectories.push(first);
            trajectories.push(second);
        }
    }
    for (i, traj) in trajectories.iter().enumerate() {
        let skip = usize::from(i > 0);
        log.extend(traj.log.iter().skip(skip).cloned());
        for c in traj.checkpoints.iter().skip(skip) {
            train::write_checkpoint(ckpts.path(), &spec, c.iteration, tcfg.seed, &c.params)?;
        }
    }
    train::write_log_csv(&log, &dir.file("log.csv"))?;
    Ok(dir.path().to_path_buf())
}

fn checkpoint_and_data(a: &CheckpointArgs) -> CliResult<(ExperimentConfig, hessianscope::train::CheckpointMeta, ParamVector, LoadedData)> {
    let cfg = ExperimentConfig::from_file(&a.config)?;
    let (meta, params) = train::read_checkpoint(&a.checkpoint)?;
    let data = load_data(&cfg)?;
    if data.train.dim() != meta.spec.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} inputs but the data has {}",
            meta.spec.input_dim(),
            data.train.dim()
        )));
    }
    Ok((cfg, meta, params, data))
}

pub fn cmd_spectrum(a: &SpectrumArgs) -> CliResult<PathBuf> {
    let c = &a.checkpoint;
    let (cfg, meta, params, data) = checkpoint_and_data(c)?;
    let dir = RunDir::timestamped(&c.out.out, "spectrum")?;
    dir.write_json("config.json", &cfg)?;
    let batch = data.train.batch();
    let cutoff = a.cutoff.or(cfg.spectrum.cutoff);
    if a.decompose || cfg.spectrum.decompose {
        let d = ggn::decompose(&meta.spec, &params, &batch, c.cap)?;
        let report = ggn::DecompositionReport::new(&d, batch.len(), meta.spec.output_dim(), ggn::DEFAULT_TAU_REL)?;
        report.write_json(&dir.file("decomposition.json"))?;
        let spec_report = SpectrumReport::from_eigenvalues(report.eig_h.clone(), cutoff)?;
        write_spectrum(&dir, &spec_report)?;
    } else {
        let h = autodiff::full_hessian_capped(&meta.spec, &params, &batch, c.cap)?;
        write_spectrum(&dir, &SpectrumReport::of_matrix(&h, cutoff)?)?;
    }
    Ok(dir.path().to_path_buf())
}

fn write_spectrum(dir: &RunDir, report: &SpectrumReport) -> CliResult<()> {
    report.write_json(&dir.file("spectrum.json"))?;
    report.write_csv(&dir.file("eigenvalues.csv"))?;
    Ok(())
}

pub fn cmd_decompose(a: &CheckpointArgs) -> CliResult<PathBuf> {
    let (cfg, meta, params, data) = checkpoint_and_data(a)?;
    let dir = RunDir::timestamped(&a.out.out, "decompose")?;
    dir.write_json("config.json", &cfg)?;
    let batch = data.train.batch();
    let d = ggn::decompose(&meta.spec, &params, &batch, a.cap)?;
    let report = ggn::DecompositionReport::new(&d, batch.len(), meta.spec.output_dim(), ggn::DEFAULT_TAU_REL)?;
    report.write_json(&dir.file("decomposition.json"))?;
    dir.write_json("summary.json", &recipes::decomposition_summary(&report))?;
    for (name, eigs) in [("h", &report.eig_h), ("g", &report.eig_g), ("r", &report.eig_r)] {
        spectrum::write_eigenvalue_csv(eigs, &dir.file(&format!("eigenvalues_{name}.csv")))?;
    }
    Ok(dir.path().to_path_buf())
}

pub fn cmd_interpolate(a: &InterpolateArgs) -> CliResult<PathBuf> {
    let cfg = ExperimentConfig::from_file(&a.config)?;
    let (meta_a, pa) = train::read_checkpoint(&a.from)?;
    let (meta_b, pb) = train::read_checkpoint(&a.to)?;
    if meta_a.spec != meta_b.spec {
        return Err(CliError::Config("checkpoints belong to different networks".into()));
    }
    let data = load_data(&cfg)?;
    let dir = RunDir::timestamped(&a.out.out, "interpolate")?;
    dir.write_json("config.json", &cfg)?;
    let grid = if a.extended {
        landscape::extended_grid()
    } else {
        landscape::default_grid()
    };
    let profile = landscape::line_eval(&meta_a.spec, &pa, &pb, &grid, &data.train, data.test.as_ref())?
        .with_endpoints(label(&a.from), label(&a.to));
    profile.write_csv(&dir.file("interpolation.csv"))?;
    let barrier = landscape::barrier_metrics(&profile, a.eps_rel)?;
    dir.write_json("barrier.json", &barrier)?;
    Ok(dir.path().to_path_buf())
}

fn label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn cmd_blob_gen(a: &BlobGenArgs) -> CliResult<PathBuf> {
    let ds = data::gen_blobs(a.k, a.dim, a.per_cluster, a.cov_scale, a.seed)?;
    let dir = RunDir::timestamped(&a.out.out, "blobs")?;
    ds.write_csv(&dir.file("blobs.csv"))?;
    dir.write_json(
        "blobs.json",
        &json!({
            "k": a.k, "dim": a.dim, "per_cluster": a.per_cluster, "cov_scale": a.cov_scale, "seed": a.seed,
            "norm_stats": { "mean": ds.norm_stats.mean, "std": ds.norm_stats.std },
        }),
    )?;
    Ok(dir.path().to_path_buf())
}

pub fn cmd_rmt_sim(a: &RmtSimArgs) -> CliResult<PathBuf> {
    let model = SpikedModel::new(a.m, a.n, a.spikes.clone())?;
    let dir = RunDir::timestamped(&a.out.out, "rmt")?;
    let opts = RmtOptions::default();
    for t in 0..a.trials.max(1) {
        let g = rmt::sample_spiked_covariance(&model, a.seed + t as u64)?;
        let eigs = spectrum::eigenvalues(&g)?;
        spectrum::write_eigenvalue_csv(&eigs, &dir.file(&format!("eigenvalues_{t}.csv")))?;
        let report = rmt::spectrum_vs_theory(&eigs, &model, &opts)?;
        report.write_json(&dir.file(&format!("report_{t}.json")))?;
        let (_, r) = rmt::mp_edges(model.alpha())?;
        let hi = eigs.iter().copied().fold(r, f64::max) * 1.0001;
        rmt::write_histogram_csv(&rmt::histogram(&eigs, a.bins, 0.0, hi)?, &dir.file(&format!("histogram_{t}.csv")))?;
    }
    Ok(dir.path().to_path_buf())
}

/// Recipe defaults (or `--config`) with command-line overrides applied.
pub fn resolve_recipe_config(a: &RecipeArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => recipes::default_config(&a.name)?,
    };
    match &cfg.recipe {
        Some(r) if *r != a.name => {
            return Err(CliError::Config(format!("config is for recipe `{r}`, not `{}`", a.name)))
        }
        _ => cfg.recipe = Some(a.name.clone()),
    }
    if !a.k.is_empty() {
        cfg.sweep.k = a.k.clone();
    }
    if !a.hidden.is_empty() {
        cfg.sweep.hidden = a.hidden.clone();
    }
    if !a.seeds.is_empty() {
        cfg.sweep.seeds = a.seeds.clone();
    }
    if !a.spike.is_empty() {
        cfg.rmt.spikes = a.spike.clone();
    }
    if let Some(t) = a.trials {
        cfg.rmt.trials = t;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        if let Some(t) = cfg.train.as_mut() {
            t.seed = seed;
        }
    }
    if let Some(t) = cfg.train.as_mut() {
        if let Some(it) = a.iterations {
            t.iterations = it;
        }
        if let Some(lr) = a.learning_rate {
            t.learning_rate = lr;
        }
    }
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

pub fn cmd_recipe(a: &RecipeArgs) -> CliResult<PathBuf> {
    let cfg = resolve_recipe_config(a)?;
    if a.print_config {
        println!("{}", cfg.to_json());
        return Ok(PathBuf::new());
    }
    let dir = RunDir::timestamped(&cfg.output_dir, &a.name)?;
    let summary = recipes::run(&cfg, &dir)?;
    for c in &summary.checks {
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if a.strict && !summary.passed {
        eprintln!("results in {}", dir.path().display());
        return Err(CliError::ChecksFailed {
            failed: summary.failed(),
        });
    }
    Ok(dir.path().to_path_buf())
}
