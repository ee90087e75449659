mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fthd_core::data::{load_csv, save_csv, window, RawSample, WindowedSample};
use fthd_core::dynamics::{CoefficientBounds, EstimatedCoefficients, NUM_COEFFS};
use fthd_core::ekf::{adjust_ranges, denoise_dataset, finetune_ekf, EKF_OUTPUTS};
use fthd_core::eval::{coefficient_diff, compute_metrics, force_sweep, save_coefficient_diff};
use fthd_core::net::checkpoint::Checkpoint;
use fthd_core::net::{Estimator, GuardBounds};
use fthd_core::simulator::{generate_dataset, inject_noise, PurePursuit, SimSample};
use fthd_core::training::{
    default_freeze, finetune, pretrain, random_search, Phase, Pipeline, TrainOutcome,
    TrainReport, TrainRunConfig,
};
use fthd_core::Error;

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "fthd", version, about = "Physics-informed vehicle parameter estimation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training-set ratio.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// Also write a noisy copy of the simulated data.
    #[arg(long, global = true)]
    noise: bool,
    /// Random-search trials.
    #[arg(long, global = true)]
    trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the reference car and write the data set and ground truth.
    Simulate,
    /// Supervised pretraining of all layers.
    Pretrain,
    /// Layer-freezing hybrid fine-tuning of the pretrained checkpoint.
    Finetune,
    /// Train the EKF head on noisy data, write the filtered data set and adjusted ranges.
    Denoise,
    /// Velocity metrics, force curves and coefficient differences.
    Evaluate,
    /// Random hyperparameter search over pretrain + fine-tune runs.
    Tune,
    /// Lateral-force curves of the latest checkpoint.
    SweepForces,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = resolve(&cli.global)?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    println!("seed: {}", cfg.seed);
    println!("config: {}", serde_json::to_string(&cfg)?);
    match cli.command {
        Command::Simulate => simulate(&cfg, cli.global.noise),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Finetune => cmd_finetune(&cfg),
        Command::Denoise => denoise(&cfg),
        Command::Evaluate => evaluate(&cfg),
        Command::Tune => tune(&cfg),
        Command::SweepForces => sweep_forces(&cfg),
    }
}

fn resolve(args: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ratio) = args.ratio {
        cfg.ratio = ratio;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    cfg.simulation.run.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_samples(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<RawSample>> {
    let loaded = load_csv(cfg.path(path))?;
    if loaded.dropped_low_speed > 0 {
        eprintln!("dropped {} rows at or below the speed guard", loaded.dropped_low_speed);
    }
    Ok(loaded.samples)
}

fn raw(samples: &[SimSample]) -> Vec<RawSample> {
    samples.iter().map(RawSample::from).collect()
}

fn simulate(cfg: &ExperimentConfig, noise: bool) -> Result<()> {
    let sim = &cfg.simulation;
    let controller = PurePursuit::for_car(&sim.run.known);
    let samples = generate_dataset(&sim.run, &sim.track, &controller)?;
    let clean = cfg.path(&cfg.data.clean);
    save_csv(&clean, &raw(&samples))?;
    write_json(&cfg.out_dir.join("ground_truth.json"), &sim.run.ground_truth)?;
    println!("wrote {} samples to {}", samples.len(), clean.display());
    if noise {
        let noisy = inject_noise(&samples, sim.noise_sigma, cfg.seed)?;
        let path = cfg.path(&cfg.data.noisy);
        save_csv(&path, &raw(&noisy))?;
        println!("wrote noisy copy to {}", path.display());
    }
    Ok(())
}

fn pipeline<'a>(
    cfg: &ExperimentConfig,
    samples: &'a [RawSample],
    validation: Option<&'a [RawSample]>,
) -> Result<Pipeline<'a>> {
    Ok(Pipeline {
        samples,
        validation_samples: validation,
        ratio: cfg.ratio,
        bounds: GuardBounds::from_coefficients(&cfg.coefficient_bounds()?),
        known: cfg.simulation.run.known,
        pretrain_iterations: cfg.pretrain.iterations,
        finetune_iterations: cfg.finetune.iterations,
        weights: cfg.finetune.weights,
        validate_every: cfg.pretrain.validate_every,
        freeze: cfg.finetune.freeze,
    })
}

/// Training data, optional separate validation data.
fn datasets(cfg: &ExperimentConfig) -> Result<(Vec<RawSample>, Option<Vec<RawSample>>)> {
    let train = load_samples(cfg, &cfg.data.train)?;
    let val = cfg.data.validation.as_ref().map(|p| load_samples(cfg, p)).transpose()?;
    Ok((train, val))
}

fn split_windows(
    cfg: &ExperimentConfig,
    history: usize,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
    let (train, val) = datasets(cfg)?;
    Ok(pipeline(cfg, &train, val.as_deref())?.windows(history, cfg.seed)?)
}

fn save_phase(dir: &Path, outcome: &TrainOutcome, seed: u64) -> Result<TrainReport> {
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("checkpoint.json");
    Checkpoint { estimator: outcome.estimator.clone(), seed }.save(&ckpt)?;
    let mut report = outcome.report.clone();
    report.checkpoint = Some(ckpt);
    report.save_json(dir.join("report.json"))?;
    report.save_loss_curve(dir.join("loss_curve.csv"))?;
    println!("{:?}: L_min {:?} at iteration {:?}", report.phase, report.l_min, report.best_iteration);
    Ok(report)
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let net = cfg.network.trial(cfg.pretrain.batch_size, cfg.pretrain.learning_rate);
    let (train, val) = split_windows(cfg, net.history)?;
    let bounds = GuardBounds::from_coefficients(&cfg.coefficient_bounds()?);
    let est = Estimator::new(net.network(NUM_COEFFS), bounds, cfg.simulation.run.known, cfg.seed)?;
    let p = &cfg.pretrain;
    let run = TrainRunConfig {
        validate_every: p.validate_every,
        ..TrainRunConfig::pretrain(p.iterations, p.batch_size, p.learning_rate, cfg.seed)
    };
    let out = pretrain(est, &train, &val, &run)?;
    save_phase(&cfg.out_dir.join("pretrain"), &out, cfg.seed)?;
    Ok(())
}

fn cmd_finetune(cfg: &ExperimentConfig) -> Result<()> {
    let ckpt = Checkpoint::load(cfg.out_dir.join("pretrain").join("checkpoint.json"))?;
    let est = ckpt.estimator;
    let (train, val) = split_windows(cfg, est.config.history)?;
    let f = &cfg.finetune;
    let run = TrainRunConfig {
        phase: Phase::Finetune,
        iterations: f.iterations,
        batch_size: f.batch_size,
        learning_rate: f.learning_rate,
        seed: cfg.seed,
        weights: f.weights,
        freeze: f.freeze.unwrap_or_else(|| default_freeze(&est.config)),
        validate_every: f.validate_every,
    };
    let out = finetune(&est, &train, &val, &run)?;
    save_phase(&cfg.out_dir.join("finetune"), &out, cfg.seed)?;
    Ok(())
}

/// The fine-tuned checkpoint when present, else the pretrained one.
fn latest_checkpoint(cfg: &ExperimentConfig) -> Result<(PathBuf, Checkpoint)> {
    let fine = cfg.out_dir.join("finetune");
    let dir = if fine.join("checkpoint.json").exists() { fine } else { cfg.out_dir.join("pretrain") };
    let ckpt = Checkpoint::load(dir.join("checkpoint.json")).map_err(|e| match e {
        Error::MissingArtifact(_) => Error::MissingArtifact(cfg.out_dir.join("finetune").join("checkpoint.json")),
        other => other,
    })?;
    Ok((dir, ckpt))
}

fn ground_truth(cfg: &ExperimentConfig) -> Result<Option<EstimatedCoefficients>> {
    let path = cfg.out_dir.join("ground_truth.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

fn write_force_curves(
    cfg: &ExperimentConfig,
    dir: &Path,
    coeffs: &EstimatedCoefficients,
    gt: Option<&EstimatedCoefficients>,
) -> Result<()> {
    let range = (cfg.sweep.range[0], cfg.sweep.range[1]);
    let curve = force_sweep(coeffs, range, cfg.sweep.points)?;
    let gt_curve = gt.map(|g| force_sweep(g, range, cfg.sweep.points)).transpose()?;
    curve.save_csv(dir.join("force_curve.csv"), gt_curve.as_ref())?;
    if let Some(g) = &gt_curve {
        let rel = curve.relative_error(g)?;
        println!("force-curve RMSE / peak |F|: front {:.4}, rear {:.4}", rel[0], rel[1]);
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let (phase_dir, ckpt) = latest_checkpoint(cfg)?;
    let est = ckpt.estimator;
    let (_, val) = split_windows(cfg, est.config.history)?;
    let preds = est.predict(&val)?;
    let x: Vec<[f64; 3]> = preds.iter().map(|p| p.x_hat_next).collect();
    let labels: Vec<[f64; 3]> = val.iter().map(|w| w.label).collect();
    let history = match fs::read_to_string(phase_dir.join("report.json")) {
        Ok(text) => serde_json::from_str::<TrainReport>(&text)?.validation,
        Err(_) => Vec::new(),
    };
    let run_id = format!("seed{}-ratio{}", cfg.seed, cfg.ratio);
    let metrics = compute_metrics(&x, &labels, &history, cfg.ratio, &run_id)?;
    let dir = cfg.out_dir.join("eval");
    fs::create_dir_all(&dir)?;
    metrics.save_json(dir.join("metrics.json"))?;
    println!("RMSE {:?}, max error {:?}, L_min {:?}", metrics.rmse, metrics.max_error, metrics.l_min);

    let coeffs = est.mean_coefficients(&val)?;
    write_json(&dir.join("coefficients.json"), &coeffs)?;
    let gt = ground_truth(cfg)?;
    write_force_curves(cfg, &dir, &coeffs, gt.as_ref())?;
    if let Some(g) = &gt {
        let bounds = est.bounds.coefficient_bounds()?;
        let diffs = coefficient_diff(&coeffs.to_array(), &g.to_array(), &bounds)?;
        save_coefficient_diff(dir.join("coeff_diff.csv"), &diffs)?;
    }
    Ok(())
}

fn sweep_forces(cfg: &ExperimentConfig) -> Result<()> {
    let (_, ckpt) = latest_checkpoint(cfg)?;
    let (_, val) = split_windows(cfg, ckpt.estimator.config.history)?;
    let coeffs = ckpt.estimator.mean_coefficients(&val)?;
    let dir = cfg.out_dir.join("forces");
    fs::create_dir_all(&dir)?;
    write_force_curves(cfg, &dir, &coeffs, ground_truth(cfg)?.as_ref())
}

#[derive(Serialize)]
struct BestTrial<'a> {
    index: usize,
    seed: u64,
    config: &'a fthd_core::training::TrialConfig,
    l_min: Option<f64>,
}

fn tune(cfg: &ExperimentConfig) -> Result<()> {
    let (train, val) = datasets(cfg)?;
    let p = pipeline(cfg, &train, val.as_deref())?;
    let outcome = random_search(&cfg.search, cfg.trials, cfg.seed, |trial, seed| {
        let out = p.run(trial, seed)?;
        let last = out.last();
        Ok((last.report.clone(), last.estimator.clone()))
    })?;
    let dir = cfg.out_dir.join("tune");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("trials.json"), &outcome.trials)?;
    let (index, report, est) = outcome.best.context("every trial failed")?;
    let rec = &outcome.trials[index];
    write_json(&dir.join("best.json"), &BestTrial { index, seed: rec.seed, config: &rec.config, l_min: report.l_min })?;
    Checkpoint { estimator: est, seed: rec.seed }.save(dir.join("checkpoint.json"))?;
    println!("best trial {index}: {:?} L_min {:?}", rec.config, report.l_min);
    Ok(())
}

fn denoise(cfg: &ExperimentConfig) -> Result<()> {
    let noisy = load_samples(cfg, &cfg.data.noisy)?;
    let coeff_bounds = cfg.bounds_from(&cfg.ekf.initial_bounds)?;
    let bounds = cfg.cov_bounds().guard_bounds(&coeff_bounds)?;
    let net = cfg.network.trial(cfg.pretrain.batch_size, cfg.pretrain.learning_rate);
    let windows = window(&noisy, net.history)?;
    let known = cfg.simulation.run.known;
    let est = Estimator::new(net.network(EKF_OUTPUTS), bounds, known, cfg.seed)?;

    let e = &cfg.ekf;
    let pre_cfg = TrainRunConfig {
        validate_every: cfg.pretrain.validate_every,
        ..TrainRunConfig::pretrain(e.pretrain_iterations, net.batch_size, net.learning_rate, cfg.seed)
    };
    let pre = pretrain(est, &windows, &windows, &pre_cfg)?;
    let fine_cfg = TrainRunConfig {
        phase: Phase::Finetune,
        iterations: e.finetune_iterations,
        weights: cfg.finetune.weights,
        freeze: cfg.finetune.freeze.unwrap_or_else(|| default_freeze(&pre.estimator.config)),
        ..pre_cfg
    };
    let fine = finetune_ekf(&pre.estimator, &windows, &windows, &fine_cfg, &e.settings)?;
    save_phase(&cfg.out_dir.join("ekf"), &fine, cfg.seed)?;

    let filtered = denoise_dataset(&noisy, &fine.estimator, &e.settings)?;
    let data_path = cfg.path(&cfg.data.filtered);
    filtered.save(&data_path, cfg.path(&cfg.data.noise))?;
    println!("wrote filtered data to {}", data_path.display());

    // Re-estimate on the filtered data and widen any range the estimates press against.
    let adjusted = adjust_ranges(&coeff_bounds, &e.adjust, |b: &CoefficientBounds| {
        let fwin = window(&filtered.samples, net.history)?;
        let est = Estimator::new(net.network(NUM_COEFFS), GuardBounds::from_coefficients(b), known, cfg.seed)?;
        let run = TrainRunConfig {
            validate_every: cfg.pretrain.validate_every,
            ..TrainRunConfig::pretrain(e.adjust_iterations, net.batch_size, net.learning_rate, cfg.seed)
        };
        pretrain(est, &fwin, &fwin, &run)?.estimator.mean_coefficients(&fwin)
    })?;
    adjusted.save_json(cfg.out_dir.join("range_adjustment.json"))?;
    write_json(&cfg.out_dir.join("bounds_adjusted.json"), &adjusted.bounds)?;
    println!("range adjustment: {} rounds", adjusted.log.len());
    Ok(())
}
