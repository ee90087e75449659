//! Losses, Adam, supervised pretraining, layer-freezing fine-tuning and a
//! seeded random hyperparameter search.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, window, RawSample, SplitSpec, WindowedSample};
use crate::dynamics::KnownCoefficients;
use crate::error::{Error, Result};
use crate::net::{Batch, Estimator, GuardBounds, NetworkConfig, ParamGrads, ParameterSet, Tape, Var};
use crate::rng::{streams, substream};

/// Total iterations for the clean simulation experiments.
pub const SIM_BUDGET: usize = 15_000;
/// Total iterations for the noisy-data experiments.
pub const NOISY_BUDGET: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 0.99975, w2: 0.00025 }
    }
}

impl LossWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        let w = Self { w1, w2 };
        w.validate()?;
        Ok(w)
    }

    pub fn supervised_only() -> Self {
        Self { w1: 1.0, w2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1 >= 0.0 && self.w2 >= 0.0 && (self.w1 + self.w2 - 1.0).abs() <= 1e-12 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative and sum to 1, got {} + {}",
                self.w1, self.w2
            )))
        }
    }
}

fn mse(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert_eq!(a.len(), b.len(), "loss inputs differ in length");
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 =
        a.iter().zip(b).flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).powi(2))).sum();
    sum / (3 * a.len()) as f64
}

/// Mean over windows and channels of the squared prediction error.
pub fn loss_supervised(x_hat_next: &[[f64; 3]], labels: &[[f64; 3]]) -> f64 {
    mse(x_hat_next, labels)
}

/// Mean squared gap between `∂x̂/∂t_next` and the physics acceleration.
pub fn loss_unsupervised(time_derivative: &[[f64; 3]], beta: &[[f64; 3]]) -> f64 {
    mse(time_derivative, beta)
}

pub fn loss_total(l1: f64, l2: f64, weights: &LossWeights) -> f64 {
    weights.w1 * l1 + weights.w2 * l2
}

/// `mean((a − b)²)` on the tape.
pub fn tape_mse(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d2 = tape.square(d);
    tape.mean(d2)
}

/// Records the weighted loss for one batch. With `w2 = 0` no tangents are
/// recorded and the loss is exactly `w1·Loss₁`.
pub fn record_loss(
    est: &Estimator,
    tape: &mut Tape,
    batch: &Batch,
    weights: &LossWeights,
    track: bool,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let unsupervised = weights.w2 > 0.0;
    let g = est.record(tape, batch, track, unsupervised)?;
    let y = tape.constant(batch.labels.clone());
    let l1 = tape_mse(tape, g.x_hat.v, y);
    let l1 = tape.scale(l1, weights.w1);
    let loss = if unsupervised {
        let dx = g.x_hat.t.expect("tangent recorded");
        let l2 = tape_mse(tape, dx, g.beta.v);
        let l2 = tape.scale(l2, weights.w2);
        tape.add(l1, l2)
    } else {
        l1
    };
    Ok((loss, g.params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub phase: Phase,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Leading blocks kept fixed during fine-tuning.
    pub freeze: usize,
    pub validate_every: usize,
}

impl TrainRunConfig {
    pub fn pretrain(iterations: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            phase: Phase::Pretrain,
            iterations,
            batch_size,
            learning_rate,
            seed,
            weights: LossWeights::supervised_only(),
            freeze: 0,
            validate_every: 100,
        }
    }

    pub fn finetune(
        iterations: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
        freeze: usize,
    ) -> Self {
        Self {
            phase: Phase::Finetune,
            weights: LossWeights::default(),
            freeze,
            ..Self::pretrain(iterations, batch_size, learning_rate, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidBudget);
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::InvalidConfig(
                "batch size and validation interval must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.weights.validate()
    }
}

/// Splits a total budget 2:1 between pretraining and fine-tuning.
pub fn split_budget(total: usize) -> (usize, usize) {
    let pre = 2 * total / 3;
    (pre, total - pre)
}

/// Three quarters of the blocks, rounded down, capped so the last hidden
/// layer stays trainable.
pub fn default_freeze(config: &NetworkConfig) -> usize {
    let blocks = config.num_blocks();
    (3 * blocks / 4).min(blocks.saturating_sub(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    /// Number of optimizer steps taken when the loss was measured.
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    /// Minibatch loss at each iteration, measured before that iteration's update.
    pub train_loss: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    pub l_min: Option<f64>,
    pub best_iteration: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    fn new(phase: Phase) -> Self {
        Self {
            phase,
            train_loss: Vec::new(),
            validation: Vec::new(),
            l_min: None,
            best_iteration: None,
            checkpoint: None,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    /// `iteration,train_loss,val_loss`; `val_loss` is empty between validations.
    pub fn write_loss_curve<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "train_loss", "val_loss"])?;
        let mut val = self.validation.iter().peekable();
        for (i, loss) in self.train_loss.iter().enumerate() {
            let it = i + 1;
            let v = match val.peek() {
                Some(p) if p.iteration == it => val.next().map(|p| p.loss.to_string()),
                _ => None,
            };
            w.write_record([it.to_string(), loss.to_string(), v.unwrap_or_default()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_loss_curve(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_loss_curve(BufWriter::new(File::create(path)?))
    }
}

/// Best-validation estimator and the run that produced it.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub estimator: Estimator,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<Array2<f64>>>,
    v: Vec<Vec<Array2<f64>>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<Array2<f64>>> = params
            .blocks
            .iter()
            .map(|b| b.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect())
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every block that has a gradient; `None` blocks are untouched.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParamGrads) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.learning_rate;
        for (bi, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            for (ti, g) in g.iter().enumerate() {
                Zip::from(&mut params.blocks[bi].tensors[ti])
                    .and(&mut self.m[bi][ti])
                    .and(&mut self.v[bi][ti])
                    .and(g)
                    .for_each(|p, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
            }
        }
    }
}

/// Something the optimizer loop can minimise.
pub trait Objective: Sync {
    /// Records one minibatch loss; returns it with the parameter leaves.
    fn record(
        &self,
        est: &Estimator,
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
    ) -> Result<(Var, Vec<Vec<Var>>)>;

    fn validation_loss(&self, est: &Estimator) -> Result<f64>;
}

/// `w1·Loss₁ + w2·Loss₂` on uniformly drawn minibatches; validation is `Loss₁`.
pub struct SupervisedObjective {
    train: Batch,
    val: Batch,
    weights: LossWeights,
}

impl SupervisedObjective {
    pub fn new(
        train: &[WindowedSample],
        val: &[WindowedSample],
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        Ok(Self { train: Batch::from_windows(train)?, val: Batch::from_windows(val)?, weights })
    }
}

/// Indices of a minibatch drawn without replacement.
pub fn draw_batch(rng: &mut ChaCha8Rng, len: usize, batch_size: usize) -> Vec<usize> {
    index::sample(rng, len, batch_size.min(len)).into_vec()
}

impl Objective for SupervisedObjective {
    fn record(
        &self,
        est: &Estimator,
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let idx = draw_batch(rng, self.train.len(), batch_size);
        record_loss(est, tape, &self.train.select(&idx), &self.weights, true)
    }

    fn validation_loss(&self, est: &Estimator) -> Result<f64> {
        validation_loss(est, &self.val)
    }
}

/// `Loss₁` over a whole batch.
pub fn validation_loss(est: &Estimator, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let g = est.record(&mut tape, batch, false, false)?;
    let y = tape.constant(batch.labels.clone());
    let l = tape_mse(&mut tape, g.x_hat.v, y);
    Ok(tape.value(l)[[0, 0]])
}

fn parameter_summary(params: &ParameterSet) -> String {
    params
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let max = b.tensors.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
            let finite = b.tensors.iter().flatten().all(|v| v.is_finite());
            format!("block {i}: max|w|={max:.3e} finite={finite}")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Runs Adam on the trainable blocks of `est`, validating every
/// `validate_every` steps and after the last one, and returns the
/// best-validation estimator.
pub fn optimize<O: Objective + ?Sized>(
    mut est: Estimator,
    config: &TrainRunConfig,
    objective: &O,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = substream(config.seed, streams::BATCH);
    let mut adam = Adam::new(config.learning_rate, &est.params);
    let mut report = TrainReport::new(config.phase);
    let mut best: Option<Estimator> = None;
    for it in 0..config.iterations {
        let mut tape = Tape::new();
        let (loss, leaves) = objective.record(&est, &mut tape, &mut rng, config.batch_size)?;
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            log::error!(
                "non-finite training loss {value} at iteration {it}; {}",
                parameter_summary(&est.params)
            );
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        let grads = est.collect_gradients(&leaves, &tape.backward(loss));
        adam.step(&mut est.params, &grads);
        report.train_loss.push(value);

        let done = it + 1;
        if done % config.validate_every == 0 || done == config.iterations {
            let v = objective.validation_loss(&est)?;
            if !v.is_finite() {
                log::error!(
                    "non-finite validation loss {v} after iteration {it}; {}",
                    parameter_summary(&est.params)
                );
                return Err(Error::NonFiniteLoss { iteration: it });
            }
            log::debug!("{:?} iteration {done}: train {value:.4e} val {v:.4e}", config.phase);
            report.validation.push(ValidationPoint { iteration: done, loss: v });
            if report.l_min.is_none_or(|l| v < l) {
                report.l_min = Some(v);
                report.best_iteration = Some(done);
                best = Some(est.clone());
            }
        }
    }
    Ok(TrainOutcome { report, estimator: best.expect("at least one validation") })
}

fn unfreeze(est: &mut Estimator) {
    for b in &mut est.params.blocks {
        b.frozen = false;
    }
}

/// Supervised-only training of every block.
pub fn pretrain(
    estimator: Estimator,
    train: &[WindowedSample],
    val: &[WindowedSample],
    config: &TrainRunConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut est = estimator;
    unfreeze(&mut est);
    let objective = SupervisedObjective::new(train, val, LossWeights::supervised_only())?;
    let config = TrainRunConfig { phase: Phase::Pretrain, ..*config };
    optimize(est, &config, &objective)
}

/// Freezes the first `config.freeze` blocks of a trained estimator and
/// continues with the weighted loss and a fresh optimizer.
pub fn finetune(
    checkpoint: &Estimator,
    train: &[WindowedSample],
    val: &[WindowedSample],
    config: &TrainRunConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    checkpoint.validate()?;
    let mut est = checkpoint.clone();
    unfreeze(&mut est);
    est.params.freeze_prefix(config.freeze)?;
    let objective = SupervisedObjective::new(train, val, config.weights)?;
    let config = TrainRunConfig { phase: Phase::Finetune, ..*config };
    optimize(est, &config, &objective)
}

/// Inclusive ranges for the random search. The learning rate is drawn
/// log-uniformly, batch sizes from the listed choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub hidden_layers: [usize; 2],
    pub gru_layers: [usize; 2],
    pub hidden_size: [usize; 2],
    pub learning_rate: [f64; 2],
    pub history: [usize; 2],
    pub batch_size: Vec<usize>,
}

impl SearchSpace {
    /// Wide enough to contain every reported tuned configuration.
    pub fn wide() -> Self {
        Self {
            hidden_layers: [2, 8],
            gru_layers: [0, 4],
            hidden_size: [16, 256],
            learning_rate: [5e-4, 1e-2],
            history: [3, 18],
            batch_size: vec![32, 64, 128],
        }
    }

    /// Small networks that train in seconds on one core.
    pub fn compact() -> Self {
        Self {
            hidden_layers: [1, 3],
            gru_layers: [0, 1],
            hidden_size: [8, 24],
            learning_rate: [1e-3, 5e-3],
            history: [1, 4],
            batch_size: vec![32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden_layers[0] >= 1
            && self.hidden_layers[0] <= self.hidden_layers[1]
            && self.gru_layers[0] <= self.gru_layers[1]
            && self.hidden_size[0] >= 1
            && self.hidden_size[0] <= self.hidden_size[1]
            && self.history[0] >= 1
            && self.history[0] <= self.history[1]
            && self.learning_rate[0] > 0.0
            && self.learning_rate[0] <= self.learning_rate[1]
            && !self.batch_size.is_empty()
            && self.batch_size.iter().all(|&b| b >= 1);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("malformed search space".into()))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TrialConfig {
        let [lo, hi] = self.learning_rate;
        let learning_rate = if lo == hi { lo } else { rng.random_range(lo.ln()..=hi.ln()).exp() };
        TrialConfig {
            hidden_layers: rng.random_range(self.hidden_layers[0]..=self.hidden_layers[1]),
            gru_layers: rng.random_range(self.gru_layers[0]..=self.gru_layers[1]),
            hidden_size: rng.random_range(self.hidden_size[0]..=self.hidden_size[1]),
            learning_rate,
            history: rng.random_range(self.history[0]..=self.history[1]),
            batch_size: self.batch_size[rng.random_range(0..self.batch_size.len())],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub hidden_layers: usize,
    pub gru_layers: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub history: usize,
    pub batch_size: usize,
}

impl TrialConfig {
    pub fn network(&self, outputs: usize) -> NetworkConfig {
        NetworkConfig {
            hidden_layers: self.hidden_layers,
            hidden_size: self.hidden_size,
            gru_layers: self.gru_layers,
            history: self.history,
            outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub seed: u64,
    pub config: TrialConfig,
    pub l_min: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T> {
    pub trials: Vec<TrialRecord>,
    /// Index into `trials` of the winner, its report and payload.
    pub best: Option<(usize, TrainReport, T)>,
}

/// Runs `trials` independently sampled configurations through `pipeline`
/// (concurrently) and keeps the first one reaching the lowest `L_min`.
/// Failed trials are logged and skipped.
pub fn random_search<T, F>(
    space: &SearchSpace,
    trials: usize,
    seed: u64,
    pipeline: F,
) -> Result<SearchOutcome<T>>
where
    T: Send,
    F: Fn(&TrialConfig, u64) -> Result<(TrainReport, T)> + Sync,
{
    space.validate()?;
    if trials == 0 {
        return Err(Error::InvalidConfig("at least one trial is required".into()));
    }
    let mut rng = substream(seed, streams::SEARCH);
    let plan: Vec<(TrialConfig, u64)> =
        (0..trials).map(|_| (space.sample(&mut rng), rng.random())).collect();
    let results: Vec<Result<(TrainReport, T)>> =
        plan.par_iter().map(|(config, seed)| pipeline(config, *seed)).collect();

    let mut records = Vec::with_capacity(trials);
    let mut best: Option<(usize, TrainReport, T)> = None;
    for (index, ((config, seed), result)) in plan.into_iter().zip(results).enumerate() {
        match result {
            Ok((report, payload)) => {
                log::info!("trial {index}: {config:?} -> L_min {:?}", report.l_min);
                records.push(TrialRecord {
                    index,
                    seed,
                    config,
                    l_min: report.l_min,
                    error: None,
                });
                let better = match (&best, report.l_min) {
                    (_, None) => false,
                    (None, Some(_)) => true,
                    (Some((_, b, _)), Some(l)) => b.l_min.is_none_or(|bl| l < bl),
                };
                if better {
                    best = Some((index, report, payload));
                }
            }
            Err(e) => {
                log::warn!("trial {index}: {config:?} failed: {e}");
                records.push(TrialRecord {
                    index,
                    seed,
                    config,
                    l_min: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(SearchOutcome { trials: records, best })
}

/// Everything a pretrain → fine-tune run needs besides the network shape.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    pub samples: &'a [RawSample],
    /// Validation windows are cut from these instead of `samples` when set,
    /// e.g. to score a model trained on noisy data against clean labels.
    pub validation_samples: Option<&'a [RawSample]>,
    pub ratio: f64,
    pub bounds: GuardBounds,
    pub known: KnownCoefficients,
    pub pretrain_iterations: usize,
    pub finetune_iterations: usize,
    pub weights: LossWeights,
    pub validate_every: usize,
    /// Frozen blocks; `None` uses three quarters of the blocks.
    pub freeze: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub pretrain: TrainOutcome,
    pub finetune: Option<TrainOutcome>,
}

impl PipelineOutcome {
    /// The fine-tuned result when present, else the pretrained one.
    pub fn last(&self) -> &TrainOutcome {
        self.finetune.as_ref().unwrap_or(&self.pretrain)
    }
}

impl Pipeline<'_> {
    /// Training windows (the seeded split) and validation windows (all).
    pub fn windows(
        &self,
        history: usize,
        seed: u64,
    ) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
        let all = window(self.samples, history)?;
        let (train, val) = split(&all, &SplitSpec { ratio: self.ratio, seed })?;
        let val = match self.validation_samples {
            Some(v) => window(v, history)?,
            None => val,
        };
        Ok((train, val))
    }

    /// Pretrains, then fine-tunes when `finetune_iterations > 0`.
    pub fn run(&self, trial: &TrialConfig, seed: u64) -> Result<PipelineOutcome> {
        let config = trial.network(self.bounds.len());
        let (train, val) = self.windows(trial.history, seed)?;
        let est = Estimator::new(config, self.bounds.clone(), self.known, seed)?;
        let mut cfg =
            TrainRunConfig::pretrain(self.pretrain_iterations, trial.batch_size, trial.learning_rate, seed);
        cfg.validate_every = self.validate_every;
        let pre = pretrain(est, &train, &val, &cfg)?;
        if self.finetune_iterations == 0 {
            return Ok(PipelineOutcome { pretrain: pre, finetune: None });
        }
        let cfg = TrainRunConfig {
            phase: Phase::Finetune,
            iterations: self.finetune_iterations,
            weights: self.weights,
            freeze: self.freeze.unwrap_or_else(|| default_freeze(&config)),
            ..cfg
        };
        let fine = finetune(&pre.estimator, &train, &val, &cfg)?;
        Ok(PipelineOutcome { pretrain: pre, finetune: Some(fine) })
    }
}
