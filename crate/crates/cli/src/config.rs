//! JSON experiment configuration. Every field has a default, so a preset
//! only needs to list what it changes. Relative data and bounds paths are
//! resolved against the output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fthd_core::dynamics::CoefficientBounds;
use fthd_core::ekf::{EkfCovBounds, EkfSettings, RangeAdjustSettings};
use fthd_core::eval::{DEFAULT_SWEEP, DEFAULT_SWEEP_POINTS};
use fthd_core::simulator::{SimRun, TrackSpec};
use fthd_core::training::{LossWeights, SearchSpace, TrialConfig, NOISY_BUDGET, SIM_BUDGET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Fraction of windows used for training.
    pub ratio: f64,
    pub data: DataPaths,
    pub simulation: SimulationConfig,
    /// `"sim"`, `"real_adjusted"`, or a JSON file holding `CoefficientBounds`.
    pub bounds: String,
    pub network: NetworkSpec,
    pub pretrain: PhaseSpec,
    pub finetune: FinetuneSpec,
    pub search: SearchSpace,
    pub trials: usize,
    pub ekf: EkfSpec,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Clean simulated data.
    pub clean: PathBuf,
    /// Noisy copy written by `simulate --noise` and read by `denoise`.
    pub noisy: PathBuf,
    /// Output of `denoise`.
    pub filtered: PathBuf,
    pub noise: PathBuf,
    /// Data the estimator is trained on.
    pub train: PathBuf,
    /// Validation windows come from here when set (e.g. clean labels).
    pub validation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub run: SimRun,
    pub track: TrackSpec,
    pub noise_sigma: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden_layers: usize,
    pub hidden_size: usize,
    pub gru_layers: usize,
    pub history: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSpec {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validate_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSpec {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validate_every: usize,
    /// Frozen blocks; three quarters of the blocks when absent.
    pub freeze: Option<usize>,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfSpec {
    pub settings: EkfSettings,
    /// Coefficient ranges the filter starts from, in the same form as `bounds`.
    pub initial_bounds: String,
    /// Q/R ranges; scaled to `simulation.noise_sigma` when absent.
    pub cov_bounds: Option<EkfCovBounds>,
    pub pretrain_iterations: usize,
    pub finetune_iterations: usize,
    pub adjust: RangeAdjustSettings,
    /// Pretraining iterations per range-adjustment round.
    pub adjust_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub range: [f64; 2],
    pub points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let (pre, fine) = fthd_core::training::split_budget(SIM_BUDGET);
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/sim"),
            ratio: 0.3,
            data: DataPaths::default(),
            simulation: SimulationConfig::default(),
            bounds: "sim".into(),
            network: NetworkSpec::default(),
            pretrain: PhaseSpec { iterations: pre, ..PhaseSpec::default() },
            finetune: FinetuneSpec { iterations: fine, ..FinetuneSpec::default() },
            search: SearchSpace::compact(),
            trials: 4,
            ekf: EkfSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            clean: "data.csv".into(),
            noisy: "data_noisy.csv".into(),
            filtered: "data_ekf.csv".into(),
            noise: "noise.csv".into(),
            train: "data.csv".into(),
            validation: None,
        }
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { run: SimRun::default(), track: TrackSpec::default(), noise_sigma: [0.05, 0.02, 0.01] }
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { hidden_layers: 2, hidden_size: 32, gru_layers: 0, history: 2 }
    }
}

impl Default for PhaseSpec {
    fn default() -> Self {
        Self { iterations: 10_000, batch_size: 64, learning_rate: 3e-3, validate_every: 100 }
    }
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            iterations: 5_000,
            batch_size: 64,
            learning_rate: 3e-3,
            validate_every: 100,
            freeze: None,
            weights: LossWeights::default(),
        }
    }
}

impl Default for EkfSpec {
    fn default() -> Self {
        let (pre, fine) = fthd_core::training::split_budget(NOISY_BUDGET);
        Self {
            settings: EkfSettings::default(),
            initial_bounds: "sim".into(),
            cov_bounds: None,
            pretrain_iterations: pre,
            finetune_iterations: fine,
            adjust: RangeAdjustSettings::default(),
            adjust_iterations: 500,
        }
    }
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { range: [DEFAULT_SWEEP.0, DEFAULT_SWEEP.1], points: DEFAULT_SWEEP_POINTS }
    }
}

impl NetworkSpec {
    pub fn trial(&self, batch_size: usize, learning_rate: f64) -> TrialConfig {
        TrialConfig {
            hidden_layers: self.hidden_layers,
            gru_layers: self.gru_layers,
            hidden_size: self.hidden_size,
            learning_rate,
            history: self.history,
            batch_size,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            bail!("ratio must lie in (0, 1], got {}", self.ratio);
        }
        if self.trials == 0 {
            bail!("trials must be positive");
        }
        self.simulation.run.validate()?;
        self.simulation.track.validate()?;
        self.search.validate()?;
        self.finetune.weights.validate()?;
        self.ekf.settings.validate()?;
        self.ekf.adjust.validate()?;
        self.cov_bounds().validate()?;
        Ok(())
    }

    /// Resolves `p` against the output directory unless it is absolute.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn cov_bounds(&self) -> EkfCovBounds {
        self.ekf.cov_bounds.unwrap_or_else(|| EkfCovBounds::for_noise(self.simulation.noise_sigma))
    }

    pub fn coefficient_bounds(&self) -> Result<CoefficientBounds> {
        self.bounds_from(&self.bounds)
    }

    pub fn bounds_from(&self, source: &str) -> Result<CoefficientBounds> {
        match source {
            "sim" => Ok(CoefficientBounds::sim()),
            "real_adjusted" => Ok(CoefficientBounds::real_adjusted()),
            file => {
                let path = self.path(Path::new(file));
                if !path.exists() {
                    return Err(fthd_core::Error::MissingArtifact(path).into());
                }
                let text = std::fs::read_to_string(&path)?;
                let b: CoefficientBounds = serde_json::from_str(&text)
                    .with_context(|| format!("parsing bounds {}", path.display()))?;
                b.validate()?;
                Ok(b)
            }
        }
    }
}
