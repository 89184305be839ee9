//! Run configuration: one TOML file, every table optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use conprediff_core::nn::AdamCfg;
use conprediff_core::{ContinuousSchedule, DenoiserMode, DiscreteTransition, ModelCfg, Process, ReverseVariance, Scalar, TrainCfg};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetSpec;
use crate::error::{HarnessError, Result};

/// Environment variable that overrides the default output root.
pub const OUTPUT_ROOT_ENV: &str = "CONPREDIFF_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleCfg {
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance: ReverseVariance,
    /// Cumulative mask probability at `T` (discrete mode).
    pub gamma_end: f64,
    /// Per-step uniform-replace probability at `T` (discrete mode).
    pub beta_uniform_end: f64,
}

impl Default for ScheduleCfg {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 0.02,
            variance: ReverseVariance::Beta,
            gamma_end: 0.9,
            beta_uniform_end: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: u64,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    pub divergence_threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 2e-4,
            log_every: 50,
            checkpoint_every: 0,
            divergence_threshold: 1e6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Reverse steps; fewer than `T` respaces the schedule.
    pub steps: usize,
    pub clip_each_step: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { steps: 250, clip_each_step: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintSection {
    pub steps: usize,
    pub resample: usize,
    pub jump: usize,
}

impl Default for InpaintSection {
    fn default() -> Self {
        Self { steps: 250, resample: 10, jump: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub iterations: usize,
    /// Pixels drawn from the training set for the k-means fit.
    pub fit_pixels: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { iterations: 30, fit_pixels: 20_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Generated images per fid_proxy evaluation (at least 64).
    pub samples: usize,
    pub extractor_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { samples: 64, extractor_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory; defaults to `$CONPREDIFF_OUT/<name>` or `runs/<name>`.
    pub output_dir: Option<PathBuf>,
    pub name: String,
    pub model: ModelCfg,
    pub schedule: ScheduleCfg,
    pub dataset: DatasetSpec,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub inpaint: InpaintSection,
    pub tokenizer: TokenizerSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            name: "run".into(),
            model: ModelCfg::default(),
            schedule: ScheduleCfg::default(),
            dataset: DatasetSpec::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            inpaint: InpaintSection::default(),
            tokenizer: TokenizerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let d = &self.model.denoiser;
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad(format!("train.lr = {} must be positive", self.train.lr));
        }
        if self.model.context.q == 0 {
            return bad("model.context.q must be >= 1".into());
        }
        if self.dataset.size() % d.size_multiple() != 0 {
            return bad(format!(
                "dataset size {} must be a multiple of {} for {} resolution levels",
                self.dataset.size(),
                d.size_multiple(),
                d.channel_mults.len()
            ));
        }
        if self.sample.steps == 0 || self.sample.steps > d.timesteps {
            return bad(format!("sample.steps = {} outside 1..={}", self.sample.steps, d.timesteps));
        }
        if self.inpaint.steps == 0 || self.inpaint.steps > d.timesteps {
            return bad(format!("inpaint.steps = {} outside 1..={}", self.inpaint.steps, d.timesteps));
        }
        if self.inpaint.resample == 0 || self.inpaint.jump == 0 {
            return bad("inpaint.resample and inpaint.jump must be >= 1".into());
        }
        if d.mode == DenoiserMode::Continuous && self.dataset.channels() != d.in_channels {
            return bad(format!(
                "dataset has {} channels, model expects {}",
                self.dataset.channels(),
                d.in_channels
            ));
        }
        self.process::<f64>().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// The forward process implied by the mode and schedule tables.
    pub fn process<F: Scalar>(&self) -> Result<Process<F>> {
        let d = &self.model.denoiser;
        let s = &self.schedule;
        Ok(match d.mode {
            DenoiserMode::Continuous => Process::Continuous(ContinuousSchedule::linear_with(
                d.timesteps,
                s.beta_start,
                s.beta_end,
                s.variance,
            )?),
            DenoiserMode::Discrete => Process::Discrete(DiscreteTransition::mask_and_replace(
                d.codebook_size,
                d.timesteps,
                s.gamma_end,
                s.beta_uniform_end,
            )?),
        })
    }

    pub fn train_cfg(&self) -> TrainCfg {
        TrainCfg {
            adam: AdamCfg { lr: self.train.lr, ..AdamCfg::default() },
            divergence_threshold: self.train.divergence_threshold,
        }
    }

    /// Hex SHA-256 of the canonical JSON form. `output_dir` is excluded so
    /// that moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Directory artifacts are written to.
    pub fn run_dir(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
        root.join(&self.name)
    }
}
