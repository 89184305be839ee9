//! Training sessions, sample generation and inpainting on top of the core.

use std::path::Path;
use std::time::Instant;

use conprediff_core::context_decoder::ContextDecoder;
use conprediff_core::diffusion_core::rng_stream;
use conprediff_core::nn::Linear;
use conprediff_core::sampler::{
    ancestral_sample_continuous, ancestral_sample_discrete, inpaint, InpaintOutput, InpaintTask, SampleOptions,
    SamplingSchedule,
};
use conprediff_core::{Batch, ConPreDiff, DenoiserMode, Process, Scalar, TokenMap, TrainState};
use ndarray::{Array2, Array3, Axis};
use serde::Serialize;

use crate::checkpoint::{self, CheckpointRecord};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::fid::{fid_proxy, FidResult};
use crate::palette::Palette;
use crate::report::{median, LossPoint, MetricsReport, ParamCounts, RunLog};

/// RNG stream for sampling and inpainting noise.
pub const STREAM_SAMPLE: u64 = 4;
/// Generated images are produced this many at a time.
const SAMPLE_CHUNK: usize = 32;

pub const LOG_FILE: &str = "log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Serialize)]
struct LogEntry<'a> {
    event: &'a str,
    step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<&'a LossPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    config_hash: &'a str,
}

/// A model being trained on one dataset, plus everything needed to resume it.
pub struct Session<F: Scalar> {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub palette: Option<Palette>,
    tokens: Vec<TokenMap>,
    pub process: Process<F>,
    pub state: TrainState<F>,
    /// Losses of the steps taken by this session.
    pub losses: Vec<LossPoint>,
    /// Wall-clock milliseconds of the same steps.
    pub step_ms: Vec<f64>,
}

fn convert<F: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> ndarray::Array<F, D> {
    a.mapv(|v| F::of(v as f64))
}

fn to_f32<F: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<F, D>) -> ndarray::Array<f32, D> {
    a.mapv(|v| v.as_f64() as f32)
}

impl<F: Scalar> Session<F> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = load_dataset(&cfg.dataset)?;
        let palette = match cfg.model.denoiser.mode {
            DenoiserMode::Continuous => None,
            DenoiserMode::Discrete => Some(Palette::fit(
                &dataset.images,
                cfg.model.denoiser.codebook_size,
                cfg.tokenizer.iterations,
                cfg.tokenizer.fit_pixels,
                cfg.seed,
            )?),
        };
        let model = ConPreDiff::new(cfg.model.clone(), cfg.seed)?;
        let state = TrainState::new(model, cfg.train_cfg(), cfg.seed);
        Self::assemble(cfg, dataset, palette, state)
    }

    /// Continues from a checkpoint; the dataset is rebuilt from the embedded config.
    pub fn resume(record: &CheckpointRecord<F>) -> Result<Self> {
        let (cfg, state) = record.restore()?;
        let dataset = load_dataset(&cfg.dataset)?;
        if cfg.model.denoiser.mode == DenoiserMode::Discrete && record.palette.is_none() {
            return Err(HarnessError::Checkpoint("discrete checkpoint without a palette".into()));
        }
        Self::assemble(cfg, dataset, record.palette.clone(), state)
    }

    fn assemble(cfg: RunConfig, dataset: Dataset, palette: Option<Palette>, state: TrainState<F>) -> Result<Self> {
        let tokens = match &palette {
            Some(p) => dataset.images.iter().map(|i| p.quantize(i)).collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let process = cfg.process()?;
        Ok(Self { cfg, dataset, palette, tokens, process, state, losses: Vec::new(), step_ms: Vec::new() })
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<F> {
        match self.palette {
            None => Batch::Continuous(convert(&self.dataset.stack(indices))),
            Some(_) => Batch::Discrete(indices.iter().map(|&i| self.tokens[i].clone()).collect()),
        }
    }

    /// Trains until `state.step` reaches `until`. With `dir`, appends to the
    /// run log and writes periodic checkpoints there.
    pub fn run(&mut self, until: u64, dir: Option<&Path>) -> Result<()> {
        let mut log = dir.map(|d| RunLog::open(&d.join(LOG_FILE))).transpose()?;
        let hash = self.cfg.hash();
        let mut order = self.dataset.batches(self.cfg.train.batch_size, self.cfg.seed);
        for _ in 0..self.state.step {
            order.next_indices();
        }
        while self.state.step < until {
            let idx = order.next_indices();
            let batch = match self.palette {
                None => Batch::Continuous(convert(&self.dataset.stack(&idx))),
                Some(_) => Batch::Discrete(idx.iter().map(|&i| self.tokens[i].clone()).collect()),
            };
            let t0 = Instant::now();
            let result = self.state.train_step(&batch, &self.process);
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            let b = match result {
                Ok(b) => b,
                Err(e) => {
                    if let Some(log) = log.as_mut() {
                        log.record(&LogEntry {
                            event: "failed",
                            step: self.state.step + 1,
                            loss: None,
                            lambda_t: None,
                            ms: None,
                            message: Some(e.to_string()),
                            config_hash: &hash,
                        })?;
                    }
                    return Err(e.into());
                }
            };
            let step = self.state.step;
            let point = LossPoint { step, total: b.total, point_term: b.point_term, context_term: b.context_term };
            if let Some(log) = log.as_mut() {
                log.record(&LogEntry {
                    event: "step",
                    step,
                    loss: Some(&point),
                    lambda_t: Some(b.lambda_t),
                    ms: Some(ms),
                    message: None,
                    config_hash: &hash,
                })?;
            }
            self.losses.push(point);
            self.step_ms.push(ms);
            if self.cfg.train.log_every > 0 && step % self.cfg.train.log_every == 0 {
                log::info!("step {step}: loss {:.5} (point {:.5}, context {:.5})", b.total, b.point_term, b.context_term);
            }
            if let Some(d) = dir {
                let every = self.cfg.train.checkpoint_every;
                if every > 0 && step % every == 0 && step < until {
                    self.checkpoint().save(&d.join(checkpoint::FILE_NAME))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> CheckpointRecord<F> {
        CheckpointRecord::from_state(&self.cfg, &self.state, self.palette.as_ref())
    }

    pub fn param_counts(&self) -> ParamCounts {
        param_counts(&self.state.model)
    }

    pub fn fid(&self) -> Result<FidResult> {
        evaluate_fid(&self.state.model, &self.cfg, self.palette.as_ref(), &self.dataset)
    }

    /// Report of this session's losses and timings.
    pub fn report(&self) -> MetricsReport {
        let mut r = MetricsReport::new(&self.cfg);
        r.losses = self.losses.clone();
        r.ms_per_step = median(&mut self.step_ms.clone());
        r.params = self.param_counts();
        r
    }
}

pub fn param_counts<F: Scalar>(model: &ConPreDiff<F>) -> ParamCounts {
    let out = |l: &Linear| Linear::param_count(l.inp, l.out);
    let head_output = match &model.head {
        None => 0,
        Some(ContextDecoder::Feature(f)) => out(f.net().output()),
        Some(ContextDecoder::Distribution(d)) => out(d.mu_net().output()) + out(d.sigma_net().output()),
    };
    ParamCounts { denoiser: model.denoiser_param_count(), context_head: model.head_param_count(), head_output }
}

/// `n` images from the model, deterministic in `seed`.
pub fn generate<F: Scalar>(
    model: &ConPreDiff<F>,
    cfg: &RunConfig,
    palette: Option<&Palette>,
    n: usize,
    seed: u64,
) -> Result<Vec<Array3<f32>>> {
    if n == 0 {
        return Err(HarnessError::Config("number of samples must be >= 1".into()));
    }
    let size = cfg.dataset.size();
    let mut rng = rng_stream(seed, STREAM_SAMPLE);
    let mut out = Vec::with_capacity(n);
    match cfg.process::<F>()? {
        Process::Continuous(schedule) => {
            let sched = SamplingSchedule::respaced(&schedule, cfg.sample.steps, cfg.schedule.variance)?;
            let opts = SampleOptions { clip_each_step: cfg.sample.clip_each_step };
            let c = cfg.model.denoiser.in_channels;
            while out.len() < n {
                let m = SAMPLE_CHUNK.min(n - out.len());
                let x = ancestral_sample_continuous(model, (m, c, size, size), &mut rng, &sched, &opts)?;
                out.extend(x.axis_iter(Axis(0)).map(|v| to_f32(&v.to_owned())));
            }
        }
        Process::Discrete(tr) => {
            let palette = palette.ok_or_else(|| HarnessError::Checkpoint("discrete model without a palette".into()))?;
            while out.len() < n {
                let m = SAMPLE_CHUNK.min(n - out.len());
                for map in ancestral_sample_discrete(model, m, size, size, &mut rng, &tr)? {
                    out.push(palette.detokenize(&map)?);
                }
            }
        }
    }
    Ok(out)
}

/// Fills the pixels where `mask` is false; continuous models only.
pub fn inpaint_image<F: Scalar>(
    model: &ConPreDiff<F>,
    cfg: &RunConfig,
    image: &Array3<f32>,
    mask: &Array2<bool>,
    seed: u64,
) -> Result<InpaintOutput<f32>> {
    let Process::Continuous(schedule) = cfg.process::<F>()? else {
        return Err(HarnessError::Config("inpainting needs a continuous-mode model".into()));
    };
    let task = InpaintTask {
        image: convert(image),
        mask: mask.clone(),
        steps: cfg.inpaint.steps,
        resample: cfg.inpaint.resample,
        jump: cfg.inpaint.jump,
    };
    let mut rng = rng_stream(seed, STREAM_SAMPLE);
    let opts = SampleOptions { clip_each_step: cfg.sample.clip_each_step };
    let out = inpaint(model, &task, &mut rng, &schedule, &opts)?;
    if let Some(w) = &out.warning {
        log::warn!("{w}");
    }
    Ok(InpaintOutput { image: to_f32(&out.image), warning: out.warning })
}

/// fid_proxy of `cfg.eval.samples` generated images (seeded by `cfg.seed`)
/// against the training images.
pub fn evaluate_fid<F: Scalar>(
    model: &ConPreDiff<F>,
    cfg: &RunConfig,
    palette: Option<&Palette>,
    dataset: &Dataset,
) -> Result<FidResult> {
    let fake = generate(model, cfg, palette, cfg.eval.samples, cfg.seed)?;
    fid_proxy(&dataset.images, &fake, cfg.eval.extractor_seed)
}

/// Recomputes a run's fid_proxy from its checkpoint alone.
pub fn recompute_fid<F: Scalar>(record: &CheckpointRecord<F>) -> Result<FidResult> {
    let (cfg, state) = record.restore()?;
    let dataset = load_dataset(&cfg.dataset)?;
    evaluate_fid(&state.model, &cfg, record.palette.as_ref(), &dataset)
}

/// Trains `cfg` (or resumes `resume`) to `cfg.train.steps`, then writes the
/// checkpoint, config snapshot and report into `dir`.
pub fn train_run<F: Scalar>(cfg: RunConfig, dir: &Path, resume: Option<&CheckpointRecord<F>>) -> Result<MetricsReport> {
    let mut session = match resume {
        Some(r) => {
            let mut s = Session::resume(r)?;
            // only the step budget and location may change on resume
            let mut expected = cfg.clone();
            expected.train.steps = s.cfg.train.steps;
            if s.cfg.hash() != expected.hash() {
                return Err(HarnessError::Config("resume config differs from the checkpoint's config".into()));
            }
            s.cfg = cfg;
            s
        }
        None => Session::new(cfg)?,
    };
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, session.cfg.to_toml()).map_err(|e| HarnessError::io(&cfg_path, e))?;
    let steps = session.cfg.train.steps;
    let result = session.run(steps, Some(dir));
    let mut report = session.report();
    if let Err(e) = result {
        report = report.fail(e.to_string());
        report.write(&dir.join(REPORT_FILE))?;
        return Err(e);
    }
    report.checkpoint_hash = Some(session.checkpoint().save(&dir.join(checkpoint::FILE_NAME))?);
    if session.cfg.eval.samples > 0 {
        let fid = session.fid()?;
        report.fid_proxy = Some(fid.value);
        report.fid_regularized = fid.regularized;
    }
    report.write(&dir.join(REPORT_FILE))?;
    Ok(report)
}
