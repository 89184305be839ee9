//! Command-line interface. Exit codes: 0 success, 1 failed verification,
//! 2 usage, 3 invalid configuration, 4 I/O or data, 5 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use conprediff_core::{DecoderVariant, DenoiserMode, LambdaSchedule};

use crate::ablation::{ablate_decoder, ablate_stride};
use crate::checkpoint::{resolve_path, CheckpointRecord};
use crate::checks::{bench_setloss, fuzz_bound};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::image_io::{grid, load_mask, load_png, save_png};
use crate::report::{write_json, MetricsReport};
use crate::train::{generate, inpaint_image, recompute_fid, train_run, REPORT_FILE};

/// The harness trains in single precision.
type F = f32;

#[derive(Debug, Parser)]
#[command(name = "conprediff", version, about = "Context-prediction diffusion: train, sample, inpaint, evaluate, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Continuous,
    Discrete,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Feature,
    Distribution,
}

/// Config file plus overrides shared by the training subcommands.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Neighborhood stride; 0 disables the context head.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Constant context weight λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        self.resolve_over(RunConfig::default())
    }

    /// Applies the config file (if any) and flags on top of `base`.
    pub fn resolve_over(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => base,
        };
        if let Some(m) = self.mode {
            cfg.model.denoiser.mode = match m {
                ModeArg::Continuous => DenoiserMode::Continuous,
                ModeArg::Discrete => DenoiserMode::Discrete,
            };
        }
        if let Some(s) = self.stride {
            cfg.model.context.stride = s;
        }
        if let Some(v) = self.variant {
            cfg.model.context.variant = match v {
                VariantArg::Feature => DecoderVariant::Feature,
                VariantArg::Distribution => DecoderVariant::Distribution,
            };
        }
        if let Some(l) = self.lambda {
            cfg.model.context.lambda = LambdaSchedule::Constant { value: l };
        }
        if let Some(n) = self.steps {
            cfg.train.steps = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, log and report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint (file or run directory).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Sampling seed; the run seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; `<run>/samples` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill the unknown region of an image.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Mask image; nonzero pixels are known.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output PNG; `<run>/inpainted.png` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per stride for both decoder variants.
    AblateStride {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 3])]
        strides: Vec<usize>,
    },
    /// Compare feature and distribution decoding.
    AblateDecoder {
        #[command(flatten)]
        run: RunArgs,
        /// Steps per timing measurement.
        #[arg(long, default_value_t = 100)]
        timing_steps: u64,
    },
    /// Recompute fid_proxy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Must match the checkpoint's embedded config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; `<run>/eval.json` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuzz the neighborhood upper bound.
    VerifyBound {
        #[arg(long, default_value_t = 10_000)]
        fuzz: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the set losses.
    BenchSetloss {
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32, 64])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run_dir_of(ckpt: &Path) -> PathBuf {
    let file = resolve_path(ckpt);
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { run, resume } => {
            let record = resume.map(|p| CheckpointRecord::<F>::load(&p)).transpose()?;
            let cfg = match &record {
                Some(r) => run.resolve_over(r.config()?)?,
                None => run.resolve()?,
            };
            let dir = cfg.run_dir();
            let report = train_run(cfg, &dir, record.as_ref())?;
            println!("trained {} steps; artifacts in {}", report.losses.last().map_or(0, |l| l.step), dir.display());
            if let Some(f) = report.fid_proxy {
                println!("fid_proxy {f:.4}");
            }
        }
        Command::Sample { ckpt, n, seed, out } => {
            let record = CheckpointRecord::<F>::load(&ckpt)?;
            let (cfg, state) = record.restore()?;
            let images = generate(&state.model, &cfg, record.palette.as_ref(), n, seed.unwrap_or(cfg.seed))?;
            let dir = out.unwrap_or_else(|| run_dir_of(&ckpt).join("samples"));
            std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            let hash = record.config_hash.as_str();
            for (i, img) in images.iter().enumerate() {
                save_png(&dir.join(format!("sample_{i:03}.png")), img, Some(hash))?;
            }
            let cols = (n as f64).sqrt().ceil() as usize;
            save_png(&dir.join("grid.png"), &grid(&images, cols)?, Some(hash))?;
            println!("wrote {n} samples to {}", dir.display());
        }
        Command::Inpaint { ckpt, image, mask, seed, out } => {
            let record = CheckpointRecord::<F>::load(&ckpt)?;
            let (cfg, state) = record.restore()?;
            let size = cfg.dataset.size();
            let img = load_png(&image, cfg.model.denoiser.in_channels, size)?;
            let mask = load_mask(&mask, size)?;
            let result = inpaint_image(&state.model, &cfg, &img, &mask, seed.unwrap_or(cfg.seed))?;
            if let Some(w) = &result.warning {
                eprintln!("warning: {w}");
            }
            let path = out.unwrap_or_else(|| run_dir_of(&ckpt).join("inpainted.png"));
            save_png(&path, &result.image, Some(&record.config_hash))?;
            println!("wrote {}", path.display());
        }
        Command::AblateStride { run, strides } => {
            let cfg = run.resolve()?;
            let dir = cfg.run_dir();
            let reports = ablate_stride::<F>(&cfg, &strides, &dir)?;
            for r in &reports {
                println!(
                    "{:<32} {:?} fid_proxy {:>10} ms/step {:>8.3} head params {}",
                    r.name,
                    r.status,
                    r.fid_proxy.map_or("-".into(), |f| format!("{f:.4}")),
                    r.ms_per_step,
                    r.params.context_head
                );
            }
        }
        Command::AblateDecoder { run, timing_steps } => {
            let cfg = run.resolve()?;
            let dir = cfg.run_dir();
            let a = ablate_decoder::<F>(&cfg, timing_steps, &dir)?;
            for r in [&a.feature, &a.distribution] {
                println!(
                    "{:<32} {:?} fid_proxy {:>10} head params {}",
                    r.name,
                    r.status,
                    r.fid_proxy.map_or("-".into(), |f| format!("{f:.4}")),
                    r.params.context_head
                );
            }
            for t in &a.timing {
                println!("{:<13} stride {} {:>8.3} ms/step, head params {}", t.variant, t.stride, t.ms_per_step, t.head_params);
            }
        }
        Command::Eval { ckpt, config, seed, out } => {
            let record = CheckpointRecord::<F>::load(&ckpt)?;
            if let Some(p) = config {
                let given = RunConfig::load(&p)?.hash();
                if given != record.config_hash {
                    return Err(HarnessError::Config(format!(
                        "{} (hash {given}) does not match the checkpoint's config (hash {})",
                        p.display(),
                        record.config_hash
                    )));
                }
            }
            let mut record = record;
            if let Some(s) = seed {
                let mut cfg = record.config()?;
                cfg.seed = s;
                // evaluation only: the sampling seed follows the override
                record.config_json = serde_json::to_string(&cfg).expect("config serializes");
                record.config_hash = cfg.hash();
            }
            let fid = recompute_fid(&record)?;
            let cfg = record.config()?;
            let mut report = MetricsReport::new(&cfg);
            report.fid_proxy = Some(fid.value);
            report.fid_regularized = fid.regularized;
            let (_, state) = record.restore()?;
            report.params = crate::train::param_counts(&state.model);
            let bytes = std::fs::read(resolve_path(&ckpt)).map_err(|e| HarnessError::io(&ckpt, e))?;
            report.checkpoint_hash = Some(crate::checkpoint::content_hash(&bytes));
            let stored = MetricsReport::read(&run_dir_of(&ckpt).join(REPORT_FILE)).ok();
            if let Some(s) = stored.as_ref().and_then(|s| s.fid_proxy) {
                let same = s == fid.value;
                println!("stored report fid_proxy {s} ({})", if same { "reproduced" } else { "differs" });
            }
            let path = out.unwrap_or_else(|| run_dir_of(&ckpt).join("eval.json"));
            write_json(&path, &report)?;
            println!("fid_proxy {:.6}{}", fid.value, if fid.regularized { " (regularized)" } else { "" });
        }
        Command::VerifyBound { fuzz, seed } => {
            let r = fuzz_bound(fuzz, seed)?;
            print_json(&r);
            if !r.passed() {
                return Err(HarnessError::Verification(format!(
                    "{} of {} cases violate the bound (min slack {:e}, equality gap {:e})",
                    r.violations, r.cases, r.min_slack, r.equality_max_gap
                )));
            }
        }
        Command::BenchSetloss { sizes, d, reps, seed } => {
            for r in bench_setloss(&sizes, d, reps, seed)? {
                println!("{:<12} q {:>3} d {:>2} {:>12.2} us", r.method, r.q, r.d, r.micros);
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
