//! Stride and decoder-variant ablations: one fixed-budget run per setting,
//! plus a per-step timing sweep.

use std::path::Path;

use conprediff_core::{DecoderVariant, Scalar};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::report::{median, write_json, MetricsReport};
use crate::train::{train_run, Session};

pub const STRIDE_FILE: &str = "ablate_stride.json";
pub const DECODER_FILE: &str = "ablate_decoder.json";

fn variant_name(v: DecoderVariant) -> &'static str {
    match v {
        DecoderVariant::Feature => "feature",
        DecoderVariant::Distribution => "distribution",
    }
}

fn with(cfg: &RunConfig, stride: usize, variant: DecoderVariant) -> RunConfig {
    let mut c = cfg.clone();
    c.model.context.stride = stride;
    c.model.context.variant = variant;
    c.name = if stride == 0 {
        format!("{}-stride0", cfg.name)
    } else {
        format!("{}-stride{stride}-{}", cfg.name, variant_name(variant))
    };
    c.output_dir = None;
    c
}

/// Trains one run; a failure becomes a failed report instead of an error.
fn run_one<F: Scalar>(cfg: RunConfig, dir: &Path) -> MetricsReport {
    let run_dir = dir.join(&cfg.name);
    match train_run::<F>(cfg.clone(), &run_dir, None) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("run {} failed: {e}", cfg.name);
            crate::report::MetricsReport::read(&run_dir.join(crate::train::REPORT_FILE))
                .unwrap_or_else(|_| MetricsReport::new(&cfg))
                .fail(e.to_string())
        }
    }
}

/// One run per stride and variant. Stride 0 has no head and is run once.
pub fn ablate_stride<F: Scalar>(cfg: &RunConfig, strides: &[usize], dir: &Path) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for &s in strides.iter().filter(|&&s| s == 0).take(1) {
        reports.push(run_one::<F>(with(cfg, s, DecoderVariant::Distribution), dir));
    }
    for variant in [DecoderVariant::Feature, DecoderVariant::Distribution] {
        for &s in strides.iter().filter(|&&s| s > 0) {
            reports.push(run_one::<F>(with(cfg, s, variant), dir));
        }
    }
    write_json(&dir.join(STRIDE_FILE), &reports)?;
    Ok(reports)
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingRow {
    pub variant: &'static str,
    pub stride: usize,
    /// Median milliseconds per training step.
    pub ms_per_step: f64,
    pub head_params: usize,
    pub head_output_params: usize,
}

/// Median training-step time over `steps` steps (after a short warm-up) for
/// each variant and stride, from the same initial state and batches.
pub fn timing_sweep<F: Scalar>(cfg: &RunConfig, strides: &[usize], steps: u64) -> Result<Vec<TimingRow>> {
    let warmup = 5;
    let mut rows = Vec::new();
    for variant in [DecoderVariant::Feature, DecoderVariant::Distribution] {
        for &s in strides {
            let mut session = Session::<F>::new(with(cfg, s, variant))?;
            session.run(warmup, None)?;
            session.step_ms.clear();
            session.run(warmup + steps, None)?;
            let counts = session.param_counts();
            rows.push(TimingRow {
                variant: variant_name(variant),
                stride: s,
                ms_per_step: median(&mut session.step_ms.clone()),
                head_params: counts.context_head,
                head_output_params: counts.head_output,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct DecoderAblation {
    pub feature: MetricsReport,
    pub distribution: MetricsReport,
    pub timing: Vec<TimingRow>,
}

/// Feature vs distribution decoding under the same budget at `cfg`'s stride,
/// plus the timing sweep over strides 1–3.
pub fn ablate_decoder<F: Scalar>(cfg: &RunConfig, timing_steps: u64, dir: &Path) -> Result<DecoderAblation> {
    let stride = cfg.model.context.stride.max(1);
    let feature = run_one::<F>(with(cfg, stride, DecoderVariant::Feature), dir);
    let distribution = run_one::<F>(with(cfg, stride, DecoderVariant::Distribution), dir);
    let timing = timing_sweep::<F>(cfg, &[1, 2, 3], timing_steps)?;
    let out = DecoderAblation { feature, distribution, timing };
    write_json(&dir.join(DECODER_FILE), &out)?;
    Ok(out)
}
