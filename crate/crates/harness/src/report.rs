//! Metrics reports and append-only run logs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::image_io::VALUE_MAPPING;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub total: f64,
    pub point_term: f64,
    pub context_term: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub denoiser: usize,
    pub context_head: usize,
    /// Output-layer scalars of the context head.
    pub head_output: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub value_mapping: String,
    pub name: String,
    pub status: RunStatus,
    /// Set when `status` is failed.
    pub failure: Option<String>,
    pub fid_proxy: Option<f64>,
    pub fid_regularized: bool,
    pub losses: Vec<LossPoint>,
    /// Median wall-clock milliseconds per training step.
    pub ms_per_step: f64,
    pub params: ParamCounts,
    pub config: RunConfig,
    pub config_hash: String,
    /// Hash of the config with the decoder variant and stride reset, shared
    /// by runs that differ only in those keys.
    pub base_hash: String,
    pub checkpoint_hash: Option<String>,
}

impl MetricsReport {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            value_mapping: VALUE_MAPPING.into(),
            name: config.name.clone(),
            status: RunStatus::Ok,
            failure: None,
            fid_proxy: None,
            fid_regularized: false,
            losses: Vec::new(),
            ms_per_step: 0.0,
            params: ParamCounts { denoiser: 0, context_head: 0, head_output: 0 },
            config: config.clone(),
            config_hash: config.hash(),
            base_hash: base_hash(config),
            checkpoint_hash: None,
        }
    }

    pub fn fail(mut self, reason: impl Into<String>) -> Self {
        self.status = RunStatus::Failed;
        self.failure = Some(reason.into());
        self
    }

    /// Every number in the report is finite.
    pub fn is_finite(&self) -> bool {
        self.fid_proxy.is_none_or(f64::is_finite)
            && self.ms_per_step.is_finite()
            && self
                .losses
                .iter()
                .all(|l| l.total.is_finite() && l.point_term.is_finite() && l.context_term.is_finite())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if !self.is_finite() {
            return Err(HarnessError::Verification(format!("report {} has non-finite values", self.name)));
        }
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

/// Config hash with the ablated keys (decoder variant, stride) normalized.
pub fn base_hash(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.model.context.variant = Default::default();
    c.model.context.stride = 0;
    c.name = String::new();
    c.hash()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Append-only JSON-lines log.
pub struct RunLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        Ok(Self { file, path: path.into() })
    }

    pub fn record<T: Serialize>(&mut self, entry: &T) -> Result<()> {
        let mut line = serde_json::to_string(entry).expect("log entry serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| HarnessError::io(&self.path, e))
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use conprediff_core::DecoderVariant;

    #[test]
    fn base_hash_ignores_variant_and_stride_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.model.context.variant = DecoderVariant::Feature;
        b.model.context.stride = 1;
        assert_eq!(base_hash(&a), base_hash(&b));
        assert_ne!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(base_hash(&a), base_hash(&b));
    }

    #[test]
    fn non_finite_reports_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricsReport::new(&RunConfig::default());
        r.fid_proxy = Some(1.5);
        r.write(&dir.path().join("r.json")).unwrap();
        assert_eq!(MetricsReport::read(&dir.path().join("r.json")).unwrap(), r);
        r.ms_per_step = f64::NAN;
        assert!(r.write(&dir.path().join("bad.json")).is_err());
    }

    #[test]
    fn log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        RunLog::open(&p).unwrap().record(&1).unwrap();
        RunLog::open(&p).unwrap().record(&2).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "1\n2\n");
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
