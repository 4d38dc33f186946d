//! Per-step metrics log: one self-describing JSON record per line, flushed
//! as written so interrupted runs keep their history.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_abs_advantage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate_groups: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped_groups: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_shortfalls: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_skipped: Option<bool>,
    /// Pooled dev-set WER as a rate (1.0 = 100%), present at eval steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_dev_wer: Option<f64>,
}

impl MetricsRecord {
    pub fn new(step: u64, stage: &str, lr: f64, loss: f64, grad_norm: f64) -> Self {
        MetricsRecord {
            step,
            stage: stage.to_string(),
            lr,
            loss,
            grad_norm,
            mean_reward: None,
            mean_abs_advantage: None,
            kl_mean: None,
            clip_fraction: None,
            degenerate_groups: None,
            skipped_groups: None,
            beam_shortfalls: None,
            step_skipped: None,
            dev_wer: None,
            best_dev_wer: None,
        }
    }
}

pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(MetricsWriter { file: File::create(path)? })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(record).expect("metrics records always serialize");
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()
    }
}

/// Parses a metrics log back into records (harness consumption).
pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).expect("metrics lines are self-describing JSON"))
        .collect())
}
