use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    TrainStep,
    Validation,
    Evaluation,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Strictly increasing within a log.
    pub seq: u64,
    pub kind: RecordKind,
    pub stage: String,
    pub config_hash: String,
    pub epoch: usize,
    /// Optimizer steps completed when the record was written.
    pub step: u64,
    pub normalized_loss: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_frame_ce: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_presentation_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_presentation_accuracy: Option<f64>,
    /// Seconds since the log was opened; excluded from determinism checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl MetricRecord {
    pub fn new(kind: RecordKind, epoch: usize, step: u64) -> Self {
        Self {
            seq: 0,
            kind,
            stage: String::new(),
            config_hash: String::new(),
            epoch,
            step,
            normalized_loss: true,
            train_loss: None,
            lr: None,
            val_loss: None,
            top1: None,
            top5: None,
            per_frame_ce: None,
            query_accuracy: None,
            first_presentation_accuracy: None,
            second_presentation_accuracy: None,
            wall_clock_s: None,
        }
    }
}

/// Append-only metrics log, mirrored to a JSONL file when a path is set.
#[derive(Debug)]
pub struct MetricsLog {
    pub stage: String,
    pub config_hash: String,
    pub normalized_loss: bool,
    pub records: Vec<MetricRecord>,
    path: Option<PathBuf>,
    started: std::time::Instant,
}

impl MetricsLog {
    pub fn new(
        stage: &str,
        config_hash: &str,
        normalized_loss: bool,
        path: Option<&Path>,
    ) -> Result<Self> {
        if let Some(p) = path {
            File::create(p)?;
        }
        Ok(Self {
            stage: stage.into(),
            config_hash: config_hash.into(),
            normalized_loss,
            records: Vec::new(),
            path: path.map(Path::to_path_buf),
            started: std::time::Instant::now(),
        })
    }

    /// Tags, numbers and stores `record`.
    pub fn push(&mut self, mut record: MetricRecord) -> Result<()> {
        record.seq = self.records.len() as u64;
        record.stage = self.stage.clone();
        record.config_hash = self.config_hash.clone();
        record.normalized_loss = self.normalized_loss;
        record.wall_clock_s = Some(self.started.elapsed().as_secs_f64());
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new().append(true).open(p)?;
            writeln!(
                f,
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            )?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Records with the wall-clock field cleared, for run-to-run comparison.
    pub fn deterministic_view(&self) -> Vec<MetricRecord> {
        self.records
            .iter()
            .cloned()
            .map(|r| MetricRecord {
                wall_clock_s: None,
                ..r
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Vec<MetricRecord>> {
        let f = File::open(path)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e))?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn last_of(&self, kind: RecordKind) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.kind == kind)
    }
}
