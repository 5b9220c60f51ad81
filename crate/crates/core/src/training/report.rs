//! Saved evaluation results and the tables built from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{
    reference_rows, ClassificationReport, MannReport, ReconReport, ReconRow, ReconTable,
};
use super::metrics::{MetricRecord, RecordKind};
use crate::error::{Error, Result};

/// One evaluation outcome as written by `evaluate --save`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalResult {
    Classification(ClassificationReport),
    Reconstruction { model: String, report: ReconReport },
    Mann(MannReport),
}

impl EvalResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("result serializes"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
    }

    pub fn to_text(&self) -> Result<String> {
        Ok(match self {
            EvalResult::Classification(r) => r.to_text(),
            EvalResult::Reconstruction { model, report } => {
                recon_table(&[(model.clone(), report.clone())])?.to_text()
            }
            EvalResult::Mann(r) => r.to_text(),
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        Ok(match self {
            EvalResult::Classification(r) => r.to_csv(),
            EvalResult::Reconstruction { model, report } => {
                recon_table(&[(model.clone(), report.clone())])?.to_csv()
            }
            EvalResult::Mann(r) => r.to_csv(),
        })
    }
}

/// Measured rows followed by the reference rows.
pub fn recon_table(reports: &[(String, ReconReport)]) -> Result<ReconTable> {
    let mut rows = reports
        .iter()
        .map(|(m, r)| ReconRow::from_report(m, r))
        .collect::<Result<Vec<_>>>()?;
    rows.extend(reference_rows());
    Ok(ReconTable { rows })
}

/// Last-epoch summary of one training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub stage: String,
    pub config_hash: String,
    pub epochs: usize,
    pub steps: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub query_accuracy: Option<f64>,
}

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "run",
    "stage",
    "config_hash",
    "epochs",
    "steps",
    "train_loss",
    "val_loss",
    "top1",
    "top5",
    "query_accuracy",
];

impl RunSummary {
    pub fn from_records(run: &str, records: &[MetricRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::EmptySplit(format!("metrics of {run}")))?;
        let last_of = |k: RecordKind| records.iter().rev().find(|r| r.kind == k);
        let train = last_of(RecordKind::TrainStep);
        let val = last_of(RecordKind::Validation);
        Ok(Self {
            run: run.into(),
            stage: first.stage.clone(),
            config_hash: first.config_hash.chars().take(12).collect(),
            epochs: records.iter().map(|r| r.epoch).max().unwrap_or(0),
            steps: records.iter().map(|r| r.step).max().unwrap_or(0),
            train_loss: train.and_then(|r| r.train_loss),
            val_loss: val.and_then(|r| r.val_loss),
            top1: val.and_then(|r| r.top1),
            top5: val.and_then(|r| r.top5),
            query_accuracy: val.and_then(|r| r.query_accuracy),
        })
    }

    fn cells(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        vec![
            self.run.clone(),
            self.stage.clone(),
            self.config_hash.clone(),
            self.epochs.to_string(),
            self.steps.to_string(),
            opt(self.train_loss),
            opt(self.val_loss),
            opt(self.top1),
            opt(self.top5),
            opt(self.query_accuracy),
        ]
    }
}

pub fn summaries_to_text(rows: &[RunSummary]) -> String {
    let cells: Vec<Vec<String>> =
        std::iter::once(SUMMARY_COLUMNS.iter().map(|s| s.to_string()).collect())
            .chain(rows.iter().map(RunSummary::cells))
            .collect();
    let widths: Vec<usize> = (0..SUMMARY_COLUMNS.len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:<w$}"))
            .collect();
        out += line.join("  ").trim_end();
        out.push('\n');
    }
    out
}

pub fn summaries_to_csv(rows: &[RunSummary]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS).expect("in-memory write");
    for r in rows {
        w.write_record(r.cells()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_results_round_trip_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.json");
        let r = EvalResult::Mann(MannReport {
            episodes: 3,
            query_accuracy: 0.5,
            first_presentation: 0.2,
            second_presentation: 0.6,
            loss: 1.0,
        });
        r.save(&path).unwrap();
        assert_eq!(EvalResult::load(&path).unwrap(), r);
        let rec = EvalResult::Reconstruction {
            model: "m".into(),
            report: ReconReport {
                clips: 1,
                per_frame: vec![0.25; 100],
                overall: 0.25,
            },
        };
        let csv = rec.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("m,0.25"));
    }

    #[test]
    fn summary_uses_last_records() {
        let mut a = MetricRecord::new(RecordKind::TrainStep, 1, 1);
        a.stage = "scratch_classifier".into();
        a.train_loss = Some(2.0);
        let mut b = MetricRecord::new(RecordKind::Validation, 2, 4);
        b.top1 = Some(0.5);
        let s = RunSummary::from_records("r", &[a, b]).unwrap();
        assert_eq!(
            (s.epochs, s.steps, s.train_loss, s.top1),
            (2, 4, Some(2.0), Some(0.5))
        );
        assert_eq!(
            summaries_to_csv(std::slice::from_ref(&s)).lines().count(),
            2
        );
        assert!(summaries_to_text(&[s])
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("r "));
        assert!(RunSummary::from_records("r", &[]).is_err());
    }
}
