//! Per-task metric rows and their CSV form.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricRow, Split, SubsetName};

/// Training phase a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Pretrain,
    Task(usize),
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Pretrain => f.write_str("pt"),
            Phase::Task(t) => write!(f, "{t}"),
        }
    }
}

impl Phase {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pt" => Some(Phase::Pretrain),
            t => t.parse().ok().map(Phase::Task),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub task: Phase,
    pub subset: SubsetName,
    pub split: Split,
    pub accuracy: Option<f64>,
    pub dispersion: Option<f64>,
    pub epochs: usize,
    pub buffer_bits: u64,
    pub buffer_samples: usize,
}

impl ReportRow {
    pub fn from_metric(task: Phase, m: &MetricRow, epochs: usize, buffer_bits: u64, buffer_samples: usize) -> Self {
        ReportRow {
            task,
            subset: m.subset,
            split: m.split,
            accuracy: m.accuracy,
            dispersion: m.dispersion,
            epochs,
            buffer_bits,
            buffer_samples,
        }
    }
}

pub const ABSENT: &str = "absent";

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct CsvRow {
    task: String,
    subset: String,
    split: String,
    accuracy: String,
    dispersion: String,
    epochs: usize,
    buffer_bits: u64,
    buffer_samples: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == ABSENT {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad metric value {s:?}")))
}

/// All rows of one scenario run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn get(&self, task: Phase, subset: SubsetName, split: Split) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.subset == subset && r.split == split)
    }

    /// Accuracy of a row, `None` if absent or missing.
    pub fn accuracy(&self, task: Phase, subset: SubsetName, split: Split) -> Option<f64> {
        self.get(task, subset, split).and_then(|r| r.accuracy)
    }

    pub fn dispersion(&self, task: Phase, subset: SubsetName, split: Split) -> Option<f64> {
        self.get(task, subset, split).and_then(|r| r.dispersion)
    }

    /// Index of the last task with rows.
    pub fn last_task(&self) -> Option<Phase> {
        self.rows.iter().map(|r| r.task).max()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                task: r.task.to_string(),
                subset: r.subset.to_string(),
                split: r.split.as_str().to_string(),
                accuracy: fmt_opt(r.accuracy),
                dispersion: fmt_opt(r.dispersion),
                epochs: r.epochs,
                buffer_bits: r.buffer_bits,
                buffer_samples: r.buffer_samples,
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(text.as_bytes()).deserialize::<CsvRow>() {
            let r = rec.map_err(|e| Error::Format(e.to_string()))?;
            let bad = |what: &str, v: &str| Error::Format(format!("bad {what} {v:?}"));
            rows.push(ReportRow {
                task: Phase::parse(&r.task).ok_or_else(|| bad("task", &r.task))?,
                subset: SubsetName::parse(&r.subset).ok_or_else(|| bad("subset", &r.subset))?,
                split: Split::parse(&r.split).ok_or_else(|| bad("split", &r.split))?,
                accuracy: parse_opt(&r.accuracy)?,
                dispersion: parse_opt(&r.dispersion)?,
                epochs: r.epochs,
                buffer_bits: r.buffer_bits,
                buffer_samples: r.buffer_samples,
            });
        }
        Ok(RunReport { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_absent_rows() {
        let report = RunReport {
            rows: vec![
                ReportRow {
                    task: Phase::Pretrain,
                    subset: SubsetName::Pt,
                    split: Split::Test,
                    accuracy: Some(0.1 + 0.2),
                    dispersion: Some(1.0 / 3.0),
                    epochs: 7,
                    buffer_bits: 0,
                    buffer_samples: 0,
                },
                ReportRow {
                    task: Phase::Task(0),
                    subset: SubsetName::Old,
                    split: Split::Train,
                    accuracy: None,
                    dispersion: None,
                    epochs: 3,
                    buffer_bits: 1040,
                    buffer_samples: 10,
                },
            ],
        };
        let text = report.to_csv().unwrap();
        assert!(text.starts_with("task,subset,split,accuracy,dispersion,epochs,bufferBits,bufferSamples\n"));
        assert!(text.contains("0,old,train,absent,absent,3,1040,10"));
        assert_eq!(RunReport::from_csv(&text).unwrap(), report);
    }
}
