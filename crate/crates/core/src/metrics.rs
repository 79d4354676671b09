//! Line-delimited JSON training log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceLoss {
    pub task: String,
    pub source: String,
    pub loss: f64,
}

/// One optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    /// 1-based step within the stage.
    pub step: usize,
    pub phase: String,
    pub losses: Vec<SourceLoss>,
    /// The objective that was minimised.
    pub total: f64,
    pub lr: f64,
}

/// Any record the log accepts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Transfer(crate::probe::TransferReport),
    Event { stage: String, message: String },
}

/// Appends whole lines under a lock so concurrent writers never interleave.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("record serialises");
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn step(&self, record: &StepRecord) -> Result<()> {
        self.append(&LogRecord::Step(record.clone()))
    }
}

/// Reads every record back; a torn final line (from a killed run) is skipped.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(r) = serde_json::from_str(&line) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Step records of one stage, in log order, keeping the last record per step
/// (a resumed run may repeat steps after its last checkpoint).
pub fn stage_steps(records: &[LogRecord], stage: &str) -> Vec<StepRecord> {
    let mut by_step = std::collections::BTreeMap::new();
    for r in records {
        if let LogRecord::Step(s) = r {
            if s.stage == stage {
                by_step.insert(s.step, s.clone());
            }
        }
    }
    by_step.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, total: f64) -> StepRecord {
        StepRecord {
            stage: "expansion".into(),
            step,
            phase: "joint".into(),
            losses: vec![SourceLoss { task: "a".into(), source: "s".into(), loss: total }],
            total,
            lr: 0.2,
        }
    }

    #[test]
    fn round_trip_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        let log = MetricsLog::open(&path).unwrap();
        for (s, v) in [(1, 3.0), (2, 2.0), (2, 1.5), (3, 1.0)] {
            log.step(&rec(s, v)).unwrap();
        }
        log.append(&LogRecord::Event { stage: "x".into(), message: "hi".into() }).unwrap();
        let records = read_log(&path).unwrap();
        assert_eq!(records.len(), 5);
        let steps = stage_steps(&records, "expansion");
        assert_eq!(steps.iter().map(|r| r.total).collect::<Vec<_>>(), vec![3.0, 1.5, 1.0]);
    }

    #[test]
    fn concurrent_writers_keep_lines_whole() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        let log = MetricsLog::open(&path).unwrap();
        std::thread::scope(|s| {
            for t in 0..4 {
                let log = &log;
                s.spawn(move || {
                    for i in 0..50 {
                        log.step(&rec(t * 100 + i, i as f64)).unwrap();
                    }
                });
            }
        });
        assert_eq!(read_log(&path).unwrap().len(), 200);
    }
}
