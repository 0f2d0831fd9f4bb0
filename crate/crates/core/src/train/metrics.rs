use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Task, TrainError};
use crate::masking::Stage;

pub const METRICS_HEADER: &str = "step,task,stage,mlm_loss,dlm_cls_loss,lr";

/// One metrics row. Floats print in shortest round-trip form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub task: Task,
    pub stage: Stage,
    pub mlm_loss: f32,
    pub dlm_cls_loss: Option<f32>,
    pub lr: f32,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let cls = self.dlm_cls_loss.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step, self.task, self.stage, self.mlm_loss, cls, self.lr
        )
    }
}

/// Append-only CSV. Opening for a resumed run drops rows at or after the
/// resume step so the file matches an uninterrupted run.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path, resume_step: u64) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut keep = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(io)?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(io)?;
                if i == 0 {
                    continue;
                }
                let step: u64 = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| {
                        TrainError::Data(format!("{}: bad metrics row {}", path.display(), i + 1))
                    })?;
                if step < resume_step {
                    keep.push(line);
                }
            }
        }
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(io)?;
        let mut out = BufWriter::new(f);
        writeln!(out, "{METRICS_HEADER}").map_err(io)?;
        for l in keep {
            writeln!(out, "{l}").map_err(io)?;
        }
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        writeln!(self.out, "{}", rec.csv_line()).map_err(|source| TrainError::Io {
            path: self.path.display().to_string(),
            source,
        })
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush().map_err(|source| TrainError::Io {
            path: self.path.display().to_string(),
            source,
        })
    }
}
