//! On-disk formats: JSON task files, JSONL query files and JSONL run logs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tlgrpo_core::policy::Checkpoint;
use tlgrpo_core::rl::{LogRecord, RunSink, TurnLog};
use tlgrpo_core::RlError;

use crate::{io_err, HarnessError};

pub const TASKS_FILE: &str = "tasks.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_IN_FILE: &str = "eval_in.jsonl";
pub const EVAL_OOD_FILE: &str = "eval_ood.jsonl";

pub fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("item serializes");
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Strict reader: any malformed line is an error naming its line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| HarnessError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

pub fn file_sha256(path: &Path) -> Result<String, HarnessError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A parsed run log. Unparseable lines are skipped and counted.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub skipped: usize,
}

impl RunLog {
    pub fn read(path: &Path) -> Result<RunLog, HarnessError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut log = RunLog::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(r) => log.records.push(r),
                Err(e) => {
                    warn!("{}:{}: skipping corrupt record: {e}", path.display(), n + 1);
                    log.skipped += 1;
                }
            }
        }
        Ok(log)
    }

    /// `(kind, label)` from the header record.
    pub fn header(&self) -> Option<(&str, &str)> {
        self.records.iter().find_map(|r| match r {
            LogRecord::Header { kind, label, .. } => Some((kind.as_str(), label.as_str())),
            _ => None,
        })
    }

    pub fn turns(&self) -> impl Iterator<Item = &TurnLog> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Turn(t) => Some(t),
            _ => None,
        })
    }
}

/// Streams log records to a JSONL file and checkpoints into a directory.
pub struct JsonlSink {
    path: PathBuf,
    writer: BufWriter<File>,
    checkpoint_dir: Option<PathBuf>,
    label: String,
    pub checkpoints: Vec<PathBuf>,
}

impl JsonlSink {
    pub fn create(path: &Path, checkpoint_dir: Option<&Path>, label: &str) -> Result<Self, HarnessError> {
        if let Some(parent) = path.parent() {
            ensure_dir(parent)?;
        }
        if let Some(dir) = checkpoint_dir {
            ensure_dir(dir)?;
        }
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        Ok(JsonlSink {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
            checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
            label: label.to_string(),
            checkpoints: Vec::new(),
        })
    }

    pub fn finish(mut self) -> Result<PathBuf, HarnessError> {
        self.writer.flush().map_err(|e| io_err(&self.path, e))?;
        Ok(self.path)
    }
}

impl RunSink for JsonlSink {
    fn record(&mut self, record: &LogRecord) -> Result<(), RlError> {
        let io = |e: std::io::Error| RlError::Io(e.to_string());
        serde_json::to_writer(&mut self.writer, record).map_err(|e| RlError::Io(e.to_string()))?;
        self.writer.write_all(b"\n").map_err(io)
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<(), RlError> {
        let Some(dir) = &self.checkpoint_dir else { return Ok(()) };
        let path = dir.join(format!("{}-{:06}.json", self.label, checkpoint.iteration));
        fs::write(&path, checkpoint.to_json()).map_err(|e| RlError::Io(format!("{}: {e}", path.display())))?;
        self.checkpoints.push(path);
        Ok(())
    }
}
