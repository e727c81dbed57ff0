//! Hard-case queue backed by an append-only event log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use facecot_core::dataset::DatasetStats;
use facecot_core::manifest::{self, ManifestError, EVENTS};
use facecot_core::pipeline::{submit_correction, CorrectionRejected, HardCase};
use facecot_core::schema::{serialize_annotation, CoTAnnotation};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Flagged { seq: u64, case: HardCase },
    /// An accepted correction; the case is resolved by it.
    Corrected { sample_id: String, correction: CoTAnnotation },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedCase {
    pub seq: u64,
    pub case: HardCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub pending: Vec<HardCase>,
    pub resolved: Vec<HardCase>,
    pub revision: u64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("event log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("event log: {0}")]
    Manifest(#[from] ManifestError),
    #[error("event log line {line}: {message}")]
    Replay { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("no hard case {0}")]
    NotFound(String),
    #[error("expected revision {expected}, store is at {actual}")]
    Conflict { expected: u64, actual: u64 },
    #[error(transparent)]
    Rejected(#[from] CorrectionRejected),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Default)]
pub struct Store {
    cases: Vec<QueuedCase>,
    index: HashMap<String, usize>,
    revision: u64,
    stats: DatasetStats,
    log: Option<(PathBuf, BufWriter<File>)>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays the log at `path` (created if missing) and appends to it afterwards.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut store = Self::default();
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        if exists {
            let mut failure = None;
            manifest::for_each_record(BufReader::new(File::open(path)?), EVENTS, |line, event: Event| {
                if let Err(message) = store.apply(event) {
                    failure.get_or_insert(StoreError::Replay { line, message });
                }
                Ok(())
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = BufWriter::new(file);
        if !exists {
            manifest::write_header(&mut writer, EVENTS)?;
            writer.flush()?;
        }
        store.log = Some((path.to_path_buf(), writer));
        Ok(store)
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn set_stats(&mut self, stats: DatasetStats) {
        self.stats = stats;
    }

    pub fn stats(&self) -> &DatasetStats {
        &self.stats
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Cases in flag order.
    pub fn cases(&self) -> &[QueuedCase] {
        &self.cases
    }

    pub fn get(&self, sample_id: &str) -> Option<&QueuedCase> {
        self.index.get(sample_id).map(|&i| &self.cases[i])
    }

    pub fn queue_state(&self) -> QueueState {
        let (resolved, pending): (Vec<_>, Vec<_>) =
            self.cases.iter().map(|q| q.case.clone()).partition(|c| c.resolved);
        QueueState {
            pending,
            resolved,
            revision: self.revision,
        }
    }

    fn apply(&mut self, event: Event) -> Result<(), String> {
        match event {
            Event::Flagged { seq, case } => {
                if self.index.contains_key(&case.sample_id) {
                    return Err(format!("{} flagged twice", case.sample_id));
                }
                self.index.insert(case.sample_id.clone(), self.cases.len());
                self.cases.push(QueuedCase { seq, case });
            }
            Event::Corrected { sample_id, correction } => {
                let &i = self.index.get(&sample_id).ok_or_else(|| format!("unknown case {sample_id}"))?;
                let case = &self.cases[i].case;
                let updated = submit_correction(case, &serialize_annotation(&correction), case.label)
                    .map_err(|e| format!("{sample_id}: {e}"))?;
                self.cases[i].case = updated;
            }
        }
        self.revision += 1;
        Ok(())
    }

    fn record(&mut self, event: Event) -> Result<(), StoreError> {
        if let Some((_, w)) = &mut self.log {
            manifest::write_record(w, &event)?;
            w.flush()?;
        }
        self.apply(event).map_err(|message| StoreError::Replay { line: 0, message })
    }

    /// Adds hard cases not already queued. Returns how many were added.
    pub fn flag_new(&mut self, cases: impl IntoIterator<Item = HardCase>) -> Result<usize, StoreError> {
        let mut added = 0;
        for mut case in cases {
            if self.index.contains_key(&case.sample_id) {
                continue;
            }
            case.correction = None;
            case.resolved = false;
            let seq = self.cases.last().map_or(0, |q| q.seq + 1);
            self.record(Event::Flagged { seq, case })?;
            added += 1;
        }
        Ok(added)
    }

    /// Gated correction with an optimistic revision check. On any error the
    /// store is unchanged.
    pub fn correct(&mut self, sample_id: &str, text: &str, expected_revision: u64) -> Result<&QueuedCase, CorrectionError> {
        let &i = self
            .index
            .get(sample_id)
            .ok_or_else(|| CorrectionError::NotFound(sample_id.to_string()))?;
        if expected_revision != self.revision {
            return Err(CorrectionError::Conflict {
                expected: expected_revision,
                actual: self.revision,
            });
        }
        let case = &self.cases[i].case;
        let updated = submit_correction(case, text, case.label)?;
        let correction = updated.correction.clone().expect("accepted corrections carry the annotation");
        self.record(Event::Corrected {
            sample_id: sample_id.to_string(),
            correction,
        })?;
        Ok(&self.cases[i])
    }
}
