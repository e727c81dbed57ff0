//! Annotation rounds: call the annotator for every sample, verify the
//! extracted conclusion against ground truth, retry mismatches, and flag
//! samples that still fail after the last round as hard cases.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{AnnotatorClient, ClientFailure};
use crate::manifest::{self, ManifestError};
use crate::prompt::{assemble_prompt, PromptBundle, PromptConfig, PromptError};
use crate::schema::{
    extract_conclusion, parse_annotation, validate_annotation, CoTAnnotation, ParseError, Strictness, Verdict,
};
use crate::taxonomy::{SampleRecord, Subtype};

pub const DEFAULT_MAX_ROUNDS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttemptStatus {
    Accepted,
    RetryScheduled,
    HardCase,
    /// Transport failure after exhausting transient retries. Terminal.
    ClientError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationAttempt {
    pub sample_id: String,
    pub round: u32,
    pub raw_output: String,
    /// Lenient parse of the output, when it has all six sections.
    pub parsed: Option<CoTAnnotation>,
    pub verdict: Option<Verdict>,
    pub status: AttemptStatus,
    #[serde(default)]
    pub transient_retries: u32,
    /// Strict-template violations, for reviewers.
    #[serde(default)]
    pub parse_errors: Vec<ParseError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_error: Option<String>,
}

impl AnnotationAttempt {
    /// An unrouted attempt holding a raw model output.
    pub fn new(sample_id: impl Into<String>, round: u32, raw_output: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            round,
            raw_output: raw_output.into(),
            parsed: None,
            verdict: None,
            status: AttemptStatus::RetryScheduled,
            transient_retries: 0,
            parse_errors: Vec::new(),
            client_error: None,
        }
    }

    fn client_error(sample_id: &str, round: u32, retries: u32, failure: &ClientFailure) -> Self {
        Self {
            status: AttemptStatus::ClientError,
            transient_retries: retries,
            client_error: Some(failure.to_string()),
            ..Self::new(sample_id, round, "")
        }
    }
}

/// Accepts iff the extracted conclusion equals `truth`; otherwise schedules a
/// retry while rounds remain, else flags a hard case.
pub fn verify_and_route(mut attempt: AnnotationAttempt, truth: Verdict, max_rounds: u32) -> AnnotationAttempt {
    attempt.verdict = extract_conclusion(&attempt.raw_output);
    attempt.parsed = parse_annotation(&attempt.raw_output, Strictness::Lenient).ok();
    attempt.parse_errors = validate_annotation(&attempt.raw_output, Strictness::Strict).errors;
    attempt.status = if attempt.verdict == Some(truth) {
        AttemptStatus::Accepted
    } else if attempt.round < max_rounds {
        AttemptStatus::RetryScheduled
    } else {
        AttemptStatus::HardCase
    };
    attempt
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub max_rounds: u32,
    pub max_transient_retries: u32,
    pub max_in_flight: usize,
    /// First backoff delay; doubles per transient retry up to `backoff_max`.
    pub backoff_base: Duration,
    pub backoff_max: Duration,
    pub prompt: PromptConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            max_transient_retries: 3,
            max_in_flight: 8,
            backoff_base: Duration::from_millis(500),
            backoff_max: Duration::from_secs(10),
            prompt: PromptConfig::default(),
        }
    }
}

impl PipelineConfig {
    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.backoff_base.saturating_mul(factor).min(self.backoff_max)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample {id}: {source}")]
    Prompt { id: String, source: PromptError },
    #[error("duplicate sample id {0}")]
    DuplicateSample(String),
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("attempt log: {0}")]
    Log(#[from] ManifestError),
    #[error("attempt log i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Append-only attempt log keyed by `(sample_id, round)`. Only the task that
/// drives [`annotate_batch`] writes to it.
pub struct AttemptLog {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    entries: Vec<AnnotationAttempt>,
    index: HashMap<(String, u32), usize>,
}

impl AttemptLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            writer: None,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Opens (or creates) a log file, loading entries already on disk.
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let mut log = Self::in_memory();
        let existing = path.exists() && std::fs::metadata(path)?.len() > 0;
        if existing {
            let records: Vec<AnnotationAttempt> =
                manifest::read_manifest(BufReader::new(File::open(path)?), manifest::ATTEMPTS)?;
            for r in records {
                log.insert(r);
            }
        }
        let mut writer = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        if !existing {
            manifest::write_header(&mut writer, manifest::ATTEMPTS)?;
            writer.flush()?;
        }
        log.writer = Some(writer);
        log.path = Some(path.to_path_buf());
        Ok(log)
    }

    fn insert(&mut self, attempt: AnnotationAttempt) {
        let key = (attempt.sample_id.clone(), attempt.round);
        self.index.insert(key, self.entries.len());
        self.entries.push(attempt);
    }

    pub fn append(&mut self, attempt: &AnnotationAttempt) -> Result<(), PipelineError> {
        if let Some(w) = self.writer.as_mut() {
            manifest::write_record(w, attempt)?;
            w.flush()?;
        }
        self.insert(attempt.clone());
        Ok(())
    }

    pub fn get(&self, sample_id: &str, round: u32) -> Option<&AnnotationAttempt> {
        self.index
            .get(&(sample_id.to_string(), round))
            .map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[AnnotationAttempt] {
        &self.entries
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

async fn run_attempt(
    client: &dyn AnnotatorClient,
    bundle: &PromptBundle,
    round: u32,
    cfg: &PipelineConfig,
) -> AnnotationAttempt {
    let mut retries = 0;
    loop {
        match client.complete(bundle).await {
            Ok(raw) => {
                let mut a = verify_and_route(
                    AnnotationAttempt::new(&bundle.sample_id, round, raw),
                    bundle.label,
                    cfg.max_rounds,
                );
                a.transient_retries = retries;
                return a;
            }
            Err(ClientFailure::Transient(msg)) if retries < cfg.max_transient_retries => {
                retries += 1;
                tracing::debug!(sample = %bundle.sample_id, round, retries, "transient failure: {msg}");
                let delay = cfg.backoff(retries);
                if !delay.is_zero() {
                    tokio::time::sleep(delay).await;
                }
            }
            Err(failure) => {
                tracing::warn!(sample = %bundle.sample_id, round, "{failure}");
                return AnnotationAttempt::client_error(&bundle.sample_id, round, retries, &failure);
            }
        }
    }
}

/// Runs up to `cfg.max_rounds` rounds over `samples`. Attempts already in
/// `log` are reused instead of calling the client again. The returned
/// attempts are grouped per sample in input order, then by round.
pub async fn annotate_batch(
    samples: &[SampleRecord],
    client: &dyn AnnotatorClient,
    cfg: &PipelineConfig,
    log: &mut AttemptLog,
) -> Result<Vec<AnnotationAttempt>, PipelineError> {
    if cfg.max_rounds == 0 {
        return Err(PipelineError::NoRounds);
    }
    let mut seen = HashSet::new();
    let bundles = samples
        .iter()
        .map(|s| {
            if !seen.insert(s.id.as_str()) {
                return Err(PipelineError::DuplicateSample(s.id.clone()));
            }
            assemble_prompt(s, &cfg.prompt).map_err(|source| PipelineError::Prompt {
                id: s.id.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_sample: Vec<Vec<AnnotationAttempt>> = vec![Vec::new(); samples.len()];
    let mut pending: Vec<usize> = (0..samples.len()).collect();

    for round in 1..=cfg.max_rounds {
        if pending.is_empty() {
            break;
        }
        let mut to_call = Vec::new();
        for &idx in &pending {
            match log.get(&samples[idx].id, round) {
                Some(done) => per_sample[idx].push(done.clone()),
                None => to_call.push(idx),
            }
        }
        let bundles = &bundles;
        // `buffered` keeps completion order equal to input order, so the log
        // is written deterministically while requests still overlap.
        let mut results = stream::iter(to_call)
            .map(|idx| async move { (idx, run_attempt(client, &bundles[idx], round, cfg).await) })
            .buffered(cfg.max_in_flight.max(1));
        while let Some((idx, attempt)) = results.next().await {
            log.append(&attempt)?;
            per_sample[idx].push(attempt);
        }
        pending.retain(|&idx| {
            per_sample[idx]
                .last()
                .is_some_and(|a| a.status == AttemptStatus::RetryScheduled)
        });
        tracing::info!(round, retrying = pending.len(), "annotation round finished");
    }

    Ok(per_sample.into_iter().flatten().collect())
}

/// Final state of each sample after a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub samples: usize,
    pub accepted: usize,
    pub hard: usize,
    pub client_error: usize,
    /// Samples still waiting for another round (only after partial runs).
    pub unfinished: usize,
    pub accepted_by_round: Vec<usize>,
}

pub fn final_attempts(attempts: &[AnnotationAttempt]) -> HashMap<&str, &AnnotationAttempt> {
    let mut last: HashMap<&str, &AnnotationAttempt> = HashMap::new();
    for a in attempts {
        let slot = last.entry(a.sample_id.as_str()).or_insert(a);
        if a.round >= slot.round {
            *slot = a;
        }
    }
    last
}

pub fn summarize(attempts: &[AnnotationAttempt]) -> RunSummary {
    let mut s = RunSummary::default();
    for a in final_attempts(attempts).values() {
        s.samples += 1;
        match a.status {
            AttemptStatus::Accepted => {
                s.accepted += 1;
                let r = a.round as usize;
                if s.accepted_by_round.len() < r {
                    s.accepted_by_round.resize(r, 0);
                }
                s.accepted_by_round[r - 1] += 1;
            }
            AttemptStatus::HardCase => s.hard += 1,
            AttemptStatus::ClientError => s.client_error += 1,
            AttemptStatus::RetryScheduled => s.unfinished += 1,
        }
    }
    s
}

/// A sample whose annotation still failed verification after the last round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardCase {
    pub sample_id: String,
    pub image_ref: String,
    pub label: Verdict,
    pub subtype: Subtype,
    pub attempts: Vec<AnnotationAttempt>,
    pub correction: Option<CoTAnnotation>,
    pub resolved: bool,
}

/// Hard cases in sample order, each with its full attempt history.
pub fn collect_hard_cases(samples: &[SampleRecord], attempts: &[AnnotationAttempt]) -> Vec<HardCase> {
    let mut by_sample: HashMap<&str, Vec<AnnotationAttempt>> = HashMap::new();
    for a in attempts {
        by_sample.entry(a.sample_id.as_str()).or_default().push(a.clone());
    }
    samples
        .iter()
        .filter_map(|s| {
            let mut history = by_sample.remove(s.id.as_str())?;
            history.sort_by_key(|a| a.round);
            (history.last()?.status == AttemptStatus::HardCase).then(|| HardCase {
                sample_id: s.id.clone(),
                image_ref: s.image_ref.clone(),
                label: s.label,
                subtype: s.subtype,
                attempts: history,
                correction: None,
                resolved: false,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    FormatInvalid,
    ConclusionMismatch,
    AlreadyResolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("correction rejected: {reason:?}")]
pub struct CorrectionRejected {
    pub reason: RejectReason,
    pub errors: Vec<ParseError>,
}

/// Gate for expert edits: the text must pass the strict template and
/// conclude with the ground truth. On rejection `case` is left untouched.
pub fn submit_correction(case: &HardCase, edited: &str, truth: Verdict) -> Result<HardCase, CorrectionRejected> {
    if case.resolved {
        return Err(CorrectionRejected {
            reason: RejectReason::AlreadyResolved,
            errors: Vec::new(),
        });
    }
    let report = validate_annotation(edited, Strictness::Strict);
    if !report.ok {
        return Err(CorrectionRejected {
            reason: RejectReason::FormatInvalid,
            errors: report.errors,
        });
    }
    let annotation = parse_annotation(edited, Strictness::Strict).map_err(|e| CorrectionRejected {
        reason: RejectReason::FormatInvalid,
        errors: vec![e],
    })?;
    if annotation.verdict() != truth {
        return Err(CorrectionRejected {
            reason: RejectReason::ConclusionMismatch,
            errors: Vec::new(),
        });
    }
    let mut updated = case.clone();
    updated.correction = Some(annotation);
    updated.resolved = true;
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{template_annotation, ScriptedClient};
    use crate::schema::serialize_annotation;

    fn fast_cfg() -> PipelineConfig {
        PipelineConfig {
            backoff_base: Duration::ZERO,
            ..PipelineConfig::default()
        }
    }

    fn samples(n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| {
                let st = Subtype::ALL[i % Subtype::ALL.len()];
                SampleRecord::new(format!("s{i:03}"), format!("img/s{i:03}.jpg"), st)
            })
            .collect()
    }

    #[test]
    fn routing_rules() {
        let yes = template_annotation("x", Verdict::Yes);
        let a = verify_and_route(AnnotationAttempt::new("x", 1, yes.clone()), Verdict::Yes, 2);
        assert_eq!(a.status, AttemptStatus::Accepted);
        assert!(a.parsed.is_some());
        assert!(a.parse_errors.is_empty());
        let a = verify_and_route(AnnotationAttempt::new("x", 1, yes.clone()), Verdict::No, 2);
        assert_eq!(a.status, AttemptStatus::RetryScheduled);
        let a = verify_and_route(AnnotationAttempt::new("x", 2, yes), Verdict::No, 2);
        assert_eq!(a.status, AttemptStatus::HardCase);
        let a = verify_and_route(AnnotationAttempt::new("x", 1, "no tags"), Verdict::No, 1);
        assert_eq!(a.status, AttemptStatus::HardCase);
        assert_eq!(a.verdict, None);
        assert!(!a.parse_errors.is_empty());
    }

    #[tokio::test]
    async fn echo_client_accepts_everything_in_round_one() {
        let s = samples(30);
        let client = ScriptedClient::echo();
        let attempts = annotate_batch(&s, &client, &fast_cfg(), &mut AttemptLog::in_memory())
            .await
            .unwrap();
        assert_eq!(attempts.len(), 30);
        assert!(attempts.iter().all(|a| a.status == AttemptStatus::Accepted && a.round == 1));
        let ids: Vec<_> = attempts.iter().map(|a| a.sample_id.clone()).collect();
        let expected: Vec<_> = s.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids, expected);
    }

    #[tokio::test]
    async fn transient_errors_are_retried() {
        let s = samples(1);
        let client = ScriptedClient::new(|b, call| {
            if call <= 2 {
                Err(ClientFailure::Transient("503".into()))
            } else {
                Ok(template_annotation(&b.sample_id, b.label))
            }
        });
        let attempts = annotate_batch(&s, &client, &fast_cfg(), &mut AttemptLog::in_memory())
            .await
            .unwrap();
        assert_eq!(attempts.len(), 1);
        assert_eq!(attempts[0].status, AttemptStatus::Accepted);
        assert_eq!(attempts[0].transient_retries, 2);
        assert_eq!(client.calls("s000"), 3);
    }

    #[tokio::test]
    async fn exhausted_retries_become_client_error() {
        let s = samples(2);
        let client = ScriptedClient::new(|b, _| {
            if b.sample_id == "s000" {
                Err(ClientFailure::Transient("timeout".into()))
            } else {
                Err(ClientFailure::Fatal("401".into()))
            }
        });
        let cfg = fast_cfg();
        let attempts = annotate_batch(&s, &client, &cfg, &mut AttemptLog::in_memory())
            .await
            .unwrap();
        assert_eq!(attempts.len(), 2);
        assert!(attempts.iter().all(|a| a.status == AttemptStatus::ClientError));
        assert_eq!(client.calls("s000"), 1 + cfg.max_transient_retries);
        assert_eq!(client.calls("s001"), 1);
        let summary = summarize(&attempts);
        assert_eq!(summary.client_error, 2);
    }

    #[tokio::test]
    async fn resume_skips_logged_attempts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attempts.jsonl");
        let s = samples(10);
        let wrong_once = |b: &PromptBundle, call: u32| {
            let v = if call == 1 && b.sample_id.ends_with('3') { b.label.flipped() } else { b.label };
            Ok(template_annotation(&b.sample_id, v))
        };

        let first = ScriptedClient::new(wrong_once);
        let mut log = AttemptLog::open(&path).unwrap();
        let attempts = annotate_batch(&s[..5], &first, &fast_cfg(), &mut log).await.unwrap();
        assert_eq!(attempts.len(), 6);
        drop(log);

        let second = ScriptedClient::new(wrong_once);
        let mut log = AttemptLog::open(&path).unwrap();
        let all = annotate_batch(&s, &second, &fast_cfg(), &mut log).await.unwrap();
        assert_eq!(all.len(), 11);
        assert_eq!(second.total_calls(), 5);
        for done in &s[..5] {
            assert_eq!(second.calls(&done.id), 0);
        }
        assert_eq!(log.entries().len(), 11);
        assert_eq!(summarize(&all).accepted, 10);
    }

    #[test]
    fn correction_gate() {
        let s = SampleRecord::new("m1", "m1.jpg", Subtype::Mask3D);
        let case = HardCase {
            sample_id: s.id.clone(),
            image_ref: s.image_ref.clone(),
            label: s.label,
            subtype: s.subtype,
            attempts: vec![],
            correction: None,
            resolved: false,
        };
        let good = template_annotation("m1", Verdict::Yes);
        let resolved = submit_correction(&case, &good, Verdict::Yes).unwrap();
        assert!(resolved.resolved);
        assert_eq!(
            serialize_annotation(resolved.correction.as_ref().unwrap()),
            good
        );

        let wrong = template_annotation("m1", Verdict::No);
        assert_eq!(
            submit_correction(&case, &wrong, Verdict::Yes).unwrap_err().reason,
            RejectReason::ConclusionMismatch
        );

        let start = good.find("<Reasoning>").unwrap();
        let end = good.find("</Reasoning>").unwrap() + "</Reasoning>".len();
        let no_reasoning = format!("{}{}", &good[..start], &good[end..]);
        let err = submit_correction(&case, &no_reasoning, Verdict::Yes).unwrap_err();
        assert_eq!(err.reason, RejectReason::FormatInvalid);
        assert!(!err.errors.is_empty());

        assert_eq!(
            submit_correction(&resolved, &good, Verdict::Yes).unwrap_err().reason,
            RejectReason::AlreadyResolved
        );
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let cfg = PipelineConfig {
            backoff_base: Duration::from_millis(100),
            backoff_max: Duration::from_millis(350),
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.backoff(1), Duration::from_millis(100));
        assert_eq!(cfg.backoff(2), Duration::from_millis(200));
        assert_eq!(cfg.backoff(3), Duration::from_millis(350));
        assert_eq!(cfg.backoff(40), Duration::from_millis(350));
    }
}
