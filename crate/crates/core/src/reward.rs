//! Binary rewards for generated annotations: an accuracy reward (conclusion
//! agrees with the ground-truth label) and a format reward (strict template
//! compliance), plus batch annotation accuracy.
//!
//! Rewards are reported separately. Weighting or gating them is up to the
//! trainer that consumes the scores.

use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{self, ManifestError};
use crate::schema::{extract_conclusion, validate_annotation, Strictness, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RewardScore {
    pub accuracy: u8,
    pub format: u8,
}

/// One generated output and the label it should conclude with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorePair {
    pub raw_output: String,
    pub truth: Verdict,
}

/// Exact match counts; `accuracy` is derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub matched: u64,
    pub mismatched: u64,
    pub accuracy: f64,
}

impl AccuracyReport {
    pub fn from_counts(matched: u64, mismatched: u64) -> Result<Self, RewardError> {
        let total = matched + mismatched;
        if total == 0 {
            return Err(RewardError::EmptyBatch);
        }
        Ok(Self {
            matched,
            mismatched,
            accuracy: matched as f64 / total as f64,
        })
    }

    pub fn total(&self) -> u64 {
        self.matched + self.mismatched
    }

    /// Accuracy rounded for display.
    pub fn display_accuracy(&self) -> String {
        format!("{:.3}", self.accuracy)
    }
}

impl fmt::Display for AccuracyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "matched {} / {} (mismatched {}), accuracy {}",
            self.matched,
            self.total(),
            self.mismatched,
            self.display_accuracy()
        )
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("cannot compute accuracy of an empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn accuracy_reward(raw_output: &str, truth: Verdict) -> u8 {
    u8::from(extract_conclusion(raw_output) == Some(truth))
}

pub fn format_reward(raw_output: &str) -> u8 {
    u8::from(validate_annotation(raw_output, Strictness::Strict).ok)
}

pub fn score_pair(raw_output: &str, truth: Verdict) -> RewardScore {
    RewardScore {
        accuracy: accuracy_reward(raw_output, truth),
        format: format_reward(raw_output),
    }
}

pub fn batch_accuracy<'a, I>(records: I) -> Result<AccuracyReport, RewardError>
where
    I: IntoIterator<Item = (&'a str, Verdict)>,
{
    let (matched, total) = records
        .into_iter()
        .fold((0u64, 0u64), |(m, t), (raw, truth)| {
            (m + u64::from(accuracy_reward(raw, truth)), t + 1)
        });
    AccuracyReport::from_counts(matched, total - matched)
}

/// Per-record scores in input order plus the batch report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutput {
    pub scores: Vec<RewardScore>,
    pub report: AccuracyReport,
}

#[derive(Serialize)]
struct ScoreLine {
    index: usize,
    accuracy: u8,
    format: u8,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    report: &'a AccuracyReport,
}

impl ScoreOutput {
    /// Line-delimited rendering: one line per record, then the report line.
    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        for (index, s) in self.scores.iter().enumerate() {
            write_score_line(&mut out, index, s).expect("writing to memory");
        }
        write_report_line(&mut out, &self.report).expect("writing to memory");
        String::from_utf8(out).expect("json is utf-8")
    }
}

fn write_score_line<W: Write>(w: &mut W, index: usize, s: &RewardScore) -> std::io::Result<()> {
    manifest::write_record(
        w,
        &ScoreLine {
            index,
            accuracy: s.accuracy,
            format: s.format,
        },
    )
}

fn write_report_line<W: Write>(w: &mut W, report: &AccuracyReport) -> std::io::Result<()> {
    manifest::write_record(w, &ReportLine { report })
}

/// Scores a batch in parallel. Results keep input order.
pub fn score_batch(pairs: &[ScorePair]) -> Result<ScoreOutput, RewardError> {
    if pairs.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let scores: Vec<RewardScore> = pairs
        .par_iter()
        .map(|p| score_pair(&p.raw_output, p.truth))
        .collect();
    let matched = scores.iter().map(|s| u64::from(s.accuracy)).sum::<u64>();
    let report = AccuracyReport::from_counts(matched, scores.len() as u64 - matched)?;
    Ok(ScoreOutput { scores, report })
}

/// Incremental scorer for rollouts that arrive one at a time.
#[derive(Debug, Default, Clone)]
pub struct StreamingScorer {
    matched: u64,
    mismatched: u64,
}

impl StreamingScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, raw_output: &str, truth: Verdict) -> RewardScore {
        let score = score_pair(raw_output, truth);
        if score.accuracy == 1 {
            self.matched += 1;
        } else {
            self.mismatched += 1;
        }
        score
    }

    pub fn report(&self) -> Result<AccuracyReport, RewardError> {
        AccuracyReport::from_counts(self.matched, self.mismatched)
    }
}

/// Reads a pairs file and writes score lines as records arrive, followed by
/// the report line. Output is byte-identical to [`ScoreOutput::to_jsonl`].
pub fn score_stream<R: BufRead, W: Write>(reader: R, mut writer: W) -> Result<AccuracyReport, RewardError> {
    let mut scorer = StreamingScorer::new();
    let mut index = 0;
    manifest::for_each_record(reader, manifest::PAIRS, |_, pair: ScorePair| {
        let s = scorer.push(&pair.raw_output, pair.truth);
        write_score_line(&mut writer, index, &s)?;
        index += 1;
        Ok(())
    })?;
    let report = scorer.report()?;
    write_report_line(&mut writer, &report)?;
    writer.flush()?;
    Ok(report)
}
