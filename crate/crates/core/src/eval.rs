//! Face anti-spoofing metrics over per-sample liveness scores: AUC, the EER
//! operating point and HTER, plus a multi-benchmark report.
//!
//! Conventions: higher score means more live; an attack is falsely accepted
//! when its score is `>= threshold`; a live face is falsely rejected when its
//! score is `< threshold`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalLabel {
    Live,
    Attack,
}

impl FromStr for EvalLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" | "real" | "bonafide" => Ok(EvalLabel::Live),
            "attack" | "spoof" | "fake" => Ok(EvalLabel::Attack),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: String,
    pub score: f64,
    pub label: EvalLabel,
}

impl EvalRow {
    pub fn new(sample_id: impl Into<String>, score: f64, label: EvalLabel) -> Self {
        Self {
            sample_id: sample_id.into(),
            score,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub hter_pct: f64,
    pub auc_pct: f64,
    pub far: f64,
    pub frr: f64,
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub eer_pct: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one live and one attack row (live {live}, attack {attack})")]
    DegenerateClasses { live: usize, attack: usize },
    #[error("row {sample_id}: score {score} is not a finite value in [0, 1]")]
    InvalidScore { sample_id: String, score: f64 },
    #[error("score file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Threshold values may be infinite; JSON carries those as "inf" / "-inf".
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            Repr::Text(if *v > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(n) => Ok(n),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad threshold {other:?}"))),
            },
        }
    }
}

/// Sorted scores per class.
struct Split {
    live: Vec<f64>,
    attack: Vec<f64>,
}

fn split(rows: &[EvalRow]) -> Result<Split, EvalError> {
    let mut live = Vec::new();
    let mut attack = Vec::new();
    for r in rows {
        if !r.score.is_finite() || !(0.0..=1.0).contains(&r.score) {
            return Err(EvalError::InvalidScore {
                sample_id: r.sample_id.clone(),
                score: r.score,
            });
        }
        match r.label {
            EvalLabel::Live => live.push(r.score),
            EvalLabel::Attack => attack.push(r.score),
        }
    }
    if live.is_empty() || attack.is_empty() {
        return Err(EvalError::DegenerateClasses {
            live: live.len(),
            attack: attack.len(),
        });
    }
    live.sort_by(f64::total_cmp);
    attack.sort_by(f64::total_cmp);
    Ok(Split { live, attack })
}

fn count_below(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&s| s < t)
}

fn count_at_or_above(sorted: &[f64], t: f64) -> usize {
    sorted.len() - count_below(sorted, t)
}

impl Split {
    fn auc_pct(&self) -> f64 {
        // twice the number of correctly ordered pairs, ties counting one
        let doubled: u128 = self
            .live
            .iter()
            .map(|&l| {
                let below = count_below(&self.attack, l);
                let not_above = self.attack.partition_point(|&a| a <= l);
                (2 * below + (not_above - below)) as u128
            })
            .sum();
        let pairs = 2 * (self.live.len() as u128) * (self.attack.len() as u128);
        100.0 * doubled as f64 / pairs as f64
    }

    /// (false accepts, false rejects) at `t`.
    fn errors_at(&self, t: f64) -> (usize, usize) {
        (count_at_or_above(&self.attack, t), count_below(&self.live, t))
    }

    fn rates_at(&self, t: f64) -> (f64, f64) {
        let (fa, fr) = self.errors_at(t);
        (fa as f64 / self.attack.len() as f64, fr as f64 / self.live.len() as f64)
    }

    fn eer(&self) -> (f64, f64) {
        let mut scores: Vec<f64> = self.live.iter().chain(&self.attack).copied().collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        let candidates = std::iter::once(f64::NEG_INFINITY)
            .chain(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0))
            .chain(std::iter::once(f64::INFINITY));
        let (na, nl) = (self.attack.len() as i128, self.live.len() as i128);
        let mut best: Option<(i128, f64)> = None;
        for t in candidates {
            let (fa, fr) = self.errors_at(t);
            // |FAR - FRR| scaled by na * nl, compared exactly
            let gap = (fa as i128 * nl - fr as i128 * na).abs();
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, t));
            }
        }
        let (_, t) = best.expect("at least two candidates");
        let (far, frr) = self.rates_at(t);
        (t, 100.0 * (far + frr) / 2.0)
    }
}

/// Probability that a random live row outscores a random attack row, ties
/// counting one half, as a percentage.
pub fn compute_auc(rows: &[EvalRow]) -> Result<f64, EvalError> {
    Ok(split(rows)?.auc_pct())
}

/// Threshold minimizing |FAR - FRR| over -inf, the midpoints between adjacent
/// distinct scores, and +inf (lowest threshold on ties), with the EER there.
pub fn eer_threshold(rows: &[EvalRow]) -> Result<(f64, f64), EvalError> {
    Ok(split(rows)?.eer())
}

pub fn compute_hter(rows: &[EvalRow], threshold: f64) -> Result<EvalMetrics, EvalError> {
    let s = split(rows)?;
    let (far, frr) = s.rates_at(threshold);
    let (_, eer_pct) = s.eer();
    Ok(EvalMetrics {
        hter_pct: 100.0 * (far + frr) / 2.0,
        auc_pct: s.auc_pct(),
        far,
        frr,
        threshold,
        eer_pct,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdPolicy {
    /// EER threshold of each evaluation set itself.
    EerOnEval,
    Fixed(f64),
    /// EER threshold computed once on a development score file.
    FromDevFile(PathBuf),
}

impl FromStr for ThresholdPolicy {
    type Err = String;

    /// `eer`, `fixed:<t>` or `dev:<path>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("eer") {
            return Ok(ThresholdPolicy::EerOnEval);
        }
        if let Some(t) = s.strip_prefix("fixed:") {
            let t: f64 = t.parse().map_err(|_| format!("bad fixed threshold {t:?}"))?;
            return Ok(ThresholdPolicy::Fixed(t));
        }
        if let Some(p) = s.strip_prefix("dev:") {
            return Ok(ThresholdPolicy::FromDevFile(PathBuf::from(p)));
        }
        Err(format!("unknown threshold policy {s:?} (expected eer, fixed:<t> or dev:<path>)"))
    }
}

/// Reads a score file: one header line `sample_id score label`, optionally
/// followed by `lower_is_live`, then one `sample_id score label` row per line.
/// Lower-is-live files are mapped to `1 - score` on load.
pub fn parse_score_file<R: BufRead>(reader: R) -> Result<Vec<EvalRow>, EvalError> {
    let mut rows = Vec::new();
    let mut invert = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let malformed = |message: String| EvalError::Malformed { line: line_no, message };
        let Some(lower_is_live) = invert else {
            let names: Vec<String> = fields.iter().map(|f| f.to_ascii_lowercase()).collect();
            if names.len() < 3 || names[..3] != ["sample_id", "score", "label"] {
                return Err(malformed("expected header `sample_id score label`".into()));
            }
            invert = Some(match names.get(3).map(String::as_str) {
                None | Some("higher_is_live") => false,
                Some("lower_is_live") => true,
                Some(other) => return Err(malformed(format!("unknown header flag {other:?}"))),
            });
            continue;
        };
        let [id, score, label] = fields[..] else {
            return Err(malformed(format!("expected 3 fields, found {}", fields.len())));
        };
        let score: f64 = score.parse().map_err(|_| malformed(format!("bad score {score:?}")))?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(malformed(format!("score {score} outside [0, 1]")));
        }
        let label: EvalLabel = label.parse().map_err(malformed)?;
        let score = if lower_is_live { 1.0 - score } else { score };
        rows.push(EvalRow::new(id, score, label));
    }
    if invert.is_none() {
        return Err(EvalError::Malformed {
            line: 0,
            message: "empty score file".into(),
        });
    }
    Ok(rows)
}

pub fn read_score_file(path: &Path) -> Result<Vec<EvalRow>, EvalError> {
    parse_score_file(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub benchmark: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub benchmarks: usize,
    pub hter_pct: f64,
    pub auc_pct: f64,
    pub eer_pct: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub average: Option<AverageRow>,
}

impl BenchmarkReport {
    fn from_rows(rows: Vec<BenchmarkRow>) -> Self {
        let ok: Vec<&EvalMetrics> = rows.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let average = (!ok.is_empty()).then(|| {
            let n = ok.len() as f64;
            let mean = |f: fn(&EvalMetrics) -> f64| ok.iter().map(|m| f(m)).sum::<f64>() / n;
            AverageRow {
                benchmarks: ok.len(),
                hter_pct: mean(|m| m.hter_pct),
                auc_pct: mean(|m| m.auc_pct),
                eer_pct: mean(|m| m.eer_pct),
                far: mean(|m| m.far),
                frr: mean(|m| m.frr),
            }
        });
        Self { rows, average }
    }

    pub fn render_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.benchmark.len())
            .chain(["Benchmark".len(), "Avg.".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>8}  {:>8}  {:>8}  {:>10}",
            "Benchmark", "HTER(%)", "AUC(%)", "EER(%)", "Threshold"
        );
        let rule = "-".repeat(name_w + 2 + 8 + 2 + 8 + 2 + 8 + 2 + 10);
        let _ = writeln!(out, "{rule}");
        for r in &self.rows {
            match (&r.metrics, &r.error) {
                (Some(m), _) => {
                    let _ = writeln!(
                        out,
                        "{:<name_w$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>10}",
                        r.benchmark,
                        m.hter_pct,
                        m.auc_pct,
                        m.eer_pct,
                        format_threshold(m.threshold)
                    );
                }
                (None, err) => {
                    let _ = writeln!(
                        out,
                        "{:<name_w$}  error: {}",
                        r.benchmark,
                        err.as_deref().unwrap_or("unknown")
                    );
                }
            }
        }
        if let Some(a) = &self.average {
            let _ = writeln!(out, "{rule}");
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>10}",
                "Avg.", a.hter_pct, a.auc_pct, a.eer_pct, ""
            );
        }
        out
    }
}

fn format_threshold(t: f64) -> String {
    if t.is_infinite() {
        if t > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{t:.4}")
    }
}

/// Evaluates in-memory benchmarks. Benchmarks are processed in parallel and
/// reported in name order.
pub fn run_protocol_rows(
    benchmarks: &BTreeMap<String, Result<Vec<EvalRow>, String>>,
    policy: &ThresholdPolicy,
) -> BenchmarkReport {
    let fixed = match policy {
        ThresholdPolicy::EerOnEval => Ok(None),
        ThresholdPolicy::Fixed(t) => Ok(Some(*t)),
        ThresholdPolicy::FromDevFile(path) => read_score_file(path)
            .and_then(|rows| eer_threshold(&rows))
            .map(|(t, _)| Some(t))
            .map_err(|e| format!("dev file {}: {e}", path.display())),
    };
    let entries: Vec<(&String, &Result<Vec<EvalRow>, String>)> = benchmarks.iter().collect();
    let rows = entries
        .par_iter()
        .map(|(name, loaded)| {
            let result = loaded.as_ref().map_err(Clone::clone).and_then(|rows| {
                let threshold = match &fixed {
                    Ok(Some(t)) => *t,
                    Ok(None) => eer_threshold(rows).map_err(|e| e.to_string())?.0,
                    Err(e) => return Err(e.clone()),
                };
                compute_hter(rows, threshold).map_err(|e| e.to_string())
            });
            match result {
                Ok(m) => BenchmarkRow {
                    benchmark: (*name).clone(),
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => BenchmarkRow {
                    benchmark: (*name).clone(),
                    metrics: None,
                    error: Some(e),
                },
            }
        })
        .collect();
    BenchmarkReport::from_rows(rows)
}

/// Loads every score file and evaluates it. Errors in one benchmark are
/// reported in its row.
pub fn run_protocol(score_files: &BTreeMap<String, PathBuf>, policy: &ThresholdPolicy) -> BenchmarkReport {
    let loaded = score_files
        .iter()
        .map(|(name, path)| (name.clone(), read_score_file(path).map_err(|e| e.to_string())))
        .collect();
    run_protocol_rows(&loaded, policy)
}

/// Maps every regular, non-hidden file in `dir` to its stem.
pub fn discover_score_files(dir: &Path) -> std::io::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.is_file() && !stem.starts_with('.') {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(live: &[f64], attack: &[f64]) -> Vec<EvalRow> {
        live.iter()
            .enumerate()
            .map(|(i, &s)| EvalRow::new(format!("l{i}"), s, EvalLabel::Live))
            .chain(
                attack
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| EvalRow::new(format!("a{i}"), s, EvalLabel::Attack)),
            )
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&rows(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 100.0);
        assert_eq!(compute_auc(&rows(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 50.0);
        assert_eq!(compute_auc(&rows(&[0.9, 0.4], &[0.6, 0.1])).unwrap(), 75.0);
    }

    #[test]
    fn degenerate_classes() {
        assert!(matches!(
            compute_auc(&rows(&[0.3], &[])),
            Err(EvalError::DegenerateClasses { live: 1, attack: 0 })
        ));
        assert!(matches!(eer_threshold(&rows(&[], &[0.3])), Err(EvalError::DegenerateClasses { .. })));
        assert!(matches!(compute_hter(&[], 0.5), Err(EvalError::DegenerateClasses { .. })));
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer_threshold(&rows(&[0.6], &[0.4])).unwrap(), (0.5, 0.0));
        let (t, eer) = eer_threshold(&rows(&[0.9, 0.7], &[0.3, 0.1])).unwrap();
        assert!(t > 0.3 && t < 0.7);
        assert_eq!(eer, 0.0);
    }

    #[test]
    fn hter_examples() {
        let m = compute_hter(&rows(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]), 0.5).unwrap();
        assert!((m.far - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.frr - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.hter_pct - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(format!("{:.3}", m.hter_pct), "33.333");

        let m = compute_hter(&rows(&[0.9, 0.8], &[0.2, 0.1]), 0.5).unwrap();
        assert_eq!(m.hter_pct, 0.0);

        let m = compute_hter(&rows(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]), 0.05).unwrap();
        assert_eq!((m.far, m.frr, m.hter_pct), (1.0, 0.0, 50.0));
    }

    #[test]
    fn threshold_ties_count_as_acceptance() {
        let m = compute_hter(&rows(&[0.5], &[0.5]), 0.5).unwrap();
        assert_eq!((m.far, m.frr), (1.0, 0.0));
    }

    #[test]
    fn invalid_scores_are_rejected() {
        assert!(matches!(compute_auc(&rows(&[1.2], &[0.1])), Err(EvalError::InvalidScore { .. })));
        assert!(matches!(compute_auc(&rows(&[f64::NAN], &[0.1])), Err(EvalError::InvalidScore { .. })));
    }

    #[test]
    fn score_file_parsing() {
        let text = "sample_id score label\n# comment\na 0.9 live\nb 0.2 attack\n";
        let r = parse_score_file(text.as_bytes()).unwrap();
        assert_eq!(r, rows_named(&[("a", 0.9, EvalLabel::Live), ("b", 0.2, EvalLabel::Attack)]));

        let flipped = "sample_id score label lower_is_live\na 0.25 live\nb 0.75 spoof\n";
        let r = parse_score_file(flipped.as_bytes()).unwrap();
        assert_eq!(r, rows_named(&[("a", 0.75, EvalLabel::Live), ("b", 0.25, EvalLabel::Attack)]));

        for (bad, line) in [
            ("id s l\n", 1),
            ("sample_id score label\na 0.5\n", 2),
            ("sample_id score label\na x live\n", 2),
            ("sample_id score label\na 1.5 live\n", 2),
            ("sample_id score label\na 0.5 maybe\n", 2),
        ] {
            match parse_score_file(bad.as_bytes()) {
                Err(EvalError::Malformed { line: l, .. }) => assert_eq!(l, line, "{bad:?}"),
                other => panic!("{bad:?}: {other:?}"),
            }
        }
    }

    fn rows_named(v: &[(&str, f64, EvalLabel)]) -> Vec<EvalRow> {
        v.iter().map(|&(id, s, l)| EvalRow::new(id, s, l)).collect()
    }

    #[test]
    fn protocol_reports_errors_inline_and_averages() {
        let mut benches = BTreeMap::new();
        benches.insert("a".to_string(), Ok(rows(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1])));
        benches.insert("b".to_string(), Ok(rows(&[0.9], &[0.1])));
        benches.insert("c".to_string(), Ok(rows(&[0.9], &[])));
        benches.insert("d".to_string(), Err("cannot read".to_string()));
        let report = run_protocol_rows(&benches, &ThresholdPolicy::Fixed(0.5));
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows[2].error.as_deref().unwrap().contains("live 1, attack 0"));
        assert_eq!(report.rows[3].error.as_deref(), Some("cannot read"));
        let avg = report.average.as_ref().unwrap();
        assert_eq!(avg.benchmarks, 2);
        let a = report.rows[0].metrics.as_ref().unwrap();
        let b = report.rows[1].metrics.as_ref().unwrap();
        assert_eq!(avg.hter_pct, (a.hter_pct + b.hter_pct) / 2.0);
        assert_eq!(avg.auc_pct, (a.auc_pct + b.auc_pct) / 2.0);
        let table = report.render_table();
        assert!(table.contains("Avg."));
        assert!(table.contains("error: cannot read"));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("eer".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::EerOnEval);
        assert_eq!("fixed:0.5".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Fixed(0.5));
        assert_eq!(
            "dev:/x/dev.txt".parse::<ThresholdPolicy>().unwrap(),
            ThresholdPolicy::FromDevFile("/x/dev.txt".into())
        );
        assert!("median".parse::<ThresholdPolicy>().is_err());
    }

    #[test]
    fn infinite_threshold_serializes() {
        let m = compute_hter(&rows(&[0.9], &[0.1]), f64::NEG_INFINITY).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"threshold\":\"-inf\""));
        let back: EvalMetrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
