//! Balanced dataset manifests, per-subtype statistics and the two training
//! stage manifests.
//!
//! Each category's target is split evenly across its subtypes. A subtype with
//! fewer samples than its quota contributes everything it has; the shortfall
//! goes to sibling subtypes in proportion to their remaining availability
//! (largest-remainder rounding, ties by subtype order).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{self, ManifestError};
use crate::pipeline::{AnnotationAttempt, AttemptStatus};
use crate::schema::{serialize_annotation, CoTAnnotation, Verdict};
use crate::taxonomy::{Category, RecordError, SampleRecord, Subtype};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub per_category_target: BTreeMap<Category, usize>,
    #[serde(default = "default_tolerance")]
    pub subtype_balance_tolerance: usize,
    #[serde(default)]
    pub seed: u64,
    /// Take whatever a short category has instead of failing; the unmet part
    /// is reported in the shortfall report.
    #[serde(default)]
    pub allow_partial: bool,
}

fn default_tolerance() -> usize {
    1
}

impl SamplingPlan {
    pub fn uniform(per_category: usize, seed: u64) -> Self {
        Self {
            per_category_target: Category::ALL.iter().map(|&c| (c, per_category)).collect(),
            subtype_balance_tolerance: 1,
            seed,
            allow_partial: false,
        }
    }

    pub fn total_target(&self) -> usize {
        self.per_category_target.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryShortfall {
    pub category: Category,
    pub target: usize,
    pub selected: usize,
    /// Subtypes that could not fill their even quota: (subtype, quota, available).
    pub short_subtypes: Vec<(Subtype, usize, usize)>,
    /// Amount moved from short subtypes to their siblings.
    pub redistributed: usize,
    /// Part of the target that no subtype could supply.
    pub unmet: usize,
    pub max_subtype_deviation: usize,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortfallReport {
    pub categories: Vec<CategoryShortfall>,
}

impl ShortfallReport {
    pub fn unmet(&self) -> usize {
        self.categories.iter().map(|c| c.unmet).sum()
    }

    pub fn has_shortfall(&self) -> bool {
        self.categories.iter().any(|c| !c.short_subtypes.is_empty() || c.unmet > 0)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("category {category} needs {target} samples but only {available} are available")]
    CategoryExhausted {
        category: Category,
        target: usize,
        available: usize,
    },
    #[error("plan target for {0} must be positive")]
    InvalidTarget(Category),
    #[error("duplicate sample id {0} in pool")]
    DuplicateId(String),
    #[error(transparent)]
    InvalidRecord(#[from] RecordError),
    #[error("malformed manifest at line {line}: {message}")]
    MalformedManifest { line: usize, message: String },
    #[error(transparent)]
    Manifest(ManifestError),
    #[error("accepted attempt for {0} has no parsed annotation")]
    MissingAnnotation(String),
    #[error("attempt refers to unknown sample {0}")]
    UnknownSample(String),
}

impl From<ManifestError> for DatasetError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Malformed { line, message } => DatasetError::MalformedManifest { line, message },
            other => DatasetError::Manifest(other),
        }
    }
}

/// Splits `total` as evenly as possible over `n` slots; the first
/// `total % n` slots get one extra.
fn even_split(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| total / n + usize::from(i < total % n)).collect()
}

/// Per-subtype counts for one category. `available[i]` and the result are in
/// subtype order. Returns (counts, redistributed, unmet).
pub fn allocate_quotas(target: usize, available: &[usize]) -> (Vec<usize>, usize, usize) {
    let quotas = even_split(target, available.len());
    let mut counts: Vec<usize> = quotas.iter().zip(available).map(|(&q, &a)| q.min(a)).collect();
    let shortfall: usize = quotas.iter().zip(&counts).map(|(q, c)| q - c).sum();
    if shortfall == 0 {
        return (counts, 0, 0);
    }
    let remaining: Vec<usize> = available.iter().zip(&counts).map(|(a, c)| a - c).collect();
    let pool: usize = remaining.iter().sum();
    if pool <= shortfall {
        for (c, r) in counts.iter_mut().zip(&remaining) {
            *c += r;
        }
        return (counts, pool, shortfall - pool);
    }
    // Largest remainder over shares shortfall * remaining_i / pool.
    let mut given = 0;
    let mut fractions = Vec::with_capacity(remaining.len());
    for (i, &r) in remaining.iter().enumerate() {
        let numerator = (shortfall as u128) * (r as u128);
        let whole = (numerator / pool as u128) as usize;
        counts[i] += whole;
        given += whole;
        fractions.push((numerator % pool as u128, i));
    }
    // Larger remainder first, then subtype order.
    fractions.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in fractions.iter().take(shortfall - given) {
        counts[i] += 1;
    }
    (counts, shortfall, 0)
}

/// Draws a balanced manifest from `pool`. Deterministic for a given pool
/// content, plan and seed, regardless of pool order.
pub fn sample_balanced(
    pool: &[SampleRecord],
    plan: &SamplingPlan,
) -> Result<(Vec<SampleRecord>, ShortfallReport), DatasetError> {
    let mut seen = HashSet::new();
    let mut by_subtype: BTreeMap<Subtype, Vec<&SampleRecord>> = BTreeMap::new();
    for r in pool {
        r.validate()?;
        if !seen.insert(r.id.as_str()) {
            return Err(DatasetError::DuplicateId(r.id.clone()));
        }
        by_subtype.entry(r.subtype).or_default().push(r);
    }
    for list in by_subtype.values_mut() {
        list.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut manifest = Vec::with_capacity(plan.total_target());
    let mut report = ShortfallReport::default();

    for (&category, &target) in &plan.per_category_target {
        if target == 0 {
            return Err(DatasetError::InvalidTarget(category));
        }
        let subtypes = category.subtypes();
        let available: Vec<usize> = subtypes
            .iter()
            .map(|s| by_subtype.get(s).map_or(0, Vec::len))
            .collect();
        let (counts, redistributed, unmet) = allocate_quotas(target, &available);
        if unmet > 0 && !plan.allow_partial {
            return Err(DatasetError::CategoryExhausted {
                category,
                target,
                available: available.iter().sum(),
            });
        }
        let quotas = even_split(target, subtypes.len());
        let short_subtypes = subtypes
            .iter()
            .zip(quotas.iter().zip(&available))
            .filter(|(_, (q, a))| a < q)
            .map(|(&s, (&q, &a))| (s, q, a))
            .collect();
        let max_dev = counts.iter().max().unwrap_or(&0) - counts.iter().min().unwrap_or(&0);

        for (subtype, &count) in subtypes.iter().zip(&counts) {
            let Some(candidates) = by_subtype.get(subtype) else {
                continue;
            };
            let mut order: Vec<&SampleRecord> = candidates.clone();
            order.shuffle(&mut rng);
            manifest.extend(order.into_iter().take(count).cloned());
        }

        report.categories.push(CategoryShortfall {
            category,
            target,
            selected: counts.iter().sum(),
            short_subtypes,
            redistributed,
            unmet,
            max_subtype_deviation: max_dev,
            within_tolerance: max_dev <= plan.subtype_balance_tolerance,
        });
    }
    Ok((manifest, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub counts: BTreeMap<Subtype, u64>,
    pub total: u64,
}

impl Default for DatasetStats {
    fn default() -> Self {
        Self {
            counts: Subtype::ALL.iter().map(|&s| (s, 0)).collect(),
            total: 0,
        }
    }
}

impl DatasetStats {
    pub fn add(&mut self, subtype: Subtype, n: u64) {
        *self.counts.entry(subtype).or_insert(0) += n;
        self.total += n;
    }

    pub fn category_total(&self, category: Category) -> u64 {
        self.counts
            .iter()
            .filter(|(s, _)| s.category() == category)
            .map(|(_, &n)| n)
            .sum()
    }

    /// Two-column table in subtype order with a total row.
    pub fn render_table(&self) -> String {
        let rows: Vec<(&str, String)> = Subtype::ALL
            .iter()
            .map(|s| (s.display_name(), group_thousands(self.counts.get(s).copied().unwrap_or(0))))
            .chain(std::iter::once(("Total", group_thousands(self.total))))
            .collect();
        let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("Types".len());
        let count_w = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("Samples".len());
        let mut out = format!("{:<name_w$}  {:>count_w$}\n", "Types", "Samples");
        out.push_str(&format!("{}\n", "-".repeat(name_w + 2 + count_w)));
        for (i, (name, count)) in rows.iter().enumerate() {
            if i == rows.len() - 1 {
                out.push_str(&format!("{}\n", "-".repeat(name_w + 2 + count_w)));
            }
            out.push_str(&format!("{name:<name_w$}  {count:>count_w$}\n"));
        }
        out
    }
}

/// `1234567` -> `1,234,567`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn stats_of(records: &[SampleRecord]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for r in records {
        stats.add(r.subtype, 1);
    }
    stats
}

/// Streams a samples manifest and counts subtypes.
pub fn dataset_stats<R: BufRead>(reader: R) -> Result<DatasetStats, DatasetError> {
    let mut stats = DatasetStats::default();
    manifest::for_each_record(reader, manifest::SAMPLES, |line, r: SampleRecord| {
        r.validate().map_err(|e| ManifestError::Malformed {
            line,
            message: e.to_string(),
        })?;
        stats.add(r.subtype, 1);
        Ok(())
    })?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub sample_id: String,
    pub image_ref: String,
    pub cot: CoTAnnotation,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub sample_id: String,
    pub image_ref: String,
    pub cot: CoTAnnotation,
    pub text: String,
    pub label: Verdict,
    /// 1 for attacks, 0 for live faces.
    pub binary_label: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifests {
    pub stage1: Vec<Stage1Row>,
    pub stage2: Vec<Stage2Row>,
}

/// Builds stage manifests from accepted attempts. Non-accepted attempts are
/// skipped. Rows follow the attempt order.
pub fn emit_stage_manifests(
    attempts: &[AnnotationAttempt],
    samples: &[SampleRecord],
) -> Result<StageManifests, DatasetError> {
    let by_id: HashMap<&str, &SampleRecord> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = StageManifests::default();
    let mut emitted = HashSet::new();
    for a in attempts.iter().filter(|a| a.status == AttemptStatus::Accepted) {
        let sample = by_id
            .get(a.sample_id.as_str())
            .ok_or_else(|| DatasetError::UnknownSample(a.sample_id.clone()))?;
        let cot = a
            .parsed
            .clone()
            .ok_or_else(|| DatasetError::MissingAnnotation(a.sample_id.clone()))?;
        if !emitted.insert(a.sample_id.as_str()) {
            continue;
        }
        let text = serialize_annotation(&cot);
        out.stage1.push(Stage1Row {
            sample_id: sample.id.clone(),
            image_ref: sample.image_ref.clone(),
            cot: cot.clone(),
            text: text.clone(),
        });
        out.stage2.push(Stage2Row {
            sample_id: sample.id.clone(),
            image_ref: sample.image_ref.clone(),
            cot,
            text,
            label: sample.label,
            binary_label: u8::from(sample.label.is_spoof()),
        });
    }
    Ok(out)
}

/// Builds a pool with `count` samples per listed subtype, ids `{prefix}-{subtype}-{n}`.
pub fn synthetic_pool(prefix: &str, counts: &[(Subtype, usize)]) -> Vec<SampleRecord> {
    counts
        .iter()
        .flat_map(|&(subtype, n)| {
            (0..n).map(move |i| {
                let id = format!("{prefix}-{}-{i:06}", subtype.name());
                SampleRecord::new(id.clone(), format!("images/{id}.jpg"), subtype)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_split_distributes_remainder_first() {
        assert_eq!(even_split(25, 4), vec![7, 6, 6, 6]);
        assert_eq!(even_split(25, 1), vec![25]);
        assert_eq!(even_split(3, 7), vec![1, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn quota_allocation_redistributes_proportionally() {
        // quotas 10 each; third subtype has 4 -> shortfall 6 over remaining 10 and 20
        let (counts, moved, unmet) = allocate_quotas(30, &[20, 30, 4]);
        assert_eq!((moved, unmet), (6, 0));
        assert_eq!(counts, vec![12, 14, 4]);
        // tie in remainders goes to the earlier subtype
        let (counts, _, _) = allocate_quotas(9, &[10, 10, 1]);
        assert_eq!(counts, vec![4, 4, 1]);
        let (counts, _, _) = allocate_quotas(10, &[10, 10, 1]);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert_eq!(counts, vec![5, 4, 1]);
    }

    #[test]
    fn quota_allocation_reports_unmet() {
        let (counts, moved, unmet) = allocate_quotas(100, &[10, 20, 5]);
        assert_eq!(counts, vec![10, 20, 5]);
        assert_eq!(unmet, 65);
        assert_eq!(moved, 0);
    }

    #[test]
    fn small_balanced_plan() {
        let counts: Vec<(Subtype, usize)> = Subtype::ALL.iter().map(|&s| (s, 40)).collect();
        let pool = synthetic_pool("t", &counts);
        let plan = SamplingPlan::uniform(25, 9);
        let (manifest, report) = sample_balanced(&pool, &plan).unwrap();
        let stats = stats_of(&manifest);
        for c in Category::ALL {
            assert_eq!(stats.category_total(c), 25, "{c}");
        }
        assert!(report.categories.iter().all(|c| c.within_tolerance && c.unmet == 0));
        assert!(!report.has_shortfall());
        let ids: HashSet<_> = manifest.iter().map(|r| &r.id).collect();
        assert_eq!(ids.len(), manifest.len());
    }

    #[test]
    fn empty_pool_exhausts() {
        let err = sample_balanced(&[], &SamplingPlan::uniform(25, 0)).unwrap_err();
        assert!(matches!(err, DatasetError::CategoryExhausted { available: 0, .. }));
    }

    #[test]
    fn partial_plan_reports_unmet() {
        let pool = synthetic_pool("p", &[(Subtype::Living, 10), (Subtype::Phone, 3)]);
        let mut plan = SamplingPlan::uniform(5, 1);
        plan.per_category_target.retain(|c, _| matches!(c, Category::Live | Category::Replay));
        plan.allow_partial = true;
        let (manifest, report) = sample_balanced(&pool, &plan).unwrap();
        assert_eq!(manifest.len(), 8);
        assert_eq!(report.unmet(), 2);
        assert_eq!(manifest.len(), plan.total_target() - report.unmet());
    }

    #[test]
    fn pool_order_does_not_matter() {
        let counts: Vec<(Subtype, usize)> = Subtype::ALL.iter().map(|&s| (s, 12)).collect();
        let pool = synthetic_pool("o", &counts);
        let mut reversed = pool.clone();
        reversed.reverse();
        let plan = SamplingPlan::uniform(10, 77);
        assert_eq!(sample_balanced(&pool, &plan).unwrap().0, sample_balanced(&reversed, &plan).unwrap().0);
        let other_seed = SamplingPlan::uniform(10, 78);
        assert_ne!(sample_balanced(&pool, &plan).unwrap().0, sample_balanced(&pool, &other_seed).unwrap().0);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut pool = synthetic_pool("d", &[(Subtype::Living, 2)]);
        pool.push(pool[0].clone());
        assert!(matches!(
            sample_balanced(&pool, &SamplingPlan::uniform(1, 0)),
            Err(DatasetError::DuplicateId(_))
        ));
    }

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(165), "165");
        assert_eq!(group_thousands(5000), "5,000");
        assert_eq!(group_thousands(982468), "982,468");
        assert_eq!(group_thousands(1234567), "1,234,567");
    }

    #[test]
    fn stats_of_empty_manifest() {
        let stats = dataset_stats(&b""[..]).unwrap();
        assert_eq!(stats.total, 0);
        assert_eq!(stats.counts.len(), 15);
        assert!(stats.counts.values().all(|&n| n == 0));
    }

    #[test]
    fn stats_reports_bad_line() {
        let text = "{\"schema\":\"facecot/samples\",\"version\":1}\n{\"id\":\"a\",\"image_ref\":\"a\",\"label\":\"No\",\"category\":\"Print\",\"subtype\":\"Living\"}\n";
        match dataset_stats(text.as_bytes()) {
            Err(DatasetError::MalformedManifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
