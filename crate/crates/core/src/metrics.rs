//! Run reports and the analytics computed over them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::check::{classify_error, CheckVerdict, ErrorClass, VerdictStatus};
use crate::generate::FinishReason;
use crate::lang::{self, ProblemClass};
use crate::premsel::PremiseMode;
use crate::prompt::{Ablation, Component, PromptBundle, PromptFormat};
use crate::retrieve::RetrievalStrategy;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("report has no outcomes")]
    EmptyReport,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("reports cover different example sets")]
    MismatchedExampleSets,
    #[error("no reports given")]
    NoReports,
    #[error("example `{0}` has an empty ground truth")]
    EmptyGroundTruth(String),
    #[error("no prompt bundle for example `{0}`")]
    MissingBundle(String),
    #[error("duplicate example `{0}` in report")]
    DuplicateExample(String),
    #[error("report line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_index: usize,
    pub text: String,
    pub finish_reason: FinishReason,
    pub verdict: CheckVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub example_id: String,
    pub class: ProblemClass,
    pub ground_truth: String,
    /// Ordered by sample index.
    pub samples: Vec<SampleOutcome>,
}

impl ExampleOutcome {
    pub fn verified_set(&self) -> BTreeSet<usize> {
        self.samples
            .iter()
            .filter(|s| s.verdict.status == VerdictStatus::Verified)
            .map(|s| s.sample_index)
            .collect()
    }

    pub fn solved_at(&self, k: usize) -> bool {
        self.samples.iter().any(|s| s.sample_index < k && s.verdict.status == VerdictStatus::Verified)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub model_id: String,
    pub prompt_format: PromptFormat,
    pub ablations: BTreeSet<Ablation>,
    pub retrieval_strategy: RetrievalStrategy,
    pub premise_mode: PremiseMode,
    pub samples_per_example: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub header: RunHeader,
    pub outcomes: Vec<ExampleOutcome>,
}

impl RunReport {
    /// Sorts outcomes by example id and samples by index, rejecting duplicates.
    pub fn new(header: RunHeader, mut outcomes: Vec<ExampleOutcome>) -> Result<Self, MetricsError> {
        outcomes.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        for w in outcomes.windows(2) {
            if w[0].example_id == w[1].example_id {
                return Err(MetricsError::DuplicateExample(w[0].example_id.clone()));
            }
        }
        for o in &mut outcomes {
            o.samples.sort_by_key(|s| s.sample_index);
        }
        Ok(RunReport { header, outcomes })
    }

    pub fn example_ids(&self) -> BTreeSet<&str> {
        self.outcomes.iter().map(|o| o.example_id.as_str()).collect()
    }

    /// Header line followed by one outcome per line.
    pub fn write(&self, mut out: impl Write) -> Result<(), MetricsError> {
        writeln!(out, "{}", serde_json::to_string(&self.header).map_err(std::io::Error::other)?)?;
        for o in &self.outcomes {
            writeln!(out, "{}", serde_json::to_string(o).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }

    pub fn read(reader: impl BufRead) -> Result<Self, MetricsError> {
        let mut header = None;
        let mut outcomes = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |e: serde_json::Error| MetricsError::Parse { line: i + 1, message: e.to_string() };
            if header.is_none() {
                header = Some(serde_json::from_str::<RunHeader>(&line).map_err(err)?);
            } else {
                outcomes.push(serde_json::from_str::<ExampleOutcome>(&line).map_err(err)?);
            }
        }
        let header = header.ok_or(MetricsError::Parse { line: 1, message: "missing header".into() })?;
        RunReport::new(header, outcomes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyAtK {
    pub k: usize,
    pub percent: f64,
    pub solved: usize,
    pub total: usize,
    /// Examples with fewer than `k` samples.
    pub shortfall: usize,
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

pub fn verify_at_k(report: &RunReport, k: usize) -> Result<VerifyAtK, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if report.outcomes.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let solved = report.outcomes.iter().filter(|o| o.solved_at(k)).count();
    let shortfall = report.outcomes.iter().filter(|o| o.samples.len() < k).count();
    let total = report.outcomes.len();
    Ok(VerifyAtK { k, percent: percent(solved, total), solved, total, shortfall })
}

fn shared_examples<'a>(reports: &[&'a RunReport]) -> Result<BTreeSet<&'a str>, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?.example_ids();
    if reports.iter().any(|r| r.example_ids() != first) {
        return Err(MetricsError::MismatchedExampleSets);
    }
    Ok(first)
}

fn solved_ids(report: &RunReport, k: usize) -> BTreeSet<&str> {
    report.outcomes.iter().filter(|o| o.solved_at(k)).map(|o| o.example_id.as_str()).collect()
}

/// Percentage of examples solved at `k` by at least one report.
pub fn verify_at_nk(reports: &[&RunReport], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let examples = shared_examples(reports)?;
    if examples.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let union: BTreeSet<&str> = reports.iter().flat_map(|r| solved_ids(r, k)).collect();
    Ok(percent(union.len(), examples.len()))
}

/// Number of examples per exact set of solving run ids.
pub fn exclusive_solves(reports: &[&RunReport], k: usize) -> Result<BTreeMap<Vec<String>, usize>, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let examples = shared_examples(reports)?;
    let solved: Vec<(String, BTreeSet<&str>)> =
        reports.iter().map(|r| (r.header.run_id.clone(), solved_ids(r, k))).collect();
    let mut out = BTreeMap::new();
    for ex in examples {
        let sig: BTreeSet<String> =
            solved.iter().filter(|(_, s)| s.contains(ex)).map(|(id, _)| id.clone()).collect();
        *out.entry(sig.into_iter().collect()).or_insert(0) += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub solved: usize,
    pub total: usize,
    pub percent: f64,
}

pub fn class_breakdown(report: &RunReport, k: usize) -> BTreeMap<ProblemClass, ClassStat> {
    let mut counts: BTreeMap<ProblemClass, (usize, usize)> = BTreeMap::new();
    for o in &report.outcomes {
        let e = counts.entry(o.class).or_default();
        e.1 += 1;
        if o.solved_at(k) {
            e.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(c, (solved, total))| (c, ClassStat { solved, total, percent: percent(solved, total) }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    /// Count and share of checker-reported failures per class.
    pub classes: BTreeMap<ErrorClass, (usize, f64)>,
    pub failed: usize,
    pub screened: usize,
    pub unavailable: usize,
}

pub fn error_distribution(report: &RunReport) -> ErrorDistribution {
    let mut counts: BTreeMap<ErrorClass, usize> = ErrorClass::ALL.iter().map(|&c| (c, 0)).collect();
    let (mut failed, mut screened, mut unavailable) = (0, 0, 0);
    for s in report.outcomes.iter().flat_map(|o| &o.samples) {
        match s.verdict.status {
            VerdictStatus::Failed => {
                if let Some(c) = classify_error(&s.verdict.errors) {
                    failed += 1;
                    *counts.get_mut(&c).unwrap() += 1;
                }
            }
            VerdictStatus::Screened => screened += 1,
            VerdictStatus::CheckerUnavailable => unavailable += 1,
            VerdictStatus::Verified => {}
        }
    }
    ErrorDistribution {
        classes: counts.into_iter().map(|(c, n)| (c, (n, percent(n, failed)))).collect(),
        failed,
        screened,
        unavailable,
    }
}

/// Edit distance over arbitrary token sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Mean and linearly interpolated quartiles; `None` for no values.
pub fn summarize(values: &[f64]) -> Option<DistributionSummary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(DistributionSummary {
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDistanceReport {
    /// `None` when nothing was verified.
    pub per_example: BTreeMap<String, Option<f64>>,
    pub summary: Option<DistributionSummary>,
}

/// Smallest normalised token distance between the ground truth and any
/// verified sample.
pub fn min_edit_distance(report: &RunReport) -> Result<EditDistanceReport, MetricsError> {
    let mut per_example = BTreeMap::new();
    let mut values = Vec::new();
    for o in &report.outcomes {
        let verified: Vec<&SampleOutcome> =
            o.samples.iter().filter(|s| s.verdict.status == VerdictStatus::Verified).collect();
        if verified.is_empty() {
            per_example.insert(o.example_id.clone(), None);
            continue;
        }
        let g = lang::significant_tokens(&o.ground_truth);
        if g.is_empty() {
            return Err(MetricsError::EmptyGroundTruth(o.example_id.clone()));
        }
        let best = verified
            .iter()
            .map(|s| levenshtein(&g, &lang::significant_tokens(&s.text)))
            .min()
            .unwrap();
        let d = best as f64 / g.len() as f64;
        values.push(d);
        per_example.insert(o.example_id.clone(), Some(d));
    }
    Ok(EditDistanceReport { per_example, summary: summarize(&values) })
}

pub const OVERLAP_COMPONENTS: [Component; 3] = [Component::Context, Component::Related, Component::Premises];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub example_id: String,
    pub solved: bool,
    pub overlap: BTreeMap<Component, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    /// Mann-Whitney U of the solved group.
    pub u: f64,
    /// Normal approximation; positive when solved examples rank higher.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub component: Component,
    pub solved_mean: Option<f64>,
    pub unsolved_mean: Option<f64>,
    pub rank_sum: Option<RankSum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapTable {
    pub rows: Vec<OverlapRow>,
    pub summary: Vec<OverlapSummary>,
}

/// Percentage of `ids(g)` also present in `ids(c)`.
pub fn overlap_percent(ground: &BTreeSet<String>, component: &BTreeSet<String>) -> f64 {
    percent(ground.intersection(component).count(), ground.len())
}

/// Mann-Whitney U with average ranks for ties and a tie-corrected normal
/// approximation. `None` when either group is empty.
pub fn rank_sum(higher: &[f64], lower: &[f64]) -> Option<RankSum> {
    let (n1, n2) = (higher.len(), lower.len());
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool)> =
        higher.iter().map(|&x| (x, true)).chain(lower.iter().map(|&x| (x, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut r1 = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        r1 += all[i..=j].iter().filter(|(_, g)| *g).count() as f64 * avg;
        i = j + 1;
    }
    let (n1f, n2f, nf) = (n1 as f64, n2 as f64, n as f64);
    let u = r1 - n1f * (n1f + 1.0) / 2.0;
    let mean = n1f * n2f / 2.0;
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let z = if var > 0.0 { (u - mean) / var.sqrt() } else { 0.0 };
    Some(RankSum { u, z })
}

pub fn identifier_overlap(
    report: &RunReport,
    bundles: &BTreeMap<String, PromptBundle>,
    k: usize,
) -> Result<OverlapTable, MetricsError> {
    let mut rows = Vec::new();
    for o in &report.outcomes {
        let bundle = bundles.get(&o.example_id).ok_or_else(|| MetricsError::MissingBundle(o.example_id.clone()))?;
        let ground = lang::extract_identifiers(&o.ground_truth);
        if ground.is_empty() {
            continue;
        }
        let overlap = OVERLAP_COMPONENTS
            .iter()
            .map(|&c| {
                let ids = bundle.part(c).map(|p| lang::extract_identifiers(&p.content)).unwrap_or_default();
                (c, overlap_percent(&ground, &ids))
            })
            .collect();
        rows.push(OverlapRow { example_id: o.example_id.clone(), solved: o.solved_at(k), overlap });
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let summary = OVERLAP_COMPONENTS
        .iter()
        .map(|&c| {
            let (mut yes, mut no) = (Vec::new(), Vec::new());
            for r in &rows {
                if r.solved { &mut yes } else { &mut no }.push(r.overlap[&c]);
            }
            OverlapSummary { component: c, solved_mean: mean(&yes), unsolved_mean: mean(&no), rank_sum: rank_sum(&yes, &no) }
        })
        .collect();
    Ok(OverlapTable { rows, summary })
}
