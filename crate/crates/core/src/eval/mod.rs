//! Offline evaluation: Recall@K, query segmentation, latency percentiles,
//! paired significance tests and sampler benchmarks.

pub mod bench;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::AnnIndex;
use crate::catalog::{Catalog, CustomerContext};
use crate::encoder::ModelParams;
use crate::error::{Error, Result};

pub use stats::{paired_t_test, TTest};

pub const DEFAULT_KS: [usize; 4] = [8, 12, 24, 100];
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_HEAD_PERCENTILE: f64 = 0.1;

/// `|top-k(predicted) ∩ truth| / |truth|`.
pub fn recall_at_k(predicted: &[String], truth: &BTreeSet<String>, k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Empty("recall needs a non-empty truth set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    let hits = predicted
        .iter()
        .take(k)
        .filter(|p| truth.contains(*p) && seen.insert(p.as_str()))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub query_text: String,
    pub context: Option<CustomerContext>,
    pub truth: BTreeSet<String>,
    pub query_frequency: u64,
    pub purchase_distribution: BTreeMap<String, u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specificity {
    Specific,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Head,
    Tail,
}

/// Entropy of the normalized counts divided by `ln(m)`, `m` the number of
/// items with a positive count; 0 when `m = 1`.
pub fn normalized_entropy<'a>(counts: impl IntoIterator<Item = &'a u64>) -> Result<f64> {
    let positive: Vec<f64> = counts
        .into_iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64)
        .collect();
    let total: f64 = positive.iter().sum();
    if positive.is_empty() {
        return Err(Error::Degenerate(
            "purchase distribution is all zero".into(),
        ));
    }
    if positive.len() == 1 {
        return Ok(0.0);
    }
    let h: f64 = positive
        .iter()
        .map(|c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum();
    Ok(h / (positive.len() as f64).ln())
}

/// Specific when the normalized purchase entropy is below `threshold`.
pub fn specificity_segment(case: &EvalCase, threshold: f64) -> Result<Specificity> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(
            "entropy threshold must be in (0, 1)".into(),
        ));
    }
    let h = normalized_entropy(case.purchase_distribution.values())?;
    Ok(if h < threshold {
        Specificity::Specific
    } else {
        Specificity::General
    })
}

/// Marks the top `ceil(head_percentile · n)` cases by query frequency as
/// head (ties broken by query text ascending), the rest as tail. Output is
/// aligned with `cases`.
pub fn frequency_segment(cases: &[EvalCase], head_percentile: f64) -> Result<Vec<Frequency>> {
    if cases.is_empty() {
        return Err(Error::Empty("no cases to segment".into()));
    }
    if !(head_percentile > 0.0 && head_percentile < 1.0) {
        return Err(Error::InvalidArgument(
            "head percentile must be in (0, 1)".into(),
        ));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| {
        cases[b]
            .query_frequency
            .cmp(&cases[a].query_frequency)
            .then_with(|| cases[a].query_text.cmp(&cases[b].query_text))
            .then(a.cmp(&b))
    });
    let heads = ((head_percentile * cases.len() as f64).ceil() as usize).clamp(1, cases.len());
    let mut out = vec![Frequency::Tail; cases.len()];
    for &i in &order[..heads] {
        out[i] = Frequency::Head;
    }
    Ok(out)
}

/// Order statistic at 1-based rank `ceil(q·n)`: the smallest sample `v`
/// with `#(samples ≤ v) / n ≥ q`.
pub fn latency_percentile(samples_ms: &[f64], q: f64) -> Result<f64> {
    if samples_ms.is_empty() {
        return Err(Error::Empty("no latency samples".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument("quantile must be in (0, 1]".into()));
    }
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub per_segment: BTreeMap<String, BTreeMap<usize, f64>>,
    pub segment_sizes: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    /// Wall-clock P95 of encode+search, omitted from reproducible reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_p95: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub sampler_bench: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Recall per k for each case, aligned with the input cases.
    pub per_case: Vec<BTreeMap<usize, f64>>,
    /// Ranked ids per case (length `max(ks)`).
    pub rankings: Vec<Vec<String>>,
    pub latencies_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub entropy_threshold: f64,
    pub head_percentile: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            entropy_threshold: DEFAULT_ENTROPY_THRESHOLD,
            head_percentile: DEFAULT_HEAD_PERCENTILE,
        }
    }
}

/// Encodes each case's query side, retrieves `max(ks)` items and scores
/// Recall@k. Cases are processed in parallel; results keep input order.
pub fn evaluate_model(
    params: &ModelParams,
    index: &AnnIndex,
    catalog: &Catalog,
    cases: &[EvalCase],
    ks: &[usize],
    nprobe: usize,
) -> Result<EvalOutcome> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument(
            "ks must be non-empty and positive".into(),
        ));
    }
    if index.dim != params.dims.d {
        return Err(Error::Dimension {
            expected: params.dims.d,
            got: index.dim,
        });
    }
    let kmax = *ks.iter().max().expect("non-empty");
    let rows: Vec<(Vec<String>, BTreeMap<usize, f64>, f64)> = cases
        .par_iter()
        .map(|case| {
            let start = Instant::now();
            let q = params.encode_query(&case.query_text, case.context.as_ref(), catalog)?;
            let ranked: Vec<String> = index
                .search(&q.embedding, kmax, nprobe)?
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let recalls = ks
                .iter()
                .map(|&k| recall_at_k(&ranked, &case.truth, k).map(|r| (k, r)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok((ranked, recalls, ms))
        })
        .collect::<Result<_>>()?;

    let mut rankings = Vec::with_capacity(rows.len());
    let mut per_case = Vec::with_capacity(rows.len());
    let mut latencies_ms = Vec::with_capacity(rows.len());
    for (r, c, ms) in rows {
        rankings.push(r);
        per_case.push(c);
        latencies_ms.push(ms);
    }
    let report = EvalReport {
        n_cases: cases.len(),
        recall_at: mean_recalls(per_case.iter(), ks),
        ..Default::default()
    };
    Ok(EvalOutcome {
        report,
        per_case,
        rankings,
        latencies_ms,
    })
}

/// Mean of each k's recall over `rows` (0 for no rows).
pub fn mean_recalls<'a>(
    rows: impl Iterator<Item = &'a BTreeMap<usize, f64>> + Clone,
    ks: &[usize],
) -> BTreeMap<usize, f64> {
    let n = rows.clone().count();
    ks.iter()
        .map(|&k| {
            let s: f64 = rows.clone().map(|r| r[&k]).sum();
            (k, if n == 0 { 0.0 } else { s / n as f64 })
        })
        .collect()
}

/// Fills `per_segment` and `segment_sizes` of `report` with specific /
/// general and head / tail breakdowns. Cases whose purchase distribution is
/// empty are left out of the specificity split.
pub fn add_segments(
    report: &mut EvalReport,
    cases: &[EvalCase],
    per_case: &[BTreeMap<usize, f64>],
    ks: &[usize],
    config: &SegmentConfig,
) -> Result<()> {
    if cases.is_empty() {
        return Ok(());
    }
    let freq = frequency_segment(cases, config.head_percentile)?;
    let mut groups: BTreeMap<String, Vec<&BTreeMap<usize, f64>>> = BTreeMap::new();
    for (i, case) in cases.iter().enumerate() {
        let f = match freq[i] {
            Frequency::Head => "head",
            Frequency::Tail => "tail",
        };
        groups.entry(f.into()).or_default().push(&per_case[i]);
        if let Ok(s) = specificity_segment(case, config.entropy_threshold) {
            let s = match s {
                Specificity::Specific => "specific",
                Specificity::General => "general",
            };
            groups.entry(s.into()).or_default().push(&per_case[i]);
        }
    }
    for (name, rows) in groups {
        report
            .per_segment
            .insert(name.clone(), mean_recalls(rows.iter().copied(), ks));
        report.segment_sizes.insert(name, rows.len());
    }
    Ok(())
}
