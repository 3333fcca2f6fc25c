//! Sampler and personalization comparison runs: triplets, training,
//! indexing and evaluation for every requested variant on one shared
//! train/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::AnnIndex;
use crate::catalog::{
    aggregate_engagement, load_customers, load_engagement, Catalog, CustomerContext,
    EngagementEvent, EventKind,
};
use crate::config::PipelineConfig;
use crate::encoder::{Embedding, ModelParams};
use crate::error::{Error, Result};
use crate::eval::stats::paired_t_test;
use crate::eval::{add_segments, evaluate_model, EvalCase, EvalReport};
use crate::lexical::{InvertedIndex, DEFAULT_B, DEFAULT_K1};
use crate::sampling::{
    build_triplets, write_triplets, SamplerConfig, SamplerKind, SamplerResources, SamplerStats,
};
use crate::synth::{self, load_truth, Split, TruthRecord};
use crate::training::{reports_csv, train, AnceRefresh, LossReport, TrainMode};

pub const REPORT_FILE: &str = "report.json";
pub const COMPARISON_FILE: &str = "comparison.tsv";
pub const PER_CASE_FILE: &str = "per_case.tsv";

/// Loaded inputs for an experiment.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: Catalog,
    pub events: Vec<EngagementEvent>,
    pub customers: BTreeMap<String, CustomerContext>,
    pub truth: Vec<TruthRecord>,
}

impl Dataset {
    /// Generates synthetic data from `config.synth` seeded with
    /// `config.seed`, writing the files under `dir`.
    pub fn synthesize(config: &PipelineConfig, dir: &Path) -> Result<Self> {
        let mut spec = config.synth.clone();
        spec.seed = config.seed;
        spec.feature_dim = config.train.dims.d_cust;
        let data = synth::generate(&spec)?;
        data.write(dir)?;
        Ok(Dataset {
            catalog: data.catalog()?,
            events: data.events,
            customers: data
                .customers
                .into_iter()
                .map(|c| (c.customer_id.clone(), c))
                .collect(),
            truth: data.truth,
        })
    }

    pub fn load(
        catalog: &Path,
        engagement: &Path,
        customers: Option<&Path>,
        truth: &Path,
        feature_dim: usize,
        history_window: usize,
    ) -> Result<Self> {
        Ok(Dataset {
            catalog: Catalog::load(catalog)?,
            events: load_engagement(engagement)?,
            customers: match customers {
                Some(p) => load_customers(p, feature_dim, history_window)?,
                None => BTreeMap::new(),
            },
            truth: load_truth(truth)?,
        })
    }

    fn test_queries(&self) -> BTreeSet<&str> {
        self.truth
            .iter()
            .filter(|t| t.split == Split::Test)
            .map(|t| t.query_text.as_str())
            .collect()
    }

    /// Engagement for queries outside the test split.
    pub fn train_events(&self) -> Vec<EngagementEvent> {
        let test = self.test_queries();
        self.events
            .iter()
            .filter(|e| !test.contains(e.query_text.as_str()))
            .cloned()
            .collect()
    }

    /// One case per test truth record.
    pub fn test_cases(&self) -> Result<Vec<EvalCase>> {
        self.eval_cases(Some(Split::Test))
    }

    /// One case per truth record in `split` (every record for `None`). The
    /// purchase distribution pools every purchase logged for the query.
    pub fn eval_cases(&self, split: Option<Split>) -> Result<Vec<EvalCase>> {
        let keep = |t: &TruthRecord| split.is_none_or(|s| t.split == s);
        let wanted: BTreeSet<&str> = self
            .truth
            .iter()
            .filter(|t| keep(t))
            .map(|t| t.query_text.as_str())
            .collect();
        let mut purchases: BTreeMap<&str, BTreeMap<String, u64>> = BTreeMap::new();
        for e in &self.events {
            if e.event_kind == EventKind::Purchase && wanted.contains(e.query_text.as_str()) {
                *purchases
                    .entry(e.query_text.as_str())
                    .or_default()
                    .entry(e.item_id.clone())
                    .or_default() += 1;
            }
        }
        self.truth
            .iter()
            .filter(|t| keep(t))
            .map(|t| {
                let context = match &t.customer_id {
                    Some(c) => Some(
                        self.customers
                            .get(c)
                            .cloned()
                            .ok_or_else(|| Error::UnknownCustomer(c.clone()))?,
                    ),
                    None => None,
                };
                Ok(EvalCase {
                    query_text: t.query_text.clone(),
                    context,
                    truth: t.relevant.iter().cloned().collect(),
                    query_frequency: t.frequency,
                    purchase_distribution: purchases
                        .get(t.query_text.as_str())
                        .cloned()
                        .unwrap_or_default(),
                })
            })
            .collect()
    }
}

/// Results for one (sampler, mode) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub sampler: SamplerKind,
    pub mode: TrainMode,
    pub triplets: usize,
    pub triplets_without_negative: usize,
    pub skipped_batches: usize,
    pub sampler_stats: SamplerStats,
    pub losses: Vec<LossReport>,
    pub report: EvalReport,
    #[serde(skip)]
    pub per_case: Vec<BTreeMap<usize, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub ks: Vec<usize>,
    pub test_cases: usize,
    /// Name of the variant the t-tests compare against.
    pub baseline: String,
    pub variants: Vec<VariantResult>,
}

impl ExperimentReport {
    pub fn variant(&self, sampler: SamplerKind, mode: TrainMode) -> Option<&VariantResult> {
        self.variants
            .iter()
            .find(|v| v.sampler == sampler && v.mode == mode)
    }

    /// Sampler × Recall@k table.
    pub fn comparison_tsv(&self) -> String {
        let mut s = String::from("variant\tsampler\tmode");
        for k in &self.ks {
            s.push_str(&format!("\trecall@{k}"));
        }
        s.push_str("\tt_statistic\tp_value\n");
        for v in &self.variants {
            s.push_str(&format!("{}\t{}\t{}", v.name, v.sampler, mode_name(v.mode)));
            for k in &self.ks {
                s.push_str(&format!("\t{:.6}", v.report.recall_at[k]));
            }
            let opt = |x: Option<f64>| x.map_or_else(|| "-".to_owned(), |x| format!("{x:.6}"));
            s.push_str(&format!(
                "\t{}\t{}\n",
                opt(v.report.t_statistic),
                opt(v.report.p_value)
            ));
        }
        s
    }

    /// Per-case recall for every variant, one row per (variant, case).
    pub fn per_case_tsv(&self, cases: &[EvalCase]) -> String {
        let mut s = String::from("variant\tcase\tquery\tcustomer");
        for k in &self.ks {
            s.push_str(&format!("\trecall@{k}"));
        }
        s.push('\n');
        for v in &self.variants {
            for (i, (case, rec)) in cases.iter().zip(&v.per_case).enumerate() {
                let cust = case
                    .context
                    .as_ref()
                    .map_or("-", |c| c.customer_id.as_str());
                s.push_str(&format!("{}\t{i}\t{}\t{cust}", v.name, case.query_text));
                for k in &self.ks {
                    s.push_str(&format!("\t{:.6}", rec[k]));
                }
                s.push('\n');
            }
        }
        s
    }
}

pub fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::NonPersonalized => "non_personalized",
        TrainMode::Personalized => "personalized",
        TrainMode::Combined => "combined",
    }
}

/// Errors tagged with the pipeline stage that produced them.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError {
        stage: name,
        source,
    })
}

/// Encodes the catalog with `params` and builds the configured index.
pub fn index_catalog(
    params: &ModelParams,
    catalog: &Catalog,
    config: &PipelineConfig,
) -> Result<AnnIndex> {
    use rayon::prelude::*;
    let rows: Vec<(String, Embedding)> = catalog
        .items()
        .par_iter()
        .map(|it| (it.item_id.clone(), params.encode_item(it)))
        .collect();
    AnnIndex::build(&rows, config.ann_kind, config.n_clusters, config.seed)
}

/// Runs every (mode, sampler) variant on `data` and writes reports into
/// `config.out_dir`. Every output is a pure function of the inputs and
/// the seed; wall-clock measurements are left out.
pub fn run_experiment(
    config: &PipelineConfig,
    data: &Dataset,
) -> std::result::Result<ExperimentReport, StageError> {
    stage("config", config.validate())?;
    let out = &config.out_dir;
    stage(
        "output",
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e)),
    )?;
    let catalog = &data.catalog;
    let train_events = data.train_events();
    let agg = aggregate_engagement(catalog, &train_events);
    let cases = stage("split", data.test_cases())?;
    if cases.is_empty() {
        return Err(StageError {
            stage: "split",
            source: Error::Empty("no test cases".into()),
        });
    }
    let bm25 = if config.samplers.contains(&SamplerKind::Bm25) {
        Some(stage(
            "index",
            InvertedIndex::build(catalog, DEFAULT_K1, DEFAULT_B),
        )?)
    } else {
        None
    };
    let nprobe = config.nprobe;

    let mut variants: Vec<VariantResult> = Vec::new();
    let mut seen = HashSet::new();
    for &mode in &config.modes {
        for &sampler in &config.samplers {
            if !seen.insert((mode_name(mode), sampler)) {
                continue;
            }
            let name = format!("{}.{}", sampler, mode_name(mode));
            let sampler_cfg = SamplerConfig {
                kind: sampler,
                ..config.sampler.clone()
            };
            let resources = SamplerResources {
                bm25: bm25.as_ref(),
                ance: None,
            };
            let build = |personalized: bool| {
                build_triplets(
                    &agg,
                    catalog,
                    &data.customers,
                    &sampler_cfg,
                    resources,
                    personalized,
                    config.seed,
                )
            };
            let per = if mode.personalized() {
                Some(stage("mine", build(true))?)
            } else {
                None
            };
            let nper = if mode != TrainMode::Personalized {
                Some(stage("mine", build(false))?)
            } else {
                None
            };
            let mut stats = SamplerStats::new();
            let mut positives = BTreeMap::new();
            let mut n_trip = 0;
            let mut n_none = 0;
            for set in per.iter().chain(nper.iter()) {
                stats.merge(&set.stats);
                positives.extend(set.positives.clone());
                n_trip += set.triplets.len();
                n_none += set.triplets.iter().filter(|t| t.negative.is_none()).count();
                let file = if set
                    .triplets
                    .first()
                    .is_some_and(|t| t.key.customer.is_some())
                {
                    "per"
                } else {
                    "nper"
                };
                stage(
                    "mine",
                    write_triplets(
                        out.join(format!("triplets.{name}.{file}.tsv")),
                        &set.triplets,
                        catalog,
                    ),
                )?;
            }
            let empty = Vec::new();
            let per_t = per.as_ref().map_or(&empty, |s| &s.triplets);
            let nper_t = nper.as_ref().map_or(&empty, |s| &s.triplets);

            let mut train_cfg = config.train.clone();
            train_cfg.seed = config.seed;
            train_cfg.mode = mode;
            let ance = AnceRefresh {
                positives: &positives,
                pool_k: config.sampler.ance_pool_k,
                index_kind: config.ann_kind,
                n_clusters: config.n_clusters,
            };
            if sampler == SamplerKind::Ance && train_cfg.ance_refresh_epochs.is_none() {
                train_cfg.ance_refresh_epochs = Some(1);
            }
            let outcome = stage(
                "train",
                train(
                    catalog,
                    per_t,
                    nper_t,
                    &train_cfg,
                    (sampler == SamplerKind::Ance).then_some(&ance),
                ),
            )?;
            stage(
                "train",
                outcome.params.save(out.join(format!("params.{name}.bin"))),
            )?;
            stage(
                "train",
                std::fs::write(
                    out.join(format!("losses.{name}.csv")),
                    reports_csv(&outcome.reports),
                )
                .map_err(|e| Error::io(out, e)),
            )?;

            let index = stage("build-ann", index_catalog(&outcome.params, catalog, config))?;
            let probe = nprobe.unwrap_or_else(|| index.full_probe());
            let eval = stage(
                "eval",
                evaluate_model(&outcome.params, &index, catalog, &cases, &config.ks, probe),
            )?;
            let mut report = eval.report;
            stage(
                "eval",
                add_segments(
                    &mut report,
                    &cases,
                    &eval.per_case,
                    &config.ks,
                    &config.segments,
                ),
            )?;
            variants.push(VariantResult {
                name,
                sampler,
                mode,
                triplets: n_trip,
                triplets_without_negative: n_none,
                skipped_batches: outcome.skipped_batches,
                sampler_stats: stats,
                losses: outcome.reports,
                report,
                per_case: eval.per_case,
            });
        }
    }

    // Paired t-tests of each variant against the first, on per-case
    // recall at the smallest k.
    let k0 = *config.ks.iter().min().expect("validated non-empty");
    let base: Vec<f64> = variants[0].per_case.iter().map(|r| r[&k0]).collect();
    for v in variants.iter_mut().skip(1) {
        let after: Vec<f64> = v.per_case.iter().map(|r| r[&k0]).collect();
        if let Ok(t) = paired_t_test(&base, &after) {
            v.report.t_statistic = Some(t.t);
            v.report.p_value = Some(t.p);
        }
    }

    let report = ExperimentReport {
        seed: config.seed,
        ks: config.ks.clone(),
        test_cases: cases.len(),
        baseline: variants[0].name.clone(),
        variants,
    };
    let write = |name: &str, body: String| {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    stage(
        "report",
        serde_json::to_string_pretty(&report)
            .map_err(Error::from)
            .and_then(|j| write(REPORT_FILE, j + "\n")),
    )?;
    stage("report", write(COMPARISON_FILE, report.comparison_tsv()))?;
    stage("report", write(PER_CASE_FILE, report.per_case_tsv(&cases)))?;
    Ok(report)
}

/// Generates or loads data per `config`, then runs the experiment.
pub fn run_from_config(
    config: &PipelineConfig,
) -> std::result::Result<ExperimentReport, StageError> {
    let data = match (&config.catalog, &config.engagement, &config.truth) {
        (Some(c), Some(e), Some(t)) => stage(
            "ingest",
            Dataset::load(
                c,
                e,
                config.customers.as_deref(),
                t,
                config.train.dims.d_cust,
                config.synth.history_window,
            ),
        )?,
        (None, None, None) => {
            let dir: PathBuf = config.out_dir.join("data");
            stage("generate", Dataset::synthesize(config, &dir))?
        }
        _ => {
            return Err(StageError {
                stage: "config",
                source: Error::Config(
                    "catalog, engagement and truth must be given together".into(),
                ),
            })
        }
    };
    run_experiment(config, &data)
}
