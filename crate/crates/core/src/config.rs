//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are dotted
//! (`train.epochs`), values are plain text; lists are comma separated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ann::IndexKind;
use crate::error::{Error, Result};
use crate::eval::SegmentConfig;
use crate::sampling::{SamplerConfig, SamplerKind};
use crate::synth::SynthSpec;
use crate::training::{TrainConfig, TrainMode};

/// Parses `key = value` lines. Later duplicates override earlier ones.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// Everything one experiment or pipeline run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub catalog: Option<PathBuf>,
    pub engagement: Option<PathBuf>,
    pub customers: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub synth: SynthSpec,
    pub samplers: Vec<SamplerKind>,
    pub modes: Vec<TrainMode>,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub ann_kind: IndexKind,
    pub n_clusters: Option<usize>,
    pub nprobe: Option<usize>,
    pub ks: Vec<usize>,
    pub segments: SegmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            catalog: None,
            engagement: None,
            customers: None,
            truth: None,
            out_dir: PathBuf::from("out"),
            synth: SynthSpec::default(),
            samplers: vec![SamplerKind::Random, SamplerKind::TbHns],
            modes: vec![TrainMode::NonPersonalized],
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            ann_kind: IndexKind::Exact,
            n_clusters: None,
            nprobe: None,
            ks: vec![8, 12, 24, 100],
            segments: SegmentConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (k, v) in parse_flat(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "catalog" => self.catalog = opt_path(v),
            "engagement" => self.engagement = opt_path(v),
            "customers" => self.customers = opt_path(v),
            "truth" => self.truth = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "samplers" => self.samplers = parse_list(key, v)?,
            "modes" => self.modes = parse_list(key, v)?,

            "synth.branching" => self.synth.branching = parse_value(key, v)?,
            "synth.depth" => self.synth.depth = parse_value(key, v)?,
            "synth.items_per_leaf" => self.synth.items_per_leaf = parse_value(key, v)?,
            "synth.n_customers" => self.synth.n_customers = parse_value(key, v)?,
            "synth.n_queries" => self.synth.n_queries = parse_value(key, v)?,
            "synth.noise_rate" => self.synth.noise_rate = parse_value(key, v)?,
            "synth.ambiguous_fraction" => self.synth.ambiguous_fraction = parse_value(key, v)?,
            "synth.test_fraction" => self.synth.test_fraction = parse_value(key, v)?,
            "synth.history_window" => self.synth.history_window = parse_value(key, v)?,
            "synth.feature_dim" => self.synth.feature_dim = parse_value(key, v)?,
            "synth.max_query_frequency" => self.synth.max_query_frequency = parse_value(key, v)?,

            "sampler.max_attempts" => self.sampler.max_attempts = parse_value(key, v)?,
            "sampler.level" => self.sampler.level = parse_value(key, v)?,
            "sampler.negatives_per_positive" => {
                self.sampler.negatives_per_positive = parse_value(key, v)?
            }
            "sampler.bm25_pool_k" => self.sampler.bm25_pool_k = parse_value(key, v)?,
            "sampler.ance_pool_k" => self.sampler.ance_pool_k = parse_value(key, v)?,

            "train.learning_rate" => self.train.learning_rate = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.in_batch_negatives" => self.train.in_batch_negatives = parse_value(key, v)?,
            "train.ance_refresh_epochs" => {
                self.train.ance_refresh_epochs = match v {
                    "" | "none" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "model.vocab_buckets" => self.train.dims.vocab_buckets = parse_value(key, v)?,
            "model.d_tok" => self.train.dims.d_tok = parse_value(key, v)?,
            "model.d" => self.train.dims.d = parse_value(key, v)?,
            "model.d_cust" => self.train.dims.d_cust = parse_value(key, v)?,

            "ann.kind" => self.ann_kind = parse_value(key, v)?,
            "ann.n_clusters" => {
                self.n_clusters = match v {
                    "" | "none" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "ann.nprobe" => {
                self.nprobe = match v {
                    "" | "none" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }

            "eval.ks" => self.ks = parse_list(key, v)?,
            "eval.entropy_threshold" => self.segments.entropy_threshold = parse_value(key, v)?,
            "eval.head_percentile" => self.segments.head_percentile = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.samplers.is_empty() {
            return Err(Error::Config("samplers must not be empty".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must not be empty".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(
                "eval.ks must be a non-empty list of positive integers".into(),
            ));
        }
        if self.sampler.max_attempts == 0 || self.sampler.negatives_per_positive == 0 {
            return Err(Error::Config(
                "sampler.max_attempts and sampler.negatives_per_positive must be positive".into(),
            ));
        }
        let h = self.segments.head_percentile;
        let t = self.segments.entropy_threshold;
        if !(h > 0.0 && h < 1.0) || !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(
                "eval.head_percentile and eval.entropy_threshold must lie in (0, 1)".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.ann_kind == IndexKind::Ivf && self.n_clusters.is_none() {
            return Err(Error::Config(
                "ann.kind = ivf requires ann.n_clusters".into(),
            ));
        }
        Ok(())
    }

    /// Overrides the global seed, which also seeds training and generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
