//! Negative samplers and the triplet builder.
//!
//! Taxonomy-based hard-negative sampling draws uniformly, with replacement,
//! from every item under the positive's parent category and returns the
//! first draw outside the positive set, giving up after `max_attempts`.
//! The random, BM25-pool and ANCE-style miners are the baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::AnnIndex;
use crate::catalog::{Aggregation, Catalog, CustomerContext, ItemIdx, ScopeLevel};
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::lexical::InvertedIndex;
use crate::text::fnv1a64;

pub const DEFAULT_MAX_ATTEMPTS: usize = 10;
pub const RANDOM_REJECTION_CAP: usize = 64;
pub const RHO_BINS: usize = 10;

/// Separator between the parts of a personalized query side.
pub const QUERY_SIDE_SEP: &str = " [SEP] ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    TbHns,
    Bm25,
    Ance,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Random => "random",
            SamplerKind::TbHns => "tb_hns",
            SamplerKind::Bm25 => "bm25",
            SamplerKind::Ance => "ance",
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplerKind::Random),
            "tb_hns" | "tbhns" | "taxonomy" => Ok(SamplerKind::TbHns),
            "bm25" => Ok(SamplerKind::Bm25),
            "ance" => Ok(SamplerKind::Ance),
            other => Err(Error::InvalidArgument(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Identifies whose purchases form a positive set: a query alone, or a
/// query issued by one customer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryKey {
    pub query: String,
    pub customer: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PositiveSet {
    pub items: BTreeSet<ItemIdx>,
}

impl PositiveSet {
    pub fn new(items: impl IntoIterator<Item = ItemIdx>) -> Self {
        PositiveSet {
            items: items.into_iter().collect(),
        }
    }

    pub fn contains(&self, item: ItemIdx) -> bool {
        self.items.contains(&item)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Result of one taxonomy-based draw sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TbHnsOutcome {
    pub negative: Option<ItemIdx>,
    /// Number of uniform draws made, in `1..=max_attempts` (0 for an empty
    /// candidate list).
    pub attempts: usize,
}

/// Draws uniformly with replacement from `candidates` until a draw falls
/// outside `positives` or `max_attempts` draws have been made.
pub fn draw_negative<R: Rng + ?Sized>(
    candidates: &[ItemIdx],
    positives: &PositiveSet,
    max_attempts: usize,
    rng: &mut R,
) -> TbHnsOutcome {
    if candidates.is_empty() {
        return TbHnsOutcome {
            negative: None,
            attempts: 0,
        };
    }
    for attempt in 1..=max_attempts {
        let n = candidates[rng.gen_range(0..candidates.len())];
        if !positives.contains(n) {
            return TbHnsOutcome {
                negative: Some(n),
                attempts: attempt,
            };
        }
    }
    TbHnsOutcome {
        negative: None,
        attempts: max_attempts,
    }
}

/// Taxonomy-based hard-negative sampling for `query_item`, drawing from the
/// bucket of the category `level` steps above the item's leaf.
pub fn sample_tb_hns<R: Rng + ?Sized>(
    catalog: &Catalog,
    query_item: ItemIdx,
    positives: &PositiveSet,
    max_attempts: usize,
    level: ScopeLevel,
    rng: &mut R,
) -> Result<TbHnsOutcome> {
    if query_item.get() >= catalog.len() {
        return Err(Error::UnknownItem(format!("#{}", query_item.0)));
    }
    if max_attempts == 0 {
        return Err(Error::InvalidArgument(
            "max_attempts must be at least 1".into(),
        ));
    }
    Ok(draw_negative(
        catalog.scope_bucket(query_item, level),
        positives,
        max_attempts,
        rng,
    ))
}

/// Fraction of the sampling scope of `query_item` that is positive.
pub fn rho(
    catalog: &Catalog,
    query_item: ItemIdx,
    positives: &PositiveSet,
    level: ScopeLevel,
) -> Result<f64> {
    if query_item.get() >= catalog.len() {
        return Err(Error::UnknownItem(format!("#{}", query_item.0)));
    }
    let bucket = catalog.scope_bucket(query_item, level);
    if bucket.is_empty() {
        return Err(Error::Empty("candidate bucket is empty".into()));
    }
    let hits = bucket.iter().filter(|&&i| positives.contains(i)).count();
    Ok(hits as f64 / bucket.len() as f64)
}

/// Uniform draw over catalog items outside `positives`. Rejection sampling
/// is capped; past the cap the complement is enumerated explicitly.
pub fn sample_random<R: Rng + ?Sized>(
    catalog: &Catalog,
    positives: &PositiveSet,
    rng: &mut R,
) -> Result<ItemIdx> {
    let n = catalog.len();
    let inside = positives.items.iter().filter(|i| i.get() < n).count();
    if inside >= n {
        return Err(Error::Degenerate(
            "every catalog item is positive; no random negative exists".into(),
        ));
    }
    for _ in 0..RANDOM_REJECTION_CAP {
        let i = ItemIdx(rng.gen_range(0..n) as u32);
        if !positives.contains(i) {
            return Ok(i);
        }
    }
    let complement: Vec<ItemIdx> = (0..n as u32)
        .map(ItemIdx)
        .filter(|&i| !positives.contains(i))
        .collect();
    Ok(*complement.choose(rng).expect("complement is non-empty"))
}

/// Uniform draw from the BM25 top-`pool_k` for `query` minus positives.
pub fn sample_bm25_negative<R: Rng + ?Sized>(
    index: &InvertedIndex,
    query: &str,
    positives: &PositiveSet,
    pool_k: usize,
    rng: &mut R,
) -> Result<Option<ItemIdx>> {
    let pool: Vec<ItemIdx> = index
        .topk_idx(query, pool_k)?
        .into_iter()
        .map(|(i, _)| i)
        .filter(|&i| !positives.contains(i))
        .collect();
    Ok(pool.choose(rng).copied())
}

/// One query to mine with the current model.
#[derive(Clone, Debug)]
pub struct MiningQuery {
    pub key: QueryKey,
    pub text: String,
    pub context: Option<CustomerContext>,
}

/// ANCE-style mining: encode each query with `params`, retrieve the top
/// `pool_k` items from `ann`, drop positives and keep the best survivor.
pub fn mine_ance_negatives(
    params: &ModelParams,
    ann: &AnnIndex,
    catalog: &Catalog,
    queries: &[MiningQuery],
    positives: &BTreeMap<QueryKey, PositiveSet>,
    pool_k: usize,
    nprobe: usize,
) -> Result<BTreeMap<QueryKey, Option<ItemIdx>>> {
    if ann.dim != params.dims.d {
        return Err(Error::Dimension {
            expected: params.dims.d,
            got: ann.dim,
        });
    }
    let empty = PositiveSet::default();
    let mined: Vec<(QueryKey, Option<ItemIdx>)> = queries
        .par_iter()
        .map(|mq| {
            let q = params.encode_query(&mq.text, mq.context.as_ref(), catalog)?;
            let pos = positives.get(&mq.key).unwrap_or(&empty);
            let best = ann
                .search_rows(&q.embedding, pool_k, nprobe)?
                .into_iter()
                .filter_map(|h| catalog.idx(&ann.ids[h.row]))
                .find(|&i| !pos.contains(i));
            Ok((mq.key.clone(), best))
        })
        .collect::<Result<_>>()?;
    Ok(mined.into_iter().collect())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub calls: u64,
    pub attempts_total: u64,
    pub negatives_emitted: u64,
    pub none_returned: u64,
    /// Calls whose candidate scope was empty.
    pub empty_scope: u64,
    /// Counts of per-call ρ in ten equal-width bins over [0, 1].
    pub rho_histogram: Vec<u64>,
}

impl SamplerStats {
    pub fn new() -> Self {
        SamplerStats {
            rho_histogram: vec![0; RHO_BINS],
            ..Default::default()
        }
    }

    fn record(&mut self, negative: Option<ItemIdx>, attempts: usize) {
        self.calls += 1;
        self.attempts_total += attempts as u64;
        match negative {
            Some(_) => self.negatives_emitted += 1,
            None => self.none_returned += 1,
        }
    }

    fn record_rho(&mut self, rho: f64) {
        let bin = ((rho * RHO_BINS as f64) as usize).min(RHO_BINS - 1);
        self.rho_histogram[bin] += 1;
    }

    pub fn merge(&mut self, other: &SamplerStats) {
        self.calls += other.calls;
        self.attempts_total += other.attempts_total;
        self.negatives_emitted += other.negatives_emitted;
        self.none_returned += other.none_returned;
        self.empty_scope += other.empty_scope;
        for (a, b) in self.rho_histogram.iter_mut().zip(&other.rho_histogram) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub max_attempts: usize,
    pub level: ScopeLevel,
    pub negatives_per_positive: usize,
    pub bm25_pool_k: usize,
    pub ance_pool_k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::TbHns,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            level: ScopeLevel::Parent,
            negatives_per_positive: 1,
            bm25_pool_k: 10,
            ance_pool_k: 10,
        }
    }
}

/// Everything a sampler may need besides the catalog.
#[derive(Clone, Copy, Default)]
pub struct SamplerResources<'a> {
    pub bm25: Option<&'a InvertedIndex>,
    /// Model and index for ANCE mining. When absent, ANCE triplets are
    /// emitted without a negative and mined later by the trainer.
    pub ance: Option<(&'a ModelParams, &'a AnnIndex)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub key: QueryKey,
    /// Serialized query side written to the triplet file.
    pub query_side: String,
    /// Customer context for personalized triplets.
    pub context: Option<CustomerContext>,
    pub positive: ItemIdx,
    pub negative: Option<ItemIdx>,
    pub sampler: SamplerKind,
    /// Positive density of the positive's sampling scope.
    pub rho: f64,
}

#[derive(Clone, Debug)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub positives: BTreeMap<QueryKey, PositiveSet>,
    pub stats: SamplerStats,
}

/// Query side for a triplet: the bare query, or for personalized triplets
/// the query followed by the customer id, history titles and features.
pub fn serialize_query_side(
    query: &str,
    context: Option<&CustomerContext>,
    catalog: &Catalog,
) -> String {
    let Some(ctx) = context else {
        return query.to_owned();
    };
    let titles: Vec<&str> = ctx
        .purchase_history
        .iter()
        .filter_map(|id| catalog.get(id).map(|i| i.title.as_str()))
        .collect();
    let feats: Vec<String> = ctx.profile_features.iter().map(|v| v.to_string()).collect();
    format!(
        "{query}{QUERY_SIDE_SEP}customer: {}{QUERY_SIDE_SEP}history: {}{QUERY_SIDE_SEP}features: {}",
        ctx.customer_id,
        titles.join("; "),
        feats.join(" ")
    )
}

/// Splits a serialized query side into the query text and customer id.
pub fn parse_query_side(side: &str) -> (String, Option<String>) {
    let mut parts = side.split(QUERY_SIDE_SEP);
    let query = parts.next().unwrap_or_default().to_owned();
    let customer = parts
        .find_map(|p| p.strip_prefix("customer: "))
        .map(str::to_owned);
    (query, customer)
}

/// Seed for one query key, independent of processing order.
pub fn key_seed(seed: u64, key: &QueryKey) -> u64 {
    let mut s = key.query.clone();
    s.push('\u{1f}');
    if let Some(c) = &key.customer {
        s.push_str(c);
    }
    fnv1a64(&s) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Builds one triplet per (query key, purchased item, negative draw).
///
/// Non-personalized sets pool purchases per query text; personalized sets
/// keep them per `(query, customer)` and attach the customer's context.
/// The positive being processed is always part of the exclusion set.
/// Output is sorted, so it does not depend on worker scheduling.
pub fn build_triplets(
    agg: &Aggregation,
    catalog: &Catalog,
    customers: &BTreeMap<String, CustomerContext>,
    config: &SamplerConfig,
    resources: SamplerResources<'_>,
    personalized: bool,
    seed: u64,
) -> Result<TripletSet> {
    if config.kind == SamplerKind::Bm25 && resources.bm25.is_none() {
        return Err(Error::InvalidArgument(
            "bm25 sampler needs an inverted index".into(),
        ));
    }
    let mut positives: BTreeMap<QueryKey, PositiveSet> = BTreeMap::new();
    if personalized {
        for ((query, customer), items) in &agg.cells {
            let set = PositiveSet::new(
                items
                    .iter()
                    .filter(|(_, c)| c.purchase > 0)
                    .filter_map(|(id, _)| catalog.idx(id)),
            );
            if !set.is_empty() {
                positives.insert(
                    QueryKey {
                        query: query.clone(),
                        customer: Some(customer.clone()),
                    },
                    set,
                );
            }
        }
    } else {
        for query in agg.query_purchases.keys() {
            let set = PositiveSet::new(
                agg.query_positives(query)
                    .iter()
                    .filter_map(|id| catalog.idx(id)),
            );
            if !set.is_empty() {
                positives.insert(
                    QueryKey {
                        query: query.clone(),
                        customer: None,
                    },
                    set,
                );
            }
        }
    }

    let ance_mined = match (config.kind, resources.ance) {
        (SamplerKind::Ance, Some((params, ann))) => {
            let queries: Vec<MiningQuery> = positives
                .keys()
                .map(|k| MiningQuery {
                    key: k.clone(),
                    text: k.query.clone(),
                    context: k.customer.as_ref().and_then(|c| customers.get(c)).cloned(),
                })
                .collect();
            Some(mine_ance_negatives(
                params,
                ann,
                catalog,
                &queries,
                &positives,
                config.ance_pool_k,
                ann.full_probe(),
            )?)
        }
        _ => None,
    };

    let per_key: Vec<(Vec<Triplet>, SamplerStats)> = positives
        .par_iter()
        .map(|(key, pos)| -> Result<(Vec<Triplet>, SamplerStats)> {
            let mut rng = ChaCha8Rng::seed_from_u64(key_seed(seed, key));
            let mut stats = SamplerStats::new();
            let context = key.customer.as_ref().and_then(|c| customers.get(c));
            let context = if personalized { context.cloned() } else { None };
            let query_side = if personalized {
                serialize_query_side(&key.query, context.as_ref(), catalog)
            } else {
                key.query.clone()
            };
            let mut out = Vec::new();
            for &positive in &pos.items {
                let mut excl = pos.clone();
                excl.items.insert(positive);
                let scope_rho = rho(catalog, positive, &excl, config.level)?;
                let mut negatives = Vec::new();
                for _ in 0..config.negatives_per_positive.max(1) {
                    let (neg, attempts) = match config.kind {
                        SamplerKind::TbHns => {
                            stats.record_rho(scope_rho);
                            if catalog.scope_bucket(positive, config.level).is_empty() {
                                stats.empty_scope += 1;
                            }
                            let o = sample_tb_hns(
                                catalog,
                                positive,
                                &excl,
                                config.max_attempts,
                                config.level,
                                &mut rng,
                            )?;
                            (o.negative, o.attempts)
                        }
                        SamplerKind::Random => match sample_random(catalog, &excl, &mut rng) {
                            Ok(n) => (Some(n), 1),
                            Err(_) => (None, 1),
                        },
                        SamplerKind::Bm25 => (
                            sample_bm25_negative(
                                resources.bm25.expect("checked above"),
                                &key.query,
                                &excl,
                                config.bm25_pool_k,
                                &mut rng,
                            )?,
                            1,
                        ),
                        SamplerKind::Ance => (
                            ance_mined
                                .as_ref()
                                .and_then(|m| m.get(key).copied().flatten()),
                            1,
                        ),
                    };
                    stats.record(neg, attempts);
                    negatives.push(neg);
                }
                let mut found: Vec<ItemIdx> = negatives.iter().flatten().copied().collect();
                if found.is_empty() {
                    out.push(Triplet {
                        key: key.clone(),
                        query_side: query_side.clone(),
                        context: context.clone(),
                        positive,
                        negative: None,
                        sampler: config.kind,
                        rho: scope_rho,
                    });
                    continue;
                }
                // One deterministic ANCE survivor per key would repeat.
                if config.kind == SamplerKind::Ance {
                    found.dedup();
                }
                for n in found {
                    out.push(Triplet {
                        key: key.clone(),
                        query_side: query_side.clone(),
                        context: context.clone(),
                        positive,
                        negative: Some(n),
                        sampler: config.kind,
                        rho: scope_rho,
                    });
                }
            }
            Ok((out, stats))
        })
        .collect::<Result<_>>()?;

    let mut stats = SamplerStats::new();
    let mut triplets = Vec::new();
    for (t, s) in per_key {
        triplets.extend(t);
        stats.merge(&s);
    }
    sort_triplets(&mut triplets, catalog);
    Ok(TripletSet {
        triplets,
        positives,
        stats,
    })
}

pub fn sort_triplets(triplets: &mut [Triplet], catalog: &Catalog) {
    let id = |i: ItemIdx| catalog.item(i).item_id.as_str();
    triplets.sort_by(|a, b| {
        a.query_side
            .cmp(&b.query_side)
            .then_with(|| id(a.positive).cmp(id(b.positive)))
            .then_with(|| a.negative.map(id).cmp(&b.negative.map(id)))
    });
}

pub const TRIPLET_HEADER: [&str; 5] = [
    "query_side",
    "positive_id",
    "negative_id",
    "sampler_name",
    "rho",
];

pub fn write_triplets(
    path: impl AsRef<Path>,
    triplets: &[Triplet],
    catalog: &Catalog,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "{}", TRIPLET_HEADER.join("\t")).expect("vec write");
    for t in triplets {
        writeln!(
            buf,
            "{}\t{}\t{}\t{}\t{}",
            t.query_side.replace(['\t', '\n'], " "),
            catalog.item(t.positive).item_id,
            t.negative
                .map(|n| catalog.item(n).item_id.as_str())
                .unwrap_or(""),
            t.sampler.name(),
            t.rho
        )
        .expect("vec write");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a triplet file back, resolving items against `catalog` and
/// personalized query sides against `customers`.
pub fn read_triplets(
    path: impl AsRef<Path>,
    catalog: &Catalog,
    customers: &BTreeMap<String, CustomerContext>,
) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && line == TRIPLET_HEADER.join("\t") {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            file: file.clone(),
            line: n + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad(format!("expected 5 columns, found {}", cols.len())));
        }
        let (query, customer) = parse_query_side(cols[0]);
        let context = customer.as_ref().and_then(|c| customers.get(c)).cloned();
        let resolve = |id: &str| {
            catalog
                .idx(id)
                .ok_or_else(|| bad(format!("unknown item `{id}`")))
        };
        out.push(Triplet {
            key: QueryKey { query, customer },
            query_side: cols[0].to_owned(),
            context,
            positive: resolve(cols[1])?,
            negative: if cols[2].is_empty() {
                None
            } else {
                Some(resolve(cols[2])?)
            },
            sampler: cols[3].parse().map_err(|e: Error| bad(e.to_string()))?,
            rho: cols[4]
                .parse()
                .map_err(|e| bad(format!("bad rho `{}`: {e}", cols[4])))?,
        });
    }
    Ok(out)
}
