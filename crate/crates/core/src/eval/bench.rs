//! Per-negative wall-clock timing of the samplers on catalogs whose parent
//! buckets all have the same size.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnIndex, IndexKind};
use crate::catalog::{Catalog, ItemIdx, ScopeLevel};
use crate::encoder::{ModelDims, ModelParams};
use crate::error::Result;
use crate::lexical::{InvertedIndex, DEFAULT_B, DEFAULT_K1};
use crate::sampling::{
    sample_bm25_negative, sample_random, sample_tb_hns, PositiveSet, SamplerKind,
    DEFAULT_MAX_ATTEMPTS,
};
use crate::synth::bench_catalog;

pub const BENCH_POOL_K: usize = 100;
/// Draws timed together; the p95 is taken over per-batch averages.
pub const BENCH_BATCH: usize = 16;
/// Timed passes over the trials; the pass with the lowest mean is kept.
pub const BENCH_REPEATS: usize = 5;
pub const BENCH_HEADER: &str = "sampler,catalog_size,trials,mean_ns,p95_ns";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sampler: SamplerKind,
    pub catalog_size: usize,
    pub trials: usize,
    pub mean_ns: f64,
    pub p95_ns: f64,
}

/// Times one negative draw per trial for every sampler on every catalog
/// size. Each trial uses a fresh random positive; trials are timed in
/// batches of [`BENCH_BATCH`] so clock overhead stays out of the figures.
/// The measurement is repeated [`BENCH_REPEATS`] times, sizes interleaved
/// within each repeat and each pass preceded by an untimed warm-up, and
/// the fastest pass per (sampler, size) is reported. Zero trials gives an
/// empty table.
pub fn bench_samplers(
    catalog_sizes: &[usize],
    bucket_size: usize,
    samplers: &[SamplerKind],
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if trials == 0 || samplers.is_empty() || catalog_sizes.is_empty() {
        return Ok(Vec::new());
    }
    let fixtures = catalog_sizes
        .iter()
        .map(|&size| Fixture::new(size, bucket_size, samplers, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Vec<Vec<Option<Pass>>> = vec![vec![None; samplers.len()]; fixtures.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..BENCH_REPEATS {
        for (f, fixture) in fixtures.iter().enumerate() {
            let harness = fixture.harness();
            for (s, &sampler) in samplers.iter().enumerate() {
                for (&pick, pos) in fixture.picks.iter().zip(&fixture.positives) {
                    harness.draw(sampler, pick, pos, &mut rng)?;
                }
                let mut samples = Vec::with_capacity(trials.div_ceil(BENCH_BATCH));
                let mut total = 0.0;
                let batches = fixture
                    .picks
                    .chunks(BENCH_BATCH)
                    .zip(fixture.positives.chunks(BENCH_BATCH));
                for (chunk, pos_chunk) in batches {
                    let start = Instant::now();
                    for (&pick, pos) in chunk.iter().zip(pos_chunk) {
                        harness.draw(sampler, pick, pos, &mut rng)?;
                    }
                    let ns = start.elapsed().as_nanos() as f64;
                    total += ns;
                    samples.push(ns / chunk.len() as f64);
                }
                let mean = total / trials as f64;
                let slot = &mut best[f][s];
                if slot.as_ref().is_none_or(|(m, _)| mean < *m) {
                    *slot = Some((mean, samples));
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(fixtures.len() * samplers.len());
    for (fixture, per_sampler) in fixtures.iter().zip(best) {
        for (&sampler, slot) in samplers.iter().zip(per_sampler) {
            let (mean_ns, samples) = slot.expect("at least one repeat");
            rows.push(BenchRow {
                sampler,
                catalog_size: fixture.catalog.len(),
                trials,
                mean_ns,
                p95_ns: super::latency_percentile(&samples, 0.95)?,
            });
        }
    }
    Ok(rows)
}

/// Mean and per-batch averages of one timed pass.
type Pass = (f64, Vec<f64>);

struct Fixture {
    catalog: Catalog,
    picks: Vec<ItemIdx>,
    positives: Vec<PositiveSet>,
    bm25: Option<InvertedIndex>,
    ance: Option<(ModelParams, AnnIndex)>,
}

impl Fixture {
    fn new(
        size: usize,
        bucket_size: usize,
        samplers: &[SamplerKind],
        trials: usize,
        seed: u64,
    ) -> Result<Self> {
        let catalog = bench_catalog(size, bucket_size, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ size as u64);
        let picks: Vec<ItemIdx> = (0..trials)
            .map(|_| ItemIdx(rng.gen_range(0..catalog.len()) as u32))
            .collect();
        let positives = picks.iter().map(|&p| PositiveSet::new([p])).collect();
        let bm25 = if samplers.contains(&SamplerKind::Bm25) {
            Some(InvertedIndex::build(&catalog, DEFAULT_K1, DEFAULT_B)?)
        } else {
            None
        };
        let ance = if samplers.contains(&SamplerKind::Ance) {
            let params = ModelParams::init(ModelDims::default(), false, seed)?;
            let rows: Vec<_> = catalog
                .items()
                .iter()
                .map(|it| (it.item_id.clone(), params.encode_item(it)))
                .collect();
            let index = AnnIndex::build(&rows, IndexKind::Exact, None, seed)?;
            Some((params, index))
        } else {
            None
        };
        Ok(Fixture {
            catalog,
            picks,
            positives,
            bm25,
            ance,
        })
    }

    fn harness(&self) -> Harness<'_> {
        Harness {
            catalog: &self.catalog,
            bm25: self.bm25.as_ref(),
            ance: self.ance.as_ref(),
        }
    }
}

struct Harness<'a> {
    catalog: &'a Catalog,
    bm25: Option<&'a InvertedIndex>,
    ance: Option<&'a (ModelParams, AnnIndex)>,
}

impl Harness<'_> {
    fn draw(
        &self,
        sampler: SamplerKind,
        pick: ItemIdx,
        positives: &PositiveSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let query = || self.catalog.item(pick).title.as_str();
        match sampler {
            SamplerKind::TbHns => {
                black_box(sample_tb_hns(
                    self.catalog,
                    pick,
                    positives,
                    DEFAULT_MAX_ATTEMPTS,
                    ScopeLevel::Parent,
                    rng,
                )?);
            }
            SamplerKind::Random => {
                black_box(sample_random(self.catalog, positives, rng)?);
            }
            SamplerKind::Bm25 => {
                let index = self.bm25.expect("index built for bm25");
                black_box(sample_bm25_negative(
                    index,
                    query(),
                    positives,
                    BENCH_POOL_K,
                    rng,
                )?);
            }
            SamplerKind::Ance => {
                let (params, index) = self.ance.expect("index built for ance");
                let q = params.encode_query(query(), None, self.catalog)?;
                let hits = index.search_rows(&q.embedding, BENCH_POOL_K, 1)?;
                black_box(
                    hits.into_iter()
                        .map(|h| ItemIdx(h.row as u32))
                        .find(|&i| !positives.contains(i)),
                );
            }
        }
        Ok(())
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.1},{:.1}\n",
            r.sampler, r.catalog_size, r.trials, r.mean_ns, r.p95_ns
        ));
    }
    out
}

/// Mean per-negative time of `sampler` at `size`, if measured.
pub fn mean_ns(rows: &[BenchRow], sampler: SamplerKind, size: usize) -> Option<f64> {
    rows.iter()
        .find(|r| r.sampler == sampler && r.catalog_size == size)
        .map(|r| r.mean_ns)
}
