//! Multiple-negatives ranking loss, hand-written reverse-mode gradients for
//! the two-tower encoder, and the SGD training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnIndex, IndexKind};
use crate::catalog::{Catalog, CustomerContext, ItemIdx};
use crate::encoder::{dot, Dense, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::sampling::{mine_ance_negatives, MiningQuery, PositiveSet, QueryKey, Triplet};
use crate::text::tokenize_and_hash;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    NonPersonalized,
    Personalized,
    Combined,
}

impl TrainMode {
    pub fn personalized(self) -> bool {
        self != TrainMode::NonPersonalized
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_personalized" => Ok(TrainMode::NonPersonalized),
            "personalized" => Ok(TrainMode::Personalized),
            "combined" => Ok(TrainMode::Combined),
            other => Err(Error::InvalidArgument(format!(
                "unknown train mode `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub in_batch_negatives: bool,
    pub ance_refresh_epochs: Option<usize>,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 5,
            batch_size: 32,
            seed: 7,
            mode: TrainMode::NonPersonalized,
            in_batch_negatives: true,
            ance_refresh_epochs: None,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.ance_refresh_epochs == Some(0) {
            return Err(Error::InvalidArgument(
                "ance_refresh_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub triplets_seen: usize,
    pub grad_norm: f64,
}

/// `−log(exp(sp) / (exp(sp) + Σ exp(sn)))`, evaluated as
/// `logsumexp([sp, sn…]) − sp`.
pub fn mnrl_loss(sim_qp: f64, sim_qn: &[f64]) -> f64 {
    let m = sim_qn.iter().fold(sim_qp, |m, &s| m.max(s));
    let sum: f64 = std::iter::once(sim_qp)
        .chain(sim_qn.iter().copied())
        .map(|s| (s - m).exp())
        .sum();
    (m + sum.ln() - sim_qp).max(0.0)
}

/// Gradient with the same layout as [`ModelParams`]; token rows are sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub token_rows: BTreeMap<usize, Vec<f64>>,
    pub query_proj: Dense,
    pub item_proj: Dense,
    pub fusion: Dense,
}

impl Gradients {
    fn zeros(dims: ModelDims) -> Self {
        Gradients {
            token_rows: BTreeMap::new(),
            query_proj: Dense::zeros(dims.d_tok, dims.d),
            item_proj: Dense::zeros(dims.d_tok, dims.d),
            fusion: Dense::zeros(dims.fusion_in(), dims.d),
        }
    }

    pub fn norm(&self) -> f64 {
        let dense = [&self.query_proj, &self.item_proj, &self.fusion]
            .into_iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias));
        self.token_rows
            .values()
            .flatten()
            .chain(dense)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Dense gradient of the token table (test and inspection helper).
    pub fn token_dense(&self, dims: ModelDims) -> Vec<f64> {
        let mut out = vec![0.0; dims.vocab_buckets * dims.d_tok];
        for (&r, g) in &self.token_rows {
            out[r * dims.d_tok..(r + 1) * dims.d_tok].copy_from_slice(g);
        }
        out
    }

    /// `params −= lr · grad`.
    pub fn apply(&self, params: &mut ModelParams, lr: f64) {
        let dt = params.dims.d_tok;
        for (&r, g) in &self.token_rows {
            for (p, v) in params.token_embeddings[r * dt..(r + 1) * dt]
                .iter_mut()
                .zip(g)
            {
                *p -= lr * v;
            }
        }
        for (p, g) in [
            (&mut params.query_proj, &self.query_proj),
            (&mut params.item_proj, &self.item_proj),
            (&mut params.fusion, &self.fusion),
        ] {
            for (a, b) in p.weight.iter_mut().zip(&g.weight) {
                *a -= lr * b;
            }
            for (a, b) in p.bias.iter_mut().zip(&g.bias) {
                *a -= lr * b;
            }
        }
    }
}

/// Forward state of one tower application: `out = tanh(mean(rows) · W + b)`.
struct TowerPass {
    tokens: Vec<usize>,
    pooled: Vec<f64>,
    out: Vec<f64>,
}

impl TowerPass {
    fn run(params: &ModelParams, layer: &Dense, text: &str) -> Self {
        let tokens = tokenize_and_hash(text, params.dims.vocab_buckets);
        let pooled = params.pool_tokens(&tokens);
        let out = layer.forward(&pooled);
        TowerPass {
            tokens,
            pooled,
            out,
        }
    }

    /// Accumulates parameter gradients given `d loss / d out`.
    fn backward(
        &self,
        grad_out: &[f64],
        layer: &Dense,
        layer_grad: &mut Dense,
        token_rows: &mut BTreeMap<usize, Vec<f64>>,
    ) {
        let pre: Vec<f64> = grad_out
            .iter()
            .zip(&self.out)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        let grad_pooled = backprop_affine(&self.pooled, &pre, layer, layer_grad);
        if self.tokens.is_empty() {
            return;
        }
        let inv = 1.0 / self.tokens.len() as f64;
        for &t in &self.tokens {
            let row = token_rows
                .entry(t)
                .or_insert_with(|| vec![0.0; grad_pooled.len()]);
            for (r, g) in row.iter_mut().zip(&grad_pooled) {
                *r += g * inv;
            }
        }
    }
}

/// Adds `x ⊗ pre` and `pre` into `layer_grad`; returns `W · pre`.
fn backprop_affine(x: &[f64], pre: &[f64], layer: &Dense, layer_grad: &mut Dense) -> Vec<f64> {
    let o = layer.outputs;
    for (b, p) in layer_grad.bias.iter_mut().zip(pre) {
        *b += p;
    }
    let mut grad_x = vec![0.0; x.len()];
    for (i, &xi) in x.iter().enumerate() {
        let wrow = &layer.weight[i * o..(i + 1) * o];
        let grow = &mut layer_grad.weight[i * o..(i + 1) * o];
        let mut acc = 0.0;
        for j in 0..o {
            grow[j] += xi * pre[j];
            acc += wrow[j] * pre[j];
        }
        grad_x[i] = acc;
    }
    grad_x
}

struct QueryPass {
    tower: TowerPass,
    /// Fusion input `[q, c, h]` and output, personalized models only.
    fusion: Option<(Vec<f64>, Vec<f64>)>,
    history: Vec<ItemIdx>,
}

impl QueryPass {
    fn embedding(&self) -> &[f64] {
        match &self.fusion {
            Some((_, out)) => out,
            None => &self.tower.out,
        }
    }
}

fn query_pass(
    params: &ModelParams,
    text: &str,
    context: Option<&CustomerContext>,
    catalog: &Catalog,
    items: &mut BTreeMap<ItemIdx, TowerPass>,
) -> Result<QueryPass> {
    let tower = TowerPass::run(params, &params.query_proj, text);
    if !params.personalized {
        return Ok(QueryPass {
            tower,
            fusion: None,
            history: Vec::new(),
        });
    }
    let d = params.dims.d;
    let mut features = vec![0.0; params.dims.d_cust];
    let mut history = Vec::new();
    if let Some(ctx) = context {
        if ctx.profile_features.len() != params.dims.d_cust {
            return Err(Error::Dimension {
                expected: params.dims.d_cust,
                got: ctx.profile_features.len(),
            });
        }
        features.copy_from_slice(&ctx.profile_features);
        history = ctx
            .purchase_history
            .iter()
            .filter_map(|id| catalog.idx(id))
            .collect();
    }
    let mut h = vec![0.0; d];
    for &it in &history {
        let pass = item_pass(params, catalog, it, items);
        for (a, v) in h.iter_mut().zip(&pass.out) {
            *a += v;
        }
    }
    if !history.is_empty() {
        h.iter_mut().for_each(|v| *v /= history.len() as f64);
    }
    let mut x = tower.out.clone();
    x.extend_from_slice(&features);
    x.extend_from_slice(&h);
    let out = params.fusion.forward(&x);
    Ok(QueryPass {
        tower,
        fusion: Some((x, out)),
        history,
    })
}

fn item_pass<'a>(
    params: &ModelParams,
    catalog: &Catalog,
    item: ItemIdx,
    cache: &'a mut BTreeMap<ItemIdx, TowerPass>,
) -> &'a TowerPass {
    cache.entry(item).or_insert_with(|| {
        TowerPass::run(params, &params.item_proj, &catalog.item(item).folded_text())
    })
}

/// Negatives used for one triplet: its explicit negative plus, with
/// `in_batch`, the positives of batch triplets that belong to a different
/// query side. Duplicates and the triplet's own positive are removed.
fn negatives_for(batch: &[Triplet], t: usize, in_batch: bool) -> Vec<ItemIdx> {
    let me = &batch[t];
    let mut negs: Vec<ItemIdx> = me.negative.into_iter().collect();
    if in_batch {
        let mut others: Vec<ItemIdx> = batch
            .iter()
            .filter(|o| o.query_side != me.query_side)
            .map(|o| o.positive)
            .collect();
        others.sort();
        others.dedup();
        negs.extend(others);
    }
    let mut seen = std::collections::BTreeSet::new();
    negs.retain(|&n| n != me.positive && seen.insert(n));
    negs
}

/// Mean MNRL loss over the usable triplets of `batch` and its gradient.
/// Triplets left without any negative are skipped; a batch with none
/// usable is an error.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[Triplet],
    catalog: &Catalog,
    in_batch_negatives: bool,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let d = params.dims.d;
    let mut items: BTreeMap<ItemIdx, TowerPass> = BTreeMap::new();
    let mut queries: Vec<QueryPass> = Vec::new();
    let mut query_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut slot = Vec::with_capacity(batch.len());
    for t in batch {
        let q = match query_of.get(t.query_side.as_str()) {
            Some(&q) => q,
            None => {
                let text = &t.key.query;
                queries.push(query_pass(
                    params,
                    text,
                    t.context.as_ref(),
                    catalog,
                    &mut items,
                )?);
                query_of.insert(&t.query_side, queries.len() - 1);
                queries.len() - 1
            }
        };
        slot.push(q);
    }

    let work: Vec<(usize, Vec<ItemIdx>)> = (0..batch.len())
        .map(|t| (t, negatives_for(batch, t, in_batch_negatives)))
        .filter(|(_, n)| !n.is_empty())
        .collect();
    if work.is_empty() {
        return Err(Error::NoNegatives);
    }
    for (t, negs) in &work {
        item_pass(params, catalog, batch[*t].positive, &mut items);
        for &n in negs {
            item_pass(params, catalog, n, &mut items);
        }
    }

    let scale = 1.0 / work.len() as f64;
    let mut total = 0.0;
    let mut grad_query: Vec<Vec<f64>> = vec![vec![0.0; d]; queries.len()];
    let mut grad_item: BTreeMap<ItemIdx, Vec<f64>> = BTreeMap::new();

    for (t, negs) in &work {
        let qi = slot[*t];
        let qe = queries[qi].embedding();
        let cands: Vec<ItemIdx> = std::iter::once(batch[*t].positive)
            .chain(negs.iter().copied())
            .collect();
        let sims: Vec<f64> = cands.iter().map(|c| dot(qe, &items[c].out)).collect();
        total += mnrl_loss(sims[0], &sims[1..]);

        let m = sims.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let qe = qe.to_vec();
        for (j, c) in cands.iter().enumerate() {
            let w = scale * (exps[j] / z - if j == 0 { 1.0 } else { 0.0 });
            let ie = &items[c].out;
            for (g, v) in grad_query[qi].iter_mut().zip(ie) {
                *g += w * v;
            }
            let gi = grad_item.entry(*c).or_insert_with(|| vec![0.0; d]);
            for (g, v) in gi.iter_mut().zip(&qe) {
                *g += w * v;
            }
        }
    }

    let mut grads = Gradients::zeros(params.dims);
    for (qp, gq) in queries.iter().zip(&grad_query) {
        let tower_grad = match &qp.fusion {
            None => gq.clone(),
            Some((x, out)) => {
                let pre: Vec<f64> = gq.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                let gx = backprop_affine(x, &pre, &params.fusion, &mut grads.fusion);
                if !qp.history.is_empty() {
                    let inv = 1.0 / qp.history.len() as f64;
                    let gh = &gx[d + params.dims.d_cust..];
                    for &it in &qp.history {
                        let gi = grad_item.entry(it).or_insert_with(|| vec![0.0; d]);
                        for (g, v) in gi.iter_mut().zip(gh) {
                            *g += v * inv;
                        }
                    }
                }
                gx[..d].to_vec()
            }
        };
        qp.tower.backward(
            &tower_grad,
            &params.query_proj,
            &mut grads.query_proj,
            &mut grads.token_rows,
        );
    }
    for (it, g) in &grad_item {
        items[it].backward(
            g,
            &params.item_proj,
            &mut grads.item_proj,
            &mut grads.token_rows,
        );
    }
    Ok((total * scale, grads))
}

/// Everything needed to re-mine ANCE negatives during training.
pub struct AnceRefresh<'a> {
    pub positives: &'a BTreeMap<QueryKey, PositiveSet>,
    pub pool_k: usize,
    pub index_kind: IndexKind,
    pub n_clusters: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub reports: Vec<LossReport>,
    pub skipped_batches: usize,
}

/// Re-encodes the catalog and assigns every triplet the best non-positive
/// retrieval for its query key.
fn refresh_ance(
    params: &ModelParams,
    catalog: &Catalog,
    triplets: &mut [Triplet],
    ance: &AnceRefresh<'_>,
    seed: u64,
) -> Result<()> {
    use rayon::prelude::*;
    let embeddings: Vec<(String, crate::encoder::Embedding)> = catalog
        .items()
        .par_iter()
        .map(|it| (it.item_id.clone(), params.encode_item(it)))
        .collect();
    let ann = AnnIndex::build(&embeddings, ance.index_kind, ance.n_clusters, seed)?;
    let mut queries: BTreeMap<QueryKey, MiningQuery> = BTreeMap::new();
    for t in triplets.iter() {
        queries.entry(t.key.clone()).or_insert_with(|| MiningQuery {
            key: t.key.clone(),
            text: t.key.query.clone(),
            context: t.context.clone(),
        });
    }
    let queries: Vec<MiningQuery> = queries.into_values().collect();
    let mined = mine_ance_negatives(
        params,
        &ann,
        catalog,
        &queries,
        ance.positives,
        ance.pool_k,
        ann.full_probe(),
    )?;
    for t in triplets.iter_mut() {
        t.negative = mined.get(&t.key).copied().flatten();
    }
    Ok(())
}

/// Plain SGD over shuffled mini-batches.
///
/// `per` holds personalized triplets and `nper` non-personalized ones; the
/// mode decides which lists are used (combined mixes both uniformly).
pub fn train(
    catalog: &Catalog,
    per: &[Triplet],
    nper: &[Triplet],
    config: &TrainConfig,
    ance: Option<&AnceRefresh<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut data: Vec<Triplet> = match config.mode {
        TrainMode::NonPersonalized => nper.to_vec(),
        TrainMode::Personalized => per.to_vec(),
        TrainMode::Combined => per.iter().chain(nper).cloned().collect(),
    };
    if data.is_empty() {
        return Err(Error::Empty(format!(
            "no triplets for training mode {:?}",
            config.mode
        )));
    }
    let mut params = ModelParams::init(config.dims, config.mode.personalized(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a1e);
    let mut reports = Vec::with_capacity(config.epochs);
    let mut skipped_batches = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        if let (Some(r), Some(a)) = (config.ance_refresh_epochs, ance) {
            if epoch % r == 0 {
                refresh_ance(
                    &params,
                    catalog,
                    &mut data,
                    a,
                    config.seed.wrapping_add(epoch as u64),
                )?;
            }
        }
        order.shuffle(&mut rng);
        let usable: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| config.in_batch_negatives || data[i].negative.is_some())
            .collect();

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for chunk in usable.chunks(config.batch_size) {
            let batch: Vec<Triplet> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) =
                match batch_loss(&params, &batch, catalog, config.in_batch_negatives) {
                    Ok(r) => r,
                    Err(Error::NoNegatives) => {
                        skipped_batches += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_mean_loss: reports.last().map(|r: &LossReport| r.mean_loss),
                });
            }
            let n = batch.len();
            loss_sum += loss * n as f64;
            seen += n;
            norm_sum += grads.norm();
            batches += 1;
            grads.apply(&mut params, config.learning_rate);
        }
        reports.push(LossReport {
            epoch,
            mean_loss: if seen > 0 {
                loss_sum / seen as f64
            } else {
                0.0
            },
            triplets_seen: seen,
            grad_norm: if batches > 0 {
                norm_sum / batches as f64
            } else {
                0.0
            },
        });
    }
    Ok(TrainOutcome {
        params,
        reports,
        skipped_batches,
    })
}

/// Loss report CSV: `epoch,mean_loss,triplets_seen,grad_norm`.
pub fn reports_csv(reports: &[LossReport]) -> String {
    let mut s = String::from("epoch,mean_loss,triplets_seen,grad_norm\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.mean_loss, r.triplets_seen, r.grad_norm
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_sims_one_negative_is_ln2() {
        for s in [-3.0, 0.0, 0.7, 25.0] {
            assert!((mnrl_loss(s, &[s]) - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sims_is_ln_n_plus_one() {
        for n in [1usize, 2, 5, 31] {
            let l = mnrl_loss(0.0, &vec![0.0; n]);
            assert!((l - ((n + 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_formula() {
        let naive = -((2f64).exp() / (2f64.exp() + 0f64.exp() + 1f64.exp())).ln();
        assert!((mnrl_loss(2.0, &[0.0, 1.0]) - naive).abs() < 1e-12);
    }

    #[test]
    fn stable_for_large_margins() {
        assert_eq!(mnrl_loss(1000.0, &[0.0]), 0.0);
        assert!((mnrl_loss(0.0, &[1000.0]) - 1000.0).abs() < 1e-9);
        assert!(mnrl_loss(50.0, &[0.0, -3.0]) < 1e-20);
    }

    #[test]
    fn no_negatives_is_error() {
        let cat = Catalog::from_items(vec![crate::catalog::Item {
            item_id: "a".into(),
            title: "drill".into(),
            brand: String::new(),
            attributes: vec![],
            taxonomy_path: vec!["x".into()],
        }])
        .unwrap();
        let dims = ModelDims {
            vocab_buckets: 8,
            d_tok: 2,
            d: 2,
            d_cust: 1,
        };
        let p = ModelParams::init(dims, false, 1).unwrap();
        let t = Triplet {
            key: QueryKey {
                query: "drill".into(),
                customer: None,
            },
            query_side: "drill".into(),
            context: None,
            positive: ItemIdx(0),
            negative: None,
            sampler: crate::sampling::SamplerKind::TbHns,
            rho: 1.0,
        };
        assert!(matches!(
            batch_loss(&p, std::slice::from_ref(&t), &cat, false),
            Err(Error::NoNegatives)
        ));
        assert!(matches!(
            batch_loss(&p, &[t], &cat, true),
            Err(Error::NoNegatives)
        ));
    }
}
