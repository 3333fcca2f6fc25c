#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxoneg::catalog::{Catalog, CustomerContext, Item, ItemIdx};
use taxoneg::encoder::{ModelDims, ModelParams};
use taxoneg::sampling::{serialize_query_side, QueryKey, SamplerKind, Triplet};
use taxoneg::training::{batch_loss, mnrl_loss};

pub const WORDS: [&str; 12] = [
    "drill", "saw", "red", "blue", "cordless", "carpet", "tile", "lamp", "steel", "oak", "hose",
    "brush",
];

pub fn item(id: &str, title: &str, path: &[&str]) -> Item {
    Item {
        item_id: id.into(),
        title: title.into(),
        brand: String::new(),
        attributes: vec![],
        taxonomy_path: path.iter().map(|s| s.to_string()).collect(),
    }
}

/// Small catalog with random two- or three-word titles.
pub fn word_catalog(n: usize, seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let words: Vec<&str> = (0..rng.gen_range(2..4))
                .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                .collect();
            let leaf = format!("leaf{}", i % 4);
            let parent = format!("par{}", i % 2);
            let mut it = item(&format!("i{i:03}"), &words.join(" "), &[]);
            it.taxonomy_path = vec![parent, leaf];
            it
        })
        .collect();
    Catalog::from_items(items).unwrap()
}

pub fn triplet(
    catalog: &Catalog,
    query: &str,
    ctx: Option<&CustomerContext>,
    pos: usize,
    neg: Option<usize>,
) -> Triplet {
    Triplet {
        key: QueryKey {
            query: query.into(),
            customer: ctx.map(|c| c.customer_id.clone()),
        },
        query_side: serialize_query_side(query, ctx, catalog),
        context: ctx.cloned(),
        positive: ItemIdx(pos as u32),
        negative: neg.map(|n| ItemIdx(n as u32)),
        sampler: SamplerKind::TbHns,
        rho: 0.0,
    }
}

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab_buckets: 16,
        d_tok: 4,
        d: 4,
        d_cust: 3,
    }
}

/// Loss recomputed from the public encoders and `mnrl_loss`, with its own
/// negative-set construction.
pub fn oracle_batch_loss(
    params: &ModelParams,
    batch: &[Triplet],
    catalog: &Catalog,
    in_batch: bool,
) -> Option<f64> {
    let mut losses = Vec::new();
    for t in batch {
        let mut negs: Vec<ItemIdx> = Vec::new();
        if let Some(n) = t.negative {
            negs.push(n);
        }
        if in_batch {
            let mut others: Vec<ItemIdx> = batch
                .iter()
                .filter(|o| o.query_side != t.query_side)
                .map(|o| o.positive)
                .collect();
            others.sort();
            others.dedup();
            for o in others {
                if !negs.contains(&o) {
                    negs.push(o);
                }
            }
        }
        negs.retain(|&n| n != t.positive);
        if negs.is_empty() {
            continue;
        }
        let q = params
            .encode_query(&t.key.query, t.context.as_ref(), catalog)
            .unwrap()
            .embedding;
        let sim = |i: ItemIdx| -> f64 {
            let e = params.encode_item(catalog.item(i));
            q.iter().zip(e.iter()).map(|(a, b)| a * b).sum()
        };
        let sp = sim(t.positive);
        let sn: Vec<f64> = negs.iter().map(|&n| sim(n)).collect();
        losses.push(mnrl_loss(sp, &sn));
    }
    if losses.is_empty() {
        None
    } else {
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

pub fn customers(
    n: usize,
    dims: ModelDims,
    catalog: &Catalog,
    seed: u64,
) -> BTreeMap<String, CustomerContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|c| {
            let id = format!("u{c}");
            let hist = (0..rng.gen_range(0..4))
                .map(|_| {
                    catalog.items()[rng.gen_range(0..catalog.len())]
                        .item_id
                        .clone()
                })
                .collect();
            (
                id.clone(),
                CustomerContext {
                    customer_id: id,
                    profile_features: (0..dims.d_cust).map(|_| rng.gen::<f64>()).collect(),
                    purchase_history: hist,
                },
            )
        })
        .collect()
}

/// BM25 written out term by term from tokenized documents.
pub fn bm25_oracle(docs: &[Vec<String>], query: &[&str], k1: f64, b: f64) -> Vec<f64> {
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut terms: Vec<&str> = query.to_vec();
    terms.sort();
    terms.dedup();
    docs.iter()
        .map(|d| {
            let mut s = 0.0;
            for t in &terms {
                let df = docs.iter().filter(|x| x.iter().any(|w| w == t)).count() as f64;
                let tf = d.iter().filter(|w| w == t).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avg));
            }
            s
        })
        .collect()
}

/// `n` points in `dim` dimensions from a mixture of `centers` spherical
/// Gaussians: center coordinates ~ N(0, spread²), noise ~ N(0, 1).
pub fn gaussian_mixture(
    n: usize,
    dim: usize,
    centers: usize,
    spread: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..centers)
        .map(|_| {
            (0..dim)
                .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    (0..n)
        .map(|_| {
            let m = &means[rng.gen_range(0..centers)];
            m.iter()
                .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Recall of `got` against the ids in `exact`.
pub fn overlap(exact: &[(String, f64)], got: &[(String, f64)]) -> f64 {
    let truth: std::collections::BTreeSet<&str> = exact.iter().map(|h| h.0.as_str()).collect();
    got.iter().filter(|h| truth.contains(h.0.as_str())).count() as f64 / exact.len() as f64
}

/// Independent metric oracles.
pub mod oracle {
    use std::collections::BTreeSet;

    pub fn recall(predicted: &[String], truth: &BTreeSet<String>, k: usize) -> f64 {
        let top: BTreeSet<&String> = predicted.iter().take(k).collect();
        truth.iter().filter(|t| top.contains(t)).count() as f64 / truth.len() as f64
    }

    pub fn entropy(counts: &[u64]) -> f64 {
        let nz: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
        if nz.len() < 2 {
            return 0.0;
        }
        let total: u64 = nz.iter().sum();
        let mut h = 0.0;
        for c in &nz {
            let p = *c as f64 / total as f64;
            h -= p * p.ln();
        }
        h / (nz.len() as f64).ln()
    }

    /// Sorts a copy and indexes rank `ceil(q·n)`.
    pub fn percentile(samples: &[f64], q: f64) -> f64 {
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut rank = (q * s.len() as f64).ceil() as usize;
        if rank == 0 {
            rank = 1;
        }
        s[rank.min(s.len()) - 1]
    }

    /// `ln Γ(x)` for x a positive multiple of 1/2, by exact recursion.
    fn ln_gamma_half(x: f64) -> f64 {
        let mut acc = 0.0;
        let mut y = x;
        while y > 1.0 {
            y -= 1.0;
            acc += y.ln();
        }
        if (y - 0.5).abs() < 1e-12 {
            acc + 0.5 * std::f64::consts::PI.ln()
        } else {
            acc
        }
    }

    fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }

    #[allow(clippy::too_many_arguments)]
    fn adaptive(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }

    /// Two-sided Student-t p-value by adaptive Simpson integration of the
    /// density over `[0, |t|]`.
    pub fn t_two_sided_p(t: f64, df: usize) -> f64 {
        let nu = df as f64;
        let ln_c = ln_gamma_half((nu + 1.0) / 2.0)
            - ln_gamma_half(nu / 2.0)
            - 0.5 * (nu * std::f64::consts::PI).ln();
        let c = ln_c.exp();
        let f = move |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
        let b = t.abs();
        if b == 0.0 {
            return 1.0;
        }
        let (fa, fm, fb) = (f(0.0), f(b / 2.0), f(b));
        let whole = simpson(0.0, b, fa, fm, fb);
        let inner = adaptive(&f, 0.0, b, fa, fm, fb, whole, 1e-13, 50);
        (1.0 - 2.0 * inner).max(0.0)
    }

    /// Returns `(t, p)` for the paired differences `after − before`.
    pub fn paired_t(before: &[f64], after: &[f64]) -> (f64, f64) {
        let n = before.len();
        let d: Vec<f64> = (0..n).map(|i| after[i] - before[i]).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let ss: f64 = d.iter().map(|x| (x - mean).powi(2)).sum();
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        let t = mean / (sd / (n as f64).sqrt());
        (t, t_two_sided_p(t, n - 1))
    }
}

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
// Gradients smaller than this are compared absolutely; central differences
// at GRAD_EPS carry ~1e-10 of truncation and round-off noise.
const GRAD_FLOOR: f64 = 1e-6;

pub fn gradient_batch(personalized: bool, seed: u64) -> (taxoneg::catalog::Catalog, Vec<Triplet>) {
    let cat = word_catalog(12, seed);
    let custs = customers(4, tiny_dims(), &cat, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let queries = ["red drill", "oak tile", "cordless saw", "blue lamp hose"];
    let triplets = (0..8)
        .map(|_| {
            let q = queries[rng.gen_range(0..queries.len())];
            let ctx = if personalized && rng.gen_bool(0.75) {
                custs.values().nth(rng.gen_range(0..custs.len()))
            } else {
                None
            };
            let pos = rng.gen_range(0..cat.len());
            let neg = if rng.gen_bool(0.8) {
                Some((pos + rng.gen_range(1..cat.len())) % cat.len())
            } else {
                None
            };
            triplet(&cat, q, ctx, pos, neg)
        })
        .collect();
    (cat, triplets)
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter, after asserting the forward pass
/// matches the oracle.
pub fn gradient_check(personalized: bool, in_batch: bool, seed: u64) -> f64 {
    let (cat, triplets) = gradient_batch(personalized, seed);
    let params = ModelParams::init(tiny_dims(), personalized, seed).unwrap();
    let (loss, grads) = batch_loss(&params, &triplets, &cat, in_batch).unwrap();
    let oracle = oracle_batch_loss(&params, &triplets, &cat, in_batch).unwrap();
    assert!(
        (loss - oracle).abs() < 1e-12,
        "forward {loss} vs oracle {oracle}"
    );

    let analytic: Vec<f64> = grads
        .token_dense(params.dims)
        .into_iter()
        .chain(grads.query_proj.weight.iter().copied())
        .chain(grads.query_proj.bias.iter().copied())
        .chain(grads.item_proj.weight.iter().copied())
        .chain(grads.item_proj.bias.iter().copied())
        .chain(grads.fusion.weight.iter().copied())
        .chain(grads.fusion.bias.iter().copied())
        .collect();
    let n = params.iter_values().count();
    assert_eq!(analytic.len(), n);

    let mut worst: f64 = 0.0;
    for k in 0..n {
        let mut plus = params.clone();
        *plus.iter_values_mut().nth(k).unwrap() += GRAD_EPS;
        let mut minus = params.clone();
        *minus.iter_values_mut().nth(k).unwrap() -= GRAD_EPS;
        let lp = oracle_batch_loss(&plus, &triplets, &cat, in_batch).unwrap();
        let lm = oracle_batch_loss(&minus, &triplets, &cat, in_batch).unwrap();
        let fd = (lp - lm) / (2.0 * GRAD_EPS);
        let a = analytic[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}
