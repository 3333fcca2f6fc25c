mod common;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taxoneg::ann::{AnnIndex, IndexKind};
use taxoneg::catalog::{aggregate_engagement, Catalog};
use taxoneg::encoder::{ModelDims, ModelParams};
use taxoneg::eval::evaluate_model;
use taxoneg::experiment::Dataset;
use taxoneg::sampling::{build_triplets, SamplerConfig, SamplerResources};
use taxoneg::synth::{generate, Split};
use taxoneg::training::{batch_loss, mnrl_loss, train, TrainConfig, TrainMode};

fn config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: 8,
        seed: 7,
        dims: common::tiny_dims(),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let cat = common::word_catalog(10, 1);
    let t = vec![common::triplet(&cat, "red drill", None, 0, Some(1))];
    let out = train(&cat, &[], &t, &config(0, 0.1), None).unwrap();
    assert_eq!(
        out.params,
        ModelParams::init(common::tiny_dims(), false, 7).unwrap()
    );
    assert!(out.reports.is_empty());
}

#[test]
fn separable_toy_loss_decreases() {
    let cat = Catalog::from_items(vec![
        common::item("a1", "red drill", &["tools", "drills"]),
        common::item("a2", "red drill bit", &["tools", "drills"]),
        common::item("b1", "oak table", &["home", "tables"]),
        common::item("b2", "oak table lamp", &["home", "tables"]),
    ])
    .unwrap();
    let t = vec![
        common::triplet(&cat, "drill", None, 0, Some(2)),
        common::triplet(&cat, "drill", None, 1, Some(3)),
        common::triplet(&cat, "table", None, 2, Some(0)),
        common::triplet(&cat, "table", None, 3, Some(1)),
    ];
    let mut cfg = config(30, 0.5);
    cfg.in_batch_negatives = false;
    let out = train(&cat, &[], &t, &cfg, None).unwrap();
    let first = out.reports.first().unwrap().mean_loss;
    let last = out.reports.last().unwrap().mean_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn training_improves_held_out_recall() {
    let spec = taxoneg::synth::SynthSpec {
        seed: 7,
        feature_dim: 4,
        ..Default::default()
    };
    let data = generate(&spec).unwrap();
    let cat = data.catalog().unwrap();
    let test: std::collections::BTreeSet<&str> = data
        .truth
        .iter()
        .filter(|t| t.split == Split::Test)
        .map(|t| t.query_text.as_str())
        .collect();
    let train_events: Vec<_> = data
        .events
        .iter()
        .filter(|e| !test.contains(e.query_text.as_str()))
        .cloned()
        .collect();
    let agg = aggregate_engagement(&cat, &train_events);
    let set = build_triplets(
        &agg,
        &cat,
        &BTreeMap::new(),
        &SamplerConfig::default(),
        SamplerResources::default(),
        false,
        7,
    )
    .unwrap();
    let mut triplets = set.triplets;
    triplets.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    triplets.truncate(200);
    assert_eq!(triplets.len(), 200);

    let dims = ModelDims {
        vocab_buckets: 4096,
        d_tok: 16,
        d: 16,
        d_cust: 4,
    };
    let cfg = TrainConfig {
        learning_rate: 2.0,
        epochs: 5,
        batch_size: 32,
        seed: 7,
        dims,
        ..TrainConfig::default()
    };
    let dataset = Dataset {
        catalog: cat.clone(),
        events: data.events.clone(),
        customers: BTreeMap::new(),
        truth: data.truth.clone(),
    };
    let cases = dataset.test_cases().unwrap();
    let recall8 = |p: &ModelParams| {
        let rows: Vec<_> = cat
            .items()
            .iter()
            .map(|it| (it.item_id.clone(), p.encode_item(it)))
            .collect();
        let index = AnnIndex::build(&rows, IndexKind::Exact, None, 0).unwrap();
        evaluate_model(p, &index, &cat, &cases, &[8], 1)
            .unwrap()
            .report
            .recall_at[&8]
    };
    let before = recall8(&ModelParams::init(dims, false, 7).unwrap());
    let out = train(&cat, &[], &triplets, &cfg, None).unwrap();
    let after = recall8(&out.params);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let cat = common::word_catalog(30, 4);
    let t: Vec<_> = (0..20)
        .map(|i| {
            let q = common::WORDS[i % 5];
            common::triplet(&cat, q, None, i, Some((i + 7) % 30))
        })
        .collect();
    let run = |seed| {
        let mut c = config(3, 0.3);
        c.seed = seed;
        train(&cat, &[], &t, &c, None).unwrap()
    };
    let (a, b) = (run(7), run(7));
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(a.reports, b.reports);
    assert_ne!(a.params.to_bytes(), run(8).params.to_bytes());
}

#[test]
fn combined_mode_uses_both_sets() {
    let cat = common::word_catalog(20, 5);
    let custs = common::customers(2, common::tiny_dims(), &cat, 3);
    let ctx = custs.values().next();
    let per = vec![common::triplet(&cat, "red saw", ctx, 1, Some(2))];
    let nper = vec![
        common::triplet(&cat, "red saw", None, 3, Some(4)),
        common::triplet(&cat, "oak", None, 5, Some(6)),
    ];
    let mut c = config(1, 0.1);
    c.mode = TrainMode::Combined;
    let out = train(&cat, &per, &nper, &c, None).unwrap();
    assert_eq!(out.reports[0].triplets_seen, 3);
    assert!(out.params.personalized);
}

#[test]
fn loss_grows_with_negative_similarity() {
    let mut last = mnrl_loss(1.0, &[-3.0]);
    for k in 1..40 {
        let sn = -3.0 + k as f64 * 0.2;
        let l = mnrl_loss(1.0, &[sn, -1.0]);
        let l1 = mnrl_loss(1.0, &[sn]);
        assert!(l1 > last);
        assert!(l > l1);
        last = l1;
    }
    let mut prev = f64::INFINITY;
    for k in 0..40 {
        let l = mnrl_loss(-2.0 + k as f64 * 0.2, &[0.3, 0.1]);
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn loss_matches_naive_softmax() {
    let cases: [(f64, &[f64]); 5] = [
        (2.0, &[0.0, 1.0]),
        (0.3, &[0.3]),
        (-1.0, &[0.5, -0.25, 0.75, 0.0]),
        (0.9, &[-0.9, 0.95]),
        (0.0, &[0.0, 0.0, 0.0]),
    ];
    for (sp, sn) in cases {
        let denom: f64 = sp.exp() + sn.iter().map(|s| s.exp()).sum::<f64>();
        let naive = -(sp.exp() / denom).ln();
        assert!((mnrl_loss(sp, sn) - naive).abs() < 1e-12);
    }
    // stays finite where the naive form overflows
    assert!(mnrl_loss(800.0, &[790.0]).is_finite());
    assert!((mnrl_loss(800.0, &[800.0]) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn batch_loss_agrees_with_oracle() {
    let cat = common::word_catalog(16, 9);
    let custs = common::customers(3, common::tiny_dims(), &cat, 2);
    let params = ModelParams::init(common::tiny_dims(), true, 4).unwrap();
    let ctxs: Vec<_> = custs.values().collect();
    let batch: Vec<_> = (0..6)
        .map(|i| {
            common::triplet(
                &cat,
                common::WORDS[i % 3],
                Some(ctxs[i % 3]),
                i,
                (i % 2 == 0).then_some(i + 8),
            )
        })
        .collect();
    for in_batch in [false, true] {
        let (loss, _) = batch_loss(&params, &batch, &cat, in_batch).unwrap();
        let oracle = common::oracle_batch_loss(&params, &batch, &cat, in_batch).unwrap();
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }
}
