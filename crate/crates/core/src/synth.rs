//! Synthetic catalogs, engagement logs and customers with planted ground
//! truth.
//!
//! The taxonomy is balanced (`branching^depth` leaves). Every leaf has a
//! handful of synonym words used in item titles and queries. Each query
//! targets one leaf ("specific" queries) or one parent category
//! ("ambiguous" queries, resolved per customer by their preferred style),
//! and purchases are drawn from the relevant leaf with a configurable
//! noise rate. Customers carry a style index that drives both their
//! profile features and their purchase history.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    write_engagement, Catalog, CustomerContext, EngagementEvent, EventKind, Item,
    DEFAULT_HISTORY_WINDOW,
};
use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const COLORS: [&str; 8] = [
    "black", "white", "grey", "silver", "green", "navy", "beige", "brown",
];
const SIZES: [&str; 3] = ["small", "medium", "large"];
const SYNONYMS_PER_LEAF: usize = 3;
const DESCRIPTORS_PER_PARENT: usize = 3;
/// Probability that a specific query names the parent category.
const QUERY_PARENT_RATE: f64 = 0.7;
const QUERY_DESCRIPTOR_RATE: f64 = 0.3;
const QUERY_COLOR_RATE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub branching: usize,
    pub depth: usize,
    pub items_per_leaf: usize,
    pub n_customers: usize,
    pub n_queries: usize,
    pub seed: u64,
    /// Probability that a purchase ignores the relevant leaf.
    pub noise_rate: f64,
    /// Fraction of queries that name only a parent category.
    pub ambiguous_fraction: f64,
    /// Fraction of distinct queries held out for evaluation.
    pub test_fraction: f64,
    pub history_window: usize,
    pub feature_dim: usize,
    /// Occurrences of the most frequent query; frequencies decay as a
    /// power law over query rank.
    pub max_query_frequency: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            branching: 4,
            depth: 3,
            items_per_leaf: 10,
            n_customers: 200,
            n_queries: 400,
            seed: 7,
            noise_rate: 0.1,
            ambiguous_fraction: 0.0,
            test_fraction: 0.2,
            history_window: DEFAULT_HISTORY_WINDOW,
            feature_dim: 8,
            max_query_frequency: 200,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if self.branching == 0 || self.depth == 0 || self.items_per_leaf == 0 {
            return bad("branching, depth and items_per_leaf must be at least 1");
        }
        if self.n_customers == 0 || self.n_queries == 0 {
            return bad("n_customers and n_queries must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.noise_rate)
            || !(0.0..=1.0).contains(&self.ambiguous_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
        {
            return bad("rates must lie in [0, 1]");
        }
        if self.max_query_frequency == 0 {
            return bad("max_query_frequency must be at least 1");
        }
        let leaves = self.branching.checked_pow(self.depth as u32);
        match leaves.and_then(|l| l.checked_mul(self.items_per_leaf)) {
            Some(n) if n <= 5_000_000 => Ok(()),
            _ => bad("catalog would exceed 5M items"),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Specific,
    Ambiguous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Planted relevance for one query (and customer, for ambiguous queries).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub query_text: String,
    pub customer_id: Option<String>,
    pub relevant: Vec<String>,
    pub frequency: u64,
    pub split: Split,
    pub kind: QueryKind,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub items: Vec<Item>,
    pub events: Vec<EngagementEvent>,
    pub customers: Vec<CustomerContext>,
    pub truth: Vec<TruthRecord>,
}

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const ENGAGEMENT_FILE: &str = "engagement.tsv";
pub const CUSTOMERS_FILE: &str = "customers.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn new(seed: u64) -> Self {
        let mut used: HashSet<String> = HashSet::new();
        used.extend(COLORS.iter().map(|s| s.to_string()));
        used.extend(SIZES.iter().map(|s| s.to_string()));
        Words {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0057_04d5),
            used,
        }
    }

    fn fresh(&mut self) -> String {
        loop {
            let syll = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syll {
                w.push(CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[self.rng.gen_range(0..VOWELS.len())] as char);
            }
            if self.rng.gen_bool(0.5) {
                w.push(CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

struct Node {
    id: String,
    word: String,
    children: Vec<usize>,
    parent: Option<usize>,
    /// Position among its siblings.
    slot: usize,
}

struct Tree {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

fn build_tree(spec: &SynthSpec, words: &mut Words) -> Tree {
    let mut nodes: Vec<Node> = Vec::new();
    let mut frontier: Vec<Option<usize>> = vec![None];
    for _ in 0..spec.depth {
        let mut next = Vec::new();
        for parent in frontier {
            for slot in 0..spec.branching {
                let id = match parent {
                    Some(p) => format!("{}_{slot}", nodes[p].id),
                    None => format!("c{slot}"),
                };
                let idx = nodes.len();
                nodes.push(Node {
                    id,
                    word: words.fresh(),
                    children: Vec::new(),
                    parent,
                    slot,
                });
                if let Some(p) = parent {
                    nodes[p].children.push(idx);
                }
                next.push(Some(idx));
            }
        }
        frontier = next;
    }
    let leaves = frontier.into_iter().flatten().collect();
    Tree { nodes, leaves }
}

impl Tree {
    fn path(&self, mut n: usize) -> Vec<String> {
        let mut p = vec![self.nodes[n].id.clone()];
        while let Some(up) = self.nodes[n].parent {
            p.push(self.nodes[up].id.clone());
            n = up;
        }
        p.reverse();
        p
    }
}

/// Generates a full synthetic dataset. Deterministic per `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut words = Words::new(spec.seed);
    let tree = build_tree(spec, &mut words);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let brands: Vec<String> = (0..spec.branching).map(|_| words.fresh()).collect();
    let synonyms: BTreeMap<usize, Vec<String>> = tree
        .leaves
        .iter()
        .map(|&l| {
            let mut syn = vec![tree.nodes[l].word.clone()];
            syn.extend((1..SYNONYMS_PER_LEAF).map(|_| words.fresh()));
            (l, syn)
        })
        .collect();

    // Words shared by every leaf under a parent, so siblings look alike.
    let descriptors: BTreeMap<usize, Vec<String>> = tree
        .leaves
        .iter()
        .filter_map(|&l| tree.nodes[l].parent)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|p| {
            (
                p,
                (0..DESCRIPTORS_PER_PARENT).map(|_| words.fresh()).collect(),
            )
        })
        .collect();

    // items
    let mut items = Vec::with_capacity(spec.n_leaves() * spec.items_per_leaf);
    let mut leaf_items: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &leaf in &tree.leaves {
        let parent = tree.nodes[leaf].parent;
        for _ in 0..spec.items_per_leaf {
            let n = items.len();
            let syn = &synonyms[&leaf];
            let mut title = vec![syn[rng.gen_range(0..syn.len())].clone()];
            if let Some(p) = parent {
                let desc = &descriptors[&p];
                title.push(tree.nodes[p].word.clone());
                title.push(desc[rng.gen_range(0..desc.len())].clone());
            }
            let brand = if rng.gen_bool(0.8) {
                brands[tree.nodes[leaf].slot % brands.len()].clone()
            } else {
                brands[rng.gen_range(0..brands.len())].clone()
            };
            items.push(Item {
                item_id: format!("p{n:06}"),
                title: title.join(" "),
                brand,
                attributes: vec![
                    (
                        "color".into(),
                        COLORS[rng.gen_range(0..COLORS.len())].into(),
                    ),
                    ("size".into(), SIZES[rng.gen_range(0..SIZES.len())].into()),
                ],
                taxonomy_path: tree.path(leaf),
            });
            leaf_items.entry(leaf).or_default().push(n);
        }
    }

    // customers: a style slot picks the preferred child under any parent
    let mut customers = Vec::with_capacity(spec.n_customers);
    let mut styles = Vec::with_capacity(spec.n_customers);
    let parents: Vec<usize> = {
        let set: BTreeSet<usize> = tree
            .leaves
            .iter()
            .filter_map(|&l| tree.nodes[l].parent)
            .collect();
        set.into_iter().collect()
    };
    for c in 0..spec.n_customers {
        let style = rng.gen_range(0..spec.branching);
        styles.push(style);
        let mut features: Vec<f64> = (0..spec.feature_dim)
            .map(|_| 0.2 * rng.gen::<f64>())
            .collect();
        if spec.feature_dim > 0 {
            features[style % spec.feature_dim] = 0.8 + 0.2 * rng.gen::<f64>();
        }
        let history = (0..spec.history_window)
            .map(|_| {
                let it = if rng.gen_bool(0.9) {
                    let leaf = if parents.is_empty() {
                        tree.leaves[style % tree.leaves.len()]
                    } else {
                        let p = parents[rng.gen_range(0..parents.len())];
                        let ch = &tree.nodes[p].children;
                        ch[style % ch.len()]
                    };
                    *leaf_items[&leaf].choose(&mut rng).expect("leaf has items")
                } else {
                    rng.gen_range(0..items.len())
                };
                items[it].item_id.clone()
            })
            .collect();
        customers.push(CustomerContext {
            customer_id: format!("u{c:05}"),
            profile_features: features,
            purchase_history: history,
        });
    }

    // queries
    let ambiguous_ok = !parents.is_empty();
    let mut queries: Vec<(String, QueryKind, usize)> = Vec::new();
    let mut seen = HashSet::new();
    let mut guard = 0usize;
    while queries.len() < spec.n_queries {
        guard += 1;
        if guard > spec.n_queries * 1000 {
            return Err(Error::InvalidArgument(
                "cannot generate enough distinct queries for this taxonomy".into(),
            ));
        }
        let ambiguous = ambiguous_ok && rng.gen_bool(spec.ambiguous_fraction);
        let (mut text, kind, target, parent) = if ambiguous {
            let p = parents[rng.gen_range(0..parents.len())];
            (
                vec![tree.nodes[p].word.clone()],
                QueryKind::Ambiguous,
                p,
                Some(p),
            )
        } else {
            let leaf = tree.leaves[rng.gen_range(0..tree.leaves.len())];
            let syn = &synonyms[&leaf];
            let mut t = vec![syn[rng.gen_range(0..syn.len())].clone()];
            let parent = tree.nodes[leaf].parent;
            if let Some(p) = parent {
                if rng.gen_bool(QUERY_PARENT_RATE) {
                    t.push(tree.nodes[p].word.clone());
                }
            }
            (t, QueryKind::Specific, leaf, parent)
        };
        if let Some(p) = parent {
            if rng.gen_bool(QUERY_DESCRIPTOR_RATE) {
                let desc = &descriptors[&p];
                text.insert(0, desc[rng.gen_range(0..desc.len())].clone());
            }
        }
        if rng.gen_bool(QUERY_COLOR_RATE) {
            text.push(COLORS[rng.gen_range(0..COLORS.len())].to_owned());
        }
        let text = text.join(" ");
        if seen.insert(text.clone()) {
            queries.push((text, kind, target));
        }
    }
    let n_test = ((spec.test_fraction * queries.len() as f64).round() as usize).min(queries.len());
    let mut split_order: Vec<usize> = (0..queries.len()).collect();
    split_order.shuffle(&mut rng);
    let test: HashSet<usize> = split_order[..n_test].iter().copied().collect();

    let relevant_leaf = |kind: QueryKind, target: usize, style: usize| -> usize {
        match kind {
            QueryKind::Specific => target,
            QueryKind::Ambiguous => {
                let ch = &tree.nodes[target].children;
                ch[style % ch.len()]
            }
        }
    };

    let mut events = Vec::new();
    let mut truth = Vec::new();
    let mut clock: u64 = 1_600_000_000;
    for (rank, (text, kind, target)) in queries.iter().enumerate() {
        let freq = ((spec.max_query_frequency as f64) / ((rank + 1) as f64).powf(0.6))
            .ceil()
            .max(1.0) as usize;
        let mut issuers: BTreeSet<usize> = BTreeSet::new();
        for _ in 0..freq {
            let c = rng.gen_range(0..spec.n_customers);
            issuers.insert(c);
            let leaf = relevant_leaf(*kind, *target, styles[c]);
            let bought = if rng.gen_bool(spec.noise_rate) {
                rng.gen_range(0..items.len())
            } else {
                *leaf_items[&leaf].choose(&mut rng).expect("leaf has items")
            };
            let kinds: &[EventKind] = if rng.gen_bool(0.3) {
                &[EventKind::Click, EventKind::AddToCart, EventKind::Purchase]
            } else {
                &[EventKind::Click, EventKind::Purchase]
            };
            for &event_kind in kinds {
                clock += rng.gen_range(1..120);
                events.push(EngagementEvent {
                    customer_id: customers[c].customer_id.clone(),
                    query_text: text.clone(),
                    item_id: items[bought].item_id.clone(),
                    event_kind,
                    timestamp: clock,
                });
            }
        }
        let split = if test.contains(&rank) {
            Split::Test
        } else {
            Split::Train
        };
        let leaf_ids = |leaf: usize| -> Vec<String> {
            leaf_items[&leaf]
                .iter()
                .map(|&i| items[i].item_id.clone())
                .collect()
        };
        match kind {
            QueryKind::Specific => truth.push(TruthRecord {
                query_text: text.clone(),
                customer_id: None,
                relevant: leaf_ids(*target),
                frequency: freq as u64,
                split,
                kind: *kind,
            }),
            QueryKind::Ambiguous => {
                for &c in &issuers {
                    truth.push(TruthRecord {
                        query_text: text.clone(),
                        customer_id: Some(customers[c].customer_id.clone()),
                        relevant: leaf_ids(relevant_leaf(*kind, *target, styles[c])),
                        frequency: freq as u64,
                        split,
                        kind: *kind,
                    });
                }
            }
        }
    }
    Ok(SynthData {
        items,
        events,
        customers,
        truth,
    })
}

impl SynthData {
    pub fn catalog(&self) -> Result<Catalog> {
        Catalog::from_items(self.items.clone())
    }

    /// Writes catalog, engagement, customer and truth files into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let jsonl = |name: &str, lines: Vec<String>| -> Result<()> {
            let path = dir.join(name);
            let mut buf = Vec::new();
            for l in lines {
                writeln!(buf, "{l}").expect("vec write");
            }
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
        };
        jsonl(
            CATALOG_FILE,
            self.items.iter().map(Catalog::to_jsonl_line).collect(),
        )?;
        write_engagement(dir.join(ENGAGEMENT_FILE), &self.events)?;
        jsonl(
            CUSTOMERS_FILE,
            self.customers
                .iter()
                .map(serde_json::to_string)
                .collect::<std::result::Result<_, _>>()?,
        )?;
        jsonl(
            TRUTH_FILE,
            self.truth
                .iter()
                .map(serde_json::to_string)
                .collect::<std::result::Result<_, _>>()?,
        )
    }
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Catalog of `n_items` whose parent buckets all hold `bucket_size` items
/// (five leaves per parent, the last parent possibly smaller), with titles
/// drawn from a shared vocabulary so lexical postings grow with `n_items`.
pub fn bench_catalog(n_items: usize, bucket_size: usize, seed: u64) -> Result<Catalog> {
    if n_items == 0 || bucket_size == 0 {
        return Err(Error::InvalidArgument(
            "bench catalog sizes must be positive".into(),
        ));
    }
    let leaves_per_parent = 5.min(bucket_size);
    let leaf_size = bucket_size.div_ceil(leaves_per_parent);
    let mut words = Words::new(seed);
    let vocab: Vec<String> = (0..BENCH_VOCAB).map(|_| words.fresh()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n_items)
        .map(|n| {
            let parent = n / bucket_size;
            let leaf = (n % bucket_size) / leaf_size;
            let title: Vec<&str> = (0..3)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].as_str())
                .collect();
            Item {
                item_id: format!("b{n:07}"),
                title: title.join(" "),
                brand: String::new(),
                attributes: vec![],
                taxonomy_path: vec![
                    format!("g{}", parent / 100),
                    format!("g{}_p{parent}", parent / 100),
                    format!("g{}_p{parent}_l{leaf}", parent / 100),
                ],
            }
        })
        .collect();
    Catalog::from_items(items)
}

pub const BENCH_VOCAB: usize = 200;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec() {
        let spec = SynthSpec {
            branching: 1,
            depth: 1,
            items_per_leaf: 3,
            n_customers: 2,
            n_queries: 2,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        assert_eq!(data.items.len(), 3);
        let cat = data.catalog().unwrap();
        let leaf = cat.taxonomy().node("c0").unwrap();
        assert_eq!(cat.taxonomy().bucket(leaf).len(), 3);
    }

    #[test]
    fn standard_item_count() {
        let spec = SynthSpec {
            n_queries: 50,
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap().items.len(), 640);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec {
                branching: 0,
                ..Default::default()
            },
            SynthSpec {
                n_queries: 0,
                ..Default::default()
            },
            SynthSpec {
                noise_rate: 1.5,
                ..Default::default()
            },
        ] {
            assert!(generate(&spec).is_err());
        }
    }

    #[test]
    fn bench_catalog_bucket_sizes() {
        let cat = bench_catalog(1000, 50, 1).unwrap();
        for idx in 0..cat.len() {
            let b = cat.scope_bucket(crate::catalog::ItemIdx(idx as u32), Default::default());
            assert_eq!(b.len(), 50);
        }
    }
}
