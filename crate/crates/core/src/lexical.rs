//! Okapi BM25 over folded item text.
//!
//! BM25(D, Q) = Σ idf(t) · tf(t, D) · (k1 + 1) / (tf(t, D) + k1 · (1 − b + b · |D| / avgdl))
//! idf(t)     = ln((N − df(t) + 0.5) / (df(t) + 0.5) + 1)

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ItemIdx};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub item: ItemIdx,
    pub tf: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    /// Postings per term, sorted by item id.
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub doc_len: Vec<u32>,
    pub item_ids: Vec<String>,
    pub avg_doc_len: f64,
    pub doc_count: usize,
    pub k1: f64,
    pub b: f64,
}

impl InvertedIndex {
    pub fn build(catalog: &Catalog, k1: f64, b: f64) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::Empty("cannot index an empty catalog".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(catalog.len());

        // Visiting documents in id order leaves every posting list sorted.
        let mut order: Vec<usize> = (0..catalog.len()).collect();
        order.sort_by(|&a, &c| catalog.items()[a].item_id.cmp(&catalog.items()[c].item_id));
        doc_len.resize(catalog.len(), 0);

        for pos in order {
            let tokens = tokenize(&catalog.items()[pos].folded_text());
            doc_len[pos] = tokens.len() as u32;
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_owned()).or_default().push(Posting {
                    item: ItemIdx(pos as u32),
                    tf: count,
                });
            }
        }
        let total: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
        Ok(InvertedIndex {
            postings,
            avg_doc_len: total as f64 / catalog.len() as f64,
            doc_count: catalog.len(),
            item_ids: catalog.items().iter().map(|i| i.item_id.clone()).collect(),
            doc_len,
            k1,
            b,
        })
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top `k` documents for `query` as `(item, score)`, scores non-increasing,
    /// ties broken by ascending item id. An empty query yields no results.
    pub fn topk_idx(&self, query: &str, k: usize) -> Result<Vec<(ItemIdx, f64)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();

        let mut acc: HashMap<ItemIdx, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let tf = f64::from(p.tf);
                let dl = f64::from(self.doc_len[p.item.get()]);
                let norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_len);
                *acc.entry(p.item).or_default() += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(ItemIdx, f64)> = acc.into_iter().collect();
        let ids = &self.item_ids;
        let cmp = |a: &(ItemIdx, f64), c: &(ItemIdx, f64)| {
            c.1.total_cmp(&a.1)
                .then_with(|| ids[a.0.get()].cmp(&ids[c.0.get()]))
        };
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, cmp);
            ranked.truncate(k);
        }
        ranked.sort_by(cmp);
        Ok(ranked)
    }

    /// Like [`InvertedIndex::topk_idx`] but with item ids.
    pub fn topk(&self, query: &str, k: usize) -> Result<Vec<(String, f64)>> {
        Ok(self
            .topk_idx(query, k)?
            .into_iter()
            .map(|(i, s)| (self.item_ids[i.get()].clone(), s))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Item;

    fn catalog(titles: &[&str]) -> Catalog {
        Catalog::from_items(
            titles
                .iter()
                .enumerate()
                .map(|(i, t)| Item {
                    item_id: format!("d{i:02}"),
                    title: t.to_string(),
                    brand: String::new(),
                    attributes: vec![],
                    taxonomy_path: vec!["x".into()],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn postings_and_lengths() {
        let idx = InvertedIndex::build(
            &catalog(&["red drill", "blue drill"]),
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        assert_eq!(idx.postings["drill"].len(), 2);
        assert_eq!(idx.doc_len[0], 2);
        assert_eq!(idx.avg_doc_len, 2.0);
        assert_eq!(idx.doc_count, 2);
    }

    #[test]
    fn absent_term_gives_nothing() {
        let idx = InvertedIndex::build(&catalog(&["red drill"]), DEFAULT_K1, DEFAULT_B).unwrap();
        assert!(idx.topk("saw", 5).unwrap().is_empty());
        assert!(idx.topk("", 5).unwrap().is_empty());
        assert!(idx.topk("drill", 0).is_err());
    }

    #[test]
    fn single_match_scores_positive() {
        let idx = InvertedIndex::build(
            &catalog(&["red drill", "garden hose"]),
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        let r = idx.topk("drill", 3).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, "d00");
        assert!(r[0].1 > 0.0);
    }

    #[test]
    fn ties_break_by_item_id() {
        let idx = InvertedIndex::build(
            &catalog(&["drill", "drill", "drill"]),
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        let r = idx.topk("drill", 2).unwrap();
        assert_eq!(
            r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(),
            vec!["d00", "d01"]
        );
    }
}
