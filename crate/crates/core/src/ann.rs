//! Exact and IVF-flat inner-product retrieval.
//!
//! The IVF variant clusters item vectors with k-means (k-means++ seeding,
//! Euclidean assignment) and at query time scans only the `nprobe` clusters
//! whose centroids have the highest inner product with the query.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{dot, Embedding};
use crate::error::{Error, Result};

pub const ANN_MAGIC: [u8; 8] = *b"TXNGANN\0";
pub const ANN_VERSION: u32 = 1;
pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_REL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Exact,
    Ivf,
}

impl std::str::FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(IndexKind::Exact),
            "ivf" => Ok(IndexKind::Ivf),
            other => Err(Error::InvalidArgument(format!(
                "unknown index kind `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnIndex {
    pub kind: IndexKind,
    pub dim: usize,
    pub ids: Vec<String>,
    /// `[n_items × dim]`, row-major.
    pub vectors: Vec<f64>,
    /// `[n_clusters × dim]`; empty for exact indexes.
    pub centroids: Vec<f64>,
    /// Row indices per cluster, ascending.
    pub assignments: Vec<Vec<u32>>,
    /// k-means inertia after every assignment step (build-time only).
    pub inertia_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub row: usize,
    pub score: f64,
}

impl AnnIndex {
    pub fn build(
        embeddings: &[(String, Embedding)],
        kind: IndexKind,
        n_clusters: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let Some((_, first)) = embeddings.first() else {
            return Err(Error::Empty("no embeddings to index".into()));
        };
        let dim = first.len();
        let mut seen = std::collections::HashSet::with_capacity(embeddings.len());
        let mut vectors = Vec::with_capacity(embeddings.len() * dim);
        for (id, e) in embeddings {
            if e.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: e.len(),
                });
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateItem(id.clone()));
            }
            vectors.extend_from_slice(e);
        }
        let mut index = AnnIndex {
            kind,
            dim,
            ids: embeddings.iter().map(|(id, _)| id.clone()).collect(),
            vectors,
            centroids: Vec::new(),
            assignments: Vec::new(),
            inertia_history: Vec::new(),
        };
        if kind == IndexKind::Ivf {
            let n = index.len();
            let k = n_clusters
                .ok_or_else(|| Error::InvalidArgument("ivf index requires n_clusters".into()))?;
            if k == 0 || k > n {
                return Err(Error::InvalidArgument(format!(
                    "n_clusters must be in 1..={n}, got {k}"
                )));
            }
            let km = kmeans(&index.vectors, dim, k, seed);
            index.centroids = km.centroids;
            index.inertia_history = km.inertia_history;
            index.assignments = vec![Vec::new(); k];
            for (row, &c) in km.labels.iter().enumerate() {
                index.assignments[c].push(row as u32);
            }
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.assignments.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.vectors[r * self.dim..(r + 1) * self.dim]
    }

    fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Top `k` rows by inner product. `nprobe` is ignored for exact indexes.
    pub fn search_rows(&self, q: &[f64], k: usize, nprobe: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if q.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: q.len(),
            });
        }
        let mut hits: Vec<Hit> = match self.kind {
            IndexKind::Exact => (0..self.len())
                .map(|row| Hit {
                    row,
                    score: dot(q, self.row(row)),
                })
                .collect(),
            IndexKind::Ivf => {
                let nc = self.n_clusters();
                if nprobe == 0 || nprobe > nc {
                    return Err(Error::InvalidArgument(format!(
                        "nprobe must be in 1..={nc}, got {nprobe}"
                    )));
                }
                let mut order: Vec<(usize, f64)> =
                    (0..nc).map(|c| (c, dot(q, self.centroid(c)))).collect();
                order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                order[..nprobe]
                    .iter()
                    .flat_map(|&(c, _)| self.assignments[c].iter())
                    .map(|&r| Hit {
                        row: r as usize,
                        score: dot(q, self.row(r as usize)),
                    })
                    .collect()
            }
        };
        let ids = &self.ids;
        let cmp = |a: &Hit, b: &Hit| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| ids[a.row].cmp(&ids[b.row]))
        };
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_by(cmp);
        Ok(hits)
    }

    pub fn search(&self, q: &[f64], k: usize, nprobe: usize) -> Result<Vec<(String, f64)>> {
        Ok(self
            .search_rows(q, k, nprobe)?
            .into_iter()
            .map(|h| (self.ids[h.row].clone(), h.score))
            .collect())
    }

    /// Probe count that scans every cluster (1 for exact indexes).
    pub fn full_probe(&self) -> usize {
        self.n_clusters().max(1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&ANN_MAGIC);
        b.extend_from_slice(&ANN_VERSION.to_le_bytes());
        b.push(match self.kind {
            IndexKind::Exact => 0,
            IndexKind::Ivf => 1,
        });
        for v in [self.len(), self.dim, self.n_clusters()] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for id in &self.ids {
            b.extend_from_slice(&(id.len() as u32).to_le_bytes());
            b.extend_from_slice(id.as_bytes());
        }
        for v in self.vectors.iter().chain(&self.centroids) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for rows in &self.assignments {
            b.extend_from_slice(&(rows.len() as u64).to_le_bytes());
            for r in rows {
                b.extend_from_slice(&r.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic: [u8; 8] = take(&mut r)?;
        if magic != ANN_MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != ANN_VERSION {
            return Err(Error::Format(format!(
                "unsupported index version {version}"
            )));
        }
        let kind = match take::<1>(&mut r)?[0] {
            0 => IndexKind::Exact,
            1 => IndexKind::Ivf,
            k => return Err(Error::Format(format!("unknown index kind {k}"))),
        };
        let n = take_usize(&mut r)?;
        let dim = take_usize(&mut r)?;
        let nc = take_usize(&mut r)?;
        if (kind == IndexKind::Exact) != (nc == 0) || nc > n {
            return Err(Error::Format("cluster count inconsistent with kind".into()));
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(take(&mut r)?) as usize;
            if r.len() < len {
                return Err(Error::Format("truncated id".into()));
            }
            let (s, rest) = r.split_at(len);
            ids.push(
                String::from_utf8(s.to_vec()).map_err(|_| Error::Format("id not utf-8".into()))?,
            );
            r = rest;
        }
        let mut floats = |count: usize| -> Result<Vec<f64>> {
            (0..count)
                .map(|_| take::<8>(&mut r).map(f64::from_le_bytes))
                .collect()
        };
        let vectors = floats(n * dim)?;
        let centroids = floats(nc * dim)?;
        let mut assignments = Vec::with_capacity(nc);
        let mut assigned = 0usize;
        for _ in 0..nc {
            let count = take_usize(&mut r)?;
            let rows = (0..count)
                .map(|_| take::<4>(&mut r).map(u32::from_le_bytes))
                .collect::<Result<Vec<u32>>>()?;
            if rows.iter().any(|&x| x as usize >= n) {
                return Err(Error::Format("assignment row out of range".into()));
            }
            assigned += rows.len();
            assignments.push(rows);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        if kind == IndexKind::Ivf && assigned != n {
            return Err(Error::Format("every row must belong to one cluster".into()));
        }
        Ok(AnnIndex {
            kind,
            dim,
            ids,
            vectors,
            centroids,
            assignments,
            inertia_history: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut a = [0u8; N];
    r.read_exact(&mut a)
        .map_err(|_| Error::Format("truncated index file".into()))?;
    Ok(a)
}

fn take_usize(r: &mut &[u8]) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(take(r)?)).map_err(|_| Error::Format("size overflow".into()))
}

/// Order-preserving filter keeping hits with `score >= min_score` whose
/// item passes `in_stock`.
pub fn filter_results(
    results: Vec<(String, f64)>,
    min_score: f64,
    in_stock: impl Fn(&str) -> bool,
) -> Vec<(String, f64)> {
    results
        .into_iter()
        .filter(|(id, s)| *s >= min_score && in_stock(id))
        .collect()
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Stops after
/// [`KMEANS_MAX_ITERS`] assignment steps or when inertia changes by less
/// than [`KMEANS_REL_TOL`] relative. Empty clusters keep their centroid.
pub fn kmeans(data: &[f64], dim: usize, k: usize, seed: u64) -> KMeans {
    let n = data.len() / dim;
    assert!(k >= 1 && k <= n, "k must be in 1..=n");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = row(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive mass"))
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[pick] = true;
        centroids.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(pick)));
        }
    }

    let mut labels = vec![0usize; n];
    let mut history: Vec<f64> = Vec::new();
    for iter in 0..KMEANS_MAX_ITERS {
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(row(i), &centroids, dim))
            .collect();
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }
        let converged = history.last().is_some_and(|&prev: &f64| {
            prev == inertia || (prev - inertia).abs() <= KMEANS_REL_TOL * prev.abs()
        });
        history.push(inertia);
        if converged || iter + 1 == KMEANS_MAX_ITERS {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    KMeans {
        centroids,
        labels,
        inertia_history: history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, dim: usize, seed: u64) -> Vec<(String, Embedding)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                (
                    format!("i{i:04}"),
                    Embedding((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                )
            })
            .collect()
    }

    #[test]
    fn one_cluster_per_item() {
        let data = grid(20, 3, 1);
        let idx = AnnIndex::build(&data, IndexKind::Ivf, Some(20), 5).unwrap();
        for (c, rows) in idx.assignments.iter().enumerate() {
            assert_eq!(rows.len(), 1);
            assert_eq!(idx.centroid(c), idx.row(rows[0] as usize));
        }
    }

    #[test]
    fn single_cluster_matches_exact() {
        let data = grid(50, 4, 2);
        let ivf = AnnIndex::build(&data, IndexKind::Ivf, Some(1), 5).unwrap();
        let exact = AnnIndex::build(&data, IndexKind::Exact, None, 5).unwrap();
        assert_eq!(ivf.assignments[0].len(), 50);
        let q = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(
            ivf.search(&q, 10, 1).unwrap(),
            exact.search(&q, 10, 1).unwrap()
        );
    }

    #[test]
    fn build_errors() {
        let mut data = grid(3, 2, 3);
        assert!(AnnIndex::build(&data, IndexKind::Ivf, Some(4), 0).is_err());
        assert!(AnnIndex::build(&data, IndexKind::Ivf, Some(0), 0).is_err());
        data[1].0 = data[0].0.clone();
        assert!(matches!(
            AnnIndex::build(&data, IndexKind::Exact, None, 0),
            Err(Error::DuplicateItem(_))
        ));
        let mut ragged = grid(3, 2, 3);
        ragged[2].1 .0.push(1.0);
        assert!(matches!(
            AnnIndex::build(&ragged, IndexKind::Exact, None, 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn search_errors() {
        let idx = AnnIndex::build(&grid(10, 2, 4), IndexKind::Ivf, Some(3), 0).unwrap();
        assert!(idx.search(&[1.0, 0.0], 0, 1).is_err());
        assert!(idx.search(&[1.0, 0.0], 3, 4).is_err());
        assert!(idx.search(&[1.0], 3, 1).is_err());
    }

    #[test]
    fn filter_cases() {
        let r = vec![
            ("a".to_string(), 0.9),
            ("b".to_string(), 0.4),
            ("c".to_string(), 0.7),
        ];
        assert_eq!(filter_results(r.clone(), f64::NEG_INFINITY, |_| true), r);
        assert!(filter_results(r.clone(), f64::NEG_INFINITY, |_| false).is_empty());
        let kept = filter_results(r, 0.5, |id| id != "c");
        assert_eq!(kept, vec![("a".to_string(), 0.9)]);
    }

    #[test]
    fn serialization_roundtrip() {
        let idx = AnnIndex::build(&grid(30, 3, 6), IndexKind::Ivf, Some(4), 9).unwrap();
        let bytes = idx.to_bytes();
        let back = AnnIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(AnnIndex::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
