//! Two-tower encoder: hashed-token embeddings, mean pooling and one
//! `tanh(x·W + b)` projection per tower, plus an optional fusion layer that
//! combines the query vector with customer features and pooled purchase
//! history.

use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CustomerContext, Item};
use crate::error::{Error, Result};
use crate::text::tokenize_and_hash;

pub const PARAMS_MAGIC: [u8; 8] = *b"TXNGPRM\0";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_buckets: usize,
    pub d_tok: usize,
    pub d: usize,
    pub d_cust: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab_buckets: 1 << 16,
            d_tok: 64,
            d: 64,
            d_cust: 8,
        }
    }
}

impl ModelDims {
    pub fn fusion_in(&self) -> usize {
        2 * self.d + self.d_cust
    }
}

/// Affine layer `y = x·W + b` with `W` stored row-major as `[inputs × outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Pre-activation `x·W + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (yj, &w) in y.iter_mut().zip(row) {
                *yj += xi * w;
            }
        }
        y
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.affine(x);
        y.iter_mut().for_each(|v| *v = v.tanh());
        y
    }

    fn is_consistent(&self) -> bool {
        self.weight.len() == self.inputs * self.outputs && self.bias.len() == self.outputs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tower {
    Query,
    Item,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// All learnable tensors of both towers and the fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Whether the fusion layer is part of the model. Non-personalized
    /// models ignore customer context entirely.
    pub personalized: bool,
    /// `[vocab_buckets × d_tok]`, row-major.
    pub token_embeddings: Vec<f64>,
    pub query_proj: Dense,
    pub item_proj: Dense,
    pub fusion: Dense,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, personalized: bool) -> Self {
        ModelParams {
            dims,
            personalized,
            token_embeddings: vec![0.0; dims.vocab_buckets * dims.d_tok],
            query_proj: Dense::zeros(dims.d_tok, dims.d),
            item_proj: Dense::zeros(dims.d_tok, dims.d),
            fusion: Dense::zeros(dims.fusion_in(), dims.d),
        }
    }

    /// Seeded init: every weight uniform in ±1/√d_tok, biases zero.
    pub fn init(dims: ModelDims, personalized: bool, seed: u64) -> Result<Self> {
        if dims.vocab_buckets == 0 || dims.d_tok == 0 || dims.d == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid model dims {dims:?}"
            )));
        }
        let mut p = Self::zeros(dims, personalized);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dims.d_tok as f64).sqrt();
        for w in p
            .token_embeddings
            .iter_mut()
            .chain(p.query_proj.weight.iter_mut())
            .chain(p.item_proj.weight.iter_mut())
            .chain(p.fusion.weight.iter_mut())
        {
            *w = rng.gen_range(-bound..bound);
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let shape_err = |what: &str| Error::InvalidArgument(format!("inconsistent {what} shape"));
        if d.vocab_buckets == 0 || d.d_tok == 0 || d.d == 0 {
            return Err(Error::InvalidArgument(format!("invalid model dims {d:?}")));
        }
        if self.token_embeddings.len() != d.vocab_buckets * d.d_tok {
            return Err(shape_err("token embedding"));
        }
        for (name, layer, i, o) in [
            ("query projection", &self.query_proj, d.d_tok, d.d),
            ("item projection", &self.item_proj, d.d_tok, d.d),
            ("fusion", &self.fusion, d.fusion_in(), d.d),
        ] {
            if layer.inputs != i || layer.outputs != o || !layer.is_consistent() {
                return Err(shape_err(name));
            }
        }
        if !self.iter_values().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn tower(&self, tower: Tower) -> &Dense {
        match tower {
            Tower::Query => &self.query_proj,
            Tower::Item => &self.item_proj,
        }
    }

    pub fn token_row(&self, bucket: usize) -> &[f64] {
        let dt = self.dims.d_tok;
        &self.token_embeddings[bucket * dt..(bucket + 1) * dt]
    }

    /// All parameters in serialization order.
    pub fn iter_values(&self) -> impl Iterator<Item = &f64> {
        self.token_embeddings
            .iter()
            .chain(&self.query_proj.weight)
            .chain(&self.query_proj.bias)
            .chain(&self.item_proj.weight)
            .chain(&self.item_proj.bias)
            .chain(&self.fusion.weight)
            .chain(&self.fusion.bias)
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.token_embeddings
            .iter_mut()
            .chain(&mut self.query_proj.weight)
            .chain(&mut self.query_proj.bias)
            .chain(&mut self.item_proj.weight)
            .chain(&mut self.item_proj.bias)
            .chain(&mut self.fusion.weight)
            .chain(&mut self.fusion.bias)
    }

    /// Mean of the token rows of `text` (zero vector for no tokens).
    pub fn pool(&self, text: &str) -> Vec<f64> {
        self.pool_tokens(&tokenize_and_hash(text, self.dims.vocab_buckets))
    }

    pub fn pool_tokens(&self, tokens: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dims.d_tok];
        if tokens.is_empty() {
            return acc;
        }
        for &t in tokens {
            for (a, &v) in acc.iter_mut().zip(self.token_row(t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn encode_text(&self, tower: Tower, text: &str) -> Embedding {
        Embedding(self.tower(tower).forward(&self.pool(text)))
    }

    pub fn encode_item(&self, item: &Item) -> Embedding {
        self.encode_text(Tower::Item, &item.folded_text())
    }

    /// Query-side embedding. Personalized models fuse the query vector with
    /// the customer's profile features and the mean embedding of their
    /// purchase history; a missing context contributes zero vectors.
    /// History ids absent from the catalog are skipped and counted.
    pub fn encode_query(
        &self,
        query_text: &str,
        context: Option<&CustomerContext>,
        catalog: &Catalog,
    ) -> Result<QueryEncoding> {
        let q = self.encode_text(Tower::Query, query_text);
        if !self.personalized {
            return Ok(QueryEncoding {
                embedding: q,
                skipped_history: 0,
            });
        }
        let d = self.dims.d;
        let mut features = vec![0.0; self.dims.d_cust];
        let mut history = vec![0.0; d];
        let mut skipped = 0;
        if let Some(ctx) = context {
            if ctx.profile_features.len() != self.dims.d_cust {
                return Err(Error::Dimension {
                    expected: self.dims.d_cust,
                    got: ctx.profile_features.len(),
                });
            }
            features.copy_from_slice(&ctx.profile_features);
            let mut used = 0usize;
            for id in &ctx.purchase_history {
                match catalog.get(id) {
                    Some(item) => {
                        let e = self.encode_item(item);
                        history.iter_mut().zip(e.iter()).for_each(|(h, v)| *h += v);
                        used += 1;
                    }
                    None => skipped += 1,
                }
            }
            if used > 0 {
                history.iter_mut().for_each(|h| *h /= used as f64);
            }
        }
        Ok(QueryEncoding {
            embedding: Embedding(self.fuse(&q, &features, &history)),
            skipped_history: skipped,
        })
    }

    /// `tanh(fusion · [q, c, h] + b)`.
    pub fn fuse(&self, q: &[f64], features: &[f64], history: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dims.fusion_in());
        x.extend_from_slice(q);
        x.extend_from_slice(features);
        x.extend_from_slice(history);
        self.fusion.forward(&x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(48 + 8 * self.iter_values().count());
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Little-endian: magic, version (u32), personalized flag (u8), then
    /// vocab_buckets, d_tok, d, d_cust as u64, then every tensor row-major
    /// as f64 in [`ModelParams::iter_values`] order.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&PARAMS_MAGIC)?;
        w.write_all(&PARAMS_VERSION.to_le_bytes())?;
        w.write_all(&[u8::from(self.personalized)])?;
        for v in [
            self.dims.vocab_buckets,
            self.dims.d_tok,
            self.dims.d,
            self.dims.d_cust,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.iter_values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if magic != PARAMS_MAGIC {
            return Err(Error::Format("bad params magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!(
                "unsupported params version {version}"
            )));
        }
        let [flag] = read_array::<1>(&mut r)?;
        if flag > 1 {
            return Err(Error::Format(format!("bad personalization flag {flag}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(u64::from_le_bytes(read_array(&mut r)?))
                .map_err(|_| Error::Format("dimension overflow".into()))?;
        }
        let dims = ModelDims {
            vocab_buckets: dims[0],
            d_tok: dims[1],
            d: dims[2],
            d_cust: dims[3],
        };
        if dims.vocab_buckets == 0 || dims.d_tok == 0 || dims.d == 0 {
            return Err(Error::Format(format!("invalid dims {dims:?}")));
        }
        let mut p = ModelParams::zeros(dims, flag == 1);
        let expected = 8 * p.iter_values().count();
        if r.len() != expected {
            return Err(Error::Format(format!(
                "params body is {} bytes, header implies {expected}",
                r.len()
            )));
        }
        for (v, chunk) in p.iter_values_mut().zip(r.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        p.validate()?;
        Ok(p)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated header".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut a = [0u8; N];
    read_exact(r, &mut a)?;
    Ok(a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoding {
    pub embedding: Embedding,
    pub skipped_history: usize,
}

/// Inner product of two embeddings.
pub fn score(q: &[f64], i: &[f64]) -> Result<f64> {
    if q.len() != i.len() {
        return Err(Error::Dimension {
            expected: q.len(),
            got: i.len(),
        });
    }
    Ok(dot(q, i))
}

/// Sequential dot product; summation order is fixed so results are
/// bit-reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
