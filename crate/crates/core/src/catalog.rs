//! Item catalog, canonical taxonomy, engagement logs and customer contexts.
//!
//! The catalog is immutable once loaded. Items are addressed internally by
//! [`ItemIdx`] (position in load order) and taxonomy nodes by [`NodeIdx`];
//! every bucket is kept sorted by item id so that seeded samplers draw the
//! same sequence regardless of how the catalog file was produced.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the distinguished root node every depth-1 category hangs from.
pub const ROOT: &str = "__root__";

/// Default purchase-history window length.
pub const DEFAULT_HISTORY_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemIdx(pub u32);

impl ItemIdx {
    pub fn get(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeIdx(pub u32);

impl NodeIdx {
    pub const ROOT: NodeIdx = NodeIdx(0);

    pub fn get(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub brand: String,
    pub attributes: Vec<(String, String)>,
    pub taxonomy_path: Vec<String>,
}

impl Item {
    /// Title, brand and attribute values lowercased and joined by single
    /// spaces. Empty pieces are skipped.
    pub fn folded_text(&self) -> String {
        let mut parts: Vec<&str> = vec![self.title.trim()];
        if !self.brand.trim().is_empty() {
            parts.push(self.brand.trim());
        }
        for (_, v) in &self.attributes {
            if !v.trim().is_empty() {
                parts.push(v.trim());
            }
        }
        parts.join(" ").to_lowercase()
    }

    pub fn leaf(&self) -> &str {
        self.taxonomy_path
            .last()
            .map(String::as_str)
            .unwrap_or(ROOT)
    }
}

/// How far up the taxonomy the negative-sampling scope reaches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeLevel {
    #[default]
    Parent,
    Grandparent,
}

impl ScopeLevel {
    fn levels(self) -> usize {
        match self {
            ScopeLevel::Parent => 1,
            ScopeLevel::Grandparent => 2,
        }
    }
}

impl std::str::FromStr for ScopeLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parent" => Ok(ScopeLevel::Parent),
            "grandparent" => Ok(ScopeLevel::Grandparent),
            other => Err(Error::InvalidArgument(format!(
                "unknown scope level `{other}`"
            ))),
        }
    }
}

/// Category hierarchy with precomputed descendant-item buckets.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, NodeIdx>,
    parent: Vec<NodeIdx>,
    children: Vec<Vec<NodeIdx>>,
    /// Buckets stored back to back; node `n` owns
    /// `bucket_items[bucket_start[n]..bucket_start[n + 1]]`.
    bucket_start: Vec<u32>,
    bucket_items: Vec<ItemIdx>,
    item_leaf: Vec<NodeIdx>,
}

impl Taxonomy {
    /// Builds the hierarchy from item paths. A category id seen under two
    /// different parents is rejected; `line_of` maps an item position to a
    /// source line for error messages.
    fn build(items: &[Item], line_of: impl Fn(usize) -> usize, file: &str) -> Result<Self> {
        let mut tax = Taxonomy {
            names: vec![ROOT.to_owned()],
            index: HashMap::from([(ROOT.to_owned(), NodeIdx::ROOT)]),
            parent: vec![NodeIdx::ROOT],
            children: vec![Vec::new()],
            bucket_start: Vec::new(),
            bucket_items: Vec::new(),
            item_leaf: Vec::with_capacity(items.len()),
        };

        for (pos, item) in items.iter().enumerate() {
            let mut up = NodeIdx::ROOT;
            for cat in &item.taxonomy_path {
                let node = match tax.index.get(cat) {
                    Some(&n) => {
                        if tax.parent[n.get()] != up {
                            return Err(Error::Parse {
                                file: file.to_owned(),
                                line: line_of(pos),
                                msg: format!(
                                    "category `{cat}` appears under both `{}` and `{}`",
                                    tax.names[tax.parent[n.get()].get()],
                                    tax.names[up.get()]
                                ),
                            });
                        }
                        n
                    }
                    None => {
                        let n = NodeIdx(tax.names.len() as u32);
                        tax.names.push(cat.clone());
                        tax.index.insert(cat.clone(), n);
                        tax.parent.push(up);
                        tax.children.push(Vec::new());
                        tax.children[up.get()].push(n);
                        n
                    }
                };
                up = node;
            }
            tax.item_leaf.push(up);
        }

        // Each item lands in the bucket of its leaf and of every ancestor,
        // root included. Paths are single chains so no duplicates arise.
        let mut buckets: Vec<Vec<ItemIdx>> = vec![Vec::new(); tax.names.len()];
        for (pos, &leaf) in tax.item_leaf.iter().enumerate() {
            let idx = ItemIdx(pos as u32);
            let mut node = leaf;
            loop {
                buckets[node.get()].push(idx);
                if node == NodeIdx::ROOT {
                    break;
                }
                node = tax.parent[node.get()];
            }
        }
        tax.bucket_start.reserve(buckets.len() + 1);
        tax.bucket_start.push(0);
        for mut b in buckets {
            b.sort_by(|a, c| items[a.get()].item_id.cmp(&items[c.get()].item_id));
            tax.bucket_items.extend(b);
            tax.bucket_start.push(tax.bucket_items.len() as u32);
        }
        for ch in &mut tax.children {
            ch.sort_by(|a, c| tax.names[a.get()].cmp(&tax.names[c.get()]));
        }
        Ok(tax)
    }

    pub fn node(&self, name: &str) -> Option<NodeIdx> {
        self.index.get(name).copied()
    }

    pub fn name(&self, node: NodeIdx) -> &str {
        &self.names[node.get()]
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    /// Parent of `node`; the root is its own parent.
    pub fn parent(&self, node: NodeIdx) -> NodeIdx {
        self.parent[node.get()]
    }

    pub fn children(&self, node: NodeIdx) -> &[NodeIdx] {
        &self.children[node.get()]
    }

    /// Items whose leaf is `node` or one of its descendants, sorted by id.
    pub fn bucket(&self, node: NodeIdx) -> &[ItemIdx] {
        let n = node.get();
        &self.bucket_items[self.bucket_start[n] as usize..self.bucket_start[n + 1] as usize]
    }

    pub fn leaf_of(&self, item: ItemIdx) -> NodeIdx {
        self.item_leaf[item.get()]
    }

    /// Walks `levels` steps up from `node`, stopping at the root.
    pub fn ancestor(&self, mut node: NodeIdx, levels: usize) -> NodeIdx {
        for _ in 0..levels {
            node = self.parent(node);
        }
        node
    }

    /// Depth of `node` below the root (root = 0).
    pub fn depth(&self, mut node: NodeIdx) -> usize {
        let mut d = 0;
        while node != NodeIdx::ROOT {
            node = self.parent(node);
            d += 1;
        }
        d
    }
}

/// Non-fatal observations made while loading a catalog.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Items that listed more than one taxonomy path and were reduced to
    /// the first.
    pub multi_path_items: Vec<String>,
    /// Items whose leaf sits directly under the root, so their parent scope
    /// is the whole catalog.
    pub depth_one_items: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    items: Vec<Item>,
    by_id: HashMap<String, ItemIdx>,
    taxonomy: Taxonomy,
    report: LoadReport,
}

#[derive(Deserialize)]
struct RawItem {
    item_id: String,
    title: String,
    #[serde(default)]
    brand: String,
    #[serde(default)]
    attributes: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    taxonomy_path: Option<Vec<String>>,
    #[serde(default)]
    taxonomy_paths: Option<Vec<Vec<String>>>,
}

#[derive(Serialize)]
struct ItemRecord<'a> {
    item_id: &'a str,
    title: &'a str,
    brand: &'a str,
    attributes: serde_json::Map<String, serde_json::Value>,
    taxonomy_path: &'a [String],
}

fn value_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Null => String::new(),
        other => other.to_string(),
    }
}

impl Catalog {
    /// Builds a catalog from already-canonical items.
    pub fn from_items(items: Vec<Item>) -> Result<Self> {
        Self::assemble(items, LoadReport::default(), |p| p + 1, "<memory>")
    }

    fn assemble(
        items: Vec<Item>,
        mut report: LoadReport,
        line_of: impl Fn(usize) -> usize,
        file: &str,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty(format!("catalog {file} has no items")));
        }
        let mut by_id = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if item.title.trim().is_empty() {
                return Err(Error::Parse {
                    file: file.to_owned(),
                    line: line_of(pos),
                    msg: format!("item `{}` has an empty title", item.item_id),
                });
            }
            if item.taxonomy_path.is_empty() {
                return Err(Error::Parse {
                    file: file.to_owned(),
                    line: line_of(pos),
                    msg: format!("item `{}` has no taxonomy path", item.item_id),
                });
            }
            if let Some(bad) = item
                .taxonomy_path
                .iter()
                .find(|c| c.trim().is_empty() || c.as_str() == ROOT)
            {
                return Err(Error::Parse {
                    file: file.to_owned(),
                    line: line_of(pos),
                    msg: format!("item `{}` has invalid category id `{bad}`", item.item_id),
                });
            }
            if by_id
                .insert(item.item_id.clone(), ItemIdx(pos as u32))
                .is_some()
            {
                return Err(Error::DuplicateItem(item.item_id.clone()));
            }
        }
        let taxonomy = Taxonomy::build(&items, line_of, file)?;
        report.depth_one_items = items
            .iter()
            .filter(|i| i.taxonomy_path.len() == 1)
            .map(|i| i.item_id.clone())
            .collect();
        Ok(Catalog {
            items,
            by_id,
            taxonomy,
            report,
        })
    }

    /// Loads a JSONL catalog. Items listing several taxonomy paths keep only
    /// the first one (`taxonomy_path` first, then `taxonomy_paths` in order).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file_name = path.display().to_string();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut items = Vec::new();
        let mut lines = Vec::new();
        let mut report = LoadReport::default();

        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
                file: file_name.clone(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            let mut paths: Vec<Vec<String>> = Vec::new();
            paths.extend(raw.taxonomy_path);
            paths.extend(raw.taxonomy_paths.unwrap_or_default());
            paths.retain(|p| !p.is_empty());
            let Some(first) = paths.first().cloned() else {
                return Err(Error::Parse {
                    file: file_name.clone(),
                    line: n + 1,
                    msg: format!("item `{}` has no taxonomy path", raw.item_id),
                });
            };
            if paths.iter().any(|p| *p != first) {
                report.multi_path_items.push(raw.item_id.clone());
            }
            items.push(Item {
                item_id: raw.item_id,
                title: raw.title,
                brand: raw.brand,
                attributes: raw
                    .attributes
                    .iter()
                    .map(|(k, v)| (k.clone(), value_text(v)))
                    .collect(),
                taxonomy_path: first,
            });
            lines.push(n + 1);
        }
        Self::assemble(items, report, |p| lines[p], &file_name)
    }

    /// One JSONL line per item in the catalog file format.
    pub fn to_jsonl_line(item: &Item) -> String {
        let rec = ItemRecord {
            item_id: &item.item_id,
            title: &item.title,
            brand: &item.brand,
            attributes: item
                .attributes
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
            taxonomy_path: &item.taxonomy_path,
        };
        serde_json::to_string(&rec).expect("item record serializes")
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, idx: ItemIdx) -> &Item {
        &self.items[idx.get()]
    }

    pub fn idx(&self, item_id: &str) -> Option<ItemIdx> {
        self.by_id.get(item_id).copied()
    }

    pub fn resolve(&self, item_id: &str) -> Result<ItemIdx> {
        self.idx(item_id)
            .ok_or_else(|| Error::UnknownItem(item_id.to_owned()))
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.idx(item_id).map(|i| self.item(i))
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    fn leaf_node(&self, item: &Item) -> Result<NodeIdx> {
        self.taxonomy
            .node(item.leaf())
            .ok_or_else(|| Error::UnknownCategory(item.leaf().to_owned()))
    }

    /// Category id of the parent of `item`'s leaf; the root sentinel for
    /// depth-1 items.
    pub fn parent_category(&self, item: &Item) -> Result<&str> {
        let leaf = self.leaf_node(item)?;
        Ok(self.taxonomy.name(self.taxonomy.parent(leaf)))
    }

    /// Every item under the parent of `item`'s leaf, the item itself
    /// included, sorted by id.
    pub fn candidate_siblings(&self, item: &Item) -> Result<Vec<&str>> {
        let leaf = self.leaf_node(item)?;
        let scope = self.taxonomy.parent(leaf);
        Ok(self
            .taxonomy
            .bucket(scope)
            .iter()
            .map(|&i| self.item(i).item_id.as_str())
            .collect())
    }

    /// Bucket of the scope node `level` steps above the item's leaf.
    pub fn scope_bucket(&self, item: ItemIdx, level: ScopeLevel) -> &[ItemIdx] {
        let leaf = self.taxonomy.leaf_of(item);
        self.taxonomy
            .bucket(self.taxonomy.ancestor(leaf, level.levels()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Click,
    AddToCart,
    Purchase,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Click => "click",
            EventKind::AddToCart => "add_to_cart",
            EventKind::Purchase => "purchase",
        }
    }
}

impl std::str::FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "click" => Ok(EventKind::Click),
            "add_to_cart" => Ok(EventKind::AddToCart),
            "purchase" => Ok(EventKind::Purchase),
            other => Err(Error::InvalidArgument(format!(
                "unknown event kind `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementEvent {
    pub customer_id: String,
    pub query_text: String,
    pub item_id: String,
    pub event_kind: EventKind,
    pub timestamp: u64,
}

pub const ENGAGEMENT_HEADER: [&str; 5] = [
    "customer_id",
    "query_text",
    "item_id",
    "event_kind",
    "timestamp",
];

/// Reads the engagement TSV. A header row naming the columns is optional.
pub fn load_engagement(path: impl AsRef<Path>) -> Result<Vec<EngagementEvent>> {
    let path = path.as_ref();
    let file_name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                file: file_name.clone(),
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut events = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 1;
        if n == 0 && rec.iter().eq(ENGAGEMENT_HEADER.iter().copied()) {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            file: file_name.clone(),
            line,
            msg,
        };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 columns, found {}", rec.len())));
        }
        let event_kind = rec[3]
            .parse::<EventKind>()
            .map_err(|e| bad(e.to_string()))?;
        let timestamp = rec[4]
            .trim()
            .parse::<u64>()
            .map_err(|e| bad(format!("bad timestamp `{}`: {e}", &rec[4])))?;
        events.push(EngagementEvent {
            customer_id: rec[0].to_owned(),
            query_text: rec[1].to_owned(),
            item_id: rec[2].to_owned(),
            event_kind,
            timestamp,
        });
    }
    Ok(events)
}

pub fn write_engagement(path: impl AsRef<Path>, events: &[EngagementEvent]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)
        .map_err(Error::Csv)?;
    w.write_record(ENGAGEMENT_HEADER)?;
    for e in events {
        w.write_record([
            e.customer_id.as_str(),
            e.query_text.as_str(),
            e.item_id.as_str(),
            e.event_kind.as_str(),
            &e.timestamp.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub click: u64,
    pub add_to_cart: u64,
    pub purchase: u64,
}

impl EventCounts {
    fn bump(&mut self, kind: EventKind) {
        match kind {
            EventKind::Click => self.click += 1,
            EventKind::AddToCart => self.add_to_cart += 1,
            EventKind::Purchase => self.purchase += 1,
        }
    }
}

/// Engagement grouped by `(query_text, customer_id)` and item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub cells: BTreeMap<(String, String), BTreeMap<String, EventCounts>>,
    /// Global purchase distribution per query, over all customers.
    pub query_purchases: BTreeMap<String, BTreeMap<String, u64>>,
    /// Number of resolved events per query.
    pub query_frequency: BTreeMap<String, u64>,
    pub counted: usize,
    pub skipped: usize,
}

impl Aggregation {
    /// Items purchased for `query` by anyone.
    pub fn query_positives(&self, query: &str) -> BTreeSet<String> {
        self.query_purchases
            .get(query)
            .map(|m| {
                m.iter()
                    .filter(|(_, &c)| c > 0)
                    .map(|(k, _)| k.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Items purchased for `query` by `customer`.
    pub fn customer_positives(&self, query: &str, customer: &str) -> BTreeSet<String> {
        self.cells
            .get(&(query.to_owned(), customer.to_owned()))
            .map(|m| {
                m.iter()
                    .filter(|(_, c)| c.purchase > 0)
                    .map(|(k, _)| k.clone())
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Groups events by query and customer. Events naming an item missing from
/// the catalog are dropped and tallied in `skipped`.
pub fn aggregate_engagement(catalog: &Catalog, events: &[EngagementEvent]) -> Aggregation {
    let mut agg = Aggregation::default();
    for e in events {
        if catalog.idx(&e.item_id).is_none() {
            agg.skipped += 1;
            continue;
        }
        agg.counted += 1;
        agg.cells
            .entry((e.query_text.clone(), e.customer_id.clone()))
            .or_default()
            .entry(e.item_id.clone())
            .or_default()
            .bump(e.event_kind);
        *agg.query_frequency.entry(e.query_text.clone()).or_default() += 1;
        if e.event_kind == EventKind::Purchase {
            *agg.query_purchases
                .entry(e.query_text.clone())
                .or_default()
                .entry(e.item_id.clone())
                .or_default() += 1;
        }
    }
    agg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomerContext {
    pub customer_id: String,
    pub profile_features: Vec<f64>,
    /// Most recent purchase last.
    pub purchase_history: Vec<String>,
}

/// Reads the customer JSONL file. Feature vectors must have exactly
/// `feature_dim` entries; histories keep their last `window` items.
pub fn load_customers(
    path: impl AsRef<Path>,
    feature_dim: usize,
    window: usize,
) -> Result<BTreeMap<String, CustomerContext>> {
    let path = path.as_ref();
    let file_name = path.display().to_string();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            file: file_name.clone(),
            line: n + 1,
            msg,
        };
        let mut ctx: CustomerContext =
            serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if ctx.profile_features.len() != feature_dim {
            return Err(bad(format!(
                "customer `{}` has {} profile features, expected {feature_dim}",
                ctx.customer_id,
                ctx.profile_features.len()
            )));
        }
        if ctx.profile_features.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!(
                "customer `{}` has non-finite features",
                ctx.customer_id
            )));
        }
        if ctx.purchase_history.len() > window {
            let cut = ctx.purchase_history.len() - window;
            ctx.purchase_history.drain(..cut);
        }
        if out.insert(ctx.customer_id.clone(), ctx).is_some() {
            return Err(bad("duplicate customer id".into()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn item(id: &str, path: &[&str]) -> Item {
        Item {
            item_id: id.into(),
            title: format!("title {id}"),
            brand: String::new(),
            attributes: vec![],
            taxonomy_path: path.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn shared_leaf_bucket() {
        let f = write_tmp(&[
            r#"{"item_id":"a","title":"A","brand":"","attributes":{},"taxonomy_path":["home","flooring","carpet"]}"#,
            r#"{"item_id":"b","title":"B","brand":"","attributes":{},"taxonomy_path":["home","flooring","carpet"]}"#,
            r#"{"item_id":"c","title":"C","brand":"","attributes":{},"taxonomy_path":["home","flooring","tile"]}"#,
        ]);
        let cat = Catalog::load(f.path()).unwrap();
        let tax = cat.taxonomy();
        let carpet = tax.node("carpet").unwrap();
        assert_eq!(tax.bucket(carpet).len(), 2);
        assert_eq!(tax.bucket(tax.node("flooring").unwrap()).len(), 3);
        assert_eq!(tax.bucket(NodeIdx::ROOT).len(), 3);
    }

    #[test]
    fn multi_path_item_keeps_first() {
        let f = write_tmp(&[
            r#"{"item_id":"a","title":"A","taxonomy_paths":[["tools","drills"],["outdoor","garden"]]}"#,
        ]);
        let cat = Catalog::load(f.path()).unwrap();
        assert_eq!(cat.items()[0].taxonomy_path, vec!["tools", "drills"]);
        assert_eq!(cat.report().multi_path_items, vec!["a"]);
        assert!(cat.taxonomy().node("garden").is_none());
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write_tmp(&[
            r#"{"item_id":"dup","title":"A","taxonomy_path":["x"]}"#,
            r#"{"item_id":"dup","title":"B","taxonomy_path":["y"]}"#,
        ]);
        match Catalog::load(f.path()) {
            Err(Error::DuplicateItem(id)) => assert_eq!(id, "dup"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp(&[
            r#"{"item_id":"a","title":"A","taxonomy_path":["x"]}"#,
            r#"{"item_id": nope"#,
        ]);
        match Catalog::load(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_rejected() {
        let f = write_tmp(&[]);
        assert!(matches!(Catalog::load(f.path()), Err(Error::Empty(_))));
    }

    #[test]
    fn blank_title_rejected() {
        let f = write_tmp(&[r#"{"item_id":"a","title":"   ","taxonomy_path":["x"]}"#]);
        assert!(matches!(
            Catalog::load(f.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn category_under_two_parents_rejected() {
        let items = vec![
            item("a", &["home", "flooring"]),
            item("b", &["outdoor", "flooring"]),
        ];
        assert!(Catalog::from_items(items).is_err());
    }

    #[test]
    fn parent_category_cases() {
        let cat = Catalog::from_items(vec![
            item("c1", &["home", "flooring", "carpet"]),
            item("t1", &["tools"]),
        ])
        .unwrap();
        assert_eq!(cat.parent_category(&cat.items()[0]).unwrap(), "flooring");
        assert_eq!(cat.parent_category(&cat.items()[1]).unwrap(), ROOT);
        assert_eq!(cat.report().depth_one_items, vec!["t1"]);

        let stranger = item("zz", &["nowhere"]);
        assert!(matches!(
            cat.parent_category(&stranger),
            Err(Error::UnknownCategory(_))
        ));
    }

    #[test]
    fn candidate_siblings_cases() {
        let cat = Catalog::from_items(vec![
            item("h2", &["home", "flooring", "hardwood"]),
            item("c1", &["home", "flooring", "carpet"]),
            item("h1", &["home", "flooring", "hardwood"]),
            item("c2", &["home", "flooring", "carpet"]),
            item("lamp", &["home", "lighting", "lamps"]),
        ])
        .unwrap();
        let c1 = cat.get("c1").unwrap();
        assert_eq!(
            cat.candidate_siblings(c1).unwrap(),
            vec!["c1", "c2", "h1", "h2"]
        );
        let lamp = cat.get("lamp").unwrap();
        assert_eq!(cat.candidate_siblings(lamp).unwrap(), vec!["lamp"]);
    }

    #[test]
    fn folded_text_joins_lowercased_metadata() {
        let mut it = item("x", &["a"]);
        it.title = "Cordless Drill".into();
        it.brand = "Acme".into();
        it.attributes = vec![("color".into(), "Red".into()), ("size".into(), "".into())];
        assert_eq!(it.folded_text(), "cordless drill acme red");
        let mut bare = item("y", &["a"]);
        bare.title = "Cordless Drill".into();
        assert_eq!(bare.folded_text(), "cordless drill");
    }

    #[test]
    fn aggregation_counts_and_skips() {
        let cat = Catalog::from_items(vec![item("a", &["x"]), item("b", &["x"])]).unwrap();
        let ev = |c: &str, q: &str, i: &str, k: EventKind| EngagementEvent {
            customer_id: c.into(),
            query_text: q.into(),
            item_id: i.into(),
            event_kind: k,
            timestamp: 1,
        };
        let events = vec![
            ev("u1", "drill", "a", EventKind::Purchase),
            ev("u1", "drill", "a", EventKind::Purchase),
            ev("u1", "lamp", "b", EventKind::Click),
            ev("u2", "drill", "missing", EventKind::Purchase),
        ];
        let agg = aggregate_engagement(&cat, &events);
        assert_eq!(agg.counted, 3);
        assert_eq!(agg.skipped, 1);
        let cell = &agg.cells[&("drill".to_string(), "u1".to_string())];
        assert_eq!(cell["a"].purchase, 2);
        assert!(agg.query_positives("lamp").is_empty());
        assert_eq!(agg.customer_positives("drill", "u1").len(), 1);
    }

    #[test]
    fn customers_truncate_history_and_check_dims() {
        let f = write_tmp(&[
            r#"{"customer_id":"u1","profile_features":[0.1,0.2],"purchase_history":["a","b","c"]}"#,
        ]);
        let c = load_customers(f.path(), 2, 2).unwrap();
        assert_eq!(c["u1"].purchase_history, vec!["b", "c"]);
        assert!(load_customers(f.path(), 3, 2).is_err());
    }

    #[test]
    fn engagement_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        let events = vec![EngagementEvent {
            customer_id: "u1".into(),
            query_text: "red drill".into(),
            item_id: "a".into(),
            event_kind: EventKind::AddToCart,
            timestamp: 42,
        }];
        write_engagement(&p, &events).unwrap();
        assert_eq!(load_engagement(&p).unwrap(), events);
    }
}
