//! Item catalogs: loading, saving, validation and synthetic generation.
//!
//! Every index in the crate is built from a [`Catalog`]. Feature values are
//! categorical `u64`s; string values are mapped to integers by a
//! [`FeatureDictionary`] loaded from sidecar files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{l2_normalize, Matrix};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate item id {0}")]
    DuplicateItemId(u64),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid catalog spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CatalogError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureValue {
    pub feature_id: u64,
    pub value: u64,
}

impl FeatureValue {
    pub const fn new(feature_id: u64, value: u64) -> Self {
        Self { feature_id, value }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: u64,
    /// Sorted by `(feature_id, value)` and deduplicated.
    pub features: Vec<FeatureValue>,
    pub embedding: Vec<f32>,
}

impl Item {
    pub fn new(item_id: u64, mut features: Vec<FeatureValue>, embedding: Vec<f32>) -> Self {
        features.sort_unstable();
        features.dedup();
        Self {
            item_id,
            features,
            embedding,
        }
    }
}

/// Feature names and string-value encodings.
///
/// Sidecar formats (tab separated, one mapping per line):
/// - schema: `feature_id<TAB>name`
/// - values: `feature_name<TAB>string_value<TAB>integer_value`
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    pub names: BTreeMap<u64, String>,
    pub values: BTreeMap<u64, BTreeMap<String, u64>>,
}

impl FeatureDictionary {
    pub fn feature_id(&self, name: &str) -> Option<u64> {
        self.names
            .iter()
            .find_map(|(id, n)| (n == name).then_some(*id))
    }

    pub fn feature_name(&self, id: u64) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }

    pub fn value_id(&self, feature_id: u64, value: &str) -> Option<u64> {
        self.values.get(&feature_id)?.get(value).copied()
    }

    pub fn value_name(&self, feature_id: u64, value: u64) -> Option<&str> {
        self.values
            .get(&feature_id)?
            .iter()
            .find_map(|(s, v)| (*v == value).then_some(s.as_str()))
    }

    pub fn insert_feature(&mut self, id: u64, name: impl Into<String>) {
        self.names.insert(id, name.into());
    }

    pub fn insert_value(&mut self, feature_id: u64, value: impl Into<String>, id: u64) {
        self.values.entry(feature_id).or_default().insert(value.into(), id);
    }

    pub fn load_schema(&mut self, path: &Path) -> Result<()> {
        for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line.split_once('\t').ok_or_else(|| parse_err(lineno, "expected id<TAB>name"))?;
            let id = id.trim().parse().map_err(|_| parse_err(lineno, "bad feature id"))?;
            self.insert_feature(id, name.trim());
        }
        Ok(())
    }

    /// Loads the value sidecar. Feature names must already be in the schema.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(feature), Some(value), Some(id), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(parse_err(lineno, "expected feature<TAB>value<TAB>id"));
            };
            let fid = self
                .feature_id(feature.trim())
                .ok_or_else(|| parse_err(lineno, &format!("unknown feature {feature:?}")))?;
            let id = id.trim().parse().map_err(|_| parse_err(lineno, "bad value id"))?;
            self.insert_value(fid, value, id);
        }
        Ok(())
    }
}

fn parse_err(zero_based_line: usize, msg: &str) -> CatalogError {
    CatalogError::Parse {
        line: zero_based_line + 1,
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    items: Vec<Item>,
    dim: usize,
    dictionary: FeatureDictionary,
}

impl Catalog {
    /// Validates unique ids and a shared, positive embedding dimension.
    pub fn new(items: Vec<Item>, dim: usize, dictionary: FeatureDictionary) -> Result<Self> {
        if dim == 0 {
            return Err(CatalogError::InvalidSpec("dim must be at least 1".into()));
        }
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(item.item_id) {
                return Err(CatalogError::DuplicateItemId(item.item_id));
            }
            if item.embedding.len() != dim {
                return Err(CatalogError::DimMismatch {
                    expected: dim,
                    got: item.embedding.len(),
                });
            }
        }
        Ok(Self {
            items,
            dim,
            dictionary,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dictionary(&self) -> &FeatureDictionary {
        &self.dictionary
    }

    pub fn dictionary_mut(&mut self) -> &mut FeatureDictionary {
        &mut self.dictionary
    }

    pub fn embeddings(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.items.len() * self.dim);
        for it in &self.items {
            data.extend_from_slice(&it.embedding);
        }
        Matrix::from_vec(data, self.items.len(), self.dim)
    }

    /// Keeps the items for which `keep(index)` holds, preserving order.
    pub fn subset(&self, mut keep: impl FnMut(usize) -> bool) -> Catalog {
        let items = self
            .items
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, it)| it.clone())
            .collect();
        Catalog {
            items,
            dim: self.dim,
            dictionary: self.dictionary.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatalogFormat {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for CatalogFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "jsonl" | "json" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(format!("unknown catalog format {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// L2-normalize embeddings on ingest. Vectors already within 1e-6 of
    /// unit squared norm are kept as-is so that save/load is lossless.
    pub normalize: bool,
    pub dictionary: FeatureDictionary,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            dictionary: FeatureDictionary::default(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    item_id: u64,
    embedding: Vec<f32>,
    features: Vec<(u64, u64)>,
}

pub fn load_catalog(path: &Path, format: CatalogFormat, opts: LoadOptions) -> Result<Catalog> {
    read_catalog(BufReader::new(File::open(path)?), format, opts)
}

pub fn read_catalog<R: BufRead>(reader: R, format: CatalogFormat, opts: LoadOptions) -> Result<Catalog> {
    let mut items = Vec::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut item = match format {
            CatalogFormat::Jsonl => parse_json_line(&line, lineno)?,
            CatalogFormat::Tsv => parse_tsv_line(&line, lineno)?,
        };
        let expected = *dim.get_or_insert(item.embedding.len());
        if item.embedding.len() != expected {
            return Err(CatalogError::DimMismatch {
                expected,
                got: item.embedding.len(),
            });
        }
        if opts.normalize {
            normalize_unless_unit(&mut item.embedding);
        }
        items.push(item);
    }
    let dim = dim.ok_or_else(|| CatalogError::InvalidSpec("catalog has no records".into()))?;
    Catalog::new(items, dim, opts.dictionary)
}

fn normalize_unless_unit(v: &mut [f32]) {
    let sq: f64 = v.iter().map(|x| (*x as f64) * (*x as f64)).sum();
    if (sq - 1.0).abs() > 1e-6 {
        l2_normalize(v);
    }
}

fn parse_json_line(line: &str, lineno: usize) -> Result<Item> {
    let rec: JsonRecord = serde_json::from_str(line).map_err(|e| parse_err(lineno, &e.to_string()))?;
    let features = rec
        .features
        .into_iter()
        .map(|(f, v)| FeatureValue::new(f, v))
        .collect();
    Ok(Item::new(rec.item_id, features, rec.embedding))
}

fn parse_tsv_line(line: &str, lineno: usize) -> Result<Item> {
    let mut cols = line.split('\t');
    let (Some(id), Some(emb)) = (cols.next(), cols.next()) else {
        return Err(parse_err(lineno, "expected item_id<TAB>embedding<TAB>features"));
    };
    let feats = cols.next().unwrap_or("");
    if cols.next().is_some() {
        return Err(parse_err(lineno, "too many columns"));
    }
    let item_id = id.trim().parse().map_err(|_| parse_err(lineno, "bad item_id"))?;
    let embedding = emb
        .split(',')
        .map(|s| s.trim().parse::<f32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| parse_err(lineno, "bad embedding value"))?;
    let mut features = Vec::new();
    for pair in feats.split(';').filter(|p| !p.trim().is_empty()) {
        let (f, v) = pair
            .split_once(':')
            .ok_or_else(|| parse_err(lineno, "feature pair must be feature:value"))?;
        let f = f.trim().parse().map_err(|_| parse_err(lineno, "bad feature id"))?;
        let v = v.trim().parse().map_err(|_| parse_err(lineno, "bad feature value"))?;
        features.push(FeatureValue::new(f, v));
    }
    Ok(Item::new(item_id, features, embedding))
}

pub fn save_catalog(catalog: &Catalog, path: &Path, format: CatalogFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_catalog(catalog, &mut w, format)?;
    w.flush()?;
    Ok(())
}

pub fn write_catalog<W: Write>(catalog: &Catalog, w: &mut W, format: CatalogFormat) -> Result<()> {
    for item in catalog.items() {
        match format {
            CatalogFormat::Jsonl => {
                let rec = JsonRecord {
                    item_id: item.item_id,
                    embedding: item.embedding.clone(),
                    features: item.features.iter().map(|f| (f.feature_id, f.value)).collect(),
                };
                serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::other)?;
                writeln!(w)?;
            }
            CatalogFormat::Tsv => {
                let emb: Vec<String> = item.embedding.iter().map(|x| x.to_string()).collect();
                let feats: Vec<String> = item
                    .features
                    .iter()
                    .map(|f| format!("{}:{}", f.feature_id, f.value))
                    .collect();
                writeln!(w, "{}\t{}\t{}", item.item_id, emb.join(","), feats.join(";"))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub feature_id: u64,
    pub cardinality: u64,
    /// Distinct values drawn per item (capped at `cardinality`).
    pub values_per_item: usize,
}

/// Six features carrying ten values per item in total, the shape of a
/// typical recommendation catalog.
pub fn default_feature_specs() -> Vec<FeatureSpec> {
    [(1, 20, 2), (2, 50, 2), (3, 100, 2), (4, 200, 2), (5, 1000, 1), (6, 5000, 1)]
        .into_iter()
        .map(|(feature_id, cardinality, values_per_item)| FeatureSpec {
            feature_id,
            cardinality,
            values_per_item,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub features: Vec<FeatureSpec>,
    pub seed: u64,
    /// Per-coordinate std-dev of the blob noise, relative to `1/sqrt(dim)`.
    pub spread: f32,
}

impl SynthConfig {
    pub fn new(n_items: usize, dim: usize, n_clusters: usize, seed: u64) -> Self {
        Self {
            n_items,
            dim,
            n_clusters,
            features: default_feature_specs(),
            seed,
            spread: 0.35,
        }
    }
}

/// Gaussian blobs around `n_clusters` random unit centers, L2-normalized,
/// with uniformly drawn categorical features. Item ids are `0..n_items`.
pub fn synth_catalog(cfg: &SynthConfig) -> Result<Catalog> {
    if cfg.n_clusters == 0 || cfg.n_items < cfg.n_clusters {
        return Err(CatalogError::InvalidSpec(format!(
            "need n_items >= n_clusters >= 1, got n_items={} n_clusters={}",
            cfg.n_items, cfg.n_clusters
        )));
    }
    if cfg.dim == 0 {
        return Err(CatalogError::InvalidSpec("dim must be at least 1".into()));
    }
    if let Some(f) = cfg.features.iter().find(|f| f.cardinality == 0) {
        return Err(CatalogError::InvalidSpec(format!(
            "feature {} has zero cardinality",
            f.feature_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f32>> = (0..cfg.n_clusters)
        .map(|_| {
            let mut c: Vec<f32> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            l2_normalize(&mut c);
            c
        })
        .collect();
    let sigma = cfg.spread / (cfg.dim as f32).sqrt();
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        // Every blob gets at least one item.
        let blob = if i < cfg.n_clusters {
            i
        } else {
            rng.gen_range(0..cfg.n_clusters)
        };
        let mut emb: Vec<f32> = centers[blob]
            .iter()
            .map(|c| c + sigma * rng.sample::<f32, _>(StandardNormal))
            .collect();
        l2_normalize(&mut emb);
        let mut features = Vec::new();
        for spec in &cfg.features {
            let card = spec.cardinality.min(usize::MAX as u64) as usize;
            let n = spec.values_per_item.min(card);
            for v in sample(&mut rng, card, n).iter() {
                features.push(FeatureValue::new(spec.feature_id, v as u64));
            }
        }
        items.push(Item::new(i as u64, features, emb));
    }
    let mut dict = FeatureDictionary::default();
    for spec in &cfg.features {
        dict.insert_feature(spec.feature_id, format!("f{}", spec.feature_id));
    }
    Catalog::new(items, cfg.dim, dict)
}
