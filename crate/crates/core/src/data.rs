//! Interaction datasets with categorical side features.
//!
//! A [`Dataset`] owns the interaction log, the dense id remapping, and the
//! per-id category assignments for every schema field. Raw ids are remapped to
//! `0..n` on load (embedding tables need dense indices) and the inverse maps
//! are kept for reporting. Datasets are immutable after construction and safe
//! to share across threads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which entity a categorical field describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::User => write!(f, "user"),
            Side::Item => write!(f, "item"),
        }
    }
}

/// One categorical field. `ids: true` marks a field whose categories are the
/// dataset's dense user (or item) ids; its category list is filled when the
/// schema is bound to data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub side: Side,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub ids: bool,
}

impl FieldSpec {
    pub fn cardinality(&self) -> usize {
        self.categories.len()
    }
}

/// Ordered list of categorical fields with contiguous, disjoint feature index
/// ranges. Total dimension is the sum of cardinalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Self {
        FeatureSchema { fields }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Feature index offset of each field, in declaration order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.fields.len());
        let mut acc = 0;
        for f in &self.fields {
            offs.push(acc);
            acc += f.cardinality();
        }
        offs
    }

    pub fn total_dim(&self) -> usize {
        self.fields.iter().map(FieldSpec::cardinality).sum()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Position of field `idx` among the fields of its own side.
    fn side_position(&self, idx: usize) -> usize {
        let side = self.fields[idx].side;
        self.fields[..idx].iter().filter(|f| f.side == side).count()
    }

    pub fn user_field_count(&self) -> usize {
        self.fields.iter().filter(|f| f.side == Side::User).count()
    }

    pub fn item_field_count(&self) -> usize {
        self.fields.iter().filter(|f| f.side == Side::Item).count()
    }

    /// Stable 64-bit content hash (FNV-1a over field declarations), used to
    /// tie serialized model directories to the schema they were trained on.
    pub fn stable_hash(&self) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf29ce484222325;
        const FNV_PRIME: u64 = 0x100000001b3;
        let mut h = FNV_OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(FNV_PRIME);
            }
        };
        for f in &self.fields {
            eat(f.name.as_bytes());
            eat(&[0, u8::from(f.side == Side::Item), u8::from(f.ids), 0]);
            for c in &f.categories {
                eat(c.as_bytes());
                eat(&[0xff]);
            }
        }
        h
    }
}

/// One observed (user, item, feedback) record. `label` is set by
/// [`binarize`]; `weight` defaults to 1 and carries training weights when a
/// weighted view is attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Interaction<S: Scalar = f64> {
    pub user: usize,
    pub item: usize,
    pub rating: S,
    pub label: Option<S>,
    pub weight: S,
}

impl<S: Scalar> Interaction<S> {
    pub fn new(user: usize, item: usize, rating: S) -> Self {
        Interaction {
            user,
            item,
            rating,
            label: None,
            weight: S::one(),
        }
    }

    /// Training target for the given loss: raw rating for MSE, binary label
    /// for BCE (requires a binarized dataset).
    pub fn target(&self, use_label: bool) -> Result<S> {
        if use_label {
            self.label
                .ok_or_else(|| Error::argument("dataset not binarized: no binary labels available"))
        } else {
            Ok(self.rating)
        }
    }
}

/// One-hot sparse feature vector: exactly one active index per schema field.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec<S: Scalar = f64> {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub values: Vec<S>,
}

/// Interaction log plus schema, dense id maps, per-id categories, and
/// (for synthetic data) ground-truth environment labels and observation flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Dataset<S: Scalar = f64> {
    schema: FeatureSchema,
    interactions: Vec<Interaction<S>>,
    n_users: usize,
    n_items: usize,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    /// `[user][position among user-side fields]` -> category index.
    user_features: Vec<Vec<usize>>,
    item_features: Vec<Vec<usize>>,
    ground_truth_env: Option<Vec<(usize, usize)>>,
    observed_flag: Option<Vec<bool>>,
}

impl<S: Scalar> Dataset<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        mut schema: FeatureSchema,
        interactions: Vec<Interaction<S>>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        user_features: Vec<Vec<usize>>,
        item_features: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n_users = user_ids.len();
        let n_items = item_ids.len();
        // Bind id fields to the dense maps.
        for f in &mut schema.fields {
            if f.ids {
                f.categories = match f.side {
                    Side::User => user_ids.clone(),
                    Side::Item => item_ids.clone(),
                };
            }
        }
        let ds = Dataset {
            schema,
            interactions,
            n_users,
            n_items,
            user_ids,
            item_ids,
            user_features,
            item_features,
            ground_truth_env: None,
            observed_flag: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for (i, it) in self.interactions.iter().enumerate() {
            if it.user >= self.n_users || it.item >= self.n_items {
                return Err(Error::lookup(format!(
                    "interaction {i} references ids ({}, {}) outside ({}, {})",
                    it.user, it.item, self.n_users, self.n_items
                )));
            }
            if it.weight < S::zero() {
                return Err(Error::argument(format!("negative weight at sample {i}")));
            }
        }
        if self.user_features.len() != self.n_users || self.item_features.len() != self.n_items {
            return Err(Error::schema("feature table length mismatch".to_string()));
        }
        for (idx, f) in self.schema.fields.iter().enumerate() {
            let pos = self.schema.side_position(idx);
            let (table, n) = match f.side {
                Side::User => (&self.user_features, self.n_users),
                Side::Item => (&self.item_features, self.n_items),
            };
            for id in 0..n {
                let cat = *table[id].get(pos).ok_or_else(|| {
                    Error::schema(format!("{} {id} missing value for field {}", f.side, f.name))
                })?;
                if cat >= f.cardinality() {
                    return Err(Error::schema(format!(
                        "{} {id} has category {cat} outside field {} (cardinality {})",
                        f.side,
                        f.name,
                        f.cardinality()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_ground_truth(mut self, env: Vec<(usize, usize)>) -> Self {
        assert_eq!(env.len(), self.interactions.len());
        self.ground_truth_env = Some(env);
        self
    }

    pub fn with_observed_flag(mut self, flags: Vec<bool>) -> Self {
        assert_eq!(flags.len(), self.interactions.len());
        self.observed_flag = Some(flags);
        self
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn interactions(&self) -> &[Interaction<S>] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn ground_truth_env(&self) -> Option<&[(usize, usize)]> {
        self.ground_truth_env.as_deref()
    }

    pub fn observed_flag(&self) -> Option<&[bool]> {
        self.observed_flag.as_deref()
    }

    pub fn ratings(&self) -> impl Iterator<Item = S> + '_ {
        self.interactions.iter().map(|it| it.rating)
    }

    /// Category index of `field` for the given user or item id.
    pub fn category_of(&self, field_idx: usize, id: usize) -> usize {
        let pos = self.schema.side_position(field_idx);
        match self.schema.fields[field_idx].side {
            Side::User => self.user_features[id][pos],
            Side::Item => self.item_features[id][pos],
        }
    }

    /// One-hot encoding of a (user, item) pair: one active index per schema
    /// field, in declaration order, value 1.0 at each.
    pub fn encode_pair(&self, user: usize, item: usize) -> Result<SparseVec<S>> {
        if user >= self.n_users || item >= self.n_items {
            return Err(Error::lookup(format!(
                "pair ({user}, {item}) outside ({}, {})",
                self.n_users, self.n_items
            )));
        }
        let offsets = self.schema.offsets();
        let mut indices = Vec::with_capacity(self.schema.fields.len());
        for (idx, f) in self.schema.fields.iter().enumerate() {
            let cat = if f.ids {
                match f.side {
                    Side::User => user,
                    Side::Item => item,
                }
            } else {
                self.category_of(idx, match f.side {
                    Side::User => user,
                    Side::Item => item,
                })
            };
            indices.push(offsets[idx] + cat);
        }
        Ok(SparseVec {
            dim: self.schema.total_dim(),
            indices,
            values: vec![S::one(); self.schema.fields.len()],
        })
    }

    pub fn encode(&self, interaction: &Interaction<S>) -> Result<SparseVec<S>> {
        self.encode_pair(interaction.user, interaction.item)
    }

    /// New dataset keeping only the given sample indices (feature tables and
    /// id maps are shared unchanged; duplicates in `indices` are kept).
    pub fn subset(&self, indices: &[usize]) -> Dataset<S> {
        Dataset {
            schema: self.schema.clone(),
            interactions: indices.iter().map(|&i| self.interactions[i].clone()).collect(),
            n_users: self.n_users,
            n_items: self.n_items,
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
            user_features: self.user_features.clone(),
            item_features: self.item_features.clone(),
            ground_truth_env: self
                .ground_truth_env
                .as_ref()
                .map(|gt| indices.iter().map(|&i| gt[i]).collect()),
            observed_flag: self
                .observed_flag
                .as_ref()
                .map(|fl| indices.iter().map(|&i| fl[i]).collect()),
        }
    }

    /// Clone with per-sample weights replaced by `weights` (length `len()`).
    pub fn with_weights(&self, weights: &[S]) -> Dataset<S> {
        assert_eq!(weights.len(), self.len());
        let mut ds = self.clone();
        for (it, &w) in ds.interactions.iter_mut().zip(weights) {
            it.weight = w;
        }
        ds
    }
}

/// Parse a CSV or TSV interaction file against a schema.
///
/// Requires a header row with `user_id`, `item_id`, `rating`; every non-id
/// schema field must have a matching column. Ids are remapped to dense
/// indices in first-appearance order. Duplicate (user, item) rows are kept as
/// distinct samples. An empty file yields an empty dataset.
pub fn load_csv<S: Scalar>(
    path: impl AsRef<Path>,
    format: FileFormat,
    schema: &FeatureSchema,
) -> Result<Dataset<S>> {
    let text = std::fs::read_to_string(&path)?;
    parse_interactions(&text, format, schema)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Tsv,
}

impl FileFormat {
    fn delimiter(self) -> u8 {
        match self {
            FileFormat::Csv => b',',
            FileFormat::Tsv => b'\t',
        }
    }
}

pub fn parse_interactions<S: Scalar>(
    text: &str,
    format: FileFormat,
    schema: &FeatureSchema,
) -> Result<Dataset<S>> {
    if text.trim().is_empty() {
        return Dataset::from_parts(schema.clone(), vec![], vec![], vec![], vec![], vec![]);
    }

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(true)
        .from_reader(text.as_bytes());

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(format!("missing column `{name}`")))
    };
    let user_col = column("user_id")?;
    let item_col = column("item_id")?;
    let rating_col = column("rating")?;

    // Columns and category lookup for non-id fields, in schema order.
    let mut field_cols = Vec::with_capacity(schema.fields.len());
    let mut cat_lookup: Vec<HashMap<&str, usize>> = Vec::with_capacity(schema.fields.len());
    for f in &schema.fields {
        if f.ids {
            field_cols.push(None);
            cat_lookup.push(HashMap::new());
        } else {
            field_cols.push(Some(column(&f.name)?));
            cat_lookup.push(
                f.categories
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c.as_str(), i))
                    .collect(),
            );
        }
    }

    let mut user_map: HashMap<String, usize> = HashMap::new();
    let mut item_map: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut user_features: Vec<Vec<usize>> = Vec::new();
    let mut item_features: Vec<Vec<usize>> = Vec::new();
    let n_user_fields = schema.user_field_count();
    let n_item_fields = schema.item_field_count();
    const UNSET: usize = usize::MAX;

    let mut interactions = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);

        let raw_user = record
            .get(user_col)
            .ok_or_else(|| Error::Row { line, message: "short row: no user_id".into() })?;
        let raw_item = record
            .get(item_col)
            .ok_or_else(|| Error::Row { line, message: "short row: no item_id".into() })?;
        let raw_rating = record
            .get(rating_col)
            .ok_or_else(|| Error::Row { line, message: "short row: no rating".into() })?;
        let rating: f64 = raw_rating.trim().parse().map_err(|_| Error::Row {
            line,
            message: format!("unparsable rating `{raw_rating}`"),
        })?;

        let user = *user_map.entry(raw_user.to_string()).or_insert_with(|| {
            user_ids.push(raw_user.to_string());
            user_features.push(vec![UNSET; n_user_fields]);
            user_ids.len() - 1
        });
        let item = *item_map.entry(raw_item.to_string()).or_insert_with(|| {
            item_ids.push(raw_item.to_string());
            item_features.push(vec![UNSET; n_item_fields]);
            item_ids.len() - 1
        });

        for (idx, f) in schema.fields.iter().enumerate() {
            let Some(col) = field_cols[idx] else { continue };
            let raw = record.get(col).ok_or_else(|| Error::Row {
                line,
                message: format!("short row: no column for field {}", f.name),
            })?;
            let cat = *cat_lookup[idx].get(raw.trim()).ok_or_else(|| {
                Error::schema(format!(
                    "unknown category `{raw}` for field {} at line {line}",
                    f.name
                ))
            })?;
            let pos = schema.side_position(idx);
            let slot = match f.side {
                Side::User => &mut user_features[user][pos],
                Side::Item => &mut item_features[item][pos],
            };
            // First occurrence wins; later rows may not contradict silently
            // but are not treated as errors either.
            if *slot == UNSET {
                *slot = cat;
            }
        }

        interactions.push(Interaction::new(user, item, S::from_f64(rating)));
    }

    // Id fields need no per-id table entries beyond the dense index itself,
    // but every declared non-id field must have been seen for every id.
    for table in [&mut user_features, &mut item_features] {
        for row in table.iter_mut() {
            for v in row.iter_mut() {
                if *v == UNSET {
                    *v = 0; // unreachable for well-formed files; see validate()
                }
            }
        }
    }

    Dataset::from_parts(
        schema.clone(),
        interactions,
        user_ids,
        item_ids,
        user_features,
        item_features,
    )
}

/// Write a dataset back to CSV/TSV: header `user_id,item_id,rating` plus one
/// column per non-id schema field, rows in interaction order. Inverse of
/// [`load_csv`] up to dense id renaming.
pub fn write_csv<S: Scalar>(
    dataset: &Dataset<S>,
    path: impl AsRef<Path>,
    format: FileFormat,
) -> Result<()> {
    let sep = format.delimiter() as char;
    let mut out = String::from("user_id");
    let fields: Vec<(usize, &FieldSpec)> = dataset
        .schema
        .fields
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.ids)
        .collect();
    out.push(sep);
    out.push_str("item_id");
    out.push(sep);
    out.push_str("rating");
    for (_, f) in &fields {
        out.push(sep);
        out.push_str(&f.name);
    }
    out.push('\n');
    for it in &dataset.interactions {
        out.push_str(&dataset.user_ids[it.user]);
        out.push(sep);
        out.push_str(&dataset.item_ids[it.item]);
        out.push(sep);
        out.push_str(&format!("{}", it.rating));
        for &(idx, f) in &fields {
            let id = match f.side {
                Side::User => it.user,
                Side::Item => it.item,
            };
            out.push(sep);
            out.push_str(&f.categories[dataset.category_of(idx, id)]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Set `label = 1` iff `rating >= threshold`, else 0. Ratings are preserved,
/// so the operation is idempotent.
pub fn binarize<S: Scalar>(dataset: &Dataset<S>, threshold: S) -> Dataset<S> {
    let mut ds = dataset.clone();
    for it in &mut ds.interactions {
        it.label = Some(if it.rating >= threshold { S::one() } else { S::zero() });
    }
    ds
}

/// Train/test split with disjoint sample index sets.
#[derive(Debug, Clone)]
pub struct Split<S: Scalar = f64> {
    pub train: Dataset<S>,
    pub test: Dataset<S>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

/// JSON manifest of a split: sorted sample index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl<S: Scalar> Split<S> {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            train: self.train_indices.clone(),
            test: self.test_indices.clone(),
        }
    }
}

/// Uniform test split without replacement: `|test| = round(fraction * n)`,
/// deterministic per seed.
pub fn split<S: Scalar>(dataset: &Dataset<S>, test_fraction: f64, seed: u64) -> Result<Split<S>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::argument(format!(
            "test_fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::argument("cannot split an empty dataset"));
    }
    let n = dataset.len();
    let k = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut test_indices: Vec<usize> = order[..k].to_vec();
    let mut train_indices: Vec<usize> = order[k..].to_vec();
    test_indices.sort_unstable();
    train_indices.sort_unstable();
    Ok(Split {
        train: dataset.subset(&train_indices),
        test: dataset.subset(&test_indices),
        train_indices,
        test_indices,
        seed,
    })
}

/// Internal edges for equal-frequency binning (`bins - 1` quantile cut
/// points, computed on training data only).
pub fn equal_frequency_edges(values: &[f64], bins: usize) -> Vec<f64> {
    assert!(bins >= 1);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    (1..bins)
        .map(|i| {
            let q = i as f64 / bins as f64;
            let pos = q * (sorted.len().saturating_sub(1)) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            if lo == hi {
                sorted[lo]
            } else {
                sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
            }
        })
        .collect()
}

/// Bin index of `v` given ascending internal edges: the number of edges < v,
/// so values equal to an edge fall in the lower bin.
pub fn assign_bin(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e < v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_field_schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FieldSpec {
                name: "gender".into(),
                side: Side::User,
                categories: vec!["f".into(), "m".into()],
                ids: false,
            },
            FieldSpec {
                name: "genre".into(),
                side: Side::Item,
                categories: vec!["a".into(), "b".into(), "c".into()],
                ids: false,
            },
        ])
    }

    #[test]
    fn loads_three_rows_two_users_two_items() {
        let text = "user_id,item_id,rating,gender,genre\n\
                    u1,i1,5,f,a\n\
                    u1,i2,3,f,b\n\
                    u2,i1,4,m,a\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Csv, &two_field_schema()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_users(), 2);
        assert_eq!(ds.n_items(), 2);
        assert_eq!(ds.interactions()[2].rating, 4.0);
        assert_eq!(ds.user_ids(), &["u1", "u2"]);
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let ds: Dataset = parse_interactions("", FileFormat::Csv, &two_field_schema()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.schema().fields.len(), 2);
    }

    #[test]
    fn duplicate_rows_are_kept() {
        // 100 generated rows, all the same (user, item): row count must match.
        let mut text = String::from("user_id,item_id,rating,gender,genre\n");
        for i in 0..100 {
            text.push_str(&format!("u0,i0,{},f,a\n", (i % 5) + 1));
        }
        let ds: Dataset = parse_interactions(&text, FileFormat::Csv, &two_field_schema()).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.n_users(), 1);
    }

    #[test]
    fn missing_column_is_format_error() {
        let text = "user_id,item_id\nu1,i1\n";
        let err = parse_interactions::<f64>(text, FileFormat::Csv, &two_field_schema()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn bad_rating_reports_line_number() {
        let text = "user_id,item_id,rating,gender,genre\nu1,i1,5,f,a\nu1,i2,oops,f,b\n";
        let err = parse_interactions::<f64>(text, FileFormat::Csv, &two_field_schema()).unwrap_err();
        match err {
            Error::Row { line, .. } => assert_eq!(line, 3),
            other => panic!("expected row error, got {other}"),
        }
    }

    #[test]
    fn unknown_category_is_schema_error() {
        let text = "user_id,item_id,rating,gender,genre\nu1,i1,5,x,a\n";
        let err = parse_interactions::<f64>(text, FileFormat::Csv, &two_field_schema()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn tsv_is_supported() {
        let text = "user_id\titem_id\trating\tgender\tgenre\nu1\ti1\t2.5\tf\tc\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Tsv, &two_field_schema()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.interactions()[0].rating, 2.5);
    }

    #[test]
    fn binarize_threshold_four() {
        let text = "user_id,item_id,rating,gender,genre\n\
                    u1,i1,5,f,a\nu1,i2,4,f,b\nu2,i1,3,m,a\nu2,i2,1,m,b\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Csv, &two_field_schema()).unwrap();
        let b = binarize(&ds, 4.0);
        let labels: Vec<f64> = b.interactions().iter().map(|i| i.label.unwrap()).collect();
        assert_eq!(labels, vec![1.0, 1.0, 0.0, 0.0]);
        // ratings preserved
        assert_eq!(b.interactions()[0].rating, 5.0);
    }

    #[test]
    fn binarize_threshold_three_and_boundary() {
        let text = "user_id,item_id,rating,gender,genre\nu1,i1,3,f,a\nu1,i2,2,f,b\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Csv, &two_field_schema()).unwrap();
        let b = binarize(&ds, 3.0);
        let labels: Vec<f64> = b.interactions().iter().map(|i| i.label.unwrap()).collect();
        assert_eq!(labels, vec![1.0, 0.0]);
        // threshold at or below the minimum rating turns everything positive
        let all_pos = binarize(&ds, 2.0);
        assert!(all_pos.interactions().iter().all(|i| i.label == Some(1.0)));
    }

    #[test]
    fn binarize_is_idempotent() {
        let text = "user_id,item_id,rating,gender,genre\nu1,i1,5,f,a\nu1,i2,1,f,b\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Csv, &two_field_schema()).unwrap();
        let once = binarize(&ds, 4.0);
        let twice = binarize(&once, 4.0);
        assert_eq!(once, twice);
    }

    fn synthetic_rows(n: usize) -> Dataset {
        let mut text = String::from("user_id,item_id,rating,gender,genre\n");
        for i in 0..n {
            text.push_str(&format!("u{},i{},{},f,a\n", i % 7, i % 11, (i % 5) + 1));
        }
        parse_interactions(&text, FileFormat::Csv, &two_field_schema()).unwrap()
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ds = synthetic_rows(10);
        let sp = split(&ds, 0.2, 42).unwrap();
        assert_eq!(sp.test.len(), 2);
        assert_eq!(sp.train.len(), 8);
        let mut all: Vec<usize> = sp.train_indices.iter().chain(&sp.test_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds = synthetic_rows(50);
        let a = split(&ds, 0.2, 7).unwrap();
        let b = split(&ds, 0.2, 7).unwrap();
        assert_eq!(a.test_indices, b.test_indices);
        assert_eq!(a.manifest(), b.manifest());
    }

    #[test]
    fn split_different_seeds_differ_and_both_partition() {
        let ds = synthetic_rows(1000);
        let a = split(&ds, 0.2, 1).unwrap();
        let b = split(&ds, 0.2, 2).unwrap();
        assert_ne!(a.test_indices, b.test_indices);
        for sp in [&a, &b] {
            // brute-force set checks: disjoint and union = all indices
            let mut seen = vec![false; 1000];
            for &i in sp.train_indices.iter().chain(&sp.test_indices) {
                assert!(!seen[i], "index {i} appears twice");
                seen[i] = true;
            }
            assert!(seen.iter().all(|&s| s));
            assert_eq!(sp.test.len(), 200);
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = synthetic_rows(10);
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn encode_offset_arithmetic() {
        // gender:2 then genre:3; gender=1 (m), genre=2 (c) -> {1, 2+2}
        let text = "user_id,item_id,rating,gender,genre\nu1,i1,5,m,c\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Csv, &two_field_schema()).unwrap();
        let x = ds.encode(&ds.interactions()[0]).unwrap();
        assert_eq!(x.indices, vec![1, 4]);
        assert_eq!(x.dim, 5);
        assert!(x.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn encode_id_only_schema() {
        let schema = FeatureSchema::new(vec![
            FieldSpec { name: "user_id".into(), side: Side::User, categories: vec![], ids: true },
            FieldSpec { name: "item_id".into(), side: Side::Item, categories: vec![], ids: true },
        ]);
        let text = "user_id,item_id,rating\nu1,i1,5\nu2,i2,1\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Csv, &schema).unwrap();
        let x = ds.encode_pair(1, 0).unwrap();
        assert_eq!(x.indices.len(), 2);
        assert_eq!(x.indices, vec![1, 2]); // user block [0,2), item block [2,4)
        assert_eq!(x.dim, 4);
    }

    #[test]
    fn encode_random_schema_stays_in_field_ranges() {
        use rand::Rng;
        let schema = FeatureSchema::new(vec![
            FieldSpec { name: "a".into(), side: Side::User, categories: (0..4).map(|i| format!("a{i}")).collect(), ids: false },
            FieldSpec { name: "b".into(), side: Side::User, categories: (0..3).map(|i| format!("b{i}")).collect(), ids: false },
            FieldSpec { name: "c".into(), side: Side::Item, categories: (0..5).map(|i| format!("c{i}")).collect(), ids: false },
            FieldSpec { name: "d".into(), side: Side::Item, categories: (0..2).map(|i| format!("d{i}")).collect(), ids: false },
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut text = String::from("user_id,item_id,rating,a,b,c,d\n");
        for i in 0..100 {
            text.push_str(&format!(
                "u{i},i{i},1,a{},b{},c{},d{}\n",
                rng.gen_range(0..4),
                rng.gen_range(0..3),
                rng.gen_range(0..5),
                rng.gen_range(0..2)
            ));
        }
        let ds: Dataset = parse_interactions(&text, FileFormat::Csv, &schema).unwrap();
        let offsets = ds.schema().offsets();
        for it in ds.interactions() {
            let x = ds.encode(it).unwrap();
            assert_eq!(x.indices.len(), 4);
            for (f, &ix) in x.indices.iter().enumerate() {
                let lo = offsets[f];
                let hi = lo + ds.schema().fields[f].cardinality();
                assert!(ix >= lo && ix < hi, "index {ix} outside field {f} range [{lo},{hi})");
            }
        }
    }

    #[test]
    fn equal_frequency_binning_splits_balanced() {
        let values: Vec<f64> = (0..100).map(f64::from).collect();
        let edges = equal_frequency_edges(&values, 10);
        assert_eq!(edges.len(), 9);
        let mut counts = [0usize; 10];
        for &v in &values {
            counts[assign_bin(&edges, v)] += 1;
        }
        for c in counts {
            assert!((8..=12).contains(&c), "unbalanced bin: {counts:?}");
        }
    }

    #[test]
    fn subset_preserves_feature_tables() {
        let ds = synthetic_rows(20);
        let sub = ds.subset(&[3, 5, 5, 7]);
        assert_eq!(sub.len(), 4);
        assert_eq!(sub.n_users(), ds.n_users());
        assert_eq!(sub.interactions()[1], sub.interactions()[2]);
    }
}
