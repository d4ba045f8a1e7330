//! Tabular datasets: CSV ingestion, min-max normalization, feature masking,
//! stratified splitting and a synthetic generator with known informative
//! columns.
//!
//! Rows are stored as `(features, label)` pairs. Categorical columns are
//! integer-coded through the schema before anything else touches them, so
//! every feature downstream is a plain `f64`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column layout, categorical codings and class labels of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub feature_names: Vec<String>,
    /// Feature name -> (category -> code). Codes must cover `0..k`.
    #[serde(default)]
    pub categorical_maps: BTreeMap<String, BTreeMap<String, usize>>,
    /// Class name -> class index. Indices must cover `0..n_classes`.
    pub label_map: BTreeMap<String, usize>,
    /// Class index scored as "attack" by binary metrics.
    pub positive_class: usize,
}

fn check_bijection(map: &BTreeMap<String, usize>, what: &str) -> Result<()> {
    let codes: BTreeSet<usize> = map.values().copied().collect();
    if codes.len() != map.len() || codes.iter().copied().ne(0..map.len()) {
        return Err(Error::Schema(format!(
            "{what} must map onto 0..{} without gaps or duplicates",
            map.len()
        )));
    }
    Ok(())
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in &self.feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name '{name}'")));
            }
        }
        for (feature, map) in &self.categorical_maps {
            if !seen.contains(feature.as_str()) {
                return Err(Error::Schema(format!(
                    "categorical map for unknown feature '{feature}'"
                )));
            }
            check_bijection(map, &format!("categorical map '{feature}'"))?;
        }
        if self.label_map.len() < 2 {
            return Err(Error::Schema("label_map needs at least 2 classes".into()));
        }
        check_bijection(&self.label_map, "label_map")?;
        if self.positive_class >= self.label_map.len() {
            return Err(Error::Schema(format!(
                "positive_class {} out of range for {} classes",
                self.positive_class,
                self.label_map.len()
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: FeatureSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    /// Class treated as legitimate traffic: the other class of a binary
    /// schema, else a label named `normal` or `benign` (any case), else 0.
    pub fn benign_class(&self) -> usize {
        if self.label_map.len() == 2 {
            return 1 - self.positive_class.min(1);
        }
        self.label_map
            .iter()
            .find(|(name, _)| matches!(name.to_ascii_lowercase().as_str(), "normal" | "benign"))
            .map(|(_, &c)| c)
            .unwrap_or(0)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|c| self.label_name(c).unwrap_or_default().to_string())
            .collect()
    }

    pub fn label_name(&self, class: usize) -> Option<&str> {
        self.label_map
            .iter()
            .find(|(_, &idx)| idx == class)
            .map(|(name, _)| name.as_str())
    }

    fn category_name(&self, feature: &str, code: usize) -> Option<&str> {
        self.categorical_maps.get(feature).and_then(|map| {
            map.iter()
                .find(|(_, &c)| c == code)
                .map(|(name, _)| name.as_str())
        })
    }

    fn project(&self, keep: &[usize]) -> FeatureSchema {
        let feature_names: Vec<String> = keep
            .iter()
            .map(|&i| self.feature_names[i].clone())
            .collect();
        let categorical_maps = self
            .categorical_maps
            .iter()
            .filter(|(name, _)| feature_names.contains(name))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        FeatureSchema {
            feature_names,
            categorical_maps,
            label_map: self.label_map.clone(),
            positive_class: self.positive_class,
        }
    }
}

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub rows: Vec<Record>,
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
}

fn column_bounds(rows: &[Record], width: usize) -> (Vec<f64>, Vec<f64>) {
    if rows.is_empty() {
        return (vec![0.0; width], vec![0.0; width]);
    }
    let mut min = vec![f64::INFINITY; width];
    let mut max = vec![f64::NEG_INFINITY; width];
    for row in rows {
        for (i, &x) in row.features.iter().enumerate() {
            min[i] = min[i].min(x);
            max[i] = max[i].max(x);
        }
    }
    (min, max)
}

impl Dataset {
    /// Builds a dataset and computes per-column bounds over `rows`.
    pub fn new(schema: FeatureSchema, rows: Vec<Record>) -> Result<Self> {
        let width = schema.num_features();
        let n_classes = schema.num_classes();
        for (i, row) in rows.iter().enumerate() {
            if row.features.len() != width {
                return Err(Error::Dataset(format!(
                    "row {} has {} features, schema has {width}",
                    i + 1,
                    row.features.len()
                )));
            }
            if row.label >= n_classes {
                return Err(Error::Dataset(format!(
                    "row {} has class index {} but schema has {n_classes} classes",
                    i + 1,
                    row.label
                )));
            }
            if let Some(x) = row.features.iter().find(|x| !x.is_finite()) {
                return Err(Error::Dataset(format!("row {} has non-finite value {x}", i + 1)));
            }
        }
        let (feature_min, feature_max) = column_bounds(&rows, width);
        Ok(Dataset {
            schema,
            rows,
            feature_min,
            feature_max,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.schema.num_features()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.num_classes()];
        for row in &self.rows {
            counts[row.label] += 1;
        }
        counts
    }

    /// Dataset made of the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let rows: Vec<Record> = indices.iter().map(|&i| self.rows[i].clone()).collect();
        let (feature_min, feature_max) = column_bounds(&rows, self.num_features());
        Dataset {
            schema: self.schema.clone(),
            rows,
            feature_min,
            feature_max,
        }
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer {
            feature_min: self.feature_min.clone(),
            feature_max: self.feature_max.clone(),
        }
    }

    /// Min-max scales every column into `[0, 1]`. Constant columns map to 0.
    pub fn normalize(&self) -> Dataset {
        let norm = self.normalizer();
        let rows: Vec<Record> = self
            .rows
            .iter()
            .map(|r| Record {
                features: norm.scale(&r.features),
                label: r.label,
            })
            .collect();
        let (feature_min, feature_max) = column_bounds(&rows, self.num_features());
        Dataset {
            schema: self.schema.clone(),
            rows,
            feature_min,
            feature_max,
        }
    }

    /// Keeps only the columns whose mask bit is set.
    pub fn apply_mask(&self, mask: &FeatureMask) -> Result<Dataset> {
        if mask.len() != self.num_features() {
            return Err(Error::Shape(format!(
                "mask length {} does not match feature count {}",
                mask.len(),
                self.num_features()
            )));
        }
        let keep = mask.selected();
        let rows = self
            .rows
            .iter()
            .map(|r| Record {
                features: keep.iter().map(|&i| r.features[i]).collect(),
                label: r.label,
            })
            .collect();
        Ok(Dataset {
            schema: self.schema.project(&keep),
            rows,
            feature_min: keep.iter().map(|&i| self.feature_min[i]).collect(),
            feature_max: keep.iter().map(|&i| self.feature_max[i]).collect(),
        })
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.schema.num_classes()];
        for (i, row) in self.rows.iter().enumerate() {
            by_class[row.label].push(i);
        }
        by_class
    }

    /// Per-class shuffled split. Each class with rows contributes
    /// `round(n_c * test_fraction)` rows to the test side, clamped so that
    /// both sides keep at least one row of it.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.stratified_split_indices(test_fraction, seed)?;
        Ok((self.subset(&train), self.subset(&test)))
    }

    pub fn stratified_split_indices(
        &self,
        test_fraction: f64,
        seed: u64,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test fraction must lie in (0,1), got {test_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, mut idx) in self.indices_by_class().into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            if idx.len() < 2 {
                return Err(Error::Dataset(format!(
                    "class {class} has {} row(s); stratified split needs at least 2",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }

    /// Stratified k-fold assignment: returns the test-row indices of each fold.
    ///
    /// Rows of each class are shuffled, the class lists are concatenated and
    /// dealt round-robin into folds, so fold sizes differ by at most one and
    /// every class is spread as evenly as possible.
    pub fn kfold_indices(&self, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        if k < 2 {
            return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
        }
        if k > self.len() {
            return Err(Error::Config(format!(
                "k = {k} exceeds the number of rows ({})",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = Vec::with_capacity(self.len());
        for mut idx in self.indices_by_class() {
            idx.shuffle(&mut rng);
            order.extend(idx);
        }
        let mut folds = vec![Vec::new(); k];
        for (pos, row) in order.into_iter().enumerate() {
            folds[pos % k].push(row);
        }
        for fold in &mut folds {
            fold.sort_unstable();
        }
        Ok(folds)
    }

    pub fn kfold_split(&self, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
        let folds = self.kfold_indices(k, seed)?;
        Ok(folds
            .iter()
            .map(|test| {
                let in_test: HashSet<usize> = test.iter().copied().collect();
                let train: Vec<usize> = (0..self.len()).filter(|i| !in_test.contains(i)).collect();
                (self.subset(&train), self.subset(test))
            })
            .collect())
    }

    /// Writes the dataset as CSV, label last, categorical codes mapped back to names.
    pub fn write_csv<W: Write>(&self, writer: W, header: bool) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        if header {
            let mut names = self.schema.feature_names.clone();
            names.push("label".to_string());
            out.write_record(&names)?;
        }
        for (r, row) in self.rows.iter().enumerate() {
            let mut fields = Vec::with_capacity(row.features.len() + 1);
            for (name, &x) in self.schema.feature_names.iter().zip(&row.features) {
                if self.schema.categorical_maps.contains_key(name) {
                    let name = self.schema.category_name(name, x as usize).ok_or_else(|| {
                        Error::Dataset(format!("row {}: no category with code {x}", r + 1))
                    })?;
                    fields.push(name.to_string());
                } else {
                    fields.push(x.to_string());
                }
            }
            let label = self.schema.label_name(row.label).ok_or_else(|| {
                Error::Dataset(format!("row {}: no label with index {}", r + 1, row.label))
            })?;
            fields.push(label.to_string());
            out.write_record(&fields)?;
        }
        out.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Parses CSV text against `schema`. The label is the last column.
pub fn parse_csv<R: Read>(reader: R, schema: &FeatureSchema, header: bool) -> Result<Dataset> {
    schema.validate()?;
    let width = schema.num_features();
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let row_no = i + 1;
        let record = record?;
        if record.len() != width + 1 {
            return Err(Error::MalformedRow {
                row: row_no,
                column: record.len().min(width + 1),
                message: format!("expected {} columns, found {}", width + 1, record.len()),
            });
        }
        let mut features = Vec::with_capacity(width);
        for (col, (name, field)) in schema.feature_names.iter().zip(record.iter()).enumerate() {
            let value = match schema.categorical_maps.get(name) {
                Some(map) => *map.get(field).ok_or_else(|| Error::UnknownCategory {
                    value: field.to_string(),
                    feature: name.clone(),
                    row: row_no,
                })? as f64,
                None => {
                    let v: f64 = field.parse().map_err(|_| Error::MalformedRow {
                        row: row_no,
                        column: col + 1,
                        message: format!("'{field}' is not a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::MalformedRow {
                            row: row_no,
                            column: col + 1,
                            message: format!("'{field}' is not finite"),
                        });
                    }
                    v
                }
            };
            features.push(value);
        }
        let label_field = &record[width];
        let label = *schema
            .label_map
            .get(label_field)
            .ok_or_else(|| Error::UnknownLabel {
                label: label_field.to_string(),
                row: row_no,
            })?;
        rows.push(Record { features, label });
    }
    Dataset::new(schema.clone(), rows)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema, header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, schema, header)
}

/// Column bounds captured from a training set, applied to unseen vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
}

impl Normalizer {
    /// `(x - min) / (max - min)` per column; 0 where `min == max`.
    pub fn scale(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_min.iter().zip(&self.feature_max))
            .map(|(&v, (&lo, &hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    }

    /// Like [`Normalizer::scale`] but clamps into `[0, 1]` for values
    /// outside the bounds seen at fit time.
    pub fn scale_clamped(&self, x: &[f64]) -> Vec<f64> {
        self.scale(x).into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }
}

/// Binary selection over feature indices. Never all-zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct FeatureMask {
    bits: Vec<bool>,
}

impl FeatureMask {
    /// Builds a mask, setting one uniformly random bit if none is set.
    pub fn new<R: Rng + ?Sized>(mut bits: Vec<bool>, rng: &mut R) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Shape("feature mask must have at least one position".into()));
        }
        if !bits.iter().any(|&b| b) {
            let i = rng.gen_range(0..bits.len());
            bits[i] = true;
        }
        Ok(FeatureMask { bits })
    }

    /// Builds a mask from bits that already contain a set bit.
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::Shape("feature mask must select at least one feature".into()));
        }
        Ok(FeatureMask { bits })
    }

    pub fn all(len: usize) -> Result<Self> {
        Self::from_bits(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.bits
            .iter()
            .zip(x)
            .filter_map(|(&b, &v)| b.then_some(v))
            .collect()
    }
}

impl TryFrom<Vec<u8>> for FeatureMask {
    type Error = Error;

    fn try_from(raw: Vec<u8>) -> Result<Self> {
        let bits = raw
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Shape(format!("mask entries must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureMask::from_bits(bits)
    }
}

impl From<FeatureMask> for Vec<u8> {
    fn from(mask: FeatureMask) -> Self {
        mask.bits.into_iter().map(u8::from).collect()
    }
}

/// Synthetic dataset plus the indices of its informative columns.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    pub informative: Vec<usize>,
}

/// Shift of an attack class mean on the informative columns it owns, in
/// standard deviations.
pub const SYNTH_CLASS_SEPARATION: f64 = 3.0;

/// Class-conditional Gaussian columns followed by class-independent
/// uniform noise columns.
///
/// Row `i` belongs to class `i % n_classes`. Class 0 is the benign
/// baseline with every informative mean at 0. Attack class `c ≥ 1` owns
/// the informative columns `j` with `j % (n_classes − 1) == c − 1` and has
/// mean `3` on them (unit variance), so any two classes differ by at least
/// three standard deviations on at least one column. With two classes
/// every informative column separates them; with `n_informative + 1`
/// classes each informative column is the only one telling its attack
/// class apart from the baseline. Noise columns are uniform on `[0, 1)`.
/// Class 1 is the positive class.
pub fn synth_generate(
    n_rows: usize,
    n_informative: usize,
    n_noise: usize,
    n_classes: usize,
    seed: u64,
) -> Result<SynthData> {
    if n_rows == 0 || n_informative == 0 || n_classes < 2 {
        return Err(Error::Config(
            "synth_generate needs n_rows > 0, n_informative > 0 and n_classes >= 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let width = n_informative + n_noise;
    let rows = (0..n_rows)
        .map(|i| {
            let label = i % n_classes;
            let mut features = Vec::with_capacity(width);
            for j in 0..n_informative {
                let owned = label >= 1 && j % (n_classes - 1) == label - 1;
                let mean = if owned { SYNTH_CLASS_SEPARATION } else { 0.0 };
                features.push(mean + unit.sample(&mut rng));
            }
            for _ in 0..n_noise {
                features.push(rng.gen::<f64>());
            }
            Record { features, label }
        })
        .collect();
    let feature_names = (0..width)
        .map(|j| {
            if j < n_informative {
                format!("inf{j}")
            } else {
                format!("noise{}", j - n_informative)
            }
        })
        .collect();
    let label_map = (0..n_classes)
        .map(|c| {
            let name = match (c, n_classes) {
                (0, _) => "normal".to_string(),
                (1, 2) => "attack".to_string(),
                (c, _) => format!("attack{c}"),
            };
            (name, c)
        })
        .collect();
    let schema = FeatureSchema {
        feature_names,
        categorical_maps: BTreeMap::new(),
        label_map,
        positive_class: 1,
    };
    Ok(SynthData {
        dataset: Dataset::new(schema, rows)?,
        informative: (0..n_informative).collect(),
    })
}
