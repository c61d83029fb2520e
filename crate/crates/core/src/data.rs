//! Synthetic dataset generation, CSV ingestion/serialization, and
//! deterministic stratified splitting.

use crate::error::{Error, Result};
use crate::seeding;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One labeled example: feature slice plus class index.
pub type Example<'a> = (&'a [f64], usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Cal,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Cal, Split::Test];
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
    pub generator: Option<GaussianMixtureParams>,
    /// Original label values when loaded from CSV (dense index -> raw label).
    pub label_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMixtureParams {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub class_separation: f64,
    pub within_class_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    k: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, k: usize, meta: DatasetMeta) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != labels.len() {
            return Err(Error::DimMismatch {
                expected: features.len(),
                got: labels.len(),
            });
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::InvalidParam("ragged feature rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel {
                label: bad,
                num_classes: k,
            });
        }
        let n = features.len();
        Ok(Self {
            features,
            labels,
            splits: vec![Split::Train; n],
            k,
            meta,
        })
    }

    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn label(&self, row: usize) -> usize {
        self.labels[row]
    }

    pub fn features_of(&self, row: usize) -> &[f64] {
        &self.features[row]
    }

    pub fn split_of(&self, row: usize) -> Split {
        self.splits[row]
    }

    /// Row indices of one split, in ascending row order.
    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn examples(&self, rows: &[usize]) -> Vec<Example<'_>> {
        rows.iter()
            .map(|&i| (self.features[i].as_slice(), self.labels[i]))
            .collect()
    }

    pub fn examples_in(&self, split: Split) -> Vec<Example<'_>> {
        self.examples(&self.rows_in(split))
    }

    /// A new dataset containing only the given rows (all marked Train).
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Dataset::new(
            rows.iter().map(|&i| self.features[i].clone()).collect(),
            rows.iter().map(|&i| self.labels[i]).collect(),
            self.k,
            self.meta.clone(),
        )
    }

    /// Stratified-by-class random split assignment, deterministic under seed.
    /// Fractions are (train, val, cal, test) and must sum to 1 within 1e-9.
    pub fn assign_splits(&mut self, fractions: [f64; 4], seed: u64) -> Result<()> {
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::InvalidParam(format!(
                "split fractions must be nonnegative and sum to 1, got {fractions:?}"
            )));
        }
        let mut rng = seeding::stream(seed, "data.split", 0);
        for class in 0..self.k {
            let mut rows: Vec<usize> = (0..self.n()).filter(|&i| self.labels[i] == class).collect();
            if rows.is_empty() {
                return Err(Error::ClassTooSmall { class, rows: 0 });
            }
            rows.shuffle(&mut rng);
            let counts = proportional_counts(rows.len(), &fractions);
            let mut cursor = 0;
            for (split, &count) in Split::ALL.iter().zip(&counts) {
                for &row in &rows[cursor..cursor + count] {
                    self.splits[row] = *split;
                }
                cursor += count;
            }
        }
        Ok(())
    }

    /// Write as CSV: header `f0..f{d-1},label`, 17 significant digits per
    /// feature so the decimal text round-trips the f64 exactly.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        let d = self.dim();
        let header: Vec<String> = (0..d)
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            let mut fields: Vec<String> =
                self.features[i].iter().map(|v| format!("{v:.16e}")).collect();
            fields.push(self.labels[i].to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Largest-remainder apportionment: per-split counts deviate from the
/// requested proportion by less than one row.
fn proportional_counts(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(4);
    let mut assigned = 0;
    for (i, &f) in fractions.iter().enumerate() {
        let exact = f * n as f64;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders.push((i, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Balanced Gaussian mixture: class means at radius
/// `class_separation * within_class_scale` along random orthonormal
/// directions, isotropic noise of the given scale.
pub fn gen_gaussian_mixture(params: &GaussianMixtureParams, seed: u64) -> Result<Dataset> {
    let GaussianMixtureParams {
        k,
        d,
        n,
        class_separation,
        within_class_scale,
    } = *params;
    if k < 2 || d < 1 || n < k {
        return Err(Error::InvalidParam(format!(
            "need k >= 2, d >= 1, n >= k; got k={k}, d={d}, n={n}"
        )));
    }
    if class_separation < 0.0 || within_class_scale <= 0.0 {
        return Err(Error::InvalidParam(
            "class_separation must be >= 0 and within_class_scale > 0".into(),
        ));
    }
    let mut rng = seeding::stream(seed, "data.gen", 0);

    // Random directions, orthonormalized while the dimension allows it.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if means.len() < d {
            for prev in &means {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::InvalidParam("degenerate mean direction".into()));
        }
        for x in &mut v {
            *x /= norm;
        }
        means.push(v);
    }
    let radius = class_separation * within_class_scale;

    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k; // balanced up to remainder
        let row: Vec<f64> = (0..d)
            .map(|j| {
                radius * means[class][j]
                    + within_class_scale * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        features.push(row);
        labels.push(class);
    }
    Dataset::new(
        features,
        labels,
        k,
        DatasetMeta {
            name: "gaussian_mixture".into(),
            seed,
            generator: Some(params.clone()),
            label_names: None,
        },
    )
}

/// Column schema for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
}

impl CsvSchema {
    /// The schema written by `save_csv`: `f0..f{d-1}` plus `label`.
    pub fn default_for_dim(d: usize) -> Self {
        Self {
            feature_columns: (0..d).map(|j| format!("f{j}")).collect(),
            label_column: "label".into(),
        }
    }
}

/// Parse a dataset from CSV. Labels are re-indexed densely `0..k-1` in
/// first-appearance order; the original values are kept in the metadata.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(std::io::BufReader::new(file));
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing CSV column '{name}'")))
    };
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    let label_idx = col_index(&schema.label_column)?;

    let mut features = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (rec_no, record) in reader.records().enumerate() {
        let record = record?;
        let line = rec_no + 2; // header is line 1
        let mut row = Vec::with_capacity(feature_idx.len());
        for (&idx, name) in feature_idx.iter().zip(&schema.feature_columns) {
            let field = record.get(idx).ok_or_else(|| Error::CsvData {
                line,
                column: name.clone(),
                msg: "missing field".into(),
            })?;
            let value: f64 = field.trim().parse().map_err(|_| Error::CsvData {
                line,
                column: name.clone(),
                msg: format!("not a number: '{field}'"),
            })?;
            row.push(value);
        }
        let label = record.get(label_idx).ok_or_else(|| Error::CsvData {
            line,
            column: schema.label_column.clone(),
            msg: "missing field".into(),
        })?;
        features.push(row);
        raw_labels.push(label.trim().to_string());
    }
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut label_names: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(raw_labels.len());
    for raw in &raw_labels {
        let idx = match label_names.iter().position(|l| l == raw) {
            Some(i) => i,
            None => {
                label_names.push(raw.clone());
                label_names.len() - 1
            }
        };
        labels.push(idx);
    }
    let k = label_names.len();
    Dataset::new(
        features,
        labels,
        k,
        DatasetMeta {
            name: path.display().to_string(),
            seed: 0,
            generator: None,
            label_names: Some(label_names),
        },
    )
}
