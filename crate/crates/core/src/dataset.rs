//! Dataset bundle: features, labels, class attributes and split definitions.
//!
//! A bundle is a directory holding
//!
//! * `features.bin`   – magic `BZSLF1\0\0`, u64 N, u64 D, N×D f32 row-major
//! * `attributes.bin` – magic `BZSLA1\0\0`, u64 C, u64 A, C×A f32 row-major
//! * `labels.txt`     – N lines, one class id per line
//! * `splits.json`    – `seen_train`, `unseen`, optional `val_unseen`, `test_index`
//! * `classes.txt`    – optional, C lines of class names
//!
//! All integers are little-endian.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURES_MAGIC: &[u8; 8] = b"BZSLF1\0\0";
pub const ATTRIBUTES_MAGIC: &[u8; 8] = b"BZSLA1\0\0";

const FEATURES_FILE: &str = "features.bin";
const ATTRIBUTES_FILE: &str = "attributes.bin";
const LABELS_FILE: &str = "labels.txt";
const SPLITS_FILE: &str = "splits.json";
const CLASSES_FILE: &str = "classes.txt";

/// Immutable, validated collection of image features and class attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    n_rows: usize,
    dim: usize,
    labels: Vec<usize>,
    attributes: Vec<f32>,
    n_classes: usize,
    attr_dim: usize,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset from row-major feature and attribute buffers.
    pub fn new(
        features: Vec<f32>,
        dim: usize,
        labels: Vec<usize>,
        attributes: Vec<f32>,
        attr_dim: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if dim == 0 || attr_dim == 0 {
            return Err(Error::invalid("feature and attribute dimensions must be positive"));
        }
        if !features.len().is_multiple_of(dim) || !attributes.len().is_multiple_of(attr_dim) {
            return Err(Error::invalid("buffer length is not a multiple of the row width"));
        }
        let n_rows = features.len() / dim;
        let n_classes = attributes.len() / attr_dim;
        if n_rows == 0 {
            return Err(Error::invalid("dataset has no rows"));
        }
        if labels.len() != n_rows {
            return Err(Error::invalid(format!(
                "{} labels for {} feature rows",
                labels.len(),
                n_rows
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        if let Some(pos) = attributes.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite attribute value at class {}, column {}",
                pos / attr_dim,
                pos % attr_dim
            )));
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    classes: n_classes,
                });
            }
        }
        for c in 0..n_classes {
            let attr = &attributes[c * attr_dim..(c + 1) * attr_dim];
            if attr.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("attribute row of class {c} is all zero")));
            }
        }
        if let Some(names) = &class_names {
            if names.len() != n_classes {
                return Err(Error::invalid(format!(
                    "{} class names for {} classes",
                    names.len(),
                    n_classes
                )));
            }
        }
        Ok(Self {
            features,
            n_rows,
            dim,
            labels,
            attributes,
            n_classes,
            attr_dim,
            class_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn attributes(&self) -> &[f32] {
        &self.attributes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn attribute(&self, class: usize) -> &[f32] {
        &self.attributes[class * self.attr_dim..(class + 1) * self.attr_dim]
    }

    pub fn row_f64(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.row(i).iter().map(|&v| f64::from(v)))
    }

    /// Gathers the given rows into an `n × D` matrix.
    pub fn rows_matrix(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.dim, |r, c| f64::from(self.row(rows[r])[c]))
    }

    /// Row indices grouped by label.
    pub fn rows_by_class(&self, rows: &[usize]) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &r in rows {
            out.entry(self.labels[r]).or_default().push(r);
        }
        out
    }

    /// New dataset containing only `rows` (in the given order); class
    /// attributes are kept unchanged.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Dataset::new(
            features,
            self.dim,
            labels,
            self.attributes.clone(),
            self.attr_dim,
            self.class_names.clone(),
        )
    }
}

/// Seen/unseen class partition plus optional validation classes and an
/// explicit test-row list.
///
/// Rows listed in `test_index` (or, when absent, every row of an unseen
/// class) form the test set; all other rows are training rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_train: Vec<usize>,
    pub unseen: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_unseen: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_index: Option<Vec<usize>>,
}

fn sorted_unique(v: &mut Vec<usize>) {
    v.sort_unstable();
    v.dedup();
}

impl SplitSpec {
    pub fn new(seen_train: Vec<usize>, unseen: Vec<usize>) -> Self {
        let mut s = Self {
            seen_train,
            unseen,
            val_unseen: None,
            test_index: None,
        };
        s.normalize();
        s
    }

    pub fn with_val_unseen(mut self, val: Vec<usize>) -> Self {
        self.val_unseen = Some(val);
        self.normalize();
        self
    }

    pub fn with_test_index(mut self, test_index: Vec<usize>) -> Self {
        self.test_index = Some(test_index);
        self
    }

    /// Sorts and deduplicates the class sets; `test_index` keeps its order.
    pub fn normalize(&mut self) {
        sorted_unique(&mut self.seen_train);
        sorted_unique(&mut self.unseen);
        if let Some(v) = self.val_unseen.as_mut() {
            sorted_unique(v);
        }
    }

    /// Checks class ids and row indices against `dataset` and the structural
    /// split invariants (disjoint seen/unseen, validation classes drawn from
    /// the seen pool).
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        let c = dataset.n_classes();
        for (name, set) in [("seen_train", &self.seen_train), ("unseen", &self.unseen)] {
            if let Some(&bad) = set.iter().find(|&&id| id >= c) {
                return Err(Error::invalid(format!("{name} class {bad} out of range ({c} classes)")));
            }
        }
        let seen: BTreeSet<usize> = self.seen_train.iter().copied().collect();
        if let Some(&both) = self.unseen.iter().find(|id| seen.contains(id)) {
            return Err(Error::invalid(format!("class {both} is both seen and unseen")));
        }
        if let Some(val) = &self.val_unseen {
            if let Some(&bad) = val.iter().find(|id| !seen.contains(id)) {
                return Err(Error::invalid(format!(
                    "validation class {bad} is not in the seen pool"
                )));
            }
        }
        if let Some(test) = &self.test_index {
            let mut hit = vec![false; dataset.n_rows()];
            for &r in test {
                if r >= dataset.n_rows() {
                    return Err(Error::invalid(format!(
                        "test row {r} out of range ({} rows)",
                        dataset.n_rows()
                    )));
                }
                if std::mem::replace(&mut hit[r], true) {
                    return Err(Error::invalid(format!("test row {r} listed twice")));
                }
            }
        }
        Ok(())
    }

    /// Test rows in ascending order.
    pub fn test_rows(&self, dataset: &Dataset) -> Vec<usize> {
        match &self.test_index {
            Some(idx) => {
                let mut v = idx.clone();
                v.sort_unstable();
                v
            }
            None => {
                let unseen: BTreeSet<usize> = self.unseen.iter().copied().collect();
                (0..dataset.n_rows())
                    .filter(|&r| unseen.contains(&dataset.labels()[r]))
                    .collect()
            }
        }
    }

    fn test_mask(&self, dataset: &Dataset) -> Vec<bool> {
        let mut mask = vec![false; dataset.n_rows()];
        for r in self.test_rows(dataset) {
            mask[r] = true;
        }
        mask
    }

    /// Every row that is not a test row, in ascending order.
    pub fn training_rows(&self, dataset: &Dataset) -> Vec<usize> {
        let mask = self.test_mask(dataset);
        (0..dataset.n_rows()).filter(|&r| !mask[r]).collect()
    }

    /// Training rows whose class is in `seen_train`.
    pub fn seen_training_rows(&self, dataset: &Dataset) -> Vec<usize> {
        let seen: BTreeSet<usize> = self.seen_train.iter().copied().collect();
        self.training_rows(dataset)
            .into_iter()
            .filter(|&r| seen.contains(&dataset.labels()[r]))
            .collect()
    }

    /// Seen classes that are not reserved for validation.
    pub fn seen_train_only(&self) -> Vec<usize> {
        let val: BTreeSet<usize> = self.val_unseen.iter().flatten().copied().collect();
        self.seen_train.iter().copied().filter(|c| !val.contains(c)).collect()
    }

    /// Derives the tuning protocol: the original test rows are dropped, the
    /// validation classes play the role of unseen classes, and the last
    /// `holdout` fraction of each remaining seen class's training rows is
    /// held out for measuring seen accuracy.
    pub fn validation_view(&self, dataset: &Dataset, holdout: f64) -> Result<(Dataset, SplitSpec)> {
        let val = match &self.val_unseen {
            Some(v) if !v.is_empty() => v.clone(),
            _ => return Err(Error::invalid("split has no validation classes (val_unseen)")),
        };
        if !(0.0..1.0).contains(&holdout) {
            return Err(Error::invalid("holdout fraction must lie in [0, 1)"));
        }
        let seen = self.seen_train_only();
        let keep = self.training_rows(dataset);
        let sub = dataset.subset_rows(&keep)?;
        let all: Vec<usize> = (0..sub.n_rows()).collect();
        let by_class = sub.rows_by_class(&all);
        let val_set: BTreeSet<usize> = val.iter().copied().collect();
        let mut test = Vec::new();
        for (class, rows) in &by_class {
            if val_set.contains(class) {
                test.extend_from_slice(rows);
            } else if seen.binary_search(class).is_ok() {
                let n_out = ((rows.len() as f64) * holdout).round() as usize;
                let n_out = n_out.min(rows.len().saturating_sub(1));
                test.extend_from_slice(&rows[rows.len() - n_out..]);
            }
        }
        test.sort_unstable();
        let split = SplitSpec::new(seen, val).with_test_index(test);
        Ok((sub, split))
    }
}

/// Per-class training-row census of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    /// Training-row count for every class of the dataset.
    pub train_counts: BTreeMap<usize, usize>,
    /// Test-row count for every class of the dataset.
    pub test_counts: BTreeMap<usize, usize>,
    pub n_seen_train_only: usize,
    pub n_val_unseen: usize,
    pub n_unseen: usize,
    /// Unseen classes that have at least one training row.
    pub violations: Vec<usize>,
    /// Seen classes with no training rows.
    pub empty_seen: Vec<usize>,
}

pub fn validate_split(dataset: &Dataset, splits: &SplitSpec) -> SplitReport {
    let mut train_counts: BTreeMap<usize, usize> = (0..dataset.n_classes()).map(|c| (c, 0)).collect();
    let mut test_counts = train_counts.clone();
    let mask = splits.test_mask(dataset);
    for (r, &label) in dataset.labels().iter().enumerate() {
        let counts = if mask[r] { &mut test_counts } else { &mut train_counts };
        *counts.entry(label).or_default() += 1;
    }
    let violations = splits
        .unseen
        .iter()
        .copied()
        .filter(|c| train_counts.get(c).copied().unwrap_or(0) > 0)
        .collect();
    let empty_seen = splits
        .seen_train
        .iter()
        .copied()
        .filter(|c| train_counts.get(c).copied().unwrap_or(0) == 0)
        .collect();
    SplitReport {
        train_counts,
        test_counts,
        n_seen_train_only: splits.seen_train_only().len(),
        n_val_unseen: splits.val_unseen.as_ref().map_or(0, Vec::len),
        n_unseen: splits.unseen.len(),
        violations,
        empty_seen,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path, magic: &[u8; 8]) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = read_file(path)?;
    if bytes.len() < 24 {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(path, 0, "bad magic"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, 8, "shape overflows"))?;
    let payload = &bytes[24..];
    if payload.len() as u64 != count {
        return Err(Error::format(
            path,
            24,
            format!(
                "header declares {rows}x{cols} f32 values ({count} bytes) but payload has {} bytes",
                payload.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity((rows * cols) as usize);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(path, 24 + 4 * i as u64, "non-finite value"));
        }
        values.push(v);
    }
    Ok((values, rows as usize, cols as usize))
}

fn write_matrix(path: &Path, magic: &[u8; 8], values: &[f32], rows: usize, cols: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 4 * values.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<(Dataset, SplitSpec)> {
    let dir = dir.as_ref();
    let fpath = dir.join(FEATURES_FILE);
    let (features, n, d) = read_matrix(&fpath, FEATURES_MAGIC)?;
    let apath = dir.join(ATTRIBUTES_FILE);
    let (attributes, c, a) = read_matrix(&apath, ATTRIBUTES_MAGIC)?;
    if d == 0 || a == 0 {
        let p = if d == 0 { &fpath } else { &apath };
        return Err(Error::format(p, 16, "zero-width rows"));
    }

    let lpath = dir.join(LABELS_FILE);
    let lines = read_lines(&lpath)?;
    if lines.len() != n {
        return Err(Error::format(
            &lpath,
            lines.len() as u64,
            format!("{} labels for {n} feature rows", lines.len()),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.iter().enumerate() {
        let label: usize = line
            .trim()
            .parse()
            .map_err(|_| Error::format(&lpath, i as u64 + 1, format!("not a class id: {line:?}")))?;
        if label >= c {
            return Err(Error::format(
                &lpath,
                i as u64 + 1,
                format!("label out of range: {label} (classes: {c})"),
            ));
        }
        labels.push(label);
    }

    let cpath = dir.join(CLASSES_FILE);
    let class_names = if cpath.exists() {
        let names = read_lines(&cpath)?;
        if names.len() != c {
            return Err(Error::format(
                &cpath,
                names.len() as u64,
                format!("{} names for {c} classes", names.len()),
            ));
        }
        Some(names)
    } else {
        None
    };

    let dataset = Dataset::new(features, d, labels, attributes, a, class_names)?;

    let spath = dir.join(SPLITS_FILE);
    let text = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let mut splits: SplitSpec =
        serde_json::from_str(&text).map_err(|e| Error::format(&spath, e.line() as u64, e.to_string()))?;
    splits.normalize();
    splits
        .check(&dataset)
        .map_err(|e| Error::format(&spath, 0, e.to_string()))?;
    Ok((dataset, splits))
}

/// Writes a bundle directory (created if missing) that `load_bundle` reads
/// back exactly.
pub fn save_bundle(dataset: &Dataset, splits: &SplitSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix(
        &dir.join(FEATURES_FILE),
        FEATURES_MAGIC,
        dataset.features(),
        dataset.n_rows(),
        dataset.dim(),
    )?;
    write_matrix(
        &dir.join(ATTRIBUTES_FILE),
        ATTRIBUTES_MAGIC,
        dataset.attributes(),
        dataset.n_classes(),
        dataset.attr_dim(),
    )?;
    let mut labels = String::with_capacity(dataset.n_rows() * 3);
    for l in dataset.labels() {
        labels.push_str(&l.to_string());
        labels.push('\n');
    }
    let lpath = dir.join(LABELS_FILE);
    fs::write(&lpath, labels).map_err(|e| Error::io(&lpath, e))?;
    let spath = dir.join(SPLITS_FILE);
    let json = serde_json::to_string_pretty(splits).expect("split spec serializes");
    fs::write(&spath, json).map_err(|e| Error::io(&spath, e))?;
    let cpath = dir.join(CLASSES_FILE);
    match dataset.class_names() {
        Some(names) => {
            let mut text = names.join("\n");
            text.push('\n');
            fs::write(&cpath, text).map_err(|e| Error::io(&cpath, e))?;
        }
        None if cpath.exists() => fs::remove_file(&cpath).map_err(|e| Error::io(&cpath, e))?,
        None => {}
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::format(path, line, e.to_string())
}

fn parse_f32(path: &Path, line: u64, field: &str) -> Result<f32> {
    let v: f32 = field
        .trim()
        .parse()
        .map_err(|_| Error::format(path, line, format!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::format(path, line, "non-finite value"));
    }
    Ok(v)
}

/// Imports CSV files into a dataset.
///
/// The features file has a header row; its first column holds the integer
/// class label and the remaining columns the feature values. The attributes
/// file has a header row; its first column holds the class name and row `c`
/// (after the header) describes class `c`.
pub fn import_csv(features_csv: &Path, attributes_csv: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(features_csv).map_err(|e| csv_err(features_csv, e))?;
    let width = rdr.headers().map_err(|e| csv_err(features_csv, e))?.len();
    if width < 2 {
        return Err(Error::format(
            features_csv,
            1,
            "need a label column and at least one feature",
        ));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(features_csv, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::format(features_csv, line, format!("not a class id: {:?}", &rec[0])))?;
        labels.push(label);
        for field in rec.iter().skip(1) {
            features.push(parse_f32(features_csv, line, field)?);
        }
    }

    let mut rdr = csv::Reader::from_path(attributes_csv).map_err(|e| csv_err(attributes_csv, e))?;
    let awidth = rdr.headers().map_err(|e| csv_err(attributes_csv, e))?.len();
    if awidth < 2 {
        return Err(Error::format(
            attributes_csv,
            1,
            "need a class column and at least one attribute",
        ));
    }
    let mut attributes = Vec::new();
    let mut names = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(attributes_csv, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        names.push(rec[0].trim().to_owned());
        for field in rec.iter().skip(1) {
            attributes.push(parse_f32(attributes_csv, line, field)?);
        }
    }
    Dataset::new(features, width - 1, labels, attributes, awidth - 1, Some(names))
}

/// Converts CSV inputs plus a `splits.json` into a bundle directory.
pub fn convert_csv(
    features_csv: &Path,
    attributes_csv: &Path,
    splits_json: &Path,
    out_dir: &Path,
) -> Result<(Dataset, SplitSpec)> {
    let dataset = import_csv(features_csv, attributes_csv)?;
    let text = fs::read_to_string(splits_json).map_err(|e| Error::io(splits_json, e))?;
    let mut splits: SplitSpec =
        serde_json::from_str(&text).map_err(|e| Error::format(splits_json, e.line() as u64, e.to_string()))?;
    splits.normalize();
    splits.check(&dataset)?;
    save_bundle(&dataset, &splits, out_dir)?;
    Ok((dataset, splits))
}

/// Paths of the files making up a bundle directory.
pub fn bundle_files(dir: &Path) -> Vec<PathBuf> {
    [FEATURES_FILE, ATTRIBUTES_FILE, LABELS_FILE, SPLITS_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}
