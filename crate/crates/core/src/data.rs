//! Labeled feature datasets: synthetic confusable Gaussian blobs, the feature
//! CSV format, stratified splitting, and train-fitted standardization.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, RngSeed};

/// Feature matrix plus 0-based integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Layout of a synthetic dataset of isotropic Gaussian classes, some pairs of
/// which are deliberately placed on top of each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dimension: usize,
    pub class_centers: Matrix,
    pub spread: f64,
    pub overlap_pairs: Vec<(usize, usize)>,
}

/// Centers of classes in different overlap groups sit at least this many
/// spreads apart.
pub const SEPARATION_SPREADS: f64 = 6.0;

impl BlobSpec {
    /// Places class centers deterministically.
    ///
    /// Each overlap group (a pair, or a lone class) gets its own coordinate
    /// axis with an anchor at distance `L` from the origin, so anchors are
    /// `L·√2 = 8·spread` apart. The second class of a pair sits one spread
    /// further out along the same axis.
    pub fn new(
        num_classes: usize,
        samples_per_class: usize,
        dimension: usize,
        spread: f64,
        overlap_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        check_pairs(num_classes, &overlap_pairs)?;
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(Error::Config(format!(
                "spread must be positive, got {spread}"
            )));
        }
        let groups = num_classes - overlap_pairs.len();
        if groups > dimension {
            return Err(Error::Config(format!(
                "{groups} separated class groups cannot be placed in {dimension} dimensions"
            )));
        }

        let anchor = 8.0 * spread / std::f64::consts::SQRT_2;
        let mut centers = Matrix::zeros(num_classes, dimension);
        let mut axis_of = vec![None; num_classes];
        let mut next_axis = 0;
        for c in 0..num_classes {
            if axis_of[c].is_some() {
                continue;
            }
            axis_of[c] = Some(next_axis);
            centers.set(c, next_axis, anchor);
            if let Some(partner) = partner_of(c, &overlap_pairs) {
                axis_of[partner] = Some(next_axis);
                centers.set(partner, next_axis, anchor + spread);
            }
            next_axis += 1;
        }

        let spec = Self {
            num_classes,
            samples_per_class,
            dimension,
            class_centers: centers,
            spread,
            overlap_pairs,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the geometric contract: paired centers within one spread,
    /// every other pair at least [`SEPARATION_SPREADS`] spreads apart.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config(format!(
                "spread must be positive, got {}",
                self.spread
            )));
        }
        if self.class_centers.rows() != self.num_classes
            || self.class_centers.cols() != self.dimension
        {
            return Err(Error::Config(format!(
                "centers are {}x{}, expected {}x{}",
                self.class_centers.rows(),
                self.class_centers.cols(),
                self.num_classes,
                self.dimension
            )));
        }
        check_pairs(self.num_classes, &self.overlap_pairs)?;
        // Small slack for the rounding in the anchor placement.
        let tol = 1e-9 * self.spread;
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                let d = distance(self.class_centers.row(a), self.class_centers.row(b));
                let paired = partner_of(a, &self.overlap_pairs) == Some(b);
                if paired && d > self.spread + tol {
                    return Err(Error::Config(format!(
                        "overlap pair ({a}, {b}) is {d:.4} apart, more than one spread"
                    )));
                }
                if !paired && d < SEPARATION_SPREADS * self.spread - tol {
                    return Err(Error::Config(format!(
                        "classes {a} and {b} are only {d:.4} apart"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_pairs(num_classes: usize, pairs: &[(usize, usize)]) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut used = vec![false; num_classes];
    for &(a, b) in pairs {
        if a >= num_classes || b >= num_classes || a == b {
            return Err(Error::Config(format!(
                "overlap pair ({a}, {b}) must name two distinct classes below {num_classes}"
            )));
        }
        // A class close to two others would drag those two within two
        // spreads of each other, which breaks the separation contract.
        for c in [a, b] {
            if used[c] {
                return Err(Error::Config(format!(
                    "class {c} appears in more than one overlap pair"
                )));
            }
            used[c] = true;
        }
    }
    Ok(())
}

fn partner_of(c: usize, pairs: &[(usize, usize)]) -> Option<usize> {
    pairs.iter().find_map(|&(a, b)| {
        if a == c {
            Some(b)
        } else if b == c {
            Some(a)
        } else {
            None
        }
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Draws `samples_per_class` points per class, grouped by class in label order.
pub fn generate_confusable_blobs(spec: &BlobSpec, seed: RngSeed) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = seed.rng();
    let noise =
        Normal::new(0.0, spec.spread).map_err(|e| Error::Config(format!("invalid spread: {e}")))?;
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dimension);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.num_classes {
        let center = spec.class_centers.row(c);
        for _ in 0..spec.samples_per_class {
            data.extend(center.iter().map(|&mu| mu + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(n, spec.dimension, data)?;
    LabeledDataset::new(features, labels, spec.num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    /// 70:15:15
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl SplitSpec {
    pub fn new(train_fraction: f64, val_fraction: f64, test_fraction: f64) -> Result<Self> {
        let spec = Self {
            train_fraction,
            val_fraction,
            test_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::Config(format!(
                "split fractions must each lie in (0, 1), got {fractions:?}"
            )));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "split fractions sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

/// Sorted sample indices of each part of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class split. Validation and test take `floor(n_c · fraction)` samples
/// of each class; the rounding leftover stays in train.
pub fn stratified_split_indices(
    ds: &LabeledDataset,
    spec: &SplitSpec,
    seed: RngSeed,
) -> Result<SplitIndices> {
    spec.validate()?;
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = seed.rng();
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Config(format!(
                "class {class} has {} samples; at least 3 are needed to split",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        // The epsilon keeps e.g. 100 × 0.15 from flooring to 14.
        let n_val = (n * spec.val_fraction + 1e-9).floor() as usize;
        let n_test = (n * spec.test_fraction + 1e-9).floor() as usize;
        out.val.extend_from_slice(&members[..n_val]);
        out.test.extend_from_slice(&members[n_val..n_val + n_test]);
        out.train.extend_from_slice(&members[n_val + n_test..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

pub fn stratified_split(
    ds: &LabeledDataset,
    spec: &SplitSpec,
    seed: RngSeed,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let idx = stratified_split_indices(ds, spec, seed)?;
    Ok((
        ds.subset(&idx.train),
        ds.subset(&idx.val),
        ds.subset(&idx.test),
    ))
}

/// Per-column affine map fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    /// `None` marks a zero-variance column, which is only centered.
    scale: Vec<Option<f64>>,
}

impl Standardizer {
    pub fn fit(train: &LabeledDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("cannot standardize on an empty split".into()));
        }
        let n = train.len() as f64;
        let d = train.dimension();
        let mut mean = vec![0.0; d];
        for row in train.features().iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for row in train.features().iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let std = (s / n).sqrt();
                (std > 1e-12 * m.abs().max(1.0)).then_some(std)
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        if ds.dimension() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardizer fitted on {} features applied to {}",
                self.mean.len(),
                ds.dimension()
            )));
        }
        let mut features = ds.features().clone();
        let d = self.mean.len();
        for (j, v) in features.data_mut().iter_mut().enumerate() {
            let col = j % d;
            *v = match self.scale[col] {
                Some(s) => (*v - self.mean[col]) / s,
                None => 0.0,
            };
        }
        LabeledDataset::new(features, ds.labels().to_vec(), ds.num_classes())
    }
}

/// Standardizes `train` with its own statistics and every dataset in
/// `others` with the same (train) transform.
pub fn standardize(
    train: &LabeledDataset,
    others: &[&LabeledDataset],
) -> Result<(LabeledDataset, Vec<LabeledDataset>)> {
    let s = Standardizer::fit(train)?;
    let rest = others.iter().map(|ds| s.apply(ds)).collect::<Result<_>>()?;
    Ok((s.apply(train)?, rest))
}

/// Reads the feature CSV format: header `f0,...,f{d-1},label`, then one
/// sample per line. Row numbers in errors are 1-based file lines.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .quoting(false)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 || headers.get(headers.len() - 1) != Some("label") {
        return Err(Error::Parse {
            row: 1,
            message: "header must list feature columns followed by `label`".into(),
        });
    }
    let d = headers.len() - 1;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != d + 1 {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        for (j, cell) in record.iter().take(d).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {j}: `{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column {j}: non-finite value"),
                });
            }
            data.push(v);
        }
        let raw = &record[d];
        let label: i64 = raw.parse().map_err(|_| Error::Parse {
            row,
            message: format!("label `{raw}` is not an integer"),
        })?;
        if label < 0 {
            return Err(Error::Parse {
                row,
                message: format!("negative label {label}"),
            });
        }
        labels.push(label as usize);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            row: 2,
            message: "no data rows".into(),
        });
    }
    let num_classes = 1 + labels.iter().copied().max().unwrap_or(0);
    if num_classes < 2 {
        return Err(Error::Parse {
            row: 2,
            message: "labels span a single class".into(),
        });
    }
    let features = Matrix::from_vec(labels.len(), d, data)?;
    LabeledDataset::new(features, labels, num_classes)
}

/// Writes `ds` in the feature CSV format with 6 decimal places.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv(ds, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_csv(ds: &LabeledDataset, w: &mut impl Write) -> std::io::Result<()> {
    for j in 0..ds.dimension() {
        write!(w, "f{j},")?;
    }
    writeln!(w, "label")?;
    for i in 0..ds.len() {
        let (x, y) = ds.sample(i);
        for v in x {
            write!(w, "{v:.6},")?;
        }
        writeln!(w, "{y}")?;
    }
    Ok(())
}
