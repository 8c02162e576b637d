//! Dataset ingestion, train/test splitting, normalization, and projection.
//!
//! CSV rows are features followed by targets: the last `n_targets` columns
//! for regression, a single integer class column for classification.
//! Normalization statistics always come from the training split alone and
//! are applied unclamped to both splits, so paired method comparisons see
//! the identical pipeline.

use std::io;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Row-major n-by-p real targets.
    Real { y: Vec<f64>, per_row: usize },
    /// One class index per row; `classes` is fixed at load time so splits
    /// of the same file always agree on the label space.
    Labels { y: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real { y, per_row } => y.len() / per_row.max(&1),
            Targets::Labels { y, .. } => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major n-by-d features.
    pub x: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub targets: Targets,
    pub name: String,
}

impl Dataset {
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.d..(i + 1) * self.d]);
        }
        let targets = match &self.targets {
            Targets::Real { y, per_row } => {
                let mut out = Vec::with_capacity(idx.len() * per_row);
                for &i in idx {
                    out.extend_from_slice(&y[i * per_row..(i + 1) * per_row]);
                }
                Targets::Real { y: out, per_row: *per_row }
            }
            Targets::Labels { y, classes } => Targets::Labels {
                y: idx.iter().map(|&i| y[i]).collect(),
                classes: *classes,
            },
        };
        Dataset {
            x,
            n: idx.len(),
            d: self.d,
            targets,
            name: self.name.clone(),
        }
    }
}

/// Parse a rectangular numeric CSV from any reader. Errors carry the
/// 1-based data row index. Exposed separately from `load_csv` so malformed
/// byte streams can be thrown at it directly.
pub fn parse_csv(
    reader: impl io::Read,
    has_header: bool,
    n_targets: usize,
    classification: bool,
    name: &str,
) -> Result<Dataset> {
    let n_targets = if classification { 1 } else { n_targets };
    if n_targets == 0 {
        return Err(Error::Csv("need at least one target column".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut x = Vec::new();
    let mut y_real = Vec::new();
    let mut y_labels: Vec<usize> = Vec::new();
    let mut d = None;
    let mut n = 0usize;

    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Csv(format!("row {row}: {e}")))?;
        let cols = rec.len();
        if cols == 1 && rec.get(0) == Some("") {
            // A blank line parses as one empty field; skip it.
            continue;
        }
        if cols <= n_targets {
            return Err(Error::Csv(format!(
                "row {row}: {cols} columns but {n_targets} target column(s) plus features required"
            )));
        }
        let feat_cols = cols - n_targets;
        match d {
            None => d = Some(feat_cols),
            Some(dd) if dd != feat_cols => {
                return Err(Error::Csv(format!(
                    "row {row}: {feat_cols} feature columns, expected {dd}"
                )));
            }
            _ => {}
        }
        for c in 0..feat_cols {
            let cell = rec.get(c).unwrap();
            let v: f64 = cell.parse().map_err(|_| {
                Error::Csv(format!("row {row}: column {}: not a number: {cell:?}", c + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Csv(format!(
                    "row {row}: column {}: non-finite feature",
                    c + 1
                )));
            }
            x.push(v);
        }
        for c in feat_cols..cols {
            let cell = rec.get(c).unwrap();
            if classification {
                let v: i64 = cell.parse().map_err(|_| {
                    Error::Csv(format!(
                        "row {row}: column {}: not an integer label: {cell:?}",
                        c + 1
                    ))
                })?;
                if v < 0 {
                    return Err(Error::Csv(format!("row {row}: negative label {v}")));
                }
                y_labels.push(v as usize);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Csv(format!(
                        "row {row}: column {}: non-numeric target: {cell:?}",
                        c + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv(format!(
                        "row {row}: column {}: non-finite target",
                        c + 1
                    )));
                }
                y_real.push(v);
            }
        }
        n += 1;
    }

    if n == 0 {
        return Err(Error::Csv("no data rows".into()));
    }
    let d = d.unwrap();
    let targets = if classification {
        let classes = y_labels.iter().max().unwrap() + 1;
        Targets::Labels { y: y_labels, classes }
    } else {
        Targets::Real { y: y_real, per_row: n_targets }
    };
    Ok(Dataset {
        x,
        n,
        d,
        targets,
        name: name.to_string(),
    })
}

pub fn load_csv(
    path: &Path,
    has_header: bool,
    n_targets: usize,
    classification: bool,
) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_csv(io::BufReader::new(file), has_header, n_targets, classification, &name)
}

// ---- split and normalization -----------------------------------------------

/// Per-feature min/max from the training split plus target standardization
/// statistics (identity for classification).
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub feat_min: Vec<f64>,
    pub feat_max: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

impl Normalization {
    fn fit(train: &Dataset) -> Normalization {
        let (n, d) = (train.n, train.d);
        let mut feat_min = vec![f64::INFINITY; d];
        let mut feat_max = vec![f64::NEG_INFINITY; d];
        for i in 0..n {
            for j in 0..d {
                let v = train.x[i * d + j];
                feat_min[j] = feat_min[j].min(v);
                feat_max[j] = feat_max[j].max(v);
            }
        }
        let (y_mean, y_std) = match &train.targets {
            Targets::Real { y, per_row } => {
                let p = *per_row;
                let mut mean = vec![0.0; p];
                for row in y.chunks(p) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                let mut var = vec![0.0; p];
                for row in y.chunks(p) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let std = var
                    .iter()
                    .map(|s| {
                        let sd = (s / n as f64).sqrt();
                        // Constant targets: keep them untouched instead of
                        // dividing by zero.
                        if sd > 0.0 { sd } else { 1.0 }
                    })
                    .collect();
                (mean, std)
            }
            Targets::Labels { .. } => (Vec::new(), Vec::new()),
        };
        Normalization { feat_min, feat_max, y_mean, y_std }
    }

    /// Map raw features into the train-split [-1, 1] box. Out-of-range test
    /// values pass through unclamped; constant features map to 0.
    pub fn apply_features(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.feat_min.len();
        assert_eq!(x.len(), rows * d, "feature width mismatch");
        let mut out = Vec::with_capacity(x.len());
        for i in 0..rows {
            for j in 0..d {
                let (lo, hi) = (self.feat_min[j], self.feat_max[j]);
                let v = x[i * d + j];
                out.push(if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 });
            }
        }
        out
    }

    pub fn standardize_targets(&self, y: &[f64]) -> Vec<f64> {
        let p = self.y_mean.len();
        assert!(p > 0, "no target statistics");
        y.chunks(p)
            .flat_map(|row| {
                row.iter()
                    .zip(self.y_mean.iter().zip(&self.y_std))
                    .map(|(v, (m, s))| (v - m) / s)
            })
            .collect()
    }

    fn apply(&self, ds: &Dataset) -> Dataset {
        let x = self.apply_features(&ds.x, ds.n);
        let targets = match &ds.targets {
            Targets::Real { y, per_row } => Targets::Real {
                y: self.standardize_targets(y),
                per_row: *per_row,
            },
            labels => labels.clone(),
        };
        Dataset { x, targets, ..ds.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct SplitNormalized {
    /// Normalized training split.
    pub train: Dataset,
    /// Normalized test split (train statistics).
    pub test: Dataset,
    pub norm: Normalization,
    /// Original row indices of each split, for exporting raw rows.
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Shuffle by seed, split ceil(ratio * n) / rest, fit normalization on the
/// training rows, and normalize both splits. The test split is kept
/// nonempty by capping the training size at n - 1.
pub fn split_normalize(ds: &Dataset, ratio: f64, seed: u64) -> Result<SplitNormalized> {
    if ds.n < 2 {
        return Err(Error::Invalid(format!("need at least 2 rows to split, got {}", ds.n)));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio must be in (0,1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..ds.n).collect();
    let mut r = rng::rng_for(seed, &[stream::SPLIT]);
    idx.shuffle(&mut r);
    let n_train = ((ratio * ds.n as f64).ceil() as usize).clamp(1, ds.n - 1);
    let (train_idx, test_idx) = idx.split_at(n_train);
    let (train_idx, test_idx) = (train_idx.to_vec(), test_idx.to_vec());

    let train_raw = ds.subset(&train_idx);
    let test_raw = ds.subset(&test_idx);
    let norm = Normalization::fit(&train_raw);
    Ok(SplitNormalized {
        train: norm.apply(&train_raw),
        test: norm.apply(&test_raw),
        norm,
        train_idx,
        test_idx,
    })
}

// ---- principal component projection ----------------------------------------

/// Linear projection onto the top-k principal directions of the training
/// features, for high-dimensional inputs such as rasterized images.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Row-major k-by-d orthonormal component matrix.
    pub components: Vec<f64>,
    /// Rescales the projection to unit total variance on the training split,
    /// keeping typical pairwise distances near 1 at any k so the default
    /// kernel lengthscale stays in its sensitive range.
    pub scale: f64,
    pub k: usize,
    pub d: usize,
}

impl Pca {
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        assert_eq!(x.len(), rows * self.d, "projection width mismatch");
        let mut centered = x.to_vec();
        for i in 0..rows {
            for j in 0..self.d {
                centered[i * self.d + j] -= self.mean[j];
            }
        }
        // rows x d times d x k.
        let ct = linalg::transpose(&self.components, self.k, self.d);
        let mut out = linalg::matmul(&centered, &ct, rows, self.d, self.k);
        for v in &mut out {
            *v *= self.scale;
        }
        out
    }
}

/// Orthogonal iteration on the training covariance. Deterministic given the
/// seed; 200 power steps are far past convergence for the well-separated
/// spectra this is used on.
pub fn fit_pca(x: &[f64], n: usize, d: usize, k: usize, seed: u64) -> Result<Pca> {
    if k == 0 || k > d {
        return Err(Error::Invalid(format!("pca components {k} out of range 1..={d}")));
    }
    if n < 2 {
        return Err(Error::Invalid("pca needs at least 2 rows".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[i * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut xc = x.to_vec();
    for i in 0..n {
        for j in 0..d {
            xc[i * d + j] -= mean[j];
        }
    }
    let xct = linalg::transpose(&xc, n, d);
    let mut cov = linalg::matmul(&xct, &xc, d, n, d);
    for c in &mut cov {
        *c /= n as f64;
    }

    // d x k orthonormal start.
    let mut b = rng::normal_vec(&mut rng::rng_for(seed, &[stream::PCA]), d * k);
    orthonormalize_cols(&mut b, d, k)?;
    for _ in 0..200 {
        b = linalg::matmul(&cov, &b, d, d, k);
        orthonormalize_cols(&mut b, d, k)?;
    }
    let components = linalg::transpose(&b, d, k);

    let proj = linalg::matmul(&xc, &b, n, d, k);
    let total_var: f64 = proj.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let scale = if total_var > 0.0 { 1.0 / total_var.sqrt() } else { 1.0 };
    Ok(Pca { mean, components, scale, k, d })
}

/// Modified Gram-Schmidt on the columns of a d x k matrix.
fn orthonormalize_cols(b: &mut [f64], d: usize, k: usize) -> Result<()> {
    for c in 0..k {
        for prev in 0..c {
            let mut dot = 0.0;
            for i in 0..d {
                dot += b[i * k + c] * b[i * k + prev];
            }
            for i in 0..d {
                b[i * k + c] -= dot * b[i * k + prev];
            }
        }
        let mut norm = 0.0;
        for i in 0..d {
            norm += b[i * k + c] * b[i * k + c];
        }
        let norm = norm.sqrt();
        if norm < 1e-12 {
            return Err(Error::NonFinite(
                "rank-deficient feature covariance in projection".into(),
            ));
        }
        for i in 0..d {
            b[i * k + c] /= norm;
        }
    }
    Ok(())
}
