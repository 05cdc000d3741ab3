//! LIBSVM ingestion, standardization, one-hot labels and synthetic Gaussian
//! data.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, uniform_matrix, RngStream, SpdMatrix};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    /// File path or a description of the generator.
    pub source: String,
    pub standardized: bool,
    /// Columns left unscaled by [`standardize`] because their spread is zero.
    pub zero_variance_columns: Vec<usize>,
    pub permutation_seed: Option<u64>,
}

/// Dense design matrix with one label (or scalar target) per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            meta: DatasetMeta {
                source: source.into(),
                ..DatasetMeta::default()
            },
        })
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Labels as an `n×1` target matrix.
    pub fn target_column(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.labels.len(), 1, &self.labels)
    }

    fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Parses LIBSVM text: one `label idx:val ...` line per row, 1-based strictly
/// ascending indices, blank lines skipped.
pub fn parse_libsvm(text: &str) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut entries: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut dim = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |message: String| Error::Parse { line: lineno, message };
        let mut tokens = line.split_whitespace();
        let Some(label) = tokens.next() else {
            continue;
        };
        if line.contains('#') {
            return Err(err("comments are not allowed".into()));
        }
        let label: f64 = label
            .parse()
            .map_err(|_| err(format!("label `{label}` is not a number")))?;
        let mut row = Vec::new();
        let mut last = 0;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected `index:value`, got `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(format!("index `{idx}` is not a positive integer")))?;
            if idx == 0 {
                return Err(err("indices are 1-based".into()));
            }
            if idx <= last {
                return Err(err(format!("index {idx} does not follow {last} in ascending order")));
            }
            let val: f64 = val.parse().map_err(|_| err(format!("value `{val}` is not a number")))?;
            if !val.is_finite() || !label.is_finite() {
                return Err(err("non-finite value".into()));
            }
            last = idx;
            row.push((idx - 1, val));
        }
        dim = dim.max(last);
        labels.push(label);
        entries.push(row);
    }
    if labels.is_empty() {
        return Err(Error::Empty("LIBSVM input has no rows"));
    }
    let mut features = DMatrix::zeros(labels.len(), dim);
    for (r, row) in entries.iter().enumerate() {
        for &(c, v) in row {
            features[(r, c)] = v;
        }
    }
    Dataset::new(features, labels, "<text>")
}

pub fn read_libsvm(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut ds = parse_libsvm(&text)?;
    ds.meta.source = path.display().to_string();
    Ok(ds)
}

/// Serializes non-zero entries only; values use the shortest round-trip
/// representation.
pub fn to_libsvm(ds: &Dataset) -> String {
    let mut out = String::new();
    for (r, label) in ds.labels.iter().enumerate() {
        write!(out, "{label}").unwrap();
        for c in 0..ds.dim() {
            let v = ds.features[(r, c)];
            if v != 0.0 {
                write!(out, " {}:{v}", c + 1).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// Centers every column and scales it by its population standard deviation.
/// Columns with zero spread are centered only and recorded in the metadata.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let n = ds.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardizing needs at least 2 rows, got {n}"
        )));
    }
    let mut out = ds.clone();
    out.meta.zero_variance_columns.clear();
    for c in 0..ds.dim() {
        let mut col = out.features.column_mut(c);
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        let std = (col.norm_squared() / n as f64).sqrt();
        if std <= 1e-12 * (1.0 + mean.abs()) {
            col.fill(0.0);
            out.meta.zero_variance_columns.push(c);
        } else {
            col.unscale_mut(std);
        }
    }
    out.meta.standardized = true;
    Ok(out)
}

/// One-hot matrix over the distinct labels in ascending order, plus those
/// classes.
pub fn one_hot(labels: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut classes = labels.to_vec();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass(classes.len()));
    }
    let mut m = DMatrix::zeros(labels.len(), classes.len());
    for (i, l) in labels.iter().enumerate() {
        let c = classes.binary_search_by(|x| x.total_cmp(l)).expect("label is a class");
        m[(i, c)] = 1.0;
    }
    Ok((m, classes))
}

/// Inverse of [`one_hot`]: row-wise argmax mapped back to class labels.
pub fn decode_one_hot(encoded: &DMatrix<f64>, classes: &[f64]) -> Result<Vec<f64>> {
    if encoded.ncols() != classes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} columns but {} classes",
            encoded.ncols(),
            classes.len()
        )));
    }
    Ok(encoded.row_iter().map(|r| classes[r.transpose().imax()]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceSpec {
    /// `c·I`.
    IdentityScaled(f64),
    /// `scale·CᵀC` with `C` a `d×d` matrix of `U(0, 1)` entries.
    RandomGram { scale: f64 },
    /// Diagonal with eigenvalues `j^{-exponent}`, `j = 1..d`.
    PowerLaw { exponent: f64 },
}

impl CovarianceSpec {
    /// The covariance matrix. Only `RandomGram` draws from `stream`.
    pub fn materialize(&self, d: usize, stream: &RngStream) -> Result<SpdMatrix> {
        match *self {
            CovarianceSpec::IdentityScaled(c) => {
                if !(c > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance scale must be positive, got {c}"
                    )));
                }
                SpdMatrix::from_diagonal(&vec![c; d])
            }
            CovarianceSpec::PowerLaw { exponent } => {
                SpdMatrix::from_diagonal(&(1..=d).map(|j| (j as f64).powf(-exponent)).collect::<Vec<_>>())
            }
            CovarianceSpec::RandomGram { scale } => {
                let c = uniform_matrix(d, d, stream);
                let sigma = SpdMatrix::new(c.transpose() * &c * scale)?;
                if sigma.cholesky().is_ok() {
                    Ok(sigma)
                } else {
                    Ok(sigma.shifted(1e-8))
                }
            }
        }
    }
}

/// `n` rows drawn i.i.d. from `N(0, Σ)` as `Z·Lᵀ` with `Σ = LLᵀ`. Labels are
/// zero.
pub fn synth_gaussian(n: usize, sigma: &SpdMatrix, stream: &RngStream) -> Result<Dataset> {
    let d = sigma.dim();
    let l = sigma.cholesky()?.l();
    let z = gaussian_matrix(n, d, 1.0, stream);
    Dataset::new(z * l.transpose(), vec![0.0; n], format!("gaussian(n={n}, d={d})"))
}

/// Replaces the labels with `A·w + noise·ε`, `w ~ N(0, I)`.
pub fn plant_linear_targets(ds: &mut Dataset, noise: f64, stream: &RngStream) {
    let w = gaussian_matrix(ds.dim(), 1, 1.0, &stream.derive(0));
    let eps = gaussian_matrix(ds.rows(), 1, noise, &stream.derive(1));
    let b = &ds.features * w + eps;
    ds.labels = b.iter().copied().collect();
}

/// Rows in a uniformly random order.
pub fn permute_rows(ds: &Dataset, stream: &RngStream) -> Dataset {
    let mut order: Vec<usize> = (0..ds.rows()).collect();
    order.shuffle(&mut stream.rng());
    let mut out = ds.select_rows(&order);
    out.meta.permutation_seed = Some(stream.seed);
    out
}

/// Random permutation, truncation to `m·⌊n/m⌋` rows, `m` contiguous blocks.
pub fn permute_and_split(ds: &Dataset, m: usize, stream: &RngStream) -> Result<Vec<Dataset>> {
    if m == 0 || m > ds.rows() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} rows across {m} agents",
            ds.rows()
        )));
    }
    let k = ds.rows() / m;
    let permuted = permute_rows(ds, stream);
    Ok((0..m)
        .map(|i| permuted.select_rows(&(i * k..(i + 1) * k).collect::<Vec<_>>()))
        .collect())
}
