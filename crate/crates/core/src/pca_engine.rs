//! Correlation-matrix PCA with pre-transformations and component-count rules.
//!
//! The eigendecomposition is a cyclic Jacobi sweep on the κ×κ correlation
//! matrix, iterated until the off-diagonal Frobenius norm is at most 1e-12.
//! Eigenvectors are sign-normalized so that the entry of largest magnitude is
//! positive, which makes repeated fits on identical input bit-identical.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats_core::{cmp_f64, insertion_rank, ranks};

pub const MIN_ROWS: usize = 20;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;
/// Fraction trimmed from each tail of every column by [`Transform::Trim`].
pub const TRIM_FRACTION: f64 = 0.025;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcaError {
    #[error("need at least {MIN_ROWS} rows, have {0}")]
    TooFewRows(usize),
    #[error("need at least 2 columns, have {0}")]
    TooFewColumns(usize),
    #[error("trimming left {0} rows (< {MIN_ROWS})")]
    DegenerateTrim(usize),
    #[error("every column is constant")]
    AllColumnsConstant,
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("jacobi iteration did not converge (off-diagonal norm {0:e})")]
    NoConvergence(f64),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "ragged columns");
            for (i, &v) in col.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut m = Self::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (k, &j) in idx.iter().enumerate() {
                m[(i, k)] = self[(i, j)];
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Pre-PCA transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    SignedFifthRoot,
    Ranks,
    Trim,
}

impl Transform {
    pub const ALL: [Transform; 4] = [
        Transform::Identity,
        Transform::SignedFifthRoot,
        Transform::Ranks,
        Transform::Trim,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Transform::Identity => "none",
            Transform::SignedFifthRoot => "fifth_root",
            Transform::Ranks => "ranks",
            Transform::Trim => "trim",
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Transform {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "identity" => Ok(Transform::Identity),
            "fifth_root" | "signed_fifth_root" | "root5" => Ok(Transform::SignedFifthRoot),
            "ranks" => Ok(Transform::Ranks),
            "trim" => Ok(Transform::Trim),
            _ => Err(format!("unknown transform `{s}`")),
        }
    }
}

/// Rule choosing how many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcCountRule {
    Fixed(usize),
    Explain(f64),
    AboveMean,
}

impl PcCountRule {
    pub const ALL: [PcCountRule; 5] = [
        PcCountRule::Fixed(2),
        PcCountRule::Fixed(3),
        PcCountRule::Explain(0.75),
        PcCountRule::Explain(0.90),
        PcCountRule::AboveMean,
    ];
}

impl fmt::Display for PcCountRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PcCountRule::Fixed(k) => write!(f, "{k}"),
            PcCountRule::Explain(p) => write!(f, "{}%", p * 100.0),
            PcCountRule::AboveMean => f.write_str("var_mean"),
        }
    }
}

impl FromStr for PcCountRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "var_mean" || s == "above_mean" {
            return Ok(PcCountRule::AboveMean);
        }
        if let Some(p) = s.strip_suffix('%') {
            let p: f64 = p.parse().map_err(|_| format!("bad pc rule `{s}`"))?;
            if !(p > 0.0 && p < 100.0) {
                return Err(format!("explained share `{s}` outside (0,100)"));
            }
            return Ok(PcCountRule::Explain(p / 100.0));
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(PcCountRule::Fixed(k)),
            _ => Err(format!("bad pc rule `{s}`")),
        }
    }
}

/// How rows are standardized before projection in trim mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimStandardization {
    /// Means and standard deviations of the trimmed subset the model was fit on.
    #[default]
    TrimmedSubset,
    /// Means and standard deviations of the full, untrimmed candidate matrix.
    FullSample,
}

/// Output of [`pre_transform`].
#[derive(Debug, Clone)]
pub struct Transformed {
    pub data: Matrix,
    pub target: Vec<f64>,
    /// Rows of the input kept in `data` (all rows except under trim).
    pub retained_rows: Vec<usize>,
}

fn signed_fifth_root(x: f64) -> f64 {
    x.signum() * x.abs().powf(0.2)
}

/// Applies one of the four pre-transformations to the candidate matrix and
/// the target row.
pub fn pre_transform(data: &Matrix, target: &[f64], transform: Transform) -> Result<Transformed, PcaError> {
    if data.rows() < MIN_ROWS {
        return Err(PcaError::TooFewRows(data.rows()));
    }
    if data.cols() < 2 {
        return Err(PcaError::TooFewColumns(data.cols()));
    }
    if target.len() != data.cols() {
        return Err(PcaError::DimensionMismatch {
            expected: data.cols(),
            got: target.len(),
        });
    }
    if data.data.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(PcaError::NonFinite);
    }
    let all_rows: Vec<usize> = (0..data.rows()).collect();
    match transform {
        Transform::Identity => Ok(Transformed {
            data: data.clone(),
            target: target.to_vec(),
            retained_rows: all_rows,
        }),
        Transform::SignedFifthRoot => {
            let mut m = data.clone();
            m.data.iter_mut().for_each(|v| *v = signed_fifth_root(*v));
            Ok(Transformed {
                data: m,
                target: target.iter().map(|&v| signed_fifth_root(v)).collect(),
                retained_rows: all_rows,
            })
        }
        Transform::Ranks => {
            let mut cols = Vec::with_capacity(data.cols());
            let mut t = Vec::with_capacity(data.cols());
            for j in 0..data.cols() {
                let col = data.column(j);
                t.push(insertion_rank(&col, target[j]));
                cols.push(ranks(&col).expect("finite, non-empty column").values);
            }
            Ok(Transformed {
                data: Matrix::from_columns(&cols),
                target: t,
                retained_rows: all_rows,
            })
        }
        Transform::Trim => {
            let retained = trimmed_rows(data, TRIM_FRACTION);
            if retained.len() < MIN_ROWS {
                return Err(PcaError::DegenerateTrim(retained.len()));
            }
            Ok(Transformed {
                data: data.select_rows(&retained),
                target: target.to_vec(),
                retained_rows: retained,
            })
        }
    }
}

/// Rows that survive dropping `floor(fraction * n)` rows from each tail of
/// every column. Within a column, rows are ordered by (value, row index).
pub fn trimmed_rows(data: &Matrix, fraction: f64) -> Vec<usize> {
    let n = data.rows();
    let cut = (fraction * n as f64).floor() as usize;
    let mut keep = vec![true; n];
    if cut > 0 {
        for j in 0..data.cols() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| cmp_f64(&data[(a, j)], &data[(b, j)]).then(a.cmp(&b)));
            for &i in order[..cut].iter().chain(&order[n - cut..]) {
                keep[i] = false;
            }
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Fitted correlation PCA.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Column indices (of the fit input) with positive variance.
    pub retained_columns: Vec<usize>,
    /// Constant columns dropped before fitting.
    pub dropped_columns: Vec<usize>,
    pub input_columns: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// κ'×κ' matrix whose columns are unit eigenvectors, by descending eigenvalue.
    pub weights: Matrix,
    pub eigenvalues: Vec<f64>,
    pub n_components: usize,
    pub transform: Transform,
}

impl PcaModel {
    pub fn retained_count(&self) -> usize {
        self.retained_columns.len()
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues.iter().map(|l| l / total).collect()
    }

    pub fn with_components(mut self, l: usize) -> Self {
        self.n_components = l.clamp(1, self.retained_count());
        self
    }

    /// Replaces the standardization statistics, keeping the weights.
    pub fn restandardize_from(&mut self, data: &Matrix) {
        let (means, stds) = column_moments(data, &self.retained_columns);
        self.means = means;
        self.stds = stds.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    }
}

fn column_moments(data: &Matrix, cols: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = data.rows() as f64;
    let mut means = Vec::with_capacity(cols.len());
    let mut stds = Vec::with_capacity(cols.len());
    for &j in cols {
        let mean = (0..data.rows()).map(|i| data[(i, j)]).sum::<f64>() / n;
        let ss: f64 = (0..data.rows()).map(|i| (data[(i, j)] - mean).powi(2)).sum();
        means.push(mean);
        stds.push(if data.rows() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 });
    }
    (means, stds)
}

/// Sample correlation matrix of the given columns.
pub fn correlation_matrix(data: &Matrix) -> Matrix {
    let k = data.cols();
    let all: Vec<usize> = (0..k).collect();
    let (means, stds) = column_moments(data, &all);
    let n = data.rows();
    let mut c = Matrix::identity(k);
    for a in 0..k {
        for b in (a + 1)..k {
            let mut s = 0.0;
            for i in 0..n {
                s += (data[(i, a)] - means[a]) * (data[(i, b)] - means[b]);
            }
            let r = s / ((n as f64 - 1.0) * stds[a] * stds[b]);
            c[(a, b)] = r;
            c[(b, a)] = r;
        }
    }
    c
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), both unsorted.
pub fn jacobi_eigen(sym: &Matrix) -> Result<(Vec<f64>, Matrix), PcaError> {
    let n = sym.rows();
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= OFF_DIAGONAL_TOL {
            return Ok(((0..n).map(|i| a[(i, i)]).collect(), v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let off = off_diagonal_norm(&a);
    if off <= OFF_DIAGONAL_TOL {
        Ok(((0..n).map(|i| a[(i, i)]).collect(), v))
    } else {
        Err(PcaError::NoConvergence(off))
    }
}

/// Fits a correlation PCA. Zero-variance columns are dropped and recorded.
pub fn fit(transformed: &Matrix) -> Result<PcaModel, PcaError> {
    fit_with(transformed, Transform::Identity)
}

pub fn fit_with(transformed: &Matrix, transform: Transform) -> Result<PcaModel, PcaError> {
    if transformed.rows() < 2 {
        return Err(PcaError::TooFewRows(transformed.rows()));
    }
    if transformed.data.iter().any(|v| !v.is_finite()) {
        return Err(PcaError::NonFinite);
    }
    let all: Vec<usize> = (0..transformed.cols()).collect();
    let (_, stds) = column_moments(transformed, &all);
    let (retained, dropped): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&j| stds[j] > 0.0);
    if retained.is_empty() {
        return Err(PcaError::AllColumnsConstant);
    }
    let sub = transformed.select_columns(&retained);
    let corr = correlation_matrix(&sub);
    let (values, vectors) = jacobi_eigen(&corr)?;

    let k = retained.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| cmp_f64(&values[b], &values[a]).then(a.cmp(&b)));
    let mut weights = Matrix::zeros(k, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(values[src].max(0.0));
        let col: Vec<f64> = (0..k).map(|i| vectors[(i, src)]).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
            .0;
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..k {
            weights[(i, dst)] = sign * col[i];
        }
    }
    let (means, stds) = column_moments(transformed, &retained);
    Ok(PcaModel {
        retained_columns: retained,
        dropped_columns: dropped,
        input_columns: transformed.cols(),
        means,
        stds,
        weights,
        eigenvalues,
        n_components: k,
        transform,
    })
}

/// Number of components chosen by `rule`.
pub fn select_count(eigenvalues: &[f64], rule: PcCountRule) -> usize {
    let k = eigenvalues.len();
    if k == 0 {
        return 0;
    }
    match rule {
        PcCountRule::Fixed(n) => n.clamp(1, k),
        PcCountRule::Explain(p) => {
            let total: f64 = eigenvalues.iter().sum();
            let mut cum = 0.0;
            for (i, l) in eigenvalues.iter().enumerate() {
                cum += l;
                if cum / total >= p - 1e-12 {
                    return i + 1;
                }
            }
            k
        }
        PcCountRule::AboveMean => {
            let mean = eigenvalues.iter().sum::<f64>() / k as f64;
            eigenvalues.iter().filter(|&&l| l > mean).count().max(1)
        }
    }
}

fn standardize_row(model: &PcaModel, row: &[f64]) -> Vec<f64> {
    model
        .retained_columns
        .iter()
        .zip(model.means.iter().zip(&model.stds))
        .map(|(&j, (m, s))| (row[j] - m) / s)
        .collect()
}

fn rotate(model: &PcaModel, z: &[f64]) -> Vec<f64> {
    (0..model.n_components)
        .map(|c| z.iter().enumerate().map(|(i, zi)| zi * model.weights[(i, c)]).sum())
        .collect()
}

/// Standardizes with the model statistics and projects onto the first
/// `n_components` eigenvectors.
pub fn project(model: &PcaModel, rows: &Matrix, target: &[f64]) -> Result<(Matrix, Vec<f64>), PcaError> {
    for got in [rows.cols(), target.len()] {
        if got != model.input_columns {
            return Err(PcaError::DimensionMismatch {
                expected: model.input_columns,
                got,
            });
        }
    }
    let mut out = Matrix::zeros(rows.rows(), model.n_components);
    for i in 0..rows.rows() {
        let p = rotate(model, &standardize_row(model, rows.row(i)));
        for (c, v) in p.into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok((out, rotate(model, &standardize_row(model, target))))
}

/// Full pipeline for one candidate matrix: transform, fit, choose L and
/// project. Under trim the model is fit on the trimmed subset and the full
/// untransformed matrix is projected.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub model: PcaModel,
    pub candidates: Matrix,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaOptions {
    pub transform: Transform,
    pub rule: PcCountRule,
    #[serde(default)]
    pub trim_standardization: TrimStandardization,
}

impl PcaOptions {
    pub fn new(transform: Transform, rule: PcCountRule) -> Self {
        Self {
            transform,
            rule,
            trim_standardization: TrimStandardization::default(),
        }
    }
}

/// Fits the model on the candidates. The target does not influence the fit.
pub fn fit_candidates(data: &Matrix, options: &PcaOptions) -> Result<(PcaModel, Transformed), PcaError> {
    // the target only matters for ranks; use the first row as a placeholder
    let placeholder = data.row(0).to_vec();
    let t = pre_transform(data, &placeholder, options.transform)?;
    let mut model = fit_with(&t.data, options.transform)?;
    let l = select_count(&model.eigenvalues, options.rule);
    model = model.with_components(l);
    if options.transform == Transform::Trim
        && options.trim_standardization == TrimStandardization::FullSample
    {
        model.restandardize_from(data);
    }
    Ok((model, t))
}

/// Maps a raw target row into the coordinates the model was fit on.
pub fn transform_target(data: &Matrix, target: &[f64], transform: Transform) -> Vec<f64> {
    match transform {
        Transform::Identity | Transform::Trim => target.to_vec(),
        Transform::SignedFifthRoot => target.iter().map(|&v| signed_fifth_root(v)).collect(),
        Transform::Ranks => (0..data.cols())
            .map(|j| insertion_rank(&data.column(j), target[j]))
            .collect(),
    }
}

pub fn pca_project(data: &Matrix, target: &[f64], options: &PcaOptions) -> Result<PcaProjection, PcaError> {
    let (model, t) = fit_candidates(data, options)?;
    let rows = match options.transform {
        Transform::Trim => data,
        _ => &t.data,
    };
    let tt = transform_target(data, target, options.transform);
    let (candidates, target) = project(&model, rows, &tt)?;
    Ok(PcaProjection {
        model,
        candidates,
        target,
    })
}
