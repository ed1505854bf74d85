//! Density estimators over embeddings and anomaly scores.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance estimator used by [`fit_gde_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularization {
    /// Sample covariance plus `scale * trace / d` on the diagonal.
    Ridge { scale: f64 },
    /// Ledoit-Wolf shrinkage towards a scaled identity.
    LedoitWolf,
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Ridge { scale: 1e-3 }
    }
}

/// Diagonal loading used when the covariance has zero trace.
pub const EPS_FLOOR: f64 = 1e-6;

/// Gaussian density estimate with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdeModel {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Regularized covariance, row-major `dim x dim`.
    pub covariance: Vec<f64>,
    /// Lower-triangular `L` with `L L^T = covariance`, row-major.
    pub factor: Vec<f64>,
    /// Amount added to the diagonal (ridge) or shrinkage intensity
    /// (Ledoit-Wolf).
    pub regularization: f64,
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::Data("embeddings are empty".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Data(format!(
                "row {i} has dimension {}, expected {d}",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {i} contains a non-finite value")));
        }
    }
    Ok(d)
}

fn mean_and_scatter(rows: &[Vec<f64>], d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centered = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j] - mean[j]);
    let scatter = centered.transpose() * &centered;
    (mean, scatter)
}

/// Ledoit-Wolf shrinkage intensity for centered data `x` (rows = samples)
/// and biased sample covariance `s`.
fn ledoit_wolf_intensity(x: &DMatrix<f64>, s: &DMatrix<f64>, mu: f64) -> f64 {
    let n = x.nrows() as f64;
    let d = s.nrows();
    let target_dist: f64 = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| {
            let t = if i == j { mu } else { 0.0 };
            (s[(i, j)] - t).powi(2)
        })
        .sum();
    if target_dist == 0.0 {
        return 1.0;
    }
    let mut b = 0.0;
    for row in x.row_iter() {
        let outer = row.transpose() * row;
        b += (outer - s).norm_squared();
    }
    b /= n * n;
    (b.min(target_dist) / target_dist).clamp(0.0, 1.0)
}

/// Fits a Gaussian with the default ridge regularization.
pub fn fit_gde(embeddings: &[Vec<f64>]) -> Result<GdeModel> {
    fit_gde_with(embeddings, Regularization::default())
}

pub fn fit_gde_with(embeddings: &[Vec<f64>], reg: Regularization) -> Result<GdeModel> {
    if embeddings.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let d = check_rows(embeddings)?;
    let n = embeddings.len() as f64;
    let (mean, scatter) = mean_and_scatter(embeddings, d);
    match reg {
        Regularization::Ridge { scale } => finish_ridge(mean, scatter, n, scale),
        Regularization::LedoitWolf => {
            let centered = DMatrix::from_fn(embeddings.len(), d, |i, j| embeddings[i][j] - mean[j]);
            let s = &scatter / n;
            let mu = s.trace() / d as f64;
            let delta = ledoit_wolf_intensity(&centered, &s, mu);
            let mut cov = s * (1.0 - delta);
            let load = if mu > 0.0 { delta * mu } else { EPS_FLOOR };
            for i in 0..d {
                cov[(i, i)] += load;
            }
            factorize(mean, cov, delta)
        }
    }
}

impl GdeModel {
    /// `0.5 * (e - mu)^T Sigma^{-1} (e - mu)` via forward substitution.
    pub fn score(&self, e: &[f64]) -> Result<f64> {
        if e.len() != self.dim {
            return Err(Error::Argument(format!(
                "embedding has dimension {}, model expects {}",
                e.len(),
                self.dim
            )));
        }
        let d = self.dim;
        let mut z = vec![0.0; d];
        for i in 0..d {
            let row = &self.factor[i * d..i * d + i];
            let acc: f64 = row.iter().zip(&z).map(|(l, zj)| l * zj).sum();
            z[i] = (e[i] - self.mean[i] - acc) / self.factor[i * d + i];
        }
        Ok(0.5 * z.iter().map(|v| v * v).sum::<f64>())
    }

    pub fn score_all(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.score(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if m.mean.len() != m.dim
            || m.covariance.len() != m.dim * m.dim
            || m.factor.len() != m.dim * m.dim
        {
            return Err(Error::Load(format!(
                "{}: inconsistent dimensions",
                path.display()
            )));
        }
        Ok(m)
    }
}

/// Streaming ridge-regularized Gaussian fit for row sets too large to hold.
#[derive(Debug, Clone)]
pub struct GdeAccumulator {
    dim: usize,
    count: usize,
    shift: Vec<f64>,
    sum: Vec<f64>,
    scatter: DMatrix<f64>,
    block: Vec<f64>,
}

const ACCUMULATOR_BLOCK: usize = 256;

impl GdeAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            shift: Vec::new(),
            sum: vec![0.0; dim],
            scatter: DMatrix::zeros(dim, dim),
            block: Vec::with_capacity(ACCUMULATOR_BLOCK * dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Data(format!(
                "row has dimension {}, expected {}",
                row.len(),
                self.dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("row contains a non-finite value".into()));
        }
        if self.shift.is_empty() {
            // values are accumulated relative to the first row for stability
            self.shift = row.to_vec();
        }
        for ((s, v), c) in self.sum.iter_mut().zip(row).zip(&self.shift) {
            *s += v - c;
            self.block.push(v - c);
        }
        self.count += 1;
        if self.block.len() == ACCUMULATOR_BLOCK * self.dim {
            self.flush();
        }
        Ok(())
    }

    fn flush(&mut self) {
        if self.block.is_empty() {
            return;
        }
        let rows = self.block.len() / self.dim;
        let b = DMatrix::from_row_slice(rows, self.dim, &self.block);
        self.scatter += b.transpose() * &b;
        self.block.clear();
    }

    /// Same estimate as [`fit_gde_with`] using [`Regularization::Ridge`].
    pub fn finish(mut self, scale: f64) -> Result<GdeModel> {
        if self.count < 2 {
            return Err(Error::Fit(format!(
                "need at least 2 embeddings, got {}",
                self.count
            )));
        }
        self.flush();
        let n = self.count as f64;
        let d = self.dim;
        let centered_sum = DMatrix::from_column_slice(d, 1, &self.sum);
        let scatter = &self.scatter - (&centered_sum * centered_sum.transpose()) / n;
        let mean: Vec<f64> = self
            .shift
            .iter()
            .zip(&self.sum)
            .map(|(c, s)| c + s / n)
            .collect();
        finish_ridge(mean, scatter, n, scale)
    }
}

fn finish_ridge(mean: Vec<f64>, scatter: DMatrix<f64>, n: f64, scale: f64) -> Result<GdeModel> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("invalid ridge scale {scale}")));
    }
    let d = mean.len();
    let mut cov = scatter / (n - 1.0);
    let eps = scale * cov.trace() / d as f64;
    let eps = if eps > 0.0 { eps } else { EPS_FLOOR };
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    factorize(mean, cov, eps)
}

fn factorize(mean: Vec<f64>, cov: DMatrix<f64>, amount: f64) -> Result<GdeModel> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Fit("regularized covariance is not positive definite".into()))?;
    let l = chol.l();
    Ok(GdeModel {
        dim: mean.len(),
        mean,
        covariance: cov.transpose().as_slice().to_vec(),
        factor: l.transpose().as_slice().to_vec(),
        regularization: amount,
    })
}

/// Free-function form of [`GdeModel::score`].
pub fn score_gde(m: &GdeModel, e: &[f64]) -> Result<f64> {
    m.score(e)
}

/// One Gaussian per spatial location; `patch_embeddings[l]` holds the
/// samples observed at location `l`.
pub fn fit_per_location_gde(patch_embeddings: &[Vec<Vec<f64>>]) -> Result<Vec<GdeModel>> {
    fit_per_location_gde_with(patch_embeddings, Regularization::default())
}

pub fn fit_per_location_gde_with(
    patch_embeddings: &[Vec<Vec<f64>>],
    reg: Regularization,
) -> Result<Vec<GdeModel>> {
    patch_embeddings
        .iter()
        .enumerate()
        .map(|(l, rows)| {
            fit_gde_with(rows, reg).map_err(|e| match e {
                Error::Fit(msg) => Error::Fit(format!("location {l}: {msg}")),
                other => other,
            })
        })
        .collect()
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub points: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

/// Median Euclidean distance over all distinct pairs.
pub fn median_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(&rows[i], &rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        (d[m - 1] + d[m]) / 2.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Fits a KDE; `bandwidth = None` uses the median pairwise distance (1 when
/// that is zero).
pub fn fit_kde(embeddings: &[Vec<f64>], bandwidth: Option<f64>) -> Result<KdeModel> {
    check_rows(embeddings)?;
    let bandwidth = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Config(format!("invalid bandwidth {h}"))),
        None => {
            let h = median_pairwise_distance(embeddings);
            if h > 0.0 {
                h
            } else {
                1.0
            }
        }
    };
    Ok(KdeModel {
        points: embeddings.to_vec(),
        bandwidth,
    })
}

impl KdeModel {
    /// `-log mean_i exp(-|e - x_i|^2 / (2 h^2))`.
    pub fn score(&self, e: &[f64]) -> Result<f64> {
        let d = self.points[0].len();
        if e.len() != d {
            return Err(Error::Argument(format!(
                "embedding has dimension {}, model expects {d}",
                e.len()
            )));
        }
        let scale = 2.0 * self.bandwidth * self.bandwidth;
        let logs: Vec<f64> = self.points.iter().map(|p| -sq_dist(e, p) / scale).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        Ok(-(max + (sum / logs.len() as f64).ln()))
    }
}

pub fn score_kde(m: &KdeModel, e: &[f64]) -> Result<f64> {
    m.score(e)
}

/// Averages per-model scores after z-normalizing each model over the
/// evaluation set. A constant score vector is only centered.
pub fn ensemble_scores(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = scores
        .first()
        .ok_or_else(|| Error::Argument("no score lists to ensemble".into()))?
        .len();
    if scores.iter().any(|s| s.len() != n) {
        return Err(Error::Argument("score lists differ in length".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    let mut out = vec![0.0; n];
    for s in scores {
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let inv = if std > 0.0 { 1.0 / std } else { 1.0 };
        for (o, v) in out.iter_mut().zip(s) {
            *o += (v - mean) * inv;
        }
    }
    let k = scores.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// Magic prefix of embedding files.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"CPEMBED1";

/// Writes embeddings: magic, `u32` dimension, `u64` row count, then
/// row-major little-endian `f32` values.
pub fn write_embeddings(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let d = check_rows(rows)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(rows.len() as u64).to_le_bytes())
        .map_err(io)?;
    for r in rows {
        for &v in r {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: &str| Error::Data(format!("{}: {reason}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated file"))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let mut d = [0u8; 4];
    r.read_exact(&mut d).map_err(|_| bad("truncated header"))?;
    let mut n = [0u8; 8];
    r.read_exact(&mut n).map_err(|_| bad("truncated header"))?;
    let (d, n) = (
        u32::from_le_bytes(d) as usize,
        u64::from_le_bytes(n) as usize,
    );
    let mut rows = Vec::with_capacity(n);
    let mut buf = vec![0u8; d * 4];
    for _ in 0..n {
        r.read_exact(&mut buf).map_err(|_| bad("truncated rows"))?;
        rows.push(
            buf.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect(),
        );
    }
    Ok(rows)
}

/// CSV with header `e0,e1,...`.
pub fn embeddings_to_csv(rows: &[Vec<f64>]) -> String {
    let d = rows.first().map_or(0, Vec::len);
    let mut s = (0..d)
        .map(|i| format!("e{i}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for r in rows {
        s.push_str(
            &r.iter()
                .map(|v| (*v as f32).to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push('\n');
    }
    s
}
