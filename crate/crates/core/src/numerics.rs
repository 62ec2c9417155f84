//! Vector and matrix primitives shared by the rest of the engine.
//!
//! Everything here is a pure function over `f64` slices. Vectors are plain
//! `Vec<f64>` / `&[f64]`; [`Mat`] is a small dense row-major matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Central-difference step used by [`fd_check`].
pub const FD_STEP: f64 = 1e-5;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a `0 x 0` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "cannot push row of length {} onto {}-column matrix",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ * y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in self.iter_rows().zip(y) {
            axpy(yr, r, &mut out);
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(a, other.row(k), dst);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Learning-rate schedule parameters for [`cosine_lr`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm { norm: na.min(nb) });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Cosine similarity together with its gradients with respect to both inputs.
///
/// `∂cos/∂a = (b̂ − cos·â)/‖a‖` and symmetrically for `b`.
pub fn cosine_sim_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let c = cosine_sim(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| (bi / nb - c * ai / na) / na)
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| (ai / na - c * bi / nb) / nb)
        .collect();
    Ok((c, ga, gb))
}

/// Normalizes `v` to unit length, returning the unit vector and the
/// Jacobian `(I − uuᵀ)/‖v‖`.
pub fn l2_normalize(v: &[f64]) -> Result<(Vec<f64>, Mat)> {
    let (u, n) = unit(v)?;
    let d = v.len();
    let mut jac = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let id = if i == j { 1.0 } else { 0.0 };
            jac.set(i, j, (id - u[i] * u[j]) / n);
        }
    }
    Ok((u, jac))
}

/// Unit vector and original norm, without materializing the Jacobian.
pub fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok((scale(v, 1.0 / n), n))
}

/// Vector-Jacobian product of normalization: given `u = v/‖v‖` and an
/// upstream gradient `g` on `u`, returns the gradient on `v`.
pub fn normalize_vjp(u: &[f64], pre_norm: f64, g: &[f64]) -> Vec<f64> {
    let ug = dot(u, g);
    u.iter()
        .zip(g)
        .map(|(&ui, &gi)| (gi - ui * ug) / pre_norm)
        .collect()
}

/// Cross-entropy of `softmax(logits[lo..=hi] / tau)` at `target`.
///
/// Returns the loss and its gradient with respect to the full logits vector;
/// entries outside `[lo, hi]` have zero gradient.
pub fn masked_softmax_ce(
    logits: &[f64],
    target: usize,
    lo: usize,
    hi: usize,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if lo > hi || hi >= logits.len() {
        return Err(Error::Index(format!(
            "range [{lo}, {hi}] is not within {} logits",
            logits.len()
        )));
    }
    if target < lo || target > hi {
        return Err(Error::Index(format!(
            "target {target} outside range [{lo}, {hi}]"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let window = &logits[lo..=hi];
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = window.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_z = sum.ln() + max / tau;
    let loss = log_z - logits[target] / tau;

    let mut grad = vec![0.0; logits.len()];
    for (k, e) in exps.iter().enumerate() {
        let p = e / sum;
        let onehot = if lo + k == target { 1.0 } else { 0.0 };
        grad[lo + k] = (p - onehot) / tau;
    }
    Ok((loss.max(0.0), grad))
}

/// Cosine-decayed learning rate. Steps past the end clamp to `lr_min`.
pub fn cosine_lr(step: usize, sched: &LrSchedule) -> f64 {
    if sched.total_steps == 0 || step >= sched.total_steps {
        return sched.lr_min;
    }
    let progress = step as f64 / sched.total_steps as f64;
    sched.lr_min
        + 0.5 * (sched.lr0 - sched.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Deterministic `d x d` orthogonal matrix: the Q factor of a seeded Gaussian
/// matrix with the diagonal of R fixed positive.
pub fn seeded_orthogonal(d: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    // Modified Gram-Schmidt with a second pass; R's diagonal comes out
    // positive, which is exactly the sign-fixed QR.
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    for mut v in cols {
        for _ in 0..2 {
            for qk in &q {
                let r = dot(qk, &v);
                axpy(-r, qk, &mut v);
            }
        }
        let n = norm(&v);
        q.push(scale(&v, 1.0 / n));
    }

    let mut w = Mat::zeros(d, d);
    for (j, col) in q.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            w.set(i, j, x);
        }
    }
    w
}

/// Compares an analytic gradient against central finite differences.
///
/// Returns `max_i |fd_i − g_i| / max(1, |fd_i|, |g_i|)`.
pub fn fd_check<F>(f: F, x: &[f64], analytic_grad: &[f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe);
        probe[i] = orig - FD_STEP;
        let down = f(&probe);
        probe[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let g = analytic_grad[i];
        let err = (fd - g).abs() / 1f64.max(fd.abs()).max(g.abs());
        worst = worst.max(err);
    }
    worst
}
