//! Dense matrices and the scalar metrics used throughout evaluation.
//!
//! Everything here accumulates in a fixed row-major order so results are
//! bit-reproducible across runs and thread counts. Metrics are reduced in
//! `f64` regardless of the storage type.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point storage type. `f32` for everything real, `f64` for the
/// shadow path used by gradient checks.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} elements ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics; zero-width matrices have no meaningful rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "Matrix::add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "Matrix::sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn matmul(&self, b: &Self) -> Result<Self> {
        matmul(self, b)
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

/// Standard matrix product with row-major accumulation: for each output row,
/// rows of `b` are scaled and added in ascending `k` order.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            b.rows,
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let orow = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            axpy(av, b.row(k), orow);
        }
    }
    Ok(out)
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Dot product with eight interleaved partial sums, reduced in lane order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut lanes = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    let mut acc = T::zero();
    for v in lanes {
        acc = acc + v;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        acc = acc + x * y;
    }
    acc
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        acc += x.as_f64() * y.as_f64();
    }
    acc
}

/// Cosine similarity in `f64`; `None` when either vector has zero norm.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Option<f64> {
    let na = dot_f64(a, a).sqrt();
    let nb = dot_f64(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot_f64(a, b) / (na * nb))
}

/// Reconstruction quality of a prediction against its target, over tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// Mean over tokens of `‖pred − target‖² / D`.
    pub mse: f64,
    pub r2: f64,
    /// Mean per-token cosine similarity.
    pub cosine: f64,
}

/// Streaming accumulator behind [`reconstruction_metrics`], so metrics can be
/// reduced over many samples without concatenating them.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    dim: usize,
    tokens: usize,
    sq_err: f64,
    cos_sum: f64,
    zero_norm_tokens: usize,
    target_sum: Vec<f64>,
    target_sq: f64,
}

impl MetricAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tokens: 0,
            sq_err: 0.0,
            cos_sum: 0.0,
            zero_norm_tokens: 0,
            target_sum: vec![0.0; dim],
            target_sq: 0.0,
        }
    }

    pub fn push_token<T: Real>(&mut self, pred: &[T], target: &[T]) {
        debug_assert_eq!(pred.len(), self.dim);
        debug_assert_eq!(target.len(), self.dim);
        let mut err = 0.0;
        for (d, (&p, &t)) in pred.iter().zip(target).enumerate() {
            let (p, t) = (p.as_f64(), t.as_f64());
            err += (p - t) * (p - t);
            self.target_sum[d] += t;
            self.target_sq += t * t;
        }
        self.sq_err += err;
        match cosine(pred, target) {
            Some(c) => self.cos_sum += c,
            None => self.zero_norm_tokens += 1,
        }
        self.tokens += 1;
    }

    pub fn push<T: Real>(&mut self, pred: &Matrix<T>, target: &Matrix<T>) -> Result<()> {
        pred.check_same_shape(target, "reconstruction_metrics")?;
        if pred.cols() != self.dim {
            return Err(Error::shape(
                "MetricAccumulator::push",
                self.dim,
                pred.cols(),
            ));
        }
        for r in 0..pred.rows() {
            self.push_token(pred.row(r), target.row(r));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.tokens == 0 {
            return Err(Error::Undefined {
                metric: "reconstruction metrics",
                reason: "no tokens",
            });
        }
        let n = self.tokens as f64;
        let mean_sq: f64 = self.target_sum.iter().map(|s| s * s / n).sum();
        let total_var = self.target_sq - mean_sq;
        if total_var <= 0.0 {
            return Err(Error::Undefined {
                metric: "r2",
                reason: "target has zero variance",
            });
        }
        if self.zero_norm_tokens > 0 {
            return Err(Error::Undefined {
                metric: "cosine",
                reason: "zero-norm token",
            });
        }
        Ok(MetricReport {
            mse: self.sq_err / n / self.dim as f64,
            r2: 1.0 - self.sq_err / total_var,
            cosine: self.cos_sum / n,
        })
    }
}

pub fn reconstruction_metrics<T: Real>(
    pred: &Matrix<T>,
    target: &Matrix<T>,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(target.cols());
    acc.push(pred, target)?;
    acc.finish()
}

const PROB_SUM_TOL: f64 = 1e-6;

fn check_distribution(p: &[f64], name: &'static str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidArgument(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// `KL(p ‖ q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", p.len(), q.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::Undefined {
                metric: "kl divergence",
                reason: "support violation (q = 0 where p > 0)",
            });
        }
        kl += pi * (pi / qi).ln();
    }
    // Rounding can leave tiny negatives for p ≈ q.
    Ok(kl.max(0.0))
}

pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "in softmax logits".into(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

fn centered_f64<T: Real>(x: &Matrix<T>) -> Vec<Vec<f64>> {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    x.iter_rows()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(&v, m)| v.as_f64() - m)
                .collect()
        })
        .collect()
}

/// Squared Frobenius norm of `aᵀ b` for row-sample matrices.
fn cross_gram_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (da, db) = (a[0].len(), b[0].len());
    let mut g = vec![0.0; da * db];
    for (ra, rb) in a.iter().zip(b) {
        for (i, &va) in ra.iter().enumerate() {
            let gi = &mut g[i * db..(i + 1) * db];
            for (gij, &vb) in gi.iter_mut().zip(rb) {
                *gij += va * vb;
            }
        }
    }
    g.iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two sets of row samples.
pub fn linear_cka<T: Real>(x: &Matrix<T>, y: &Matrix<T>) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape("linear_cka rows", x.rows(), y.rows()));
    }
    if x.rows() == 0 || x.cols() == 0 || y.cols() == 0 {
        return Err(Error::Undefined {
            metric: "linear cka",
            reason: "empty input",
        });
    }
    let xc = centered_f64(x);
    let yc = centered_f64(y);
    let xy = cross_gram_sq(&yc, &xc);
    let xx = cross_gram_sq(&xc, &xc).sqrt();
    let yy = cross_gram_sq(&yc, &yc).sqrt();
    let denom = xx * yy;
    if denom == 0.0 {
        return Err(Error::Undefined {
            metric: "linear cka",
            reason: "constant input",
        });
    }
    Ok(xy / denom)
}

/// Ranks starting at 1; tied values share the average of their ranks.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs at least two observations".into(),
        ));
    }
    pearson(&average_ranks(a), &average_ranks(b)).ok_or(Error::Undefined {
        metric: "spearman",
        reason: "constant input",
    })
}
