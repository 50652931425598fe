//! Dense numeric primitives: row-major matrices, L2 normalization,
//! cosine-similarity logits, softmax and Shannon entropy.
//!
//! Everything here computes in `f64`. Inputs containing NaN or infinities
//! are rejected at the public entry points; the slice-level helpers used on
//! hot paths (`*_into`, [`entropy_of`]) assume already-validated data.

use crate::error::{Result, TpsError};

/// Normalization guard: vectors with an L2 norm at or below this value are
/// treated as having no direction.
pub const NORM_EPSILON: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(TpsError::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TpsError::NonFinite("matrix"));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(TpsError::EmptyInput("matrix rows"));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TpsError::DimMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Mat::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on an empty-column matrix would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    pub fn normalized_rows(&self) -> Result<Mat> {
        let mut out = self.clone();
        for i in 0..out.rows {
            normalize_in_place(out.row_mut(i)).map_err(|e| with_row(e, i))?;
        }
        Ok(out)
    }
}

pub(crate) fn with_row(err: TpsError, row: usize) -> TpsError {
    match err {
        TpsError::ZeroNorm { norm, .. } => TpsError::ZeroNorm {
            row: Some(row),
            norm,
        },
        other => other,
    }
}

/// Probability distribution over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Wraps a vector after checking it is a valid distribution
    /// (entries in `[0, 1]`, sum within 1e-9 of one).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(TpsError::EmptyInput("distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(TpsError::NonFinite("distribution entry outside [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TpsError::ShapeMismatch(format!(
                "distribution sums to {total}"
            )));
        }
        Ok(ProbDist(probs))
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        ProbDist(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TpsError::NonFinite(what))
    }
}

/// Scales `v` to unit L2 norm in place and returns the original norm.
pub fn normalize_in_place(v: &mut [f64]) -> Result<f64> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(TpsError::NonFinite("vector"));
    }
    if n <= NORM_EPSILON {
        return Err(TpsError::ZeroNorm { row: None, norm: n });
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(n)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v, "vector")?;
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

/// `logit_scale * <p_c, x>` for every prototype row.
///
/// Rows and `x` are expected to be unit-norm already; no normalization
/// happens here.
pub fn cosine_logits(prototypes: &Mat, x: &[f64], logit_scale: f64) -> Result<Vec<f64>> {
    if prototypes.cols() != x.len() {
        return Err(TpsError::DimMismatch {
            expected: prototypes.cols(),
            got: x.len(),
        });
    }
    check_finite(x, "embedding")?;
    if !logit_scale.is_finite() || logit_scale < 0.0 {
        return Err(TpsError::Config(format!(
            "logit scale must be finite and non-negative, got {logit_scale}"
        )));
    }
    let mut out = vec![0.0; prototypes.rows()];
    cosine_logits_into(prototypes, x, logit_scale, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn cosine_logits_into(prototypes: &Mat, x: &[f64], logit_scale: f64, out: &mut [f64]) {
    for (o, p) in out.iter_mut().zip(prototypes.iter_rows()) {
        *o = logit_scale * dot(p, x);
    }
}

pub fn softmax(z: &[f64]) -> Result<ProbDist> {
    if z.is_empty() {
        return Err(TpsError::EmptyInput("logits"));
    }
    check_finite(z, "logits")?;
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    Ok(ProbDist(out))
}

/// Max-subtracted softmax of `z` written into `out`.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbDist) -> f64 {
    entropy_of(&p.0)
}

#[inline]
pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
