//! Dense single-head scaled-dot-product attention that keeps every
//! intermediate (logits, weights, outputs) around for the scorers and
//! oracles.
//!
//! Masked logits are `-inf`, so masked weights come out as exact zeros.

use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Sentinel for causally masked logits.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// `Z[i,j] = scale * <Q[i], K[j]>`, with `j > q_offset + i` masked when
/// `causal` is set. Query row `i` sits at absolute position `q_offset + i`.
pub fn compute_logits(q: &Matrix, k: &Matrix, scale: f64, causal: bool, q_offset: usize) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!("query width {} != key width {}", q.cols(), k.cols())));
    }
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Shape(format!("scale must be positive, got {scale}")));
    }
    let mut z = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        let visible = if causal { (q_offset + i + 1).min(k.rows()) } else { k.rows() };
        let zi = z.row_mut(i);
        for (j, slot) in zi.iter_mut().enumerate() {
            *slot = if j < visible { scale * dot(qi, k.row(j)) } else { MASKED };
        }
    }
    Ok(z)
}

/// Numerically stable row-wise softmax. `-inf` entries map to exactly 0.
pub fn softmax_rows(z: &Matrix) -> Result<Matrix> {
    let mut a = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        softmax_into(z.row(i), a.row_mut(i)).map_err(|_| Error::DegenerateRow { row: i })?;
    }
    Ok(a)
}

pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) -> std::result::Result<(), ()> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(());
    }
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(z) {
        *o = if x == MASKED { 0.0 } else { (x - max).exp() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// `O = A V`.
pub fn attention_output(a: &Matrix, v: &Matrix) -> Result<Matrix> {
    if a.cols() != v.rows() {
        return Err(Error::Shape(format!("weights have {} columns but values have {} rows", a.cols(), v.rows())));
    }
    let mut o = Matrix::zeros(a.rows(), v.cols());
    for i in 0..a.rows() {
        let ai = a.row(i);
        let oi = o.row_mut(i);
        for (j, &w) in ai.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (acc, &x) in oi.iter_mut().zip(v.row(j)) {
                *acc += w * x;
            }
        }
    }
    Ok(o)
}

/// All tensors of one attention head at one moment.
///
/// `q` holds the `q_len` most recent query rows; they occupy absolute
/// positions `s - q_len .. s` so the causal mask lines up with the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionInstance {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub z: Matrix,
    pub a: Matrix,
    pub o: Matrix,
    pub causal: bool,
    pub scale: f64,
}

impl AttentionInstance {
    /// Runs attention with the default `1/sqrt(d)` scale.
    pub fn compute(q: Matrix, k: Matrix, v: Matrix, causal: bool) -> Result<Self> {
        let scale = 1.0 / (k.cols() as f64).sqrt();
        Self::compute_scaled(q, k, v, causal, scale)
    }

    pub fn compute_scaled(q: Matrix, k: Matrix, v: Matrix, causal: bool, scale: f64) -> Result<Self> {
        if k.rows() != v.rows() || k.cols() != v.cols() {
            return Err(Error::Shape(format!(
                "keys are {}x{} but values are {}x{}",
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            )));
        }
        if k.rows() == 0 {
            return Err(Error::Shape("empty key/value cache".into()));
        }
        if q.rows() > k.rows() && causal {
            return Err(Error::Shape(format!("{} causal queries over only {} cached tokens", q.rows(), k.rows())));
        }
        let q_offset = k.rows().saturating_sub(q.rows());
        let z = compute_logits(&q, &k, scale, causal, q_offset)?;
        let a = softmax_rows(&z)?;
        let o = attention_output(&a, &v)?;
        Ok(Self { q, k, v, z, a, o, causal, scale })
    }

    /// Number of query rows.
    pub fn q_len(&self) -> usize {
        self.q.rows()
    }

    /// Number of cached tokens.
    pub fn seq_len(&self) -> usize {
        self.k.rows()
    }

    pub fn dim(&self) -> usize {
        self.k.cols()
    }

    /// Absolute position of query row 0.
    pub fn q_offset(&self) -> usize {
        self.seq_len().saturating_sub(self.q_len())
    }

    /// Zero-based index of the first query row of the window starting at
    /// the 1-based `w`.
    pub(crate) fn window_rows(&self, w: usize) -> Result<std::ops::Range<usize>> {
        let q_len = self.q_len();
        if w == 0 || w > q_len {
            return Err(Error::Window { w, q_len });
        }
        Ok(w - 1..q_len)
    }
}

/// 1-based window start covering the last `size` of `q_len` query rows.
pub fn window_start_for_size(q_len: usize, size: usize) -> usize {
    q_len + 1 - size.clamp(1, q_len.max(1))
}

/// Projected query/key/value of one generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// Result of one autoregressive step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub q_t: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub o: Vec<f64>,
    /// Original position of the token appended in this step.
    pub position: usize,
}

impl DecodeStep {
    /// Views the step as a one-row attention instance over `cache`.
    pub fn to_instance(&self, cache: &KvCache) -> Result<AttentionInstance> {
        if cache.len() != self.a.len() {
            return Err(Error::Shape(format!("step covers {} tokens but cache holds {}", self.a.len(), cache.len())));
        }
        let d = cache.dim();
        Ok(AttentionInstance {
            q: Matrix::from_vec(1, d, self.q_t.clone())?,
            k: cache.keys().clone(),
            v: cache.values().clone(),
            z: Matrix::from_vec(1, self.z.len(), self.z.clone())?,
            a: Matrix::from_vec(1, self.a.len(), self.a.clone())?,
            o: Matrix::from_vec(1, d, self.o.clone())?,
            causal: false,
            scale: 1.0 / (d as f64).sqrt(),
        })
    }
}

/// Appends `(k_t, v_t)` at the next original position and attends with
/// `q_t` over the whole cache, the new token included.
pub fn decode_step(cache: &mut KvCache, q_t: &[f64], k_t: &[f64], v_t: &[f64]) -> Result<DecodeStep> {
    if cache.dim() != 0 && q_t.len() != cache.dim() {
        return Err(Error::Shape(format!("query width {} != cache width {}", q_t.len(), cache.dim())));
    }
    if q_t.len() != k_t.len() {
        return Err(Error::Shape(format!("query width {} != key width {}", q_t.len(), k_t.len())));
    }
    let position = cache.next_position();
    cache.append(k_t, v_t, position)?;
    let scale = 1.0 / (q_t.len() as f64).sqrt();
    let (z, a, o) = attend_row(q_t, cache.keys(), cache.values(), scale)?;
    Ok(DecodeStep { q_t: q_t.to_vec(), z, a, o, position })
}

/// One query against a full (unmasked) key/value set.
pub(crate) fn attend_row(q: &[f64], k: &Matrix, v: &Matrix, scale: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let z: Vec<f64> = k.iter_rows().map(|kj| scale * dot(q, kj)).collect();
    let mut a = vec![0.0; z.len()];
    softmax_into(&z, &mut a).map_err(|_| Error::DegenerateRow { row: 0 })?;
    let mut o = vec![0.0; v.cols()];
    for (j, &w) in a.iter().enumerate() {
        for (acc, &x) in o.iter_mut().zip(v.row(j)) {
            *acc += w * x;
        }
    }
    Ok((z, a, o))
}
