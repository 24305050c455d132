//! Brute-force ground truth for the saliency scores.
//!
//! Everything here recomputes attention from `Q`, `K`, `V` instead of
//! reading the instance's cached `Z`/`A`/`O`, so it stays independent of
//! the closed-form scorers it is used to check.

use serde::{Deserialize, Serialize};

use crate::attention::{softmax_into, AttentionInstance};
use crate::error::{Error, Result};
use crate::matrix::{dist_sq, dot, Matrix};
use crate::policy::top_k;
use crate::saliency::{score_joint, score_key, score_value, SaliencyVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneKind {
    Value,
    Key,
    Joint,
}

/// How a pruned token is taken out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    /// Overwrite the selected row(s) with zeros. A zeroed key still takes
    /// part in the softmax with logit 0.
    ZeroRow,
    /// Delete the token from the softmax entirely (what eviction does).
    /// The prune kind is irrelevant: removing a key removes the token.
    RemoveRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneMode {
    pub kind: PruneKind,
    pub semantics: Semantics,
}

impl PruneMode {
    pub const fn new(kind: PruneKind, semantics: Semantics) -> Self {
        Self { kind, semantics }
    }

    pub const fn value_zero() -> Self {
        Self::new(PruneKind::Value, Semantics::ZeroRow)
    }

    pub const fn key_zero() -> Self {
        Self::new(PruneKind::Key, Semantics::ZeroRow)
    }

    pub const fn joint_zero() -> Self {
        Self::new(PruneKind::Joint, Semantics::ZeroRow)
    }

    pub const fn remove() -> Self {
        Self::new(PruneKind::Joint, Semantics::RemoveRow)
    }
}

/// Windowed outputs with token `p` perturbed. For `ZeroRow` the targeted
/// rows are scaled by `1 - fraction` (`fraction = 1` zeroes them).
fn window_outputs(inst: &AttentionInstance, w: usize, perturb: Option<(usize, PruneMode, f64)>) -> Result<Matrix> {
    let rows = inst.window_rows(w)?;
    let s = inst.seq_len();
    let d = inst.dim();
    let q_offset = inst.q_offset();

    let (mut key_p, mut val_p, mut removed) = (None, None, None);
    if let Some((p, mode, fraction)) = perturb {
        match mode.semantics {
            Semantics::RemoveRow => removed = Some(p),
            Semantics::ZeroRow => {
                let keep = 1.0 - fraction;
                let scaled = |row: &[f64]| row.iter().map(|x| x * keep).collect::<Vec<_>>();
                if matches!(mode.kind, PruneKind::Key | PruneKind::Joint) {
                    key_p = Some((p, scaled(inst.k.row(p))));
                }
                if matches!(mode.kind, PruneKind::Value | PruneKind::Joint) {
                    val_p = Some((p, scaled(inst.v.row(p))));
                }
            }
        }
    }
    let key = |j: usize| match &key_p {
        Some((p, row)) if *p == j => row.as_slice(),
        _ => inst.k.row(j),
    };
    let val = |j: usize| match &val_p {
        Some((p, row)) if *p == j => row.as_slice(),
        _ => inst.v.row(j),
    };

    let mut out = Matrix::zeros(rows.len(), d);
    let mut logits = Vec::with_capacity(s);
    let mut weights = Vec::with_capacity(s);
    for (r, i) in rows.enumerate() {
        let visible = if inst.causal { (q_offset + i + 1).min(s) } else { s };
        let cols: Vec<usize> = (0..visible).filter(|&j| Some(j) != removed).collect();
        if cols.is_empty() {
            // nothing left to attend to: empty sum
            continue;
        }
        logits.clear();
        logits.extend(cols.iter().map(|&j| inst.scale * dot(inst.q.row(i), key(j))));
        weights.clear();
        weights.resize(cols.len(), 0.0);
        softmax_into(&logits, &mut weights).map_err(|_| Error::DegenerateRow { row: i })?;
        let o = out.row_mut(r);
        for (&j, &a) in cols.iter().zip(&weights) {
            for (acc, &x) in o.iter_mut().zip(val(j)) {
                *acc += a * x;
            }
        }
    }
    Ok(out)
}

fn check_position(inst: &AttentionInstance, p: usize) -> Result<()> {
    if p >= inst.seq_len() {
        return Err(Error::Index { index: p, len: inst.seq_len() });
    }
    Ok(())
}

/// `|Ô_{w:} - O_{w:}|_F^2` with token `p` pruned per `mode`.
pub fn exact_eviction_error(inst: &AttentionInstance, p: usize, mode: PruneMode, w: usize) -> Result<f64> {
    check_position(inst, p)?;
    let base = window_outputs(inst, w, None)?;
    let pert = window_outputs(inst, w, Some((p, mode, 1.0)))?;
    Ok(pert.frobenius_dist_sq(&base))
}

/// [`exact_eviction_error`] for every position.
pub fn exact_eviction_errors(inst: &AttentionInstance, mode: PruneMode, w: usize) -> Result<Vec<f64>> {
    let base = window_outputs(inst, w, None)?;
    (0..inst.seq_len()).map(|p| Ok(window_outputs(inst, w, Some((p, mode, 1.0)))?.frobenius_dist_sq(&base))).collect()
}

fn decode_output(inst: &AttentionInstance, query: &[f64], removed: Option<usize>) -> Result<Vec<f64>> {
    let cols: Vec<usize> = (0..inst.seq_len()).filter(|&j| Some(j) != removed).collect();
    let mut out = vec![0.0; inst.dim()];
    if cols.is_empty() {
        return Ok(out);
    }
    let logits: Vec<f64> = cols.iter().map(|&j| inst.scale * dot(query, inst.k.row(j))).collect();
    let mut weights = vec![0.0; cols.len()];
    softmax_into(&logits, &mut weights).map_err(|_| Error::DegenerateRow { row: 0 })?;
    for (&j, &a) in cols.iter().zip(&weights) {
        for (acc, &x) in out.iter_mut().zip(inst.v.row(j)) {
            *acc += a * x;
        }
    }
    Ok(out)
}

/// Change in the first decode-step output when token `p` is evicted.
///
/// The step attends with `next_query` over the prefill cache.
pub fn true_eviction_error(prefill: &AttentionInstance, next_query: &[f64], p: usize) -> Result<f64> {
    check_position(prefill, p)?;
    check_query(prefill, next_query)?;
    let full = decode_output(prefill, next_query, None)?;
    let cut = decode_output(prefill, next_query, Some(p))?;
    Ok(dist_sq(&full, &cut))
}

pub fn true_eviction_errors(prefill: &AttentionInstance, next_query: &[f64]) -> Result<Vec<f64>> {
    check_query(prefill, next_query)?;
    let full = decode_output(prefill, next_query, None)?;
    (0..prefill.seq_len()).map(|p| Ok(dist_sq(&full, &decode_output(prefill, next_query, Some(p))?))).collect()
}

fn check_query(inst: &AttentionInstance, q: &[f64]) -> Result<()> {
    if q.len() != inst.dim() {
        return Err(Error::Shape(format!("query width {} != head width {}", q.len(), inst.dim())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorPoint {
    pub eps: f64,
    /// `L(eps)`: windowed output error with the row(s) scaled by `1 - eps`.
    pub loss: f64,
    /// `L(eps) / eps^2` over the closed-form score; NaN when the score is 0.
    pub ratio: f64,
}

/// Finite-difference check of the closed-form scores along the pruning
/// direction.
pub fn taylor_residual(
    inst: &AttentionInstance,
    p: usize,
    mode: PruneMode,
    w: usize,
    eps_list: &[f64],
) -> Result<Vec<TaylorPoint>> {
    if mode.semantics != Semantics::ZeroRow {
        return Err(Error::UnsupportedSemantics("the expansion is only defined for zero-row pruning".into()));
    }
    check_position(inst, p)?;
    let closed = match mode.kind {
        PruneKind::Value => score_value(inst, w)?,
        PruneKind::Key => score_key(inst, w)?,
        PruneKind::Joint => score_joint(inst, w)?,
    }
    .scores[p];
    let base = window_outputs(inst, w, None)?;
    eps_list
        .iter()
        .map(|&eps| {
            let loss = window_outputs(inst, w, Some((p, mode, eps)))?.frobenius_dist_sq(&base);
            let ratio = if closed == 0.0 { f64::NAN } else { loss / (eps * eps) / closed };
            Ok(TaylorPoint { eps, loss, ratio })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln eps`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Empirical order of `L(eps)`; 2 means the first-order terms vanish.
pub fn convergence_order(points: &[TaylorPoint]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|t| (t.eps, t.loss)).collect();
    log_log_slope(&pts)
}

/// `|topk(reference) ∩ topk(candidate)| / k`, ties going to later positions.
pub fn topk_recall(reference: &SaliencyVector, candidate: &SaliencyVector, k: usize) -> Result<f64> {
    topk_recall_reserved(reference, candidate, k, 0)
}

/// Recall when the candidate always keeps the last `reserve` positions and
/// fills the remaining `k - reserve` slots by score from the rest.
pub fn topk_recall_reserved(
    reference: &SaliencyVector,
    candidate: &SaliencyVector,
    k: usize,
    reserve: usize,
) -> Result<f64> {
    let s = reference.len();
    if candidate.len() != s {
        return Err(Error::Metric(format!("lengths differ: {s} vs {}", candidate.len())));
    }
    if k == 0 || k > s {
        return Err(Error::Metric(format!("k = {k} outside [1, {s}]")));
    }
    if reserve > k {
        return Err(Error::Metric(format!("reserve {reserve} exceeds k = {k}")));
    }
    let truth = top_k(&reference.scores, k);
    let split = s - reserve;
    let mut picked = top_k(&candidate.scores[..split], k - reserve);
    picked.extend(split..s);
    let hits = picked.iter().filter(|p| truth.binary_search(p).is_ok()).count();
    Ok(hits as f64 / k as f64)
}

/// Summary statistics of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub min: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
    pub mean: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Self { count: 0, min: 0.0, p50: 0.0, p90: 0.0, max: 0.0, mean: 0.0 };
        }
        let q = |f: f64| v[((n - 1) as f64 * f).round() as usize];
        Self { count: n, min: v[0], p50: q(0.5), p90: q(0.9), max: v[n - 1], mean: v.iter().sum::<f64>() / n as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    /// A scorer name, or `proxy` for the exact zero-row joint error.
    pub scorer: String,
    /// Perturbation window size in query rows.
    pub window: usize,
    pub k: usize,
    pub reserve: usize,
    pub mean_recall: f64,
}

/// Aggregate output of an oracle-recall run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema_version: u32,
    pub instances: usize,
    pub seq_len: usize,
    /// Window size the `exact_errors` rows were computed with.
    pub exact_window: usize,
    /// Exact zero-row joint errors, one row per instance.
    pub exact_errors: Vec<Vec<f64>>,
    /// First-decode-step eviction errors, one row per instance.
    pub true_errors: Vec<Vec<f64>>,
    pub recall: Vec<RecallEntry>,
    /// `(eps, ratio)` pairs of a key-mode expansion check on instance 0.
    pub taylor_ratios: Vec<(f64, f64)>,
    /// `|RemoveRow - ZeroRow|` joint errors over all instances and positions.
    pub semantics_gap: Distribution,
}

impl OracleReport {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn mean_recall(&self, scorer: &str, window: usize, k: usize, reserve: usize) -> Option<f64> {
        self.recall
            .iter()
            .find(|e| e.scorer == scorer && e.window == window && e.k == k && e.reserve == reserve)
            .map(|e| e.mean_recall)
    }
}
