//! Token saliency scores over a perturbation window.
//!
//! For query rows `i` in the window and a cached position `p`:
//!
//! * value:  `sum_i A[i,p]^2 * |v_p|^2`
//! * key:    `sum_i (A[i,p] Z[i,p])^2 * |v_p - o_i|^2`
//! * joint:  `2 sum_i A[i,p]^2 Z[i,p] (|v_p|^2 - <v_p, o_i>) + value + key`
//! * attn-l1: `sum_i |A[i,p]|`, the accumulated-attention family (H2O with
//!   the whole history, TOVA with the last row, SnapKV with a short window).
//!
//! The value score is the exact output error of zeroing `v_p`; the key and
//! joint scores are the second-order expansion of the error of zeroing
//! `k_p` (and `v_p`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInstance, MASKED};
use crate::error::{Error, Result};
use crate::matrix::{dist_sq, dot, norm_sq, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Value,
    Key,
    Joint,
    AttnL1,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 4] = [ScorerKind::Value, ScorerKind::Key, ScorerKind::Joint, ScorerKind::AttnL1];

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Value => "value",
            ScorerKind::Key => "key",
            ScorerKind::Joint => "joint",
            ScorerKind::AttnL1 => "attn_l1",
        }
    }

    /// Value, key and attention-mass scores are sums of non-negative terms.
    pub fn is_nonnegative(self) -> bool {
        !matches!(self, ScorerKind::Joint)
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "value" => Ok(ScorerKind::Value),
            "key" => Ok(ScorerKind::Key),
            "joint" => Ok(ScorerKind::Joint),
            "attn_l1" | "attn" | "l1" => Ok(ScorerKind::AttnL1),
            other => Err(Error::Config(format!("unknown scorer `{other}`"))),
        }
    }
}

/// Per-position scores for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector {
    pub scores: Vec<f64>,
    pub scorer: ScorerKind,
    /// 1-based first query row of the perturbation window.
    pub window_start: usize,
}

impl SaliencyVector {
    pub fn new(scores: Vec<f64>, scorer: ScorerKind, window_start: usize) -> Self {
        Self { scores, scorer, window_start }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// The three summands of the joint score, kept apart for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointParts {
    pub cross: Vec<f64>,
    pub value: Vec<f64>,
    pub key: Vec<f64>,
}

impl JointParts {
    pub fn total(&self) -> Vec<f64> {
        self.cross.iter().zip(&self.value).zip(&self.key).map(|((c, v), k)| c + v + k).collect()
    }
}

pub fn score_value(inst: &AttentionInstance, w: usize) -> Result<SaliencyVector> {
    let rows = inst.window_rows(w)?;
    let scores = (0..inst.seq_len())
        .map(|p| {
            let col_sq: f64 = rows.clone().map(|i| inst.a[(i, p)].powi(2)).sum();
            col_sq * norm_sq(inst.v.row(p))
        })
        .collect();
    Ok(SaliencyVector::new(scores, ScorerKind::Value, w))
}

pub fn score_key(inst: &AttentionInstance, w: usize) -> Result<SaliencyVector> {
    let rows = inst.window_rows(w)?;
    let scores = (0..inst.seq_len())
        .map(|p| {
            let vp = inst.v.row(p);
            rows.clone()
                .filter(|&i| inst.z[(i, p)] != MASKED)
                .map(|i| (inst.a[(i, p)] * inst.z[(i, p)]).powi(2) * dist_sq(vp, inst.o.row(i)))
                .sum()
        })
        .collect();
    Ok(SaliencyVector::new(scores, ScorerKind::Key, w))
}

/// Cross term `2 sum_i A^2 Z (|v_p|^2 - <v_p, o_i>)` alone.
pub fn score_cross(inst: &AttentionInstance, w: usize) -> Result<Vec<f64>> {
    let rows = inst.window_rows(w)?;
    Ok((0..inst.seq_len())
        .map(|p| {
            let vp = inst.v.row(p);
            let vv = norm_sq(vp);
            2.0 * rows
                .clone()
                .filter(|&i| inst.z[(i, p)] != MASKED)
                .map(|i| inst.a[(i, p)].powi(2) * inst.z[(i, p)] * (vv - dot(vp, inst.o.row(i))))
                .sum::<f64>()
        })
        .collect())
}

pub fn joint_parts(inst: &AttentionInstance, w: usize) -> Result<JointParts> {
    Ok(JointParts {
        cross: score_cross(inst, w)?,
        value: score_value(inst, w)?.scores,
        key: score_key(inst, w)?.scores,
    })
}

pub fn score_joint(inst: &AttentionInstance, w: usize) -> Result<SaliencyVector> {
    let parts = joint_parts(inst, w)?;
    Ok(SaliencyVector::new(parts.total(), ScorerKind::Joint, w))
}

pub fn score_attn_l1(inst: &AttentionInstance, w: usize) -> Result<SaliencyVector> {
    let rows = inst.window_rows(w)?;
    let scores = (0..inst.seq_len()).map(|p| rows.clone().map(|i| inst.a[(i, p)].abs()).sum()).collect();
    Ok(SaliencyVector::new(scores, ScorerKind::AttnL1, w))
}

pub fn score(inst: &AttentionInstance, kind: ScorerKind, w: usize) -> Result<SaliencyVector> {
    match kind {
        ScorerKind::Value => score_value(inst, w),
        ScorerKind::Key => score_key(inst, w),
        ScorerKind::Joint => score_joint(inst, w),
        ScorerKind::AttnL1 => score_attn_l1(inst, w),
    }
}

/// Sums the scores of the query heads that share one KV head.
pub fn aggregate_group(per_query_head: &[SaliencyVector], group_size: usize) -> Result<SaliencyVector> {
    if per_query_head.len() != group_size || group_size == 0 {
        return Err(Error::Aggregation(format!("expected {group_size} query heads, got {}", per_query_head.len())));
    }
    let first = &per_query_head[0];
    let mut sum = vec![0.0; first.len()];
    for sv in per_query_head {
        if sv.len() != first.len() || sv.scorer != first.scorer || sv.window_start != first.window_start {
            return Err(Error::Aggregation("query heads disagree on length, scorer or window".into()));
        }
        for (acc, x) in sum.iter_mut().zip(&sv.scores) {
            *acc += x;
        }
    }
    Ok(SaliencyVector::new(sum, first.scorer, first.window_start))
}

/// Rebuilds logits from weights alone: `Z = ln A - max_j ln A[i,j]`, so the
/// largest unmasked logit of each row is 0. Zero weights become masked.
pub fn reconstruct_logits(a: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let max_ln = row.iter().filter(|&&x| x > 0.0).map(|x| x.ln()).fold(f64::NEG_INFINITY, f64::max);
        for (j, &x) in row.iter().enumerate() {
            z[(i, j)] = if x > 0.0 { x.ln() - max_ln } else { MASKED };
        }
    }
    z
}

/// Running per-position score sums for decode-time eviction. Keys are
/// original token positions; evicted positions are dropped for good.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreAccumulator {
    running: BTreeMap<usize, f64>,
    steps_seen: usize,
}

impl ScoreAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_seen(&self) -> usize {
        self.steps_seen
    }

    pub fn len(&self) -> usize {
        self.running.len()
    }

    pub fn is_empty(&self) -> bool {
        self.running.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<f64> {
        self.running.get(&pos).copied()
    }

    /// Adds `fresh` (aligned with `cached_positions`) for every kept
    /// position and forgets everything else.
    pub fn accumulate(
        &mut self,
        fresh: &SaliencyVector,
        cached_positions: &[usize],
        kept_positions: &[usize],
    ) -> Result<()> {
        if fresh.len() != cached_positions.len() {
            return Err(Error::Accumulator(format!(
                "{} scores for {} cached positions",
                fresh.len(),
                cached_positions.len()
            )));
        }
        if let Some(stale) = self.running.keys().find(|p| cached_positions.binary_search(p).is_err()) {
            return Err(Error::Accumulator(format!("position {stale} is tracked but no longer cached")));
        }
        if let Some(bad) = kept_positions.iter().find(|p| cached_positions.binary_search(p).is_err()) {
            return Err(Error::Accumulator(format!("kept position {bad} is not cached")));
        }
        let mut next = BTreeMap::new();
        for (&pos, &x) in cached_positions.iter().zip(&fresh.scores) {
            if kept_positions.binary_search(&pos).is_ok() {
                next.insert(pos, self.running.get(&pos).copied().unwrap_or(0.0) + x);
            }
        }
        self.running = next;
        self.steps_seen += 1;
        Ok(())
    }

    /// Drops every position not in `positions`.
    pub fn retain(&mut self, positions: &[usize]) {
        self.running.retain(|p, _| positions.binary_search(p).is_ok());
    }

    /// Running totals for `positions`, in order; untracked positions read 0.
    pub fn scores_for(&self, positions: &[usize], scorer: ScorerKind, window_start: usize) -> SaliencyVector {
        let scores = positions.iter().map(|p| self.running.get(p).copied().unwrap_or(0.0)).collect();
        SaliencyVector::new(scores, scorer, window_start)
    }
}
