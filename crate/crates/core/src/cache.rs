//! Per-head key/value store that remembers each row's original position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::policy::EvictionDecision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    keys: Matrix,
    values: Matrix,
    positions: Vec<usize>,
    d: usize,
    /// One past the largest position ever appended; evicted positions
    /// stay below this so they can never come back.
    next_position: usize,
    appended: usize,
    evicted: usize,
}

impl KvCache {
    pub fn new(d: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, d),
            values: Matrix::zeros(0, d),
            positions: Vec::new(),
            d,
            next_position: 0,
            appended: 0,
            evicted: 0,
        }
    }

    /// Builds a cache from prefilled rows at positions `0..rows`.
    pub fn from_prefill(keys: Matrix, values: Matrix) -> Result<Self> {
        let mut cache = Self::new(keys.cols());
        for i in 0..keys.rows() {
            cache.append(keys.row(i), values.row(i), i)?;
        }
        Ok(cache)
    }

    pub fn append(&mut self, k: &[f64], v: &[f64], original_pos: usize) -> Result<()> {
        if k.len() != self.d || v.len() != self.d {
            return Err(Error::Shape(format!(
                "key/value widths {}/{} do not match cache width {}",
                k.len(),
                v.len(),
                self.d
            )));
        }
        if self.appended > 0 && original_pos < self.next_position {
            return Err(Error::Ordering { pos: original_pos, last: self.next_position - 1 });
        }
        self.keys.push_row(k)?;
        self.values.push_row(v)?;
        self.positions.push(original_pos);
        self.next_position = original_pos + 1;
        self.appended += 1;
        Ok(())
    }

    /// Keeps only `decision.retained` (slot indices), preserving order.
    pub fn apply_eviction(&mut self, decision: &EvictionDecision) -> Result<()> {
        self.retain_slots(&decision.retained)
    }

    pub fn retain_slots(&mut self, slots: &[usize]) -> Result<()> {
        let len = self.len();
        let mut prev = None;
        for &s in slots {
            if s >= len {
                return Err(Error::Index { index: s, len });
            }
            if prev.is_some_and(|p| s <= p) {
                return Err(Error::Shape("retained slots must be strictly increasing".into()));
            }
            prev = Some(s);
        }
        self.keys = self.keys.select_rows(slots);
        self.values = self.values.select_rows(slots);
        self.positions = slots.iter().map(|&s| self.positions[s]).collect();
        self.evicted += len - slots.len();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn evicted(&self) -> usize {
        self.evicted
    }
}
