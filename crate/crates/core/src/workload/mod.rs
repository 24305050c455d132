//! Synthetic attention workloads and the on-disk trace container.
//!
//! All generators are pure functions of their spec: the same seed gives
//! bit-identical tensors (see [`rng`] for the stream definition).

pub mod rng;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInstance, TokenStep};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rng::NormalStream;

pub use trace::{
    decode_trace, encode_trace, gen_trace, read_trace, trace_instance, trace_steps, write_trace, LayerTensors,
    Precision, TraceHeader, TraceSpec, TraceTensors,
};

fn gaussian(rows: usize, cols: usize, rng: &mut NormalStream) -> Matrix {
    Matrix::from_vec(rows, cols, rng.take(rows * cols)).expect("sized buffer")
}

/// i.i.d. standard normal `Q` (`q_len x d`), then `K`, then `V` (`s x d`),
/// attended causally with the queries at the last `q_len` positions.
///
/// Panics if `s`, `d` or `q_len` is zero or `q_len > s`; see
/// [`try_gen_random`] for the checked form.
pub fn gen_random(s: usize, d: usize, q_len: usize, seed: u64) -> AttentionInstance {
    try_gen_random(s, d, q_len, seed).expect("valid dimensions")
}

pub fn try_gen_random(s: usize, d: usize, q_len: usize, seed: u64) -> Result<AttentionInstance> {
    if s == 0 || d == 0 || q_len == 0 || q_len > s {
        return Err(Error::Shape(format!("invalid dimensions s={s} d={d} q_len={q_len}")));
    }
    let mut rng = NormalStream::new(seed);
    let q = gaussian(q_len, d, &mut rng);
    let k = gaussian(s, d, &mut rng);
    let v = gaussian(s, d, &mut rng);
    AttentionInstance::compute(q, k, v, true)
}

/// Standard normal `(q, k, v)` per step, drawn in that order.
pub fn gen_decode_trace(steps: usize, d: usize, seed: u64) -> Vec<TokenStep> {
    let mut rng = NormalStream::new(seed);
    (0..steps).map(|_| TokenStep { q: rng.take(d), k: rng.take(d), v: rng.take(d) }).collect()
}

/// Toy passkey-retrieval prompt.
///
/// Every token carries a sinusoidal position code (so queries attend
/// locally) plus Gaussian content noise; query content drifts slowly from
/// row to row (an AR(1) process) and value norms are log-normal. The
/// needle key points along a dedicated direction with length
/// `signal_gain`, the last `question_rows` prompt queries and the decode
/// query look along that direction, and the needle value is long and
/// orthogonal to the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleSpec {
    pub s: usize,
    pub d: usize,
    pub needle_pos: usize,
    /// Needle key length along the retrieval direction (in logit units
    /// against a unit-strength query).
    pub signal_gain: f64,
    /// Standard deviation of the content noise in keys and queries.
    pub noise_scale: f64,
    /// Strength of the positional code in keys and queries (logit units).
    pub locality: f64,
    /// Standard deviation of `ln |v|` for background values.
    pub value_spread: f64,
    /// Length of the needle value vector.
    pub needle_value_norm: f64,
    /// Trailing prompt queries that also search for the needle.
    pub question_rows: usize,
    /// Lag-one correlation of consecutive query content vectors.
    pub query_corr: f64,
    pub seed: u64,
}

impl NeedleSpec {
    pub const DEFAULT_LEN: usize = 64;
    pub const DEFAULT_DIM: usize = 32;

    /// The frozen default workload for `seed`: 64 tokens, head width 32.
    pub fn standard(seed: u64) -> Self {
        Self::with_shape(Self::DEFAULT_LEN, Self::DEFAULT_DIM, seed)
    }

    /// Default construction parameters at another shape. The needle lands
    /// in `[s/8, s/8 + s/2)`, chosen by a hash of the seed.
    pub fn with_shape(s: usize, d: usize, seed: u64) -> Self {
        // splitmix-style scramble so consecutive seeds move the needle around
        let h = seed.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        let needle_pos = s / 8 + ((h >> 33) as usize) % (s / 2).max(1);
        Self {
            s,
            d,
            needle_pos,
            signal_gain: 7.0,
            noise_scale: 0.6,
            locality: 2.25,
            value_spread: 1.0,
            needle_value_norm: 6.0,
            question_rows: 4.min(s),
            query_corr: 0.95,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.needle_pos >= self.s {
            return Err(Error::Config(format!("needle_pos {} outside [0, {})", self.needle_pos, self.s)));
        }
        if self.signal_gain.is_nan() || self.signal_gain <= 0.0 {
            return Err(Error::Config("signal_gain must be positive".into()));
        }
        if self.d < 4 {
            return Err(Error::Config("needle workloads need d >= 4".into()));
        }
        if !(0.0..1.0).contains(&self.query_corr) {
            return Err(Error::Config("query_corr must lie in [0, 1)".into()));
        }
        if self.question_rows > self.s {
            return Err(Error::Config("question_rows exceeds prompt length".into()));
        }
        Ok(())
    }
}

/// Layout of the head dimensions used by the needle generator.
struct NeedleLayout {
    /// Retrieval direction (unit basis vector 0).
    needle_dir: usize,
    /// Sin/cos pairs carrying the position code.
    pos_dims: std::ops::Range<usize>,
    horizon: f64,
}

impl NeedleLayout {
    fn new(d: usize, s: usize) -> Self {
        // roughly a quarter of the head carries position, rounded to pairs
        let pairs = ((d - 1) / 8).max(1);
        Self { needle_dir: 0, pos_dims: 1..1 + 2 * pairs, horizon: s as f64 }
    }

    fn position_code(&self, pos: usize, strength: f64, out: &mut [f64]) {
        let pairs = self.pos_dims.len() / 2;
        let per_dim = strength / (pairs as f64).sqrt();
        for m in 0..pairs {
            // wavelengths s, 2s, 4s, ...: the sum of cos(ω (i - j)) peaks at
            // i = j and falls off with distance
            let omega = std::f64::consts::TAU / (self.horizon * 2f64.powi(m as i32));
            let angle = omega * pos as f64;
            out[self.pos_dims.start + 2 * m] += per_dim * angle.cos();
            out[self.pos_dims.start + 2 * m + 1] += per_dim * angle.sin();
        }
    }
}

/// Builds the prefill instance (causal, one query per prompt token) and the
/// first decode query.
pub fn gen_needle(spec: &NeedleSpec) -> Result<(AttentionInstance, Vec<f64>)> {
    spec.validate()?;
    let (s, d) = (spec.s, spec.d);
    let layout = NeedleLayout::new(d, s);
    let root_d = (d as f64).sqrt();
    let mut rng = NormalStream::new(spec.seed);
    let content = layout.pos_dims.end..d;

    let mut q = Matrix::zeros(s, d);
    let mut k = Matrix::zeros(s, d);
    let mut v = Matrix::zeros(s, d);
    for j in 0..s {
        let kj = k.row_mut(j);
        for c in content.clone() {
            kj[c] = spec.noise_scale * rng.normal();
        }
        layout.position_code(j, spec.locality, kj);

        let qj = q.row_mut(j);
        for c in content.clone() {
            qj[c] = spec.noise_scale * rng.normal();
        }
        if j > 0 && spec.query_corr > 0.0 {
            let rho = spec.query_corr;
            let fresh = (1.0 - rho * rho).sqrt();
            let (prev, cur) = q.as_mut_slice().split_at_mut(j * d);
            let (prev, cur) = (&prev[(j - 1) * d..], &mut cur[..d]);
            for c in content.clone() {
                cur[c] = rho * prev[c] + fresh * cur[c];
            }
        }
        let qj = q.row_mut(j);
        // queries carry the position code scaled by sqrt(d) so that the
        // 1/sqrt(d) logit scale leaves `locality^2` cos(ω (i - j)) terms
        layout.position_code(j, spec.locality * root_d, qj);

        let norm = (spec.value_spread * rng.normal()).exp();
        let vj = v.row_mut(j);
        let mut len = 0.0;
        for x in &mut vj[1..] {
            *x = rng.normal();
            len += *x * *x;
        }
        let len = len.sqrt();
        for x in &mut vj[1..] {
            *x *= norm / len;
        }
    }

    // needle: key along the retrieval direction, value orthogonal to the
    // background values (which live in dims 1..d)
    let needle = spec.needle_pos;
    k.row_mut(needle)[layout.needle_dir] = spec.signal_gain;
    let vn = v.row_mut(needle);
    vn.fill(0.0);
    vn[layout.needle_dir] = spec.needle_value_norm;

    for i in s - spec.question_rows..s {
        q.row_mut(i)[layout.needle_dir] = root_d;
    }

    let mut next = vec![0.0; d];
    let rho = spec.query_corr;
    for c in content {
        next[c] = rho * q[(s - 1, c)] + (1.0 - rho * rho).sqrt() * spec.noise_scale * rng.normal();
    }
    layout.position_code(s, spec.locality * root_d, &mut next);
    next[layout.needle_dir] = root_d;

    let inst = AttentionInstance::compute(q, k, v, true)?;
    Ok((inst, next))
}

/// Structured token stream for decode simulations: the needle generator's
/// background (position code, drifting query content, log-normal value
/// norms) without the needle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSpec {
    pub steps: usize,
    pub d: usize,
    pub noise_scale: f64,
    pub locality: f64,
    pub value_spread: f64,
    pub query_corr: f64,
    pub seed: u64,
}

impl DecodeSpec {
    pub fn standard(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            d: NeedleSpec::DEFAULT_DIM,
            noise_scale: 0.6,
            locality: 2.25,
            value_spread: 1.0,
            query_corr: 0.95,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.d < 4 {
            return Err(Error::Config("decode workloads need steps > 0 and d >= 4".into()));
        }
        if !(0.0..1.0).contains(&self.query_corr) {
            return Err(Error::Config("query_corr must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn gen_decode_workload(spec: &DecodeSpec) -> Result<Vec<TokenStep>> {
    spec.validate()?;
    let d = spec.d;
    let layout = NeedleLayout::new(d, spec.steps);
    let root_d = (d as f64).sqrt();
    let content = layout.pos_dims.end..d;
    let rho = spec.query_corr;
    let fresh = (1.0 - rho * rho).sqrt();
    let mut rng = NormalStream::new(spec.seed);
    let mut drift = vec![0.0; d];
    let mut out = Vec::with_capacity(spec.steps);
    for t in 0..spec.steps {
        let mut k = vec![0.0; d];
        for c in content.clone() {
            k[c] = spec.noise_scale * rng.normal();
        }
        layout.position_code(t, spec.locality, &mut k);

        for c in content.clone() {
            let z = spec.noise_scale * rng.normal();
            drift[c] = if t == 0 { z } else { rho * drift[c] + fresh * z };
        }
        let mut q = drift.clone();
        layout.position_code(t, spec.locality * root_d, &mut q);

        let norm = (spec.value_spread * rng.normal()).exp();
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= norm / len);
        out.push(TokenStep { q, k, v });
    }
    Ok(out)
}
