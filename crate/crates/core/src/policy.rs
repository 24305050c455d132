//! Budgeted retention: turns scores into the set of cache slots to keep.
//!
//! Selection follows the heavy-hitter scheme: the first `sink_count`
//! slots and everything from `cutoff = len - recent_window + num_coming`
//! on are kept unconditionally, the rest of the budget goes to the
//! best-scoring slots in between. Ties go to the later slot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{decode_step, TokenStep};
use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::saliency::{score, SaliencyVector, ScoreAccumulator, ScorerKind};

/// Indices of the `k` largest scores, ascending. Equal scores prefer the
/// larger index; NaN ranks below everything.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    idx.sort_unstable_by(|&a, &b| key(b).total_cmp(&key(a)).then(b.cmp(&a)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Total tokens kept after an eviction.
    pub budget: usize,
    pub sink_count: usize,
    pub recent_window: usize,
    /// 1-based perturbation window start over the scored query rows.
    pub window_start: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub scorer: ScorerKind,
    pub num_coming: usize,
    /// Decode loop: add each step's scores to a running total (H2O style)
    /// instead of using the newest step alone (TOVA style).
    #[serde(default = "yes")]
    pub accumulate: bool,
    /// Clamp negative joint scores to zero before ranking.
    #[serde(default)]
    pub clamp_joint: bool,
}

fn yes() -> bool {
    true
}

impl PolicyConfig {
    pub fn new(budget: usize, scorer: ScorerKind) -> Self {
        Self {
            budget,
            sink_count: 0,
            recent_window: 0,
            window_start: 1,
            pool_kernel: 1,
            pool_stride: 1,
            scorer,
            num_coming: 0,
            accumulate: true,
            clamp_joint: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sink_count + self.recent_window >= self.budget {
            return Err(Error::Config(format!(
                "sink_count {} + recent_window {} must be below budget {}",
                self.sink_count, self.recent_window, self.budget
            )));
        }
        if self.pool_kernel == 0 || self.pool_kernel % 2 == 0 {
            return Err(Error::Config(format!("pool_kernel must be odd, got {}", self.pool_kernel)));
        }
        if self.pool_stride == 0 {
            return Err(Error::Config("pool_stride must be at least 1".into()));
        }
        if self.window_start == 0 {
            return Err(Error::Config("window_start is 1-based".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionDecision {
    /// Kept slots, strictly increasing.
    pub retained: Vec<usize>,
    pub evicted: Vec<usize>,
    /// Scores after pooling/clamping, as ranked.
    pub scores_used: SaliencyVector,
}

impl EvictionDecision {
    pub fn from_retained(retained: Vec<usize>, cache_len: usize) -> Self {
        let evicted = (0..cache_len).filter(|i| retained.binary_search(i).is_err()).collect();
        Self { retained, evicted, scores_used: SaliencyVector::new(Vec::new(), ScorerKind::AttnL1, 1) }
    }

    pub fn is_noop(&self) -> bool {
        self.evicted.is_empty()
    }
}

/// Same-length sliding max with truncated windows at the edges. With
/// `stride > 1` each position holds the value of the window centred at the
/// stride point at or below it.
pub fn pool_scores(scores: &SaliencyVector, kernel: usize, stride: usize) -> Result<SaliencyVector> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("pool kernel must be odd, got {kernel}")));
    }
    if stride == 0 {
        return Err(Error::Config("pool stride must be at least 1".into()));
    }
    if kernel == 1 {
        return Ok(scores.clone());
    }
    let half = kernel / 2;
    let n = scores.len();
    let xs = &scores.scores;
    let window_max =
        |c: usize| xs[c.saturating_sub(half)..(c + half + 1).min(n)].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pooled = (0..n).map(|i| window_max(i - i % stride)).collect();
    Ok(SaliencyVector::new(pooled, scores.scorer, scores.window_start))
}

/// Picks the slots to keep for a cache of `cache_len` tokens.
pub fn select_retained(scores: &SaliencyVector, cache_len: usize, cfg: &PolicyConfig) -> Result<EvictionDecision> {
    cfg.validate()?;
    if scores.len() != cache_len {
        return Err(Error::Shape(format!("{} scores for {cache_len} cached tokens", scores.len())));
    }
    let mut ranked = scores.clone();
    if cfg.clamp_joint && ranked.scorer == ScorerKind::Joint {
        ranked.scores.iter_mut().for_each(|x| *x = x.max(0.0));
    }
    let ranked = pool_scores(&ranked, cfg.pool_kernel, cfg.pool_stride)?;
    if cache_len <= cfg.budget {
        return Ok(EvictionDecision { retained: (0..cache_len).collect(), evicted: Vec::new(), scores_used: ranked });
    }

    let cutoff = (cache_len - cfg.recent_window + cfg.num_coming).min(cache_len);
    let forced_recent = cache_len - cutoff;
    let heavy = cfg.budget - cfg.sink_count - forced_recent;

    let mut retained: Vec<usize> = (0..cfg.sink_count).collect();
    retained.extend(top_k(&ranked.scores[cfg.sink_count..cutoff], heavy).into_iter().map(|i| i + cfg.sink_count));
    retained.extend(cutoff..cache_len);

    let mut decision = EvictionDecision::from_retained(retained, cache_len);
    decision.scores_used = ranked;
    Ok(decision)
}

/// Host eviction scheme a scorer is plugged into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Host {
    H2o,
    Tova,
    SnapKv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// One eviction right after the prompt.
    Prefill,
    /// Eviction at every generated token.
    Decode,
}

/// A host scheme with a particular scorer. `h2o`, `tova`, `snapkv` use
/// attention mass; `value`, `key`, `joint` swap in the output-aware score
/// on the H2O host unless another host is named (`key@tova`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preset {
    pub host: Host,
    pub scorer: ScorerKind,
}

impl Preset {
    pub const H2O: Preset = Preset { host: Host::H2o, scorer: ScorerKind::AttnL1 };
    pub const TOVA: Preset = Preset { host: Host::Tova, scorer: ScorerKind::AttnL1 };
    pub const SNAPKV: Preset = Preset { host: Host::SnapKv, scorer: ScorerKind::AttnL1 };
    pub const VALUE: Preset = Preset { host: Host::H2o, scorer: ScorerKind::Value };
    pub const KEY: Preset = Preset { host: Host::H2o, scorer: ScorerKind::Key };
    pub const JOINT: Preset = Preset { host: Host::H2o, scorer: ScorerKind::Joint };
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, host) = match lower.split_once('@') {
            Some((n, h)) => (n, Some(h)),
            None => (lower.as_str(), None),
        };
        let host = host
            .map(|h| match h {
                "h2o" => Ok(Host::H2o),
                "tova" => Ok(Host::Tova),
                "snapkv" => Ok(Host::SnapKv),
                other => Err(Error::Config(format!("unknown host `{other}`"))),
            })
            .transpose()?;
        let base = match name {
            "h2o" => Preset::H2O,
            "tova" => Preset::TOVA,
            "snapkv" => Preset::SNAPKV,
            "value" => Preset::VALUE,
            "key" => Preset::KEY,
            "joint" => Preset::JOINT,
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        Ok(Preset { host: host.unwrap_or(base.host), ..base })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let host = match self.host {
            Host::H2o => "h2o",
            Host::Tova => "tova",
            Host::SnapKv => "snapkv",
        };
        if self.scorer == ScorerKind::AttnL1 {
            f.write_str(host)
        } else {
            write!(f, "{}@{host}", self.scorer)
        }
    }
}

/// How large the prefill perturbation window is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowRule {
    Rows(usize),
    /// Fraction of the prompt length, rounded up.
    Fraction(f64),
}

impl Default for WindowRule {
    fn default() -> Self {
        WindowRule::Rows(16)
    }
}

impl WindowRule {
    pub fn rows(self, context: usize) -> usize {
        let n = match self {
            WindowRule::Rows(n) => n,
            WindowRule::Fraction(f) => (f * context as f64).ceil() as usize,
        };
        n.clamp(1, context.max(1))
    }
}

pub const DECODE_SINKS: usize = 4;
pub const SNAPKV_KERNEL: usize = 7;

pub fn preset(p: Preset, phase: Phase, context: usize, budget: usize) -> Result<PolicyConfig> {
    preset_with_window(p, phase, context, budget, WindowRule::default())
}

/// Configuration of a host scheme. `context` is the prompt length for
/// prefill presets (it sizes the window); decode presets ignore it.
pub fn preset_with_window(
    p: Preset,
    phase: Phase,
    context: usize,
    budget: usize,
    rule: WindowRule,
) -> Result<PolicyConfig> {
    let mut cfg = PolicyConfig::new(budget, p.scorer);
    match phase {
        Phase::Prefill => {
            if context == 0 {
                return Err(Error::Config("prefill presets need a non-empty prompt".into()));
            }
            let rows = rule.rows(context);
            match p.host {
                Host::H2o | Host::SnapKv => {
                    cfg.window_start = context + 1 - rows;
                    cfg.recent_window = rows;
                }
                Host::Tova => cfg.window_start = context,
            }
            if p.host == Host::SnapKv {
                cfg.pool_kernel = SNAPKV_KERNEL;
            }
        }
        Phase::Decode => {
            cfg.sink_count = DECODE_SINKS;
            cfg.num_coming = 1;
            match p.host {
                Host::H2o => cfg.recent_window = budget / 4,
                Host::Tova => cfg.accumulate = false,
                Host::SnapKv => {
                    return Err(Error::Config("snapkv has no decode-phase variant".into()));
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One decode step: the attention output and the eviction that followed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub output: Vec<f64>,
    /// Cache length right after the append, before eviction.
    pub len_before: usize,
    pub decision: EvictionDecision,
    /// Original positions removed in this step.
    pub evicted_positions: Vec<usize>,
    pub len_after: usize,
}

/// Owns a cache and its accumulator; appends, scores, accumulates and
/// evicts one token at a time.
#[derive(Debug, Clone)]
pub struct DecodeSimulator {
    cfg: PolicyConfig,
    cache: KvCache,
    acc: ScoreAccumulator,
    steps: usize,
}

impl DecodeSimulator {
    pub fn new(d: usize, cfg: PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, cache: KvCache::new(d), acc: ScoreAccumulator::new(), steps: 0 })
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn accumulator(&self) -> &ScoreAccumulator {
        &self.acc
    }

    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<StepRecord> {
        let out = decode_step(&mut self.cache, q, k, v)?;
        let inst = out.to_instance(&self.cache)?;
        let fresh = score(&inst, self.cfg.scorer, 1)?;
        let positions = self.cache.positions().to_vec();
        let scores = if self.cfg.accumulate {
            self.acc.accumulate(&fresh, &positions, &positions)?;
            self.acc.scores_for(&positions, self.cfg.scorer, 1)
        } else {
            fresh
        };
        let len_before = self.cache.len();
        let decision = select_retained(&scores, len_before, &self.cfg)?;
        let evicted_positions = decision.evicted.iter().map(|&s| positions[s]).collect();
        self.cache.apply_eviction(&decision)?;
        if self.cfg.accumulate {
            self.acc.retain(self.cache.positions());
        }
        let record = StepRecord {
            step: self.steps,
            output: out.o,
            len_before,
            decision,
            evicted_positions,
            len_after: self.cache.len(),
        };
        self.steps += 1;
        Ok(record)
    }
}

/// Runs a whole decode trace from an empty cache.
pub fn decode_evict_loop(trace: &[TokenStep], cfg: &PolicyConfig) -> Result<Vec<StepRecord>> {
    let d = trace.first().map_or(0, |t| t.q.len());
    let mut sim = DecodeSimulator::new(d, cfg.clone())?;
    trace.iter().map(|t| sim.step(&t.q, &t.k, &t.v)).collect()
}
