//! Experiment drivers: per-position score tables, oracle recall sweeps and
//! decode simulations. The CLI and the Python bindings are thin wrappers
//! over these.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{decode_step, window_start_for_size, AttentionInstance, TokenStep};
use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::matrix::{dist_sq, Matrix};
use crate::oracle::{
    exact_eviction_errors, taylor_residual, topk_recall_reserved, true_eviction_errors, Distribution, OracleReport,
    PruneMode, RecallEntry,
};
use crate::policy::{decode_evict_loop, top_k, PolicyConfig};
use crate::saliency::{aggregate_group, score, SaliencyVector, ScorerKind};
use crate::workload::rng::NormalStream;
use crate::workload::{gen_needle, trace_instance, NeedleSpec, TraceHeader, TraceTensors};

/// All four scores of one cached position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub instance: usize,
    pub layer: usize,
    pub head: usize,
    pub kv_head: usize,
    pub position: usize,
    pub value: f64,
    pub key: f64,
    pub joint: f64,
    pub attn_l1: f64,
}

impl ScoreRow {
    pub const CSV_HEADER: &'static str = "instance,layer,head,kv_head,position,value,key,joint,attn_l1";

    pub fn get(&self, kind: ScorerKind) -> f64 {
        match kind {
            ScorerKind::Value => self.value,
            ScorerKind::Key => self.key,
            ScorerKind::Joint => self.joint,
            ScorerKind::AttnL1 => self.attn_l1,
        }
    }

    /// One CSV line; floats use Rust's shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{:e},{:e},{:e}",
            self.instance,
            self.layer,
            self.head,
            self.kv_head,
            self.position,
            self.value,
            self.key,
            self.joint,
            self.attn_l1
        )
    }
}

/// Where the tagged rows of a score table came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RowTag {
    pub instance: usize,
    pub layer: usize,
    pub head: usize,
    pub kv_head: usize,
}

/// Scores every cached position of `inst` over the last `window` query rows.
pub fn score_rows(inst: &AttentionInstance, window: usize, tag: RowTag) -> Result<Vec<ScoreRow>> {
    let w = window_start_for_size(inst.q_len(), window);
    let [value, key, joint, attn] = ScorerKind::ALL.map(|kind| score(inst, kind, w));
    let (value, key, joint, attn) = (value?.scores, key?.scores, joint?.scores, attn?.scores);
    Ok((0..inst.seq_len())
        .map(|p| ScoreRow {
            instance: tag.instance,
            layer: tag.layer,
            head: tag.head,
            kv_head: tag.kv_head,
            position: p,
            value: value[p],
            key: key[p],
            joint: joint[p],
            attn_l1: attn[p],
        })
        .collect())
}

/// Score table over every (layer, query head) of a trace, prompt rows only.
pub fn score_trace(header: &TraceHeader, tensors: &TraceTensors, window: usize) -> Result<Vec<ScoreRow>> {
    let heads: Vec<(usize, usize)> =
        (0..header.num_layers).flat_map(|l| (0..header.num_q_heads).map(move |h| (l, h))).collect();
    let tables: Vec<Vec<ScoreRow>> = heads
        .par_iter()
        .map(|&(layer, head)| {
            let inst = trace_instance(header, tensors, layer, head)?;
            let tag = RowTag { instance: 0, layer, head, kv_head: header.kv_head_of(head) };
            score_rows(&inst, window, tag)
        })
        .collect::<Result<_>>()?;
    Ok(tables.into_iter().flatten().collect())
}

/// Scores of one KV head: the sum over the query heads in its group.
pub fn kv_head_scores(
    header: &TraceHeader,
    tensors: &TraceTensors,
    layer: usize,
    kv_head: usize,
    kind: ScorerKind,
    window: usize,
) -> Result<SaliencyVector> {
    if kv_head >= header.num_kv_heads {
        return Err(Error::Index { index: kv_head, len: header.num_kv_heads });
    }
    let g = header.group_size();
    let per_head = (kv_head * g..(kv_head + 1) * g)
        .map(|h| {
            let inst = trace_instance(header, tensors, layer, h)?;
            score(&inst, kind, window_start_for_size(inst.q_len(), window))
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_group(&per_head, g)
}

/// Which synthetic prompts the recall sweep runs over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecallWorkload {
    /// [`NeedleSpec::with_shape`] for each seed.
    Needle { s: usize, d: usize },
    /// Gaussian prompt of length `s` (every position a query row) and a
    /// Gaussian decode query.
    Random { s: usize, d: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallConfig {
    pub workload: RecallWorkload,
    pub first_seed: u64,
    pub instances: usize,
    pub ks: Vec<usize>,
    pub scorers: Vec<ScorerKind>,
    /// Perturbation window sizes in query rows; anything at or above the
    /// prompt length means the full prompt.
    pub windows: Vec<usize>,
    /// Recent positions the candidate always keeps. Combinations with
    /// `reserve > k` are skipped.
    pub reserves: Vec<usize>,
}

impl RecallConfig {
    /// 100 needle prompts, k = 4, windows {1, 4, 16, 64}, reserve {0, 2}.
    pub fn needle_default() -> Self {
        Self {
            workload: RecallWorkload::Needle { s: NeedleSpec::DEFAULT_LEN, d: NeedleSpec::DEFAULT_DIM },
            first_seed: 0,
            instances: 100,
            ks: vec![4],
            scorers: ScorerKind::ALL.to_vec(),
            windows: vec![1, 4, 16, 64],
            reserves: vec![0, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config("instances must be positive".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("k list must be non-empty and positive".into()));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config("window list must be non-empty and positive".into()));
        }
        if self.reserves.is_empty() {
            return Err(Error::Config("reserve list must be non-empty".into()));
        }
        match self.workload {
            RecallWorkload::Random { s, d } if s == 0 || d == 0 => {
                Err(Error::Config("random workload needs positive s and d".into()))
            }
            RecallWorkload::Needle { s, d } => NeedleSpec::with_shape(s, d, 0).validate(),
            _ => Ok(()),
        }
    }
}

/// A prefill instance and the first decode query.
pub fn recall_instance(workload: &RecallWorkload, seed: u64) -> Result<(AttentionInstance, Vec<f64>)> {
    match *workload {
        RecallWorkload::Needle { s, d } => gen_needle(&NeedleSpec::with_shape(s, d, seed)),
        RecallWorkload::Random { s, d } => {
            let mut rng = NormalStream::new(seed);
            let mut m = |rows| Matrix::from_vec(rows, d, rng.take(rows * d)).expect("sized buffer");
            let (q, k, v) = (m(s), m(s), m(s));
            let next = rng.take(d);
            Ok((AttentionInstance::compute(q, k, v, true)?, next))
        }
    }
}

/// Key in the per-instance hit table.
type RecallKey = (String, usize, usize, usize);

struct InstanceResult {
    exact: Vec<f64>,
    truth: Vec<f64>,
    gap: Vec<f64>,
    recall: BTreeMap<RecallKey, f64>,
}

fn resolved_windows(windows: &[usize], s: usize) -> Vec<usize> {
    let mut out: Vec<usize> = windows.iter().map(|&w| w.min(s)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn run_instance(cfg: &RecallConfig, seed: u64) -> Result<InstanceResult> {
    let (inst, next) = recall_instance(&cfg.workload, seed)?;
    let s = inst.seq_len();
    let truth = SaliencyVector::new(true_eviction_errors(&inst, &next)?, ScorerKind::AttnL1, 1);
    let exact = exact_eviction_errors(&inst, PruneMode::joint_zero(), 1)?;
    let removed = exact_eviction_errors(&inst, PruneMode::remove(), 1)?;
    let gap = exact.iter().zip(&removed).map(|(a, b)| (a - b).abs()).collect();
    let proxy = SaliencyVector::new(exact.clone(), ScorerKind::Joint, 1);

    let mut recall = BTreeMap::new();
    let mut record = |name: &str, window: usize, cand: &SaliencyVector| -> Result<()> {
        for &k in &cfg.ks {
            if k > s {
                return Err(Error::Config(format!("k = {k} exceeds prompt length {s}")));
            }
            for &reserve in cfg.reserves.iter().filter(|&&r| r <= k) {
                let r = topk_recall_reserved(&truth, cand, k, reserve)?;
                recall.insert((name.to_string(), window, k, reserve), r);
            }
        }
        Ok(())
    };
    record("oracle", s, &truth)?;
    record("proxy", s, &proxy)?;
    for window in resolved_windows(&cfg.windows, s) {
        let w = window_start_for_size(inst.q_len(), window);
        for &kind in &cfg.scorers {
            record(kind.as_str(), window, &score(&inst, kind, w)?)?;
        }
    }
    Ok(InstanceResult { exact, truth: truth.scores, gap, recall })
}

pub const TAYLOR_EPS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Recall of each scorer's top-k against the first-decode-step eviction
/// error, averaged over the configured prompts. The report also carries the
/// exact zero-row joint errors (`proxy`), the oracle against itself, and a
/// key-mode expansion check on the first instance.
pub fn oracle_recall(cfg: &RecallConfig) -> Result<OracleReport> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.instances as u64).map(|i| cfg.first_seed + i).collect();
    let results: Vec<InstanceResult> = seeds.par_iter().map(|&seed| run_instance(cfg, seed)).collect::<Result<_>>()?;

    let n = results.len() as f64;
    let mut sums: BTreeMap<RecallKey, f64> = BTreeMap::new();
    for r in &results {
        for (key, v) in &r.recall {
            *sums.entry(key.clone()).or_default() += v;
        }
    }
    // report order: oracle, proxy, then scorers in config order
    let mut order: Vec<String> = vec!["oracle".into(), "proxy".into()];
    order.extend(cfg.scorers.iter().map(|k| k.as_str().to_string()));
    let mut recall = Vec::with_capacity(sums.len());
    for name in &order {
        for ((scorer, window, k, reserve), total) in &sums {
            if scorer == name {
                recall.push(RecallEntry {
                    scorer: scorer.clone(),
                    window: *window,
                    k: *k,
                    reserve: *reserve,
                    mean_recall: total / n,
                });
            }
        }
    }

    let (inst0, _) = recall_instance(&cfg.workload, cfg.first_seed)?;
    let p0 = top_k(&results[0].truth, 1)[0];
    let taylor_ratios = taylor_residual(&inst0, p0, PruneMode::key_zero(), 1, &TAYLOR_EPS)?
        .into_iter()
        .map(|t| (t.eps, t.ratio))
        .collect();
    let gaps: Vec<f64> = results.iter().flat_map(|r| r.gap.iter().copied()).collect();

    Ok(OracleReport {
        schema_version: OracleReport::SCHEMA_VERSION,
        instances: results.len(),
        seq_len: inst0.seq_len(),
        exact_window: inst0.q_len(),
        semantics_gap: Distribution::of(&gaps),
        exact_errors: results.iter().map(|r| r.exact.clone()).collect(),
        true_errors: results.into_iter().map(|r| r.truth).collect(),
        recall,
        taylor_ratios,
    })
}

/// One decode step of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRow {
    pub step: usize,
    pub len_before: usize,
    pub len_after: usize,
    pub evicted: Vec<usize>,
    /// `|o_evicted - o_full|` for this step's query.
    pub perturbation: f64,
}

impl DecodeRow {
    pub const CSV_HEADER: &'static str = "step,len_before,len_after,evicted,perturbation";

    /// Evicted positions are joined with `;`.
    pub fn to_csv(&self) -> String {
        let evicted: Vec<String> = self.evicted.iter().map(|p| p.to_string()).collect();
        format!("{},{},{},{},{:e}", self.step, self.len_before, self.len_after, evicted.join(";"), self.perturbation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub schema_version: u32,
    pub preset: String,
    pub budget: usize,
    pub steps: usize,
    pub d: usize,
    pub mean_perturbation: f64,
    pub max_perturbation: f64,
    pub final_len: usize,
    pub total_evicted: usize,
    pub config: PolicyConfig,
    pub rows: Vec<DecodeRow>,
}

impl DecodeReport {
    pub const SCHEMA_VERSION: u32 = 1;
}

/// Outputs of the same token stream with nothing evicted.
pub fn full_cache_outputs(trace: &[TokenStep]) -> Result<Vec<Vec<f64>>> {
    let d = trace.first().map_or(0, |t| t.q.len());
    let mut cache = KvCache::new(d);
    trace.iter().map(|t| Ok(decode_step(&mut cache, &t.q, &t.k, &t.v)?.o)).collect()
}

/// Runs the eviction loop and measures each step's output against the
/// full-cache reference.
pub fn simulate_decode(trace: &[TokenStep], cfg: &PolicyConfig, preset_name: &str) -> Result<DecodeReport> {
    if trace.is_empty() {
        return Err(Error::Config("decode simulation needs at least one step".into()));
    }
    let full = full_cache_outputs(trace)?;
    let records = decode_evict_loop(trace, cfg)?;
    let rows: Vec<DecodeRow> = records
        .into_iter()
        .zip(&full)
        .map(|(r, o)| DecodeRow {
            step: r.step,
            len_before: r.len_before,
            len_after: r.len_after,
            perturbation: dist_sq(&r.output, o).sqrt(),
            evicted: r.evicted_positions,
        })
        .collect();
    let n = rows.len() as f64;
    Ok(DecodeReport {
        schema_version: DecodeReport::SCHEMA_VERSION,
        preset: preset_name.to_string(),
        budget: cfg.budget,
        steps: rows.len(),
        d: trace[0].q.len(),
        mean_perturbation: rows.iter().map(|r| r.perturbation).sum::<f64>() / n,
        max_perturbation: rows.iter().map(|r| r.perturbation).fold(0.0, f64::max),
        final_len: rows.last().map_or(0, |r| r.len_after),
        total_evicted: rows.iter().map(|r| r.evicted.len()).sum(),
        config: cfg.clone(),
        rows,
    })
}
