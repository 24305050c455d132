//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always show up in
//! `cargo test` output. Reference implementations below are written
//! against `Q`, `K`, `V` directly and share no code with the engine.
//!
//! `KVEVICT_BLESS=1 cargo test --test acceptance` rewrites the golden
//! baselines in `tests/golden/acceptance.json` from the current build.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use kvevict::harness::{oracle_recall, simulate_decode, RecallConfig};
use kvevict::matrix::Matrix;
use kvevict::oracle::{exact_eviction_error, taylor_residual, PruneMode};
use kvevict::policy::{preset, select_retained, top_k, Phase, PolicyConfig, Preset};
use kvevict::saliency::{joint_parts, score_attn_l1, score_joint, score_value, SaliencyVector, ScorerKind};
use kvevict::workload::rng::NormalStream;
use kvevict::workload::{
    decode_trace, encode_trace, gen_decode_workload, gen_needle, gen_random, gen_trace, DecodeSpec, NeedleSpec,
    Precision, TraceSpec,
};
use kvevict::{decode_step, AttentionInstance, KvCache, TokenStep};
use serde::{Deserialize, Serialize};

// ---------- tolerances ----------

const VALUE_REL_TOL: f64 = 1e-8;
const VALUE_BUDGET_SECS: f64 = 30.0;
const TAYLOR_EPS: [f64; 3] = [1e-2, 1e-3, 1e-4];
const TAYLOR_RATIO_BAND: (f64, f64) = (0.95, 1.05);
const TAYLOR_MIN_ORDER: f64 = 1.9;
const TAYLOR_BUDGET_SECS: f64 = 60.0;
const RESUM_TOL: f64 = 1e-12;
const BASELINE_TOL: f64 = 1e-12;
const RECALL_GOLDEN_TOL: f64 = 0.02;
const DECODE_GOLDEN_REL: f64 = 0.05;
const DECODE_EQUIV_TOL: f64 = 1e-10;
const NEEDLE_MIN_HITS: usize = 95;

// ---------- reference attention ----------

/// Causal attention with queries at the last `q.rows()` positions.
struct Reference {
    z: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    o: Vec<Vec<f64>>,
}

fn reference_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Reference {
    let (q_len, s, d) = (q.rows(), k.rows(), k.cols());
    let scale = 1.0 / (d as f64).sqrt();
    let (mut zs, mut as_, mut os) = (vec![], vec![], vec![]);
    for i in 0..q_len {
        let visible = s - q_len + i + 1;
        let mut z = vec![f64::NEG_INFINITY; s];
        for j in 0..visible {
            z[j] = scale * (0..d).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>();
        }
        let m = z[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..s).map(|j| if j < visible { (z[j] - m).exp() } else { 0.0 }).collect();
        let total: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / total).collect();
        let o: Vec<f64> = (0..d).map(|c| (0..s).map(|j| a[j] * v[(j, c)]).sum()).collect();
        zs.push(z);
        as_.push(a);
        os.push(o);
    }
    Reference { z: zs, a: as_, o: os }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

// ---------- reporting ----------

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, title: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, title, pass, detail }
}

// ---------- goldens ----------

#[derive(Debug, Default, Serialize, Deserialize)]
struct Goldens {
    /// "scorer/window/k/reserve" -> mean recall
    recall: BTreeMap<String, f64>,
    /// preset -> mean perturbation
    decode: BTreeMap<String, f64>,
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/acceptance.json")
}

fn blessing() -> bool {
    std::env::var_os("KVEVICT_BLESS").is_some_and(|v| v == "1")
}

fn load_goldens() -> Goldens {
    let text = std::fs::read_to_string(golden_path()).expect("golden baselines present");
    serde_json::from_str(&text).expect("golden baselines parse")
}

// ---------- criterion 1 ----------

fn shape_for(seed: u64) -> (usize, usize, usize, usize) {
    let s = 2 + (seed as usize * 37) % 63;
    let d = 2 + (seed as usize * 11) % 31;
    let q_len = 1 + (seed as usize * 7) % s;
    let w = 1 + (seed as usize * 13) % q_len;
    (s, d, q_len, w)
}

/// Zero-row value error recomputed from the reference attention: only
/// `v_p` changes, so the windowed outputs move by `-A[i,p] v_p`.
fn naive_value_error(q: &Matrix, k: &Matrix, v: &Matrix, p: usize, w: usize) -> f64 {
    let base = reference_attention(q, k, v);
    let mut v2 = v.clone();
    v2.row_mut(p).fill(0.0);
    let cut = reference_attention(q, k, &v2);
    (w - 1..q.rows()).map(|i| base.o[i].iter().zip(&cut.o[i]).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).sum()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut naive_worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..500u64 {
        let (s, d, q_len, w) = shape_for(seed);
        let inst = gen_random(s, d, q_len, seed);
        let closed = score_value(&inst, w).unwrap().scores;
        for p in 0..s {
            let exact = exact_eviction_error(&inst, p, PruneMode::value_zero(), w).unwrap();
            worst = worst.max(rel_err(closed[p], exact));
            checked += 1;
            if seed < 50 {
                naive_worst = naive_worst.max(rel_err(closed[p], naive_value_error(&inst.q, &inst.k, &inst.v, p, w)));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < VALUE_REL_TOL && naive_worst < VALUE_REL_TOL && secs < VALUE_BUDGET_SECS;
    outcome(
        1,
        "value score equals exact zero-row value error",
        pass,
        format!(
            "500 instances, {checked} positions, max rel err {worst:.2e} (naive recompute {naive_worst:.2e}) < {VALUE_REL_TOL:e}; {secs:.1}s < {VALUE_BUDGET_SECS}s"
        ),
    )
}

// ---------- criterion 2 ----------

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (mut worst_ratio, mut min_order, mut cases) = (0.0f64, f64::INFINITY, 0);
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let s = 4 + (seed as usize * 5) % 29;
        let d = 2 + (seed as usize * 3) % 15;
        let inst = gen_random(s, d, s, 10_000 + seed);
        let w = 1 + (seed as usize) % s;
        // three positions from the prefix every window row can see
        let ps = [0, w / 2, w - 1];
        for &p in &ps {
            for mode in [PruneMode::key_zero(), PruneMode::joint_zero()] {
                let pts = taylor_residual(&inst, p, mode, w, &TAYLOR_EPS).unwrap();
                let ratio = pts.last().unwrap().ratio;
                let order = kvevict::oracle::convergence_order(&pts);
                cases += 1;
                let ok = (TAYLOR_RATIO_BAND.0..=TAYLOR_RATIO_BAND.1).contains(&ratio) && order >= TAYLOR_MIN_ORDER;
                if !ok {
                    failures.push(format!("seed {seed} p {p} {:?}: ratio {ratio} order {order}", mode.kind));
                }
                worst_ratio = worst_ratio.max((ratio - 1.0).abs());
                min_order = min_order.min(order);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < TAYLOR_BUDGET_SECS;
    let mut detail = format!(
        "{cases} cases (key, joint), max |ratio-1| at eps=1e-4 {worst_ratio:.2e}, min order {min_order:.3} >= {TAYLOR_MIN_ORDER}; {secs:.1}s < {TAYLOR_BUDGET_SECS}s"
    );
    if let Some(f) = failures.first() {
        detail += &format!("; first failure: {f}");
    }
    outcome(2, "key/joint second-order expansion converges", pass, detail)
}

// ---------- criterion 3 ----------

fn criterion_3() -> Outcome {
    let (mut worst_resum, mut worst_compact) = (0.0f64, 0.0f64);
    for seed in 0..200u64 {
        let (s, d, q_len, w) = shape_for(seed + 7);
        let inst = gen_random(s, d, q_len, 20_000 + seed);
        let parts = joint_parts(&inst, w).unwrap();
        let joint = score_joint(&inst, w).unwrap().scores;
        let r = reference_attention(&inst.q, &inst.k, &inst.v);
        for p in 0..s {
            let resum = parts.cross[p] + parts.value[p] + parts.key[p];
            worst_resum = worst_resum.max((joint[p] - resum).abs() / joint[p].abs().max(1.0));
            // sum_i |A (v + Z (v - o))|^2, the same quantity without expansion
            let compact: f64 = (w - 1..q_len)
                .filter(|&i| r.z[i][p].is_finite())
                .map(|i| {
                    (0..d)
                        .map(|c| {
                            let vp = inst.v[(p, c)];
                            (r.a[i][p] * (vp + r.z[i][p] * (vp - r.o[i][c]))).powi(2)
                        })
                        .sum::<f64>()
                })
                .sum();
            let mag = parts.cross[p].abs() + parts.value[p] + parts.key[p];
            worst_compact = worst_compact.max((compact - resum).abs() / mag.max(1e-300));
        }
    }
    let pass = worst_resum <= RESUM_TOL && worst_compact <= 1e-10;
    outcome(
        3,
        "joint = cross + value + key",
        pass,
        format!(
            "200 instances, max re-sum err {worst_resum:.2e} <= {RESUM_TOL:e}; sum-of-squares form agrees to {worst_compact:.2e} (rel, <= 1e-10)"
        ),
    )
}

// ---------- criterion 4 ----------

fn criterion_4() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..100u64 {
        let s = 2 + (seed as usize * 17) % 63;
        let d = 2 + (seed as usize * 5) % 31;
        let inst = gen_random(s, d, s, 30_000 + seed);
        let r = reference_attention(&inst.q, &inst.k, &inst.v);
        let short = 1 + (seed as usize) % s.min(16);
        let cases = [(1usize, 0usize), (s, s - 1), (s + 1 - short, s - short)];
        for (slot, &(w, first_row)) in cases.iter().enumerate() {
            let got = score_attn_l1(&inst, w).unwrap().scores;
            for p in 0..s {
                let colsum: f64 = (first_row..s).map(|i| r.a[i][p]).sum();
                worst[slot] = worst[slot].max((got[p] - colsum).abs());
            }
        }
    }
    let pass = worst.iter().all(|&e| e <= BASELINE_TOL);
    outcome(
        4,
        "attn_l1 reduces to H2O / TOVA / SnapKV column sums",
        pass,
        format!(
            "100 instances, max abs err: H2O {:.1e}, TOVA {:.1e}, SnapKV {:.1e} (<= {BASELINE_TOL:e})",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------- criterion 5 ----------

fn reference_pool(xs: &[f64], kernel: usize, stride: usize) -> Vec<f64> {
    // kernel 1 means no pooling, whatever the stride
    if kernel == 1 {
        return xs.to_vec();
    }
    let half = (kernel / 2) as isize;
    (0..xs.len())
        .map(|i| {
            let c = (i - i % stride) as isize;
            let mut m = f64::NEG_INFINITY;
            for (j, &x) in xs.iter().enumerate() {
                if (j as isize - c).abs() <= half && x > m {
                    m = x;
                }
            }
            m
        })
        .collect()
}

/// Enumerates every admissible subset and keeps the one whose
/// (score, index) pairs, sorted descending, are lexicographically largest.
fn exhaustive_select(scores: &[f64], cfg: &PolicyConfig) -> Vec<usize> {
    let len = scores.len();
    if len <= cfg.budget {
        return (0..len).collect();
    }
    let pooled = reference_pool(scores, cfg.pool_kernel, cfg.pool_stride);
    let forced_recent = cfg.recent_window.saturating_sub(cfg.num_coming);
    let forced: Vec<usize> = (0..cfg.sink_count).chain(len - forced_recent..len).collect();
    let free: Vec<usize> = (cfg.sink_count..len - forced_recent).collect();
    let heavy = cfg.budget - forced.len();
    let mut best: Option<(Vec<(f64, usize)>, Vec<usize>)> = None;
    for mask in 0u32..(1 << free.len()) {
        if mask.count_ones() as usize != heavy {
            continue;
        }
        let chosen: Vec<usize> = free.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &i)| i).collect();
        let mut key: Vec<(f64, usize)> = chosen.iter().map(|&i| (pooled[i], i)).collect();
        key.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        let better = match &best {
            None => true,
            Some((bk, _)) => {
                key.iter().zip(bk).find_map(|(x, y)| match x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)) {
                    std::cmp::Ordering::Equal => None,
                    o => Some(o == std::cmp::Ordering::Greater),
                }) == Some(true)
            }
        };
        if better {
            best = Some((key, chosen));
        }
    }
    let mut out: Vec<usize> = forced;
    out.extend(best.map(|b| b.1).unwrap_or_default());
    out.sort_unstable();
    out
}

fn criterion_5() -> Outcome {
    let hand = {
        let cfg = PolicyConfig { recent_window: 1, ..PolicyConfig::new(4, ScorerKind::AttnL1) };
        let sv = SaliencyVector::new(vec![9.0, 1.0, 8.0, 2.0, 7.0, 3.0], ScorerKind::AttnL1, 1);
        select_retained(&sv, 6, &cfg).unwrap().retained
    };
    let hand_ok = hand == vec![0, 2, 4, 5];

    let mut rng = NormalStream::new(5);
    let mut pick = |n: usize| (rng.uniform() * n as f64) as usize;
    let (mut fuzzed, mut mismatches, mut invariant_breaks) = (0, 0, 0);
    let mut first_bad = None;
    while fuzzed < 1000 {
        let len = 2 + pick(13);
        let budget = 1 + pick(len + 2);
        let sink = pick(4);
        let recent = pick(5);
        if sink + recent >= budget {
            continue;
        }
        let cfg = PolicyConfig {
            sink_count: sink,
            recent_window: recent,
            num_coming: pick(3),
            pool_kernel: [1, 3, 5, 7][pick(4)],
            pool_stride: 1 + pick(2),
            ..PolicyConfig::new(budget, ScorerKind::AttnL1)
        };
        // a coarse grid makes ties common
        let scores: Vec<f64> = (0..len).map(|_| pick(6) as f64).collect();
        let got = select_retained(&SaliencyVector::new(scores.clone(), ScorerKind::AttnL1, 1), len, &cfg).unwrap();
        let want = exhaustive_select(&scores, &cfg);
        fuzzed += 1;
        if got.retained != want {
            mismatches += 1;
            first_bad.get_or_insert(format!("{cfg:?} {scores:?}: got {:?} want {want:?}", got.retained));
        }
        let r = &got.retained;
        let forced_recent = recent.saturating_sub(cfg.num_coming);
        let ok = r.len() == budget.min(len)
            && (len <= budget
                || ((0..sink).all(|s| r.contains(&s)) && (len - forced_recent..len).all(|s| r.contains(&s))));
        if !ok {
            invariant_breaks += 1;
        }
    }
    let pass = hand_ok && mismatches == 0 && invariant_breaks == 0;
    let mut detail = format!(
        "hand trace {hand:?} (want [0, 2, 4, 5]); {fuzzed} fuzzed configs: {mismatches} mismatches vs exhaustive selector, {invariant_breaks} invariant breaks"
    );
    if let Some(b) = first_bad {
        detail += &format!("; first: {b}");
    }
    outcome(5, "selection matches exhaustive reference", pass, detail)
}

// ---------- criterion 6 ----------

struct RefCache {
    pos: Vec<usize>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    running: BTreeMap<usize, f64>,
}

/// Step-by-step replay of the decode loop.
fn reference_decode(trace: &[TokenStep], cfg: &PolicyConfig) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut c = RefCache { pos: vec![], k: vec![], v: vec![], running: BTreeMap::new() };
    let mut out = Vec::new();
    for (t, tok) in trace.iter().enumerate() {
        c.pos.push(t);
        c.k.push(tok.k.clone());
        c.v.push(tok.v.clone());
        let d = tok.q.len();
        let scale = 1.0 / (d as f64).sqrt();
        let z: Vec<f64> = c.k.iter().map(|k| scale * k.iter().zip(&tok.q).map(|(a, b)| a * b).sum::<f64>()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let total: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / total).collect();
        let o: Vec<f64> = (0..d).map(|j| a.iter().zip(&c.v).map(|(w, v)| w * v[j]).sum()).collect();
        let fresh: Vec<f64> = (0..c.pos.len())
            .map(|j| {
                let v = &c.v[j];
                let vv: f64 = v.iter().map(|x| x * x).sum();
                let vo: f64 = v.iter().zip(&o).map(|(x, y)| x * y).sum();
                let dvo: f64 = v.iter().zip(&o).map(|(x, y)| (x - y).powi(2)).sum();
                let value = a[j] * a[j] * vv;
                let key = (a[j] * z[j]).powi(2) * dvo;
                match cfg.scorer {
                    ScorerKind::Value => value,
                    ScorerKind::Key => key,
                    ScorerKind::Joint => 2.0 * a[j] * a[j] * z[j] * (vv - vo) + value + key,
                    ScorerKind::AttnL1 => a[j].abs(),
                }
            })
            .collect();
        let scores: Vec<f64> = if cfg.accumulate {
            c.pos
                .iter()
                .zip(&fresh)
                .map(|(p, f)| {
                    let r = c.running.entry(*p).or_insert(0.0);
                    *r += f;
                    *r
                })
                .collect()
        } else {
            fresh
        };
        let keep = exhaustive_select_fast(&scores, cfg);
        let evicted: Vec<usize> =
            (0..c.pos.len()).filter(|i| keep.binary_search(i).is_err()).map(|i| c.pos[i]).collect();
        c.pos = keep.iter().map(|&i| c.pos[i]).collect();
        c.k = keep.iter().map(|&i| c.k[i].clone()).collect();
        c.v = keep.iter().map(|&i| c.v[i].clone()).collect();
        let live: Vec<usize> = c.pos.clone();
        c.running.retain(|p, _| live.contains(p));
        out.push((evicted, o));
    }
    out
}

/// Direct rule for long caches: sinks, forced recents, then the best
/// (score, index) pairs from the middle.
fn exhaustive_select_fast(scores: &[f64], cfg: &PolicyConfig) -> Vec<usize> {
    let len = scores.len();
    if len <= cfg.budget {
        return (0..len).collect();
    }
    let pooled = reference_pool(scores, cfg.pool_kernel, cfg.pool_stride);
    let forced_recent = cfg.recent_window.saturating_sub(cfg.num_coming);
    let mut mid: Vec<usize> = (cfg.sink_count..len - forced_recent).collect();
    mid.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]).then(b.cmp(&a)));
    mid.truncate(cfg.budget - cfg.sink_count - forced_recent);
    let mut out: Vec<usize> = (0..cfg.sink_count).chain(mid).chain(len - forced_recent..len).collect();
    out.sort_unstable();
    out
}

fn criterion_6() -> Outcome {
    let (mut runs, mut over_budget, mut mismatches, mut worst_out) = (0, 0, 0, 0.0f64);
    let presets = [Preset::H2O, Preset::TOVA, Preset::VALUE, Preset::KEY, Preset::JOINT];
    for seed in 0..40u64 {
        let d = 2 + (seed as usize) % 7;
        let trace = kvevict::gen_decode_trace(64, d, 40_000 + seed);
        for (n, p) in presets.iter().enumerate() {
            let budget = 6 + (seed as usize + n) % 20;
            let cfg = preset(*p, Phase::Decode, 0, budget).unwrap();
            let got = kvevict::decode_evict_loop(&trace, &cfg).unwrap();
            let want = reference_decode(&trace, &cfg);
            runs += 1;
            for (g, (ev, o)) in got.iter().zip(&want) {
                if g.len_after > budget {
                    over_budget += 1;
                }
                if &g.evicted_positions != ev {
                    mismatches += 1;
                }
                for (x, y) in g.output.iter().zip(o) {
                    worst_out = worst_out.max((x - y).abs());
                }
            }
        }
    }
    let pass = over_budget == 0 && mismatches == 0 && worst_out < 1e-12;
    outcome(
        6,
        "decode loop respects budget and matches reference replay",
        pass,
        format!(
            "{runs} runs x 64 steps: {over_budget} over-budget steps, {mismatches} eviction mismatches, max output diff {worst_out:.1e}"
        ),
    )
}

// ---------- criterion 7 ----------

fn recall_key(scorer: &str, window: usize, k: usize, reserve: usize) -> String {
    format!("{scorer}/{window}/{k}/{reserve}")
}

fn criterion_7(goldens: &mut Goldens) -> Outcome {
    let hits = (0..100u64)
        .filter(|&seed| {
            let spec = NeedleSpec::standard(seed);
            let (inst, next) = gen_needle(&spec).unwrap();
            let errs = kvevict::true_eviction_errors(&inst, &next).unwrap();
            top_k(&errs, 1)[0] == spec.needle_pos
        })
        .count();

    let cfg = RecallConfig::needle_default();
    let report = oracle_recall(&cfg).unwrap();
    let get = |s: &str, w: usize, r: usize| report.mean_recall(s, w, 4, r).unwrap();
    let mut direction = Vec::new();
    let mut ok = hits >= NEEDLE_MIN_HITS;
    for &w in &cfg.windows {
        for r in [0, 2] {
            let a = get("attn_l1", w, r);
            for s in ["key", "joint"] {
                if get(s, w, r) < a {
                    ok = false;
                    direction.push(format!("{s}<attn at w={w} r={r}"));
                }
            }
        }
    }
    let mut summary = Vec::new();
    for &w in &cfg.windows {
        summary.push(format!(
            "w={w}: joint {:.3} key {:.3} attn {:.3}",
            get("joint", w, 0),
            get("key", w, 0),
            get("attn_l1", w, 0)
        ));
    }
    // reserving recent slots must not hurt once the window is large
    for &w in cfg.windows.iter().filter(|&&w| w >= 16) {
        for s in ["value", "key", "joint", "attn_l1"] {
            if get(s, w, 2) < get(s, w, 0) {
                ok = false;
                direction.push(format!("{s} reserve hurts at w={w}"));
            }
        }
    }

    let measured: BTreeMap<String, f64> =
        report.recall.iter().map(|e| (recall_key(&e.scorer, e.window, e.k, e.reserve), e.mean_recall)).collect();
    let mut drift = 0.0f64;
    if blessing() {
        goldens.recall = measured;
    } else {
        for (key, want) in &goldens.recall {
            match measured.get(key) {
                Some(got) => drift = drift.max((got - want).abs()),
                None => drift = f64::INFINITY,
            }
        }
        ok &= drift <= RECALL_GOLDEN_TOL && !goldens.recall.is_empty();
    }
    let mut detail = format!(
        "needle argmax {hits}/100 (>= {NEEDLE_MIN_HITS}); {}; golden drift {drift:.3} <= {RECALL_GOLDEN_TOL}",
        summary.join(", ")
    );
    if !direction.is_empty() {
        detail += &format!("; violations: {}", direction.join(", "));
    }
    outcome(7, "oracle recall: key/joint >= attn_l1, reserve helps at large windows", ok, detail)
}

// ---------- criterion 8 ----------

fn criterion_8(goldens: &mut Goldens) -> Outcome {
    let trace = gen_decode_workload(&DecodeSpec::standard(64, 6)).unwrap();
    let run = |p: Preset| {
        let cfg = preset(p, Phase::Decode, 0, 16).unwrap();
        simulate_decode(&trace, &cfg, &p.to_string()).unwrap().mean_perturbation
    };
    let (h2o, key) = (run(Preset::H2O), run(Preset::KEY));
    let mut ok = key <= h2o;
    let mut drift = 0.0f64;
    if blessing() {
        goldens.decode = BTreeMap::from([("h2o".to_string(), h2o), ("key".to_string(), key)]);
    } else {
        for (name, got) in [("h2o", h2o), ("key", key)] {
            match goldens.decode.get(name) {
                Some(want) => drift = drift.max(rel_err(got, *want)),
                None => drift = f64::INFINITY,
            }
        }
        ok &= drift <= DECODE_GOLDEN_REL;
    }
    outcome(
        8,
        "decode perturbation: key preset <= h2o preset",
        ok,
        format!(
            "seed 6, 64 steps, budget 16: key {key:.4} vs h2o {h2o:.4}; golden drift {:.2}% <= {}%",
            drift * 100.0,
            DECODE_GOLDEN_REL * 100.0
        ),
    )
}

// ---------- criterion 9 ----------

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_kvevict"))
        .args(args)
        .current_dir(dir)
        .env_remove("KVEVICT_OUT_DIR")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn criterion_9() -> Outcome {
    let mut round_trips = 0;
    for i in 0..20u64 {
        let spec = TraceSpec {
            num_layers: 1 + (i as usize) % 3,
            num_kv_heads: 1 + (i as usize) % 2,
            num_q_heads: (1 + (i as usize) % 2) * (1 + (i as usize / 2) % 3),
            d: 1 + (i as usize * 3) % 9,
            prompt_len: 1 + (i as usize * 7) % 20,
            decode_len: (i as usize) % 4,
            precision: if i % 2 == 0 { Precision::F32 } else { Precision::F64 },
            seed: 50_000 + i,
        };
        let (h, t) = gen_trace(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvt");
        kvevict::workload::write_trace(&path, &h, &t).unwrap();
        let (h2, t2) = kvevict::workload::read_trace(&path).unwrap();
        let bytes = encode_trace(&h, &t).unwrap();
        if h == h2 && t == t2 && decode_trace(&bytes).unwrap().1 == t && std::fs::read(&path).unwrap() == bytes {
            round_trips += 1;
        }
    }

    let commands: [(&str, &[&str], &[&str]); 4] = [
        ("gen-trace", &["gen-trace", "--seed", "3", "--out", "t.kvt"], &["t.kvt"]),
        ("score", &["score", "--seed", "7", "--instances", "3", "--s", "24", "--d", "8", "--out", "s.csv"], &["s.csv"]),
        ("oracle-recall", &["oracle-recall", "--instances", "12", "--out", "r.json"], &["r.json"]),
        (
            "simulate-decode",
            &["simulate-decode", "--presets", "h2o,key,joint", "--budgets", "8,16"],
            &["decode_report.json", "decode_steps.csv"],
        ),
    ];
    let mut reproducible = Vec::new();
    let mut broken = Vec::new();
    for (name, args, files) in commands {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let same = run_cli(a.path(), args)
            && run_cli(b.path(), args)
            && files.iter().all(|f| {
                let x = std::fs::read(a.path().join(f));
                let y = std::fs::read(b.path().join(f));
                matches!((x, y), (Ok(x), Ok(y)) if x == y && !x.is_empty())
            });
        if same {
            reproducible.push(name);
        } else {
            broken.push(name);
        }
    }
    let pass = round_trips == 20 && broken.is_empty();
    outcome(
        9,
        "trace round trip and byte-reproducible CLI",
        pass,
        format!(
            "{round_trips}/20 traces round-trip bit-exactly; reproducible: [{}]; not reproducible: [{}]",
            reproducible.join(", "),
            broken.join(", ")
        ),
    )
}

// ---------- criterion 10 ----------

fn criterion_10() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let s = 1 + (seed as usize * 13) % 48;
        let d = 1 + (seed as usize * 7) % 24;
        let inst: AttentionInstance = gen_random(s, d, s, 60_000 + seed);
        let r = reference_attention(&inst.q, &inst.k, &inst.v);
        let mut cache = KvCache::new(d);
        for t in 0..s {
            let step = decode_step(&mut cache, inst.q.row(t), inst.k.row(t), inst.v.row(t)).unwrap();
            for c in 0..d {
                worst = worst.max((step.o[c] - inst.o[(t, c)]).abs());
                worst = worst.max((step.o[c] - r.o[t][c]).abs());
            }
        }
    }
    outcome(
        10,
        "incremental decode equals causal prefill",
        worst <= DECODE_EQUIV_TOL,
        format!("100 runs, max |o_decode - o_prefill| {worst:.1e} <= {DECODE_EQUIV_TOL:e}"),
    )
}

fn main() {
    // `cargo test -- --list` and filters: this target takes no arguments
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut goldens = if blessing() { Goldens::default() } else { load_goldens() };
    let outcomes = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(&mut goldens),
        criterion_8(&mut goldens),
        criterion_9(),
        criterion_10(),
    ];
    println!();
    for o in &outcomes {
        println!("criterion {:>2} {} {}: {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.title, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if blessing() {
        let mut text = serde_json::to_string_pretty(&goldens).unwrap();
        text.push('\n');
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), text).unwrap();
        println!("golden baselines written to {}", golden_path().display());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
