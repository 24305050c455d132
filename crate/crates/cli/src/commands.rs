use std::path::Path;

use kvevict::harness::{
    oracle_recall, score_rows, score_trace, simulate_decode, DecodeReport, RecallConfig, RecallWorkload, RowTag,
    ScoreRow,
};
use kvevict::policy::{preset, Phase, Preset};
use kvevict::workload::{
    gen_decode_trace, gen_decode_workload, gen_needle, gen_trace, read_trace, trace_steps, try_gen_random, write_trace,
    DecodeSpec, NeedleSpec, Precision, TraceHeader, TraceSpec, TraceTensors,
};
use kvevict::{ScorerKind, TokenStep};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::{DecodeArgs, GenTraceArgs, List, RecallArgs, ScoreArgs, Window};
use crate::error::{CliError, CliResult};
use crate::output::{resolve, write_csv, write_json};

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn load_trace(path: &Path) -> CliResult<(TraceHeader, TraceTensors)> {
    read_trace(path).map_err(|e| match e {
        kvevict::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

pub fn gen_trace_cmd(args: GenTraceArgs) -> CliResult<()> {
    let precision: Precision = args.precision.as_deref().unwrap_or("f32").parse()?;
    let spec = TraceSpec {
        num_layers: args.layers.unwrap_or(2),
        num_kv_heads: args.kv_heads.unwrap_or(2),
        num_q_heads: args.q_heads.unwrap_or(4),
        d: args.d.unwrap_or(16),
        prompt_len: args.prompt_len.unwrap_or(64),
        decode_len: args.decode_len.unwrap_or(16),
        precision,
        seed: args.seed.unwrap_or(0),
    };
    // shape problems in a requested spec are configuration mistakes
    let (header, tensors) = gen_trace(&spec).map_err(|e| match e {
        kvevict::Error::TraceShape(msg) => CliError::Config(msg),
        other => other.into(),
    })?;
    let out = resolve(args.out, "trace.kvt");
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_trace(&out, &header, &tensors).map_err(|e| match e {
        kvevict::Error::Io(io) => CliError::io(&out, io),
        other => other.into(),
    })
}

pub fn score_cmd(args: ScoreArgs) -> CliResult<()> {
    let window = args.window.unwrap_or(Window::Full).rows();
    let rows: Vec<ScoreRow> = match &args.trace {
        Some(path) => {
            let (header, tensors) = load_trace(path)?;
            score_trace(&header, &tensors, window)?
        }
        None => {
            let s = args.s.unwrap_or(64);
            let d = args.d.unwrap_or(32);
            let first = args.seed.unwrap_or(0);
            let instances = args.instances.unwrap_or(1);
            let workload = args.workload.as_deref().unwrap_or("random");
            if !matches!(workload, "random" | "needle") {
                return Err(config_err(format!("unknown workload `{workload}` (expected random or needle)")));
            }
            if workload == "needle" && args.q_len.is_some() {
                return Err(config_err("--q-len applies to the random workload only"));
            }
            let q_len = args.q_len.unwrap_or(s);
            if s == 0 || d == 0 || q_len == 0 || q_len > s {
                return Err(config_err(format!("invalid shape s={s} d={d} q_len={q_len}")));
            }
            let tables: Vec<Vec<ScoreRow>> = (0..instances)
                .into_par_iter()
                .map(|i| {
                    let seed = first + i as u64;
                    let inst = if workload == "needle" {
                        gen_needle(&NeedleSpec::with_shape(s, d, seed))?.0
                    } else {
                        try_gen_random(s, d, q_len, seed)?
                    };
                    score_rows(&inst, window, RowTag { instance: i, ..RowTag::default() })
                })
                .collect::<kvevict::Result<_>>()?;
            tables.into_iter().flatten().collect()
        }
    };
    let out = resolve(args.out, "scores.csv");
    write_csv(&out, ScoreRow::CSV_HEADER, rows.iter().map(ScoreRow::to_csv))
}

fn parse_windows(list: &List) -> CliResult<Vec<usize>> {
    Ok(list.parse_each::<Window>("window")?.into_iter().map(Window::rows).collect())
}

pub fn recall_cmd(args: RecallArgs) -> CliResult<()> {
    let s = args.s.unwrap_or(NeedleSpec::DEFAULT_LEN);
    let d = args.d.unwrap_or(NeedleSpec::DEFAULT_DIM);
    let workload = match args.workload.as_deref().unwrap_or("needle") {
        "needle" => RecallWorkload::Needle { s, d },
        "random" => RecallWorkload::Random { s, d },
        other => return Err(config_err(format!("unknown workload `{other}` (expected needle or random)"))),
    };
    let default = RecallConfig::needle_default();
    let cfg = RecallConfig {
        workload,
        first_seed: args.first_seed.unwrap_or(0),
        instances: args.instances.unwrap_or(default.instances),
        ks: match &args.k {
            Some(l) => l.parse_each("k")?,
            None => default.ks,
        },
        scorers: match &args.scorers {
            Some(l) => l.parse_each::<ScorerKind>("scorer")?,
            None => default.scorers,
        },
        windows: match &args.windows {
            Some(l) => parse_windows(l)?,
            None => vec![1, 4, 16, usize::MAX],
        },
        reserves: match &args.reserves {
            Some(l) => l.parse_each("reserve")?,
            None => default.reserves,
        },
    };
    if let Some(&k) = cfg.ks.iter().find(|&&k| k > s) {
        return Err(config_err(format!("k = {k} exceeds prompt length {s}")));
    }
    let report = oracle_recall(&cfg)?;
    write_json(&resolve(args.out, "oracle_report.json"), &report)
}

/// JSON output of `simulate-decode`: one run per (preset, budget).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSweep {
    pub schema_version: u32,
    pub workload: String,
    pub seed: Option<u64>,
    pub steps: usize,
    pub d: usize,
    pub runs: Vec<DecodeReport>,
}

pub fn decode_workload(args: &DecodeArgs) -> CliResult<(String, Option<u64>, Vec<TokenStep>)> {
    let workload = args.workload.as_deref().unwrap_or("structured").to_string();
    let seed = args.seed.unwrap_or(6);
    let d = args.d.unwrap_or(32);
    let steps = args.steps.unwrap_or(64);
    if workload != "trace" && args.trace.is_some() {
        return Err(config_err("--trace needs --workload trace"));
    }
    let trace = match workload.as_str() {
        "structured" => gen_decode_workload(&DecodeSpec { d, ..DecodeSpec::standard(steps, seed) })?,
        "gaussian" => {
            if steps == 0 || d == 0 {
                return Err(config_err("steps and d must be positive"));
            }
            gen_decode_trace(steps, d, seed)
        }
        "trace" => {
            let path = args.trace.as_ref().ok_or_else(|| config_err("--workload trace needs --trace"))?;
            let (header, tensors) = load_trace(path)?;
            let mut all = trace_steps(&header, &tensors, args.layer.unwrap_or(0), args.head.unwrap_or(0)).map_err(
                |e| match e {
                    kvevict::Error::Index { .. } => config_err(e),
                    other => other.into(),
                },
            )?;
            if let Some(n) = args.steps {
                all.truncate(n);
            }
            return Ok((workload, None, all));
        }
        other => {
            return Err(config_err(format!("unknown workload `{other}` (expected structured, gaussian or trace)")))
        }
    };
    Ok((workload, Some(seed), trace))
}

pub fn decode_cmd(args: DecodeArgs) -> CliResult<()> {
    let presets: Vec<Preset> = match &args.presets {
        Some(l) => l.parse_each("preset")?,
        None => vec![Preset::H2O, Preset::KEY],
    };
    let budgets: Vec<usize> = match &args.budgets {
        Some(l) => l.parse_each("budget")?,
        None => vec![16],
    };
    if !budgets.windows(2).all(|w| w[0] < w[1]) {
        return Err(config_err("budgets must be strictly ascending"));
    }
    let (workload, seed, trace) = decode_workload(&args)?;
    if trace.is_empty() {
        return Err(config_err("no decode steps"));
    }
    let mut runs = Vec::new();
    for p in &presets {
        for &budget in &budgets {
            let cfg = preset(*p, Phase::Decode, 0, budget)?;
            runs.push(simulate_decode(&trace, &cfg, &p.to_string())?);
        }
    }
    let sweep = DecodeSweep {
        schema_version: DecodeReport::SCHEMA_VERSION,
        workload,
        seed,
        steps: trace.len(),
        d: trace[0].q.len(),
        runs,
    };
    let lines = sweep
        .runs
        .iter()
        .flat_map(|r| r.rows.iter().map(move |row| format!("{},{},{}", r.preset, r.budget, row.to_csv())));
    write_csv(
        &resolve(args.csv, "decode_steps.csv"),
        "preset,budget,step,len_before,len_after,evicted,perturbation",
        lines,
    )?;
    write_json(&resolve(args.out, "decode_report.json"), &sweep)
}
