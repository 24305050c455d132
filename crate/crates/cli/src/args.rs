//! Flags, config-file tables and their merge.
//!
//! Every flag is optional on the command line and in the file; the value
//! used is flag, else file, else the built-in default.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Deserializer};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "kvevict", version, about = "KV-cache eviction experiments: scores, oracles and decode simulations")]
pub struct Cli {
    /// TOML file with one table per command (`[score]`, `[oracle-recall]`, ...)
    /// whose keys are the long flag names.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian trace file.
    GenTrace(GenTraceArgs),
    /// Per-position value/key/joint/attn_l1 scores as CSV.
    Score(ScoreArgs),
    /// Recall of each scorer against the first-decode-step eviction error (JSON).
    OracleRecall(RecallArgs),
    /// Budgeted decode loop with per-step output perturbation (JSON + CSV).
    SimulateDecode(DecodeArgs),
}

/// Comma-separated list on the command line; a string or an array in the
/// config file.
#[derive(Debug, Clone, PartialEq)]
pub struct List(pub Vec<String>);

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items: Vec<String> = s.split(',').map(|x| x.trim()).filter(|x| !x.is_empty()).map(str::to_string).collect();
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

impl fmt::Display for List {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}

impl<'de> Deserialize<'de> for List {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Item {
            Int(u64),
            Str(String),
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Str(String),
            Seq(Vec<Item>),
        }
        match Raw::deserialize(de)? {
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Seq(items) => Ok(List(
                items
                    .into_iter()
                    .map(|i| match i {
                        Item::Int(n) => n.to_string(),
                        Item::Str(s) => s,
                    })
                    .collect(),
            )),
        }
    }
}

impl List {
    pub fn parse_each<T: FromStr>(&self, what: &str) -> CliResult<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.0.iter().map(|s| s.parse().map_err(|e| CliError::Config(format!("bad {what} `{s}`: {e}")))).collect()
    }
}

/// A window size in query rows, or `full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rows(usize),
    Full,
}

impl Window {
    pub fn rows(self) -> usize {
        match self {
            Window::Rows(n) => n,
            Window::Full => usize::MAX,
        }
    }
}

impl FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "full" => Ok(Window::Full),
            n => match n.parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("expected a positive row count or `full`, got `{n}`")),
                Ok(v) => Ok(Window::Rows(v)),
            },
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        let s = match Raw::deserialize(de)? {
            Raw::Int(n) => n.to_string(),
            Raw::Str(s) => s,
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

macro_rules! merge_impl {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $ty {
            /// Fills every unset flag from `file`.
            pub fn or(self, file: Self) -> Self {
                Self { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenTraceArgs {
    /// Output trace file [default: trace.kvt]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 2]
    #[arg(long)]
    pub layers: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub kv_heads: Option<usize>,
    /// Must be a multiple of --kv-heads [default: 4]
    #[arg(long)]
    pub q_heads: Option<usize>,
    /// Head width [default: 16]
    #[arg(long)]
    pub d: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub prompt_len: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub decode_len: Option<usize>,
    /// f32 or f64 [default: f32]
    #[arg(long)]
    pub precision: Option<String>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}
merge_impl!(GenTraceArgs { out, layers, kv_heads, q_heads, d, prompt_len, decode_len, precision, seed });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScoreArgs {
    /// Score a trace file (every layer and query head) instead of generating
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Generator when no trace is given: random or needle [default: random]
    #[arg(long)]
    pub workload: Option<String>,
    /// Sequence length [default: 64]
    #[arg(long)]
    pub s: Option<usize>,
    /// Head width [default: 32]
    #[arg(long)]
    pub d: Option<usize>,
    /// Query rows for the random workload [default: s]
    #[arg(long)]
    pub q_len: Option<usize>,
    /// First seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generated instances, seeds seed.. seed+n-1 [default: 1]
    #[arg(long)]
    pub instances: Option<usize>,
    /// Perturbation window in query rows, or `full` [default: full]
    #[arg(long)]
    pub window: Option<Window>,
    /// Output CSV [default: scores.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_impl!(ScoreArgs { trace, workload, s, d, q_len, seed, instances, window, out });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RecallArgs {
    /// needle or random [default: needle]
    #[arg(long)]
    pub workload: Option<String>,
    /// Prompt length [default: 64]
    #[arg(long)]
    pub s: Option<usize>,
    /// Head width [default: 32]
    #[arg(long)]
    pub d: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub instances: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub first_seed: Option<u64>,
    /// Top-k sizes [default: 4]
    #[arg(long)]
    pub k: Option<List>,
    /// [default: value,key,joint,attn_l1]
    #[arg(long)]
    pub scorers: Option<List>,
    /// Window sizes in query rows; `full` is the whole prompt [default: 1,4,16,full]
    #[arg(long)]
    pub windows: Option<List>,
    /// Reserved recent positions [default: 0,2]
    #[arg(long)]
    pub reserves: Option<List>,
    /// Output JSON report [default: oracle_report.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_impl!(RecallArgs { workload, s, d, instances, first_seed, k, scorers, windows, reserves, out });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DecodeArgs {
    /// structured, gaussian or trace [default: structured]
    #[arg(long)]
    pub workload: Option<String>,
    /// Trace file for the trace workload
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Trace layer [default: 0]
    #[arg(long)]
    pub layer: Option<usize>,
    /// Trace query head [default: 0]
    #[arg(long)]
    pub head: Option<usize>,
    /// Decode steps (a trace is cut to this many tokens) [default: 64]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Head width for generated workloads [default: 32]
    #[arg(long)]
    pub d: Option<usize>,
    /// [default: 6]
    #[arg(long)]
    pub seed: Option<u64>,
    /// h2o, tova, value, key, joint, optionally `scorer@host` [default: h2o,key]
    #[arg(long)]
    pub presets: Option<List>,
    /// Ascending cache budgets [default: 16]
    #[arg(long)]
    pub budgets: Option<List>,
    /// Output JSON report [default: decode_report.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step CSV [default: decode_steps.csv]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}
merge_impl!(DecodeArgs { workload, trace, layer, head, steps, d, seed, presets, budgets, out, csv });

/// Config file layout.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default, rename = "gen-trace")]
    pub gen_trace: GenTraceArgs,
    #[serde(default)]
    pub score: ScoreArgs,
    #[serde(default, rename = "oracle-recall")]
    pub oracle_recall: RecallArgs,
    #[serde(default, rename = "simulate-decode")]
    pub simulate_decode: DecodeArgs,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
