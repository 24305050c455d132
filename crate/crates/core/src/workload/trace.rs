//! Binary trace container.
//!
//! ```text
//! magic      8 bytes   "KVTRACE\0"
//! hlen       u32 LE    byte length of the JSON header
//! header     hlen      UTF-8 JSON (TraceHeader)
//! payload              little-endian f32 or f64, for each layer:
//!                        Q heads (num_q_heads), K heads, V heads,
//!                        each T x d row-major, T = prompt_len + decode_len
//! ```
//!
//! Nothing may follow the payload. See `docs/trace-format.md` for a worked
//! example.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rng::NormalStream;
use crate::attention::{AttentionInstance, TokenStep};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 8] = *b"KVTRACE\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Rounds `x` to what this precision can store.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub version: u32,
    pub num_layers: usize,
    pub num_kv_heads: usize,
    pub num_q_heads: usize,
    pub d: usize,
    pub prompt_len: usize,
    pub decode_len: usize,
    pub precision: Precision,
    pub endianness: Endianness,
    #[serde(default)]
    pub extras: BTreeMap<String, String>,
}

impl TraceHeader {
    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.decode_len
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != VERSION {
            return Err(Error::VersionMismatch { found: self.version, expected: VERSION });
        }
        if self.num_layers == 0 || self.num_kv_heads == 0 || self.d == 0 {
            return Err(Error::TraceShape("num_layers, num_kv_heads and d must be positive".into()));
        }
        if self.num_q_heads == 0 || self.num_q_heads % self.num_kv_heads != 0 {
            return Err(Error::TraceShape(format!(
                "num_q_heads {} is not a positive multiple of num_kv_heads {}",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.prompt_len == 0 {
            return Err(Error::TraceShape("prompt_len must be positive".into()));
        }
        Ok(())
    }

    fn values_per_layer(&self) -> usize {
        (self.num_q_heads + 2 * self.num_kv_heads) * self.seq_len() * self.d
    }

    pub fn payload_bytes(&self) -> usize {
        self.num_layers * self.values_per_layer() * self.precision.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTensors {
    pub layers: Vec<LayerTensors>,
}

impl TraceTensors {
    fn check(&self, h: &TraceHeader) -> Result<()> {
        if self.layers.len() != h.num_layers {
            return Err(Error::TraceShape(format!("{} layers, header says {}", self.layers.len(), h.num_layers)));
        }
        let t = h.seq_len();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, heads, want) in
                [("q", &layer.q, h.num_q_heads), ("k", &layer.k, h.num_kv_heads), ("v", &layer.v, h.num_kv_heads)]
            {
                if heads.len() != want {
                    return Err(Error::TraceShape(format!("layer {l}: {} {name} heads, expected {want}", heads.len())));
                }
                for (hd, m) in heads.iter().enumerate() {
                    if m.rows() != t || m.cols() != h.d {
                        return Err(Error::TraceShape(format!(
                            "layer {l} {name} head {hd}: {}x{}, expected {t}x{}",
                            m.rows(),
                            m.cols(),
                            h.d
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn blobs(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| l.q.iter().chain(&l.k).chain(&l.v))
    }
}

pub fn encode_trace(header: &TraceHeader, tensors: &TraceTensors) -> Result<Vec<u8>> {
    header.validate()?;
    tensors.check(header)?;
    let json = serde_json::to_vec(header)?;
    let hlen = u32::try_from(json.len()).map_err(|_| Error::TraceShape("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + header.payload_bytes());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(&json);
    for m in tensors.blobs() {
        match header.precision {
            Precision::F32 => m.as_slice().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            Precision::F64 => m.as_slice().iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let available = bytes.len() - *at;
    if n > available {
        return Err(Error::Truncated { needed: n, available });
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

pub fn decode_trace(bytes: &[u8]) -> Result<(TraceHeader, TraceTensors)> {
    let mut at = 0;
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    at += MAGIC.len();
    let hlen = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap()) as usize;
    let raw = take(bytes, &mut at, hlen)?;

    // check the version before the strict parse so newer headers with
    // unfamiliar fields report the right thing
    let value: serde_json::Value = serde_json::from_slice(raw)?;
    if let Some(found) = value.get("version").and_then(|v| v.as_u64()) {
        if found != VERSION as u64 {
            return Err(Error::VersionMismatch { found: found.min(u32::MAX as u64) as u32, expected: VERSION });
        }
    }
    let header: TraceHeader = serde_json::from_value(value)?;
    header.validate()?;

    let payload = &bytes[at..];
    let needed = header.payload_bytes();
    if payload.len() < needed {
        return Err(Error::Truncated { needed, available: payload.len() });
    }
    if payload.len() > needed {
        return Err(Error::TraceShape(format!("{} trailing bytes after payload", payload.len() - needed)));
    }

    let (t, d) = (header.seq_len(), header.d);
    let width = header.precision.width();
    let mut chunks = payload.chunks_exact(t * d * width);
    let mut next = || {
        let blob = chunks.next().expect("payload length checked");
        let data: Vec<f64> = match header.precision {
            Precision::F32 => blob.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            Precision::F64 => blob.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        };
        Matrix::from_vec(t, d, data).expect("blob sized to t x d")
    };
    let mut layers = Vec::with_capacity(header.num_layers);
    for _ in 0..header.num_layers {
        let q = (0..header.num_q_heads).map(|_| next()).collect();
        let k = (0..header.num_kv_heads).map(|_| next()).collect();
        let v = (0..header.num_kv_heads).map(|_| next()).collect();
        layers.push(LayerTensors { q, k, v });
    }
    Ok((header, TraceTensors { layers }))
}

/// Writes atomically: the bytes go to a sibling temp file that is renamed
/// over `path` once complete.
pub fn write_trace(path: &Path, header: &TraceHeader, tensors: &TraceTensors) -> Result<()> {
    let bytes = encode_trace(header, tensors)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<(TraceHeader, TraceTensors)> {
    decode_trace(&fs::read(path)?)
}

/// Shape and seed of a synthetic Gaussian trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub num_layers: usize,
    pub num_kv_heads: usize,
    pub num_q_heads: usize,
    pub d: usize,
    pub prompt_len: usize,
    pub decode_len: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl TraceSpec {
    pub fn header(&self) -> TraceHeader {
        let mut extras = BTreeMap::new();
        extras.insert("generator".to_string(), "gaussian".to_string());
        extras.insert("seed".to_string(), self.seed.to_string());
        TraceHeader {
            version: VERSION,
            num_layers: self.num_layers,
            num_kv_heads: self.num_kv_heads,
            num_q_heads: self.num_q_heads,
            d: self.d,
            prompt_len: self.prompt_len,
            decode_len: self.decode_len,
            precision: self.precision,
            endianness: Endianness::Little,
            extras,
        }
    }
}

/// Standard normal tensors drawn in file order, rounded to the stored
/// precision. Two specs differing only in precision share the same draws.
pub fn gen_trace(spec: &TraceSpec) -> Result<(TraceHeader, TraceTensors)> {
    let header = spec.header();
    header.validate()?;
    let (t, d) = (header.seq_len(), header.d);
    let mut rng = NormalStream::new(spec.seed);
    let mut blob = || {
        let data = rng.take(t * d).into_iter().map(|x| spec.precision.round(x)).collect();
        Matrix::from_vec(t, d, data).expect("sized buffer")
    };
    let layers = (0..header.num_layers)
        .map(|_| {
            let q = (0..header.num_q_heads).map(|_| blob()).collect();
            let k = (0..header.num_kv_heads).map(|_| blob()).collect();
            let v = (0..header.num_kv_heads).map(|_| blob()).collect();
            LayerTensors { q, k, v }
        })
        .collect();
    Ok((header, TraceTensors { layers }))
}

fn head_tensors<'a>(
    header: &TraceHeader,
    tensors: &'a TraceTensors,
    layer: usize,
    q_head: usize,
) -> Result<(&'a Matrix, &'a Matrix, &'a Matrix)> {
    if layer >= header.num_layers {
        return Err(Error::Index { index: layer, len: header.num_layers });
    }
    if q_head >= header.num_q_heads {
        return Err(Error::Index { index: q_head, len: header.num_q_heads });
    }
    let l = &tensors.layers[layer];
    let kv = header.kv_head_of(q_head);
    Ok((&l.q[q_head], &l.k[kv], &l.v[kv]))
}

/// Causal prefill instance for one query head over the prompt rows.
pub fn trace_instance(
    header: &TraceHeader,
    tensors: &TraceTensors,
    layer: usize,
    q_head: usize,
) -> Result<AttentionInstance> {
    let (q, k, v) = head_tensors(header, tensors, layer, q_head)?;
    let rows: Vec<usize> = (0..header.prompt_len).collect();
    AttentionInstance::compute(q.select_rows(&rows), k.select_rows(&rows), v.select_rows(&rows), true)
}

/// Per-token `(q, k, v)` over the whole sequence (prompt then decode rows)
/// for one query head.
pub fn trace_steps(
    header: &TraceHeader,
    tensors: &TraceTensors,
    layer: usize,
    q_head: usize,
) -> Result<Vec<TokenStep>> {
    let (q, k, v) = head_tensors(header, tensors, layer, q_head)?;
    Ok((0..header.seq_len())
        .map(|t| TokenStep { q: q.row(t).to_vec(), k: k.row(t).to_vec(), v: v.row(t).to_vec() })
        .collect())
}
