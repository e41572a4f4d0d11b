//! Single-file model container, surgery application, and the inspect/diff
//! reporting used to audit freezing and transfer.
//!
//! Layout, bit-exact: magic "W2VS" | u32 LE version | u64 LE header length |
//! UTF-8 JSON header | payload of raw little-endian f32 values. The header
//! wraps a `core` document (spec, provenance, tensor table, payload hash)
//! together with an FNV-1a 64 hash of the core's exact bytes, so any
//! single-byte flip anywhere in the file is caught on load: header flips
//! break the core hash or the framing, payload flips break the payload hash,
//! and flips in the fixed-width fields break their own checks.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{self, FrameGeometry, StrideSurgeryPlan, SurgeryMethod, TargetLayer};
use crate::model::{Model, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"W2VS";
const VERSION: u32 = 1;
const HEADER_PREFIX: &[u8] = b"{\"core\":";
const HASH_KEY: &[u8] = b",\"fnv1a64\":\"";
const HEADER_SUFFIX_LEN: usize = 12 + 16 + 2; // key, 16 hex digits, closing "}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Core {
    spec: ModelSpec,
    provenance: Vec<String>,
    tensors: Vec<TensorEntry>,
    payload_fnv1a64: String,
}

/// Serialize a model to the container byte layout.
pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    model.spec.validate()?;
    model.check_params()?;
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in &model.params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let core = Core {
        spec: model.spec.clone(),
        provenance: model.provenance.clone(),
        tensors,
        payload_fnv1a64: format!("{:016x}", fnv1a64(&payload)),
    };
    let core_json = serde_json::to_string(&core)?;
    let header = format!("{{\"core\":{core_json},\"fnv1a64\":\"{:016x}\"}}", fnv1a64(core_json.as_bytes()));
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Strict parse of the container byte layout.
pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 16 {
        return Err(Error::CorruptCheckpoint("file shorter than the fixed fields".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("magic bytes are not W2VS".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if header_len > body.len() || header_len < HEADER_PREFIX.len() + HEADER_SUFFIX_LEN + 2 {
        return Err(Error::CorruptCheckpoint(format!("header length {header_len} out of range")));
    }
    let header = &body[..header_len];
    if &header[..HEADER_PREFIX.len()] != HEADER_PREFIX {
        return Err(Error::CorruptCheckpoint("header framing: core prefix missing".into()));
    }
    let suffix = &header[header_len - HEADER_SUFFIX_LEN..];
    if &suffix[..HASH_KEY.len()] != HASH_KEY || &suffix[HASH_KEY.len() + 16..] != b"\"}" {
        return Err(Error::CorruptCheckpoint("header framing: hash suffix missing".into()));
    }
    let core_bytes = &header[HEADER_PREFIX.len()..header_len - HEADER_SUFFIX_LEN];
    // compare the rendered hex bytes, not a parsed value: parsing would
    // accept case flips and sign characters that leave the value intact
    let want = format!("{:016x}", fnv1a64(core_bytes));
    if &suffix[HASH_KEY.len()..HASH_KEY.len() + 16] != want.as_bytes() {
        return Err(Error::CorruptCheckpoint("header hash mismatch".into()));
    }
    let core: Core = serde_json::from_slice(core_bytes)?;
    let payload = &body[header_len..];
    let want = u64::from_str_radix(&core.payload_fnv1a64, 16)
        .map_err(|_| Error::CorruptCheckpoint("payload hash is not hex".into()))?;
    if fnv1a64(payload) != want {
        return Err(Error::CorruptCheckpoint("payload hash mismatch".into()));
    }

    core.spec.validate()?;
    let expected = core.spec.expected_params();
    if expected.len() != core.tensors.len() {
        return Err(Error::Shape(format!(
            "tensor table lists {} entries, spec expects {}",
            core.tensors.len(),
            expected.len()
        )));
    }
    let mut params = IndexMap::new();
    let mut offset = 0u64;
    for (entry, (name, shape)) in core.tensors.iter().zip(expected.iter()) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Shape(format!(
                "tensor table entry `{}` {:?} does not match spec entry `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` offset {} does not match running total {offset}",
                entry.offset
            )));
        }
        let numel: usize = shape.iter().product();
        let end = offset as usize + numel * 4;
        if end > payload.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` extends past the payload"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for c in payload[offset as usize..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(c.try_into().unwrap()));
        }
        params.insert(name.clone(), Tensor::from_vec(shape.clone(), data)?);
        offset = end as u64;
    }
    if offset as usize != payload.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "payload holds {} bytes, tensor table accounts for {offset}",
            payload.len()
        )));
    }
    Ok(Model { spec: core.spec, provenance: core.provenance, params })
}

/// Write a container atomically (temp file in the same directory, rename).
pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {path:?}")))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Surgery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum SurgeryOp {
    Truncate(usize),
    AdaptBandwidth(StrideSurgeryPlan),
    AttachHead(usize),
    DetachHead,
}

impl Serialize for SurgeryOp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for SurgeryOp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SurgeryOp::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl SurgeryOp {
    /// The op in CLI grammar, the inverse of [`SurgeryOp::parse`].
    pub fn render(&self) -> String {
        match self {
            SurgeryOp::Truncate(n) => format!("truncate:{n}"),
            SurgeryOp::AttachHead(c) => format!("attach_head:{c}"),
            SurgeryOp::DetachHead => "detach_head".into(),
            SurgeryOp::AdaptBandwidth(plan) => {
                let target = match plan.target {
                    TargetLayer::First => "first".to_string(),
                    TargetLayer::Last => "last".to_string(),
                    TargetLayer::Index(i) => i.to_string(),
                };
                let method = match plan.method {
                    SurgeryMethod::FractionalFirst => "fractional-first",
                    SurgeryMethod::HalveEven => "halve-even",
                };
                let fold = if plan.fold_kernel { ":fold" } else { "" };
                format!("adapt_bandwidth:{target}:{method}{fold}")
            }
        }
    }

    /// Parse the CLI grammar:
    /// `truncate:N`, `adapt_bandwidth:TARGET:METHOD[:fold]`,
    /// `attach_head:C`, `detach_head`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let usage = |msg: &str| Error::InvalidArgument(format!("surgery op `{s}`: {msg}"));
        match head {
            "truncate" => match rest.as_slice() {
                [n] => Ok(SurgeryOp::Truncate(
                    n.parse().map_err(|_| usage("expected truncate:N with integer N"))?,
                )),
                _ => Err(usage("expected truncate:N")),
            },
            "attach_head" => match rest.as_slice() {
                [c] => Ok(SurgeryOp::AttachHead(
                    c.parse().map_err(|_| usage("expected attach_head:C with integer C"))?,
                )),
                _ => Err(usage("expected attach_head:C")),
            },
            "detach_head" => {
                if rest.is_empty() {
                    Ok(SurgeryOp::DetachHead)
                } else {
                    Err(usage("detach_head takes no arguments"))
                }
            }
            "adapt_bandwidth" => {
                let (target_s, method_s, fold) = match rest.as_slice() {
                    [t, m] => (*t, *m, false),
                    [t, m, "fold"] => (*t, *m, true),
                    _ => {
                        return Err(usage(
                            "expected adapt_bandwidth:TARGET:METHOD[:fold] with TARGET \
                             first|last|<index> and METHOD fractional-first|halve-even",
                        ));
                    }
                };
                let target = match target_s {
                    "first" => TargetLayer::First,
                    "last" => TargetLayer::Last,
                    other => TargetLayer::Index(
                        other.parse().map_err(|_| usage("target must be first, last, or an index"))?,
                    ),
                };
                let method = match method_s {
                    "fractional-first" => SurgeryMethod::FractionalFirst,
                    "halve-even" => SurgeryMethod::HalveEven,
                    _ => return Err(usage("method must be fractional-first or halve-even")),
                };
                Ok(SurgeryOp::AdaptBandwidth(StrideSurgeryPlan { target, method, fold_kernel: fold }))
            }
            _ => Err(usage("unknown op; known: truncate, adapt_bandwidth, attach_head, detach_head")),
        }
    }
}

/// Apply surgeries in order. Functional: the input model is untouched and
/// shared tensors are reused as-is.
pub fn apply_surgery<T: Scalar>(
    model: &Model<T>,
    ops: &[SurgeryOp],
    seed: u64,
) -> Result<Model<T>> {
    let mut m = model.clone();
    for op in ops {
        m = match op {
            SurgeryOp::Truncate(n) => m.truncate(*n)?,
            SurgeryOp::AdaptBandwidth(plan) => m.adapt_bandwidth(plan)?,
            SurgeryOp::AttachHead(c) => m.attach_head(*c, crate::rng::derive_seed(seed, "attach_head"))?,
            SurgeryOp::DetachHead => m.detach_head()?,
        };
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct InspectReport {
    pub spec: ModelSpec,
    pub geometry: FrameGeometry,
    pub provenance: Vec<String>,
    pub num_blocks: usize,
    pub sample_rate: u32,
    /// Parameter counts keyed by top-level component.
    pub param_counts: IndexMap<String, usize>,
    pub total_params: usize,
}

pub fn inspect(model: &Model<f32>) -> Result<InspectReport> {
    let geometry = extractor::geometry(&model.spec.extractor)?;
    let mut param_counts: IndexMap<String, usize> = IndexMap::new();
    for (name, t) in &model.params {
        let component = name.split('.').next().unwrap_or(name).to_string();
        *param_counts.entry(component).or_insert(0) += t.numel();
    }
    Ok(InspectReport {
        num_blocks: model.spec.encoder.num_blocks,
        sample_rate: model.spec.extractor.sample_rate,
        total_params: model.param_count(),
        provenance: model.provenance.clone(),
        geometry,
        param_counts,
        spec: model.spec.clone(),
    })
}

pub fn render_inspect(r: &InspectReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "sample rate      {} Hz\nframe shift      {} ms\nreceptive field  {} samples ({} ms)\n",
        r.sample_rate,
        r.geometry.frame_shift_ms,
        r.geometry.receptive_field_samples,
        r.geometry.receptive_field_ms,
    ));
    out.push_str(&format!(
        "encoder          {} blocks, d={}, {} heads, ffn {}\n",
        r.num_blocks, r.spec.encoder.d, r.spec.encoder.heads, r.spec.encoder.ffn
    ));
    out.push_str(&format!(
        "quantizer        {} groups x {} entries, code dim {}\n",
        r.spec.quantizer.groups, r.spec.quantizer.entries, r.spec.quantizer.code_dim
    ));
    match &r.spec.head {
        Some(h) => out.push_str(&format!("head             {} classes\n", h.num_classes)),
        None => out.push_str("head             none\n"),
    }
    out.push_str("parameters\n");
    for (component, count) in &r.param_counts {
        out.push_str(&format!("  {component:<14} {count}\n"));
    }
    out.push_str(&format!("  {:<14} {}\n", "total", r.total_params));
    if r.provenance.is_empty() {
        out.push_str("provenance       (none)\n");
    } else {
        out.push_str("provenance\n");
        for p in &r.provenance {
            out.push_str(&format!("  {p}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffStatus {
    Added,
    Removed,
    Changed,
    Identical,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DiffEntry {
    pub name: String,
    pub status: DiffStatus,
    /// Largest elementwise |a - b| for tensors present on both sides with
    /// matching shapes.
    pub max_abs_delta: Option<f64>,
}

/// Per-tensor comparison, ordered by name.
pub fn diff(a: &Model<f32>, b: &Model<f32>) -> Vec<DiffEntry> {
    let mut names: Vec<&String> = a.params.keys().chain(b.params.keys()).collect();
    names.sort();
    names.dedup();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let entry = match (a.params.get(name), b.params.get(name)) {
            (Some(_), None) => DiffEntry {
                name: name.clone(),
                status: DiffStatus::Removed,
                max_abs_delta: None,
            },
            (None, Some(_)) => {
                DiffEntry { name: name.clone(), status: DiffStatus::Added, max_abs_delta: None }
            }
            (Some(ta), Some(tb)) => {
                if ta.shape() != tb.shape() {
                    DiffEntry { name: name.clone(), status: DiffStatus::Changed, max_abs_delta: None }
                } else {
                    let mut max = 0.0f64;
                    for (&x, &y) in ta.data().iter().zip(tb.data().iter()) {
                        max = max.max((x as f64 - y as f64).abs());
                    }
                    let status =
                        if max == 0.0 { DiffStatus::Identical } else { DiffStatus::Changed };
                    DiffEntry { name: name.clone(), status, max_abs_delta: Some(max) }
                }
            }
            (None, None) => unreachable!(),
        };
        out.push(entry);
    }
    out
}

/// Entries that differ in any way.
pub fn changes(entries: &[DiffEntry]) -> Vec<&DiffEntry> {
    entries.iter().filter(|e| e.status != DiffStatus::Identical).collect()
}

pub fn render_diff(entries: &[DiffEntry]) -> String {
    let changed = changes(entries);
    if changed.is_empty() {
        return "no differences\n".to_string();
    }
    let mut out = String::new();
    for e in changed {
        match (e.status, e.max_abs_delta) {
            (DiffStatus::Added, _) => out.push_str(&format!("added    {}\n", e.name)),
            (DiffStatus::Removed, _) => out.push_str(&format!("removed  {}\n", e.name)),
            (DiffStatus::Changed, Some(d)) => {
                out.push_str(&format!("changed  {}  max |delta| {d:.6e}\n", e.name));
            }
            (DiffStatus::Changed, None) => {
                out.push_str(&format!("changed  {}  (shape differs)\n", e.name));
            }
            (DiffStatus::Identical, _) => {}
        }
    }
    out
}
