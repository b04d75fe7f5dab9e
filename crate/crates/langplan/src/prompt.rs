//! Ground-truth driving prompts: template rendering, frozen text encoders,
//! the trainable adapter MLPs that project encodings into model feature
//! space, and a persistent embedding cache.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::bev::{RowKind, RowMeta};
use crate::linalg::Matrix;
use crate::scene::{AgentRecord, EgoRecord, LaneElement, Scene};
use crate::{Error, Result};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptRole {
    AlpEgo,
    AlpFg,
    AlpLane,
    SlpEgo,
}

impl PromptRole {
    pub fn name(&self) -> &'static str {
        match self {
            PromptRole::AlpEgo => "alp-ego",
            PromptRole::AlpFg => "alp-fg",
            PromptRole::AlpLane => "alp-lane",
            PromptRole::SlpEgo => "slp-ego",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptField {
    Label,
    Bbox,
    Traj,
    Command,
}

/// Which ground-truth fields are rendered; drives the prompt-field ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMask {
    pub label: bool,
    pub bbox: bool,
    pub traj: bool,
    pub command: bool,
}

impl Default for FieldMask {
    fn default() -> Self {
        FieldMask::all()
    }
}

impl FieldMask {
    pub fn all() -> Self {
        FieldMask { label: true, bbox: true, traj: true, command: true }
    }

    pub fn without(mut self, field: PromptField) -> Self {
        match field {
            PromptField::Label => self.label = false,
            PromptField::Bbox => self.bbox = false,
            PromptField::Traj => self.traj = false,
            PromptField::Command => self.command = false,
        }
        self
    }

    pub fn has(&self, field: PromptField) -> bool {
        match field {
            PromptField::Label => self.label,
            PromptField::Bbox => self.bbox,
            PromptField::Traj => self.traj,
            PromptField::Command => self.command,
        }
    }
}

/// Ground-truth payload a prompt is rendered from. Constructors fill the
/// fields relevant to each entity; `None` fields can only be masked out.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtRecord {
    pub label: Option<String>,
    /// (cx, cy, length, width, yaw); lane records store their width in the
    /// `width` slot and leave the rest zero.
    pub bbox: Option<[f64; 5]>,
    pub traj: Option<Vec<[f64; 2]>>,
    pub command: Option<String>,
}

impl GtRecord {
    pub fn fg(agent: &AgentRecord) -> Self {
        let b = agent.bev_box;
        GtRecord {
            label: Some(agent.label.name().to_string()),
            bbox: Some([b.cx, b.cy, b.length, b.width, b.yaw]),
            traj: Some(agent.future_traj.clone()),
            command: None,
        }
    }

    pub fn ego_alp(ego: &EgoRecord) -> Self {
        let b = ego.footprint;
        GtRecord {
            label: None,
            bbox: Some([b.cx, b.cy, b.length, b.width, b.yaw]),
            traj: Some(ego.gt_plan.clone()),
            command: None,
        }
    }

    pub fn lane(lane: &LaneElement) -> Self {
        GtRecord {
            label: Some(lane.kind.name().to_string()),
            bbox: Some([0.0, 0.0, 0.0, lane.width, 0.0]),
            traj: Some(lane.polyline.clone()),
            command: None,
        }
    }

    pub fn slp(ego: &EgoRecord) -> Self {
        GtRecord {
            label: None,
            bbox: None,
            traj: Some(ego.gt_plan.clone()),
            command: Some(ego.command.name().to_string()),
        }
    }
}

/// A role's canonical template reduced to the fields a mask keeps active.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub role: PromptRole,
    pub template_text: String,
    pub field_mask: FieldMask,
}

/// Fields each role's canonical template can render, in template order.
fn role_fields(role: PromptRole) -> &'static [PromptField] {
    match role {
        PromptRole::AlpFg => &[PromptField::Label, PromptField::Bbox, PromptField::Traj],
        PromptRole::AlpEgo => &[PromptField::Bbox, PromptField::Traj],
        // Lane prompts read "A lane {kind} along {polyline-head} width {w}
        // meters.": kind fills the label slot, the polyline head the traj
        // slot, width the bbox slot.
        PromptRole::AlpLane => &[PromptField::Label, PromptField::Traj, PromptField::Bbox],
        PromptRole::SlpEgo => &[PromptField::Command, PromptField::Traj],
    }
}

fn segment_text(role: PromptRole, field: PromptField) -> &'static str {
    match (role, field) {
        (PromptRole::AlpFg, PromptField::Label) => " {label}",
        (PromptRole::AlpFg, PromptField::Bbox) => {
            " at ({x}, {y}), size {l} by {w} meters, heading {yaw} rad"
        }
        (PromptRole::AlpFg, PromptField::Traj) => ", moving to {traj}",
        (PromptRole::AlpEgo, PromptField::Bbox) => " at ({x}, {y}), size {l} by {w} meters",
        (PromptRole::AlpEgo, PromptField::Traj) => ", will drive to {traj}",
        (PromptRole::AlpLane, PromptField::Label) => " {kind}",
        (PromptRole::AlpLane, PromptField::Traj) => " along {polyline-head}",
        (PromptRole::AlpLane, PromptField::Bbox) => " width {w} meters",
        (PromptRole::SlpEgo, PromptField::Command) => " should {command}",
        (PromptRole::SlpEgo, PromptField::Traj) => ", driving to {traj}",
        _ => unreachable!("segment_text called for a field outside the role's template"),
    }
}

fn role_stem(role: PromptRole) -> &'static str {
    match role {
        PromptRole::AlpFg => "A",
        PromptRole::AlpEgo => "The ego vehicle",
        PromptRole::AlpLane => "A lane",
        PromptRole::SlpEgo => "The ego car",
    }
}

impl PromptTemplate {
    /// Builds the template for `role`, keeping only fields present in `mask`.
    pub fn for_role(role: PromptRole, mask: FieldMask) -> Self {
        let mut text = role_stem(role).to_string();
        let mut effective = FieldMask { label: false, bbox: false, traj: false, command: false };
        for &f in role_fields(role) {
            if mask.has(f) {
                text.push_str(segment_text(role, f));
                match f {
                    PromptField::Label => effective.label = true,
                    PromptField::Bbox => effective.bbox = true,
                    PromptField::Traj => effective.traj = true,
                    PromptField::Command => effective.command = true,
                }
            }
        }
        text.push('.');
        PromptTemplate { role, template_text: text, field_mask: effective }
    }

    /// Checks that every placeholder in the text belongs to a masked-in field.
    pub fn validate(&self) -> Result<()> {
        let mut rest = self.template_text.as_str();
        while let Some(start) = rest.find('{') {
            let end = rest[start..]
                .find('}')
                .ok_or_else(|| Error::Rendering("unterminated placeholder".into()))?;
            let name = &rest[start + 1..start + end];
            let field = match name {
                "label" | "kind" => PromptField::Label,
                "x" | "y" | "l" | "w" | "yaw" => PromptField::Bbox,
                "traj" | "polyline-head" => PromptField::Traj,
                "command" => PromptField::Command,
                other => return Err(Error::Rendering(format!("unknown placeholder {{{other}}}"))),
            };
            if !self.field_mask.has(field) {
                return Err(Error::Rendering(format!(
                    "template for {} renders masked-out field {{{name}}}",
                    self.role.name()
                )));
            }
            rest = &rest[start + end + 1..];
        }
        Ok(())
    }
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_points(points: &[[f64; 2]]) -> String {
    points
        .iter()
        .map(|p| format!("({}, {})", fmt2(p[0]), fmt2(p[1])))
        .collect::<Vec<_>>()
        .join(", ")
}

fn require<'a, T>(value: &'a Option<T>, role: PromptRole, what: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| {
        Error::Rendering(format!("{} prompt needs a {what} field but the record has none", role.name()))
    })
}

/// Renders the canonical prompt for `role` from `record`, honoring `mask`.
/// Numbers use exactly two decimal places; masked-out fields vanish entirely.
pub fn render_prompt(role: PromptRole, record: &GtRecord, mask: &FieldMask) -> Result<String> {
    let mut s = role_stem(role).to_string();
    for &f in role_fields(role) {
        if !mask.has(f) {
            continue;
        }
        match (role, f) {
            (PromptRole::AlpFg, PromptField::Label) => {
                write!(s, " {}", require(&record.label, role, "label")?).unwrap();
            }
            (PromptRole::AlpFg, PromptField::Bbox) => {
                let b = require(&record.bbox, role, "bbox")?;
                write!(
                    s,
                    " at ({}, {}), size {} by {} meters, heading {} rad",
                    fmt2(b[0]),
                    fmt2(b[1]),
                    fmt2(b[2]),
                    fmt2(b[3]),
                    fmt2(b[4])
                )
                .unwrap();
            }
            (PromptRole::AlpFg, PromptField::Traj) => {
                let t = require(&record.traj, role, "traj")?;
                write!(s, ", moving to {}", fmt_points(t)).unwrap();
            }
            (PromptRole::AlpEgo, PromptField::Bbox) => {
                let b = require(&record.bbox, role, "bbox")?;
                write!(
                    s,
                    " at ({}, {}), size {} by {} meters",
                    fmt2(b[0]),
                    fmt2(b[1]),
                    fmt2(b[2]),
                    fmt2(b[3])
                )
                .unwrap();
            }
            (PromptRole::AlpEgo, PromptField::Traj) => {
                let t = require(&record.traj, role, "traj")?;
                write!(s, ", will drive to {}", fmt_points(t)).unwrap();
            }
            (PromptRole::AlpLane, PromptField::Label) => {
                write!(s, " {}", require(&record.label, role, "kind")?).unwrap();
            }
            (PromptRole::AlpLane, PromptField::Traj) => {
                let t = require(&record.traj, role, "polyline")?;
                let head = &t[..t.len().min(3)];
                write!(s, " along {}", fmt_points(head)).unwrap();
            }
            (PromptRole::AlpLane, PromptField::Bbox) => {
                let b = require(&record.bbox, role, "width")?;
                write!(s, " width {} meters", fmt2(b[3])).unwrap();
            }
            (PromptRole::SlpEgo, PromptField::Command) => {
                write!(s, " should {}", require(&record.command, role, "command")?).unwrap();
            }
            (PromptRole::SlpEgo, PromptField::Traj) => {
                let t = require(&record.traj, role, "traj")?;
                write!(s, ", driving to {}", fmt_points(t)).unwrap();
            }
            _ => unreachable!(),
        }
    }
    s.push('.');
    Ok(s)
}

/// Prompt for the entity a pooled-feature row describes, so prompt order can
/// never drift from feature-row order.
pub fn alp_prompt_for_row(scene: &Scene, meta: &RowMeta, mask: &FieldMask) -> Result<String> {
    match meta.kind {
        RowKind::Ego => render_prompt(PromptRole::AlpEgo, &GtRecord::ego_alp(&scene.ego), mask),
        RowKind::Fg => {
            let agent = scene
                .agents
                .iter()
                .find(|a| a.id == meta.id)
                .ok_or_else(|| Error::Pairing(format!("no agent with id {} in scene", meta.id)))?;
            render_prompt(PromptRole::AlpFg, &GtRecord::fg(agent), mask)
        }
        RowKind::Lane => {
            let lane = scene
                .lanes
                .get(meta.id as usize)
                .ok_or_else(|| Error::Pairing(format!("no lane at index {} in scene", meta.id)))?;
            render_prompt(PromptRole::AlpLane, &GtRecord::lane(lane), mask)
        }
    }
}

/// The sample-level planning prompt for a scene.
pub fn slp_prompt(scene: &Scene, mask: &FieldMask) -> Result<String> {
    render_prompt(PromptRole::SlpEgo, &GtRecord::slp(&scene.ego), mask)
}

/// A frozen text encoder: deterministic, stateless, never trained.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn backend_id(&self) -> &str;
    /// Encodes one prompt into a D-vector. Empty text is an error.
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deterministic signed feature hashing over words and character n-grams;
/// stands in for a pretrained sentence encoder so the suite needs no
/// downloads. Same text, same vector — forever.
#[derive(Debug, Clone)]
pub struct HashNgramEncoder {
    dim: usize,
    seed: u64,
    id: String,
}

impl HashNgramEncoder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Backend(format!("hash-ngram dim must be >= 8, got {dim}")));
        }
        let id =
            if seed == 0 { format!("hash-ngram-{dim}") } else { format!("hash-ngram-{dim}-{seed}") };
        Ok(HashNgramEncoder { dim, seed, id })
    }

    fn accumulate(&self, seed: u64, text: &str, out: &mut [f64]) {
        let mut bump = |token: &[u8], weight: f64| {
            let h = fnv1a(seed, token);
            let idx = ((h >> 1) % self.dim as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            out[idx] += sign * weight;
        };
        for word in text.split_whitespace() {
            bump(word.as_bytes(), 1.0);
        }
        let chars: Vec<char> = text.chars().collect();
        for n in 3..=5usize {
            if chars.len() < n {
                break;
            }
            let mut buf = String::new();
            for window in chars.windows(n) {
                buf.clear();
                buf.extend(window.iter());
                bump(buf.as_bytes(), 0.5);
            }
        }
    }
}

impl TextEncoder for HashNgramEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn backend_id(&self) -> &str {
        &self.id
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Argument("cannot encode empty text".into()));
        }
        // Signed sums can cancel exactly; rehash deterministically if so.
        for attempt in 0..4u64 {
            let mut v = vec![0.0; self.dim];
            self.accumulate(self.seed.wrapping_add(attempt), text, &mut v);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= 1e-12 {
                for x in v.iter_mut() {
                    *x /= norm;
                }
                return Ok(v);
            }
        }
        Err(Error::Backend(format!("hash-ngram features cancelled for text {text:?}")))
    }
}

/// Precomputed-embedding backend: serves vectors from a cache file written by
/// an external encoder. This is the integration point for a real pretrained
/// sentence encoder — run the heavyweight model offline over the prompt set,
/// save its vectors in the cache format, and point the backend id `file:<path>`
/// at the result.
#[derive(Debug, Clone)]
pub struct FileEncoder {
    id: String,
    dim: usize,
    map: BTreeMap<String, Vec<f64>>,
    path: PathBuf,
}

impl FileEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let cache = EmbeddingCache::load(path)?;
        Ok(FileEncoder {
            id: cache.backend_id,
            dim: cache.dim,
            map: cache.map,
            path: path.to_path_buf(),
        })
    }
}

impl TextEncoder for FileEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn backend_id(&self) -> &str {
        &self.id
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Argument("cannot encode empty text".into()));
        }
        self.map.get(&sha256_hex(text.as_bytes())).cloned().ok_or_else(|| {
            Error::Backend(format!(
                "prompt not present in file backend {}: {text:?}",
                self.path.display()
            ))
        })
    }
}

/// Builds an encoder from a backend id: `hash-ngram-<dim>[-<seed>]` or
/// `file:<path>`.
pub fn make_encoder(backend: &str) -> Result<Box<dyn TextEncoder>> {
    if let Some(path) = backend.strip_prefix("file:") {
        return Ok(Box::new(FileEncoder::load(Path::new(path))?));
    }
    if let Some(rest) = backend.strip_prefix("hash-ngram-") {
        let mut parts = rest.split('-');
        let dim: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Backend(format!("bad backend id {backend:?}")))?;
        let seed: u64 = match parts.next() {
            Some(p) => {
                p.parse().map_err(|_| Error::Backend(format!("bad backend id {backend:?}")))?
            }
            None => 0,
        };
        if parts.next().is_some() {
            return Err(Error::Backend(format!("bad backend id {backend:?}")));
        }
        return Ok(Box::new(HashNgramEncoder::new(dim, seed)?));
    }
    Err(Error::Backend(format!("unknown encoder backend {backend:?}")))
}

/// Trainable two-layer projection from encoder space (D) to model space (C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMlp {
    pub d_in: usize,
    pub hidden: usize,
    pub c_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl AdapterMlp {
    pub fn hidden_for(d_in: usize, c_out: usize) -> usize {
        d_in.max(c_out)
    }

    pub fn new_seeded(d_in: usize, c_out: usize, seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let hidden = Self::hidden_for(d_in, c_out);
        let mut init = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        };
        AdapterMlp {
            d_in,
            hidden,
            c_out,
            w1: init(d_in, hidden, d_in * hidden),
            b1: vec![0.0; hidden],
            w2: init(hidden, c_out, hidden * c_out),
            b2: vec![0.0; c_out],
        }
    }

    pub fn from_parts(
        d_in: usize,
        c_out: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let hidden = Self::hidden_for(d_in, c_out);
        if w1.len() != d_in * hidden || b1.len() != hidden || w2.len() != hidden * c_out || b2.len() != c_out
        {
            return Err(Error::Argument("adapter part sizes do not match dims".into()));
        }
        Ok(AdapterMlp { d_in, hidden, c_out, w1, b1, w2, b2 })
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.hidden + self.hidden + self.hidden * self.c_out + self.c_out
    }

    /// Pure forward over row-stacked inputs; mirrors the tape composition in
    /// [`adapter_forward_on_tape`] operation for operation.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in {
            return Err(Error::Argument(format!(
                "adapter expects {} input columns, got {}",
                self.d_in,
                x.cols()
            )));
        }
        let w1 = Matrix::from_vec(self.d_in, self.hidden, self.w1.clone())?;
        let w2 = Matrix::from_vec(self.hidden, self.c_out, self.w2.clone())?;
        let mut h = x.matmul(&w1)?;
        for i in 0..h.rows() {
            for j in 0..self.hidden {
                let v = h.get(i, j) + self.b1[j];
                h.set(i, j, if v > 0.0 { v } else { 0.0 });
            }
        }
        let mut y = h.matmul(&w2)?;
        for i in 0..y.rows() {
            for j in 0..self.c_out {
                y.set(i, j, y.get(i, j) + self.b2[j]);
            }
        }
        Ok(y)
    }
}

/// Tape forward for an adapter whose parameters live on the tape as variables.
pub fn adapter_forward_on_tape(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row_broadcast(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    tape.add_row_broadcast(y, b2)
}

/// Paired expectation rows: same metadata as the produced-feature batch they
/// align with.
#[derive(Debug, Clone)]
pub struct ExpectationBatch {
    pub features: Matrix,
    pub meta: Vec<RowMeta>,
}

/// Encodes each prompt (optionally through a cache) and adapts the rows into
/// model space. The encoder is frozen: only the adapter is trainable.
pub fn expectation_features(
    prompts: &[String],
    encoder: &dyn TextEncoder,
    mut cache: Option<&mut EmbeddingCache>,
    adapter: &AdapterMlp,
) -> Result<Matrix> {
    let embedded = encode_prompts(prompts, encoder, cache.as_deref_mut())?;
    adapter.forward(&embedded)
}

/// Encodes prompts into a row-stacked N×D matrix without adapting them.
pub fn encode_prompts(
    prompts: &[String],
    encoder: &dyn TextEncoder,
    mut cache: Option<&mut EmbeddingCache>,
) -> Result<Matrix> {
    if prompts.is_empty() {
        return Err(Error::Argument("expectation_features needs at least one prompt".into()));
    }
    let mut data = Vec::with_capacity(prompts.len() * encoder.dim());
    for p in prompts {
        let v = match cache.as_deref_mut() {
            Some(c) => c.get_or_encode(encoder, p)?,
            None => encoder.encode(p)?,
        };
        data.extend_from_slice(&v);
    }
    Matrix::from_vec(prompts.len(), encoder.dim(), data)
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    schema_version: u32,
    backend_id: String,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    k: String,
    v: Vec<f64>,
}

/// Persistent prompt-embedding cache keyed by prompt hash. A cache file
/// belongs to exactly one backend; mixing is an error.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    pub backend_id: String,
    pub dim: usize,
    map: BTreeMap<String, Vec<f64>>,
    pub hits: u64,
    pub misses: u64,
}

impl EmbeddingCache {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn new(encoder: &dyn TextEncoder) -> Self {
        EmbeddingCache {
            backend_id: encoder.backend_id().to_string(),
            dim: encoder.dim(),
            map: BTreeMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn check_backend(&self, encoder: &dyn TextEncoder) -> Result<()> {
        if encoder.backend_id() != self.backend_id || encoder.dim() != self.dim {
            return Err(Error::CacheMismatch {
                cached: format!("{} (D={})", self.backend_id, self.dim),
                requested: format!("{} (D={})", encoder.backend_id(), encoder.dim()),
            });
        }
        Ok(())
    }

    /// Returns the cached vector or encodes-and-stores it. Hits are
    /// bitwise-identical to a fresh encode because only fresh encodes are
    /// ever stored.
    pub fn get_or_encode(&mut self, encoder: &dyn TextEncoder, text: &str) -> Result<Vec<f64>> {
        self.check_backend(encoder)?;
        let key = sha256_hex(text.as_bytes());
        if let Some(v) = self.map.get(&key) {
            self.hits += 1;
            return Ok(v.clone());
        }
        let v = encoder.encode(text)?;
        self.map.insert(key, v.clone());
        self.misses += 1;
        Ok(v)
    }

    /// Writes header plus entries as JSON lines, atomically (temp + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CacheHeader {
            schema_version: Self::SCHEMA_VERSION,
            backend_id: self.backend_id.clone(),
            dim: self.dim,
        };
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            writeln!(f, "{}", serde_json::to_string(&header)?)?;
            for (k, v) in &self.map {
                writeln!(f, "{}", serde_json::to_string(&CacheEntry { k: k.clone(), v: v.clone() })?)?;
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Persistence(format!("empty cache file {}", path.display())))??;
        let header: CacheHeader = serde_json::from_str(&header_line)?;
        if header.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::Persistence(format!(
                "cache schema version {} unsupported",
                header.schema_version
            )));
        }
        let mut map = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheEntry = serde_json::from_str(&line)?;
            if entry.v.len() != header.dim {
                return Err(Error::Persistence(format!(
                    "cache entry has {} dims, header says {}",
                    entry.v.len(),
                    header.dim
                )));
            }
            map.insert(entry.k, entry.v);
        }
        Ok(EmbeddingCache { backend_id: header.backend_id, dim: header.dim, map, hits: 0, misses: 0 })
    }

    /// Loads `path` if it exists (validating the backend) or starts empty.
    pub fn open_or_new(path: &Path, encoder: &dyn TextEncoder) -> Result<Self> {
        if path.exists() {
            let cache = Self::load(path)?;
            cache.check_backend(encoder)?;
            Ok(cache)
        } else {
            Ok(Self::new(encoder))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::OrientedBox;
    use crate::scene::{AgentClass, Command};
    use approx::assert_relative_eq;

    fn car_record() -> GtRecord {
        GtRecord {
            label: Some("car".into()),
            bbox: Some([1.0, 2.0, 4.5, 1.8, 0.0]),
            traj: Some(vec![[1.0, 2.5], [1.0, 3.0]]),
            command: None,
        }
    }

    #[test]
    fn canonical_renderings() {
        let mask = FieldMask::all();
        assert_eq!(
            render_prompt(PromptRole::AlpFg, &car_record(), &mask).unwrap(),
            "A car at (1.00, 2.00), size 4.50 by 1.80 meters, heading 0.00 rad, \
             moving to (1.00, 2.50), (1.00, 3.00)."
        );

        let slp = GtRecord {
            command: Some("go-straight".into()),
            traj: Some((1..=6).map(|i| [0.5 * i as f64, 0.0]).collect()),
            ..GtRecord::default()
        };
        assert_eq!(
            render_prompt(PromptRole::SlpEgo, &slp, &mask).unwrap(),
            "The ego car should go-straight, driving to (0.50, 0.00), (1.00, 0.00), \
             (1.50, 0.00), (2.00, 0.00), (2.50, 0.00), (3.00, 0.00)."
        );

        let ego = GtRecord {
            bbox: Some([0.0, 0.0, 4.6, 1.9, 0.0]),
            traj: Some(vec![[0.5, 0.0], [1.0, 0.1]]),
            ..GtRecord::default()
        };
        assert_eq!(
            render_prompt(PromptRole::AlpEgo, &ego, &mask).unwrap(),
            "The ego vehicle at (0.00, 0.00), size 4.60 by 1.90 meters, \
             will drive to (0.50, 0.00), (1.00, 0.10)."
        );

        let lane = GtRecord {
            label: Some("divider".into()),
            bbox: Some([0.0, 0.0, 0.0, 3.0, 0.0]),
            traj: Some(vec![[-8.0, 1.0], [0.0, 1.0], [8.0, 1.0], [16.0, 1.0]]),
            ..GtRecord::default()
        };
        assert_eq!(
            render_prompt(PromptRole::AlpLane, &lane, &mask).unwrap(),
            "A lane divider along (-8.00, 1.00), (0.00, 1.00), (8.00, 1.00) width 3.00 meters."
        );
    }

    #[test]
    fn mask_removes_exactly_the_masked_clause() {
        let record = car_record();
        let full = render_prompt(PromptRole::AlpFg, &record, &FieldMask::all()).unwrap();
        let no_traj =
            render_prompt(PromptRole::AlpFg, &record, &FieldMask::all().without(PromptField::Traj))
                .unwrap();
        assert_eq!(
            no_traj,
            "A car at (1.00, 2.00), size 4.50 by 1.80 meters, heading 0.00 rad."
        );
        assert!(full.starts_with(no_traj.trim_end_matches('.')));

        let no_label =
            render_prompt(PromptRole::AlpFg, &record, &FieldMask::all().without(PromptField::Label))
                .unwrap();
        assert!(no_label.starts_with("A at (1.00, 2.00)"));

        // A record missing a masked-in field cannot render.
        let mut missing = record;
        missing.traj = None;
        assert!(matches!(
            render_prompt(PromptRole::AlpFg, &missing, &FieldMask::all()),
            Err(Error::Rendering(_))
        ));
    }

    #[test]
    fn templates_never_render_masked_out_placeholders() {
        let masks = [
            FieldMask::all(),
            FieldMask::all().without(PromptField::Label),
            FieldMask::all().without(PromptField::Bbox),
            FieldMask::all().without(PromptField::Traj),
            FieldMask::all().without(PromptField::Command),
        ];
        for role in [PromptRole::AlpEgo, PromptRole::AlpFg, PromptRole::AlpLane, PromptRole::SlpEgo] {
            for mask in masks {
                let t = PromptTemplate::for_role(role, mask);
                t.validate().unwrap();
                assert!(t.template_text.ends_with('.'));
            }
        }
        // Fully masked prompts still carry the role stem.
        let empty = FieldMask { label: false, bbox: false, traj: false, command: false };
        assert_eq!(PromptTemplate::for_role(PromptRole::AlpFg, empty).template_text, "A.");
    }

    #[test]
    fn prompts_are_injective_in_every_rendered_field() {
        let base = car_record();
        let mut variants = vec![base.clone()];
        let mut v = base.clone();
        v.label = Some("bus".into());
        variants.push(v);
        for slot in 0..5 {
            let mut v = base.clone();
            let mut b = v.bbox.unwrap();
            b[slot] += 0.25;
            v.bbox = Some(b);
            variants.push(v);
        }
        let mut v = base.clone();
        v.traj = Some(vec![[1.0, 2.5], [1.5, 3.0]]);
        variants.push(v);

        let mask = FieldMask::all();
        let strings: Vec<String> = variants
            .iter()
            .map(|r| render_prompt(PromptRole::AlpFg, r, &mask).unwrap())
            .collect();
        for i in 0..strings.len() {
            for j in i + 1..strings.len() {
                assert_ne!(strings[i], strings[j], "records {i} and {j} collide");
            }
        }
    }

    #[test]
    fn row_meta_prompts_cover_every_entity_kind() {
        let scene = crate::scene::generate_scene(7, &crate::scene::WorldConfig::city_a()).unwrap();
        let mask = FieldMask::all();
        let ego_meta = RowMeta { scene_index: 0, kind: RowKind::Ego, id: 0 };
        assert!(alp_prompt_for_row(&scene, &ego_meta, &mask)
            .unwrap()
            .starts_with("The ego vehicle"));
        if let Some(agent) = scene.agents.first() {
            let meta = RowMeta { scene_index: 0, kind: RowKind::Fg, id: agent.id };
            let s = alp_prompt_for_row(&scene, &meta, &mask).unwrap();
            assert!(s.starts_with(&format!("A {}", agent.label.name())));
        }
        if !scene.lanes.is_empty() {
            let meta = RowMeta { scene_index: 0, kind: RowKind::Lane, id: 0 };
            assert!(alp_prompt_for_row(&scene, &meta, &mask).unwrap().starts_with("A lane"));
        }
        let bogus = RowMeta { scene_index: 0, kind: RowKind::Fg, id: 9999 };
        assert!(matches!(alp_prompt_for_row(&scene, &bogus, &mask), Err(Error::Pairing(_))));

        let slp = slp_prompt(&scene, &mask).unwrap();
        assert!(slp.starts_with(&format!("The ego car should {}", scene.ego.command.name())));
        let _ = (AgentClass::Car, Command::GoStraight, OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn hash_encoder_is_deterministic_unit_norm_and_discriminative() {
        let enc = HashNgramEncoder::new(64, 0).unwrap();
        let a = enc.encode("A car at (1.00, 2.00).").unwrap();
        let b = enc.encode("A car at (1.00, 2.00).").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert_relative_eq!(a.iter().map(|x| x * x).sum::<f64>().sqrt(), 1.0, epsilon = 1e-12);

        let c = enc.encode("A bus at (1.00, 2.00).").unwrap();
        assert_ne!(a, c);

        // Fresh instances agree: the encoder carries no trainable state.
        let enc2 = HashNgramEncoder::new(64, 0).unwrap();
        assert_eq!(enc2.encode("A car at (1.00, 2.00).").unwrap(), a);

        assert!(matches!(enc.encode("   "), Err(Error::Argument(_))));
    }

    #[test]
    fn backend_registry_parses_ids() {
        assert_eq!(make_encoder("hash-ngram-64").unwrap().dim(), 64);
        assert_eq!(make_encoder("hash-ngram-128").unwrap().dim(), 128);
        let seeded = make_encoder("hash-ngram-64-9").unwrap();
        assert_eq!(seeded.backend_id(), "hash-ngram-64-9");
        assert_ne!(
            seeded.encode("A car.").unwrap(),
            make_encoder("hash-ngram-64").unwrap().encode("A car.").unwrap()
        );
        assert!(make_encoder("bert-base").is_err());
        assert!(make_encoder("hash-ngram-x").is_err());
        assert!(make_encoder("hash-ngram-4").is_err());
    }

    #[test]
    fn adapter_param_count_and_route_equality() {
        let adapter = AdapterMlp::new_seeded(64, 32, 5);
        assert_eq!(adapter.hidden, 64);
        assert_eq!(adapter.param_count(), 64 * 64 + 64 + 64 * 32 + 32);
        assert_eq!(adapter.param_count(), 6240);

        let enc = HashNgramEncoder::new(64, 0).unwrap();
        let rows = vec![
            enc.encode("A car at (1.00, 2.00).").unwrap(),
            enc.encode("A bus at (3.00, 4.00).").unwrap(),
        ];
        let x = Matrix::from_rows(&rows).unwrap();
        let pure = adapter.forward(&x).unwrap();

        let mut t = Tape::new();
        let vx = t.leaf(x.data().to_vec(), &[2, 64]);
        let vw1 = t.leaf(adapter.w1.clone(), &[64, 64]);
        let vb1 = t.leaf(adapter.b1.clone(), &[64]);
        let vw2 = t.leaf(adapter.w2.clone(), &[64, 32]);
        let vb2 = t.leaf(adapter.b2.clone(), &[32]);
        let y = adapter_forward_on_tape(&mut t, vx, vw1, vb1, vw2, vb2).unwrap();
        assert_eq!(t.value(y), pure.data());
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let d = 6;
        let c = 4;
        let adapter = AdapterMlp::new_seeded(d, c, 11);
        let x: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let target: Vec<f64> = (0..3 * c).map(|i| (i as f64 * 0.11).cos()).collect();

        let eval = |w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]| -> f64 {
            let a = AdapterMlp::from_parts(d, c, w1.to_vec(), b1.to_vec(), w2.to_vec(), b2.to_vec())
                .unwrap();
            let y = a.forward(&Matrix::from_vec(3, d, x.clone()).unwrap()).unwrap();
            y.data().iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / (3 * c) as f64
        };

        let mut t = Tape::new();
        let vx = t.leaf(x.clone(), &[3, d]);
        let vw1 = t.leaf(adapter.w1.clone(), &[d, adapter.hidden]);
        let vb1 = t.leaf(adapter.b1.clone(), &[adapter.hidden]);
        let vw2 = t.leaf(adapter.w2.clone(), &[adapter.hidden, c]);
        let vb2 = t.leaf(adapter.b2.clone(), &[c]);
        let y = adapter_forward_on_tape(&mut t, vx, vw1, vb1, vw2, vb2).unwrap();
        let loss = t.l1_mean(y, &target).unwrap();
        let grads = t.backward(loss).unwrap();

        let params: Vec<(Var, Vec<f64>)> = vec![
            (vw1, adapter.w1.clone()),
            (vb1, adapter.b1.clone()),
            (vw2, adapter.w2.clone()),
            (vb2, adapter.b2.clone()),
        ];
        for (pi, (var, values)) in params.iter().enumerate() {
            let g = grads.get(*var).unwrap();
            for j in (0..values.len()).step_by(7) {
                let h = 1e-5 * (1.0 + values[j].abs());
                let mut bufs =
                    [adapter.w1.clone(), adapter.b1.clone(), adapter.w2.clone(), adapter.b2.clone()];
                bufs[pi][j] += h;
                let up = eval(&bufs[0], &bufs[1], &bufs[2], &bufs[3]);
                bufs[pi][j] -= 2.0 * h;
                let down = eval(&bufs[0], &bufs[1], &bufs[2], &bufs[3]);
                let fd = (up - down) / (2.0 * h);
                let ad = g[j];
                let denom = fd.abs().max(ad.abs()).max(1e-8);
                assert!(
                    ((fd - ad) / denom).abs() < 1e-4,
                    "param {pi} slot {j}: fd {fd} vs ad {ad}"
                );
            }
        }
        // Encoder inputs are frozen leaves: the API never surfaces their
        // gradient, and no trainable parameter sits upstream of them.
        assert!(grads.get(vx).is_some());
    }

    #[test]
    fn expectation_rows_are_deterministic_and_match_singletons() {
        let enc = HashNgramEncoder::new(64, 0).unwrap();
        let adapter = AdapterMlp::new_seeded(64, 32, 3);
        let p1 = "A car at (1.00, 2.00).".to_string();
        let p2 = "A bus at (3.00, 4.00).".to_string();

        let single = expectation_features(std::slice::from_ref(&p1), &enc, None, &adapter).unwrap();
        assert_eq!(single.rows(), 1);
        assert_eq!(single.cols(), 32);
        let direct = adapter
            .forward(&Matrix::from_vec(1, 64, enc.encode(&p1).unwrap()).unwrap())
            .unwrap();
        assert_eq!(single, direct);

        let batch =
            expectation_features(&[p1.clone(), p2, p1.clone()], &enc, None, &adapter).unwrap();
        assert_eq!(batch.row(0), batch.row(2));
        assert_eq!(batch.row(0), single.row(0));

        assert!(expectation_features(&[], &enc, None, &adapter).is_err());
    }

    #[test]
    fn cache_round_trip_hit_identity_and_backend_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let enc = HashNgramEncoder::new(64, 0).unwrap();
        let mut cache = EmbeddingCache::new(&enc);

        let text = "The ego car should go-straight, driving to (1.00, 0.00).";
        let fresh = enc.encode(text).unwrap();
        let miss = cache.get_or_encode(&enc, text).unwrap();
        let hit = cache.get_or_encode(&enc, text).unwrap();
        assert_eq!(miss, fresh);
        assert_eq!(hit, fresh);
        assert_eq!((cache.hits, cache.misses), (1, 1));

        cache.save(&path).unwrap();
        let mut loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded.get_or_encode(&enc, text).unwrap(), fresh);
        assert_eq!((loaded.hits, loaded.misses), (1, 0));

        // A different backend cannot touch this cache.
        let other = HashNgramEncoder::new(128, 0).unwrap();
        assert!(matches!(
            loaded.get_or_encode(&other, text),
            Err(Error::CacheMismatch { .. })
        ));
        assert!(matches!(
            EmbeddingCache::open_or_new(&path, &other),
            Err(Error::CacheMismatch { .. })
        ));

        // The file doubles as a precomputed backend.
        let file_enc = FileEncoder::load(&path).unwrap();
        assert_eq!(file_enc.backend_id(), "hash-ngram-64");
        assert_eq!(file_enc.encode(text).unwrap(), fresh);
        assert!(matches!(file_enc.encode("unseen prompt"), Err(Error::Backend(_))));

        let via_registry = make_encoder(&format!("file:{}", path.display())).unwrap();
        assert_eq!(via_registry.encode(text).unwrap(), fresh);
    }
}
