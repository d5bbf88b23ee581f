//! Embedding columns: whitespace tokenization, overlapping chunking, a
//! deterministic feature-hashing embedder, mean pooling, and a JSON-lines
//! protocol for external embedders.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{Cell, ColumnKind, WideColumn, WideTable};
use crate::error::{Error, Result};
use crate::modality::{EmbedModality, Modality};

pub const DEFAULT_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub modality: EmbedModality,
    pub source_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub window: usize,
    pub overlap: usize,
}

impl Default for ChunkPlan {
    fn default() -> Self {
        ChunkPlan {
            window: 512,
            overlap: 64,
        }
    }
}

impl ChunkPlan {
    pub fn new(window: usize, overlap: usize) -> Result<Self> {
        let plan = ChunkPlan { window, overlap };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.overlap >= self.window {
            return Err(Error::config(
                "chunk",
                format!("need 0 <= overlap < window, got window {} overlap {}", self.window, self.overlap),
            ));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.window - self.overlap
    }
}

pub fn tokenize_ws(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Token windows starting at 0, stride, 2·stride, … until one reaches the
/// last token. Zero tokens give zero chunks.
pub fn chunk_ranges(n: usize, plan: &ChunkPlan) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + plan.window).min(n);
        out.push(start..end);
        if end == n {
            break;
        }
        start += plan.stride();
    }
    out
}

pub fn chunk<'a, T>(tokens: &'a [T], plan: &ChunkPlan) -> Vec<&'a [T]> {
    chunk_ranges(tokens.len(), plan)
        .into_iter()
        .map(|r| &tokens[r])
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing: bucket `h mod dim`, sign from the top bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: DEFAULT_DIM }
    }
}

impl HashEmbedder {
    /// L2-normalized bag of hashed tokens. An all-cancelling chunk stays zero.
    pub fn embed_chunk(&self, tokens: &[&str]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokens {
            let h = fnv1a64(t.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn embed_text(&self, text: &str, plan: &ChunkPlan) -> Result<Vec<f64>> {
        let tokens = tokenize_ws(text);
        embed_chunks(&chunk(&tokens, plan), self)
    }
}

/// Componentwise mean; not re-normalized.
pub fn mean_pool(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Embedder("nothing to pool".into()))?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != acc.len() {
            return Err(Error::Embedder(format!(
                "dimension mismatch: {} vs {}",
                v.len(),
                acc.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

pub fn embed_chunks(chunks: &[&[&str]], embedder: &HashEmbedder) -> Result<Vec<f64>> {
    if chunks.is_empty() {
        return Err(Error::Embedder("no chunks to embed".into()));
    }
    let vectors: Vec<Vec<f64>> = chunks.iter().map(|c| embedder.embed_chunk(c)).collect();
    mean_pool(&vectors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    BuiltinHash,
    External,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

fn default_timeout() -> f64 {
    30.0
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderBinding {
    pub kind: EmbedderKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Subprocess argv speaking JSON lines on stdin/stdout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    /// HTTP endpoint taking one JSON request per POST.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl EmbedderBinding {
    pub fn builtin() -> Self {
        EmbedderBinding {
            kind: EmbedderKind::BuiltinHash,
            dim: DEFAULT_DIM,
            command: None,
            endpoint: None,
            timeout_s: default_timeout(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn external_command(argv: Vec<String>, dim: usize) -> Self {
        EmbedderBinding {
            kind: EmbedderKind::External,
            dim,
            command: Some(argv),
            ..Self::builtin()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.kind == EmbedderKind::External {
            match (&self.command, &self.endpoint) {
                (Some(c), None) if !c.is_empty() => {}
                (None, Some(_)) => {}
                _ => {
                    return Err(Error::config(
                        "embedder",
                        "external binding needs exactly one of a non-empty `command` or an `endpoint`",
                    ))
                }
            }
            if !(self.timeout_s > 0.0) || self.max_in_flight == 0 {
                return Err(Error::config("embedder", "timeout_s and max_in_flight must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBindings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<EmbedderBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<EmbedderBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img: Option<EmbedderBinding>,
    #[serde(default)]
    pub chunk: ChunkPlan,
}

impl EmbeddingBindings {
    pub fn builtin_all() -> Self {
        EmbeddingBindings {
            text: Some(EmbedderBinding::builtin()),
            signal: Some(EmbedderBinding::builtin()),
            img: Some(EmbedderBinding::builtin()),
            chunk: ChunkPlan::default(),
        }
    }

    pub fn for_family(&self, f: EmbedModality) -> Option<&EmbedderBinding> {
        match f {
            EmbedModality::Text => self.text.as_ref(),
            EmbedModality::Signal => self.signal.as_ref(),
            EmbedModality::Img => self.img.as_ref(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.chunk.validate()?;
        for b in [&self.text, &self.signal, &self.img].into_iter().flatten() {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub id: String,
    pub modality: EmbedModality,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub id: String,
    pub values: Vec<f64>,
}

type Outcome = std::result::Result<Vec<f64>, String>;

/// Runs requests through an external embedder, keyed by request id. Failures
/// (timeout, malformed reply, wrong dimension) are per-request.
pub fn embed_external(binding: &EmbedderBinding, requests: &[EmbedRequest]) -> Result<HashMap<String, Outcome>> {
    binding.validate()?;
    let mut out: HashMap<String, Outcome> = if let Some(argv) = &binding.command {
        run_subprocess(argv, binding, requests)?
    } else {
        let url = binding.endpoint.as_deref().expect("validated");
        run_http(url, binding, requests)
    };
    for v in out.values_mut() {
        if let Ok(values) = v {
            if values.len() != binding.dim {
                *v = Err(format!("dimension mismatch: got {}, declared {}", values.len(), binding.dim));
            } else if values.iter().any(|x| !x.is_finite()) {
                *v = Err("non-finite value".into());
            }
        }
    }
    Ok(out)
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    replies: mpsc::Receiver<std::result::Result<EmbedResponse, String>>,
}

impl Worker {
    fn spawn(argv: &[String]) -> Result<Self> {
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Embedder(format!("cannot start `{}`: {e}", argv[0])))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let (tx, replies) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                let msg = serde_json::from_str::<EmbedResponse>(&line).map_err(|e| format!("bad reply: {e}"));
                if tx.send(msg).is_err() {
                    break;
                }
            }
        });
        Ok(Worker { child, stdin, replies })
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn run_subprocess(
    argv: &[String],
    binding: &EmbedderBinding,
    requests: &[EmbedRequest],
) -> Result<HashMap<String, Outcome>> {
    let timeout = Duration::from_secs_f64(binding.timeout_s);
    let mut out = HashMap::new();
    let mut queue = requests.iter().peekable();
    let mut worker: Option<Worker> = None;
    let mut pending: BTreeMap<String, ()> = BTreeMap::new();
    while queue.peek().is_some() || !pending.is_empty() {
        let w = match &mut worker {
            Some(w) => w,
            None => worker.insert(Worker::spawn(argv)?),
        };
        while pending.len() < binding.max_in_flight {
            let Some(req) = queue.next() else { break };
            let line = serde_json::to_string(req)?;
            if writeln!(w.stdin, "{line}").and_then(|_| w.stdin.flush()).is_err() {
                out.insert(req.id.clone(), Err("embedder closed its input".to_string()));
                continue;
            }
            pending.insert(req.id.clone(), ());
        }
        if pending.is_empty() {
            continue;
        }
        match w.replies.recv_timeout(timeout) {
            Ok(Ok(resp)) => {
                if pending.remove(&resp.id).is_some() {
                    out.insert(resp.id, Ok(resp.values));
                }
            }
            Ok(Err(reason)) => {
                // An unparseable line cannot be attributed; fail the oldest request.
                if let Some(id) = pending.keys().next().cloned() {
                    pending.remove(&id);
                    out.insert(id, Err(reason));
                }
            }
            Err(e) => {
                let reason = match e {
                    mpsc::RecvTimeoutError::Timeout => format!("timed out after {:?}", timeout),
                    mpsc::RecvTimeoutError::Disconnected => "embedder exited".to_string(),
                };
                for id in std::mem::take(&mut pending).into_keys() {
                    out.insert(id, Err(reason.clone()));
                }
                worker = None;
            }
        }
    }
    Ok(out)
}

fn run_http(url: &str, binding: &EmbedderBinding, requests: &[EmbedRequest]) -> HashMap<String, Outcome> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(binding.timeout_s)))
        .build()
        .into();
    let call = |req: &EmbedRequest| -> Outcome {
        let mut resp = agent.post(url).send_json(req).map_err(|e| e.to_string())?;
        let body: EmbedResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        if body.id != req.id {
            return Err(format!("reply id `{}` does not match request `{}`", body.id, req.id));
        }
        Ok(body.values)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(binding.max_in_flight)
        .build()
        .expect("thread pool");
    pool.install(|| {
        requests
            .par_iter()
            .map(|r| (r.id.clone(), call(r)))
            .collect()
    })
}

/// Where embedding payloads come from.
#[derive(Debug, Clone, Default)]
pub struct EmbedSources {
    /// note_id → text to embed.
    pub note_texts: HashMap<String, String>,
    /// Root that slot file paths are relative to.
    pub asset_root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmbedIssue {
    pub modality: Modality,
    pub source_id: String,
    pub reason: String,
}

/// Adds a `{slot}_embed` column for every slot column whose modality family
/// has a binding. Cells hold the vector as a JSON array; null slots, and
/// sources that fail to embed, give null cells (the latter with an issue).
pub fn attach_embeddings(
    table: &WideTable,
    bindings: &EmbeddingBindings,
    sources: &EmbedSources,
) -> Result<(WideTable, Vec<EmbedIssue>)> {
    bindings.validate()?;
    let slots: Vec<(usize, Modality, usize)> = table
        .columns
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match c.kind {
            ColumnKind::Slot { modality, index } if bindings.for_family(modality.embed_family()).is_some() => {
                Some((i, modality, index))
            }
            _ => None,
        })
        .collect();

    let mut wanted: BTreeMap<(Modality, String), ()> = BTreeMap::new();
    for row in &table.rows {
        for &(col, m, _) in &slots {
            if let Cell::Text(v) = &row[col] {
                wanted.insert((m, v.clone()), ());
            }
        }
    }
    let wanted: Vec<(Modality, String)> = wanted.into_keys().collect();
    let (cells, issues) = embed_sources(&wanted, bindings, sources)?;

    let mut out = table.clone();
    for &(col, m, index) in &slots {
        out.columns.push(WideColumn::new(
            format!("{}_embed", table.columns[col].name),
            ColumnKind::Embedding { modality: m, index },
        ));
        for row in out.rows.iter_mut() {
            let cell = match &row[col] {
                Cell::Text(v) => cells
                    .get(&(m, v.clone()))
                    .cloned()
                    .map_or(Cell::Null, Cell::Text),
                _ => Cell::Null,
            };
            row.push(cell);
        }
    }
    Ok((out, issues))
}

/// Embeds each (modality, slot value) once; returns JSON-serialized vectors.
pub fn embed_sources(
    wanted: &[(Modality, String)],
    bindings: &EmbeddingBindings,
    sources: &EmbedSources,
) -> Result<(HashMap<(Modality, String), String>, Vec<EmbedIssue>)> {
    let mut issues = Vec::new();
    let mut payloads: Vec<((Modality, String), String)> = Vec::with_capacity(wanted.len());
    for (m, v) in wanted {
        let binding = bindings.for_family(m.embed_family()).expect("filtered");
        let payload = if m.is_note() {
            sources.note_texts.get(v).cloned()
        } else {
            let path = sources.asset_root.join(v);
            match binding.kind {
                EmbedderKind::BuiltinHash => std::fs::read(&path)
                    .ok()
                    .map(|b| String::from_utf8_lossy(&b).into_owned()),
                EmbedderKind::External => path.is_file().then(|| path.display().to_string()),
            }
        };
        match payload {
            Some(p) => payloads.push(((*m, v.clone()), p)),
            None => issues.push(EmbedIssue {
                modality: *m,
                source_id: v.clone(),
                reason: if m.is_note() { "note text not found" } else { "asset file missing" }.into(),
            }),
        }
    }

    let mut cells = HashMap::new();
    for family in [EmbedModality::Text, EmbedModality::Signal, EmbedModality::Img] {
        let Some(binding) = bindings.for_family(family) else { continue };
        let batch: Vec<&((Modality, String), String)> =
            payloads.iter().filter(|((m, _), _)| m.embed_family() == family).collect();
        if batch.is_empty() {
            continue;
        }
        let results: Vec<((Modality, String), Outcome)> = match binding.kind {
            EmbedderKind::BuiltinHash => {
                let embedder = HashEmbedder { dim: binding.dim };
                batch
                    .par_iter()
                    .map(|(key, text)| {
                        let r = embedder.embed_text(text, &bindings.chunk).map_err(|e| e.to_string());
                        (key.clone(), r)
                    })
                    .collect()
            }
            EmbedderKind::External => {
                let requests: Vec<EmbedRequest> = batch
                    .iter()
                    .map(|((m, v), p)| EmbedRequest {
                        id: format!("{m}:{v}"),
                        modality: family,
                        payload: p.clone(),
                    })
                    .collect();
                let mut replies = embed_external(binding, &requests)?;
                batch
                    .iter()
                    .map(|((m, v), _)| {
                        let r = replies
                            .remove(&format!("{m}:{v}"))
                            .unwrap_or_else(|| Err("no reply".into()));
                        ((*m, v.clone()), r)
                    })
                    .collect()
            }
        };
        for (key, r) in results {
            match r {
                Ok(values) => {
                    cells.insert(key, serde_json::to_string(&values)?);
                }
                Err(reason) => issues.push(EmbedIssue {
                    modality: key.0,
                    source_id: key.1,
                    reason,
                }),
            }
        }
    }
    issues.sort_by(|a, b| (a.modality, &a.source_id).cmp(&(b.modality, &b.source_id)));
    Ok((cells, issues))
}
