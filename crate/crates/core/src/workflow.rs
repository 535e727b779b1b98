//! Workflow descriptions, their text format, result chaining, and archives.
//!
//! Text format, one task per line:
//!
//! ```text
//! # comment
//! ttl=600
//! any             denoise   input.img             [cpu=1,energy=10]
//! 0000000000000004 scale    ##result## 110
//! ```
//!
//! The worker field is a 16-hex-digit address (ahead-of-time) or `any`
//! (just-in-time). `##result##` stands for the previous task's result and may
//! appear at most once per task, never in the first. An optional trailing
//! `[metric=amount,...]` list gives requirements for `cpu`, `memory`, `disk`,
//! `energy` and `distance`.

use std::collections::BTreeMap;
use std::fmt;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{NodeAddress, WorkflowId};
use crate::worker::{ErrorClass, WorkerError};

pub const RESULT_PLACEHOLDER: &str = "##result##";
pub const JIT_TOKEN: &str = "any";

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cpu,
    Memory,
    Disk,
    Energy,
    Distance,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Cpu, Metric::Memory, Metric::Disk, Metric::Energy, Metric::Distance];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cpu => "cpu",
            Metric::Memory => "memory",
            Metric::Disk => "disk",
            Metric::Energy => "energy",
            Metric::Distance => "distance",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Required amount per metric; absent metrics are not rated.
pub type Requirements = BTreeMap<Metric, f64>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkerSpec {
    AheadOfTime(NodeAddress),
    JustInTime,
}

impl WorkerSpec {
    pub fn is_jit(&self) -> bool {
        matches!(self, WorkerSpec::JustInTime)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub worker: WorkerSpec,
    pub service: String,
    pub params: Vec<String>,
    pub requirements: Requirements,
}

impl Task {
    pub fn placeholder_count(&self) -> usize {
        self.params.iter().filter(|p| *p == RESULT_PLACEHOLDER).count()
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.worker {
            WorkerSpec::AheadOfTime(a) => write!(f, "{a}")?,
            WorkerSpec::JustInTime => f.write_str(JIT_TOKEN)?,
        }
        write!(f, " {}", self.service)?;
        for p in &self.params {
            write!(f, " {p}")?;
        }
        if !self.requirements.is_empty() {
            let reqs: Vec<_> = self.requirements.iter().map(|(m, v)| format!("{}={v}", m.name())).collect();
            write!(f, " [{}]", reqs.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseErrorKind {
    #[error("workflow must include at least one task")]
    NoTasks,
    #[error("result placeholder used more than once in a task")]
    DuplicatePlaceholder,
    #[error("the first task cannot take a result placeholder")]
    PlaceholderInFirstTask,
    #[error("malformed worker address `{0}`")]
    BadWorker(String),
    #[error("missing service name")]
    MissingService,
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("bad ttl `{0}`")]
    BadTtl(String),
    #[error("bad requirement `{0}`")]
    BadRequirement(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    /// 1-based; 0 when the error concerns the whole document.
    pub line: usize,
    pub kind: ParseErrorKind,
}

/// A parsed but not yet submitted workflow.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkflowPlan {
    pub ttl_seconds: Option<f64>,
    pub tasks: Vec<Task>,
}

impl WorkflowPlan {
    pub fn instantiate(&self, id: WorkflowId, created_at: f64, default_ttl: f64) -> WorkflowDescription {
        WorkflowDescription {
            id,
            client: id.client,
            tasks: self.tasks.clone(),
            cursor: 0,
            ttl_seconds: self.ttl_seconds.unwrap_or(default_ttl),
            created_at,
        }
    }
}

impl fmt::Display for WorkflowPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(ttl) = self.ttl_seconds {
            writeln!(f, "ttl={ttl}")?;
        }
        for t in &self.tasks {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Parses a workflow description document.
pub fn parse(text: &str) -> Result<WorkflowPlan, ParseError> {
    let mut ttl = None;
    let mut tasks: Vec<Task> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |kind| ParseError { line: line_no, kind };
        let first = line.split_whitespace().next().unwrap_or_default();
        if let Some((key, value)) = first.split_once('=') {
            if key != "ttl" || !tasks.is_empty() || ttl.is_some() {
                return Err(err(ParseErrorKind::UnknownDirective(first.to_string())));
            }
            let v: f64 = value.parse().map_err(|_| err(ParseErrorKind::BadTtl(value.to_string())))?;
            if !(v.is_finite() && v > 0.0) || line.split_whitespace().count() > 1 {
                return Err(err(ParseErrorKind::BadTtl(line.to_string())));
            }
            ttl = Some(v);
            continue;
        }
        let task = parse_task_line(line).map_err(err)?;
        if tasks.is_empty() && task.placeholder_count() > 0 {
            return Err(err(ParseErrorKind::PlaceholderInFirstTask));
        }
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(ParseError { line: 0, kind: ParseErrorKind::NoTasks });
    }
    Ok(WorkflowPlan { ttl_seconds: ttl, tasks })
}

/// Parses one task line (no comments or directives).
pub fn parse_task_line(line: &str) -> Result<Task, ParseErrorKind> {
    let (body, requirements) = match line.trim_end().strip_suffix(']') {
        Some(head) => {
            let open = head.rfind('[').ok_or_else(|| ParseErrorKind::BadRequirement(line.to_string()))?;
            (&head[..open], parse_requirements(&head[open + 1..])?)
        }
        None => (line, Requirements::new()),
    };
    let mut tokens = body.split_whitespace();
    let worker = match tokens.next() {
        Some(JIT_TOKEN) => WorkerSpec::JustInTime,
        Some(w) => WorkerSpec::AheadOfTime(w.parse().map_err(|_| ParseErrorKind::BadWorker(w.to_string()))?),
        None => return Err(ParseErrorKind::MissingService),
    };
    let service = tokens.next().ok_or(ParseErrorKind::MissingService)?.to_string();
    let params: Vec<String> = tokens.map(str::to_string).collect();
    let task = Task { worker, service, params, requirements };
    if task.placeholder_count() > 1 {
        return Err(ParseErrorKind::DuplicatePlaceholder);
    }
    Ok(task)
}

fn parse_requirements(inner: &str) -> Result<Requirements, ParseErrorKind> {
    let mut reqs = Requirements::new();
    for item in inner.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || ParseErrorKind::BadRequirement(item.to_string());
        let (k, v) = item.split_once('=').ok_or_else(bad)?;
        let metric = Metric::parse(k.trim()).ok_or_else(bad)?;
        let amount: f64 = v.trim().parse().map_err(|_| bad())?;
        if !(amount.is_finite() && amount > 0.0) || reqs.insert(metric, amount).is_some() {
            return Err(bad());
        }
    }
    Ok(reqs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkflowDescription {
    pub id: WorkflowId,
    pub client: NodeAddress,
    pub tasks: Vec<Task>,
    /// Index of the next task to execute.
    pub cursor: usize,
    pub ttl_seconds: f64,
    pub created_at: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubstitutionError {
    #[error("next task expects a result but none was produced")]
    MissingResult,
    #[error("workflow cursor is past the last task")]
    Finished,
}

impl WorkflowDescription {
    pub fn current(&self) -> Option<&Task> {
        self.tasks.get(self.cursor)
    }

    pub fn is_last(&self) -> bool {
        self.cursor + 1 >= self.tasks.len()
    }

    pub fn deadline(&self) -> f64 {
        self.created_at + self.ttl_seconds
    }

    pub fn is_expired(&self, now: f64) -> bool {
        crate::bundle::is_expired(self.created_at, self.ttl_seconds, now)
    }

    /// Replaces the next task's placeholder with the current task's result.
    /// Returns whether a substitution happened; never moves the cursor.
    pub fn substitute_result(&mut self, result: Option<&str>) -> Result<bool, SubstitutionError> {
        if self.cursor >= self.tasks.len() {
            return Err(SubstitutionError::Finished);
        }
        let Some(next) = self.tasks.get_mut(self.cursor + 1) else {
            return Ok(false);
        };
        let Some(slot) = next.params.iter_mut().find(|p| *p == RESULT_PLACEHOLDER) else {
            return Ok(false);
        };
        *slot = result.ok_or(SubstitutionError::MissingResult)?.to_string();
        Ok(true)
    }

    pub fn advance(&mut self) {
        assert!(self.cursor < self.tasks.len(), "cursor already past the chain");
        self.cursor += 1;
    }
}

/// Name of the intermediate file produced by task `index`.
pub fn result_file_name(index: usize, ext: &str) -> String {
    format!("result_{index}.{ext}")
}

/// Who handed the current task out, for error routing and the single retry.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Route {
    pub prior: Option<NodeAddress>,
    pub retried: bool,
    pub excluded: Vec<NodeAddress>,
}

/// Everything a worker needs for the current task, shipped as one unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub description: WorkflowDescription,
    pub files: BTreeMap<String, Bytes>,
    pub route: Route,
    pub error: Option<WorkerError>,
    pub error_log: Option<String>,
}

impl Archive {
    pub fn new(description: WorkflowDescription) -> Self {
        Archive { description, files: BTreeMap::new(), route: Route::default(), error: None, error_log: None }
    }

    pub fn payload_bytes(&self) -> u64 {
        self.files.values().map(|f| f.len() as u64).sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnpackError {
    #[error("archive truncated")]
    Truncated,
    #[error("bad archive magic")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    Version(u8),
    #[error("invalid UTF-8 in archive")]
    Utf8,
    #[error("bad task line: {0}")]
    Task(ParseErrorKind),
    #[error("bad field: {0}")]
    Field(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

const ARCHIVE_MAGIC: &[u8; 4] = b"CLAR";
const ARCHIVE_VERSION: u8 = 1;

fn put_str(buf: &mut BytesMut, s: &str) {
    buf.put_u32_le(s.len() as u32);
    buf.put_slice(s.as_bytes());
}

/// Serializes the archive. No compression: the packed size is framing plus
/// the sum of the file sizes.
pub fn pack(archive: &Archive) -> Bytes {
    let d = &archive.description;
    let mut buf = BytesMut::with_capacity(256 + archive.payload_bytes() as usize);
    buf.put_slice(ARCHIVE_MAGIC);
    buf.put_u8(ARCHIVE_VERSION);
    buf.put_u64_le(d.id.client.0);
    buf.put_u32_le(d.id.seq);
    buf.put_u64_le(d.client.0);
    buf.put_u32_le(d.cursor as u32);
    buf.put_f64_le(d.ttl_seconds);
    buf.put_f64_le(d.created_at);
    buf.put_u32_le(d.tasks.len() as u32);
    for t in &d.tasks {
        put_str(&mut buf, &t.to_string());
    }
    let r = &archive.route;
    match r.prior {
        Some(p) => {
            buf.put_u8(1);
            buf.put_u64_le(p.0);
        }
        None => buf.put_u8(0),
    }
    buf.put_u8(r.retried as u8);
    buf.put_u32_le(r.excluded.len() as u32);
    for e in &r.excluded {
        buf.put_u64_le(e.0);
    }
    match &archive.error {
        Some(e) => {
            buf.put_u8(1);
            buf.put_u8(e.class as u8);
            buf.put_u32_le(e.task_index as u32);
            buf.put_u8(e.retried as u8);
            put_str(&mut buf, &e.message);
        }
        None => buf.put_u8(0),
    }
    match &archive.error_log {
        Some(log) => {
            buf.put_u8(1);
            put_str(&mut buf, log);
        }
        None => buf.put_u8(0),
    }
    buf.put_u32_le(archive.files.len() as u32);
    for (name, data) in &archive.files {
        put_str(&mut buf, name);
        buf.put_u64_le(data.len() as u64);
        buf.put_slice(data);
    }
    buf.freeze()
}

struct Reader {
    buf: Bytes,
}

impl Reader {
    fn need(&self, n: usize) -> Result<(), UnpackError> {
        if self.buf.remaining() < n { Err(UnpackError::Truncated) } else { Ok(()) }
    }
    fn u8(&mut self) -> Result<u8, UnpackError> {
        self.need(1)?;
        Ok(self.buf.get_u8())
    }
    fn u32(&mut self) -> Result<u32, UnpackError> {
        self.need(4)?;
        Ok(self.buf.get_u32_le())
    }
    fn u64(&mut self) -> Result<u64, UnpackError> {
        self.need(8)?;
        Ok(self.buf.get_u64_le())
    }
    fn f64(&mut self) -> Result<f64, UnpackError> {
        self.need(8)?;
        Ok(self.buf.get_f64_le())
    }
    fn flag(&mut self) -> Result<bool, UnpackError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(UnpackError::Field("flag")),
        }
    }
    fn bytes(&mut self, n: usize) -> Result<Bytes, UnpackError> {
        self.need(n)?;
        Ok(self.buf.split_to(n))
    }
    fn string(&mut self) -> Result<String, UnpackError> {
        let n = self.u32()? as usize;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| UnpackError::Utf8)
    }
}

/// Inverse of [`pack`]. File contents share the input buffer.
pub fn unpack(bytes: Bytes) -> Result<Archive, UnpackError> {
    let mut r = Reader { buf: bytes };
    if r.bytes(4)?.as_ref() != ARCHIVE_MAGIC {
        return Err(UnpackError::BadMagic);
    }
    let version = r.u8()?;
    if version != ARCHIVE_VERSION {
        return Err(UnpackError::Version(version));
    }
    let id = WorkflowId { client: NodeAddress(r.u64()?), seq: r.u32()? };
    let client = NodeAddress(r.u64()?);
    let cursor = r.u32()? as usize;
    let ttl_seconds = r.f64()?;
    let created_at = r.f64()?;
    let n_tasks = r.u32()? as usize;
    let mut tasks = Vec::with_capacity(n_tasks.min(1024));
    for _ in 0..n_tasks {
        tasks.push(parse_task_line(&r.string()?).map_err(UnpackError::Task)?);
    }
    if tasks.is_empty() {
        return Err(UnpackError::Task(ParseErrorKind::NoTasks));
    }
    if cursor > tasks.len() {
        return Err(UnpackError::Field("cursor"));
    }
    let prior = if r.flag()? { Some(NodeAddress(r.u64()?)) } else { None };
    let retried = r.flag()?;
    let n_excluded = r.u32()? as usize;
    let mut excluded = Vec::with_capacity(n_excluded.min(1024));
    for _ in 0..n_excluded {
        excluded.push(NodeAddress(r.u64()?));
    }
    let error = if r.flag()? {
        let class = ErrorClass::from_u8(r.u8()?).ok_or(UnpackError::Field("error class"))?;
        let task_index = r.u32()? as usize;
        let retried = r.flag()?;
        let message = r.string()?;
        Some(WorkerError { class, message, task_index, retried })
    } else {
        None
    };
    let error_log = if r.flag()? { Some(r.string()?) } else { None };
    let n_files = r.u32()? as usize;
    let mut files = BTreeMap::new();
    for _ in 0..n_files {
        let name = r.string()?;
        let len = r.u64()? as usize;
        files.insert(name, r.bytes(len)?);
    }
    if r.buf.has_remaining() {
        return Err(UnpackError::Trailing(r.buf.remaining()));
    }
    Ok(Archive {
        description: WorkflowDescription { id, client, tasks, cursor, ttl_seconds, created_at },
        files,
        route: Route { prior, retried, excluded },
        error,
        error_log,
    })
}
