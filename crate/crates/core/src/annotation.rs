//! Per-segment, per-aspect captioning.
//!
//! For every segment the pipeline samples up to `f_max` uniformly spaced
//! frames, issues one labeling call per requested aspect, and accepts a reply
//! only if it is a single `{"aspect", "caption"}` JSON object whose caption
//! fits the sentence cap. Rejected replies are retried with a corrective
//! suffix; aspects that still fail are written to a failure ledger instead of
//! the record sink.
//!
//! [`run_batch`] drives a worker pool over a segment list. The sink, the
//! checkpoint and the failure ledger are owned by one writer (the calling
//! thread), so each `(segment, aspect)` pair is persisted at most once.

use std::collections::{HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspect::AspectKind;
use crate::ingestion::{Dataset, Segment};
use crate::prompts::PromptSet;
use crate::vlm::{FrameRef, RequestTag, VlmClient, VlmError, VlmRequest};

pub const DEFAULT_MAX_FRAMES: usize = 10;
pub const DEFAULT_MAX_SENTENCES: usize = 2;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 256;
pub const DEFAULT_CONTENT_RETRIES: u32 = 3;

const SYSTEM_PROMPT: &str =
    "You write dense annotations for demonstration video clips. Answer only with the requested JSON object.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub max_frames: usize,
    pub max_sentences: usize,
    pub max_output_tokens: u32,
    /// Extra attempts for replies that fail schema or length checks.
    pub content_retries: u32,
    pub workers: usize,
    /// Stamp every record with this time instead of reading the client's
    /// clock. With several workers sharing a virtual clock the reading
    /// depends on scheduling, so reproducible runs pin it.
    pub fixed_created_at: Option<DateTime<Utc>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_frames: DEFAULT_MAX_FRAMES,
            max_sentences: DEFAULT_MAX_SENTENCES,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            content_retries: DEFAULT_CONTENT_RETRIES,
            workers: 4,
            fixed_created_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub segment_id: String,
    pub aspect: AspectKind,
    pub caption: String,
    pub model_id: String,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub segment_id: String,
    pub aspect: AspectKind,
    pub error_kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationError {
    #[error("response is not a single JSON object with keys aspect and caption: {0}")]
    Schema(String),
    #[error("response aspect '{found}' does not match requested {expected}")]
    AspectMismatch { expected: AspectKind, found: String },
    #[error("caption has {sentences} sentences, cap is {max}")]
    LengthViolation { sentences: usize, max: usize },
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error("prompt set {prompt_set} cannot be used for dataset {dataset}")]
    PromptSetMismatch { prompt_set: PromptSet, dataset: Dataset },
    #[error("no aspects requested")]
    NoAspects,
}

impl AnnotationError {
    /// Content errors are worth another attempt with a corrective suffix.
    pub fn is_content_error(&self) -> bool {
        matches!(
            self,
            AnnotationError::Schema(_)
                | AnnotationError::AspectMismatch { .. }
                | AnnotationError::LengthViolation { .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnnotationError::Schema(_) => "schema",
            AnnotationError::AspectMismatch { .. } => "aspect_mismatch",
            AnnotationError::LengthViolation { .. } => "length_violation",
            AnnotationError::Vlm(e) => e.kind(),
            AnnotationError::PromptSetMismatch { .. } => "config",
            AnnotationError::NoAspects => "config",
        }
    }
}

/// `min(n_frames, f_max)` strictly increasing indices covering the first and
/// last frame: `floor(i * (n - 1) / (k - 1))`.
pub fn sample_frames(n_frames: usize, f_max: usize) -> Vec<usize> {
    assert!(
        n_frames >= 1 && f_max >= 1,
        "sample_frames needs n_frames >= 1 and f_max >= 1"
    );
    let k = n_frames.min(f_max);
    if k == 1 {
        return vec![0];
    }
    (0..k).map(|i| i * (n_frames - 1) / (k - 1)).collect()
}

/// Number of sentences: a boundary is `.`, `!` or `?` followed by whitespace
/// or end of text; a trailing unterminated fragment counts as one.
pub fn count_sentences(caption: &str) -> usize {
    let chars: Vec<char> = caption.chars().collect();
    let mut count = 0;
    let mut pending = false;
    for (i, &c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace()) {
            count += 1;
            pending = false;
        } else if !c.is_whitespace() {
            pending = true;
        }
    }
    count + usize::from(pending)
}

pub fn validate_caption(caption: &str, max_sentences: usize) -> bool {
    count_sentences(caption) <= max_sentences
}

/// Supplies frame references for a segment; pixel handling lives behind it.
pub trait FrameSource: Send + Sync {
    fn frame_ref(&self, segment: &Segment, frame_index: u32) -> FrameRef;
}

/// `frame://<episode_id>/<absolute frame index>`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubFrameSource;

impl FrameSource for StubFrameSource {
    fn frame_ref(&self, segment: &Segment, frame_index: u32) -> FrameRef {
        format!("frame://{}/{}", segment.episode_id, frame_index)
    }
}

/// Renders context block, aspect instruction and output-format directive.
pub fn build_prompt(seg: &Segment, aspect: AspectKind, ps: PromptSet) -> Result<String, AnnotationError> {
    build_prompt_with_cap(seg, aspect, ps, DEFAULT_MAX_SENTENCES)
}

pub fn build_prompt_with_cap(
    seg: &Segment,
    aspect: AspectKind,
    ps: PromptSet,
    max_sentences: usize,
) -> Result<String, AnnotationError> {
    if PromptSet::for_dataset(seg.dataset) != ps {
        return Err(AnnotationError::PromptSetMismatch {
            prompt_set: ps,
            dataset: seg.dataset,
        });
    }
    let ctx = &seg.context;
    let mut lines = vec![
        "Context:".to_string(),
        format!("- Task description: {}", ctx.task_description),
    ];
    if seg.label != ctx.task_description {
        lines.push(format!("- Current segment: {}", seg.label));
    }
    if !ctx.scene_descriptor.is_empty() {
        lines.push(format!("- Scene: {}", ctx.scene_descriptor));
    }
    if !ctx.object_list.is_empty() {
        lines.push(format!("- Objects: {}", ctx.object_list.join(", ")));
    }
    if let Some(prev) = &ctx.prev_label {
        lines.push(format!("- Previous segment: {prev}"));
    }
    if let Some(next) = &ctx.next_label {
        lines.push(format!("- Next segment: {next}"));
    }
    if aspect == AspectKind::Reasoning && seg.dataset == Dataset::Robocasa365 && !ctx.primitive_sequence.is_empty() {
        lines.push(format!("- Primitive sequence: {}", ctx.primitive_sequence.join(" -> ")));
    }

    let cap = match max_sentences {
        1 => "one sentence".to_string(),
        2 => "two sentences".to_string(),
        n => format!("{n} sentences"),
    };
    Ok(format!(
        "{context}\n\nInstruction ({aspect}):\n{template}\n\nOutput format: respond with exactly one JSON object \
         {{\"aspect\": \"{aspect}\", \"caption\": \"<caption>\"}} and nothing else. \
         The caption must be at most {cap}.",
        context = lines.join("\n"),
        template = ps.template(aspect),
    ))
}

fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Accepts `{"aspect": .., "caption": ..}` (optionally fenced) and returns the
/// caption if the aspect matches and the caption fits the cap.
pub fn parse_response(raw_text: &str, expected: AspectKind) -> Result<String, AnnotationError> {
    parse_response_with_cap(raw_text, expected, DEFAULT_MAX_SENTENCES)
}

pub fn parse_response_with_cap(
    raw_text: &str,
    expected: AspectKind,
    max_sentences: usize,
) -> Result<String, AnnotationError> {
    let body = strip_code_fence(raw_text);
    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| AnnotationError::Schema(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| AnnotationError::Schema("top-level value is not an object".into()))?;
    if obj.len() != 2 {
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        return Err(AnnotationError::Schema(format!(
            "expected keys [aspect, caption], got {keys:?}"
        )));
    }
    let field = |name: &str| {
        obj.get(name)
            .ok_or_else(|| AnnotationError::Schema(format!("missing key '{name}'")))?
            .as_str()
            .ok_or_else(|| AnnotationError::Schema(format!("'{name}' is not a string")))
    };
    let aspect = field("aspect")?;
    let caption = field("caption")?;
    if aspect != expected.as_str() {
        return Err(AnnotationError::AspectMismatch {
            expected,
            found: aspect.to_string(),
        });
    }
    let sentences = count_sentences(caption);
    if sentences > max_sentences {
        return Err(AnnotationError::LengthViolation {
            sentences,
            max: max_sentences,
        });
    }
    Ok(caption.to_string())
}

fn corrective_suffix(err: &AnnotationError, max_sentences: usize) -> String {
    format!(
        "\n\nYour previous reply was rejected: {err}. Reply again with only the JSON object for this aspect; \
         the caption must be at most {max_sentences} sentences."
    )
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentAnnotations {
    pub records: Vec<AnnotationRecord>,
    pub failures: Vec<FailureEntry>,
}

/// One independent call chain per aspect; a failing aspect lands in
/// `failures` without affecting its siblings.
pub fn annotate_segment(
    seg: &Segment,
    aspects: &[AspectKind],
    client: &VlmClient,
    frames: &dyn FrameSource,
    cfg: &PipelineConfig,
) -> Result<SegmentAnnotations, AnnotationError> {
    if aspects.is_empty() {
        return Err(AnnotationError::NoAspects);
    }
    let ps = PromptSet::for_dataset(seg.dataset);
    let frame_refs: Vec<FrameRef> = sample_frames(seg.frame_count().max(1) as usize, cfg.max_frames)
        .into_iter()
        .map(|i| frames.frame_ref(seg, seg.start_frame + i as u32))
        .collect();

    let mut out = SegmentAnnotations::default();
    for &aspect in aspects {
        let prompt = build_prompt_with_cap(seg, aspect, ps, cfg.max_sentences)?;
        match annotate_aspect(seg, aspect, &prompt, &frame_refs, client, cfg) {
            Ok(rec) => out.records.push(rec),
            Err(e) => {
                log::warn!("{} {aspect}: giving up: {e}", seg.segment_id);
                out.failures.push(FailureEntry {
                    segment_id: seg.segment_id.clone(),
                    aspect,
                    error_kind: e.kind().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

fn annotate_aspect(
    seg: &Segment,
    aspect: AspectKind,
    prompt: &str,
    frame_refs: &[FrameRef],
    client: &VlmClient,
    cfg: &PipelineConfig,
) -> Result<AnnotationRecord, AnnotationError> {
    let mut user = prompt.to_string();
    let mut attempt = 0;
    loop {
        let req = VlmRequest {
            frames: frame_refs.to_vec(),
            system: SYSTEM_PROMPT.to_string(),
            user: user.clone(),
            max_output_tokens: cfg.max_output_tokens,
            tag: Some(RequestTag {
                segment_id: seg.segment_id.clone(),
                aspect,
            }),
        };
        let resp = client.complete(&req)?;
        match parse_response_with_cap(&resp.raw_text, aspect, cfg.max_sentences) {
            Ok(caption) => {
                return Ok(AnnotationRecord {
                    segment_id: seg.segment_id.clone(),
                    aspect,
                    caption,
                    model_id: client.model_id().to_string(),
                    input_tokens: resp.input_tokens,
                    output_tokens: resp.output_tokens,
                    created_at: cfg.fixed_created_at.unwrap_or_else(|| client.clock().utc_now()),
                })
            }
            Err(e) if e.is_content_error() && attempt < cfg.content_retries => {
                log::debug!("{} {aspect}: rejected reply ({e}), retrying", seg.segment_id);
                user = format!("{prompt}{}", corrective_suffix(&e, cfg.max_sentences));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("{what} {path}: {source}")]
    Io {
        what: &'static str,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("record sink write failed: {0}")]
    SinkWrite(#[source] io::Error),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BatchReport {
    pub completed: usize,
    pub failed: usize,
    pub skipped: usize,
}

/// Locations of the three batch outputs.
#[derive(Debug, Clone)]
pub struct BatchPaths {
    pub sink: PathBuf,
    pub checkpoint: PathBuf,
    pub failures: PathBuf,
}

impl BatchPaths {
    /// `<out>`, `<out>.checkpoint`, `<out>.failures.jsonl`.
    pub fn beside(sink: &Path) -> Self {
        let with_suffix = |suffix: &str| {
            let mut s = sink.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            sink: sink.to_path_buf(),
            checkpoint: with_suffix(".checkpoint"),
            failures: with_suffix(".failures.jsonl"),
        }
    }
}

/// Persistent state of a batch: what is done, and where new results go.
pub struct BatchStore {
    done: HashSet<(String, AspectKind)>,
    sink: Box<dyn Write + Send>,
    checkpoint: Box<dyn Write + Send>,
    failures: Box<dyn Write + Send>,
}

impl BatchStore {
    /// Opens (creating if needed) the three files and loads completed pairs
    /// from both the sink and the checkpoint. A torn final line left by an
    /// interrupted write is cut off first.
    pub fn open(paths: &BatchPaths) -> Result<Self, BatchError> {
        let mut done = HashSet::new();
        for rec in read_records_repairing(&paths.sink)? {
            done.insert((rec.segment_id, rec.aspect));
        }
        repair_torn_tail(&paths.checkpoint)?;
        if paths.checkpoint.exists() {
            let file = File::open(&paths.checkpoint).map_err(|source| BatchError::Io {
                what: "reading checkpoint",
                path: paths.checkpoint.clone(),
                source,
            })?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|source| BatchError::Io {
                    what: "reading checkpoint",
                    path: paths.checkpoint.clone(),
                    source,
                })?;
                if let Some((seg, aspect)) = line.split_once('\t') {
                    if let Ok(aspect) = aspect.parse() {
                        done.insert((seg.to_string(), aspect));
                    }
                }
            }
        }
        repair_torn_tail(&paths.failures)?;
        let append = |path: &Path, what: &'static str| -> Result<Box<dyn Write + Send>, BatchError> {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|source| BatchError::Io {
                    what,
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| BatchError::Io {
                    what,
                    path: path.to_path_buf(),
                    source,
                })?;
            Ok(Box::new(f))
        };
        Ok(Self {
            done,
            sink: append(&paths.sink, "opening sink")?,
            checkpoint: append(&paths.checkpoint, "opening checkpoint")?,
            failures: append(&paths.failures, "opening failure ledger")?,
        })
    }

    /// Store over arbitrary writers with a given done set.
    pub fn from_parts(
        done: HashSet<(String, AspectKind)>,
        sink: Box<dyn Write + Send>,
        checkpoint: Box<dyn Write + Send>,
        failures: Box<dyn Write + Send>,
    ) -> Self {
        Self {
            done,
            sink,
            checkpoint,
            failures,
        }
    }

    pub fn is_done(&self, segment_id: &str, aspect: AspectKind) -> bool {
        self.done.contains(&(segment_id.to_string(), aspect))
    }

    pub fn done_count(&self) -> usize {
        self.done.len()
    }

    /// Sink first, then checkpoint: a crash between the two leaves the pair
    /// recoverable from the sink.
    fn write_record(&mut self, rec: &AnnotationRecord) -> Result<bool, BatchError> {
        let key = (rec.segment_id.clone(), rec.aspect);
        if self.done.contains(&key) {
            return Ok(false);
        }
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        self.sink
            .write_all(line.as_bytes())
            .and_then(|_| self.sink.flush())
            .map_err(BatchError::SinkWrite)?;
        writeln!(self.checkpoint, "{}\t{}", rec.segment_id, rec.aspect)
            .and_then(|_| self.checkpoint.flush())
            .map_err(BatchError::SinkWrite)?;
        self.done.insert(key);
        Ok(true)
    }

    fn write_failure(&mut self, f: &FailureEntry) -> Result<(), BatchError> {
        let line = serde_json::to_string(f).expect("failure serializes");
        writeln!(self.failures, "{line}")
            .and_then(|_| self.failures.flush())
            .map_err(BatchError::SinkWrite)
    }
}

fn repair_torn_tail(path: &Path) -> Result<(), BatchError> {
    let io_err = |source| BatchError::Io {
        what: "repairing",
        path: path.to_path_buf(),
        source,
    };
    let Ok(bytes) = fs::read(path) else {
        return Ok(());
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    log::warn!("truncating torn trailing line in {}", path.display());
    let f = OpenOptions::new().write(true).open(path).map_err(io_err)?;
    f.set_len(keep as u64).map_err(io_err)?;
    Ok(())
}

fn read_records_repairing(path: &Path) -> Result<Vec<AnnotationRecord>, BatchError> {
    repair_torn_tail(path)?;
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_records(path)
}

/// Reads an annotation sink. Unparsable lines are skipped with a warning.
pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>, BatchError> {
    let io_err = |source| BatchError::Io {
        what: "reading records",
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(rec) => out.push(rec),
            Err(e) => log::warn!("{}:{}: skipping unreadable record: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct BatchControl {
    /// Stop handing out work once this many records were written in this run.
    pub stop_after: Option<usize>,
}

enum WorkerMsg {
    Done(SegmentAnnotations),
    Fatal(AnnotationError),
}

/// Annotates every pending `(segment, aspect)` pair with `cfg.workers`
/// workers. Pairs already in the store are skipped.
pub fn run_batch(
    segments: &[Segment],
    aspects: &[AspectKind],
    client: &VlmClient,
    frames: &dyn FrameSource,
    cfg: &PipelineConfig,
    store: &mut BatchStore,
    control: &BatchControl,
) -> Result<BatchReport, BatchError> {
    if aspects.is_empty() {
        return Err(AnnotationError::NoAspects.into());
    }
    let mut report = BatchReport::default();
    let mut queued = HashSet::new();
    let mut work: VecDeque<(&Segment, Vec<AspectKind>)> = VecDeque::new();
    for seg in segments {
        if !queued.insert(seg.segment_id.as_str()) {
            continue;
        }
        let pending: Vec<AspectKind> = aspects
            .iter()
            .copied()
            .filter(|&a| !store.is_done(&seg.segment_id, a))
            .collect();
        report.skipped += aspects.len() - pending.len();
        if !pending.is_empty() {
            work.push_back((seg, pending));
        }
    }
    if work.is_empty() {
        return Ok(report);
    }

    let queue = Mutex::new(work);
    let stop = AtomicBool::new(false);
    let workers = cfg.workers.max(1);
    let (tx, rx) = mpsc::channel::<WorkerMsg>();

    let mut outcome: Result<(), BatchError> = Ok(());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            let stop = &stop;
            scope.spawn(move || loop {
                if stop.load(Ordering::Acquire) {
                    break;
                }
                let next = queue.lock().expect("work queue poisoned").pop_front();
                let Some((seg, pending)) = next else { break };
                let msg = match annotate_segment(seg, &pending, client, frames, cfg) {
                    Ok(res) => WorkerMsg::Done(res),
                    Err(e) => WorkerMsg::Fatal(e),
                };
                if tx.send(msg).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for msg in rx {
            if outcome.is_err() || stop.load(Ordering::Acquire) {
                // interrupted: results still in flight are dropped
                continue;
            }
            let res = match msg {
                WorkerMsg::Done(res) => res,
                WorkerMsg::Fatal(e) => {
                    outcome = Err(e.into());
                    stop.store(true, Ordering::Release);
                    continue;
                }
            };
            for rec in &res.records {
                if control.stop_after.is_some_and(|n| report.completed >= n) {
                    stop.store(true, Ordering::Release);
                    break;
                }
                match store.write_record(rec) {
                    Ok(true) => report.completed += 1,
                    Ok(false) => report.skipped += 1,
                    Err(e) => {
                        outcome = Err(e);
                        stop.store(true, Ordering::Release);
                        break;
                    }
                }
            }
            if outcome.is_err() || stop.load(Ordering::Acquire) {
                continue;
            }
            for f in &res.failures {
                if let Err(e) = store.write_failure(f) {
                    outcome = Err(e);
                    stop.store(true, Ordering::Release);
                    break;
                }
                report.failed += 1;
            }
            if control.stop_after.is_some_and(|n| report.completed >= n) {
                stop.store(true, Ordering::Release);
            }
        }
    });
    outcome.map(|_| report)
}
