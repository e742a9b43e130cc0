//! Episode metadata ingestion and single-primitive splitting.
//!
//! Corpus metadata is one JSON-Lines file per dataset (`<dataset>.jsonl`),
//! one [`EpisodeMeta`] object per line. Primitive boundaries come only from
//! the metadata; no pixels are read here.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Robocasa365,
    Molmobot,
    Egoverse,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::Robocasa365, Dataset::Molmobot, Dataset::Egoverse];

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Robocasa365 => "robocasa365",
            Dataset::Molmobot => "molmobot",
            Dataset::Egoverse => "egoverse",
        }
    }

    /// Conventional metadata file name inside a corpus directory.
    pub fn metadata_file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown dataset '{s}' (expected robocasa365, molmobot or egoverse)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveSpan {
    pub label: String,
    pub start_frame: u32,
    pub end_frame: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub episode_id: String,
    pub dataset: Dataset,
    pub frame_count: u32,
    pub task_label: String,
    #[serde(default)]
    pub scene_descriptor: String,
    #[serde(default)]
    pub object_list: Vec<String>,
    #[serde(default)]
    pub primitive_spans: Vec<PrimitiveSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("frame_count must be >= 1")]
    EmptyEpisode,
    #[error("episode_id must be non-empty")]
    MissingId,
    #[error("span {index} [{start}, {end}) is empty or outside [0, {frame_count})")]
    SpanOutOfRange {
        index: usize,
        start: u32,
        end: u32,
        frame_count: u32,
    },
    #[error("span {index} starts at {start} before the previous span ends at {prev_end}")]
    SpanOverlap { index: usize, start: u32, prev_end: u32 },
}

impl EpisodeMeta {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.episode_id.is_empty() {
            return Err(ValidationError::MissingId);
        }
        if self.frame_count == 0 {
            return Err(ValidationError::EmptyEpisode);
        }
        let mut prev_end: Option<u32> = None;
        for (index, span) in self.primitive_spans.iter().enumerate() {
            if span.start_frame >= span.end_frame || span.end_frame > self.frame_count {
                return Err(ValidationError::SpanOutOfRange {
                    index,
                    start: span.start_frame,
                    end: span.end_frame,
                    frame_count: self.frame_count,
                });
            }
            if let Some(prev_end) = prev_end {
                if span.start_frame < prev_end {
                    return Err(ValidationError::SpanOverlap {
                        index,
                        start: span.start_frame,
                        prev_end,
                    });
                }
            }
            prev_end = Some(span.end_frame);
        }
        Ok(())
    }
}

/// Context shown to the labeling model alongside the frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub task_description: String,
    pub scene_descriptor: String,
    pub object_list: Vec<String>,
    pub prev_label: Option<String>,
    pub next_label: Option<String>,
    /// Labels of every primitive in the episode, in order. Empty when the
    /// episode was not split.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub primitive_sequence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub episode_id: String,
    pub dataset: Dataset,
    pub start_frame: u32,
    pub end_frame: u32,
    pub label: String,
    pub context: ContextBlock,
}

impl Segment {
    pub fn frame_count(&self) -> u32 {
        self.end_frame - self.start_frame
    }
}

/// `episode_id#NNN`, zero-padded span index.
pub fn segment_id(episode_id: &str, span_index: usize) -> String {
    format!("{episode_id}#{span_index:03}")
}

/// Inverse of [`segment_id`].
pub fn parse_segment_id(segment_id: &str) -> Option<(&str, usize)> {
    let (episode, index) = segment_id.rsplit_once('#')?;
    Some((episode, index.parse().ok()?))
}

/// One segment per primitive span, or a single whole-episode segment when the
/// episode carries no spans. Callers must pass a validated episode.
pub fn split_episode(ep: &EpisodeMeta) -> Vec<Segment> {
    let context = |prev: Option<&str>, next: Option<&str>, sequence: Vec<String>| ContextBlock {
        task_description: ep.task_label.clone(),
        scene_descriptor: ep.scene_descriptor.clone(),
        object_list: ep.object_list.clone(),
        prev_label: prev.map(str::to_string),
        next_label: next.map(str::to_string),
        primitive_sequence: sequence,
    };

    if ep.primitive_spans.is_empty() {
        return vec![Segment {
            segment_id: segment_id(&ep.episode_id, 0),
            episode_id: ep.episode_id.clone(),
            dataset: ep.dataset,
            start_frame: 0,
            end_frame: ep.frame_count,
            label: ep.task_label.clone(),
            context: context(None, None, Vec::new()),
        }];
    }

    let sequence: Vec<String> = ep.primitive_spans.iter().map(|s| s.label.clone()).collect();
    let spans = &ep.primitive_spans;
    spans
        .iter()
        .enumerate()
        .map(|(i, span)| {
            let prev = i.checked_sub(1).map(|j| spans[j].label.as_str());
            let next = spans.get(i + 1).map(|s| s.label.as_str());
            Segment {
                segment_id: segment_id(&ep.episode_id, i),
                episode_id: ep.episode_id.clone(),
                dataset: ep.dataset,
                start_frame: span.start_frame,
                end_frame: span.end_frame,
                label: span.label.clone(),
                context: context(prev, next, sequence.clone()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnRecordError {
    /// Drop the record, keep loading, and report it.
    #[default]
    Skip,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordErrorKind {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("dataset is {found}, expected {expected}")]
    WrongDataset { found: Dataset, expected: Dataset },
    #[error("duplicate episode_id")]
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line} (episode {episode_id}): {kind}")]
pub struct RecordError {
    pub line: usize,
    /// Best-effort; `"?"` when the line could not be parsed far enough.
    pub episode_id: String,
    pub kind: RecordErrorKind,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Record(#[from] RecordError),
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    /// Sorted by episode_id.
    pub episodes: Vec<EpisodeMeta>,
    /// Records dropped under [`OnRecordError::Skip`].
    pub rejected: Vec<RecordError>,
}

impl Corpus {
    pub fn segments(&self) -> Vec<Segment> {
        self.episodes.iter().flat_map(split_episode).collect()
    }
}

/// Loads a corpus from either a metadata file or a directory holding
/// `<dataset>.jsonl`. A directory without that file is an empty corpus; a
/// path that does not exist is an I/O error.
pub fn load_corpus(path: &Path, dataset: Dataset, on_error: OnRecordError) -> Result<Corpus, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let meta = fs::metadata(path).map_err(io_err)?;
    let file_path = if meta.is_dir() {
        let candidate = path.join(dataset.metadata_file_name());
        if !candidate.exists() {
            return Ok(Corpus::default());
        }
        candidate
    } else {
        path.to_path_buf()
    };
    let file = fs::File::open(&file_path).map_err(|source| IngestError::Io {
        path: file_path.clone(),
        source,
    })?;
    read_corpus(BufReader::new(file), dataset, on_error).map_err(|e| match e {
        IngestError::Io { source, .. } => IngestError::Io {
            path: file_path.clone(),
            source,
        },
        other => other,
    })
}

pub fn read_corpus<R: BufRead>(reader: R, dataset: Dataset, on_error: OnRecordError) -> Result<Corpus, IngestError> {
    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, idx + 1, dataset, &mut seen) {
            Ok(ep) => corpus.episodes.push(ep),
            Err(e) => match on_error {
                OnRecordError::Skip => {
                    log::warn!("skipping corpus record: {e}");
                    corpus.rejected.push(e);
                }
                OnRecordError::Abort => return Err(e.into()),
            },
        }
    }
    corpus.episodes.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    Ok(corpus)
}

fn parse_record(
    line: &str,
    line_no: usize,
    dataset: Dataset,
    seen: &mut HashSet<String>,
) -> Result<EpisodeMeta, RecordError> {
    let fail = |episode_id: String, kind: RecordErrorKind| RecordError {
        line: line_no,
        episode_id,
        kind,
    };
    let ep: EpisodeMeta = serde_json::from_str(line).map_err(|e| {
        let id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("episode_id").and_then(|s| s.as_str()).map(str::to_string))
            .unwrap_or_else(|| "?".to_string());
        fail(id, RecordErrorKind::Malformed(e.to_string()))
    })?;
    if ep.dataset != dataset {
        return Err(fail(
            ep.episode_id.clone(),
            RecordErrorKind::WrongDataset {
                found: ep.dataset,
                expected: dataset,
            },
        ));
    }
    ep.validate().map_err(|e| fail(ep.episode_id.clone(), e.into()))?;
    if !seen.insert(ep.episode_id.clone()) {
        return Err(fail(ep.episode_id.clone(), RecordErrorKind::Duplicate));
    }
    Ok(ep)
}
