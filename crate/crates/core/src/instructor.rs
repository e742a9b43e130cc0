//! Training data for the instructor model.
//!
//! The reward table holds, per task, the policy's success rate when
//! conditioned on each fixed aspect plus the no-annotation baseline. SFT
//! targets are drawn from a temperature softmax over the top-k aspects of a
//! task; tasks where every aspect does strictly worse than the baseline get an
//! empty target, which teaches the instructor to abstain.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregationError, ResultsMatrix};
use crate::annotation::AnnotationRecord;
use crate::aspect::AspectKind;
use crate::ingestion::parse_segment_id;

pub const DEFAULT_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_TOP_K: usize = 3;
pub const FRAMES_PER_EXAMPLE: usize = 3;
pub const BASELINE_ROW: &str = "baseline";

#[derive(Debug, Error)]
pub enum InstructorError {
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("missing success rate for task '{task}', condition '{condition}'")]
    MissingCell { task: String, condition: String },
    #[error("success rate {value} for task '{task}' is outside [0, 1]")]
    OutOfRange { task: String, value: f64 },
    #[error("invalid reward table: {0}")]
    InvalidTable(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("top_k must be in 1..=4, got {0}")]
    BadTopK(usize),
    #[error("episode {episode_id}: {message}")]
    InvalidEpisode { episode_id: String, message: String },
    #[error("no episodes to draw from")]
    NoEpisodes,
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-task success rates. `w[t][k]` is indexed by [`AspectKind::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    tasks: Vec<String>,
    w: Vec<[f64; 4]>,
    baseline: Vec<f64>,
}

/// On-disk layout: aspects name the column order of `w`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardTableFile {
    tasks: Vec<String>,
    aspects: Vec<AspectKind>,
    w: Vec<Vec<f64>>,
    baseline: Vec<f64>,
}

impl RewardTable {
    pub fn new(tasks: Vec<String>, w: Vec<[f64; 4]>, baseline: Vec<f64>) -> Result<Self, InstructorError> {
        if tasks.len() != w.len() || tasks.len() != baseline.len() {
            return Err(InstructorError::InvalidTable(format!(
                "{} tasks, {} reward rows, {} baselines",
                tasks.len(),
                w.len(),
                baseline.len()
            )));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].contains(t) {
                return Err(InstructorError::InvalidTable(format!("duplicate task '{t}'")));
            }
            for &value in w[i].iter().chain(std::iter::once(&baseline[i])) {
                if !(0.0..=1.0).contains(&value) {
                    return Err(InstructorError::OutOfRange { task: t.clone(), value });
                }
            }
        }
        Ok(Self { tasks, w, baseline })
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    fn task_index(&self, task: &str) -> Result<usize, InstructorError> {
        self.tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| InstructorError::UnknownTask(task.to_string()))
    }

    pub fn rewards(&self, task: &str) -> Result<[f64; 4], InstructorError> {
        Ok(self.w[self.task_index(task)?])
    }

    pub fn baseline(&self, task: &str) -> Result<f64, InstructorError> {
        Ok(self.baseline[self.task_index(task)?])
    }

    pub fn from_json(text: &str) -> Result<Self, InstructorError> {
        let file: RewardTableFile = serde_json::from_str(text)?;
        let mut order = file.aspects.clone();
        order.sort();
        if order != AspectKind::ALL {
            return Err(InstructorError::InvalidTable(
                "aspects must list each of the four aspects exactly once".into(),
            ));
        }
        let mut w = Vec::with_capacity(file.w.len());
        for (i, row) in file.w.iter().enumerate() {
            if row.len() != 4 {
                return Err(InstructorError::InvalidTable(format!(
                    "reward row {i} has {} entries, expected 4",
                    row.len()
                )));
            }
            let mut canon = [0.0; 4];
            for (a, v) in file.aspects.iter().zip(row) {
                canon[a.index()] = *v;
            }
            w.push(canon);
        }
        Self::new(file.tasks, w, file.baseline)
    }

    pub fn to_json(&self) -> String {
        let file = RewardTableFile {
            tasks: self.tasks.clone(),
            aspects: AspectKind::ALL.to_vec(),
            w: self.w.iter().map(|r| r.to_vec()).collect(),
            baseline: self.baseline.clone(),
        };
        serde_json::to_string_pretty(&file).expect("reward table serializes")
    }

    pub fn load(path: &Path) -> Result<Self, InstructorError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), InstructorError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// Reads the baseline and four aspect rows of an evaluation matrix; every
/// column is a task.
pub fn build_reward_table(eval: &ResultsMatrix) -> Result<RewardTable, InstructorError> {
    let mut w = Vec::with_capacity(eval.columns().len());
    let mut baseline = Vec::with_capacity(eval.columns().len());
    let cell = |condition: &str, task: &str| -> Result<f64, InstructorError> {
        match eval.get(condition, task) {
            Ok(Some(v)) => Ok(v),
            Ok(None) | Err(AggregationError::UnknownRow(_)) => Err(InstructorError::MissingCell {
                task: task.to_string(),
                condition: condition.to_string(),
            }),
            Err(e) => Err(e.into()),
        }
    };
    for task in eval.columns() {
        let mut row = [0.0; 4];
        for a in AspectKind::ALL {
            row[a.index()] = cell(a.as_str(), task)?;
        }
        w.push(row);
        baseline.push(cell(BASELINE_ROW, task)?);
    }
    RewardTable::new(eval.columns().to_vec(), w, baseline)
}

/// Probability per aspect plus the abstain probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AspectDistribution {
    pub aspects: [f64; 4],
    pub abstain: f64,
}

impl AspectDistribution {
    pub fn prob(&self, target: Option<AspectKind>) -> f64 {
        match target {
            Some(a) => self.aspects[a.index()],
            None => self.abstain,
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Option<AspectKind> {
        let weights: Vec<f64> = self.aspects.iter().copied().chain([self.abstain]).collect();
        let idx = WeightedIndex::new(&weights)
            .expect("distribution has positive mass")
            .sample(rng);
        AspectKind::ALL.get(idx).copied()
    }
}

fn abstains(w: &[f64; 4], baseline: f64) -> bool {
    w.iter().all(|&x| x < baseline)
}

/// Aspects ordered by descending reward; equal rewards keep listing order.
fn ranked(w: &[f64; 4]) -> [AspectKind; 4] {
    let mut order = AspectKind::ALL;
    order.sort_by(|a, b| w[b.index()].total_cmp(&w[a.index()]));
    order
}

pub fn aspect_distribution(
    rt: &RewardTable,
    task: &str,
    temperature: f64,
    top_k: usize,
) -> Result<AspectDistribution, InstructorError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(InstructorError::BadTemperature(temperature));
    }
    if !(1..=4).contains(&top_k) {
        return Err(InstructorError::BadTopK(top_k));
    }
    let w = rt.rewards(task)?;
    if abstains(&w, rt.baseline(task)?) {
        return Ok(AspectDistribution {
            aspects: [0.0; 4],
            abstain: 1.0,
        });
    }
    let support = &ranked(&w)[..top_k];
    let max = w[support[0].index()];
    let mut aspects = [0.0; 4];
    for a in support {
        aspects[a.index()] = ((w[a.index()] - max) / temperature).exp();
    }
    let z: f64 = aspects.iter().sum();
    for p in &mut aspects {
        *p /= z;
    }
    Ok(AspectDistribution { aspects, abstain: 0.0 })
}

/// The single highest-reward aspect, or `None` when the task abstains.
pub fn top1_target(rt: &RewardTable, task: &str) -> Result<Option<AspectKind>, InstructorError> {
    let w = rt.rewards(task)?;
    if abstains(&w, rt.baseline(task)?) {
        return Ok(None);
    }
    Ok(Some(ranked(&w)[0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetStrategy {
    Softmax,
    Top1,
}

impl std::str::FromStr for TargetStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(TargetStrategy::Softmax),
            "top1" => Ok(TargetStrategy::Top1),
            other => Err(format!("unknown strategy '{other}' (expected softmax or top1)")),
        }
    }
}

/// An episode eligible for SFT: its task, description and the three initial
/// camera frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftEpisode {
    pub episode_id: String,
    pub task_id: String,
    pub task_description: String,
    pub frame_refs: Vec<String>,
}

impl SftEpisode {
    pub fn validate(&self) -> Result<(), InstructorError> {
        if self.frame_refs.len() != FRAMES_PER_EXAMPLE {
            return Err(InstructorError::InvalidEpisode {
                episode_id: self.episode_id.clone(),
                message: format!(
                    "expected {FRAMES_PER_EXAMPLE} frame refs, got {}",
                    self.frame_refs.len()
                ),
            });
        }
        Ok(())
    }
}

pub fn read_episodes<R: BufRead>(reader: R) -> Result<Vec<SftEpisode>, InstructorError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: SftEpisode = serde_json::from_str(&line).map_err(|e| InstructorError::InvalidEpisode {
            episode_id: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        ep.validate()?;
        out.push(ep);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub task_id: String,
    pub frame_refs: Vec<String>,
    pub task_description: String,
    /// Empty on abstention.
    pub target_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_aspect: Option<AspectKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedExample {
    pub index: usize,
    pub episode_id: String,
    pub aspect: AspectKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SftDataset {
    pub examples: Vec<SftExample>,
    pub skipped: Vec<SkippedExample>,
}

impl SftDataset {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

/// Caption lookup: per episode, per aspect, the caption of its earliest
/// segment.
#[derive(Debug, Clone, Default)]
pub struct CaptionIndex {
    by_episode: HashMap<String, HashMap<AspectKind, (usize, String)>>,
}

impl CaptionIndex {
    pub fn new(records: &[AnnotationRecord]) -> Self {
        let mut by_episode: HashMap<String, HashMap<AspectKind, (usize, String)>> = HashMap::new();
        for rec in records {
            let Some((episode, idx)) = parse_segment_id(&rec.segment_id) else {
                log::warn!("ignoring record with malformed segment id '{}'", rec.segment_id);
                continue;
            };
            let slot = by_episode.entry(episode.to_string()).or_default();
            match slot.get(&rec.aspect) {
                Some((have, _)) if *have <= idx => {}
                _ => {
                    slot.insert(rec.aspect, (idx, rec.caption.clone()));
                }
            }
        }
        Self { by_episode }
    }

    pub fn caption(&self, episode_id: &str, aspect: AspectKind) -> Option<&str> {
        self.by_episode.get(episode_id)?.get(&aspect).map(|(_, c)| c.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub seed: u64,
    pub n_examples: usize,
    pub strategy: TargetStrategy,
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_examples: 3200,
            strategy: TargetStrategy::Softmax,
            temperature: DEFAULT_TEMPERATURE,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// Draws `n_examples` targets, cycling through `episodes` in order. Missing
/// captions skip the example and are reported in `skipped`.
pub fn sample_sft_dataset(
    rt: &RewardTable,
    captions: &CaptionIndex,
    episodes: &[SftEpisode],
    params: &SamplingParams,
) -> Result<SftDataset, InstructorError> {
    if params.n_examples > 0 && episodes.is_empty() {
        return Err(InstructorError::NoEpisodes);
    }
    let mut dists = HashMap::new();
    for ep in episodes {
        ep.validate()?;
        if !dists.contains_key(ep.task_id.as_str()) {
            let d = aspect_distribution(rt, &ep.task_id, params.temperature, params.top_k)?;
            let top1 = top1_target(rt, &ep.task_id)?;
            dists.insert(ep.task_id.as_str(), (d, top1));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut out = SftDataset::default();
    for index in 0..params.n_examples {
        let ep = &episodes[index % episodes.len()];
        let (dist, top1) = &dists[ep.task_id.as_str()];
        let target = match params.strategy {
            TargetStrategy::Softmax => dist.sample(&mut rng),
            TargetStrategy::Top1 => *top1,
        };
        let target_caption = match target {
            None => String::new(),
            Some(aspect) => match captions.caption(&ep.episode_id, aspect) {
                Some(c) => c.to_string(),
                None => {
                    out.skipped.push(SkippedExample {
                        index,
                        episode_id: ep.episode_id.clone(),
                        aspect,
                    });
                    continue;
                }
            },
        };
        out.examples.push(SftExample {
            task_id: ep.task_id.clone(),
            frame_refs: ep.frame_refs.clone(),
            task_description: ep.task_description.clone(),
            target_caption,
            target_aspect: target,
        });
    }
    Ok(out)
}
