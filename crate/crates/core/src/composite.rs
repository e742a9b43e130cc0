//! Subgoal-driven prompting for composite tasks.
//!
//! A composite task is a sequence of atomic phases. In `fix` mode the policy
//! sees one composite description for the whole episode. In the dynamic
//! modes it sees the current phase's atomic instruction; the phase advances
//! when the policy's done-flag exceeds a threshold and the phase's lenient
//! trigger fires at the same step, and the new prompt takes effect at the
//! next action-chunk boundary.
//!
//! Milestones (each phase's strict checker) are tracked in order in every
//! mode, so phase-k success rates are comparable across modes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::{augmented_prompt, InstructorStub, DEFAULT_CHUNK_HORIZON};

pub const DEFAULT_DONE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MAX_STEPS: u32 = 1200;
pub const DEFAULT_EPISODES: usize = 20;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("task '{task}': {message}")]
    InvalidSpec { task: String, message: String },
    #[error("task '{task}': predicate '{predicate}' is not known to the environment")]
    UnknownPredicate { task: String, predicate: String },
    #[error("dynamic_instructor mode needs an instructor")]
    MissingInstructor,
    #[error("done threshold must be in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no episodes for task '{task}' in mode {mode}")]
    EmptyCell { task: String, mode: PromptMode },
    #[error("no results to aggregate")]
    NoResults,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub atomic_instruction: String,
    pub lenient_trigger: String,
    pub strict_checker: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeTaskSpec {
    pub task_id: String,
    pub composite_description: String,
    pub phases: Vec<PhaseSpec>,
    /// End-of-task checker; defaults to the last phase's strict checker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_checker: Option<String>,
}

impl CompositeTaskSpec {
    pub fn success_checker(&self) -> &str {
        match &self.success_checker {
            Some(id) => id,
            None => &self.phases.last().expect("validated spec has phases").strict_checker,
        }
    }

    pub fn predicate_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self
            .phases
            .iter()
            .flat_map(|p| [p.lenient_trigger.as_str(), p.strict_checker.as_str()])
            .collect();
        if let Some(s) = &self.success_checker {
            ids.push(s);
        }
        ids
    }

    pub fn validate(&self) -> Result<(), CompositeError> {
        let invalid = |message: &str| CompositeError::InvalidSpec {
            task: self.task_id.clone(),
            message: message.to_string(),
        };
        if self.phases.len() < 2 {
            return Err(invalid("a composite task needs at least two phases"));
        }
        if self.composite_description.trim().is_empty() {
            return Err(invalid("composite_description is empty"));
        }
        if self.phases.iter().any(|p| p.atomic_instruction.trim().is_empty()) {
            return Err(invalid("a phase has an empty atomic instruction"));
        }
        Ok(())
    }

    /// Validates the spec and checks every predicate against the env.
    pub fn validate_against(&self, env: &dyn EnvStub) -> Result<(), CompositeError> {
        self.validate()?;
        for id in self.predicate_ids() {
            if !env.has_predicate(id) {
                return Err(CompositeError::UnknownPredicate {
                    task: self.task_id.clone(),
                    predicate: id.to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Fix,
    DynamicGt,
    DynamicInstructor,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Fix, PromptMode::DynamicGt, PromptMode::DynamicInstructor];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Fix => "fix",
            PromptMode::DynamicGt => "dynamic-gt",
            PromptMode::DynamicInstructor => "dynamic-instructor",
        }
    }

    pub fn is_dynamic(self) -> bool {
        self != PromptMode::Fix
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('-', "_") == s)
            .ok_or_else(|| format!("unknown prompt mode '{s}' (expected fix, dynamic-gt or dynamic-instructor)"))
    }
}

/// Simulator stand-in: advances under a prompt and answers predicate queries.
pub trait EnvStub {
    fn reset(&mut self, seed: u64);
    /// Executes 1-based `step` with the policy conditioned on `prompt`.
    fn step(&mut self, step: u32, prompt: &str);
    fn has_predicate(&self, id: &str) -> bool;
    /// Value after the most recent step. Unknown ids read as false.
    fn predicate(&self, id: &str) -> bool;
}

/// Source of the policy's done-flag.
pub trait DoneFlag {
    fn done_flag(&mut self, step: u32, prompt: &str) -> f64;
}

/// Piecewise-constant done-flag: each `(from_step, value)` holds until the
/// next entry. Before the first entry the flag is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneFlagSchedule(pub Vec<(u32, f64)>);

impl DoneFlagSchedule {
    pub fn constant(value: f64) -> Self {
        Self(vec![(1, value)])
    }

    pub fn value_at(&self, step: u32) -> f64 {
        self.0
            .iter()
            .filter(|(from, _)| *from <= step)
            .max_by_key(|(from, _)| *from)
            .map_or(0.0, |(_, v)| *v)
    }
}

impl Default for DoneFlagSchedule {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

impl DoneFlag for DoneFlagSchedule {
    fn done_flag(&mut self, step: u32, _prompt: &str) -> f64 {
        self.value_at(step)
    }
}

/// Predicates that hold from a fixed step onward, independent of prompts.
/// `None` never fires.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEnv {
    pub predicates: BTreeMap<String, Option<u32>>,
    #[serde(skip)]
    current_step: u32,
}

impl ScriptedEnv {
    pub fn new<I, S>(predicates: I) -> Self
    where
        I: IntoIterator<Item = (S, Option<u32>)>,
        S: Into<String>,
    {
        Self {
            predicates: predicates.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            current_step: 0,
        }
    }
}

impl EnvStub for ScriptedEnv {
    fn reset(&mut self, _seed: u64) {
        self.current_step = 0;
    }

    fn step(&mut self, step: u32, _prompt: &str) {
        self.current_step = step;
    }

    fn has_predicate(&self, id: &str) -> bool {
        self.predicates.contains_key(id)
    }

    fn predicate(&self, id: &str) -> bool {
        matches!(self.predicates.get(id), Some(Some(from)) if self.current_step >= *from)
    }
}

/// How far one episode's policy gets under each kind of prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeCapability {
    /// Phases the policy can complete when shown their atomic instruction.
    pub atomic_depth: usize,
    /// Phases the policy can complete under the composite description.
    pub composite_depth: usize,
}

/// Prompt-sensitive environment: phase `k` accumulates one unit of work per
/// step while the prompt is one the policy can act on, and completes after
/// `steps_per_phase[k]` units. A completed phase fires both its lenient
/// trigger and its strict checker; the success checker fires once every
/// phase is complete.
#[derive(Debug, Clone)]
pub struct WorkEnv {
    spec: CompositeTaskSpec,
    steps_per_phase: Vec<u32>,
    capability: EpisodeCapability,
    phase: usize,
    work: u32,
}

impl WorkEnv {
    pub fn new(spec: &CompositeTaskSpec, steps_per_phase: Vec<u32>, capability: EpisodeCapability) -> Self {
        Self {
            spec: spec.clone(),
            steps_per_phase,
            capability,
            phase: 0,
            work: 0,
        }
    }

    pub fn completed_phases(&self) -> usize {
        self.phase
    }

    fn understood(&self, prompt: &str) -> bool {
        let k = self.phase;
        if prompt == self.spec.composite_description {
            k < self.capability.composite_depth
        } else if prompt.starts_with(&self.spec.phases[k].atomic_instruction) {
            k < self.capability.atomic_depth
        } else {
            false
        }
    }
}

impl EnvStub for WorkEnv {
    fn reset(&mut self, _seed: u64) {
        self.phase = 0;
        self.work = 0;
    }

    fn step(&mut self, _step: u32, prompt: &str) {
        if self.phase >= self.spec.phases.len() || !self.understood(prompt) {
            return;
        }
        self.work += 1;
        let needed = self.steps_per_phase.get(self.phase).copied().unwrap_or(1).max(1);
        if self.work >= needed {
            self.phase += 1;
            self.work = 0;
        }
    }

    fn has_predicate(&self, id: &str) -> bool {
        self.spec.predicate_ids().contains(&id)
    }

    fn predicate(&self, id: &str) -> bool {
        if self.spec.success_checker() == id && self.phase == self.spec.phases.len() {
            return true;
        }
        self.spec.phases[..self.phase]
            .iter()
            .any(|p| p.lenient_trigger == id || p.strict_checker == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeConfig {
    pub done_threshold: f64,
    pub max_steps: u32,
    pub chunk_horizon: u32,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self {
            done_threshold: DEFAULT_DONE_THRESHOLD,
            max_steps: DEFAULT_MAX_STEPS,
            chunk_horizon: DEFAULT_CHUNK_HORIZON,
        }
    }
}

impl CompositeConfig {
    pub fn validate(&self) -> Result<(), CompositeError> {
        if !(self.done_threshold > 0.0 && self.done_threshold < 1.0) {
            return Err(CompositeError::BadThreshold(self.done_threshold));
        }
        if self.max_steps == 0 || self.chunk_horizon == 0 {
            return Err(CompositeError::Config(
                "max_steps and chunk_horizon must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub phase_index: usize,
    pub reached: bool,
    pub reached_step: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    /// First step executed under this prompt.
    pub step: u32,
    pub phase: usize,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub mode: PromptMode,
    pub seed: u64,
    pub phase_outcomes: Vec<PhaseOutcome>,
    pub full_success: bool,
    pub steps_run: u32,
    pub prompt_history: Vec<PromptEntry>,
}

impl EpisodeResult {
    pub fn phase_reached(&self, k: usize) -> bool {
        self.phase_outcomes.get(k).is_some_and(|p| p.reached)
    }
}

fn phase_prompt(
    spec: &CompositeTaskSpec,
    mode: PromptMode,
    phase: usize,
    instructor: &mut Option<&mut dyn InstructorStub>,
) -> String {
    let atomic = &spec.phases[phase].atomic_instruction;
    match (mode, instructor) {
        (PromptMode::DynamicInstructor, Some(inst)) => augmented_prompt(atomic, &inst.instruct(atomic)),
        _ => atomic.clone(),
    }
}

/// Runs one episode. The env is reset with `seed`, so runs in different
/// modes with the same seed are paired.
pub fn run_composite_episode(
    spec: &CompositeTaskSpec,
    mode: PromptMode,
    cfg: &CompositeConfig,
    env: &mut dyn EnvStub,
    policy: &mut dyn DoneFlag,
    mut instructor: Option<&mut dyn InstructorStub>,
    seed: u64,
) -> Result<EpisodeResult, CompositeError> {
    cfg.validate()?;
    spec.validate_against(env)?;
    if mode == PromptMode::DynamicInstructor && instructor.is_none() {
        return Err(CompositeError::MissingInstructor);
    }
    env.reset(seed);

    let n = spec.phases.len();
    let mut phase = 0;
    let mut prompt = if mode.is_dynamic() {
        phase_prompt(spec, mode, 0, &mut instructor)
    } else {
        spec.composite_description.clone()
    };
    let mut history = vec![PromptEntry {
        step: 1,
        phase: 0,
        prompt: prompt.clone(),
    }];
    let mut outcomes: Vec<PhaseOutcome> = (0..n)
        .map(|phase_index| PhaseOutcome {
            phase_index,
            reached: false,
            reached_step: None,
        })
        .collect();
    let mut next_milestone = 0;
    let mut swap_pending = false;
    let mut full_success = false;
    let mut steps_run = 0;

    for step in 1..=cfg.max_steps {
        let chunk_start = (step - 1) % cfg.chunk_horizon == 0;
        if swap_pending && chunk_start {
            phase += 1;
            prompt = phase_prompt(spec, mode, phase, &mut instructor);
            history.push(PromptEntry {
                step,
                phase,
                prompt: prompt.clone(),
            });
            swap_pending = false;
        }

        env.step(step, &prompt);
        let done = policy.done_flag(step, &prompt);
        steps_run = step;

        while next_milestone < n && env.predicate(&spec.phases[next_milestone].strict_checker) {
            outcomes[next_milestone].reached = true;
            outcomes[next_milestone].reached_step = Some(step);
            next_milestone += 1;
        }
        if env.predicate(spec.success_checker()) {
            full_success = true;
            break;
        }
        if mode.is_dynamic()
            && !swap_pending
            && phase + 1 < n
            && done > cfg.done_threshold
            && env.predicate(&spec.phases[phase].lenient_trigger)
        {
            swap_pending = true;
        }
    }

    Ok(EpisodeResult {
        task_id: spec.task_id.clone(),
        mode,
        seed,
        phase_outcomes: outcomes,
        full_success,
        steps_run,
        prompt_history: history,
    })
}

/// Per-mode means over tasks of per-task success fractions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositeRow {
    pub mode: PromptMode,
    pub tasks: usize,
    pub phase1_sr: f64,
    pub phase2_sr: f64,
    pub full_sr: f64,
}

/// Groups episode results by mode and task, then averages per-task
/// fractions with equal weight per task.
pub fn aggregate_composite(results: &[EpisodeResult]) -> Result<Vec<CompositeRow>, CompositeError> {
    if results.is_empty() {
        return Err(CompositeError::NoResults);
    }
    let mut cells: BTreeMap<PromptMode, BTreeMap<&str, Vec<&EpisodeResult>>> = BTreeMap::new();
    for r in results {
        cells
            .entry(r.mode)
            .or_default()
            .entry(r.task_id.as_str())
            .or_default()
            .push(r);
    }
    aggregate_cells(&cells)
}

fn aggregate_cells(
    cells: &BTreeMap<PromptMode, BTreeMap<&str, Vec<&EpisodeResult>>>,
) -> Result<Vec<CompositeRow>, CompositeError> {
    let mut rows = Vec::new();
    for (&mode, tasks) in cells {
        let mut sums = [0.0; 3];
        for (task, eps) in tasks {
            if eps.is_empty() {
                return Err(CompositeError::EmptyCell {
                    task: task.to_string(),
                    mode,
                });
            }
            let frac =
                |f: &dyn Fn(&EpisodeResult) -> bool| eps.iter().filter(|e| f(e)).count() as f64 / eps.len() as f64;
            sums[0] += frac(&|e| e.phase_reached(0));
            sums[1] += frac(&|e| e.phase_reached(1));
            sums[2] += frac(&|e| e.full_success);
        }
        let n = tasks.len() as f64;
        rows.push(CompositeRow {
            mode,
            tasks: tasks.len(),
            phase1_sr: sums[0] / n,
            phase2_sr: sums[1] / n,
            full_sr: sums[2] / n,
        });
    }
    Ok(rows)
}

/// Environment description inside a suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvScript {
    Scripted {
        predicates: BTreeMap<String, Option<u32>>,
    },
    Work {
        steps_per_phase: Vec<u32>,
        /// Episode `i` uses entry `i % len`.
        episodes: Vec<EpisodeCapability>,
    },
}

impl EnvScript {
    pub fn build(&self, spec: &CompositeTaskSpec, episode: usize) -> Box<dyn EnvStub> {
        match self {
            EnvScript::Scripted { predicates } => Box::new(ScriptedEnv::new(predicates.clone())),
            EnvScript::Work {
                steps_per_phase,
                episodes,
            } => {
                let cap = if episodes.is_empty() {
                    EpisodeCapability {
                        atomic_depth: 0,
                        composite_depth: 0,
                    }
                } else {
                    episodes[episode % episodes.len()]
                };
                Box::new(WorkEnv::new(spec, steps_per_phase.clone(), cap))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteTask {
    pub spec: CompositeTaskSpec,
    pub env: EnvScript,
    #[serde(default)]
    pub done_flag: DoneFlagSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeSuite {
    pub tasks: Vec<SuiteTask>,
}

impl CompositeSuite {
    pub fn from_json(text: &str) -> Result<Self, CompositeError> {
        let suite: CompositeSuite = serde_json::from_str(text)?;
        for t in &suite.tasks {
            t.spec.validate_against(t.env.build(&t.spec, 0).as_ref())?;
        }
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self, CompositeError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }
}

/// Runs every task of the suite for `episodes` episodes in each mode, using
/// seed `base_seed + episode` for all modes.
pub fn run_suite(
    suite: &CompositeSuite,
    modes: &[PromptMode],
    cfg: &CompositeConfig,
    episodes: usize,
    base_seed: u64,
    make_instructor: &mut dyn FnMut() -> Box<dyn InstructorStub>,
) -> Result<Vec<EpisodeResult>, CompositeError> {
    let mut out = Vec::new();
    for &mode in modes {
        for task in &suite.tasks {
            for e in 0..episodes {
                let mut env = task.env.build(&task.spec, e);
                let mut flag = task.done_flag.clone();
                let mut inst = make_instructor();
                let instructor: Option<&mut dyn InstructorStub> =
                    (mode == PromptMode::DynamicInstructor).then_some(inst.as_mut());
                out.push(run_composite_episode(
                    &task.spec,
                    mode,
                    cfg,
                    env.as_mut(),
                    &mut flag,
                    instructor,
                    base_seed + e as u64,
                )?);
            }
        }
    }
    Ok(out)
}

const ILLUSTRATIVE_SPECS: &str = include_str!("../data/composite_specs.json");

/// Three example composite tasks, PrepareCoffee first.
pub fn illustrative_specs() -> Vec<CompositeTaskSpec> {
    serde_json::from_str(ILLUSTRATIVE_SPECS).expect("bundled composite specs parse")
}

/// Target rates, in percent, for a constructed suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateTargets {
    pub phase1: usize,
    pub phase2: usize,
    pub full: usize,
}

fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

/// A suite of `n_tasks` three-phase tasks with `episodes` work-env episodes
/// each, whose pooled outcomes hit `dynamic` under dynamic prompting and
/// `fix` under the composite description. Targets are percentages of all
/// `n_tasks * episodes` episodes and must be multiples of
/// `100 / (n_tasks * episodes)`.
pub fn constructed_suite(n_tasks: usize, episodes: usize, dynamic: RateTargets, fix: RateTargets) -> CompositeSuite {
    let total = n_tasks * episodes;
    let counts = |t: RateTargets| {
        [t.phase1, t.phase2, t.full].map(|pct| {
            assert!(
                (pct * total).is_multiple_of(100),
                "{pct}% is not representable over {total} episodes"
            );
            split_even(pct * total / 100, n_tasks)
        })
    };
    let dyn_counts = counts(dynamic);
    let fix_counts = counts(fix);
    let depth = |c: &[Vec<usize>; 3], task: usize, e: usize| {
        if e < c[2][task] {
            3
        } else if e < c[1][task] {
            2
        } else if e < c[0][task] {
            1
        } else {
            0
        }
    };

    let base = illustrative_specs();
    let prepare_coffee = base[0].clone();
    let tasks = (0..n_tasks)
        .map(|t| {
            let mut spec = prepare_coffee.clone();
            if t > 0 {
                spec.task_id = format!("{}_{t}", prepare_coffee.task_id);
            }
            let episodes = (0..episodes)
                .map(|e| EpisodeCapability {
                    atomic_depth: depth(&dyn_counts, t, e),
                    composite_depth: depth(&fix_counts, t, e),
                })
                .collect();
            SuiteTask {
                spec,
                env: EnvScript::Work {
                    steps_per_phase: vec![96, 120, 80],
                    episodes,
                },
                done_flag: DoneFlagSchedule::default(),
            }
        })
        .collect();
    CompositeSuite { tasks }
}
