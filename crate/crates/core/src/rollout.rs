//! Discrete-event simulation of instruction delivery during a rollout.
//!
//! The policy emits chunks of `H` actions open-loop, one action every `dt`
//! seconds; each chunk is generated just in time, at the start of its first
//! step. The instructor answers after a sampled latency `L`:
//!
//! - `baseline`: no instructor at all.
//! - `sync`: the first chunk waits for the instruction, so the whole rollout
//!   shifts by `L`.
//! - `async`: the policy starts on the bare task prompt; the instruction is
//!   spliced into the prompt at the first chunk boundary at or after `L`.
//!
//! Time is kept in integer nanoseconds so schedule comparisons are exact.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CHUNK_HORIZON: u32 = 8;
/// Calibration value, not a measured control period.
pub const DEFAULT_STEP_DURATION: f64 = 0.085;
pub const ROBOCASA_MAX_STEPS: u32 = 400;
pub const MOLMOSPACES_MAX_STEPS: u32 = 607;

const NANOS_PER_SEC: f64 = 1e9;

pub fn secs_to_ns(s: f64) -> u64 {
    (s * NANOS_PER_SEC).round() as u64
}

pub fn ns_to_secs(ns: u64) -> f64 {
    ns as f64 / NANOS_PER_SEC
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("invalid latency model '{0}'")]
    LatencySpec(String),
    #[error("no traces to summarize")]
    NoTraces,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    Baseline,
    Sync,
    Async,
}

impl FromStr for RolloutMode {
    type Err = RolloutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(RolloutMode::Baseline),
            "sync" => Ok(RolloutMode::Sync),
            "async" => Ok(RolloutMode::Async),
            other => Err(RolloutError::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for RolloutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RolloutMode::Baseline => "baseline",
            RolloutMode::Sync => "sync",
            RolloutMode::Async => "async",
        })
    }
}

/// Instructor response latency in seconds. Samples are never negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatencyModel {
    Constant { seconds: f64 },
    Gaussian { mean: f64, std: f64 },
    Empirical { samples: Vec<f64> },
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), RolloutError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        let valid = match self {
            LatencyModel::Constant { seconds } => ok(*seconds),
            LatencyModel::Gaussian { mean, std } => mean.is_finite() && ok(*std),
            LatencyModel::Empirical { samples } => !samples.is_empty() && samples.iter().all(|&x| ok(x)),
        };
        if valid {
            Ok(())
        } else {
            Err(RolloutError::LatencySpec(self.to_string()))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            LatencyModel::Constant { seconds } => *seconds,
            LatencyModel::Gaussian { mean, std } => {
                let normal = Normal::new(*mean, *std).expect("validated gaussian");
                normal.sample(rng).max(0.0)
            }
            LatencyModel::Empirical { samples } => samples[rng.random_range(0..samples.len())],
        }
    }
}

impl fmt::Display for LatencyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatencyModel::Constant { seconds } => write!(f, "constant:{seconds}"),
            LatencyModel::Gaussian { mean, std } => write!(f, "gaussian:{mean},{std}"),
            LatencyModel::Empirical { samples } => {
                let parts: Vec<String> = samples.iter().map(f64::to_string).collect();
                write!(f, "empirical:{}", parts.join(","))
            }
        }
    }
}

/// `constant:1.86`, `gaussian:1.87,0.05`, `empirical:1.2,1.9,2.4`.
impl FromStr for LatencyModel {
    type Err = RolloutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RolloutError::LatencySpec(s.to_string());
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let model = match (kind, nums.as_slice()) {
            ("constant", [seconds]) => LatencyModel::Constant { seconds: *seconds },
            ("gaussian", [mean, std]) => LatencyModel::Gaussian { mean: *mean, std: *std },
            ("empirical", samples) if !samples.is_empty() => LatencyModel::Empirical {
                samples: samples.to_vec(),
            },
            _ => return Err(bad()),
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub chunk_horizon: u32,
    /// Seconds per executed action.
    pub step_duration: f64,
    pub max_steps: u32,
    pub mode: RolloutMode,
    pub latency: LatencyModel,
    pub rng_seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            chunk_horizon: DEFAULT_CHUNK_HORIZON,
            step_duration: DEFAULT_STEP_DURATION,
            max_steps: ROBOCASA_MAX_STEPS,
            mode: RolloutMode::Async,
            latency: LatencyModel::Gaussian { mean: 1.87, std: 0.05 },
            rng_seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.chunk_horizon == 0 {
            return Err(RolloutError::Config("chunk_horizon must be at least 1".into()));
        }
        if !(self.step_duration.is_finite() && self.step_duration > 0.0) || secs_to_ns(self.step_duration) == 0 {
            return Err(RolloutError::Config("step_duration must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(RolloutError::Config("max_steps must be at least 1".into()));
        }
        self.latency.validate()
    }

    pub fn chunk_duration(&self) -> f64 {
        self.chunk_horizon as f64 * self.step_duration
    }
}

/// The prompt the policy conditions on, and every change to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub active_prompt: String,
    pub history: Vec<PromptChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptChange {
    pub time_ns: u64,
    pub prompt: String,
}

impl PromptState {
    pub fn new(prompt: impl Into<String>, time_ns: u64) -> Self {
        let prompt = prompt.into();
        Self {
            active_prompt: prompt.clone(),
            history: vec![PromptChange { time_ns, prompt }],
        }
    }

    /// Replaces the active prompt. Callers invoke this only at chunk
    /// boundaries; an identical prompt is not recorded again.
    pub fn splice(&mut self, time_ns: u64, prompt: impl Into<String>) {
        let prompt = prompt.into();
        if prompt == self.active_prompt {
            return;
        }
        self.active_prompt = prompt.clone();
        self.history.push(PromptChange { time_ns, prompt });
    }
}

/// Task prompt with the instructor's annotation appended.
pub fn augmented_prompt(task_prompt: &str, instruction: &str) -> String {
    if instruction.is_empty() {
        task_prompt.to_string()
    } else {
        format!("{task_prompt} {instruction}")
    }
}

/// Stand-in for the action policy.
pub trait PolicyStub {
    /// Called when a chunk is generated; `instructed` tells whether the
    /// prompt carried the instructor's annotation.
    fn on_chunk(&mut self, chunk_index: u32, prompt: &str, instructed: bool);
    /// Called for every executed step (1-based). Returns true once the task
    /// succeeded.
    fn on_step(&mut self, step: u32) -> bool;
    /// Whether `on_step` carries a meaningful success signal.
    fn reports_success(&self) -> bool {
        false
    }
}

/// Stand-in for the instructor: produces the annotation text; its latency
/// comes from the rollout's latency model.
pub trait InstructorStub {
    fn instruct(&mut self, task_prompt: &str) -> String;
}

/// Succeeds at a fixed step, regardless of prompt.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    pub success_at: Option<u32>,
}

impl PolicyStub for ScriptedPolicy {
    fn on_chunk(&mut self, _chunk_index: u32, _prompt: &str, _instructed: bool) {}

    fn on_step(&mut self, step: u32) -> bool {
        self.success_at.is_some_and(|s| step >= s)
    }

    fn reports_success(&self) -> bool {
        self.success_at.is_some()
    }
}

/// Succeeds with a probability that depends on whether the instruction had
/// reached the prompt by `decision_step`.
#[derive(Debug, Clone)]
pub struct PromptSensitivePolicy {
    pub p_instructed: f64,
    pub p_uninstructed: f64,
    pub decision_step: u32,
    instructed: bool,
    succeeded: bool,
    rng: ChaCha8Rng,
}

impl PromptSensitivePolicy {
    pub fn new(p_instructed: f64, p_uninstructed: f64, decision_step: u32, seed: u64) -> Self {
        Self {
            p_instructed,
            p_uninstructed,
            decision_step,
            instructed: false,
            succeeded: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl PolicyStub for PromptSensitivePolicy {
    fn on_chunk(&mut self, _chunk_index: u32, _prompt: &str, instructed: bool) {
        self.instructed = instructed;
    }

    fn on_step(&mut self, step: u32) -> bool {
        if step == self.decision_step {
            let p = if self.instructed {
                self.p_instructed
            } else {
                self.p_uninstructed
            };
            self.succeeded = self.rng.random::<f64>() < p;
        }
        self.succeeded
    }

    fn reports_success(&self) -> bool {
        true
    }
}

/// Always returns the same annotation.
#[derive(Debug, Clone)]
pub struct FixedInstructor(pub String);

impl InstructorStub for FixedInstructor {
    fn instruct(&mut self, _task_prompt: &str) -> String {
        self.0.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    InstructionRequested,
    InstructionReady,
    ChunkGenerated,
    InstructionInjected,
    StepExecuted,
    RolloutEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_ns: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

impl TraceEvent {
    pub fn time(&self) -> f64 {
        ns_to_secs(self.time_ns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub mode: RolloutMode,
    pub events: Vec<TraceEvent>,
    /// 1-based; absent when the instruction never reached an executed chunk.
    pub injected_step: Option<u32>,
    /// Seconds. Sync mode reports 0: its delay is charged to wall-clock.
    pub injected_time: Option<f64>,
    /// Sampled instructor latency, quantized to nanoseconds.
    pub latency_ns: Option<u64>,
    pub wall_clock_ns: u64,
    pub success: Option<bool>,
    pub prompts: PromptState,
}

impl RolloutTrace {
    pub fn wall_clock(&self) -> f64 {
        ns_to_secs(self.wall_clock_ns)
    }

    pub fn latency(&self) -> Option<f64> {
        self.latency_ns.map(ns_to_secs)
    }

    /// Execution time of a 1-based step, if it ran.
    pub fn step_time_ns(&self, step: u32) -> Option<u64> {
        self.events
            .iter()
            .find(|e| e.kind == EventKind::StepExecuted && e.step == Some(step))
            .map(|e| e.time_ns)
    }

    pub fn write_events_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    InstructionReady,
    ChunkGenerate(u32),
    StepExecute(u32),
    RolloutEnd,
}

/// Simulates one rollout. The RNG is seeded from `cfg.rng_seed`.
pub fn run_rollout(
    cfg: &RolloutConfig,
    policy: &mut dyn PolicyStub,
    task_prompt: &str,
    instructor: &mut dyn InstructorStub,
) -> Result<RolloutTrace, RolloutError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    Ok(simulate(cfg, policy, task_prompt, instructor, &mut rng))
}

fn simulate(
    cfg: &RolloutConfig,
    policy: &mut dyn PolicyStub,
    task_prompt: &str,
    instructor: &mut dyn InstructorStub,
    rng: &mut ChaCha8Rng,
) -> RolloutTrace {
    let dt = secs_to_ns(cfg.step_duration);
    let h = cfg.chunk_horizon;
    let max_steps = cfg.max_steps;

    let mut events = Vec::new();
    let mut queue: BinaryHeap<Reverse<(u64, Pending)>> = BinaryHeap::new();
    let mut prompts = PromptState::new(task_prompt, 0);
    let mut instruction: Option<String> = None;
    let mut waiting_instruction: Option<String> = None;
    let mut latency_ns = None;
    let mut injected_step = None;
    let mut injected_time = None;
    let mut success = false;
    let mut wall_clock_ns = 0;

    if cfg.mode == RolloutMode::Baseline {
        queue.push(Reverse((0, Pending::ChunkGenerate(0))));
    } else {
        let l = secs_to_ns(cfg.latency.sample(rng));
        latency_ns = Some(l);
        instruction = Some(instructor.instruct(task_prompt));
        events.push(TraceEvent {
            time_ns: 0,
            kind: EventKind::InstructionRequested,
            step: None,
            chunk: None,
            prompt: None,
        });
        queue.push(Reverse((l, Pending::InstructionReady)));
        if cfg.mode == RolloutMode::Async {
            queue.push(Reverse((0, Pending::ChunkGenerate(0))));
        }
    }

    while let Some(Reverse((t, ev))) = queue.pop() {
        match ev {
            Pending::InstructionReady => {
                let text = instruction.take().unwrap_or_default();
                events.push(TraceEvent {
                    time_ns: t,
                    kind: EventKind::InstructionReady,
                    step: None,
                    chunk: None,
                    prompt: Some(text.clone()),
                });
                waiting_instruction = Some(text);
                if cfg.mode == RolloutMode::Sync {
                    queue.push(Reverse((t, Pending::ChunkGenerate(0))));
                }
            }
            Pending::ChunkGenerate(k) => {
                let first_step = k * h + 1;
                if let Some(text) = waiting_instruction.take() {
                    prompts.splice(t, augmented_prompt(task_prompt, &text));
                    injected_step = Some(first_step);
                    injected_time = Some(match cfg.mode {
                        RolloutMode::Sync => 0.0,
                        _ => latency_ns.map_or(0.0, ns_to_secs),
                    });
                    events.push(TraceEvent {
                        time_ns: t,
                        kind: EventKind::InstructionInjected,
                        step: Some(first_step),
                        chunk: Some(k),
                        prompt: Some(prompts.active_prompt.clone()),
                    });
                }
                let instructed = injected_step.is_some();
                policy.on_chunk(k, &prompts.active_prompt, instructed);
                events.push(TraceEvent {
                    time_ns: t,
                    kind: EventKind::ChunkGenerated,
                    step: Some(first_step),
                    chunk: Some(k),
                    prompt: None,
                });
                let last_step = (first_step + h - 1).min(max_steps);
                for s in first_step..=last_step {
                    queue.push(Reverse((t + u64::from(s - first_step) * dt, Pending::StepExecute(s))));
                }
                let next_start = t + u64::from(h) * dt;
                if last_step < max_steps {
                    queue.push(Reverse((next_start, Pending::ChunkGenerate(k + 1))));
                } else {
                    let end = t + u64::from(last_step - first_step + 1) * dt;
                    queue.push(Reverse((end, Pending::RolloutEnd)));
                }
            }
            Pending::StepExecute(s) => {
                success |= policy.on_step(s);
                events.push(TraceEvent {
                    time_ns: t,
                    kind: EventKind::StepExecuted,
                    step: Some(s),
                    chunk: Some((s - 1) / h),
                    prompt: None,
                });
            }
            Pending::RolloutEnd => {
                wall_clock_ns = t;
                events.push(TraceEvent {
                    time_ns: t,
                    kind: EventKind::RolloutEnd,
                    step: None,
                    chunk: None,
                    prompt: None,
                });
            }
        }
    }

    RolloutTrace {
        mode: cfg.mode,
        events,
        injected_step,
        injected_time,
        latency_ns,
        wall_clock_ns,
        success: policy.reports_success().then_some(success),
        prompts,
    }
}

/// Runs `episodes` rollouts with independent, reproducible RNG streams.
pub fn run_episodes<P, I>(
    cfg: &RolloutConfig,
    episodes: usize,
    task_prompt: &str,
    mut make_policy: impl FnMut(usize) -> P,
    mut make_instructor: impl FnMut(usize) -> I,
) -> Result<Vec<RolloutTrace>, RolloutError>
where
    P: PolicyStub,
    I: InstructorStub,
{
    cfg.validate()?;
    (0..episodes)
        .map(|i| {
            let mut rng = episode_rng(cfg.rng_seed, i);
            let mut policy = make_policy(i);
            let mut instructor = make_instructor(i);
            Ok(simulate(cfg, &mut policy, task_prompt, &mut instructor, &mut rng))
        })
        .collect()
}

/// RNG for episode `i` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub traces: usize,
    pub injected: usize,
    pub never_injected: usize,
    pub mean_injected_step: Option<f64>,
    pub median_injected_step: Option<f64>,
    pub mean_injected_time: Option<f64>,
    pub median_injected_time: Option<f64>,
    pub mean_wall_clock: f64,
    pub success_rate: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Injection statistics over the traces that were injected; the rest are
/// counted in `never_injected`.
pub fn summarize_traces(traces: &[RolloutTrace]) -> Result<TraceSummary, RolloutError> {
    if traces.is_empty() {
        return Err(RolloutError::NoTraces);
    }
    let steps: Vec<f64> = traces.iter().filter_map(|t| t.injected_step).map(f64::from).collect();
    let times: Vec<f64> = traces.iter().filter_map(|t| t.injected_time).collect();
    let walls: Vec<f64> = traces.iter().map(RolloutTrace::wall_clock).collect();
    let outcomes: Vec<bool> = traces.iter().filter_map(|t| t.success).collect();
    let success_rate =
        (!outcomes.is_empty()).then(|| outcomes.iter().filter(|&&s| s).count() as f64 / outcomes.len() as f64);
    Ok(TraceSummary {
        traces: traces.len(),
        injected: steps.len(),
        never_injected: traces.len() - steps.len(),
        mean_injected_step: mean(&steps),
        median_injected_step: median(&steps),
        mean_injected_time: mean(&times),
        median_injected_time: median(&times),
        mean_wall_clock: mean(&walls).unwrap_or(0.0),
        success_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: RolloutMode, latency: f64) -> RolloutConfig {
        RolloutConfig {
            mode,
            latency: LatencyModel::Constant { seconds: latency },
            ..RolloutConfig::default()
        }
    }

    fn run(cfg: &RolloutConfig) -> RolloutTrace {
        run_rollout(
            cfg,
            &mut ScriptedPolicy::default(),
            "open the fridge",
            &mut FixedInstructor("The gripper reaches for the handle.".into()),
        )
        .unwrap()
    }

    #[test]
    fn async_injection_at_step_25() {
        let c = cfg(RolloutMode::Async, 1.86);
        assert!((c.chunk_duration() - 0.68).abs() < 1e-12);
        let t = run(&c);
        assert_eq!(t.injected_step, Some(25));
        assert_eq!(t.injected_time, Some(1.86));
        assert_eq!(t.wall_clock_ns, 400 * secs_to_ns(0.085));
        let inj = t
            .events
            .iter()
            .find(|e| e.kind == EventKind::InstructionInjected)
            .unwrap();
        assert_eq!(inj.time_ns, 3 * 8 * secs_to_ns(0.085));
        assert_eq!(t.prompts.history.len(), 2);
        assert_eq!(
            t.prompts.active_prompt,
            "open the fridge The gripper reaches for the handle."
        );
    }

    #[test]
    fn sync_delays_everything_by_latency() {
        let t = run(&cfg(RolloutMode::Sync, 1.86));
        let base = run(&cfg(RolloutMode::Baseline, 0.0));
        assert_eq!(t.injected_step, Some(1));
        assert_eq!(t.injected_time, Some(0.0));
        assert_eq!(t.wall_clock_ns - base.wall_clock_ns, secs_to_ns(1.86));
        assert_eq!(t.step_time_ns(1), Some(secs_to_ns(1.86)));
    }

    #[test]
    fn baseline_schedule() {
        let t = run(&cfg(RolloutMode::Baseline, 0.0));
        let dt = secs_to_ns(0.085);
        assert!(t.events.iter().all(|e| !matches!(
            e.kind,
            EventKind::InstructionRequested | EventKind::InstructionReady | EventKind::InstructionInjected
        )));
        assert_eq!(t.step_time_ns(1), Some(0));
        assert_eq!(t.step_time_ns(17), Some(16 * dt));
        let chunks: Vec<u64> = t
            .events
            .iter()
            .filter(|e| e.kind == EventKind::ChunkGenerated)
            .map(|e| e.time_ns)
            .collect();
        assert_eq!(chunks.len(), 50);
        assert_eq!(chunks[2], 16 * dt);
        assert_eq!(t.wall_clock_ns, 400 * dt);
        assert_eq!(t.injected_step, None);
        assert_eq!(t.prompts.history.len(), 1);
    }

    #[test]
    fn zero_latency_async_injects_first_step() {
        let t = run(&cfg(RolloutMode::Async, 0.0));
        assert_eq!(t.injected_step, Some(1));
    }

    #[test]
    fn boundary_latency_uses_that_chunk() {
        let c = cfg(RolloutMode::Async, 0.68);
        assert_eq!(run(&c).injected_step, Some(9));
    }

    #[test]
    fn late_instruction_is_recorded_but_not_injected() {
        let mut c = cfg(RolloutMode::Async, 50.0);
        c.max_steps = 20;
        let t = run(&c);
        assert_eq!(t.injected_step, None);
        assert_eq!(t.injected_time, None);
        let kinds: Vec<EventKind> = t.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds.last(), Some(&EventKind::InstructionReady));
        assert!(kinds.contains(&EventKind::RolloutEnd));
        assert!(t.events.windows(2).all(|w| w[0].time_ns <= w[1].time_ns));
    }

    #[test]
    fn partial_last_chunk() {
        let mut c = cfg(RolloutMode::Baseline, 0.0);
        c.max_steps = 13;
        let t = run(&c);
        let steps = t.events.iter().filter(|e| e.kind == EventKind::StepExecuted).count();
        assert_eq!(steps, 13);
        assert_eq!(t.wall_clock_ns, 13 * secs_to_ns(0.085));
    }

    #[test]
    fn same_seed_same_trace() {
        let c = RolloutConfig {
            rng_seed: 11,
            ..RolloutConfig::default()
        };
        let a = serde_json::to_string(&run(&c)).unwrap();
        let b = serde_json::to_string(&run(&c)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latency_parsing() {
        assert_eq!(
            "constant:1.86".parse::<LatencyModel>().unwrap(),
            LatencyModel::Constant { seconds: 1.86 }
        );
        assert_eq!(
            "gaussian:1.87,0.05".parse::<LatencyModel>().unwrap(),
            LatencyModel::Gaussian { mean: 1.87, std: 0.05 }
        );
        assert_eq!(
            "empirical:1,2".parse::<LatencyModel>().unwrap(),
            LatencyModel::Empirical {
                samples: vec![1.0, 2.0]
            }
        );
        for bad in [
            "constant",
            "constant:-1",
            "gaussian:1",
            "uniform:1,2",
            "empirical:",
            "constant:x",
        ] {
            assert!(bad.parse::<LatencyModel>().is_err(), "{bad}");
        }
    }

    #[test]
    fn gaussian_samples_are_floored() {
        let m = LatencyModel::Gaussian { mean: -5.0, std: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| m.sample(&mut rng) == 0.0));
    }

    #[test]
    fn config_validation() {
        let d = RolloutConfig::default;
        assert!(RolloutConfig {
            chunk_horizon: 0,
            ..d()
        }
        .validate()
        .is_err());
        assert!(RolloutConfig {
            step_duration: 0.0,
            ..d()
        }
        .validate()
        .is_err());
        assert!(RolloutConfig { max_steps: 0, ..d() }.validate().is_err());
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(summarize_traces(&[]), Err(RolloutError::NoTraces));
        let one = run(&cfg(RolloutMode::Async, 1.86));
        let s = summarize_traces(std::slice::from_ref(&one)).unwrap();
        assert_eq!(s.mean_injected_step, Some(25.0));
        assert_eq!(s.median_injected_step, Some(25.0));
        assert_eq!(s.mean_injected_time, s.median_injected_time);

        let sync: Vec<RolloutTrace> = (0..5).map(|i| run(&cfg(RolloutMode::Sync, i as f64 * 0.3))).collect();
        let s = summarize_traces(&sync).unwrap();
        assert_eq!(s.mean_injected_step, Some(1.0));
        assert_eq!(s.mean_injected_time, Some(0.0));
        assert_eq!(s.never_injected, 0);

        let mut late = cfg(RolloutMode::Async, 100.0);
        late.max_steps = 8;
        let s = summarize_traces(&[one, run(&late)]).unwrap();
        assert_eq!(s.injected, 1);
        assert_eq!(s.never_injected, 1);
        assert_eq!(s.success_rate, None);
    }

    #[test]
    fn prompt_sensitive_policy_uses_injection() {
        let c = cfg(RolloutMode::Async, 0.0);
        let traces = run_episodes(
            &c,
            200,
            "task",
            |i| PromptSensitivePolicy::new(1.0, 0.0, 10, i as u64),
            |_| FixedInstructor("hint".into()),
        )
        .unwrap();
        assert_eq!(summarize_traces(&traces).unwrap().success_rate, Some(1.0));

        let late = cfg(RolloutMode::Async, 5.0);
        let traces = run_episodes(
            &late,
            200,
            "task",
            |i| PromptSensitivePolicy::new(1.0, 0.0, 10, i as u64),
            |_| FixedInstructor("hint".into()),
        )
        .unwrap();
        assert_eq!(summarize_traces(&traces).unwrap().success_rate, Some(0.0));
    }
}
