//! Dense multi-aspect annotation toolkit.
//!
//! The crate covers the non-training machinery around multi-aspect dense
//! annotation of robot demonstrations:
//!
//! - [`ingestion`]: episode metadata loading and single-primitive segment splitting.
//! - [`annotation`]: frame sampling, per-aspect prompt construction, response
//!   validation and the checkpointed batch runner.
//! - [`vlm`]: OpenAI-compatible chat-completions transport, deterministic mock,
//!   retries and rate limiting.
//! - [`instructor`]: reward table and reward-weighted SFT target sampling.
//! - [`rollout`]: discrete-event simulation of sync/async instruction delivery
//!   at action-chunk boundaries.
//! - [`composite`]: subgoal-driven prompt switching for composite tasks.
//! - [`accounting`]: FLOPs and dollar cost of annotation generation.
//! - [`aggregation`]: results matrices, oracle rows, family summaries.

pub mod accounting;
pub mod aggregation;
pub mod annotation;
pub mod aspect;
pub mod clock;
pub mod composite;
pub mod ingestion;
pub mod instructor;
pub mod prompts;
pub mod rollout;
pub mod vlm;

pub use aspect::AspectKind;
