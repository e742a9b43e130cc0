//! FLOPs and dollar cost of caption generation.
//!
//! A labeling call is charged `2 * P_active * (X_in + X_out)` FLOPs, where
//! `P_active` is the active parameter count of the labeling model. Values are
//! exact products; any rounding happens at display time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub active_params: f64,
    pub input_tokens: f64,
    pub output_tokens: f64,
    /// Dollars per million input tokens.
    pub price_in: f64,
    /// Dollars per million output tokens.
    pub price_out: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            active_params: 3e9,
            input_tokens: 8200.0,
            output_tokens: 150.0,
            price_in: 0.13,
            price_out: 0.52,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostModelError {
    #[error("{field} must be finite and non-negative, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("active_params must be positive")]
    NoParams,
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostModelError> {
        for (field, value) in [
            ("active_params", self.active_params),
            ("input_tokens", self.input_tokens),
            ("output_tokens", self.output_tokens),
            ("price_in", self.price_in),
            ("price_out", self.price_out),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(CostModelError::Negative { field, value });
            }
        }
        if self.active_params == 0.0 {
            return Err(CostModelError::NoParams);
        }
        Ok(())
    }
}

pub fn flops_per_call(cm: &CostModel) -> f64 {
    2.0 * cm.active_params * (cm.input_tokens + cm.output_tokens)
}

pub fn corpus_flops(cm: &CostModel, n_clips: u64, n_aspects: u64) -> f64 {
    n_clips as f64 * n_aspects as f64 * flops_per_call(cm)
}

pub fn dollars_per_call(cm: &CostModel) -> f64 {
    (cm.input_tokens * cm.price_in + cm.output_tokens * cm.price_out) / 1e6
}

pub fn corpus_dollars(cm: &CostModel, n_clips: u64, n_aspects: u64) -> f64 {
    n_clips as f64 * n_aspects as f64 * dollars_per_call(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputePoint {
    pub train_flops: f64,
    pub annotated: bool,
}

/// Total compute per point: annotated runs pay the caption corpus once, up
/// front; unannotated runs pass through.
pub fn compute_axis(points: &[ComputePoint], cm: &CostModel, n_clips: u64, n_aspects: u64) -> Vec<f64> {
    let offset = corpus_flops(cm, n_clips, n_aspects);
    points
        .iter()
        .map(|p| {
            if p.annotated {
                p.train_flops + offset
            } else {
                p.train_flops
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostSummary {
    pub flops_per_call: f64,
    pub corpus_flops: f64,
    pub dollars_per_call: f64,
    pub corpus_dollars: f64,
}

pub fn summarize(cm: &CostModel, n_clips: u64, n_aspects: u64) -> CostSummary {
    CostSummary {
        flops_per_call: flops_per_call(cm),
        corpus_flops: corpus_flops(cm, n_clips, n_aspects),
        dollars_per_call: dollars_per_call(cm),
        corpus_dollars: corpus_dollars(cm, n_clips, n_aspects),
    }
}
