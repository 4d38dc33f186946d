//! Rule-based rewards for generated transcripts.
//!
//! Three signals, all derived from the reference transcript with no learned
//! reward model: negated WER, exact match, and negated total edit errors.
//! A multiplicative scale factor is the "reward scaling" knob; note that
//! under std-normalized advantages a positive scale is a no-op.

use crate::align::{align, wer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward scale must be > 0, got {0}")]
    NonPositiveScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// `-(Sub + Del + Ins) / N`: length-normalized, so the same error
    /// pattern at twice the length scores the same.
    Wer,
    /// 1 if the hypothesis equals the reference, else 0.
    ExactMatch,
    /// `-(Sub + Del + Ins)`: un-normalized edit distance, concentrating on
    /// drastically wrong samples.
    TotalErrors,
}

impl RewardKind {
    pub fn parse(s: &str) -> Option<RewardKind> {
        match s {
            "wer" => Some(RewardKind::Wer),
            "em" => Some(RewardKind::ExactMatch),
            "ed" => Some(RewardKind::TotalErrors),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RewardKind::Wer => "wer",
            RewardKind::ExactMatch => "em",
            RewardKind::TotalErrors => "ed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub scale: f64,
}

impl RewardSpec {
    pub fn new(kind: RewardKind, scale: f64) -> Result<Self, RewardError> {
        if !(scale > 0.0) {
            return Err(RewardError::NonPositiveScale(scale));
        }
        Ok(RewardSpec { kind, scale })
    }

    pub fn with_unit_scale(kind: RewardKind) -> Self {
        RewardSpec { kind, scale: 1.0 }
    }
}

/// Scores `hyp` against `reference`. The hypothesis is expected to already
/// have any terminator stripped; empty references follow the alignment
/// module's clamped-denominator convention.
pub fn reward(spec: &RewardSpec, reference: &[u32], hyp: &[u32]) -> f64 {
    let value = match spec.kind {
        RewardKind::Wer => {
            let stats = align(reference, hyp);
            -wer(&stats)
        }
        RewardKind::ExactMatch => {
            if reference == hyp {
                1.0
            } else {
                0.0
            }
        }
        RewardKind::TotalErrors => {
            let stats = align(reference, hyp);
            -(stats.total_errors() as f64)
        }
    };
    spec.scale * value
}
