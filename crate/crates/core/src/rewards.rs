//! Reward functions for the critic.
//!
//! All rewards are pure functions of an episode's two correctness bits and
//! the critique verdict. No normalization or clipping happens here; any
//! centering is the estimator's business.

use std::fmt;

use crate::env::Episode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The reward-shaping variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    /// Correctness of the refinement.
    Refine,
    /// Refinement correctness minus original correctness.
    Delta,
    /// 1.0 for fixing a wrong answer, 0.2 for preserving a right one,
    /// 0.0 whenever the refinement is wrong.
    Correction,
    /// Indicator that the verdict matches the original answer's correctness.
    Dis,
    /// Refine plus `beta1` times Dis.
    Stage2,
    /// Graded discrimination for scored (non-binary) judgments.
    ContinuousDis,
}

impl RewardKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RewardKind::Refine => "refine",
            RewardKind::Delta => "delta",
            RewardKind::Correction => "correction",
            RewardKind::Dis => "dis",
            RewardKind::Stage2 => "stage2",
            RewardKind::ContinuousDis => "continuous-dis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "refine" => Ok(RewardKind::Refine),
            "delta" => Ok(RewardKind::Delta),
            "correction" => Ok(RewardKind::Correction),
            "dis" => Ok(RewardKind::Dis),
            "stage2" => Ok(RewardKind::Stage2),
            "continuous-dis" => Ok(RewardKind::ContinuousDis),
            other => Err(Error::parse(format!("unknown reward variant '{other}'"))),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A configured reward function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardFn<S> {
    kind: RewardKind,
    beta1: S,
    delta_range: S,
}

impl<S: Scalar> RewardFn<S> {
    pub fn new(kind: RewardKind, beta1: S, delta_range: S) -> Result<Self> {
        if beta1 < S::zero() || !beta1.is_finite() {
            return Err(Error::input(format!("beta1 = {beta1} must be >= 0")));
        }
        if delta_range <= S::zero() || !delta_range.is_finite() {
            return Err(Error::input(format!(
                "delta_range = {delta_range} must be > 0"
            )));
        }
        Ok(Self {
            kind,
            beta1,
            delta_range,
        })
    }

    pub fn refine() -> Self {
        Self {
            kind: RewardKind::Refine,
            beta1: S::zero(),
            delta_range: S::one(),
        }
    }

    pub fn delta() -> Self {
        Self {
            kind: RewardKind::Delta,
            beta1: S::zero(),
            delta_range: S::one(),
        }
    }

    pub fn correction() -> Self {
        Self {
            kind: RewardKind::Correction,
            beta1: S::zero(),
            delta_range: S::one(),
        }
    }

    pub fn dis() -> Self {
        Self {
            kind: RewardKind::Dis,
            beta1: S::zero(),
            delta_range: S::one(),
        }
    }

    pub fn stage2(beta1: S) -> Result<Self> {
        Self::new(RewardKind::Stage2, beta1, S::one())
    }

    pub fn continuous_dis(delta_range: S) -> Result<Self> {
        Self::new(RewardKind::ContinuousDis, S::zero(), delta_range)
    }

    pub fn of_kind(kind: RewardKind, beta1: S, delta_range: S) -> Result<Self> {
        Self::new(kind, beta1, delta_range)
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn beta1(&self) -> S {
        self.beta1
    }

    pub fn delta_range(&self) -> S {
        self.delta_range
    }

    /// Reward of a (original correctness, refined correctness, verdict)
    /// outcome. This is the whole table; `apply` reads the triple off an
    /// episode, and the exact-enumeration machinery feeds in hypothetical
    /// outcomes directly.
    pub fn value(&self, original_correct: bool, refined_correct: bool, verdict: bool) -> S {
        match self.kind {
            RewardKind::Refine => bit(refined_correct),
            RewardKind::Delta => bit::<S>(refined_correct) - bit(original_correct),
            RewardKind::Correction => match (original_correct, refined_correct) {
                (false, true) => S::one(),
                (true, true) => S::from_f64_lossy(0.2),
                (_, false) => S::zero(),
            },
            RewardKind::Dis => bit(verdict == original_correct),
            RewardKind::Stage2 => {
                bit::<S>(refined_correct) + self.beta1 * bit(verdict == original_correct)
            }
            RewardKind::ContinuousDis => {
                r_dis_continuous(bit(verdict), bit(original_correct), self.delta_range)
            }
        }
    }

    pub fn apply(&self, episode: &Episode) -> S {
        self.value(
            episode.original_correct,
            episode.refined_correct,
            episode.critique.verdict,
        )
    }
}

fn bit<S: Scalar>(b: bool) -> S {
    if b {
        S::one()
    } else {
        S::zero()
    }
}

/// Correctness of the refinement.
pub fn r_refine<S: Scalar>(episode: &Episode) -> S {
    bit(episode.refined_correct)
}

/// Correctness difference between the two attempts, in {-1, 0, 1}.
pub fn r_delta<S: Scalar>(episode: &Episode) -> S {
    bit::<S>(episode.refined_correct) - bit(episode.original_correct)
}

/// Asymmetric correction reward, in {0.0, 0.2, 1.0}.
pub fn r_correction<S: Scalar>(episode: &Episode) -> S {
    RewardFn::correction().apply(episode)
}

/// Indicator that the verdict agrees with the original answer's correctness.
pub fn r_dis<S: Scalar>(episode: &Episode) -> S {
    bit(episode.critique.verdict == episode.original_correct)
}

/// Composite reward for the helpfulness stage: refine plus `beta1` x dis.
/// The KL regularizer is the optimizer's job, not part of the reward.
pub fn r_stage2<S: Scalar>(episode: &Episode, beta1: S) -> S {
    r_refine::<S>(episode) + beta1 * r_dis::<S>(episode)
}

/// Graded discrimination reward for scored judgments:
/// `max(0, 1 - |judged - oracle| / delta_range)`.
pub fn r_dis_continuous<S: Scalar>(judged_score: S, oracle_score: S, delta_range: S) -> S {
    (S::one() - (judged_score - oracle_score).abs() / delta_range).max(S::zero())
}
