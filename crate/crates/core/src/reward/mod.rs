//! Trajectory rewards.
//!
//! `r = r_fmt * (alpha * r_acc + (1 - alpha) * r_query)`. The format score
//! gates the other two, and both format and query quality only look at the
//! steps before the fatal index.

mod judge;

use serde::{Deserialize, Serialize};

use crate::env::TaskTruth;
use crate::error::{Error, Result};
use crate::trajectory::{ExecStatus, Observation, ParsedAction, StepAction, TokenId, Tool, Trajectory};
use crate::Scalar;
pub use judge::{HttpJudge, HttpJudgeConfig, JudgeRequest, JudgeVerdict, Verdict};

pub const DEFAULT_ALPHA: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Breakdown<T> {
    pub r_fmt: T,
    pub r_acc: T,
    pub r_query: T,
    pub composite: T,
    pub alpha: T,
    pub fatal: bool,
    pub fatal_index: usize,
    /// Group-normalized reward, once the group has been assembled.
    pub normalized: Option<T>,
    /// Advantage actually used in the loss.
    pub advantage: Option<T>,
}

/// Decides whether a terminal response answers the question.
pub trait AccuracyJudge: Send + Sync {
    fn accept(&self, question: &[TokenId], ground_truth: &[TokenId], traj: &Trajectory) -> Result<bool>;
}

/// Scores query quality in [0, 1] over the steps before `f`.
pub trait QueryJudge: Send + Sync {
    fn score(&self, truth: &TaskTruth, traj: &Trajectory, f: usize) -> Result<f64>;
}

/// Token-exact match of the terminal response.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactMatch;

impl AccuracyJudge for ExactMatch {
    fn accept(&self, _question: &[TokenId], ground_truth: &[TokenId], traj: &Trajectory) -> Result<bool> {
        Ok(traj.terminal_response() == Some(ground_truth))
    }
}

/// The deterministic four-part rubric of [`query_quality_reward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Rubric;

impl QueryJudge for Rubric {
    fn score(&self, truth: &TaskTruth, traj: &Trajectory, f: usize) -> Result<f64> {
        Ok(query_quality_reward::<f64>(traj, truth, f))
    }
}

fn ratio<T: Scalar>(num: usize, den: usize) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from_usize(num).unwrap() / T::from_usize(den).unwrap()
    }
}

fn step_well_formed(action: &StepAction, status: ExecStatus, last: bool) -> bool {
    let shape_ok = match action {
        StepAction::Parsed(ParsedAction::ToolCall { .. }) => !last,
        StepAction::Parsed(ParsedAction::Response { .. }) => last,
        StepAction::Malformed => false,
    };
    shape_ok && status != ExecStatus::Error
}

/// Average well-formedness over the steps before `min(f, L+1)`; 0 if there
/// are none.
pub fn format_reward<T: Scalar>(traj: &Trajectory, f: usize) -> T {
    let steps = traj.steps();
    let prefix = f.min(steps.len());
    let last = steps.len().saturating_sub(1);
    let good = steps[..prefix]
        .iter()
        .enumerate()
        .filter(|(l, s)| step_well_formed(&s.parsed_action, s.exec_status, *l == last))
        .count();
    ratio(good, prefix)
}

/// 1 iff the trajectory is non-fatal, has a terminal response, and the
/// judge accepts it. Judge errors propagate.
pub fn accuracy_reward<T: Scalar>(traj: &Trajectory, truth: &TaskTruth, judge: &dyn AccuracyJudge) -> Result<T> {
    if traj.is_fatal() || traj.terminal_response().is_none() {
        return Ok(T::zero());
    }
    Ok(if judge.accept(&truth.question, &truth.answer, traj)? {
        T::one()
    } else {
        T::zero()
    })
}

/// Length of the longest strictly increasing subsequence.
fn longest_increasing(xs: &[usize]) -> usize {
    let mut tails: Vec<usize> = Vec::new();
    for &x in xs {
        match tails.binary_search(&x) {
            Ok(_) => {}
            Err(i) if i == tails.len() => tails.push(x),
            Err(i) => tails[i] = x,
        }
    }
    tails.len()
}

/// Mean of relevance, progression, signal ratio and complementarity over the
/// steps before `f`; 0 when that prefix issues no tool calls.
///
/// Progression only counts lookups that executed: a failed call is already
/// charged by the signal ratio, so a retried lookup is not penalized twice.
pub fn query_quality_reward<T: Scalar>(traj: &Trajectory, truth: &TaskTruth, f: usize) -> T {
    let steps = &traj.steps()[..f.min(traj.num_steps())];
    let calls: Vec<_> = steps
        .iter()
        .filter_map(|s| match &s.parsed_action {
            StepAction::Parsed(ParsedAction::ToolCall { tool, .. }) => Some((*tool, s)),
            _ => None,
        })
        .collect();
    if calls.is_empty() {
        return T::zero();
    }
    let chain_index = |t: Option<TokenId>| t.and_then(|t| truth.chain.iter().position(|&c| c == t));
    let lookups: Vec<_> = calls.iter().filter(|(tool, _)| *tool == Tool::Lookup).map(|(_, s)| s).collect();
    let on_chain = lookups.iter().filter(|s| chain_index(s.target).is_some()).count();
    let executed: Vec<usize> = lookups
        .iter()
        .filter(|s| s.exec_status == ExecStatus::Ok)
        .filter_map(|s| chain_index(s.target))
        .collect();
    let ok_lookups = lookups.iter().filter(|s| s.exec_status == ExecStatus::Ok).count();
    let ok_calls = calls.iter().filter(|(_, s)| s.exec_status == ExecStatus::Ok).count();

    let relevance: T = ratio(on_chain, lookups.len());
    let progression: T = ratio(longest_increasing(&executed), ok_lookups);
    let signal: T = ratio(ok_calls, calls.len());
    let complementarity = if truth.degraded {
        let ok_obs = || steps.iter().filter(|s| s.exec_status == ExecStatus::Ok).filter_map(|s| s.observation.as_ref());
        let text = ok_obs().any(|o| matches!(o, Observation::Text { .. }));
        let image = ok_obs().any(Observation::is_image);
        if text && image {
            T::one()
        } else {
            T::zero()
        }
    } else {
        T::one()
    };
    (relevance + progression + signal + complementarity) / T::lit(4.0)
}

pub fn composite_reward<T: Scalar>(r_fmt: T, r_acc: T, r_query: T, alpha: T) -> Result<T> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::Alpha(alpha.as_f64()));
    }
    Ok(r_fmt * (alpha * r_acc + (T::one() - alpha) * r_query))
}

/// Judges plus mixing weight.
pub struct RewardSuite {
    pub alpha: f64,
    pub accuracy: Box<dyn AccuracyJudge>,
    pub query: Box<dyn QueryJudge>,
}

impl Default for RewardSuite {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            accuracy: Box::new(ExactMatch),
            query: Box::new(Rubric),
        }
    }
}

impl std::fmt::Debug for RewardSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RewardSuite").field("alpha", &self.alpha).finish_non_exhaustive()
    }
}

impl RewardSuite {
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Alpha(alpha));
        }
        Ok(Self {
            alpha,
            ..Self::default()
        })
    }

    pub fn score<T: Scalar>(&self, traj: &Trajectory, truth: &TaskTruth) -> Result<Breakdown<T>> {
        let f = traj.fatal_index();
        let r_fmt = format_reward(traj, f);
        let r_acc = accuracy_reward(traj, truth, self.accuracy.as_ref())?;
        let q = self.query.score(truth, traj, f)?;
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::NonFinite(format!("query score {q} outside [0, 1]")));
        }
        let r_query = T::lit(q);
        let alpha = T::lit(self.alpha);
        Ok(Breakdown {
            r_fmt,
            r_acc,
            r_query,
            composite: composite_reward(r_fmt, r_acc, r_query, alpha)?,
            alpha,
            fatal: traj.is_fatal(),
            fatal_index: f,
            normalized: None,
            advantage: None,
        })
    }
}

#[cfg(test)]
mod tests;
