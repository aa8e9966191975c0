//! Multi-turn trajectories with per-token provenance.
//!
//! A trajectory is a sequence of steps. Each step holds the action span the
//! policy emitted and, unless it was the terminal response, what the
//! environment answered. The flattened token stream interleaves action spans
//! with text observations; image observations never enter it.

pub mod grammar;
mod record;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use grammar::{ParsedAction, Ref, StepAction, TokenId, Tool};
pub use record::{read_jsonl, write_jsonl, TrajectoryRecord, SCHEMA_VERSION};

/// Default consecutive-error threshold for the fatal detector.
pub const DEFAULT_K_FATAL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Policy,
    Observation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: TokenId,
    pub step: usize,
    pub origin: Origin,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Error,
    #[default]
    None,
}

impl ExecStatus {
    pub fn index(self) -> usize {
        match self {
            ExecStatus::None => 0,
            ExecStatus::Ok => 1,
            ExecStatus::Error => 2,
        }
    }
}

/// Opaque image identifier. No pixels exist anywhere in the engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageHandle(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Text { tokens: Vec<TokenId> },
    Image { handle: ImageHandle },
}

impl Observation {
    /// Tokens this observation contributes to the stream (none for images).
    pub fn tokens(&self) -> &[TokenId] {
        match self {
            Observation::Text { tokens } => tokens,
            Observation::Image { .. } => &[],
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Observation::Image { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action_tokens: Vec<TokenId>,
    pub parsed_action: StepAction,
    pub exec_status: ExecStatus,
    pub observation: Option<Observation>,
    /// Value token the environment resolved the call's argument to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub image: ImageHandle,
    pub question: Vec<TokenId>,
}

/// A trajectory under construction; what the policy conditions on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct History {
    pub prompt: Prompt,
    pub steps: Vec<StepRecord>,
}

impl History {
    pub fn new(prompt: Prompt) -> Self {
        Self {
            prompt,
            steps: Vec::new(),
        }
    }

    /// Images visible when choosing the next action.
    pub fn visible_images(&self) -> Vec<ImageHandle> {
        visible_images(&self.prompt, &self.steps, self.steps.len())
    }
}

fn visible_images(prompt: &Prompt, steps: &[StepRecord], before: usize) -> Vec<ImageHandle> {
    std::iter::once(prompt.image)
        .chain(steps[..before].iter().filter_map(|s| match s.observation {
            Some(Observation::Image { handle }) => Some(handle),
            _ => None,
        }))
        .collect()
}

/// Number of distinct values (entities or attributes) revealed so far by
/// successful text observations.
pub fn revealed_count(steps: &[StepRecord]) -> usize {
    let mut seen: Vec<TokenId> = Vec::new();
    for step in steps.iter().filter(|s| s.exec_status == ExecStatus::Ok) {
        if let Some(Observation::Text { tokens }) = &step.observation {
            for &t in tokens.iter().filter(|&&t| grammar::is_value_token(t)) {
                if !seen.contains(&t) {
                    seen.push(t);
                }
            }
        }
    }
    seen.len()
}

/// Replays the consecutive-error counter and returns the first step at which
/// it reaches `k_fatal`, or `statuses.len()` (L+1) if it never does.
///
/// Panics if `k_fatal == 0`.
pub fn detect_fatal_index(statuses: &[ExecStatus], k_fatal: usize) -> usize {
    assert!(k_fatal >= 1, "k_fatal must be at least 1");
    let mut errors = 0;
    for (l, status) in statuses.iter().enumerate() {
        if *status == ExecStatus::Error {
            errors += 1;
            if errors == k_fatal {
                return l;
            }
        } else {
            errors = 0;
        }
    }
    statuses.len()
}

/// A finalized, immutable trajectory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    prompt: Prompt,
    steps: Vec<StepRecord>,
    tokens: Vec<TokenRecord>,
    terminal_response: Option<Vec<TokenId>>,
    fatal_index: usize,
    k_fatal: usize,
}

impl Trajectory {
    /// Flattens the token stream and runs the fatal detector.
    pub fn finalize(
        prompt: Prompt,
        steps: Vec<StepRecord>,
        terminal_response: Option<Vec<TokenId>>,
        k_fatal: usize,
    ) -> Result<Self> {
        if k_fatal == 0 {
            return Err(Error::Trajectory("k_fatal must be at least 1".into()));
        }
        let mut tokens = Vec::new();
        for (l, step) in steps.iter().enumerate() {
            if let Some(Observation::Text { tokens: t }) = &step.observation {
                if t.is_empty() {
                    return Err(Error::Trajectory(format!("step {l}: empty text observation")));
                }
            }
            if step.parsed_action.is_response() && l + 1 != steps.len() {
                return Err(Error::Trajectory(format!("step {l}: response before the last step")));
            }
            tokens.extend(step.action_tokens.iter().map(|&token| TokenRecord {
                token,
                step: l,
                origin: Origin::Policy,
            }));
            if let Some(obs) = &step.observation {
                tokens.extend(obs.tokens().iter().map(|&token| TokenRecord {
                    token,
                    step: l,
                    origin: Origin::Observation,
                }));
            }
        }
        let statuses: Vec<_> = steps.iter().map(|s| s.exec_status).collect();
        let fatal_index = detect_fatal_index(&statuses, k_fatal);
        Ok(Self {
            prompt,
            steps,
            tokens,
            terminal_response,
            fatal_index,
            k_fatal,
        })
    }

    pub fn from_history(history: History, terminal_response: Option<Vec<TokenId>>, k_fatal: usize) -> Result<Self> {
        Self::finalize(history.prompt, history.steps, terminal_response, k_fatal)
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn terminal_response(&self) -> Option<&[TokenId]> {
        self.terminal_response.as_deref()
    }

    /// L+1, the number of action-emitting steps.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// f: the fatal step, or L+1 when the trajectory is non-fatal.
    pub fn fatal_index(&self) -> usize {
        self.fatal_index
    }

    pub fn k_fatal(&self) -> usize {
        self.k_fatal
    }

    pub fn is_fatal(&self) -> bool {
        self.fatal_index < self.steps.len()
    }

    pub fn statuses(&self) -> Vec<ExecStatus> {
        self.steps.iter().map(|s| s.exec_status).collect()
    }

    /// Re-runs the detector at a different threshold.
    pub fn detect_fatal(&self, k_fatal: usize) -> usize {
        detect_fatal_index(&self.statuses(), k_fatal)
    }

    pub fn policy_token_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.origin == Origin::Policy).count()
    }

    /// Images visible when step `l` chooses its action.
    pub fn visible_images(&self, l: usize) -> Vec<ImageHandle> {
        visible_images(&self.prompt, &self.steps, l.min(self.steps.len()))
    }

    /// 1 on tokens the policy emitted, 0 on observation tokens.
    pub fn generation_mask(&self) -> MaskVector {
        self.tokens.iter().map(|t| t.origin == Origin::Policy).collect()
    }

    /// Generation mask further restricted to steps strictly before `f`.
    pub fn fatal_mask(&self, f: usize) -> MaskVector {
        self.tokens
            .iter()
            .map(|t| t.origin == Origin::Policy && t.step < f)
            .collect()
    }

    /// The viable prefix: steps `[0, f)` as a trajectory of their own.
    pub fn truncated(&self, f: usize) -> Trajectory {
        let steps = self.steps[..f.min(self.steps.len())].to_vec();
        let response = if steps.len() == self.steps.len() {
            self.terminal_response.clone()
        } else {
            None
        };
        Self::finalize(self.prompt.clone(), steps, response, self.k_fatal).expect("prefix of a valid trajectory is valid")
    }

    /// Copy with every text observation dropped. Statuses are kept.
    pub fn without_text_observations(&self) -> Trajectory {
        let steps = self
            .steps
            .iter()
            .map(|s| StepRecord {
                observation: s.observation.clone().filter(Observation::is_image),
                ..s.clone()
            })
            .collect();
        Self::finalize(self.prompt.clone(), steps, self.terminal_response.clone(), self.k_fatal)
            .expect("dropping observations keeps a trajectory valid")
    }

    /// Copy with step `l` replaced; used to probe prefix insensitivity.
    pub fn with_step(&self, l: usize, step: StepRecord) -> Result<Trajectory> {
        let mut steps = self.steps.clone();
        *steps
            .get_mut(l)
            .ok_or_else(|| Error::Trajectory(format!("no step {l}")))? = step;
        Self::finalize(self.prompt.clone(), steps, self.terminal_response.clone(), self.k_fatal)
    }
}

/// One bit per token of a trajectory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskVector(Vec<bool>);

impl MaskVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, t: usize) -> bool {
        self.0[t]
    }

    pub fn set(&mut self, t: usize, bit: bool) {
        self.0[t] = bit;
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

impl FromIterator<bool> for MaskVector {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for MaskVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0
            .iter()
            .try_for_each(|&b| f.write_str(if b { "1" } else { "0" }))
    }
}
