use rand_chacha::ChaCha8Rng;

use super::EnvState;
use crate::error::Result;
use crate::trajectory::grammar::{self, call_span, parse_span, response_span, Ref, TokenId, Tool};
use crate::trajectory::{revealed_count, ExecStatus, History, Prompt, StepRecord, Trajectory, DEFAULT_K_FATAL};

/// Anything that can emit the next action span given the history so far.
pub trait ActionSource {
    fn act(&mut self, history: &History, rng: &mut ChaCha8Rng) -> Vec<TokenId>;
}

impl<A: ActionSource + ?Sized> ActionSource for &mut A {
    fn act(&mut self, history: &History, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        (**self).act(history, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutOptions {
    pub k_fatal: usize,
    /// Stop the episode as soon as the error cascade reaches `k_fatal`.
    pub abort_on_fatal: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            k_fatal: DEFAULT_K_FATAL,
            abort_on_fatal: true,
        }
    }
}

/// Alternates policy actions and environment execution until a response,
/// the turn cap, or (optionally) a fatal cascade.
pub fn rollout<A: ActionSource + ?Sized>(
    source: &mut A,
    env: &mut EnvState,
    prompt: Prompt,
    opts: &RolloutOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut history = History::new(prompt);
    let mut response = None;
    let mut consecutive_errors = 0;
    while history.steps.len() < env.config().l_max {
        let action_tokens = source.act(&history, rng);
        let parsed_action = parse_span(&action_tokens);
        let outcome = env.execute(&parsed_action)?;
        let done = parsed_action.is_response();
        if outcome.status == ExecStatus::Error {
            consecutive_errors += 1;
        } else {
            consecutive_errors = 0;
        }
        history.steps.push(StepRecord {
            action_tokens,
            parsed_action,
            exec_status: outcome.status,
            observation: outcome.observation,
            target: outcome.target,
        });
        if done {
            response = outcome.response;
            break;
        }
        if opts.abort_on_fatal && consecutive_errors >= opts.k_fatal {
            break;
        }
    }
    Trajectory::from_history(history, response, opts.k_fatal)
}

/// The optimal scripted policy: repair if degraded, walk the chain with
/// `lookup(last)`, retrying failures, then answer with the last value.
#[derive(Clone, Copy, Debug)]
pub struct ScriptedExpert {
    pub degraded: bool,
}

impl ActionSource for ScriptedExpert {
    fn act(&mut self, history: &History, _rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let repaired = history.visible_images().len() > 1;
        if self.degraded && !repaired {
            return call_span(Tool::Repair, Ref::Root);
        }
        let hops = history.prompt.question.iter().filter(|&&t| t == grammar::HOP).count();
        if revealed_count(&history.steps) <= hops {
            call_span(Tool::Lookup, Ref::Last)
        } else {
            response_span(Ref::Last)
        }
    }
}
