//! ToolWorld: a seeded multi-hop lookup environment.
//!
//! Each episode hides a chain of distinct entities `e_0 -> e_1 -> ... -> e_h`.
//! The prompt shows `e_0` as an image and asks for the attribute of `e_h`.
//! `lookup` on `e_i` reveals `e_{i+1}` (or the attribute, for `e_h`) as a text
//! observation. A degraded episode rejects lookups until a `repair` call,
//! which answers with an image. Trap tools always fail, and every non-trap
//! call fails independently with probability `p_error`.

mod rollout;

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::grammar::{self, Ref, TokenId, Tool, Vocab};
use crate::trajectory::{ExecStatus, ImageHandle, Observation, ParsedAction, Prompt, StepAction};
pub use rollout::{rollout, ActionSource, RolloutOptions, ScriptedExpert};

/// RNG stream used to sample the hidden chain.
pub const CHAIN_STREAM: u64 = 0;
/// RNG stream used for stochastic tool failures.
pub const ERROR_STREAM: u64 = 1;
/// RNG stream reserved for policy sampling.
pub const POLICY_STREAM: u64 = 2;

/// A ChaCha generator on one of the disjoint per-episode streams.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a base seed with an index (splitmix64 finalizer), so derived
/// seeds of neighbouring indices are unrelated.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// h, the number of hops from the prompt entity to the queried one.
    pub chain_length: usize,
    pub num_entities: u32,
    pub vocab_size: u32,
    pub p_error: f64,
    pub trap_tools: BTreeSet<Tool>,
    pub degraded: bool,
    pub l_max: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            chain_length: 2,
            num_entities: 8,
            vocab_size: Vocab::required_size(8),
            p_error: 0.0,
            trap_tools: BTreeSet::new(),
            degraded: false,
            l_max: 12,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<Vocab> {
        if self.chain_length == 0 {
            return Err(Error::Config("chain_length must be at least 1".into()));
        }
        if self.chain_length as u64 >= self.num_entities as u64 {
            return Err(Error::Config(format!(
                "chain_length {} must be below num_entities {}",
                self.chain_length, self.num_entities
            )));
        }
        if !(0.0..=1.0).contains(&self.p_error) {
            return Err(Error::Config(format!("p_error {} outside [0, 1]", self.p_error)));
        }
        if self.l_max == 0 {
            return Err(Error::Config("l_max must be at least 1".into()));
        }
        Vocab::new(self.num_entities, self.vocab_size)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        self.validate()
    }
}

/// Everything a reward judge may know about the hidden task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTruth {
    pub question: Vec<TokenId>,
    /// Entity tokens of `e_0 ..= e_h`.
    pub chain: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub degraded: bool,
}

/// What one `execute` call produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub observation: Option<Observation>,
    pub status: ExecStatus,
    /// Resolved argument of a tool call.
    pub target: Option<TokenId>,
    /// Resolved body of a response.
    pub response: Option<Vec<TokenId>>,
}

impl Outcome {
    fn failure(target: Option<TokenId>) -> Self {
        Self {
            observation: Some(Observation::Text {
                tokens: grammar::ERROR_OBSERVATION.to_vec(),
            }),
            status: ExecStatus::Error,
            target,
            response: None,
        }
    }

    fn text(tokens: Vec<TokenId>, target: TokenId) -> Self {
        Self {
            observation: Some(Observation::Text { tokens }),
            status: ExecStatus::Ok,
            target: Some(target),
            response: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnvState {
    config: EnvConfig,
    vocab: Vocab,
    chain: Vec<u32>,
    decoy: u32,
    progress: usize,
    answer_revealed: bool,
    degraded: bool,
    last_value: TokenId,
    errors: ChaCha8Rng,
    turn: usize,
    terminal: bool,
    next_image: u64,
}

/// Samples a fresh episode. Identical `(config, seed)` give identical state.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<(EnvState, Prompt)> {
    let vocab = config.validate()?;
    let mut chain_rng = stream_rng(seed, CHAIN_STREAM);
    let chain: Vec<u32> = index::sample(&mut chain_rng, config.num_entities as usize, config.chain_length + 1)
        .into_iter()
        .map(|e| e as u32)
        .collect();
    let decoy = (0..config.num_entities)
        .find(|e| !chain.contains(e))
        .expect("chain_length < num_entities leaves an off-chain entity");
    let state = EnvState {
        config: config.clone(),
        vocab,
        last_value: vocab.entity(chain[0]),
        chain,
        decoy,
        progress: 0,
        answer_revealed: false,
        degraded: config.degraded,
        errors: stream_rng(seed, ERROR_STREAM),
        turn: 0,
        terminal: false,
        next_image: 1,
    };
    let prompt = Prompt {
        image: ImageHandle(0),
        question: std::iter::once(grammar::ASK)
            .chain(std::iter::repeat_n(grammar::HOP, config.chain_length))
            .collect(),
    };
    Ok((state, prompt))
}

impl EnvState {
    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Entity ids `e_0 ..= e_h`.
    pub fn chain(&self) -> &[u32] {
        &self.chain
    }

    /// Furthest chain index revealed so far, in `[0, h]`.
    pub fn progress(&self) -> usize {
        self.progress
    }

    pub fn answer_revealed(&self) -> bool {
        self.answer_revealed
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn turn(&self) -> usize {
        self.turn
    }

    /// Reseeds the failure stream so rollouts of one prompt draw independent
    /// errors while sharing the hidden chain.
    pub fn reseed_errors(&mut self, seed: u64) {
        self.errors = stream_rng(seed, ERROR_STREAM);
    }

    /// Entity an image depicts. Every image in an episode shows `e_0`.
    pub fn image_subject(&self, handle: ImageHandle) -> Option<u32> {
        (handle.0 < self.next_image).then_some(self.chain[0])
    }

    /// The canonical answer span: the attribute token of `e_h`.
    pub fn ground_truth(&self) -> Vec<TokenId> {
        vec![self.vocab.attribute(self.chain[self.config.chain_length])]
    }

    pub fn truth(&self) -> TaskTruth {
        TaskTruth {
            question: std::iter::once(grammar::ASK)
                .chain(std::iter::repeat_n(grammar::HOP, self.config.chain_length))
                .collect(),
            chain: self.chain.iter().map(|&e| self.vocab.entity(e)).collect(),
            answer: self.ground_truth(),
            degraded: self.config.degraded,
        }
    }

    fn resolve(&self, r: Ref) -> TokenId {
        match r {
            Ref::Last => self.last_value,
            Ref::Root => self.vocab.entity(self.chain[0]),
            Ref::Decoy => self.vocab.entity(self.decoy),
        }
    }

    pub fn execute(&mut self, action: &StepAction) -> Result<Outcome> {
        if self.terminal {
            return Err(Error::Env("episode already terminated".into()));
        }
        if self.turn >= self.config.l_max {
            return Err(Error::Env(format!("turn cap {} reached", self.config.l_max)));
        }
        self.turn += 1;
        let (tool, arg) = match action {
            StepAction::Malformed => return Ok(Outcome::failure(None)),
            StepAction::Parsed(ParsedAction::Response { body }) => {
                self.terminal = true;
                return Ok(Outcome {
                    observation: None,
                    status: ExecStatus::None,
                    target: None,
                    response: Some(body.iter().map(|&r| self.resolve(r)).collect()),
                });
            }
            StepAction::Parsed(ParsedAction::ToolCall { tool, arg }) => (*tool, *arg),
        };
        let target = self.resolve(arg);
        if self.config.trap_tools.contains(&tool) {
            return Ok(Outcome::failure(Some(target)));
        }
        if self.errors.gen::<f64>() < self.config.p_error {
            return Ok(Outcome::failure(Some(target)));
        }
        Ok(match tool {
            Tool::Lookup if self.degraded => Outcome::failure(Some(target)),
            Tool::Lookup => self.lookup(target),
            Tool::Repair => {
                self.degraded = false;
                let handle = ImageHandle(self.next_image);
                self.next_image += 1;
                Outcome {
                    observation: Some(Observation::Image { handle }),
                    status: ExecStatus::Ok,
                    target: Some(target),
                    response: None,
                }
            }
            Tool::Scan | Tool::Probe => Outcome::text(vec![grammar::NIL], target),
        })
    }

    fn lookup(&mut self, target: TokenId) -> Outcome {
        let Some(i) = self
            .vocab
            .entity_of(target)
            .and_then(|e| self.chain.iter().position(|&c| c == e))
        else {
            return Outcome::text(vec![grammar::NIL], target);
        };
        let h = self.config.chain_length;
        let revealed = if i < h {
            self.progress = self.progress.max(i + 1);
            self.vocab.entity(self.chain[i + 1])
        } else {
            self.answer_revealed = true;
            self.vocab.attribute(self.chain[h])
        };
        self.last_value = revealed;
        Outcome::text(vec![revealed], target)
    }
}
