//! Token layout and the action micro-grammar.
//!
//! Every action span must read
//!
//! ```text
//! <think> thought* </think> <call> TOOL REF </call>
//! <think> thought* </think> <resp> REF </resp>
//! ```
//!
//! Tool arguments and response bodies are reference tokens (`REF_LAST`,
//! `REF_ROOT`, `REF_DECOY`) that the environment resolves against the episode
//! state. A tabular policy cannot name entity ids it has never seen, but it
//! can learn to point at them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const THINK_OPEN: TokenId = 0;
pub const THINK_CLOSE: TokenId = 1;
pub const CALL_OPEN: TokenId = 2;
pub const CALL_CLOSE: TokenId = 3;
pub const RESP_OPEN: TokenId = 4;
pub const RESP_CLOSE: TokenId = 5;
pub const THOUGHT: TokenId = 6;
pub const TOOL_LOOKUP: TokenId = 7;
pub const TOOL_REPAIR: TokenId = 8;
pub const TOOL_SCAN: TokenId = 9;
pub const TOOL_PROBE: TokenId = 10;
pub const REF_LAST: TokenId = 11;
pub const REF_ROOT: TokenId = 12;
pub const REF_DECOY: TokenId = 13;
pub const ERR_TOOL: TokenId = 14;
pub const ERR_MSG: TokenId = 15;
pub const NIL: TokenId = 16;
pub const ASK: TokenId = 17;
pub const HOP: TokenId = 18;
/// First value token. Entities occupy `[VALUE_BASE, VALUE_BASE + N)`,
/// attributes the next `N` ids.
pub const VALUE_BASE: TokenId = 19;

/// Longest action span the sampler emits before giving up on a close marker.
pub const MAX_SPAN: usize = 12;

/// The fixed two-token observation returned by every failed call.
pub const ERROR_OBSERVATION: [TokenId; 2] = [ERR_TOOL, ERR_MSG];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    Lookup,
    Repair,
    Scan,
    Probe,
}

impl Tool {
    pub const ALL: [Tool; 4] = [Tool::Lookup, Tool::Repair, Tool::Scan, Tool::Probe];

    pub fn token(self) -> TokenId {
        match self {
            Tool::Lookup => TOOL_LOOKUP,
            Tool::Repair => TOOL_REPAIR,
            Tool::Scan => TOOL_SCAN,
            Tool::Probe => TOOL_PROBE,
        }
    }

    pub fn from_token(token: TokenId) -> Option<Tool> {
        match token {
            TOOL_LOOKUP => Some(Tool::Lookup),
            TOOL_REPAIR => Some(Tool::Repair),
            TOOL_SCAN => Some(Tool::Scan),
            TOOL_PROBE => Some(Tool::Probe),
            _ => None,
        }
    }

    /// Repair is the only image-producing tool family; everything else
    /// answers with text.
    pub fn yields_image(self) -> bool {
        matches!(self, Tool::Repair)
    }

    pub fn name(self) -> &'static str {
        match self {
            Tool::Lookup => "lookup",
            Tool::Repair => "repair",
            Tool::Scan => "scan",
            Tool::Probe => "probe",
        }
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tool::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown tool `{s}`")))
    }
}

/// Reference tokens usable as tool arguments and response bodies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ref {
    /// The most recently revealed value (initially the prompt entity).
    Last,
    /// The prompt entity.
    Root,
    /// An entity that is not on the hidden chain.
    Decoy,
}

impl Ref {
    pub fn token(self) -> TokenId {
        match self {
            Ref::Last => REF_LAST,
            Ref::Root => REF_ROOT,
            Ref::Decoy => REF_DECOY,
        }
    }

    pub fn from_token(token: TokenId) -> Option<Ref> {
        match token {
            REF_LAST => Some(Ref::Last),
            REF_ROOT => Some(Ref::Root),
            REF_DECOY => Some(Ref::Decoy),
            _ => None,
        }
    }
}

/// Vocabulary sizing for a given entity count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    num_entities: u32,
    size: u32,
}

impl Vocab {
    pub fn required_size(num_entities: u32) -> u32 {
        VALUE_BASE + 2 * num_entities
    }

    /// `size` may exceed the required layout; surplus ids are never produced
    /// by the environment and always parse as violations.
    pub fn new(num_entities: u32, size: u32) -> Result<Self> {
        let required = Self::required_size(num_entities);
        if size < required {
            return Err(Error::Config(format!(
                "vocab {size} too small for {num_entities} entities (need {required})"
            )));
        }
        Ok(Self { num_entities, size })
    }

    pub fn minimal(num_entities: u32) -> Self {
        Self {
            num_entities,
            size: Self::required_size(num_entities),
        }
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn num_entities(&self) -> u32 {
        self.num_entities
    }

    pub fn entity(&self, e: u32) -> TokenId {
        debug_assert!(e < self.num_entities);
        VALUE_BASE + e
    }

    pub fn attribute(&self, e: u32) -> TokenId {
        debug_assert!(e < self.num_entities);
        VALUE_BASE + self.num_entities + e
    }

    pub fn entity_of(&self, token: TokenId) -> Option<u32> {
        (VALUE_BASE..VALUE_BASE + self.num_entities)
            .contains(&token)
            .then(|| token - VALUE_BASE)
    }
}

/// True for entity and attribute tokens, the only tokens that carry
/// information revealed by a lookup.
pub fn is_value_token(token: TokenId) -> bool {
    token >= VALUE_BASE
}

/// Parser state before consuming the next token of an action span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Open,
    Think,
    Control,
    Tool,
    Arg,
    CallClose,
    Answer,
    RespClose,
    /// Any position after a violation or after the span already closed.
    Malformed,
}

impl Phase {
    pub const COUNT: usize = 9;
    pub const ALL: [Phase; Phase::COUNT] = [
        Phase::Open,
        Phase::Think,
        Phase::Control,
        Phase::Tool,
        Phase::Arg,
        Phase::CallClose,
        Phase::Answer,
        Phase::RespClose,
        Phase::Malformed,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advance {
    Continue(Phase),
    Complete,
    Violation,
}

impl Phase {
    pub fn advance(self, token: TokenId) -> Advance {
        use Advance::*;
        match (self, token) {
            (Phase::Open, THINK_OPEN) => Continue(Phase::Think),
            (Phase::Think, THOUGHT) => Continue(Phase::Think),
            (Phase::Think, THINK_CLOSE) => Continue(Phase::Control),
            (Phase::Control, CALL_OPEN) => Continue(Phase::Tool),
            (Phase::Control, RESP_OPEN) => Continue(Phase::Answer),
            (Phase::Tool, t) if Tool::from_token(t).is_some() => Continue(Phase::Arg),
            (Phase::Arg, t) if Ref::from_token(t).is_some() => Continue(Phase::CallClose),
            (Phase::CallClose, CALL_CLOSE) => Complete,
            (Phase::Answer, t) if Ref::from_token(t).is_some() => Continue(Phase::RespClose),
            (Phase::RespClose, RESP_CLOSE) => Complete,
            _ => Violation,
        }
    }
}

/// Parser phase in effect before each token of `span`.
pub fn span_phases(span: &[TokenId]) -> Vec<Phase> {
    let mut phase = Phase::Open;
    span.iter()
        .map(|&t| {
            let before = phase;
            phase = match phase.advance(t) {
                Advance::Continue(next) => next,
                Advance::Complete | Advance::Violation => Phase::Malformed,
            };
            before
        })
        .collect()
}

/// The control part of a well-formed action span.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParsedAction {
    ToolCall { tool: Tool, arg: Ref },
    Response { body: Vec<Ref> },
}

/// What the parser made of one action span.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "StepActionRepr", into = "StepActionRepr")]
pub enum StepAction {
    Parsed(ParsedAction),
    Malformed,
}

impl StepAction {
    pub fn is_tool_call(&self) -> bool {
        matches!(self, StepAction::Parsed(ParsedAction::ToolCall { .. }))
    }

    pub fn is_response(&self) -> bool {
        matches!(self, StepAction::Parsed(ParsedAction::Response { .. }))
    }

    pub fn tool(&self) -> Option<Tool> {
        match self {
            StepAction::Parsed(ParsedAction::ToolCall { tool, .. }) => Some(*tool),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepActionRepr {
    Parsed(ParsedAction),
    Malformed(MalformedTag),
}

#[derive(Serialize, Deserialize)]
enum MalformedTag {
    #[serde(rename = "malformed")]
    Malformed,
}

impl From<StepActionRepr> for StepAction {
    fn from(r: StepActionRepr) -> Self {
        match r {
            StepActionRepr::Parsed(p) => StepAction::Parsed(p),
            StepActionRepr::Malformed(_) => StepAction::Malformed,
        }
    }
}

impl From<StepAction> for StepActionRepr {
    fn from(a: StepAction) -> Self {
        match a {
            StepAction::Parsed(p) => StepActionRepr::Parsed(p),
            StepAction::Malformed => StepActionRepr::Malformed(MalformedTag::Malformed),
        }
    }
}

/// Parses an action span. Trailing tokens after the closing marker, a missing
/// closing marker, or any out-of-grammar token make the span malformed.
pub fn parse_span(span: &[TokenId]) -> StepAction {
    let mut phase = Phase::Open;
    let mut tool = None;
    let mut arg = None;
    let mut body = Vec::new();
    for (i, &t) in span.iter().enumerate() {
        match phase.advance(t) {
            Advance::Continue(next) => {
                match phase {
                    Phase::Tool => tool = Tool::from_token(t),
                    Phase::Arg => arg = Ref::from_token(t),
                    Phase::Answer => body.extend(Ref::from_token(t)),
                    _ => {}
                }
                phase = next;
            }
            Advance::Complete => {
                if i + 1 != span.len() {
                    return StepAction::Malformed;
                }
                let action = match (phase, tool, arg) {
                    (Phase::CallClose, Some(tool), Some(arg)) => ParsedAction::ToolCall { tool, arg },
                    (Phase::RespClose, _, _) => ParsedAction::Response { body },
                    _ => return StepAction::Malformed,
                };
                return StepAction::Parsed(action);
            }
            Advance::Violation => return StepAction::Malformed,
        }
    }
    StepAction::Malformed
}

/// Well-formed span for a tool call.
pub fn call_span(tool: Tool, arg: Ref) -> Vec<TokenId> {
    vec![
        THINK_OPEN,
        THOUGHT,
        THINK_CLOSE,
        CALL_OPEN,
        tool.token(),
        arg.token(),
        CALL_CLOSE,
    ]
}

/// Well-formed span for a terminal response.
pub fn response_span(body: Ref) -> Vec<TokenId> {
    vec![THINK_OPEN, THOUGHT, THINK_CLOSE, RESP_OPEN, body.token(), RESP_CLOSE]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tool_call() {
        let action = parse_span(&call_span(Tool::Lookup, Ref::Last));
        assert_eq!(
            action,
            StepAction::Parsed(ParsedAction::ToolCall {
                tool: Tool::Lookup,
                arg: Ref::Last
            })
        );
    }

    #[test]
    fn parses_response_with_empty_think() {
        let span = [THINK_OPEN, THINK_CLOSE, RESP_OPEN, REF_ROOT, RESP_CLOSE];
        assert_eq!(
            parse_span(&span),
            StepAction::Parsed(ParsedAction::Response { body: vec![Ref::Root] })
        );
    }

    #[test]
    fn rejects_malformed_spans() {
        // missing close
        assert_eq!(parse_span(&[THINK_OPEN, THOUGHT]), StepAction::Malformed);
        // trailing token after close
        let mut span = call_span(Tool::Scan, Ref::Root);
        span.push(THOUGHT);
        assert_eq!(parse_span(&span), StepAction::Malformed);
        // ref where a tool belongs
        let span = [THINK_OPEN, THINK_CLOSE, CALL_OPEN, REF_LAST, REF_LAST, CALL_CLOSE];
        assert_eq!(parse_span(&span), StepAction::Malformed);
        assert_eq!(parse_span(&[]), StepAction::Malformed);
    }

    #[test]
    fn phases_follow_parser() {
        let span = call_span(Tool::Lookup, Ref::Last);
        assert_eq!(
            span_phases(&span),
            vec![
                Phase::Open,
                Phase::Think,
                Phase::Think,
                Phase::Control,
                Phase::Tool,
                Phase::Arg,
                Phase::CallClose
            ]
        );
        assert_eq!(span_phases(&[NIL, THINK_OPEN]), vec![Phase::Open, Phase::Malformed]);
    }

    #[test]
    fn step_action_json() {
        let m = serde_json::to_string(&StepAction::Malformed).unwrap();
        assert_eq!(m, "\"malformed\"");
        let call = StepAction::Parsed(ParsedAction::ToolCall {
            tool: Tool::Repair,
            arg: Ref::Root,
        });
        let s = serde_json::to_string(&call).unwrap();
        assert_eq!(s, r#"{"kind":"tool_call","tool":"repair","arg":"root"}"#);
        assert_eq!(serde_json::from_str::<StepAction>(&s).unwrap(), call);
        assert_eq!(serde_json::from_str::<StepAction>(&m).unwrap(), StepAction::Malformed);
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::minimal(5);
        assert_eq!(v.size(), 29);
        assert_eq!(v.entity(0), VALUE_BASE);
        assert_eq!(v.attribute(0), VALUE_BASE + 5);
        assert_eq!(v.entity_of(v.entity(4)), Some(4));
        assert_eq!(v.entity_of(v.attribute(0)), None);
        assert!(Vocab::new(5, 28).is_err());
    }
}
