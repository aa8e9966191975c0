use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Prompt, StepRecord, TokenId, Trajectory};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// On-disk form of a trajectory: one JSON object per line.
///
/// The flattened token stream is not stored; it is rebuilt from the steps on
/// load, as is the fatal index (the stored value is checked against it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub v: u32,
    pub prompt: Prompt,
    pub steps: Vec<StepRecord>,
    pub fatal_index: usize,
    pub k_fatal: usize,
    pub terminal_response: Option<Vec<TokenId>>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        Self {
            v: SCHEMA_VERSION,
            prompt: t.prompt.clone(),
            steps: t.steps.clone(),
            fatal_index: t.fatal_index,
            k_fatal: t.k_fatal,
            terminal_response: t.terminal_response.clone(),
        }
    }
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        if r.v != SCHEMA_VERSION {
            return Err(Error::Trajectory(format!("unsupported schema version {}", r.v)));
        }
        let t = Trajectory::finalize(r.prompt, r.steps, r.terminal_response, r.k_fatal)?;
        if t.fatal_index != r.fatal_index {
            return Err(Error::Trajectory(format!(
                "stored fatal_index {} disagrees with replayed {}",
                r.fatal_index, t.fatal_index
            )));
        }
        Ok(t)
    }
}

impl Serialize for Trajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TrajectoryRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let record = TrajectoryRecord::deserialize(d)?;
        Trajectory::try_from(record).map_err(serde::de::Error::custom)
    }
}

/// Writes one JSON line per item.
pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSON lines, skipping blank ones.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            msg: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::super::grammar::*;
    use super::super::*;
    use super::*;

    fn sample() -> Trajectory {
        let steps = vec![
            StepRecord {
                action_tokens: call_span(Tool::Lookup, Ref::Last),
                parsed_action: parse_span(&call_span(Tool::Lookup, Ref::Last)),
                exec_status: ExecStatus::Ok,
                observation: Some(Observation::Text { tokens: vec![VALUE_BASE + 1] }),
                target: Some(VALUE_BASE),
            },
            StepRecord {
                action_tokens: call_span(Tool::Repair, Ref::Root),
                parsed_action: parse_span(&call_span(Tool::Repair, Ref::Root)),
                exec_status: ExecStatus::Ok,
                observation: Some(Observation::Image { handle: ImageHandle(1) }),
                target: Some(VALUE_BASE),
            },
            StepRecord {
                action_tokens: response_span(Ref::Last),
                parsed_action: parse_span(&response_span(Ref::Last)),
                exec_status: ExecStatus::None,
                observation: None,
                target: None,
            },
        ];
        let prompt = Prompt {
            image: ImageHandle(0),
            question: vec![ASK, HOP],
        };
        Trajectory::finalize(prompt, steps, Some(vec![VALUE_BASE + 1]), 3).unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let t = sample();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, [&t, &t]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"v\":1,\"prompt\""));
        let back: Vec<Trajectory> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![t.clone(), t]);
    }

    #[test]
    fn tampered_fatal_index_rejected() {
        let t = sample();
        let mut r = TrajectoryRecord::from(&t);
        r.fatal_index = 0;
        assert!(Trajectory::try_from(r).is_err());
    }
}
