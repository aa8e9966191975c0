//! Optional remote judge over JSON/HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AccuracyJudge, QueryJudge};
use crate::env::TaskTruth;
use crate::error::{Error, Result};
use crate::trajectory::{TokenId, Trajectory};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpJudgeConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first failure.
    pub retries: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub question: Vec<TokenId>,
    pub ground_truth: Vec<TokenId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal_response: Option<Vec<TokenId>>,
    /// Compact one-line view of the pre-fatal prefix, sent for query scoring.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Verdict {
    Accept(bool),
    Score(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub verdict: Verdict,
    #[serde(default)]
    pub rationale: String,
}

/// Blocking client. Each call builds its own request, so one instance can be
/// shared by concurrent rollout workers.
#[derive(Clone, Debug)]
pub struct HttpJudge {
    config: HttpJudgeConfig,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(config: HttpJudgeConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn request(&self, req: &JudgeRequest) -> Result<JudgeVerdict> {
        let mut last = String::new();
        for _ in 0..=self.config.retries {
            match self.attempt(req) {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(Error::JudgeTransport(format!(
            "{} after {} attempt(s): {last}",
            self.config.endpoint,
            self.config.retries + 1
        )))
    }

    fn attempt(&self, req: &JudgeRequest) -> std::result::Result<JudgeVerdict, String> {
        let mut resp = self.agent.post(&self.config.endpoint).send_json(req).map_err(|e| e.to_string())?;
        resp.body_mut().read_json().map_err(|e| e.to_string())
    }
}

fn summarize(traj: &Trajectory, f: usize) -> String {
    traj.steps()[..f.min(traj.num_steps())]
        .iter()
        .map(|s| {
            let action = serde_json::to_string(&s.parsed_action).unwrap_or_default();
            format!("{action}:{:?}", s.exec_status)
        })
        .collect::<Vec<_>>()
        .join(" | ")
}

impl AccuracyJudge for HttpJudge {
    fn accept(&self, question: &[TokenId], ground_truth: &[TokenId], traj: &Trajectory) -> Result<bool> {
        let v = self.request(&JudgeRequest {
            question: question.to_vec(),
            ground_truth: ground_truth.to_vec(),
            terminal_response: traj.terminal_response().map(<[_]>::to_vec),
            summary: None,
        })?;
        match v.verdict {
            Verdict::Accept(b) => Ok(b),
            Verdict::Score(x) => Ok(x >= 0.5),
        }
    }
}

impl QueryJudge for HttpJudge {
    fn score(&self, truth: &TaskTruth, traj: &Trajectory, f: usize) -> Result<f64> {
        let v = self.request(&JudgeRequest {
            question: truth.question.clone(),
            ground_truth: truth.answer.clone(),
            terminal_response: None,
            summary: Some(summarize(traj, f)),
        })?;
        match v.verdict {
            Verdict::Score(x) if (0.0..=1.0).contains(&x) => Ok(x),
            Verdict::Score(x) => Err(Error::JudgeTransport(format!("score {x} outside [0, 1]"))),
            Verdict::Accept(b) => Ok(if b { 1.0 } else { 0.0 }),
        }
    }
}
