use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grpo::{bias_accounting, Group};

/// Split of fatal rollouts by the sign of their normalized score: clamped
/// (r̃ < 0, advantage raised to 0) or preserved (r̃ >= 0).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FatalSplit {
    pub groups: usize,
    pub rollouts: usize,
    pub fatal: usize,
    pub clamped: usize,
    pub preserved: usize,
    pub sum_clamped: f64,
    pub sum_preserved: f64,
    pub sum_bias: f64,
}

impl FatalSplit {
    pub fn add(&mut self, normalized: &[f64], fatal: &[bool]) {
        self.groups += 1;
        self.rollouts += normalized.len();
        for (&r, &f) in normalized.iter().zip(fatal) {
            if !f {
                continue;
            }
            self.fatal += 1;
            if r < 0.0 {
                self.clamped += 1;
                self.sum_clamped += r;
            } else {
                self.preserved += 1;
                self.sum_preserved += r;
            }
        }
        self.sum_bias += bias_accounting(normalized, fatal);
    }

    pub fn add_group(&mut self, g: &Group<f64>) {
        self.add(&g.normalized, &g.fatal_flags());
    }

    pub fn fraction_fatal(&self) -> f64 {
        ratio(self.fatal, self.rollouts).unwrap_or(0.0)
    }

    /// `None` when there are no fatal rollouts.
    pub fn fraction_clamped(&self) -> Option<f64> {
        ratio(self.clamped, self.fatal)
    }

    pub fn fraction_preserved(&self) -> Option<f64> {
        ratio(self.preserved, self.fatal)
    }

    pub fn mean_clamped(&self) -> Option<f64> {
        (self.clamped > 0).then(|| self.sum_clamped / self.clamped as f64)
    }

    pub fn mean_preserved(&self) -> Option<f64> {
        (self.preserved > 0).then(|| self.sum_preserved / self.preserved as f64)
    }

    pub fn mean_bias(&self) -> f64 {
        if self.groups == 0 {
            0.0
        } else {
            self.sum_bias / self.groups as f64
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One row per optimization step. Empty cells mean "no fatal rollouts".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_turns_per_rollout: f64,
    pub batch_accuracy: f64,
    pub fraction_fatal: f64,
    pub fraction_fatal_clamped: Option<f64>,
    pub fraction_fatal_preserved: Option<f64>,
    pub mean_preclamp_clamped: Option<f64>,
    pub mean_preclamp_preserved: Option<f64>,
    #[serde(rename = "mean_b_G")]
    pub mean_b_g: f64,
    pub mean_reward: f64,
    pub objective: f64,
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "step",
    "mean_turns_per_rollout",
    "batch_accuracy",
    "fraction_fatal",
    "fraction_fatal_clamped",
    "fraction_fatal_preserved",
    "mean_preclamp_clamped",
    "mean_preclamp_preserved",
    "mean_b_G",
    "mean_reward",
    "objective",
];

impl MetricsRow {
    pub fn from_groups(step: usize, groups: &[Group<f64>], objective: f64) -> Self {
        let mut split = FatalSplit::default();
        let mut turns = 0;
        let mut acc = 0.0;
        let mut reward = 0.0;
        for g in groups {
            split.add_group(g);
            turns += g.trajectories.iter().map(|t| t.num_steps()).sum::<usize>();
            acc += g.rewards.iter().map(|b| b.r_acc).sum::<f64>();
            reward += g.rewards.iter().map(|b| b.composite).sum::<f64>();
        }
        let n = split.rollouts.max(1) as f64;
        Self {
            step,
            mean_turns_per_rollout: turns as f64 / n,
            batch_accuracy: acc / n,
            fraction_fatal: split.fraction_fatal(),
            fraction_fatal_clamped: split.fraction_clamped(),
            fraction_fatal_preserved: split.fraction_preserved(),
            mean_preclamp_clamped: split.mean_clamped(),
            mean_preclamp_preserved: split.mean_preserved(),
            mean_b_g: split.mean_bias(),
            mean_reward: reward / n,
            objective,
        }
    }
}

/// Writes rows as CSV. The header is written even when `rows` is empty.
pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
