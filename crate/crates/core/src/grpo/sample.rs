use super::{AdvantageEstimator, Group};
use crate::env::{derive_seed, reset, rollout, stream_rng, EnvConfig, RolloutOptions, POLICY_STREAM};
use crate::error::Result;
use crate::policy::{LogitTable, Sampler, Sampling};
use crate::reward::RewardSuite;
use crate::Scalar;

/// Everything needed to turn a prompt seed into a scored group.
#[derive(Debug)]
pub struct GroupSampler<'a, T> {
    pub env: &'a EnvConfig,
    pub rollout: RolloutOptions,
    pub sampling: Sampling<T>,
    pub suite: &'a RewardSuite,
    pub estimator: AdvantageEstimator,
    pub delta: T,
    pub group_size: usize,
}

impl<T: Scalar> GroupSampler<'_, T> {
    /// G rollouts of the task `reset(env, prompt_seed)`. Member `i` draws its
    /// tool failures and its tokens from seeds derived from (prompt_seed, i),
    /// so the group is a pure function of its inputs.
    pub fn sample(&self, params: &LogitTable<T>, prompt_seed: u64) -> Result<Group<T>> {
        let mut trajectories = Vec::with_capacity(self.group_size);
        let mut rewards = Vec::with_capacity(self.group_size);
        for i in 0..self.group_size as u64 {
            let (mut env, prompt) = reset(self.env, prompt_seed)?;
            let member = derive_seed(prompt_seed, i);
            env.reseed_errors(member);
            let mut rng = stream_rng(member, POLICY_STREAM);
            let mut source = Sampler {
                params,
                sampling: self.sampling,
            };
            let traj = rollout(&mut source, &mut env, prompt, &self.rollout, &mut rng)?;
            rewards.push(self.suite.score(&traj, &env.truth())?);
            trajectories.push(traj);
        }
        Group::assemble(prompt_seed, trajectories, rewards, self.estimator, self.delta)
    }
}
