//! Randomized but reproducible inputs for checks and tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{stream_rng, EnvConfig, RolloutOptions};
use crate::error::Result;
use crate::grpo::{AdvantageEstimator, Group, GroupSampler, DEFAULT_DELTA};
use crate::policy::{Bucketer, LogitTable, Sampling, DEFAULT_TEMPERATURE};
use crate::reward::RewardSuite;
use crate::trajectory::grammar::{Advance, Tool};
use crate::Scalar;

/// Uniform logits in `[-scale, scale]`, plus `legal_bias` on every token the
/// grammar accepts in the bucket's phase, so sampled spans are mostly
/// well-formed and groups mix successes, failures and fatal cascades.
pub fn random_params<T: Scalar>(
    bucketer: Bucketer,
    vocab: usize,
    scale: f64,
    legal_bias: f64,
    rng: &mut ChaCha8Rng,
) -> LogitTable<T> {
    let mut p = LogitTable::zeros(bucketer, vocab);
    let (buckets, _) = p.shape();
    for c in 0..buckets {
        let phase = bucketer.phase_of(c);
        for v in 0..vocab {
            let legal = phase.is_some_and(|ph| ph.advance(v as u32) != Advance::Violation);
            let x = rng.gen_range(-scale..=scale) + if legal { legal_bias } else { 0.0 };
            p.set(c, v, T::lit(x));
        }
    }
    p
}

/// Environment used by the randomized checks: noisy tools and one trap, so
/// fatal rollouts are common.
pub fn trap_env() -> EnvConfig {
    EnvConfig {
        p_error: 0.2,
        trap_tools: [Tool::Probe].into(),
        ..EnvConfig::default()
    }
}

/// A scored group of `group_size` rollouts from random parameters.
pub fn random_group<T: Scalar>(seed: u64, group_size: usize) -> Result<(LogitTable<T>, Group<T>)> {
    random_group_in(&trap_env(), seed, group_size)
}

/// [`random_group`] on a caller-chosen environment.
pub fn random_group_in<T: Scalar>(env: &EnvConfig, seed: u64, group_size: usize) -> Result<(LogitTable<T>, Group<T>)> {
    let env = env.clone();
    let mut rng = stream_rng(seed, 7);
    let params = random_params(Bucketer::Grammar, env.vocab_size as usize, 1.0, 3.0, &mut rng);
    let suite = RewardSuite::default();
    let sampler = GroupSampler {
        env: &env,
        rollout: RolloutOptions::default(),
        sampling: Sampling::Temperature(T::lit(DEFAULT_TEMPERATURE)),
        suite: &suite,
        estimator: AdvantageEstimator::GroupNorm,
        delta: T::lit(DEFAULT_DELTA),
        group_size,
    };
    let group = sampler.sample(&params, seed)?;
    Ok((params, group))
}

/// `params` with every logit moved by up to `scale`.
pub fn perturb<T: Scalar>(params: &LogitTable<T>, scale: f64, rng: &mut ChaCha8Rng) -> LogitTable<T> {
    let mut out = params.clone();
    for x in out.as_mut_slice() {
        *x += T::lit(rng.gen_range(-scale..=scale));
    }
    out
}
