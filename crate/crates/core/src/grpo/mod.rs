//! Group-relative policy optimization with fatal-aware masking and clamping.
//!
//! A group is G rollouts of one prompt. Rewards are normalized against the
//! whole group (fatal rollouts included), then each variant picks a token
//! mask and an advantage per rollout:
//!
//! | variant           | mask                         | advantage        |
//! |-------------------|------------------------------|------------------|
//! | `vanilla_grpo`    | generation mask              | r̃, over \|τ\|    |
//! | `search_grpo`     | generation mask              | r̃               |
//! | `hard_mask`       | zero for fatal rollouts      | r̃               |
//! | `fatal_mask_only` | generation mask, steps < f   | r̃               |
//! | `fatal_clamp`     | generation mask, steps < f   | max(r̃, 0) if fatal |

mod sample;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::LogitTable;
use crate::reward::Breakdown;
use crate::trajectory::{MaskVector, Trajectory};
use crate::Scalar;

pub use sample::GroupSampler;

pub const DEFAULT_DELTA: f64 = 1e-6;
pub const DEFAULT_KL_BETA: f64 = 1e-3;
pub const DEFAULT_LR: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    VanillaGrpo,
    SearchGrpo,
    HardMask,
    FatalMaskOnly,
    #[default]
    FatalClamp,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::VanillaGrpo,
        Variant::SearchGrpo,
        Variant::HardMask,
        Variant::FatalMaskOnly,
        Variant::FatalClamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaGrpo => "vanilla_grpo",
            Variant::SearchGrpo => "search_grpo",
            Variant::HardMask => "hard_mask",
            Variant::FatalMaskOnly => "fatal_mask_only",
            Variant::FatalClamp => "fatal_clamp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the full names and the short forms `vanilla` and `search`.
    fn from_str(s: &str) -> Result<Self> {
        let s = match s {
            "vanilla" => "vanilla_grpo",
            "search" => "search_grpo",
            _ => s,
        };
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algo '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Each rollout's token sum is divided by its mask count.
    #[default]
    PerTrajTokenMean,
    /// Token sums are used as is.
    SeqMeanTokenSum,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_traj_token_mean" => Ok(Self::PerTrajTokenMean),
            "seq_mean_token_sum" => Ok(Self::SeqMeanTokenSum),
            _ => Err(Error::Config(format!("unknown aggregation '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageEstimator {
    /// (r - mean) / (std + delta).
    #[default]
    GroupNorm,
    /// r_i minus the mean of the other rewards.
    Rloo,
}

impl FromStr for AdvantageEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group_norm" => Ok(Self::GroupNorm),
            "rloo" => Ok(Self::Rloo),
            _ => Err(Error::Config(format!("unknown advantage_estimator '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClipRange<T> {
    pub low: T,
    pub high: T,
}

impl<T: Scalar> ClipRange<T> {
    pub fn symmetric(eps: T) -> Self {
        Self { low: eps, high: eps }
    }

    /// 0.2 below, 0.28 above.
    pub fn asymmetric() -> Self {
        Self {
            low: T::lit(0.2),
            high: T::lit(0.28),
        }
    }

    pub fn clip(&self, rho: T) -> T {
        rho.max(T::one() - self.low).min(T::one() + self.high)
    }
}

impl<T: Scalar> Default for ClipRange<T> {
    fn default() -> Self {
        Self::symmetric(T::lit(0.2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AlgoConfig<T> {
    pub variant: Variant,
    pub clip: ClipRange<T>,
    pub kl_enabled: bool,
    pub kl_beta: T,
    pub aggregation: Aggregation,
    pub estimator: AdvantageEstimator,
    pub delta: T,
    pub lr: T,
}

impl<T: Scalar> Default for AlgoConfig<T> {
    fn default() -> Self {
        Self {
            variant: Variant::default(),
            clip: ClipRange::default(),
            kl_enabled: false,
            kl_beta: T::lit(DEFAULT_KL_BETA),
            aggregation: Aggregation::default(),
            estimator: AdvantageEstimator::default(),
            delta: T::lit(DEFAULT_DELTA),
            lr: T::lit(DEFAULT_LR),
        }
    }
}

impl<T: Scalar> AlgoConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: T| {
            if x > T::zero() && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {x}")))
            }
        };
        positive("clip_low", self.clip.low)?;
        positive("clip_high", self.clip.high)?;
        positive("delta", self.delta)?;
        if !(self.lr >= T::zero() && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be non-negative", self.lr)));
        }
        if self.clip.low >= T::one() {
            return Err(Error::Config(format!("clip_low {} must be below 1", self.clip.low)));
        }
        if !(self.kl_beta >= T::zero() && self.kl_beta.is_finite()) {
            return Err(Error::Config(format!("kl_beta {} must be non-negative", self.kl_beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroupStats<T> {
    pub mean: T,
    /// Population standard deviation.
    pub std: T,
}

pub fn group_stats<T: Scalar>(rewards: &[T]) -> Result<GroupStats<T>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let n = T::from_usize(rewards.len()).unwrap();
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    Ok(GroupStats { mean, std: var.sqrt() })
}

pub fn normalize<T: Scalar>(rewards: &[T], stats: GroupStats<T>, delta: T) -> Vec<T> {
    rewards.iter().map(|&r| (r - stats.mean) / (stats.std + delta)).collect()
}

pub fn leave_one_out<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let total: T = rewards.iter().copied().sum();
    let others = T::from_usize(rewards.len() - 1).unwrap();
    Ok(rewards.iter().map(|&r| r - (total - r) / others).collect())
}

pub fn clamp_advantages<T: Scalar>(scores: &[T], fatal: &[bool]) -> Vec<T> {
    assert_eq!(scores.len(), fatal.len(), "fatal flags must align with scores");
    scores
        .iter()
        .zip(fatal)
        .map(|(&s, &f)| if f { s.max(T::zero()) } else { s })
        .collect()
}

/// b_G = (1/G) sum over fatal rollouts of max(0, -r̃): how far clamping
/// lifts the mean advantage above zero.
pub fn bias_accounting<T: Scalar>(scores: &[T], fatal: &[bool]) -> T {
    assert_eq!(scores.len(), fatal.len(), "fatal flags must align with scores");
    let lifted: T = scores
        .iter()
        .zip(fatal)
        .filter(|(_, &f)| f)
        .map(|(&s, _)| (-s).max(T::zero()))
        .sum();
    lifted / T::from_usize(scores.len().max(1)).unwrap()
}

/// G rollouts of one prompt with their rewards and advantages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Group<T> {
    pub prompt_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<Breakdown<T>>,
    pub stats: GroupStats<T>,
    /// r̃.
    pub normalized: Vec<T>,
    /// Â.
    pub clamped: Vec<T>,
    pub delta: T,
}

impl<T: Scalar> Group<T> {
    pub fn assemble(
        prompt_id: u64,
        trajectories: Vec<Trajectory>,
        mut rewards: Vec<Breakdown<T>>,
        estimator: AdvantageEstimator,
        delta: T,
    ) -> Result<Self> {
        if trajectories.len() != rewards.len() {
            return Err(Error::Shape {
                expected: (trajectories.len(), 1),
                found: (rewards.len(), 1),
            });
        }
        if let Some(t) = trajectories.iter().find(|t| t.prompt() != trajectories[0].prompt()) {
            return Err(Error::Trajectory(format!(
                "group {prompt_id} mixes prompts: {:?} vs {:?}",
                trajectories[0].prompt(),
                t.prompt()
            )));
        }
        if delta.is_nan() || delta <= T::zero() {
            return Err(Error::Config(format!("delta must be positive, got {delta}")));
        }
        let r: Vec<T> = rewards.iter().map(|b| b.composite).collect();
        let stats = group_stats(&r)?;
        let normalized = match estimator {
            AdvantageEstimator::GroupNorm => normalize(&r, stats, delta),
            AdvantageEstimator::Rloo => leave_one_out(&r)?,
        };
        let fatal: Vec<bool> = trajectories.iter().map(Trajectory::is_fatal).collect();
        let clamped = clamp_advantages(&normalized, &fatal);
        for ((b, &n), &a) in rewards.iter_mut().zip(&normalized).zip(&clamped) {
            b.normalized = Some(n);
            b.advantage = Some(a);
        }
        Ok(Self {
            prompt_id,
            trajectories,
            rewards,
            stats,
            normalized,
            clamped,
            delta,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn fatal_flags(&self) -> Vec<bool> {
        self.trajectories.iter().map(Trajectory::is_fatal).collect()
    }

    pub fn bias(&self) -> T {
        bias_accounting(&self.normalized, &self.fatal_flags())
    }
}

/// Mask, advantage and normalizer of one rollout under a variant.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec<T> {
    pub mask: MaskVector,
    pub advantage: T,
    /// Divides the rollout's token sum. Zero means "contributes nothing".
    pub denominator: T,
}

impl<T: Scalar> LossSpec<T> {
    pub fn new(mask: MaskVector, advantage: T, aggregation: Aggregation) -> Self {
        let denominator = match aggregation {
            Aggregation::PerTrajTokenMean => T::from_usize(mask.count_ones()).unwrap(),
            Aggregation::SeqMeanTokenSum if mask.count_ones() == 0 => T::zero(),
            Aggregation::SeqMeanTokenSum => T::one(),
        };
        Self {
            mask,
            advantage,
            denominator,
        }
    }

    fn scale(&self, group_size: usize) -> T {
        if self.denominator.is_zero() {
            T::zero()
        } else {
            T::one() / (self.denominator * T::from_usize(group_size).unwrap())
        }
    }
}

pub fn variant_masks<T: Scalar>(variant: Variant, aggregation: Aggregation, group: &Group<T>) -> Vec<LossSpec<T>> {
    group
        .trajectories
        .iter()
        .zip(group.normalized.iter().zip(&group.clamped))
        .map(|(traj, (&norm, &clamped))| {
            let f = traj.fatal_index();
            match variant {
                Variant::VanillaGrpo => {
                    let mut spec = LossSpec::new(traj.generation_mask(), norm, aggregation);
                    if aggregation == Aggregation::PerTrajTokenMean && spec.mask.count_ones() > 0 {
                        spec.denominator = T::from_usize(traj.tokens().len()).unwrap();
                    }
                    spec
                }
                Variant::SearchGrpo => LossSpec::new(traj.generation_mask(), norm, aggregation),
                Variant::HardMask if traj.is_fatal() => {
                    LossSpec::new(MaskVector::zeros(traj.tokens().len()), norm, aggregation)
                }
                Variant::HardMask => LossSpec::new(traj.generation_mask(), norm, aggregation),
                Variant::FatalMaskOnly => LossSpec::new(traj.fatal_mask(f), norm, aggregation),
                Variant::FatalClamp => LossSpec::new(traj.fatal_mask(f), clamped, aggregation),
            }
        })
        .collect()
}

/// Per-token pieces of the clipped surrogate for one rollout, aligned with
/// its token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTerms<T> {
    /// M_t * min(rho A, clip(rho) A); zero off the mask.
    pub terms: Vec<T>,
    pub ratios: Vec<T>,
    /// Whether the unclipped branch is active (the gradient flows).
    pub active: Vec<bool>,
}

pub fn token_terms<T: Scalar>(
    params: &LogitTable<T>,
    old: &LogitTable<T>,
    traj: &Trajectory,
    spec: &LossSpec<T>,
    clip: ClipRange<T>,
) -> Result<TokenTerms<T>> {
    let n = traj.tokens().len();
    if spec.mask.len() != n {
        return Err(Error::Shape {
            expected: (n, 1),
            found: (spec.mask.len(), 1),
        });
    }
    let rho_policy = params.importance_ratios(old, traj)?;
    let mut out = TokenTerms {
        terms: vec![T::zero(); n],
        ratios: vec![T::one(); n],
        active: vec![false; n],
    };
    let a = spec.advantage;
    for (pt, rho) in params.policy_tokens(traj).into_iter().zip(rho_policy) {
        out.ratios[pt.pos] = rho;
        if !spec.mask.get(pt.pos) {
            continue;
        }
        let unclipped = rho * a;
        let clipped = clip.clip(rho) * a;
        out.terms[pt.pos] = unclipped.min(clipped);
        out.active[pt.pos] = !a.is_zero() && unclipped <= clipped;
    }
    Ok(out)
}

fn surrogate_weights<T: Scalar>(terms: &TokenTerms<T>, advantage: T, scale: T) -> Vec<T> {
    terms
        .active
        .iter()
        .zip(&terms.ratios)
        .map(|(&on, &rho)| if on { advantage * rho * scale } else { T::zero() })
        .collect()
}

/// One rollout's share of the objective and its gradient, scaled by
/// 1/denominator but not by 1/G.
pub fn trajectory_contribution<T: Scalar>(
    params: &LogitTable<T>,
    old: &LogitTable<T>,
    traj: &Trajectory,
    spec: &LossSpec<T>,
    clip: ClipRange<T>,
) -> Result<(T, LogitTable<T>)> {
    let scale = spec.scale(1);
    let terms = token_terms(params, old, traj, spec, clip)?;
    let value = terms.terms.iter().copied().sum::<T>() * scale;
    let grad = params.score_gradient(traj, &surrogate_weights(&terms, spec.advantage, scale))?;
    Ok((value, grad))
}

/// Objective value and gradient of a group.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    /// surrogate - kl.
    pub value: T,
    pub surrogate: T,
    pub kl: T,
    pub gradient: LogitTable<T>,
}

/// The clipped surrogate J and its gradient. Rollouts are reduced in index
/// order into one table, so equal inputs give bitwise-equal outputs.
pub fn surrogate<T: Scalar>(
    params: &LogitTable<T>,
    old: &LogitTable<T>,
    group: &Group<T>,
    specs: &[LossSpec<T>],
    clip: ClipRange<T>,
) -> Result<(T, LogitTable<T>)> {
    let obj = objective(params, old, None, group, specs, clip, T::zero())?;
    Ok((obj.surrogate, obj.gradient))
}

/// Surrogate minus `kl_beta` times the KL estimate, both normalized per
/// rollout like the surrogate. `reference` is required iff `kl_beta > 0`.
pub fn objective<T: Scalar>(
    params: &LogitTable<T>,
    old: &LogitTable<T>,
    reference: Option<&LogitTable<T>>,
    group: &Group<T>,
    specs: &[LossSpec<T>],
    clip: ClipRange<T>,
    kl_beta: T,
) -> Result<Objective<T>> {
    if specs.len() != group.size() {
        return Err(Error::Shape {
            expected: (group.size(), 1),
            found: (specs.len(), 1),
        });
    }
    let reference = match (kl_beta > T::zero(), reference) {
        (true, None) => return Err(Error::MissingReference),
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let g = group.size();
    let mut gradient = params.zeros_like();
    let mut surr = T::zero();
    let mut kl = T::zero();
    for (traj, spec) in group.trajectories.iter().zip(specs) {
        let scale = spec.scale(g);
        if scale.is_zero() {
            continue;
        }
        let terms = token_terms(params, old, traj, spec, clip)?;
        surr += terms.terms.iter().copied().sum::<T>() * scale;
        let mut weights = surrogate_weights(&terms, spec.advantage, scale);
        if let Some(reference) = reference {
            let (value, kl_weights) = kl_terms(params, reference, traj, &spec.mask, kl_beta)?;
            kl += value * scale;
            for (w, k) in weights.iter_mut().zip(kl_weights) {
                *w -= k * scale;
            }
        }
        params.score_gradient_into(traj, &weights, &mut gradient)?;
    }
    Ok(Objective {
        value: surr - kl,
        surrogate: surr,
        kl,
        gradient,
    })
}

/// beta * sum of masked k_t, and the per-token score weights of its gradient.
fn kl_terms<T: Scalar>(
    params: &LogitTable<T>,
    reference: &LogitTable<T>,
    traj: &Trajectory,
    mask: &MaskVector,
    beta: T,
) -> Result<(T, Vec<T>)> {
    params.ensure_same_shape(reference)?;
    if mask.len() != traj.tokens().len() {
        return Err(Error::Shape {
            expected: (traj.tokens().len(), 1),
            found: (mask.len(), 1),
        });
    }
    let lp = params.logprobs(traj)?;
    let lref = reference.logprobs(traj)?;
    let mut weights = vec![T::zero(); mask.len()];
    let mut value = T::zero();
    for ((pt, a), b) in params.policy_tokens(traj).into_iter().zip(lp).zip(lref) {
        if !mask.get(pt.pos) {
            continue;
        }
        let log_r = b - a;
        let r = log_r.exp();
        value += beta * (r - log_r - T::one());
        // d k / d log pi_theta = 1 - r
        weights[pt.pos] = beta * (T::one() - r);
    }
    Ok((value, weights))
}

/// `beta * sum_t M_t (r - log r - 1)` with `r = pi_ref / pi_theta`, and its
/// gradient with respect to the logits of `params`.
pub fn kl_penalty<T: Scalar>(
    params: &LogitTable<T>,
    reference: Option<&LogitTable<T>>,
    traj: &Trajectory,
    mask: &MaskVector,
    beta: T,
) -> Result<(T, LogitTable<T>)> {
    let reference = reference.ok_or(Error::MissingReference)?;
    let (value, weights) = kl_terms(params, reference, traj, mask, beta)?;
    Ok((value, params.score_gradient(traj, &weights)?))
}

/// Plain gradient ascent: `params += lr * gradient`.
pub fn update<T: Scalar>(params: &mut LogitTable<T>, gradient: &LogitTable<T>, lr: T) -> Result<()> {
    if let Some(i) = gradient.as_slice().iter().position(|x| !x.is_finite()) {
        let (_, v) = gradient.shape();
        return Err(Error::NonFinite(format!(
            "gradient entry (bucket {}, token {}) = {}",
            i / v.max(1),
            i % v.max(1),
            gradient.as_slice()[i]
        )));
    }
    params.add_scaled(gradient, lr)
}
