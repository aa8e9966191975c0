//! Independent oracles for the optimizer.
//!
//! Nothing here calls the engine's gradient assembly: the finite-difference
//! oracle only evaluates objectives, and [`reinforce_oracle`] recomputes the
//! score function from raw logits with its own softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{self, Aggregation, ClipRange, Group, LossSpec, Variant};
use crate::policy::{policy_tokens, LogitTable};
use crate::trajectory::{MaskVector, Trajectory};
use crate::Scalar;

pub const DEFAULT_H: f64 = 1e-5;
pub const SURROGATE_THRESHOLD: f64 = 1e-5;
pub const DOMINANCE_TOLERANCE: f64 = 1e-12;

/// Central differences of `objective` around `params`, one coordinate at a
/// time.
pub fn finite_diff_gradient<T: Scalar>(
    params: &LogitTable<T>,
    h: T,
    objective: impl Fn(&LogitTable<T>) -> Result<T>,
) -> Result<LogitTable<T>> {
    let (rows, _) = params.shape();
    finite_diff_rows(params, h, &(0..rows).collect::<Vec<_>>(), objective)
}

/// [`finite_diff_gradient`] over the listed rows only; all other entries
/// are left at zero.
pub fn finite_diff_rows<T: Scalar>(
    params: &LogitTable<T>,
    h: T,
    rows: &[usize],
    objective: impl Fn(&LogitTable<T>) -> Result<T>,
) -> Result<LogitTable<T>> {
    if h.is_nan() || h <= T::zero() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let (num_rows, vocab) = params.shape();
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    for i in rows.iter().filter(|&&r| r < num_rows).flat_map(|&r| r * vocab..(r + 1) * vocab) {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = objective(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let down = objective(&probe)?;
        probe.as_mut_slice()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.as_mut_slice()[i] = (up - down) / (h + h);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Pass,
    /// Fails at h but the error collapses at h/10: the step was too coarse.
    TruncationError,
    /// The analytic gradient disagrees at both step sizes.
    Mismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (bucket, token) of the largest deviation.
    pub coordinate: Option<(usize, usize)>,
    pub h: f64,
    pub threshold: f64,
    pub pass: bool,
    pub diagnosis: Diagnosis,
}

/// max |a - n| / max(|a|_inf, |n|_inf), and where it happens.
pub fn relative_error<T: Scalar>(analytic: &LogitTable<T>, numeric: &LogitTable<T>) -> (f64, Option<(usize, usize)>) {
    let a = analytic.as_slice();
    let n = numeric.as_slice();
    let scale = a
        .iter()
        .chain(n)
        .map(|x| x.as_f64().abs())
        .fold(f64::MIN_POSITIVE, f64::max);
    let (_, vocab) = analytic.shape();
    let mut worst = (0.0, None);
    for (i, (x, y)) in a.iter().zip(n).enumerate() {
        let d = (x.as_f64() - y.as_f64()).abs() / scale;
        if d > worst.0 || worst.1.is_none() && d > 0.0 {
            worst = (d, Some((i / vocab.max(1), i % vocab.max(1))));
        }
    }
    worst
}

/// Compares `analytic` with central differences of `objective`. A failure
/// is re-run at h/10 to tell truncation error from a real mismatch.
pub fn gradcheck<T: Scalar>(
    params: &LogitTable<T>,
    analytic: &LogitTable<T>,
    h: f64,
    threshold: f64,
    objective: impl Fn(&LogitTable<T>) -> Result<T>,
) -> Result<GradCheckReport> {
    let (rows, _) = params.shape();
    gradcheck_rows(params, analytic, &(0..rows).collect::<Vec<_>>(), h, threshold, objective)
}

/// Buckets visited by any policy token of `trajectories`. Logits in other
/// rows never enter a surrogate over these trajectories, so its gradient
/// there is exactly zero.
pub fn visited_rows<T: Scalar>(params: &LogitTable<T>, trajectories: &[Trajectory]) -> Vec<usize> {
    let mut rows: Vec<usize> = trajectories
        .iter()
        .flat_map(|t| policy_tokens(params.bucketer(), t))
        .map(|p| p.bucket)
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

/// [`gradcheck`] with differences taken only over `rows`. The analytic
/// gradient must be exactly zero everywhere else; any nonzero entry there
/// is reported as a mismatch.
pub fn gradcheck_rows<T: Scalar>(
    params: &LogitTable<T>,
    analytic: &LogitTable<T>,
    rows: &[usize],
    h: f64,
    threshold: f64,
    objective: impl Fn(&LogitTable<T>) -> Result<T>,
) -> Result<GradCheckReport> {
    params.ensure_same_shape(analytic)?;
    let numeric = finite_diff_rows(params, T::lit(h), rows, &objective)?;
    let (err, coordinate) = relative_error(analytic, &numeric);
    let pass = err < threshold;
    let diagnosis = if pass {
        Diagnosis::Pass
    } else {
        let finer = finite_diff_rows(params, T::lit(h / 10.0), rows, &objective)?;
        let (err_fine, _) = relative_error(analytic, &finer);
        if err_fine < threshold || err_fine < err / 50.0 {
            Diagnosis::TruncationError
        } else {
            Diagnosis::Mismatch
        }
    };
    Ok(GradCheckReport {
        max_rel_error: err,
        coordinate,
        h,
        threshold,
        pass,
        diagnosis,
    })
}

fn oracle_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `(1/sum M) sum_t M_t A grad log pi(y_t)` at `params`, summed term by term
/// from the softmax. Equals the engine's per-rollout gradient at
/// `params == old`, where every ratio is 1 and no token is clipped.
pub fn reinforce_oracle<T: Scalar>(
    params: &LogitTable<T>,
    traj: &Trajectory,
    advantage: T,
    mask: &MaskVector,
) -> LogitTable<T> {
    let mut out = params.zeros_like();
    let count = mask.count_ones();
    if count == 0 || advantage.is_zero() {
        return out;
    }
    let coef = advantage / T::from_usize(count).unwrap();
    for pt in policy_tokens(params.bucketer(), traj) {
        if !mask.get(pt.pos) {
            continue;
        }
        let probs = oracle_softmax(params.row(pt.bucket));
        for (v, p) in probs.into_iter().enumerate() {
            let indicator = if v == pt.token as usize { T::one() } else { T::zero() };
            let cur = out.get(pt.bucket, v);
            out.set(pt.bucket, v, cur + coef * (indicator - p));
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// Fatal rollouts with r̃ < 0.
    pub case_i: usize,
    /// Fatal rollouts with r̃ >= 0.
    pub case_ii: usize,
    /// Largest |entry| of a case-(i) gradient (must be exactly 0).
    pub case_i_max_abs: f64,
    /// Largest deviation from search-style GRPO on the viable prefix.
    pub case_ii_max_dev: f64,
    /// Largest |entry| of a fatal rollout's hard-mask gradient.
    pub hard_mask_max_abs: f64,
    pub pass: bool,
}

fn max_abs<T: Scalar>(t: &LogitTable<T>) -> f64 {
    t.max_abs().as_f64()
}

fn max_dev<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let x = a.get(i).map_or(0.0, |v| v.as_f64());
            let y = b.get(i).map_or(0.0, |v| v.as_f64());
            (x - y).abs()
        })
        .fold(0.0, f64::max)
}

/// Checks both cases of the dominance argument on every fatal rollout of
/// every group, at parameters `params` with behavior policy `old`.
pub fn check_dominance<T: Scalar>(
    groups: &[Group<T>],
    params: &LogitTable<T>,
    old: &LogitTable<T>,
    clip: ClipRange<T>,
) -> Result<DominanceReport> {
    check_dominance_with(groups, params, old, clip, grpo::clamp_advantages)
}

/// [`check_dominance`] with the clamp supplied by the caller, so a broken
/// clamp can be shown to fail the check.
pub fn check_dominance_with<T: Scalar>(
    groups: &[Group<T>],
    params: &LogitTable<T>,
    old: &LogitTable<T>,
    clip: ClipRange<T>,
    clamp: impl Fn(&[T], &[bool]) -> Vec<T>,
) -> Result<DominanceReport> {
    let mut report = DominanceReport::default();
    let agg = Aggregation::PerTrajTokenMean;
    for group in groups {
        let fatal = group.fatal_flags();
        let advantages = clamp(&group.normalized, &fatal);
        let hard = grpo::variant_masks(Variant::HardMask, agg, group);
        for (i, traj) in group.trajectories.iter().enumerate() {
            if !fatal[i] {
                continue;
            }
            let f = traj.fatal_index();
            let r = group.normalized[i];
            let spec = LossSpec::new(traj.fatal_mask(f), advantages[i], agg);
            let (_, grad) = grpo::trajectory_contribution(params, old, traj, &spec, clip)?;
            let (_, hard_grad) = grpo::trajectory_contribution(params, old, traj, &hard[i], clip)?;
            report.hard_mask_max_abs = report.hard_mask_max_abs.max(max_abs(&hard_grad));
            if r < T::zero() {
                report.case_i += 1;
                report.case_i_max_abs = report.case_i_max_abs.max(max_abs(&grad));
            } else {
                report.case_ii += 1;
                let prefix = traj.truncated(f);
                let search = LossSpec::new(prefix.generation_mask(), r, agg);
                let ours = grpo::token_terms(params, old, traj, &spec, clip)?;
                let theirs = grpo::token_terms(params, old, &prefix, &search, clip)?;
                let (_, search_grad) = grpo::trajectory_contribution(params, old, &prefix, &search, clip)?;
                let dev = max_dev(&ours.terms, &theirs.terms).max(max_dev(grad.as_slice(), search_grad.as_slice()));
                report.case_ii_max_dev = report.case_ii_max_dev.max(dev);
            }
        }
    }
    report.pass =
        report.case_i_max_abs == 0.0 && report.hard_mask_max_abs == 0.0 && report.case_ii_max_dev <= DOMINANCE_TOLERANCE;
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampBiasReport {
    pub groups: usize,
    /// max over groups of |mean(Â) - b_G|.
    pub max_dev: f64,
    pub mean_bias: f64,
    pub pass: bool,
}

/// mean(Â) = b_G on every group, with Â and b_G recomputed from r̃ here.
pub fn check_clamp_bias<T: Scalar>(groups: &[Group<T>], tol: f64) -> ClampBiasReport {
    let mut report = ClampBiasReport {
        groups: groups.len(),
        ..Default::default()
    };
    for g in groups {
        let n = g.size() as f64;
        let mut mean_adv = 0.0;
        let mut bias = 0.0;
        for ((&r, &a), t) in g.normalized.iter().zip(&g.clamped).zip(&g.trajectories) {
            let r = r.as_f64();
            mean_adv += a.as_f64() / n;
            if t.is_fatal() && r < 0.0 {
                bias -= r / n;
            }
        }
        report.max_dev = report.max_dev.max((mean_adv - bias).abs());
        report.mean_bias += bias / groups.len() as f64;
    }
    report.pass = report.max_dev <= tol;
    report
}
