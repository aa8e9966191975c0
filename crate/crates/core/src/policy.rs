//! Tabular softmax policy.
//!
//! The policy is a table of logits indexed by (context bucket, token). The
//! bucket of a token is a pure function of its history prefix: the parser
//! phase inside the current action span, the execution status of the
//! previous step, and how many chain values have been revealed (capped at 3).
//! Observation tokens are exogenous; they get no probability and no
//! gradient, and only influence later buckets through the history.

use std::io::{BufReader, BufWriter};
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::ActionSource;
use crate::error::{Error, Result};
use crate::trajectory::grammar::{self, is_value_token, Advance, Phase, TokenId};
use crate::trajectory::{ExecStatus, History, Observation, Origin, StepRecord, Trajectory};
use crate::Scalar;

/// Rollout temperature used unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

const PROGRESS_LEVELS: usize = 4;
const STATUS_LEVELS: usize = 3;

/// Maps a history prefix to a row of the logit table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucketer {
    /// (parser phase, previous status, min(revealed, 3)).
    #[default]
    Grammar,
    /// Every token shares one row.
    Single,
}

impl Bucketer {
    pub fn num_buckets(self) -> usize {
        match self {
            Bucketer::Grammar => Phase::COUNT * STATUS_LEVELS * PROGRESS_LEVELS,
            Bucketer::Single => 1,
        }
    }

    pub fn bucket(self, phase: Phase, ctx: Context) -> usize {
        match self {
            Bucketer::Grammar => {
                (phase.index() * STATUS_LEVELS + ctx.last_status.index()) * PROGRESS_LEVELS
                    + ctx.progress.min(PROGRESS_LEVELS - 1)
            }
            Bucketer::Single => 0,
        }
    }

    /// Parser phase a bucket belongs to; `None` when buckets ignore phase.
    pub fn phase_of(self, bucket: usize) -> Option<Phase> {
        match self {
            Bucketer::Grammar => Phase::ALL.get(bucket / (STATUS_LEVELS * PROGRESS_LEVELS)).copied(),
            Bucketer::Single => None,
        }
    }
}

/// Step-level part of a bucket: what the history says before a step starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Context {
    pub last_status: ExecStatus,
    pub progress: usize,
}

/// Incrementally tracks [`Context`] across steps.
#[derive(Clone, Debug, Default)]
struct ContextTracker {
    last_status: ExecStatus,
    seen: Vec<TokenId>,
}

impl ContextTracker {
    fn context(&self) -> Context {
        Context {
            last_status: self.last_status,
            progress: self.seen.len(),
        }
    }

    fn observe(&mut self, step: &StepRecord) {
        self.last_status = step.exec_status;
        if step.exec_status != ExecStatus::Ok {
            return;
        }
        if let Some(Observation::Text { tokens }) = &step.observation {
            for &t in tokens.iter().filter(|&&t| is_value_token(t)) {
                if !self.seen.contains(&t) {
                    self.seen.push(t);
                }
            }
        }
    }

    fn replay(steps: &[StepRecord]) -> Self {
        let mut tracker = Self::default();
        steps.iter().for_each(|s| tracker.observe(s));
        tracker
    }
}

/// A policy-emitted token with its position in the stream and its bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyToken {
    pub pos: usize,
    pub step: usize,
    pub bucket: usize,
    pub token: TokenId,
}

/// Buckets of every policy token of `traj`, in stream order.
pub fn policy_tokens(bucketer: Bucketer, traj: &Trajectory) -> Vec<PolicyToken> {
    let mut out = Vec::with_capacity(traj.tokens().len());
    let mut tracker = ContextTracker::default();
    let mut pos = 0;
    for (l, step) in traj.steps().iter().enumerate() {
        let ctx = tracker.context();
        for (&token, phase) in step.action_tokens.iter().zip(grammar::span_phases(&step.action_tokens)) {
            out.push(PolicyToken {
                pos,
                step: l,
                bucket: bucketer.bucket(phase, ctx),
                token,
            });
            pos += 1;
        }
        pos += step.observation.as_ref().map_or(0, |o| o.tokens().len());
        tracker.observe(step);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling<T> {
    Temperature(T),
    /// The zero-temperature limit: always the modal token (lowest id on ties).
    Argmax,
}

/// Logit table `[bucket][token]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTable<T> {
    bucketer: Bucketer,
    buckets: usize,
    vocab: usize,
    logits: Vec<T>,
}

/// Frozen copy of a table, used as the behavior or reference policy.
#[derive(Clone, Debug)]
pub struct ParamSnapshot<T>(Arc<LogitTable<T>>);

impl<T> Deref for ParamSnapshot<T> {
    type Target = LogitTable<T>;

    fn deref(&self) -> &LogitTable<T> {
        &self.0
    }
}

impl<T: Scalar> LogitTable<T> {
    pub fn zeros(bucketer: Bucketer, vocab: usize) -> Self {
        let buckets = bucketer.num_buckets();
        Self {
            bucketer,
            buckets,
            vocab,
            logits: vec![T::zero(); buckets * vocab],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.bucketer, self.vocab)
    }

    pub fn from_rows(bucketer: Bucketer, rows: Vec<Vec<T>>) -> Result<Self> {
        let buckets = bucketer.num_buckets();
        let vocab = rows.first().map_or(0, Vec::len);
        if rows.len() != buckets || rows.iter().any(|r| r.len() != vocab) {
            return Err(Error::Shape {
                expected: (buckets, vocab),
                found: (rows.len(), rows.iter().map(Vec::len).max().unwrap_or(0)),
            });
        }
        Ok(Self {
            bucketer,
            buckets,
            vocab,
            logits: rows.into_iter().flatten().collect(),
        })
    }

    pub fn bucketer(&self) -> Bucketer {
        self.bucketer
    }

    /// (C, V).
    pub fn shape(&self) -> (usize, usize) {
        (self.buckets, self.vocab)
    }

    pub fn get(&self, bucket: usize, token: usize) -> T {
        self.logits[bucket * self.vocab + token]
    }

    pub fn set(&mut self, bucket: usize, token: usize, value: T) {
        self.logits[bucket * self.vocab + token] = value;
    }

    pub fn row(&self, bucket: usize) -> &[T] {
        &self.logits[bucket * self.vocab..(bucket + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, bucket: usize) -> &mut [T] {
        &mut self.logits[bucket * self.vocab..(bucket + 1) * self.vocab]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.logits
    }

    pub fn snapshot(&self) -> ParamSnapshot<T> {
        ParamSnapshot(Arc::new(self.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.logits.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() || self.bucketer != other.bucketer {
            return Err(Error::Shape {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, &b) in self.logits.iter_mut().zip(&other.logits) {
            *a += scale * b;
        }
        Ok(())
    }

    fn log_normalizer(&self, bucket: usize) -> T {
        let row = self.row(bucket);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
    }

    pub fn softmax_row(&self, bucket: usize) -> Vec<T> {
        let lse = self.log_normalizer(bucket);
        self.row(bucket).iter().map(|&x| (x - lse).exp()).collect()
    }

    pub fn log_softmax_row(&self, bucket: usize) -> Vec<T> {
        let lse = self.log_normalizer(bucket);
        self.row(bucket).iter().map(|&x| x - lse).collect()
    }

    fn check_tokens(&self, traj: &Trajectory) -> Result<()> {
        match traj.tokens().iter().find(|t| t.token as usize >= self.vocab) {
            Some(t) => Err(Error::TokenOutOfRange {
                token: t.token,
                vocab: self.vocab,
            }),
            None => Ok(()),
        }
    }

    pub fn policy_tokens(&self, traj: &Trajectory) -> Vec<PolicyToken> {
        policy_tokens(self.bucketer, traj)
    }

    /// log pi(y_t | prefix) for each policy token, in stream order.
    pub fn logprobs(&self, traj: &Trajectory) -> Result<Vec<T>> {
        self.check_tokens(traj)?;
        let mut lse: Vec<Option<T>> = vec![None; self.buckets];
        Ok(self
            .policy_tokens(traj)
            .into_iter()
            .map(|pt| {
                let z = *lse[pt.bucket].get_or_insert_with(|| self.log_normalizer(pt.bucket));
                self.get(pt.bucket, pt.token as usize) - z
            })
            .collect())
    }

    /// rho_t = exp(log pi_theta - log pi_old) per policy token.
    pub fn importance_ratios(&self, old: &LogitTable<T>, traj: &Trajectory) -> Result<Vec<T>> {
        self.ensure_same_shape(old)?;
        let new = self.logprobs(traj)?;
        let old = old.logprobs(traj)?;
        Ok(new.iter().zip(&old).map(|(&a, &b)| (a - b).exp()).collect())
    }

    /// Gradient of `sum_t w_t log pi(y_t | prefix)` with respect to the
    /// logits. `weights` has one entry per token of the stream; entries on
    /// observation tokens must be zero.
    pub fn score_gradient(&self, traj: &Trajectory, weights: &[T]) -> Result<LogitTable<T>> {
        let mut out = self.zeros_like();
        self.score_gradient_into(traj, weights, &mut out)?;
        Ok(out)
    }

    /// Accumulating form of [`score_gradient`](Self::score_gradient).
    /// Zero-weight tokens add nothing, not even signed zeros.
    pub fn score_gradient_into(&self, traj: &Trajectory, weights: &[T], out: &mut LogitTable<T>) -> Result<()> {
        self.ensure_same_shape(out)?;
        self.check_tokens(traj)?;
        if weights.len() != traj.tokens().len() {
            return Err(Error::WeightLength {
                expected: traj.tokens().len(),
                found: weights.len(),
            });
        }
        if let Some(pos) = traj
            .tokens()
            .iter()
            .zip(weights)
            .position(|(t, w)| t.origin == Origin::Observation && !w.is_zero())
        {
            return Err(Error::WeightOnObservation(pos));
        }
        let mut probs: Vec<Option<Vec<T>>> = vec![None; self.buckets];
        for pt in self.policy_tokens(traj) {
            let w = weights[pt.pos];
            if w.is_zero() {
                continue;
            }
            let p = probs[pt.bucket].get_or_insert_with(|| self.softmax_row(pt.bucket));
            let row = out.row_mut(pt.bucket);
            for (g, &pv) in row.iter_mut().zip(p.iter()) {
                *g -= w * pv;
            }
            row[pt.token as usize] += w;
        }
        Ok(())
    }

    fn draw(&self, bucket: usize, sampling: Sampling<T>, rng: &mut ChaCha8Rng) -> TokenId {
        let row = self.row(bucket);
        match sampling {
            Sampling::Argmax => {
                let mut best = 0;
                for (v, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = v;
                    }
                }
                best as TokenId
            }
            Sampling::Temperature(temp) => {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let weights: Vec<T> = row.iter().map(|&x| ((x - max) / temp).exp()).collect();
                let total: T = weights.iter().copied().sum();
                let mut u = T::lit(rng.gen::<f64>()) * total;
                for (v, &w) in weights.iter().enumerate() {
                    if u < w {
                        return v as TokenId;
                    }
                    u -= w;
                }
                weights.iter().rposition(|w| !w.is_zero()).unwrap_or(0) as TokenId
            }
        }
    }

    /// Samples one action span token by token until the grammar closes it,
    /// is violated, or the span reaches [`grammar::MAX_SPAN`] tokens.
    pub fn sample_action(&self, history: &History, sampling: Sampling<T>, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let ctx = ContextTracker::replay(&history.steps).context();
        let mut phase = Phase::Open;
        let mut span = Vec::new();
        while span.len() < grammar::MAX_SPAN {
            let token = self.draw(self.bucketer.bucket(phase, ctx), sampling, rng);
            span.push(token);
            match phase.advance(token) {
                Advance::Continue(next) => phase = next,
                Advance::Complete | Advance::Violation => break,
            }
        }
        span
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Adapter that lets a table drive rollouts.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a, T> {
    pub params: &'a LogitTable<T>,
    pub sampling: Sampling<T>,
}

impl<T: Scalar> ActionSource for Sampler<'_, T> {
    fn act(&mut self, history: &History, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        self.params.sample_action(history, self.sampling, rng)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile<T> {
    v: u32,
    bucketer: Bucketer,
    buckets: usize,
    vocab: usize,
    logits: Vec<Vec<T>>,
}

impl<T: Scalar> Serialize for LogitTable<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsFile {
            v: 1,
            bucketer: self.bucketer,
            buckets: self.buckets,
            vocab: self.vocab,
            logits: self.logits.chunks(self.vocab.max(1)).map(<[T]>::to_vec).collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for LogitTable<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = ParamsFile::<T>::deserialize(d)?;
        if file.v != 1 {
            return Err(D::Error::custom(format!("unsupported params version {}", file.v)));
        }
        let table = LogitTable::from_rows(file.bucketer, file.logits).map_err(D::Error::custom)?;
        if table.shape() != (file.buckets, file.vocab) {
            return Err(D::Error::custom(format!(
                "header says ({}, {}), table is {:?}",
                file.buckets,
                file.vocab,
                table.shape()
            )));
        }
        if !table.is_finite() {
            return Err(D::Error::custom("non-finite logits"));
        }
        Ok(table)
    }
}

/// Masked negative log-likelihood of a demonstration corpus.
#[derive(Clone, Debug)]
pub struct SftLoss<T> {
    /// `-sum log pi` over every policy token of the corpus.
    pub total: T,
    pub tokens: usize,
    /// Gradient of `total` with respect to the logits.
    pub gradient: LogitTable<T>,
}

impl<T: Scalar> SftLoss<T> {
    pub fn mean(&self) -> T {
        self.total / T::from_usize(self.tokens.max(1)).unwrap()
    }
}

/// Observation tokens are excluded from both the loss and its gradient.
pub fn sft_loss<T: Scalar>(params: &LogitTable<T>, corpus: &[Trajectory]) -> Result<SftLoss<T>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = T::zero();
    let mut tokens = 0;
    let mut gradient = params.zeros_like();
    for traj in corpus {
        let lp = params.logprobs(traj)?;
        total -= lp.iter().copied().sum::<T>();
        tokens += lp.len();
        let weights: Vec<T> = traj
            .tokens()
            .iter()
            .map(|t| if t.origin == Origin::Policy { -T::one() } else { T::zero() })
            .collect();
        params.score_gradient_into(traj, &weights, &mut gradient)?;
    }
    Ok(SftLoss { total, tokens, gradient })
}
