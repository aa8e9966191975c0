//! Experiment commands behind the CLI: rollout, sft, train, stats, verify.
//!
//! Each command validates its configuration and loads every input before it
//! creates the output directory, and derives all randomness from the run
//! seed, so identical (config, seed) pairs give byte-identical files.

mod config;
mod metrics;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{derive_seed, reset, rollout, stream_rng, ScriptedExpert, POLICY_STREAM};
use crate::error::{Error, Result};
use crate::fixtures::random_group_in;
use crate::grpo::{self, ClipRange, Group, GroupSampler, Variant};
use crate::oracle::{self, ClampBiasReport, DominanceReport, GradCheckReport};
use crate::policy::{sft_loss, LogitTable};
use crate::reward::Breakdown;
use crate::trajectory::{read_jsonl, write_jsonl, Trajectory};
pub use config::{parse_pairs, JudgeKind, Overrides, Preset, RunConfig};
pub use metrics::{read_metrics, write_metrics, FatalSplit, MetricsRow, METRICS_COLUMNS};

const CORPUS_PHASE: u64 = 1;
const ROLLOUT_PHASE: u64 = 2;
const TRAIN_PHASE: u64 = 3;
const VERIFY_PHASE: u64 = 4;
const STATS_PHASE: u64 = 5;

/// Seed of prompt `j` in step `step` of a command phase.
pub fn prompt_seed(seed: u64, phase: u64, step: u64, j: u64) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, phase), step), j)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// Successful scripted-expert episodes on the configured environment.
pub fn expert_corpus(cfg: &RunConfig, size: usize) -> Result<Vec<Trajectory>> {
    let mut corpus = Vec::with_capacity(size);
    let expert_opts = cfg.rollout_options();
    for i in 0..(size as u64).saturating_mul(100) {
        if corpus.len() == size {
            break;
        }
        let seed = prompt_seed(cfg.seed, CORPUS_PHASE, 0, i);
        let (mut env, prompt) = reset(&cfg.env, seed)?;
        let mut expert = ScriptedExpert {
            degraded: env.is_degraded(),
        };
        let traj = rollout(&mut expert, &mut env, prompt, &expert_opts, &mut stream_rng(seed, POLICY_STREAM))?;
        if traj.terminal_response() == Some(&env.ground_truth()[..]) && !traj.is_fatal() {
            corpus.push(traj);
        }
    }
    if corpus.len() < size {
        return Err(Error::Config(format!(
            "expert solved only {} of the requested {size} corpus episodes",
            corpus.len()
        )));
    }
    Ok(corpus)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftEpoch {
    pub epoch: usize,
    /// Mean negative log-likelihood per policy token, before this epoch's step.
    pub loss: f64,
}

/// Full-batch gradient descent on the mean token NLL. Returns the loss of
/// every epoch plus a final entry for the trained parameters.
pub fn run_sft(params: &mut LogitTable<f64>, corpus: &[Trajectory], epochs: usize, lr: f64) -> Result<Vec<SftEpoch>> {
    let mut log = Vec::with_capacity(epochs + 1);
    for epoch in 0..=epochs {
        let loss = sft_loss(params, corpus)?;
        log.push(SftEpoch {
            epoch,
            loss: loss.mean(),
        });
        if epoch == epochs {
            break;
        }
        grpo::update(params, &loss.gradient, -lr / loss.tokens.max(1) as f64)?;
    }
    Ok(log)
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    match &cfg.corpus {
        Some(path) => {
            let corpus: Vec<Trajectory> = read_lines(path)?;
            if corpus.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            Ok(corpus)
        }
        None => expert_corpus(cfg, cfg.sft_corpus_size),
    }
}

fn base_params(cfg: &RunConfig) -> Result<LogitTable<f64>> {
    let vocab = cfg.env.vocab_size as usize;
    match &cfg.init_params {
        Some(path) => {
            let p = LogitTable::load(path)?;
            if p.shape() != (cfg.bucketer.num_buckets(), vocab) || p.bucketer() != cfg.bucketer {
                return Err(Error::Shape {
                    expected: (cfg.bucketer.num_buckets(), vocab),
                    found: p.shape(),
                });
            }
            Ok(p)
        }
        None => Ok(LogitTable::zeros(cfg.bucketer, vocab)),
    }
}

/// Starting policy of rollout/train/stats: `init_params` (or zeros),
/// followed by the SFT warm start when enabled.
pub fn initial_policy(cfg: &RunConfig) -> Result<LogitTable<f64>> {
    let mut params = base_params(cfg)?;
    if cfg.warm_start && cfg.sft_epochs > 0 {
        let corpus = load_corpus(cfg)?;
        run_sft(&mut params, &corpus, cfg.sft_epochs, cfg.sft_lr)?;
    }
    Ok(params)
}

fn sampler<'a>(cfg: &'a RunConfig, suite: &'a crate::reward::RewardSuite) -> GroupSampler<'a, f64> {
    GroupSampler {
        env: &cfg.env,
        rollout: cfg.rollout_options(),
        sampling: cfg.sampling(),
        suite,
        estimator: cfg.algo.estimator,
        delta: cfg.algo.delta,
        group_size: cfg.group_size,
    }
}

/// One line of a rollout dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpLine {
    pub group: u64,
    pub member: usize,
    pub prompt_seed: u64,
    pub trajectory: Trajectory,
    pub reward: Breakdown<f64>,
}

pub fn sample_groups(cfg: &RunConfig, params: &LogitTable<f64>, phase: u64, count: usize) -> Result<Vec<Group<f64>>> {
    let suite = cfg.reward_suite();
    let s = sampler(cfg, &suite);
    (0..count as u64)
        .map(|j| s.sample(params, prompt_seed(cfg.seed, phase, 0, j)))
        .collect()
}

/// `num_prompts` groups written to `<out>/rollouts.jsonl`.
pub fn cmd_rollout(cfg: &RunConfig) -> Result<PathBuf> {
    let params = initial_policy(cfg)?;
    let groups = sample_groups(cfg, &params, ROLLOUT_PHASE, cfg.num_prompts)?;
    create_out(&cfg.out)?;
    let path = cfg.out.join("rollouts.jsonl");
    let lines = groups.into_iter().enumerate().flat_map(|(j, g)| {
        let prompt_seed = g.prompt_id;
        g.trajectories
            .into_iter()
            .zip(g.rewards)
            .enumerate()
            .map(move |(member, (trajectory, reward))| DumpLine {
                group: j as u64,
                member,
                prompt_seed,
                trajectory,
                reward,
            })
    });
    write_jsonl(BufWriter::new(File::create(&path)?), lines)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub epochs: usize,
    pub corpus_size: usize,
    pub policy_tokens: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// SFT on the expert corpus: `<out>/params.json`, `<out>/sft_log.csv`,
/// `<out>/sft_summary.json`.
pub fn cmd_sft(cfg: &RunConfig) -> Result<SftSummary> {
    let corpus = load_corpus(cfg)?;
    let mut params = base_params(cfg)?;
    let log = run_sft(&mut params, &corpus, cfg.sft_epochs, cfg.sft_lr)?;
    let summary = SftSummary {
        epochs: cfg.sft_epochs,
        corpus_size: corpus.len(),
        policy_tokens: corpus.iter().map(Trajectory::policy_token_count).sum(),
        initial_loss: log[0].loss,
        final_loss: log[log.len() - 1].loss,
    };
    create_out(&cfg.out)?;
    params.save(&cfg.out.join("params.json"))?;
    let mut w = csv::Writer::from_path(cfg.out.join("sft_log.csv"))?;
    for row in &log {
        w.serialize(row)?;
    }
    w.flush()?;
    write_json(&cfg.out.join("sft_summary.json"), &summary)?;
    Ok(summary)
}

/// The RL loop. `rows` receives one row per completed step; on error
/// `params` holds the last parameters that were fully updated.
pub fn train(cfg: &RunConfig, params: &mut LogitTable<f64>, rows: &mut Vec<MetricsRow>) -> Result<()> {
    let suite = cfg.reward_suite();
    let s = sampler(cfg, &suite);
    let reference = cfg.algo.kl_enabled.then(|| params.snapshot());
    let beta = if cfg.algo.kl_enabled { cfg.algo.kl_beta } else { 0.0 };
    let inv_groups = 1.0 / cfg.prompts_per_step as f64;
    for step in 0..cfg.steps {
        let old = params.snapshot();
        let groups = (0..cfg.prompts_per_step as u64)
            .map(|j| s.sample(&old, prompt_seed(cfg.seed, TRAIN_PHASE, step as u64, j)))
            .collect::<Result<Vec<_>>>()?;
        let specs: Vec<_> = groups
            .iter()
            .map(|g| grpo::variant_masks(cfg.algo.variant, cfg.algo.aggregation, g))
            .collect();
        let mut first_objective = 0.0;
        for epoch in 0..cfg.ppo_epochs.max(1) {
            let mut total = params.zeros_like();
            let mut value = 0.0;
            for (g, spec) in groups.iter().zip(&specs) {
                let obj = grpo::objective(params, &old, reference.as_deref(), g, spec, cfg.algo.clip, beta)?;
                value += obj.value * inv_groups;
                total.add_scaled(&obj.gradient, inv_groups)?;
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("objective at step {step}, epoch {epoch}")));
            }
            if epoch == 0 {
                first_objective = value;
            }
            if cfg.ppo_epochs > 0 {
                let mut next = params.clone();
                grpo::update(&mut next, &total, cfg.algo.lr)?;
                if !next.is_finite() {
                    return Err(Error::NonFinite(format!("parameters after step {step}")));
                }
                *params = next;
            }
        }
        rows.push(MetricsRow::from_groups(step, &groups, first_objective));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub steps: usize,
    pub final_row: Option<MetricsRow>,
}

/// Training run: `<out>/metrics.csv`, `<out>/params.json`,
/// `<out>/config.json`, `<out>/summary.json`. On a numeric failure the
/// last good parameters and the metrics so far are still written.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let mut params = initial_policy(cfg)?;
    create_out(&cfg.out)?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    let mut rows = Vec::with_capacity(cfg.steps);
    let result = train(cfg, &mut params, &mut rows);
    params.save(&cfg.out.join("params.json"))?;
    write_metrics(BufWriter::new(File::create(cfg.out.join("metrics.csv"))?), &rows)?;
    write_json(
        &cfg.out.join("summary.json"),
        &TrainSummary {
            variant: cfg.algo.variant,
            steps: rows.len(),
            final_row: rows.last().cloned(),
        },
    )?;
    result.map(|()| rows)
}

/// Fatal-rollout aggregation over a dump or a live sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub groups: usize,
    pub rollouts: usize,
    pub fatal: usize,
    pub fraction_fatal: f64,
    pub fraction_clamped: Option<f64>,
    pub fraction_preserved: Option<f64>,
    pub mean_preclamp_clamped: Option<f64>,
    pub mean_preclamp_preserved: Option<f64>,
    #[serde(rename = "mean_b_G")]
    pub mean_b_g: f64,
}

impl From<&FatalSplit> for StatsReport {
    fn from(s: &FatalSplit) -> Self {
        Self {
            groups: s.groups,
            rollouts: s.rollouts,
            fatal: s.fatal,
            fraction_fatal: s.fraction_fatal(),
            fraction_clamped: s.fraction_clamped(),
            fraction_preserved: s.fraction_preserved(),
            mean_preclamp_clamped: s.mean_clamped(),
            mean_preclamp_preserved: s.mean_preserved(),
            mean_b_g: s.mean_bias(),
        }
    }
}

/// Aggregates dump lines by group. Stored normalized scores are used when
/// present; otherwise they are recomputed from the group's rewards.
pub fn stats_from_dump(lines: &[DumpLine], delta: f64) -> Result<StatsReport> {
    let mut groups: BTreeMap<u64, Vec<&DumpLine>> = BTreeMap::new();
    for line in lines {
        groups.entry(line.group).or_default().push(line);
    }
    let mut split = FatalSplit::default();
    for members in groups.values() {
        let fatal: Vec<bool> = members.iter().map(|l| l.trajectory.is_fatal()).collect();
        let normalized: Vec<f64> = if members.iter().all(|l| l.reward.normalized.is_some()) {
            members.iter().map(|l| l.reward.normalized.unwrap()).collect()
        } else {
            let r: Vec<f64> = members.iter().map(|l| l.reward.composite).collect();
            grpo::normalize(&r, grpo::group_stats(&r)?, delta)
        };
        split.add(&normalized, &fatal);
    }
    Ok(StatsReport::from(&split))
}

/// `<out>/stats.json` and `<out>/stats.csv` from `cfg.dump`, or from
/// `num_prompts` freshly sampled groups when no dump is given.
pub fn cmd_stats(cfg: &RunConfig) -> Result<StatsReport> {
    let report = match &cfg.dump {
        Some(path) => stats_from_dump(&read_lines::<DumpLine>(path)?, cfg.algo.delta)?,
        None => {
            let params = initial_policy(cfg)?;
            let mut split = FatalSplit::default();
            for g in sample_groups(cfg, &params, STATS_PHASE, cfg.num_prompts)? {
                split.add_group(&g);
            }
            StatsReport::from(&split)
        }
    };
    create_out(&cfg.out)?;
    write_json(&cfg.out.join("stats.json"), &report)?;
    let mut w = csv::Writer::from_path(cfg.out.join("stats.csv"))?;
    w.serialize(&report)?;
    w.flush()?;
    Ok(report)
}

/// Deliberate defects for exercising the verifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Fatal rollouts get min(r̃, 0) instead of max(r̃, 0).
    FlipClamp,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip-clamp" => Ok(Fault::FlipClamp),
            _ => Err(Error::Config(format!("unknown fault '{s}'"))),
        }
    }
}

fn flipped_clamp(scores: &[f64], fatal: &[bool]) -> Vec<f64> {
    scores
        .iter()
        .zip(fatal)
        .map(|(&s, &f)| if f { s.min(0.0) } else { s })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub checks: usize,
    pub passed: usize,
    pub worst: Option<GradCheckReport>,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupProperties {
    pub groups: usize,
    pub size_violations: usize,
    /// max |sum r̃| over groups.
    pub max_centering_dev: f64,
    pub clamp_floor_violations: usize,
    pub passthrough_violations: usize,
    pub pass: bool,
}

pub fn group_properties(groups: &[Group<f64>], group_size: usize) -> GroupProperties {
    let mut p = GroupProperties {
        groups: groups.len(),
        ..Default::default()
    };
    for g in groups {
        if g.size() != group_size || g.rewards.len() != group_size {
            p.size_violations += 1;
        }
        if g.stats.std > g.delta {
            p.max_centering_dev = p.max_centering_dev.max(g.normalized.iter().sum::<f64>().abs());
        }
        for ((t, &r), &a) in g.trajectories.iter().zip(&g.normalized).zip(&g.clamped) {
            if t.is_fatal() && a < 0.0 {
                p.clamp_floor_violations += 1;
            }
            if !t.is_fatal() && a != r {
                p.passthrough_violations += 1;
            }
        }
    }
    p.pass = p.size_violations == 0
        && p.max_centering_dev <= 1e-12
        && p.clamp_floor_violations == 0
        && p.passthrough_violations == 0;
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub gradcheck: bool,
    pub dominance: bool,
    pub clamp_bias: bool,
    pub group_properties: bool,
    pub pass: bool,
    pub failing: Vec<PathBuf>,
}

/// Runs the oracle suites and writes one JSON report each under
/// `<out>/verify/`. Fails with the path of the first failing report.
pub fn cmd_verify(cfg: &RunConfig, fault: Option<Fault>) -> Result<VerifySummary> {
    let mut fixtures = Vec::with_capacity(cfg.verify_groups);
    for i in 0..cfg.verify_groups as u64 {
        fixtures.push(random_group_in::<f64>(
            &cfg.env,
            prompt_seed(cfg.seed, VERIFY_PHASE, 0, i),
            cfg.group_size,
        )?);
    }
    let clip: ClipRange<f64> = cfg.algo.clip;

    let mut grad = GradCheckSummary {
        checks: 0,
        passed: 0,
        worst: None,
        pass: true,
    };
    for (params, group) in fixtures.iter().take(cfg.gradcheck_groups) {
        let rows = oracle::visited_rows(params, &group.trajectories);
        for variant in Variant::ALL {
            let specs = grpo::variant_masks(variant, cfg.algo.aggregation, group);
            let (_, analytic) = grpo::surrogate(params, params, group, &specs, clip)?;
            let report = oracle::gradcheck_rows(params, &analytic, &rows, cfg.gradcheck_h, cfg.gradcheck_threshold, |x| {
                Ok(grpo::surrogate(x, params, group, &specs, clip)?.0)
            })?;
            grad.checks += 1;
            grad.passed += usize::from(report.pass);
            if grad.worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
                grad.worst = Some(report);
            }
        }
    }
    grad.pass = grad.passed == grad.checks;

    let mut dominance = DominanceReport {
        pass: true,
        ..Default::default()
    };
    for (params, group) in &fixtures {
        let groups = std::slice::from_ref(group);
        let r = match fault {
            Some(Fault::FlipClamp) => oracle::check_dominance_with(groups, params, params, clip, flipped_clamp)?,
            None => oracle::check_dominance(groups, params, params, clip)?,
        };
        dominance.case_i += r.case_i;
        dominance.case_ii += r.case_ii;
        dominance.case_i_max_abs = dominance.case_i_max_abs.max(r.case_i_max_abs);
        dominance.case_ii_max_dev = dominance.case_ii_max_dev.max(r.case_ii_max_dev);
        dominance.hard_mask_max_abs = dominance.hard_mask_max_abs.max(r.hard_mask_max_abs);
        dominance.pass &= r.pass;
    }

    let groups: Vec<Group<f64>> = fixtures.into_iter().map(|(_, g)| g).collect();
    let bias: ClampBiasReport = oracle::check_clamp_bias(&groups, 1e-12);
    let props = group_properties(&groups, cfg.group_size);

    let dir = cfg.out.join("verify");
    create_out(&dir)?;
    let reports = [
        ("gradcheck.json", grad.pass),
        ("dominance.json", dominance.pass),
        ("clamp_bias.json", bias.pass),
        ("group_properties.json", props.pass),
    ];
    write_json(&dir.join(reports[0].0), &grad)?;
    write_json(&dir.join(reports[1].0), &dominance)?;
    write_json(&dir.join(reports[2].0), &bias)?;
    write_json(&dir.join(reports[3].0), &props)?;
    let failing: Vec<PathBuf> = reports.iter().filter(|(_, ok)| !ok).map(|(f, _)| dir.join(f)).collect();
    let summary = VerifySummary {
        gradcheck: grad.pass,
        dominance: dominance.pass,
        clamp_bias: bias.pass,
        group_properties: props.pass,
        pass: failing.is_empty(),
        failing,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    match summary.failing.first() {
        Some(path) => Err(Error::VerifyFailed(path.display().to_string())),
        None => Ok(summary),
    }
}
