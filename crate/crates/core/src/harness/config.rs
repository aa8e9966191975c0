//! Flat `key = value` run configuration.
//!
//! Resolution order: built-in defaults, then the preset (the `--preset` flag
//! wins over a `preset` key in the file), then the file's other keys, then
//! the remaining command-line flags. Every key is validated before any
//! command touches the filesystem.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, RolloutOptions};
use crate::error::{Error, Result};
use crate::grpo::{AlgoConfig, Variant};
use crate::policy::{Bucketer, Sampling, DEFAULT_TEMPERATURE};
use crate::reward::{HttpJudge, HttpJudgeConfig, RewardSuite, DEFAULT_ALPHA};
use crate::trajectory::{Tool, DEFAULT_K_FATAL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Occasional tool failures, no traps.
    Easy,
    /// Frequent failures plus a tool that always fails.
    TrapRich,
}

impl Preset {
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Preset::Easy => {
                cfg.env.p_error = 0.05;
                cfg.env.trap_tools.clear();
            }
            Preset::TrapRich => {
                cfg.env.p_error = 0.15;
                cfg.env.trap_tools = [Tool::Probe].into();
            }
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Preset::Easy),
            "trap-rich" => Ok(Preset::TrapRich),
            _ => Err(Error::Config(format!("unknown preset '{s}' (expected easy or trap-rich)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Easy => "easy",
            Preset::TrapRich => "trap-rich",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Builtin,
    Http,
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub algo: Option<Variant>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
    /// Extra `key = value` pairs, applied after the file.
    pub set: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub env: EnvConfig,
    pub bucketer: Bucketer,
    pub temperature: f64,
    pub alpha: f64,
    pub judge: JudgeKind,
    pub judge_endpoint: Option<String>,
    pub judge_timeout_ms: u64,
    pub judge_retries: u32,
    pub algo: AlgoConfig<f64>,
    pub group_size: usize,
    pub k_fatal: usize,
    pub abort_on_fatal: bool,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub ppo_epochs: usize,
    /// Run SFT on an expert corpus before RL (and before sampling rollouts).
    pub warm_start: bool,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub sft_corpus_size: usize,
    pub corpus: Option<PathBuf>,
    pub init_params: Option<PathBuf>,
    /// Groups written by `rollout` and sampled by a live `stats` run.
    pub num_prompts: usize,
    pub dump: Option<PathBuf>,
    pub verify_groups: usize,
    pub gradcheck_groups: usize,
    pub gradcheck_h: f64,
    pub gradcheck_threshold: f64,
    pub seed: u64,
    /// Not serialized: where a run writes is not part of what it computes.
    #[serde(skip)]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            env: EnvConfig::default(),
            bucketer: Bucketer::Grammar,
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            judge: JudgeKind::Builtin,
            judge_endpoint: None,
            judge_timeout_ms: 10_000,
            judge_retries: 2,
            algo: AlgoConfig {
                lr: 1.0,
                ..AlgoConfig::default()
            },
            group_size: 8,
            k_fatal: DEFAULT_K_FATAL,
            abort_on_fatal: true,
            steps: 200,
            prompts_per_step: 4,
            ppo_epochs: 2,
            warm_start: true,
            sft_epochs: 40,
            sft_lr: 5.0,
            sft_corpus_size: 32,
            corpus: None,
            init_params: None,
            num_prompts: 16,
            dump: None,
            verify_groups: 200,
            gradcheck_groups: 10,
            gradcheck_h: 1e-5,
            gradcheck_threshold: 1e-5,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

/// One `key = value` line. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Record {
            line: i + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(Error::Record {
                line: i + 1,
                msg: format!("duplicate key '{key}'"),
            });
        }
        pairs.push((i + 1, key, value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn parse_optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.preset = Some(parse(key, value)?),
            "chain_length" => self.env.chain_length = parse(key, value)?,
            "num_entities" => self.env.num_entities = parse(key, value)?,
            "vocab" | "vocab_size" => self.env.vocab_size = parse(key, value)?,
            "p_error" => self.env.p_error = parse(key, value)?,
            "trap_tools" => {
                self.env.trap_tools = if value.is_empty() || value == "none" {
                    BTreeSet::new()
                } else {
                    value
                        .split(',')
                        .map(|t| t.trim().parse::<Tool>())
                        .collect::<Result<_>>()?
                }
            }
            "degraded" => self.env.degraded = parse_bool(key, value)?,
            "l_max" => self.env.l_max = parse(key, value)?,
            "buckets" | "bucketer" => {
                self.bucketer = match value {
                    "grammar" => Bucketer::Grammar,
                    "single" => Bucketer::Single,
                    _ => return Err(Error::Config(format!("{key}: expected grammar or single, got '{value}'"))),
                }
            }
            "temperature" => self.temperature = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "judge" => {
                self.judge = match value {
                    "builtin" => JudgeKind::Builtin,
                    "http" => JudgeKind::Http,
                    _ => return Err(Error::Config(format!("judge: expected builtin or http, got '{value}'"))),
                }
            }
            "judge_endpoint" => self.judge_endpoint = Some(value.to_string()),
            "judge_timeout_ms" => self.judge_timeout_ms = parse(key, value)?,
            "judge_retries" => self.judge_retries = parse(key, value)?,
            "algo" | "variant" => self.algo.variant = value.parse()?,
            "clip_low" => self.algo.clip.low = parse(key, value)?,
            "clip_high" => self.algo.clip.high = parse(key, value)?,
            "kl_enabled" => self.algo.kl_enabled = parse_bool(key, value)?,
            "kl_beta" => self.algo.kl_beta = parse(key, value)?,
            "aggregation" => self.algo.aggregation = value.parse()?,
            "advantage_estimator" => self.algo.estimator = value.parse()?,
            "delta" => self.algo.delta = parse(key, value)?,
            "lr" => self.algo.lr = parse(key, value)?,
            "group_size" => self.group_size = parse(key, value)?,
            "k_fatal" => self.k_fatal = parse(key, value)?,
            "abort_on_fatal" => self.abort_on_fatal = parse_bool(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "prompts_per_step" => self.prompts_per_step = parse(key, value)?,
            "ppo_epochs" => self.ppo_epochs = parse(key, value)?,
            "warm_start" => self.warm_start = parse_bool(key, value)?,
            "sft_epochs" => self.sft_epochs = parse(key, value)?,
            "sft_lr" => self.sft_lr = parse(key, value)?,
            "sft_corpus_size" => self.sft_corpus_size = parse(key, value)?,
            "corpus" => self.corpus = parse_optional_path(value),
            "init_params" => self.init_params = parse_optional_path(value),
            "num_prompts" => self.num_prompts = parse(key, value)?,
            "dump" => self.dump = parse_optional_path(value),
            "verify_groups" => self.verify_groups = parse(key, value)?,
            "gradcheck_groups" => self.gradcheck_groups = parse(key, value)?,
            "gradcheck_h" => self.gradcheck_h = parse(key, value)?,
            "gradcheck_threshold" => self.gradcheck_threshold = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Builds and validates a configuration from optional file text.
    pub fn from_text(text: Option<&str>, overrides: &Overrides) -> Result<Self> {
        let pairs = match text {
            Some(t) => parse_pairs(t)?,
            None => Vec::new(),
        };
        let mut cfg = RunConfig::default();
        let file_preset = pairs
            .iter()
            .find(|(_, k, _)| k == "preset")
            .map(|(_, _, v)| v.parse::<Preset>())
            .transpose()?;
        cfg.preset = overrides.preset.or(file_preset);
        if let Some(p) = cfg.preset {
            p.apply(&mut cfg);
        }
        for (line, key, value) in &pairs {
            if key == "preset" {
                continue;
            }
            cfg.set(key, value).map_err(|e| Error::Record {
                line: *line,
                msg: e.to_string(),
            })?;
        }
        for (key, value) in &overrides.set {
            cfg.set(key, value)?;
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(algo) = overrides.algo {
            cfg.algo.variant = algo;
        }
        if let Some(steps) = overrides.steps {
            cfg.steps = steps;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        cfg.env.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::from_text(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.algo.validate()?;
        let err = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Alpha(self.alpha));
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.k_fatal == 0 {
            return err("k_fatal must be at least 1".into());
        }
        if self.prompts_per_step == 0 {
            return err("prompts_per_step must be at least 1".into());
        }
        if !(self.sft_lr >= 0.0 && self.sft_lr.is_finite()) {
            return err(format!("sft_lr must be non-negative, got {}", self.sft_lr));
        }
        if !(self.gradcheck_h > 0.0 && self.gradcheck_threshold > 0.0) {
            return err("gradcheck_h and gradcheck_threshold must be positive".into());
        }
        if self.judge == JudgeKind::Http && self.judge_endpoint.is_none() {
            return err("judge = http needs judge_endpoint".into());
        }
        if self.warm_start && self.corpus.is_none() && self.sft_corpus_size == 0 && self.sft_epochs > 0 {
            return err("warm_start needs a corpus or sft_corpus_size > 0".into());
        }
        Ok(())
    }

    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            k_fatal: self.k_fatal,
            abort_on_fatal: self.abort_on_fatal,
        }
    }

    pub fn sampling(&self) -> Sampling<f64> {
        Sampling::Temperature(self.temperature)
    }

    pub fn reward_suite(&self) -> RewardSuite {
        let mut suite = RewardSuite::with_alpha(self.alpha).expect("alpha validated");
        if let (JudgeKind::Http, Some(endpoint)) = (self.judge, &self.judge_endpoint) {
            suite.accuracy = Box::new(HttpJudge::new(HttpJudgeConfig {
                endpoint: endpoint.clone(),
                timeout_ms: self.judge_timeout_ms,
                retries: self.judge_retries,
            }));
        }
        suite
    }
}
