use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fagrpo_core::grpo::Variant;
use fagrpo_core::harness::{self, Fault, Overrides, Preset, RunConfig};
use fagrpo_core::Error;

#[derive(Parser)]
#[command(name = "fagrpo", version, about = "Fatal-aware multi-turn GRPO experiments on ToolWorld")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// vanilla | search | hard_mask | fatal_mask_only | fatal_clamp
    #[arg(long, global = true)]
    algo: Option<Variant>,

    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// easy | trap-rich
    #[arg(long, global = true)]
    preset: Option<Preset>,

    /// Extra `key=value` setting; applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample groups with the initial policy and dump them as JSON lines.
    Rollout,
    /// Supervised warm start on scripted-expert demonstrations.
    Sft,
    /// RL training with the selected variant.
    Train,
    /// Fatal-rollout statistics from a rollout dump or a fresh sample.
    Stats {
        /// rollouts.jsonl written by `rollout`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Gradient checks, dominance and clamp-bias oracles.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
}

fn overrides(common: &Common, command: &Command) -> Result<Overrides, Error> {
    let mut set = common
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Command::Stats { input: Some(path) } = command {
        set.push(("dump".into(), path.display().to_string()));
    }
    Ok(Overrides {
        seed: common.seed,
        algo: common.algo,
        steps: common.steps,
        out: common.out.clone(),
        preset: common.preset,
        set,
    })
}

fn run(cli: &Cli) -> Result<(), Error> {
    let overrides = overrides(&cli.common, &cli.command)?;
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides).map_err(|e| match &cli.common.config {
        Some(path) => Error::Config(format!("{}: {e}", path.display())),
        None => e,
    })?;
    match &cli.command {
        Command::Rollout => {
            let path = harness::cmd_rollout(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Sft => {
            let s = harness::cmd_sft(&cfg)?;
            println!(
                "sft: {} episodes, {} policy tokens, loss {:.4} -> {:.4}",
                s.corpus_size, s.policy_tokens, s.initial_loss, s.final_loss
            );
        }
        Command::Train => {
            let rows = harness::cmd_train(&cfg)?;
            match rows.last() {
                Some(r) => println!(
                    "{}: {} steps, batch accuracy {:.3}, fatal fraction {:.3}, turns {:.2}",
                    cfg.algo.variant,
                    rows.len(),
                    r.batch_accuracy,
                    r.fraction_fatal,
                    r.mean_turns_per_rollout
                ),
                None => println!("{}: 0 steps", cfg.algo.variant),
            }
        }
        Command::Stats { .. } => {
            let report = harness::cmd_stats(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Verify { inject_fault } => {
            let s = harness::cmd_verify(&cfg, *inject_fault)?;
            println!(
                "verify: gradcheck {}, dominance {}, clamp_bias {}, group_properties {}",
                s.gradcheck, s.dominance, s.clamp_bias, s.group_properties
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Record { .. } | Error::Alpha(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
