//! End-to-end acceptance gate. Each test checks one criterion at its stated
//! tolerance and writes a single PASS/FAIL line to stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use fagrpo_core::env::{reset, rollout, stream_rng, RolloutOptions, POLICY_STREAM};
use fagrpo_core::fixtures::{perturb, random_group, random_params, trap_env};
use fagrpo_core::grpo::{self, ClipRange, Group, Variant};
use fagrpo_core::harness::{self, MetricsRow, Overrides, Preset, RunConfig};
use fagrpo_core::oracle::{self, DOMINANCE_TOLERANCE};
use fagrpo_core::policy::{sft_loss, Bucketer, LogitTable, Sampler, Sampling};
use fagrpo_core::reward::RewardSuite;
use fagrpo_core::trajectory::grammar::{call_span, parse_span, response_span, Ref, Tool};
use fagrpo_core::trajectory::{detect_fatal_index, ExecStatus, Observation, StepRecord, Trajectory};
use rand::Rng;

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "criterion {n:>2} {verdict}: {name} ({detail})").unwrap();
}

fn clip() -> ClipRange<f64> {
    ClipRange::default()
}

#[test]
fn criterion_01_gradient_exactness() {
    let start = Instant::now();
    let sizes = [4, 8, 16];
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut checks = 0;
    for i in 0..102u64 {
        let g = sizes[i as usize % 3];
        let (params, group) = random_group::<f64>(1_000 + i, g).unwrap();
        let rows = oracle::visited_rows(&params, &group.trajectories);
        for variant in Variant::ALL {
            let specs = grpo::variant_masks(variant, Default::default(), &group);
            let (_, analytic) = grpo::surrogate(&params, &params, &group, &specs, clip()).unwrap();
            let r = oracle::gradcheck_rows(&params, &analytic, &rows, 1e-5, 1e-5, |x| {
                Ok(grpo::surrogate(x, &params, &group, &specs, clip())?.0)
            })
            .unwrap();
            checks += 1;
            worst = worst.max(r.max_rel_error);
            failures += usize::from(!r.pass);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures == 0 && worst < 1e-5 && secs < 60.0;
    report(
        1,
        "gradient exactness",
        ok,
        &format!("{checks} checks on 102 groups, G in {{4,8,16}}, max rel err {worst:.2e}, {secs:.1}s"),
    );
    assert!(ok);
}

/// Random groups with fatal rollouts, evaluated away from the behavior policy.
fn dominance_sweep(min_each: usize) -> oracle::DominanceReport {
    let mut total = oracle::DominanceReport {
        pass: true,
        ..Default::default()
    };
    let mut seed = 50_000u64;
    while total.case_i < min_each || total.case_ii < min_each {
        let (old, group) = random_group::<f64>(seed, 8).unwrap();
        let params = perturb(&old, 0.3, &mut stream_rng(seed, 11));
        let r = oracle::check_dominance(std::slice::from_ref(&group), &params, &old, clip()).unwrap();
        total.case_i += r.case_i;
        total.case_ii += r.case_ii;
        total.case_i_max_abs = total.case_i_max_abs.max(r.case_i_max_abs);
        total.case_ii_max_dev = total.case_ii_max_dev.max(r.case_ii_max_dev);
        total.hard_mask_max_abs = total.hard_mask_max_abs.max(r.hard_mask_max_abs);
        total.pass &= r.pass;
        seed += 1;
        assert!(seed < 200_000, "fixture generator starved");
    }
    total
}

#[test]
fn criterion_02_dominance_case_i() {
    let r = dominance_sweep(1_000);
    let ok = r.case_i >= 1_000 && r.case_i_max_abs == 0.0;
    report(
        2,
        "fatal with negative score gets exactly zero gradient",
        ok,
        &format!("{} trajectories, max |grad| {:e}", r.case_i, r.case_i_max_abs),
    );
    assert!(ok);
}

#[test]
fn criterion_03_dominance_case_ii() {
    let r = dominance_sweep(1_000);
    let ok = r.case_ii >= 1_000 && r.case_ii_max_dev <= DOMINANCE_TOLERANCE;
    report(
        3,
        "fatal with non-negative score matches search-style prefix terms",
        ok,
        &format!("{} trajectories, max dev {:e}", r.case_ii, r.case_ii_max_dev),
    );
    assert!(ok);
}

#[test]
fn criterion_04_clamp_bias_identity() {
    let mut rng = stream_rng(4, 0);
    let mut max_bias_dev = 0.0f64;
    let mut max_center = 0.0f64;
    for _ in 0..10_000 {
        let g = rng.gen_range(2..=16);
        // Composite-like rewards: many exact ties at 0 and at a few plateaus.
        let rewards: Vec<f64> = (0..g)
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => 0.2 * rng.gen_range(0..=5) as f64,
                _ => rng.gen::<f64>(),
            })
            .collect();
        let fatal: Vec<bool> = (0..g).map(|_| rng.gen_bool(0.4)).collect();
        let stats = grpo::group_stats(&rewards).unwrap();
        let scores = grpo::normalize(&rewards, stats, grpo::DEFAULT_DELTA);
        let adv = grpo::clamp_advantages(&scores, &fatal);
        // Oracle side: clamp and bias recomputed by hand.
        let mean_adv: f64 = scores
            .iter()
            .zip(&fatal)
            .map(|(&r, &f)| if f { r.max(0.0) } else { r })
            .sum::<f64>()
            / g as f64;
        let bias: f64 = scores
            .iter()
            .zip(&fatal)
            .filter(|(_, &f)| f)
            .map(|(&r, _)| (-r).max(0.0))
            .sum::<f64>()
            / g as f64;
        assert_eq!(adv.iter().sum::<f64>() / g as f64, mean_adv);
        max_bias_dev = max_bias_dev.max((mean_adv - bias).abs());
        max_bias_dev = max_bias_dev.max((grpo::bias_accounting(&scores, &fatal) - bias).abs());
        max_center = max_center.max(scores.iter().sum::<f64>().abs());
    }
    let ok = max_bias_dev <= 1e-12 && max_center <= 1e-12;
    report(
        4,
        "clamp-bias identity",
        ok,
        &format!("10000 groups, max |mean(A) - b_G| {max_bias_dev:.1e}, max |sum r~| {max_center:.1e}"),
    );
    assert!(ok);
}

/// End index of the earliest window of `k` consecutive errors.
fn brute_force_fatal(statuses: &[ExecStatus], k: usize) -> usize {
    (0..statuses.len())
        .find(|&end| end + 1 >= k && statuses[end + 1 - k..=end].iter().all(|&s| s == ExecStatus::Error))
        .unwrap_or(statuses.len())
}

#[test]
fn criterion_05_fatal_detector_exhaustive() {
    let alphabet = [ExecStatus::Ok, ExecStatus::Error, ExecStatus::None];
    let mut strings = 0u64;
    let mut disagreements = 0u64;
    for len in 0..=10u32 {
        for code in 0..3usize.pow(len) {
            let mut c = code;
            let statuses: Vec<ExecStatus> = (0..len)
                .map(|_| {
                    let s = alphabet[c % 3];
                    c /= 3;
                    s
                })
                .collect();
            for k in 1..=3 {
                strings += 1;
                if detect_fatal_index(&statuses, k) != brute_force_fatal(&statuses, k) {
                    disagreements += 1;
                }
            }
        }
    }
    let ok = disagreements == 0;
    report(
        5,
        "fatal detector vs brute-force window scan",
        ok,
        &format!("{strings} (string, K) pairs, {disagreements} disagreements"),
    );
    assert!(ok);
}

/// Rollout that keeps going past a fatal cascade, so there is a suffix to mutate.
fn long_rollout(seed: u64) -> (Trajectory, fagrpo_core::env::TaskTruth) {
    let mut env_cfg = trap_env();
    env_cfg.degraded = seed % 2 == 1;
    let params: LogitTable<f64> = random_params(
        Bucketer::Grammar,
        env_cfg.vocab_size as usize,
        1.0,
        3.0,
        &mut stream_rng(seed, 7),
    );
    let (mut env, prompt) = reset(&env_cfg, seed).unwrap();
    let mut sampler = Sampler {
        params: &params,
        sampling: Sampling::Temperature(0.7),
    };
    let opts = RolloutOptions {
        abort_on_fatal: false,
        ..Default::default()
    };
    let t = rollout(&mut sampler, &mut env, prompt, &opts, &mut stream_rng(seed, POLICY_STREAM)).unwrap();
    (t, env.truth())
}

fn random_step(rng: &mut impl Rng, last: bool) -> StepRecord {
    let refs = [Ref::Last, Ref::Root, Ref::Decoy];
    let arg = refs[rng.gen_range(0..3)];
    if last && rng.gen_bool(0.5) {
        let span = response_span(arg);
        return StepRecord {
            parsed_action: parse_span(&span),
            action_tokens: span,
            exec_status: ExecStatus::None,
            observation: None,
            target: None,
        };
    }
    let tool = Tool::ALL[rng.gen_range(0..4)];
    let span = call_span(tool, arg);
    let ok = rng.gen_bool(0.5);
    StepRecord {
        parsed_action: parse_span(&span),
        action_tokens: span,
        exec_status: if ok { ExecStatus::Ok } else { ExecStatus::Error },
        observation: Some(if tool.yields_image() && ok {
            Observation::Image {
                handle: fagrpo_core::trajectory::ImageHandle(rng.gen_range(0..100)),
            }
        } else {
            Observation::Text {
                tokens: vec![rng.gen_range(19..35)],
            }
        }),
        target: Some(rng.gen_range(19..35)),
    }
}

#[test]
fn criterion_06_reward_algebra() {
    let suite = RewardSuite::default();
    let alpha = suite.alpha;
    let mut breakdowns = 0;
    let mut violations = 0;
    let mut fatal_fixtures = 0;
    let mut mutation_failures = 0;
    let mut rng = stream_rng(6, 0);
    let mut seed = 0u64;
    while breakdowns < 10_000 || fatal_fixtures < 1_000 {
        let (t, truth) = long_rollout(seed);
        seed += 1;
        let b = suite.score::<f64>(&t, &truth).unwrap();
        breakdowns += 1;
        let expect = b.r_fmt * (alpha * b.r_acc + (1.0 - alpha) * b.r_query);
        if (b.composite - expect).abs() > 1e-15
            || !(0.0..=1.0).contains(&b.composite)
            || (t.is_fatal() && b.r_acc != 0.0)
        {
            violations += 1;
        }
        let f = t.fatal_index();
        if fatal_fixtures < 1_000 && f + 1 < t.num_steps() {
            fatal_fixtures += 1;
            let mut mutated = t.clone();
            for l in f + 1..t.num_steps() {
                mutated = mutated.with_step(l, random_step(&mut rng, l + 1 == t.num_steps())).unwrap();
            }
            assert_eq!(mutated.fatal_index(), f);
            let m = suite.score::<f64>(&mutated, &truth).unwrap();
            if m != b {
                mutation_failures += 1;
            }
        }
    }
    let ok = violations == 0 && mutation_failures == 0;
    report(
        6,
        "reward algebra and suffix insensitivity",
        ok,
        &format!(
            "{breakdowns} breakdowns, {violations} violations; {fatal_fixtures} mutated fatal fixtures, {mutation_failures} changed"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_hard_mask_degeneration() {
    let mut matched = 0;
    let mut mismatched = 0;
    let mut seed = 70_000u64;
    while matched + mismatched < 300 {
        seed += 1;
        let (old, group): (LogitTable<f64>, Group<f64>) = random_group(seed, 8).unwrap();
        let fatal = group.fatal_flags();
        let any_fatal = fatal.iter().any(|&f| f);
        let all_negative = group.normalized.iter().zip(&fatal).all(|(&r, &f)| !f || r < 0.0);
        if !any_fatal || !all_negative {
            continue;
        }
        let params = perturb(&old, 0.3, &mut stream_rng(seed, 11));
        let agg = Default::default();
        let ours = grpo::variant_masks(Variant::FatalClamp, agg, &group);
        let hard = grpo::variant_masks(Variant::HardMask, agg, &group);
        let (j1, g1) = grpo::surrogate(&params, &old, &group, &ours, clip()).unwrap();
        let (j2, g2) = grpo::surrogate(&params, &old, &group, &hard, clip()).unwrap();
        let same = j1.to_bits() == j2.to_bits()
            && g1.as_slice().iter().zip(g2.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if same {
            matched += 1;
        } else {
            mismatched += 1;
        }
    }
    let ok = mismatched == 0;
    report(
        7,
        "clamp degenerates to hard masking when every fatal score is negative",
        ok,
        &format!("{matched} groups bitwise identical, {mismatched} differ"),
    );
    assert!(ok);
}

fn trap_rich(seed: u64, variant: Variant) -> RunConfig {
    let overrides = Overrides {
        seed: Some(seed),
        algo: Some(variant),
        steps: Some(200),
        preset: Some(Preset::TrapRich),
        ..Default::default()
    };
    RunConfig::from_text(None, &overrides).unwrap()
}

fn tail_mean(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> f64) -> f64 {
    let tail = &rows[rows.len().saturating_sub(20)..];
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

#[test]
fn criterion_08_directional_variant_ordering() {
    let variants = [
        Variant::FatalClamp,
        Variant::VanillaGrpo,
        Variant::HardMask,
        Variant::FatalMaskOnly,
    ];
    let mut acc: BTreeMap<(Variant, u64), f64> = BTreeMap::new();
    let mut turns: BTreeMap<(Variant, u64), f64> = BTreeMap::new();
    let mut slowest = 0.0f64;
    for variant in variants {
        let start = Instant::now();
        for seed in 1..=5 {
            let cfg = trap_rich(seed, variant);
            let mut params = harness::initial_policy(&cfg).unwrap();
            let mut rows = Vec::new();
            harness::train(&cfg, &mut params, &mut rows).unwrap();
            acc.insert((variant, seed), tail_mean(&rows, |r| r.batch_accuracy));
            turns.insert((variant, seed), tail_mean(&rows, |r| r.mean_turns_per_rollout));
        }
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    let wins = (1..=5)
        .filter(|&s| {
            let ours = acc[&(Variant::FatalClamp, s)];
            variants[1..].iter().all(|&v| ours >= acc[&(v, s)])
        })
        .count();
    let mean = |v: Variant, m: &BTreeMap<(Variant, u64), f64>| (1..=5).map(|s| m[&(v, s)]).sum::<f64>() / 5.0;
    let turns_ok = mean(Variant::FatalClamp, &turns) >= mean(Variant::VanillaGrpo, &turns);
    let ok = wins >= 4 && turns_ok && slowest < 600.0;
    let accs: Vec<String> = variants
        .iter()
        .map(|&v| format!("{}={:.3}", v.name(), mean(v, &acc)))
        .collect();
    report(
        8,
        "fatal_clamp leads on the trap-rich preset",
        ok,
        &format!(
            "wins on {wins}/5 seeds; mean final accuracy {}; final-20 turns fatal_clamp {:.2} vs vanilla {:.2}; slowest variant {slowest:.1}s",
            accs.join(" "),
            mean(Variant::FatalClamp, &turns),
            mean(Variant::VanillaGrpo, &turns)
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_sft_sanity() {
    let mut cfg = RunConfig::from_text(None, &Overrides::default()).unwrap();
    cfg.bucketer = Bucketer::Single;
    let corpus = harness::expert_corpus(&cfg, 32).unwrap();

    // Oracle: entropy of the empirical distribution of emitted tokens.
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for t in &corpus {
        for s in t.steps() {
            for &tok in &s.action_tokens {
                *counts.entry(tok).or_default() += 1.0;
            }
        }
    }
    let n: f64 = counts.values().sum();
    let entropy = -counts.values().map(|&c| c / n * (c / n).ln()).sum::<f64>();

    let mut params = LogitTable::<f64>::zeros(Bucketer::Single, cfg.env.vocab_size as usize);
    let log = harness::run_sft(&mut params, &corpus, 20_000, 3.0).unwrap();
    let final_loss = log.last().unwrap().loss;
    let gap = final_loss - entropy;

    let stripped: Vec<Trajectory> = corpus.iter().map(Trajectory::without_text_observations).collect();
    let a = sft_loss(&params, &corpus).unwrap();
    let b = sft_loss(&params, &stripped).unwrap();
    let invariant = a.total.to_bits() == b.total.to_bits() && a.tokens == b.tokens && a.gradient == b.gradient;

    let ok = gap.abs() < 1e-3 && invariant;
    report(
        9,
        "SFT reaches corpus entropy; observations contribute nothing",
        ok,
        &format!("final loss {final_loss:.6}, entropy {entropy:.6}, gap {gap:.1e}, stripped-loss identical: {invariant}"),
    );
    assert!(ok);
}

fn collect_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let text = "preset = trap-rich\nsteps = 5\nnum_prompts = 4\nverify_groups = 20\ngradcheck_groups = 2\n";
    let run = |dir: &Path| {
        let overrides = Overrides {
            seed: Some(42),
            out: Some(dir.to_path_buf()),
            ..Default::default()
        };
        let mut cfg = RunConfig::from_text(Some(text), &overrides).unwrap();
        harness::cmd_rollout(&cfg).unwrap();
        harness::cmd_sft(&cfg).unwrap();
        harness::cmd_train(&cfg).unwrap();
        harness::cmd_stats(&cfg).unwrap();
        harness::cmd_verify(&cfg, None).unwrap();
        let stats_out = dir.join("from_dump");
        cfg.dump = Some(dir.join("rollouts.jsonl"));
        cfg.out = stats_out;
        harness::cmd_stats(&cfg).unwrap();
        collect_files(dir)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run(a.path());
    let fb = run(b.path());
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let ok = fa.len() == fb.len() && fa.len() >= 14 && differing.is_empty();
    report(
        10,
        "byte-identical outputs on repeat",
        ok,
        &format!("{} files compared, differing: {differing:?}", fa.len()),
    );
    assert!(ok);
}
