use fagrpo_core::env::{reset, rollout, stream_rng, EnvConfig, RolloutOptions, ScriptedExpert, POLICY_STREAM};
use fagrpo_core::trajectory::grammar::{call_span, parse_span, Ref, Tool};
use fagrpo_core::trajectory::ExecStatus;
use proptest::prelude::*;

#[test]
fn error_rate_is_calibrated() {
    for p in [0.05, 0.15, 0.5] {
        let cfg = EnvConfig {
            p_error: p,
            ..EnvConfig::default()
        };
        let n = 20_000;
        let scan = parse_span(&call_span(Tool::Scan, Ref::Root));
        let failures = (0..n)
            .filter(|&seed| {
                let (mut env, _) = reset(&cfg, seed).unwrap();
                env.execute(&scan).unwrap().status == ExecStatus::Error
            })
            .count();
        let rate = failures as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() < 3.0 * se, "p={p}: observed {rate}, se {se}");
    }
}

fn env_strategy() -> impl Strategy<Value = EnvConfig> {
    (1usize..=5, 0u32..6, any::<bool>(), any::<u64>()).prop_map(|(h, extra, degraded, seed)| {
        let num_entities = h as u32 + 2 + extra;
        EnvConfig {
            chain_length: h,
            num_entities,
            vocab_size: fagrpo_core::trajectory::grammar::Vocab::required_size(num_entities),
            degraded,
            l_max: 12,
            seed,
            ..EnvConfig::default()
        }
    })
}

proptest! {
    #[test]
    fn expert_solves_error_free_tasks(cfg in env_strategy()) {
        let (mut env, prompt) = reset(&cfg, cfg.seed).unwrap();
        let mut expert = ScriptedExpert { degraded: cfg.degraded };
        let t = rollout(&mut expert, &mut env, prompt, &RolloutOptions::default(), &mut stream_rng(cfg.seed, POLICY_STREAM)).unwrap();
        let budget = cfg.chain_length + 2 + usize::from(cfg.degraded);
        prop_assert!(t.num_steps() <= budget, "{} steps, budget {budget}", t.num_steps());
        prop_assert_eq!(t.terminal_response(), Some(&env.ground_truth()[..]));
        prop_assert!(!t.is_fatal());
    }

    #[test]
    fn trap_tools_always_fail(seed in any::<u64>(), arg in 0usize..3) {
        let cfg = EnvConfig { trap_tools: Tool::ALL.into_iter().collect(), ..EnvConfig::default() };
        let (mut env, _) = reset(&cfg, seed).unwrap();
        for tool in Tool::ALL {
            let a = parse_span(&call_span(tool, [Ref::Last, Ref::Root, Ref::Decoy][arg]));
            prop_assert_eq!(env.execute(&a).unwrap().status, ExecStatus::Error);
        }
    }

    #[test]
    fn reset_is_a_pure_function_of_the_seed(cfg in env_strategy()) {
        let (a, pa) = reset(&cfg, cfg.seed).unwrap();
        let (b, pb) = reset(&cfg, cfg.seed).unwrap();
        prop_assert_eq!(pa, pb);
        prop_assert_eq!(a.chain(), b.chain());
        prop_assert_eq!(a.truth(), b.truth());
    }
}
