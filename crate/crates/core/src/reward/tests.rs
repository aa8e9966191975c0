use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use proptest::prelude::*;

use super::*;
use crate::env::{reset, rollout, stream_rng, EnvConfig, RolloutOptions, ScriptedExpert, POLICY_STREAM};
use crate::trajectory::grammar::*;
use crate::trajectory::{ImageHandle, Prompt, StepRecord};

fn truth(degraded: bool) -> TaskTruth {
    TaskTruth {
        question: vec![ASK, HOP, HOP],
        chain: vec![VALUE_BASE, VALUE_BASE + 1, VALUE_BASE + 2],
        answer: vec![VALUE_BASE + 8 + 2],
        degraded,
    }
}

fn call(tool: Tool, target: TokenId, status: ExecStatus, obs: Option<Observation>) -> StepRecord {
    let span = call_span(tool, Ref::Last);
    StepRecord {
        parsed_action: parse_span(&span),
        action_tokens: span,
        exec_status: status,
        observation: obs,
        target: Some(target),
    }
}

fn lookup_ok(target: TokenId, reveals: TokenId) -> StepRecord {
    call(Tool::Lookup, target, ExecStatus::Ok, Some(Observation::Text { tokens: vec![reveals] }))
}

fn failed(tool: Tool, target: TokenId) -> StepRecord {
    call(
        tool,
        target,
        ExecStatus::Error,
        Some(Observation::Text {
            tokens: ERROR_OBSERVATION.to_vec(),
        }),
    )
}

fn respond() -> StepRecord {
    let span = response_span(Ref::Last);
    StepRecord {
        parsed_action: parse_span(&span),
        action_tokens: span,
        exec_status: ExecStatus::None,
        observation: None,
        target: None,
    }
}

fn malformed() -> StepRecord {
    StepRecord {
        action_tokens: vec![THOUGHT],
        parsed_action: StepAction::Malformed,
        exec_status: ExecStatus::Error,
        observation: Some(Observation::Text {
            tokens: ERROR_OBSERVATION.to_vec(),
        }),
        target: None,
    }
}

fn traj(steps: Vec<StepRecord>, response: Option<Vec<TokenId>>) -> Trajectory {
    let prompt = Prompt {
        image: ImageHandle(0),
        question: vec![ASK, HOP, HOP],
    };
    Trajectory::finalize(prompt, steps, response, 3).unwrap()
}

fn expert() -> Trajectory {
    let t = truth(false);
    traj(
        vec![
            lookup_ok(t.chain[0], t.chain[1]),
            lookup_ok(t.chain[1], t.chain[2]),
            lookup_ok(t.chain[2], t.answer[0]),
            respond(),
        ],
        Some(t.answer.clone()),
    )
}

#[test]
fn format_all_well_formed() {
    let t = expert();
    assert_eq!(format_reward::<f64>(&t, t.fatal_index()), 1.0);
}

#[test]
fn format_three_of_four() {
    let tr = truth(false);
    let t = traj(
        vec![lookup_ok(tr.chain[0], tr.chain[1]), malformed(), lookup_ok(tr.chain[1], tr.chain[2]), respond()],
        Some(vec![tr.chain[2]]),
    );
    assert_eq!(format_reward::<f64>(&t, t.fatal_index()), 0.75);
}

#[test]
fn format_fatal_prefix_only() {
    let tr = truth(false);
    let t = traj(
        vec![
            lookup_ok(tr.chain[0], tr.chain[1]),
            lookup_ok(tr.chain[1], tr.chain[2]),
            failed(Tool::Probe, tr.chain[2]),
            failed(Tool::Probe, tr.chain[2]),
            failed(Tool::Probe, tr.chain[2]),
        ],
        None,
    );
    assert_eq!(t.fatal_index(), 4);
    // Prefix of 4 with two failed steps.
    assert_eq!(format_reward::<f64>(&t, 4), 0.5);
    assert_eq!(format_reward::<f64>(&t, 2), 1.0);
    assert_eq!(format_reward::<f64>(&t, 0), 0.0);
}

#[test]
fn tool_call_in_last_slot_is_not_well_formed() {
    let tr = truth(false);
    let t = traj(vec![lookup_ok(tr.chain[0], tr.chain[1]), lookup_ok(tr.chain[1], tr.chain[2])], None);
    assert_eq!(format_reward::<f64>(&t, t.fatal_index()), 0.5);
}

#[test]
fn accuracy_cases() {
    let tr = truth(false);
    assert_eq!(accuracy_reward::<f64>(&expert(), &tr, &ExactMatch).unwrap(), 1.0);
    let wrong = traj(vec![respond()], Some(vec![tr.chain[1]]));
    assert_eq!(accuracy_reward::<f64>(&wrong, &tr, &ExactMatch).unwrap(), 0.0);
    let capped = traj(vec![lookup_ok(tr.chain[0], tr.chain[1])], None);
    assert_eq!(accuracy_reward::<f64>(&capped, &tr, &ExactMatch).unwrap(), 0.0);
    let fatal = traj(
        vec![
            failed(Tool::Probe, tr.chain[0]),
            failed(Tool::Probe, tr.chain[0]),
            failed(Tool::Probe, tr.chain[0]),
            respond(),
        ],
        Some(tr.answer.clone()),
    );
    assert!(fatal.is_fatal());
    assert_eq!(accuracy_reward::<f64>(&fatal, &tr, &ExactMatch).unwrap(), 0.0);
}

#[test]
fn query_expert_scores_one() {
    let t = expert();
    assert_eq!(query_quality_reward::<f64>(&t, &truth(false), t.fatal_index()), 1.0);
}

#[test]
fn query_without_calls_is_zero() {
    let t = traj(vec![respond()], Some(vec![VALUE_BASE]));
    assert_eq!(query_quality_reward::<f64>(&t, &truth(false), t.fatal_index()), 0.0);
}

#[test]
fn query_degraded_without_repair() {
    let mut tr = truth(true);
    tr.degraded = true;
    let t = expert();
    assert_eq!(query_quality_reward::<f64>(&t, &tr, t.fatal_index()), 0.75);
    let repaired = traj(
        std::iter::once(call(
            Tool::Repair,
            tr.chain[0],
            ExecStatus::Ok,
            Some(Observation::Image { handle: ImageHandle(1) }),
        ))
        .chain(t.steps().iter().cloned())
        .collect(),
        Some(tr.answer.clone()),
    );
    assert_eq!(query_quality_reward::<f64>(&repaired, &tr, repaired.fatal_index()), 1.0);
}

#[test]
fn query_sub_scores() {
    let tr = truth(false);
    let decoy = VALUE_BASE + 5;
    // lookups: decoy (ok, off-chain), e1 (ok), e0 (ok), e2 (error)
    let t = traj(
        vec![
            call(Tool::Lookup, decoy, ExecStatus::Ok, Some(Observation::Text { tokens: vec![NIL] })),
            lookup_ok(tr.chain[1], tr.chain[2]),
            lookup_ok(tr.chain[0], tr.chain[1]),
            failed(Tool::Lookup, tr.chain[2]),
            respond(),
        ],
        Some(vec![tr.chain[1]]),
    );
    // relevance 3/4, progression 1/3 ... LIS of [1, 0] is 1 over 3 ok lookups, signal 3/4, compl 1
    let expect = (0.75 + 1.0 / 3.0 + 0.75 + 1.0) / 4.0;
    assert!((query_quality_reward::<f64>(&t, &tr, t.fatal_index()) - expect).abs() < 1e-15);
}

#[test]
fn composite_examples() {
    assert!((composite_reward(1.0, 1.0, 0.5, 0.8).unwrap() - 0.9f64).abs() < 1e-15);
    assert!((composite_reward(1.0, 0.0, 1.0, 0.8).unwrap() - 0.2f64).abs() < 1e-15);
    assert_eq!(composite_reward(0.0, 1.0, 1.0, 0.8).unwrap(), 0.0f64);
    assert!(matches!(composite_reward(1.0, 1.0, 1.0, 1.5f64), Err(Error::Alpha(_))));
    assert!(RewardSuite::with_alpha(-0.1).is_err());
}

#[test]
fn suite_on_live_expert() {
    let cfg = EnvConfig::default();
    let (mut env, prompt) = reset(&cfg, 12).unwrap();
    let t = rollout(
        &mut ScriptedExpert { degraded: false },
        &mut env,
        prompt,
        &RolloutOptions::default(),
        &mut stream_rng(12, POLICY_STREAM),
    )
    .unwrap();
    let b: Breakdown<f64> = RewardSuite::default().score(&t, &env.truth()).unwrap();
    assert_eq!((b.r_fmt, b.r_acc, b.r_query, b.composite), (1.0, 1.0, 1.0, 1.0));
    assert!(!b.fatal);
}

fn serve_once(status_line: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if line == "\r\n" {
                break;
            }
        }
        let mut req = vec![0; len];
        reader.read_exact(&mut req).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "{status_line}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        String::from_utf8(req).unwrap()
    });
    (format!("http://{addr}/judge"), handle)
}

#[test]
fn http_judge_round_trip() {
    let (endpoint, server) = serve_once("HTTP/1.1 200 OK", r#"{"verdict":true,"rationale":"same"}"#);
    let judge = HttpJudge::new(HttpJudgeConfig {
        endpoint,
        timeout_ms: 5000,
        retries: 0,
    });
    let tr = truth(false);
    assert!(judge.accept(&tr.question, &tr.answer, &expert()).unwrap());
    let sent: JudgeRequest = serde_json::from_str(&server.join().unwrap()).unwrap();
    assert_eq!(sent.ground_truth, tr.answer);
    assert_eq!(sent.terminal_response, Some(tr.answer));
}

#[test]
fn http_judge_score() {
    let (endpoint, server) = serve_once("HTTP/1.1 200 OK", r#"{"verdict":0.25,"rationale":""}"#);
    let judge = HttpJudge::new(HttpJudgeConfig {
        endpoint,
        timeout_ms: 5000,
        retries: 0,
    });
    let t = expert();
    assert_eq!(judge.score(&truth(false), &t, t.fatal_index()).unwrap(), 0.25);
    let sent: JudgeRequest = serde_json::from_str(&server.join().unwrap()).unwrap();
    assert!(sent.summary.unwrap().contains("tool_call"));
}

#[test]
fn http_judge_transport_failure_is_an_error() {
    let (endpoint, server) = serve_once("HTTP/1.1 500 Internal Server Error", "{}");
    let judge = HttpJudge::new(HttpJudgeConfig {
        endpoint,
        timeout_ms: 5000,
        retries: 0,
    });
    let suite = RewardSuite {
        alpha: 0.8,
        accuracy: Box::new(judge),
        query: Box::new(Rubric),
    };
    let r = suite.score::<f64>(&expert(), &truth(false));
    assert!(matches!(r, Err(Error::JudgeTransport(_))), "{r:?}");
    server.join().unwrap();

    let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let judge = HttpJudge::new(HttpJudgeConfig {
        endpoint: format!("http://{dead}/"),
        timeout_ms: 500,
        retries: 1,
    });
    let tr = truth(false);
    assert!(matches!(judge.accept(&tr.question, &tr.answer, &expert()), Err(Error::JudgeTransport(_))));
}

fn arb_step(last: bool) -> impl Strategy<Value = StepRecord> {
    let chain = truth(false).chain;
    (0u8..6, 0usize..5, prop::bool::ANY).prop_map(move |(kind, target, ok)| {
        let target = chain.get(target).copied().unwrap_or(VALUE_BASE + 6);
        match kind {
            0 => malformed(),
            1 if last => respond(),
            _ if !ok => failed(Tool::Lookup, target),
            2 => call(Tool::Scan, target, ExecStatus::Ok, Some(Observation::Text { tokens: vec![NIL] })),
            3 => call(
                Tool::Repair,
                target,
                ExecStatus::Ok,
                Some(Observation::Image { handle: ImageHandle(1) }),
            ),
            _ => lookup_ok(target, VALUE_BASE + 3),
        }
    })
}

fn arb_traj() -> impl Strategy<Value = Trajectory> {
    (prop::collection::vec(arb_step(false), 0..9), arb_step(true), prop::option::of(0usize..4)).prop_map(
        |(mut steps, last, resp)| {
            let response = last.parsed_action.is_response().then(|| vec![VALUE_BASE + resp.unwrap_or(0) as u32]);
            steps.push(last);
            traj(steps, response)
        },
    )
}

proptest! {
    #[test]
    fn range_and_gate(t in arb_traj(), degraded in prop::bool::ANY, alpha in 0.0f64..=1.0) {
        let suite = RewardSuite::with_alpha(alpha).unwrap();
        let b: Breakdown<f64> = suite.score(&t, &truth(degraded)).unwrap();
        prop_assert!(0.0 <= b.composite && b.composite <= b.r_fmt + 1e-15 && b.r_fmt <= 1.0);
        prop_assert!((0.0..=1.0).contains(&b.r_query));
        if b.r_fmt == 0.0 {
            prop_assert_eq!(b.composite, 0.0);
        }
        if t.is_fatal() {
            prop_assert_eq!(b.r_acc, 0.0);
        }
    }

    #[test]
    fn prefix_insensitive(t in arb_traj(), replacement in arb_step(false), pick in 0usize..16) {
        let f = t.fatal_index();
        prop_assume!(f < t.num_steps());
        let l = f + pick % (t.num_steps() - f);
        let replacement = if l + 1 == t.num_steps() && replacement.parsed_action.is_response() { malformed() } else { replacement };
        let mutated = t.with_step(l, replacement).unwrap();
        if l > f {
            prop_assert_eq!(mutated.fatal_index(), f);
        }
        for degraded in [false, true] {
            let tr = truth(degraded);
            prop_assert_eq!(format_reward::<f64>(&t, f), format_reward::<f64>(&mutated, f));
            prop_assert_eq!(query_quality_reward::<f64>(&t, &tr, f), query_quality_reward::<f64>(&mutated, &tr, f));
        }
    }

    #[test]
    fn exact_match_is_pure(t in arb_traj()) {
        let tr = truth(false);
        let a = accuracy_reward::<f64>(&t, &tr, &ExactMatch).unwrap();
        let expect = !t.is_fatal() && t.terminal_response() == Some(&tr.answer[..]);
        prop_assert_eq!(a, if expect { 1.0 } else { 0.0 });
    }
}
