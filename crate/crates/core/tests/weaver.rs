mod common;

use std::sync::Arc;

use common::*;
use hotmend::aspectdsl::compile;
use hotmend::csubset::{parse_file, ScalarType};
use hotmend::targetvm::trace::by_request;
use hotmend::targetvm::{load_unit, Checkpoint, CycleSource, DeterministicDriver, Request, Scheduler, ThreadStatus, TraceKind, Value};
use hotmend::weaver::{unweave, weave, woven_bundles, Outcome, WeaveOptions};

fn run_one(p: &hotmend::targetvm::TargetProcess, entry: &str, args: &[i128]) -> ThreadStatus {
    let tid = p.spawn_thread(entry, args.iter().map(|v| Value::Int(*v)).collect()).unwrap();
    assert!(Scheduler::new(1).run_to_completion(p, 1_000_000));
    p.thread_status(tid).unwrap()
}

#[test]
fn sshd_exploit_is_stopped_without_restart() {
    let p = sshd_process();
    let b = sshd_bundle();

    assert_eq!(run_one(&p, "handle_request", &[1, EXPLOIT]), ThreadStatus::Exited(Value::Int(-1)));
    let before = p.take_trace();
    assert!(marks(&before).iter().any(|m| m.starts_with("overflow:")));

    let requests = vec![
        Request::new("handle_request", &[0, 7]),
        Request::new("handle_request", &[1, 3]),
        Request::new("handle_request", &[2, 5]),
        Request::new("handle_request", &[1, EXPLOIT]),
    ];
    let source = Arc::new(CycleSource { requests, limit: Some(60) });
    let workers: Vec<_> = (0..4).map(|w| p.spawn_worker(source.clone(), w)).collect();
    let mut d = DeterministicDriver::new(7);
    d.scheduler.run(&p, 500);
    let rep = weave(&p, &b, &WeaveOptions::default(), &mut d);
    assert_eq!(rep.outcome, Outcome::Woven, "{rep:?}");
    assert_eq!(rep.directives.len(), 4);
    // One direct call of the PAM handler; the other target is only reached
    // through a function pointer.
    assert_eq!(rep.sites_rewritten, 1);
    let activated = rep.activated_at.unwrap();
    assert!(d.scheduler.run_to_completion(&p, 10_000_000));
    for w in &workers {
        assert_eq!(p.thread_status(*w).unwrap(), ThreadStatus::Halted);
    }

    let trace = p.take_trace();
    let mut late = 0;
    for events in by_request(&trace).values() {
        if events[0].at <= activated {
            continue;
        }
        late += 1;
        let exploit = events.iter().any(|e| matches!(&e.kind, TraceKind::Mark { text } if text.contains("1073741825")))
            || events.iter().any(|e| matches!(e.kind, TraceKind::Fatal { .. }));
        let overflow = events.iter().any(|e| matches!(&e.kind, TraceKind::Mark { text } if text.contains("overflow")));
        let end = events.last().unwrap();
        assert!(!overflow, "{events:?}");
        if exploit {
            assert!(matches!(&end.kind, TraceKind::RequestEnd { outcome } if outcome == "fatal"));
        } else {
            assert!(matches!(&end.kind, TraceKind::RequestEnd { outcome } if outcome.starts_with("ok")), "{end:?}");
        }
    }
    assert!(late > 100);

    assert!(matches!(run_one(&p, "handle_request", &[1, EXPLOIT]), ThreadStatus::Fatal(m) if m.contains("nresp too big")));
    assert!(matches!(run_one(&p, "handle_request", &[2, EXPLOIT]), ThreadStatus::Fatal(m) if m.contains("_pam")));
    assert_eq!(run_one(&p, "handle_request", &[1, 3]), ThreadStatus::Exited(Value::Int(0)));
    let after = p.take_trace();
    assert!(!marks(&after).iter().any(|m| m.contains("overflow")));
    assert_eq!(fatals(&after).len(), 2);
    assert_eq!(alarms(&after), 1);
}

#[test]
fn alarm_fires_once_per_attempt() {
    let p = sshd_process();
    let mut d = DeterministicDriver::new(3);
    assert_eq!(weave(&p, &sshd_bundle(), &WeaveOptions::default(), &mut d).outcome, Outcome::Woven);
    p.take_trace();
    for _ in 0..10 {
        run_one(&p, "handle_request", &[1, EXPLOIT]);
    }
    run_one(&p, "handle_request", &[1, 2]);
    let t = p.take_trace();
    assert_eq!(alarms(&t), 10);
    assert_eq!(fatals(&t).len(), 10);
}

#[test]
fn missing_symbol_leaves_process_untouched() {
    let src = fixture("sshd/sshd.c");
    let cut = src.find("int32_t input_userauth_info_response_pam").unwrap();
    let end = cut + src[cut..].find("\n}\n").unwrap() + 3;
    let reduced = format!("{}{}", &src[..cut], &src[end..]).replace("rc = rc + input_userauth_info_response_pam(nresp);", "rc = rc;");
    let p = load_unit(&parse_file("sshd.c", &reduced).unwrap()).unwrap();
    let image = p.code_image();
    let mut d = DeterministicDriver::new(0);
    let rep = weave(&p, &sshd_bundle(), &WeaveOptions::default(), &mut d);
    assert_eq!(rep.outcome, Outcome::FailedSymbols(vec!["input_userauth_info_response_pam".into()]));
    assert_eq!(p.code_image(), image);
    assert!(woven_bundles(&p).is_empty());
}

#[test]
fn weaving_twice_is_rejected() {
    let p = sshd_process();
    let b = sshd_bundle();
    let mut d = DeterministicDriver::new(0);
    assert_eq!(weave(&p, &b, &WeaveOptions::default(), &mut d).outcome, Outcome::Woven);
    assert!(matches!(weave(&p, &b, &WeaveOptions::default(), &mut d).outcome, Outcome::Rejected(_)));
    assert_eq!(woven_bundles(&p), vec!["CA-2002-18".to_string()]);
}

#[test]
fn unweave_restores_the_image() {
    let p = sshd_process();
    let image = p.code_image();
    let b = sshd_bundle();
    let mut d = DeterministicDriver::new(11);
    for _ in 0..100 {
        assert_eq!(weave(&p, &b, &WeaveOptions::default(), &mut d).outcome, Outcome::Woven);
        let rep = unweave(&p, b.id(), 1_000_000, &mut d).unwrap();
        assert_eq!(rep.outcome, Outcome::Unwoven);
        assert_eq!(p.code_image(), image);
    }
    assert_eq!(run_one(&p, "handle_request", &[1, EXPLOIT]), ThreadStatus::Exited(Value::Int(-1)));
    assert!(unweave(&p, b.id(), 0, &mut d).is_err());
}

#[test]
fn collapsed_weave_runs_the_replacement_directly() {
    let p = sshd_process();
    let image = p.code_image();
    let b = sshd_bundle();
    let mut d = DeterministicDriver::new(5);
    let opts = WeaveOptions { collapse: true, ..Default::default() };
    assert_eq!(weave(&p, &b, &opts, &mut d).outcome, Outcome::Woven);
    assert_ne!(p.code_image(), image);
    assert!(matches!(run_one(&p, "handle_request", &[3, EXPLOIT]), ThreadStatus::Fatal(_)));
    unweave(&p, b.id(), 1_000_000, &mut d).unwrap();
    assert_eq!(p.code_image(), image);
}

fn slow_bundle() -> hotmend::aspectdsl::PatchBundle {
    let t = translate_fixture("slow", "slow.c", "slow-v2");
    compile(&t.patch.unwrap()).unwrap()
}

fn start_in_flight(p: &hotmend::targetvm::TargetProcess) -> (u32, Scheduler) {
    let tid = p.spawn_thread("serve", vec![Value::Int(400)]).unwrap();
    let mut s = Scheduler::new(2);
    while !p.stack_contains("work") {
        s.run(p, 1);
    }
    (tid, s)
}

fn work_return_at(p: &hotmend::targetvm::TargetProcess) -> u64 {
    p.trace_snapshot().iter().find(|e| matches!(&e.kind, TraceKind::Return { function } if function == "work")).map(|e| e.at).expect("work returned")
}

#[test]
fn waiting_for_quiescence_activates_after_the_frame_pops() {
    let p = process_from("slow/slow.c");
    let (tid, _) = start_in_flight(&p);
    let mut d = DeterministicDriver::new(9);
    let opts = WeaveOptions { wait_for_quiescence: true, ..Default::default() };
    let rep = weave(&p, &slow_bundle(), &opts, &mut d);
    assert_eq!(rep.outcome, Outcome::Woven);
    let at = rep.activated_at.unwrap();
    assert!(at > work_return_at(&p), "activated at {at}");
    assert!(rep.quiescence_wait_us > 0);
    assert!(d.scheduler.run_to_completion(&p, 1_000_000));
    assert_eq!(p.thread_status(tid).unwrap(), ThreadStatus::Exited(Value::Int(400)));
    assert_eq!(run_one(&p, "serve", &[1]), ThreadStatus::Exited(Value::Int(2)));
}

#[test]
fn immediate_activation_lets_the_frame_finish_on_old_code() {
    let p = process_from("slow/slow.c");
    let (tid, mut s) = start_in_flight(&p);
    let mut d = DeterministicDriver::new(9).with_max_burst(0);
    let rep = weave(&p, &slow_bundle(), &WeaveOptions::default(), &mut d);
    assert_eq!(rep.outcome, Outcome::Woven);
    assert!(p.stack_contains("work"));
    assert!(s.run_to_completion(&p, 1_000_000));
    assert!(rep.activated_at.unwrap() < work_return_at(&p));
    assert_eq!(p.thread_status(tid).unwrap(), ThreadStatus::Exited(Value::Int(400)));
    assert!(marks(&p.trace_snapshot()).contains(&"work end 400"));
    assert_eq!(run_one(&p, "serve", &[1]), ThreadStatus::Exited(Value::Int(2)));
}

#[test]
fn quiescence_timeout_rolls_back() {
    let p = process_from("slow/slow.c");
    let image = p.code_image();
    let _in_flight = start_in_flight(&p);
    let mut d = DeterministicDriver::new(1).with_max_burst(0);
    let opts = WeaveOptions { wait_for_quiescence: true, quiescence_timeout_us: 50, collapse: false };
    let rep = weave(&p, &slow_bundle(), &opts, &mut d);
    assert_eq!(rep.outcome, Outcome::TimedOutQuiescent("work".into()));
    assert_eq!(p.code_image(), image);
    assert!(woven_bundles(&p).is_empty());
}

#[test]
fn widened_global_keeps_large_values() {
    let t = translate_fixture("counter", "counter.c", "widen");
    let patch = t.patch.unwrap();
    assert_eq!(patch.aspects.len(), 2);
    let b = compile(&patch).unwrap();
    let p = process_from("counter/counter.c");
    let mut d = DeterministicDriver::new(4);
    assert_eq!(weave(&p, &b, &WeaveOptions::default(), &mut d).outcome, Outcome::Woven);
    run_one(&p, "bump", &[5]);
    assert_eq!(run_one(&p, "read_hits", &[]), ThreadStatus::Exited(Value::Int(5)));
    p.write_global("hits", 0, &Value::Int(1 << 40)).unwrap();
    assert_eq!(run_one(&p, "read_hits", &[]), ThreadStatus::Exited(Value::Int(1 << 40)));
}

#[test]
fn narrowing_checks_the_live_value() {
    let t = translate_fixture("narrow", "narrow.c", "narrow");
    let b = compile(&t.patch.unwrap()).unwrap();
    let p = process_from("narrow/narrow.c");
    run_one(&p, "add", &[1 << 40]);
    let image = p.code_image();
    let mut d = DeterministicDriver::new(4);
    let rep = weave(&p, &b, &WeaveOptions::default(), &mut d);
    assert_eq!(rep.outcome, Outcome::FailedValueCheck { symbol: "total".into(), value: (1i64 << 40).to_string(), target: ScalarType::I32 });
    assert_eq!(p.code_image(), image);

    let q = process_from("narrow/narrow.c");
    run_one(&q, "add", &[12]);
    assert_eq!(weave(&q, &b, &WeaveOptions::default(), &mut d).outcome, Outcome::Woven);
    run_one(&q, "add", &[30]);
    assert_eq!(run_one(&q, "report", &[]), ThreadStatus::Exited(Value::Int(42)));
}

#[test]
fn report_text_is_canonical_json() {
    let p = sshd_process();
    let mut d = DeterministicDriver::new(0);
    let rep = weave(&p, &sshd_bundle(), &WeaveOptions::default(), &mut d);
    let v: serde_json::Value = serde_json::from_str(&rep.to_text()).unwrap();
    assert_eq!(v["outcome"], "woven");
    assert_eq!(v["bundle_id"], "CA-2002-18");
}

fn cycle_under_load(seed: u64, cycles: usize) -> (usize, (usize, usize)) {
    let p = sshd_process();
    let b = sshd_bundle();
    let source = Arc::new(CycleSource { requests: vec![Request::new("handle_request", &[3, EXPLOIT])], limit: None });
    for w in 0..4 {
        p.spawn_worker(source.clone(), w);
    }
    let mut d = DeterministicDriver::new(seed);
    let mut mixed = 0;
    let mut split = (0, 0);
    for _ in 0..cycles {
        assert_eq!(weave(&p, &b, &WeaveOptions::default(), &mut d).outcome, Outcome::Woven);
        d.yield_now(&p);
        assert_eq!(unweave(&p, b.id(), 1_000_000, &mut d).unwrap().outcome, Outcome::Unwoven);
        d.yield_now(&p);
        let t = p.take_trace();
        mixed += mixed_windows(&t);
        let (o, n) = request_split(&t);
        split = (split.0 + o, split.1 + n);
    }
    (mixed, split)
}

#[test]
fn no_request_straddles_a_weave() {
    for seed in 0..5 {
        let (mixed, (old, new)) = cycle_under_load(seed, 100);
        assert_eq!(mixed, 0, "seed {seed}");
        assert!(old > 0 && new > 0, "seed {seed}: {old} old, {new} new");
    }
}

proptest::proptest! {
    #![proptest_config(proptest::test_runner::Config { cases: 16, failure_persistence: None, ..Default::default() })]

    #[test]
    fn weave_cycles_keep_requests_whole_and_restore_the_image(seed in proptest::prelude::any::<u64>(), cycles in 1usize..20) {
        let p = sshd_process();
        let image = p.code_image();
        let b = sshd_bundle();
        let source = Arc::new(CycleSource { requests: vec![Request::new("handle_request", &[3, EXPLOIT])], limit: None });
        for w in 0..4 {
            p.spawn_worker(source.clone(), w);
        }
        let mut d = DeterministicDriver::new(seed);
        for _ in 0..cycles {
            proptest::prop_assert_eq!(weave(&p, &b, &WeaveOptions::default(), &mut d).outcome, Outcome::Woven);
            d.yield_now(&p);
            proptest::prop_assert_eq!(unweave(&p, b.id(), 1_000_000, &mut d).unwrap().outcome, Outcome::Unwoven);
            proptest::prop_assert_eq!(p.code_image(), image.clone());
        }
        proptest::prop_assert_eq!(mixed_windows(&p.take_trace()), 0);
    }
}

#[test]
fn requests_entering_a_replaced_function_run_the_new_version() {
    let sources = std::collections::BTreeMap::from([("session.c".to_string(), fixture("layout/session.c"))]);
    let t = hotmend::pipeline::translate(&sources, &fixture("layout/add.diff"), "lockouts").unwrap();
    let b = compile(&t.patch.unwrap()).unwrap();
    let p = process_from("layout/session.c");
    let mut d = DeterministicDriver::new(0);
    assert_eq!(weave(&p, &b, &WeaveOptions::default(), &mut d).outcome, Outcome::Woven);
    let got: Vec<_> = (0..5).map(|_| run_one(&p, "login", &[7])).collect();
    let want: Vec<_> = [0, 0, 0, 1, 2].iter().map(|v| ThreadStatus::Exited(Value::Int(*v))).collect();
    assert_eq!(got, want);
    // Reads before the first store see the default without taking a slot.
    assert_eq!(p.shadow_len("session", "lockouts"), Some(1));
    unweave(&p, b.id(), 1_000_000, &mut d).unwrap();
    assert_eq!(run_one(&p, "login", &[7]), ThreadStatus::Exited(Value::Int(0)));
    assert_eq!(p.shadow_len("session", "lockouts"), None);
}
