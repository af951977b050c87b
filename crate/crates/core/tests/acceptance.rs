//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any criterion fails or overruns its time limit.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::gen::{gnu_diff, shape, text_pair};
use common::props::{diff_round_trip, names, patch_round_trip};
use common::*;
use hotmend::aspectdsl::{compile, PatchBundle};
use hotmend::classifier::{ChangeKind, RuntimeCheck, Strategy, TypeChangePlan, Verdict};
use hotmend::csubset::ScalarType;
use hotmend::fleet::protocol::Message;
use hotmend::fleet::{deploy, request, Agent, AgentHandle, FleetJob, HostedProcess, NodeSpec, ProcessSpec, Timeouts};
use hotmend::pipeline::translate;
use hotmend::targetvm::trace::by_request;
use hotmend::targetvm::{
    Checkpoint, CycleSource, DeterministicDriver, Request, Scheduler, TargetProcess, ThreadStatus, TraceEvent, TraceKind, Value,
};
use hotmend::weaver::{unweave, weave, Outcome, WeaveOptions};
use proptest::test_runner::{Config, TestRunner};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_one(p: &TargetProcess, entry: &str, args: &[i128]) -> ThreadStatus {
    let tid = p.spawn_thread(entry, args.iter().map(|v| Value::Int(*v)).collect()).unwrap();
    assert!(Scheduler::new(1).run_to_completion(p, 1_000_000));
    p.thread_status(tid).unwrap()
}

fn translate_layout(diff: &str, id: &str) -> hotmend::pipeline::Translation {
    let sources = BTreeMap::from([("session.c".to_string(), fixture("layout/session.c"))]);
    translate(&sources, &fixture(&format!("layout/{diff}")), id).unwrap()
}

fn text_of(e: &TraceEvent) -> Option<&str> {
    match &e.kind {
        TraceKind::Mark { text } => Some(text),
        TraceKind::Fatal { message } => Some(message),
        _ => None,
    }
}

/// Translated from the committed fixture with no operator additions.
fn plain_sshd_bundle() -> Result<PatchBundle, String> {
    let t = translate_fixture("sshd", "sshd.c", "CA-2002-18");
    let patch = t.patch.ok_or("sshd patch is not dynamic")?;
    let mut per_target: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &patch.aspects {
        *per_target.entry(a.pointcut.target()).or_default() += 1;
    }
    ensure(patch.aspects.len() == 4, || format!("{} aspects", patch.aspects.len()))?;
    ensure(per_target.len() == 2 && per_target.values().all(|n| *n == 2), || format!("aspects per function {per_target:?}"))?;
    compile(&patch).map_err(|e| e.to_string())
}

fn sshd_end_to_end() -> Result<String, String> {
    let bundle = plain_sshd_bundle()?;
    let p = sshd_process();
    let exploit = EXPLOIT.to_string();
    let requests = vec![
        Request::new("handle_request", &[0, 7]),
        Request::new("handle_request", &[1, 3]),
        Request::new("handle_request", &[2, 5]),
        Request::new("handle_request", &[1, EXPLOIT]),
        Request::new("handle_request", &[2, EXPLOIT]),
        Request::new("handle_request", &[3, 9]),
    ];
    let source = Arc::new(CycleSource { requests, limit: Some(400) });
    let workers: Vec<_> = (0..4).map(|w| p.spawn_worker(source.clone(), w)).collect();
    let mut d = DeterministicDriver::new(2002);
    d.scheduler.run(&p, 5_000);
    let rep = weave(&p, &bundle, &WeaveOptions::default(), &mut d);
    ensure(rep.outcome == Outcome::Woven, || format!("{rep:?}"))?;
    ensure(rep.directives.len() == 4, || format!("{} directives", rep.directives.len()))?;
    let activated = rep.activated_at.unwrap();
    ensure(d.scheduler.run_to_completion(&p, 50_000_000), || "load did not drain".into())?;
    for w in &workers {
        let s = p.thread_status(*w).unwrap();
        ensure(s == ThreadStatus::Halted, || format!("worker {w} ended {s:?}"))?;
    }

    let trace = p.take_trace();
    let (mut pre_exploit, mut post_exploit, mut benign) = (0, 0, 0);
    for events in by_request(&trace).values() {
        let is_exploit = events.iter().filter_map(|e| text_of(e)).any(|t| t.contains(&exploit));
        let overflow = events.iter().filter_map(|e| text_of(e)).any(|t| t.starts_with("overflow"));
        let fatal = events.iter().any(|e| matches!(e.kind, TraceKind::Fatal { .. }));
        let end = match &events.last().unwrap().kind {
            TraceKind::RequestEnd { outcome } => outcome.as_str(),
            k => return Err(format!("request did not end: {k:?}")),
        };
        let pre = events[0].at < activated;
        let post = events[0].at > activated;
        if !is_exploit {
            benign += 1;
            ensure(end.starts_with("ok") && !fatal, || format!("benign request failed: {events:?}"))?;
        } else if pre && overflow {
            pre_exploit += 1;
        } else if post {
            ensure(fatal && !overflow && end == "fatal", || format!("exploit not stopped: {events:?}"))?;
            post_exploit += 1;
        }
    }
    ensure(pre_exploit > 0 && post_exploit > 0 && benign > 0, || format!("{pre_exploit} pre, {post_exploit} post, {benign} benign"))?;
    Ok(format!("4 aspects; {pre_exploit} exploits overflowed before, {post_exploit} hit the fatal path after, {benign} benign requests ok, 4 workers never restarted"))
}

fn atomicity_stress() -> Result<String, String> {
    let b = plain_sshd_bundle()?;
    let (seeds, cycles) = (50u64, 1000usize);
    let (mut old, mut new) = (0, 0);
    for seed in 0..seeds {
        let p = sshd_process();
        let image = p.code_image();
        let requests = vec![Request::new("handle_request", &[3, EXPLOIT]), Request::new("handle_request", &[3, 2])];
        let source = Arc::new(CycleSource { requests, limit: None });
        for w in 0..4 {
            p.spawn_worker(source.clone(), w);
        }
        let mut d = DeterministicDriver::new(seed);
        for cycle in 0..cycles {
            let w = weave(&p, &b, &WeaveOptions::default(), &mut d);
            ensure(w.outcome == Outcome::Woven, || format!("seed {seed} cycle {cycle}: {:?}", w.outcome))?;
            d.yield_now(&p);
            let u = unweave(&p, b.id(), 1_000_000, &mut d).map_err(|e| e.to_string())?;
            ensure(u.outcome == Outcome::Unwoven, || format!("seed {seed} cycle {cycle}: {:?}", u.outcome))?;
            d.yield_now(&p);
            let t = p.take_trace();
            let mixed = mixed_windows(&t);
            ensure(mixed == 0, || format!("seed {seed} cycle {cycle}: {mixed} mixed windows"))?;
            let (o, n) = request_split(&t);
            old += o;
            new += n;
        }
        ensure(p.code_image() == image, || format!("seed {seed}: image not restored"))?;
    }
    ensure(old > 0 && new > 0, || format!("{old} old, {new} new"))?;
    Ok(format!("{} cycles over {seeds} seeds, 0 mixed windows ({old} old-code and {new} new-code exploit requests)", seeds as usize * cycles))
}

fn missing_symbol() -> Result<String, String> {
    let b = plain_sshd_bundle()?;
    let p = process_from("fleet/sshd_nopam_host.c");
    let image = p.code_image();
    let rep = weave(&p, &b, &WeaveOptions::default(), &mut DeterministicDriver::new(0));
    let want = Outcome::FailedSymbols(vec!["input_userauth_info_response_pam".into()]);
    ensure(rep.outcome == want, || format!("{:?}", rep.outcome))?;
    ensure(p.code_image() == image, || "instruction store changed".into())?;
    Ok(format!("{}; instruction store identical ({} bytes)", rep.outcome, image.len()))
}

fn slow_setup() -> Result<(TargetProcess, PatchBundle, u32, Scheduler), String> {
    let t = translate_fixture("slow", "slow.c", "slow-v2");
    let b = compile(&t.patch.ok_or("slow patch is not dynamic")?).map_err(|e| e.to_string())?;
    let p = process_from("slow/slow.c");
    let tid = p.spawn_thread("serve", vec![Value::Int(400)]).unwrap();
    let mut s = Scheduler::new(2);
    while !p.stack_contains("work") {
        s.run(&p, 1);
    }
    Ok((p, b, tid, s))
}

fn work_return_at(p: &TargetProcess) -> Option<u64> {
    p.trace_snapshot().iter().find(|e| matches!(&e.kind, TraceKind::Return { function } if function == "work")).map(|e| e.at)
}

fn quiescence() -> Result<String, String> {
    let (p, b, tid, _) = slow_setup()?;
    let mut d = DeterministicDriver::new(9);
    let rep = weave(&p, &b, &WeaveOptions { wait_for_quiescence: true, ..Default::default() }, &mut d);
    ensure(rep.outcome == Outcome::Woven, || format!("{:?}", rep.outcome))?;
    let (waited_at, popped_at) = (rep.activated_at.unwrap(), work_return_at(&p).ok_or("frame never popped")?);
    ensure(waited_at > popped_at, || format!("activated at step {waited_at}, frame popped at {popped_at}"))?;
    d.scheduler.run_to_completion(&p, 1_000_000);
    ensure(p.thread_status(tid).unwrap() == ThreadStatus::Exited(Value::Int(400)), || "in-flight call changed".into())?;

    let (p, b, tid, mut s) = slow_setup()?;
    let mut d = DeterministicDriver::new(9).with_max_burst(0);
    let rep = weave(&p, &b, &WeaveOptions::default(), &mut d);
    ensure(rep.outcome == Outcome::Woven, || format!("{:?}", rep.outcome))?;
    let immediate_at = rep.activated_at.unwrap();
    ensure(p.stack_contains("work"), || "frame popped during the weave".into())?;
    s.run_to_completion(&p, 1_000_000);
    let popped = work_return_at(&p).ok_or("frame never popped")?;
    ensure(immediate_at < popped, || format!("activated at step {immediate_at}, frame popped at {popped}"))?;
    ensure(marks(&p.trace_snapshot()).contains(&"work end 400"), || "in-flight frame did not finish on old code".into())?;
    ensure(p.thread_status(tid).unwrap() == ThreadStatus::Exited(Value::Int(400)), || "in-flight call changed".into())?;
    ensure(run_one(&p, "serve", &[1]) == ThreadStatus::Exited(Value::Int(2)), || "new calls do not reach new code".into())?;
    Ok(format!(
        "waited: activation at step {waited_at} after pop at {popped_at}; immediate: activation at step {immediate_at}, old frame popped at {popped}"
    ))
}

/// Written from the C types alone: (signed, float, bits).
fn c_shape(t: ScalarType) -> (bool, bool, u32) {
    match t.c_name() {
        "float" => (true, true, 32),
        "double" => (true, true, 64),
        n => {
            let bits = n.trim_start_matches('u').trim_start_matches("int").trim_end_matches("_t").parse().unwrap();
            (!n.starts_with('u'), false, bits)
        }
    }
}

/// A value check is needed unless every old value survives: same numeric
/// class and at least as wide.
fn oracle_needs_check(old: ScalarType, new: ScalarType) -> bool {
    let (os, of, ob) = c_shape(old);
    let (ns, nf, nb) = c_shape(new);
    !(os == ns && of == nf && nb >= ob)
}

fn retype_source(ty: ScalarType) -> String {
    format!("{} level = 1;\n\nint32_t bump(int32_t x) {{\n    level = level + x;\n    return x;\n}}\n", ty.c_name())
}

fn classifier_table() -> Result<String, String> {
    let mut pairs = 0;
    let mut checked = 0;
    for old in ScalarType::ALL {
        for new in ScalarType::ALL {
            let plan = TypeChangePlan::between(old, new);
            if old == new {
                ensure(plan.is_none(), || format!("{old} -> {new} planned"))?;
                continue;
            }
            pairs += 1;
            let plan = plan.unwrap();
            let want = oracle_needs_check(old, new);
            ensure(plan.needs_value_check == want, || format!("{old} -> {new}: value check {} expected {want}", plan.needs_value_check))?;

            let (a, b) = (retype_source(old), retype_source(new));
            let t = translate(&BTreeMap::from([("g.c".to_string(), a.clone())]), &gnu_diff(&a, &b, "g.c"), "retype").map_err(|e| e.to_string())?;
            let item = t.changes.items.iter().find(|c| c.kind == ChangeKind::GlobalTypeChanged).ok_or("no retype change")?;
            let fits = RuntimeCheck::ValueFits { global: "level".into(), ty: new };
            let has = item.required_runtime_checks.contains(&fits);
            ensure(has == want, || format!("{old} -> {new}: classified {:?}", item.verdict))?;
            ensure(t.patch.as_ref().is_some_and(|p| p.checks.contains(&fits) == want), || format!("{old} -> {new}: patch checks"))?;
            checked += 1;
        }
    }

    let add = translate_layout("add.diff", "add-lockouts");
    let item = add.changes.items.iter().find(|c| c.kind == ChangeKind::StructFieldAdded).ok_or("no field addition")?;
    ensure(matches!(&item.strategy, Strategy::ShadowField(plan) if plan.field == "lockouts"), || format!("{:?}", item.strategy))?;
    let b = compile(&add.patch.ok_or("field addition is not dynamic")?).map_err(|e| e.to_string())?;
    let p = process_from("layout/session.c");
    let rep = weave(&p, &b, &WeaveOptions::default(), &mut DeterministicDriver::new(0));
    ensure(rep.outcome == Outcome::Woven, || format!("{:?}", rep.outcome))?;
    let mut lazy = Vec::new();
    for _ in 0..5 {
        lazy.push(run_one(&p, "login", &[7]));
        if lazy.len() == 1 {
            ensure(p.shadow_len("session", "lockouts").unwrap_or(0) == 0, || "shadow slot created before a store".into())?;
        }
    }
    let want: Vec<_> = [0, 0, 0, 1, 2].iter().map(|v| ThreadStatus::Exited(Value::Int(*v))).collect();
    ensure(lazy == want, || format!("login results {lazy:?}"))?;
    ensure(p.shadow_len("session", "lockouts") == Some(1), || "one instance should own a shadow slot".into())?;

    let remove = translate_layout("remove.diff", "remove-flags");
    let item = remove.changes.items.iter().find(|c| c.kind == ChangeKind::StructFieldRemoved).ok_or("no field removal")?;
    ensure(matches!(item.verdict, Verdict::StaticOnly(_)), || format!("{:?}", item.verdict))?;
    ensure(remove.patch.is_none(), || "removal produced a dynamic patch".into())?;
    Ok(format!("{pairs} type pairs match the oracle ({checked} classified from sources); added field reads its default before the first store; removal is static-only"))
}

fn round_trips() -> Result<String, String> {
    let cases = 128;
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new(config.clone());
    let strategy = (shape(), names(), proptest::bool::ANY);
    runner.run(&strategy, |(s, (id, description), alarm)| patch_round_trip(&s, &id, &description, alarm)).map_err(|e| format!("patches: {e}"))?;
    let mut runner = TestRunner::new(config);
    runner.run(&text_pair(), |(old, new)| diff_round_trip(&old, &new)).map_err(|e| format!("diffs: {e}"))?;
    Ok(format!("{cases} generated patches and {cases} file pairs against GNU diff and patch"))
}

fn spec(name: &str) -> ProcessSpec {
    let path = format!("{}/tests/fixtures/fleet/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    ProcessSpec::load(Path::new(&path)).unwrap()
}

fn agent(name: &str) -> AgentHandle {
    Arc::new(Agent::new(vec![HostedProcess::start(&spec(name)).unwrap()])).spawn("127.0.0.1:0").unwrap()
}

fn nodes(agents: &[AgentHandle]) -> Vec<NodeSpec> {
    agents.iter().enumerate().map(|(i, a)| NodeSpec { id: format!("node-{i}"), addr: a.addr_string(), process: "sshd".into() }).collect()
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

fn fleet() -> Result<String, String> {
    let b = plain_sshd_bundle()?;
    let t = Timeouts { connect_ms: 1000, reply_ms: 10_000 };
    let three = [agent("sshd"), agent("sshd"), agent("sshd_nopam")];
    let r = deploy(FleetJob::new(b.clone(), nodes(&three), WeaveOptions::default()), &t);
    let c = &r.counts;
    ensure((c.woven, c.failed, c.unreachable, c.pending) == (2, 1, 0, 0), || r.to_text())?;

    let eight: Vec<_> = (0..8).map(|_| agent("sshd")).collect();
    let all = nodes(&eight);
    let reset = |targets: &[NodeSpec]| {
        for n in targets {
            let un = Message::Unweave { process: "sshd".into(), bundle_id: b.id().into(), timeout_us: 5_000_000 };
            let _ = request(&n.addr, un, &t);
        }
    };
    let timed = |targets: &[NodeSpec]| -> Result<u64, String> {
        let r = deploy(FleetJob::new(b.clone(), targets.to_vec(), WeaveOptions::default()), &t);
        ensure(r.all_woven(), || r.to_text())?;
        reset(targets);
        Ok(r.wall_us)
    };
    timed(&all)?;
    let (mut one, mut many) = (Vec::new(), Vec::new());
    for _ in 0..7 {
        one.push(timed(&all[..1])?);
        many.push(timed(&all)?);
    }
    let (one, many) = (median(one), median(many));
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    ensure(many <= 2 * one, || {
        format!(
            "2 woven + 1 failed, but 8 nodes took {many} us against {one} us for 1 node ({:.1}x) with all agents sharing {cpus} CPU(s)",
            many as f64 / one as f64
        )
    })?;
    Ok(format!("2 woven + 1 failed; median deploy wall time 1 node {one} us, 8 nodes {many} us"))
}

fn latency() -> String {
    let Ok(b) = plain_sshd_bundle() else { return "no bundle".into() };
    let hosted = HostedProcess::start(&spec("sshd")).unwrap();
    let mut samples = Vec::new();
    for _ in 0..21 {
        let mut clock = hotmend::targetvm::ProcessClock;
        let rep = weave(&hosted.process, &b, &WeaveOptions::default(), &mut clock);
        samples.push(rep.elapsed_us);
        let _ = unweave(&hosted.process, b.id(), 5_000_000, &mut clock);
        clock.yield_now(&hosted.process);
    }
    let med = median(samples);
    format!("local weave of the sshd bundle into a loaded simulated process: median {med} us over 21 runs; no comparison is made with the published real-process latency or advisory survey figures")
}

fn main() {
    let criteria: [(u32, &str, Check, Duration); 7] = [
        (1, "sshd end to end", sshd_end_to_end, Duration::from_secs(10)),
        (2, "bundle atomicity stress", atomicity_stress, Duration::from_secs(60)),
        (3, "symbol verification failure", missing_symbol, Duration::from_secs(1)),
        (4, "quiescence", quiescence, Duration::from_secs(5)),
        (5, "classifier verdict table", classifier_table, Duration::from_secs(1)),
        (6, "round-trip properties", round_trips, Duration::from_secs(30)),
        (7, "fleet", fleet, Duration::from_secs(30)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, check, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let took = started.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over the time limit")),
            Err(e) => (false, e),
        };
        failed += usize::from(!ok);
        println!("{} criterion {n} {name} ({:.2} s of {} s): {detail}", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64(), limit.as_secs());
    }
    if filter.is_empty() || filter.iter().any(|f| f == "8") {
        println!("INFO criterion 8 latency: {}", latency());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
