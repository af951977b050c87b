mod common;

use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::Arc;

use common::*;
use hotmend::fleet::protocol::{decode, read_frame, write_frame, Envelope, Frame, Message};
use hotmend::fleet::{deploy, request, Agent, AgentHandle, FleetJob, HostedProcess, NodeSpec, NodeStatus, ProcessSpec, Timeouts};
use hotmend::targetvm::{DeterministicDriver, ThreadStatus, Value};
use hotmend::weaver::{weave, Outcome, WeaveOptions};

fn spec(name: &str) -> ProcessSpec {
    let path = format!("{}/tests/fixtures/fleet/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    ProcessSpec::load(Path::new(&path)).unwrap()
}

fn agent(spec_name: &str) -> AgentHandle {
    let hosted = HostedProcess::start(&spec(spec_name)).unwrap();
    Arc::new(Agent::new(vec![hosted])).spawn("127.0.0.1:0").unwrap()
}

fn node(id: &str, a: &AgentHandle) -> NodeSpec {
    NodeSpec { id: id.into(), addr: a.addr_string(), process: "sshd".into() }
}

fn quick() -> Timeouts {
    Timeouts { connect_ms: 500, reply_ms: 10_000 }
}

fn read_reply(r: &mut impl std::io::Read) -> Envelope {
    let Some(Frame::Payload(p)) = read_frame(r).unwrap() else { panic!("no reply") };
    decode(&p).unwrap()
}

#[test]
fn ping_list_status() {
    let a = agent("sshd");
    let t = quick();
    assert_eq!(request(&a.addr_string(), Message::Ping, &t).unwrap(), Message::Pong { agent_version: hotmend::fleet::AGENT_VERSION.into() });
    let Message::Listing { processes } = request(&a.addr_string(), Message::List, &t).unwrap() else { panic!() };
    assert_eq!(processes.len(), 1);
    assert!(processes[0].symbols.contains(&"input_userauth_info_response".to_string()));
    assert!(processes[0].woven.is_empty());
    let Message::StatusReply { processes } = request(&a.addr_string(), Message::Status, &t).unwrap() else { panic!() };
    assert_eq!(processes[0].threads, 2);
}

#[test]
fn malformed_frames_keep_the_connection() {
    let a = agent("sshd");
    let stream = TcpStream::connect(a.addr).unwrap();
    let mut r = BufReader::new(stream.try_clone().unwrap());
    let mut w = &stream;

    let junk = b"{\"schema\":1,\"id\":5,\"message\":{\"type\":\"reboot\"}}";
    w.write_all(&(junk.len() as u32).to_be_bytes()).unwrap();
    w.write_all(junk).unwrap();
    let reply = read_reply(&mut r);
    assert_eq!(reply.id, 5);
    assert!(matches!(reply.message, Message::ProtocolError { .. }));

    w.write_all(&3u32.to_be_bytes()).unwrap();
    w.write_all(b"\xff\x00!").unwrap();
    assert!(matches!(read_reply(&mut r).message, Message::ProtocolError { .. }));

    write_frame(&mut w, &Envelope::new(6, Message::Pong { agent_version: "x".into() })).unwrap();
    assert!(matches!(read_reply(&mut r).message, Message::ProtocolError { .. }));

    write_frame(&mut w, &Envelope::new(7, Message::Ping)).unwrap();
    let reply = read_reply(&mut r);
    assert_eq!(reply.id, 7);
    assert!(matches!(reply.message, Message::Pong { .. }));
}

#[test]
fn remote_weave_and_unweave() {
    let a = agent("sshd");
    let b = sshd_bundle();
    let t = quick();
    let msg = Message::Weave { process: "sshd".into(), bundle: b.to_text(), options: WeaveOptions::default() };
    let Message::Report { report } = request(&a.addr_string(), msg.clone(), &t).unwrap() else { panic!() };
    assert_eq!(report.outcome, Outcome::Woven);
    let Message::Report { report } = request(&a.addr_string(), msg, &t).unwrap() else { panic!() };
    assert!(matches!(report.outcome, Outcome::Rejected(_)));

    let p = &a.agent.process("sshd").unwrap().process;
    assert_eq!(hotmend::weaver::woven_bundles(p), vec![b.id().to_string()]);
    let un = Message::Unweave { process: "sshd".into(), bundle_id: b.id().into(), timeout_us: 5_000_000 };
    let Message::Report { report } = request(&a.addr_string(), un.clone(), &t).unwrap() else { panic!() };
    assert_eq!(report.outcome, Outcome::Unwoven);
    assert!(matches!(request(&a.addr_string(), un, &t).unwrap(), Message::Error { .. }));

    let bad = Message::Weave { process: "nginx".into(), bundle: b.to_text(), options: WeaveOptions::default() };
    assert!(matches!(request(&a.addr_string(), bad, &t).unwrap(), Message::Error { .. }));
    let bad = Message::Weave { process: "sshd".into(), bundle: "garbage".into(), options: WeaveOptions::default() };
    assert!(matches!(request(&a.addr_string(), bad, &t).unwrap(), Message::Error { .. }));
}

#[test]
fn remote_failure_matches_local_weave() {
    let a = agent("sshd_nopam");
    let b = sshd_bundle();
    let before = a.agent.process("sshd").unwrap().process.code_image();
    let msg = Message::Weave { process: "sshd".into(), bundle: b.to_text(), options: WeaveOptions::default() };
    let Message::Report { report } = request(&a.addr_string(), msg, &quick()).unwrap() else { panic!() };
    assert_eq!(a.agent.process("sshd").unwrap().process.code_image(), before);

    let local = process_from("fleet/sshd_nopam_host.c");
    let expected = weave(&local, &b, &WeaveOptions::default(), &mut DeterministicDriver::new(0));
    assert_eq!(report.outcome, expected.outcome);
    assert_eq!(report.outcome, Outcome::FailedSymbols(vec!["input_userauth_info_response_pam".into()]));
    assert_eq!(report.sites_rewritten, expected.sites_rewritten);
}

#[test]
fn deploy_reports_each_node() {
    let agents = [agent("sshd"), agent("sshd"), agent("sshd_nopam")];
    let targets = vec![node("n1", &agents[0]), node("n2", &agents[1]), node("n3", &agents[2])];
    let job = FleetJob::new(sshd_bundle(), targets, WeaveOptions::default());
    let r = deploy(job, &quick());
    assert_eq!((r.counts.woven, r.counts.failed, r.counts.unreachable, r.counts.pending), (2, 1, 0, 0));
    assert_eq!(r.counts.total(), 3);
    assert_eq!(r.nodes.iter().map(|n| n.node.as_str()).collect::<Vec<_>>(), ["n1", "n2", "n3"]);
    assert!(matches!(&r.nodes[2].status, NodeStatus::Failed(m) if m.contains("input_userauth_info_response_pam")));
    assert_eq!(r.nodes[2].report.as_ref().unwrap().outcome, Outcome::FailedSymbols(vec!["input_userauth_info_response_pam".into()]));
    let v: serde_json::Value = serde_json::from_str(&r.to_text()).unwrap();
    assert_eq!(v["counts"]["woven"], 2);
}

#[test]
fn outcomes_do_not_depend_on_target_order() {
    let agents = [agent("sshd"), agent("sshd_nopam"), agent("sshd")];
    let mut targets = vec![node("a", &agents[0]), node("b", &agents[1]), node("c", &agents[2])];
    targets.reverse();
    let r = deploy(FleetJob::new(sshd_bundle(), targets, WeaveOptions::default()), &quick());
    let statuses: Vec<bool> = r.nodes.iter().map(|n| n.status == NodeStatus::Woven).collect();
    assert_eq!(statuses, [true, false, true]);
}

#[test]
fn unreachable_nodes_do_not_block_others() {
    let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let live = agent("sshd");
    let targets = vec![
        NodeSpec { id: "dead".into(), addr: dead.to_string(), process: "sshd".into() },
        node("live", &live),
        NodeSpec { id: "nowhere".into(), addr: "not-an-address".into(), process: "sshd".into() },
    ];
    let r = deploy(FleetJob::new(sshd_bundle(), targets, WeaveOptions::default()), &quick());
    assert_eq!(r.counts.unreachable, 2);
    assert_eq!(r.counts.woven, 1);
    assert!(r.nodes[0].error.is_some());
}

#[test]
fn empty_target_list_gives_an_empty_report() {
    let r = deploy(FleetJob::new(sshd_bundle(), vec![], WeaveOptions::default()), &quick());
    assert!(r.nodes.is_empty());
    assert_eq!(r.counts.total(), 0);
}

#[test]
fn hosted_process_serves_the_patched_code() {
    let a = agent("sshd");
    let b = sshd_bundle();
    let msg = Message::Weave { process: "sshd".into(), bundle: b.to_text(), options: WeaveOptions { collapse: true, ..Default::default() } };
    assert!(matches!(request(&a.addr_string(), msg, &quick()).unwrap(), Message::Report { report } if report.outcome == Outcome::Woven));
    let h = a.agent.process("sshd").unwrap();
    let p = h.process.spawn_thread("handle_request", vec![Value::Int(1), Value::Int(EXPLOIT)]).unwrap();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
    loop {
        let s = h.process.thread_status(p).unwrap();
        // The free-running executors only drive their own workers.
        if let ThreadStatus::Running = s {
            h.process.step(p).unwrap();
        } else {
            assert!(matches!(s, ThreadStatus::Fatal(_)), "{s:?}");
            break;
        }
        assert!(std::time::Instant::now() < deadline);
    }
}

#[test]
fn deploy_time_follows_the_slowest_node() {
    // Each weave waits for the worker to leave a 50 ms call, so nodes spend
    // their time waiting rather than computing.
    let agents: Vec<_> = (0..8).map(|_| agent("slow")).collect();
    let targets = agents.iter().enumerate().map(|(i, a)| NodeSpec { id: format!("s{i}"), addr: a.addr_string(), process: "slow".into() }).collect();
    let t = hotmend::aspectdsl::compile(&translate_fixture("slow", "slow.c", "slow-v2").patch.unwrap()).unwrap();
    let opts = WeaveOptions { wait_for_quiescence: true, ..Default::default() };
    let r = deploy(FleetJob::new(t, targets, opts), &quick());
    assert!(r.all_woven(), "{}", r.to_text());
    let slowest = r.nodes.iter().map(|n| n.wall_us).max().unwrap();
    let total: u64 = r.nodes.iter().map(|n| n.wall_us).sum();
    assert!(r.wall_us < slowest + 50_000, "{} us against slowest {slowest} us", r.wall_us);
    assert!(r.wall_us * 3 < total, "{} us against {total} us of node time", r.wall_us);
}
