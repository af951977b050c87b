use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn hotmend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hotmend")).args(args).output().expect("run hotmend")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn old_tree(dir: &Path, fixture: &str, file: &str) -> PathBuf {
    let old = dir.join("old");
    std::fs::create_dir_all(&old).unwrap();
    std::fs::copy(fixtures().join(fixture).join(file), old.join(file)).unwrap();
    old
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Translate and compile the sshd fixture; returns the bundle path.
fn sshd_bundle(dir: &Path) -> PathBuf {
    let old = old_tree(dir, "sshd", "sshd.c");
    let out = dir.join("out");
    let diff = fixtures().join("sshd/sshd.diff");
    let o = hotmend(&["translate", "--old", s(&old), "--diff", s(&diff), "--out", s(&out), "--id", "CA-2002-18"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bundle = out.join("CA-2002-18.bundle");
    let o = hotmend(&["compile", s(&out.join("CA-2002-18.dpatch")), "--out", s(&bundle)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    bundle
}

#[test]
fn translate_sshd_gives_four_aspects() {
    let dir = tempfile::tempdir().unwrap();
    let old = old_tree(dir.path(), "sshd", "sshd.c");
    let diff = fixtures().join("sshd/sshd.diff");
    let run = |out: &Path| hotmend(&["translate", "--old", s(&old), "--diff", s(&diff), "--out", s(out)]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&a);
    assert_eq!(code(&o), 0);
    let report = stdout_json(&o);
    assert_eq!(report["all_dynamic"], true);
    assert_eq!(report["verdicts"].as_array().unwrap().len(), 2);
    let dpatch = std::fs::read_to_string(a.join("sshd.dpatch")).unwrap();
    assert_eq!(dpatch.matches("\naspect ").count(), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("4 aspect(s)"));

    assert_eq!(code(&run(&b)), 0);
    for f in ["sshd.dpatch", "sshd.audit"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn alarm_option_adds_an_aspect() {
    let dir = tempfile::tempdir().unwrap();
    let old = old_tree(dir.path(), "sshd", "sshd.c");
    let out = dir.path().join("out");
    let diff = fixtures().join("sshd/sshd.diff");
    let o =
        hotmend(&["translate", "--old", s(&old), "--diff", s(&diff), "--out", s(&out), "--alarm", "input_userauth_info_response=exploit attempt"]);
    assert_eq!(code(&o), 0);
    let dpatch = std::fs::read_to_string(out.join("sshd.dpatch")).unwrap();
    assert!(dpatch.contains("action: alarm(\"exploit attempt\");"));
    let o = hotmend(&["translate", "--old", s(&old), "--diff", s(&diff), "--out", s(&out), "--alarm", "ping=x"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn field_removal_is_static_only() {
    let dir = tempfile::tempdir().unwrap();
    let old = old_tree(dir.path(), "layout", "session.c");
    let out = dir.path().join("out");
    let diff = fixtures().join("layout/remove.diff");
    let o = hotmend(&["translate", "--old", s(&old), "--diff", s(&diff), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let report = stdout_json(&o);
    assert_eq!(report["all_dynamic"], false);
    let verdicts = report["verdicts"].as_array().unwrap();
    let removal = verdicts.iter().find(|v| v["kind"] == "StructFieldRemoved").unwrap();
    assert!(removal["verdict"].as_str().unwrap().contains("layout change requires stopped program"));
    assert!(!out.join("remove.dpatch").exists());
    assert!(out.join("remove.audit").exists());
}

#[test]
fn empty_diff_gives_an_empty_patch() {
    let dir = tempfile::tempdir().unwrap();
    let old = old_tree(dir.path(), "sshd", "sshd.c");
    let diff = dir.path().join("none.diff");
    std::fs::write(&diff, "").unwrap();
    let out = dir.path().join("out");
    let o = hotmend(&["translate", "--old", s(&old), "--diff", s(&diff), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let dpatch = std::fs::read_to_string(out.join("none.dpatch")).unwrap();
    assert_eq!(dpatch, "dpatch 1;\npatch \"none\" \"\";\n");
    let o = hotmend(&["compile", s(&out.join("none.dpatch")), "--out", s(&out.join("none.bundle"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["manifest"]["required_symbols"].as_array().unwrap().len(), 0);
}

#[test]
fn operational_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let old = old_tree(dir.path(), "layout", "session.c");
    let out = dir.path().join("out");
    // The sshd diff does not apply to this tree.
    let diff = fixtures().join("sshd/sshd.diff");
    let o = hotmend(&["translate", "--old", s(&old), "--diff", s(&diff), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(o.stdout.is_empty());

    let bad = dir.path().join("bad.dpatch");
    std::fs::write(&bad, "dpatch 1;\npatch \"x\" \"\";\naspect A {\n").unwrap();
    let o = hotmend(&["compile", s(&bad), "--out", s(&dir.path().join("x.bundle"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.dpatch:"));

    let o = hotmend(&["weave", s(&bad), "--process", s(&fixtures().join("sshd/sshd.c"))]);
    assert_eq!(code(&o), 1);
    let o = hotmend(&["weave", "--process", "x"]);
    assert_eq!(code(&o), 2, "usage errors come from the argument parser");
}

#[test]
fn weave_under_load() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = sshd_bundle(dir.path());
    let spec = fixtures().join("fleet/sshd.toml");
    let o = hotmend(&["weave", s(&bundle), "--process", s(&spec), "--observe-ms", "50"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    assert_eq!(r["outcome"], "woven");
    assert!(r["elapsed_us"].as_u64().is_some());
    assert!(String::from_utf8_lossy(&o.stderr).contains("woven in"));

    let o = hotmend(&["weave", s(&bundle), "--process", s(&fixtures().join("fleet/sshd_nopam.toml")), "--observe-ms", "0"]);
    assert_eq!(code(&o), 1);
    assert_eq!(stdout_json(&o)["outcome"]["failed_symbols"][0], "input_userauth_info_response_pam");
}

#[test]
fn wait_quiescent_defers_activation() {
    let dir = tempfile::tempdir().unwrap();
    let old = old_tree(dir.path(), "slow", "slow.c");
    let out = dir.path().join("out");
    let diff = fixtures().join("slow/slow.diff");
    assert_eq!(code(&hotmend(&["translate", "--old", s(&old), "--diff", s(&diff), "--out", s(&out)])), 0);
    let bundle = out.join("slow.bundle");
    assert_eq!(code(&hotmend(&["compile", s(&out.join("slow.dpatch")), "--out", s(&bundle)])), 0);
    let spec = fixtures().join("fleet/slow.toml");
    // The worker spends nearly all its time inside the replaced function.
    let o = hotmend(&["weave", s(&bundle), "--process", s(&spec), "--wait-quiescent", "--timeout", "5", "--warmup-ms", "20", "--observe-ms", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    assert!(r["quiescence_wait_us"].as_u64().unwrap() > 1000, "{r}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("activation deferred"));

    let o =
        hotmend(&["weave", s(&bundle), "--process", s(&spec), "--wait-quiescent", "--timeout", "0.001", "--warmup-ms", "20", "--observe-ms", "0"]);
    assert_eq!(code(&o), 1);
    assert_eq!(stdout_json(&o)["outcome"]["timed_out_quiescent"], "work");
}

struct AgentProc {
    child: Child,
    addr: String,
}

impl Drop for AgentProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn agent(spec: &str) -> AgentProc {
    let mut child = Command::new(env!("CARGO_BIN_EXE_hotmend"))
        .args(["agent", "--listen", "127.0.0.1:0", "--process", s(&fixtures().join("fleet").join(spec))])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("agent output").unwrap();
        if let Some(a) = line.strip_prefix("listening on ") {
            break a.to_string();
        }
    };
    std::thread::spawn(move || lines.for_each(drop));
    AgentProc { child, addr }
}

#[test]
fn deploy_to_agents() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = sshd_bundle(dir.path());
    let agents = [agent("sshd.toml"), agent("sshd.toml"), agent("sshd_nopam.toml")];
    let mut config = String::from("[timeouts]\nconnect_ms = 1000\n");
    for (i, a) in agents.iter().enumerate() {
        config.push_str(&format!("\n[[node]]\nid = \"node-{}\"\naddr = \"{}\"\nprocess = \"sshd\"\n", i + 1, a.addr));
    }
    let fleet = dir.path().join("fleet.toml");
    std::fs::write(&fleet, config).unwrap();

    let o = hotmend(&["deploy", s(&bundle), "--fleet", s(&fleet), "--nodes", "node-1,node-2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["counts"]["woven"], 2);

    let o = hotmend(&["deploy", s(&bundle), "--fleet", s(&fleet), "--nodes", "node-3"]);
    assert_eq!(code(&o), 1);
    let r = stdout_json(&o);
    assert_eq!(r["counts"]["failed"], 1);
    assert_eq!(r["nodes"][0]["report"]["outcome"]["failed_symbols"][0], "input_userauth_info_response_pam");

    let o = hotmend(&["deploy", s(&bundle), "--fleet", s(&fleet), "--nodes", "db-*"]);
    assert_eq!(code(&o), 0);
    let r = stdout_json(&o);
    assert_eq!(r["nodes"].as_array().unwrap().len(), 0);
    assert_eq!(r["counts"]["woven"], 0);
}
