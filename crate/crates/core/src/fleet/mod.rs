//! Fleet deployment: agents host running processes and weave bundles on
//! request; a coordinator pushes one bundle to many agents at once.

mod agent;
mod coordinator;
pub mod protocol;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::aspectdsl::PatchBundle;
use crate::csubset::parse_file;
use crate::targetvm::{lower_unit, ClockMode, CycleSource, Executors, LowerOptions, Request, TargetProcess, ThreadId};
use crate::weaver::{WeaveOptions, WeaveReport};

pub use agent::{Agent, AgentHandle};
pub use coordinator::{deploy, request, FleetError};

pub const AGENT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timeouts {
    #[serde(default = "Timeouts::default_connect")]
    pub connect_ms: u64,
    #[serde(default = "Timeouts::default_reply")]
    pub reply_ms: u64,
}

impl Timeouts {
    fn default_connect() -> u64 {
        2_000
    }

    fn default_reply() -> u64 {
        30_000
    }

    pub fn connect(&self) -> Duration {
        Duration::from_millis(self.connect_ms)
    }

    pub fn reply(&self) -> Duration {
        Duration::from_millis(self.reply_ms)
    }
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts { connect_ms: Self::default_connect(), reply_ms: Self::default_reply() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    /// `host:port`.
    pub addr: String,
    /// Name of the hosted process to weave into.
    pub process: String,
}

/// Static node inventory, read from TOML:
///
/// ```toml
/// [timeouts]
/// connect_ms = 2000
/// reply_ms = 30000
///
/// [[node]]
/// id = "web-1"
/// addr = "10.0.0.5:7300"
/// process = "sshd"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default, rename = "node")]
    pub nodes: Vec<NodeSpec>,
}

impl FleetConfig {
    pub fn from_toml(text: &str) -> Result<FleetConfig, String> {
        let c: FleetConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut ids = std::collections::BTreeSet::new();
        for n in &c.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(format!("node '{}' is listed twice", n.id));
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<FleetConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        FleetConfig::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Nodes whose id matches one of the comma-separated patterns; `*`
    /// matches any run of characters. `None` selects every node.
    pub fn select(&self, filter: Option<&str>) -> Vec<NodeSpec> {
        let Some(filter) = filter else {
            return self.nodes.clone();
        };
        let pats: Vec<&str> = filter.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        self.nodes.iter().filter(|n| pats.iter().any(|p| glob_match(p, &n.id))).cloned().collect()
    }
}

fn glob_match(pat: &str, s: &str) -> bool {
    let Some((head, rest)) = pat.split_once('*') else {
        return pat == s;
    };
    let Some(mut s) = s.strip_prefix(head) else {
        return false;
    };
    let parts: Vec<&str> = rest.split('*').collect();
    let (last, middle) = parts.split_last().expect("split yields one part");
    for p in middle {
        match s.find(p) {
            Some(i) => s = &s[i + p.len()..],
            None => return false,
        }
    }
    s.ends_with(last)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub entry: String,
    #[serde(default)]
    pub args: Vec<i64>,
}

/// A process to host, read from TOML. `source` is relative to the spec
/// file.
///
/// ```toml
/// name = "sshd"
/// source = "sshd_host.c"
/// clock = "wall"
/// workers = 2
///
/// [[request]]
/// entry = "serve"
/// args = [1, 3]
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub name: String,
    pub source: PathBuf,
    #[serde(default)]
    pub clock: ClockChoice,
    #[serde(default)]
    pub workers: usize,
    #[serde(default, rename = "request")]
    pub requests: Vec<RequestSpec>,
    #[serde(default = "ProcessSpec::default_trace_limit")]
    pub trace_limit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockChoice {
    Steps,
    #[default]
    Wall,
}

impl ProcessSpec {
    fn default_trace_limit() -> usize {
        100_000
    }

    pub fn load(path: &Path) -> Result<ProcessSpec, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut spec: ProcessSpec = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if spec.source.is_relative() {
            spec.source = path.parent().unwrap_or(Path::new(".")).join(&spec.source);
        }
        Ok(spec)
    }
}

/// A running process with its executor threads.
pub struct HostedProcess {
    pub name: String,
    pub process: Arc<TargetProcess>,
    pub workers: Vec<ThreadId>,
    executors: Mutex<Option<Executors>>,
}

impl HostedProcess {
    /// Load the source, spawn the workers and start executing.
    pub fn start(spec: &ProcessSpec) -> Result<HostedProcess, String> {
        let src = std::fs::read_to_string(&spec.source).map_err(|e| format!("{}: {e}", spec.source.display()))?;
        let file = spec.source.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let unit = parse_file(&file, &src).map_err(|e| format!("{file}:{e}"))?;
        let ir = lower_unit(&unit, &LowerOptions::default()).map_err(|e| format!("{file}: {e}"))?;
        let mode = match spec.clock {
            ClockChoice::Steps => ClockMode::Steps,
            ClockChoice::Wall => ClockMode::Wall,
        };
        let process = TargetProcess::load(&ir, mode).map_err(|e| format!("{file}: {e}"))?;
        process.set_trace(false, false);
        process.set_trace_limit(spec.trace_limit);
        for r in &spec.requests {
            if process.function_id(&r.entry).is_none() {
                return Err(format!("{}: no function '{}' to serve requests", spec.name, r.entry));
            }
        }
        let requests = spec.requests.iter().map(|r| Request::new(&r.entry, &r.args.iter().map(|&a| i128::from(a)).collect::<Vec<_>>())).collect();
        let source = Arc::new(CycleSource { requests, limit: None });
        let workers: Vec<ThreadId> =
            if spec.requests.is_empty() { Vec::new() } else { (0..spec.workers).map(|w| process.spawn_worker(source.clone(), w)).collect() };
        let process = Arc::new(process);
        let executors = Executors::start(Arc::clone(&process), &workers);
        Ok(HostedProcess { name: spec.name.clone(), process, workers, executors: Mutex::new(Some(executors)) })
    }

    /// Host an already loaded process without starting anything.
    pub fn adopt(name: &str, process: Arc<TargetProcess>) -> HostedProcess {
        HostedProcess { name: name.to_string(), process, workers: Vec::new(), executors: Mutex::new(None) }
    }

    pub fn stop(&self) {
        if let Some(e) = self.executors.lock().take() {
            e.stop();
        }
    }
}

impl Drop for HostedProcess {
    fn drop(&mut self) {
        self.stop();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Pending,
    Woven,
    Failed(String),
    Unreachable,
}

impl NodeStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, NodeStatus::Pending)
    }
}

/// One bundle headed for a set of nodes.
#[derive(Debug, Clone)]
pub struct FleetJob {
    pub bundle: PatchBundle,
    pub targets: Vec<NodeSpec>,
    /// Per-node overrides of `default_options`.
    pub options: BTreeMap<String, WeaveOptions>,
    pub default_options: WeaveOptions,
    status: BTreeMap<String, NodeStatus>,
}

impl FleetJob {
    pub fn new(bundle: PatchBundle, targets: Vec<NodeSpec>, default_options: WeaveOptions) -> FleetJob {
        let status = targets.iter().map(|t| (t.id.clone(), NodeStatus::Pending)).collect();
        FleetJob { bundle, targets, options: BTreeMap::new(), default_options, status }
    }

    pub fn options_for(&self, node: &str) -> &WeaveOptions {
        self.options.get(node).unwrap_or(&self.default_options)
    }

    pub fn status(&self) -> &BTreeMap<String, NodeStatus> {
        &self.status
    }

    /// Record a node's status. Terminal statuses are final and unknown
    /// nodes are ignored; both return false.
    pub fn set_status(&mut self, node: &str, s: NodeStatus) -> bool {
        match self.status.get_mut(node) {
            Some(cur) if !cur.is_terminal() => {
                *cur = s;
                true
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: String,
    pub status: NodeStatus,
    pub report: Option<WeaveReport>,
    /// Transport or agent error, when there is no report.
    pub error: Option<String>,
    pub wall_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub woven: usize,
    pub failed: usize,
    pub unreachable: usize,
    pub pending: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.woven + self.failed + self.unreachable + self.pending
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetReport {
    pub bundle_id: String,
    /// Sorted by node id.
    pub nodes: Vec<NodeReport>,
    pub counts: Counts,
    pub wall_us: u64,
}

impl FleetReport {
    pub fn all_woven(&self) -> bool {
        self.counts.woven == self.nodes.len()
    }

    pub fn to_text(&self) -> String {
        crate::canon::to_canonical_pretty(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_default_timeouts() {
        let c = FleetConfig::from_toml("[[node]]\nid = \"a\"\naddr = \"127.0.0.1:1\"\nprocess = \"p\"\n").unwrap();
        assert_eq!(c.timeouts, Timeouts { connect_ms: 2000, reply_ms: 30000 });
        assert_eq!(c.nodes.len(), 1);
        assert!(FleetConfig::from_toml("").unwrap().nodes.is_empty());
        assert!(FleetConfig::from_toml("[[node]]\nid = \"a\"\n").is_err());
        let dup = "[[node]]\nid = \"a\"\naddr = \"x:1\"\nprocess = \"p\"\n".repeat(2);
        assert!(FleetConfig::from_toml(&dup).unwrap_err().contains("twice"));
    }

    #[test]
    fn node_filters() {
        let nodes =
            ["web-1", "web-2", "db-1"].iter().map(|id| NodeSpec { id: id.to_string(), addr: String::new(), process: String::new() }).collect();
        let c = FleetConfig { timeouts: Timeouts::default(), nodes };
        let ids = |f: Option<&str>| c.select(f).into_iter().map(|n| n.id).collect::<Vec<_>>();
        assert_eq!(ids(None).len(), 3);
        assert_eq!(ids(Some("web-*")), ["web-1", "web-2"]);
        assert_eq!(ids(Some("db-1, web-2")), ["web-2", "db-1"]);
        assert_eq!(ids(Some("*-1")), ["web-1", "db-1"]);
        assert_eq!(ids(Some("w*b*2")), ["web-2"]);
        assert!(ids(Some("cache-*")).is_empty());
        assert!(ids(Some("")).is_empty());
    }

    #[test]
    fn terminal_status_never_reverts() {
        let b = PatchBundle {
            manifest: crate::aspectdsl::Manifest {
                version: 1,
                patch_id: "x".into(),
                description: String::new(),
                required_symbols: vec![],
                runtime_checks: vec![],
            },
            functions: vec![],
            globals: vec![],
            shadow_fields: vec![],
            directives: vec![],
        };
        let n = NodeSpec { id: "a".into(), addr: String::new(), process: String::new() };
        let mut job = FleetJob::new(b, vec![n], WeaveOptions::default());
        assert_eq!(job.status()["a"], NodeStatus::Pending);
        assert!(job.set_status("a", NodeStatus::Woven));
        assert!(!job.set_status("a", NodeStatus::Unreachable));
        assert!(!job.set_status("b", NodeStatus::Woven));
        assert_eq!(job.status()["a"], NodeStatus::Woven);
    }
}
