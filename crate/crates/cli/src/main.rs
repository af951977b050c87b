//! `hotmend`: translate source patches, compile them into bundles and weave
//! them into running processes, locally or across a fleet.
//!
//! Reports go to stdout as JSON; everything meant for people goes to
//! stderr. Exit status is 0 on success, 1 on operational failure and 2 when
//! a change can only be applied to a stopped program.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hotmend::aspectdsl::{compile, insert_alarm, parse_patch, render_patch, PatchBundle};
use hotmend::diffcore::LineKind;
use hotmend::fleet::{deploy, Agent, FleetConfig, FleetJob, HostedProcess, ProcessSpec};
use hotmend::pipeline::translate;
use hotmend::targetvm::{trace::by_request, ProcessClock, TraceKind};
use hotmend::weaver::{weave, Outcome, WeaveOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hotmend", version, about = "Hot patching from source diffs")]
struct Cli {
    /// More detail on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a unified diff into a dynamic patch and an audit report.
    Translate {
        /// Source tree the diff applies to.
        #[arg(long)]
        old: PathBuf,
        #[arg(long)]
        diff: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Patch id; defaults to the diff's file stem.
        #[arg(long)]
        id: Option<String>,
        /// Raise an alarm when the replacement of FUNC takes its fatal
        /// path, as `FUNC=MESSAGE`. Repeatable.
        #[arg(long, value_name = "FUNC=MESSAGE")]
        alarm: Vec<String>,
    },
    /// Check a dynamic patch and compile it into a bundle.
    Compile {
        patch: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start a process from a spec and weave a bundle into it while it runs.
    Weave {
        bundle: PathBuf,
        /// Process spec (TOML) or a C source file to run without load.
        #[arg(long, value_name = "NAME")]
        process: PathBuf,
        #[command(flatten)]
        opts: WeaveArgs,
        /// Let the process run this long before weaving.
        #[arg(long, default_value_t = 50)]
        warmup_ms: u64,
        /// Keep it running this long afterwards and summarise its requests.
        #[arg(long, default_value_t = 200)]
        observe_ms: u64,
    },
    /// Weave a bundle on every selected fleet node.
    Deploy {
        bundle: PathBuf,
        #[arg(long)]
        fleet: PathBuf,
        /// Comma-separated node ids; `*` is a wildcard.
        #[arg(long)]
        nodes: Option<String>,
        #[command(flatten)]
        opts: WeaveArgs,
    },
    /// Host processes and serve weave requests.
    Agent {
        #[arg(long, default_value = "127.0.0.1:7300")]
        listen: String,
        /// Process specs to host. Repeatable.
        #[arg(long, value_name = "SPEC", required = true)]
        process: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct WeaveArgs {
    /// Activate only once no replaced function is running.
    #[arg(long)]
    wait_quiescent: bool,
    /// Give up waiting for quiescence after this many seconds.
    #[arg(long, default_value_t = 5.0, value_name = "SECS")]
    timeout: f64,
    /// Drop trampolines once every running request sees the patch.
    #[arg(long)]
    collapse: bool,
}

impl WeaveArgs {
    fn options(&self) -> Result<WeaveOptions> {
        if !(self.timeout.is_finite() && self.timeout >= 0.0) {
            bail!("--timeout must be a non-negative number of seconds");
        }
        Ok(WeaveOptions { wait_for_quiescence: self.wait_quiescent, quiescence_timeout_us: (self.timeout * 1e6) as u64, collapse: self.collapse })
    }
}

enum Status {
    Ok,
    Failed,
    StaticOnly,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Ok(Status::StaticOnly) => ExitCode::from(2),
        Err(e) => {
            eprintln!("hotmend: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Translate { old, diff, out, id, alarm } => cmd_translate(&old, &diff, &out, id, &alarm, cli.verbose),
        Command::Compile { patch, out } => cmd_compile(&patch, &out),
        Command::Weave { bundle, process, opts, warmup_ms, observe_ms } => cmd_weave(&bundle, &process, &opts.options()?, warmup_ms, observe_ms),
        Command::Deploy { bundle, fleet, nodes, opts } => cmd_deploy(&bundle, &fleet, nodes.as_deref(), &opts.options()?),
        Command::Agent { listen, process } => cmd_agent(&listen, &process),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Every UTF-8 file under `root`, keyed by its `/`-separated relative path.
fn source_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(dir: &Path, prefix: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let name = e.file_name().to_string_lossy().into_owned();
            let rel = if prefix.is_empty() { name } else { format!("{prefix}/{name}") };
            let ty = e.file_type()?;
            if ty.is_dir() {
                walk(&e.path(), &rel, out)?;
            } else if ty.is_file() {
                if let Ok(text) = std::fs::read_to_string(e.path()) {
                    out.insert(rel, text);
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, "", &mut out)?;
    Ok(out)
}

fn cmd_translate(old: &Path, diff: &Path, out: &Path, id: Option<String>, alarms: &[String], verbose: bool) -> Result<Status> {
    let sources = source_tree(old)?;
    let diff_text = read(diff)?;
    let id = id.unwrap_or_else(|| diff.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "patch".into()));
    let t = translate(&sources, &diff_text, &id)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    for w in &t.warnings {
        eprintln!("warning: {}: {} ({})", w.function, w.message, w.global);
    }
    for (kind, line) in &t.uncovered {
        let side = if *kind == LineKind::Added { "new" } else { "old" };
        eprintln!("warning: {} line {line} ({side}) changes nothing the analysis can see", t.file);
    }

    let audit_path = out.join(format!("{id}.audit"));
    let dpatch_path = out.join(format!("{id}.dpatch"));
    let mut written = vec![];
    let status = match &t.patch {
        Some(p) => {
            let mut p = p.clone();
            for a in alarms {
                let (target, message) = a.split_once('=').with_context(|| format!("--alarm '{a}' is not FUNC=MESSAGE"))?;
                p = insert_alarm(&p, target, message)?;
            }
            let audit = hotmend::aspectdsl::render_audit(&p, &t.changes, &t.old);
            write(&dpatch_path, &render_patch(&p))?;
            write(&audit_path, &audit)?;
            written.push(dpatch_path.display().to_string());
            eprintln!("{}: {} aspect(s), {} replacement function(s)", dpatch_path.display(), p.aspects.len(), p.replacement_functions.len());
            if verbose {
                eprint!("{audit}");
            }
            Status::Ok
        }
        None => {
            write(&audit_path, &t.audit)?;
            for c in t.changes.static_only() {
                eprintln!("static only: {:?} {}: {}", c.kind, c.old_name, c.verdict);
            }
            Status::StaticOnly
        }
    };
    written.push(audit_path.display().to_string());

    let verdicts: serde_json::Value = serde_json::from_str(&t.changes.verdict_listing())?;
    let report = json!({
        "id": id,
        "file": t.file,
        "all_dynamic": t.all_dynamic(),
        "verdicts": verdicts,
        "warnings": t.warnings,
        "outputs": written,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(status)
}

fn cmd_compile(patch: &Path, out: &Path) -> Result<Status> {
    let text = read(patch)?;
    let p = parse_patch(&text).map_err(|e| anyhow::anyhow!("{}:{e}", patch.display()))?;
    let b = compile(&p)?;
    write(out, &b.to_text())?;
    eprintln!(
        "{}: {} function(s), {} directive(s), needs {}",
        out.display(),
        b.functions.len(),
        b.directives.len(),
        if b.manifest.required_symbols.is_empty() { "nothing".to_string() } else { b.manifest.required_symbols.join(", ") }
    );
    let report = json!({ "bundle": out.display().to_string(), "digest": b.digest(), "manifest": b.manifest });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Status::Ok)
}

fn load_bundle(path: &Path) -> Result<PatchBundle> {
    PatchBundle::from_text(&read(path)?).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn process_spec(path: &Path) -> Result<ProcessSpec> {
    if path.extension().is_some_and(|e| e == "c") {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(ProcessSpec { name, source: path.to_path_buf(), clock: Default::default(), workers: 0, requests: vec![], trace_limit: 100_000 });
    }
    ProcessSpec::load(path).map_err(anyhow::Error::msg)
}

fn cmd_weave(bundle: &Path, process: &Path, opts: &WeaveOptions, warmup_ms: u64, observe_ms: u64) -> Result<Status> {
    let b = load_bundle(bundle)?;
    let spec = process_spec(process)?;
    let hosted = HostedProcess::start(&spec).map_err(anyhow::Error::msg)?;
    std::thread::sleep(Duration::from_millis(warmup_ms));
    let p = &hosted.process;
    let before = p.take_trace();
    let report = weave(p, &b, opts, &mut ProcessClock);
    std::thread::sleep(Duration::from_millis(observe_ms));
    hosted.stop();

    let summary = |events: &[hotmend::targetvm::TraceEvent]| {
        let mut ok = 0;
        let mut fatal = 0;
        for evs in by_request(events).values() {
            match evs.last().map(|e| &e.kind) {
                Some(TraceKind::RequestEnd { outcome }) if outcome == "fatal" => fatal += 1,
                Some(TraceKind::RequestEnd { .. }) => ok += 1,
                _ => {}
            }
        }
        (ok, fatal)
    };
    let (ok0, fatal0) = summary(&before);
    let (ok1, fatal1) = summary(&p.take_trace());
    eprintln!("{}: {} in {} us, {} site(s) rewritten", spec.name, report.outcome, report.elapsed_us, report.sites_rewritten);
    if opts.wait_for_quiescence {
        eprintln!("activation deferred {} us waiting for quiescence", report.quiescence_wait_us);
    }
    eprintln!("requests before: {ok0} completed, {fatal0} fatal; after: {ok1} completed, {fatal1} fatal");
    print!("{}", report.to_text());
    Ok(if report.outcome == Outcome::Woven { Status::Ok } else { Status::Failed })
}

fn cmd_deploy(bundle: &Path, fleet: &Path, nodes: Option<&str>, opts: &WeaveOptions) -> Result<Status> {
    let b = load_bundle(bundle)?;
    let config = FleetConfig::load(fleet).map_err(anyhow::Error::msg)?;
    let targets = config.select(nodes);
    if targets.is_empty() {
        eprintln!("no node matches");
    }
    let report = deploy(FleetJob::new(b, targets, opts.clone()), &config.timeouts);
    for n in &report.nodes {
        let detail = match (&n.report, &n.error) {
            (Some(r), _) => r.outcome.to_string(),
            (None, Some(e)) => e.clone(),
            (None, None) => String::new(),
        };
        eprintln!("{}: {:?} in {} us: {detail}", n.node, n.status, n.wall_us);
    }
    let c = report.counts;
    eprintln!("{} woven, {} failed, {} unreachable", c.woven, c.failed, c.unreachable);
    print!("{}", report.to_text());
    Ok(if report.all_woven() { Status::Ok } else { Status::Failed })
}

fn cmd_agent(listen: &str, specs: &[PathBuf]) -> Result<Status> {
    let mut hosted = Vec::new();
    for s in specs {
        let spec = process_spec(s)?;
        eprintln!("hosting {} from {}", spec.name, spec.source.display());
        hosted.push(HostedProcess::start(&spec).map_err(anyhow::Error::msg)?);
    }
    let listener = std::net::TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    Arc::new(Agent::new(hosted)).serve(listener)
}
