#![allow(dead_code)]

use std::collections::BTreeMap;

use hotmend::aspectdsl::{compile, insert_alarm, DynamicPatch, PatchBundle};
use hotmend::csubset::parse_file;
use hotmend::pipeline::{translate, Translation};
use hotmend::targetvm::{load_unit, TargetProcess, TraceEvent, TraceKind};

pub mod gen;
pub mod props;

pub const EXPLOIT: i128 = 1_073_741_825;

pub fn fixture(rel: &str) -> String {
    let path = format!("{}/tests/fixtures/{rel}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn translate_fixture(dir: &str, file: &str, id: &str) -> Translation {
    let mut sources = BTreeMap::new();
    sources.insert(file.to_string(), fixture(&format!("{dir}/{file}")));
    let stem = file.trim_end_matches(".c");
    translate(&sources, &fixture(&format!("{dir}/{stem}.diff")), id).unwrap()
}

pub fn sshd_patch() -> DynamicPatch {
    let t = translate_fixture("sshd", "sshd.c", "CA-2002-18");
    let p = t.patch.expect("sshd patch is dynamic");
    insert_alarm(&p, "input_userauth_info_response", "exploit attempt").unwrap()
}

pub fn sshd_bundle() -> PatchBundle {
    compile(&sshd_patch()).unwrap()
}

pub fn process_from(dir_file: &str) -> TargetProcess {
    let unit = parse_file(dir_file, &fixture(dir_file)).unwrap();
    let p = load_unit(&unit).unwrap();
    p.set_trace(true, false);
    p
}

pub fn sshd_process() -> TargetProcess {
    process_from("sshd/sshd.c")
}

pub fn marks(events: &[TraceEvent]) -> Vec<&str> {
    events
        .iter()
        .filter_map(|e| match &e.kind {
            TraceKind::Mark { text } => Some(text.as_str()),
            _ => None,
        })
        .collect()
}

pub fn fatals(events: &[TraceEvent]) -> Vec<&str> {
    events
        .iter()
        .filter_map(|e| match &e.kind {
            TraceKind::Fatal { message } => Some(message.as_str()),
            _ => None,
        })
        .collect()
}

pub fn alarms(events: &[TraceEvent]) -> usize {
    events.iter().filter(|e| matches!(e.kind, TraceKind::Alarm { .. })).count()
}

/// Requests that ran part of their work on old code and part on new: an
/// overflow trace and a fatal in the same request.
pub fn mixed_windows(events: &[TraceEvent]) -> usize {
    hotmend::targetvm::trace::by_request(events)
        .values()
        .filter(|evs| {
            let old = evs.iter().any(|e| matches!(&e.kind, TraceKind::Mark { text } if text.starts_with("overflow")));
            let new = evs.iter().any(|e| matches!(e.kind, TraceKind::Fatal { .. }));
            old && new
        })
        .count()
}

/// Requests of each flavour: (fully old, fully new).
pub fn request_split(events: &[TraceEvent]) -> (usize, usize) {
    let mut split = (0, 0);
    for evs in hotmend::targetvm::trace::by_request(events).values() {
        if evs.iter().any(|e| matches!(&e.kind, TraceKind::Mark { text } if text.starts_with("overflow"))) {
            split.0 += 1;
        } else if evs.iter().any(|e| matches!(e.kind, TraceKind::Fatal { .. })) {
            split.1 += 1;
        }
    }
    split
}
