use std::fmt;

use serde::{Deserialize, Serialize};

/// One execution event. `request` is 0 outside any request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub at: u64,
    pub thread: u32,
    pub request: u64,
    pub kind: TraceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceKind {
    RequestBegin { entry: String },
    RequestEnd { outcome: String },
    Call { function: String },
    Return { function: String },
    Fatal { message: String },
    Alarm { message: String },
    Fault { message: String },
    Mark { text: String },
    Emit { value: String },
    GlobalRead { global: String, value: String },
    GlobalWrite { global: String, value: String },
    Halt,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} t{} r{} ", self.at, self.thread, self.request)?;
        match &self.kind {
            TraceKind::RequestBegin { entry } => write!(f, "begin {entry}"),
            TraceKind::RequestEnd { outcome } => write!(f, "end {outcome}"),
            TraceKind::Call { function } => write!(f, "call {function}"),
            TraceKind::Return { function } => write!(f, "ret {function}"),
            TraceKind::Fatal { message } => write!(f, "fatal {message:?}"),
            TraceKind::Alarm { message } => write!(f, "alarm {message:?}"),
            TraceKind::Fault { message } => write!(f, "fault {message:?}"),
            TraceKind::Mark { text } => write!(f, "mark {text:?}"),
            TraceKind::Emit { value } => write!(f, "emit {value}"),
            TraceKind::GlobalRead { global, value } => write!(f, "gread {global} {value}"),
            TraceKind::GlobalWrite { global, value } => write!(f, "gwrite {global} {value}"),
            TraceKind::Halt => f.write_str("halt"),
        }
    }
}

/// Groups events by request id, keeping per-request order. Events outside
/// a request are dropped.
pub fn by_request(events: &[TraceEvent]) -> std::collections::BTreeMap<u64, Vec<&TraceEvent>> {
    let mut out: std::collections::BTreeMap<u64, Vec<&TraceEvent>> = Default::default();
    for e in events.iter().filter(|e| e.request != 0) {
        out.entry(e.request).or_default().push(e);
    }
    out
}

pub fn render(events: &[TraceEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_string());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_line_per_event() {
        let evs = vec![
            TraceEvent { at: 3, thread: 1, request: 2, kind: TraceKind::Call { function: "f".into() } },
            TraceEvent { at: 4, thread: 1, request: 2, kind: TraceKind::Fatal { message: "no".into() } },
            TraceEvent { at: 5, thread: 0, request: 0, kind: TraceKind::Halt },
        ];
        assert_eq!(render(&evs), "3 t1 r2 call f\n4 t1 r2 fatal \"no\"\n5 t0 r0 halt\n");
        assert_eq!(by_request(&evs).len(), 1);
    }
}
