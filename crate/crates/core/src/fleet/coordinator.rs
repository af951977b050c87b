use std::io::{self, BufReader};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use super::protocol::{decode, read_frame, write_frame, Envelope, Frame, Message};
use super::{Counts, FleetJob, FleetReport, NodeReport, NodeSpec, NodeStatus, Timeouts};
use crate::weaver::Outcome;

#[derive(Debug, thiserror::Error)]
pub enum FleetError {
    #[error("cannot reach {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("{addr}: {source}")]
    Io { addr: String, source: io::Error },
    #[error("{addr}: {message}")]
    Protocol { addr: String, message: String },
}

impl FleetError {
    fn unreachable(&self) -> bool {
        matches!(self, FleetError::Connect { .. })
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// One request, one reply, on a fresh connection.
pub fn request(addr: &str, msg: Message, t: &Timeouts) -> Result<Message, FleetError> {
    let connect = |source| FleetError::Connect { addr: addr.to_string(), source };
    let io_err = |source| FleetError::Io { addr: addr.to_string(), source };
    let sock = addr.to_socket_addrs().map_err(connect)?.next().ok_or_else(|| connect(io::Error::new(io::ErrorKind::NotFound, "no address")))?;
    let stream = TcpStream::connect_timeout(&sock, t.connect()).map_err(connect)?;
    stream.set_nodelay(true).map_err(io_err)?;
    stream.set_read_timeout(Some(t.reply())).map_err(io_err)?;
    stream.set_write_timeout(Some(t.reply())).map_err(io_err)?;
    let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
    write_frame(&mut &stream, &Envelope::new(id, msg)).map_err(io_err)?;
    let protocol = |message: String| FleetError::Protocol { addr: addr.to_string(), message };
    let frame = read_frame(&mut BufReader::new(&stream)).map_err(io_err)?.ok_or_else(|| protocol("connection closed before the reply".into()))?;
    let Frame::Payload(p) = frame else {
        return Err(protocol("oversized reply".into()));
    };
    let env = decode(&p).map_err(|(_, m)| protocol(m))?;
    if env.id != id {
        return Err(protocol(format!("reply to request {} while waiting for {id}", env.id)));
    }
    Ok(env.message)
}

fn weave_on(node: &NodeSpec, bundle: &str, job: &FleetJob, t: &Timeouts) -> NodeReport {
    let started = Instant::now();
    let msg = Message::Weave { process: node.process.clone(), bundle: bundle.to_string(), options: job.options_for(&node.id).clone() };
    let (status, report, error) = match request(&node.addr, msg, t) {
        Ok(Message::Report { report }) => {
            let status = match &report.outcome {
                Outcome::Woven => NodeStatus::Woven,
                o => NodeStatus::Failed(o.to_string()),
            };
            (status, Some(report), None)
        }
        Ok(Message::Error { message }) | Ok(Message::ProtocolError { message }) => (NodeStatus::Failed(message.clone()), None, Some(message)),
        Ok(other) => {
            let m = format!("unexpected reply {other:?}");
            (NodeStatus::Failed(m.clone()), None, Some(m))
        }
        Err(e) if e.unreachable() => (NodeStatus::Unreachable, None, Some(e.to_string())),
        Err(e) => (NodeStatus::Failed(e.to_string()), None, Some(e.to_string())),
    };
    NodeReport { node: node.id.clone(), status, report, error, wall_us: started.elapsed().as_micros() as u64 }
}

/// Weave the job's bundle on every target at once. A node's failure does
/// not affect the others and nothing is retried or rolled back.
pub fn deploy(mut job: FleetJob, t: &Timeouts) -> FleetReport {
    let started = Instant::now();
    let text = job.bundle.to_text();
    let (tx, rx) = mpsc::channel();
    let mut nodes: Vec<NodeReport> = std::thread::scope(|s| {
        for node in &job.targets {
            let (tx, text, job) = (tx.clone(), &text, &job);
            s.spawn(move || {
                let _ = tx.send(weave_on(node, text, job, t));
            });
        }
        drop(tx);
        rx.iter().collect()
    });
    // Status lives with the job; only this thread updates it.
    for n in &nodes {
        job.set_status(&n.node, n.status.clone());
    }
    nodes.sort_by(|a, b| a.node.cmp(&b.node));
    let mut counts = Counts::default();
    for s in job.status().values() {
        match s {
            NodeStatus::Pending => counts.pending += 1,
            NodeStatus::Woven => counts.woven += 1,
            NodeStatus::Failed(_) => counts.failed += 1,
            NodeStatus::Unreachable => counts.unreachable += 1,
        }
    }
    FleetReport { bundle_id: job.bundle.id().to_string(), nodes, counts, wall_us: started.elapsed().as_micros() as u64 }
}
