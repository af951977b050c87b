use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;

use super::protocol::{decode, read_frame, write_frame, Envelope, Frame, Message, ProcessListing, ProcessStatus};
use super::{HostedProcess, AGENT_VERSION};
use crate::aspectdsl::PatchBundle;
use crate::targetvm::ProcessClock;
use crate::weaver::{unweave, weave, woven_bundles};

/// Serves protocol requests for a set of hosted processes.
pub struct Agent {
    processes: BTreeMap<String, (Arc<HostedProcess>, Mutex<()>)>,
}

impl Agent {
    pub fn new(processes: Vec<HostedProcess>) -> Agent {
        Agent { processes: processes.into_iter().map(|h| (h.name.clone(), (Arc::new(h), Mutex::new(())))).collect() }
    }

    pub fn process(&self, name: &str) -> Option<&Arc<HostedProcess>> {
        self.processes.get(name).map(|(h, _)| h)
    }

    pub fn handle(&self, msg: Message) -> Message {
        match msg {
            Message::Ping => Message::Pong { agent_version: AGENT_VERSION.to_string() },
            Message::List => Message::Listing {
                processes: self
                    .processes
                    .values()
                    .map(|(h, _)| ProcessListing {
                        name: h.name.clone(),
                        symbols: h.process.symbols().into_keys().collect(),
                        woven: woven_bundles(&h.process),
                    })
                    .collect(),
            },
            Message::Status => Message::StatusReply {
                processes: self
                    .processes
                    .values()
                    .map(|(h, _)| ProcessStatus {
                        name: h.name.clone(),
                        woven: woven_bundles(&h.process),
                        threads: h.process.thread_count(),
                        clock_us: h.process.now_us(),
                    })
                    .collect(),
            },
            Message::Weave { process, bundle, options } => {
                let Some((h, lock)) = self.processes.get(&process) else {
                    return Message::Error { message: format!("no hosted process '{process}'") };
                };
                let bundle = match PatchBundle::from_text(&bundle) {
                    Ok(b) => b,
                    Err(message) => return Message::Error { message },
                };
                let _serial = lock.lock();
                Message::Report { report: weave(&h.process, &bundle, &options, &mut ProcessClock) }
            }
            Message::Unweave { process, bundle_id, timeout_us } => {
                let Some((h, lock)) = self.processes.get(&process) else {
                    return Message::Error { message: format!("no hosted process '{process}'") };
                };
                let _serial = lock.lock();
                match unweave(&h.process, &bundle_id, timeout_us, &mut ProcessClock) {
                    Ok(report) => Message::Report { report },
                    Err(e) => Message::Error { message: e.to_string() },
                }
            }
            m @ (Message::Pong { .. }
            | Message::Listing { .. }
            | Message::StatusReply { .. }
            | Message::Report { .. }
            | Message::Error { .. }
            | Message::ProtocolError { .. }) => {
                let kind = serde_json::to_value(&m).ok().and_then(|v| v["type"].as_str().map(str::to_string)).unwrap_or_default();
                Message::ProtocolError { message: format!("'{kind}' is a reply, not a request") }
            }
        }
    }

    /// Answer frames on one connection until the peer closes it.
    pub fn serve_connection(&self, stream: TcpStream) -> io::Result<()> {
        stream.set_nodelay(true)?;
        let mut r = BufReader::new(stream.try_clone()?);
        let mut w = BufWriter::new(stream);
        while let Some(frame) = read_frame(&mut r)? {
            let reply = match frame {
                Frame::Oversized(n) => Envelope::new(0, Message::ProtocolError { message: format!("frame of {n} bytes is too large") }),
                Frame::Payload(p) => match decode(&p) {
                    Ok(env) => Envelope::new(env.id, self.handle(env.message)),
                    Err((id, message)) => Envelope::new(id, Message::ProtocolError { message }),
                },
            };
            write_frame(&mut w, &reply)?;
        }
        Ok(())
    }

    /// Accept connections forever, one thread each.
    pub fn serve(self: Arc<Self>, listener: TcpListener) -> ! {
        loop {
            if let Ok((stream, _)) = listener.accept() {
                let agent = Arc::clone(&self);
                std::thread::spawn(move || agent.serve_connection(stream));
            }
        }
    }

    /// Serve on `addr` from a background thread.
    pub fn spawn(self: Arc<Self>, addr: &str) -> io::Result<AgentHandle> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let agent = Arc::clone(&self);
        let thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let agent = Arc::clone(&agent);
                    std::thread::spawn(move || agent.serve_connection(stream));
                }
            }
        });
        Ok(AgentHandle { addr: local, agent: self, stop, thread: Some(thread) })
    }
}

/// A background agent; stops accepting when dropped.
pub struct AgentHandle {
    pub addr: SocketAddr,
    pub agent: Arc<Agent>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl AgentHandle {
    pub fn addr_string(&self) -> String {
        self.addr.to_string()
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
