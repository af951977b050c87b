use std::sync::atomic::Ordering;
use std::sync::Arc;

use super::ir::Builtin;
use super::value::{self, Value};
use super::*;

const MAX_DEPTH: usize = 4096;

/// How an instruction left the current request.
enum Stop {
    Fatal(String),
    Fault(String),
    Halt,
}

type Exec<T> = Result<T, Stop>;

fn fault<T>(msg: impl Into<String>) -> Exec<T> {
    Err(Stop::Fault(msg.into()))
}

impl TargetProcess {
    /// Execute one instruction of `tid`. A thread between requests uses
    /// the step to begin its next one. Terminal threads are left alone.
    pub fn step(&self, tid: ThreadId) -> Result<ThreadStatus, VmError> {
        let t = self.thread(tid)?;
        let mut ts = t.lock();
        match ts.status {
            ThreadStatus::Running => {}
            ThreadStatus::Sleeping { until } => {
                if self.now_us() < until {
                    return Ok(ts.status.clone());
                }
                ts.status = ThreadStatus::Running;
            }
            _ => return Ok(ts.status.clone()),
        }
        self.steps.fetch_add(1, Ordering::SeqCst);
        if ts.frames.is_empty() {
            self.begin_request(&mut ts);
            return Ok(ts.status.clone());
        }
        match self.exec(&mut ts) {
            Ok(()) => {}
            Err(Stop::Fatal(msg)) => {
                self.record(&ts, TraceKind::Fatal { message: msg.clone() });
                self.end_request(&mut ts, "fatal", ThreadStatus::Fatal(msg));
            }
            Err(Stop::Fault(msg)) => {
                self.record(&ts, TraceKind::Fault { message: msg.clone() });
                self.end_request(&mut ts, "fault", ThreadStatus::Faulted(msg));
            }
            Err(Stop::Halt) => {
                self.record(&ts, TraceKind::Halt);
                self.end_request(&mut ts, "halt", ThreadStatus::Halted);
                ts.status = ThreadStatus::Halted;
            }
        }
        Ok(ts.status.clone())
    }

    fn begin_request(&self, ts: &mut ThreadState) {
        let req = match &mut ts.job {
            Job::Single(r) => r.take(),
            Job::Worker { source, worker, seq } => {
                let r = source.next(*worker, *seq);
                *seq += 1;
                r
            }
        };
        let Some(req) = req else {
            ts.status = ThreadStatus::Halted;
            return;
        };
        ts.request = self.next_request.fetch_add(1, Ordering::SeqCst);
        ts.view = Some(self.active_instances());
        self.record(ts, TraceKind::RequestBegin { entry: req.entry.clone() });
        // Dispatching a request takes the entry's address, so a pointer
        // redirection applies to it.
        let entry = match self.symbol(&req.entry) {
            Some(Symbol::Function { id }) => match self.ptr_redirect(id).map(|r| self.resolve(r, ts.view.as_deref())) {
                Some(Operand::Fn(r)) => r,
                _ => id,
            },
            _ => {
                let msg = format!("unknown entry {}", req.entry);
                self.record(ts, TraceKind::Fault { message: msg.clone() });
                self.end_request(ts, "fault", ThreadStatus::Faulted(msg));
                return;
            }
        };
        if let Err(Stop::Fault(msg)) = self.push_frame(ts, entry, req.args, None) {
            self.record(ts, TraceKind::Fault { message: msg.clone() });
            self.end_request(ts, "fault", ThreadStatus::Faulted(msg));
        }
    }

    /// Close the current request. Single-request threads take `status`;
    /// workers go back to fetching.
    fn end_request(&self, ts: &mut ThreadState, outcome: &str, status: ThreadStatus) {
        self.record(ts, TraceKind::RequestEnd { outcome: outcome.into() });
        ts.frames.clear();
        ts.view = None;
        ts.request = 0;
        ts.status = match ts.job {
            Job::Single(_) => status,
            Job::Worker { .. } => ThreadStatus::Running,
        };
    }

    fn push_frame(&self, ts: &mut ThreadState, id: FnId, args: Vec<Value>, ret_dst: Option<u32>) -> Exec<()> {
        let Some(code) = self.function(id) else {
            return fault(format!("call to removed function #{id}"));
        };
        if ts.frames.len() >= MAX_DEPTH {
            return fault("stack overflow");
        }
        let n = code.params.len();
        if args.len() < n || (args.len() > n && !code.variadic) {
            return fault(format!("{} expects {n} arguments, got {}", code.name, args.len()));
        }
        let mut regs = vec![Value::Undef; code.nregs as usize];
        for (i, (a, ty)) in args.iter().zip(&code.params).enumerate() {
            regs[i] = value::convert(a, *ty).map_err(Stop::Fault)?;
        }
        if self.trace_calls.load(Ordering::Relaxed) {
            self.record(ts, TraceKind::Call { function: code.name.clone() });
        }
        ts.frames.push(Frame { code, pc: 0, regs, ret_dst });
        Ok(())
    }

    fn resolve_site(&self, ts: &ThreadState, site: &Site) -> Operand {
        self.resolve(Operand::unpack(site.word.load(Ordering::SeqCst)), ts.view.as_deref())
    }

    fn exec(&self, ts: &mut ThreadState) -> Exec<()> {
        let frame = ts.frames.last().expect("active frame");
        let code = Arc::clone(&frame.code);
        let pc = frame.pc as usize;
        let Some(ins) = code.instrs.get(pc) else {
            return fault(format!("pc {pc} outside {}", code.name));
        };
        let reg = |ts: &ThreadState, r: u32| -> Exec<Value> {
            match ts.frames.last().expect("frame").regs.get(r as usize) {
                Some(Value::Undef) | None => fault(format!("read of uninitialized register r{r} in {}", code.name)),
                Some(v) => Ok(v.clone()),
            }
        };
        let set = |ts: &mut ThreadState, r: u32, v: Value| {
            ts.frames.last_mut().expect("frame").regs[r as usize] = v;
        };
        let mut next = pc as u32 + 1;
        match ins {
            Instr::Const { dst, value } => set(ts, *dst, value.clone()),
            Instr::Mov { dst, src } => {
                let v = reg(ts, *src)?;
                set(ts, *dst, v);
            }
            Instr::Bin { op, dst, a, b, ty } => {
                let v = value::binary(*op, &reg(ts, *a)?, &reg(ts, *b)?, *ty).map_err(Stop::Fault)?;
                set(ts, *dst, v);
            }
            Instr::Un { op, dst, a, ty } => {
                let v = value::unary(*op, &reg(ts, *a)?, *ty).map_err(Stop::Fault)?;
                set(ts, *dst, v);
            }
            Instr::Conv { dst, src, ty } => {
                let v = value::to_scalar(&reg(ts, *src)?, *ty).map_err(Stop::Fault)?;
                set(ts, *dst, v);
            }
            Instr::LoadG { dst, site } => {
                let Operand::Global { addr, ty } = self.resolve_site(ts, site) else {
                    return fault("global site holds a non-global operand");
                };
                let v = self.load_cell(addr, ty)?;
                if self.trace_globals.load(Ordering::Relaxed) {
                    self.record(ts, TraceKind::GlobalRead { global: self.global_name(addr), value: v.to_string() });
                }
                set(ts, *dst, v);
            }
            Instr::StoreG { src, site } => {
                let Operand::Global { addr, ty } = self.resolve_site(ts, site) else {
                    return fault("global site holds a non-global operand");
                };
                let v = self.store_cell(addr, ty, &reg(ts, *src)?)?;
                if self.trace_globals.load(Ordering::Relaxed) {
                    self.record(ts, TraceKind::GlobalWrite { global: self.global_name(addr), value: v.to_string() });
                }
            }
            Instr::AddrG { dst, addr } => set(ts, *dst, Value::Ptr(*addr)),
            Instr::LoadF { dst, base, offset, ty } => {
                let addr = self.field_addr(&reg(ts, *base)?, *offset)?;
                let v = self.load_cell(addr, *ty)?;
                set(ts, *dst, v);
            }
            Instr::StoreF { src, base, offset, ty } => {
                let addr = self.field_addr(&reg(ts, *base)?, *offset)?;
                self.store_cell(addr, *ty, &reg(ts, *src)?)?;
            }
            Instr::LoadFn { dst, site } => {
                let Operand::Fn(id) = self.resolve_site(ts, site) else {
                    return fault("function site holds a non-function operand");
                };
                set(ts, *dst, Value::Fn(id));
            }
            Instr::Call { dst, site, args } => {
                let Operand::Fn(id) = self.resolve_site(ts, site) else {
                    return fault("call site holds a non-function operand");
                };
                let argv = args.iter().map(|a| reg(ts, *a)).collect::<Exec<Vec<_>>>()?;
                ts.frames.last_mut().expect("frame").pc = next;
                return self.push_frame(ts, id, argv, *dst);
            }
            Instr::ICall { dst, callee, args } => {
                let mut id = match reg(ts, *callee)? {
                    Value::Fn(id) => id,
                    Value::Int(0) => return fault("call through a null function pointer"),
                    other => return fault(format!("call through {other}")),
                };
                if let Some(redirect) = self.ptr_redirect(id) {
                    match self.resolve(redirect, ts.view.as_deref()) {
                        Operand::Fn(r) => id = r,
                        _ => return fault("pointer redirection to a non-function"),
                    }
                }
                let argv = args.iter().map(|a| reg(ts, *a)).collect::<Exec<Vec<_>>>()?;
                ts.frames.last_mut().expect("frame").pc = next;
                return self.push_frame(ts, id, argv, *dst);
            }
            Instr::Builtin { dst, builtin, args } => {
                let argv = args.iter().map(|a| reg(ts, *a)).collect::<Exec<Vec<_>>>()?;
                match builtin {
                    Builtin::Trace => self.record(ts, TraceKind::Mark { text: value::format_message(&argv) }),
                    Builtin::Emit => {
                        let s = argv.iter().map(Value::to_string).collect::<Vec<_>>().join(" ");
                        self.record(ts, TraceKind::Emit { value: s });
                    }
                    Builtin::Sleep => {
                        let us = match argv.first() {
                            Some(Value::Int(v)) if *v >= 0 => u64::try_from(*v).unwrap_or(u64::MAX),
                            other => return fault(format!("sleep({other:?})")),
                        };
                        ts.status = ThreadStatus::Sleeping { until: self.now_us().saturating_add(us) };
                    }
                }
                if let Some(d) = dst {
                    set(ts, *d, Value::Int(0));
                }
            }
            Instr::LoadSh { dst, slot, key } => {
                let k = self.shadow_key(&reg(ts, *key)?)?;
                let v = self.shadow_access(slot, k, None).map_err(Stop::Fault)?;
                set(ts, *dst, v);
            }
            Instr::StoreSh { src, slot, key } => {
                let k = self.shadow_key(&reg(ts, *key)?)?;
                self.shadow_access(slot, k, Some(reg(ts, *src)?)).map_err(Stop::Fault)?;
            }
            Instr::Jmp { target } => next = *target,
            Instr::Br { cond, if_true, if_false } => {
                next = if reg(ts, *cond)?.truthy().map_err(Stop::Fault)? { *if_true } else { *if_false };
            }
            Instr::Ret { src } => {
                let v = match src {
                    Some(r) => {
                        let v = reg(ts, *r)?;
                        match code.ret {
                            Some(ty) => value::convert(&v, ty).map_err(Stop::Fault)?,
                            None => v,
                        }
                    }
                    None => Value::Int(0),
                };
                let done = ts.frames.pop().expect("frame");
                if self.trace_calls.load(Ordering::Relaxed) {
                    self.record(ts, TraceKind::Return { function: done.code.name.clone() });
                }
                match ts.frames.last_mut() {
                    Some(caller) => {
                        if let Some(d) = done.ret_dst {
                            caller.regs[d as usize] = v;
                        }
                    }
                    None => self.end_request(ts, "ok", ThreadStatus::Exited(v)),
                }
                return Ok(());
            }
            Instr::Fatal { args } => {
                let argv = args.iter().map(|a| reg(ts, *a)).collect::<Exec<Vec<_>>>()?;
                return Err(Stop::Fatal(value::format_message(&argv)));
            }
            Instr::Alarm { message } => self.record(ts, TraceKind::Alarm { message: message.clone() }),
            Instr::Halt => return Err(Stop::Halt),
        }
        if let Some(f) = ts.frames.last_mut() {
            f.pc = next;
        }
        Ok(())
    }

    fn field_addr(&self, base: &Value, offset: u32) -> Exec<u64> {
        match base {
            Value::Ptr(0) | Value::Int(0) => fault("null pointer dereference"),
            Value::Ptr(a) => Ok(a + u64::from(offset)),
            other => fault(format!("member access through {other}")),
        }
    }

    fn shadow_key(&self, key: &Value) -> Exec<u64> {
        match key {
            Value::Ptr(a) if *a != 0 => Ok(*a),
            other => fault(format!("shadow field keyed by {other}")),
        }
    }

    fn load_cell(&self, addr: u64, ty: CellTy) -> Exec<Value> {
        let cells = self.cells.read();
        match cells.get(addr as usize).filter(|_| addr != 0) {
            Some(c) => value::convert(&c.value, ty).map_err(Stop::Fault),
            None => fault(format!("bad address {addr}")),
        }
    }

    /// The value is first converted to the site's access type, then to
    /// whatever the cell currently holds.
    fn store_cell(&self, addr: u64, ty: CellTy, v: &Value) -> Exec<Value> {
        let v = value::convert(v, ty).map_err(Stop::Fault)?;
        let mut cells = self.cells.write();
        match cells.get_mut(addr as usize).filter(|_| addr != 0) {
            Some(c) => {
                c.value = value::convert(&v, c.ty).map_err(Stop::Fault)?;
                Ok(c.value.clone())
            }
            None => fault(format!("bad address {addr}")),
        }
    }
}
