//! Simulated target process: an instruction store of linked functions,
//! typed global cells, threads with call stacks, and a symbol table.
//!
//! Every `CALL`, `LOADFN`, `LOADG` and `STOREG` carries its operand in a
//! single atomic word, so a site can be rewritten while other threads
//! execute it. An operand either names its target directly or points at a
//! trampoline, which picks between an original and a replacement operand
//! depending on whether the trampoline's weave instance is in the set the
//! executing request latched when it began.

mod exec;
pub mod ir;
pub mod lower;
pub mod sched;
pub mod trace;
pub mod value;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};

pub use ir::{CellInit, CellTy, IrFunction, IrGlobal, ProgramIr};
pub use lower::{lower_unit, LowerError, LowerOptions};
pub use sched::{Checkpoint, DeterministicDriver, Executors, ProcessClock, Scheduler, WallClock};
pub use trace::{TraceEvent, TraceKind};
pub use value::{FnId, Value};

use crate::csubset::ast::{BinOp, UnOp};
use crate::csubset::{ScalarType, TranslationUnit};

pub type SiteId = u32;
pub type ThreadId = u32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VmError {
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error("link error: {0}")]
    Link(String),
    #[error("unknown symbol {0}")]
    UnknownSymbol(String),
    #[error("{0} is not a function")]
    NotAFunction(String),
    #[error("site {0} is not a rewritable site")]
    NotASite(SiteId),
    #[error("unknown thread {0}")]
    UnknownThread(ThreadId),
}

const TAG_SHIFT: u32 = 62;
const TAG_FN: u64 = 0;
const TAG_GLOBAL: u64 = 1;
const TAG_TRAMP: u64 = 2;
const NO_REDIRECT: u64 = u64::MAX;

/// Decoded form of a site's operand word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Fn(FnId),
    /// Cell address and the type accesses through this site use.
    Global {
        addr: u64,
        ty: CellTy,
    },
    Tramp(u32),
}

impl Operand {
    pub fn pack(self) -> u64 {
        match self {
            Operand::Fn(id) => TAG_FN << TAG_SHIFT | u64::from(id),
            Operand::Global { addr, ty } => TAG_GLOBAL << TAG_SHIFT | addr << 8 | u64::from(ty.code()),
            Operand::Tramp(id) => TAG_TRAMP << TAG_SHIFT | u64::from(id),
        }
    }

    pub fn unpack(word: u64) -> Operand {
        let low = word & ((1 << TAG_SHIFT) - 1);
        match word >> TAG_SHIFT {
            TAG_FN => Operand::Fn(low as u32),
            TAG_GLOBAL => Operand::Global { addr: low >> 8, ty: CellTy::from_code((low & 0xff) as u8).expect("valid cell type code") },
            _ => Operand::Tramp(low as u32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    Call,
    LoadFn,
    LoadG,
    StoreG,
}

/// A rewritable operand embedded in an instruction.
#[derive(Debug)]
pub struct Site {
    pub id: SiteId,
    word: AtomicU64,
}

#[derive(Debug)]
pub(crate) enum Instr {
    Const { dst: u32, value: Value },
    Mov { dst: u32, src: u32 },
    Bin { op: BinOp, dst: u32, a: u32, b: u32, ty: Option<ScalarType> },
    Un { op: UnOp, dst: u32, a: u32, ty: ScalarType },
    Conv { dst: u32, src: u32, ty: ScalarType },
    LoadG { dst: u32, site: Site },
    StoreG { src: u32, site: Site },
    AddrG { dst: u32, addr: u64 },
    LoadF { dst: u32, base: u32, offset: u32, ty: CellTy },
    StoreF { src: u32, base: u32, offset: u32, ty: CellTy },
    LoadFn { dst: u32, site: Site },
    Call { dst: Option<u32>, site: Site, args: Vec<u32> },
    ICall { dst: Option<u32>, callee: u32, args: Vec<u32> },
    Builtin { dst: Option<u32>, builtin: ir::Builtin, args: Vec<u32> },
    LoadSh { dst: u32, slot: (String, String), key: u32 },
    StoreSh { src: u32, slot: (String, String), key: u32 },
    Jmp { target: u32 },
    Br { cond: u32, if_true: u32, if_false: u32 },
    Ret { src: Option<u32> },
    Fatal { args: Vec<u32> },
    Alarm { message: String },
    Halt,
}

impl Instr {
    fn site(&self) -> Option<&Site> {
        match self {
            Instr::LoadG { site, .. } | Instr::StoreG { site, .. } | Instr::LoadFn { site, .. } | Instr::Call { site, .. } => Some(site),
            _ => None,
        }
    }
}

/// A linked function in the instruction store.
#[derive(Debug)]
pub struct FunctionCode {
    pub id: FnId,
    pub name: String,
    pub params: Vec<CellTy>,
    pub ret: Option<CellTy>,
    pub variadic: bool,
    pub nregs: u32,
    /// Bundle that installed the function, `None` for the base program.
    pub bundle: Option<String>,
    pub(crate) instrs: Vec<Instr>,
    /// Applied when the function is entered through a function pointer.
    ptr_redirect: AtomicU64,
}

impl FunctionCode {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Symbol {
    Function { id: FnId },
    Global { addr: u64, cells: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub ty: CellTy,
    pub value: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trampoline {
    pub instance: u64,
    pub original: Operand,
    pub replacement: Operand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClockMode {
    /// One executed instruction advances the clock by one microsecond.
    #[default]
    Steps,
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThreadStatus {
    Running,
    Sleeping { until: u64 },
    Halted,
    Exited(Value),
    Fatal(String),
    Faulted(String),
}

impl ThreadStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, ThreadStatus::Running | ThreadStatus::Sleeping { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub entry: String,
    pub args: Vec<Value>,
}

impl Request {
    pub fn new(entry: &str, args: &[i128]) -> Request {
        Request { entry: entry.into(), args: args.iter().map(|v| Value::Int(*v)).collect() }
    }
}

/// Supplies requests to worker threads. `None` stops the worker.
pub trait RequestSource: Send + Sync {
    fn next(&self, worker: usize, seq: u64) -> Option<Request>;
}

/// Cycles through a fixed request list, each worker from its own offset.
#[derive(Debug, Clone)]
pub struct CycleSource {
    pub requests: Vec<Request>,
    pub limit: Option<u64>,
}

impl RequestSource for CycleSource {
    fn next(&self, worker: usize, seq: u64) -> Option<Request> {
        if self.requests.is_empty() || self.limit.is_some_and(|l| seq >= l) {
            return None;
        }
        Some(self.requests[(seq as usize + worker) % self.requests.len()].clone())
    }
}

pub(crate) struct Frame {
    code: Arc<FunctionCode>,
    pc: u32,
    regs: Vec<Value>,
    ret_dst: Option<u32>,
}

pub(crate) enum Job {
    Single(Option<Request>),
    Worker { source: Arc<dyn RequestSource>, worker: usize, seq: u64 },
}

pub struct ThreadState {
    pub id: ThreadId,
    pub(crate) frames: Vec<Frame>,
    pub(crate) status: ThreadStatus,
    pub(crate) view: Option<Arc<BTreeSet<u64>>>,
    pub(crate) request: u64,
    pub(crate) job: Job,
}

impl ThreadState {
    fn has_frame(&self, id: FnId) -> bool {
        self.frames.iter().any(|f| f.code.id == id)
    }

    fn view_contains(&self, instance: u64) -> bool {
        self.view.as_ref().is_some_and(|v| v.contains(&instance))
    }
}

struct SiteRef {
    func: FnId,
    index: u32,
    kind: SiteKind,
    sym: String,
}

#[derive(Debug, Clone)]
struct ShadowDecl {
    ty: ScalarType,
    default: Value,
    owners: BTreeSet<String>,
}

/// What an installed unit added, for removal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Installed {
    pub functions: Vec<FnId>,
    pub symbols: Vec<String>,
}

type SiteCache = (u64, HashMap<(SiteKind, String), Vec<(SiteId, FnId)>>);

pub struct TargetProcess {
    clock_mode: ClockMode,
    started: Instant,
    steps: AtomicU64,
    functions: RwLock<Vec<Option<Arc<FunctionCode>>>>,
    site_refs: RwLock<Vec<SiteRef>>,
    symbols: RwLock<BTreeMap<String, Symbol>>,
    cells: RwLock<Vec<Cell>>,
    tramps: RwLock<Vec<Trampoline>>,
    guard: RwLock<Arc<BTreeSet<u64>>>,
    shadow_decls: Mutex<BTreeMap<(String, String), ShadowDecl>>,
    shadows: Mutex<BTreeMap<(String, String), HashMap<u64, Value>>>,
    threads: RwLock<Vec<Arc<Mutex<ThreadState>>>>,
    trace: Mutex<Vec<TraceEvent>>,
    trace_calls: AtomicBool,
    trace_globals: AtomicBool,
    trace_limit: AtomicUsize,
    next_request: AtomicU64,
    next_instance: AtomicU64,
    generation: AtomicU64,
    site_cache: Mutex<Option<SiteCache>>,
    site_cache_builds: AtomicU64,
    pub(crate) woven: Mutex<BTreeMap<String, crate::weaver::WovenBundle>>,
    pub(crate) weave_lock: Mutex<()>,
}

/// Lower and load a unit as a fresh process.
pub fn load_unit(unit: &TranslationUnit) -> Result<TargetProcess, VmError> {
    let ir = lower_unit(unit, &LowerOptions::default())?;
    TargetProcess::load(&ir, ClockMode::Steps)
}

pub fn load_program(ir: &ProgramIr) -> Result<TargetProcess, VmError> {
    TargetProcess::load(ir, ClockMode::Steps)
}

impl TargetProcess {
    pub fn empty(clock_mode: ClockMode) -> TargetProcess {
        TargetProcess {
            clock_mode,
            started: Instant::now(),
            steps: AtomicU64::new(0),
            functions: RwLock::new(Vec::new()),
            site_refs: RwLock::new(Vec::new()),
            symbols: RwLock::new(BTreeMap::new()),
            // Address 0 is reserved for null.
            cells: RwLock::new(vec![Cell { ty: CellTy::StructPtr, value: Value::Ptr(0) }]),
            tramps: RwLock::new(Vec::new()),
            guard: RwLock::new(Arc::new(BTreeSet::new())),
            shadow_decls: Mutex::new(BTreeMap::new()),
            shadows: Mutex::new(BTreeMap::new()),
            threads: RwLock::new(Vec::new()),
            trace: Mutex::new(Vec::new()),
            trace_calls: AtomicBool::new(true),
            trace_globals: AtomicBool::new(false),
            trace_limit: AtomicUsize::new(usize::MAX),
            next_request: AtomicU64::new(1),
            next_instance: AtomicU64::new(1),
            generation: AtomicU64::new(0),
            site_cache: Mutex::new(None),
            site_cache_builds: AtomicU64::new(0),
            woven: Mutex::new(BTreeMap::new()),
            weave_lock: Mutex::new(()),
        }
    }

    pub fn load(ir: &ProgramIr, clock_mode: ClockMode) -> Result<TargetProcess, VmError> {
        let p = TargetProcess::empty(clock_mode);
        p.install(ir, None)?;
        Ok(p)
    }

    /// Link `ir` into the process. Its symbols must not exist yet; on error
    /// nothing is added.
    pub fn install(&self, ir: &ProgramIr, bundle: Option<&str>) -> Result<Installed, VmError> {
        let mut functions = self.functions.write();
        let mut symbols = self.symbols.write();
        let mut cells = self.cells.write();
        let mut site_refs = self.site_refs.write();

        let mut added = BTreeMap::new();
        let mut new_cells = Vec::new();
        let mut next_addr = cells.len() as u64;
        let fn_base = functions.len() as FnId;
        for g in &ir.globals {
            let sym = Symbol::Global { addr: next_addr, cells: g.cells.len() as u32 };
            next_addr += g.cells.len() as u64;
            if symbols.contains_key(&g.name) || added.insert(g.name.clone(), sym).is_some() {
                return Err(VmError::Link(format!("symbol {} is already defined", g.name)));
            }
        }
        for (i, f) in ir.functions.iter().enumerate() {
            let sym = Symbol::Function { id: fn_base + i as FnId };
            if symbols.contains_key(&f.name) || added.insert(f.name.clone(), sym).is_some() {
                return Err(VmError::Link(format!("symbol {} is already defined", f.name)));
            }
        }
        let lookup = |name: &str| added.get(name).or_else(|| symbols.get(name)).copied();

        for g in &ir.globals {
            for c in &g.cells {
                let raw = match &c.init {
                    CellInit::Zero => match c.ty {
                        CellTy::Scalar(s) if s.is_float() => Value::Float(0.0),
                        CellTy::StructPtr => Value::Ptr(0),
                        _ => Value::Int(0),
                    },
                    CellInit::Int(v) => Value::Int(*v),
                    CellInit::Float(v) => Value::Float(*v),
                    CellInit::Fn(n) => match lookup(n) {
                        Some(Symbol::Function { id }) => Value::Fn(id),
                        _ => return Err(VmError::Link(format!("initializer of {}: {n} is not a function", g.name))),
                    },
                    CellInit::Addr(n) => match lookup(n) {
                        Some(Symbol::Global { addr, .. }) => Value::Ptr(addr),
                        Some(Symbol::Function { id }) => Value::Fn(id),
                        None => return Err(VmError::Link(format!("initializer of {}: unknown symbol {n}", g.name))),
                    },
                };
                let value = value::convert(&raw, c.ty).map_err(|e| VmError::Link(format!("initializer of {}: {e}", g.name)))?;
                new_cells.push(Cell { ty: c.ty, value });
            }
        }

        let mut linked = Vec::new();
        let mut refs = Vec::new();
        let mut next_site = site_refs.len() as SiteId;
        for (i, f) in ir.functions.iter().enumerate() {
            let id = fn_base + i as FnId;
            let mut instrs = Vec::with_capacity(f.code.len());
            for (index, op) in f.code.iter().enumerate() {
                let mut site = |kind: SiteKind, sym: &str, operand: Operand| {
                    refs.push(SiteRef { func: id, index: index as u32, kind, sym: sym.to_string() });
                    next_site += 1;
                    Site { id: next_site - 1, word: AtomicU64::new(operand.pack()) }
                };
                let func_sym = |sym: &str| match lookup(sym) {
                    Some(Symbol::Function { id }) => Ok(id),
                    Some(_) => Err(VmError::NotAFunction(sym.to_string())),
                    None => Err(VmError::UnknownSymbol(sym.to_string())),
                };
                let global_sym = |sym: &str, offset: u32| match lookup(sym) {
                    Some(Symbol::Global { addr, cells }) if offset < cells => Ok(addr + u64::from(offset)),
                    Some(Symbol::Global { .. }) => Err(VmError::Link(format!("offset {offset} outside {sym}"))),
                    Some(_) => Err(VmError::Link(format!("{sym} is not a global"))),
                    None => Err(VmError::UnknownSymbol(sym.to_string())),
                };
                use ir::Op;
                let ins = match op {
                    Op::Const { dst, value } => Instr::Const {
                        dst: *dst,
                        value: match value {
                            ir::Const::Int(v) => Value::Int(*v),
                            ir::Const::Float(v) => Value::Float(*v),
                            ir::Const::Str(s) => Value::Str(s.as_str().into()),
                        },
                    },
                    Op::Mov { dst, src } => Instr::Mov { dst: *dst, src: *src },
                    Op::Bin { op, dst, a, b, ty } => Instr::Bin { op: *op, dst: *dst, a: *a, b: *b, ty: *ty },
                    Op::Un { op, dst, a, ty } => Instr::Un { op: *op, dst: *dst, a: *a, ty: *ty },
                    Op::Conv { dst, src, ty } => Instr::Conv { dst: *dst, src: *src, ty: *ty },
                    Op::LoadG { dst, sym, offset, ty } => {
                        let addr = global_sym(sym, *offset)?;
                        Instr::LoadG { dst: *dst, site: site(SiteKind::LoadG, sym, Operand::Global { addr, ty: *ty }) }
                    }
                    Op::StoreG { src, sym, offset, ty } => {
                        let addr = global_sym(sym, *offset)?;
                        Instr::StoreG { src: *src, site: site(SiteKind::StoreG, sym, Operand::Global { addr, ty: *ty }) }
                    }
                    Op::AddrG { dst, sym } => Instr::AddrG { dst: *dst, addr: global_sym(sym, 0)? },
                    Op::LoadF { dst, base, offset, ty } => Instr::LoadF { dst: *dst, base: *base, offset: *offset, ty: *ty },
                    Op::StoreF { src, base, offset, ty } => Instr::StoreF { src: *src, base: *base, offset: *offset, ty: *ty },
                    Op::LoadFn { dst, sym } => {
                        let f = func_sym(sym)?;
                        Instr::LoadFn { dst: *dst, site: site(SiteKind::LoadFn, sym, Operand::Fn(f)) }
                    }
                    Op::Call { dst, sym, args } => {
                        let f = func_sym(sym)?;
                        Instr::Call { dst: *dst, site: site(SiteKind::Call, sym, Operand::Fn(f)), args: args.clone() }
                    }
                    Op::ICall { dst, callee, args } => Instr::ICall { dst: *dst, callee: *callee, args: args.clone() },
                    Op::Builtin { dst, builtin, args } => Instr::Builtin { dst: *dst, builtin: *builtin, args: args.clone() },
                    Op::LoadSh { dst, strukt, field, key } => Instr::LoadSh { dst: *dst, slot: (strukt.clone(), field.clone()), key: *key },
                    Op::StoreSh { src, strukt, field, key } => Instr::StoreSh { src: *src, slot: (strukt.clone(), field.clone()), key: *key },
                    Op::Jmp { target } => Instr::Jmp { target: *target },
                    Op::Br { cond, if_true, if_false } => Instr::Br { cond: *cond, if_true: *if_true, if_false: *if_false },
                    Op::Ret { src } => Instr::Ret { src: *src },
                    Op::Fatal { args } => Instr::Fatal { args: args.clone() },
                    Op::Alarm { message } => Instr::Alarm { message: message.clone() },
                    Op::Halt => Instr::Halt,
                };
                instrs.push(ins);
            }
            for ins in &instrs {
                let targets: Vec<u32> = match ins {
                    Instr::Jmp { target } => vec![*target],
                    Instr::Br { if_true, if_false, .. } => vec![*if_true, *if_false],
                    _ => vec![],
                };
                if targets.iter().any(|t| *t as usize >= instrs.len()) {
                    return Err(VmError::Link(format!("jump outside {}", f.name)));
                }
            }
            if instrs.last().is_some_and(|i| matches!(i, Instr::Jmp { .. } | Instr::Br { .. })) || instrs.is_empty() {
                return Err(VmError::Link(format!("{} can run off its end", f.name)));
            }
            linked.push(FunctionCode {
                id,
                name: f.name.clone(),
                params: f.params.clone(),
                ret: f.ret,
                variadic: f.variadic,
                nregs: f.nregs.max(f.params.len() as u32),
                bundle: bundle.map(str::to_string),
                instrs,
                ptr_redirect: AtomicU64::new(NO_REDIRECT),
            });
        }

        // Nothing can fail past this point.
        let installed = Installed {
            functions: linked.iter().map(|f| f.id).collect(),
            symbols: ir.globals.iter().map(|g| g.name.clone()).chain(ir.functions.iter().map(|f| f.name.clone())).collect(),
        };
        cells.extend(new_cells);
        symbols.extend(added);
        site_refs.extend(refs);
        functions.extend(linked.into_iter().map(|f| Some(Arc::new(f))));
        self.generation.fetch_add(1, Ordering::SeqCst);
        Ok(installed)
    }

    /// Remove installed functions and symbols. Callers make sure no frame
    /// of these functions remains. Global cells are not reclaimed.
    pub fn uninstall(&self, inst: &Installed) {
        let mut functions = self.functions.write();
        let mut symbols = self.symbols.write();
        for id in &inst.functions {
            if let Some(slot) = functions.get_mut(*id as usize) {
                *slot = None;
            }
        }
        for s in &inst.symbols {
            symbols.remove(s);
        }
        self.generation.fetch_add(1, Ordering::SeqCst);
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.clock_mode
    }

    pub fn now_us(&self) -> u64 {
        match self.clock_mode {
            ClockMode::Steps => self.steps.load(Ordering::SeqCst),
            ClockMode::Wall => self.started.elapsed().as_micros() as u64,
        }
    }

    /// Moves the step clock forward; no effect on a wall clock.
    pub fn advance_clock(&self, us: u64) {
        if self.clock_mode == ClockMode::Steps {
            self.steps.fetch_add(us, Ordering::SeqCst);
        }
    }

    pub fn symbol(&self, name: &str) -> Option<Symbol> {
        self.symbols.read().get(name).copied()
    }

    pub fn symbols(&self) -> BTreeMap<String, Symbol> {
        self.symbols.read().clone()
    }

    pub fn function_id(&self, name: &str) -> Option<FnId> {
        match self.symbol(name)? {
            Symbol::Function { id } => Some(id),
            Symbol::Global { .. } => None,
        }
    }

    pub fn function(&self, id: FnId) -> Option<Arc<FunctionCode>> {
        self.functions.read().get(id as usize).cloned().flatten()
    }

    pub fn function_name(&self, id: FnId) -> Option<String> {
        self.function(id).map(|f| f.name.clone())
    }

    pub fn global_addr(&self, name: &str) -> Option<u64> {
        match self.symbol(name)? {
            Symbol::Global { addr, .. } => Some(addr),
            Symbol::Function { .. } => None,
        }
    }

    pub fn cell(&self, addr: u64) -> Option<Cell> {
        if addr == 0 {
            return None;
        }
        self.cells.read().get(addr as usize).cloned()
    }

    /// Value of a scalar global or of field `offset` of a struct global.
    pub fn read_global(&self, name: &str, offset: u32) -> Option<Value> {
        Some(self.cell(self.global_addr(name)? + u64::from(offset))?.value)
    }

    pub fn write_global(&self, name: &str, offset: u32, v: &Value) -> Result<(), String> {
        let addr = self.global_addr(name).ok_or_else(|| format!("unknown global {name}"))? + u64::from(offset);
        let mut cells = self.cells.write();
        let cell = cells.get_mut(addr as usize).ok_or("bad address")?;
        cell.value = value::convert(v, cell.ty)?;
        Ok(())
    }

    /// Changes a cell's type tag, converting its value (wrapping if needed).
    pub fn retag_cell(&self, addr: u64, ty: CellTy) -> Result<(), String> {
        let mut cells = self.cells.write();
        let cell = cells.get_mut(addr as usize).filter(|_| addr != 0).ok_or("bad address")?;
        cell.value = value::convert(&cell.value, ty)?;
        cell.ty = ty;
        Ok(())
    }

    /// Rewrite function values held in global cells according to `map`.
    /// Returns how many cells changed.
    pub fn remap_fn_values(&self, map: &HashMap<FnId, FnId>) -> usize {
        let mut n = 0;
        for c in self.cells.write().iter_mut() {
            if let Value::Fn(id) = c.value {
                if let Some(to) = map.get(&id) {
                    c.value = Value::Fn(*to);
                    n += 1;
                }
            }
        }
        n
    }

    /// Canonical listing of every live function with current operand words
    /// and pointer redirections. Trampolines are not part of it.
    pub fn code_image(&self) -> String {
        let mut out = String::new();
        for f in self.functions.read().iter().flatten() {
            let _ = writeln!(out, "fn {} {} redirect={:x}", f.id, f.name, f.ptr_redirect.load(Ordering::SeqCst));
            for (i, ins) in f.instrs.iter().enumerate() {
                let _ = writeln!(out, "  {i}: {ins:?}");
            }
        }
        out
    }

    /// Number of live functions.
    pub fn function_count(&self) -> usize {
        self.functions.read().iter().flatten().count()
    }

    // ---- sites

    fn with_site<T>(&self, site: SiteId, f: impl FnOnce(&AtomicU64) -> T) -> Result<T, VmError> {
        let (func, index) = {
            let refs = self.site_refs.read();
            let r = refs.get(site as usize).ok_or(VmError::NotASite(site))?;
            (r.func, r.index)
        };
        let code = self.function(func).ok_or(VmError::NotASite(site))?;
        let s = code.instrs[index as usize].site().ok_or(VmError::NotASite(site))?;
        Ok(f(&s.word))
    }

    pub fn site_operand(&self, site: SiteId) -> Result<Operand, VmError> {
        self.with_site(site, |w| Operand::unpack(w.load(Ordering::SeqCst)))
    }

    /// Atomically replace a site's operand, returning the previous one.
    pub fn rewrite_site(&self, site: SiteId, new: Operand) -> Result<Operand, VmError> {
        self.with_site(site, |w| Operand::unpack(w.swap(new.pack(), Ordering::SeqCst)))
    }

    /// Rewrite only if the site still holds `expected`.
    pub fn cas_site(&self, site: SiteId, expected: Operand, new: Operand) -> Result<bool, VmError> {
        self.with_site(site, |w| w.compare_exchange(expected.pack(), new.pack(), Ordering::SeqCst, Ordering::SeqCst).is_ok())
    }

    pub fn site_kind(&self, site: SiteId) -> Option<(SiteKind, String)> {
        self.site_refs.read().get(site as usize).map(|r| (r.kind, r.sym.clone()))
    }

    /// Sites of `kind` linked against `sym`, in live functions not installed
    /// by `exclude_bundle`. Cached until the code store changes.
    pub fn sites_for(&self, kind: SiteKind, sym: &str, exclude_bundle: Option<&str>) -> Vec<SiteId> {
        let generation = self.generation.load(Ordering::SeqCst);
        let mut cache = self.site_cache.lock();
        if cache.as_ref().is_none_or(|(g, _)| *g != generation) {
            self.site_cache_builds.fetch_add(1, Ordering::Relaxed);
            let functions = self.functions.read();
            let mut map: HashMap<(SiteKind, String), Vec<(SiteId, FnId)>> = HashMap::new();
            for (id, r) in self.site_refs.read().iter().enumerate() {
                if functions.get(r.func as usize).is_some_and(Option::is_some) {
                    map.entry((r.kind, r.sym.clone())).or_default().push((id as SiteId, r.func));
                }
            }
            *cache = Some((generation, map));
        }
        let (_, map) = cache.as_ref().expect("cache built");
        let Some(list) = map.get(&(kind, sym.to_string())) else {
            return Vec::new();
        };
        list.iter()
            .filter(|(_, f)| exclude_bundle.is_none() || self.function(*f).is_some_and(|c| c.bundle.as_deref() != exclude_bundle))
            .map(|(s, _)| *s)
            .collect()
    }

    /// How often the site index has been rebuilt.
    pub fn site_cache_builds(&self) -> u64 {
        self.site_cache_builds.load(Ordering::Relaxed)
    }

    pub fn invalidate_site_cache(&self) {
        self.generation.fetch_add(1, Ordering::SeqCst);
    }

    // ---- trampolines, redirections and guard

    pub fn add_tramp(&self, t: Trampoline) -> u32 {
        let mut tr = self.tramps.write();
        tr.push(t);
        tr.len() as u32 - 1
    }

    pub fn tramp(&self, id: u32) -> Option<Trampoline> {
        self.tramps.read().get(id as usize).copied()
    }

    fn resolve(&self, mut op: Operand, view: Option<&BTreeSet<u64>>) -> Operand {
        while let Operand::Tramp(id) = op {
            let t = self.tramps.read()[id as usize];
            op = if view.is_some_and(|v| v.contains(&t.instance)) { t.replacement } else { t.original };
        }
        op
    }

    /// Operand a site resolves to for a thread whose view is `active`.
    pub fn resolve_for(&self, op: Operand, active: &BTreeSet<u64>) -> Operand {
        self.resolve(op, Some(active))
    }

    pub fn ptr_redirect(&self, id: FnId) -> Option<Operand> {
        let w = self.function(id)?.ptr_redirect.load(Ordering::SeqCst);
        (w != NO_REDIRECT).then(|| Operand::unpack(w))
    }

    /// Compare-and-set of a function's pointer redirection.
    pub fn cas_ptr_redirect(&self, id: FnId, expected: Option<Operand>, new: Option<Operand>) -> bool {
        let pack = |o: Option<Operand>| o.map_or(NO_REDIRECT, Operand::pack);
        self.function(id).is_some_and(|f| f.ptr_redirect.compare_exchange(pack(expected), pack(new), Ordering::SeqCst, Ordering::SeqCst).is_ok())
    }

    pub fn next_instance(&self) -> u64 {
        self.next_instance.fetch_add(1, Ordering::SeqCst)
    }

    pub fn active_instances(&self) -> Arc<BTreeSet<u64>> {
        self.guard.read().clone()
    }

    pub fn set_guard(&self, instance: u64, on: bool) {
        let mut g = self.guard.write();
        let mut next = (**g).clone();
        if on {
            next.insert(instance);
        } else {
            next.remove(&instance);
        }
        *g = Arc::new(next);
    }

    // ---- shadow storage

    pub fn declare_shadow(&self, strukt: &str, field: &str, ty: ScalarType, default: Value, owner: &str) -> Result<(), String> {
        let default = value::to_scalar(&default, ty)?;
        let mut decls = self.shadow_decls.lock();
        let d = decls.entry((strukt.into(), field.into())).or_insert_with(|| ShadowDecl { ty, default, owners: BTreeSet::new() });
        if d.ty != ty {
            return Err(format!("shadow field {strukt}.{field} already has type {}", d.ty));
        }
        d.owners.insert(owner.into());
        Ok(())
    }

    /// Drops `owner`'s claim; the table goes away with its last owner.
    pub fn release_shadow(&self, strukt: &str, field: &str, owner: &str) {
        let key = (strukt.to_string(), field.to_string());
        let mut decls = self.shadow_decls.lock();
        if let Some(d) = decls.get_mut(&key) {
            d.owners.remove(owner);
            if d.owners.is_empty() {
                decls.remove(&key);
                self.shadows.lock().remove(&key);
            }
        }
    }

    /// Entries in a shadow table, `None` if it was never touched.
    pub fn shadow_len(&self, strukt: &str, field: &str) -> Option<usize> {
        self.shadows.lock().get(&(strukt.to_string(), field.to_string())).map(HashMap::len)
    }

    fn shadow_access(&self, slot: &(String, String), key: u64, store: Option<Value>) -> Result<Value, String> {
        let decls = self.shadow_decls.lock();
        let d = decls.get(slot).ok_or_else(|| format!("no shadow field {}.{}", slot.0, slot.1))?;
        let mut tables = self.shadows.lock();
        let table = tables.entry(slot.clone()).or_default();
        // Reads of an instance never stored to see the default and leave
        // the table alone.
        match store {
            Some(v) => {
                let v = value::to_scalar(&v, d.ty)?;
                table.insert(key, v.clone());
                Ok(v)
            }
            None => Ok(table.get(&key).unwrap_or(&d.default).clone()),
        }
    }

    // ---- threads

    fn add_thread(&self, job: Job) -> ThreadId {
        let mut threads = self.threads.write();
        let id = threads.len() as ThreadId;
        threads.push(Arc::new(Mutex::new(ThreadState { id, frames: Vec::new(), status: ThreadStatus::Running, view: None, request: 0, job })));
        id
    }

    /// A thread that runs one request and exits with its return value.
    pub fn spawn_thread(&self, entry: &str, args: Vec<Value>) -> Result<ThreadId, VmError> {
        match self.symbol(entry) {
            Some(Symbol::Function { .. }) => {}
            Some(_) => return Err(VmError::NotAFunction(entry.into())),
            None => return Err(VmError::UnknownSymbol(entry.into())),
        }
        Ok(self.add_thread(Job::Single(Some(Request { entry: entry.into(), args }))))
    }

    /// A thread that serves requests from `source` until it runs dry.
    /// FATAL ends the current request only.
    pub fn spawn_worker(&self, source: Arc<dyn RequestSource>, worker: usize) -> ThreadId {
        self.add_thread(Job::Worker { source, worker, seq: 0 })
    }

    pub fn thread_count(&self) -> usize {
        self.threads.read().len()
    }

    fn thread(&self, tid: ThreadId) -> Result<Arc<Mutex<ThreadState>>, VmError> {
        self.threads.read().get(tid as usize).cloned().ok_or(VmError::UnknownThread(tid))
    }

    pub fn thread_status(&self, tid: ThreadId) -> Result<ThreadStatus, VmError> {
        Ok(self.thread(tid)?.lock().status.clone())
    }

    /// Function names on a thread's stack, outermost first.
    pub fn backtrace(&self, tid: ThreadId) -> Result<Vec<String>, VmError> {
        Ok(self.thread(tid)?.lock().frames.iter().map(|f| f.code.name.clone()).collect())
    }

    fn all_threads(&self) -> Vec<Arc<Mutex<ThreadState>>> {
        self.threads.read().clone()
    }

    pub fn stack_contains(&self, sym: &str) -> bool {
        self.function_id(sym).is_some_and(|id| self.stack_contains_id(id))
    }

    pub fn stack_contains_id(&self, id: FnId) -> bool {
        self.all_threads().iter().any(|t| t.lock().has_frame(id))
    }

    /// Whether any running request latched a view containing `instance`.
    pub fn any_view_contains(&self, instance: u64) -> bool {
        self.all_threads().iter().any(|t| t.lock().view_contains(instance))
    }

    /// Blocks every executor between instructions until the guard drops.
    pub fn pause_executors(&self) -> Paused {
        let states = self.all_threads().iter().map(|t| t.lock_arc()).collect();
        Paused { states }
    }

    // ---- tracing

    pub fn set_trace(&self, calls: bool, globals: bool) {
        self.trace_calls.store(calls, Ordering::SeqCst);
        self.trace_globals.store(globals, Ordering::SeqCst);
    }

    /// Keep at most about `n` recent events; older ones are dropped.
    pub fn set_trace_limit(&self, n: usize) {
        self.trace_limit.store(n.max(2), Ordering::SeqCst);
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut *self.trace.lock())
    }

    pub fn trace_snapshot(&self) -> Vec<TraceEvent> {
        self.trace.lock().clone()
    }

    fn record(&self, ts: &ThreadState, kind: TraceKind) {
        let ev = TraceEvent { at: self.now_us(), thread: ts.id, request: ts.request, kind };
        let mut t = self.trace.lock();
        t.push(ev);
        let limit = self.trace_limit.load(Ordering::Relaxed);
        if t.len() > limit {
            t.drain(..limit / 2);
        }
    }

    fn global_name(&self, addr: u64) -> String {
        for (name, s) in self.symbols.read().iter() {
            if let Symbol::Global { addr: a, cells } = *s {
                if (a..a + u64::from(cells)).contains(&addr) {
                    return if cells == 1 { name.clone() } else { format!("{name}+{}", addr - a) };
                }
            }
        }
        format!("@{addr}")
    }
}

/// Executors are held between instructions while this lives.
pub struct Paused {
    states: Vec<parking_lot::ArcMutexGuard<parking_lot::RawMutex, ThreadState>>,
}

impl Paused {
    pub fn stack_contains_id(&self, id: FnId) -> bool {
        self.states.iter().any(|t| t.has_frame(id))
    }

    pub fn any_view_contains(&self, instance: u64) -> bool {
        self.states.iter().any(|t| t.view_contains(instance))
    }

    /// Whether some request in flight latched a view without `instance`.
    pub fn any_view_lacks(&self, instance: u64) -> bool {
        self.states.iter().any(|t| t.view.as_ref().is_some_and(|v| !v.contains(&instance)))
    }
}
