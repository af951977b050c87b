//! Weaving bundles into running processes.
//!
//! A weave is one transaction. Required symbols are resolved and value
//! checks run before anything changes. The bundle's code is installed, then
//! every matched site is pointed at a trampoline owned by a fresh weave
//! instance. Until activation those trampolines fall through to the
//! original operands. Activation adds the instance to the guard set while
//! executors are held between instructions; each request latches the guard
//! set when it begins, so a request sees either all of a bundle's aspects
//! or none of them. Any failure before activation undoes every change.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aspectdsl::{Directive, PatchBundle};
use crate::classifier::{RuntimeCheck, TypeChangePlan};
use crate::csubset::{Expr, ScalarType};
use crate::targetvm::value::fits;
use crate::targetvm::{CellTy, Checkpoint, FnId, Installed, Operand, SiteId, SiteKind, Symbol, TargetProcess, Trampoline, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeaveOptions {
    /// Activate only once no replaced function has a live frame.
    pub wait_for_quiescence: bool,
    /// In the process clock's microseconds.
    pub quiescence_timeout_us: u64,
    /// After activation, replace trampolines by direct operands once every
    /// request in flight sees the bundle.
    pub collapse: bool,
}

impl Default for WeaveOptions {
    fn default() -> Self {
        WeaveOptions { wait_for_quiescence: false, quiescence_timeout_us: 5_000_000, collapse: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Woven,
    Unwoven,
    FailedSymbols(Vec<String>),
    FailedValueCheck {
        symbol: String,
        value: String,
        target: ScalarType,
    },
    TimedOutQuiescent(String),
    /// The bundle is inconsistent with the process or already woven.
    Rejected(String),
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Woven => f.write_str("woven"),
            Outcome::Unwoven => f.write_str("unwoven"),
            Outcome::FailedSymbols(s) => write!(f, "missing symbols: {}", s.join(", ")),
            Outcome::FailedValueCheck { symbol, value, target } => write!(f, "{symbol} = {value} does not fit {target}"),
            Outcome::TimedOutQuiescent(s) => write!(f, "{s} did not become quiescent in time"),
            Outcome::Rejected(r) => write!(f, "rejected: {r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectiveSites {
    pub aspect: String,
    pub sites: Vec<SiteId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeaveReport {
    pub bundle_id: String,
    pub outcome: Outcome,
    pub sites_rewritten: usize,
    pub directives: Vec<DirectiveSites>,
    /// Wall-clock time spent in the call.
    pub elapsed_us: u64,
    /// Process-clock time spent waiting for quiescence or a grace period.
    pub quiescence_wait_us: u64,
    /// Process-clock time of activation.
    pub activated_at: Option<u64>,
}

impl WeaveReport {
    pub fn succeeded(&self) -> bool {
        matches!(self.outcome, Outcome::Woven | Outcome::Unwoven)
    }

    pub fn to_text(&self) -> String {
        crate::canon::to_canonical_pretty(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WeaveError {
    #[error("bundle '{0}' is not woven into this process")]
    UnknownBundle(String),
}

#[derive(Debug, Clone)]
struct SiteRewrite {
    site: SiteId,
    previous: Operand,
    tramp: Operand,
    /// What the site holds now: `tramp`, or the replacement once collapsed.
    current: Operand,
}

#[derive(Debug, Clone)]
struct RedirectRewrite {
    func: FnId,
    previous: Option<Operand>,
    tramp: Operand,
    current: Operand,
}

/// Everything needed to take a bundle out again.
#[derive(Debug, Clone)]
pub struct WovenBundle {
    instance: u64,
    installed: Installed,
    sites: Vec<SiteRewrite>,
    redirects: Vec<RedirectRewrite>,
    retags: Vec<(u64, CellTy, CellTy)>,
    shadows: Vec<(String, String)>,
    /// replacement -> original, for function values to hand back.
    substitutions: HashMap<FnId, FnId>,
    directives: Vec<DirectiveSites>,
}

/// Ids of bundles woven into `p`, sorted.
pub fn woven_bundles(p: &TargetProcess) -> Vec<String> {
    p.woven.lock().keys().cloned().collect()
}

/// Yield at checkpoints until no thread has a frame of `symbol` or the
/// timeout passes. An unknown symbol is trivially quiescent.
pub fn await_quiescence(p: &TargetProcess, symbol: &str, timeout_us: u64, cp: &mut dyn Checkpoint) -> bool {
    let start = cp.now_us(p);
    loop {
        if !p.stack_contains(symbol) {
            return true;
        }
        if cp.now_us(p).saturating_sub(start) >= timeout_us {
            return false;
        }
        cp.yield_now(p);
    }
}

struct Txn<'a> {
    p: &'a TargetProcess,
    woven: WovenBundle,
}

impl Txn<'_> {
    /// Undo everything done so far. Only valid before activation.
    fn rollback(self) {
        let p = self.p;
        for r in self.woven.sites.iter().rev() {
            p.cas_site(r.site, r.current, r.previous).expect("site exists");
        }
        for r in self.woven.redirects.iter().rev() {
            p.cas_ptr_redirect(r.func, Some(r.current), r.previous);
        }
        p.uninstall(&self.woven.installed);
        for (s, f) in &self.woven.shadows {
            p.release_shadow(s, f, &self.woven_owner());
        }
    }

    fn woven_owner(&self) -> String {
        format!("weave#{}", self.woven.instance)
    }

    fn rewrite_sites(&mut self, kind: SiteKind, sym: &str, bundle: &str, replacement: Operand, cp: &mut dyn Checkpoint) -> Vec<SiteId> {
        let p = self.p;
        let mut tramps: HashMap<Operand, u32> = HashMap::new();
        let mut done = Vec::new();
        for site in p.sites_for(kind, sym, Some(bundle)) {
            loop {
                let previous = p.site_operand(site).expect("site exists");
                let t = *tramps
                    .entry(previous)
                    .or_insert_with(|| p.add_tramp(Trampoline { instance: self.woven.instance, original: previous, replacement }));
                let tramp = Operand::Tramp(t);
                if p.cas_site(site, previous, tramp).expect("site exists") {
                    self.woven.sites.push(SiteRewrite { site, previous, tramp, current: tramp });
                    break;
                }
            }
            done.push(site);
            cp.yield_now(p);
        }
        done
    }
}

fn report(bundle: &PatchBundle, outcome: Outcome, started: Instant) -> WeaveReport {
    WeaveReport {
        bundle_id: bundle.id().to_string(),
        outcome,
        sites_rewritten: 0,
        directives: Vec::new(),
        elapsed_us: started.elapsed().as_micros() as u64,
        quiescence_wait_us: 0,
        activated_at: None,
    }
}

fn shadow_default(e: &Expr) -> Value {
    match e {
        Expr::Float(v) => Value::Float(*v),
        Expr::Int(v) => Value::Int(*v),
        _ => Value::Int(0),
    }
}

/// Global cells the bundle retypes: `(symbol, address, current type, new type)`.
fn retype_targets(p: &TargetProcess, bundle: &PatchBundle) -> Result<Vec<(String, u64, ScalarType, ScalarType)>, Outcome> {
    let mut out: Vec<(String, u64, ScalarType, ScalarType)> = Vec::new();
    for d in &bundle.directives {
        let (Directive::RetypeReads { global, to, .. } | Directive::RetypeWrites { global, to, .. }) = d else {
            continue;
        };
        if out.iter().any(|(g, ..)| g == global) {
            continue;
        }
        let Some(Symbol::Global { addr, cells: 1 }) = p.symbol(global) else {
            return Err(Outcome::Rejected(format!("{global} is not a scalar global")));
        };
        let Some(CellTy::Scalar(from)) = p.cell(addr).map(|c| c.ty) else {
            return Err(Outcome::Rejected(format!("{global} is not a scalar global")));
        };
        out.push((global.clone(), addr, from, *to));
    }
    Ok(out)
}

/// Value checks against live state; `None` when everything fits.
fn failed_value_check(p: &TargetProcess, bundle: &PatchBundle, retypes: &[(String, u64, ScalarType, ScalarType)]) -> Option<Outcome> {
    let mut checks: Vec<(String, u64, ScalarType)> = Vec::new();
    for (g, addr, from, to) in retypes {
        if TypeChangePlan::between(*from, *to).is_some_and(|plan| plan.needs_value_check) {
            checks.push((g.clone(), *addr, *to));
        }
    }
    for c in &bundle.manifest.runtime_checks {
        if let RuntimeCheck::ValueFits { global, ty } = c {
            if let Some(addr) = p.global_addr(global) {
                checks.push((global.clone(), addr, *ty));
            }
        }
    }
    for (symbol, addr, target) in checks {
        let value = p.cell(addr).map(|c| c.value).unwrap_or(Value::Undef);
        if !fits(&value, target) {
            return Some(Outcome::FailedValueCheck { symbol, value: value.to_string(), target });
        }
    }
    None
}

fn fn_id(p: &TargetProcess, name: &str) -> Result<FnId, Outcome> {
    p.function_id(name).ok_or_else(|| Outcome::Rejected(format!("{name} is not a function")))
}

/// Weave `bundle` into `p`. `cp` is yielded to between steps that may
/// take a while, so executors keep running.
pub fn weave(p: &TargetProcess, bundle: &PatchBundle, opts: &WeaveOptions, cp: &mut dyn Checkpoint) -> WeaveReport {
    let started = Instant::now();
    let _one_at_a_time = p.weave_lock.lock();
    let id = bundle.id();
    if p.woven.lock().contains_key(id) {
        return report(bundle, Outcome::Rejected(format!("bundle '{id}' is already woven")), started);
    }

    let missing: Vec<String> = bundle.manifest.required_symbols.iter().filter(|s| p.symbol(s).is_none()).cloned().collect();
    if !missing.is_empty() {
        return report(bundle, Outcome::FailedSymbols(missing), started);
    }
    let retypes = match retype_targets(p, bundle) {
        Ok(r) => r,
        Err(o) => return report(bundle, o, started),
    };
    if let Some(o) = failed_value_check(p, bundle, &retypes) {
        return report(bundle, o, started);
    }
    let mut pairs = Vec::new();
    for d in &bundle.directives {
        if let Directive::RedirectCalls { target, .. } | Directive::SubstitutePointer { target, .. } = d {
            match fn_id(p, target) {
                Ok(t) => pairs.push(t),
                Err(o) => return report(bundle, o, started),
            }
        }
    }
    let quiescent: Vec<(String, FnId)> = bundle
        .manifest
        .runtime_checks
        .iter()
        .filter_map(|c| match c {
            RuntimeCheck::Quiescence(f) => p.function_id(f).map(|id| (f.clone(), id)),
            _ => None,
        })
        .collect();

    // Install.
    let instance = p.next_instance();
    let installed = match p.install(&bundle.program(), Some(id)) {
        Ok(i) => i,
        Err(e) => return report(bundle, Outcome::Rejected(e.to_string()), started),
    };
    let mut txn = Txn {
        p,
        woven: WovenBundle {
            instance,
            installed,
            sites: Vec::new(),
            redirects: Vec::new(),
            retags: Vec::new(),
            shadows: Vec::new(),
            substitutions: HashMap::new(),
            directives: Vec::new(),
        },
    };
    let owner = txn.woven_owner();
    for s in &bundle.shadow_fields {
        if let Err(e) = p.declare_shadow(&s.strukt, &s.field, s.ty, shadow_default(&s.default), &owner) {
            txn.rollback();
            return report(bundle, Outcome::Rejected(e), started);
        }
        txn.woven.shadows.push((s.strukt.clone(), s.field.clone()));
    }

    // Rewrite.
    for d in &bundle.directives {
        let sites = match d {
            Directive::RedirectCalls { target, replacement, .. } | Directive::SubstitutePointer { target, replacement, .. } => {
                let (t, r) = match (fn_id(p, target), fn_id(p, replacement)) {
                    (Ok(t), Ok(r)) => (t, r),
                    (Err(o), _) | (_, Err(o)) => {
                        txn.rollback();
                        return report(bundle, o, started);
                    }
                };
                if matches!(d, Directive::RedirectCalls { .. }) {
                    txn.rewrite_sites(SiteKind::Call, target, id, Operand::Fn(r), cp)
                } else {
                    txn.woven.substitutions.insert(r, t);
                    let previous = p.ptr_redirect(t);
                    let original = previous.unwrap_or(Operand::Fn(t));
                    let tramp = Operand::Tramp(p.add_tramp(Trampoline { instance, original, replacement: Operand::Fn(r) }));
                    if p.cas_ptr_redirect(t, previous, Some(tramp)) {
                        txn.woven.redirects.push(RedirectRewrite { func: t, previous, tramp, current: tramp });
                    }
                    txn.rewrite_sites(SiteKind::LoadFn, target, id, Operand::Fn(r), cp)
                }
            }
            Directive::RetypeReads { global, to, .. } | Directive::RetypeWrites { global, to, .. } => {
                let addr = p.global_addr(global).expect("checked above");
                let kind = if matches!(d, Directive::RetypeReads { .. }) { SiteKind::LoadG } else { SiteKind::StoreG };
                txn.rewrite_sites(kind, global, id, Operand::Global { addr, ty: CellTy::Scalar(*to) }, cp)
            }
        };
        txn.woven.directives.push(DirectiveSites { aspect: d.aspect().to_string(), sites });
    }

    // Wait, then activate with executors held.
    let wait_start = cp.now_us(p);
    let activated_at = loop {
        if opts.wait_for_quiescence {
            for (f, _) in &quiescent {
                let left = opts.quiescence_timeout_us.saturating_sub(cp.now_us(p).saturating_sub(wait_start));
                if !await_quiescence(p, f, left, cp) {
                    txn.rollback();
                    let mut r = report(bundle, Outcome::TimedOutQuiescent(f.clone()), started);
                    r.quiescence_wait_us = cp.now_us(p).saturating_sub(wait_start);
                    return r;
                }
            }
        }
        let paused = p.pause_executors();
        if opts.wait_for_quiescence && quiescent.iter().any(|(_, id)| paused.stack_contains_id(*id)) {
            drop(paused);
            cp.yield_now(p);
            continue;
        }
        if let Some(o) = failed_value_check(p, bundle, &retypes) {
            drop(paused);
            txn.rollback();
            return report(bundle, o, started);
        }
        for (_, addr, from, to) in &retypes {
            p.retag_cell(*addr, CellTy::Scalar(*to)).expect("checked cell");
            txn.woven.retags.push((*addr, CellTy::Scalar(*from), CellTy::Scalar(*to)));
        }
        p.set_guard(instance, true);
        let at = cp.now_us(p);
        drop(paused);
        break at;
    };
    let quiescence_wait_us = activated_at.saturating_sub(wait_start);

    if opts.collapse {
        collapse(p, &mut txn.woven, opts.quiescence_timeout_us, cp);
    }

    let woven = txn.woven;
    let rep = WeaveReport {
        bundle_id: id.to_string(),
        outcome: Outcome::Woven,
        sites_rewritten: woven.sites.len(),
        directives: woven.directives.clone(),
        elapsed_us: started.elapsed().as_micros() as u64,
        quiescence_wait_us,
        activated_at: Some(activated_at),
    };
    p.woven.lock().insert(id.to_string(), woven);
    rep
}

/// Once no request in flight predates activation, point sites straight at
/// their replacements. Gives up quietly at the timeout.
fn collapse(p: &TargetProcess, w: &mut WovenBundle, timeout_us: u64, cp: &mut dyn Checkpoint) {
    let start = cp.now_us(p);
    loop {
        let paused = p.pause_executors();
        if !paused.any_view_lacks(w.instance) {
            for r in &mut w.sites {
                let Operand::Tramp(t) = r.tramp else { continue };
                let to = p.tramp(t).expect("own trampoline").replacement;
                if p.cas_site(r.site, r.current, to).expect("site exists") {
                    r.current = to;
                }
            }
            for r in &mut w.redirects {
                let Operand::Tramp(t) = r.tramp else { continue };
                let to = p.tramp(t).expect("own trampoline").replacement;
                if p.cas_ptr_redirect(r.func, Some(r.current), Some(to)) {
                    r.current = to;
                }
            }
            return;
        }
        drop(paused);
        if cp.now_us(p).saturating_sub(start) >= timeout_us {
            return;
        }
        cp.yield_now(p);
    }
}

/// Take a woven bundle out. The guard is cleared first; code is restored
/// once no request in flight can still reach the replacements. If that
/// does not happen within `timeout_us` the bundle stays woven and the
/// outcome is `TimedOutQuiescent`.
pub fn unweave(p: &TargetProcess, bundle_id: &str, timeout_us: u64, cp: &mut dyn Checkpoint) -> Result<WeaveReport, WeaveError> {
    let started = Instant::now();
    let _one_at_a_time = p.weave_lock.lock();
    let mut w = p.woven.lock().remove(bundle_id).ok_or_else(|| WeaveError::UnknownBundle(bundle_id.to_string()))?;
    let mut rep = WeaveReport {
        bundle_id: bundle_id.to_string(),
        outcome: Outcome::Unwoven,
        sites_rewritten: 0,
        directives: w.directives.clone(),
        elapsed_us: 0,
        quiescence_wait_us: 0,
        activated_at: None,
    };

    // Collapsed sites bypass the guard; put the trampolines back first.
    for r in &mut w.sites {
        if r.current != r.tramp && p.cas_site(r.site, r.current, r.tramp).expect("site exists") {
            r.current = r.tramp;
        }
    }
    for r in &mut w.redirects {
        if r.current != r.tramp && p.cas_ptr_redirect(r.func, Some(r.current), Some(r.tramp)) {
            r.current = r.tramp;
        }
    }
    {
        let _paused = p.pause_executors();
        p.set_guard(w.instance, false);
    }
    let start = cp.now_us(p);
    while p.any_view_contains(w.instance) {
        if cp.now_us(p).saturating_sub(start) >= timeout_us {
            p.set_guard(w.instance, true);
            rep.outcome = Outcome::TimedOutQuiescent(bundle_id.to_string());
            rep.quiescence_wait_us = cp.now_us(p).saturating_sub(start);
            rep.elapsed_us = started.elapsed().as_micros() as u64;
            p.woven.lock().insert(bundle_id.to_string(), w);
            return Ok(rep);
        }
        cp.yield_now(p);
    }
    rep.quiescence_wait_us = cp.now_us(p).saturating_sub(start);

    {
        let _paused = p.pause_executors();
        for r in w.sites.iter().rev() {
            // A site another bundle has since rewritten keeps our
            // trampoline in its chain; with the guard off it falls through.
            if p.cas_site(r.site, r.current, r.previous).expect("site exists") {
                rep.sites_rewritten += 1;
            }
        }
        for r in w.redirects.iter().rev() {
            p.cas_ptr_redirect(r.func, Some(r.current), r.previous);
        }
        p.remap_fn_values(&w.substitutions);
        for (addr, from, _) in w.retags.iter().rev() {
            // Values outside the old type wrap.
            let _ = p.retag_cell(*addr, *from);
        }
        p.uninstall(&w.installed);
    }
    let owner = format!("weave#{}", w.instance);
    for (s, f) in &w.shadows {
        p.release_shadow(s, f, &owner);
    }
    rep.elapsed_us = started.elapsed().as_micros() as u64;
    Ok(rep)
}

/// Reports of every directive site, keyed by aspect, for a woven bundle.
pub fn woven_sites(p: &TargetProcess, bundle_id: &str) -> Option<BTreeMap<String, Vec<SiteId>>> {
    let w = p.woven.lock();
    let b = w.get(bundle_id)?;
    Some(b.directives.iter().map(|d| (d.aspect.clone(), d.sites.clone())).collect())
}
