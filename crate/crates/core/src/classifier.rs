//! Applicability verdicts and update strategies for raw changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::csubset::print;
use crate::csubset::{CType, Expr, FunctionDef, RawChange, ScalarType, Stmt, TranslationUnit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChangeKind {
    FunctionBodyChanged,
    FunctionSignatureChanged,
    FunctionAdded,
    FunctionRemoved,
    GlobalTypeChanged,
    GlobalInitializerChanged,
    GlobalAdded,
    GlobalRemoved,
    StructAdded,
    StructRemoved,
    StructFieldAdded,
    StructFieldRemoved,
    StructFieldReordered,
    StructFieldRetyped,
}

impl ChangeKind {
    fn of(raw: &RawChange) -> ChangeKind {
        use RawChange as R;
        match raw {
            R::FunctionAdded { .. } => ChangeKind::FunctionAdded,
            R::FunctionRemoved { .. } => ChangeKind::FunctionRemoved,
            R::FunctionBodyChanged { .. } => ChangeKind::FunctionBodyChanged,
            R::FunctionSignatureChanged { .. } => ChangeKind::FunctionSignatureChanged,
            R::GlobalTypeChanged { .. } => ChangeKind::GlobalTypeChanged,
            R::GlobalInitializerChanged { .. } => ChangeKind::GlobalInitializerChanged,
            R::GlobalAdded { .. } => ChangeKind::GlobalAdded,
            R::GlobalRemoved { .. } => ChangeKind::GlobalRemoved,
            R::StructAdded { .. } => ChangeKind::StructAdded,
            R::StructRemoved { .. } => ChangeKind::StructRemoved,
            R::StructFieldAdded { .. } => ChangeKind::StructFieldAdded,
            R::StructFieldRemoved { .. } => ChangeKind::StructFieldRemoved,
            R::StructFieldReordered { .. } => ChangeKind::StructFieldReordered,
            R::StructFieldRetyped { .. } => ChangeKind::StructFieldRetyped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeCheck {
    /// No frame of the function may be live when the patch activates.
    Quiescence(String),
    /// The live value of the global must be representable in `ty`.
    ValueFits { global: String, ty: ScalarType },
}

impl fmt::Display for RuntimeCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuntimeCheck::Quiescence(s) => write!(f, "quiescence({s})"),
            RuntimeCheck::ValueFits { global, ty } => write!(f, "fits({global}, {ty})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    DynamicallyApplicable,
    ConditionallyApplicable(Vec<RuntimeCheck>),
    StaticOnly(String),
}

impl Verdict {
    pub fn is_dynamic(&self) -> bool {
        !matches!(self, Verdict::StaticOnly(_))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::DynamicallyApplicable => write!(f, "dynamic"),
            Verdict::ConditionallyApplicable(checks) => {
                let c: Vec<String> = checks.iter().map(ToString::to_string).collect();
                write!(f, "conditional [{}]", c.join(", "))
            }
            Verdict::StaticOnly(r) => write!(f, "static-only ({r})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Widening,
    Narrowing,
    NumericClassChange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeChangePlan {
    pub old: ScalarType,
    pub new: ScalarType,
    pub direction: Direction,
    pub needs_value_check: bool,
    /// Named conversion rule; none are defined, the value check is the only
    /// mechanism for lossy changes.
    pub conversion: Option<String>,
}

impl TypeChangePlan {
    /// `None` when the types are equal.
    pub fn between(old: ScalarType, new: ScalarType) -> Option<TypeChangePlan> {
        if old == new {
            return None;
        }
        let direction = if old.class() != new.class() {
            Direction::NumericClassChange
        } else if new.width() >= old.width() {
            Direction::Widening
        } else {
            Direction::Narrowing
        };
        Some(TypeChangePlan { old, new, direction, needs_value_check: direction != Direction::Widening, conversion: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyingRule {
    /// Shadow slots are keyed by the address of the struct instance.
    InstanceAddress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowFieldPlan {
    pub strukt: String,
    pub field: String,
    pub ty: ScalarType,
    /// Value observed before the first store for an instance.
    pub default: Expr,
    pub keying: KeyingRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Redirect calls and address reads of `old_name` to `new_name`.
    ReplaceFunction,
    /// Install the new version under `new_name`; only modified callers reach it.
    TreatAsNewFunction,
    RetypeGlobal(TypeChangePlan),
    /// The bundle defines the global.
    DefineGlobal,
    /// The struct only exists in the patch's view of the program.
    DeclareStruct,
    ShadowField(ShadowFieldPlan),
    /// Nothing to do at runtime: the old entity stays in place, unreferenced.
    Retain,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedChange {
    pub kind: ChangeKind,
    pub old_name: String,
    /// Replacement symbol for function changes (`f_new`).
    pub new_name: Option<String>,
    pub strategy: Strategy,
    pub verdict: Verdict,
    pub required_runtime_checks: Vec<RuntimeCheck>,
    /// Added functions installed alongside this change.
    pub folded_additions: Vec<String>,
    /// Removed functions whose last reference this change drops.
    pub folded_removals: Vec<String>,
    /// Every raw change this item accounts for.
    pub sources: Vec<RawChange>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticChangeSet {
    pub items: Vec<ClassifiedChange>,
}

impl SemanticChangeSet {
    pub fn all_dynamic(&self) -> bool {
        self.items.iter().all(|c| c.verdict.is_dynamic())
    }

    pub fn static_only(&self) -> impl Iterator<Item = &ClassifiedChange> {
        self.items.iter().filter(|c| !c.verdict.is_dynamic())
    }

    /// `old_name -> new_name` for every function given a replacement.
    pub fn renames(&self) -> BTreeMap<String, String> {
        self.items.iter().filter_map(|c| c.new_name.as_ref().map(|n| (c.old_name.clone(), n.clone()))).collect()
    }

    /// Machine-readable verdict list.
    pub fn verdict_listing(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            kind: ChangeKind,
            old_name: &'a str,
            new_name: &'a Option<String>,
            verdict: String,
            checks: Vec<String>,
            folded_additions: &'a [String],
            folded_removals: &'a [String],
        }
        let rows: Vec<Row> = self
            .items
            .iter()
            .map(|c| Row {
                kind: c.kind,
                old_name: &c.old_name,
                new_name: &c.new_name,
                verdict: c.verdict.to_string(),
                checks: c.required_runtime_checks.iter().map(ToString::to_string).collect(),
                folded_additions: &c.folded_additions,
                folded_removals: &c.folded_removals,
            })
            .collect();
        crate::canon::to_canonical_pretty(&rows)
    }
}

pub const LAYOUT_REASON: &str = "layout change requires stopped program";
pub const UNREACHABLE_REASON: &str = "unreachable addition";

/// Pick `f_new`, then `f_new2`, `f_new3`... avoiding every name in `taken`.
pub fn replacement_name(old: &str, taken: &BTreeSet<String>) -> String {
    let base = format!("{old}_new");
    if !taken.contains(&base) {
        return base;
    }
    (2..).map(|i| format!("{base}{i}")).find(|n| !taken.contains(n)).expect("unbounded")
}

fn unit_names(u: &TranslationUnit) -> impl Iterator<Item = String> + '_ {
    u.functions.iter().map(|f| f.name.clone()).chain(u.globals.iter().map(|g| g.name.clone())).chain(u.externs.iter().map(|e| e.name().to_string()))
}

/// Functions and globals a function body refers to, locals excluded.
pub fn references(f: &FunctionDef, unit: &TranslationUnit) -> BTreeSet<String> {
    let locals = f.local_names();
    f.referenced_names()
        .into_iter()
        .filter(|n| !locals.contains(n))
        .filter(|n| unit.signature_of(n).is_some() || unit.global_type(n).is_some())
        .map(str::to_string)
        .collect()
}

pub fn classify(changes: &[RawChange], old: &TranslationUnit, new: &TranslationUnit) -> SemanticChangeSet {
    let mut taken: BTreeSet<String> = unit_names(old).chain(unit_names(new)).collect();
    let mut items: Vec<ClassifiedChange> = Vec::new();

    let modified: BTreeSet<&str> = changes
        .iter()
        .filter_map(|c| match c {
            RawChange::FunctionBodyChanged { name } | RawChange::FunctionSignatureChanged { name, .. } => Some(name.as_str()),
            _ => None,
        })
        .collect();
    let added: BTreeSet<&str> = changes
        .iter()
        .filter_map(|c| match c {
            RawChange::FunctionAdded { name } => Some(name.as_str()),
            _ => None,
        })
        .collect();

    // An added function belongs to the first modified function that reaches
    // it through references in the new unit, possibly via other additions.
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    for m in changes.iter().filter_map(|c| match c {
        RawChange::FunctionBodyChanged { name } | RawChange::FunctionSignatureChanged { name, .. } => Some(name),
        _ => None,
    }) {
        let mut stack = vec![m.clone()];
        let mut seen = BTreeSet::new();
        while let Some(cur) = stack.pop() {
            let Some(f) = new.function(&cur) else { continue };
            for r in references(f, new) {
                if added.contains(r.as_str()) && seen.insert(r.clone()) {
                    owner.entry(r.clone()).or_insert_with(|| m.clone());
                    stack.push(r);
                }
            }
        }
    }
    // A removed function belongs to the first modified function that
    // referenced it in the old unit.
    let mut removal_owner: BTreeMap<String, String> = BTreeMap::new();
    for c in changes {
        if let RawChange::FunctionRemoved { name } = c {
            let by = old.functions.iter().filter(|f| modified.contains(f.name.as_str())).find(|f| references(f, old).contains(name));
            if let Some(by) = by {
                removal_owner.insert(name.clone(), by.name.clone());
            }
        }
    }

    let item = |kind, old_name: &str, strategy, verdict: Verdict, raw: &RawChange| {
        let required_runtime_checks = match &verdict {
            Verdict::ConditionallyApplicable(c) => c.clone(),
            _ => Vec::new(),
        };
        ClassifiedChange {
            kind,
            old_name: old_name.to_string(),
            new_name: None,
            strategy,
            verdict,
            required_runtime_checks,
            folded_additions: Vec::new(),
            folded_removals: Vec::new(),
            sources: vec![raw.clone()],
        }
    };

    for raw in changes {
        let kind = ChangeKind::of(raw);
        let name = raw.subject();
        let c = match raw {
            RawChange::FunctionBodyChanged { .. } => {
                let new_name = replacement_name(name, &taken);
                taken.insert(new_name.clone());
                let checks = vec![RuntimeCheck::Quiescence(name.to_string())];
                let mut c = item(kind, name, Strategy::ReplaceFunction, Verdict::ConditionallyApplicable(checks), raw);
                c.new_name = Some(new_name);
                c
            }
            RawChange::FunctionSignatureChanged { old: old_sig, new: new_sig, .. } => {
                let new_name = replacement_name(name, &taken);
                taken.insert(new_name.clone());
                let unmodified_refs: Vec<&str> = new
                    .functions
                    .iter()
                    .filter(|f| f.name != name && references(f, new).contains(name))
                    .filter(|f| !modified.contains(f.name.as_str()) && !added.contains(f.name.as_str()))
                    .map(|f| f.name.as_str())
                    .collect();
                let global_refs = new.globals.iter().any(|g| initializer_mentions(g, name));
                let verdict = if old_sig.variadic || new_sig.variadic {
                    Verdict::StaticOnly("signature change of a variadic function".into())
                } else if !unmodified_refs.is_empty() {
                    Verdict::StaticOnly(format!("callers not modified: {}", unmodified_refs.join(", ")))
                } else if global_refs {
                    Verdict::StaticOnly("address stored in a global initializer".into())
                } else {
                    Verdict::DynamicallyApplicable
                };
                let mut c = item(kind, name, Strategy::TreatAsNewFunction, verdict, raw);
                c.new_name = Some(new_name);
                c
            }
            RawChange::FunctionAdded { .. } => {
                if owner.contains_key(name) {
                    continue;
                }
                item(kind, name, Strategy::None, Verdict::StaticOnly(UNREACHABLE_REASON.into()), raw)
            }
            RawChange::FunctionRemoved { .. } => {
                if removal_owner.contains_key(name) {
                    continue;
                }
                item(kind, name, Strategy::Retain, Verdict::DynamicallyApplicable, raw)
            }
            RawChange::GlobalTypeChanged { old: ot, new: nt, .. } => match (ot, nt) {
                (CType::Scalar(o), CType::Scalar(n)) => {
                    let plan = TypeChangePlan::between(*o, *n).expect("types differ");
                    let verdict = if plan.needs_value_check {
                        Verdict::ConditionallyApplicable(vec![RuntimeCheck::ValueFits { global: name.into(), ty: *n }])
                    } else {
                        Verdict::DynamicallyApplicable
                    };
                    item(kind, name, Strategy::RetypeGlobal(plan), verdict, raw)
                }
                _ => item(kind, name, Strategy::None, Verdict::StaticOnly("non-scalar global type change".into()), raw),
            },
            RawChange::GlobalInitializerChanged { .. } => {
                item(kind, name, Strategy::None, Verdict::StaticOnly("initializer change cannot reach a running process".into()), raw)
            }
            RawChange::GlobalAdded { .. } => item(kind, name, Strategy::DefineGlobal, Verdict::DynamicallyApplicable, raw),
            RawChange::GlobalRemoved { .. } => item(kind, name, Strategy::Retain, Verdict::DynamicallyApplicable, raw),
            RawChange::StructAdded { .. } => item(kind, name, Strategy::DeclareStruct, Verdict::DynamicallyApplicable, raw),
            RawChange::StructRemoved { .. } => item(kind, name, Strategy::Retain, Verdict::DynamicallyApplicable, raw),
            RawChange::StructFieldAdded { strukt, field, ty } => {
                let default = if ty.is_float() { Expr::Float(0.0) } else { Expr::Int(0) };
                let plan = ShadowFieldPlan { strukt: strukt.clone(), field: field.clone(), ty: *ty, default, keying: KeyingRule::InstanceAddress };
                let mut c = item(kind, strukt, Strategy::ShadowField(plan), Verdict::DynamicallyApplicable, raw);
                c.old_name = format!("{strukt}.{field}");
                c
            }
            RawChange::StructFieldRemoved { field, .. } | RawChange::StructFieldRetyped { field, .. } => {
                let mut c = item(kind, name, Strategy::None, Verdict::StaticOnly(LAYOUT_REASON.into()), raw);
                c.old_name = format!("{name}.{field}");
                c
            }
            RawChange::StructFieldReordered { .. } => item(kind, name, Strategy::None, Verdict::StaticOnly(LAYOUT_REASON.into()), raw),
        };
        items.push(c);
    }

    for (f, m) in &owner {
        let c = items.iter_mut().find(|c| c.old_name == *m && c.new_name.is_some()).expect("owner item");
        c.folded_additions.push(f.clone());
        c.sources.push(RawChange::FunctionAdded { name: f.clone() });
    }
    for (f, m) in &removal_owner {
        let c = items.iter_mut().find(|c| c.old_name == *m && c.new_name.is_some()).expect("owner item");
        c.folded_removals.push(f.clone());
        c.sources.push(RawChange::FunctionRemoved { name: f.clone() });
    }
    // Order folded names by their position in the unit, for stable output.
    for c in &mut items {
        c.folded_additions.sort_by_key(|n| new.functions.iter().position(|f| f.name == *n));
    }
    SemanticChangeSet { items }
}

fn initializer_mentions(g: &crate::csubset::GlobalVar, name: &str) -> bool {
    use crate::csubset::Initializer;
    let mut found = false;
    let mut check = |e: &Expr| {
        e.walk(&mut |x| {
            if matches!(x, Expr::Var(n) if n == name) {
                found = true;
            }
        })
    };
    match &g.init {
        Some(Initializer::Scalar(e)) => check(e),
        Some(Initializer::Aggregate(es)) => es.iter().for_each(&mut check),
        None => {}
    }
    found
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub function: String,
    pub global: String,
    pub message: String,
}

/// Globals read and written by a statement list, locals excluded.
#[derive(Debug, Default)]
struct Access {
    reads: BTreeSet<String>,
    writes: BTreeSet<String>,
    calls: BTreeSet<String>,
}

fn expr_access(e: &Expr, locals: &BTreeSet<&str>, unit: &TranslationUnit, acc: &mut Access) {
    let is_global = |n: &str| !locals.contains(n) && unit.global_type(n).is_some();
    match e {
        Expr::Var(n) => {
            if is_global(n) {
                acc.reads.insert(n.clone());
            } else if !locals.contains(n.as_str()) && unit.signature_of(n).is_some() {
                acc.calls.insert(n.clone());
            }
        }
        Expr::Assign { op, target, value } => {
            lvalue_access(target, op.is_some(), locals, unit, acc);
            expr_access(value, locals, unit, acc);
        }
        Expr::IncDec { target, .. } => lvalue_access(target, true, locals, unit, acc),
        Expr::Unary { operand, .. } => expr_access(operand, locals, unit, acc),
        Expr::Binary { lhs, rhs, .. } => {
            expr_access(lhs, locals, unit, acc);
            expr_access(rhs, locals, unit, acc);
        }
        Expr::Call { callee, args } => {
            expr_access(callee, locals, unit, acc);
            for a in args {
                expr_access(a, locals, unit, acc);
            }
        }
        Expr::Member { base, .. } => expr_access(base, locals, unit, acc),
        Expr::AddrOf(inner) => {
            // Taking a struct global's address lets the callee read or
            // write it; count both.
            if let Expr::Var(n) = &**inner {
                if is_global(n) {
                    acc.reads.insert(n.clone());
                    acc.writes.insert(n.clone());
                    return;
                }
            }
            expr_access(inner, locals, unit, acc)
        }
        Expr::Int(_) | Expr::Float(_) | Expr::Str(_) => {}
    }
}

fn lvalue_access(target: &Expr, also_reads: bool, locals: &BTreeSet<&str>, unit: &TranslationUnit, acc: &mut Access) {
    match target {
        Expr::Var(n) if !locals.contains(n.as_str()) && unit.global_type(n).is_some() => {
            acc.writes.insert(n.clone());
            if also_reads {
                acc.reads.insert(n.clone());
            }
        }
        Expr::Member { base, .. } => match &**base {
            Expr::Var(n) if !locals.contains(n.as_str()) && unit.global_type(n).is_some() => {
                acc.writes.insert(n.clone());
                if also_reads {
                    acc.reads.insert(n.clone());
                }
            }
            other => expr_access(other, locals, unit, acc),
        },
        other => expr_access(other, locals, unit, acc),
    }
}

/// One entry per simple statement or control header, in source order.
fn flatten(stmts: &[Stmt], out: &mut Vec<(String, Vec<Expr>)>) {
    for s in stmts {
        match s {
            Stmt::If { cond, then_branch, else_branch } => {
                out.push((format!("if ({})", print::expr(cond)), vec![cond.clone()]));
                flatten(then_branch, out);
                if let Some(b) = else_branch {
                    out.push(("else".into(), vec![]));
                    flatten(b, out);
                }
                out.push(("end if".into(), vec![]));
            }
            Stmt::While { cond, body } => {
                out.push((format!("while ({})", print::expr(cond)), vec![cond.clone()]));
                flatten(body, out);
                out.push(("end while".into(), vec![]));
            }
            Stmt::Block(b) => flatten(b, out),
            other => {
                let mut text = String::new();
                print::stmt(&mut text, other, 0);
                let exprs = match other {
                    Stmt::Decl { init: Some(e), .. } | Stmt::Expr(e) | Stmt::Return(Some(e)) => vec![e.clone()],
                    _ => vec![],
                };
                out.push((text.trim().to_string(), exprs));
            }
        }
    }
}

/// Indices of `b` not matched by a longest common subsequence with `a`.
fn unmatched<T: PartialEq>(a: &[T], b: &[T]) -> Vec<usize> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if a[i] == b[j] { dp[i + 1][j + 1] + 1 } else { dp[i + 1][j].max(dp[i][j + 1]) };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while j < m {
        if i < n && a[i] == b[j] {
            i += 1;
            j += 1;
        } else if i < n && dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            out.push(j);
            j += 1;
        }
    }
    out
}

/// Globals a function touches, following direct callees defined in `unit`.
fn transitive_access(root: &FunctionDef, unit: &TranslationUnit) -> Access {
    let mut total = Access::default();
    let mut seen = BTreeSet::new();
    let mut stack = vec![root.name.clone()];
    while let Some(name) = stack.pop() {
        if !seen.insert(name.clone()) {
            continue;
        }
        let Some(f) = unit.function(&name) else { continue };
        let locals = f.local_names();
        let mut acc = Access::default();
        let mut flat = Vec::new();
        flatten(&f.body, &mut flat);
        for (_, exprs) in &flat {
            for e in exprs {
                expr_access(e, &locals, unit, &mut acc);
            }
        }
        total.reads.extend(acc.reads);
        total.writes.extend(acc.writes);
        stack.extend(acc.calls.iter().cloned());
        total.calls.extend(acc.calls);
    }
    total
}

/// Conservative stale-read check: warn for each global read by statements
/// that `f′` adds (directly or through functions they call) and that the
/// old `f` writes (directly or through its callees).
pub fn check_stale_reads(change: &ClassifiedChange, old: &TranslationUnit, new: &TranslationUnit) -> Vec<Warning> {
    if change.kind != ChangeKind::FunctionBodyChanged {
        return Vec::new();
    }
    let (Some(f_old), Some(f_new)) = (old.function(&change.old_name), new.function(&change.old_name)) else {
        return Vec::new();
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    flatten(&f_old.body, &mut a);
    flatten(&f_new.body, &mut b);
    let a_text: Vec<&String> = a.iter().map(|(t, _)| t).collect();
    let b_text: Vec<&String> = b.iter().map(|(t, _)| t).collect();

    let locals = f_new.local_names();
    let mut added = Access::default();
    for j in unmatched(&a_text, &b_text) {
        for e in &b[j].1 {
            expr_access(e, &locals, new, &mut added);
        }
    }
    let mut reads = added.reads.clone();
    for callee in &added.calls {
        if let Some(g) = new.function(callee) {
            reads.extend(transitive_access(g, new).reads);
        }
    }
    let written = transitive_access(f_old, old).writes;
    reads
        .intersection(&written)
        .map(|g| Warning {
            function: change.old_name.clone(),
            global: g.clone(),
            message: format!("added code in {} reads {g}, which {} writes", change.new_name.as_deref().unwrap_or("f'"), change.old_name),
        })
        .collect()
}
