use std::collections::BTreeSet;

use super::{aspect_name, Action, Aspect, DynamicPatch, PatchError, Pointcut, ShadowSpec, ValueExpr, ValueSource};
use crate::classifier::{SemanticChangeSet, Strategy};
use crate::csubset::{CType, Expr, ExternDecl, FunctionDef, Initializer, Signature, Stmt, TranslationUnit};

/// Build the dynamic patch for a fully dynamic change set. `new` is the
/// patched unit the replacement bodies come from.
pub fn generate(cs: &SemanticChangeSet, new: &TranslationUnit) -> Result<DynamicPatch, PatchError> {
    if let Some(c) = cs.static_only().next() {
        let reason = match &c.verdict {
            crate::classifier::Verdict::StaticOnly(r) => r.clone(),
            v => v.to_string(),
        };
        return Err(PatchError::StaticOnly { change: format!("{:?} {}", c.kind, c.old_name), reason });
    }
    let stem = new.file.rsplit('/').next().unwrap_or(&new.file);
    let stem = stem.split('.').next().unwrap_or(stem);
    let mut patch = DynamicPatch {
        id: if stem.is_empty() { "patch".into() } else { stem.to_string() },
        description: format!("dynamic patch for {}", new.file),
        ..Default::default()
    };

    let missing = |n: &str| PatchError::Generate(format!("'{n}' is missing from the patched unit"));
    let mut shadowed: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut defined_globals: BTreeSet<&str> = BTreeSet::new();
    let mut targets: Vec<String> = Vec::new();
    for c in &cs.items {
        match &c.strategy {
            Strategy::ReplaceFunction | Strategy::TreatAsNewFunction => {
                let new_name = c.new_name.clone().ok_or_else(|| PatchError::Generate(format!("{} has no replacement name", c.old_name)))?;
                let mut f = new.function(&c.old_name).ok_or_else(|| missing(&c.old_name))?.clone();
                f.name = new_name.clone();
                f.is_static = false;
                patch.replacement_functions.push(f);
                for a in &c.folded_additions {
                    let mut f = new.function(a).ok_or_else(|| missing(a))?.clone();
                    f.is_static = false;
                    patch.replacement_functions.push(f);
                }
                if c.strategy == Strategy::ReplaceFunction {
                    targets.push(c.old_name.clone());
                    patch.aspects.push(Aspect {
                        name: aspect_name("ReplaceFunctionCall", &c.old_name),
                        pointcut: Pointcut::CallSite(c.old_name.clone()),
                        action: Action::RedirectCall(new_name.clone()),
                    });
                    patch.aspects.push(Aspect {
                        name: aspect_name("ReplacePointer", &c.old_name),
                        pointcut: Pointcut::PointerRead(c.old_name.clone()),
                        action: Action::SubstituteAddress(new_name),
                    });
                }
            }
            Strategy::RetypeGlobal(plan) => {
                targets.push(c.old_name.clone());
                patch.aspects.push(Aspect {
                    name: aspect_name("RetypeRead", &c.old_name),
                    pointcut: Pointcut::GlobalRead(c.old_name.clone()),
                    action: Action::SubstituteValue(ValueExpr::Convert { of: ValueSource::Original, ty: plan.new }),
                });
                patch.aspects.push(Aspect {
                    name: aspect_name("RetypeWrite", &c.old_name),
                    pointcut: Pointcut::GlobalWrite(c.old_name.clone()),
                    action: Action::SubstituteValue(ValueExpr::Convert { of: ValueSource::Assigned, ty: plan.new }),
                });
            }
            Strategy::DefineGlobal => {
                let mut g = new.global(&c.old_name).ok_or_else(|| missing(&c.old_name))?.clone();
                g.is_static = false;
                patch.globals.push(g);
                defined_globals.insert(&c.old_name);
            }
            Strategy::ShadowField(plan) => {
                shadowed.insert((&plan.strukt, &plan.field));
                patch.shadow_fields.push(ShadowSpec {
                    strukt: plan.strukt.clone(),
                    field: plan.field.clone(),
                    ty: plan.ty,
                    default: plan.default.clone(),
                });
            }
            Strategy::DeclareStruct | Strategy::Retain | Strategy::None => {}
        }
        for check in &c.required_runtime_checks {
            if !patch.checks.contains(check) {
                patch.checks.push(check.clone());
            }
        }
    }

    let renames = cs.renames();
    for f in &mut patch.replacement_functions {
        for (old, new_name) in &renames {
            f.rename_references(old, new_name);
        }
    }

    let mut used: BTreeSet<String> = cs.items.iter().filter(|c| c.strategy == Strategy::DeclareStruct).map(|c| c.old_name.clone()).collect();
    used.extend(patch.shadow_fields.iter().map(|s| s.strukt.clone()));
    for f in &patch.replacement_functions {
        struct_refs_fn(f, &mut used);
    }
    for g in &patch.globals {
        struct_ref(&g.ty, &mut used);
    }

    // Target symbols: pointcut targets first, then whatever the patch code
    // reaches, in order of first reference.
    let patch_fns: Vec<String> = patch.replacement_functions.iter().map(|f| f.name.clone()).collect();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut declare = |name: &str, patch: &mut DynamicPatch| {
        if patch_fns.iter().any(|n| n == name) || defined_globals.contains(name) || !seen.insert(name.to_string()) {
            return;
        }
        if let Some(sig) = new.signature_of(name) {
            patch.externs.push(ExternDecl::Function { name: name.to_string(), signature: sig.clone() });
        } else if let Some(ty) = new.global_type(name) {
            patch.externs.push(ExternDecl::Global { name: name.to_string(), ty: ty.clone() });
        }
    };
    for t in &targets {
        declare(t, &mut patch);
    }
    let mut global_refs: Vec<Vec<String>> = Vec::new();
    for g in &patch.globals {
        let mut names = Vec::new();
        let mut visit = |e: &Expr| {
            e.walk(&mut |x| {
                if let Expr::Var(n) = x {
                    names.push(n.clone());
                }
            })
        };
        match &g.init {
            Some(Initializer::Scalar(e)) => visit(e),
            Some(Initializer::Aggregate(es)) => es.iter().for_each(&mut visit),
            None => {}
        }
        global_refs.push(names);
    }
    let fn_refs: Vec<Vec<String>> = patch.replacement_functions.iter().map(symbol_refs).collect();
    for n in global_refs.iter().chain(&fn_refs).flatten() {
        declare(n, &mut patch);
    }

    // Prototypes for patch functions used before their definition.
    let mut protos: Vec<String> = Vec::new();
    for n in global_refs.iter().flatten() {
        if patch_fns.contains(n) && !protos.contains(n) {
            protos.push(n.clone());
        }
    }
    for (i, refs) in fn_refs.iter().enumerate() {
        for n in refs {
            if let Some(j) = patch_fns.iter().position(|p| p == n) {
                if j > i && !protos.contains(n) {
                    protos.push(n.clone());
                }
            }
        }
    }
    for n in protos {
        let f = patch.function(&n).expect("patch function");
        let d = ExternDecl::Function { name: n, signature: f.signature.clone() };
        patch.externs.push(d);
    }

    for e in &patch.externs {
        match e {
            ExternDecl::Global { ty, .. } => struct_ref(ty, &mut used),
            ExternDecl::Function { signature, .. } => struct_refs_sig(signature, &mut used),
        }
    }
    for s in new.structs.iter().filter(|s| used.contains(&s.name)) {
        let mut s = s.clone();
        s.fields.retain(|f| !shadowed.contains(&(s.name.as_str(), f.name.as_str())));
        patch.structs.push(s);
    }

    patch.validate()?;
    Ok(patch)
}

fn struct_ref(t: &CType, out: &mut BTreeSet<String>) {
    match t {
        CType::Struct(s) | CType::StructPtr(s) => {
            out.insert(s.clone());
        }
        CType::FnPtr(sig) => struct_refs_sig(sig, out),
        CType::Scalar(_) => {}
    }
}

fn struct_refs_sig(sig: &Signature, out: &mut BTreeSet<String>) {
    for t in sig.params.iter().chain(&sig.ret) {
        struct_ref(t, out);
    }
}

fn struct_refs_fn(f: &FunctionDef, out: &mut BTreeSet<String>) {
    fn stmts(body: &[Stmt], out: &mut BTreeSet<String>) {
        for s in body {
            match s {
                Stmt::Decl { ty, .. } => struct_ref(ty, out),
                Stmt::If { then_branch, else_branch, .. } => {
                    stmts(then_branch, out);
                    stmts(else_branch.as_deref().unwrap_or_default(), out);
                }
                Stmt::While { body, .. } | Stmt::Block(body) => stmts(body, out),
                _ => {}
            }
        }
    }
    struct_refs_sig(&f.signature, out);
    stmts(&f.body, out);
}

/// Non-local names a function body refers to, in order of first use.
fn symbol_refs(f: &FunctionDef) -> Vec<String> {
    let locals = f.local_names();
    let mut out: Vec<String> = Vec::new();
    for n in f.referenced_names() {
        if !locals.contains(n) && !out.iter().any(|o| o == n) {
            out.push(n.to_string());
        }
    }
    out
}

fn calls_fatal(f: &FunctionDef) -> bool {
    let mut found = false;
    for s in &f.body {
        s.walk_exprs(&mut |e| {
            if let Expr::Call { callee, .. } = e {
                if matches!(&**callee, Expr::Var(n) if n == "fatal") {
                    found = true;
                }
            }
        });
    }
    found
}

/// Append an alarm raised whenever the replacement of `target` takes its
/// fatal path. Existing aspects are left as they are.
pub fn insert_alarm(patch: &DynamicPatch, target: &str, message: &str) -> Result<DynamicPatch, PatchError> {
    let (_, repl) = patch.replaced().into_iter().find(|(t, _)| *t == target).ok_or_else(|| PatchError::NotReplaced(target.to_string()))?;
    let f = patch.function(repl).ok_or_else(|| PatchError::NotReplaced(target.to_string()))?;
    if !calls_fatal(f) {
        return Err(PatchError::Generate(format!("{repl} has no fatal path to attach an alarm to")));
    }
    let prefix = aspect_name("Alarm", target);
    let n = (1..).find(|i| !patch.aspects.iter().any(|a| a.name == format!("{prefix}_{i}"))).expect("unbounded");
    let mut out = patch.clone();
    out.aspects.push(Aspect {
        name: format!("{prefix}_{n}"),
        pointcut: Pointcut::CallSite(format!("{repl}::fatal")),
        action: Action::InvokeAlarm(message.to_string()),
    });
    Ok(out)
}
