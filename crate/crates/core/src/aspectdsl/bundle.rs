use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_patch, render_patch, Action, DynamicPatch, PatchError, Pointcut, ShadowSpec, ValueExpr, ValueSource};
use crate::classifier::RuntimeCheck;
use crate::csubset::{ScalarType, TranslationUnit};
use crate::targetvm::ir::Op;
use crate::targetvm::{lower_unit, IrFunction, IrGlobal, LowerOptions, ProgramIr};

pub const BUNDLE_HEADER: &str = "HOTMEND-BUNDLE v1";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub patch_id: String,
    pub description: String,
    /// Every target-program symbol the weaver must resolve, sorted.
    pub required_symbols: Vec<String>,
    pub runtime_checks: Vec<RuntimeCheck>,
}

/// One code rewrite the weaver performs, derived from one aspect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    RedirectCalls { target: String, replacement: String, aspect: String },
    SubstitutePointer { target: String, replacement: String, aspect: String },
    RetypeReads { global: String, to: ScalarType, aspect: String },
    RetypeWrites { global: String, to: ScalarType, aspect: String },
}

impl Directive {
    pub fn aspect(&self) -> &str {
        match self {
            Directive::RedirectCalls { aspect, .. }
            | Directive::SubstitutePointer { aspect, .. }
            | Directive::RetypeReads { aspect, .. }
            | Directive::RetypeWrites { aspect, .. } => aspect,
        }
    }
}

/// Compiled, self-contained form of a dynamic patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchBundle {
    pub manifest: Manifest,
    pub functions: Vec<IrFunction>,
    pub globals: Vec<IrGlobal>,
    pub shadow_fields: Vec<ShadowSpec>,
    /// In aspect source order.
    pub directives: Vec<Directive>,
}

impl PatchBundle {
    pub fn to_text(&self) -> String {
        format!("{BUNDLE_HEADER}\n{}", crate::canon::to_canonical_pretty(self))
    }

    pub fn from_text(text: &str) -> Result<PatchBundle, String> {
        let body = text.strip_prefix(BUNDLE_HEADER).and_then(|r| r.strip_prefix('\n')).ok_or_else(|| format!("missing '{BUNDLE_HEADER}' header"))?;
        let b: PatchBundle = crate::canon::from_canonical(body).map_err(|e| format!("bad bundle: {e}"))?;
        if b.manifest.version != BUNDLE_VERSION {
            return Err(format!("unsupported bundle version {}", b.manifest.version));
        }
        Ok(b)
    }

    /// Hex SHA-256 of the text form.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_text().as_bytes());
        h.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn id(&self) -> &str {
        &self.manifest.patch_id
    }

    /// The code and data the bundle installs.
    pub fn program(&self) -> ProgramIr {
        ProgramIr { globals: self.globals.clone(), functions: self.functions.clone() }
    }
}

/// Check a patch as a whole and lower it. The patch is rendered and
/// reparsed first, so a bundle only ever comes from valid patch text.
pub fn compile(patch: &DynamicPatch) -> Result<PatchBundle, PatchError> {
    let p = parse_patch(&render_patch(patch))?;
    let unit = TranslationUnit {
        file: "patch.dpatch".into(),
        structs: p.structs.clone(),
        globals: p.globals.clone(),
        externs: p.externs.clone(),
        functions: p.replacement_functions.clone(),
        decl_spans: Vec::new(),
    };
    let opts = LowerOptions { shadow_fields: p.shadow_fields.iter().map(|s| (s.strukt.clone(), s.field.clone(), s.ty)).collect() };
    let mut ir = lower_unit(&unit, &opts)?;

    let mut required: BTreeSet<String> = ir.external_symbols();
    let mut directives = Vec::new();
    for a in &p.aspects {
        if a.pointcut.scope().is_none() {
            required.insert(a.pointcut.target().to_string());
        }
        let aspect = a.name.clone();
        let d = match (&a.pointcut, &a.action) {
            (Pointcut::CallSite(t), Action::RedirectCall(r)) => Directive::RedirectCalls { target: t.clone(), replacement: r.clone(), aspect },
            (Pointcut::PointerRead(t), Action::SubstituteAddress(r)) => {
                Directive::SubstitutePointer { target: t.clone(), replacement: r.clone(), aspect }
            }
            (Pointcut::GlobalRead(g), Action::SubstituteValue(ValueExpr::Convert { of: ValueSource::Original, ty })) => {
                Directive::RetypeReads { global: g.clone(), to: *ty, aspect }
            }
            (Pointcut::GlobalWrite(g), Action::SubstituteValue(ValueExpr::Convert { of: ValueSource::Assigned, ty })) => {
                Directive::RetypeWrites { global: g.clone(), to: *ty, aspect }
            }
            (Pointcut::CallSite(_), Action::InvokeAlarm(message)) => {
                let (scope, _) = a.pointcut.scope().expect("validated");
                let f = ir.functions.iter_mut().find(|f| f.name == scope).expect("validated");
                inline_alarm(f, message);
                continue;
            }
            _ => unreachable!("validated aspect"),
        };
        directives.push(d);
    }

    Ok(PatchBundle {
        manifest: Manifest {
            version: BUNDLE_VERSION,
            patch_id: p.id.clone(),
            description: p.description.clone(),
            required_symbols: required.into_iter().collect(),
            runtime_checks: p.checks.clone(),
        },
        functions: ir.functions,
        globals: ir.globals,
        shadow_fields: p.shadow_fields,
        directives,
    })
}

/// Put an alarm in front of every fatal exit of `f`. Jumps to a fatal
/// land on its alarm.
fn inline_alarm(f: &mut IrFunction, message: &str) {
    let old = std::mem::take(&mut f.code);
    let mut land = Vec::with_capacity(old.len());
    let mut at = 0u32;
    for op in &old {
        land.push(at);
        at += if matches!(op, Op::Fatal { .. }) { 2 } else { 1 };
    }
    for mut op in old {
        for t in op.jump_targets_mut() {
            *t = land[*t as usize];
        }
        if matches!(op, Op::Fatal { .. }) {
            f.code.push(Op::Alarm { message: message.to_string() });
        }
        f.code.push(op);
    }
}
