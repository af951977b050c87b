//! Dynamic patches: aspects plus replacement code, generated from a
//! classified change set, editable as text, audited and compiled into
//! deployable bundles.

mod audit;
mod bundle;
mod generate;
mod syntax;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::RuntimeCheck;
use crate::csubset::{Expr, ExternDecl, FunctionDef, GlobalVar, ParseError, ScalarType, StructDef};

pub use audit::render_audit;
pub use bundle::{compile, Directive, Manifest, PatchBundle, BUNDLE_HEADER, BUNDLE_VERSION};
pub use generate::{generate, insert_alarm};
pub use syntax::{parse_patch, render_patch, DSL_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pointcut {
    /// Direct calls to a function. `f::g` restricts the pointcut to calls
    /// of `g` made inside `f`.
    CallSite(String),
    /// Reads of a function's address.
    PointerRead(String),
    GlobalRead(String),
    GlobalWrite(String),
}

impl Pointcut {
    pub fn target(&self) -> &str {
        match self {
            Pointcut::CallSite(s) | Pointcut::PointerRead(s) | Pointcut::GlobalRead(s) | Pointcut::GlobalWrite(s) => s,
        }
    }

    /// `(enclosing function, callee)` for a scoped call pointcut.
    pub fn scope(&self) -> Option<(&str, &str)> {
        match self {
            Pointcut::CallSite(s) => s.split_once("::"),
            _ => None,
        }
    }

    pub fn is_function(&self) -> bool {
        matches!(self, Pointcut::CallSite(_) | Pointcut::PointerRead(_))
    }
}

impl fmt::Display for Pointcut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pointcut::CallSite(s) => write!(f, "call({s})"),
            Pointcut::PointerRead(s) => write!(f, "pointer({s})"),
            Pointcut::GlobalRead(s) => write!(f, "read({s})"),
            Pointcut::GlobalWrite(s) => write!(f, "write({s})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    /// The value held by the global.
    Original,
    /// The value being stored.
    Assigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueExpr {
    Convert { of: ValueSource, ty: ScalarType },
}

impl fmt::Display for ValueExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueExpr::Convert { of, ty } => {
                let of = match of {
                    ValueSource::Original => "original",
                    ValueSource::Assigned => "assigned",
                };
                write!(f, "convert({of}, {ty})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Call the replacement instead, with the same arguments.
    RedirectCall(String),
    SubstituteAddress(String),
    SubstituteValue(ValueExpr),
    /// Raise an alarm before the matched call runs.
    InvokeAlarm(String),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::RedirectCall(s) => write!(f, "redirect({s})"),
            Action::SubstituteAddress(s) => write!(f, "address({s})"),
            Action::SubstituteValue(v) => write!(f, "value({v})"),
            Action::InvokeAlarm(m) => write!(f, "alarm({})", crate::csubset::print::expr(&Expr::Str(m.clone()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub name: String,
    pub pointcut: Pointcut,
    pub action: Action,
}

/// A struct field the patch keeps in a shadow table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub strukt: String,
    pub field: String,
    pub ty: ScalarType,
    /// An integer or float literal.
    pub default: Expr,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicPatch {
    pub id: String,
    pub description: String,
    /// Struct layouts as the running program knows them.
    pub structs: Vec<StructDef>,
    /// Target-program symbols the patch uses, then forward prototypes of
    /// patch functions.
    pub externs: Vec<ExternDecl>,
    /// Globals the patch adds to the program.
    pub globals: Vec<GlobalVar>,
    pub shadow_fields: Vec<ShadowSpec>,
    pub checks: Vec<RuntimeCheck>,
    pub aspects: Vec<Aspect>,
    pub replacement_functions: Vec<FunctionDef>,
}

impl DynamicPatch {
    pub fn function(&self, name: &str) -> Option<&FunctionDef> {
        self.replacement_functions.iter().find(|f| f.name == name)
    }

    /// Names of target functions replaced through a call redirection.
    pub fn replaced(&self) -> Vec<(&str, &str)> {
        self.aspects
            .iter()
            .filter_map(|a| match (&a.pointcut, &a.action) {
                (Pointcut::CallSite(t), Action::RedirectCall(r)) if a.pointcut.scope().is_none() => Some((t.as_str(), r.as_str())),
                _ => None,
            })
            .collect()
    }

    fn declared_function(&self, name: &str) -> bool {
        self.externs.iter().any(|e| matches!(e, ExternDecl::Function { name: n, .. } if n == name)) && self.function(name).is_none()
    }

    fn declared_global(&self, name: &str) -> Option<&crate::csubset::CType> {
        self.externs.iter().find_map(|e| match e {
            ExternDecl::Global { name: n, ty } if n == name => Some(ty),
            _ => None,
        })
    }

    /// Symbol-level consistency of aspects against the patch's own
    /// declarations and definitions.
    pub fn validate(&self) -> Result<(), PatchError> {
        let mut slots = std::collections::BTreeSet::new();
        for s in &self.shadow_fields {
            let bad = |m: &str| Err(PatchError::Generate(format!("shadow {}.{}: {m}", s.strukt, s.field)));
            let Some(def) = self.structs.iter().find(|d| d.name == s.strukt) else {
                return bad("struct is not declared");
            };
            if def.field_index(&s.field).is_some() {
                return bad("field already exists in the layout");
            }
            if !slots.insert((&s.strukt, &s.field)) {
                return bad("declared twice");
            }
            match s.default {
                Expr::Int(_) => {}
                Expr::Float(_) if s.ty.is_float() => {}
                _ => return bad("default must be a literal of the field's type"),
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.aspects {
            let bad = |message: String| Err(PatchError::Aspect { aspect: a.name.clone(), message });
            if !is_ident(&a.name) {
                return bad("aspect name is not an identifier".into());
            }
            if !names.insert(a.name.as_str()) {
                return bad("duplicate aspect name".into());
            }
            match (&a.pointcut, &a.action) {
                (Pointcut::CallSite(_), Action::InvokeAlarm(_)) => {
                    let Some((scope, callee)) = a.pointcut.scope() else {
                        return bad("an alarm needs a scoped pointcut such as call(f_new::fatal)".into());
                    };
                    if self.function(scope).is_none() {
                        return bad(format!("'{scope}' is not defined by the patch"));
                    }
                    if callee != "fatal" {
                        return bad(format!("alarms attach to calls of fatal, not '{callee}'"));
                    }
                }
                (Pointcut::CallSite(t), Action::RedirectCall(r)) | (Pointcut::PointerRead(t), Action::SubstituteAddress(r)) => {
                    if a.pointcut.scope().is_some() {
                        return bad("scoped pointcuts only take alarm actions".into());
                    }
                    if !self.declared_function(t) {
                        return bad(format!("pointcut target '{t}' is not a declared target function"));
                    }
                    let Some(f) = self.function(r) else {
                        return bad(format!("replacement '{r}' is not defined by the patch"));
                    };
                    let target_sig = self.externs.iter().find_map(|e| match e {
                        ExternDecl::Function { name, signature } if name == t => Some(signature),
                        _ => None,
                    });
                    if target_sig != Some(&f.signature) {
                        return bad(format!("'{r}' does not take the arguments of '{t}'"));
                    }
                }
                (Pointcut::GlobalRead(g), Action::SubstituteValue(ValueExpr::Convert { of: ValueSource::Original, ty }))
                | (Pointcut::GlobalWrite(g), Action::SubstituteValue(ValueExpr::Convert { of: ValueSource::Assigned, ty })) => {
                    match self.declared_global(g) {
                        Some(crate::csubset::CType::Scalar(d)) if d == ty => {}
                        Some(crate::csubset::CType::Scalar(d)) => {
                            return bad(format!("'{g}' is declared {d} but converted to {ty}"));
                        }
                        _ => return bad(format!("pointcut target '{g}' is not a declared scalar global")),
                    }
                }
                _ => return bad(format!("action {} does not fit pointcut {}", a.action, a.pointcut)),
            }
        }
        Ok(())
    }
}

pub(crate) fn is_ident(s: &str) -> bool {
    let mut cs = s.chars();
    cs.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') && cs.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// An identifier usable as an aspect name, derived from a symbol.
pub(crate) fn aspect_name(prefix: &str, sym: &str) -> String {
    format!("{prefix}_{}", sym.replace('!', "__"))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PatchError {
    #[error("{line}:{col}: {message}")]
    Grammar { line: usize, col: usize, message: String },
    #[error("in patch code: {0}")]
    Code(#[from] ParseError),
    #[error("aspect {aspect}: {message}")]
    Aspect { aspect: String, message: String },
    #[error("change {change} cannot be applied dynamically: {reason}")]
    StaticOnly { change: String, reason: String },
    #[error("'{0}' is not replaced by the patch")]
    NotReplaced(String),
    #[error("{0}")]
    Generate(String),
    #[error(transparent)]
    Lower(#[from] crate::targetvm::LowerError),
}
