//! Semantic comparison of two versions of a translation unit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ast::TranslationUnit;
use super::lexer::{tokenize, Span};
use super::types::{CType, ScalarType, Signature};
use crate::diffcore::{FileDelta, LineKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RawChange {
    FunctionAdded {
        name: String,
    },
    FunctionRemoved {
        name: String,
    },
    FunctionBodyChanged {
        name: String,
    },
    FunctionSignatureChanged {
        name: String,
        old: Signature,
        new: Signature,
    },
    GlobalTypeChanged {
        name: String,
        old: CType,
        new: CType,
    },
    /// Only the initializer differs; the running program has already
    /// consumed the old one.
    GlobalInitializerChanged {
        name: String,
    },
    GlobalAdded {
        name: String,
    },
    GlobalRemoved {
        name: String,
    },
    StructAdded {
        name: String,
    },
    StructRemoved {
        name: String,
    },
    StructFieldAdded {
        strukt: String,
        field: String,
        ty: ScalarType,
    },
    StructFieldRemoved {
        strukt: String,
        field: String,
    },
    StructFieldReordered {
        strukt: String,
    },
    StructFieldRetyped {
        strukt: String,
        field: String,
        old: ScalarType,
        new: ScalarType,
    },
}

impl RawChange {
    /// The function, global or struct the change is about.
    pub fn subject(&self) -> &str {
        use RawChange::*;
        match self {
            FunctionAdded { name }
            | FunctionRemoved { name }
            | FunctionBodyChanged { name }
            | FunctionSignatureChanged { name, .. }
            | GlobalTypeChanged { name, .. }
            | GlobalInitializerChanged { name }
            | GlobalAdded { name }
            | GlobalRemoved { name }
            | StructAdded { name }
            | StructRemoved { name } => name,
            StructFieldAdded { strukt, .. }
            | StructFieldRemoved { strukt, .. }
            | StructFieldReordered { strukt }
            | StructFieldRetyped { strukt, .. } => strukt,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        use RawChange::*;
        match self {
            FunctionAdded { .. } => "FunctionAdded",
            FunctionRemoved { .. } => "FunctionRemoved",
            FunctionBodyChanged { .. } => "FunctionBodyChanged",
            FunctionSignatureChanged { .. } => "FunctionSignatureChanged",
            GlobalTypeChanged { .. } => "GlobalTypeChanged",
            GlobalInitializerChanged { .. } => "GlobalInitializerChanged",
            GlobalAdded { .. } => "GlobalAdded",
            GlobalRemoved { .. } => "GlobalRemoved",
            StructAdded { .. } => "StructAdded",
            StructRemoved { .. } => "StructRemoved",
            StructFieldAdded { .. } => "StructFieldAdded",
            StructFieldRemoved { .. } => "StructFieldRemoved",
            StructFieldReordered { .. } => "StructFieldReordered",
            StructFieldRetyped { .. } => "StructFieldRetyped",
        }
    }
}

/// Differences between `old` and `new`, in a fixed order: structs, globals,
/// functions; existing items in old order, then additions in new order.
pub fn semantic_diff(old: &TranslationUnit, new: &TranslationUnit) -> Vec<RawChange> {
    let mut out = Vec::new();

    for s in &old.structs {
        let Some(n) = new.struct_def(&s.name) else {
            out.push(RawChange::StructRemoved { name: s.name.clone() });
            continue;
        };
        for f in &s.fields {
            match n.fields.iter().find(|nf| nf.name == f.name) {
                None => out.push(RawChange::StructFieldRemoved { strukt: s.name.clone(), field: f.name.clone() }),
                Some(nf) if nf.ty != f.ty => {
                    out.push(RawChange::StructFieldRetyped { strukt: s.name.clone(), field: f.name.clone(), old: f.ty, new: nf.ty })
                }
                Some(_) => {}
            }
        }
        let common_old: Vec<&str> = s.fields.iter().map(|f| f.name.as_str()).filter(|f| n.field_index(f).is_some()).collect();
        let common_new: Vec<&str> = n.fields.iter().map(|f| f.name.as_str()).filter(|f| s.field_index(f).is_some()).collect();
        if common_old != common_new {
            out.push(RawChange::StructFieldReordered { strukt: s.name.clone() });
        }
        for nf in &n.fields {
            if s.field_index(&nf.name).is_none() {
                out.push(RawChange::StructFieldAdded { strukt: s.name.clone(), field: nf.name.clone(), ty: nf.ty });
            }
        }
    }
    for s in &new.structs {
        if old.struct_def(&s.name).is_none() {
            out.push(RawChange::StructAdded { name: s.name.clone() });
        }
    }

    for g in &old.globals {
        match new.global(&g.name) {
            None => out.push(RawChange::GlobalRemoved { name: g.name.clone() }),
            Some(n) if n.ty != g.ty => out.push(RawChange::GlobalTypeChanged { name: g.name.clone(), old: g.ty.clone(), new: n.ty.clone() }),
            Some(n) if n.init != g.init => out.push(RawChange::GlobalInitializerChanged { name: g.name.clone() }),
            Some(_) => {}
        }
    }
    for g in &new.globals {
        if old.global(&g.name).is_none() {
            out.push(RawChange::GlobalAdded { name: g.name.clone() });
        }
    }

    for f in &old.functions {
        match new.function(&f.name) {
            None => out.push(RawChange::FunctionRemoved { name: f.name.clone() }),
            Some(n) if n.signature != f.signature => {
                out.push(RawChange::FunctionSignatureChanged { name: f.name.clone(), old: f.signature.clone(), new: n.signature.clone() })
            }
            Some(n) if n.body_tokens != f.body_tokens || n.params != f.params => out.push(RawChange::FunctionBodyChanged { name: f.name.clone() }),
            Some(_) => {}
        }
    }
    for f in &new.functions {
        if old.function(&f.name).is_none() {
            out.push(RawChange::FunctionAdded { name: f.name.clone() });
        }
    }
    out
}

fn spans_of(unit: &TranslationUnit, name: &str) -> Vec<Span> {
    let mut v: Vec<Span> = Vec::new();
    if let Some(f) = unit.function(name) {
        v.push(f.span);
    }
    if let Some(g) = unit.global(name) {
        v.push(g.span);
    }
    if let Some(s) = unit.struct_def(name) {
        v.push(s.span);
    }
    v.extend(unit.decl_spans.iter().filter(|(n, _)| n == name).map(|(_, s)| *s));
    v
}

/// Lines carrying at least one token.
fn token_lines(src: &str) -> BTreeSet<usize> {
    tokenize(&src.replace("\r\n", "\n")).map(|toks| toks.iter().filter(|t| !t.text.is_empty()).map(|t| t.span.line).collect()).unwrap_or_default()
}

/// Changed hunk lines that carry tokens but fall outside every reported
/// change. Removed lines are checked against `old`, added lines against
/// `new`. An empty result means the semantic diff accounts for the whole
/// textual patch.
pub fn uncovered_hunk_lines(
    delta: &FileDelta,
    old_src: &str,
    old: &TranslationUnit,
    new_src: &str,
    new: &TranslationUnit,
    changes: &[RawChange],
) -> Vec<(LineKind, usize)> {
    let subjects: BTreeSet<&str> = changes.iter().map(RawChange::subject).collect();
    let old_spans: Vec<Span> = subjects.iter().flat_map(|n| spans_of(old, n)).collect();
    let new_spans: Vec<Span> = subjects.iter().flat_map(|n| spans_of(new, n)).collect();
    let (old_tok, new_tok) = (token_lines(old_src), token_lines(new_src));
    let mut out = Vec::new();
    for h in &delta.hunks {
        for line in h.removed_line_numbers() {
            if old_tok.contains(&line) && !old_spans.iter().any(|s| s.contains_line(line)) {
                out.push((LineKind::Removed, line));
            }
        }
        for line in h.added_line_numbers() {
            if new_tok.contains(&line) && !new_spans.iter().any(|s| s.contains_line(line)) {
                out.push((LineKind::Added, line));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::parse_file;
    use super::*;

    fn diff(a: &str, b: &str) -> Vec<RawChange> {
        semantic_diff(&parse_file("t.c", a).unwrap(), &parse_file("t.c", b).unwrap())
    }

    #[test]
    fn identical_units_have_no_changes() {
        let src = "struct s { int a; };\nint g;\nint f(int x) { return x; }\n";
        assert!(diff(src, src).is_empty());
    }

    #[test]
    fn whitespace_and_comments_are_ignored() {
        assert!(diff("int f(int x) { return x; }", "int f(int x)\n{\n  /* same */ return   x; // ok\n}\n").is_empty());
    }

    #[test]
    fn function_changes() {
        let c = diff(
            "int a(int x) { return x; }\nint b(int x) { return x; }\nint c(void) { return 0; }\n",
            "long a(int x) { return x; }\nint b(int x) { return x + 1; }\nint d(void) { return 0; }\n",
        );
        assert_eq!(c.len(), 4);
        assert!(matches!(&c[0], RawChange::FunctionSignatureChanged { name, .. } if name == "a"));
        assert_eq!(c[1], RawChange::FunctionBodyChanged { name: "b".into() });
        assert_eq!(c[2], RawChange::FunctionRemoved { name: "c".into() });
        assert_eq!(c[3], RawChange::FunctionAdded { name: "d".into() });
    }

    #[test]
    fn global_changes() {
        let c = diff("int g = 1;\nint h;\nint k = 2;\n", "long g = 1;\nint k = 3;\nint m;\n");
        assert_eq!(
            c,
            vec![
                RawChange::GlobalTypeChanged { name: "g".into(), old: CType::Scalar(ScalarType::I32), new: CType::Scalar(ScalarType::I64) },
                RawChange::GlobalRemoved { name: "h".into() },
                RawChange::GlobalInitializerChanged { name: "k".into() },
                RawChange::GlobalAdded { name: "m".into() },
            ]
        );
    }

    #[test]
    fn struct_changes() {
        let c =
            diff("struct s { int a; int b; int c; };\nstruct t { int x; };\n", "struct s { int b; int a; char c; int d; };\nstruct u { int y; };\n");
        assert_eq!(
            c,
            vec![
                RawChange::StructFieldRetyped { strukt: "s".into(), field: "c".into(), old: ScalarType::I32, new: ScalarType::I8 },
                RawChange::StructFieldReordered { strukt: "s".into() },
                RawChange::StructFieldAdded { strukt: "s".into(), field: "d".into(), ty: ScalarType::I32 },
                RawChange::StructRemoved { name: "t".into() },
                RawChange::StructAdded { name: "u".into() },
            ]
        );
    }
}
