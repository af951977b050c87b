//! C rendering of AST items. Output reparses to a structurally equal AST.

use std::fmt::Write;

use super::ast::*;
use super::types::{CType, Signature};

const INDENT: &str = "    ";

pub fn type_name(ty: &Option<CType>) -> String {
    match ty {
        None => "void".into(),
        Some(t) => declarator(t, ""),
    }
}

/// `ty name` with C declarator syntax; `name` may be empty.
pub fn declarator(ty: &CType, name: &str) -> String {
    let sep = if name.is_empty() { "" } else { " " };
    match ty {
        CType::Scalar(s) => format!("{}{sep}{name}", s.c_name()),
        CType::Struct(s) => format!("struct {s}{sep}{name}"),
        CType::StructPtr(s) => format!("struct {s} *{name}"),
        CType::FnPtr(sig) => format!("{} (*{name})({})", type_name(&sig.ret), param_types(sig)),
    }
}

fn param_types(sig: &Signature) -> String {
    if sig.params.is_empty() {
        return "void".into();
    }
    let mut parts: Vec<String> = sig.params.iter().map(|t| declarator(t, "")).collect();
    if sig.variadic {
        parts.push("...".into());
    }
    parts.join(", ")
}

pub fn struct_def(s: &StructDef) -> String {
    let mut out = format!("struct {} {{\n", s.name);
    for f in &s.fields {
        let _ = writeln!(out, "{INDENT}{} {};", f.ty.c_name(), f.name);
    }
    out.push_str("};\n");
    out
}

pub fn global(g: &GlobalVar) -> String {
    let mut out = String::new();
    if g.is_static {
        out.push_str("static ");
    }
    out.push_str(&declarator(&g.ty, &g.name));
    match &g.init {
        Some(Initializer::Scalar(e)) => {
            let _ = write!(out, " = {}", expr(e));
        }
        Some(Initializer::Aggregate(items)) => {
            let items: Vec<String> = items.iter().map(expr).collect();
            let _ = write!(out, " = {{ {} }}", items.join(", "));
        }
        None => {}
    }
    out.push_str(";\n");
    out
}

pub fn prototype(name: &str, sig: &Signature) -> String {
    format!("{} {name}({});\n", type_name(&sig.ret), param_types(sig))
}

pub fn extern_decl(d: &ExternDecl) -> String {
    match d {
        ExternDecl::Function { name, signature } => prototype(name, signature),
        ExternDecl::Global { name, ty } => format!("extern {};\n", declarator(ty, name)),
    }
}

pub fn function(f: &FunctionDef) -> String {
    let mut out = String::new();
    if f.is_static {
        out.push_str("static ");
    }
    let params = if f.params.is_empty() {
        "void".to_string()
    } else {
        let mut ps: Vec<String> = f.params.iter().map(|p| declarator(&p.ty, &p.name)).collect();
        if f.signature.variadic {
            ps.push("...".into());
        }
        ps.join(", ")
    };
    let _ = writeln!(out, "{} {}({params}) {{", type_name(&f.signature.ret), f.name);
    for s in &f.body {
        stmt(&mut out, s, 1);
    }
    out.push_str("}\n");
    out
}

pub fn stmt(out: &mut String, s: &Stmt, depth: usize) {
    let pad = INDENT.repeat(depth);
    match s {
        Stmt::Decl { name, ty, init } => {
            let _ = write!(out, "{pad}{}", declarator(ty, name));
            if let Some(e) = init {
                let _ = write!(out, " = {}", expr(e));
            }
            out.push_str(";\n");
        }
        Stmt::Expr(e) => {
            let _ = writeln!(out, "{pad}{};", expr(e));
        }
        Stmt::If { cond, then_branch, else_branch } => {
            let _ = writeln!(out, "{pad}if ({}) {{", expr(cond));
            for s in then_branch {
                stmt(out, s, depth + 1);
            }
            match else_branch {
                Some(b) => {
                    let _ = writeln!(out, "{pad}}} else {{");
                    for s in b {
                        stmt(out, s, depth + 1);
                    }
                    let _ = writeln!(out, "{pad}}}");
                }
                None => {
                    let _ = writeln!(out, "{pad}}}");
                }
            }
        }
        Stmt::While { cond, body } => {
            let _ = writeln!(out, "{pad}while ({}) {{", expr(cond));
            for s in body {
                stmt(out, s, depth + 1);
            }
            let _ = writeln!(out, "{pad}}}");
        }
        Stmt::Return(None) => {
            let _ = writeln!(out, "{pad}return;");
        }
        Stmt::Return(Some(e)) => {
            let _ = writeln!(out, "{pad}return {};", expr(e));
        }
        Stmt::Block(b) => {
            let _ = writeln!(out, "{pad}{{");
            for s in b {
                stmt(out, s, depth + 1);
            }
            let _ = writeln!(out, "{pad}}}");
        }
        Stmt::Break => {
            let _ = writeln!(out, "{pad}break;");
        }
        Stmt::Continue => {
            let _ = writeln!(out, "{pad}continue;");
        }
    }
}

fn prec(op: BinOp) -> u8 {
    match op {
        BinOp::Or => 1,
        BinOp::And => 2,
        BinOp::BitOr => 3,
        BinOp::BitXor => 4,
        BinOp::BitAnd => 5,
        BinOp::Eq | BinOp::Ne => 6,
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 7,
        BinOp::Shl | BinOp::Shr => 8,
        BinOp::Add | BinOp::Sub => 9,
        BinOp::Mul | BinOp::Div | BinOp::Rem => 10,
    }
}

/// Binding strength of an expression's outermost operator.
fn strength(e: &Expr) -> u8 {
    match e {
        Expr::Assign { .. } => 0,
        Expr::Binary { op, .. } => prec(*op),
        Expr::Unary { .. } | Expr::AddrOf(_) | Expr::IncDec { prefix: true, .. } => 11,
        Expr::Int(v) if *v < 0 => 11,
        Expr::Float(v) if v.is_sign_negative() => 11,
        _ => 12,
    }
}

fn wrap(e: &Expr, min: u8) -> String {
    let s = expr(e);
    if strength(e) < min {
        format!("({s})")
    } else {
        s
    }
}

pub fn expr(e: &Expr) -> String {
    match e {
        Expr::Int(v) => v.to_string(),
        Expr::Float(v) => format!("{v:?}"),
        Expr::Str(s) => {
            let mut out = String::from("\"");
            for c in s.chars() {
                match c {
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    '\0' => out.push_str("\\0"),
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    c => out.push(c),
                }
            }
            out.push('"');
            out
        }
        Expr::Var(n) => n.clone(),
        Expr::Unary { op, operand } => {
            let sym = match op {
                UnOp::Neg => "-",
                UnOp::Not => "!",
                UnOp::BitNot => "~",
            };
            let inner = wrap(operand, 11);
            // Keep `- -x` from lexing as `--x`.
            if sym == "-" && inner.starts_with('-') {
                format!("-({inner})")
            } else {
                format!("{sym}{inner}")
            }
        }
        Expr::Binary { op, lhs, rhs } => {
            let p = prec(*op);
            format!("{} {} {}", wrap(lhs, p), op.symbol(), wrap(rhs, p + 1))
        }
        Expr::Assign { op, target, value } => {
            let sym = op.map(|o| format!("{}=", o.symbol())).unwrap_or_else(|| "=".into());
            format!("{} {sym} {}", wrap(target, 11), wrap(value, 0))
        }
        Expr::IncDec { target, increment, prefix } => {
            let sym = if *increment { "++" } else { "--" };
            if *prefix {
                format!("{sym}{}", wrap(target, 12))
            } else {
                format!("{}{sym}", wrap(target, 12))
            }
        }
        Expr::Call { callee, args } => {
            let args: Vec<String> = args.iter().map(|a| wrap(a, 1)).collect();
            format!("{}({})", wrap(callee, 12), args.join(", "))
        }
        Expr::Member { base, field, arrow } => {
            format!("{}{}{field}", wrap(base, 12), if *arrow { "->" } else { "." })
        }
        Expr::AddrOf(inner) => format!("&{}", wrap(inner, 11)),
    }
}

/// Render a whole unit. Prototypes for every defined function come first
/// so that definition order never matters on reparse.
pub fn unit(u: &TranslationUnit) -> String {
    let mut out = String::new();
    for s in &u.structs {
        out.push_str(&struct_def(s));
    }
    for d in &u.externs {
        out.push_str(&extern_decl(d));
    }
    for f in &u.functions {
        if !u.externs.iter().any(|d| d.name() == f.name) {
            let proto = prototype(&f.name, &f.signature);
            if f.is_static {
                out.push_str("static ");
            }
            out.push_str(&proto);
        }
    }
    for g in &u.globals {
        out.push_str(&global(g));
    }
    for f in &u.functions {
        out.push_str(&function(f));
    }
    out
}
