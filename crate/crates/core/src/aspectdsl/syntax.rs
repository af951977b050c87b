//! The `.dpatch` text form.
//!
//! ```text
//! dpatch 1;
//! patch "ID" "description";
//! declare { <struct definitions, extern globals, prototypes> }
//! define { <global definitions> }
//! shadow STRUCT.FIELD : TYPE = LITERAL;
//! check quiescence(f);
//! check fits(g, TYPE);
//! aspect NAME { pointcut: POINTCUT; action: ACTION; }
//! function { <function definitions> }
//! ```
//!
//! Pointcuts are `call(f)`, `call(f::fatal)`, `pointer(f)`, `read(g)` and
//! `write(g)`. Actions are `redirect(f)`, `address(f)`,
//! `value(convert(original|assigned, TYPE))` and `alarm("message")`.
//! Blocks appear at most once and in the order above; `shadow`, `check`
//! and `aspect` lines may be interleaved. Comments follow C rules.

use std::fmt::Write;

use super::{Action, Aspect, DynamicPatch, PatchError, Pointcut, ShadowSpec, ValueExpr, ValueSource};
use crate::classifier::RuntimeCheck;
use crate::csubset::lexer::{tokenize, Span, Tok, Token};
use crate::csubset::{parse_unit, print, Expr, ParseOptions, ScalarType};

pub const DSL_VERSION: i128 = 1;

pub fn render_patch(p: &DynamicPatch) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "dpatch {DSL_VERSION};");
    let _ = writeln!(out, "patch {} {};", quote(&p.id), quote(&p.description));
    if !p.structs.is_empty() || !p.externs.is_empty() {
        out.push_str("\ndeclare {\n");
        for s in &p.structs {
            out.push_str(&print::struct_def(s));
        }
        for e in &p.externs {
            out.push_str(&print::extern_decl(e));
        }
        out.push_str("}\n");
    }
    if !p.globals.is_empty() {
        out.push_str("\ndefine {\n");
        for g in &p.globals {
            out.push_str(&print::global(g));
        }
        out.push_str("}\n");
    }
    if !p.shadow_fields.is_empty() || !p.checks.is_empty() {
        out.push('\n');
    }
    for s in &p.shadow_fields {
        let _ = writeln!(out, "shadow {}.{} : {} = {};", s.strukt, s.field, s.ty, print::expr(&s.default));
    }
    for c in &p.checks {
        let _ = writeln!(out, "check {c};");
    }
    for a in &p.aspects {
        let _ = write!(out, "\naspect {} {{\n    pointcut: {};\n    action: {};\n}}\n", a.name, a.pointcut, a.action);
    }
    if !p.replacement_functions.is_empty() {
        out.push_str("\nfunction {\n");
        for (i, f) in p.replacement_functions.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&print::function(f));
        }
        out.push_str("}\n");
    }
    out
}

fn quote(s: &str) -> String {
    print::expr(&Expr::Str(s.to_string()))
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Block {
    Declare,
    Define,
    Function,
}

struct Cursor {
    toks: Vec<Token>,
    pos: usize,
}

impl Cursor {
    fn peek(&self) -> &Token {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn next(&mut self) -> Token {
        let t = self.peek().clone();
        if self.pos < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, PatchError> {
        let s = self.peek().span;
        Err(PatchError::Grammar { line: s.line, col: s.col, message: message.into() })
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == w)
    }

    fn word(&mut self, w: &str) -> Result<(), PatchError> {
        if self.is_word(w) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected '{w}', found '{}'", self.peek().text))
        }
    }

    fn punct(&mut self, p: &str) -> Result<Span, PatchError> {
        if matches!(self.peek().tok, Tok::Punct(q) if q == p) {
            Ok(self.next().span)
        } else {
            self.err(format!("expected '{p}', found '{}'", self.peek().text))
        }
    }

    fn ident(&mut self) -> Result<String, PatchError> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err(format!("expected an identifier, found '{}'", self.peek().text)),
        }
    }

    fn string(&mut self) -> Result<String, PatchError> {
        match &self.peek().tok {
            Tok::Str(s) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err(format!("expected a string, found '{}'", self.peek().text)),
        }
    }

    fn scalar(&mut self) -> Result<ScalarType, PatchError> {
        let at = self.pos;
        let name = self.ident()?;
        name.parse().or_else(|e: String| {
            self.pos = at;
            self.err(e)
        })
    }

    fn literal(&mut self) -> Result<Expr, PatchError> {
        let neg = matches!(self.peek().tok, Tok::Punct("-"));
        if neg {
            self.pos += 1;
        }
        match self.peek().tok {
            Tok::Int(v) => {
                self.pos += 1;
                Ok(Expr::Int(if neg { -v } else { v }))
            }
            Tok::Float(v) => {
                self.pos += 1;
                Ok(Expr::Float(if neg { -v } else { v }))
            }
            _ => self.err("expected a number"),
        }
    }

    /// Skip a brace-delimited block, returning the byte range inside it.
    fn block(&mut self) -> Result<(usize, usize), PatchError> {
        let open = self.punct("{")?;
        let mut depth = 1;
        loop {
            let t = self.next();
            match t.tok {
                Tok::Punct("{") => depth += 1,
                Tok::Punct("}") => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok((open.end, t.span.start));
                    }
                }
                Tok::Eof => return Err(PatchError::Grammar { line: open.line, col: open.col, message: "unclosed block".into() }),
                _ => {}
            }
        }
    }
}

fn pointcut(c: &mut Cursor) -> Result<Pointcut, PatchError> {
    let kind = c.ident()?;
    c.punct("(")?;
    let mut target = c.ident()?;
    if kind == "call" && matches!(c.peek().tok, Tok::Punct(":")) {
        c.punct(":")?;
        c.punct(":")?;
        target = format!("{target}::{}", c.ident()?);
    }
    c.punct(")")?;
    Ok(match kind.as_str() {
        "call" => Pointcut::CallSite(target),
        "pointer" => Pointcut::PointerRead(target),
        "read" => Pointcut::GlobalRead(target),
        "write" => Pointcut::GlobalWrite(target),
        other => return c.err(format!("unknown pointcut '{other}'")),
    })
}

fn action(c: &mut Cursor) -> Result<Action, PatchError> {
    let kind = c.ident()?;
    c.punct("(")?;
    let a = match kind.as_str() {
        "redirect" => Action::RedirectCall(c.ident()?),
        "address" => Action::SubstituteAddress(c.ident()?),
        "alarm" => Action::InvokeAlarm(c.string()?),
        "value" => {
            c.word("convert")?;
            c.punct("(")?;
            let of = match c.ident()?.as_str() {
                "original" => ValueSource::Original,
                "assigned" => ValueSource::Assigned,
                other => return c.err(format!("expected 'original' or 'assigned', found '{other}'")),
            };
            c.punct(",")?;
            let ty = c.scalar()?;
            c.punct(")")?;
            Action::SubstituteValue(ValueExpr::Convert { of, ty })
        }
        other => return c.err(format!("unknown action '{other}'")),
    };
    c.punct(")")?;
    Ok(a)
}

fn check(c: &mut Cursor) -> Result<RuntimeCheck, PatchError> {
    let kind = c.ident()?;
    c.punct("(")?;
    let r = match kind.as_str() {
        "quiescence" => RuntimeCheck::Quiescence(c.ident()?),
        "fits" => {
            let global = c.ident()?;
            c.punct(",")?;
            RuntimeCheck::ValueFits { global, ty: c.scalar()? }
        }
        other => return c.err(format!("unknown check '{other}'")),
    };
    c.punct(")")?;
    Ok(r)
}

pub fn parse_patch(text: &str) -> Result<DynamicPatch, PatchError> {
    let src = text.replace("\r\n", "\n");
    let toks = tokenize(&src)?;
    let mut c = Cursor { toks, pos: 0 };
    let mut p = DynamicPatch::default();

    c.word("dpatch")?;
    match c.peek().tok {
        Tok::Int(DSL_VERSION) => c.pos += 1,
        _ => return c.err(format!("expected dpatch version {DSL_VERSION}")),
    }
    c.punct(";")?;
    c.word("patch")?;
    p.id = c.string()?;
    p.description = c.string()?;
    c.punct(";")?;

    let mut blocks: Vec<(Block, usize, usize)> = Vec::new();
    while c.peek().tok != Tok::Eof {
        let kw = c.ident()?;
        match kw.as_str() {
            "declare" | "define" | "function" => {
                let b = match kw.as_str() {
                    "declare" => Block::Declare,
                    "define" => Block::Define,
                    _ => Block::Function,
                };
                if blocks.last().is_some_and(|(last, ..)| *last >= b) {
                    c.pos -= 1;
                    return c.err(format!("'{kw}' block repeated or out of order"));
                }
                let (s, e) = c.block()?;
                blocks.push((b, s, e));
            }
            "shadow" => {
                let strukt = c.ident()?;
                c.punct(".")?;
                let field = c.ident()?;
                c.punct(":")?;
                let ty = c.scalar()?;
                c.punct("=")?;
                let default = c.literal()?;
                c.punct(";")?;
                p.shadow_fields.push(ShadowSpec { strukt, field, ty, default });
            }
            "check" => {
                let r = check(&mut c)?;
                c.punct(";")?;
                p.checks.push(r);
            }
            "aspect" => {
                let name = c.ident()?;
                c.punct("{")?;
                c.word("pointcut")?;
                c.punct(":")?;
                let pointcut = pointcut(&mut c)?;
                c.punct(";")?;
                c.word("action")?;
                c.punct(":")?;
                let action = action(&mut c)?;
                c.punct(";")?;
                c.punct("}")?;
                p.aspects.push(Aspect { name, pointcut, action });
            }
            other => {
                c.pos -= 1;
                return c.err(format!("unexpected '{other}'"));
            }
        }
    }

    // The C blocks parse as one unit; everything else is blanked out so
    // that error positions still refer to the patch text.
    let mut code: Vec<u8> = src.bytes().map(|b| if b == b'\n' { b'\n' } else { b' ' }).collect();
    for &(_, s, e) in &blocks {
        code[s..e].copy_from_slice(&src.as_bytes()[s..e]);
    }
    let code = String::from_utf8(code).expect("block boundaries are token boundaries");
    let opts = ParseOptions { shadow_fields: p.shadow_fields.iter().map(|s| (s.strukt.clone(), s.field.clone(), s.ty)).collect() };
    let unit = parse_unit("patch.dpatch", &code, &opts)?;

    let block_of = |span: Span| blocks.iter().find(|(_, s, e)| span.start >= *s && span.end <= *e).map(|b| b.0);
    let misplaced = |span: Span, what: &str, want: &str| PatchError::Grammar {
        line: span.line,
        col: span.col,
        message: format!("{what} belongs in the '{want}' block"),
    };
    for s in &unit.structs {
        if block_of(s.span) != Some(Block::Declare) {
            return Err(misplaced(s.span, "struct definition", "declare"));
        }
    }
    for e in &unit.externs {
        let span = unit.decl_spans.iter().find(|(n, _)| n == e.name()).map(|d| d.1).unwrap_or_default();
        if block_of(span) != Some(Block::Declare) {
            return Err(misplaced(span, "declaration", "declare"));
        }
    }
    for g in &unit.globals {
        if block_of(g.span) != Some(Block::Define) {
            return Err(misplaced(g.span, "global definition", "define"));
        }
    }
    for f in &unit.functions {
        if block_of(f.span) != Some(Block::Function) {
            return Err(misplaced(f.span, "function definition", "function"));
        }
    }
    p.structs = unit.structs;
    p.externs = unit.externs;
    p.globals = unit.globals;
    p.replacement_functions = unit.functions;
    p.validate()?;
    Ok(p)
}
