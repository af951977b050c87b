use std::collections::{BTreeSet, HashMap};

use super::ast::*;
use super::lexer::{tokenize, Span, Tok, Token};
use super::types::{CType, NumericClass, ScalarType, Signature};
use super::{ParseError, ParseErrorKind, BUILTINS};

/// Extra knowledge a parse may rely on. Replacement bodies inside a
/// dynamic patch reference struct fields that only exist as shadow fields.
#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// `(struct, field, type)` triples accepted in member accesses even though
    /// the struct definition lacks them.
    pub shadow_fields: Vec<(String, String, ScalarType)>,
}

#[derive(Debug, Clone, PartialEq)]
enum Symbol {
    Function,
    Global(CType),
    Local(CType),
    Builtin,
}

/// Parse a translation unit. `file` names the source and qualifies
/// `static` symbols as `stem!name`.
pub fn parse_unit(file: &str, src: &str, opts: &ParseOptions) -> Result<TranslationUnit, ParseError> {
    let src = src.replace("\r\n", "\n");
    let toks = tokenize(&src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        unit: TranslationUnit { file: file.to_string(), ..Default::default() },
        stem: file_stem(file),
        names: HashMap::new(),
        functions: HashMap::new(),
        scopes: Vec::new(),
        opts,
    };
    p.parse_unit()?;
    let mut unit = p.unit;
    compute_address_taken(&mut unit);
    Ok(unit)
}

fn file_stem(file: &str) -> String {
    let base = file.rsplit('/').next().unwrap_or(file);
    let stem = base.split('.').next().unwrap_or(base);
    let s: String = stem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect();
    if s.is_empty() {
        "unit".into()
    } else {
        s
    }
}

struct Parser<'o> {
    toks: Vec<Token>,
    pos: usize,
    unit: TranslationUnit,
    stem: String,
    /// Source-level name to (qualified name, symbol).
    names: HashMap<String, (String, Symbol)>,
    /// Qualified function name to (signature, defined).
    functions: HashMap<String, (Signature, bool)>,
    scopes: Vec<HashMap<String, CType>>,
    opts: &'o ParseOptions,
}

const TYPE_WORDS: &[&str] = &[
    "void",
    "char",
    "short",
    "int",
    "long",
    "signed",
    "unsigned",
    "float",
    "double",
    "int8_t",
    "int16_t",
    "int32_t",
    "int64_t",
    "uint8_t",
    "uint16_t",
    "uint32_t",
    "uint64_t",
    "size_t",
    "u_int",
    "u_int8_t",
    "u_int16_t",
    "u_int32_t",
    "u_int64_t",
    "struct",
    "const",
    "volatile",
];

const UNSUPPORTED_WORDS: &[(&str, &str)] = &[
    ("typedef", "typedef"),
    ("union", "union"),
    ("enum", "enum"),
    ("goto", "goto"),
    ("switch", "switch statement"),
    ("case", "switch statement"),
    ("default", "switch statement"),
    ("for", "for loop"),
    ("do", "do-while loop"),
    ("sizeof", "sizeof"),
    ("register", "register storage class"),
    ("inline", "inline specifier"),
];

enum Declarator {
    Plain { name: String, ty: CType, span: Span },
    Function { name: String, sig: Signature, params: Vec<Param>, span: Span },
}

impl<'o> Parser<'o> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn span(&self) -> Span {
        self.toks[self.pos].span
    }

    fn prev_span(&self) -> Span {
        self.toks[self.pos.saturating_sub(1)].span
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at(&self, span: Span, kind: ParseErrorKind) -> ParseError {
        ParseError { line: span.line, col: span.col, kind }
    }

    fn syntax<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(self.error_at(self.span(), ParseErrorKind::Syntax(msg.into())))
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Tok::Ident(i) if i == w)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), ParseError> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            let found = self.toks[self.pos].text.clone();
            self.syntax(format!("expected '{p}', found {found:?}"))
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(name) if !is_keyword(&name) => {
                self.bump();
                Ok(name)
            }
            _ => {
                let found = self.toks[self.pos].text.clone();
                self.syntax(format!("expected identifier, found {found:?}"))
            }
        }
    }

    fn check_unsupported(&self) -> Result<(), ParseError> {
        if let Tok::Ident(w) = self.peek() {
            if let Some((_, what)) = UNSUPPORTED_WORDS.iter().find(|(k, _)| k == w) {
                return Err(self.error_at(self.span(), ParseErrorKind::Unsupported(what.to_string())));
            }
        }
        if self.is_punct("[") {
            return Err(self.error_at(self.span(), ParseErrorKind::Unsupported("array".into())));
        }
        if self.is_punct("?") {
            return Err(self.error_at(self.span(), ParseErrorKind::Unsupported("conditional operator".into())));
        }
        Ok(())
    }

    fn starts_type(&self) -> bool {
        matches!(self.peek(), Tok::Ident(w) if TYPE_WORDS.contains(&w.as_str()))
    }

    fn qualify(&self, name: &str, is_static: bool) -> String {
        if is_static && !name.contains('!') {
            format!("{}!{}", self.stem, name)
        } else {
            name.to_string()
        }
    }

    fn parse_unit(&mut self) -> Result<(), ParseError> {
        while *self.peek() != Tok::Eof {
            self.check_unsupported()?;
            if self.eat_punct(";") {
                continue;
            }
            self.parse_external()?;
        }
        Ok(())
    }

    /// Base type: `None` means `void`.
    fn parse_base_type(&mut self) -> Result<Option<CType>, ParseError> {
        let start = self.span();
        let mut words: Vec<String> = Vec::new();
        loop {
            self.check_unsupported()?;
            match self.peek().clone() {
                Tok::Ident(w) if w == "const" || w == "volatile" => {
                    self.bump();
                }
                Tok::Ident(w) if w == "struct" => {
                    if !words.is_empty() {
                        return self.syntax("unexpected 'struct'");
                    }
                    self.bump();
                    let name = self.expect_ident()?;
                    while self.is_word("const") || self.is_word("volatile") {
                        self.bump();
                    }
                    if self.eat_punct("*") {
                        if self.is_punct("*") {
                            return Err(self.error_at(self.span(), ParseErrorKind::Unsupported("pointer to pointer".into())));
                        }
                        return Ok(Some(CType::StructPtr(name)));
                    }
                    return Ok(Some(CType::Struct(name)));
                }
                Tok::Ident(w) if TYPE_WORDS.contains(&w.as_str()) => {
                    words.push(w);
                    self.bump();
                }
                _ => break,
            }
        }
        if words.is_empty() {
            return self.syntax("expected a type");
        }
        let ty = scalar_from_words(&words)
            .ok_or_else(|| self.error_at(start, ParseErrorKind::Syntax(format!("invalid type specifier '{}'", words.join(" ")))))?;
        if self.is_punct("*") {
            return Err(self.error_at(self.span(), ParseErrorKind::Unsupported("pointer to non-struct type".into())));
        }
        Ok(ty)
    }

    /// After a base type: `name`, `name(params)` or `(*name)(params)`.
    fn parse_declarator(&mut self, base: Option<CType>) -> Result<Declarator, ParseError> {
        let span = self.span();
        if self.is_punct("(") && matches!(self.peek_at(1), Tok::Punct("*")) {
            self.bump();
            self.bump();
            let name = self.expect_ident()?;
            self.expect_punct(")")?;
            self.expect_punct("(")?;
            let (sig_params, variadic) = self.parse_params()?;
            let sig = Signature { ret: base, params: sig_params.into_iter().map(|p| p.ty).collect(), variadic };
            return Ok(Declarator::Plain { name, ty: CType::FnPtr(Box::new(sig)), span });
        }
        let name = self.expect_ident()?;
        self.check_unsupported()?;
        if self.eat_punct("(") {
            let (params, variadic) = self.parse_params()?;
            let sig = Signature { ret: base, params: params.iter().map(|p| p.ty.clone()).collect(), variadic };
            return Ok(Declarator::Function { name, sig, params, span });
        }
        match base {
            Some(ty) => Ok(Declarator::Plain { name, ty, span }),
            None => Err(self.error_at(span, ParseErrorKind::Syntax("variable declared void".into()))),
        }
    }

    /// Parameter list after the opening parenthesis, consuming `)`.
    fn parse_params(&mut self) -> Result<(Vec<Param>, bool), ParseError> {
        let mut params = Vec::new();
        let mut variadic = false;
        if self.eat_punct(")") {
            return Ok((params, false));
        }
        if self.is_word("void") && matches!(self.peek_at(1), Tok::Punct(")")) {
            self.bump();
            self.bump();
            return Ok((params, false));
        }
        loop {
            if self.eat_punct("...") {
                variadic = true;
                self.expect_punct(")")?;
                break;
            }
            let base = self.parse_base_type()?;
            let (name, ty) = if self.is_punct("(") {
                match self.parse_declarator(base)? {
                    Declarator::Plain { name, ty, .. } => (name, ty),
                    Declarator::Function { .. } => return self.syntax("function parameter must be a pointer"),
                }
            } else {
                let Some(ty) = base else {
                    return self.syntax("parameter declared void");
                };
                let name = match self.peek().clone() {
                    Tok::Ident(n) if !is_keyword(&n) => {
                        self.bump();
                        n
                    }
                    _ => String::new(),
                };
                (name, ty)
            };
            self.check_unsupported()?;
            params.push(Param { name, ty });
            if self.eat_punct(")") {
                break;
            }
            self.expect_punct(",")?;
        }
        if variadic && params.is_empty() {
            return self.syntax("variadic function needs at least one fixed parameter");
        }
        Ok((params, variadic))
    }

    fn parse_external(&mut self) -> Result<(), ParseError> {
        let start = self.span();
        let mut is_static = false;
        let mut is_extern = false;
        loop {
            if self.is_word("static") {
                is_static = true;
                self.bump();
            } else if self.is_word("extern") {
                is_extern = true;
                self.bump();
            } else {
                break;
            }
        }
        if self.is_word("struct") && matches!(self.peek_at(1), Tok::Ident(_)) && matches!(self.peek_at(2), Tok::Punct("{")) {
            return self.parse_struct_def(start);
        }
        let base = self.parse_base_type()?;
        let mut declared = Vec::new();
        loop {
            let decl = self.parse_declarator(base.clone())?;
            match decl {
                Declarator::Function { name, sig, params, span } => {
                    let qname = self.qualify(&name, is_static);
                    if self.is_punct("{") {
                        if is_extern {
                            return Err(self.error_at(span, ParseErrorKind::Syntax("extern function with a body".into())));
                        }
                        self.declare_function(&name, &qname, &sig, true, span)?;
                        let f = self.parse_function_body(qname, sig, params, is_static, start)?;
                        self.unit.functions.push(f);
                        return Ok(());
                    }
                    self.declare_function(&name, &qname, &sig, false, span)?;
                    declared.push(qname.clone());
                    if !self.unit.externs.iter().any(|e| e.name() == qname) {
                        self.unit.externs.push(ExternDecl::Function { name: qname, signature: sig });
                    }
                }
                Declarator::Plain { name, ty, span } => {
                    let qname = self.qualify(&name, is_static);
                    if let CType::Struct(s) | CType::StructPtr(s) = &ty {
                        if self.unit.struct_def(s).is_none() {
                            return Err(self.error_at(span, ParseErrorKind::Undeclared(format!("struct {s}"))));
                        }
                    }
                    if is_extern {
                        if self.eat_punct("=") {
                            return self.syntax("extern declaration with initializer");
                        }
                        self.declare_global(&name, &qname, ty.clone(), span, true)?;
                        declared.push(qname.clone());
                        self.unit.externs.push(ExternDecl::Global { name: qname, ty });
                    } else {
                        let init = if self.eat_punct("=") { Some(self.parse_initializer(&ty)?) } else { None };
                        self.declare_global(&name, &qname, ty.clone(), span, false)?;
                        let span = start.to(self.prev_span());
                        self.unit.globals.push(GlobalVar { name: qname, ty, init, is_static, span });
                    }
                }
            }
            if self.eat_punct(",") {
                continue;
            }
            self.expect_punct(";")?;
            let span = start.to(self.prev_span());
            self.unit.decl_spans.extend(declared.into_iter().map(|n| (n, span)));
            return Ok(());
        }
    }

    fn declare_function(&mut self, name: &str, qname: &str, sig: &Signature, define: bool, span: Span) -> Result<(), ParseError> {
        if let Some((_, sym)) = self.names.get(name) {
            if *sym != Symbol::Function {
                return Err(self.error_at(span, ParseErrorKind::Duplicate(name.to_string())));
            }
        }
        match self.functions.get_mut(qname) {
            Some((old_sig, defined)) => {
                if old_sig != sig {
                    return Err(self.error_at(span, ParseErrorKind::Syntax(format!("conflicting types for '{name}'"))));
                }
                if define && *defined {
                    return Err(self.error_at(span, ParseErrorKind::Duplicate(name.to_string())));
                }
                *defined |= define;
            }
            None => {
                self.functions.insert(qname.to_string(), (sig.clone(), define));
            }
        }
        self.names.insert(name.to_string(), (qname.to_string(), Symbol::Function));
        Ok(())
    }

    fn declare_global(&mut self, name: &str, qname: &str, ty: CType, span: Span, is_extern: bool) -> Result<(), ParseError> {
        if let Some((_, sym)) = self.names.get(name) {
            let compatible_redecl = matches!(sym, Symbol::Global(t) if *t == ty) && (is_extern || self.unit.global(qname).is_none());
            if !compatible_redecl {
                return Err(self.error_at(span, ParseErrorKind::Duplicate(name.to_string())));
            }
        }
        self.names.insert(name.to_string(), (qname.to_string(), Symbol::Global(ty)));
        Ok(())
    }

    fn parse_struct_def(&mut self, start: Span) -> Result<(), ParseError> {
        self.bump(); // struct
        let name = self.expect_ident()?;
        if self.unit.struct_def(&name).is_some() {
            return Err(self.error_at(start, ParseErrorKind::Duplicate(format!("struct {name}"))));
        }
        self.expect_punct("{")?;
        let mut fields: Vec<StructField> = Vec::new();
        while !self.eat_punct("}") {
            let ty_span = self.span();
            let ty = match self.parse_base_type()? {
                Some(CType::Scalar(s)) => s,
                _ => return Err(self.error_at(ty_span, ParseErrorKind::Unsupported("non-scalar struct field".into()))),
            };
            let field = self.expect_ident()?;
            self.check_unsupported()?;
            if self.is_punct(":") {
                return Err(self.error_at(self.span(), ParseErrorKind::Unsupported("bitfield".into())));
            }
            if fields.iter().any(|f| f.name == field) {
                return Err(self.error_at(ty_span, ParseErrorKind::Duplicate(format!("{name}.{field}"))));
            }
            fields.push(StructField { name: field, ty });
            self.expect_punct(";")?;
        }
        self.expect_punct(";")?;
        let span = start.to(self.prev_span());
        self.unit.structs.push(StructDef { name, fields, span });
        Ok(())
    }

    fn parse_initializer(&mut self, ty: &CType) -> Result<Initializer, ParseError> {
        let span = self.span();
        if self.eat_punct("{") {
            let mut items = Vec::new();
            while !self.eat_punct("}") {
                items.push(self.parse_const_expr()?);
                if !self.eat_punct(",") {
                    self.expect_punct("}")?;
                    break;
                }
            }
            let CType::Struct(s) = ty else {
                return Err(self.error_at(span, ParseErrorKind::Syntax("aggregate initializer for non-struct".into())));
            };
            let n = self.unit.struct_def(s).map(|d| d.fields.len()).unwrap_or(0);
            if items.len() > n {
                return Err(self.error_at(span, ParseErrorKind::Syntax("too many initializers".into())));
            }
            return Ok(Initializer::Aggregate(items));
        }
        Ok(Initializer::Scalar(self.parse_const_expr()?))
    }

    fn parse_const_expr(&mut self) -> Result<Expr, ParseError> {
        let span = self.span();
        let e = self.parse_assign()?;
        let ok = match &e {
            Expr::Int(_) | Expr::Float(_) => true,
            Expr::Unary { op: super::ast::UnOp::Neg, operand } => matches!(**operand, Expr::Int(_) | Expr::Float(_)),
            Expr::Var(n) => self.functions.contains_key(n),
            Expr::AddrOf(inner) => matches!(&**inner, Expr::Var(n) if self.functions.contains_key(n) || self.unit.global(n).is_some()),
            _ => false,
        };
        if ok {
            Ok(e)
        } else {
            Err(self.error_at(span, ParseErrorKind::Unsupported("non-constant initializer".into())))
        }
    }

    fn parse_function_body(
        &mut self,
        name: String,
        signature: Signature,
        params: Vec<Param>,
        is_static: bool,
        start: Span,
    ) -> Result<FunctionDef, ParseError> {
        let body_start = self.pos;
        self.scopes.push(HashMap::new());
        for p in &params {
            if p.name.is_empty() {
                return Err(self.error_at(start, ParseErrorKind::Syntax("unnamed parameter in definition".into())));
            }
            self.declare_local(&p.name, p.ty.clone(), start)?;
        }
        let body = self.parse_block()?;
        self.scopes.clear();
        let body_tokens = self.toks[body_start..self.pos].iter().map(|t| t.text.clone()).collect();
        let span = start.to(self.prev_span());
        Ok(FunctionDef { name, signature, params, body, is_static, address_taken: false, span, body_tokens })
    }

    fn declare_local(&mut self, name: &str, ty: CType, span: Span) -> Result<(), ParseError> {
        if self.names.contains_key(name) || BUILTINS.contains(&name) {
            return Err(self.error_at(span, ParseErrorKind::Unsupported(format!("local '{name}' shadows a global name"))));
        }
        let scope = self.scopes.last_mut().expect("inside a function");
        if scope.contains_key(name) {
            return Err(self.error_at(span, ParseErrorKind::Duplicate(name.to_string())));
        }
        scope.insert(name.to_string(), ty);
        // The outermost block shares its scope with the parameters.
        if self.scopes.len() == 2 && self.scopes[0].contains_key(name) {
            return Err(self.error_at(span, ParseErrorKind::Duplicate(name.to_string())));
        }
        Ok(())
    }

    fn lookup(&self, name: &str) -> Option<(String, Symbol)> {
        for scope in self.scopes.iter().rev() {
            if let Some(t) = scope.get(name) {
                return Some((name.to_string(), Symbol::Local(t.clone())));
            }
        }
        if let Some((q, s)) = self.names.get(name) {
            return Some((q.clone(), s.clone()));
        }
        if name.contains('!') {
            if self.functions.contains_key(name) {
                return Some((name.to_string(), Symbol::Function));
            }
            if let Some(g) = self.unit.global(name) {
                return Some((name.to_string(), Symbol::Global(g.ty.clone())));
            }
        }
        if BUILTINS.contains(&name) {
            return Some((name.to_string(), Symbol::Builtin));
        }
        None
    }

    fn parse_block(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect_punct("{")?;
        self.scopes.push(HashMap::new());
        let mut stmts = Vec::new();
        while !self.eat_punct("}") {
            if *self.peek() == Tok::Eof {
                return self.syntax("unexpected end of input in block");
            }
            self.parse_stmt_into(&mut stmts)?;
        }
        self.scopes.pop();
        Ok(stmts)
    }

    /// A statement used as an `if`/`while` body is normalized to a list.
    fn parse_body(&mut self) -> Result<Vec<Stmt>, ParseError> {
        if self.is_punct("{") {
            return self.parse_block();
        }
        self.scopes.push(HashMap::new());
        let mut out = Vec::new();
        self.parse_stmt_into(&mut out)?;
        self.scopes.pop();
        Ok(out)
    }

    fn parse_stmt_into(&mut self, out: &mut Vec<Stmt>) -> Result<(), ParseError> {
        self.check_unsupported()?;
        if matches!(self.peek(), Tok::Ident(w) if !is_keyword(w)) && matches!(self.peek_at(1), Tok::Punct(":")) {
            return Err(self.error_at(self.span(), ParseErrorKind::Unsupported("label".into())));
        }
        if self.starts_type() {
            let span = self.span();
            let base = self.parse_base_type()?;
            loop {
                let (name, ty) = match self.parse_declarator(base.clone())? {
                    Declarator::Plain { name, ty, .. } => (name, ty),
                    Declarator::Function { .. } => return Err(self.error_at(span, ParseErrorKind::Unsupported("local function declaration".into()))),
                };
                if matches!(ty, CType::Struct(_)) {
                    return Err(self.error_at(span, ParseErrorKind::Unsupported("struct local by value".into())));
                }
                if let CType::StructPtr(s) = &ty {
                    if self.unit.struct_def(s).is_none() {
                        return Err(self.error_at(span, ParseErrorKind::Undeclared(format!("struct {s}"))));
                    }
                }
                let init = if self.eat_punct("=") { Some(self.parse_assign()?) } else { None };
                self.declare_local(&name, ty.clone(), span)?;
                out.push(Stmt::Decl { name, ty, init });
                if !self.eat_punct(",") {
                    break;
                }
            }
            return self.expect_punct(";");
        }
        if self.is_punct("{") {
            out.push(Stmt::Block(self.parse_block()?));
            return Ok(());
        }
        if self.eat_punct(";") {
            return Ok(());
        }
        if self.is_word("if") {
            self.bump();
            self.expect_punct("(")?;
            let cond = self.parse_expr()?;
            self.expect_punct(")")?;
            let then_branch = self.parse_body()?;
            let else_branch = if self.is_word("else") {
                self.bump();
                Some(self.parse_body()?)
            } else {
                None
            };
            out.push(Stmt::If { cond, then_branch, else_branch });
            return Ok(());
        }
        if self.is_word("while") {
            self.bump();
            self.expect_punct("(")?;
            let cond = self.parse_expr()?;
            self.expect_punct(")")?;
            let body = self.parse_body()?;
            out.push(Stmt::While { cond, body });
            return Ok(());
        }
        if self.is_word("return") {
            self.bump();
            let value = if self.is_punct(";") { None } else { Some(self.parse_expr()?) };
            self.expect_punct(";")?;
            out.push(Stmt::Return(value));
            return Ok(());
        }
        if self.is_word("break") || self.is_word("continue") {
            let s = if self.is_word("break") { Stmt::Break } else { Stmt::Continue };
            self.bump();
            self.expect_punct(";")?;
            out.push(s);
            return Ok(());
        }
        let e = self.parse_expr()?;
        self.expect_punct(";")?;
        out.push(Stmt::Expr(e));
        Ok(())
    }

    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        self.parse_assign()
    }

    fn parse_assign(&mut self) -> Result<Expr, ParseError> {
        let span = self.span();
        let lhs = self.parse_binary(0)?;
        let op = match self.peek() {
            Tok::Punct("=") => None,
            Tok::Punct(p) => match compound_op(p) {
                Some(op) => Some(op),
                None => return Ok(lhs),
            },
            _ => return Ok(lhs),
        };
        self.bump();
        self.check_lvalue(&lhs, span)?;
        let rhs = self.parse_assign()?;
        Ok(Expr::Assign { op, target: Box::new(lhs), value: Box::new(rhs) })
    }

    fn check_lvalue(&self, e: &Expr, span: Span) -> Result<(), ParseError> {
        match e {
            Expr::Var(n) => match self.lookup_qualified(n) {
                Some(Symbol::Local(_)) | Some(Symbol::Global(_)) => Ok(()),
                _ => Err(self.error_at(span, ParseErrorKind::Syntax(format!("'{n}' is not assignable")))),
            },
            Expr::Member { .. } => Ok(()),
            _ => Err(self.error_at(span, ParseErrorKind::Syntax("expression is not assignable".into()))),
        }
    }

    fn lookup_qualified(&self, qname: &str) -> Option<Symbol> {
        for scope in self.scopes.iter().rev() {
            if let Some(t) = scope.get(qname) {
                return Some(Symbol::Local(t.clone()));
            }
        }
        if self.functions.contains_key(qname) {
            return Some(Symbol::Function);
        }
        self.names.values().find(|(q, _)| q == qname).map(|(_, s)| s.clone())
    }

    fn parse_binary(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_unary()?;
        loop {
            self.check_unsupported()?;
            let Tok::Punct(p) = self.peek() else { break };
            let Some((op, prec)) = binary_op(p) else { break };
            if prec < min_prec {
                break;
            }
            self.bump();
            let rhs = self.parse_binary(prec + 1)?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        self.check_unsupported()?;
        let span = self.span();
        let op = match self.peek() {
            Tok::Punct("-") => Some(UnOp::Neg),
            Tok::Punct("!") => Some(UnOp::Not),
            Tok::Punct("~") => Some(UnOp::BitNot),
            Tok::Punct("+") => {
                self.bump();
                return self.parse_unary();
            }
            Tok::Punct("&") => {
                self.bump();
                let inner = self.parse_unary()?;
                return match &inner {
                    Expr::Var(n) if matches!(self.lookup_qualified(n), Some(Symbol::Function) | Some(Symbol::Global(CType::Struct(_)))) => {
                        Ok(Expr::AddrOf(Box::new(inner)))
                    }
                    _ => Err(self.error_at(span, ParseErrorKind::Unsupported("address-of a non-function, non-struct object".into()))),
                };
            }
            Tok::Punct("*") => {
                return Err(self.error_at(span, ParseErrorKind::Unsupported("pointer dereference".into())));
            }
            Tok::Punct(p @ ("++" | "--")) => {
                let increment = *p == "++";
                self.bump();
                let target = self.parse_unary()?;
                self.check_lvalue(&target, span)?;
                return Ok(Expr::IncDec { target: Box::new(target), increment, prefix: true });
            }
            _ => None,
        };
        if let Some(op) = op {
            self.bump();
            let operand = self.parse_unary()?;
            return Ok(Expr::Unary { op, operand: Box::new(operand) });
        }
        self.parse_postfix()
    }

    fn parse_postfix(&mut self) -> Result<Expr, ParseError> {
        let span = self.span();
        let mut e = self.parse_primary()?;
        loop {
            self.check_unsupported()?;
            if self.eat_punct("(") {
                let mut args = Vec::new();
                if !self.eat_punct(")") {
                    loop {
                        args.push(self.parse_assign()?);
                        if self.eat_punct(")") {
                            break;
                        }
                        self.expect_punct(",")?;
                    }
                }
                self.check_call(&e, &args, span)?;
                e = Expr::Call { callee: Box::new(e), args };
            } else if self.is_punct(".") || self.is_punct("->") {
                let arrow = self.is_punct("->");
                self.bump();
                let field = self.expect_ident()?;
                self.check_member(&e, &field, arrow, span)?;
                e = Expr::Member { base: Box::new(e), field, arrow };
            } else if self.is_punct("++") || self.is_punct("--") {
                let increment = self.is_punct("++");
                self.bump();
                self.check_lvalue(&e, span)?;
                e = Expr::IncDec { target: Box::new(e), increment, prefix: false };
            } else {
                break;
            }
        }
        Ok(e)
    }

    fn check_call(&self, callee: &Expr, args: &[Expr], span: Span) -> Result<(), ParseError> {
        let sig = match callee {
            Expr::Var(n) => match self.lookup_qualified(n) {
                Some(Symbol::Function) => self.functions.get(n).map(|(s, _)| s.clone()),
                Some(Symbol::Local(CType::FnPtr(s))) | Some(Symbol::Global(CType::FnPtr(s))) => Some(*s),
                Some(Symbol::Builtin) | None if BUILTINS.contains(&n.as_str()) => return Ok(()),
                _ => return Err(self.error_at(span, ParseErrorKind::Syntax(format!("'{n}' is not callable")))),
            },
            Expr::Member { .. } => return Err(self.error_at(span, ParseErrorKind::Unsupported("call through struct member".into()))),
            _ => return Err(self.error_at(span, ParseErrorKind::Unsupported("call of a computed expression".into()))),
        };
        if let Some(sig) = sig {
            let ok = if sig.variadic { args.len() >= sig.params.len() } else { args.len() == sig.params.len() };
            if !ok {
                return Err(self.error_at(span, ParseErrorKind::Syntax(format!("wrong number of arguments ({} given)", args.len()))));
            }
        }
        Ok(())
    }

    fn check_member(&self, base: &Expr, field: &str, arrow: bool, span: Span) -> Result<(), ParseError> {
        let ty = match base {
            Expr::Var(n) => match self.lookup_qualified(n) {
                Some(Symbol::Local(t)) | Some(Symbol::Global(t)) => t,
                _ => return Err(self.error_at(span, ParseErrorKind::Syntax(format!("'{n}' has no members")))),
            },
            _ => return Err(self.error_at(span, ParseErrorKind::Unsupported("nested member access".into()))),
        };
        let sname = match (&ty, arrow) {
            (CType::Struct(s), false) | (CType::StructPtr(s), true) => s.clone(),
            _ => return Err(self.error_at(span, ParseErrorKind::Syntax("member access on wrong kind of value".into()))),
        };
        let known = self.unit.struct_def(&sname).is_some_and(|d| d.field_index(field).is_some())
            || self.opts.shadow_fields.iter().any(|(s, f, _)| *s == sname && f == field);
        if known {
            Ok(())
        } else {
            Err(self.error_at(span, ParseErrorKind::Undeclared(format!("{sname}.{field}"))))
        }
    }

    fn parse_primary(&mut self) -> Result<Expr, ParseError> {
        self.check_unsupported()?;
        let span = self.span();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Int(v))
            }
            Tok::Float(v) => {
                self.bump();
                Ok(Expr::Float(v))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Expr::Str(s))
            }
            Tok::Ident(name) if !is_keyword(&name) => {
                self.bump();
                match self.lookup(&name) {
                    Some((q, _)) => Ok(Expr::Var(q)),
                    None => Err(self.error_at(span, ParseErrorKind::Undeclared(name))),
                }
            }
            Tok::Punct("(") => {
                if matches!(self.peek_at(1), Tok::Ident(w) if TYPE_WORDS.contains(&w.as_str())) {
                    return Err(self.error_at(span, ParseErrorKind::Unsupported("cast".into())));
                }
                self.bump();
                let e = self.parse_expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Eof => self.syntax("unexpected end of input"),
            _ => {
                let found = self.toks[self.pos].text.clone();
                self.syntax(format!("unexpected token {found:?}"))
            }
        }
    }
}

fn is_keyword(w: &str) -> bool {
    matches!(w, "if" | "else" | "while" | "return" | "break" | "continue" | "static" | "extern" | "struct")
        || TYPE_WORDS.contains(&w)
        || UNSUPPORTED_WORDS.iter().any(|(k, _)| *k == w)
}

fn compound_op(p: &str) -> Option<BinOp> {
    Some(match p {
        "+=" => BinOp::Add,
        "-=" => BinOp::Sub,
        "*=" => BinOp::Mul,
        "/=" => BinOp::Div,
        "%=" => BinOp::Rem,
        "<<=" => BinOp::Shl,
        ">>=" => BinOp::Shr,
        "&=" => BinOp::BitAnd,
        "|=" => BinOp::BitOr,
        "^=" => BinOp::BitXor,
        _ => return None,
    })
}

fn binary_op(p: &str) -> Option<(BinOp, u8)> {
    Some(match p {
        "||" => (BinOp::Or, 1),
        "&&" => (BinOp::And, 2),
        "|" => (BinOp::BitOr, 3),
        "^" => (BinOp::BitXor, 4),
        "&" => (BinOp::BitAnd, 5),
        "==" => (BinOp::Eq, 6),
        "!=" => (BinOp::Ne, 6),
        "<" => (BinOp::Lt, 7),
        "<=" => (BinOp::Le, 7),
        ">" => (BinOp::Gt, 7),
        ">=" => (BinOp::Ge, 7),
        "<<" => (BinOp::Shl, 8),
        ">>" => (BinOp::Shr, 8),
        "+" => (BinOp::Add, 9),
        "-" => (BinOp::Sub, 9),
        "*" => (BinOp::Mul, 10),
        "/" => (BinOp::Div, 10),
        "%" => (BinOp::Rem, 10),
        _ => return None,
    })
}

/// Map a list of C type keywords to a scalar. `Some(None)` is `void`.
fn scalar_from_words(words: &[String]) -> Option<Option<CType>> {
    use NumericClass::*;
    let w: Vec<&str> = words.iter().map(String::as_str).collect();
    let fixed = |s: &str| -> Option<ScalarType> {
        Some(match s {
            "int8_t" => ScalarType::I8,
            "int16_t" => ScalarType::I16,
            "int32_t" => ScalarType::I32,
            "int64_t" => ScalarType::I64,
            "uint8_t" | "u_int8_t" => ScalarType::U8,
            "uint16_t" | "u_int16_t" => ScalarType::U16,
            "uint32_t" | "u_int32_t" | "u_int" => ScalarType::U32,
            "uint64_t" | "u_int64_t" | "size_t" => ScalarType::U64,
            _ => return None,
        })
    };
    if w == ["void"] {
        return Some(None);
    }
    if w.len() == 1 {
        if let Some(t) = fixed(w[0]) {
            return Some(Some(CType::Scalar(t)));
        }
    }
    let unsigned = w.contains(&"unsigned");
    let signed = w.contains(&"signed");
    if unsigned && signed {
        return None;
    }
    let rest: Vec<&str> = w.iter().copied().filter(|x| *x != "unsigned" && *x != "signed").collect();
    let longs = rest.iter().filter(|x| **x == "long").count();
    let others: Vec<&str> = rest.iter().copied().filter(|x| *x != "long").collect();
    let class = if unsigned { UnsignedInt } else { SignedInt };
    let t = match (others.as_slice(), longs) {
        (["float"], 0) if !unsigned && !signed => ScalarType::F32,
        (["double"], 0 | 1) if !unsigned && !signed => ScalarType::F64,
        (["char"], 0) => ScalarType::new(class, 8)?,
        (["short"] | ["short", "int"] | ["int", "short"], 0) => ScalarType::new(class, 16)?,
        ([] | ["int"], 0) if unsigned || signed || !others.is_empty() => ScalarType::new(class, 32)?,
        ([] | ["int"], 1 | 2) => ScalarType::new(class, 64)?,
        _ => return None,
    };
    Some(Some(CType::Scalar(t)))
}

/// A function's address is taken when its name appears anywhere other than
/// the callee position of a direct call.
fn compute_address_taken(unit: &mut TranslationUnit) {
    let fnames: BTreeSet<String> = unit.functions.iter().map(|f| f.name.clone()).collect();
    let mut taken = BTreeSet::new();
    let visit = |e: &Expr, taken: &mut BTreeSet<String>| {
        collect_non_callee(e, &fnames, taken);
    };
    for g in &unit.globals {
        match &g.init {
            Some(Initializer::Scalar(e)) => visit(e, &mut taken),
            Some(Initializer::Aggregate(es)) => es.iter().for_each(|e| visit(e, &mut taken)),
            None => {}
        }
    }
    for f in &unit.functions {
        for s in &f.body {
            visit_stmt_exprs(s, &mut |e| collect_non_callee(e, &fnames, &mut taken));
        }
    }
    for f in &mut unit.functions {
        f.address_taken = taken.contains(&f.name);
    }
}

fn visit_stmt_exprs(s: &Stmt, f: &mut impl FnMut(&Expr)) {
    // Top-level expressions only; `collect_non_callee` recurses itself.
    match s {
        Stmt::Decl { init: Some(e), .. } | Stmt::Expr(e) | Stmt::Return(Some(e)) => f(e),
        Stmt::If { cond, then_branch, else_branch } => {
            f(cond);
            then_branch.iter().for_each(|s| visit_stmt_exprs(s, f));
            else_branch.iter().flatten().for_each(|s| visit_stmt_exprs(s, f));
        }
        Stmt::While { cond, body } => {
            f(cond);
            body.iter().for_each(|s| visit_stmt_exprs(s, f));
        }
        Stmt::Block(b) => b.iter().for_each(|s| visit_stmt_exprs(s, f)),
        _ => {}
    }
}

fn collect_non_callee(e: &Expr, fnames: &BTreeSet<String>, out: &mut BTreeSet<String>) {
    match e {
        Expr::Var(n) if fnames.contains(n) => {
            out.insert(n.clone());
        }
        Expr::Call { callee, args } => {
            if !matches!(&**callee, Expr::Var(_)) {
                collect_non_callee(callee, fnames, out);
            }
            for a in args {
                collect_non_callee(a, fnames, out);
            }
        }
        Expr::Unary { operand, .. } => collect_non_callee(operand, fnames, out),
        Expr::Binary { lhs, rhs, .. } => {
            collect_non_callee(lhs, fnames, out);
            collect_non_callee(rhs, fnames, out);
        }
        Expr::Assign { target, value, .. } => {
            collect_non_callee(target, fnames, out);
            collect_non_callee(value, fnames, out);
        }
        Expr::IncDec { target, .. } => collect_non_callee(target, fnames, out),
        Expr::Member { base, .. } => collect_non_callee(base, fnames, out),
        Expr::AddrOf(inner) => collect_non_callee(inner, fnames, out),
        _ => {}
    }
}
