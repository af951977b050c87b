use serde::{Deserialize, Serialize};

use super::lexer::Span;
use super::types::{CType, ScalarType, Signature};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TranslationUnit {
    pub file: String,
    pub structs: Vec<StructDef>,
    pub globals: Vec<GlobalVar>,
    pub externs: Vec<ExternDecl>,
    pub functions: Vec<FunctionDef>,
    /// Source spans of prototypes and `extern` declarations, by name.
    pub decl_spans: Vec<(String, Span)>,
}

impl TranslationUnit {
    pub fn function(&self, name: &str) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalVar> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn struct_def(&self, name: &str) -> Option<&StructDef> {
        self.structs.iter().find(|s| s.name == name)
    }

    /// Signature of a defined or declared function.
    pub fn signature_of(&self, name: &str) -> Option<&Signature> {
        self.function(name).map(|f| &f.signature).or_else(|| {
            self.externs.iter().find_map(|e| match e {
                ExternDecl::Function { name: n, signature } if n == name => Some(signature),
                _ => None,
            })
        })
    }

    /// Type of a defined or `extern`-declared global.
    pub fn global_type(&self, name: &str) -> Option<&CType> {
        self.global(name).map(|g| &g.ty).or_else(|| {
            self.externs.iter().find_map(|e| match e {
                ExternDecl::Global { name: n, ty } if n == name => Some(ty),
                _ => None,
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructField {
    pub name: String,
    pub ty: ScalarType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructDef {
    pub name: String,
    pub fields: Vec<StructField>,
    pub span: Span,
}

impl PartialEq for StructDef {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.fields == other.fields
    }
}

impl StructDef {
    pub fn field_index(&self, field: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == field)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    Scalar(Expr),
    Aggregate(Vec<Expr>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalVar {
    pub name: String,
    pub ty: CType,
    pub init: Option<Initializer>,
    pub is_static: bool,
    pub span: Span,
}

impl PartialEq for GlobalVar {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.ty == other.ty && self.init == other.init && self.is_static == other.is_static
    }
}

/// `extern` globals and function prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternDecl {
    Function { name: String, signature: Signature },
    Global { name: String, ty: CType },
}

impl ExternDecl {
    pub fn name(&self) -> &str {
        match self {
            ExternDecl::Function { name, .. } | ExternDecl::Global { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub ty: CType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionDef {
    pub name: String,
    pub signature: Signature,
    pub params: Vec<Param>,
    pub body: Vec<Stmt>,
    pub is_static: bool,
    /// The name occurs somewhere other than the callee position of a direct call.
    pub address_taken: bool,
    /// Whole definition, from the return type to the closing brace.
    pub span: Span,
    /// Token texts of the body, comments and whitespace excluded.
    pub body_tokens: Vec<String>,
}

/// Structural equality: spans, derived token streams and `address_taken`
/// (a property of the enclosing unit) are ignored.
impl PartialEq for FunctionDef {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.signature == other.signature
            && self.params == other.params
            && self.body == other.body
            && self.is_static == other.is_static
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stmt {
    Decl { name: String, ty: CType, init: Option<Expr> },
    Expr(Expr),
    If { cond: Expr, then_branch: Vec<Stmt>, else_branch: Option<Vec<Stmt>> },
    While { cond: Expr, body: Vec<Stmt> },
    Return(Option<Expr>),
    Block(Vec<Stmt>),
    Break,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Shl,
    Shr,
    BitAnd,
    BitOr,
    BitXor,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::BitAnd => "&",
            BinOp::BitOr => "|",
            BinOp::BitXor => "^",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnOp {
    Neg,
    Not,
    BitNot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Int(i128),
    Float(f64),
    Str(String),
    Var(String),
    Unary {
        op: UnOp,
        operand: Box<Expr>,
    },
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    /// `op` is set for compound assignment (`+=` and friends).
    Assign {
        op: Option<BinOp>,
        target: Box<Expr>,
        value: Box<Expr>,
    },
    IncDec {
        target: Box<Expr>,
        increment: bool,
        prefix: bool,
    },
    Call {
        callee: Box<Expr>,
        args: Vec<Expr>,
    },
    Member {
        base: Box<Expr>,
        field: String,
        arrow: bool,
    },
    AddrOf(Box<Expr>),
}

impl Expr {
    /// Depth-first visit of this expression and all subexpressions.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Unary { operand, .. } => operand.walk(f),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.walk(f);
                rhs.walk(f);
            }
            Expr::Assign { target, value, .. } => {
                target.walk(f);
                value.walk(f);
            }
            Expr::IncDec { target, .. } => target.walk(f),
            Expr::Call { callee, args } => {
                callee.walk(f);
                for a in args {
                    a.walk(f);
                }
            }
            Expr::Member { base, .. } => base.walk(f),
            Expr::AddrOf(e) => e.walk(f),
            Expr::Int(_) | Expr::Float(_) | Expr::Str(_) | Expr::Var(_) => {}
        }
    }

    pub fn walk_mut(&mut self, f: &mut impl FnMut(&mut Expr)) {
        f(self);
        match self {
            Expr::Unary { operand, .. } => operand.walk_mut(f),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.walk_mut(f);
                rhs.walk_mut(f);
            }
            Expr::Assign { target, value, .. } => {
                target.walk_mut(f);
                value.walk_mut(f);
            }
            Expr::IncDec { target, .. } => target.walk_mut(f),
            Expr::Call { callee, args } => {
                callee.walk_mut(f);
                for a in args {
                    a.walk_mut(f);
                }
            }
            Expr::Member { base, .. } => base.walk_mut(f),
            Expr::AddrOf(e) => e.walk_mut(f),
            Expr::Int(_) | Expr::Float(_) | Expr::Str(_) | Expr::Var(_) => {}
        }
    }
}

impl Stmt {
    /// Visit every expression in this statement tree.
    pub fn walk_exprs<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        match self {
            Stmt::Decl { init, .. } => {
                if let Some(e) = init {
                    e.walk(f);
                }
            }
            Stmt::Expr(e) => e.walk(f),
            Stmt::If { cond, then_branch, else_branch } => {
                cond.walk(f);
                for s in then_branch {
                    s.walk_exprs(f);
                }
                for s in else_branch.iter().flatten() {
                    s.walk_exprs(f);
                }
            }
            Stmt::While { cond, body } => {
                cond.walk(f);
                for s in body {
                    s.walk_exprs(f);
                }
            }
            Stmt::Return(e) => {
                if let Some(e) = e {
                    e.walk(f);
                }
            }
            Stmt::Block(b) => {
                for s in b {
                    s.walk_exprs(f);
                }
            }
            Stmt::Break | Stmt::Continue => {}
        }
    }

    pub fn walk_exprs_mut(&mut self, f: &mut impl FnMut(&mut Expr)) {
        match self {
            Stmt::Decl { init, .. } => {
                if let Some(e) = init {
                    e.walk_mut(f);
                }
            }
            Stmt::Expr(e) => e.walk_mut(f),
            Stmt::If { cond, then_branch, else_branch } => {
                cond.walk_mut(f);
                for s in then_branch {
                    s.walk_exprs_mut(f);
                }
                for s in else_branch.iter_mut().flatten() {
                    s.walk_exprs_mut(f);
                }
            }
            Stmt::While { cond, body } => {
                cond.walk_mut(f);
                for s in body {
                    s.walk_exprs_mut(f);
                }
            }
            Stmt::Return(e) => {
                if let Some(e) = e {
                    e.walk_mut(f);
                }
            }
            Stmt::Block(b) => {
                for s in b {
                    s.walk_exprs_mut(f);
                }
            }
            Stmt::Break | Stmt::Continue => {}
        }
    }
}

impl FunctionDef {
    /// Rename every reference to function or global `from` in the body.
    pub fn rename_references(&mut self, from: &str, to: &str) {
        for s in &mut self.body {
            s.walk_exprs_mut(&mut |e| {
                if let Expr::Var(n) = e {
                    if n == from {
                        *n = to.to_string();
                    }
                }
            });
        }
    }

    /// Identifiers referenced in the body, locals and parameters included.
    /// Locals never shadow a visible global, so a name that matches a global
    /// or function and is not in [`FunctionDef::local_names`] refers to it.
    pub fn referenced_names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for s in &self.body {
            s.walk_exprs(&mut |e| {
                if let Expr::Var(n) = e {
                    out.push(n.as_str());
                }
            });
        }
        out
    }

    /// Parameter and local variable names.
    pub fn local_names(&self) -> std::collections::BTreeSet<&str> {
        fn collect<'a>(stmts: &'a [Stmt], out: &mut std::collections::BTreeSet<&'a str>) {
            for s in stmts {
                match s {
                    Stmt::Decl { name, .. } => {
                        out.insert(name);
                    }
                    Stmt::If { then_branch, else_branch, .. } => {
                        collect(then_branch, out);
                        if let Some(e) = else_branch {
                            collect(e, out);
                        }
                    }
                    Stmt::While { body, .. } | Stmt::Block(body) => collect(body, out),
                    _ => {}
                }
            }
        }
        let mut out: std::collections::BTreeSet<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        collect(&self.body, &mut out);
        out
    }
}
