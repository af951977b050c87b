//! Lowering of parsed C-subset units to IR.
//!
//! Arithmetic follows the usual C conversions at subset scale: integer
//! operands narrower than 32 bits promote to `int32`, mixed signedness
//! picks the unsigned type when it is at least as wide, and any float
//! operand makes the operation floating point. Results wrap to the
//! operation type; stores convert to the destination type.

use std::collections::HashMap;

use super::ir::*;
use crate::csubset::ast::*;
use crate::csubset::{CType, NumericClass, ScalarType, BUILTINS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot lower {function}: {message}")]
pub struct LowerError {
    pub function: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LowerOptions {
    /// Struct fields held in shadow tables rather than in the struct layout.
    pub shadow_fields: Vec<(String, String, ScalarType)>,
}

pub fn cell_ty(t: &CType) -> Option<CellTy> {
    match t {
        CType::Scalar(s) => Some(CellTy::Scalar(*s)),
        CType::FnPtr(_) => Some(CellTy::FnPtr),
        CType::StructPtr(_) => Some(CellTy::StructPtr),
        CType::Struct(_) => None,
    }
}

pub fn lower_unit(unit: &TranslationUnit, opts: &LowerOptions) -> Result<ProgramIr, LowerError> {
    let mut globals = Vec::new();
    for g in &unit.globals {
        globals.push(lower_global(unit, g)?);
    }
    let mut functions = Vec::new();
    for f in &unit.functions {
        functions.push(FnLower::new(unit, opts, f).lower()?);
    }
    Ok(ProgramIr { globals, functions })
}

fn const_init(e: &Expr) -> Option<CellInit> {
    Some(match e {
        Expr::Int(v) => CellInit::Int(*v),
        Expr::Float(v) => CellInit::Float(*v),
        Expr::Unary { op: UnOp::Neg, operand } => match &**operand {
            Expr::Int(v) => CellInit::Int(-v),
            Expr::Float(v) => CellInit::Float(-v),
            _ => return None,
        },
        Expr::Var(n) => CellInit::Fn(n.clone()),
        Expr::AddrOf(inner) => match &**inner {
            Expr::Var(n) => CellInit::Addr(n.clone()),
            _ => return None,
        },
        _ => return None,
    })
}

fn lower_global(unit: &TranslationUnit, g: &GlobalVar) -> Result<IrGlobal, LowerError> {
    let err = |m: &str| LowerError { function: g.name.clone(), message: m.to_string() };
    let fixup = |init: CellInit, ty: CellTy| -> CellInit {
        // `&f` and `f` both denote a function address.
        match init {
            CellInit::Addr(n) if unit.signature_of(&n).is_some() => CellInit::Fn(n),
            CellInit::Int(v) => match ty {
                CellTy::Scalar(s) if s.is_float() => CellInit::Float(v as f64),
                _ => CellInit::Int(v),
            },
            other => other,
        }
    };
    let cells = match &g.ty {
        CType::Struct(s) => {
            let def = unit.struct_def(s).ok_or_else(|| err("unknown struct"))?;
            let items: Vec<&Expr> = match &g.init {
                Some(Initializer::Aggregate(items)) => items.iter().collect(),
                None => Vec::new(),
                Some(Initializer::Scalar(_)) => return Err(err("scalar initializer for struct")),
            };
            def.fields
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let ty = CellTy::Scalar(f.ty);
                    let init = match items.get(i) {
                        Some(e) => fixup(const_init(e).ok_or_else(|| err("non-constant initializer"))?, ty),
                        None => CellInit::Zero,
                    };
                    Ok(IrCell { ty, init })
                })
                .collect::<Result<Vec<_>, LowerError>>()?
        }
        other => {
            let ty = cell_ty(other).expect("non-struct");
            let init = match &g.init {
                Some(Initializer::Scalar(e)) => fixup(const_init(e).ok_or_else(|| err("non-constant initializer"))?, ty),
                None => CellInit::Zero,
                Some(Initializer::Aggregate(_)) => return Err(err("aggregate initializer for scalar")),
            };
            vec![IrCell { ty, init }]
        }
    };
    Ok(IrGlobal { name: g.name.clone(), cells })
}

/// Static type of an expression value.
#[derive(Debug, Clone, PartialEq)]
enum Ty {
    S(ScalarType),
    Ptr(String),
    Fn,
    Str,
    Void,
}

fn promote(t: ScalarType) -> ScalarType {
    if !t.is_float() && t.width() < 32 {
        ScalarType::I32
    } else {
        t
    }
}

pub fn usual_arith(a: ScalarType, b: ScalarType) -> ScalarType {
    let (a, b) = (promote(a), promote(b));
    if a.is_float() || b.is_float() {
        let w = if (a.is_float() && a.width() == 64) || (b.is_float() && b.width() == 64) || !(a.is_float() && b.is_float()) { 64 } else { 32 };
        return ScalarType::new(NumericClass::Float, w).expect("float width");
    }
    if a.class() == b.class() {
        return if a.width() >= b.width() { a } else { b };
    }
    let (u, s) = if a.class() == NumericClass::UnsignedInt { (a, b) } else { (b, a) };
    if u.width() >= s.width() {
        u
    } else {
        s
    }
}

fn literal_ty(v: i128) -> ScalarType {
    if i32::try_from(v).is_ok() {
        ScalarType::I32
    } else if i64::try_from(v).is_ok() {
        ScalarType::I64
    } else {
        ScalarType::U64
    }
}

enum Local {
    Reg(Reg, CType),
}

struct FnLower<'a> {
    unit: &'a TranslationUnit,
    opts: &'a LowerOptions,
    f: &'a FunctionDef,
    code: Vec<Op>,
    nregs: u32,
    scopes: Vec<HashMap<String, Local>>,
    /// (continue target, break jumps to patch)
    loops: Vec<(u32, Vec<usize>)>,
}

impl<'a> FnLower<'a> {
    fn new(unit: &'a TranslationUnit, opts: &'a LowerOptions, f: &'a FunctionDef) -> Self {
        FnLower { unit, opts, f, code: Vec::new(), nregs: 0, scopes: vec![HashMap::new()], loops: Vec::new() }
    }

    fn err<T>(&self, m: impl Into<String>) -> Result<T, LowerError> {
        Err(LowerError { function: self.f.name.clone(), message: m.into() })
    }

    fn reg(&mut self) -> Reg {
        self.nregs += 1;
        self.nregs - 1
    }

    fn emit(&mut self, op: Op) -> usize {
        self.code.push(op);
        self.code.len() - 1
    }

    fn here(&self) -> u32 {
        self.code.len() as u32
    }

    fn patch(&mut self, at: usize, target: u32) {
        match &mut self.code[at] {
            Op::Jmp { target: t } => *t = target,
            Op::Br { if_false, .. } => *if_false = target,
            _ => unreachable!("patching a non-jump"),
        }
    }

    fn lookup(&self, name: &str) -> Option<(Reg, CType)> {
        for s in self.scopes.iter().rev() {
            if let Some(Local::Reg(r, t)) = s.get(name) {
                return Some((*r, t.clone()));
            }
        }
        None
    }

    fn lower(mut self) -> Result<IrFunction, LowerError> {
        let mut params = Vec::new();
        for p in &self.f.params {
            let ty = match cell_ty(&p.ty) {
                Some(t) => t,
                None => return self.err("struct parameter by value"),
            };
            params.push(ty);
            let r = self.reg();
            self.scopes[0].insert(p.name.clone(), Local::Reg(r, p.ty.clone()));
        }
        let ret = match &self.f.signature.ret {
            None => None,
            Some(t) => match cell_ty(t) {
                Some(c) => Some(c),
                None => return self.err("struct return by value"),
            },
        };
        let body = self.f.body.clone();
        self.block(&body)?;
        // Falling off the end returns zero for non-void functions.
        let src = if ret.is_some() {
            let r = self.reg();
            self.emit(Op::Const { dst: r, value: Const::Int(0) });
            Some(r)
        } else {
            None
        };
        self.emit(Op::Ret { src });
        Ok(IrFunction { name: self.f.name.clone(), params, ret, variadic: self.f.signature.variadic, nregs: self.nregs, code: self.code })
    }

    fn block(&mut self, stmts: &[Stmt]) -> Result<(), LowerError> {
        self.scopes.push(HashMap::new());
        for s in stmts {
            self.stmt(s)?;
        }
        self.scopes.pop();
        Ok(())
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), LowerError> {
        match s {
            Stmt::Decl { name, ty, init } => {
                let r = self.reg();
                match init {
                    Some(e) => {
                        let (v, vt) = self.expr(e)?;
                        self.store_local(r, ty, v, &vt)?;
                    }
                    None => {
                        let value = match ty {
                            CType::Scalar(s) if s.is_float() => Const::Float(0.0),
                            _ => Const::Int(0),
                        };
                        self.emit(Op::Const { dst: r, value });
                    }
                }
                self.scopes.last_mut().unwrap().insert(name.clone(), Local::Reg(r, ty.clone()));
            }
            Stmt::Expr(e) => {
                self.expr_any(e)?;
            }
            Stmt::If { cond, then_branch, else_branch } => {
                let c = self.cond(cond)?;
                let br = self.emit(Op::Br { cond: c, if_true: 0, if_false: 0 });
                let t = self.here();
                if let Op::Br { if_true, .. } = &mut self.code[br] {
                    *if_true = t;
                }
                self.block(then_branch)?;
                match else_branch {
                    Some(b) => {
                        let j = self.emit(Op::Jmp { target: 0 });
                        let e = self.here();
                        self.patch(br, e);
                        self.block(b)?;
                        let end = self.here();
                        self.patch(j, end);
                    }
                    None => {
                        let end = self.here();
                        self.patch(br, end);
                    }
                }
            }
            Stmt::While { cond, body } => {
                let top = self.here();
                let c = self.cond(cond)?;
                let br = self.emit(Op::Br { cond: c, if_true: 0, if_false: 0 });
                let t = self.here();
                if let Op::Br { if_true, .. } = &mut self.code[br] {
                    *if_true = t;
                }
                self.loops.push((top, Vec::new()));
                self.block(body)?;
                self.emit(Op::Jmp { target: top });
                let end = self.here();
                self.patch(br, end);
                let (_, breaks) = self.loops.pop().unwrap();
                for b in breaks {
                    self.patch(b, end);
                }
            }
            Stmt::Return(value) => {
                let ret = self.f.signature.ret.clone();
                let src = match (value, &ret) {
                    (None, None) => None,
                    (Some(e), Some(t)) => {
                        let (v, vt) = self.expr(e)?;
                        let r = self.reg();
                        self.store_local(r, t, v, &vt)?;
                        Some(r)
                    }
                    (Some(e), None) => {
                        self.expr_any(e)?;
                        None
                    }
                    (None, Some(_)) => return self.err("return without a value in non-void function"),
                };
                self.emit(Op::Ret { src });
            }
            Stmt::Block(b) => self.block(b)?,
            Stmt::Break => {
                let j = self.emit(Op::Jmp { target: 0 });
                match self.loops.last_mut() {
                    Some((_, breaks)) => breaks.push(j),
                    None => return self.err("break outside a loop"),
                }
            }
            Stmt::Continue => match self.loops.last() {
                Some((top, _)) => {
                    let top = *top;
                    self.emit(Op::Jmp { target: top });
                }
                None => return self.err("continue outside a loop"),
            },
        }
        Ok(())
    }

    /// Move or convert `v` into local register `dst` of type `ty`.
    fn store_local(&mut self, dst: Reg, ty: &CType, v: Reg, vt: &Ty) -> Result<(), LowerError> {
        match (ty, vt) {
            (CType::Scalar(s), Ty::S(_)) => {
                self.emit(Op::Conv { dst, src: v, ty: *s });
            }
            (CType::FnPtr(_), Ty::Fn | Ty::S(_)) | (CType::StructPtr(_), Ty::Ptr(_) | Ty::S(_)) => {
                self.emit(Op::Mov { dst, src: v });
            }
            _ => return self.err(format!("cannot store {vt:?} into {ty}")),
        }
        Ok(())
    }

    fn cond(&mut self, e: &Expr) -> Result<Reg, LowerError> {
        let (r, t) = self.expr(e)?;
        if matches!(t, Ty::Str | Ty::Void) {
            return self.err("condition is not a value");
        }
        Ok(r)
    }

    /// Lower for side effects; void calls are fine.
    fn expr_any(&mut self, e: &Expr) -> Result<Ty, LowerError> {
        if let Expr::Call { callee, args } = e {
            let (_, t) = self.call(callee, args, false)?;
            return Ok(t);
        }
        Ok(self.expr(e)?.1)
    }

    fn global_cell(&self, name: &str) -> Option<CType> {
        if self.lookup(name).is_some() {
            return None;
        }
        self.unit.global_type(name).cloned()
    }

    fn is_function(&self, name: &str) -> bool {
        self.lookup(name).is_none() && self.unit.signature_of(name).is_some()
    }

    fn shadow(&self, strukt: &str, field: &str) -> Option<ScalarType> {
        self.opts.shadow_fields.iter().find(|(s, f, _)| s == strukt && f == field).map(|(_, _, t)| *t)
    }

    fn field_slot(&self, strukt: &str, field: &str) -> Result<(u32, ScalarType), LowerError> {
        let def = match self.unit.struct_def(strukt) {
            Some(d) => d,
            None => return self.err(format!("unknown struct {strukt}")),
        };
        match def.field_index(field) {
            Some(i) => Ok((i as u32, def.fields[i].ty)),
            None => self.err(format!("no field {strukt}.{field}")),
        }
    }

    fn expr(&mut self, e: &Expr) -> Result<(Reg, Ty), LowerError> {
        match e {
            Expr::Int(v) => {
                let r = self.reg();
                self.emit(Op::Const { dst: r, value: Const::Int(*v) });
                Ok((r, Ty::S(literal_ty(*v))))
            }
            Expr::Float(v) => {
                let r = self.reg();
                self.emit(Op::Const { dst: r, value: Const::Float(*v) });
                Ok((r, Ty::S(ScalarType::F64)))
            }
            Expr::Str(s) => {
                let r = self.reg();
                self.emit(Op::Const { dst: r, value: Const::Str(s.clone()) });
                Ok((r, Ty::Str))
            }
            Expr::Var(n) => {
                if let Some((r, t)) = self.lookup(n) {
                    return Ok((r, ctype_ty(&t)));
                }
                if let Some(t) = self.global_cell(n) {
                    let Some(ct) = cell_ty(&t) else {
                        return self.err(format!("struct {n} used as a value"));
                    };
                    let r = self.reg();
                    self.emit(Op::LoadG { dst: r, sym: n.clone(), offset: 0, ty: ct });
                    return Ok((r, ctype_ty(&t)));
                }
                if self.is_function(n) {
                    let r = self.reg();
                    self.emit(Op::LoadFn { dst: r, sym: n.clone() });
                    return Ok((r, Ty::Fn));
                }
                self.err(format!("unresolved name {n}"))
            }
            Expr::AddrOf(inner) => match &**inner {
                Expr::Var(n) if self.is_function(n) => {
                    let r = self.reg();
                    self.emit(Op::LoadFn { dst: r, sym: n.clone() });
                    Ok((r, Ty::Fn))
                }
                Expr::Var(n) => match self.global_cell(n) {
                    Some(CType::Struct(s)) => {
                        let r = self.reg();
                        self.emit(Op::AddrG { dst: r, sym: n.clone() });
                        Ok((r, Ty::Ptr(s)))
                    }
                    _ => self.err("address of a non-struct object"),
                },
                _ => self.err("address of an expression"),
            },
            Expr::Unary { op, operand } => {
                let (a, t) = self.expr(operand)?;
                let r = self.reg();
                match (op, t) {
                    (UnOp::Not, Ty::S(_) | Ty::Fn | Ty::Ptr(_)) => {
                        self.emit(Op::Un { op: UnOp::Not, dst: r, a, ty: ScalarType::I32 });
                        Ok((r, Ty::S(ScalarType::I32)))
                    }
                    (UnOp::Neg, Ty::S(s)) => {
                        let ty = promote(s);
                        self.emit(Op::Un { op: UnOp::Neg, dst: r, a, ty });
                        Ok((r, Ty::S(ty)))
                    }
                    (UnOp::BitNot, Ty::S(s)) if !s.is_float() => {
                        let ty = promote(s);
                        self.emit(Op::Un { op: UnOp::BitNot, dst: r, a, ty });
                        Ok((r, Ty::S(ty)))
                    }
                    (op, t) => self.err(format!("operator {op:?} on {t:?}")),
                }
            }
            Expr::Binary { op: op @ (BinOp::And | BinOp::Or), lhs, rhs } => {
                let dst = self.reg();
                let (short, other) = if *op == BinOp::And { (0, 1) } else { (1, 0) };
                self.emit(Op::Const { dst, value: Const::Int(short) });
                let a = self.cond(lhs)?;
                let b1 = self.emit(Op::Br { cond: a, if_true: 0, if_false: 0 });
                let mid = self.here();
                // And: continue on true. Or: continue on false.
                let b = self.cond(rhs)?;
                let b2 = self.emit(Op::Br { cond: b, if_true: 0, if_false: 0 });
                let set = self.here();
                self.emit(Op::Const { dst, value: Const::Int(other) });
                let end = self.here();
                for (br, next) in [(b1, mid), (b2, set)] {
                    if let Op::Br { if_true, if_false, .. } = &mut self.code[br] {
                        if *op == BinOp::And {
                            *if_true = next;
                            *if_false = end;
                        } else {
                            *if_true = end;
                            *if_false = next;
                        }
                    }
                }
                Ok((dst, Ty::S(ScalarType::I32)))
            }
            Expr::Binary { op, lhs, rhs } => {
                let (a, at) = self.expr(lhs)?;
                let (b, bt) = self.expr(rhs)?;
                self.binary(*op, a, at, b, bt)
            }
            Expr::Assign { op, target, value } => self.assign(*op, target, value),
            Expr::IncDec { target, increment, prefix } => {
                let (old, ot) = self.expr(target)?;
                let Ty::S(s) = ot else { return self.err("increment of a non-scalar") };
                let saved = self.reg();
                self.emit(Op::Mov { dst: saved, src: old });
                let one = self.reg();
                self.emit(Op::Const { dst: one, value: Const::Int(1) });
                let ty = usual_arith(s, ScalarType::I32);
                let sum = self.reg();
                let op = if *increment { BinOp::Add } else { BinOp::Sub };
                self.emit(Op::Bin { op, dst: sum, a: saved, b: one, ty: Some(ty) });
                let stored = self.store_to(target, sum, Ty::S(ty))?;
                Ok((if *prefix { stored } else { saved }, Ty::S(s)))
            }
            Expr::Call { callee, args } => {
                let (r, t) = self.call(callee, args, true)?;
                Ok((r.expect("value call"), t))
            }
            Expr::Member { base, field, arrow } => {
                let (strukt, key) = self.member_base(base, *arrow)?;
                if let Some(ty) = self.shadow(&strukt, field) {
                    let key = self.materialize_key(base, key)?;
                    let r = self.reg();
                    self.emit(Op::LoadSh { dst: r, strukt: strukt.clone(), field: field.clone(), key });
                    return Ok((r, Ty::S(ty)));
                }
                let (off, ty) = self.field_slot(&strukt, field)?;
                let r = self.reg();
                match key {
                    MemberBase::Global(sym) => {
                        self.emit(Op::LoadG { dst: r, sym, offset: off, ty: CellTy::Scalar(ty) });
                    }
                    MemberBase::Ptr(p) => {
                        self.emit(Op::LoadF { dst: r, base: p, offset: off, ty: CellTy::Scalar(ty) });
                    }
                }
                Ok((r, Ty::S(ty)))
            }
        }
    }

    fn binary(&mut self, op: BinOp, a: Reg, at: Ty, b: Reg, bt: Ty) -> Result<(Reg, Ty), LowerError> {
        let dst = self.reg();
        let cmp = matches!(op, BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq | BinOp::Ne);
        match (&at, &bt) {
            (Ty::S(x), Ty::S(y)) => {
                let ty = match op {
                    BinOp::Shl | BinOp::Shr => promote(*x),
                    _ => usual_arith(*x, *y),
                };
                let int_only = matches!(op, BinOp::Rem | BinOp::Shl | BinOp::Shr | BinOp::BitAnd | BinOp::BitOr | BinOp::BitXor);
                if int_only && (x.is_float() || y.is_float()) {
                    return self.err(format!("operator {} on floating operands", op.symbol()));
                }
                self.emit(Op::Bin { op, dst, a, b, ty: Some(ty) });
                Ok((dst, Ty::S(if cmp { ScalarType::I32 } else { ty })))
            }
            (Ty::Fn | Ty::Ptr(_) | Ty::S(_), Ty::Fn | Ty::Ptr(_) | Ty::S(_)) if matches!(op, BinOp::Eq | BinOp::Ne) => {
                self.emit(Op::Bin { op, dst, a, b, ty: None });
                Ok((dst, Ty::S(ScalarType::I32)))
            }
            _ => self.err(format!("operator {} on {at:?} and {bt:?}", op.symbol())),
        }
    }

    fn assign(&mut self, op: Option<BinOp>, target: &Expr, value: &Expr) -> Result<(Reg, Ty), LowerError> {
        let (v, vt) = self.expr(value)?;
        let (v, vt) = match op {
            None => (v, vt),
            Some(op) => {
                let (cur, ct) = self.expr(target)?;
                self.binary(op, cur, ct, v, vt)?
            }
        };
        let r = self.store_to(target, v, vt.clone())?;
        let t = match self.target_type(target)? {
            Some(CType::Scalar(s)) => Ty::S(s),
            _ => vt,
        };
        Ok((r, t))
    }

    fn target_type(&self, target: &Expr) -> Result<Option<CType>, LowerError> {
        Ok(match target {
            Expr::Var(n) => self.lookup(n).map(|(_, t)| t).or_else(|| self.global_cell(n)),
            _ => None,
        })
    }

    /// Store `v` to an lvalue; returns a register holding the stored value.
    fn store_to(&mut self, target: &Expr, v: Reg, vt: Ty) -> Result<Reg, LowerError> {
        match target {
            Expr::Var(n) => {
                if let Some((r, t)) = self.lookup(n) {
                    self.store_local(r, &t, v, &vt)?;
                    return Ok(r);
                }
                let Some(t) = self.global_cell(n) else {
                    return self.err(format!("{n} is not assignable"));
                };
                let Some(ct) = cell_ty(&t) else {
                    return self.err("struct assignment");
                };
                let src = self.converted(v, &vt, ct)?;
                self.emit(Op::StoreG { src, sym: n.clone(), offset: 0, ty: ct });
                Ok(src)
            }
            Expr::Member { base, field, arrow } => {
                let (strukt, key) = self.member_base(base, *arrow)?;
                if let Some(ty) = self.shadow(&strukt, field) {
                    let key = self.materialize_key(base, key)?;
                    let src = self.converted(v, &vt, CellTy::Scalar(ty))?;
                    self.emit(Op::StoreSh { src, strukt, field: field.clone(), key });
                    return Ok(src);
                }
                let (off, ty) = self.field_slot(&strukt, field)?;
                let src = self.converted(v, &vt, CellTy::Scalar(ty))?;
                match key {
                    MemberBase::Global(sym) => {
                        self.emit(Op::StoreG { src, sym, offset: off, ty: CellTy::Scalar(ty) });
                    }
                    MemberBase::Ptr(p) => {
                        self.emit(Op::StoreF { src, base: p, offset: off, ty: CellTy::Scalar(ty) });
                    }
                }
                Ok(src)
            }
            _ => self.err("expression is not assignable"),
        }
    }

    fn converted(&mut self, v: Reg, vt: &Ty, to: CellTy) -> Result<Reg, LowerError> {
        match (to, vt) {
            (CellTy::Scalar(s), Ty::S(_)) => {
                let r = self.reg();
                self.emit(Op::Conv { dst: r, src: v, ty: s });
                Ok(r)
            }
            (CellTy::FnPtr, Ty::Fn | Ty::S(_)) | (CellTy::StructPtr, Ty::Ptr(_) | Ty::S(_)) => Ok(v),
            _ => self.err(format!("cannot store {vt:?} into a {to:?} location")),
        }
    }

    fn member_base(&mut self, base: &Expr, arrow: bool) -> Result<(String, MemberBase), LowerError> {
        let Expr::Var(n) = base else { return self.err("nested member access") };
        if let Some((r, t)) = self.lookup(n) {
            return match (t, arrow) {
                (CType::StructPtr(s), true) => Ok((s, MemberBase::Ptr(r))),
                _ => self.err(format!("bad member access on {n}")),
            };
        }
        match (self.global_cell(n), arrow) {
            (Some(CType::Struct(s)), false) => Ok((s, MemberBase::Global(n.clone()))),
            (Some(CType::StructPtr(s)), true) => {
                let r = self.reg();
                self.emit(Op::LoadG { dst: r, sym: n.clone(), offset: 0, ty: CellTy::StructPtr });
                Ok((s, MemberBase::Ptr(r)))
            }
            _ => self.err(format!("bad member access on {n}")),
        }
    }

    /// Shadow tables are keyed by instance address.
    fn materialize_key(&mut self, _base: &Expr, key: MemberBase) -> Result<Reg, LowerError> {
        Ok(match key {
            MemberBase::Ptr(r) => r,
            MemberBase::Global(sym) => {
                let r = self.reg();
                self.emit(Op::AddrG { dst: r, sym });
                r
            }
        })
    }

    fn call(&mut self, callee: &Expr, args: &[Expr], want_value: bool) -> Result<(Option<Reg>, Ty), LowerError> {
        let mut regs = Vec::new();
        for a in args {
            regs.push(self.expr(a)?.0);
        }
        if let Expr::Var(n) = callee {
            if self.lookup(n).is_none() && self.unit.signature_of(n).is_none() && BUILTINS.contains(&n.as_str()) {
                return self.builtin(n, regs, want_value);
            }
            if self.is_function(n) {
                let sig = self.unit.signature_of(n).cloned().expect("declared");
                let (dst, t) = self.call_result(&sig.ret, want_value)?;
                self.emit(Op::Call { dst, sym: n.clone(), args: regs });
                return Ok((dst, t));
            }
        }
        let sig = match callee {
            Expr::Var(n) => match self.lookup(n).map(|(_, t)| t).or_else(|| self.global_cell(n)) {
                Some(CType::FnPtr(sig)) => *sig,
                _ => return self.err(format!("{n} is not callable")),
            },
            _ => return self.err("call of a computed expression"),
        };
        let (c, _) = self.expr(callee)?;
        let (dst, t) = self.call_result(&sig.ret, want_value)?;
        self.emit(Op::ICall { dst, callee: c, args: regs });
        Ok((dst, t))
    }

    fn call_result(&mut self, ret: &Option<CType>, want_value: bool) -> Result<(Option<Reg>, Ty), LowerError> {
        match ret {
            None if want_value => self.err("void value used"),
            None => Ok((None, Ty::Void)),
            Some(t) => Ok((Some(self.reg()), ctype_ty(t))),
        }
    }

    fn builtin(&mut self, name: &str, args: Vec<Reg>, want_value: bool) -> Result<(Option<Reg>, Ty), LowerError> {
        if want_value {
            return self.err(format!("{name}() has no value"));
        }
        match name {
            "fatal" => {
                self.emit(Op::Fatal { args });
            }
            "halt" => {
                self.emit(Op::Halt);
            }
            "trace" | "emit" | "sleep" => {
                if args.len() != 1 && name != "trace" {
                    return self.err(format!("{name}() takes one argument"));
                }
                let builtin = match name {
                    "trace" => Builtin::Trace,
                    "emit" => Builtin::Emit,
                    _ => Builtin::Sleep,
                };
                self.emit(Op::Builtin { dst: None, builtin, args });
            }
            _ => unreachable!("unknown builtin"),
        }
        Ok((None, Ty::Void))
    }
}

enum MemberBase {
    Global(String),
    Ptr(Reg),
}

fn ctype_ty(t: &CType) -> Ty {
    match t {
        CType::Scalar(s) => Ty::S(*s),
        CType::StructPtr(s) => Ty::Ptr(s.clone()),
        CType::FnPtr(_) => Ty::Fn,
        CType::Struct(s) => Ty::Ptr(s.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csubset::parse_file;

    #[test]
    fn arithmetic_conversions() {
        assert_eq!(usual_arith(ScalarType::U8, ScalarType::I16), ScalarType::I32);
        assert_eq!(usual_arith(ScalarType::U32, ScalarType::I32), ScalarType::U32);
        assert_eq!(usual_arith(ScalarType::U32, ScalarType::I64), ScalarType::I64);
        assert_eq!(usual_arith(ScalarType::U64, ScalarType::I64), ScalarType::U64);
        assert_eq!(usual_arith(ScalarType::F32, ScalarType::I64), ScalarType::F64);
        assert_eq!(usual_arith(ScalarType::F32, ScalarType::F32), ScalarType::F32);
    }

    #[test]
    fn lowers_globals_and_calls() {
        let u = parse_file(
            "t.c",
            "struct s { int a; double b; };\nstruct s inst = { 1 };\nint f(int x);\nvoid (*hook)(int) = 0;\n\
             int g(void) { int y = f(inst.a); hook(y); return y; }\n",
        )
        .unwrap();
        let p = lower_unit(&u, &LowerOptions::default()).unwrap();
        assert_eq!(p.globals[0].cells.len(), 2);
        assert_eq!(p.globals[0].cells[1].init, CellInit::Zero);
        let code = &p.functions[0].code;
        assert!(code.iter().any(|o| matches!(o, Op::Call { sym, .. } if sym == "f")));
        assert!(code.iter().any(|o| matches!(o, Op::ICall { .. })));
        assert!(code.iter().any(|o| matches!(o, Op::LoadG { sym, offset: 0, .. } if sym == "inst")));
        assert_eq!(p.external_symbols().into_iter().collect::<Vec<_>>(), ["f"]);
    }

    #[test]
    fn shadow_fields_lower_to_shadow_ops() {
        let opts = crate::csubset::ParseOptions { shadow_fields: vec![("s".into(), "extra".into(), ScalarType::U8)] };
        let u = crate::csubset::parse_unit("t.c", "struct s { int a; };\nint f(struct s *p) { p->extra = 3; return p->extra; }\n", &opts).unwrap();
        let lo = LowerOptions { shadow_fields: opts.shadow_fields.clone() };
        let p = lower_unit(&u, &lo).unwrap();
        let code = &p.functions[0].code;
        assert!(code.iter().any(|o| matches!(o, Op::StoreSh { .. })));
        assert!(code.iter().any(|o| matches!(o, Op::LoadSh { .. })));
    }
}
