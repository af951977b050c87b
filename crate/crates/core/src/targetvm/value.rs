use std::fmt;
use std::sync::Arc;

use super::ir::CellTy;
use crate::csubset::ast::{BinOp, UnOp};
use crate::csubset::{NumericClass, ScalarType};

pub type FnId = u32;

/// A register or cell value. Integers carry their mathematical value; the
/// static type of the instruction or cell decides how it wraps.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i128),
    Float(f64),
    Fn(FnId),
    /// Address of a struct's first cell. Address 0 is null.
    Ptr(u64),
    Str(Arc<str>),
    Undef,
}

impl Value {
    pub fn truthy(&self) -> Result<bool, String> {
        match self {
            Value::Int(v) => Ok(*v != 0),
            Value::Float(v) => Ok(*v != 0.0),
            Value::Fn(_) => Ok(true),
            Value::Ptr(a) => Ok(*a != 0),
            Value::Str(_) => Err("string used as a condition".into()),
            Value::Undef => Err("read of an uninitialized value".into()),
        }
    }

    pub fn as_int(&self) -> Option<i128> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Fn(id) => write!(f, "fn#{id}"),
            Value::Ptr(a) => write!(f, "@{a}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Undef => f.write_str("undef"),
        }
    }
}

/// Two's-complement wrap of `v` into an integer type.
pub fn wrap_int(v: i128, ty: ScalarType) -> i128 {
    let w = u32::from(ty.width());
    let mask = (1i128 << w) - 1;
    let low = v & mask;
    match ty.class() {
        NumericClass::SignedInt if low >> (w - 1) & 1 == 1 => low - (1i128 << w),
        _ => low,
    }
}

fn round_float(v: f64, ty: ScalarType) -> f64 {
    if ty.width() == 32 {
        v as f32 as f64
    } else {
        v
    }
}

pub fn to_scalar(v: &Value, ty: ScalarType) -> Result<Value, String> {
    let out = match (v, ty.is_float()) {
        (Value::Int(i), false) => Value::Int(wrap_int(*i, ty)),
        (Value::Int(i), true) => Value::Float(round_float(*i as f64, ty)),
        (Value::Float(x), false) => {
            if !x.is_finite() {
                return Err(format!("float {x} does not convert to {ty}"));
            }
            Value::Int(wrap_int(x.trunc() as i128, ty))
        }
        (Value::Float(x), true) => Value::Float(round_float(*x, ty)),
        (Value::Ptr(a), false) => Value::Int(wrap_int(i128::from(*a), ty)),
        (Value::Undef, _) => return Err("read of an uninitialized value".into()),
        (other, _) => return Err(format!("{other} does not convert to {ty}")),
    };
    Ok(out)
}

/// Conversion performed when a value enters a location of type `ty`.
pub fn convert(v: &Value, ty: CellTy) -> Result<Value, String> {
    match ty {
        CellTy::Scalar(s) => to_scalar(v, s),
        CellTy::FnPtr => match v {
            Value::Fn(_) => Ok(v.clone()),
            Value::Int(0) | Value::Ptr(0) => Ok(Value::Int(0)),
            other => Err(format!("{other} is not a function pointer")),
        },
        CellTy::StructPtr => match v {
            Value::Ptr(_) => Ok(v.clone()),
            Value::Int(0) => Ok(Value::Ptr(0)),
            other => Err(format!("{other} is not a struct pointer")),
        },
    }
}

/// Whether `value` converts to `ty` without loss.
pub fn fits(value: &Value, ty: ScalarType) -> bool {
    match (value, ty.int_range()) {
        (Value::Int(v), Some((lo, hi))) => (lo..=hi).contains(v),
        (Value::Int(v), None) => {
            let limit = if ty.width() == 32 { 1i128 << 24 } else { 1i128 << 53 };
            v.abs() <= limit
        }
        (Value::Float(x), Some((lo, hi))) => x.fract() == 0.0 && *x >= lo as f64 && *x <= hi as f64,
        (Value::Float(x), None) => ty.width() == 64 || (*x as f32) as f64 == *x,
        _ => false,
    }
}

fn bool_val(b: bool) -> Value {
    Value::Int(i128::from(b))
}

pub fn binary(op: BinOp, a: &Value, b: &Value, ty: Option<ScalarType>) -> Result<Value, String> {
    let Some(ty) = ty else {
        let eq = raw_eq(a, b)?;
        return Ok(bool_val(if op == BinOp::Ne { !eq } else { eq }));
    };
    let (a, b) = (to_scalar(a, ty)?, to_scalar(b, ty)?);
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => {
            let w = u32::from(ty.width());
            let r = match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x.wrapping_mul(y),
                BinOp::Div | BinOp::Rem if y == 0 => return Err("division by zero".into()),
                BinOp::Div => x / y,
                BinOp::Rem => x % y,
                BinOp::Shl => x << ((y as u32) % w),
                BinOp::Shr => x >> ((y as u32) % w),
                BinOp::BitAnd => x & y,
                BinOp::BitOr => x | y,
                BinOp::BitXor => x ^ y,
                BinOp::Lt => return Ok(bool_val(x < y)),
                BinOp::Le => return Ok(bool_val(x <= y)),
                BinOp::Gt => return Ok(bool_val(x > y)),
                BinOp::Ge => return Ok(bool_val(x >= y)),
                BinOp::Eq => return Ok(bool_val(x == y)),
                BinOp::Ne => return Ok(bool_val(x != y)),
                BinOp::And | BinOp::Or => unreachable!("short-circuit operators are lowered to branches"),
            };
            Ok(Value::Int(wrap_int(r, ty)))
        }
        (Value::Float(x), Value::Float(y)) => {
            let r = match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
                BinOp::Lt => return Ok(bool_val(x < y)),
                BinOp::Le => return Ok(bool_val(x <= y)),
                BinOp::Gt => return Ok(bool_val(x > y)),
                BinOp::Ge => return Ok(bool_val(x >= y)),
                BinOp::Eq => return Ok(bool_val(x == y)),
                BinOp::Ne => return Ok(bool_val(x != y)),
                other => return Err(format!("operator {} on floats", other.symbol())),
            };
            Ok(Value::Float(round_float(r, ty)))
        }
        _ => unreachable!("to_scalar yields one class"),
    }
}

fn raw_eq(a: &Value, b: &Value) -> Result<bool, String> {
    let norm = |v: &Value| -> Result<Option<(u8, u64)>, String> {
        Ok(match v {
            Value::Int(0) | Value::Ptr(0) => None,
            Value::Fn(id) => Some((1, u64::from(*id))),
            Value::Ptr(a) => Some((2, *a)),
            Value::Int(i) => Some((3, *i as u64)),
            other => return Err(format!("{other} compared as a pointer")),
        })
    };
    Ok(norm(a)? == norm(b)?)
}

pub fn unary(op: UnOp, a: &Value, ty: ScalarType) -> Result<Value, String> {
    if op == UnOp::Not {
        return Ok(bool_val(!a.truthy()?));
    }
    match (op, to_scalar(a, ty)?) {
        (UnOp::Neg, Value::Int(x)) => Ok(Value::Int(wrap_int(-x, ty))),
        (UnOp::Neg, Value::Float(x)) => Ok(Value::Float(-x)),
        (UnOp::BitNot, Value::Int(x)) => Ok(Value::Int(wrap_int(!x, ty))),
        (op, v) => Err(format!("operator {op:?} on {v}")),
    }
}

/// printf-style rendering for `fatal` and `trace` messages. Length
/// modifiers are accepted and ignored; values already carry their width.
pub fn format_message(args: &[Value]) -> String {
    let Some(Value::Str(fmt)) = args.first() else {
        return args.iter().map(Value::to_string).collect::<Vec<_>>().join(" ");
    };
    let mut out = String::new();
    let mut rest = args[1..].iter();
    let mut chars = fmt.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '%' {
            out.push(c);
            continue;
        }
        let mut spec = String::new();
        while let Some(&n) = chars.peek() {
            chars.next();
            if n.is_ascii_alphabetic() && !matches!(n, 'l' | 'h' | 'z' | 'j' | 't') || n == '%' {
                spec.push(n);
                break;
            }
            spec.push(n);
        }
        let conv = spec.chars().last().unwrap_or('%');
        if conv == '%' {
            out.push('%');
            continue;
        }
        match (conv, rest.next()) {
            (_, None) => out.push_str("(missing)"),
            ('x', Some(Value::Int(v))) => out.push_str(&format!("{:x}", *v as u64)),
            ('s', Some(Value::Str(s))) => out.push_str(s),
            ('f', Some(Value::Float(v))) => out.push_str(&format!("{v:.6}")),
            (_, Some(Value::Str(s))) => out.push_str(s),
            (_, Some(v)) => out.push_str(&v.to_string()),
        }
    }
    out
}
