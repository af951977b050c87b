use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericClass {
    SignedInt,
    UnsignedInt,
    Float,
}

/// A C scalar: numeric class and bit width.
///
/// Integer widths are 8/16/32/64. Floats exist at 32 and 64 bits only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ScalarType {
    class: NumericClass,
    width: u8,
}

impl ScalarType {
    pub const I8: ScalarType = ScalarType { class: NumericClass::SignedInt, width: 8 };
    pub const I16: ScalarType = ScalarType { class: NumericClass::SignedInt, width: 16 };
    pub const I32: ScalarType = ScalarType { class: NumericClass::SignedInt, width: 32 };
    pub const I64: ScalarType = ScalarType { class: NumericClass::SignedInt, width: 64 };
    pub const U8: ScalarType = ScalarType { class: NumericClass::UnsignedInt, width: 8 };
    pub const U16: ScalarType = ScalarType { class: NumericClass::UnsignedInt, width: 16 };
    pub const U32: ScalarType = ScalarType { class: NumericClass::UnsignedInt, width: 32 };
    pub const U64: ScalarType = ScalarType { class: NumericClass::UnsignedInt, width: 64 };
    pub const F32: ScalarType = ScalarType { class: NumericClass::Float, width: 32 };
    pub const F64: ScalarType = ScalarType { class: NumericClass::Float, width: 64 };

    /// Every valid scalar type, in a fixed order.
    pub const ALL: [ScalarType; 10] = [Self::I8, Self::I16, Self::I32, Self::I64, Self::U8, Self::U16, Self::U32, Self::U64, Self::F32, Self::F64];

    pub fn new(class: NumericClass, width: u8) -> Option<ScalarType> {
        let ok = match class {
            NumericClass::Float => matches!(width, 32 | 64),
            _ => matches!(width, 8 | 16 | 32 | 64),
        };
        ok.then_some(ScalarType { class, width })
    }

    pub fn class(self) -> NumericClass {
        self.class
    }

    pub fn width(self) -> u8 {
        self.width
    }

    pub fn is_float(self) -> bool {
        self.class == NumericClass::Float
    }

    /// Inclusive integer range, `None` for floats.
    pub fn int_range(self) -> Option<(i128, i128)> {
        let w = u32::from(self.width);
        match self.class {
            NumericClass::SignedInt => Some((-(1i128 << (w - 1)), (1i128 << (w - 1)) - 1)),
            NumericClass::UnsignedInt => Some((0, (1i128 << w) - 1)),
            NumericClass::Float => None,
        }
    }

    /// Compact code used when packing operands; stable across versions.
    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|t| *t == self).expect("valid scalar type") as u8
    }

    pub fn from_code(code: u8) -> Option<ScalarType> {
        Self::ALL.get(code as usize).copied()
    }

    /// Spelling used when rendering C source.
    pub fn c_name(self) -> &'static str {
        match (self.class, self.width) {
            (NumericClass::SignedInt, 8) => "int8_t",
            (NumericClass::SignedInt, 16) => "int16_t",
            (NumericClass::SignedInt, 32) => "int32_t",
            (NumericClass::SignedInt, _) => "int64_t",
            (NumericClass::UnsignedInt, 8) => "uint8_t",
            (NumericClass::UnsignedInt, 16) => "uint16_t",
            (NumericClass::UnsignedInt, 32) => "uint32_t",
            (NumericClass::UnsignedInt, _) => "uint64_t",
            (NumericClass::Float, 32) => "float",
            (NumericClass::Float, _) => "double",
        }
    }
}

impl fmt::Display for ScalarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.class {
            NumericClass::SignedInt => "int",
            NumericClass::UnsignedInt => "uint",
            NumericClass::Float => "float",
        };
        write!(f, "{prefix}{}", self.width)
    }
}

impl FromStr for ScalarType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (class, digits) = if let Some(d) = s.strip_prefix("uint") {
            (NumericClass::UnsignedInt, d)
        } else if let Some(d) = s.strip_prefix("int") {
            (NumericClass::SignedInt, d)
        } else if let Some(d) = s.strip_prefix("float") {
            (NumericClass::Float, d)
        } else {
            return Err(format!("unknown scalar type {s:?}"));
        };
        let width: u8 = digits.parse().map_err(|_| format!("unknown scalar type {s:?}"))?;
        ScalarType::new(class, width).ok_or_else(|| format!("invalid width in {s:?}"))
    }
}

impl TryFrom<String> for ScalarType {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ScalarType> for String {
    fn from(t: ScalarType) -> String {
        t.to_string()
    }
}

/// Types the subset can name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CType {
    Scalar(ScalarType),
    /// A struct by value; only legal for globals.
    Struct(String),
    /// Pointer to a struct.
    StructPtr(String),
    FnPtr(Box<Signature>),
}

impl CType {
    pub fn as_scalar(&self) -> Option<ScalarType> {
        match self {
            CType::Scalar(s) => Some(*s),
            _ => None,
        }
    }
}

impl fmt::Display for CType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CType::Scalar(s) => write!(f, "{s}"),
            CType::Struct(n) => write!(f, "struct {n}"),
            CType::StructPtr(n) => write!(f, "struct {n} *"),
            CType::FnPtr(sig) => write!(f, "fnptr{sig}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    /// `None` is `void`.
    pub ret: Option<CType>,
    pub params: Vec<CType>,
    pub variadic: bool,
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{p}")?;
        }
        if self.variadic {
            write!(f, ", ...")?;
        }
        write!(f, ") -> ")?;
        match &self.ret {
            Some(t) => write!(f, "{t}"),
            None => write!(f, "void"),
        }
    }
}
