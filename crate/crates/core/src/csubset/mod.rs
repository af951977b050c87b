//! A small C subset: functions, scalar and struct globals, locals,
//! arithmetic, `if`/`while`/`return`, direct calls, calls through function
//! pointers, address-of on functions and member access.
//!
//! Out of subset (rejected as [`ParseErrorKind::Unsupported`]): the
//! preprocessor, typedef, unions, enums, bitfields, arrays, casts, `sizeof`,
//! `for`/`do`/`switch`/`goto`, pointers to anything but structs, and the
//! conditional operator.

pub mod ast;
pub mod diff;
pub mod lexer;
pub mod parser;
pub mod print;
pub mod types;

use std::fmt;

pub use ast::*;
pub use diff::{semantic_diff, uncovered_hunk_lines, RawChange};
pub use parser::{parse_unit, ParseOptions};
pub use types::{CType, NumericClass, ScalarType, Signature};

/// Functions the VM provides; callable without a declaration.
pub const BUILTINS: &[&str] = &["fatal", "trace", "emit", "sleep", "halt"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax(String),
    /// A construct outside the supported subset.
    Unsupported(String),
    Undeclared(String),
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Syntax(m) => write!(f, "syntax error: {m}"),
            ParseErrorKind::Unsupported(m) => write!(f, "unsupported construct: {m}"),
            ParseErrorKind::Undeclared(m) => write!(f, "undeclared identifier '{m}'"),
            ParseErrorKind::Duplicate(m) => write!(f, "duplicate definition of '{m}'"),
        }
    }
}

/// Parse source that has no file name; `static` symbols are qualified
/// with the stem `unit`.
pub fn parse_translation_unit(src: &str) -> Result<TranslationUnit, ParseError> {
    parse_file("unit.c", src)
}

pub fn parse_file(file: &str, src: &str) -> Result<TranslationUnit, ParseError> {
    parse_unit(file, src, &ParseOptions::default())
}

/// Canonical structured-text dump: JSON with sorted keys.
pub fn dump_unit(unit: &TranslationUnit) -> String {
    crate::canon::to_canonical_pretty(unit)
}
