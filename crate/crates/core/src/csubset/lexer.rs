use serde::{Deserialize, Serialize};

use super::{ParseError, ParseErrorKind};

/// Source position of a token or item. Lines and columns are 1-based;
/// offsets are byte offsets into the (LF-normalized) source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub line: usize,
    pub col: usize,
    pub end_line: usize,
}

impl Span {
    pub fn to(self, other: Span) -> Span {
        Span { start: self.start, end: other.end, line: self.line, col: self.col, end_line: other.end_line }
    }

    pub fn contains_line(&self, line: usize) -> bool {
        (self.line..=self.end_line).contains(&line)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i128),
    Float(f64),
    Str(String),
    /// Keywords and punctuation.
    Punct(&'static str),
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
    /// Exact source text; used for token-stream comparison.
    pub text: String,
}

const PUNCTS: &[&str] = &[
    "<<=", ">>=", "...", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "{", "}",
    "(", ")", "[", "]", ";", ",", ".", "=", "+", "-", "*", "/", "%", "<", ">", "!", "~", "&", "|", "^", "?", ":",
];

pub fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let mut line_start = 0;

    macro_rules! err {
        ($pos:expr, $l:expr, $ls:expr, $kind:expr) => {
            return Err(ParseError { line: $l, col: $pos - $ls + 1, kind: $kind })
        };
    }

    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            line += 1;
            i += 1;
            line_start = i;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            let (sl, sls) = (line, line_start);
            let start = i;
            i += 2;
            loop {
                if i + 1 >= bytes.len() {
                    err!(start, sl, sls, ParseErrorKind::Syntax("unterminated comment".into()));
                }
                if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                    i += 2;
                    break;
                }
                if bytes[i] == b'\n' {
                    line += 1;
                    line_start = i + 1;
                }
                i += 1;
            }
            continue;
        }
        if c == b'#' {
            err!(i, line, line_start, ParseErrorKind::Unsupported("preprocessor directive".into()));
        }

        let start = i;
        let col = i - line_start + 1;
        let tok = if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            // `file!name` is how file-local symbols are spelled once qualified.
            if bytes.get(i) == Some(&b'!') && bytes.get(i + 1).is_some_and(|b| b.is_ascii_alphabetic() || *b == b'_') {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
            }
            Tok::Ident(src[start..i].to_string())
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            lex_number(src, &mut i).map_err(|m| ParseError { line, col, kind: ParseErrorKind::Syntax(m) })?
        } else if c == b'"' {
            i += 1;
            let mut s = String::new();
            loop {
                match bytes.get(i) {
                    None | Some(b'\n') => err!(start, line, line_start, ParseErrorKind::Syntax("unterminated string".into())),
                    Some(b'"') => {
                        i += 1;
                        break;
                    }
                    Some(b'\\') => {
                        let esc = bytes.get(i + 1).copied().unwrap_or(b'\\');
                        s.push(match esc {
                            b'n' => '\n',
                            b't' => '\t',
                            b'0' => '\0',
                            other => other as char,
                        });
                        i += 2;
                    }
                    Some(_) => {
                        let ch = src[i..].chars().next().unwrap();
                        s.push(ch);
                        i += ch.len_utf8();
                    }
                }
            }
            Tok::Str(s)
        } else if c == b'\'' {
            let (value, len) = match (bytes.get(i + 1), bytes.get(i + 2), bytes.get(i + 3)) {
                (Some(b'\\'), Some(e), Some(b'\'')) => {
                    let v = match e {
                        b'n' => b'\n',
                        b't' => b'\t',
                        b'0' => 0,
                        other => *other,
                    };
                    (v, 4)
                }
                (Some(ch), Some(b'\''), _) => (*ch, 3),
                _ => err!(start, line, line_start, ParseErrorKind::Syntax("bad character literal".into())),
            };
            i += len;
            Tok::Int(i128::from(value))
        } else if let Some(p) = PUNCTS.iter().find(|p| src[i..].starts_with(**p)) {
            i += p.len();
            Tok::Punct(p)
        } else {
            err!(i, line, line_start, ParseErrorKind::Syntax(format!("unexpected character {:?}", c as char)));
        };
        toks.push(Token { tok, text: src[start..i].to_string(), span: Span { start, end: i, line, col, end_line: line } });
    }
    let end = Span { start: src.len(), end: src.len(), line, col: src.len() - line_start + 1, end_line: line };
    toks.push(Token { tok: Tok::Eof, span: end, text: String::new() });
    Ok(toks)
}

fn lex_number(src: &str, i: &mut usize) -> Result<Tok, String> {
    let bytes = src.as_bytes();
    let start = *i;
    if bytes[*i] == b'0' && matches!(bytes.get(*i + 1), Some(b'x' | b'X')) {
        *i += 2;
        let ds = *i;
        while *i < bytes.len() && bytes[*i].is_ascii_hexdigit() {
            *i += 1;
        }
        let v = u64::from_str_radix(&src[ds..*i], 16).map_err(|e| format!("bad hex literal: {e}"))?;
        let v = i128::from(v);
        skip_int_suffix(bytes, i);
        return Ok(Tok::Int(v));
    }
    let mut is_float = false;
    while *i < bytes.len() && (bytes[*i].is_ascii_digit() || bytes[*i] == b'.') {
        is_float |= bytes[*i] == b'.';
        *i += 1;
    }
    if matches!(bytes.get(*i), Some(b'e' | b'E')) {
        is_float = true;
        *i += 1;
        if matches!(bytes.get(*i), Some(b'+' | b'-')) {
            *i += 1;
        }
        while *i < bytes.len() && bytes[*i].is_ascii_digit() {
            *i += 1;
        }
    }
    let text = &src[start..*i];
    if is_float {
        let v: f64 = text.parse().map_err(|_| format!("bad float literal {text:?}"))?;
        if matches!(bytes.get(*i), Some(b'f' | b'F')) {
            *i += 1;
        }
        Ok(Tok::Float(v))
    } else {
        let v: u64 = text.parse().map_err(|_| format!("bad integer literal {text:?}"))?;
        let v = i128::from(v);
        skip_int_suffix(bytes, i);
        Ok(Tok::Int(v))
    }
}

fn skip_int_suffix(bytes: &[u8], i: &mut usize) {
    while matches!(bytes.get(*i), Some(b'u' | b'U' | b'l' | b'L')) {
        *i += 1;
    }
}
