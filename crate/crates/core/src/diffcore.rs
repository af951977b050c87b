//! Unified diff parsing and application.
//!
//! Only the `diff -u` format is accepted. Line endings are normalized to LF
//! before parsing, and hunks must match the old text exactly: there is no
//! fuzz factor and no offset search.

use std::fmt;

use thiserror::Error;

const NO_NEWLINE_MARKER: &str = "\\ No newline at end of file";

/// A parsed unified diff: one delta per file section, in input order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourcePatch {
    pub deltas: Vec<FileDelta>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileDelta {
    pub old_path: String,
    pub new_path: String,
    pub hunks: Vec<Hunk>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LineKind {
    Context,
    Removed,
    Added,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HunkLine {
    pub kind: LineKind,
    pub text: String,
}

/// One `@@ -a,b +c,d @@` block. Coordinates are 1-based; a zero length side
/// names the line *after which* the hunk applies, as `diff` emits it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    /// Text after the closing `@@`, usually the enclosing function header.
    pub section: String,
    pub lines: Vec<HunkLine>,
    /// The last old-side line of this hunk has no trailing newline.
    pub old_missing_newline: bool,
    /// The last new-side line of this hunk has no trailing newline.
    pub new_missing_newline: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct DiffParseError {
    pub line: usize,
    pub kind: DiffParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiffParseErrorKind {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed hunk header: {0}")]
    MalformedHunkHeader(String),
    #[error("hunk line counts do not match header (expected -{expected_old} +{expected_new}, found -{found_old} +{found_new})")]
    InconsistentCounts { expected_old: usize, expected_new: usize, found_old: usize, found_new: usize },
    #[error("input ends inside a hunk")]
    Truncated,
    #[error("hunks overlap or are out of order")]
    UnorderedHunks,
    #[error("context-format diffs are not supported")]
    ContextFormat,
    #[error("hunk outside of a file section")]
    OrphanHunk,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("hunk {hunk}: context mismatch at old line {line}: expected {expected:?}, found {found:?}")]
    ContextMismatch { hunk: usize, line: usize, expected: String, found: Option<String> },
    #[error("hunk {hunk}: end-of-file newline state does not match the source")]
    NewlineMismatch { hunk: usize },
}

impl Hunk {
    fn old_lines(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter(|l| l.kind != LineKind::Added).map(|l| l.text.as_str())
    }

    fn new_lines(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter(|l| l.kind != LineKind::Removed).map(|l| l.text.as_str())
    }

    /// Old-side line numbers (1-based) of removed lines.
    pub fn removed_line_numbers(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut old = self.old_first_line();
        for l in &self.lines {
            match l.kind {
                LineKind::Context => old += 1,
                LineKind::Removed => {
                    out.push(old);
                    old += 1;
                }
                LineKind::Added => {}
            }
        }
        out
    }

    /// New-side line numbers (1-based) of added lines.
    pub fn added_line_numbers(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut new = self.new_first_line();
        for l in &self.lines {
            match l.kind {
                LineKind::Context => new += 1,
                LineKind::Added => {
                    out.push(new);
                    new += 1;
                }
                LineKind::Removed => {}
            }
        }
        out
    }

    fn old_first_line(&self) -> usize {
        if self.old_len == 0 {
            self.old_start + 1
        } else {
            self.old_start
        }
    }

    fn new_first_line(&self) -> usize {
        if self.new_len == 0 {
            self.new_start + 1
        } else {
            self.new_start
        }
    }

    fn inverse(&self) -> Hunk {
        Hunk {
            old_start: self.new_start,
            old_len: self.new_len,
            new_start: self.old_start,
            new_len: self.old_len,
            section: self.section.clone(),
            lines: self
                .lines
                .iter()
                .map(|l| HunkLine {
                    kind: match l.kind {
                        LineKind::Context => LineKind::Context,
                        LineKind::Removed => LineKind::Added,
                        LineKind::Added => LineKind::Removed,
                    },
                    text: l.text.clone(),
                })
                .collect(),
            old_missing_newline: self.new_missing_newline,
            new_missing_newline: self.old_missing_newline,
        }
    }
}

impl FileDelta {
    /// The delta that undoes this one.
    pub fn inverse(&self) -> FileDelta {
        FileDelta { old_path: self.new_path.clone(), new_path: self.old_path.clone(), hunks: self.hunks.iter().map(Hunk::inverse).collect() }
    }
}

fn normalize_newlines(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

fn parse_path(rest: &str) -> String {
    // `diff` separates the timestamp with a tab.
    let path = rest.split('\t').next().unwrap_or("");
    path.trim_end().to_string()
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    match s.split_once(',') {
        Some((start, len)) => Some((start.parse().ok()?, len.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_hunk_header(line: &str) -> Option<(usize, usize, usize, usize, String)> {
    let rest = line.strip_prefix("@@ -")?;
    let (ranges, section) = rest.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let (os, ol) = parse_range(old)?;
    let (ns, nl) = parse_range(new)?;
    let section = section.strip_prefix(' ').unwrap_or(section).to_string();
    Some((os, ol, ns, nl, section))
}

/// Parse unified-diff text. Lines outside file sections (`diff ...`,
/// `Index:` and similar preambles) are ignored.
pub fn parse_unified_diff(text: &str) -> Result<SourcePatch, DiffParseError> {
    let text = normalize_newlines(text);
    let lines: Vec<&str> = if text.is_empty() { Vec::new() } else { text.strip_suffix('\n').unwrap_or(&text).split('\n').collect() };
    let err = |idx: usize, kind| DiffParseError { line: idx + 1, kind };

    let mut patch = SourcePatch::default();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.starts_with("***************") || (line.starts_with("*** ") && lines.get(i + 1).is_some_and(|n| n.starts_with("--- "))) {
            return Err(err(i, DiffParseErrorKind::ContextFormat));
        }
        if let Some(rest) = line.strip_prefix("--- ") {
            let Some(next) = lines.get(i + 1) else {
                return Err(err(i + 1, DiffParseErrorKind::Truncated));
            };
            let Some(new_rest) = next.strip_prefix("+++ ") else {
                return Err(err(i + 1, DiffParseErrorKind::MalformedHeader(format!("expected '+++' line, found {next:?}"))));
            };
            let mut delta = FileDelta { old_path: parse_path(rest), new_path: parse_path(new_rest), hunks: Vec::new() };
            if delta.old_path.is_empty() || delta.new_path.is_empty() {
                return Err(err(i, DiffParseErrorKind::MalformedHeader("empty path".into())));
            }
            i += 2;
            while i < lines.len() && lines[i].starts_with("@@") {
                let (hunk, next) = parse_hunk(&lines, i)?;
                if let Some(prev) = delta.hunks.last() {
                    let prev_end = prev.old_start + prev.old_len;
                    if hunk.old_start < prev_end || hunk.old_start < prev.old_start {
                        return Err(err(i, DiffParseErrorKind::UnorderedHunks));
                    }
                }
                delta.hunks.push(hunk);
                i = next;
            }
            if delta.hunks.is_empty() {
                return Err(err(i.min(lines.len()), DiffParseErrorKind::Truncated));
            }
            patch.deltas.push(delta);
            continue;
        }
        if line.starts_with("@@ ") {
            return Err(err(i, DiffParseErrorKind::OrphanHunk));
        }
        i += 1;
    }
    Ok(patch)
}

fn parse_hunk(lines: &[&str], start: usize) -> Result<(Hunk, usize), DiffParseError> {
    let header = lines[start];
    let (old_start, old_len, new_start, new_len, section) = parse_hunk_header(header)
        .ok_or_else(|| DiffParseError { line: start + 1, kind: DiffParseErrorKind::MalformedHunkHeader(header.to_string()) })?;
    let mut hunk =
        Hunk { old_start, old_len, new_start, new_len, section, lines: Vec::new(), old_missing_newline: false, new_missing_newline: false };
    let (mut seen_old, mut seen_new) = (0usize, 0usize);
    let mut i = start + 1;
    let counts_error = |seen_old, seen_new| DiffParseErrorKind::InconsistentCounts {
        expected_old: old_len,
        expected_new: new_len,
        found_old: seen_old,
        found_new: seen_new,
    };
    while seen_old < old_len || seen_new < new_len {
        let Some(line) = lines.get(i) else {
            return Err(DiffParseError { line: i + 1, kind: DiffParseErrorKind::Truncated });
        };
        let (kind, text) = match line.chars().next() {
            Some(' ') => (LineKind::Context, &line[1..]),
            // Some tools drop the single space of an empty context line.
            None => (LineKind::Context, ""),
            Some('-') => (LineKind::Removed, &line[1..]),
            Some('+') => (LineKind::Added, &line[1..]),
            Some('\\') => {
                mark_missing_newline(&mut hunk);
                i += 1;
                continue;
            }
            _ => {
                return Err(DiffParseError { line: i + 1, kind: counts_error(seen_old, seen_new) });
            }
        };
        match kind {
            LineKind::Context => {
                seen_old += 1;
                seen_new += 1;
            }
            LineKind::Removed => seen_old += 1,
            LineKind::Added => seen_new += 1,
        }
        if seen_old > old_len || seen_new > new_len {
            return Err(DiffParseError { line: i + 1, kind: counts_error(seen_old, seen_new) });
        }
        hunk.lines.push(HunkLine { kind, text: text.to_string() });
        i += 1;
    }
    if lines.get(i).is_some_and(|l| l.starts_with('\\')) {
        mark_missing_newline(&mut hunk);
        i += 1;
    }
    // A surplus body line directly after a satisfied hunk means the header
    // undercounts.
    if let Some(line) = lines.get(i) {
        let surplus = (line.starts_with('+') && !line.starts_with("+++ "))
            || (line.starts_with('-') && !(line.starts_with("--- ") && lines.get(i + 1).is_some_and(|n| n.starts_with("+++ "))))
            || line.starts_with(' ');
        if surplus {
            let (extra_old, extra_new) = match line.as_bytes()[0] {
                b'+' => (0, 1),
                b'-' => (1, 0),
                _ => (1, 1),
            };
            return Err(DiffParseError { line: i + 1, kind: counts_error(seen_old + extra_old, seen_new + extra_new) });
        }
    }
    Ok((hunk, i))
}

fn mark_missing_newline(hunk: &mut Hunk) {
    match hunk.lines.last().map(|l| l.kind) {
        Some(LineKind::Context) => {
            hunk.old_missing_newline = true;
            hunk.new_missing_newline = true;
        }
        Some(LineKind::Removed) => hunk.old_missing_newline = true,
        Some(LineKind::Added) => hunk.new_missing_newline = true,
        None => {}
    }
}

struct Lines {
    lines: Vec<String>,
    trailing_newline: bool,
}

impl Lines {
    fn split(text: &str) -> Lines {
        let text = normalize_newlines(text);
        if text.is_empty() {
            return Lines { lines: Vec::new(), trailing_newline: true };
        }
        let trailing_newline = text.ends_with('\n');
        let body = text.strip_suffix('\n').unwrap_or(&text);
        Lines { lines: body.split('\n').map(str::to_string).collect(), trailing_newline }
    }

    fn join(&self) -> String {
        if self.lines.is_empty() {
            return String::new();
        }
        let mut out = self.lines.join("\n");
        if self.trailing_newline {
            out.push('\n');
        }
        out
    }
}

/// Apply one file delta to `old_source`, requiring exact context.
pub fn apply_patch(old_source: &str, delta: &FileDelta) -> Result<String, ApplyError> {
    let old = Lines::split(old_source);
    let mut out: Vec<String> = Vec::with_capacity(old.lines.len());
    let mut cursor = 0usize;
    let mut trailing_newline = old.trailing_newline;

    for (idx, hunk) in delta.hunks.iter().enumerate() {
        let hunk_no = idx + 1;
        let begin = if hunk.old_len == 0 { hunk.old_start } else { hunk.old_start.saturating_sub(1) };
        if begin < cursor || begin > old.lines.len() {
            return Err(ApplyError::ContextMismatch {
                hunk: hunk_no,
                line: begin + 1,
                expected: hunk.old_lines().next().unwrap_or("").to_string(),
                found: None,
            });
        }
        out.extend(old.lines[cursor..begin].iter().cloned());
        let mut pos = begin;
        for expected in hunk.old_lines() {
            let found = old.lines.get(pos);
            if found.map(String::as_str) != Some(expected) {
                return Err(ApplyError::ContextMismatch { hunk: hunk_no, line: pos + 1, expected: expected.to_string(), found: found.cloned() });
            }
            pos += 1;
        }
        let reaches_eof = pos == old.lines.len();
        if hunk.old_len > 0 && reaches_eof && hunk.old_missing_newline == old.trailing_newline {
            return Err(ApplyError::NewlineMismatch { hunk: hunk_no });
        }
        out.extend(hunk.new_lines().map(str::to_string));
        if reaches_eof {
            trailing_newline = !hunk.new_missing_newline;
        }
        cursor = pos;
    }
    out.extend(old.lines[cursor..].iter().cloned());
    Ok(Lines { lines: out, trailing_newline }.join())
}

impl fmt::Display for SourcePatch {
    /// Renders the patch back to unified-diff text.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for delta in &self.deltas {
            writeln!(f, "--- {}", delta.old_path)?;
            writeln!(f, "+++ {}", delta.new_path)?;
            for hunk in &delta.hunks {
                write!(f, "@@ -{},{} +{},{} @@", hunk.old_start, hunk.old_len, hunk.new_start, hunk.new_len)?;
                if hunk.section.is_empty() {
                    writeln!(f)?;
                } else {
                    writeln!(f, " {}", hunk.section)?;
                }
                let last_old = hunk.lines.iter().rposition(|l| l.kind != LineKind::Added);
                let last_new = hunk.lines.iter().rposition(|l| l.kind != LineKind::Removed);
                for (i, line) in hunk.lines.iter().enumerate() {
                    let prefix = match line.kind {
                        LineKind::Context => ' ',
                        LineKind::Removed => '-',
                        LineKind::Added => '+',
                    };
                    writeln!(f, "{prefix}{}", line.text)?;
                    let marks_old = hunk.old_missing_newline && Some(i) == last_old;
                    let marks_new = hunk.new_missing_newline && Some(i) == last_new;
                    if marks_old || marks_new {
                        writeln!(f, "{NO_NEWLINE_MARKER}")?;
                    }
                }
            }
        }
        Ok(())
    }
}
