use std::fmt::Write;

use super::DynamicPatch;
use crate::classifier::SemanticChangeSet;
use crate::csubset::{print, TranslationUnit};

/// Line-level edit script: `(' ' | '-' | '+', line)`.
fn line_diff<'a>(old: &[&'a str], new: &[&'a str]) -> Vec<(char, &'a str)> {
    let (n, m) = (old.len(), new.len());
    let mut lcs = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if old[i] == new[j] { lcs[i + 1][j + 1] + 1 } else { lcs[i + 1][j].max(lcs[i][j + 1]) };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < n || j < m {
        if i < n && j < m && old[i] == new[j] {
            out.push((' ', old[i]));
            i += 1;
            j += 1;
        } else if i < n && (j == m || lcs[i + 1][j] >= lcs[i][j + 1]) {
            out.push(('-', old[i]));
            i += 1;
        } else {
            out.push(('+', new[j]));
            j += 1;
        }
    }
    out
}

/// Human-readable review of a patch: verdicts, then each replaced function
/// with its old and new bodies interleaved and the changed lines marked,
/// then the runtime checks and aspects.
pub fn render_audit(patch: &DynamicPatch, changes: &SemanticChangeSet, old: &TranslationUnit) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "patch {}: {}", patch.id, patch.description);
    let _ = writeln!(out, "\nverdicts:");
    for c in &changes.items {
        let target = c.new_name.as_ref().map(|n| format!(" -> {n}")).unwrap_or_default();
        let _ = writeln!(out, "  {:?} {}{target}: {}", c.kind, c.old_name, c.verdict);
    }
    let renames = changes.renames();
    for f in &patch.replacement_functions {
        let original = renames.iter().find(|(_, n)| **n == f.name).map(|(o, _)| o.as_str());
        let new_text = print::function(f);
        match original.and_then(|o| old.function(o)) {
            Some(of) => {
                let _ = writeln!(out, "\nfunction {} (replaces {}):", f.name, of.name);
                let old_text = print::function(of);
                let a: Vec<&str> = old_text.lines().collect();
                let b: Vec<&str> = new_text.lines().collect();
                for (mark, line) in line_diff(&a, &b) {
                    let _ = writeln!(out, "{mark} {line}");
                }
            }
            None => {
                let _ = writeln!(out, "\nfunction {} (new):", f.name);
                for line in new_text.lines() {
                    let _ = writeln!(out, "+ {line}");
                }
            }
        }
    }
    if !patch.checks.is_empty() {
        let _ = writeln!(out, "\nruntime checks:");
        for c in &patch.checks {
            let _ = writeln!(out, "  {c}");
        }
    }
    let _ = writeln!(out, "\naspects ({}):", patch.aspects.len());
    for a in &patch.aspects {
        let _ = writeln!(out, "  {}: {} => {}", a.name, a.pointcut, a.action);
    }
    out
}
