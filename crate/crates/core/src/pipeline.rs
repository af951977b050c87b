//! Source patch to dynamic patch, the front half of the workflow.

use std::collections::BTreeMap;

use crate::aspectdsl::{generate, render_audit, DynamicPatch, PatchError};
use crate::classifier::{check_stale_reads, classify, SemanticChangeSet, Warning};
use crate::csubset::{parse_file, semantic_diff, uncovered_hunk_lines, ParseError, TranslationUnit};
use crate::diffcore::{apply_patch, parse_unified_diff, ApplyError, DiffParseError, LineKind};

#[derive(Debug, thiserror::Error)]
pub enum TranslateError {
    #[error("diff: {0}")]
    Diff(#[from] DiffParseError),
    #[error("{file}: {source}")]
    Apply { file: String, source: ApplyError },
    #[error("{file}:{source}")]
    Parse { file: String, source: ParseError },
    #[error("no source for '{0}'")]
    MissingSource(String),
    #[error("the diff touches {0} files; one C file per patch is supported")]
    MultipleFiles(usize),
    #[error(transparent)]
    Patch(PatchError),
}

#[derive(Debug, Clone)]
pub struct Translation {
    /// Path of the patched file, as found in the source tree.
    pub file: String,
    pub new_source: String,
    pub old: TranslationUnit,
    pub new: TranslationUnit,
    pub changes: SemanticChangeSet,
    /// `None` when some change is static-only.
    pub patch: Option<DynamicPatch>,
    pub warnings: Vec<Warning>,
    /// Changed diff lines no semantic change accounts for.
    pub uncovered: Vec<(LineKind, usize)>,
    pub audit: String,
}

impl Translation {
    pub fn all_dynamic(&self) -> bool {
        self.patch.is_some()
    }
}

/// `a/x.c` and `b/x.c` name `x.c`, as `patch -p1` reads them.
fn lookup<'a>(sources: &'a BTreeMap<String, String>, path: &str) -> Option<(&'a String, &'a String)> {
    let stripped = path.split_once('/').map(|(_, r)| r);
    sources.get_key_value(path).or_else(|| stripped.and_then(|p| sources.get_key_value(p)))
}

/// Apply `diff` to the single file it touches in `sources` and derive the
/// dynamic patch. An empty diff yields an empty patch.
pub fn translate(sources: &BTreeMap<String, String>, diff: &str, id: &str) -> Result<Translation, TranslateError> {
    let sp = parse_unified_diff(diff)?;
    if sp.deltas.len() > 1 {
        return Err(TranslateError::MultipleFiles(sp.deltas.len()));
    }
    let Some(delta) = sp.deltas.first() else {
        let patch = DynamicPatch { id: id.to_string(), ..Default::default() };
        let changes = SemanticChangeSet::default();
        let audit = render_audit(&patch, &changes, &TranslationUnit::default());
        return Ok(Translation {
            file: String::new(),
            new_source: String::new(),
            old: TranslationUnit::default(),
            new: TranslationUnit::default(),
            changes,
            patch: Some(patch),
            warnings: Vec::new(),
            uncovered: Vec::new(),
            audit,
        });
    };
    let (file, old_src) = lookup(sources, &delta.old_path).ok_or_else(|| TranslateError::MissingSource(delta.old_path.clone()))?;
    let new_src = apply_patch(old_src, delta).map_err(|source| TranslateError::Apply { file: file.clone(), source })?;
    let parse = |src: &str| parse_file(file, src).map_err(|source| TranslateError::Parse { file: file.clone(), source });
    let old = parse(old_src)?;
    let new = parse(&new_src)?;
    let raw = semantic_diff(&old, &new);
    let uncovered = uncovered_hunk_lines(delta, old_src, &old, &new_src, &new, &raw);
    let changes = classify(&raw, &old, &new);
    let warnings = changes.items.iter().flat_map(|c| check_stale_reads(c, &old, &new)).collect();
    let patch = if changes.all_dynamic() {
        let mut p = generate(&changes, &new).map_err(TranslateError::Patch)?;
        p.id = id.to_string();
        p.description = format!("dynamic patch for {file}");
        Some(p)
    } else {
        None
    };
    let shown = patch.clone().unwrap_or_else(|| DynamicPatch { id: id.to_string(), ..Default::default() });
    let audit = render_audit(&shown, &changes, &old);
    Ok(Translation { file: file.clone(), new_source: new_src, old, new, changes, patch, warnings, uncovered, audit })
}
