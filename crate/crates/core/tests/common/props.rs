//! Property bodies shared by the round-trip tests and the acceptance run.

use std::collections::BTreeMap;

use hotmend::aspectdsl::{compile, insert_alarm, parse_patch, render_patch};
use hotmend::diffcore::{apply_patch, parse_unified_diff, SourcePatch};
use hotmend::pipeline::translate;
use proptest::prelude::*;

use super::gen::{gnu_diff, gnu_patch, Shape};

/// Ids and descriptions full of characters the patch syntax must escape.
pub fn names() -> impl Strategy<Value = (String, String)> {
    let id = prop::collection::vec(prop::sample::select(vec!["a", "Z", "-", " ", "\"", "\\", "9", "{", ";", "/*"]), 1..12);
    let description = prop::collection::vec(prop::sample::select(vec!["x", " ", "\"", "\\", "\t", "é"]), 0..20);
    (id, description).prop_map(|(a, b)| (a.concat(), b.concat()))
}

/// Translate a generated program pair and check that the dynamic patch
/// survives render and parse unchanged, then compiles.
pub fn patch_round_trip(s: &Shape, id: &str, description: &str, alarm: bool) -> Result<(), TestCaseError> {
    let (old, new) = (s.render(false), s.render(true));
    let diff = gnu_diff(&old, &new, "unit.c");
    let sources = BTreeMap::from([("unit.c".to_string(), old)]);
    let t = translate(&sources, &diff, id).map_err(|e| TestCaseError::fail(e.to_string()))?;
    if t.file.is_empty() {
        prop_assert!(diff.is_empty());
    } else {
        prop_assert_eq!(&t.new_source, &new);
    }
    let Some(mut p) = t.patch else {
        return Err(TestCaseError::fail(format!("static-only:\n{}", t.audit)));
    };
    p.description = description.to_string();
    if alarm {
        // Only functions that gained a fatal path can carry an alarm.
        let targets: Vec<String> = p.replaced().iter().map(|(t, _)| t.to_string()).collect();
        if let Some(q) = targets.iter().find_map(|n| insert_alarm(&p, n, "caught \"it\"").ok()) {
            p = q;
        }
    }
    let text = render_patch(&p);
    let back = parse_patch(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
    prop_assert_eq!(&back, &p);
    prop_assert_eq!(render_patch(&back), text);
    compile(&p).map_err(|e| TestCaseError::fail(format!("{e}\n{}", render_patch(&p))))?;
    Ok(())
}

/// GNU diff output parses, applies both ways, and our rendering of it is
/// accepted by GNU patch.
pub fn diff_round_trip(old: &str, new: &str) -> Result<(), TestCaseError> {
    let diff = gnu_diff(old, new, "f.txt");
    let sp = parse_unified_diff(&diff).map_err(|e| TestCaseError::fail(e.to_string()))?;
    if old == new {
        prop_assert!(sp.deltas.is_empty());
        return Ok(());
    }
    prop_assert_eq!(sp.deltas.len(), 1);
    let d = &sp.deltas[0];
    prop_assert_eq!(apply_patch(old, d).map_err(|e| TestCaseError::fail(e.to_string()))?, new);
    prop_assert_eq!(apply_patch(new, &d.inverse()).map_err(|e| TestCaseError::fail(e.to_string()))?, old);

    let ours = sp.to_string();
    prop_assert_eq!(&parse_unified_diff(&ours).map_err(|e| TestCaseError::fail(e.to_string()))?, &sp);
    prop_assert_eq!(gnu_patch(old, &ours).map_err(TestCaseError::fail)?, new);
    let inverse = SourcePatch { deltas: vec![d.inverse()] }.to_string();
    prop_assert_eq!(gnu_patch(new, &inverse).map_err(TestCaseError::fail)?, old);
    Ok(())
}
