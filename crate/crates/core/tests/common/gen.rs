//! Random program pairs for property tests: an old C unit and a patched
//! version with function body edits, new helpers, global retypes and
//! struct field additions.

use std::fmt::Write as _;
use std::io::Write as _;
use std::process::Command;

use hotmend::csubset::ScalarType;
use proptest::prelude::*;

#[derive(Debug, Clone)]
pub struct FuncShape {
    pub k: i64,
    pub global: usize,
    pub new_k: Option<i64>,
    pub guard: Option<i64>,
    pub helper: bool,
}

#[derive(Debug, Clone)]
pub struct Shape {
    pub globals: Vec<(ScalarType, Option<ScalarType>)>,
    pub funcs: Vec<FuncShape>,
    pub add_field: bool,
}

pub fn int_type() -> impl Strategy<Value = ScalarType> {
    prop::sample::select(ScalarType::ALL[..8].to_vec())
}

pub fn shape() -> impl Strategy<Value = Shape> {
    let globals = prop::collection::vec((int_type(), prop::option::weighted(0.3, int_type())), 1..4);
    (globals, 1usize..5, any::<bool>()).prop_flat_map(|(globals, nf, add_field)| {
        let ng = globals.len();
        let func = (-50i64..50, 0..ng, prop::option::weighted(0.5, -50i64..50), prop::option::weighted(0.4, 1i64..1000), prop::bool::weighted(0.3))
            .prop_map(|(k, global, new_k, guard, helper)| FuncShape { k, global, new_k, guard, helper });
        (Just(globals), prop::collection::vec(func, nf), Just(add_field)).prop_map(|(globals, funcs, add_field)| Shape { globals, funcs, add_field })
    })
}

impl Shape {
    pub fn render(&self, patched: bool) -> String {
        let mut s = String::new();
        s.push_str("struct rec {\n    int32_t a;\n    uint32_t b;\n");
        if patched && self.add_field {
            s.push_str("    int32_t c;\n");
        }
        s.push_str("};\n\nstruct rec r0;\n");
        for (i, (old, new)) in self.globals.iter().enumerate() {
            let ty = if patched { new.unwrap_or(*old) } else { *old };
            writeln!(s, "{} g{i} = {};", ty.c_name(), i + 1).unwrap();
        }
        for (i, f) in self.funcs.iter().enumerate() {
            let edited = patched && (f.new_k.is_some() || f.guard.is_some() || f.helper);
            if edited && f.helper {
                write!(s, "\nint32_t h{i}(int32_t x) {{\n    return x * 2;\n}}\n").unwrap();
            }
            write!(s, "\nint32_t f{i}(int32_t x) {{\n").unwrap();
            if edited {
                if let Some(g) = f.guard {
                    write!(s, "    if (x > {g}) {{\n        fatal(\"f{i}: %d too big\", x);\n    }}\n").unwrap();
                }
            }
            let k = if edited { f.new_k.unwrap_or(f.k) } else { f.k };
            writeln!(s, "    int32_t t = x + {k};").unwrap();
            s.push_str("    if (t > 10) {\n        t = t - 1;\n    }\n");
            if edited && f.helper {
                writeln!(s, "    t = t + h{i}(x);").unwrap();
            }
            if i == 0 && patched && self.add_field {
                s.push_str("    r0.c = r0.c + 1;\n");
            }
            writeln!(s, "    g{} = g{} + t;", f.global, f.global).unwrap();
            s.push_str("    r0.a = t;\n    return t;\n}\n");
        }
        s.push_str("\nint32_t handler(int32_t x) {\n    int32_t sum = 0;\n");
        for i in 0..self.funcs.len() {
            writeln!(s, "    sum = sum + f{i}(x);").unwrap();
        }
        s.push_str("    return sum;\n}\n");
        s
    }
}

/// `diff -u` of two texts, with `a/NAME` and `b/NAME` labels.
pub fn gnu_diff(old: &str, new: &str, name: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("old"), dir.path().join("new"));
    std::fs::write(&a, old).unwrap();
    std::fs::write(&b, new).unwrap();
    let out = Command::new("diff")
        .args(["-u", "--label", &format!("a/{name}"), "--label", &format!("b/{name}")])
        .arg(&a)
        .arg(&b)
        .output()
        .expect("run diff");
    assert!(out.status.code().is_some_and(|c| c <= 1), "diff failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Apply `diff` to `old` with GNU patch.
pub fn gnu_patch(old: &str, diff: &str) -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("file");
    std::fs::write(&target, old).unwrap();
    let mut child = Command::new("patch")
        .args(["--silent", "--force", "--no-backup-if-mismatch", "-r", "-"])
        .arg(&target)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .expect("run patch");
    child.stdin.take().unwrap().write_all(diff.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    if !out.status.success() {
        return Err(format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(std::fs::read_to_string(&target).unwrap())
}

/// Line-oriented text pairs that share much of their content.
pub fn text_pair() -> impl Strategy<Value = (String, String)> {
    let line = prop::sample::select(vec!["alpha", "beta", "gamma", "delta", "", "  indented", "{", "}", "x = 1;", "return x;"]);
    let lines = prop::collection::vec(line, 0..40);
    let edit = prop::collection::vec((0usize..40, 0u8..3, prop::sample::select(vec!["new", "beta", "z = 2;", ""])), 0..8);
    (lines, edit, any::<bool>(), any::<bool>()).prop_map(|(lines, edits, old_nl, new_nl)| {
        let old: Vec<&str> = lines.clone();
        let mut new = lines;
        for (at, op, text) in edits {
            let at = at.min(new.len());
            match op {
                0 => new.insert(at, text),
                1 if at < new.len() => {
                    new.remove(at);
                }
                _ if at < new.len() => new[at] = text,
                _ => new.push(text),
            }
        }
        let join = |v: &[&str], nl: bool| {
            let mut s = v.join("\n");
            if nl && !v.is_empty() {
                s.push('\n');
            }
            s
        };
        (join(&old, old_nl), join(&new, new_nl))
    })
}
