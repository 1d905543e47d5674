//! Structural checks over generated text. No elaboration or simulation.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{parse_hex_lines, RtlBundle};
use crate::error::Error;

const REQUIRED_FILES: [&str; 7] = [
    "mlp_constants_pkg.vhd",
    "mlp_rom_pkg.vhd",
    "mlp_layer_unit.vhd",
    "mlp_control.vhd",
    "mlp_top.vhd",
    "weights.hex",
    "INTERFACE.md",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub file: String,
    /// 1-based; 0 refers to the whole file.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.message)
    }
}

pub fn lint_bundle(bundle: &RtlBundle) -> Vec<Finding> {
    let mut findings: Vec<Finding> = REQUIRED_FILES
        .iter()
        .filter(|f| !bundle.files.contains_key(**f))
        .map(|f| Finding {
            file: f.to_string(),
            line: 0,
            message: "missing from bundle".into(),
        })
        .collect();
    for (name, text) in &bundle.files {
        findings.extend(lint_text(name, text));
    }
    findings
}

/// Lints one file; the checks applied depend on the extension.
pub fn lint_text(name: &str, text: &str) -> Vec<Finding> {
    let mut out = Vec::new();
    let mut push = |line: usize, message: String| {
        out.push(Finding {
            file: name.to_string(),
            line,
            message,
        })
    };
    for (i, line) in text.lines().enumerate() {
        if line.contains("{{") || line.contains("}}") {
            push(i + 1, "unsubstituted template placeholder".into());
        }
    }
    if text.contains('\r') {
        push(0, "CR line ending".into());
    }
    if name.ends_with(".hex") {
        if let Err(Error::Parse { line, message }) = parse_hex_lines(text) {
            push(line, message);
        }
    } else if name.ends_with(".vhd") {
        let code: Vec<String> = text.lines().map(strip_comment).collect();
        check_blocks(&code, &mut push);
        check_signals(&code, &mut push);
        check_literals(&code, &mut push);
    }
    out
}

fn strip_comment(line: &str) -> String {
    let mut in_string = false;
    let bytes = line.as_bytes();
    for i in 0..bytes.len() {
        match bytes[i] {
            b'"' => in_string = !in_string,
            b'-' if !in_string && bytes.get(i + 1) == Some(&b'-') => {
                return line[..i].to_ascii_lowercase();
            }
            _ => {}
        }
    }
    line.to_ascii_lowercase()
}

fn words(line: &str) -> Vec<&str> {
    line.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .collect()
}

fn check_blocks(code: &[String], push: &mut impl FnMut(usize, String)) {
    let mut stack: Vec<(&'static str, usize)> = Vec::new();
    for (i, line) in code.iter().enumerate() {
        let w = words(line);
        let lineno = i + 1;
        let opener = match w.as_slice() {
            ["entity", _, "is", ..] => Some("entity"),
            ["architecture", _, "of", _, "is", ..] => Some("architecture"),
            ["package", ..] if w.contains(&"is") => Some("package"),
            ["process", ..] => Some("process"),
            [label, "process", ..] if *label != "end" && line.contains(':') => Some("process"),
            _ => None,
        };
        if let Some(kind) = opener {
            stack.push((kind, lineno));
            continue;
        }
        if let ["end", kind @ ("entity" | "architecture" | "package" | "process"), ..] = w.as_slice() {
            match stack.pop() {
                Some((open, _)) if open == *kind => {}
                Some((open, at)) => push(lineno, format!("`end {kind}` closes {open} opened at line {at}")),
                None => push(lineno, format!("`end {kind}` without matching {kind}")),
            }
        }
    }
    for (kind, at) in stack {
        push(at, format!("{kind} is never closed"));
    }
}

fn check_signals(code: &[String], push: &mut impl FnMut(usize, String)) {
    let all: Vec<&str> = code.iter().flat_map(|l| words(l)).collect();
    for (i, line) in code.iter().enumerate() {
        let trimmed = line.trim_start();
        let Some(rest) = trimmed.strip_prefix("signal ") else {
            continue;
        };
        let Some((names, _)) = rest.split_once(':') else {
            continue;
        };
        for name in names.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            if all.iter().filter(|w| **w == name).count() < 2 {
                push(i + 1, format!("signal `{name}` is declared but never used"));
            }
        }
    }
}

fn check_literals(code: &[String], push: &mut impl FnMut(usize, String)) {
    for (i, line) in code.iter().enumerate() {
        for (func, signed) in [("to_signed(", true), ("to_unsigned(", false)] {
            let mut from = 0;
            while let Some(pos) = line[from..].find(func) {
                let start = from + pos + func.len();
                from = start;
                let Some(args) = call_args(&line[start..]) else { continue };
                let [value, width] = args.as_slice() else { continue };
                let (Ok(v), Ok(bits)) = (value.parse::<i128>(), width.parse::<u32>()) else {
                    continue;
                };
                if !fits(v, bits, signed) {
                    let kind = if signed { "signed" } else { "unsigned" };
                    push(i + 1, format!("literal {v} does not fit {bits}-bit {kind}"));
                }
            }
        }
        if let Some((lo, hi, v)) = ranged_constant(line) {
            if v < lo || v > hi {
                push(i + 1, format!("constant value {v} outside declared range {lo} to {hi}"));
            }
        }
        let mut rest = line.as_str();
        while let Some(pos) = rest.find("x\"") {
            let after = &rest[pos + 2..];
            let Some(end) = after.find('"') else { break };
            let digits = &after[..end];
            if digits.len() != 2 || !digits.bytes().all(|c| c.is_ascii_hexdigit()) {
                push(i + 1, format!("x\"{digits}\" is not a byte literal"));
            }
            rest = &after[end + 1..];
        }
    }
}

fn fits(v: i128, bits: u32, signed: bool) -> bool {
    if bits == 0 || bits > 64 {
        return false;
    }
    if signed {
        let half = 1i128 << (bits - 1);
        (-half..half).contains(&v)
    } else {
        (0..1i128 << bits).contains(&v)
    }
}

/// Top-level comma separated arguments up to the matching `)`.
fn call_args(s: &str) -> Option<Vec<String>> {
    let mut depth = 0;
    let mut args = vec![String::new()];
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' if depth == 0 => {
                return Some(args.into_iter().map(|a| a.trim().to_string()).collect());
            }
            ')' => depth -= 1,
            ',' if depth == 0 => {
                args.push(String::new());
                continue;
            }
            _ => {}
        }
        args.last_mut().expect("non-empty").push(c);
    }
    None
}

/// `constant NAME : integer range LO to HI := V;` with literal bounds.
fn ranged_constant(line: &str) -> Option<(i128, i128, i128)> {
    let rest = line.trim_start().strip_prefix("constant ")?;
    let (_, decl) = rest.split_once(':')?;
    let decl = decl.trim_start().strip_prefix("integer range ")?;
    let (range, value) = decl.split_once(":=")?;
    let (lo, hi) = range.split_once(" to ")?;
    let value = value.trim().strip_suffix(';')?;
    Some((lo.trim().parse().ok()?, hi.trim().parse().ok()?, value.trim().parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{builtin_profiles, find_profile};
    use crate::emu::Schedule;
    use crate::rtlgen::tests::model;
    use crate::rtlgen::{generate_rtl, generate_testbench};

    fn bundle() -> RtlBundle {
        let q = model(&[3, 16, 16, 1], 11);
        let sched = Schedule::pipelined(2, 24e6);
        let profiles = builtin_profiles();
        let xc = find_profile(&profiles, "xc7s15").unwrap();
        let mut b = generate_rtl(&q, &sched, xc, false).unwrap();
        b.add_testbench(generate_testbench(&q, &sched, &[vec![0.25; 3], vec![0.75; 3]]).unwrap());
        b
    }

    #[test]
    fn generated_bundle_is_clean() {
        let findings = lint_bundle(&bundle());
        assert!(findings.is_empty(), "{findings:#?}");
    }

    #[test]
    fn placeholder_reported_with_file_and_line() {
        let mut b = bundle();
        let top = b.files.get_mut("mlp_top.vhd").unwrap();
        *top = top.replacen("begin\n", "begin\n  {{oops}}\n", 1);
        let findings = lint_bundle(&b);
        assert_eq!(findings.len(), 1, "{findings:#?}");
        assert_eq!(findings[0].file, "mlp_top.vhd");
        let line = b.files["mlp_top.vhd"].lines().position(|l| l.contains("{{oops}}")).unwrap() + 1;
        assert_eq!(findings[0].line, line);
    }

    #[test]
    fn literal_width() {
        let f = lint_text("a.vhd", "  x <= to_signed(300, 8);\n  y <= to_signed(-128, 8);\n");
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].line, 1);
        assert!(!lint_text("a.vhd", "  x <= to_unsigned(256, 8);").is_empty());
        assert!(lint_text("a.vhd", "  x <= to_unsigned(255, 8);").is_empty());
        let f = lint_text("a.vhd", "  constant Z : integer range -128 to 127 := 300;\n");
        assert_eq!(f.len(), 1);
        assert_eq!(lint_text("a.vhd", "  c := x\"1ff\";").len(), 1);
    }

    #[test]
    fn unbalanced_blocks_and_unused_signals() {
        let src = "entity e is\nend entity e;\narchitecture rtl of e is\n  signal a, b : std_logic;\nbegin\n  a <= '1';\n  process (a)\n  begin\n  end process;\n";
        let f = lint_text("e.vhd", src);
        let msgs: Vec<&str> = f.iter().map(|f| f.message.as_str()).collect();
        assert_eq!(f.len(), 2, "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("architecture is never closed")));
        assert!(msgs.iter().any(|m| m.contains("`b`")));
        let f = lint_text("e.vhd", "entity e is\nend architecture;\n");
        assert!(f[0].message.contains("closes entity"));
    }

    #[test]
    fn hex_and_missing_files() {
        let f = lint_text("golden.hex", "00\nABC\n");
        assert_eq!((f.len(), f[0].line), (1, 2));
        let mut b = bundle();
        b.files.remove("mlp_control.vhd");
        let f = lint_bundle(&b);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].file, "mlp_control.vhd");
    }

    #[test]
    fn comments_are_ignored() {
        assert!(lint_text("c.vhd", "-- to_signed(999, 8) x\"123\"\n").is_empty());
    }
}
