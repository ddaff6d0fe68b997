//! The Python-style recipe program: instruction comments inside `def main():`
//! followed by one nested function per step whose body is a single call
//! `h_k = Operation(inputs..., key = value, ...)`.

use std::fmt::Write as _;
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HEADER: &str = "instruction";
const BODY_INDENT: &str = "    ";
const CALL_INDENT: &str = "        ";

static MAIN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^def\s+main\s*\(\s*\)\s*:$").expect("valid regex"));
static DEF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^def\s+([A-Za-z0-9_]+)\s*\(\s*\)\s*:$").expect("valid regex"));
static CALL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)$").expect("valid regex"));
static KEYWORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([A-Za-z_][A-Za-z0-9_-]*)\s*=\s*(.*)$").expect("valid regex"));
static HANDLE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^h_([0-9]+)$").expect("valid regex"));

/// Function name of a cooking step: its words joined by underscores, with
/// characters outside `[A-Za-z0-9_]` removed.
pub fn instruction_to_function_name(step: &str) -> Result<String> {
    let words: Vec<String> = step
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '_').collect::<String>())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::argument(format!("step '{step}' has no identifier characters")));
    }
    Ok(words.join("_"))
}

pub fn is_handle(name: &str) -> bool {
    HANDLE.is_match(name)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeFunction {
    pub name: String,
    pub operation: String,
    /// Positional arguments: ingredients or earlier handles.
    pub inputs: Vec<String>,
    /// Keyword arguments in source order.
    pub parameters: IndexMap<String, String>,
    pub output_handle: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRecipe {
    pub instruction_comments: Vec<String>,
    pub functions: Vec<CodeFunction>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDiagnostic {
    /// 1-based source line.
    pub line: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedCode {
    pub recipe: CodeRecipe,
    pub diagnostics: Vec<CodeDiagnostic>,
}

impl CodeRecipe {
    /// Structural problems: comment/function count mismatch, names not
    /// derived from their comment, handles not `h_1..h_n` in order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.instruction_comments.len() != self.functions.len() {
            out.push(format!(
                "{} instruction comments but {} functions",
                self.instruction_comments.len(),
                self.functions.len()
            ));
        }
        for (k, f) in self.functions.iter().enumerate() {
            if let Some(c) = self.instruction_comments.get(k) {
                match instruction_to_function_name(c) {
                    Ok(n) if n == f.name => {}
                    Ok(n) => out.push(format!("function {} is named {} but its instruction gives {n}", k + 1, f.name)),
                    Err(e) => out.push(format!("instruction {}: {e}", k + 1)),
                }
            }
            let want = format!("h_{}", k + 1);
            if f.output_handle != want {
                out.push(format!("function {} assigns {} instead of {want}", k + 1, f.output_handle));
            }
        }
        out
    }

    /// Canonical source text.
    pub fn emit(&self) -> String {
        let mut s = String::from("def main():\n");
        let _ = writeln!(s, "{BODY_INDENT}#{HEADER}");
        for c in &self.instruction_comments {
            let _ = writeln!(s, "{BODY_INDENT}#{}", collapse(c));
        }
        if !self.functions.is_empty() {
            s.push('\n');
        }
        for f in &self.functions {
            let _ = writeln!(s, "{BODY_INDENT}def {}():", f.name);
            let args: Vec<String> = f
                .inputs
                .iter()
                .map(|a| quote_if_needed(a))
                .chain(f.parameters.iter().map(|(k, v)| format!("{k} = {}", quote_if_needed(v))))
                .collect();
            let _ = writeln!(s, "{CALL_INDENT}{} = {}({})", f.output_handle, f.operation, args.join(", "));
        }
        s
    }
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn quote_if_needed(v: &str) -> String {
    if v.is_empty() || v.contains([',', '(', ')', '=', '"']) {
        format!("\"{}\"", v.replace('"', "'"))
    } else {
        v.to_string()
    }
}

/// Splits call arguments on top-level commas, honouring double quotes and
/// nested parentheses.
fn split_args(args: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let (mut depth, mut quoted) = (0i32, false);
    for ch in args.chars() {
        match ch {
            '"' => {
                quoted = !quoted;
                cur.push(ch);
            }
            '(' if !quoted => {
                depth += 1;
                cur.push(ch);
            }
            ')' if !quoted => {
                depth -= 1;
                if depth < 0 {
                    return Err("unbalanced ')'".into());
                }
                cur.push(ch);
            }
            ',' if !quoted && depth == 0 => out.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    if quoted || depth != 0 {
        return Err("unterminated quote or parenthesis".into());
    }
    out.push(cur);
    let trimmed: Vec<String> = out.iter().map(|a| a.trim().to_string()).collect();
    if trimmed.len() == 1 && trimmed[0].is_empty() {
        return Ok(Vec::new());
    }
    if trimmed.iter().any(String::is_empty) {
        return Err("empty argument".into());
    }
    Ok(trimmed)
}

fn unquote(v: &str) -> String {
    let v = v.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        v[1..v.len() - 1].to_string()
    } else {
        collapse(v)
    }
}

fn parse_call(body: &str) -> std::result::Result<(String, String, Vec<String>, IndexMap<String, String>), String> {
    let caps = CALL.captures(body).ok_or("not of the form h_k = Operation(...)")?;
    let mut inputs = Vec::new();
    let mut parameters = IndexMap::new();
    for arg in split_args(&caps[3])? {
        if let Some(kw) = KEYWORD.captures(&arg) {
            let value = unquote(&kw[2]);
            if parameters.insert(kw[1].to_string(), value).is_some() {
                return Err(format!("parameter {} given twice", &kw[1]));
            }
        } else {
            inputs.push(unquote(&arg));
        }
    }
    Ok((caps[1].to_string(), caps[2].to_string(), inputs, parameters))
}

/// Whitespace-tolerant parse. Lines that fit no rule end up in the
/// diagnostics; it is an error only when no function could be read.
pub fn parse_code_recipe(text: &str) -> Result<ParsedCode> {
    let mut recipe = CodeRecipe::default();
    let mut diagnostics = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    let mut seen_header = false;
    let mut diag = |line: usize, text: &str, reason: &str| {
        diagnostics.push(CodeDiagnostic {
            line,
            text: text.to_string(),
            reason: reason.to_string(),
        })
    };
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with("```") || MAIN.is_match(line) {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = collapse(comment);
            if !seen_header && recipe.instruction_comments.is_empty() && comment.eq_ignore_ascii_case(HEADER) {
                seen_header = true;
            } else if !recipe.functions.is_empty() || pending.is_some() {
                diag(n, raw, "comment after the function definitions");
            } else if !comment.is_empty() {
                recipe.instruction_comments.push(comment);
            }
            continue;
        }
        if let Some(caps) = DEF.captures(line) {
            if let Some((l, name)) = pending.take() {
                diag(l, &format!("def {name}():"), "function without a body");
            }
            pending = Some((n, caps[1].to_string()));
            continue;
        }
        match parse_call(line) {
            Ok((output_handle, operation, inputs, parameters)) => match pending.take() {
                Some((_, name)) => recipe.functions.push(CodeFunction {
                    name,
                    operation,
                    inputs,
                    parameters,
                    output_handle,
                }),
                None => diag(n, raw, "call outside a function definition"),
            },
            Err(reason) => diag(n, raw, &reason),
        }
    }
    if let Some((l, name)) = pending {
        diag(l, &format!("def {name}():"), "function without a body");
    }
    if recipe.functions.is_empty() {
        let summary: Vec<String> = diagnostics.iter().map(|d| format!("line {}: {}", d.line, d.reason)).collect();
        return Err(Error::Parse {
            context: "recipe code".into(),
            message: if summary.is_empty() {
                "no function definitions found".into()
            } else {
                format!("no function definitions found ({})", summary.join("; "))
            },
        });
    }
    Ok(ParsedCode { recipe, diagnostics })
}

/// Canonical layout of recipe code by whitespace rules alone: four-space
/// indentation, `#text` comments, `name = value` and `, ` separators in
/// calls, one blank line before the first nested function.
pub fn normalize_code(text: &str) -> String {
    let mut out = String::new();
    let mut blank_done = false;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        if MAIN.is_match(line) {
            out.push_str("def main():\n");
        } else if let Some(c) = line.strip_prefix('#') {
            let _ = writeln!(out, "{BODY_INDENT}#{}", collapse(c));
        } else if let Some(caps) = DEF.captures(line) {
            if !blank_done {
                out.push('\n');
                blank_done = true;
            }
            let _ = writeln!(out, "{BODY_INDENT}def {}():", &caps[1]);
        } else {
            let _ = writeln!(out, "{CALL_INDENT}{}", normalize_call(line));
        }
    }
    out
}

fn normalize_call(line: &str) -> String {
    let mut out = String::new();
    let mut quoted = false;
    let mut pending_space = false;
    for ch in line.chars() {
        if quoted {
            out.push(ch);
            quoted = ch != '"';
            continue;
        }
        match ch {
            '"' => {
                if pending_space && !out.ends_with([' ', '(']) {
                    out.push(' ');
                }
                pending_space = false;
                out.push(ch);
                quoted = true;
            }
            c if c.is_whitespace() => pending_space = true,
            '(' | ')' => {
                // no space around a call's parentheses
                pending_space = false;
                while ch == ')' && out.ends_with(' ') {
                    out.pop();
                }
                out.push(ch);
            }
            ',' => {
                pending_space = false;
                out.push_str(", ");
            }
            '=' => {
                pending_space = false;
                while out.ends_with(' ') {
                    out.pop();
                }
                out.push_str(" = ");
            }
            _ => {
                if pending_space && !out.ends_with([' ', '(']) {
                    out.push(' ');
                }
                pending_space = false;
                out.push(ch);
            }
        }
    }
    out.trim_end().to_string()
}
