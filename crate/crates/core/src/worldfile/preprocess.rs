//! Text-level expansion of world files.
//!
//! Directives: `<include file="..."/>`, `<for var= from= to= [step=]>`
//! blocks, `${VAR}` / `${VAR|default}` and `$(expr)`. Everything else,
//! comments included, is copied through untouched, so a file without
//! directives comes out byte-identical.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use super::expr;

const MAX_INCLUDE_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PreprocessErrorKind {
    IncludeCycle,
    UndefinedVariable,
    ExpressionError,
    Syntax,
    Io,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessError {
    pub kind: PreprocessErrorKind,
    pub file: String,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for PreprocessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {:?}: {}", self.file, self.line, self.kind, self.message)
    }
}

impl std::error::Error for PreprocessError {}

struct Source<'a> {
    text: &'a str,
    file: &'a str,
    /// Line number of `text[0]` in `file`.
    first_line: usize,
    base_dir: &'a Path,
}

impl Source<'_> {
    fn line_at(&self, pos: usize) -> usize {
        self.first_line + self.text[..pos].bytes().filter(|b| *b == b'\n').count()
    }

    fn err(&self, pos: usize, kind: PreprocessErrorKind, message: impl Into<String>) -> PreprocessError {
        PreprocessError { kind, file: self.file.to_string(), line: self.line_at(pos), message: message.into() }
    }
}

struct Expander<'e> {
    env: &'e HashMap<String, String>,
    /// Canonical paths of the files currently being included.
    stack: Vec<PathBuf>,
    depth: usize,
}

/// Expands `text`; relative includes resolve against `base_dir`.
pub fn preprocess(text: &str, env: &HashMap<String, String>, base_dir: &Path) -> Result<String, PreprocessError> {
    preprocess_named(text, "<input>", env, base_dir)
}

/// As [`preprocess`], with `name` used in error locations.
pub fn preprocess_named(
    text: &str,
    name: &str,
    env: &HashMap<String, String>,
    base_dir: &Path,
) -> Result<String, PreprocessError> {
    let mut ex = Expander { env, stack: Vec::new(), depth: 0 };
    let src = Source { text, file: name, first_line: 1, base_dir };
    ex.expand(&src, &[])
}

/// Reads and expands a file.
pub fn preprocess_file(path: &Path, env: &HashMap<String, String>) -> Result<String, PreprocessError> {
    let text = std::fs::read_to_string(path).map_err(|e| PreprocessError {
        kind: PreprocessErrorKind::Io,
        file: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ex = Expander { env, stack: vec![path.canonicalize().unwrap_or_else(|_| path.to_path_buf())], depth: 0 };
    let name = path.display().to_string();
    ex.expand(&Source { text: &text, file: &name, first_line: 1, base_dir: base }, &[])
}

fn starts_tag(rest: &str, name: &str) -> bool {
    rest.strip_prefix('<')
        .and_then(|r| r.strip_prefix(name))
        .and_then(|r| r.chars().next())
        .is_some_and(|c| c.is_whitespace() || c == '/' || c == '>')
}

/// Byte offset just past the `>` closing the tag that starts at `start`,
/// skipping quoted attribute values.
fn tag_end(text: &str, start: usize) -> Option<usize> {
    let mut quote = None;
    for (i, c) in text[start..].char_indices() {
        match (quote, c) {
            (None, '"' | '\'') => quote = Some(c),
            (Some(q), _) if c == q => quote = None,
            (None, '>') => return Some(start + i + 1),
            _ => {}
        }
    }
    None
}

/// Parses `name="value"` pairs from the inside of a start tag.
fn attributes(tag: &str) -> Result<Vec<(String, String)>, String> {
    let inner = tag.trim_start_matches('<');
    let inner = inner.trim_end_matches('>').trim_end_matches('/');
    let mut rest = inner.trim_start_matches(|c: char| !c.is_whitespace()).trim_start();
    let mut out = Vec::new();
    while !rest.is_empty() {
        let eq = rest.find('=').ok_or_else(|| format!("malformed attribute near {rest:?}"))?;
        let name = rest[..eq].trim().to_string();
        let after = rest[eq + 1..].trim_start();
        let q = after.chars().next().filter(|c| *c == '"' || *c == '\'').ok_or("attribute value must be quoted")?;
        let close = after[1..].find(q).ok_or("unterminated attribute value")?;
        out.push((name, after[1..1 + close].to_string()));
        rest = after[close + 2..].trim_start();
    }
    Ok(out)
}

fn strip_xml_declaration(text: &str) -> &str {
    let t = text.trim_start_matches('\u{feff}');
    if t.starts_with("<?xml") {
        if let Some(end) = t.find("?>") {
            return t[end + 2..].strip_prefix('\n').unwrap_or(&t[end + 2..]);
        }
    }
    t
}

impl Expander<'_> {
    fn expand(&mut self, src: &Source, scope: &[(String, f64)]) -> Result<String, PreprocessError> {
        use PreprocessErrorKind::*;
        let text = src.text;
        let mut out = String::with_capacity(text.len());
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            if rest.starts_with("<!--") {
                let end = rest.find("-->").map(|e| i + e + 3).ok_or_else(|| src.err(i, Syntax, "unterminated comment"))?;
                out.push_str(&text[i..end]);
                i = end;
            } else if starts_tag(rest, "include") {
                let end = tag_end(text, i).ok_or_else(|| src.err(i, Syntax, "unterminated <include>"))?;
                let tag = &text[i..end];
                if !tag.ends_with("/>") {
                    return Err(src.err(i, Syntax, "<include> must be self-closing"));
                }
                out.push_str(&self.include(src, i, tag, scope)?);
                i = end;
            } else if starts_tag(rest, "for") {
                let open_end = tag_end(text, i).ok_or_else(|| src.err(i, Syntax, "unterminated <for>"))?;
                let body_end = self.matching_for_close(text, open_end).ok_or_else(|| src.err(i, Syntax, "<for> without </for>"))?;
                out.push_str(&self.for_loop(src, i, open_end, body_end, scope)?);
                i = body_end + "</for>".len();
            } else if rest.starts_with("${") {
                let close = rest.find('}').ok_or_else(|| src.err(i, Syntax, "unterminated ${"))?;
                out.push_str(&self.variable(src, i, &rest[2..close], scope)?);
                i += close + 1;
            } else if rest.starts_with("$(") {
                let close = matching_paren(rest, 1).ok_or_else(|| src.err(i, Syntax, "unterminated $("))?;
                let inner = &rest[2..close];
                // Variables inside an expression expand first.
                let inner = self.expand(&Source { text: inner, file: src.file, first_line: src.line_at(i), base_dir: src.base_dir }, scope)?;
                let vars: HashMap<String, f64> = scope.iter().cloned().collect();
                let v = expr::eval(&inner, &vars).map_err(|m| src.err(i, ExpressionError, format!("$({inner}): {m}")))?;
                out.push_str(&expr::format_number(v));
                i += close + 1;
            } else {
                let c = rest.chars().next().expect("non-empty");
                out.push(c);
                i += c.len_utf8();
            }
        }
        Ok(out)
    }

    fn variable(&self, src: &Source, pos: usize, spec: &str, scope: &[(String, f64)]) -> Result<String, PreprocessError> {
        let (name, default) = match spec.split_once('|') {
            Some((n, d)) => (n.trim(), Some(d)),
            None => (spec.trim(), None),
        };
        if let Some((_, v)) = scope.iter().rev().find(|(n, _)| n == name) {
            return Ok(expr::format_number(*v));
        }
        if let Some(v) = self.env.get(name) {
            return Ok(v.clone());
        }
        default
            .map(str::to_string)
            .ok_or_else(|| src.err(pos, PreprocessErrorKind::UndefinedVariable, format!("${{{name}}} is not set")))
    }

    /// Substitutes directives inside an attribute value.
    fn attr_value(&mut self, src: &Source, pos: usize, raw: &str, scope: &[(String, f64)]) -> Result<String, PreprocessError> {
        self.expand(&Source { text: raw, file: src.file, first_line: src.line_at(pos), base_dir: src.base_dir }, scope)
    }

    fn include(&mut self, src: &Source, pos: usize, tag: &str, scope: &[(String, f64)]) -> Result<String, PreprocessError> {
        use PreprocessErrorKind::*;
        let attrs = attributes(tag).map_err(|m| src.err(pos, Syntax, m))?;
        let raw = attrs
            .iter()
            .find(|(n, _)| n == "file")
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| src.err(pos, Syntax, "<include> needs a file attribute"))?;
        let file = self.attr_value(src, pos, raw, scope)?;
        let path = src.base_dir.join(&file);
        let canonical = path.canonicalize().map_err(|e| src.err(pos, Io, format!("{}: {e}", path.display())))?;
        if self.stack.contains(&canonical) {
            return Err(src.err(pos, IncludeCycle, format!("{} is already being included", path.display())));
        }
        if self.depth >= MAX_INCLUDE_DEPTH {
            return Err(src.err(pos, IncludeCycle, format!("include depth exceeds {MAX_INCLUDE_DEPTH}")));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| src.err(pos, Io, format!("{}: {e}", path.display())))?;
        let name = path.display().to_string();
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        self.stack.push(canonical);
        self.depth += 1;
        let result = self.expand(&Source { text: strip_xml_declaration(&text), file: &name, first_line: 1, base_dir: &base }, scope);
        self.stack.pop();
        self.depth -= 1;
        result
    }

    fn matching_for_close(&self, text: &str, from: usize) -> Option<usize> {
        let mut depth = 1;
        let mut i = from;
        while i < text.len() {
            let rest = &text[i..];
            if rest.starts_with("<!--") {
                i += rest.find("-->")? + 3;
                continue;
            }
            if starts_tag(rest, "for") {
                depth += 1;
            } else if rest.starts_with("</for>") {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            i += rest.chars().next()?.len_utf8();
        }
        None
    }

    fn for_loop(
        &mut self,
        src: &Source,
        pos: usize,
        open_end: usize,
        body_end: usize,
        scope: &[(String, f64)],
    ) -> Result<String, PreprocessError> {
        use PreprocessErrorKind::*;
        let attrs = attributes(&src.text[pos..open_end]).map_err(|m| src.err(pos, Syntax, m))?;
        let mut var = None;
        let (mut from, mut to, mut step) = (None, None, 1i64);
        for (name, raw) in &attrs {
            let value = self.attr_value(src, pos, raw, scope)?;
            let int = || -> Result<i64, PreprocessError> {
                let v: f64 = value.trim().parse().map_err(|_| src.err(pos, Syntax, format!("{name}={value:?} is not a number")))?;
                if v.fract() != 0.0 {
                    return Err(src.err(pos, Syntax, format!("{name}={value:?} must be an integer")));
                }
                Ok(v as i64)
            };
            match name.as_str() {
                "var" => var = Some(value.clone()),
                "from" => from = Some(int()?),
                "to" => to = Some(int()?),
                "step" => step = int()?,
                other => return Err(src.err(pos, Syntax, format!("unknown <for> attribute {other:?}"))),
            }
        }
        let (Some(var), Some(from), Some(to)) = (var, from, to) else {
            return Err(src.err(pos, Syntax, "<for> needs var, from and to"));
        };
        if step == 0 {
            return Err(src.err(pos, Syntax, "<for> step must be non-zero"));
        }
        let body = Source {
            text: &src.text[open_end..body_end],
            file: src.file,
            first_line: src.line_at(open_end),
            base_dir: src.base_dir,
        };
        let mut out = String::new();
        let mut k = from;
        let mut inner_scope = scope.to_vec();
        inner_scope.push((var, 0.0));
        while (step > 0 && k <= to) || (step < 0 && k >= to) {
            inner_scope.last_mut().expect("loop var").1 = k as f64;
            out.push_str(&self.expand(&body, &inner_scope)?);
            k += step;
        }
        Ok(out)
    }
}

/// Index of the `)` matching the `(` at byte `open`.
fn matching_paren(s: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in s[open..].char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(open + i);
                }
            }
            _ => {}
        }
    }
    None
}
