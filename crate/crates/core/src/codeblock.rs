//! Pull candidate code out of model replies and detect which plotting
//! libraries a Python source imports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::library::PlotLibrary;

const FENCE: &str = "```";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeOrigin {
    Fenced,
    WholeMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCode {
    pub source: String,
    pub origin: CodeOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fence_language: Option<String>,
}

impl CandidateCode {
    /// Code that did not come from a model reply.
    pub fn bare(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            origin: CodeOrigin::WholeMessage,
            fence_language: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("response is empty or whitespace-only")]
    EmptyResponse,
    #[error("first code fence is empty")]
    EmptyFence,
}

/// First fence wins, whatever its language tag. Without any fence the whole
/// trimmed reply is taken as code. An unterminated fence runs to the end of
/// the reply.
pub fn extract_code(response: &str) -> Result<CandidateCode, ExtractError> {
    if response.trim().is_empty() {
        return Err(ExtractError::EmptyResponse);
    }
    let Some(open) = response.find(FENCE) else {
        return Ok(CandidateCode::bare(response.trim()));
    };
    let after_open = &response[open + FENCE.len()..];
    let (tag, body) = match after_open.find('\n') {
        Some(nl) => (&after_open[..nl], &after_open[nl + 1..]),
        None => ("", after_open),
    };
    // A tag with inner whitespace means the fence was opened inline with code.
    let (fence_language, body) = if tag.trim().contains(char::is_whitespace) {
        (None, after_open)
    } else {
        let tag = tag.trim();
        ((!tag.is_empty()).then(|| tag.to_string()), body)
    };
    let interior = match body.find(FENCE) {
        Some(close) => &body[..close],
        None => body,
    };
    let source = interior.trim_matches(|c| c == '\n' || c == '\r').trim_end();
    if source.trim().is_empty() {
        return Err(ExtractError::EmptyFence);
    }
    Ok(CandidateCode {
        source: source.to_string(),
        origin: CodeOrigin::Fenced,
        fence_language,
    })
}

/// Import forms that tied a source to one library.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibrarySignature {
    pub library: PlotLibrary,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryScan {
    pub libraries: BTreeSet<PlotLibrary>,
    pub signatures: Vec<LibrarySignature>,
    /// The tokenizer could not make sense of the source (unterminated string)
    /// and the scan fell back to plain line matching.
    pub degraded: bool,
}

/// Library tag → module roots whose import marks usage of that library.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureTable {
    roots: Vec<(PlotLibrary, Vec<String>)>,
}

const DEFAULT_SIGNATURES: &str = include_str!("../data/library_signatures.json");

#[derive(Debug, thiserror::Error)]
pub enum SignatureTableError {
    #[error("reading signature table: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing signature table: {0}")]
    Json(#[from] serde_json::Error),
    #[error("library {0} has no import patterns")]
    EmptyPatterns(String),
}

impl Default for SignatureTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_SIGNATURES).expect("bundled signature table is valid")
    }
}

impl SignatureTable {
    pub fn from_json(raw: &str) -> Result<Self, SignatureTableError> {
        let parsed: BTreeMap<PlotLibrary, Vec<String>> = serde_json::from_str(raw)?;
        let mut roots = Vec::new();
        for (lib, patterns) in parsed {
            let patterns: Vec<String> = patterns
                .into_iter()
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect();
            if patterns.is_empty() {
                return Err(SignatureTableError::EmptyPatterns(lib.to_string()));
            }
            roots.push((lib, patterns));
        }
        Ok(Self { roots })
    }

    pub fn from_file(path: &Path) -> Result<Self, SignatureTableError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn libraries(&self) -> impl Iterator<Item = &PlotLibrary> {
        self.roots.iter().map(|(lib, _)| lib)
    }

    fn library_for_module(&self, module: &str) -> Option<&PlotLibrary> {
        self.roots.iter().find_map(|(lib, roots)| {
            roots
                .iter()
                .any(|root| module == root || module.starts_with(&format!("{root}.")))
                .then_some(lib)
        })
    }

    pub fn detect(&self, source: &str) -> LibraryScan {
        let (code, degraded) = match strip_strings_and_comments(source) {
            Some(code) => (code, false),
            None => (naive_strip_comments(source), true),
        };
        let mut found: BTreeMap<PlotLibrary, Vec<String>> = BTreeMap::new();
        for statement in import_statements(&code) {
            for module in imported_modules(&statement) {
                if let Some(lib) = self.library_for_module(&module) {
                    let patterns = found.entry(lib.clone()).or_default();
                    if !patterns.contains(&statement) {
                        patterns.push(statement.clone());
                    }
                }
            }
        }
        LibraryScan {
            libraries: found.keys().cloned().collect(),
            signatures: found
                .into_iter()
                .map(|(library, patterns)| LibrarySignature { library, patterns })
                .collect(),
            degraded,
        }
    }
}

/// Detect libraries with the bundled signature table.
pub fn detect_libraries(source: &str) -> LibraryScan {
    SignatureTable::default().detect(source)
}

/// Source with string literals blanked and comments removed; falls back to
/// comment stripping alone when a string is left unterminated.
pub(crate) fn code_only(source: &str) -> String {
    strip_strings_and_comments(source).unwrap_or_else(|| naive_strip_comments(source))
}

/// Blank out string literals and drop comments, keeping line structure.
/// Returns `None` when a string literal is left unterminated.
fn strip_strings_and_comments(source: &str) -> Option<String> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = String::with_capacity(source.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '\'' | '"' => {
                let triple = i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c;
                let quote_len = if triple { 3 } else { 1 };
                i += quote_len;
                let mut closed = false;
                while i < chars.len() {
                    let ch = chars[i];
                    if ch == '\\' {
                        if chars.get(i + 1) == Some(&'\n') {
                            out.push('\n');
                        }
                        i += 2;
                        continue;
                    }
                    if ch == '\n' {
                        if !triple {
                            return None;
                        }
                        out.push('\n');
                        i += 1;
                        continue;
                    }
                    if ch == c && (!triple || (chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c))) {
                        i += quote_len;
                        closed = true;
                        break;
                    }
                    i += 1;
                }
                if !closed {
                    return None;
                }
                out.push_str("\"\"");
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    Some(out)
}

fn naive_strip_comments(source: &str) -> String {
    source
        .lines()
        .map(|line| match line.find('#') {
            Some(idx) => &line[..idx],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Import statements, one per entry, with continuation lines joined and
/// whitespace normalized.
fn import_statements(code: &str) -> Vec<String> {
    let mut logical = Vec::new();
    let mut pending = String::new();
    for line in code.lines() {
        if let Some(stripped) = line.strip_suffix('\\') {
            pending.push_str(stripped);
            pending.push(' ');
            continue;
        }
        pending.push_str(line);
        logical.push(std::mem::take(&mut pending));
    }
    if !pending.is_empty() {
        logical.push(pending);
    }
    let mut statements = Vec::new();
    for line in logical {
        for piece in line.split(';') {
            let normalized = piece.split_whitespace().collect::<Vec<_>>().join(" ");
            if normalized.starts_with("import ") || normalized.starts_with("from ") {
                statements.push(normalized);
            }
        }
    }
    statements
}

fn is_dotted_name(s: &str) -> bool {
    !s.is_empty()
        && s.split('.').all(|part| {
            let mut chars = part.chars();
            matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
                && chars.all(|c| c.is_alphanumeric() || c == '_')
        })
}

fn imported_modules(statement: &str) -> Vec<String> {
    if let Some(rest) = statement.strip_prefix("import ") {
        return rest
            .split(',')
            .filter_map(|item| item.split_whitespace().next())
            .filter(|m| is_dotted_name(m))
            .map(str::to_string)
            .collect();
    }
    if let Some(rest) = statement.strip_prefix("from ") {
        let mut parts = rest.split_whitespace();
        if let (Some(module), Some("import")) = (parts.next(), parts.next()) {
            if is_dotted_name(module) {
                return vec![module.to_string()];
            }
        }
    }
    Vec::new()
}
