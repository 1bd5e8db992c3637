//! Instruction parts: numbered-reply parsing, mock-data location, and the
//! fixed assembly template.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{DataMode, ForgeError};

pub const MOCK_CONNECTIVE: &str = "The mock data shows below:";
pub const PREVIEW_CONNECTIVE: &str = "The first two rows of the data are shown below:";
pub const MOCK_BEGIN_MARKER: &str = "# --- mock data ---";
pub const MOCK_END_MARKER: &str = "# --- end mock data ---";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionParts {
    pub plot_description: String,
    pub setup: String,
    pub data_description: String,
    pub data_block: String,
    pub style_description: String,
}

impl InstructionParts {
    /// Parts in template order, with their names.
    fn in_template_order(&self) -> [(&'static str, &str); 5] {
        [
            ("plot_description", &self.plot_description),
            ("setup", &self.setup),
            ("data_description", &self.data_description),
            ("data_block", &self.data_block),
            ("style_description", &self.style_description),
        ]
    }
}

/// Plot description, setup, data description, the connective line for
/// `mode`, the data block and the style description, one paragraph each.
pub fn assemble_instruction(parts: &InstructionParts, mode: DataMode) -> Result<String, ForgeError> {
    let ordered = parts.in_template_order();
    if let Some((name, _)) = ordered.iter().find(|(_, text)| text.trim().is_empty()) {
        return Err(ForgeError::Assembly { part: name });
    }
    let mut paragraphs: Vec<&str> = Vec::with_capacity(6);
    for (name, text) in ordered {
        if name == "data_block" {
            paragraphs.push(mode.connective());
            paragraphs.push(text.trim_matches('\n').trim_end());
        } else {
            paragraphs.push(text.trim());
        }
    }
    Ok(paragraphs.join("\n\n"))
}

fn part_start() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*[.)]\s*(.*)$").expect("valid regex"))
}

/// Labels the prompts ask for; a reply that echoes one gets it stripped.
const PART_LABELS: [&str; 5] = [
    "setup",
    "data description",
    "data generation",
    "plot description",
    "plot style description",
];

fn strip_label(text: &str) -> &str {
    let Some(colon) = text.find(':') else {
        return text;
    };
    let head = text[..colon].trim();
    let head = head.split('(').next().unwrap_or(head).trim().to_ascii_lowercase();
    if PART_LABELS.contains(&head.as_str()) {
        text[colon + 1..].trim_start()
    } else {
        text
    }
}

/// Split a reply numbered `1.` through `count.` into its parts. Only the
/// next expected number opens a part, so numbered lists inside a part stay
/// part of its text.
pub fn parse_numbered_parts(reply: &str, count: usize) -> Result<Vec<String>, ForgeError> {
    let mut parts: Vec<Vec<&str>> = Vec::with_capacity(count);
    for line in reply.lines() {
        if let Some(caps) = part_start().captures(line) {
            let n: usize = caps[1].parse().unwrap_or(0);
            if n == parts.len() + 1 && n <= count {
                parts.push(vec![caps.get(2).map_or("", |m| m.as_str())]);
                continue;
            }
        }
        if let Some(current) = parts.last_mut() {
            current.push(line);
        }
    }
    if parts.len() < count {
        return Err(ForgeError::Parse(format!("reply is missing part {}", parts.len() + 1)));
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(i, lines)| {
            let text = strip_label(lines.join("\n").trim()).trim().to_string();
            if text.is_empty() {
                Err(ForgeError::Parse(format!("part {} is empty", i + 1)))
            } else {
                Ok(text)
            }
        })
        .collect()
}

/// Mock-data lines lifted from a code block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockData {
    pub text: String,
    /// Found by the literal-assignment heuristic rather than by markers.
    pub low_confidence: bool,
}

fn assignment_start() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"^[A-Za-z_][\w.]*(\s*\[[^\]]*\])?(\s*,\s*[A-Za-z_][\w.]*)*\s*=\s*([\[{("'\d\-]|True\b|False\b|None\b|(pd|pandas)\.(DataFrame|Series|date_range)\(|(np|numpy)\.(array|arange|linspace|random\.|zeros|ones)|dict\(|list\(|range\()"#,
        )
        .expect("valid regex")
    })
}

fn bracket_delta(line: &str) -> i32 {
    let mut depth = 0;
    let mut quote: Option<char> = None;
    for c in line.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '#' => break,
                '\'' | '"' => quote = Some(c),
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth -= 1,
                _ => {}
            },
        }
    }
    depth
}

/// The text between the mock-data markers, or failing that the longest run
/// of consecutive top-level literal assignments.
pub fn locate_mock_data(code: &str) -> Option<MockData> {
    let lines: Vec<&str> = code.lines().collect();
    let begin = lines.iter().position(|l| l.trim().eq_ignore_ascii_case(MOCK_BEGIN_MARKER));
    if let Some(begin) = begin {
        let end = lines[begin + 1..]
            .iter()
            .position(|l| l.trim().eq_ignore_ascii_case(MOCK_END_MARKER))
            .map(|off| begin + 1 + off);
        if let Some(end) = end {
            let text = lines[begin + 1..end].join("\n").trim_matches('\n').to_string();
            if !text.trim().is_empty() {
                return Some(MockData {
                    text,
                    low_confidence: false,
                });
            }
        }
    }

    // (start, end) of the best run, in lines.
    let mut best: Option<(usize, usize)> = None;
    let mut run_start: Option<usize> = None;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if assignment_start().is_match(line) {
            let start = i;
            let mut depth = bracket_delta(line);
            i += 1;
            while depth > 0 && i < lines.len() {
                depth += bracket_delta(lines[i]);
                i += 1;
            }
            run_start.get_or_insert(start);
            let run = (run_start.unwrap_or(start), i);
            if best.map_or(true, |(s, e)| run.1 - run.0 > e - s) {
                best = Some(run);
            }
        } else {
            run_start = None;
            i += 1;
        }
    }
    best.map(|(s, e)| MockData {
        text: lines[s..e].join("\n"),
        low_confidence: true,
    })
}
