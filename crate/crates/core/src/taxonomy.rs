//! Exception classes, their structural/semantic grouping, and before/after
//! transition tables for self-debug runs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::library::PlotLibrary;
use crate::sandbox::{plot_produced, ExecutionOutcome};
use crate::task_store::OutcomeRecord;

/// Exception class names that get their own row in error tables. Anything
/// else is carried verbatim as [`ErrorClass::Other`].
const CLOSED_SET: [&str; 19] = [
    "AttributeError",
    "TypeError",
    "KeyError",
    "ValueError",
    "SyntaxError",
    "NameError",
    "IndexError",
    "ImportError",
    "ModuleNotFoundError",
    "FileNotFoundError",
    "OSError",
    "RuntimeError",
    "RecursionError",
    "NotImplementedError",
    "AssertionError",
    "AxisError",
    "UFuncTypeError",
    "Exception",
    "KeyboardInterrupt",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    Known(&'static str),
    Other(String),
}

impl ErrorClass {
    pub const KEYBOARD_INTERRUPT: ErrorClass = ErrorClass::Known("KeyboardInterrupt");

    /// Map a (possibly module-qualified) class name onto the taxonomy.
    pub fn from_name(name: &str) -> ErrorClass {
        let bare = strip_qualifier(name.trim());
        match CLOSED_SET.iter().find(|known| **known == bare) {
            Some(known) => ErrorClass::Known(known),
            None => ErrorClass::Other(bare.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ErrorClass::Known(n) => n,
            ErrorClass::Other(n) => n,
        }
    }

    pub fn is_other(&self) -> bool {
        matches!(self, ErrorClass::Other(_))
    }

    pub fn closed_set() -> impl Iterator<Item = ErrorClass> {
        CLOSED_SET.iter().map(|n| ErrorClass::Known(n))
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PartialOrd for ErrorClass {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ErrorClass {
    fn cmp(&self, other: &Self) -> Ordering {
        self.name().cmp(other.name())
    }
}

impl Serialize for ErrorClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ErrorClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        if raw.trim().is_empty() {
            return Err(serde::de::Error::custom("empty error class"));
        }
        Ok(ErrorClass::from_name(&raw))
    }
}

fn strip_qualifier(name: &str) -> &str {
    name.rsplit('.').next().unwrap_or(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorGroup {
    Structural,
    Semantic,
    Other,
}

/// Structural: shallow failures with a localized diagnostic. Semantic: failures
/// that depend on data shape or content. Syntax/Name/Import membership and
/// IndexError as semantic are harness conventions.
pub fn group_of(class: &ErrorClass) -> ErrorGroup {
    match class.name() {
        "AttributeError" | "TypeError" | "SyntaxError" | "NameError" | "ImportError"
        | "ModuleNotFoundError"
            if !class.is_other() =>
        {
            ErrorGroup::Structural
        }
        "KeyError" | "ValueError" | "IndexError" if !class.is_other() => ErrorGroup::Semantic,
        _ => ErrorGroup::Other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaxonomyError {
    #[error("cannot classify: neither a traceback nor a reported exception type was given")]
    NoInput,
    #[error("task {0:?} appears in the final records but not in the initial records")]
    FinalWithoutInitial(String),
    #[error("task {0:?} appears in the initial records but not in the final records")]
    InitialWithoutFinal(String),
    #[error("initial record for task {task:?} has attempt index {attempt}, expected 0")]
    NotInitial { task: String, attempt: u32 },
}

/// Classify a failure. A runtime-reported type wins; otherwise the last
/// exception line of the traceback decides (the outermost exception when
/// exceptions are chained).
pub fn classify(traceback: &str, reported_type: Option<&str>) -> Result<ErrorClass, TaxonomyError> {
    if let Some(reported) = reported_type.map(str::trim).filter(|r| !r.is_empty()) {
        return Ok(ErrorClass::from_name(reported));
    }
    if traceback.trim().is_empty() {
        return Err(TaxonomyError::NoInput);
    }
    let lines: Vec<&str> = traceback.lines().filter(|l| !l.trim().is_empty()).collect();
    // The exception line is the first unindented line after the last frame,
    // which also covers messages that span several lines.
    if let Some(frame) = lines.iter().rposition(|l| l.trim_start().starts_with("File \"") && l.starts_with(' ')) {
        if let Some(line) = lines[frame + 1..].iter().find(|l| !l.starts_with(char::is_whitespace)) {
            if let Some(name) = exception_name(line) {
                return Ok(ErrorClass::from_name(name));
            }
        }
    }
    let last = lines.last().copied().unwrap_or_default();
    if let Some(name) = exception_name(last) {
        return Ok(ErrorClass::from_name(name));
    }
    // Trailing noise after the exception line (e.g. notes, log lines):
    // fall back to the last unindented exception-shaped line.
    for line in lines.iter().rev() {
        if !line.starts_with(char::is_whitespace) {
            if let Some(name) = exception_name(line) {
                return Ok(ErrorClass::from_name(name));
            }
        }
    }
    let token = last.split_whitespace().next().unwrap_or("Unknown");
    Ok(ErrorClass::Other(token.to_string()))
}

/// The dotted identifier before the first `:` (or the whole line when it is a
/// bare identifier such as `KeyboardInterrupt`).
fn exception_name(line: &str) -> Option<&str> {
    let line = line.trim();
    let head = match line.find(':') {
        Some(idx) => &line[..idx],
        None => line,
    };
    let head = head.trim_end();
    // Class names are capitalized by convention; this keeps lowercase
    // message text such as `detail: ...` from passing for an exception.
    let class_like = head
        .rsplit('.')
        .next()
        .and_then(|last| last.chars().next())
        .is_some_and(|c| c.is_uppercase());
    let valid = class_like
        && head.split('.').all(|part| {
            let mut chars = part.chars();
            matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
                && chars.all(|c| c.is_alphanumeric() || c == '_')
        });
    valid.then_some(head)
}

/// Why a task counts as unsolved. Plotless successes have no exception class
/// but still belong to the failed frontier, so they get their own row.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FailureKind {
    Error(ErrorClass),
    NoPlot,
}

pub const NO_PLOT_LABEL: &str = "NoPlot";

impl FailureKind {
    pub fn label(&self) -> &str {
        match self {
            FailureKind::Error(c) => c.name(),
            FailureKind::NoPlot => NO_PLOT_LABEL,
        }
    }

    /// `None` when the outcome satisfies the fix criterion.
    pub fn of(outcome: &ExecutionOutcome) -> Option<FailureKind> {
        if plot_produced(outcome) {
            return None;
        }
        Some(match &outcome.error_class {
            Some(class) => FailureKind::Error(class.clone()),
            None => FailureKind::NoPlot,
        })
    }
}

impl PartialOrd for FailureKind {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FailureKind {
    fn cmp(&self, other: &Self) -> Ordering {
        self.label().cmp(other.label())
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub initial: u32,
    pub r#final: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionTable {
    pub library: PlotLibrary,
    pub rows: BTreeMap<FailureKind, TransitionCounts>,
}

impl TransitionTable {
    pub fn initial_total(&self) -> u32 {
        self.rows.values().map(|c| c.initial).sum()
    }

    pub fn final_total(&self) -> u32 {
        self.rows.values().map(|c| c.r#final).sum()
    }

    pub fn get(&self, kind: &FailureKind) -> TransitionCounts {
        self.rows.get(kind).copied().unwrap_or_default()
    }

    /// CSV with header `error_class,initial,final`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("error_class,initial,final\n");
        for (kind, counts) in &self.rows {
            out.push_str(&format!("{},{},{}\n", kind.label(), counts.initial, counts.r#final));
        }
        out
    }

    /// Plain-text rows, one per class: `AttributeError  15 → 2`.
    pub fn to_text(&self) -> String {
        let width = self.rows.keys().map(|k| k.label().len()).max().unwrap_or(0);
        let mut out = String::new();
        for (kind, counts) in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {} → {}\n",
                kind.label(),
                counts.initial,
                counts.r#final
            ));
        }
        out
    }

    /// LaTeX table rows: `AttributeError & 15 $\to$ 2 \\`.
    pub fn to_latex_rows(&self) -> String {
        let mut out = String::new();
        for (kind, counts) in &self.rows {
            out.push_str(&format!(
                "{} & {} $\\to$ {} \\\\\n",
                kind.label(),
                counts.initial,
                counts.r#final
            ));
        }
        out
    }
}

/// Count failure kinds at attempt 0 against each task's final recorded output.
/// Tasks fixed along the way land in no final bucket.
pub fn transition_table(
    initial: &[OutcomeRecord],
    finals: &[OutcomeRecord],
    library: PlotLibrary,
) -> Result<TransitionTable, TaxonomyError> {
    let mut initial_ids = BTreeSet::new();
    for rec in initial {
        if rec.attempt_index != 0 {
            return Err(TaxonomyError::NotInitial {
                task: rec.task_id.clone(),
                attempt: rec.attempt_index,
            });
        }
        initial_ids.insert(rec.task_id.as_str());
    }
    let final_ids: BTreeSet<&str> = finals.iter().map(|r| r.task_id.as_str()).collect();
    if let Some(extra) = final_ids.difference(&initial_ids).next() {
        return Err(TaxonomyError::FinalWithoutInitial(extra.to_string()));
    }
    if let Some(missing) = initial_ids.difference(&final_ids).next() {
        return Err(TaxonomyError::InitialWithoutFinal(missing.to_string()));
    }

    let mut rows: BTreeMap<FailureKind, TransitionCounts> = BTreeMap::new();
    for rec in initial {
        if let Some(kind) = FailureKind::of(&rec.outcome) {
            rows.entry(kind).or_default().initial += 1;
        }
    }
    for rec in finals {
        if let Some(kind) = FailureKind::of(&rec.outcome) {
            rows.entry(kind).or_default().r#final += 1;
        }
    }
    Ok(TransitionTable { library, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::ExecutionOutcome;

    fn rec(task: &str, attempt: u32, outcome: ExecutionOutcome) -> OutcomeRecord {
        OutcomeRecord {
            task_id: task.into(),
            attempt_index: attempt,
            candidate_code: "x".into(),
            response: "x".into(),
            outcome,
            is_final: false,
        }
    }

    fn err(name: &str) -> ExecutionOutcome {
        ExecutionOutcome::error(ErrorClass::from_name(name), "boom", "", 1)
    }

    #[test]
    fn last_line_rule() {
        let tb = "Traceback (most recent call last):\n  File \"x.py\", line 3, in <module>\n    plt.scatter(a, b)\nValueError: x and y must be the same size\n";
        assert_eq!(classify(tb, None).unwrap(), ErrorClass::from_name("ValueError"));
    }

    #[test]
    fn reported_type_wins() {
        let tb = "Traceback...\nValueError: nope";
        assert_eq!(
            classify(tb, Some("KeyboardInterrupt")).unwrap(),
            ErrorClass::KEYBOARD_INTERRUPT
        );
    }

    #[test]
    fn qualified_unknown_names_become_other() {
        let tb = "Traceback (most recent call last):\nplotly.errors.PlotlyKeyError: Invalid key";
        assert_eq!(classify(tb, None).unwrap(), ErrorClass::Other("PlotlyKeyError".into()));
        assert_eq!(
            classify("", Some("numpy.exceptions.AxisError")).unwrap(),
            ErrorClass::Known("AxisError")
        );
    }

    #[test]
    fn no_input_is_an_error() {
        assert_eq!(classify("  \n", None), Err(TaxonomyError::NoInput));
        assert_eq!(classify("", Some("  ")), Err(TaxonomyError::NoInput));
    }

    #[test]
    fn bare_exception_is_closed_set() {
        let class = classify("Exception: generic", None).unwrap();
        assert!(!class.is_other());
    }

    #[test]
    fn groups() {
        assert_eq!(group_of(&ErrorClass::from_name("AttributeError")), ErrorGroup::Structural);
        assert_eq!(group_of(&ErrorClass::from_name("ValueError")), ErrorGroup::Semantic);
        assert_eq!(group_of(&ErrorClass::KEYBOARD_INTERRUPT), ErrorGroup::Other);
        assert_eq!(group_of(&ErrorClass::Other("Foo".into())), ErrorGroup::Other);
        for class in ErrorClass::closed_set() {
            // total: every class lands somewhere
            let _ = group_of(&class);
        }
    }

    #[test]
    fn direct_count_example() {
        let initial = vec![
            rec("t1", 0, err("AttributeError")),
            rec("t2", 0, err("AttributeError")),
            rec("t3", 0, err("ValueError")),
        ];
        let ok = ExecutionOutcome::success(vec![crate::sandbox::ImageArtifact::new("images/a.png", 10)], 1);
        let finals = vec![
            rec("t1", 1, ok.clone()),
            rec("t2", 2, ok),
            rec("t3", 3, err("ValueError")),
        ];
        let table = transition_table(&initial, &finals, PlotLibrary::Matplotlib).unwrap();
        let attr = FailureKind::Error(ErrorClass::from_name("AttributeError"));
        let val = FailureKind::Error(ErrorClass::from_name("ValueError"));
        assert_eq!(table.get(&attr), TransitionCounts { initial: 2, r#final: 0 });
        assert_eq!(table.get(&val), TransitionCounts { initial: 1, r#final: 1 });
        assert!(table.to_text().contains("AttributeError  2 → 0"));
        assert!(table.to_csv().starts_with("error_class,initial,final\nAttributeError,2,0\n"));
    }

    #[test]
    fn mismatched_sets_rejected() {
        let initial = vec![rec("t1", 0, err("TypeError"))];
        let finals = vec![rec("t1", 0, err("TypeError")), rec("t9", 1, err("TypeError"))];
        assert_eq!(
            transition_table(&initial, &finals, PlotLibrary::Seaborn),
            Err(TaxonomyError::FinalWithoutInitial("t9".into()))
        );
    }

    #[test]
    fn plotless_success_gets_no_plot_row() {
        let plotless = ExecutionOutcome::success(vec![], 1);
        let initial = vec![rec("t1", 0, plotless.clone())];
        let finals = vec![rec("t1", 0, plotless)];
        let table = transition_table(&initial, &finals, PlotLibrary::Plotly).unwrap();
        assert_eq!(table.get(&FailureKind::NoPlot), TransitionCounts { initial: 1, r#final: 1 });
    }
}
