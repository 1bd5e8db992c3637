//! Runnable scripts for corpus items whose data lives in a separate table.

use std::sync::OnceLock;

use regex::Regex;

use super::ForgeError;
use crate::codeblock::code_only;
use crate::library::PlotLibrary;

/// File name the table is materialized under, next to the script.
pub const DATA_FILE: &str = "data.csv";
/// Where appended save calls write, relative to the script's directory.
pub const SAVE_TARGET_STEM: &str = "images/plot";
const STANZA_MARKER: &str = "# --- appended save call ---";

/// Header plus the first two data rows of a CSV table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPreview {
    pub text: String,
    /// The table had a single data row.
    pub degenerate: bool,
}

/// Raw byte spans of the first `limit` records (header included).
fn leading_records(table: &str, limit: usize) -> Result<Vec<&str>, ForgeError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(table.as_bytes());
    let mut starts = Vec::new();
    let mut record = csv::ByteRecord::new();
    loop {
        let start = reader.position().byte() as usize;
        let more = reader
            .read_byte_record(&mut record)
            .map_err(|e| ForgeError::Preview(format!("malformed table: {e}")))?;
        if !more || starts.len() == limit {
            starts.push(start);
            break;
        }
        starts.push(start);
    }
    let end = starts.pop().unwrap_or(0);
    let mut spans = Vec::with_capacity(starts.len());
    for (i, &s) in starts.iter().enumerate() {
        let e = starts.get(i + 1).copied().unwrap_or(end);
        spans.push(table[s..e].trim_matches(['\n', '\r']));
    }
    Ok(spans)
}

/// Header and the first two data rows, byte for byte, ending in one newline.
pub fn build_data_preview(table: &str) -> Result<DataPreview, ForgeError> {
    let records = leading_records(table, 3)?;
    if records.len() < 2 {
        return Err(ForgeError::Preview("table has no data rows".into()));
    }
    let mut text = records.join("\n");
    text.push('\n');
    Ok(DataPreview {
        text,
        degenerate: records.len() == 2,
    })
}

fn render_call_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b(savefig|write_image|write_html|to_file|save|show|output_file)\s*\(").expect("valid regex")
    })
}

/// True if the code already saves or displays a figure.
pub fn has_render_call(code: &str) -> bool {
    render_call_pattern().is_match(&code_only(code))
}

fn comment_lines(label: &str, text: &str) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            out.push_str(&format!("# {label}: {line}\n"));
        } else {
            out.push_str(&format!("#   {line}\n"));
        }
    }
    out
}

/// Save stanza for figures left unsaved, keyed on the library in use.
pub fn save_stanza(library: &PlotLibrary) -> String {
    let body = match library {
        PlotLibrary::Plotly => format!(
            "for _obj in list(globals().values()):\n    if type(_obj).__module__.startswith(\"plotly\") and hasattr(_obj, \"write_html\"):\n        _obj.write_html(\"{SAVE_TARGET_STEM}.html\")\n        break\n"
        ),
        PlotLibrary::Altair => format!(
            "for _obj in list(globals().values()):\n    if type(_obj).__module__.startswith(\"altair\") and hasattr(_obj, \"to_html\"):\n        _obj.save(\"{SAVE_TARGET_STEM}.html\")\n        break\n"
        ),
        PlotLibrary::Bokeh => format!(
            "from bokeh.io import save as _bokeh_save\nfrom bokeh.model import Model as _BokehModel\nfor _obj in list(globals().values()):\n    if isinstance(_obj, _BokehModel) and hasattr(_obj, \"renderers\"):\n        _bokeh_save(_obj, filename=\"{SAVE_TARGET_STEM}.html\")\n        break\n"
        ),
        _ => format!(
            "import matplotlib.pyplot as _plt\nif _plt.get_fignums():\n    _plt.savefig(\"{SAVE_TARGET_STEM}.png\")\n"
        ),
    };
    format!("\n{STANZA_MARKER}\nimport os as _os\n_os.makedirs(\"images\", exist_ok=True)\n{body}")
}

/// Script for a table-backed item: a comment header with the CSV header and
/// first data row, a loader for the materialized table, the original code,
/// and a save stanza when the code never saves or shows a figure.
pub fn reconstruct_synthetic(code: &str, table: &str, library: &PlotLibrary) -> Result<String, ForgeError> {
    if table.trim().is_empty() {
        return Err(ForgeError::Reconstruct("empty data table".into()));
    }
    let records = leading_records(table, 2).map_err(|e| ForgeError::Reconstruct(e.to_string()))?;
    let header = records[0];
    let first_row = records
        .get(1)
        .ok_or_else(|| ForgeError::Reconstruct("data table has a header but no rows".into()))?;
    let mut script = String::new();
    script.push_str(&comment_lines("Data columns", header));
    script.push_str(&comment_lines("First data row", first_row));
    script.push_str(&format!("import pandas as pd\ndata = pd.read_csv(\"{DATA_FILE}\")\n\n"));
    script.push_str(code.trim_end());
    script.push('\n');
    if !has_render_call(code) {
        script.push_str(&save_stanza(library));
    }
    Ok(script)
}
