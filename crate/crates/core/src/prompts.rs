//! Prompt templates. Defaults are bundled from `data/prompts/`; a directory
//! holding files with the same names overrides them one by one.

use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub extraction: String,
    pub instruction_edu: String,
    pub instruction_synthetic: String,
    pub task: String,
    pub repair: String,
    pub repair_no_plot: String,
    /// Optional system turn prepended to evaluation dialogues.
    pub system: Option<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            extraction: include_str!("../data/prompts/extraction.txt").to_string(),
            instruction_edu: include_str!("../data/prompts/instruction_edu.txt").to_string(),
            instruction_synthetic: include_str!("../data/prompts/instruction_synthetic.txt").to_string(),
            task: include_str!("../data/prompts/task.txt").to_string(),
            repair: include_str!("../data/prompts/repair.txt").to_string(),
            repair_no_plot: include_str!("../data/prompts/repair_no_plot.txt").to_string(),
            system: None,
        }
    }
}

impl PromptSet {
    pub fn load_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        let slots: [(&str, &mut String); 6] = [
            ("extraction.txt", &mut set.extraction),
            ("instruction_edu.txt", &mut set.instruction_edu),
            ("instruction_synthetic.txt", &mut set.instruction_synthetic),
            ("task.txt", &mut set.task),
            ("repair.txt", &mut set.repair),
            ("repair_no_plot.txt", &mut set.repair_no_plot),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.is_file() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        let system = dir.join("system.txt");
        if system.is_file() {
            set.system = Some(std::fs::read_to_string(system)?.trim_end().to_string());
        }
        Ok(set)
    }
}

/// Substitute `{key}` placeholders in one pass; substituted text is never
/// re-scanned, and unknown placeholders are left untouched.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out.trim_end_matches('\n').to_string()
}
