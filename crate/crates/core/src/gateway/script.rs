use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dialogue_digest, ChatDialogue, GatewayError};

/// One canned reply. An entry with `digest` matches that exact dialogue;
/// otherwise every present selector must match.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    /// Substring of the first user turn (identifies the task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_user_contains: Option<String>,
    /// Substring of the last user turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_user_contains: Option<String>,
    /// Number of assistant turns already in the dialogue, i.e. the attempt index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<usize>,
    pub response: String,
}

impl ScriptEntry {
    pub fn for_attempt(task_marker: impl Into<String>, attempt: usize, response: impl Into<String>) -> Self {
        Self {
            first_user_contains: Some(task_marker.into()),
            attempt: Some(attempt),
            response: response.into(),
            ..Default::default()
        }
    }

    fn selectors_match(&self, dialogue: &ChatDialogue) -> bool {
        if self.first_user_contains.is_none() && self.last_user_contains.is_none() && self.attempt.is_none() {
            return false;
        }
        let first_ok = self.first_user_contains.as_deref().map_or(true, |needle| {
            dialogue.first_user().is_some_and(|m| m.content.contains(needle))
        });
        let last_ok = self.last_user_contains.as_deref().map_or(true, |needle| {
            dialogue.last_user().is_some_and(|m| m.content.contains(needle))
        });
        let attempt_ok = self.attempt.map_or(true, |a| dialogue.assistant_turns() == a);
        first_ok && last_ok && attempt_ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTable {
    pub entries: Vec<ScriptEntry>,
}

impl ScriptTable {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries }
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading script {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Config(format!("parsing script {}: {e}", path.display())))
    }

    /// Exact digest entries take priority over selector entries; among
    /// selector entries the first match wins.
    pub fn lookup(&self, dialogue: &ChatDialogue) -> Result<&str, GatewayError> {
        let digest = dialogue_digest(dialogue);
        if let Some(entry) = self
            .entries
            .iter()
            .find(|e| e.digest.as_deref().is_some_and(|d| d.eq_ignore_ascii_case(&digest)))
        {
            return Ok(&entry.response);
        }
        self.entries
            .iter()
            .filter(|e| e.digest.is_none())
            .find(|e| e.selectors_match(dialogue))
            .map(|e| e.response.as_str())
            .ok_or_else(|| GatewayError::ScriptMiss {
                digest,
                preview: dialogue
                    .last_user()
                    .map(|m| m.content.chars().take(80).collect())
                    .unwrap_or_default(),
            })
    }
}
