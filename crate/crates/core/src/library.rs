//! Plotting-library vocabulary shared by the benchmark and the dataset pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A plotting library tag. These are domain labels, not dependencies.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PlotLibrary {
    Matplotlib,
    Seaborn,
    Plotly,
    Bokeh,
    Altair,
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid plot library tag {0:?}")]
pub struct LibraryTagError(pub String);

impl PlotLibrary {
    pub const KNOWN: [PlotLibrary; 5] = [
        PlotLibrary::Matplotlib,
        PlotLibrary::Seaborn,
        PlotLibrary::Plotly,
        PlotLibrary::Bokeh,
        PlotLibrary::Altair,
    ];

    pub fn tag(&self) -> &str {
        match self {
            PlotLibrary::Matplotlib => "matplotlib",
            PlotLibrary::Seaborn => "seaborn",
            PlotLibrary::Plotly => "plotly",
            PlotLibrary::Bokeh => "bokeh",
            PlotLibrary::Altair => "altair",
            PlotLibrary::Other(name) => name,
        }
    }

    /// Human-facing label used as a section title in reports.
    pub fn display_name(&self) -> String {
        let tag = self.tag();
        let mut chars = tag.chars();
        match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    }

    pub fn is_matplotlib(&self) -> bool {
        matches!(self, PlotLibrary::Matplotlib)
    }
}

impl FromStr for PlotLibrary {
    type Err = LibraryTagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let lib = match trimmed.to_ascii_lowercase().as_str() {
            "matplotlib" => PlotLibrary::Matplotlib,
            "seaborn" => PlotLibrary::Seaborn,
            "plotly" => PlotLibrary::Plotly,
            "bokeh" => PlotLibrary::Bokeh,
            "altair" => PlotLibrary::Altair,
            "" => return Err(LibraryTagError(s.to_string())),
            _ => {
                // `other:<name>` and bare unknown names both map to Other.
                let name = trimmed.strip_prefix("other:").unwrap_or(trimmed).trim();
                if name.is_empty() {
                    return Err(LibraryTagError(s.to_string()));
                }
                PlotLibrary::Other(name.to_string())
            }
        };
        Ok(lib)
    }
}

impl fmt::Display for PlotLibrary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl Serialize for PlotLibrary {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for PlotLibrary {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}
