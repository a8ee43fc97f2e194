//! Prompt templates used to phrase descriptor names for the text encoder.
//!
//! Each template is a pattern with exactly one `{}` placeholder. The default
//! registry carries the ten phrasings the pipeline averages over; runs may
//! restrict to a subset or load a custom registry from a TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub pattern: String,
}

impl PromptTemplate {
    /// Build a template, checking that the pattern has exactly one `{}`.
    pub fn new(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let pattern = pattern.into();
        let found = pattern.matches("{}").count();
        if found != 1 {
            return Err(Error::MalformedTemplate { id, found });
        }
        Ok(Self { id, pattern })
    }

    /// Substitute `name` into the placeholder.
    pub fn expand(&self, name: &str) -> String {
        self.pattern.replacen("{}", name, 1)
    }
}

/// The ten stock phrasings, ids `T1` through `T10`.
pub fn default_registry() -> Vec<PromptTemplate> {
    [
        ("T1", "a drawing of a {}"),
        ("T2", "a photo of the cool {}"),
        ("T3", "a pixelated photo of a {}"),
        ("T4", "a photo of a {}"),
        ("T5", "a cropped photo of the {}"),
        ("T6", "a jpeg cropped photo of the {}"),
        ("T7", "a bright photo of a {}"),
        ("T8", "a cropped photo of a {}"),
        ("T9", "a bad photo of the {}"),
        ("T10", "a photo of many {}"),
    ]
    .into_iter()
    .map(|(id, pattern)| PromptTemplate::new(id, pattern).expect("stock templates are well formed"))
    .collect()
}

#[derive(Deserialize)]
struct RegistryFile {
    template: Vec<PromptTemplate>,
}

/// Load a registry from a TOML file of `[[template]]` entries with `id` and
/// `pattern` keys. Every pattern is validated.
pub fn registry_from_file(path: &Path) -> Result<Vec<PromptTemplate>> {
    let text = std::fs::read_to_string(path)?;
    let parsed: RegistryFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("template registry: {e}")))?;
    parsed
        .template
        .into_iter()
        .map(|t| PromptTemplate::new(t.id, t.pattern))
        .collect()
}

/// Select templates from `registry` by id, preserving the requested order.
pub fn select_templates(
    registry: &[PromptTemplate],
    ids: &[String],
) -> Result<Vec<PromptTemplate>> {
    if ids.is_empty() {
        return Err(Error::InvalidParam("template selection is empty".into()));
    }
    ids.iter()
        .map(|id| {
            registry
                .iter()
                .find(|t| &t.id == id)
                .cloned()
                .ok_or_else(|| Error::UnknownTemplate(id.clone()))
        })
        .collect()
}

/// Expand every name under every template, template-major: all names under
/// the first template, then all names under the second, and so on.
pub fn expand_templates(names: &[String], templates: &[PromptTemplate]) -> Result<Vec<String>> {
    if names.is_empty() {
        return Err(Error::InvalidParam("no names to expand".into()));
    }
    if templates.is_empty() {
        return Err(Error::InvalidParam("no templates to expand with".into()));
    }
    let mut out = Vec::with_capacity(names.len() * templates.len());
    for t in templates {
        for name in names {
            out.push(t.expand(name));
        }
    }
    Ok(out)
}
