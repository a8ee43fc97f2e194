//! Run configuration: one TOML-backed struct that fixes everything a
//! segmentation or benchmark run depends on, hashable for provenance.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crf::{BackgroundMode, CrfParams};
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::features::{EmbedClient, FeatureSource};
use crate::subclass::PromptMode;
use crate::templates::{self, PromptTemplate};

/// What the per-class score map is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMode {
    /// Subclass ensemble blended with the superclass map.
    Full,
    /// Superclass map alone (equivalent to a blend weight of 1).
    SuperclassOnly,
    /// Subclass ensemble alone (equivalent to a blend weight of 0).
    SubclassOnly,
    /// Token-mean similarity of the superclass prompt, no subclasses at all.
    Baseline,
}

impl fmt::Display for SegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegMode::Full => "full",
            SegMode::SuperclassOnly => "superclass_only",
            SegMode::SubclassOnly => "subclass_only",
            SegMode::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for SegMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SegMode::Full),
            "superclass_only" => Ok(SegMode::SuperclassOnly),
            "subclass_only" => Ok(SegMode::SubclassOnly),
            "baseline" => Ok(SegMode::Baseline),
            other => Err(Error::InvalidParam(format!(
                "unknown segmentation mode {other:?} (expected full, superclass_only, subclass_only, or baseline)"
            ))),
        }
    }
}

/// Feature provenance: the string `"service"` for the live encoder, anything
/// else is a directory of precomputed tensor files.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum FeatureLocation {
    #[default]
    Service,
    Dir(PathBuf),
}

impl Serialize for FeatureLocation {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FeatureLocation::Service => serializer.serialize_str("service"),
            FeatureLocation::Dir(p) => serializer.serialize_str(&p.to_string_lossy()),
        }
    }
}

impl<'de> Deserialize<'de> for FeatureLocation {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(if s.eq_ignore_ascii_case("service") {
            FeatureLocation::Service
        } else {
            FeatureLocation::Dir(PathBuf::from(s))
        })
    }
}

impl std::str::FromStr for FeatureLocation {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s.eq_ignore_ascii_case("service") {
            FeatureLocation::Service
        } else {
            FeatureLocation::Dir(PathBuf::from(s))
        })
    }
}

/// Everything a run depends on. Unknown keys in a config file are an error —
/// a typo that silently falls back to a default would poison comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // ---- dataset ----
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masks_dir: Option<PathBuf>,
    /// Class list file, background first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_list: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,

    // ---- descriptors ----
    pub prompt_mode: PromptMode,
    pub n_subclasses: usize,
    /// Template ids drawn from the registry.
    pub templates: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_registry: Option<PathBuf>,
    /// Directory of saved subclass sets (`{class_slug}.json`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subclass_dir: Option<PathBuf>,
    /// Generation cache directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subclass_cache: Option<PathBuf>,
    pub model_id: String,
    pub max_tokens: u32,
    /// Outbound request budget for the chat service; 0 disables pacing.
    pub requests_per_second: f64,

    // ---- features ----
    pub features: FeatureLocation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_cache: Option<PathBuf>,

    // ---- segmentation ----
    pub mode: SegMode,
    pub ensemble: EnsembleConfig,
    /// Labeling threshold on normalized score maps.
    pub tau: f64,
    /// Working resolution `[width, height]` score maps are upsampled to and
    /// the refinement stage runs at.
    pub resize: [u32; 2],
    pub use_crf: bool,
    pub crf: CrfParams,
    pub background: BackgroundMode,

    // ---- execution ----
    /// Worker threads for batch runs; 0 picks the machine default.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            images_dir: None,
            masks_dir: None,
            class_list: None,
            split: None,
            prompt_mode: PromptMode::P2,
            n_subclasses: 10,
            templates: templates::default_registry()
                .into_iter()
                .map(|t| t.id)
                .collect(),
            template_registry: None,
            subclass_dir: None,
            subclass_cache: None,
            model_id: "gpt-3.5-turbo".to_owned(),
            max_tokens: 256,
            requests_per_second: 0.0,
            features: FeatureLocation::Service,
            feature_cache: None,
            mode: SegMode::Full,
            ensemble: EnsembleConfig::default(),
            tau: 0.5,
            resize: [288, 288],
            use_crf: true,
            crf: CrfParams::default(),
            background: BackgroundMode::default(),
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        self.crf.validate()?;
        if self.n_subclasses == 0 {
            return Err(Error::InvalidParam(
                "n_subclasses must be at least 1".into(),
            ));
        }
        if self.templates.is_empty() {
            return Err(Error::InvalidParam(
                "at least one template id is required".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidParam(format!(
                "tau {} is outside [0, 1]",
                self.tau
            )));
        }
        if self.resize.contains(&0) {
            return Err(Error::InvalidParam(format!(
                "resize {:?} has a zero dimension",
                self.resize
            )));
        }
        if !(self.requests_per_second.is_finite() && self.requests_per_second >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "requests_per_second {} must be non-negative",
                self.requests_per_second
            )));
        }
        if let BackgroundMode::Constant { value } = self.background {
            if !value.is_finite() {
                return Err(Error::InvalidParam(
                    "constant background score must be finite".into(),
                ));
            }
        }
        Ok(())
    }

    /// Content hash of the resolved configuration. The struct is serialized
    /// through a canonical JSON value (object keys sorted), so key order in
    /// the source file and field order in this struct are both irrelevant.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// The feature source this config names. Service mode reads the endpoint
    /// from the environment and attaches the configured cache.
    pub fn feature_source(&self) -> Result<FeatureSource> {
        match &self.features {
            FeatureLocation::Dir(dir) => {
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "feature directory {} does not exist",
                        dir.display()
                    )));
                }
                Ok(FeatureSource::Dir(dir.clone()))
            }
            FeatureLocation::Service => {
                let mut client = EmbedClient::from_env()?;
                if let Some(cache) = &self.feature_cache {
                    client = client.with_cache(cache);
                }
                Ok(FeatureSource::Service(client))
            }
        }
    }

    /// Where generated subclass replies are cached. Falls back to a stable
    /// per-user location under the system temp directory so reruns stay
    /// no-ops even without explicit configuration.
    pub fn subclass_cache_dir(&self) -> PathBuf {
        self.subclass_cache
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join("llmseg-subclass-cache"))
    }

    /// Resolve the configured template ids against the registry (stock or
    /// the file named by `template_registry`).
    pub fn template_set(&self) -> Result<Vec<PromptTemplate>> {
        let registry = match &self.template_registry {
            Some(path) => templates::registry_from_file(path)?,
            None => templates::default_registry(),
        };
        templates::select_templates(&registry, &self.templates)
    }
}
