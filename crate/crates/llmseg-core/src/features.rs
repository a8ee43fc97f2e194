//! Embedding feature containers and the two ways to obtain them: a directory
//! of precomputed tensor files, or a live encoder service with a transparent
//! file cache.

use std::path::{Path, PathBuf};
use std::time::Duration;

use ndarray::{Array2, Array3};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::llm::{class_slug, RetryPolicy};
use crate::real::Real;
use crate::subclass::PromptMode;
use crate::templates::PromptTemplate;
use crate::tensorfile;

/// Environment variable holding the encoder service base URL.
pub const EMBED_URL_VAR: &str = "LLMSEG_EMBED_URL";

/// Per-token text features for a set of descriptors under one template:
/// `values[i][j][c]` is channel `c` of token `j` of descriptor `i`.
///
/// Descriptor 0 is the superclass by convention; the rest are subclasses.
/// Token sequences of unequal length are zero-padded to the longest, with
/// the true lengths in `valid_tokens` so selection never reads padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTextFeatures<T: Real> {
    pub values: Array3<T>,
    pub descriptor_names: Vec<String>,
    pub template_id: String,
    pub valid_tokens: Option<Vec<usize>>,
}

impl<T: Real> TokenTextFeatures<T> {
    pub fn validate(&self) -> Result<()> {
        let (n, m_t, d) = self.values.dim();
        if n == 0 || m_t == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "text features have degenerate shape [{n}, {m_t}, {d}]"
            )));
        }
        if self.descriptor_names.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} descriptor names for {n} feature rows",
                self.descriptor_names.len()
            )));
        }
        if let Some(valid) = &self.valid_tokens {
            if valid.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} valid-token counts for {n} descriptors",
                    valid.len()
                )));
            }
            if let Some(&bad) = valid.iter().find(|&&v| v == 0 || v > m_t) {
                return Err(Error::ShapeMismatch(format!(
                    "valid-token count {bad} is outside 1..={m_t}"
                )));
            }
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "text features contain non-finite value {v:?}"
            )));
        }
        Ok(())
    }

    /// The leading `1 + n_subclasses` descriptors (superclass plus the first
    /// `n_subclasses`), for runs configured to use fewer than were saved.
    pub fn take_descriptors(&self, count: usize) -> Result<Self> {
        let n = self.values.dim().0;
        if count == 0 || count > n {
            return Err(Error::ShapeMismatch(format!(
                "asked for {count} descriptors, file holds {n}"
            )));
        }
        Ok(Self {
            values: self.values.slice(ndarray::s![0..count, .., ..]).to_owned(),
            descriptor_names: self.descriptor_names[..count].to_vec(),
            template_id: self.template_id.clone(),
            valid_tokens: self.valid_tokens.as_ref().map(|v| v[..count].to_vec()),
        })
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (n, m_t, d) = self.values.dim();
        let payload: Vec<f32> = self
            .values
            .iter()
            .map(|&v| Real::to_f64(v) as f32)
            .collect();
        let meta = json!({
            "kind": "text",
            "names": self.descriptor_names,
            "template": self.template_id,
            "valid_tokens": self.valid_tokens,
        });
        tensorfile::write(path, &[n, m_t, d], &payload, &meta)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let t = tensorfile::read(path)?;
        let [n, m_t, d] = t.shape[..] else {
            return Err(Error::ShapeMismatch(format!(
                "text features need a rank-3 tensor, got shape {:?} in {}",
                t.shape,
                path.display()
            )));
        };
        let values = Array3::from_shape_vec(
            (n, m_t, d),
            t.values.into_iter().map(|v| T::of(f64::from(v))).collect(),
        )
        .expect("shape just computed from the element count");
        let names: Vec<String> = serde_json::from_value(t.meta["names"].clone())
            .map_err(|_| Error::MalformedResponse(format!("{}: bad names meta", path.display())))?;
        let template_id = t.meta["template"].as_str().unwrap_or("unknown").to_owned();
        let valid_tokens: Option<Vec<usize>> = match &t.meta["valid_tokens"] {
            serde_json::Value::Null => None,
            v => Some(serde_json::from_value(v.clone()).map_err(|_| {
                Error::MalformedResponse(format!("{}: bad valid_tokens meta", path.display()))
            })?),
        };
        let out = Self {
            values,
            descriptor_names: names,
            template_id,
            valid_tokens,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Per-patch image features: `values[k][c]` is channel `c` of patch `k`,
/// patches in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImageFeatures<T: Real> {
    pub values: Array2<T>,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub source_image_id: String,
    /// Original pixel size `(width, height)` of the encoded image.
    pub source_size: (u32, u32),
}

impl<T: Real> PatchImageFeatures<T> {
    pub fn validate(&self) -> Result<()> {
        let (m_i, d) = self.values.dim();
        if m_i == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image features have degenerate shape [{m_i}, {d}]"
            )));
        }
        if self.grid.0 * self.grid.1 != m_i {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} does not cover {m_i} patches",
                self.grid.0, self.grid.1
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "image features contain non-finite value {v:?}"
            )));
        }
        Ok(())
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (m_i, d) = self.values.dim();
        let payload: Vec<f32> = self
            .values
            .iter()
            .map(|&v| Real::to_f64(v) as f32)
            .collect();
        let meta = json!({
            "kind": "image",
            "grid": [self.grid.0, self.grid.1],
            "image_id": self.source_image_id,
            "source_size": [self.source_size.0, self.source_size.1],
        });
        tensorfile::write(path, &[m_i, d], &payload, &meta)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let t = tensorfile::read(path)?;
        let [m_i, d] = t.shape[..] else {
            return Err(Error::ShapeMismatch(format!(
                "image features need a rank-2 tensor, got shape {:?} in {}",
                t.shape,
                path.display()
            )));
        };
        let values = Array2::from_shape_vec(
            (m_i, d),
            t.values.into_iter().map(|v| T::of(f64::from(v))).collect(),
        )
        .expect("shape just computed from the element count");
        let grid: (usize, usize) = serde_json::from_value(t.meta["grid"].clone())
            .map_err(|_| Error::MalformedResponse(format!("{}: bad grid meta", path.display())))?;
        let source_size: (u32, u32) =
            serde_json::from_value(t.meta["source_size"].clone()).unwrap_or((0, 0));
        let out = Self {
            values,
            grid,
            source_image_id: t.meta["image_id"].as_str().unwrap_or("unknown").to_owned(),
            source_size,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Canonical location of a class's text features under a feature root:
/// `text/{class_slug}__{template_id}__{mode}.lseg`, with a mode-less
/// fallback for feature dumps produced without prompt-mode separation.
pub fn text_feature_path(
    root: &Path,
    class_name: &str,
    template_id: &str,
    mode: Option<PromptMode>,
) -> PathBuf {
    let slug = class_slug(class_name);
    match mode {
        Some(m) => root
            .join("text")
            .join(format!("{slug}__{template_id}__{m}.lseg")),
        None => root
            .join("text")
            .join(format!("{slug}__{template_id}.lseg")),
    }
}

/// Canonical location of an image's patch features: `images/{stem}.lseg`.
pub fn image_feature_path(root: &Path, image_id: &str) -> PathBuf {
    root.join("images").join(format!("{image_id}.lseg"))
}

/// Client for the patch/token encoder service.
pub struct EmbedClient {
    base_url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    cache_dir: Option<PathBuf>,
    backend_id: String,
}

impl EmbedClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let base_url = base_url.into().trim_end_matches('/').to_owned();
        let backend_id = hex::encode(Sha256::digest(base_url.as_bytes()))[..12].to_owned();
        Self {
            base_url,
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
            retry: RetryPolicy::default(),
            cache_dir: None,
            backend_id,
        }
    }

    /// Read the endpoint from `LLMSEG_EMBED_URL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(EMBED_URL_VAR)
            .map_err(|_| Error::EndpointNotConfigured(EMBED_URL_VAR))?;
        Ok(Self::new(url))
    }

    /// Cache every encoding under `dir`, keyed by backend and input content.
    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn cache_path(&self, kind: &str, input_digest: &str) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let mut hasher = Sha256::new();
        hasher.update(&self.backend_id);
        hasher.update([0x1f]);
        hasher.update(kind);
        hasher.update([0x1f]);
        hasher.update(input_digest);
        Some(dir.join(format!("{}.lseg", hex::encode(hasher.finalize()))))
    }

    fn post(&self, endpoint: &str, body: serde_json::Value) -> Result<serde_json::Value> {
        let url = format!("{}/{endpoint}", self.base_url);
        self.retry.run(endpoint, || {
            self.agent
                .post(&url)
                .send_json(body.clone())
                .map_err(|err| match err {
                    ureq::Error::Status(code, resp) => {
                        let text = resp.into_string().unwrap_or_default();
                        (code == 429 || code >= 500, format!("HTTP {code}: {text}"))
                    }
                    ureq::Error::Transport(t) => (true, t.to_string()),
                })?
                .into_json()
                .map_err(|e| (false, format!("invalid JSON body: {e}")))
        })
    }

    /// Encode prompt strings into per-token features. Sequences are padded
    /// to the longest with zeros; real lengths come back in `valid_tokens`.
    pub fn encode_text<T: Real>(
        &self,
        prompts: &[String],
        descriptor_names: &[String],
        template_id: &str,
    ) -> Result<TokenTextFeatures<T>> {
        if prompts.is_empty() {
            return Err(Error::InvalidParam("no prompts to encode".into()));
        }
        let digest = hex::encode(Sha256::digest(prompts.join("\u{1f}").as_bytes()));
        if let Some(path) = self.cache_path("text", &digest) {
            if path.is_file() {
                let mut cached = TokenTextFeatures::from_file(&path)?;
                cached.descriptor_names = descriptor_names.to_vec();
                cached.template_id = template_id.to_owned();
                return Ok(cached);
            }
        }

        let value = self.post("encode_text", json!({ "texts": prompts }))?;
        let raw: Vec<Vec<Vec<f32>>> = serde_json::from_value(value["features"].clone())
            .map_err(|_| Error::MalformedResponse("encode_text: bad features field".into()))?;
        if raw.len() != prompts.len() {
            return Err(Error::MalformedResponse(format!(
                "encode_text returned {} feature sets for {} prompts",
                raw.len(),
                prompts.len()
            )));
        }
        let d = raw
            .first()
            .and_then(|t| t.first())
            .map(Vec::len)
            .ok_or_else(|| Error::MalformedResponse("encode_text: empty token list".into()))?;
        let max_tokens = raw.iter().map(Vec::len).max().unwrap_or(0);
        let mut values = Array3::<T>::zeros((raw.len(), max_tokens, d));
        let mut valid = Vec::with_capacity(raw.len());
        for (i, tokens) in raw.iter().enumerate() {
            if tokens.is_empty() {
                return Err(Error::MalformedResponse(format!(
                    "encode_text: prompt {i} produced no tokens"
                )));
            }
            valid.push(tokens.len());
            for (j, tok) in tokens.iter().enumerate() {
                if tok.len() != d {
                    return Err(Error::MalformedResponse(format!(
                        "encode_text: ragged channel width at prompt {i} token {j}"
                    )));
                }
                for (c, &v) in tok.iter().enumerate() {
                    values[[i, j, c]] = T::of(f64::from(v));
                }
            }
        }
        let out = TokenTextFeatures {
            values,
            descriptor_names: descriptor_names.to_vec(),
            template_id: template_id.to_owned(),
            valid_tokens: Some(valid),
        };
        out.validate()?;
        if let Some(path) = self.cache_path("text", &digest) {
            out.to_file(&path)?;
        }
        Ok(out)
    }

    /// Encode one image into patch features. The cache key is the file
    /// content, so renames and re-encodes of identical pixels still hit.
    pub fn encode_image<T: Real>(&self, image_path: &Path) -> Result<PatchImageFeatures<T>> {
        let bytes = std::fs::read(image_path)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        let image_id = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_owned();
        if let Some(path) = self.cache_path("image", &digest) {
            if path.is_file() {
                let mut cached = PatchImageFeatures::from_file(&path)?;
                cached.source_image_id = image_id;
                return Ok(cached);
            }
        }

        let value = self.post(
            "encode_image",
            json!({ "path": image_path.to_string_lossy() }),
        )?;
        let raw: Vec<Vec<f32>> = serde_json::from_value(value["features"].clone())
            .map_err(|_| Error::MalformedResponse("encode_image: bad features field".into()))?;
        let grid: (usize, usize) = serde_json::from_value(value["grid"].clone())
            .map_err(|_| Error::MalformedResponse("encode_image: bad grid field".into()))?;
        let m_i = raw.len();
        let d = raw
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::MalformedResponse("encode_image: empty feature list".into()))?;
        let mut values = Array2::<T>::zeros((m_i, d));
        for (k, patch) in raw.iter().enumerate() {
            if patch.len() != d {
                return Err(Error::MalformedResponse(format!(
                    "encode_image: ragged channel width at patch {k}"
                )));
            }
            for (c, &v) in patch.iter().enumerate() {
                values[[k, c]] = T::of(f64::from(v));
            }
        }
        let out = PatchImageFeatures {
            values,
            grid,
            source_image_id: image_id,
            source_size: image::image_dimensions(image_path).unwrap_or((0, 0)),
        };
        out.validate()?;
        if let Some(path) = self.cache_path("image", &digest) {
            out.to_file(&path)?;
        }
        Ok(out)
    }
}

/// Where the pipeline gets its features.
pub enum FeatureSource {
    /// A directory of precomputed tensor files laid out by
    /// [`text_feature_path`] / [`image_feature_path`].
    Dir(PathBuf),
    /// A live encoder service.
    Service(EmbedClient),
}

impl FeatureSource {
    /// Token features for `[superclass, subclasses...]` under one template.
    ///
    /// The directory source reads them from disk; the service source phrases
    /// each name through the template and encodes the prompts.
    pub fn text_features<T: Real>(
        &self,
        class_name: &str,
        descriptor_names: &[String],
        template: &PromptTemplate,
        mode: PromptMode,
    ) -> Result<TokenTextFeatures<T>> {
        match self {
            FeatureSource::Dir(root) => {
                let with_mode = text_feature_path(root, class_name, &template.id, Some(mode));
                let without = text_feature_path(root, class_name, &template.id, None);
                let path = if with_mode.is_file() {
                    with_mode
                } else if without.is_file() {
                    without
                } else {
                    return Err(Error::Dataset(format!(
                        "no text features for class {class_name:?} under template {}: looked for {} and {}",
                        template.id,
                        with_mode.display(),
                        without.display()
                    )));
                };
                TokenTextFeatures::from_file(&path)
            }
            FeatureSource::Service(client) => {
                if descriptor_names.is_empty() {
                    return Err(Error::InvalidParam(format!(
                        "no descriptor names for class {class_name:?}"
                    )));
                }
                let prompts: Vec<String> = descriptor_names
                    .iter()
                    .map(|name| template.expand(name))
                    .collect();
                client.encode_text(&prompts, descriptor_names, &template.id)
            }
        }
    }

    /// Patch features for one image, by precomputed file or live encode.
    pub fn image_features<T: Real>(
        &self,
        image_path: &Path,
        image_id: &str,
    ) -> Result<PatchImageFeatures<T>> {
        match self {
            FeatureSource::Dir(root) => {
                let path = image_feature_path(root, image_id);
                if !path.is_file() {
                    return Err(Error::Dataset(format!(
                        "no image features for {image_id:?}: looked for {}",
                        path.display()
                    )));
                }
                PatchImageFeatures::from_file(&path)
            }
            FeatureSource::Service(client) => client.encode_image(image_path),
        }
    }
}
