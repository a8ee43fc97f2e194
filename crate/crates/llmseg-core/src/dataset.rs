//! Dataset enumeration: pairing images with ground-truth masks and loading
//! class lists.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One evaluation item. `mask_path` is present only for scored datasets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

/// Where a dataset lives and what it labels.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub images_dir: PathBuf,
    pub masks_dir: Option<PathBuf>,
    /// Class names, background first.
    pub class_names: Vec<String>,
    /// Optional file of sample ids, one per line. Without it the images
    /// directory is scanned and ids are sorted for a stable order.
    pub split: Option<PathBuf>,
}

fn resolve_image(images_dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| images_dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

impl DatasetSpec {
    /// Enumerate all samples, verifying every referenced file exists.
    ///
    /// Problems are collected and reported together — a dataset with twenty
    /// missing masks produces one actionable error, not twenty runs.
    pub fn enumerate(&self) -> Result<Vec<Sample>> {
        let ids: Vec<String> = match &self.split {
            Some(split_path) => std::fs::read_to_string(split_path)
                .map_err(|e| Error::Dataset(format!("split file {}: {e}", split_path.display())))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect(),
            None => {
                let mut ids: Vec<String> = std::fs::read_dir(&self.images_dir)
                    .map_err(|e| {
                        Error::Dataset(format!("images dir {}: {e}", self.images_dir.display()))
                    })?
                    .filter_map(|entry| entry.ok())
                    .filter_map(|entry| {
                        let path = entry.path();
                        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
                        if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                            Some(path.file_stem()?.to_str()?.to_owned())
                        } else {
                            None
                        }
                    })
                    .collect();
                ids.sort();
                ids.dedup();
                ids
            }
        };
        if ids.is_empty() {
            return Err(Error::Dataset(format!(
                "no samples found in {}",
                self.images_dir.display()
            )));
        }

        let mut samples = Vec::with_capacity(ids.len());
        let mut missing = Vec::new();
        for id in &ids {
            let image_path = match resolve_image(&self.images_dir, id) {
                Some(p) => p,
                None => {
                    missing.push(format!(
                        "image {id}.{{png,jpg,jpeg}} in {}",
                        self.images_dir.display()
                    ));
                    continue;
                }
            };
            let mask_path = match &self.masks_dir {
                Some(masks_dir) => {
                    let p = masks_dir.join(format!("{id}.png"));
                    if !p.is_file() {
                        missing.push(format!("mask {}", p.display()));
                        continue;
                    }
                    Some(p)
                }
                None => None,
            };
            samples.push(Sample {
                id: id.clone(),
                image_path,
                mask_path,
            });
        }
        if !missing.is_empty() {
            return Err(Error::Dataset(format!(
                "{} missing file(s):\n  {}",
                missing.len(),
                missing.join("\n  ")
            )));
        }
        Ok(samples)
    }
}

/// Read a class list: one name per line, background first, blank lines and
/// `#` comments skipped.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("class list {}: {e}", path.display())))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect();
    if names.len() < 2 {
        return Err(Error::Config(format!(
            "class list {} needs background plus at least one class, found {}",
            path.display(),
            names.len()
        )));
    }
    let mut seen = HashSet::new();
    for name in &names {
        if !seen.insert(name.to_lowercase()) {
            return Err(Error::Config(format!(
                "class list {} repeats {name:?}",
                path.display()
            )));
        }
    }
    Ok(names)
}
