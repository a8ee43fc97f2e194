//! The full segmentation path for one image: resolve per-class descriptors
//! once, then score patches, blend, upsample, threshold, and refine.
//!
//! Descriptor resolution happens in [`Pipeline::prepare`] so a batch run pays
//! for prompting, encoding, and template averaging exactly once. Per-image
//! work in [`Pipeline::segment_image`] is pure array math plus one encoder
//! call (or tensor-file read) for the patch features.

use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array1, Array2, Array3};

use crate::config::{FeatureLocation, RunConfig, SegMode};
use crate::crf;
use crate::ensemble::{self, AttentionMap, DescriptorMatrix, EnsembleMethod};
use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::llm::{ChatCompletion, HttpChatClient};
use crate::mask::{self, LabelMap};
use crate::real::Real;
use crate::subclass::{self, GenOptions, SubclassCache};
use crate::templates::PromptTemplate;

/// Resolved descriptor state for one foreground class.
#[derive(Debug, Clone)]
pub struct ClassDescriptors<T: Real> {
    pub class_name: String,
    /// Template-averaged superclass descriptor (row 0 of the averaged
    /// matrix). Unit length when the run normalizes features.
    pub superclass: Array1<T>,
    /// Template-averaged subclass descriptors, one row per subclass. Absent
    /// in modes that never consult subclasses.
    pub subclasses: Option<DescriptorMatrix<T>>,
    /// Raw superclass token features per template, for the token-mean
    /// scoring mode. Rows are tokens; padding rows are already dropped.
    pub baseline_tokens: Vec<Array2<T>>,
}

impl<T: Real> ClassDescriptors<T> {
    /// Subclass names backing this class, for run manifests.
    pub fn subclass_names(&self) -> &[String] {
        self.subclasses
            .as_ref()
            .map(|m| &m.descriptor_names[..])
            .unwrap_or(&[])
    }
}

/// Everything produced for one image.
#[derive(Debug, Clone)]
pub struct SegOutput<T: Real> {
    /// Per-class score maps at working resolution, each min-max normalized
    /// at the patch level before upsampling. Shape `[classes × H × W]`.
    pub scores: Array3<T>,
    /// Labels straight from thresholding `scores`, before refinement.
    pub pre_crf: LabelMap,
    /// Final labels at working resolution: refined when the config enables
    /// refinement, otherwise identical to `pre_crf`.
    pub labels: LabelMap,
    /// The photo at working resolution (refinement guidance; handy for
    /// overlays).
    pub photo: RgbImage,
    /// Original pixel size `(width, height)` of the photo.
    pub source_size: (u32, u32),
}

/// A run-ready segmentation engine: config, class list, and per-class
/// descriptors, all validated.
pub struct Pipeline<T: Real> {
    config: RunConfig,
    /// Background first; foreground order matches `classes`.
    class_names: Vec<String>,
    source: FeatureSource,
    classes: Vec<ClassDescriptors<T>>,
}

impl<T: Real> std::fmt::Debug for Pipeline<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("class_names", &self.class_names)
            .field("mode", &self.config.mode)
            .finish_non_exhaustive()
    }
}

impl<T: Real> Pipeline<T> {
    /// Resolve descriptors for every foreground class and validate the whole
    /// configuration. `class_names` lists background first.
    ///
    /// When subclass names have to be generated, the chat endpoint is taken
    /// from the environment; see [`prepare_with`](Self::prepare_with) to
    /// inject a client instead.
    pub fn prepare(config: RunConfig, class_names: Vec<String>) -> Result<Self> {
        Self::prepare_with(config, class_names, None)
    }

    /// [`prepare`](Self::prepare) with an explicit chat client for subclass
    /// generation. `None` falls back to the environment-configured endpoint,
    /// consulted only if generation is actually needed.
    pub fn prepare_with(
        config: RunConfig,
        class_names: Vec<String>,
        chat: Option<&dyn ChatCompletion>,
    ) -> Result<Self> {
        config.validate()?;
        if class_names.len() < 2 {
            return Err(Error::InvalidParam(
                "class list needs background plus at least one foreground class".into(),
            ));
        }
        let templates = config.template_set()?;
        let source = config.feature_source()?;

        let mut classes = Vec::with_capacity(class_names.len() - 1);
        for name in &class_names[1..] {
            classes.push(resolve_class::<T>(
                &config, &source, &templates, name, chat,
            )?);
        }
        Ok(Self {
            config,
            class_names,
            source,
            classes,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn classes(&self) -> &[ClassDescriptors<T>] {
        &self.classes
    }

    /// Segment one image. `image_id` names precomputed patch features (and
    /// cache entries); the photo itself is always read for refinement
    /// guidance and overlays.
    pub fn segment_image(&self, image_path: &Path, image_id: &str) -> Result<SegOutput<T>> {
        let feats = self.source.image_features::<T>(image_path, image_id)?;
        let (grid_h, grid_w) = feats.grid;
        let image_rows = if self.config.ensemble.normalize_features {
            ensemble::normalize_rows(&feats.values.view(), |i| format!("patch {i}"))?
        } else {
            feats.values.clone()
        };

        let out_w = self.config.resize[0] as usize;
        let out_h = self.config.resize[1] as usize;
        let (photo, source_size) =
            mask::load_rgb_resized(image_path, self.config.resize[0], self.config.resize[1])?;

        // One score map per foreground class, normalized at patch level.
        let mut scores = Array3::<T>::zeros((self.classes.len(), out_h, out_w));
        for (c, class) in self.classes.iter().enumerate() {
            let patch_map = self.class_patch_map(class, &image_rows, (grid_h, grid_w))?;
            let grid = mask::reshape_to_grid(&patch_map.view(), (grid_h, grid_w))?;
            let up = mask::upsample_bilinear(&grid.view(), out_h, out_w)?;
            scores.slice_mut(s![c, .., ..]).assign(&up);
        }

        let pre_crf = mask::assemble_labelmap(&scores, T::of(self.config.tau), &self.class_names)?;
        let labels = if self.config.use_crf {
            let unary = crf::to_unary(&scores, &self.config.background)?;
            let rgb = mask::rgb_to_array(&photo);
            let (_, refined) = crf::mean_field(&unary, &rgb.view(), &self.config.crf)?;
            LabelMap {
                labels: refined,
                class_names: self.class_names.clone(),
            }
        } else {
            pre_crf.clone()
        };

        Ok(SegOutput {
            scores,
            pre_crf,
            labels,
            photo,
            source_size,
        })
    }

    /// The patch-level score map for one class under the configured mode,
    /// min-max normalized to `[0, 1]`.
    fn class_patch_map(
        &self,
        class: &ClassDescriptors<T>,
        image_rows: &Array2<T>,
        grid: (usize, usize),
    ) -> Result<Array1<T>> {
        let ens = &self.config.ensemble;
        match self.config.mode {
            SegMode::Baseline => {
                // Token-mean similarity per template, averaged with equal
                // template weight.
                let mut acc = Array1::<T>::zeros(image_rows.nrows());
                for tokens in &class.baseline_tokens {
                    acc += &ensemble::baseline_similarity(&image_rows.view(), &tokens.view())?;
                }
                let count =
                    T::from_usize(class.baseline_tokens.len()).expect("template count fits scalar");
                acc.mapv_inplace(|v| v / count);
                Ok(mask::normalize_minmax(&acc.view()))
            }
            SegMode::SuperclassOnly => {
                let a = ensemble::ensemble_attention(&image_rows.view(), &class.superclass.view())?;
                Ok(mask::normalize_minmax(&a.view()))
            }
            SegMode::SubclassOnly => {
                let a = self.subclass_patch_map(class, image_rows, grid)?;
                Ok(mask::normalize_minmax(&a.view()))
            }
            SegMode::Full => {
                let a_super =
                    ensemble::ensemble_attention(&image_rows.view(), &class.superclass.view())?;
                let a_sub = self.subclass_patch_map(class, image_rows, grid)?;
                let a_super = mask::normalize_minmax(&a_super.view());
                let a_sub = mask::normalize_minmax(&a_sub.view());
                ensemble::mix_superclass(&a_super.view(), &a_sub.view(), T::of(ens.lambda_super))
            }
        }
    }

    /// Raw (un-normalized) patch scores from the subclass ensemble under the
    /// configured combination rule.
    fn subclass_patch_map(
        &self,
        class: &ClassDescriptors<T>,
        image_rows: &Array2<T>,
        grid: (usize, usize),
    ) -> Result<Array1<T>> {
        let ens = &self.config.ensemble;
        let subs = class.subclasses.as_ref().ok_or_else(|| {
            Error::InvalidParam(format!(
                "mode {} needs subclass descriptors for class {:?}, but none were resolved",
                self.config.mode, class.class_name
            ))
        })?;
        match ens.method {
            EnsembleMethod::Fused => {
                let trace =
                    ensemble::fuse_descriptors(&image_rows.view(), subs, ens.top_k_image, false)?;
                ensemble::ensemble_attention(&image_rows.view(), &trace.fused.view())
            }
            method => {
                let maps = AttentionMap::new(subs.values.dot(&image_rows.t()), grid)?;
                ensemble::alt_ensemble(method, &image_rows.view(), subs, &maps, ens.top_k_image)
            }
        }
    }
}

/// How many descriptor rows (superclass included) a mode consumes.
fn descriptor_rows(config: &RunConfig) -> usize {
    match config.mode {
        SegMode::Full | SegMode::SubclassOnly => 1 + config.n_subclasses,
        SegMode::SuperclassOnly | SegMode::Baseline => 1,
    }
}

/// Resolve one class: settle descriptor names, pull token features for every
/// template, collapse them to descriptors, and average across templates.
fn resolve_class<T: Real>(
    config: &RunConfig,
    source: &FeatureSource,
    templates: &[PromptTemplate],
    class_name: &str,
    chat: Option<&dyn ChatCompletion>,
) -> Result<ClassDescriptors<T>> {
    let wanted = descriptor_rows(config);
    let names = descriptor_names(config, class_name, wanted, chat)?;

    let mut per_template: Vec<DescriptorMatrix<T>> = Vec::with_capacity(templates.len());
    let mut baseline_tokens: Vec<Array2<T>> = Vec::with_capacity(templates.len());
    for template in templates {
        let mut tokens =
            source.text_features::<T>(class_name, &names, template, config.prompt_mode)?;
        // Precomputed files may carry more descriptors than this run uses
        // (larger subclass sets support sweeps over smaller ones).
        if tokens.values.dim().0 < wanted {
            return Err(Error::Dataset(format!(
                "text features for class {class_name:?} under template {} hold {} descriptors, run needs {wanted}",
                template.id,
                tokens.values.dim().0,
            )));
        }
        if tokens.values.dim().0 > wanted {
            tokens = tokens.take_descriptors(wanted)?;
        }

        // Keep the superclass token rows (padding dropped) for token-mean
        // scoring before they are collapsed away.
        let m_valid = tokens
            .valid_tokens
            .as_ref()
            .map_or(tokens.values.dim().1, |v| v[0]);
        let mut sup = tokens.values.slice(s![0, 0..m_valid, ..]).to_owned();
        if config.ensemble.normalize_features {
            sup = ensemble::normalize_rows(&sup.view(), |i| {
                format!("token {i} of class {class_name:?}")
            })?;
        }
        baseline_tokens.push(sup);

        per_template.push(ensemble::select_text_features(&tokens)?);
    }

    let averaged =
        ensemble::average_over_templates(&per_template, config.ensemble.normalize_features)?;

    let superclass = averaged.values.row(0).to_owned();
    let subclasses = if wanted > 1 {
        Some(DescriptorMatrix {
            values: averaged.values.slice(s![1.., ..]).to_owned(),
            descriptor_names: averaged.descriptor_names[1..].to_vec(),
            normalized: averaged.normalized,
        })
    } else {
        None
    };

    Ok(ClassDescriptors {
        class_name: class_name.to_owned(),
        superclass,
        subclasses,
        baseline_tokens,
    })
}

/// Settle the descriptor name list `[class, subclasses...]` for one class.
///
/// Precomputed feature directories carry names in their file metadata, so no
/// list is needed up front. The live encoder needs concrete names: saved
/// subclass sets win, then cached/generated ones.
fn descriptor_names(
    config: &RunConfig,
    class_name: &str,
    wanted: usize,
    chat: Option<&dyn ChatCompletion>,
) -> Result<Vec<String>> {
    if wanted == 1 || matches!(config.features, FeatureLocation::Dir(_)) {
        // Directory sources resolve names from file metadata; the names
        // passed down are ignored there.
        return Ok(vec![class_name.to_owned()]);
    }

    let n = config.n_subclasses;
    if let Some(dir) = &config.subclass_dir {
        if let Some(set) = subclass::load_set(dir, class_name)? {
            if set.subclasses.len() < n {
                return Err(Error::InvalidSubclassSet(format!(
                    "saved set for {class_name:?} holds {} subclasses, run needs {n}",
                    set.subclasses.len()
                )));
            }
            let mut names = vec![set.superclass.clone()];
            names.extend(set.subclasses.iter().take(n).cloned());
            return Ok(names);
        }
    }

    let cache = SubclassCache::new(config.subclass_cache_dir());
    let options = GenOptions {
        model_id: config.model_id.clone(),
        max_tokens: config.max_tokens,
    };

    let owned_client;
    let client: &dyn ChatCompletion = match chat {
        Some(c) => c,
        None => {
            owned_client = HttpChatClient::from_env()?.with_rate_limit(config.requests_per_second);
            &owned_client
        }
    };

    let set =
        subclass::generate_subclasses(class_name, n, config.prompt_mode, client, &cache, &options)?;
    if let Some(dir) = &config.subclass_dir {
        subclass::save_set(dir, &set)?;
    }
    let mut names = vec![set.superclass.clone()];
    names.extend(set.subclasses);
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleConfig;
    use crate::features::{
        image_feature_path, text_feature_path, PatchImageFeatures, TokenTextFeatures,
    };
    use crate::subclass::PromptMode;
    use ndarray::arr2;
    use std::path::PathBuf;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir =
            std::env::temp_dir().join(format!("pipeline-tests-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    /// A 2-class, 2x2-patch world in a 3-channel feature space: channel 0 is
    /// "cat evidence", channel 1 "dog evidence", channel 2 background.
    fn write_world(dir: &Path) -> (PathBuf, PathBuf) {
        let features = dir.join("features");
        // Single-token descriptor rows: the per-channel token max is then the
        // row itself, which keeps the assertion arithmetic easy to do by hand.
        let write_text = |class: &str, rows: [[f64; 3]; 3]| {
            let names: Vec<String> = match class {
                "cat" => ["cat", "tabby", "siamese"],
                _ => ["dog", "beagle", "pug"],
            }
            .into_iter()
            .map(String::from)
            .collect();
            let feats = TokenTextFeatures::<f64> {
                values: ndarray::arr3(&[[rows[0]], [rows[1]], [rows[2]]]),
                descriptor_names: names,
                template_id: "T4".into(),
                valid_tokens: None,
            };
            feats
                .to_file(&text_feature_path(
                    &features,
                    class,
                    "T4",
                    Some(PromptMode::P2),
                ))
                .unwrap();
        };
        write_text("cat", [[1.0, 0.0, 0.0], [0.9, 0.1, 0.0], [0.95, 0.0, 0.05]]);
        write_text("dog", [[0.0, 1.0, 0.0], [0.0, 0.9, 0.1], [0.05, 1.0, 0.0]]);

        let patches = PatchImageFeatures::<f64> {
            values: arr2(&[
                [1.0, 0.0, 0.0],
                [0.9, 0.05, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ]),
            grid: (2, 2),
            source_image_id: "img0".into(),
            source_size: (2, 2),
        };
        patches
            .to_file(&image_feature_path(&features, "img0"))
            .unwrap();

        let photo_path = dir.join("img0.png");
        let photo = image::RgbImage::from_fn(2, 2, |x, y| match (x, y) {
            (0, 0) => image::Rgb([200, 40, 40]),
            (1, 0) => image::Rgb([190, 50, 40]),
            (0, 1) => image::Rgb([40, 200, 40]),
            _ => image::Rgb([40, 40, 200]),
        });
        photo.save(&photo_path).unwrap();
        (features, photo_path)
    }

    fn world_config(features: PathBuf) -> RunConfig {
        RunConfig {
            features: FeatureLocation::Dir(features),
            templates: vec!["T4".into()],
            n_subclasses: 2,
            resize: [2, 2],
            use_crf: false,
            // The toy grid has only four patches, so the image pool must be
            // smaller than the production default of five.
            ensemble: EnsembleConfig {
                top_k_image: 2,
                ..EnsembleConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn class_list() -> Vec<String> {
        vec!["background".into(), "cat".into(), "dog".into()]
    }

    #[test]
    fn full_mode_labels_the_quadrants() {
        let dir = tmp_dir("full");
        let (features, photo) = write_world(&dir);
        let pipeline = Pipeline::<f64>::prepare(world_config(features), class_list()).unwrap();
        let out = pipeline.segment_image(&photo, "img0").unwrap();

        // Strong cat patches, a dog patch, and a background patch.
        assert_eq!(out.pre_crf.labels, arr2(&[[1, 1], [2, 0]]),);
        assert_eq!(out.labels, out.pre_crf);
        assert_eq!(out.source_size, (2, 2));
        // Min-max normalized maps live in [0, 1].
        assert!(out.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn lambda_one_matches_superclass_only_bitwise() {
        let dir = tmp_dir("lambda1");
        let (features, photo) = write_world(&dir);

        let mut full = world_config(features.clone());
        full.ensemble.lambda_super = 1.0;
        let a = Pipeline::<f64>::prepare(full, class_list())
            .unwrap()
            .segment_image(&photo, "img0")
            .unwrap();

        let mut sup = world_config(features);
        sup.mode = SegMode::SuperclassOnly;
        let b = Pipeline::<f64>::prepare(sup, class_list())
            .unwrap()
            .segment_image(&photo, "img0")
            .unwrap();

        assert_eq!(a.scores, b.scores);
        assert!(a
            .scores
            .iter()
            .zip(b.scores.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn lambda_zero_matches_subclass_only_bitwise() {
        let dir = tmp_dir("lambda0");
        let (features, photo) = write_world(&dir);

        let mut full = world_config(features.clone());
        full.ensemble.lambda_super = 0.0;
        let a = Pipeline::<f64>::prepare(full, class_list())
            .unwrap()
            .segment_image(&photo, "img0")
            .unwrap();

        let mut sub = world_config(features);
        sub.mode = SegMode::SubclassOnly;
        let b = Pipeline::<f64>::prepare(sub, class_list())
            .unwrap()
            .segment_image(&photo, "img0")
            .unwrap();

        assert!(a
            .scores
            .iter()
            .zip(b.scores.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn baseline_mode_scores_with_token_means() {
        let dir = tmp_dir("baseline");
        let (features, photo) = write_world(&dir);
        let mut config = world_config(features);
        config.mode = SegMode::Baseline;
        let pipeline = Pipeline::<f64>::prepare(config, class_list()).unwrap();
        let out = pipeline.segment_image(&photo, "img0").unwrap();
        assert_eq!(out.pre_crf.labels, arr2(&[[1, 1], [2, 0]]));
        // Baseline never resolves subclasses.
        assert!(pipeline.classes()[0].subclasses.is_none());
    }

    #[test]
    fn refinement_smoke_runs_on_the_tiny_world() {
        let dir = tmp_dir("crf");
        let (features, photo) = write_world(&dir);
        let mut config = world_config(features);
        config.use_crf = true;
        config.crf.iterations = 2;
        let pipeline = Pipeline::<f64>::prepare(config, class_list()).unwrap();
        let out = pipeline.segment_image(&photo, "img0").unwrap();
        assert_eq!(out.labels.labels.dim(), (2, 2));
        // The distinct quadrant colors keep the strong cat corner labeled.
        assert_eq!(out.labels.labels[[0, 0]], 1);
    }

    #[test]
    fn alternative_rules_run_end_to_end() {
        let dir = tmp_dir("alt");
        let (features, photo) = write_world(&dir);
        for method in [
            EnsembleMethod::Average,
            EnsembleMethod::MaxSimilarity,
            EnsembleMethod::CrossAttention,
        ] {
            let mut config = world_config(features.clone());
            config.ensemble.method = method;
            let pipeline = Pipeline::<f64>::prepare(config, class_list()).unwrap();
            let out = pipeline.segment_image(&photo, "img0").unwrap();
            assert_eq!(out.pre_crf.labels[[0, 0]], 1, "method {method}");
            assert_eq!(out.pre_crf.labels[[1, 0]], 2, "method {method}");
        }
    }

    #[test]
    fn too_small_feature_files_are_reported() {
        let dir = tmp_dir("small");
        let (features, _photo) = write_world(&dir);
        let mut config = world_config(features);
        config.n_subclasses = 7; // files hold 1 + 2
        let err = Pipeline::<f64>::prepare(config, class_list()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("8"), "unexpected message: {msg}");
        assert!(msg.contains("cat"), "unexpected message: {msg}");
    }

    #[test]
    fn trimming_wide_feature_files_supports_smaller_runs() {
        let dir = tmp_dir("trim");
        let (features, photo) = write_world(&dir);
        let mut config = world_config(features);
        config.n_subclasses = 1; // files hold 2 subclasses; use the first
        let pipeline = Pipeline::<f64>::prepare(config, class_list()).unwrap();
        assert_eq!(pipeline.classes()[0].subclass_names(), ["tabby"]);
        let out = pipeline.segment_image(&photo, "img0").unwrap();
        assert_eq!(out.pre_crf.labels[[0, 0]], 1);
    }

    #[test]
    fn missing_class_features_fail_preparation() {
        let dir = tmp_dir("missing");
        let (features, _photo) = write_world(&dir);
        let config = world_config(features);
        let err = Pipeline::<f64>::prepare(config, vec!["background".into(), "zebra".into()])
            .unwrap_err();
        assert!(err.to_string().contains("zebra"));
    }
}
