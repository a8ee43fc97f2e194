//! Generated benchmark worlds with fully known geometry.
//!
//! Real encoder features are opaque, which makes end-to-end scoring claims
//! unfalsifiable in tests. These worlds replace the encoder with engineered
//! feature vectors whose inner products are designed by hand, so a test can
//! state what the segmenter must produce and mean it.
//!
//! Two profiles exist:
//!
//! * [`WorldProfile::Clean`] — every descriptor points at its class axis,
//!   patches are near-pure class vectors. Any sane scoring rule segments it
//!   almost perfectly; it pins down the plumbing (upsampling alignment,
//!   thresholds, label assembly, refinement).
//! * [`WorldProfile::Adversarial`] — engineered to separate scoring rules.
//!   Each class comes in two visual variants and every image contains only
//!   one of them; the background resembles the *absent* variant. Subclass
//!   descriptor sets mix good variant detectors with traps: detectors for
//!   subclasses that never appear (dead feature axes) and one diffuse
//!   "stuff" detector that responds to background and texture everywhere.
//!   Image-conditioned descriptor weighting suppresses the traps because
//!   their channels carry no image evidence; plain averaging keeps feeding
//!   the absent-variant detectors (which the background matches), flat
//!   maxima latch onto the diffuse detector, and similarity-sum weighting
//!   rewards the diffuse detector precisely because it overlaps everything.
//!   The superclass descriptor carries a deliberate background bleed, so
//!   unblended superclass maps overshoot. Weak low-evidence patches (heavy
//!   texture, faint class signal) punish rules that raise the score floor.
//!
//! Numbers were chosen so the orderings hold with wide margins (several
//! noise standard deviations), not by luck of a seed.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FeatureLocation, RunConfig, SegMode};
use crate::error::{Error, Result};
use crate::features::{
    image_feature_path, text_feature_path, PatchImageFeatures, TokenTextFeatures,
};
use crate::mask;
use crate::subclass::{self, PromptMode, SubclassSet};
use crate::templates;

/// Embedding width of the engineered feature space.
pub const DIM: usize = 16;
/// Patch grid side; images are `GRID * BLOCK` pixels square.
pub const GRID: usize = 18;
/// Pixels per patch cell. Region boundaries land exactly on patch borders,
/// so center-aligned bilinear upsampling crosses the labeling threshold at
/// the true boundary.
pub const BLOCK: usize = 4;
/// Image side in pixels.
pub const SIDE: usize = GRID * BLOCK;
/// Tokens per descriptor prompt in the generated text features.
const TOKENS: usize = 3;

// Feature axes. Classes come in two variants (an image contains one); axis 4
// is background "stuff", axis 5 surface texture. Axes 10.. appear in
// descriptors but never in any image.
const AX_CAT_A: usize = 0;
const AX_CAT_B: usize = 1;
const AX_DOG_A: usize = 2;
const AX_DOG_B: usize = 3;
const AX_BG: usize = 4;
const AX_TEXTURE: usize = 5;
const AX_CAT_DEAD: [usize; 3] = [10, 11, 12];
const AX_DOG_DEAD: [usize; 3] = [13, 14, 15];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldProfile {
    Clean,
    Adversarial,
}

impl std::fmt::Display for WorldProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WorldProfile::Clean => "clean",
            WorldProfile::Adversarial => "adversarial",
        })
    }
}

impl std::str::FromStr for WorldProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(WorldProfile::Clean),
            "adversarial" => Ok(WorldProfile::Adversarial),
            other => Err(Error::InvalidParam(format!(
                "unknown world profile {other:?} (expected clean or adversarial)"
            ))),
        }
    }
}

/// Everything a generated world hands back to its caller.
#[derive(Debug, Clone)]
pub struct GeneratedWorld {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub config: RunConfig,
    /// Background first.
    pub class_names: Vec<String>,
    pub image_ids: Vec<String>,
}

/// What one patch cell contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Background,
    /// Full-evidence class patch. `class` is 0 = cat, 1 = dog.
    Strong {
        class: usize,
    },
    /// Low-evidence class patch: faint class signal under heavy texture.
    Weak {
        class: usize,
    },
}

impl Cell {
    fn label(self) -> u8 {
        match self {
            Cell::Background => 0,
            Cell::Strong { class } | Cell::Weak { class } => class as u8 + 1,
        }
    }
}

fn unit(axis: usize) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[axis] = 1.0;
    v
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 0.0, "engineered vector collapsed to zero");
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// One standard normal draw (Box–Muller; keeps the dependency set small).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = rng.gen::<f64>().max(1e-12);
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `base + sigma * g`, unit-normalized.
fn noisy(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let mut v: Vec<f64> = base.iter().map(|&b| b + sigma * gauss(rng)).collect();
    l2_normalize(&mut v);
    v
}

/// Weighted sum of basis axes, unit-normalized.
fn blend(parts: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    for &(axis, w) in parts {
        v[axis] += w;
    }
    l2_normalize(&mut v);
    v
}

struct ClassWorld {
    name: String,
    subclass_names: Vec<String>,
    /// Row 0 superclass, rows 1.. subclasses; unit rows.
    descriptors: Vec<Vec<f64>>,
    variant_axes: [usize; 2],
}

fn cat_subclass_names(profile: WorldProfile) -> Vec<String> {
    match profile {
        WorldProfile::Clean => [
            "tabby cat",
            "ginger cat",
            "black cat",
            "white cat",
            "calico cat",
            "siamese cat",
            "persian cat",
            "maine coon",
            "kitten",
            "stray cat",
        ],
        WorldProfile::Adversarial => [
            "tabby cat",
            "ginger tabby",
            "striped tabby",
            "persian cat",
            "white persian",
            "longhair persian",
            "sphynx cat",
            "manx cat",
            "bobtail cat",
            "house cat",
        ],
    }
    .into_iter()
    .map(String::from)
    .collect()
}

fn dog_subclass_names(profile: WorldProfile) -> Vec<String> {
    match profile {
        WorldProfile::Clean => [
            "beagle",
            "poodle",
            "labrador",
            "terrier",
            "bulldog",
            "husky",
            "collie",
            "dachshund",
            "puppy",
            "stray dog",
        ],
        WorldProfile::Adversarial => [
            "beagle",
            "tricolor beagle",
            "beagle hound",
            "poodle",
            "white poodle",
            "toy poodle",
            "maltese dog",
            "corgi dog",
            "dalmatian dog",
            "yard dog",
        ],
    }
    .into_iter()
    .map(String::from)
    .collect()
}

/// The diffuse "stuff" descriptor: touches every variant axis a little and
/// background/texture a lot. Its similarity-sum against any real image is
/// large (many overlapping channels) while no single channel aligns well.
fn diffuse_descriptor() -> Vec<f64> {
    blend(&[
        (AX_CAT_A, 0.5),
        (AX_CAT_B, 0.5),
        (AX_DOG_A, 0.5),
        (AX_DOG_B, 0.5),
        (AX_BG, 1.6),
        (AX_TEXTURE, 1.2),
    ])
}

fn build_class(
    rng: &mut ChaCha8Rng,
    profile: WorldProfile,
    name: &str,
    variant_axes: [usize; 2],
    dead_axes: [usize; 3],
) -> ClassWorld {
    let subclass_names = match name {
        "cat" => cat_subclass_names(profile),
        _ => dog_subclass_names(profile),
    };
    let mut descriptors = Vec::with_capacity(11);
    match profile {
        WorldProfile::Clean => {
            // Superclass and every subclass point straight at the class axis.
            let axis = unit(variant_axes[0]);
            descriptors.push(noisy(rng, &axis, 0.05));
            for _ in 0..10 {
                descriptors.push(noisy(rng, &axis, 0.15));
            }
        }
        WorldProfile::Adversarial => {
            // Superclass covers both variants with a background bleed.
            descriptors.push(blend(&[
                (variant_axes[0], 1.0),
                (variant_axes[1], 1.0),
                (AX_BG, 0.3),
            ]));
            // Three detectors per variant. The noise stays tiny: every trap
            // below is structural, and the scoring anchors (per-image
            // min/max, per-channel pools) are order statistics that a large
            // per-world draw would drag around wholesale.
            for &axis in &variant_axes {
                let base = unit(axis);
                for _ in 0..3 {
                    descriptors.push(noisy(rng, &base, 0.01));
                }
            }
            // Three detectors for subclasses that never appear in any image.
            for &axis in &dead_axes {
                descriptors.push(unit(axis));
            }
            // One diffuse stuff detector.
            descriptors.push(diffuse_descriptor());
        }
    }
    ClassWorld {
        name: name.to_owned(),
        subclass_names,
        descriptors,
        variant_axes,
    }
}

/// Patch layout for one image. Clean: two separated class blocks.
/// Adversarial: each class block gets a same-width strip of weak patches.
fn layout(profile: WorldProfile) -> Vec<Vec<Cell>> {
    let mut cells = vec![vec![Cell::Background; GRID]; GRID];
    match profile {
        WorldProfile::Clean => {
            for row in cells.iter_mut().take(8).skip(2) {
                for cell in row.iter_mut().take(8).skip(2) {
                    *cell = Cell::Strong { class: 0 };
                }
            }
            for row in cells.iter_mut().take(16).skip(10) {
                for cell in row.iter_mut().take(16).skip(10) {
                    *cell = Cell::Strong { class: 1 };
                }
            }
        }
        WorldProfile::Adversarial => {
            for (class, rows) in [(0usize, 2..8), (1usize, 10..16)] {
                for y in rows {
                    for cell in &mut cells[y][2..8] {
                        *cell = Cell::Strong { class };
                    }
                    for cell in &mut cells[y][8..12] {
                        *cell = Cell::Weak { class };
                    }
                }
            }
        }
    }
    cells
}

/// Feature vector for one patch cell. `variants[c]` picks which variant of
/// class `c` this image contains.
fn cell_features(
    rng: &mut ChaCha8Rng,
    profile: WorldProfile,
    cell: Cell,
    classes: &[ClassWorld],
    variants: [usize; 2],
) -> Vec<f64> {
    let noise = 0.005;
    match (profile, cell) {
        // Patch noise is kept well under the block/background margin so the
        // only pre-refinement misses are the four interpolation-starved
        // corner pixels of each block.
        (WorldProfile::Clean, Cell::Background) => noisy(rng, &unit(AX_BG), 0.01),
        (WorldProfile::Clean, Cell::Strong { class } | Cell::Weak { class }) => {
            noisy(rng, &unit(classes[class].variant_axes[0]), 0.01)
        }
        (WorldProfile::Adversarial, Cell::Strong { class }) => {
            let axis = classes[class].variant_axes[variants[class]];
            noisy(rng, &unit(axis), noise)
        }
        (WorldProfile::Adversarial, Cell::Weak { class }) => {
            let axis = classes[class].variant_axes[variants[class]];
            noisy(rng, &blend(&[(axis, 0.48), (AX_TEXTURE, 0.8)]), noise)
        }
        (WorldProfile::Adversarial, Cell::Background) => {
            // The background resembles whichever variants this image does
            // NOT contain: an absent-subclass detector fires on it.
            let cat_absent = classes[0].variant_axes[1 - variants[0]];
            let dog_absent = classes[1].variant_axes[1 - variants[1]];
            noisy(
                rng,
                &blend(&[
                    (AX_BG, 1.0),
                    (AX_TEXTURE, 0.3),
                    (cat_absent, 0.5),
                    (dog_absent, 0.5),
                ]),
                noise,
            )
        }
    }
}

fn cell_color(cell: Cell) -> [u8; 3] {
    match cell {
        Cell::Background => [112, 112, 112],
        Cell::Strong { class: 0 } => [200, 64, 64],
        Cell::Weak { class: 0 } => [224, 128, 128],
        Cell::Strong { class: _ } => [64, 64, 200],
        Cell::Weak { class: _ } => [128, 128, 224],
    }
}

/// Expand descriptor vectors to a token tensor whose per-channel maximum
/// recovers each vector exactly: token `j` is the vector minus `0.1 * j`
/// from every channel, so later tokens never win a channel.
fn token_tensor(descriptors: &[Vec<f64>]) -> Array3<f64> {
    let n = descriptors.len();
    let mut values = Array3::zeros((n, TOKENS, DIM));
    for (i, desc) in descriptors.iter().enumerate() {
        for j in 0..TOKENS {
            for (c, &v) in desc.iter().enumerate() {
                values[[i, j, c]] = v - 0.1 * j as f64;
            }
        }
    }
    values
}

/// Generate a world under `root` (created if needed): images, masks,
/// precomputed features, subclass sets, class list, split file, and a
/// ready-to-run `config.toml`. Deterministic in `seed`.
pub fn generate(
    profile: WorldProfile,
    images: usize,
    seed: u64,
    root: &Path,
) -> Result<GeneratedWorld> {
    if images == 0 {
        return Err(Error::InvalidParam(
            "a world needs at least one image".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let features_dir = root.join("features");
    let subclass_dir = root.join("subclasses");
    for dir in [&images_dir, &masks_dir, &features_dir, &subclass_dir] {
        std::fs::create_dir_all(dir)?;
    }

    let class_names: Vec<String> = ["background", "cat", "dog"]
        .into_iter()
        .map(String::from)
        .collect();
    let classes = vec![
        build_class(&mut rng, profile, "cat", [AX_CAT_A, AX_CAT_B], AX_CAT_DEAD),
        build_class(&mut rng, profile, "dog", [AX_DOG_A, AX_DOG_B], AX_DOG_DEAD),
    ];

    // Text features: identical under every template (the engineered world is
    // deliberately phrasing-invariant, so template averaging is exercised
    // without perturbing the designed geometry).
    let template_ids: Vec<String> = templates::default_registry()
        .into_iter()
        .map(|t| t.id)
        .collect();
    for class in &classes {
        let mut names = vec![class.name.clone()];
        names.extend(class.subclass_names.iter().cloned());
        let values = token_tensor(&class.descriptors);
        for tid in &template_ids {
            let feats = TokenTextFeatures::<f64> {
                values: values.clone(),
                descriptor_names: names.clone(),
                template_id: tid.clone(),
                valid_tokens: None,
            };
            // Both prompt modes get the same engineered geometry, so
            // prompt-mode sweeps run against generated worlds too.
            for mode in [PromptMode::P1, PromptMode::P2] {
                feats.to_file(&text_feature_path(
                    &features_dir,
                    &class.name,
                    tid,
                    Some(mode),
                ))?;
            }
        }

        let set = SubclassSet {
            superclass: class.name.clone(),
            subclasses: class.subclass_names.clone(),
            n: class.subclass_names.len(),
            prompt_mode: PromptMode::P2,
            model_id: "synthetic-oracle".to_owned(),
            cache_key: subclass::cache_key(
                "synthetic-oracle",
                PromptMode::P2,
                &class.name,
                class.subclass_names.len(),
            ),
        };
        subclass::save_set(&subclass_dir, &set)?;
    }

    // Images, masks, and patch features.
    let cells = layout(profile);
    let mut image_ids = Vec::with_capacity(images);
    for index in 0..images {
        let id = format!("img_{index:03}");
        let variants = [rng.gen_range(0..2usize), rng.gen_range(0..2usize)];

        let mut values = Array2::<f64>::zeros((GRID * GRID, DIM));
        let mut labels = Array2::<u8>::zeros((SIDE, SIDE));
        let mut photo = image::RgbImage::new(SIDE as u32, SIDE as u32);
        for (y, row) in cells.iter().enumerate() {
            for (x, &cell) in row.iter().enumerate() {
                let feat = cell_features(&mut rng, profile, cell, &classes, variants);
                for (c, &v) in feat.iter().enumerate() {
                    values[[y * GRID + x, c]] = v;
                }
                let base = cell_color(cell);
                for py in y * BLOCK..(y + 1) * BLOCK {
                    for px in x * BLOCK..(x + 1) * BLOCK {
                        labels[[py, px]] = cell.label();
                        let jitter = rng.gen_range(-5i16..=5);
                        let color = [
                            (base[0] as i16 + jitter).clamp(0, 255) as u8,
                            (base[1] as i16 + jitter).clamp(0, 255) as u8,
                            (base[2] as i16 + jitter).clamp(0, 255) as u8,
                        ];
                        photo.put_pixel(px as u32, py as u32, image::Rgb(color));
                    }
                }
            }
        }

        let image_path = images_dir.join(format!("{id}.png"));
        photo
            .save(&image_path)
            .map_err(|e| Error::Image(format!("{}: {e}", image_path.display())))?;
        mask::write_label_png(&masks_dir.join(format!("{id}.png")), &labels)?;
        PatchImageFeatures::<f64> {
            values,
            grid: (GRID, GRID),
            source_image_id: id.clone(),
            source_size: (SIDE as u32, SIDE as u32),
        }
        .to_file(&image_feature_path(&features_dir, &id))?;
        image_ids.push(id);
    }

    let class_list_path = root.join("classes.txt");
    std::fs::write(&class_list_path, class_names.join("\n") + "\n")?;
    let split_path = root.join("split.txt");
    std::fs::write(&split_path, image_ids.join("\n") + "\n")?;

    let config = RunConfig {
        images_dir: Some(images_dir),
        masks_dir: Some(masks_dir),
        class_list: Some(class_list_path),
        split: Some(split_path),
        features: FeatureLocation::Dir(features_dir),
        subclass_dir: Some(subclass_dir),
        resize: [SIDE as u32, SIDE as u32],
        mode: SegMode::Full,
        use_crf: false,
        ..RunConfig::default()
    };
    config.validate()?;

    let config_path = root.join("config.toml");
    std::fs::write(&config_path, config.to_toml_string()?)?;

    Ok(GeneratedWorld {
        root: root.to_path_buf(),
        config_path,
        config,
        class_names,
        image_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir =
            std::env::temp_dir().join(format!("synthetic-tests-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn clean_world_writes_a_loadable_dataset() {
        let root = tmp_dir("clean");
        let world = generate(WorldProfile::Clean, 2, 7, &root).unwrap();
        assert_eq!(world.image_ids, ["img_000", "img_001"]);
        assert!(root.join("images/img_000.png").is_file());
        assert!(root.join("masks/img_001.png").is_file());
        assert!(root.join("features/images/img_000.lseg").is_file());
        assert!(root.join("subclasses/cat.json").is_file());

        let back = RunConfig::from_file(&world.config_path).unwrap();
        assert_eq!(back, world.config);

        let set = subclass::load_set(&root.join("subclasses"), "dog")
            .unwrap()
            .unwrap();
        assert_eq!(set.subclasses.len(), 10);
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = tmp_dir("det-a");
        let b = tmp_dir("det-b");
        generate(WorldProfile::Adversarial, 2, 42, &a).unwrap();
        generate(WorldProfile::Adversarial, 2, 42, &b).unwrap();
        for rel in [
            "masks/img_001.png",
            "features/images/img_000.lseg",
            "features/text/cat__T4__p2.lseg",
        ] {
            let x = std::fs::read(a.join(rel)).unwrap();
            let y = std::fs::read(b.join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs between identical seeds");
        }
        let c = tmp_dir("det-c");
        generate(WorldProfile::Adversarial, 2, 43, &c).unwrap();
        let x = std::fs::read(a.join("features/images/img_000.lseg")).unwrap();
        let y = std::fs::read(c.join("features/images/img_000.lseg")).unwrap();
        assert_ne!(x, y, "different seeds produced identical features");
    }

    #[test]
    fn token_maximum_recovers_the_engineered_descriptors() {
        let root = tmp_dir("tokens");
        generate(WorldProfile::Adversarial, 1, 5, &root).unwrap();
        let feats =
            TokenTextFeatures::<f64>::from_file(&root.join("features/text/cat__T1__p2.lseg"))
                .unwrap();
        assert_eq!(feats.values.dim(), (11, TOKENS, DIM));
        let matrix = ensemble::select_text_features(&feats).unwrap();
        // Engineered descriptors are unit vectors; the token construction
        // must hand them back exactly (up to f32 storage).
        for (i, row) in matrix.values.rows().into_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "row {i} has norm {norm}");
        }
    }

    #[test]
    fn adversarial_descriptors_carry_the_designed_traps() {
        let root = tmp_dir("traps");
        generate(WorldProfile::Adversarial, 1, 5, &root).unwrap();
        let feats =
            TokenTextFeatures::<f64>::from_file(&root.join("features/text/cat__T4__p2.lseg"))
                .unwrap();
        let matrix = ensemble::select_text_features(&feats).unwrap();

        // Rows 7..=9 are dead-axis detectors: all their mass on axes >= 10.
        for dead_row in 7..=9 {
            let row = matrix.values.row(dead_row);
            let (argmax, _) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            assert!(
                argmax >= 10,
                "dead detector row {dead_row} peaks at {argmax}"
            );
        }
        // Row 10 is the diffuse detector: background-dominated.
        let diffuse = matrix.values.row(10);
        assert!(diffuse[AX_BG] > 0.7, "diffuse row lost its background mass");
        assert!(diffuse[AX_CAT_A] > 0.1 && diffuse[AX_DOG_B] > 0.1);
        // The superclass row bleeds into background.
        let sup = matrix.values.row(0);
        assert!(sup[AX_BG] > 0.15 && sup[AX_CAT_A] > 0.6 && sup[AX_CAT_B] > 0.6);
    }

    #[test]
    fn masks_follow_the_patch_layout() {
        let root = tmp_dir("masks");
        generate(WorldProfile::Adversarial, 1, 9, &root).unwrap();
        let labels = mask::read_label_png(&root.join("masks/img_000.png")).unwrap();
        assert_eq!(labels.dim(), (SIDE, SIDE));
        // Patch (2, 2) is strong cat, (2, 8) weak cat, (10, 2) strong dog,
        // (0, 0) background; block size is 4.
        assert_eq!(labels[[2 * BLOCK, 2 * BLOCK]], 1);
        assert_eq!(labels[[2 * BLOCK, 8 * BLOCK]], 1);
        assert_eq!(labels[[10 * BLOCK, 2 * BLOCK]], 2);
        assert_eq!(labels[[0, 0]], 0);
        // Weak patches belong to the class in ground truth.
        assert_eq!(labels[[3 * BLOCK, 11 * BLOCK]], 1);
    }
}
