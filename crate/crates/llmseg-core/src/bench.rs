//! Batch evaluation: run the segmenter over a dataset, score predictions
//! against ground-truth masks, and sweep single configuration axes.
//!
//! All outputs are deterministic for a fixed config and dataset: samples are
//! processed in parallel but merged in enumeration order, and every artifact
//! (masks, reports, sweep tables) is a pure function of the inputs.

use std::path::Path;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{self, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::llm::class_slug;
use crate::mask;
use crate::metrics::{ConfusionCounts, SegReport};
use crate::pipeline::Pipeline;
use crate::DefaultScalar;

/// Run the full benchmark described by `config`, writing per-image masks and
/// overlays plus `report.csv`, `report.txt`, `resolved_config.toml`, and
/// `subclasses_used.json` under `out_dir`.
///
/// Predictions are resized (nearest-neighbor) to each ground-truth mask's
/// resolution before scoring, and the saved masks match that resolution.
pub fn run_benchmark(config: &RunConfig, out_dir: &Path) -> Result<SegReport> {
    config.validate()?;
    let class_list = config
        .class_list
        .as_ref()
        .ok_or_else(|| Error::Config("benchmark needs class_list".into()))?;
    let class_names = dataset::read_class_list(class_list)?;
    let images_dir = config
        .images_dir
        .clone()
        .ok_or_else(|| Error::Config("benchmark needs images_dir".into()))?;
    let masks_dir = config
        .masks_dir
        .clone()
        .ok_or_else(|| Error::Config("benchmark needs masks_dir to score against".into()))?;
    let spec = DatasetSpec {
        images_dir,
        masks_dir: Some(masks_dir),
        class_names: class_names.clone(),
        split: config.split.clone(),
    };
    let samples = spec.enumerate()?;

    let pipeline = Pipeline::<DefaultScalar>::prepare(config.clone(), class_names.clone())?;

    std::fs::create_dir_all(out_dir.join("masks"))?;
    std::fs::create_dir_all(out_dir.join("overlays"))?;

    let score = || -> Result<ConfusionCounts> {
        let per_sample: Vec<Result<ConfusionCounts>> = samples
            .par_iter()
            .map(|sample| process_sample(&pipeline, sample, out_dir, class_names.len()))
            .collect();
        // Merge in enumeration order; the merge is commutative, but a fixed
        // order keeps failure reporting stable too.
        let mut counts = ConfusionCounts::new(class_names.len());
        for result in per_sample {
            counts.merge(&result?)?;
        }
        Ok(counts)
    };
    let counts = if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(score)?
    } else {
        score()?
    };

    let report = SegReport::from_counts(counts, class_names, config.config_hash())?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("report.txt"), report.render_table())?;
    std::fs::write(
        out_dir.join("resolved_config.toml"),
        config.to_toml_string()?,
    )?;

    let mut used = serde_json::Map::new();
    for class in pipeline.classes() {
        used.insert(
            class.class_name.clone(),
            serde_json::json!(class.subclass_names()),
        );
    }
    std::fs::write(
        out_dir.join("subclasses_used.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(used))?,
    )?;

    Ok(report)
}

fn process_sample(
    pipeline: &Pipeline<DefaultScalar>,
    sample: &Sample,
    out_dir: &Path,
    num_classes: usize,
) -> Result<ConfusionCounts> {
    let out = pipeline.segment_image(&sample.image_path, &sample.id)?;
    let mask_path = sample.mask_path.as_ref().ok_or_else(|| {
        Error::Dataset(format!("sample {:?} has no ground-truth mask", sample.id))
    })?;
    let gt = mask::read_label_png(mask_path)?;
    let (gt_h, gt_w) = gt.dim();
    let pred = mask::resize_labels_nearest(&out.labels, gt_h, gt_w)?;

    let mut counts = ConfusionCounts::new(num_classes);
    counts.accumulate(&pred.labels, &gt)?;

    mask::write_label_png(
        &out_dir.join("masks").join(format!("{}.png", sample.id)),
        &pred.labels,
    )?;
    mask::write_overlay_png(
        &out_dir.join("overlays").join(format!("{}.png", sample.id)),
        &out.photo,
        &out.labels.labels,
    )?;
    Ok(counts)
}

/// A configuration axis the ablation harness can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Superclass blend weight.
    Lambda,
    /// Subclass count per class.
    NSubclasses,
    /// Single prompt template (each value is one template id).
    Template,
    /// Descriptor combination rule.
    EnsembleMethod,
    /// Subclass prompt phrasing.
    PromptMode,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::NSubclasses => "n_subclasses",
            SweepAxis::Template => "template",
            SweepAxis::EnsembleMethod => "ensemble_method",
            SweepAxis::PromptMode => "prompt_mode",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "n_subclasses" => Ok(SweepAxis::NSubclasses),
            "template" => Ok(SweepAxis::Template),
            "ensemble_method" => Ok(SweepAxis::EnsembleMethod),
            "prompt_mode" => Ok(SweepAxis::PromptMode),
            other => Err(Error::InvalidParam(format!(
                "unknown sweep axis {other:?} (expected lambda, n_subclasses, template, ensemble_method, or prompt_mode)"
            ))),
        }
    }
}

/// One row of a sweep: the axis value it ran at and the scores it reached.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: String,
    pub miou: Option<f64>,
    pub miou_foreground: Option<f64>,
    pub config_hash: String,
}

fn apply_axis(config: &mut RunConfig, axis: SweepAxis, value: &str) -> Result<()> {
    match axis {
        SweepAxis::Lambda => {
            config.ensemble.lambda_super = value.parse().map_err(|_| {
                Error::InvalidParam(format!("lambda value {value:?} is not a number"))
            })?;
        }
        SweepAxis::NSubclasses => {
            config.n_subclasses = value.parse().map_err(|_| {
                Error::InvalidParam(format!("n_subclasses value {value:?} is not a count"))
            })?;
        }
        SweepAxis::Template => config.templates = vec![value.to_owned()],
        SweepAxis::EnsembleMethod => config.ensemble.method = value.parse()?,
        SweepAxis::PromptMode => config.prompt_mode = value.parse()?,
    }
    Ok(())
}

/// Run the benchmark once per `values` entry, varying only `axis`. Each run
/// writes its full artifact set under `out_dir/{axis}_{value}/`, and the
/// collected scores land in `out_dir/sweep.csv` (one row per value, in
/// order).
pub fn ablate(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::InvalidParam("sweep needs at least one value".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for value in values {
        let mut config = base.clone();
        apply_axis(&mut config, axis, value)?;
        config.validate()?;
        let run_dir = out_dir.join(format!("{axis}_{}", class_slug(value)));
        std::fs::create_dir_all(&run_dir)?;
        let report = run_benchmark(&config, &run_dir)?;
        points.push(SweepPoint {
            axis: axis.to_string(),
            value: value.clone(),
            miou: report.miou,
            miou_foreground: report.miou_foreground,
            config_hash: report.config_hash,
        });
    }

    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut csv = String::from("axis,value,miou,miou_foreground,config_hash\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.axis,
            p.value,
            fmt(p.miou),
            fmt(p.miou_foreground),
            p.config_hash
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{self, WorldProfile};
    use std::path::PathBuf;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("bench-tests-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn clean_world_benchmark_scores_near_perfectly() {
        let dir = tmp_dir("clean");
        let world = synthetic::generate(WorldProfile::Clean, 2, 11, &dir.join("world")).unwrap();
        let out = dir.join("out");
        let report = run_benchmark(&world.config, &out).unwrap();

        assert!(report.miou.unwrap() > 0.98, "mIoU {:?}", report.miou);
        for rel in [
            "report.csv",
            "report.txt",
            "resolved_config.toml",
            "subclasses_used.json",
            "masks/img_000.png",
            "overlays/img_001.png",
        ] {
            assert!(out.join(rel).is_file(), "missing {rel}");
        }
        let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
        let last = csv.lines().last().unwrap();
        assert!(last.starts_with("miou,"), "last row is {last:?}");

        let used: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join("subclasses_used.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(used["cat"].as_array().unwrap().len(), 10);
    }

    #[test]
    fn benchmark_is_deterministic_across_worker_counts() {
        let dir = tmp_dir("workers");
        let world = synthetic::generate(WorldProfile::Clean, 2, 13, &dir.join("world")).unwrap();

        let mut serial = world.config.clone();
        serial.workers = 1;
        run_benchmark(&serial, &dir.join("serial")).unwrap();

        let mut parallel = world.config.clone();
        parallel.workers = 4;
        run_benchmark(&parallel, &dir.join("parallel")).unwrap();

        // Worker count is an execution detail: not part of the scored
        // configuration identity, and invisible in every artifact.
        for rel in ["report.csv", "masks/img_000.png", "masks/img_001.png"] {
            let a = std::fs::read(dir.join("serial").join(rel)).unwrap();
            let b = std::fs::read(dir.join("parallel").join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs across worker counts");
        }
    }

    #[test]
    fn lambda_sweep_writes_one_row_per_value() {
        let dir = tmp_dir("sweep");
        let world = synthetic::generate(WorldProfile::Clean, 1, 17, &dir.join("world")).unwrap();
        let values: Vec<String> = ["0.0", "1.0"].into_iter().map(String::from).collect();
        let points = ablate(&world.config, SweepAxis::Lambda, &values, &dir.join("out")).unwrap();

        assert_eq!(points.len(), 2);
        assert!(points.iter().all(|p| p.axis == "lambda"));
        assert_ne!(points[0].config_hash, points[1].config_hash);

        let csv = std::fs::read_to_string(dir.join("out/sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "axis,value,miou,miou_foreground,config_hash");
        assert!(lines[1].starts_with("lambda,0.0,"));
        assert!(lines[2].starts_with("lambda,1.0,"));
        assert!(dir.join("out/lambda_0_0/report.csv").is_file());
        assert!(dir.join("out/lambda_1_0/report.csv").is_file());
    }

    #[test]
    fn prompt_mode_sweep_runs_against_generated_worlds() {
        let dir = tmp_dir("modes");
        let world = synthetic::generate(WorldProfile::Clean, 1, 19, &dir.join("world")).unwrap();
        let values: Vec<String> = ["p1", "p2"].into_iter().map(String::from).collect();
        let points = ablate(
            &world.config,
            SweepAxis::PromptMode,
            &values,
            &dir.join("out"),
        )
        .unwrap();
        assert_eq!(points.len(), 2);
        // The engineered worlds are phrasing-invariant by design.
        assert_eq!(points[0].miou, points[1].miou);
    }

    #[test]
    fn scoring_requires_ground_truth() {
        let dir = tmp_dir("nomasks");
        let world = synthetic::generate(WorldProfile::Clean, 1, 23, &dir.join("world")).unwrap();
        let mut config = world.config.clone();
        config.masks_dir = None;
        let err = run_benchmark(&config, &dir.join("out")).unwrap_err();
        assert!(err.is_config(), "unexpected error {err}");
    }

    #[test]
    fn unknown_axis_values_are_rejected_before_any_run() {
        let dir = tmp_dir("badaxis");
        let world = synthetic::generate(WorldProfile::Clean, 1, 29, &dir.join("world")).unwrap();
        let values = vec!["definitely-not-a-number".to_owned()];
        let err = ablate(&world.config, SweepAxis::Lambda, &values, &dir.join("out")).unwrap_err();
        assert!(matches!(err, Error::InvalidParam(_)));
    }
}
