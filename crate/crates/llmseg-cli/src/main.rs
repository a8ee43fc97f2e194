//! `llmseg` — batch front end for the text-supervised segmentation library:
//! subclass generation, image segmentation, mask scoring, ablation sweeps,
//! and a synthetic-fixture generator for fully offline runs.
//!
//! Exit codes: 0 success, 1 runtime or partial failure, 2 configuration
//! error (clap uses 2 for flag errors too). Service endpoints are read only
//! from the environment: `LLMSEG_API_URL` / `LLMSEG_API_KEY` for the chat
//! model, `LLMSEG_EMBED_URL` for the encoder.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use llmseg_core::bench::{self, SweepAxis};
use llmseg_core::config::{FeatureLocation, RunConfig, SegMode};
use llmseg_core::dataset::{read_class_list, DatasetSpec, Sample};
use llmseg_core::llm::{ChatCompletion, HttpChatClient, PromptRequest};
use llmseg_core::mask;
use llmseg_core::metrics::{ConfusionCounts, SegReport};
use llmseg_core::pipeline::{Pipeline, SegOutput};
use llmseg_core::subclass::{self, GenOptions, PromptMode, SubclassCache};
use llmseg_core::synthetic::{self, WorldProfile};
use llmseg_core::{DefaultScalar, Error};

#[derive(Parser)]
#[command(
    name = "llmseg",
    version,
    about = "Training-free semantic segmentation from text"
)]
struct Cli {
    /// Print the resolved configuration and planned actions, then exit
    /// without touching the filesystem or any service.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ask the language model for subclass names and save them as JSON sets.
    GenSubclasses(GenSubclassesArgs),
    /// Segment images into label and overlay PNGs.
    Segment(SegmentArgs),
    /// Score a directory of predicted masks against ground truth.
    Eval(EvalArgs),
    /// Rerun the benchmark across the values of one swept setting.
    Ablate(AblateArgs),
    /// Render a self-contained synthetic dataset for offline runs.
    MakeFixtures(MakeFixturesArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify_exit(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenSubclasses(args) => cmd_gen_subclasses(args, cli.dry_run),
        Command::Segment(args) => cmd_segment(args, cli.dry_run),
        Command::Eval(args) => cmd_eval(args, cli.dry_run),
        Command::Ablate(args) => cmd_ablate(args, cli.dry_run),
        Command::MakeFixtures(args) => cmd_make_fixtures(args, cli.dry_run),
    }
}

/// Caller mistakes (malformed config, unknown names, missing endpoints) exit
/// with 2; everything else is a runtime failure and exits with 1.
fn classify_exit(err: &anyhow::Error) -> u8 {
    let config = err
        .chain()
        .any(|cause| cause.downcast_ref::<Error>().is_some_and(Error::is_config));
    if config {
        2
    } else {
        1
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => {
            RunConfig::from_file(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

/// Print failures one per line and fold them into an exit code: 2 when every
/// failure is a configuration problem, 1 otherwise.
fn finish_batch(noun: &str, total: usize, failures: Vec<(String, Error)>) -> ExitCode {
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for (id, err) in &failures {
        eprintln!("{noun} {id}: {err}");
    }
    eprintln!("{} of {total} {noun}(s) failed", failures.len());
    let all_config = failures.iter().all(|(_, err)| err.is_config());
    ExitCode::from(if all_config { 2 } else { 1 })
}

// ---------------------------------------------------------------------------
// gen-subclasses

#[derive(Args)]
struct GenSubclassesArgs {
    /// Class to expand; repeat the flag for several.
    #[arg(long = "class", value_name = "NAME")]
    class: Vec<String>,
    /// File of class names, one per line; "background" entries are skipped.
    #[arg(long, value_name = "PATH")]
    class_list: Option<PathBuf>,
    /// Subclasses to request per class.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Prompt flavor: "p1" (bare question) or "p2" (with worked examples).
    #[arg(long, default_value = "p2")]
    prompt: PromptMode,
    /// Directory receiving one `{class}.json` per class.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Run configuration supplying model id, token budget, rate limit, and
    /// cache directory; defaults apply without it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

/// Defers reading `LLMSEG_API_URL` / `LLMSEG_API_KEY` until a request has to
/// leave the process, so fully cached runs need no credentials.
struct LazyEnvClient {
    requests_per_second: f64,
    client: OnceLock<HttpChatClient>,
}

impl LazyEnvClient {
    fn new(requests_per_second: f64) -> Self {
        Self {
            requests_per_second,
            client: OnceLock::new(),
        }
    }
}

impl ChatCompletion for LazyEnvClient {
    fn complete(&self, req: &PromptRequest) -> llmseg_core::Result<String> {
        if self.client.get().is_none() {
            let built = HttpChatClient::from_env()?.with_rate_limit(self.requests_per_second);
            let _ = self.client.set(built);
        }
        self.client
            .get()
            .expect("client was just set")
            .complete(req)
    }
}

fn cmd_gen_subclasses(args: GenSubclassesArgs, dry_run: bool) -> anyhow::Result<ExitCode> {
    let config = load_config(args.config.as_deref())?;
    let mut classes = args.class.clone();
    if let Some(list) = &args.class_list {
        classes.extend(
            read_class_list(list)?
                .into_iter()
                .filter(|name| !name.eq_ignore_ascii_case("background")),
        );
    }
    let mut seen = HashSet::new();
    classes.retain(|name| seen.insert(name.to_lowercase()));
    if classes.is_empty() {
        return Err(Error::Config("no classes given: pass --class or --class-list".into()).into());
    }

    if dry_run {
        print!("{}", config.to_toml_string()?);
        println!(
            "# would ask {} for {} subclasses of {} class(es), writing to {}",
            config.model_id,
            args.n,
            classes.len(),
            args.out.display()
        );
        return Ok(ExitCode::SUCCESS);
    }

    let client = LazyEnvClient::new(config.requests_per_second);
    let cache = SubclassCache::new(config.subclass_cache_dir());
    let options = GenOptions {
        model_id: config.model_id.clone(),
        max_tokens: config.max_tokens,
    };
    let mut failures = Vec::new();
    for name in &classes {
        let generated =
            subclass::generate_subclasses(name, args.n, args.prompt, &client, &cache, &options)
                .and_then(|set| subclass::save_set(&args.out, &set).map(|path| (set, path)));
        match generated {
            Ok((set, path)) => {
                println!(
                    "{name}: {} -> {}",
                    set.subclasses.join(", "),
                    path.display()
                );
            }
            Err(err) => failures.push((name.clone(), err)),
        }
    }
    Ok(finish_batch("class", classes.len(), failures))
}

// ---------------------------------------------------------------------------
// segment

#[derive(Args)]
struct SegmentArgs {
    /// One image file; repeat the flag for several.
    #[arg(long = "image", value_name = "PATH")]
    image: Vec<PathBuf>,
    /// Directory of images (png/jpg/jpeg), processed in sorted id order.
    #[arg(long, value_name = "DIR")]
    images_dir: Option<PathBuf>,
    /// Class list file (background first), overriding the config.
    #[arg(long, value_name = "PATH")]
    classes: Option<PathBuf>,
    /// Feature source, overriding the config: "service" or a directory.
    #[arg(long, value_name = "DIR|service")]
    features: Option<FeatureLocation>,
    /// Superclass mixing weight in [0,1]; 1 scores superclasses alone.
    #[arg(long, value_name = "WEIGHT")]
    lambda: Option<f64>,
    /// Scoring mode: full, superclass_only, subclass_only, or baseline.
    #[arg(long, value_name = "MODE")]
    mode: Option<SegMode>,
    /// Run configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory receiving `{id}.png` labels and `{id}_overlay.png` blends.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

fn cmd_segment(args: SegmentArgs, dry_run: bool) -> anyhow::Result<ExitCode> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(classes) = &args.classes {
        config.class_list = Some(classes.clone());
    }
    if let Some(features) = &args.features {
        config.features = features.clone();
    }
    if let Some(lambda) = args.lambda {
        config.ensemble.lambda_super = lambda;
    }
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    config.validate()?;

    let class_list = config
        .class_list
        .clone()
        .ok_or_else(|| Error::Config("no class list: pass --classes or set class_list".into()))?;
    let class_names = read_class_list(&class_list)?;
    let samples = collect_images(&args, &config)?;

    if dry_run {
        print!("{}", config.to_toml_string()?);
        println!(
            "# would segment {} image(s) over {} classes into {}",
            samples.len(),
            class_names.len(),
            args.out_dir.display()
        );
        return Ok(ExitCode::SUCCESS);
    }

    let pipeline = Pipeline::<DefaultScalar>::prepare(config, class_names)?;
    std::fs::create_dir_all(&args.out_dir)?;

    use rayon::prelude::*;
    let segment = || -> Vec<(&Sample, llmseg_core::Result<SegOutput<DefaultScalar>>)> {
        samples
            .par_iter()
            .map(|sample| {
                (
                    sample,
                    pipeline.segment_image(&sample.image_path, &sample.id),
                )
            })
            .collect()
    };
    let workers = pipeline.config().workers;
    let outputs = if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(segment)
    } else {
        segment()
    };

    let mut failures = Vec::new();
    for (sample, result) in outputs {
        match result.and_then(|out| write_outputs(&args.out_dir, &sample.id, &out)) {
            Ok(label_path) => println!("{} -> {}", sample.id, label_path.display()),
            Err(err) => failures.push((sample.id.clone(), err)),
        }
    }
    Ok(finish_batch("image", samples.len(), failures))
}

/// Explicit `--image` flags plus either `--images-dir` or, when neither flag
/// was given, the config's `images_dir`.
fn collect_images(args: &SegmentArgs, config: &RunConfig) -> anyhow::Result<Vec<Sample>> {
    let mut samples: Vec<Sample> = args
        .image
        .iter()
        .map(|path| {
            if !path.is_file() {
                return Err(Error::Dataset(format!(
                    "image {} does not exist",
                    path.display()
                )));
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_owned)
                .ok_or_else(|| {
                    Error::Dataset(format!("image path {} has no usable stem", path.display()))
                })?;
            Ok(Sample {
                id,
                image_path: path.clone(),
                mask_path: None,
            })
        })
        .collect::<llmseg_core::Result<_>>()?;

    let dir = args.images_dir.clone().or_else(|| {
        if samples.is_empty() {
            config.images_dir.clone()
        } else {
            None
        }
    });
    if let Some(images_dir) = dir {
        let spec = DatasetSpec {
            images_dir,
            masks_dir: None,
            class_names: Vec::new(),
            split: config.split.clone(),
        };
        samples.extend(spec.enumerate()?);
    }
    if samples.is_empty() {
        return Err(Error::Config("no images: pass --image or --images-dir".into()).into());
    }
    Ok(samples)
}

/// Write the label PNG at the source resolution and the overlay at working
/// resolution; returns the label path for progress output.
fn write_outputs(
    out_dir: &Path,
    id: &str,
    out: &SegOutput<DefaultScalar>,
) -> llmseg_core::Result<PathBuf> {
    let (src_w, src_h) = out.source_size;
    let native = mask::resize_labels_nearest(&out.labels, src_h as usize, src_w as usize)?;
    let label_path = out_dir.join(format!("{id}.png"));
    mask::write_label_png(&label_path, &native.labels)?;
    mask::write_overlay_png(
        &out_dir.join(format!("{id}_overlay.png")),
        &out.photo,
        &out.labels.labels,
    )?;
    Ok(label_path)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted label PNGs.
    #[arg(long, value_name = "DIR")]
    pred_dir: PathBuf,
    /// Directory of ground-truth label PNGs (255 marks ignored pixels).
    #[arg(long, value_name = "DIR")]
    gt_dir: PathBuf,
    /// Class list file, background first.
    #[arg(long, value_name = "PATH")]
    classes: PathBuf,
    /// Where the CSV report lands.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn cmd_eval(args: EvalArgs, dry_run: bool) -> anyhow::Result<ExitCode> {
    let class_names = read_class_list(&args.classes)?;
    let pairs = pair_masks(&args.pred_dir, &args.gt_dir)?;
    if dry_run {
        println!(
            "# would score {} mask pair(s) over {} classes into {}",
            pairs.len(),
            class_names.len(),
            args.out.display()
        );
        return Ok(ExitCode::SUCCESS);
    }

    let mut counts = ConfusionCounts::new(class_names.len());
    for (pred_path, gt_path) in &pairs {
        let pred = mask::read_label_png(pred_path)?;
        let gt = mask::read_label_png(gt_path)?;
        counts
            .accumulate(&pred, &gt)
            .with_context(|| format!("scoring {}", pred_path.display()))?;
    }
    let report = SegReport::from_counts(counts, class_names, String::new())?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, report.to_csv())?;
    print!("{}", report.render_table());
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Pair every ground-truth PNG with its same-stem prediction, reporting all
/// missing predictions in one error.
fn pair_masks(pred_dir: &Path, gt_dir: &Path) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    let entries = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::Dataset(format!("ground-truth dir {}: {e}", gt_dir.display())))?;
    let mut stems: Vec<String> = entries
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            if path.extension().and_then(|x| x.to_str())? != "png" {
                return None;
            }
            path.file_stem()?.to_str().map(str::to_owned)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Dataset(format!("no .png masks in {}", gt_dir.display())).into());
    }

    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for stem in &stems {
        let pred = pred_dir.join(format!("{stem}.png"));
        if pred.is_file() {
            pairs.push((pred, gt_dir.join(format!("{stem}.png"))));
        } else {
            missing.push(stem.as_str());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing predictions for {} mask(s): {}",
            missing.len(),
            missing.join(", ")
        ))
        .into());
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Args)]
struct AblateArgs {
    /// Run configuration naming the dataset; every sweep point reruns it.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Axis and values, e.g. "lambda=0,0.2,1" or "ensemble_method=fused,average".
    #[arg(long, value_name = "AXIS=V1,V2,...")]
    sweep: String,
    /// Directory for per-point artifacts and the sweep.csv summary.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

fn cmd_ablate(args: AblateArgs, dry_run: bool) -> anyhow::Result<ExitCode> {
    let config = load_config(Some(&args.config))?;
    let (axis, values) = parse_sweep(&args.sweep)?;
    if dry_run {
        print!("{}", config.to_toml_string()?);
        println!(
            "# would run {} benchmark pass(es) varying {axis} into {}",
            values.len(),
            args.out_dir.display()
        );
        return Ok(ExitCode::SUCCESS);
    }

    let points = bench::ablate(&config, axis, &values, &args.out_dir)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for point in &points {
        println!(
            "{}={}: miou {} (foreground {})",
            point.axis,
            point.value,
            fmt(point.miou),
            fmt(point.miou_foreground)
        );
    }
    println!("wrote {}", args.out_dir.join("sweep.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn parse_sweep(spec: &str) -> anyhow::Result<(SweepAxis, Vec<String>)> {
    let (axis, values) = spec.split_once('=').ok_or_else(|| {
        Error::InvalidParam(format!("sweep {spec:?} is not of the form axis=v1,v2,..."))
    })?;
    let axis: SweepAxis = axis.trim().parse()?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_owned)
        .collect();
    if values.is_empty() {
        return Err(Error::InvalidParam("sweep needs at least one value".into()).into());
    }
    Ok((axis, values))
}

// ---------------------------------------------------------------------------
// make-fixtures

#[derive(Args)]
struct MakeFixturesArgs {
    /// World flavor: "clean" separates easily; "adversarial" plants
    /// descriptor traps that pull the fusion rules apart.
    #[arg(long, default_value = "clean")]
    profile: WorldProfile,
    /// Images to render.
    #[arg(long, default_value_t = 4)]
    images: usize,
    /// RNG seed; equal seeds give byte-identical worlds.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Root directory for the dataset.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn cmd_make_fixtures(args: MakeFixturesArgs, dry_run: bool) -> anyhow::Result<ExitCode> {
    if dry_run {
        println!(
            "# would render {} {} image(s) with seed {} into {}",
            args.images,
            args.profile,
            args.seed,
            args.out.display()
        );
        return Ok(ExitCode::SUCCESS);
    }
    let world = synthetic::generate(args.profile, args.images, args.seed, &args.out)?;
    println!(
        "{} world with {} image(s) at {}",
        args.profile,
        world.image_ids.len(),
        world.root.display()
    );
    println!("config: {}", world.config_path.display());
    Ok(ExitCode::SUCCESS)
}
