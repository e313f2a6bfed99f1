//! Subcommand implementations and config resolution.
//!
//! Settings resolve in three layers: built-in defaults (or the chosen
//! preset), then the matching section of the `--config` JSON file merged
//! key-by-key on top, then explicit command-line flags on top of that.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use aedm_core::dataset::{
    chips_from_records, make_chips, read_manifest, split_chipset, write_manifest, Chip, ChipSet,
    Role, Scene,
};
use aedm_core::geo::{
    damage_class_rule, parse_geojson, rasterize_features, read_image_png, read_mask_png,
    world_file_path, write_mask_png,
};
use aedm_core::infer::{effort_report, export_geojson, extract_instances, tiled_inference};
use aedm_core::net::{build_model, load_weights, read_weights_config, save_weights, ModelConfig};
use aedm_core::parallel;
use aedm_core::synth::{domain_preset, generate_scene, write_scene_artifacts, SynthConfig};
use aedm_core::train::{evaluate, finetune, train, Metrics, TrainConfig};

use crate::manifest::RunRecorder;
use crate::{
    ChipsArgs, Cli, Command, EvalArgs, FinetuneArgs, InferArgs, RasterizeArgs, ReportArgs,
    SynthArgs, TrainArgs,
};

/// Optional sections of the `--config` file. Each section overrides the
/// defaults of the matching subcommand; unknown top-level keys are
/// rejected so typos fail loudly.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    synth: Option<serde_json::Value>,
    model: Option<serde_json::Value>,
    train: Option<serde_json::Value>,
    chips: Option<ChipsFileConfig>,
    infer: Option<InferFileConfig>,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ChipsFileConfig {
    chip_size: Option<usize>,
    stride: Option<usize>,
    min_foreground: Option<f64>,
    val_fraction: Option<f64>,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferFileConfig {
    chip_size: Option<usize>,
    stride: Option<usize>,
    min_area: Option<usize>,
}

pub(crate) fn run(cli: Cli) -> Result<()> {
    let file_cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            serde_json::from_str::<FileConfig>(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file_cfg.seed);
    parallel::set_threads(cli.threads.or(file_cfg.threads).unwrap_or(1));

    match &cli.command {
        Command::Synth(args) => cmd_synth(args, &file_cfg, seed),
        Command::Rasterize(args) => cmd_rasterize(args),
        Command::Chips(args) => cmd_chips(args, &file_cfg, seed),
        Command::Train(args) => cmd_train(args, &file_cfg, seed),
        Command::Finetune(args) => cmd_finetune(args, &file_cfg, seed),
        Command::Infer(args) => cmd_infer(args, &file_cfg),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_synth(args: &SynthArgs, file_cfg: &FileConfig, seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let mut cfg: SynthConfig = with_overrides(domain_preset(&args.preset)?, &file_cfg.synth)
        .context("config section \"synth\"")?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n_intact {
        cfg.n_intact = n;
    }
    if let Some(n) = args.n_damaged {
        cfg.n_damaged = n;
    }
    if let Some(w) = args.width {
        cfg.width = w;
    }
    if let Some(h) = args.height {
        cfg.height = h;
    }
    if let Some(name) = &args.name {
        cfg.name = name.clone();
    }

    let (scene, features) = generate_scene(&cfg)?;
    let paths = write_scene_artifacts(&scene, &features, &args.out)?;

    let mut rec = RunRecorder::new("synth", serde_json::to_value(&cfg)?, cfg.seed);
    for path in paths.all() {
        rec.output(path);
    }
    for image in [&paths.pre, &paths.post, &paths.mask] {
        rec.output(&world_file_path(image));
    }
    rec.finish(&args.out, started.elapsed())?;

    println!(
        "{}",
        json!({
            "scene": cfg.name,
            "out": args.out.display().to_string(),
            "intact": cfg.n_intact,
            "damaged": cfg.n_damaged,
        })
    );
    Ok(())
}

fn cmd_rasterize(args: &RasterizeArgs) -> Result<()> {
    let started = Instant::now();
    let (reference, gt) = read_image_png(&args.like)?;
    let text = fs::read_to_string(&args.labels)
        .with_context(|| format!("reading labels {}", args.labels.display()))?;
    let parsed = parse_geojson(&text)
        .with_context(|| format!("parsing labels {}", args.labels.display()))?;
    let outcome = rasterize_features(
        &parsed.collection,
        &gt,
        reference.height(),
        reference.width(),
        damage_class_rule,
    )?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let mask_path = args.out.join("mask.png");
    write_mask_png(&mask_path, &outcome.mask, &gt)?;

    let mut rec = RunRecorder::new(
        "rasterize",
        json!({
            "labels": args.labels.display().to_string(),
            "like": args.like.display().to_string(),
        }),
        0,
    );
    rec.input(&args.labels);
    rec.input(&args.like);
    rec.output(&mask_path);
    rec.output(&world_file_path(&mask_path));
    rec.finish(&args.out, started.elapsed())?;

    println!(
        "{}",
        json!({
            "mask": mask_path.display().to_string(),
            "features": parsed.collection.features.len(),
            "skipped_nonpolygonal": parsed.skipped,
            "skipped_out_of_bounds": outcome.skipped,
        })
    );
    Ok(())
}

fn cmd_chips(args: &ChipsArgs, file_cfg: &FileConfig, seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let section = file_cfg.chips.unwrap_or_default();
    let chip_size = args.chip_size.or(section.chip_size).unwrap_or(64);
    let stride = args.stride.or(section.stride).unwrap_or(chip_size);
    let min_foreground = args.min_foreground.or(section.min_foreground).unwrap_or(0.01);
    let val_fraction = args.val_fraction.or(section.val_fraction).unwrap_or(0.2);
    let seed = seed.unwrap_or(0);

    let scenes = load_scenes(&args.scenes)?;
    let mut chips: Vec<Chip> = Vec::new();
    for scene in &scenes {
        chips.extend(make_chips(scene, chip_size, stride, min_foreground)?.chips);
    }
    ensure!(
        !chips.is_empty(),
        "no chips passed the min_foreground {min_foreground} filter; lower it or check the masks"
    );

    let sets: Vec<ChipSet> = if val_fraction > 0.0 {
        let (train_cs, val_cs) = split_chipset(&ChipSet::new(chips, Role::Train), val_fraction, seed)?;
        vec![train_cs, val_cs]
    } else {
        vec![ChipSet::new(chips, Role::Train)]
    };

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let manifest_path = args.out.join("chips.jsonl");
    write_manifest(&sets.iter().collect::<Vec<_>>(), &manifest_path)?;

    let mut rec = RunRecorder::new(
        "chips",
        json!({
            "chip_size": chip_size,
            "stride": stride,
            "min_foreground": min_foreground,
            "val_fraction": val_fraction,
        }),
        seed,
    );
    for dir in &args.scenes {
        rec.input(dir);
    }
    rec.output(&manifest_path);
    rec.finish(&args.out, started.elapsed())?;

    let counts: serde_json::Map<String, serde_json::Value> = sets
        .iter()
        .map(|cs| (format!("{:?}", cs.role).to_lowercase(), cs.len().into()))
        .collect();
    println!("{}", serde_json::Value::Object(counts));
    Ok(())
}

fn cmd_train(args: &TrainArgs, file_cfg: &FileConfig, seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let mut model_cfg: ModelConfig = with_overrides(ModelConfig::default(), &file_cfg.model)
        .context("config section \"model\"")?;
    if let Some(depth) = args.depth {
        model_cfg.depth = depth;
    }
    if let Some(base) = args.base_channels {
        model_cfg.base_channels = base;
    }
    let mut train_cfg: TrainConfig = with_overrides(TrainConfig::default(), &file_cfg.train)
        .context("config section \"train\"")?;
    apply_train_flags(&mut train_cfg, args.epochs, args.batch_size, args.learning_rate);
    if let Some(seed) = seed {
        model_cfg.seed = seed;
        train_cfg.seed = seed;
    }

    let sets = load_chip_sets(&args.chips, &args.scenes)?;
    let train_cs = chip_set(&sets, Role::Train, &args.chips)?;
    let val_cs = chip_set(&sets, Role::Val, &args.chips)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let weights_path = args.out.join("weights.aedm");
    train_cfg.checkpoint_path = Some(weights_path.clone());

    let model = build_model(&model_cfg)?;
    let (model, history) = train(model, train_cs, val_cs, &train_cfg)?;
    save_weights(&model, &weights_path)?;
    let history_path = args.out.join("history.csv");
    fs::write(&history_path, history.to_csv())
        .with_context(|| format!("writing {}", history_path.display()))?;

    let metrics = evaluate(&model, val_cs)?;
    finish_fit_run(
        "train",
        &model_cfg,
        &train_cfg,
        args,
        &weights_path,
        &history_path,
        &metrics,
        started,
    )
}

fn cmd_finetune(args: &FinetuneArgs, file_cfg: &FileConfig, seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let model_cfg = read_weights_config(&args.weights)?;
    let model = load_weights(&args.weights, &model_cfg)?;

    let mut train_cfg: TrainConfig =
        with_overrides(TrainConfig::finetune_default(), &file_cfg.train)
            .context("config section \"train\"")?;
    apply_train_flags(&mut train_cfg, args.epochs, args.batch_size, args.learning_rate);
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }

    // Fresh markup is too small to split; every chip in the manifest,
    // whatever its recorded role, joins the adaptation set.
    let sets = load_chip_sets(&args.chips, &args.scenes)?;
    let chips: Vec<Chip> = sets.into_iter().flat_map(|cs| cs.chips).collect();
    let small_cs = ChipSet::new(chips, Role::Train);

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let weights_path = args.out.join("weights.aedm");
    train_cfg.checkpoint_path = Some(weights_path.clone());

    let (model, history) = finetune(model, &small_cs, &train_cfg, args.freeze_encoders)?;
    save_weights(&model, &weights_path)?;
    let history_path = args.out.join("history.csv");
    fs::write(&history_path, history.to_csv())
        .with_context(|| format!("writing {}", history_path.display()))?;

    let metrics = evaluate(&model, &small_cs)?;
    let mut rec = RunRecorder::new(
        "finetune",
        json!({
            "model": model_cfg,
            "train": train_cfg,
            "freeze_encoders": args.freeze_encoders,
        }),
        train_cfg.seed,
    );
    rec.input(&args.weights);
    rec.input(&args.chips);
    for dir in &args.scenes {
        rec.input(dir);
    }
    rec.output(&weights_path);
    rec.output(&history_path);
    rec.finish(&args.out, started.elapsed())?;

    println!(
        "{}",
        json!({
            "weights": weights_path.display().to_string(),
            "f1_damaged": metrics.f1(2),
            "f1_intact": metrics.f1(1),
        })
    );
    Ok(())
}

fn cmd_infer(args: &InferArgs, file_cfg: &FileConfig) -> Result<()> {
    let started = Instant::now();
    let section = file_cfg.infer.unwrap_or_default();
    let chip_size = args.chip_size.or(section.chip_size).unwrap_or(64);
    let stride = args.stride.or(section.stride).unwrap_or((chip_size / 2).max(1));
    let min_area = args.min_area.or(section.min_area).unwrap_or(8);

    let model_cfg = read_weights_config(&args.weights)?;
    let model = load_weights(&args.weights, &model_cfg)?;
    let scene = load_scene(&args.scene)?;

    let output = tiled_inference(&model, &scene, chip_size, stride)?;
    let report = extract_instances(&output.mask, &scene.gt, min_area);

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let mask_path = args.out.join("mask.png");
    write_mask_png(&mask_path, &output.mask, &scene.gt)?;
    let instances_path = args.out.join("instances.geojson");
    export_geojson(&report, &instances_path)?;

    let mut rec = RunRecorder::new(
        "infer",
        json!({
            "model": model_cfg,
            "chip_size": chip_size,
            "stride": stride,
            "min_area": min_area,
        }),
        0,
    );
    rec.input(&args.weights);
    rec.input(&args.scene);
    rec.output(&mask_path);
    rec.output(&world_file_path(&mask_path));
    rec.output(&instances_path);
    rec.finish(&args.out, started.elapsed())?;

    println!(
        "{}",
        json!({
            "damaged_count": report.damaged_count,
            "intact_count": report.intact_count,
            "instances": instances_path.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (pred, _) = read_mask_png(&args.pred)?;
    let (truth, _) = read_mask_png(&args.truth)?;
    ensure!(
        pred.height() == truth.height() && pred.width() == truth.width(),
        "mask sizes differ: predicted {}x{}, truth {}x{}",
        pred.width(),
        pred.height(),
        truth.width(),
        truth.height()
    );

    let mut metrics = Metrics::default();
    for row in 0..truth.height() {
        for col in 0..truth.width() {
            metrics.record(truth.get(col, row), pred.get(col, row));
        }
    }
    let doc = metrics_json(&metrics);

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let metrics_path = args.out.join("metrics.json");
    fs::write(&metrics_path, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("writing {}", metrics_path.display()))?;

    let mut rec = RunRecorder::new(
        "eval",
        json!({
            "pred": args.pred.display().to_string(),
            "truth": args.truth.display().to_string(),
        }),
        0,
    );
    rec.input(&args.pred);
    rec.input(&args.truth);
    rec.output(&metrics_path);
    rec.finish(&args.out, started.elapsed())?;

    println!("{doc}");
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let started = Instant::now();
    ensure!(
        args.rate >= 0.0 && args.pipeline_seconds >= 0.0,
        "rate and pipeline seconds must be non-negative"
    );
    let report = effort_report(args.features, args.rate, args.pipeline_seconds);

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let report_path = args.out.join("effort_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;

    let mut rec = RunRecorder::new(
        "report",
        json!({
            "features": args.features,
            "rate": args.rate,
            "pipeline_seconds": args.pipeline_seconds,
        }),
        0,
    );
    rec.output(&report_path);
    rec.finish(&args.out, started.elapsed())?;

    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// Serializes `base`, deep-merges the JSON `section` over it (objects merge
/// key-by-key, everything else replaces), and deserializes back. Partial
/// sections therefore override only the keys they mention.
fn with_overrides<T>(base: T, section: &Option<serde_json::Value>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let Some(section) = section else {
        return Ok(base);
    };
    let mut value = serde_json::to_value(&base)?;
    merge_json(&mut value, section);
    serde_json::from_value(value).map_err(|e| anyhow!("{e}"))
}

fn merge_json(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(base), serde_json::Value::Object(over)) => {
            for (key, value) in over {
                match base.get_mut(key) {
                    Some(slot) => merge_json(slot, value),
                    None => {
                        base.insert(key.clone(), value.clone());
                    }
                }
            }
        }
        (slot, value) => *slot = value.clone(),
    }
}

fn apply_train_flags(
    cfg: &mut TrainConfig,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f32>,
) {
    if let Some(epochs) = epochs {
        cfg.epochs = epochs;
    }
    if let Some(batch_size) = batch_size {
        cfg.batch_size = batch_size;
    }
    if let Some(lr) = learning_rate {
        cfg.learning_rate = lr;
    }
}

/// Loads a scene directory written by `synth` (or assembled by hand from
/// `pre.png`, `post.png`, `mask.png` plus world files). The scene name is
/// the directory basename, so chip manifests and later runs agree on it.
fn load_scene(dir: &Path) -> Result<Scene> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| anyhow!("scene directory {} has no usable basename", dir.display()))?
        .to_string();
    let (pre, gt) = read_image_png(&dir.join("pre.png"))?;
    let (post, gt_post) = read_image_png(&dir.join("post.png"))?;
    let (mask, gt_mask) = read_mask_png(&dir.join("mask.png"))?;
    ensure!(
        gt == gt_post && gt == gt_mask,
        "world files under {} disagree; re-export the scene",
        dir.display()
    );
    Ok(Scene::new(name, pre, post, mask, gt)?)
}

fn load_scenes(dirs: &[PathBuf]) -> Result<Vec<Scene>> {
    let mut seen = BTreeSet::new();
    let mut scenes = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let scene = load_scene(dir)?;
        ensure!(
            seen.insert(scene.name.clone()),
            "two scene directories share the basename {:?}; rename one",
            scene.name
        );
        scenes.push(scene);
    }
    Ok(scenes)
}

fn load_chip_sets(manifest: &Path, scene_dirs: &[PathBuf]) -> Result<Vec<ChipSet>> {
    let records = read_manifest(manifest)?;
    let scenes = load_scenes(scene_dirs)?;
    Ok(chips_from_records(&records, &scenes)?)
}

fn chip_set<'a>(sets: &'a [ChipSet], role: Role, manifest: &Path) -> Result<&'a ChipSet> {
    sets.iter().find(|cs| cs.role == role).ok_or_else(|| {
        anyhow!(
            "manifest {} has no {:?} chips; rebuild it with a positive val fraction",
            manifest.display(),
            role
        )
    })
}

fn metrics_json(metrics: &Metrics) -> serde_json::Value {
    let class = |c: u8| {
        json!({
            "precision": metrics.precision(c),
            "recall": metrics.recall(c),
            "f1": metrics.f1(c),
            "iou": metrics.iou(c),
        })
    };
    json!({
        "accuracy": metrics.accuracy(),
        "classes": {
            "background": class(0),
            "intact": class(1),
            "damaged": class(2),
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_fit_run(
    subcommand: &str,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    args: &TrainArgs,
    weights_path: &Path,
    history_path: &Path,
    metrics: &Metrics,
    started: Instant,
) -> Result<()> {
    let mut rec = RunRecorder::new(
        subcommand,
        json!({ "model": model_cfg, "train": train_cfg }),
        train_cfg.seed,
    );
    rec.input(&args.chips);
    for dir in &args.scenes {
        rec.input(dir);
    }
    rec.output(weights_path);
    rec.output(history_path);
    rec.finish(&args.out, started.elapsed())?;

    println!(
        "{}",
        json!({
            "weights": weights_path.display().to_string(),
            "val_f1_damaged": metrics.f1(2),
            "val_f1_intact": metrics.f1(1),
        })
    );
    Ok(())
}
