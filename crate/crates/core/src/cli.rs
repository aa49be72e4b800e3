//! Command-line entry point: synth -> patchify -> train-sv -> train-mv ->
//! eval / export-features, plus manifest validation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error (with a
//! machine-readable JSON report on stderr).

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data_model::{load_manifest, validate_manifest, ClassSet, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_suite, export_features_multi_view, export_features_single_view,
};
use crate::nets::{
    build_backbone, build_head, checkpoint, BackboneConfig, BackboneFamily, FusionStrategy,
    HeadConfig, MultiViewModel, SingleViewModel,
};
use crate::numeric::Scalar;
use crate::patch_pipeline::{
    augment_patch, balance_classes, extract_patches, load_image, load_patch_store,
    split_train_test, write_patch_store, Patch, PatchStore, PipelineConfig,
};
use crate::seed::derive_seed;
use crate::synth::{generate_synthetic, SynthMode, SynthSpec};
use crate::training::{
    build_multiview, freeze_features, pair_views, train_multiview, train_single_view,
    PairingPolicy, PatchDataset, TrainConfig, TrainHistory,
};

/// Numeric precision of models and training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Training section of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: Option<u64>,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: None,
            learning_rate: 2e-4,
            batch_size: 64,
            seed: None,
            shuffle: true,
        }
    }
}

/// The merged run configuration: config-file values overridden by flags.
/// Every stochastic step's seed is either given explicitly or derived from
/// `master_seed` by a fixed keyed hash of the step name; resolved seeds are
/// recorded in each stage's metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub precision: Precision,
    pub pipeline: PipelineConfig,
    pub backbone: Option<BackboneFamily>,
    pub train_sv: TrainSection,
    pub train_mv: TrainSection,
    pub fusion: Option<FusionStrategy>,
    pub pairing: Option<PairingPolicy>,
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            precision: Precision::default(),
            pipeline: PipelineConfig::default(),
            backbone: None,
            train_sv: TrainSection::default(),
            train_mv: TrainSection::default(),
            fusion: None,
            pairing: None,
            val_fraction: 0.1,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(path) => {
                let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok(serde_json::from_str(&body)?)
            }
        }
    }

    /// Stage seed: explicit flag, then config section, then derivation from
    /// the master seed.
    fn stage_seed(&self, flag: Option<u64>, section: Option<u64>, stage: &str) -> u64 {
        flag.or(section)
            .unwrap_or_else(|| derive_seed(self.master_seed, stage))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mvfuse",
    version = crate::TOOLKIT_VERSION,
    about = "Two-view late-fusion CNN toolkit: patch pipelines, frozen-branch multi-view training, per-class evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural two-view dataset with a manifest.
    Synth(SynthArgs),
    /// Check a manifest against the data-model invariants.
    Validate(ValidateArgs),
    /// Build a balanced, split, augmented patch store from a manifest.
    Patchify(PatchifyArgs),
    /// Pretrain the single-view backbone on mixed surface+section patches.
    TrainSv(TrainSvArgs),
    /// Train fusion and classifier layers over paired views on frozen branches.
    TrainMv(TrainMvArgs),
    /// Evaluate checkpoints on the test split and write a metrics report.
    Eval(EvalArgs),
    /// Export feature vectors for external embedding visualization.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    specimens: usize,
    #[arg(long, default_value = "texture")]
    mode: String,
    #[arg(long, default_value_t = 96)]
    image_size: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Output directory; defaults to runs/synth-<timestamp>-<digest>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Also check that every image file is readable.
    #[arg(long)]
    check_files: bool,
}

#[derive(Debug, Args)]
struct PatchifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; defaults to runs/patchify-<timestamp>-<digest>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run-config JSON; flags below override its pipeline section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patches_per_image: Option<usize>,
    /// Balancing target per (class, view) group.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Augmented variants per training patch.
    #[arg(long)]
    variants: Option<usize>,
    /// Keep each specimen wholly on one split side.
    #[arg(long)]
    leak_free: bool,
    /// Worker threads for image loading and cropping.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct TrainSvArgs {
    #[arg(long)]
    patches: PathBuf,
    /// Backbone family: mini, alexnet_like or vgg16_like (default mini).
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Output directory; defaults to runs/train-sv-<timestamp>-<digest>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    precision: Option<String>,
    /// Fraction of the training split held out for per-epoch validation.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Also save the best-validation-accuracy epoch as best.ckpt.
    #[arg(long)]
    save_best: bool,
}

#[derive(Debug, Args)]
struct TrainMvArgs {
    #[arg(long)]
    patches: PathBuf,
    /// Frozen single-view checkpoint from train-sv.
    #[arg(long)]
    sv_checkpoint: Option<PathBuf>,
    /// Fusion strategy: maxpool or concat (default maxpool).
    #[arg(long)]
    fusion: Option<String>,
    /// Pairing policy: specimen_first or class_random (default specimen_first).
    #[arg(long)]
    pairing: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Output directory; defaults to runs/train-mv-<timestamp>-<digest>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-draw view pairs at the start of every epoch.
    #[arg(long)]
    repair_each_epoch: bool,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    save_best: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint(s) to evaluate; repeat for a combined table.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    report_out: PathBuf,
    #[arg(long, default_value = "specimen_first")]
    pairing: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which split to export: train or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "specimen_first")]
    pairing: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
}

/// Runs the CLI on `argv` (including the program name), returning the
/// process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are successes, anything else is usage.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Patchify(args) => cmd_patchify(args),
        Command::TrainSv(args) => cmd_train_sv(args),
        Command::TrainMv(args) => cmd_train_mv(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportFeatures(args) => cmd_export(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let report = serde_json::json!({
                "error": err.to_string(),
                "kind": error_kind(&err),
            });
            eprintln!("{report}");
            2
        }
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Io { .. } => "io",
        Error::Manifest { .. } => "manifest",
        Error::ManifestVersion { .. } => "manifest_version",
        Error::Image { .. } => "image",
        Error::Config(_) => "config",
        Error::Shape { .. } => "shape",
        Error::Stratum { .. } => "stratum",
        Error::Pairing(_) => "pairing",
        Error::Train(_) => "train",
        Error::Checkpoint { .. } => "checkpoint",
        Error::Eval(_) => "eval",
        Error::Json(_) => "json",
    }
}

#[derive(Serialize)]
struct StageSnapshot<'a> {
    toolkit_version: &'a str,
    stage: &'a str,
    resolved_seed: u64,
    config: &'a RunConfig,
}

fn write_stage_snapshot(dir: &Path, stage: &str, seed: u64, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let snapshot = StageSnapshot {
        toolkit_version: crate::TOOLKIT_VERSION,
        stage,
        resolved_seed: seed,
        config,
    };
    let path = dir.join("config.json");
    let mut body = serde_json::to_vec_pretty(&snapshot)?;
    body.push(b'\n');
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Explicit --out wins; otherwise a fresh run directory named by timestamp
/// plus a digest of the resolved configuration.
fn resolve_out_dir(out: Option<PathBuf>, stage: &str, config: &RunConfig, seed: u64) -> Result<PathBuf> {
    if let Some(dir) = out {
        return Ok(dir);
    }
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut snapshot = serde_json::to_vec(config)?;
    snapshot.extend_from_slice(&seed.to_le_bytes());
    let digest = crc32fast::hash(&snapshot);
    Ok(PathBuf::from(format!("runs/{stage}-{stamp}-{digest:08x}")))
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let mut config = RunConfig::load(None)?;
    if let Some(master) = args.master_seed {
        config.master_seed = master;
    }
    let seed = config.stage_seed(args.seed, None, "synth");
    let out = resolve_out_dir(args.out, "synth", &config, seed)?;
    let spec = SynthSpec {
        classes: args.classes,
        specimens_per_class: args.specimens,
        image_size: args.image_size,
        mode: SynthMode::from_str(&args.mode)?,
        seed,
    };
    let manifest = generate_synthetic(&spec, &out)?;
    write_stage_snapshot(&out, "synth", seed, &config)?;
    println!(
        "wrote {} images over {} classes to {}",
        manifest.records.len(),
        manifest.class_set.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_validate(args: ValidateArgs) -> Result<i32> {
    let manifest = load_manifest(&args.manifest)?;
    // File checks run against paths resolved relative to the manifest.
    let resolved = resolve_manifest_paths(manifest, &args.manifest);
    let violations = validate_manifest(&resolved, args.check_files);
    println!("{} violations", violations.len());
    for violation in &violations {
        println!("  {violation}");
    }
    if violations.is_empty() {
        Ok(0)
    } else {
        let report = serde_json::json!({
            "error": format!("{} manifest violations", violations.len()),
            "kind": "validation",
            "violations": violations,
        });
        eprintln!("{report}");
        Ok(2)
    }
}

/// Manifest image paths are interpreted relative to the manifest file.
fn resolve_manifest_paths(mut manifest: DatasetManifest, manifest_path: &Path) -> DatasetManifest {
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    for record in &mut manifest.records {
        if record.path.is_relative() {
            record.path = base.join(&record.path);
        }
    }
    manifest
}

fn merged_pipeline_config(args: &PatchifyArgs, config: &mut RunConfig) -> Result<()> {
    if let Some(master) = args.master_seed {
        config.master_seed = master;
    }
    let p = &mut config.pipeline;
    if let Some(v) = args.patch_size {
        p.patch_size = v;
    }
    if let Some(v) = args.patches_per_image {
        p.patches_per_image = v;
    }
    if let Some(v) = args.target {
        p.target_per_class_per_view = v;
    }
    if let Some(v) = args.test_fraction {
        p.test_fraction = v;
    }
    if let Some(v) = args.variants {
        p.augmentation_variants = v;
    }
    if args.leak_free {
        p.leak_free_split = true;
    }
    p.validate()
}

fn cmd_patchify(args: PatchifyArgs) -> Result<i32> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    merged_pipeline_config(&args, &mut config)?;
    let seed = config.stage_seed(args.seed, Some(config.pipeline.seed).filter(|&s| s != 0), "patchify");
    config.pipeline.seed = seed;

    let manifest = load_manifest(&args.manifest)?;
    let manifest = resolve_manifest_paths(manifest, &args.manifest);
    let violations = validate_manifest(&manifest, false);
    if !violations.is_empty() {
        return Err(Error::Config(format!(
            "manifest has {} violations; run `validate` for details",
            violations.len()
        )));
    }
    if manifest.records.is_empty() {
        return Err(Error::Config("manifest has no records".into()));
    }

    let out = resolve_out_dir(args.out.clone(), "patchify", &config, seed)?;
    let pipeline = config.pipeline.clone();
    let (all_patches, warnings) = extract_all(&manifest, &pipeline, seed, args.jobs.max(1))?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }

    let (balanced, deficits) =
        balance_classes(all_patches, pipeline.target_per_class_per_view, seed);
    for deficit in &deficits {
        eprintln!(
            "warning: {}/{} is {} patches short of the target",
            deficit.class, deficit.view, deficit.missing
        );
    }

    let split = split_train_test(
        balanced,
        pipeline.test_fraction,
        seed,
        pipeline.leak_free_split,
    )?;
    for deviation in &split.deviations {
        eprintln!(
            "warning: stratum {}/{} test size {} (requested {}) under leak-free splitting",
            deviation.class, deviation.view, deviation.actual_test, deviation.requested_test
        );
    }

    // Split first, then augment only the training side.
    let mut rows: Vec<(Patch, Split)> = Vec::new();
    for patch in &split.train {
        for variant in augment_patch(patch, pipeline.augmentation_variants, seed) {
            rows.push((variant, Split::Train));
        }
    }
    let n_augmented = rows.len();
    for patch in split.train {
        rows.push((patch, Split::Train));
    }
    let n_train = rows.len();
    for patch in split.test {
        rows.push((patch, Split::Test));
    }
    let n_test = rows.len() - n_train;
    rows.sort_by(|a, b| a.0.patch_id.cmp(&b.0.patch_id));

    write_patch_store(&out, &rows, &pipeline, &manifest.class_set, seed)?;
    write_stage_snapshot(&out, "patchify", seed, &config)?;
    println!(
        "patch store at {}: {} train ({} augmented) / {} test",
        out.display(),
        n_train,
        n_augmented,
        n_test
    );
    Ok(0)
}

/// Extracts patches from every manifest image, fanning out across `jobs`
/// worker threads. Results are deterministic regardless of scheduling:
/// extraction is keyed by (seed, image_id) and reassembled in record order.
fn extract_all(
    manifest: &DatasetManifest,
    pipeline: &PipelineConfig,
    seed: u64,
    jobs: usize,
) -> Result<(Vec<Patch>, Vec<String>)> {
    type ExtractOutcome = Result<(Vec<Patch>, Option<String>)>;
    let records = &manifest.records;
    let results: Mutex<Vec<(usize, ExtractOutcome)>> =
        Mutex::new(Vec::with_capacity(records.len()));
    let next: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(records.len()).max(1) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= records.len() {
                    break;
                }
                let record = &records[idx];
                let outcome = load_image(&record.path).and_then(|image| {
                    extract_patches(&image, record, pipeline, seed)
                        .map(|report| (report.patches, report.warning))
                });
                results.lock().unwrap().push((idx, outcome));
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(idx, _)| *idx);
    let mut patches = Vec::new();
    let mut warnings = Vec::new();
    for (_, outcome) in results {
        let (mut extracted, warning) = outcome?;
        patches.append(&mut extracted);
        warnings.extend(warning);
    }
    Ok((patches, warnings))
}

fn train_section_config(
    section: &TrainSection,
    epochs_flag: Option<usize>,
    lr_flag: Option<f64>,
    batch_flag: Option<usize>,
    seed: u64,
    stage: &str,
) -> Result<TrainConfig> {
    let epochs = epochs_flag.or(section.epochs).ok_or_else(|| {
        Error::Config(format!(
            "{stage}: epoch count is required (set --epochs or the config file)"
        ))
    })?;
    let mut config = TrainConfig::with_epochs(epochs);
    config.learning_rate = lr_flag.unwrap_or(section.learning_rate);
    config.batch_size = batch_flag.unwrap_or(section.batch_size);
    config.shuffle = section.shuffle;
    config.seed = seed;
    config.validate()?;
    Ok(config)
}

fn load_train_split<T: Scalar>(store: &PatchStore) -> Result<(PatchDataset<T>, PatchDataset<T>)> {
    let train: Vec<Patch> = store.split(Split::Train).cloned().collect();
    let test: Vec<Patch> = store.split(Split::Test).cloned().collect();
    if train.is_empty() {
        return Err(Error::Config("patch store has no training split".into()));
    }
    let sigma_floor = store.meta.config.sigma_floor;
    Ok((
        PatchDataset::from_patches(&train, &store.meta.class_set, sigma_floor)?,
        PatchDataset::from_patches(&test, &store.meta.class_set, sigma_floor)?,
    ))
}

fn check_backbone_matches_store(config: &BackboneConfig, store: &PatchStore) -> Result<()> {
    let store_size = store.meta.config.patch_size;
    if config.input_size != store_size {
        return Err(Error::Config(format!(
            "patch store holds {store_size}px patches but backbone {} expects {}px; \
             re-run patchify with --patch-size {}",
            config.family, config.input_size, config.input_size
        )));
    }
    Ok(())
}

fn cmd_train_sv(args: TrainSvArgs) -> Result<i32> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(master) = args.master_seed {
        config.master_seed = master;
    }
    if let Some(precision) = args.precision.as_deref() {
        config.precision = Precision::from_str(precision)?;
    }
    if let Some(family) = args.backbone.as_deref() {
        config.backbone = Some(BackboneFamily::from_str(family)?);
    }
    if let Some(v) = args.val_fraction {
        config.val_fraction = v;
    }
    let seed = config.stage_seed(args.seed, config.train_sv.seed, "train-sv");
    let train_config = train_section_config(
        &config.train_sv,
        args.epochs,
        args.lr,
        args.batch,
        seed,
        "train-sv",
    )?;
    match config.precision {
        Precision::F32 => run_train_sv::<f32>(&args, &config, train_config, seed),
        Precision::F64 => run_train_sv::<f64>(&args, &config, train_config, seed),
    }
}

fn run_train_sv<T: Scalar>(
    args: &TrainSvArgs,
    config: &RunConfig,
    train_config: TrainConfig,
    seed: u64,
) -> Result<i32> {
    let out = resolve_out_dir(args.out.clone(), "train-sv", config, seed)?;
    let store = load_patch_store(&args.patches)?;
    let backbone = BackboneConfig::of_family(config.backbone.unwrap_or(BackboneFamily::Mini));
    check_backbone_matches_store(&backbone, &store)?;
    let (train_set, _) = load_train_split::<T>(&store)?;
    let num_classes = store.meta.class_set.len();

    let (train_idx, val_idx) = if config.val_fraction > 0.0 {
        train_set.carve_validation(config.val_fraction, seed)
    } else {
        ((0..train_set.len()).collect(), Vec::new())
    };

    let extractor = build_backbone::<T>(&backbone, derive_seed(seed, "init/backbone"))?;
    let head = build_head::<T>(
        backbone.feature_dim,
        num_classes,
        &HeadConfig::default_for(num_classes),
        derive_seed(seed, "init/head"),
    )?;
    let (model, history) = train_single_view(
        extractor,
        head,
        &train_set,
        &train_idx,
        (!val_idx.is_empty()).then_some(val_idx.as_slice()),
        &train_config,
    )?;

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    checkpoint::save_single_view(out.join("checkpoint.ckpt"), &model, &store.meta.class_set)?;
    write_history(&out, &history)?;
    write_stage_snapshot(&out, "train-sv", seed, config)?;

    if args.save_best {
        save_best_sv::<T>(&out, config, &train_config, seed, &history, &store)?;
    }

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "train-sv done: {} epochs, final train acc {:.3}{}",
        history.epochs.len(),
        last.train_acc,
        last.val_acc
            .map(|a| format!(", val acc {a:.3}"))
            .unwrap_or_default()
    );
    Ok(0)
}

/// Re-runs the deterministic trajectory up to the best validation epoch and
/// checkpoints it. Identical seeds make the replay exact.
fn save_best_sv<T: Scalar>(
    out: &Path,
    config: &RunConfig,
    train_config: &TrainConfig,
    seed: u64,
    history: &TrainHistory,
    store: &PatchStore,
) -> Result<()> {
    let best_epoch = history
        .epochs
        .iter()
        .max_by(|a, b| {
            a.val_acc
                .unwrap_or(a.train_acc)
                .total_cmp(&b.val_acc.unwrap_or(b.train_acc))
        })
        .map(|e| e.epoch)
        .unwrap_or(0);
    if best_epoch + 1 == history.epochs.len() {
        fs::copy(out.join("checkpoint.ckpt"), out.join("best.ckpt"))
            .map_err(|e| Error::io(out.join("best.ckpt"), e))?;
        return Ok(());
    }
    let backbone = BackboneConfig::of_family(config.backbone.unwrap_or(BackboneFamily::Mini));
    let (train_set, _) = load_train_split::<T>(store)?;
    let (train_idx, val_idx) = if config.val_fraction > 0.0 {
        train_set.carve_validation(config.val_fraction, seed)
    } else {
        ((0..train_set.len()).collect(), Vec::new())
    };
    let mut replay = train_config.clone();
    replay.epochs = best_epoch + 1;
    let extractor = build_backbone::<T>(&backbone, derive_seed(seed, "init/backbone"))?;
    let head = build_head::<T>(
        backbone.feature_dim,
        store.meta.class_set.len(),
        &HeadConfig::default_for(store.meta.class_set.len()),
        derive_seed(seed, "init/head"),
    )?;
    let (best, _) = train_single_view(
        extractor,
        head,
        &train_set,
        &train_idx,
        (!val_idx.is_empty()).then_some(val_idx.as_slice()),
        &replay,
    )?;
    checkpoint::save_single_view(out.join("best.ckpt"), &best, &store.meta.class_set)
}

fn write_history(dir: &Path, history: &TrainHistory) -> Result<()> {
    let path = dir.join("history.csv");
    fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))
}

fn cmd_train_mv(args: TrainMvArgs) -> Result<i32> {
    let sv_path = args.sv_checkpoint.clone().ok_or_else(|| {
        Error::Config(
            "missing prerequisite: --sv-checkpoint (train-sv produces it; \
             the multi-view stage duplicates its frozen feature extractor)"
                .into(),
        )
    })?;
    if !sv_path.is_file() {
        return Err(Error::Checkpoint {
            path: sv_path,
            message: "single-view checkpoint not found; run train-sv first".into(),
        });
    }
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(master) = args.master_seed {
        config.master_seed = master;
    }
    if let Some(fusion) = args.fusion.as_deref() {
        config.fusion = Some(FusionStrategy::from_str(fusion)?);
    }
    if let Some(pairing) = args.pairing.as_deref() {
        config.pairing = Some(PairingPolicy::from_str(pairing)?);
    }
    if let Some(v) = args.val_fraction {
        config.val_fraction = v;
    }
    let seed = config.stage_seed(args.seed, config.train_mv.seed, "train-mv");
    let train_config = train_section_config(
        &config.train_mv,
        args.epochs,
        args.lr,
        args.batch,
        seed,
        "train-mv",
    )?;
    // Precision follows the single-view checkpoint.
    let header = checkpoint::read_header(&sv_path)?;
    match header.dtype.as_str() {
        "f32" => run_train_mv::<f32>(&args, &sv_path, &config, train_config, seed),
        "f64" => run_train_mv::<f64>(&args, &sv_path, &config, train_config, seed),
        other => Err(Error::Config(format!("unsupported checkpoint dtype {other}"))),
    }
}

fn run_train_mv<T: Scalar>(
    args: &TrainMvArgs,
    sv_path: &Path,
    config: &RunConfig,
    train_config: TrainConfig,
    seed: u64,
) -> Result<i32> {
    let out = resolve_out_dir(args.out.clone(), "train-mv", config, seed)?;
    let store = load_patch_store(&args.patches)?;
    let (sv_model, ckpt_classes) = checkpoint::load_single_view::<T>(sv_path)?;
    if ckpt_classes != store.meta.class_set {
        return Err(Error::Config(
            "checkpoint class set differs from the patch store class set".into(),
        ));
    }
    check_backbone_matches_store(&sv_model.extractor.config, &store)?;
    let (train_set, _) = load_train_split::<T>(&store)?;
    let num_classes = store.meta.class_set.len();

    let frozen = freeze_features(sv_model);
    let fusion = config.fusion.unwrap_or(FusionStrategy::MaxPool);
    let pairing = config.pairing.unwrap_or(PairingPolicy::SpecimenFirst);
    let model = build_multiview::<T>(
        &frozen,
        fusion,
        &HeadConfig::default_for(num_classes),
        num_classes,
        derive_seed(seed, "init/multiview"),
    )?;

    let (train_idx, val_idx) = if config.val_fraction > 0.0 {
        train_set.carve_validation(config.val_fraction, seed)
    } else {
        ((0..train_set.len()).collect(), Vec::new())
    };
    // Pair within the index subsets so validation pairs never reuse
    // training patches.
    let train_view = subset_dataset(&train_set, &train_idx);
    let val_view = subset_dataset(&train_set, &val_idx);
    let pairs = pair_views(&train_view, pairing, derive_seed(seed, "pairing/train"))?;
    let val_pairs = if val_view.items.is_empty() {
        Vec::new()
    } else {
        pair_views(&val_view, pairing, derive_seed(seed, "pairing/val"))?
    };

    let repair = args.repair_each_epoch.then_some(pairing);
    let (trained, history) = train_multiview(
        model,
        &train_view,
        &pairs,
        (!val_pairs.is_empty()).then_some((&val_view, val_pairs.as_slice())),
        &train_config,
        repair,
    )?;

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    checkpoint::save_multi_view(out.join("checkpoint.ckpt"), &trained, &store.meta.class_set)?;
    write_history(&out, &history)?;
    write_stage_snapshot(&out, "train-mv", seed, config)?;

    if args.save_best {
        // Deterministic replay, as in train-sv.
        let best_epoch = history
            .epochs
            .iter()
            .max_by(|a, b| {
                a.val_acc
                    .unwrap_or(a.train_acc)
                    .total_cmp(&b.val_acc.unwrap_or(b.train_acc))
            })
            .map(|e| e.epoch)
            .unwrap_or(0);
        if best_epoch + 1 == history.epochs.len() {
            fs::copy(out.join("checkpoint.ckpt"), out.join("best.ckpt"))
                .map_err(|e| Error::io(out.join("best.ckpt"), e))?;
        } else {
            let mut replay = train_config.clone();
            replay.epochs = best_epoch + 1;
            let model = build_multiview::<T>(
                &frozen,
                fusion,
                &HeadConfig::default_for(num_classes),
                num_classes,
                derive_seed(seed, "init/multiview"),
            )?;
            let (best, _) = train_multiview(
                model,
                &train_view,
                &pairs,
                (!val_pairs.is_empty()).then_some((&val_view, val_pairs.as_slice())),
                &replay,
                args.repair_each_epoch.then_some(pairing),
            )?;
            checkpoint::save_multi_view(out.join("best.ckpt"), &best, &store.meta.class_set)?;
        }
    }

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "train-mv done ({} fusion): {} epochs, final train acc {:.3}{}",
        fusion,
        history.epochs.len(),
        last.train_acc,
        last.val_acc
            .map(|a| format!(", val acc {a:.3}"))
            .unwrap_or_default()
    );
    Ok(0)
}

fn subset_dataset<T: Scalar>(dataset: &PatchDataset<T>, indices: &[usize]) -> PatchDataset<T> {
    PatchDataset {
        items: indices.iter().map(|&i| dataset.items[i].clone()).collect(),
        class_set: dataset.class_set.clone(),
        patch_size: dataset.patch_size,
    }
}

fn model_id_sv(config: &BackboneConfig) -> String {
    format!("SV-{}", config.family)
}

fn model_id_mv(config: &BackboneConfig, fusion: FusionStrategy) -> String {
    let tag = match fusion {
        FusionStrategy::Concat => "conc",
        FusionStrategy::MaxPool => "max",
    };
    format!("MV-{}-{tag}", config.family)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    if args.checkpoint.is_empty() {
        return Err(Error::Config("at least one --checkpoint is required".into()));
    }
    let dtypes: Vec<String> = args
        .checkpoint
        .iter()
        .map(|p| checkpoint::read_header(p).map(|h| h.dtype))
        .collect::<Result<_>>()?;
    if dtypes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config(
            "all checkpoints must share one dtype for a combined evaluation".into(),
        ));
    }
    match dtypes[0].as_str() {
        "f32" => run_eval::<f32>(&args),
        "f64" => run_eval::<f64>(&args),
        other => Err(Error::Config(format!("unsupported checkpoint dtype {other}"))),
    }
}

fn run_eval<T: Scalar>(args: &EvalArgs) -> Result<i32> {
    let store = load_patch_store(&args.patches)?;
    let test: Vec<Patch> = store.split(Split::Test).cloned().collect();
    if test.is_empty() {
        return Err(Error::Eval("patch store has no test split".into()));
    }
    let test_set =
        PatchDataset::<T>::from_patches(&test, &store.meta.class_set, store.meta.config.sigma_floor)?;

    let mut sv: Option<(SingleViewModel<T>, String)> = None;
    let mut mv: Option<(MultiViewModel<T>, String)> = None;
    for path in &args.checkpoint {
        let header = checkpoint::read_header(path)?;
        match header.kind {
            checkpoint::ModelKind::SingleView => {
                let (model, classes) = checkpoint::load_single_view::<T>(path)?;
                ensure_classes_match(&classes, &store.meta.class_set)?;
                let id = model_id_sv(&model.extractor.config);
                sv = Some((model, id));
            }
            checkpoint::ModelKind::MultiView => {
                let (model, classes) = checkpoint::load_multi_view::<T>(path)?;
                ensure_classes_match(&classes, &store.meta.class_set)?;
                let id = model_id_mv(&model.branch_surface.config, model.fusion);
                mv = Some((model, id));
            }
        }
    }

    let mut config = RunConfig::load(None)?;
    if let Some(master) = args.master_seed {
        config.master_seed = master;
    }
    let pairing_seed = config.stage_seed(args.seed, None, "eval-pairing");
    let pairing = PairingPolicy::from_str(&args.pairing)?;
    let pairs = if mv.is_some() {
        pair_views(&test_set, pairing, pairing_seed)?
    } else {
        Vec::new()
    };

    let report = evaluate_suite(
        sv.as_ref().map(|(m, id)| (m, id.as_str())),
        mv.as_ref().map(|(m, id)| (m, id.as_str())),
        &test_set,
        &pairs,
        pairing_seed,
        args.batch,
    )?;

    if let Some(parent) = args.report_out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut body = report.to_json()?;
    body.push('\n');
    fs::write(&args.report_out, body).map_err(|e| Error::io(&args.report_out, e))?;
    print!("{}", report.render_text());
    println!("report written to {}", args.report_out.display());
    Ok(0)
}

fn ensure_classes_match(a: &ClassSet, b: &ClassSet) -> Result<()> {
    if a != b {
        return Err(Error::Config(
            "checkpoint class set differs from the patch store class set".into(),
        ));
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<i32> {
    let header = checkpoint::read_header(&args.checkpoint)?;
    match header.dtype.as_str() {
        "f32" => run_export::<f32>(&args),
        "f64" => run_export::<f64>(&args),
        other => Err(Error::Config(format!("unsupported checkpoint dtype {other}"))),
    }
}

fn run_export<T: Scalar>(args: &ExportArgs) -> Result<i32> {
    let store = load_patch_store(&args.patches)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let patches: Vec<Patch> = store.split(split).cloned().collect();
    if patches.is_empty() {
        return Err(Error::Eval(format!("patch store has no {split} split")));
    }
    let dataset = PatchDataset::<T>::from_patches(
        &patches,
        &store.meta.class_set,
        store.meta.config.sigma_floor,
    )?;

    let header = checkpoint::read_header(&args.checkpoint)?;
    let mut config = RunConfig::load(None)?;
    if let Some(master) = args.master_seed {
        config.master_seed = master;
    }
    let (rows, columns, pairing_seed) = match header.kind {
        checkpoint::ModelKind::SingleView => {
            let (model, classes) = checkpoint::load_single_view::<T>(&args.checkpoint)?;
            ensure_classes_match(&classes, &store.meta.class_set)?;
            let indices: Vec<usize> = (0..dataset.len()).collect();
            export_features_single_view(&model, &dataset, &indices, &args.out)?;
            println!("wrote {} feature rows to {}", indices.len(), args.out.display());
            (indices.len(), model.extractor.config.feature_dim, None)
        }
        checkpoint::ModelKind::MultiView => {
            let (model, classes) = checkpoint::load_multi_view::<T>(&args.checkpoint)?;
            ensure_classes_match(&classes, &store.meta.class_set)?;
            let pairing = PairingPolicy::from_str(&args.pairing)?;
            let pairing_seed = config.stage_seed(args.seed, None, "export-pairing");
            let pairs = pair_views(&dataset, pairing, pairing_seed)?;
            export_features_multi_view(&model, &dataset, &pairs, &args.out)?;
            println!("wrote {} feature rows to {}", pairs.len(), args.out.display());
            let columns = model
                .fusion
                .fused_dim(model.branch_surface.config.feature_dim);
            (pairs.len(), columns, Some(pairing_seed))
        }
    };
    // Sidecar metadata: the CSV itself stays headerless (one row per item).
    let meta = serde_json::json!({
        "toolkit_version": crate::TOOLKIT_VERSION,
        "checkpoint": args.checkpoint.display().to_string(),
        "split": args.split,
        "rows": rows,
        "feature_columns": columns,
        "pairing_seed": pairing_seed,
    });
    let meta_path = args.out.with_extension("meta.json");
    let mut body = serde_json::to_vec_pretty(&meta)?;
    body.push(b'\n');
    fs::write(&meta_path, body).map_err(|e| Error::io(&meta_path, e))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        run_cli(std::iter::once("mvfuse").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run(&["frobnicate"]), 1);
    }

    #[test]
    fn validate_accepts_a_clean_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            classes: 2,
            specimens_per_class: 2,
            image_size: 32,
            mode: SynthMode::Texture,
            seed: 5,
        };
        generate_synthetic(&spec, dir.path()).unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        assert_eq!(run(&["validate", "--manifest", manifest.to_str().unwrap()]), 0);
        assert_eq!(
            run(&[
                "validate",
                "--manifest",
                manifest.to_str().unwrap(),
                "--check-files"
            ]),
            0
        );
    }

    #[test]
    fn train_mv_without_sv_checkpoint_names_the_prerequisite() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run(&[
            "train-mv",
            "--patches",
            dir.path().to_str().unwrap(),
            "--epochs",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_manifest_is_a_data_error() {
        assert_eq!(run(&["validate", "--manifest", "/nonexistent/m.jsonl"]), 2);
    }
}
