//! Command-line driver: phantom generation, preprocessing, training,
//! pseudo-labeling, fine-tuning, inference, post-processing and evaluation.

pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use swinseg::lossmetrics::{DatasetReport, SegReport};
use swinseg::model::{load_checkpoint, Checkpoint, SwinUnetr};
use swinseg::phantom::{build_dataset, DatasetSpec, PhantomConfig};
use swinseg::postprocess::{keep_largest_per_label, Connectivity};
use swinseg::preprocess::preprocess_case;
use swinseg::training::{
    finetune_mixed, generate_pseudo_labels, infer_case, load_pool, train, InferConfig, RunDir, Trainer,
};
use swinseg::volumeio::{load_manifest, read_labels, read_volume, write_mvol, DatasetManifest, Dims, Spacing, Split};

pub use config::RunConfig;
pub use error::{CliError, Kind, Result};

#[derive(Debug, Parser)]
#[command(name = "segctl", version, about = "Train, apply and evaluate the 3D segmentation pipeline")]
pub struct Cli {
    /// Worker threads (1 gives bit-reproducible runs); falls back to SEGCTL_THREADS.
    #[arg(long, global = true, env = "SEGCTL_THREADS", value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    Phantom(PhantomArgs),
    /// Crop, resample and z-score one image (and optionally its labels).
    Preprocess(PreprocessArgs),
    /// Pretrain a model on the labeled split.
    Train(TrainArgs),
    /// Predict pseudo-labels for the unlabeled split.
    Pseudolabel(PseudolabelArgs),
    /// Continue training on labeled plus pseudo-labeled cases.
    Finetune(FinetuneArgs),
    /// Segment one image or every case of a manifest split.
    Infer(InferArgs),
    /// Keep the largest connected component of every class.
    Postprocess(PostprocessArgs),
    /// Score predictions against reference label maps.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of labeled training cases.
    #[arg(long, default_value_t = 8)]
    pub labeled: usize,
    /// Number of unlabeled cases.
    #[arg(long, default_value_t = 4)]
    pub unlabeled: usize,
    /// Number of validation cases.
    #[arg(long, default_value_t = 2)]
    pub val: usize,
    /// Chance that a labeled case keeps only a subset of its classes.
    #[arg(long, default_value_t = 0.5)]
    pub partial_prob: f64,
    /// Foreground classes J (organs 1..J-1 and a tumor J).
    #[arg(long, value_name = "J")]
    pub classes: Option<u8>,
    /// Grid extent, as N or D,H,W.
    #[arg(long, value_parser = parse_dims, value_name = "DIMS")]
    pub dims: Option<Dims>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phantom configuration JSON; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Input image (.mvol).
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output image (.mvol).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Label map on the input grid.
    #[arg(long, value_name = "FILE", requires = "labels_out")]
    pub labels: Option<PathBuf>,
    /// Output label map on the preprocessed grid.
    #[arg(long, value_name = "FILE", requires = "labels")]
    pub labels_out: Option<PathBuf>,
    /// Target spacing in mm, as S or D,H,W (default: keep).
    #[arg(long, value_parser = parse_spacing, value_name = "MM")]
    pub spacing: Option<Spacing>,
    /// JSON file receiving the crop box and z-score parameters.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

/// Training flags shared by `train` and `finetune`.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// Run configuration JSON; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Run directory (config.json, checkpoints/, logs.jsonl, preds/).
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    /// Optimization steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Patches per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training patch extent, as N or D,H,W.
    #[arg(long, value_parser = parse_dims, value_name = "DIMS")]
    pub patch: Option<Dims>,
    /// Save a numbered checkpoint every N steps (0: final only).
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<u64>,
    /// Seed for initialization, sampling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    /// Continue from this checkpoint, which must carry optimizer state.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    /// Pretrained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
}

/// Inference flags shared by `infer` and `pseudolabel`.
#[derive(Debug, Args)]
pub struct InferOverrides {
    /// Run configuration JSON; its `infer` section is used.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// Sliding-window extent, as N or D,H,W.
    #[arg(long, value_parser = parse_dims, value_name = "DIMS")]
    pub patch: Option<Dims>,
    /// Fraction of a window shared with its neighbour, in [0, 1).
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Connectivity used by post-processing.
    #[arg(long, value_parser = parse_connectivity, value_name = "6|26")]
    pub connectivity: Option<Connectivity>,
    /// Drop components smaller than this many voxels during post-processing.
    #[arg(long, value_name = "N")]
    pub min_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: InferOverrides,
    /// Input image (.mvol); use --manifest to segment a whole split.
    #[arg(long = "in", value_name = "FILE", conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// Dataset manifest whose split is segmented into the --out directory.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Split to segment with --manifest.
    #[arg(long, value_parser = parse_split, default_value = "val")]
    pub split: Split,
    /// Output label map, or output directory with --manifest.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Skip largest-component post-processing.
    #[arg(long)]
    pub no_postprocess: bool,
}

#[derive(Debug, Args)]
pub struct PseudolabelArgs {
    #[command(flatten)]
    pub common: InferOverrides,
    /// Dataset manifest with an unlabeled split.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Output directory for pseudo-labels and the extended manifest.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// Input label map (.mvol).
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output label map (.mvol).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Voxel connectivity.
    #[arg(long, value_parser = parse_connectivity, default_value = "26", value_name = "6|26")]
    pub connectivity: Connectivity,
    /// Drop components smaller than this many voxels.
    #[arg(long, default_value_t = 0, value_name = "N")]
    pub min_size: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted label map, or a directory of them.
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    /// Reference label map, or a directory holding one file per prediction.
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    /// Surface tolerance in mm for NSD.
    #[arg(long, default_value_t = 1.0, value_name = "MM")]
    pub nsd_tol: f64,
    /// JSON report output.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

fn parse_triple<T: std::str::FromStr + Copy>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let parse = |p: &str| p.parse::<T>().map_err(|_| format!("cannot parse \"{p}\""));
    match parts.as_slice() {
        [one] => Ok([parse(one)?; 3]),
        [a, b, c] => Ok([parse(a)?, parse(b)?, parse(c)?]),
        _ => Err("expected one value or three comma-separated values".into()),
    }
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    parse_triple(s)
}

fn parse_spacing(s: &str) -> std::result::Result<Spacing, String> {
    parse_triple(s)
}

fn parse_connectivity(s: &str) -> std::result::Result<Connectivity, String> {
    s.parse::<u32>()
        .ok()
        .and_then(Connectivity::from_count)
        .ok_or_else(|| format!("connectivity must be 6 or 26, got \"{s}\""))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown split \"{s}\" (labeled, unlabeled, val, pseudo)"))
}

/// Caps rayon's worker count for the whole process.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(Kind::Runtime, format!("cannot start thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a),
        Command::Pseudolabel(a) => pseudolabel(a),
        Command::Finetune(a) => finetune(a),
        Command::Infer(a) => infer(a),
        Command::Postprocess(a) => postprocess(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).expect("report serializes");
    json.push('\n');
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, json).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::data(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", p.display())))?
        }
        None => PhantomConfig::with_classes(a.classes.unwrap_or(5)),
    };
    if let Some(j) = a.classes.filter(|&j| j != cfg.num_classes) {
        let fresh = PhantomConfig::with_classes(j);
        cfg.num_classes = j;
        cfg.class_means = fresh.class_means;
        cfg.class_stds = fresh.class_stds;
        cfg.organ_scales = fresh.organ_scales;
    }
    if let Some(d) = a.dims {
        cfg.dims = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let spec = DatasetSpec {
        labeled: a.labeled,
        unlabeled: a.unlabeled,
        val: a.val,
        partial_prob: a.partial_prob,
    };
    let manifest = build_dataset(&cfg, &spec, &a.out)?;
    write_json(&serde_json::json!({ "phantom": cfg, "dataset": spec }), &a.out.join("phantom.json"))?;
    log::info!("wrote {} cases to {}", manifest.cases.len(), a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let image = read_volume(&a.input)?;
    let labels = a.labels.as_deref().map(read_labels).transpose()?;
    let p = preprocess_case(&image, labels.as_ref(), a.spacing.unwrap_or(image.spacing))?;
    write_mvol(&p.image.clone().into(), &a.out)?;
    if let (Some(l), Some(path)) = (p.labels.clone(), &a.labels_out) {
        write_mvol(&l.into(), path)?;
    }
    if let Some(r) = &a.report {
        let report = serde_json::json!({
            "crop": p.crop,
            "zscore": p.zscore,
            "dims": p.image.dims,
            "spacing": p.image.spacing,
        });
        write_json(&report, r)?;
    }
    Ok(())
}

fn missing(flag: &str, key: &str) -> CliError {
    CliError::new(Kind::Usage, format!("{flag} is required (or set \"{key}\" in the --config file)"))
}

/// Config file overlaid with training flags; the manifest and run directory
/// must be set by one of the two.
fn resolve_train(o: &TrainOverrides) -> Result<(RunConfig, PathBuf, RunDir)> {
    let mut cfg = RunConfig::load_or_default(o.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = o.steps {
        t.steps = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.patch {
        t.patch_size = v;
    }
    if let Some(v) = o.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(m) = &o.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(r) = &o.run {
        cfg.run_dir = Some(r.clone());
    }
    let manifest = cfg.manifest.clone().ok_or_else(|| missing("--manifest", "manifest"))?;
    let run = RunDir::new(cfg.run_dir.clone().ok_or_else(|| missing("--run", "run_dir"))?);
    Ok((cfg, manifest, run))
}

fn report_final(ckpt: &Checkpoint, run: &RunDir) {
    log::info!("finished at step {}; checkpoint {}", ckpt.step, run.final_checkpoint().display());
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (mut cfg, manifest_path, run) = resolve_train(&a.common)?;
    let resume = a.resume.clone().map(|p| load_checkpoint(&p).map(|c| (p, c))).transpose()?;
    if let Some((p, c)) = &resume {
        cfg.model = c.config.clone();
        cfg.checkpoint = Some(p.clone());
    }
    cfg.validate()?;
    let manifest = load_manifest(&manifest_path)?;
    run.create()?;
    cfg.save(&run.config())?;
    let ckpt = match resume {
        Some((_, c)) => {
            let pool = load_pool(&manifest, &[Split::Labeled], cfg.train.target_spacing)?;
            if pool.is_empty() {
                return Err(swinseg::training::TrainError::EmptySplit(vec![Split::Labeled]).into());
            }
            Trainer::resume(&c, cfg.train.clone(), pool)?.run(Some(&run), true)?
        }
        None => train(&manifest, &cfg.model, &cfg.train, Some(&run))?,
    };
    report_final(&ckpt, &run);
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let (mut cfg, manifest_path, run) = resolve_train(&a.common)?;
    if let Some(c) = &a.ckpt {
        cfg.checkpoint = Some(c.clone());
    }
    let ckpt_path = cfg.checkpoint.clone().ok_or_else(|| missing("--ckpt", "checkpoint"))?;
    let start = load_checkpoint(&ckpt_path)?;
    cfg.model = start.config.clone();
    cfg.validate()?;
    let manifest = load_manifest(&manifest_path)?;
    run.create()?;
    cfg.save(&run.config())?;
    let ckpt = finetune_mixed(&start, &manifest, &cfg.train, Some(&run))?;
    report_final(&ckpt, &run);
    Ok(())
}

/// Inference settings from the config file and flags, plus the model.
fn resolve_infer(o: &InferOverrides) -> Result<(InferConfig, SwinUnetr<f32>)> {
    let file = RunConfig::load_or_default(o.config.as_deref())?;
    let mut cfg = file.infer;
    if let Some(v) = o.patch {
        cfg.patch_size = v;
    }
    if let Some(v) = o.overlap {
        cfg.overlap = v;
    }
    if let Some(v) = o.connectivity {
        cfg.connectivity = v;
    }
    if let Some(v) = o.min_size {
        cfg.min_component_size = v;
    }
    let path = o.ckpt.clone().or(file.checkpoint).ok_or_else(|| missing("--ckpt", "checkpoint"))?;
    let model = load_checkpoint(&path)?.model()?;
    cfg.validate(model.config())?;
    Ok((cfg, model))
}

fn infer(a: InferArgs) -> Result<()> {
    let (mut cfg, model) = resolve_infer(&a.common)?;
    if a.no_postprocess {
        cfg.postprocess = false;
    }
    match (&a.input, &a.manifest) {
        (Some(input), None) => {
            let image = read_volume(input)?;
            let labels = infer_case(&model, &image, &cfg)?;
            write_mvol(&labels.into(), &a.out)?;
        }
        (None, Some(m)) => {
            let manifest = load_manifest(m)?;
            let cases: Vec<_> = manifest.split(a.split).collect();
            if cases.is_empty() {
                return Err(CliError::data(format!("manifest {} has no {:?} cases", m.display(), a.split)));
            }
            for c in cases {
                let image = read_volume(&manifest.resolve(&c.image))?;
                let labels = infer_case(&model, &image, &cfg)?;
                write_mvol(&labels.into(), &a.out.join(format!("{}.mvol", c.id)))?;
                log::info!("segmented {}", c.id);
            }
        }
        _ => return Err(CliError::new(Kind::Usage, "exactly one of --in and --manifest is required")),
    }
    Ok(())
}

fn pseudolabel(a: PseudolabelArgs) -> Result<()> {
    let (cfg, model) = resolve_infer(&a.common)?;
    let file = RunConfig::load_or_default(a.common.config.as_deref())?;
    let path = a.manifest.clone().or(file.manifest).ok_or_else(|| missing("--manifest", "manifest"))?;
    let manifest = load_manifest(&path)?;
    let out: DatasetManifest = generate_pseudo_labels(&model, &manifest, &a.out, &cfg)?;
    log::info!(
        "wrote {} pseudo-labels; manifest {}",
        out.split(Split::Pseudo).count(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn postprocess(a: PostprocessArgs) -> Result<()> {
    let labels = read_labels(&a.input)?;
    let kept = keep_largest_per_label(&labels, a.connectivity, a.min_size);
    write_mvol(&kept.into(), &a.out)?;
    Ok(())
}

/// `.mvol` files of a directory in name order.
fn mvol_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?.path();
        if p.extension().is_some_and(|x| x == "mvol") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if !(a.nsd_tol > 0.0 && a.nsd_tol.is_finite()) {
        return Err(CliError::config(format!("--nsd-tol must be positive, got {}", a.nsd_tol)));
    }
    let pairs: Vec<(Option<String>, PathBuf, PathBuf)> = if a.pred.is_dir() {
        let files = mvol_files(&a.pred)?;
        if files.is_empty() {
            return Err(CliError::data(format!("no .mvol files in {}", a.pred.display())));
        }
        files
            .into_iter()
            .map(|p| {
                let name = p.file_name().expect("listed files have names").to_owned();
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned());
                (id, p, a.gt.join(name))
            })
            .collect()
    } else {
        vec![(None, a.pred.clone(), a.gt.clone())]
    };
    let mut reports = Vec::new();
    for (id, pred, gt) in pairs {
        let p = read_labels(&pred)?;
        let r = read_labels(&gt)?;
        let mut report = SegReport::evaluate(&p, &r, a.nsd_tol)?;
        report.case = id;
        reports.push(report);
    }
    let report = DatasetReport::new(reports, a.nsd_tol);
    println!("mean DSC {:.4} mean NSD {:.4} over {} case(s)", report.mean_dsc, report.mean_nsd, report.cases.len());
    if let Some(path) = &a.report {
        write_json(&report, path)?;
    }
    Ok(())
}
