//! Command line entry point: synth, curate, train, infer, eval, selftest.
//! Commands compose through files; see each module for the formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use groundkit::curation::{self, BodyRegion, CtWindow};
use groundkit::datamodel::{
    split_dataset, DatasetManifest, ImageSample, Modality, Region, RegionAnnotation, Split,
    TaskKind, VqaSample,
};
use groundkit::io;
use groundkit::metrics::{evaluate_predictions, EvalPrediction};
use groundkit::model::{GroundedModel, ModelConfig, Vocabulary};
use groundkit::selftest;
use groundkit::synthgen;
use groundkit::training::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "groundkit", version, about = "Grounded biomedical interpretation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task dataset.
    Synth(SynthArgs),
    /// Preprocess raw volumes/images into a VQA manifest.
    Curate(CurateArgs),
    /// Train a model on one or more manifests.
    Train(TrainArgs),
    /// Run a trained model on an image or a manifest split.
    Infer(InferArgs),
    /// Score predictions against a manifest.
    Eval(EvalArgs),
    /// Run the built-in verification suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long)]
    volumes: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurateArgs {
    /// Directory of .gkv volumes (with optional .mask.gkv siblings) and
    /// .png images (with optional .mask.png siblings).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    modality: Modality,
    #[arg(long, value_parser = parse_body_region)]
    body_region: Option<BodyRegion>,
    #[arg(long)]
    task: TaskKind,
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    /// Finding label attached to annotated regions.
    #[arg(long, default_value = "finding")]
    label: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for manifest.json and its images.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest path; repeat to merge several task datasets.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// JSON or TOML file holding {"model": ..., "train": ...}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Single-image mode: a PNG to interpret.
    #[arg(long, conflicts_with = "manifest")]
    image: Option<PathBuf>,
    /// Question for single-image mode.
    #[arg(long, requires = "image")]
    question: Option<String>,
    /// Batch mode: predict every sample of a manifest split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: SplitChoice,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitChoice,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, clap::ValueEnum)]
enum SplitChoice {
    Train,
    Test,
    All,
}

impl SplitChoice {
    fn selects(self, manifest: &DatasetManifest, sample: &VqaSample) -> bool {
        let assigned = manifest.split.get(sample.volume_key());
        match self {
            SplitChoice::Train => assigned == Some(&Split::Train),
            SplitChoice::Test => assigned == Some(&Split::Test),
            SplitChoice::All => true,
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("size must be HxW, e.g. 64x64")?;
    let h = h.parse().map_err(|_| "bad height")?;
    let w = w.parse().map_err(|_| "bad width")?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn parse_body_region(s: &str) -> Result<BodyRegion, String> {
    match s.to_ascii_lowercase().as_str() {
        "chest" => Ok(BodyRegion::Chest),
        "abdomen" => Ok(BodyRegion::Abdomen),
        other => Err(format!("unknown body region: {other}")),
    }
}

/// GROUNDKIT_THREADS caps internal parallelism; all current compute is
/// single-threaded, so any value behaves like 1 (deterministic mode).
fn configured_threads() -> Result<usize> {
    match std::env::var("GROUNDKIT_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("GROUNDKIT_THREADS must be a positive integer, got {v:?}"))?;
            if n == 0 {
                bail!("GROUNDKIT_THREADS must be >= 1");
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                if p.extension().is_some_and(|e| e == "toml") {
                    toml::from_str(&text).context("parsing TOML config")?
                } else {
                    serde_json::from_str(&text).context("parsing JSON config")?
                }
            }
            None => RunConfig { model: ModelConfig::toy(), train: TrainConfig::toy(42) },
        };
        if let Some(seed) = seed_override {
            config.train.seed = seed;
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let _threads = configured_threads()?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Curate(args) => cmd_curate(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Selftest(args) => cmd_selftest(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let manifest =
        synthgen::gen_task_dataset_with(args.task, args.volumes, args.depth, args.size, args.seed)?;
    fs::create_dir_all(&args.out)?;
    let path = io::save_manifest(&args.out, &manifest)?;
    println!(
        "wrote {} samples ({} volumes) to {}",
        manifest.samples.len(),
        manifest.split.len(),
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_curate(args: CurateArgs) -> Result<ExitCode> {
    let mut entries: Vec<PathBuf> = fs::read_dir(&args.input)
        .with_context(|| format!("reading input dir {}", args.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();

    let mut samples = Vec::new();
    for path in entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".mask.gkv") || name.ends_with(".mask.png") {
            continue;
        }
        let slices: Vec<(ImageSample, Option<ndarray::Array2<u8>>)> = match path
            .extension()
            .and_then(|e| e.to_str())
        {
            Some("gkv") => {
                let volume = io::load_gkv_pair(&path, args.modality)?;
                let volume = match args.modality {
                    Modality::CT => {
                        let window = match args.body_region {
                            Some(BodyRegion::Abdomen) => CtWindow::abdomen(),
                            _ => CtWindow::chest(),
                        };
                        curation::window_ct(&volume, &window)?
                    }
                    Modality::MRI => curation::zscore_mri(&volume)?,
                    _ => volume,
                };
                curation::slice_axial(&volume)
            }
            Some("png") => {
                let pixels = io::load_image_png(&path)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let image = ImageSample {
                    pixels,
                    modality: args.modality,
                    volume_id: Some(stem.to_string()),
                    slice_index: None,
                };
                let mask_path = path.with_file_name(format!("{stem}.mask.png"));
                let mask = mask_path
                    .exists()
                    .then(|| io::load_mask_png(&mask_path))
                    .transpose()?;
                vec![(image, mask)]
            }
            _ => continue,
        };

        for (image, mask) in &slices {
            let (image, mask) = curation::resize_pair(image, mask.as_ref(), args.size);
            let has_region = mask.as_ref().is_some_and(|m| m.iter().any(|&v| v > 0));
            let annotation = match (args.task, has_region) {
                (TaskKind::DiseaseRecognition, false) => RegionAnnotation {
                    region: Region::Mask(ndarray::Array2::zeros(args.size)),
                    label: groundkit::datamodel::NO_FINDINGS.to_string(),
                },
                (_, false) => continue,
                (TaskKind::RoiClassification | TaskKind::RegionReport, true) => RegionAnnotation {
                    region: Region::BBox(curation::mask_to_bbox(mask.as_ref().unwrap())?),
                    label: args.label.clone(),
                },
                (_, true) => RegionAnnotation {
                    region: Region::Mask(mask.unwrap()),
                    label: args.label.clone(),
                },
            };
            samples.push(curation::to_vqa(&image, &annotation, args.task)?);
        }
    }
    if samples.is_empty() {
        bail!("no usable inputs in {}", args.input.display());
    }
    let manifest = split_dataset(&DatasetManifest::new(samples, args.seed), args.seed)?;
    fs::create_dir_all(&args.out)?;
    let path = io::save_manifest(&args.out, &manifest)?;
    println!("wrote {} samples to {}", manifest.samples.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let config = RunConfig::load(args.config.as_deref(), args.seed)?;
    let mut samples = Vec::new();
    let mut split = std::collections::BTreeMap::new();
    for path in &args.data {
        let m = io::load_manifest(path)
            .with_context(|| format!("loading manifest {}", path.display()))?;
        for (k, v) in m.split {
            if split.insert(k.clone(), v).is_some_and(|old| old != v) {
                bail!("volume {k} has conflicting split assignments across manifests");
            }
        }
        samples.extend(m.samples);
    }
    let manifest = DatasetManifest { samples, split, seed: config.train.seed };
    let train_samples: Vec<VqaSample> = manifest.samples_in(Split::Train).cloned().collect();
    if train_samples.is_empty() {
        bail!("no training samples in the given manifests");
    }

    let corpus: Vec<String> = manifest
        .samples
        .iter()
        .flat_map(|s| [s.question.clone(), s.answer.clone()])
        .collect();
    let vocab = Vocabulary::from_corpus(corpus.iter().map(|s| s.as_str()));
    let mut model = GroundedModel::init(config.model.clone(), vocab, config.train.seed)?;

    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let report = training::train(&mut model, &train_samples, &config.train, Some(&mut log))?;
    drop(log);

    let ckpt = args.out.join("model.gkpt");
    model.save(&ckpt)?;
    fs::write(
        args.out.join("loss_curve.svg"),
        training::loss_curve_svg(&fs::read_to_string(&log_path)?),
    )?;
    fs::write(
        args.out.join("train_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "trained {} steps on {} samples, final loss {:.4}, checkpoint {}",
        report.steps,
        train_samples.len(),
        report.final_loss,
        ckpt.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode> {
    let model = GroundedModel::load(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    fs::create_dir_all(&args.out)?;

    if let Some(image_path) = &args.image {
        let question = args
            .question
            .as_deref()
            .context("--question is required with --image")?;
        let pixels = io::load_image_png(image_path)?;
        let image = ImageSample::new(pixels, Modality::CT);
        let out = model.forward_grounded(&image, question)?;
        fs::write(args.out.join("answer.txt"), format!("{}\n", out.answer))?;
        let mask_path = match &out.mask {
            Some(mask) => {
                let p = args.out.join("mask.png");
                io::save_mask_png(&p, mask)?;
                Some("mask.png".to_string())
            }
            None => None,
        };
        let record = io::PredictionRecord {
            id: image_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string(),
            answer: out.answer.clone(),
            mask_path,
        };
        fs::write(
            args.out.join("record.json"),
            serde_json::to_string_pretty(&record)?,
        )?;
        println!("{}", out.answer);
        return Ok(ExitCode::SUCCESS);
    }

    let manifest_path = args.manifest.context("either --image or --manifest is required")?;
    let manifest = io::load_manifest(&manifest_path)?;
    let masks_dir = args.out.join("masks");
    fs::create_dir_all(&masks_dir)?;
    let mut records = Vec::new();
    for sample in manifest.samples.iter().filter(|s| args.split.selects(&manifest, s)) {
        let out = model.forward_grounded(&sample.image, &sample.question)?;
        let mask_path = match &out.mask {
            Some(mask) => {
                let rel = format!("masks/{}.png", sample.id);
                io::save_mask_png(&args.out.join(&rel), mask)?;
                Some(rel)
            }
            None => None,
        };
        records.push(io::PredictionRecord { id: sample.id.clone(), answer: out.answer, mask_path });
    }
    if records.is_empty() {
        bail!("selected split contains no samples");
    }
    let pred_path = args.out.join("predictions.jsonl");
    io::save_predictions(&pred_path, &records)?;
    println!("wrote {} predictions to {}", records.len(), pred_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let manifest = io::load_manifest(&args.manifest)?;
    let records = io::load_predictions(&args.predictions)?;
    let base = args.predictions.parent().unwrap_or(Path::new("."));
    let preds: Vec<EvalPrediction> = records
        .into_iter()
        .map(|r| -> Result<EvalPrediction> {
            let mask = r
                .mask_path
                .as_deref()
                .map(|p| io::load_mask_png(&base.join(p)))
                .transpose()
                .with_context(|| format!("loading mask for prediction {}", r.id))?;
            Ok(EvalPrediction { id: r.id, answer: r.answer, mask })
        })
        .collect::<Result<_>>()?;
    let samples: Vec<&VqaSample> = manifest
        .samples
        .iter()
        .filter(|s| args.split.selects(&manifest, s))
        .collect();
    let report = evaluate_predictions(&samples, &preds)?;

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let table = report.render_table();
    fs::write(args.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(args: SelftestArgs) -> Result<ExitCode> {
    let results = selftest::run(args.seed);
    print!("{}", selftest::render(&results));
    if selftest::all_passed(&results) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}
