use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use spine_cascade::cascade::{stage_errors, train_cascade, FrameGeometry, TrainConfig};
use spine_cascade::imaging::{synth_generate, GrayImage, PatchSpec, SynthConfig};
use spine_cascade::io::{
    error_chart, export_predictions, load_manifest, load_model, overlay_landmarks, save_model, write_manifest,
    Manifest, ManifestEntry, ModelArchive, Prediction, Series,
};
use spine_cascade::metrics::{cobb_angles, smape, spearman};
use spine_cascade::nn::{EncoderPreset, ADAM_LR};
use spine_cascade::pipeline::{
    center_samples, evaluate_stages, full_inference, full_inference_trace, init_sensitivity_experiment,
    prepare_working, train_full, FullTrainConfig, LabeledImage, PreprocessConfig,
};
use spine_cascade::Error;

/// Caps the worker thread count for every parallel section.
const THREADS_ENV: &str = "SPINE_CASCADE_THREADS";

#[derive(Parser)]
#[command(name = "spine-cascade", version, about = "Cascaded landmark regression for spinal radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset: graymaps plus a manifest.
    Synth(SynthArgs),
    /// Train both cascades and write a model archive.
    Train(TrainArgs),
    /// Predict 68 corners for one image or every manifest entry.
    Infer(InferArgs),
    /// Per-stage and final MSE plus SMAPE against a labeled manifest.
    Eval(EvalArgs),
    #[command(subcommand)]
    Experiment(Experiment),
    /// Error curves and landmark overlays as graymaps.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum Experiment {
    /// Final error as a function of noise on the initial shape.
    InitSensitivity(SensitivityArgs),
    /// Center cascade trained with and without the shape subspace.
    PcaAblation(AblationArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 250)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Number of trailing images tagged `test`; the rest are tagged `train`.
    #[arg(long, default_value_t = 50)]
    test: usize,
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[arg(long)]
    manifest: PathBuf,
    /// Split tag to train on; all entries when no entry carries it.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = ADAM_LR)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `full`, `tiny` or `scaled:<width>:<max_repeats>`.
    #[arg(long, default_value = "full")]
    encoder: EncoderPreset,
    #[arg(long)]
    no_flip: bool,
    #[arg(long)]
    no_clahe: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Regress raw coordinate offsets instead of subspace coefficients.
    #[arg(long)]
    no_pca: bool,
    /// Split tag used for the per-stage validation report.
    #[arg(long, default_value = "val")]
    val_split: String,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    image: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluate only entries with this split tag.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.02,0.04")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, default_value = "test")]
    test_split: String,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// Second model whose curves are drawn dimmer, e.g. a no-PCA ablation.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Also plot the initialization-sensitivity curve at these noise levels.
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    overlays: usize,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::InvalidArgument(_) | Error::InvalidState(_) => 3,
        Error::Parse { .. } | Error::Schema { .. } => 4,
        Error::Version { .. } | Error::Checksum | Error::Encoding(_) => 5,
        Error::Io(_) => 6,
        Error::TrainingDiverged(_) => 7,
        Error::DegenerateGeometry(_) => 8,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot cap threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(Experiment::InitSensitivity(a)) => sensitivity(a),
        Command::Experiment(Experiment::PcaAblation(a)) => ablation(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.test > a.count {
        bail!(Error::InvalidArgument(format!("--test {} exceeds --count {}", a.test, a.count)));
    }
    let samples = synth_generate(&SynthConfig { count: a.count, ..Default::default() }, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = Manifest::default();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("spine_{i:04}.pgm");
        s.image.write_pgm(a.out.join(&name), true)?;
        let mut extras = std::collections::BTreeMap::new();
        extras.insert("pt".to_string(), format!("{:.6}", s.true_cobb.pt));
        extras.insert("mt".to_string(), format!("{:.6}", s.true_cobb.mt));
        extras.insert("tl".to_string(), format!("{:.6}", s.true_cobb.tl));
        let split = if i + a.test >= a.count { "test" } else { "train" };
        manifest.entries.push(ManifestEntry {
            path: PathBuf::from(name),
            landmarks: s.corners.clone(),
            split: Some(split.to_string()),
            extras,
        });
    }
    write_manifest(&manifest, a.out.join("manifest.csv"))?;
    println!("wrote {} images to {}", samples.len(), a.out.display());
    Ok(())
}

fn read_images(entries: &[&ManifestEntry]) -> anyhow::Result<Vec<LabeledImage>> {
    entries
        .par_iter()
        .map(|e| {
            let image = GrayImage::read_pgm(&e.path).with_context(|| format!("reading {}", e.path.display()))?;
            Ok(LabeledImage { image, landmarks: e.landmarks.clone() })
        })
        .collect()
}

/// Entries with the given tag, or all entries when `fallback` and none has it.
fn select<'a>(m: &'a Manifest, tag: Option<&str>, fallback: bool) -> Vec<&'a ManifestEntry> {
    match tag {
        None => m.entries.iter().collect(),
        Some(t) => {
            let picked = m.split(t);
            if picked.is_empty() && fallback {
                m.entries.iter().collect()
            } else {
                picked
            }
        }
    }
}

fn train_config(o: &TrainOpts, pca: bool) -> FullTrainConfig {
    let base = FullTrainConfig::default();
    let stage = |t: TrainConfig| TrainConfig {
        stages: o.stages,
        epochs: o.epochs,
        lr: o.lr,
        batch_size: o.batch_size,
        encoder: o.encoder,
        pca,
        ..t
    };
    FullTrainConfig {
        centers: stage(base.centers),
        corners: stage(base.corners),
        preprocess: PreprocessConfig { clahe: if o.no_clahe { None } else { base.preprocess.clahe }, ..base.preprocess },
        flip: !o.no_flip,
        ..base
    }
    .with_seed(o.seed)
}

fn print_stages(label: &str, errors: &[f64]) {
    let cells: Vec<String> = errors.iter().map(|e| format!("{e:.4e}")).collect();
    println!("{label:<28} {}", cells.join("  "));
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(&a.opts.manifest)?;
    let train_set = read_images(&select(&manifest, Some(&a.opts.split), true))?;
    let val_set = read_images(&manifest.split(&a.val_split))?;
    if train_set.is_empty() {
        bail!(Error::InvalidArgument("manifest has no training entries".into()));
    }
    let cfg = train_config(&a.opts, !a.no_pca);
    cfg.centers.validate(spine_cascade::shape::ShapeKind::Centers17)?;
    cfg.corners.validate(spine_cascade::shape::ShapeKind::Corners4)?;
    info!("training on {} images, validating on {}", train_set.len(), val_set.len());
    let (model, report) = train_full(&train_set, &val_set, &cfg)?;
    print_stages("center train MSE by stage", &report.centers.errors());
    print_stages("corner train MSE by stage", &report.corners.errors());
    if !val_set.is_empty() {
        print_stages("center val MSE by stage", &report.center_validation);
        print_stages("corner val MSE by stage", &report.corner_validation);
    }
    let archive = ModelArchive { model, seed: a.opts.seed, config: Some(cfg) };
    save_model(&archive, &a.out_model)?;
    println!("saved {}", a.out_model.display());
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let archive = load_model(&a.model)?;
    let jobs: Vec<(PathBuf, Option<spine_cascade::shape::Shape>)> = match (&a.image, &a.manifest) {
        (Some(img), _) => vec![(img.clone(), None)],
        (None, Some(m)) => load_manifest(m)?.entries.into_iter().map(|e| (e.path, Some(e.landmarks))).collect(),
        (None, None) => unreachable!("clap requires --image or --manifest"),
    };
    let predictions: Vec<Prediction> = jobs
        .into_par_iter()
        .map(|(path, gt)| {
            let image = GrayImage::read_pgm(&path).with_context(|| format!("reading {}", path.display()))?;
            let landmarks = full_inference(&image, &archive.model)?;
            Ok(Prediction { path, landmarks, frame: (image.width(), image.height()), ground_truth: gt })
        })
        .collect::<anyhow::Result<_>>()?;
    export_predictions(&predictions, &a.out)?;
    println!("wrote {} predictions to {}", predictions.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let archive = load_model(&a.model)?;
    let manifest = load_manifest(&a.manifest)?;
    let images = read_images(&select(&manifest, a.split.as_deref(), false))?;
    let ev = evaluate_stages(&archive.model, &images)?;
    println!("{:<6} {:>14} {:>14}", "stage", "centers MSE", "corners MSE");
    for k in 0..ev.centers.len().max(ev.corners.len()) {
        let cell = |v: &[f64]| v.get(k).map_or_else(|| "-".to_string(), |e| format!("{e:.4e}"));
        println!("{k:<6} {:>14} {:>14}", cell(&ev.centers), cell(&ev.corners));
    }
    let final_mse = ev.per_image.iter().sum::<f64>() / ev.per_image.len() as f64;
    println!("final MSE {final_mse:.4e} over {} images", images.len());
    let pred = ev.predictions.iter().map(cobb_angles).collect::<Result<Vec<_>, _>>()?;
    let gt = images.iter().map(|li| cobb_angles(&li.landmarks)).collect::<Result<Vec<_>, _>>()?;
    println!("SMAPE {:.4}%", smape(&pred, &gt)?);
    Ok(())
}

fn sensitivity(a: SensitivityArgs) -> anyhow::Result<()> {
    let archive = load_model(&a.model)?;
    let manifest = load_manifest(&a.manifest)?;
    let images = read_images(&select(&manifest, a.split.as_deref(), false))?;
    let rows = init_sensitivity_experiment(&archive.model, &images, &a.sigmas, a.draws, a.seed)?;
    println!("{:<8} {:>14} {:>14}", "sigma", "initial MSE", "final MSE");
    for r in &rows {
        println!("{:<8} {:>14.4e} {:>14.4e}", r.sigma, r.initial_mse, r.final_mse);
    }
    if rows.len() >= 2 {
        let s: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
        let f: Vec<f64> = rows.iter().map(|r| r.final_mse).collect();
        match spearman(&s, &f)? {
            Some(rho) => println!("Spearman(sigma, final MSE) {rho:.4}"),
            None => println!("Spearman(sigma, final MSE) undefined"),
        }
    }
    Ok(())
}

fn ablation(a: AblationArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(&a.opts.manifest)?;
    let train_set = read_images(&select(&manifest, Some(&a.opts.split), false))?;
    let test_set = read_images(&manifest.split(&a.test_split))?;
    if train_set.is_empty() || test_set.is_empty() {
        bail!(Error::InvalidArgument("ablation needs tagged train and test entries".into()));
    }
    let cfg = train_config(&a.opts, true);
    let train = center_samples(&prepare_working(&train_set, &cfg.preprocess, cfg.flip)?)?;
    let test = center_samples(&prepare_working(&test_set, &cfg.preprocess, false)?)?;
    let geometry = FrameGeometry::WorkingHeight(cfg.preprocess.height);
    for (label, pca) in [("PCA", true), ("no PCA", false)] {
        let stage_cfg = TrainConfig { pca, ..cfg.centers.clone() };
        let (model, report) = train_cascade(&train, geometry, PatchSpec::CENTER, &stage_cfg)?;
        print_stages(&format!("{label} train MSE by stage"), &report.errors());
        print_stages(&format!("{label} test MSE by stage"), &stage_errors(&model, &test)?);
    }
    Ok(())
}

fn plot(a: PlotArgs) -> anyhow::Result<()> {
    let archive = load_model(&a.model)?;
    let manifest = load_manifest(&a.manifest)?;
    let images = read_images(&select(&manifest, a.split.as_deref(), false))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ev = evaluate_stages(&archive.model, &images)?;
    let mut series =
        vec![Series { values: ev.centers.clone(), intensity: 1.0 }, Series { values: ev.corners, intensity: 0.75 }];
    if let Some(other) = &a.compare {
        let other = load_model(other)?;
        series.push(Series { values: evaluate_stages(&other.model, &images)?.centers, intensity: 0.45 });
    }
    write_plot(&error_chart(&series, 480, 320), &a.out, "stage_errors.pgm")?;

    for (i, li) in images.iter().take(a.overlays).enumerate() {
        let trace = full_inference_trace(&li.image, &archive.model, None)?;
        let n = trace.center_stages.len();
        let raw_stages: Vec<_> = trace.center_stages.iter().map(|s| trace.scale.to_raw(s)).collect();
        let mut layers: Vec<(&spine_cascade::shape::Shape, f32)> = raw_stages
            .iter()
            .enumerate()
            .map(|(k, s)| (s, 0.35 + 0.4 * k as f32 / n.max(1) as f32))
            .collect();
        layers.push((&trace.landmarks, 1.0));
        write_plot(&overlay_landmarks(&li.image, &layers), &a.out, &format!("overlay_{i:03}.pgm"))?;
    }

    if !a.sigmas.is_empty() {
        let rows = init_sensitivity_experiment(&archive.model, &images, &a.sigmas, 10, 0)?;
        let chart = error_chart(
            &[
                Series { values: rows.iter().map(|r| r.initial_mse).collect(), intensity: 0.5 },
                Series { values: rows.iter().map(|r| r.final_mse).collect(), intensity: 1.0 },
            ],
            480,
            320,
        );
        write_plot(&chart, &a.out, "init_sensitivity.pgm")?;
    }
    println!("wrote plots to {}", a.out.display());
    Ok(())
}

fn write_plot(img: &GrayImage, dir: &Path, name: &str) -> anyhow::Result<()> {
    img.write_pgm(dir.join(name), false)?;
    Ok(())
}
