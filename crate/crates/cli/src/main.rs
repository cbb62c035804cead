//! `firedet` command-line front end. Primary output goes to stdout,
//! diagnostics to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use firedet::anchors::{kmeans, KmeansConfig};
use firedet::augment::{mosaic_seeded, resize, to_rgb8, MosaicConfig};
use firedet::config::{RunConfig, Task};
use firedet::dataset::{
    build_manifest, filter_directory, load_manifest, write_list, FilterConfig, VocAnnotation, write_voc_xml,
};
use firedet::detector::{format_detections, parse_detection};
use firedet::eval::{
    classification_metrics, classification_table, load_ground_truth, map_table, mean_average_precision, parse_labels,
    ApMode, ImageDetection,
};
use firedet::gradcheck::{gradcheck_micro, FD_STEP, TOLERANCE};
use firedet::image::{draw_rect, read_ppm, write_ppm, PpmDecoder, RgbImage};
use firedet::loss::{AlphaGrad, BoxMode};
use firedet::model::{load_network, Network};
use firedet::params::ParamStore;
use firedet::train::train;
use firedet::Tensor64;

#[derive(Parser)]
#[command(name = "firedet", version, about = "Fire and smoke detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector or classifier from a manifest.
    Train(TrainArgs),
    /// Detect fire and smoke boxes in PPM images.
    Detect(DetectArgs),
    /// Fire/Normal classification of PPM images.
    Classify(ClassifyArgs),
    /// Pascal VOC mAP of a detection dump against annotated images.
    EvalMap(EvalMapArgs),
    /// FP rate, FN rate and accuracy of classification output.
    EvalCls(EvalClsArgs),
    /// Dataset construction tools.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// k-means anchor shapes for a manifest.
    Anchors(AnchorsArgs),
    /// Finite-difference gradient check of the micro network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to the one saved next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    mosaic_prob: Option<f64>,
    /// Write the effective config here and continue.
    #[arg(long)]
    emit_config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Detect,
    Classify,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    conf: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Write each image with its boxes drawn into this directory.
    #[arg(long)]
    annotate: Option<PathBuf>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApModeArg {
    AllPoints,
    ElevenPoint,
}

#[derive(Args)]
struct EvalMapArgs {
    /// Detection dump (`image_id class_id score cx cy w h` per line).
    #[arg(long)]
    dets: PathBuf,
    /// Manifest of annotated images; ids are file stems.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "all-points")]
    ap_mode: ApModeArg,
    #[arg(long, default_value_t = firedet::eval::DEFAULT_MATCH_IOU)]
    iou: f64,
    #[arg(long, default_value = "FSDNet")]
    method: String,
    #[arg(long, default_value = "dense")]
    backbone: String,
}

#[derive(Args)]
struct EvalClsArgs {
    /// `classify` output; the label column (Fire/Normal) is read per line.
    #[arg(long)]
    preds: PathBuf,
    /// One `id 0|1` line per image, same order as the predictions.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value = "FSDNet")]
    method: String,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Apply the proportion, SNR and color filters to a directory of PPM+XML pairs.
    Filter(FilterArgs),
    /// Compose one Mosaic from the first four manifest entries.
    MosaicPreview(MosaicArgs),
    /// Seeded train/val/test split of a list of entries.
    Split(SplitArgs),
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    /// Kept pairs are copied here.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.30)]
    min_ratio: f64,
    #[arg(long, default_value_t = 35.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0.5)]
    color_fraction: f64,
}

#[derive(Args)]
struct MosaicArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output path without extension; `.ppm` and `.xml` are written.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    list: PathBuf,
    /// Directory receiving train.txt, val.txt and test.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnchorsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = FD_STEP)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Classify(a) => cmd_classify(a),
        Command::EvalMap(a) => cmd_eval_map(a),
        Command::EvalCls(a) => cmd_eval_cls(a),
        Command::Dataset(DatasetCommand::Filter(a)) => cmd_filter(a),
        Command::Dataset(DatasetCommand::MosaicPreview(a)) => cmd_mosaic(a),
        Command::Dataset(DatasetCommand::Split(a)) => cmd_split(a),
        Command::Anchors(a) => cmd_anchors(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn sibling_config(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.manifest {
        cfg.paths.train_manifest = Some(v);
    }
    if let Some(v) = a.checkpoint {
        cfg.paths.checkpoint = Some(v);
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.task {
        cfg.train.task = match v {
            TaskArg::Detect => Task::Detect,
            TaskArg::Classify => Task::Classify,
        };
    }
    if let Some(v) = a.mosaic_prob {
        cfg.train.mosaic_prob = v;
    }
    cfg.validate()?;
    if let Some(p) = &a.emit_config {
        fs::write(p, cfg.to_toml()).with_context(|| format!("writing {}", p.display()))?;
    }
    let manifest = cfg.paths.train_manifest.clone().context("no training manifest (--manifest or paths.train_manifest)")?;
    let checkpoint = cfg.paths.checkpoint.clone().context("no checkpoint path (--checkpoint or paths.checkpoint)")?;
    let samples: Vec<_> = load_manifest(&manifest)?.into_iter().map(|(_, s)| s).collect();
    let mut log_file = match &cfg.paths.log {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let t0 = Instant::now();
    let mut stdout = std::io::stdout().lock();
    let (trainer, _) = train::<f64>(&cfg, &samples, |step, b| {
        let line = b.log_line(step);
        let _ = writeln!(stdout, "{line}");
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{line}");
        }
    })?;
    trainer.store.save(&checkpoint)?;
    fs::write(sibling_config(&checkpoint), cfg.to_toml())?;
    eprintln!(
        "trained {} steps in {:.2}s, checkpoint {}",
        cfg.train.steps,
        t0.elapsed().as_secs_f64(),
        checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn open_model(m: &ModelArgs) -> Result<(RunConfig, ParamStore<f64>, Network)> {
    let cfg_path = m.config.clone().or_else(|| {
        let p = sibling_config(&m.checkpoint);
        p.exists().then_some(p)
    });
    let cfg = load_config(cfg_path.as_deref())?;
    let (store, net) = load_network::<f64>(cfg.model_config(), &m.checkpoint)?;
    Ok((cfg, store, net))
}

fn image_id(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn network_input(img: &RgbImage, size: usize) -> Tensor64 {
    let t = img.to_tensor::<f64>();
    if img.width == size && img.height == size {
        t
    } else {
        resize(&t, size, size)
    }
}

fn cmd_detect(a: DetectArgs) -> Result<ExitCode> {
    let (cfg, store, net) = open_model(&a.model)?;
    let conf = a.conf.unwrap_or(cfg.detect.conf_threshold);
    let nms_iou = a.nms_iou.unwrap_or(cfg.detect.nms_iou);
    if let Some(d) = &a.annotate {
        fs::create_dir_all(d)?;
    }
    let mut out = std::io::stdout().lock();
    for path in &a.images {
        let img = read_ppm(path)?;
        let t0 = Instant::now();
        let dets = net.detect(&store, &network_input(&img, net.input_size()), conf, nms_iou)?;
        let elapsed = t0.elapsed();
        let id = image_id(path);
        write!(out, "{}", format_detections(&id, &dets[0]))?;
        eprintln!("{id}: {} detections in {:.3} ms", dets[0].len(), elapsed.as_secs_f64() * 1e3);
        if let Some(d) = &a.annotate {
            let mut canvas = img.clone();
            let (w, h) = (img.width as f64, img.height as f64);
            for det in &dets[0] {
                let (x1, y1, x2, y2) = det.bbox.corners();
                let color = if det.class_id == 0 { [255, 64, 0] } else { [0, 200, 255] };
                draw_rect(
                    &mut canvas,
                    (x1 * w).round() as i64,
                    (y1 * h).round() as i64,
                    (x2 * w).round() as i64 - 1,
                    (y2 * h).round() as i64 - 1,
                    color,
                );
            }
            write_ppm(&canvas, &d.join(format!("{id}.ppm")))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_classify(a: ClassifyArgs) -> Result<ExitCode> {
    let (cfg, store, net) = open_model(&a.model)?;
    let threshold = a.threshold.unwrap_or(cfg.classify.threshold);
    let mut out = std::io::stdout().lock();
    for path in &a.images {
        let img = read_ppm(path)?;
        let t0 = Instant::now();
        let r = net.classify(&store, &network_input(&img, net.input_size()))?;
        let elapsed = t0.elapsed();
        let label = if r[0].is_fire(threshold) { "Fire" } else { "Normal" };
        writeln!(out, "{} {label} {:.6}", image_id(path), r[0].p_fire)?;
        eprintln!("{}: {:.3} ms", image_id(path), elapsed.as_secs_f64() * 1e3);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval_map(a: EvalMapArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.dets).with_context(|| format!("reading {}", a.dets.display()))?;
    let dets = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            parse_detection(l)
                .map(|(image_id, det)| ImageDetection { image_id, det })
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", a.dets.display(), i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let gts = load_ground_truth(&a.gt)?;
    let mode = match a.ap_mode {
        ApModeArg::AllPoints => ApMode::AllPoints,
        ApModeArg::ElevenPoint => ApMode::ElevenPoint,
    };
    let r = mean_average_precision(&dets, &gts, mode, a.iou);
    print!("{}", map_table(&a.method, &a.backbone, &r));
    if let Some(rate) = firedet::eval::detection_rate(&dets, &gts, a.iou) {
        eprintln!("detection rate {:.2}%", 100.0 * rate);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval_cls(a: EvalClsArgs) -> Result<ExitCode> {
    let preds_text = fs::read_to_string(&a.preds).with_context(|| format!("reading {}", a.preds.display()))?;
    let preds = preds_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.split_whitespace().nth(1) {
            Some("Fire") => Ok(true),
            Some("Normal") => Ok(false),
            _ => bail!("cannot read a Fire/Normal label from {l:?}"),
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = parse_labels(&fs::read_to_string(&a.truth).with_context(|| format!("reading {}", a.truth.display()))?)
        .map_err(anyhow::Error::msg)?;
    let m = classification_metrics(&preds, &labels)?;
    print!("{}", classification_table(&a.method, &m));
    Ok(ExitCode::SUCCESS)
}

fn cmd_filter(a: FilterArgs) -> Result<ExitCode> {
    let cfg = FilterConfig {
        min_ratio: a.min_ratio,
        snr_db: a.snr_db,
        color_fraction: a.color_fraction,
        ..FilterConfig::default()
    };
    let report = filter_directory(&a.input, &a.output, &cfg, &PpmDecoder)?;
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_mosaic(a: MosaicArgs) -> Result<ExitCode> {
    let samples = load_manifest(&a.manifest)?;
    if samples.len() < 4 {
        bail!("mosaic needs 4 images, {} lists {}", a.manifest.display(), samples.len());
    }
    let four: Vec<_> = samples.into_iter().take(4).map(|(_, s)| s).collect();
    let mut cfg = MosaicConfig::new(a.size);
    cfg.seed = a.seed;
    cfg.validate()?;
    let m = mosaic_seeded(&four, &cfg)?;
    let img = RgbImage {
        width: a.size,
        height: a.size,
        data: to_rgb8(&m.image),
    };
    let ppm = a.out.with_extension("ppm");
    let xml = a.out.with_extension("xml");
    write_ppm(&img, &ppm)?;
    let name = ppm.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write_voc_xml(&VocAnnotation::from_boxes(&name, a.size as u32, a.size as u32, &m.boxes), &xml)?;
    println!("{}", ppm.display());
    println!("{}", xml.display());
    eprintln!("{} boxes", m.boxes.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_split(a: SplitArgs) -> Result<ExitCode> {
    let items = firedet::dataset::read_list(&a.list)?;
    let m = build_manifest(&items, (a.ratios[0], a.ratios[1], a.ratios[2]), a.seed)?;
    fs::create_dir_all(&a.out)?;
    for (name, part) in [("train", &m.train), ("val", &m.val), ("test", &m.test)] {
        write_list(&a.out.join(format!("{name}.txt")), part)?;
        println!("{name} {}", part.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_anchors(a: AnchorsArgs) -> Result<ExitCode> {
    let s = a.input_size as f64;
    let shapes: Vec<(f64, f64)> = load_manifest(&a.manifest)?
        .iter()
        .flat_map(|(_, smp)| smp.boxes.iter().map(|b| (b.w * s, b.h * s)).collect::<Vec<_>>())
        .collect();
    let r = kmeans(
        &shapes,
        &KmeansConfig {
            k: a.k,
            seed: a.seed,
            ..KmeansConfig::default()
        },
    )?;
    for (w, h) in &r.centers {
        println!("{w:.3} {h:.3}");
    }
    eprintln!("{} boxes, mean IoU {:.4}", shapes.len(), r.mean_iou);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let t0 = Instant::now();
    let mut ok = true;
    for (mode, alpha) in [
        (BoxMode::Mse, AlphaGrad::Detached),
        (BoxMode::Ciou, AlphaGrad::Detached),
        (BoxMode::Ciou, AlphaGrad::Full),
    ] {
        let r = gradcheck_micro(mode, alpha, a.step, a.seed)?;
        println!(
            "{:?} {:?} checked {} max_rel_err {:.3e} at {} {}",
            mode,
            alpha,
            r.checked,
            r.max_rel_err,
            r.worst,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    eprintln!("tolerance {TOLERANCE:e}, step {:e}, {:.2}s", a.step, t0.elapsed().as_secs_f64());
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
