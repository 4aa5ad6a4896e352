use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pyramid_rfcn::ablation::{detect_all, run_ablation, small_level, write_delta_table, AblationConfig};
use pyramid_rfcn::data::checkpoint::{load_model, save_checkpoint};
use pyramid_rfcn::data::config::ExperimentConfig;
use pyramid_rfcn::data::csv::{read_detections, read_ground_truth, write_detection_header, write_detection_rows};
use pyramid_rfcn::data::dataset::{image_id_of, list_images, DatasetIndex};
use pyramid_rfcn::data::pnm::Raster;
use pyramid_rfcn::data::synth::{generate, write_dataset, SynthConfig};
use pyramid_rfcn::eval::{
    classified_eval, evaluate_classes, write_metrics_csv, write_pr_csv, write_text_report, EvalLevel, Task,
};
use pyramid_rfcn::model::Model;
use pyramid_rfcn::train::{train_with_progress, write_loss_log, Sample};
use pyramid_rfcn::Error;

/// Multi-scale detector toolkit: data generation, training, detection, evaluation.
#[derive(Parser)]
#[command(name = "msp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Run a checkpoint on an image or a directory of images.
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Train fused and single-scale models and compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    images: usize,
    /// Index of the first image; distinct ranges give disjoint splits.
    #[arg(long, default_value_t = 0)]
    first: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    objects_min: usize,
    #[arg(long, default_value_t = 4)]
    objects_max: usize,
    #[arg(long, default_value_t = 6)]
    height_min: usize,
    #[arg(long, default_value_t = 48)]
    height_max: usize,
    #[arg(long, default_value_t = 0.5)]
    clutter: f64,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; overrides `[data] train`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of .pgm/.ppm images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    score_thresh: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// L1, L2, all, small, or MIN[:MAX] in pixels.
    #[arg(long, default_value = "all")]
    level: String,
    /// Evaluated image count; defaults to the images named in either file.
    #[arg(long)]
    images: Option<usize>,
    /// Relabelling task, e.g. `L-R:1=left,2=right`. Repeatable.
    #[arg(long = "task")]
    tasks: Vec<String>,
    #[arg(long)]
    report_csv: Option<PathBuf>,
    #[arg(long)]
    pr_csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Model and training settings; without one the benchmark defaults apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    train_images: usize,
    #[arg(long, default_value_t = 200)]
    test_images: usize,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    /// Directory for loss logs and detections of both variants.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        width: a.width,
        height: a.height,
        images: a.images,
        objects_min: a.objects_min,
        objects_max: a.objects_max,
        height_min: a.height_min,
        height_max: a.height_max,
        classes: a.classes,
        clutter: a.clutter,
        noise: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let images = generate(&cfg, a.first)?;
    let summary = write_dataset(&a.out, &cfg, &images)?;
    println!(
        "wrote {} images, {} objects ({:.1}% under 16 px, {} skipped) to {}",
        images.len(),
        summary.objects,
        100.0 * summary.small_fraction(),
        summary.skipped,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = a.data {
        cfg.data.train = Some(d);
    }
    let dir = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Failure::Usage("no dataset: pass --data or set [data] train".into()))?;
    let index = DatasetIndex::load(&dir)?;
    if index.classes > cfg.model.head.classes {
        return Err(Failure::Data(Error::Data(format!(
            "dataset has {} classes, model has {}",
            index.classes, cfg.model.head.classes
        ))));
    }
    let samples: Vec<Sample> = index.samples()?;
    let mut model = Model::new(cfg.model.clone())?;
    let every = (cfg.train.iterations / 20).max(1);
    let log = train_with_progress(&mut model, &samples, &cfg.train, |r| {
        if r.iteration % every == 0 {
            log::info!("iteration {} loss {:.4} lr {}", r.iteration, r.total, r.lr);
        }
    })?;
    save_checkpoint(&a.out, &cfg, &model.params)?;
    if let Some(path) = a.loss_log {
        let mut out = create(&path)?;
        write_loss_log(&mut out, &log)?;
        out.flush()?;
    }
    println!("trained {} iterations on {} images; checkpoint {}", log.len(), samples.len(), a.out.display());
    Ok(())
}

fn detect(a: DetectArgs) -> CliResult {
    let (model, cfg) = load_model(&a.checkpoint)?;
    let paths = if a.input.is_dir() {
        list_images(&a.input)?
    } else if a.input.is_file() {
        vec![a.input.clone()]
    } else {
        return Err(Failure::Data(Error::Data(format!("{} does not exist", a.input.display()))));
    };
    let samples = paths
        .iter()
        .map(|p| {
            Ok(Sample {
                image_id: image_id_of(p),
                image: Raster::read(p)?.to_tensor(),
                boxes: Vec::new(),
                classes: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let thresh = a.score_thresh.unwrap_or(cfg.detect.score_thresh);
    let nms_iou = a.nms_iou.unwrap_or(cfg.detect.nms_iou);
    let dets = detect_all(&model, &samples, thresh, nms_iou)?;
    let mut out = create(&a.out)?;
    write_detection_header(&mut out)?;
    write_detection_rows(&mut out, &dets)?;
    out.flush()?;
    println!("{} detections in {} images", dets.len(), samples.len());
    Ok(())
}

fn parse_level(s: &str) -> Result<EvalLevel, Failure> {
    if let Some(level) = EvalLevel::by_name(s) {
        return Ok(level);
    }
    if s.eq_ignore_ascii_case("small") {
        return Ok(small_level());
    }
    let bad = || Failure::Usage(format!("bad level `{s}`"));
    let (lo, hi) = match s.split_once(':') {
        Some((lo, hi)) => (lo, Some(hi)),
        None => (s, None),
    };
    let lo: f64 = lo.parse().map_err(|_| bad())?;
    let hi = hi.map(|h| h.parse::<f64>().map_err(|_| bad())).transpose()?;
    EvalLevel::new(s, lo, hi).map_err(|_| bad())
}

fn parse_task(s: &str) -> Result<Task, Failure> {
    let bad = || Failure::Usage(format!("bad task `{s}`; expected NAME:ID=LABEL,..."));
    let (name, body) = s.split_once(':').ok_or_else(bad)?;
    let labels = body
        .split(',')
        .map(|pair| {
            let (id, label) = pair.split_once('=').ok_or_else(bad)?;
            Ok((id.trim().parse().map_err(|_| bad())?, label.trim().to_string()))
        })
        .collect::<Result<BTreeMap<usize, String>, Failure>>()?;
    Ok(Task {
        name: name.to_string(),
        labels,
    })
}

fn eval(a: EvalArgs) -> CliResult {
    let level = parse_level(&a.level)?;
    let tasks = a.tasks.iter().map(|t| parse_task(t)).collect::<Result<Vec<_>, _>>()?;
    let dets = read_detections(&a.detections)?;
    let gts = read_ground_truth(&a.gt)?;
    let image_count = a.images.unwrap_or_else(|| {
        let ids: BTreeSet<&str> = gts
            .iter()
            .map(|g| g.image_id.as_str())
            .chain(dets.iter().map(|d| d.image_id.as_str()))
            .collect();
        ids.len()
    });
    if image_count == 0 {
        return Err(Failure::Data(Error::Data("no images to evaluate".into())));
    }
    let classes: Vec<usize> = gts
        .iter()
        .map(|g| g.class_id)
        .chain(dets.iter().map(|d| d.class_id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let metrics = evaluate_classes(&dets, &gts, &classes, &level, image_count);
    let task_metrics = classified_eval(&dets, &gts, &tasks, &level, image_count)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    write_text_report(&mut out, &level, &metrics)?;
    for t in &task_metrics {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        writeln!(out, "task {}  AP {}  AR {}", t.task, fmt(t.mean_ap), fmt(t.mean_ar))?;
    }
    if let Some(path) = a.report_csv {
        let mut f = create(&path)?;
        write_metrics_csv(&mut f, &level, &metrics, &task_metrics)?;
        f.flush()?;
    }
    if let Some(path) = a.pr_csv {
        let mut f = create(&path)?;
        write_pr_csv(&mut f, &metrics)?;
        f.flush()?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult {
    let mut cfg = AblationConfig {
        train_images: a.train_images,
        test_images: a.test_images,
        ..AblationConfig::default()
    };
    if let Some(p) = &a.config {
        let exp = ExperimentConfig::load(p)?;
        cfg.model = exp.model;
        cfg.train = exp.train;
        cfg.score_thresh = exp.detect.score_thresh;
        cfg.nms_iou = exp.detect.nms_iou;
    }
    cfg.synth.seed = a.data_seed;
    cfg.synth.classes = cfg.model.head.classes;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let every = (cfg.train.iterations / 10).max(1);
    let report = run_ablation(&cfg, |name, r| {
        if r.iteration % every == 0 {
            log::info!("{name}: iteration {} loss {:.4}", r.iteration, r.total);
        }
    })?;
    write_delta_table(&mut io::stdout().lock(), &report)?;
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        for v in [&report.fused, &report.single] {
            let mut f = create(&dir.join(format!("{}_loss.csv", v.name)))?;
            write_loss_log(&mut f, &v.log)?;
            f.flush()?;
            let mut f = create(&dir.join(format!("{}_detections.csv", v.name)))?;
            write_detection_header(&mut f)?;
            write_detection_rows(&mut f, &v.detections)?;
            f.flush()?;
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("MSP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("MSP_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
