//! Command-line front end. Every subcommand is a thin wrapper over the
//! library; failures become one `error: code=N kind=K: message` line.

pub mod render;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kneegrade_core::backbone::LAYER_MERGED;
use kneegrade_core::data::{
    load_image, load_manifest, stratified_split, synth_dataset, Dataset, DatasetManifest, GradeRecord, Split,
    SplitOptions, SplitRatios,
};
use kneegrade_core::gradcam::{gradcam, layer_names, render_overlay, save_rgb};
use kneegrade_core::metrics::{ConfusionMatrix, MetricsReport};
use kneegrade_core::tensor::argmax;
use kneegrade_core::train::{
    evaluate_checkpoint, init_threads, train, Checkpoint, Evaluation, LoadOptions, RunConfig, TrainOptions,
};
use kneegrade_core::{Error, Result};
use rand::Rng;

pub const THREADS_ENV: &str = "OSTEO_THREADS";

const AFTER_HELP: &str = "\
Exit codes: 0 success, 2 usage, 3 data (manifest, image, I/O), \
4 config (config file, checkpoint, architecture), 5 numeric (non-finite loss).
Errors are printed as one line: `error: code=N kind=KIND: message`.
OSTEO_THREADS sets the worker count; 0 forces single-threaded deterministic mode.";

#[derive(Debug, Parser)]
#[command(name = "kneegrade", version, about = "Knee radiograph severity grading", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic graded image set and its manifest.
    Synth(SynthArgs),
    /// Assign train/test/val splits, stratified by grade.
    Split(SplitArgs),
    /// Train from a TOML run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Write Grad-CAM overlays for one or more images.
    Gradcam(GradcamArgs),
    /// Summarize a confusion-matrix CSV and optionally render it.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub per_grade: usize,
    /// Random seed; drawn and logged when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    Record,
    Patient,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train:test:val proportions.
    #[arg(long, default_value = "7:2:1")]
    pub ratios: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep all records of a patient in one split.
    #[arg(long, value_enum, default_value_t = GroupBy::Record)]
    pub group_by: GroupBy,
    /// Fail instead of warning when a grade has no records.
    #[arg(long)]
    pub strict: bool,
    /// Where to write the split manifest; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for checkpoints and the epoch log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Metrics CSV (`metric,value`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Confusion-matrix CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    /// Per-sample predictions CSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image; repeat for several.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Grade to explain; the predicted grade when omitted.
    #[arg(long)]
    pub class: Option<usize>,
    /// Feature map to explain.
    #[arg(long, default_value = LAYER_MERGED)]
    pub layer: String,
    /// Output directory; one `<name>.cam.png` per input.
    #[arg(long)]
    pub out: PathBuf,
    /// Heatmap opacity.
    #[arg(long, default_value_t = 0.45)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub confusion: PathBuf,
    /// PNG rendering of the matrix.
    #[arg(long)]
    pub render: Option<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: code=2 kind=usage: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    let threads = std::env::var(THREADS_ENV).ok();
    match init_threads(threads.as_deref()).and_then(|()| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}

pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error: code={} kind={}: {msg}", e.exit_code(), e.kind())
}

fn seed_or_draw(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::rng().random();
        log::info!("no --seed given; using {s}");
        s
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Gradcam(a) => gradcam_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = seed_or_draw(a.seed);
    let m = synth_dataset(&a.out, a.per_grade, a.size, seed)?;
    println!("wrote {} images and {}", m.len(), a.out.join("manifest.csv").display());
    Ok(())
}

fn split_summary(m: &DatasetManifest) -> String {
    let counts = m.counts();
    let mut out = String::from("split,kl0,kl1,kl2,kl3,kl4,total\n");
    for s in Split::ALL {
        let row = counts[s.index()];
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&format!("{},{},{}\n", s.as_str(), cells.join(","), row.iter().sum::<usize>()));
    }
    out
}

/// Record paths rewritten so they resolve from `target_dir`.
fn rebase(m: &DatasetManifest, target_dir: &Path) -> Result<DatasetManifest> {
    let same = match (m.root().canonicalize(), target_dir.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Ok(m.clone());
    }
    let records = m
        .records()
        .iter()
        .map(|r| {
            let abs = m.resolve(r);
            let path = std::path::absolute(&abs).unwrap_or(abs);
            GradeRecord { path, ..r.clone() }
        })
        .collect();
    Ok(DatasetManifest::new(records)?.with_root(target_dir))
}

fn split(a: SplitArgs) -> Result<()> {
    let ratios = SplitRatios::parse(&a.ratios)?;
    let seed = seed_or_draw(a.seed);
    let m = load_manifest(&a.manifest)?;
    let opts = SplitOptions {
        group_by_patient: a.group_by == GroupBy::Patient,
        strict: a.strict,
    };
    let out = stratified_split(m.records(), ratios, seed, opts)?.with_root(m.root());
    match &a.out {
        Some(path) => {
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            rebase(&out, dir)?.save(path)?;
            print!("{}", split_summary(&out));
        }
        None => {
            print!("{}", out.to_csv()?);
            eprint!("{}", split_summary(&out));
        }
    }
    Ok(())
}

/// Loads one split, warning about (and skipping) unreadable images.
pub fn load_split(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Dataset> {
    let (ds, errors) = Dataset::from_manifest(manifest, split, size);
    for e in &errors {
        log::warn!("skipping: {e}");
    }
    if ds.is_empty() {
        return Err(match errors.into_iter().next() {
            Some(e) => e,
            None => Error::input(format!("{} split has no records", split.as_str())),
        });
    }
    Ok(ds)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let manifest_path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::config("config has no [data] manifest"))?;
    let manifest = load_manifest(&manifest_path)?;
    let size = cfg.model.input_size;
    let train_ds = load_split(&manifest, Split::Train, size)?;
    let val_ds = load_split(&manifest, Split::Val, size)?;
    let resume = a.resume.as_deref().map(|p| Checkpoint::load(p, LoadOptions::default())).transpose()?;
    log::info!("training on {} images, validating on {}", train_ds.len(), val_ds.len());
    let out = train(
        &cfg,
        &train_ds,
        &val_ds,
        TrainOptions {
            out_dir: Some(&a.out),
            resume,
            on_epoch: None,
        },
    )?;
    if let Some(l) = out.logs.last() {
        println!("epoch {}: train loss {:.4}, val {}", l.epoch, l.train_loss, l.val);
    }
    println!(
        "best val accuracy {:.4} at epoch {}; checkpoints in {}",
        out.last.best_accuracy,
        out.last.best_epoch,
        a.out.display()
    );
    Ok(())
}

/// The library evaluation the `eval` subcommand reports, with the
/// evaluated dataset.
pub fn evaluate_split(checkpoint: &Path, manifest: &Path, split: Split) -> Result<(Evaluation, Dataset)> {
    let ck = Checkpoint::load(checkpoint, LoadOptions::default())?;
    let m = load_manifest(manifest)?;
    let ds = load_split(&m, split, ck.config.model.input_size)?;
    Ok((evaluate_checkpoint(&ck, &ds)?, ds))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ev, ds) = evaluate_split(&a.checkpoint, &a.manifest, a.split.into())?;
    let r = &ev.report;
    println!("samples {}", r.samples);
    println!("accuracy {}", r.accuracy);
    println!("mae {}", r.mae);
    match r.qwk {
        Some(k) => println!("qwk {k}"),
        None => println!("qwk undefined"),
    }
    if let Some(p) = &a.report {
        write_file(p, &r.to_csv())?;
    }
    if let Some(p) = &a.confusion {
        write_file(p, &ev.confusion.to_csv())?;
    }
    if let Some(p) = &a.predictions {
        let mut text = String::from("path,true,predicted\n");
        for ((name, t), pred) in ds.names.iter().zip(&ds.grades).zip(&ev.predictions) {
            text.push_str(&format!("{name},{t},{pred}\n"));
        }
        write_file(p, &text)?;
    }
    Ok(())
}

fn gradcam_cmd(a: GradcamArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint, LoadOptions::default())?;
    let model = &ck.config.model;
    if !layer_names(model).contains(&a.layer) {
        return Err(Error::UnknownLayer(format!("{} (available: {})", a.layer, layer_names(model).join(", "))));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for path in &a.image {
        let plane = load_image(path, model.input_size)?;
        let x = kneegrade_core::data::imaging::replicate_channels(&plane, model.in_channels)?;
        let x = x.reshape(&[1, model.in_channels, model.input_size, model.input_size])?;
        let class = match a.class {
            Some(c) => c,
            None => {
                let (fw, logits) = kneegrade_core::backbone::forward(
                    model,
                    &ck.params,
                    &x,
                    kneegrade_core::backbone::ForwardOptions::eval(),
                )?;
                argmax(fw.graph.value(logits).data())
            }
        };
        let heat = gradcam(model, &ck.params, &x, class, &a.layer)?;
        let base = image::open(path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                msg: e.to_string(),
            })?
            .to_luma8();
        let overlay = render_overlay(&heat, &base, a.alpha)?;
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let target = a.out.join(format!("{stem}.cam.png"));
        save_rgb(&overlay, &target)?;
        println!("{} class {class} layer {} -> {}", path.display(), a.layer, target.display());
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.confusion).map_err(|e| Error::io(&a.confusion, e))?;
    let cm = ConfusionMatrix::from_csv(&text, &a.confusion)?;
    print!("{cm}");
    match MetricsReport::from_confusion(&cm) {
        Ok(r) => println!("{r}"),
        Err(e) => log::warn!("{e}"),
    }
    if let Some(p) = &a.render {
        render::render_confusion(&cm, p)?;
        println!("rendered {}", p.display());
    }
    Ok(())
}
