//! `mtinet`: phantom generation, training, cross-validation and evaluation.

mod pgm;
mod settings;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtinet::metrics::MeanStd;
use mtinet::model::checkpoint::Checkpoint;
use mtinet::model::{ModelConfig, Prepared, Tasks};
use mtinet::phantom::{generate_dataset, kfold_split, load_dataset, DatasetManifest};
use mtinet::tensor::nn::NormMode;
use mtinet::training::{cross_validate, evaluate, run_ablation, run_fold, run_synergy, MetricSummary, TrainConfig};
use serde::Serialize;

use settings::resolve_seed;

/// Exit codes: 0 success, 2 usage, 3 I/O, 4 numerical failure, 5 compatibility.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<mtinet::Error> for CliError {
    fn from(e: mtinet::Error) -> Self {
        use mtinet::Error as E;
        let code = match &e {
            E::Config(_) | E::Shape(_) => 2,
            E::Io { .. } | E::Format { .. } | E::Json(_) => 3,
            E::Numerical { .. } => 4,
            E::Compatibility { .. } => 5,
            E::Contract(_) => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mtinet", version, about = "Multi-task liver-lesion network on synthetic four-phase phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    Generate(GenerateArgs),
    /// Train on a stratified 80/20 split and save a checkpoint.
    Train(TrainArgs),
    /// Stratified k-fold cross-validation, optionally over ablation or task variants.
    Crossval(CrossvalArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    per_class: Option<usize>,
    /// Image side length; a power of two in [16, 256].
    #[arg(long)]
    size: Option<usize>,
    /// Standard deviation of the additive noise.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_mdief: bool,
    #[arg(long)]
    no_spe: bool,
    #[arg(long)]
    no_spa: bool,
    #[arg(long)]
    no_tim: bool,
    #[arg(long)]
    no_tdd: bool,
    /// Comma-separated subset of seg, reg, cls.
    #[arg(long)]
    tasks: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    /// Folds trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, conflicts_with = "synergy")]
    ablation: bool,
    #[arg(long)]
    synergy: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    BatchStats,
    Running,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Write one P5 mask image per evaluated sample.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    /// Require the checkpoint to match this configuration's model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Score every sample instead of the checkpoint's held-out files.
    #[arg(long)]
    all: bool,
    #[arg(long, value_enum)]
    norm: Option<Norm>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Crossval(a) => crossval(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let loaded = settings::load(a.config.as_deref())?;
    let mut phantom = loaded.file.phantom;
    if let Some(s) = a.size {
        if !s.is_power_of_two() || !(16..=256).contains(&s) {
            return Err(CliError::usage(format!("--size {s}: size must be a power of two in [16, 256]")));
        }
        phantom.height = s;
        phantom.width = s;
    }
    if let Some(n) = a.noise {
        if !n.is_finite() || n < 0.0 {
            return Err(CliError::usage(format!("--noise {n}: must be finite and >= 0")));
        }
        phantom.noise_sigma = n;
    }
    let per_class = a.per_class.or(loaded.file.per_class).unwrap_or(120);
    if per_class < 5 {
        return Err(CliError::usage(format!("--per-class {per_class}: at least 5 samples per class are required")));
    }
    let file_seed = loaded.seed_set.then_some(loaded.file.train.seed);
    let seed = resolve_seed(a.seed, file_seed)?;
    println!("seed: {seed}");
    let m = generate_dataset(&a.out, per_class, &phantom, seed)?;
    let counts = m.class_counts();
    println!(
        "generated {} samples ({} hemangioma, {} hcc) of {}x{} in {}, noise sigma {}, seed {}, {} clamped pixels",
        m.count,
        counts[0],
        counts[1],
        m.height,
        m.width,
        a.out.display(),
        m.noise_sigma,
        m.seed,
        m.clamped_pixels
    );
    Ok(())
}

/// Resolves the effective training configuration: flags over file over defaults.
fn train_config(flags: &TrainFlags, manifest: &DatasetManifest) -> CliResult<(TrainConfig, Option<usize>)> {
    let loaded = settings::load(flags.config.as_deref())?;
    let mut c = loaded.file.train;
    let file_seed = loaded.seed_set.then_some(c.seed);
    c.seed = resolve_seed(flags.seed, file_seed)?;
    if let Some(e) = flags.epochs {
        c.epochs = e;
    }
    if let Some(lr) = flags.lr {
        c.lr = lr;
    }
    if let Some(b) = flags.batch_size {
        c.batch_size = b;
    }
    let ab = &mut c.model.ablation;
    for (flag, slot) in [
        (flags.no_mdief, &mut ab.use_mdief),
        (flags.no_spe, &mut ab.use_spe),
        (flags.no_spa, &mut ab.use_spa),
        (flags.no_tim, &mut ab.use_tim),
        (flags.no_tdd, &mut ab.use_tdd),
    ] {
        if flag {
            *slot = false;
        }
    }
    if let Some(t) = &flags.tasks {
        c.model.tasks = Tasks::parse(t).map_err(|e| CliError::usage(format!("--tasks: {e}")))?;
    }
    let dims = (manifest.height, manifest.width);
    if loaded.dims_set && (c.model.height, c.model.width) != dims {
        return Err(CliError::usage(format!(
            "--config: model extents {}x{} differ from the dataset's {}x{}",
            c.model.height, c.model.width, dims.0, dims.1
        )));
    }
    c.model.height = dims.0;
    c.model.width = dims.1;
    c.validate().map_err(|e| CliError::usage(format!("configuration: {e}")))?;
    Ok((c, loaded.file.jobs))
}

fn prepare(dir: &Path, model: &ModelConfig) -> CliResult<(DatasetManifest, Vec<Prepared>)> {
    let (manifest, samples) = load_dataset(dir)?;
    let data = samples
        .iter()
        .map(|s| Prepared::new(s, model.high_pass))
        .collect::<mtinet::Result<Vec<_>>>()?;
    Ok((manifest, data))
}

fn read_manifest(dir: &Path) -> CliResult<DatasetManifest> {
    let path = dir.join(mtinet::phantom::MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("--data {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(format!("--data {}: {e}", path.display())))
}

fn summary_line(m: &MetricSummary) -> String {
    let f = |name: &str, v: Option<MeanStd>| v.map(|v| format!("{name} {:.2} ± {:.2}", v.mean, v.std));
    [
        f("DSC", m.dsc),
        f("IoU", m.iou),
        f("MAE", m.mae),
        m.accuracy.map(|a| format!("accuracy {a:.4}")),
    ]
    .into_iter()
    .flatten()
    .collect::<Vec<_>>()
    .join(", ")
}

#[derive(Serialize)]
struct TrainReport<'a> {
    command: &'static str,
    seed: u64,
    config: &'a TrainConfig,
    data: String,
    train_files: Vec<String>,
    test_files: Vec<String>,
    checkpoint: String,
    fold: &'a mtinet::training::FoldReport,
    wall_seconds: f64,
}

fn train(a: TrainArgs) -> CliResult<()> {
    let manifest = read_manifest(&a.data)?;
    let (config, _) = train_config(&a.flags, &manifest)?;
    println!("seed: {}", config.seed);
    let (manifest, data) = prepare(&a.data, &config.model)?;
    let folds = kfold_split(&manifest.labels(), 5, config.seed)?;
    let fold = &folds[0];
    let start = Instant::now();
    let (report, trainer) = run_fold(&data, 0, fold, &config)?;
    let files = |idx: &[usize]| idx.iter().map(|&i| manifest.samples[i].file.clone()).collect::<Vec<_>>();
    create_dir(&a.out)?;
    let ck_path = a.out.join("checkpoint.json");
    let mut ck = trainer.checkpoint();
    ck.holdout = files(&fold.test);
    ck.save(&ck_path)?;
    let out = TrainReport {
        command: "train",
        seed: config.seed,
        config: &config,
        data: a.data.display().to_string(),
        train_files: files(&fold.train),
        test_files: files(&fold.test),
        checkpoint: ck_path.display().to_string(),
        fold: &report,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let report_path = a.out.join("report.json");
    write_json(&report_path, &out)?;
    println!(
        "trained {} epochs on {} samples, tested on {}: {}",
        config.epochs,
        fold.train.len(),
        fold.test.len(),
        summary_line(&report.test)
    );
    println!("wrote {} and {}", ck_path.display(), report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct TableReport<'a> {
    command: &'static str,
    seed: u64,
    config: &'a TrainConfig,
    table: &'a mtinet::training::ExperimentTable,
}

fn crossval(a: CrossvalArgs) -> CliResult<()> {
    let manifest = read_manifest(&a.data)?;
    let (mut config, file_jobs) = train_config(&a.flags, &manifest)?;
    if let Some(k) = a.folds {
        if k < 2 || k > manifest.count {
            return Err(CliError::usage(format!("--folds {k}: must lie in [2, {}]", manifest.count)));
        }
        config.k = k;
    }
    let jobs = a.jobs.or(file_jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    println!("seed: {}", config.seed);
    let (_, data) = prepare(&a.data, &config.model)?;
    create_dir(&a.out)?;
    let report_path = a.out.join("report.json");
    if a.ablation || a.synergy {
        let (table, name) = if a.ablation {
            (run_ablation(&data, &config, jobs)?, "ablation.csv")
        } else {
            (run_synergy(&data, &config, jobs)?, "synergy.csv")
        };
        let csv = a.out.join(name);
        fs::write(&csv, table.to_csv()).map_err(|e| CliError::io(format!("{}: {e}", csv.display())))?;
        write_json(
            &report_path,
            &TableReport {
                command: "crossval",
                seed: config.seed,
                config: &config,
                table: &table,
            },
        )?;
        print!("{}", table.render());
        println!("wrote {} and {}", csv.display(), report_path.display());
    } else {
        let report = cross_validate(&data, &config, jobs)?;
        write_json(&report_path, &report)?;
        for f in &report.folds {
            println!("fold {}: {}", f.fold, summary_line(&f.test));
        }
        let agg = &report.aggregate;
        let mean = MetricSummary {
            samples: data.len(),
            dsc: agg.dsc,
            iou: agg.iou,
            mae: agg.mae,
            ..MetricSummary::default()
        };
        let mut line = summary_line(&mean);
        if let Some(acc) = agg.accuracy {
            line.push_str(&format!("{}accuracy {:.4} ± {:.4}", if line.is_empty() { "" } else { ", " }, acc.mean, acc.std));
        }
        println!("{}-fold mean: {line}", config.k);
        println!("wrote {}", report_path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleRow {
    file: String,
    label: usize,
    dsc: Option<f64>,
    iou: Option<f64>,
    mae: Option<f64>,
    class_prob: Option<[f64; 2]>,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    command: &'static str,
    seed: Option<u64>,
    checkpoint: String,
    model_config: &'a ModelConfig,
    norm: NormMode,
    data: String,
    metrics: &'a MetricSummary,
    samples: Vec<SampleRow>,
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let expected = match &a.config {
        Some(_) => Some(settings::load(a.config.as_deref())?.file.train.model),
        None => None,
    };
    if !a.model.exists() {
        return Err(CliError::io(format!("--model {}: no such file", a.model.display())));
    }
    let manifest = read_manifest(&a.data)?;
    let mut expected = expected;
    if let Some(m) = &mut expected {
        m.height = manifest.height;
        m.width = manifest.width;
    }
    let ck = Checkpoint::load(&a.model, expected.as_ref())?;
    match ck.seed {
        Some(s) => println!("seed: {s}"),
        None => println!("seed: unrecorded"),
    }
    let cfg = &ck.model.config;
    if (cfg.height, cfg.width) != (manifest.height, manifest.width) {
        return Err(CliError {
            code: 5,
            message: format!(
                "input extents: checkpoint expects {}x{} images, dataset has {}x{}",
                cfg.height, cfg.width, manifest.height, manifest.width
            ),
        });
    }
    let (manifest, data) = prepare(&a.data, cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let indices: Vec<usize> = if a.all || ck.holdout.is_empty() {
        all
    } else {
        let picked: Vec<usize> = ck
            .holdout
            .iter()
            .filter_map(|f| manifest.samples.iter().position(|s| &s.file == f))
            .collect();
        if picked.len() == ck.holdout.len() {
            picked
        } else {
            log::warn!("held-out files are not all present in {}; scoring every sample", a.data.display());
            all
        }
    };
    let norm = match a.norm {
        Some(Norm::Running) => NormMode::Running,
        Some(Norm::BatchStats) | None => NormMode::BatchStats,
    };
    let (metrics, results) = evaluate(&ck.model, &data, &indices, norm)?;
    if let Some(dir) = &a.dump_masks {
        create_dir(dir)?;
        for r in &results {
            if let Some(mask) = &r.mask {
                let stem = Path::new(&manifest.samples[r.index].file)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("sample")
                    .to_string();
                let path = dir.join(format!("{stem}.pgm"));
                pgm::write_mask(&path, mask, manifest.height, manifest.width)
                    .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            }
        }
    }
    let rows = results
        .iter()
        .map(|r| SampleRow {
            file: manifest.samples[r.index].file.clone(),
            label: data[r.index].label,
            dsc: r.dsc,
            iou: r.iou,
            mae: r.mae,
            class_prob: r.prob,
        })
        .collect();
    let report = EvalReport {
        command: "eval",
        seed: ck.seed,
        checkpoint: a.model.display().to_string(),
        model_config: cfg,
        norm,
        data: a.data.display().to_string(),
        metrics: &metrics,
        samples: rows,
    };
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&a.report, &report)?;
    println!("evaluated {} samples: {}", indices.len(), summary_line(&metrics));
    println!("wrote {}", a.report.display());
    Ok(())
}
