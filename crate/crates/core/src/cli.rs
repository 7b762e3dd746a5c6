use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rscvae::config::{DataKind, RunConfig};
use rscvae::datasets::{load_image, read_idx_file, resize_bilinear, FolderLayout, IdxDtype, SampleRecord};
use rscvae::experiment::{build_task, check_compatible, load_for, train_and_score, EVAL_BATCH};
use rscvae::losses::{Role, TrainingMode};
use rscvae::scoring::{export_latents, normalize_scores, record_terms, score_records, score_terms, NormConstants, ScoreReport};
use rscvae::{Error, Result};

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const BEST: &str = "checkpoint.best";
pub const FINAL: &str = "checkpoint.final";
pub const SCORE_REPORT: &str = "score_report.json";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const MANIFEST: &str = "split_manifest.json";
pub const METADATA: &str = "run_metadata.json";

#[derive(Parser, Debug)]
#[command(name = "rscvae", version, about = "One-class novelty detection with recoding VAEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and score the test split.
    Train(RunArgs),
    /// Score the test split with a trained checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report path; defaults to `<output-dir>/score_report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score new images against constants frozen from the training normals.
    Score {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// An IDX image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the task manifest (ids, roles, labels) without training.
    Split(RunArgs),
    /// Write posterior means of the test split as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tabulate test AUROC of several runs.
    Report {
        /// Run directories, optionally labelled as `label=dir`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<String>,
        #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
        format: TableFormat,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Run configuration; defaults to the snapshot in the output directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Dotted-path assignments such as `epochs=10` or `dsa.probability=0.05`.
    #[arg(long, num_args = 1..)]
    pub overrides: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

pub enum Failure {
    Config(Error),
    Run(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(Error::Config { .. }) => 2,
            Failure::Run(Error::NonFinite(_)) => 4,
            Failure::Run(_) => 3,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Config(e) | Failure::Run(e) => e,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(args: &RunArgs) -> CliResult<RunConfig> {
    let path = args.config.clone().unwrap_or_else(|| args.output_dir.join(CONFIG_SNAPSHOT));
    if !path.exists() {
        return Err(Failure::Config(Error::config(
            "config",
            format!("{} does not exist", path.display()),
        )));
    }
    RunConfig::load(&path, &args.overrides).map_err(Failure::Config)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    started_unix: f64,
    finished_unix: f64,
}

/// Timestamps are kept out of every other artifact so reruns reproduce them byte for byte.
fn write_metadata(dir: &Path, command: &str, started: f64) -> Result<()> {
    let m = Metadata {
        command,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&dir.join(METADATA), text.as_bytes())
}

fn default_checkpoint(dir: &Path, explicit: Option<PathBuf>) -> CliResult<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    [BEST, FINAL]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Failure::Run(Error::invalid(format!(
                "no {BEST} or {FINAL} in {}; pass --checkpoint",
                dir.display()
            )))
        })
}

fn print_report(report: &ScoreReport) {
    let auc = report.auroc.map(|a| format!("{a:.6}")).unwrap_or_else(|| "n/a".into());
    println!("AUROC {auc}  S_a {:.6}  samples {}", report.s_a, report.samples.len());
}

pub fn run(cli: Cli) -> CliResult<()> {
    let started = unix_now();
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            ensure_dir(&args.output_dir)?;
            let dir = &args.output_dir;
            write_file(&dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?.as_bytes())?;
            let run = train_and_score::<f32>(&cfg, Some(dir))?;
            write_file(&dir.join(SCORE_REPORT), run.report.to_json()?.as_bytes())?;
            if let Some((epoch, auc, _)) = &run.fit.best {
                println!("best epoch {epoch} (AUROC {auc:.6})");
            }
            print_report(&run.report);
            write_metadata(dir, "train", started)?;
        }
        Command::Evaluate { run, checkpoint, report } => {
            let cfg = load_config(&run)?;
            let path = default_checkpoint(&run.output_dir, checkpoint)?;
            let ck = load_for::<f32>(&path, &cfg)?;
            let task = build_task(&cfg)?;
            let rep = score_records(&ck.model, &task.test, cfg.alpha_score, EVAL_BATCH, cfg.js_impl)?;
            let out = report.unwrap_or_else(|| run.output_dir.join(SCORE_REPORT));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                ensure_dir(parent)?;
            }
            write_file(&out, rep.to_json()?.as_bytes())?;
            print_report(&rep);
        }
        Command::Score { run, checkpoint, input } => {
            let cfg = load_config(&run)?;
            let path = default_checkpoint(&run.output_dir, checkpoint)?;
            let ck = load_for::<f32>(&path, &cfg)?;
            let task = build_task(&cfg)?;
            let (m, r) = record_terms(&ck.model, &task.train, EVAL_BATCH, cfg.js_impl)?;
            let norm = NormConstants::from_terms(&m, &r)?;
            let records = load_inputs(&input, &cfg)?;
            let (m, r) = record_terms(&ck.model, &records, EVAL_BATCH, cfg.js_impl)?;
            let s = score_terms(&m, &r, norm, cfg.alpha_score)?;
            let s_prime = normalize_scores(&s)?;
            ensure_dir(&run.output_dir)?;
            let out = run.output_dir.join("scores.csv");
            let mut w = BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?);
            let io = |e| Error::io(&out, e);
            writeln!(w, "# e_mut={} e_recon={} alpha={}", norm.e_mut, norm.e_recon, cfg.alpha_score).map_err(io)?;
            writeln!(w, "id,s,s_prime,mut,recon").map_err(io)?;
            for i in 0..records.len() {
                writeln!(w, "{},{},{},{},{}", records[i].id, s[i], s_prime[i], m[i], r[i]).map_err(io)?;
            }
            w.flush().map_err(io)?;
            println!("scored {} images into {}", records.len(), out.display());
        }
        Command::Split(args) => {
            let cfg = load_config(&args)?;
            let task = build_task(&cfg)?;
            ensure_dir(&args.output_dir)?;
            write_file(&args.output_dir.join(MANIFEST), task.to_manifest_json()?.as_bytes())?;
            let anomalies = task.test.iter().filter(|r| r.label == 1).count();
            println!(
                "train {} ({} anomalous), test {} ({} anomalous)",
                task.train.len(),
                task.train_anomaly_count(),
                task.test.len(),
                anomalies
            );
        }
        Command::ExportEmbeddings { run, checkpoint } => {
            let cfg = load_config(&run)?;
            let path = default_checkpoint(&run.output_dir, checkpoint)?;
            let ck = load_for::<f32>(&path, &cfg)?;
            check_compatible(&ck.model, &cfg)?;
            let task = build_task(&cfg)?;
            ensure_dir(&run.output_dir)?;
            let out = run.output_dir.join(EMBEDDINGS);
            let mut w = BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?);
            let n = export_latents(&ck.model, &task.test, EVAL_BATCH, &mut w)?;
            w.flush().map_err(|e| Error::io(&out, e))?;
            println!("wrote {n} rows to {}", out.display());
        }
        Command::Report { runs, format, output } => {
            let table = report_table(&runs, format)?;
            match output {
                Some(p) => write_file(&p, table.as_bytes())?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn load_inputs(input: &Path, cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    let side = cfg.image_side();
    let channels = cfg.image_channels();
    let record = |id: String, pixels: Vec<f32>| SampleRecord {
        id,
        role: Role::Normal,
        label: 0,
        class_id: 0,
        subcategory: String::new(),
        pixels,
    };
    let records: Vec<SampleRecord> = if input.is_dir() {
        let layout = FolderLayout { image_size: side, channels };
        let mut out = Vec::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let px = load_image(&f, &layout)?;
            out.push(record(f.file_name().unwrap_or_default().to_string_lossy().into_owned(), px));
        }
        out
    } else {
        let t = read_idx_file(input)?;
        let (n, h, w) = match t.dims[..] {
            [n, h, w] if t.dtype == IdxDtype::U8 => (n, h, w),
            _ => return Err(Error::Structure(format!("{}: expected rank-3 u8 images", input.display()))),
        };
        if channels != 1 {
            return Err(Error::invalid("IDX input holds grayscale images but the model expects color"));
        }
        (0..n)
            .map(|i| {
                let px: Vec<f32> = t.data[i * h * w..(i + 1) * h * w].iter().map(|&v| v as f32).collect();
                record(format!("{i:05}"), resize_bilinear(&px, (1, h, w), side))
            })
            .collect()
    };
    if records.is_empty() {
        return Err(Error::invalid(format!("{} holds no images", input.display())));
    }
    Ok(records)
}

fn mode_label(cfg: &RunConfig) -> String {
    let code = match cfg.mode {
        TrainingMode::OneClass => "o",
        TrainingMode::Shifted => "d",
        TrainingMode::Imbalanced => "e",
    };
    format!("RSC-VAE_{code}")
}

fn category_label(cfg: &RunConfig) -> String {
    match (&cfg.data.kind, &cfg.data.category) {
        (DataKind::Folder, Some(c)) => c.clone(),
        (DataKind::Folder, None) => cfg
            .data
            .dir
            .as_ref()
            .and_then(|d| d.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "folder".into()),
        _ => cfg.data.target_class.to_string(),
    }
}

/// Columns are run labels (the training mode unless given as `label=dir`), rows are
/// categories, and cells sharing a column and row are averaged.
pub fn report_table(runs: &[String], format: TableFormat) -> Result<String> {
    let mut columns: Vec<String> = Vec::new();
    let mut cells: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for spec in runs {
        let (label, dir) = match spec.split_once('=') {
            Some((l, d)) => (Some(l.to_string()), PathBuf::from(d)),
            None => (None, PathBuf::from(spec)),
        };
        let snap = dir.join(CONFIG_SNAPSHOT);
        let rep = dir.join(SCORE_REPORT);
        for p in [&snap, &rep] {
            if !p.exists() {
                return Err(Error::invalid(format!("missing {}", p.display())));
            }
        }
        let cfg = RunConfig::load(&snap, &[])?;
        let text = std::fs::read_to_string(&rep).map_err(|e| Error::io(&rep, e))?;
        let report: ScoreReport =
            serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", rep.display())))?;
        let auc = report
            .auroc
            .ok_or_else(|| Error::invalid(format!("{} has no AUROC", rep.display())))?;
        let label = label.unwrap_or_else(|| mode_label(&cfg));
        if !columns.contains(&label) {
            columns.push(label.clone());
        }
        cells.entry(category_label(&cfg)).or_default().entry(label).or_default().push(auc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows: Vec<(String, Vec<Option<f64>>)> = cells
        .iter()
        .map(|(cat, by_col)| (cat.clone(), columns.iter().map(|c| by_col.get(c).map(|v| mean(v))).collect()))
        .collect();
    let avg: Vec<Option<f64>> = (0..columns.len())
        .map(|j| {
            let vals: Vec<f64> = rows.iter().filter_map(|(_, r)| r[j]).collect();
            (!vals.is_empty()).then(|| mean(&vals))
        })
        .collect();
    rows.push(("Avg.".into(), avg));
    let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&format!("category,{}\n", columns.join(",")));
            for (cat, vals) in &rows {
                let cells: Vec<String> = vals.iter().map(fmt).collect();
                out.push_str(&format!("{cat},{}\n", cells.join(",")));
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| category | {} |\n", columns.join(" | ")));
            out.push_str(&format!("|---|{}\n", "---|".repeat(columns.len())));
            for (cat, vals) in &rows {
                let cells: Vec<String> = vals.iter().map(fmt).collect();
                out.push_str(&format!("| {cat} | {} |\n", cells.join(" | ")));
            }
        }
    }
    Ok(out)
}
