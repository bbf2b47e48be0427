use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaug::dataset::{load_dataset, parse_rows, Label, LoadOptions};
use adaug::harness::metrics::{auc_roc, prf_at_threshold};
use adaug::harness::presets::{export_episode_points, run_custom, run_sine_toy, run_cluster_comparison};
use adaug::harness::{EvalReport, ModelBundle, ModelVariant, RunConfig, TrainedPipeline};
use adaug::Error;
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRAINING: u8 = 3;

#[derive(Parser)]
#[command(name = "adaug", version, about = "Anomaly augmentation and mixture-of-experts detection")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Augment a labeled dataset and fit both detectors.
    Train {
        /// Labeled CSV, label last as -1/1.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` overrides on the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score rows with a trained model.
    Detect {
        /// Model directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// CSV of feature rows, optionally with a trailing label column.
        #[arg(long)]
        input: PathBuf,
        /// Score above which a row is flagged; defaults to the model's config.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value_t = Variant::Mome)]
        variant: Variant,
        /// Write scores here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on one split of a dataset and report both detectors on the rest.
    Bench {
        #[arg(long)]
        data: PathBuf,
        /// Train/test percentages.
        #[arg(long, default_value = "40/60", value_parser = parse_split)]
        split: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a synthetic experiment.
    Toy {
        /// Sine-curve augmentation run or the Gaussian-cluster comparison.
        #[arg(long, value_enum)]
        name: Toy,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print parameter counts of a trained model.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Single,
    Mome,
}

impl From<Variant> for ModelVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Single => ModelVariant::Single,
            Variant::Mome => ModelVariant::Mome,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Toy {
    Sine,
    Clusters,
}

fn parse_split(s: &str) -> Result<f64, String> {
    match s {
        "40/60" => Ok(0.4),
        "30/70" => Ok(0.3),
        "20/80" => Ok(0.2),
        "10/90" => Ok(0.1),
        _ => Err("expected one of 40/60, 30/70, 20/80, 10/90".into()),
    }
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::NonFinite { .. } | Error::NonFiniteLoss(_) | Error::Diverged { .. } => EXIT_TRAINING,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(base: RunConfig, path: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = base;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &mut RunConfig, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = flag
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| usage("an output directory is required (--out or out_dir)"))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.out_dir = Some(dir.clone());
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_reports(path: &Path, reports: &[EvalReport]) -> CliResult {
    let text: String = reports.iter().map(|r| r.to_json() + "\n").collect();
    write_text(path, &text)
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        println!("{}", r.to_json());
    }
}

fn save_run(dir: &Path, cfg: &RunConfig, pipeline: &TrainedPipeline, reports: &[EvalReport]) -> CliResult {
    cfg.save(dir.join("config.txt"))?;
    write_reports(&dir.join("reports.jsonl"), reports)?;
    pipeline.bundle().save(dir.join("model"))?;
    if pipeline.artifacts.train.feature_dim() == 2 {
        export_episode_points(pipeline, &dir.join("points"))?;
    }
    Ok(())
}

fn remove_stale(path: &Path) -> CliResult {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e).into()),
        _ => Ok(()),
    }
}

fn train(data: &Path, config: Option<&Path>, out: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(RunConfig::default(), config)?;
    let dir = output_dir(&mut cfg, out)?;
    let ds = load_dataset(data, LoadOptions::default())?;
    let log = dir.join("episodes.jsonl");
    remove_stale(&log)?;
    let (pipeline, reports) = run_custom(&ds, &dataset_name(data), &cfg, Some(&log))?;
    save_run(&dir, &cfg, &pipeline, &reports)?;
    print_reports(&reports);
    Ok(())
}

fn bench(data: &Path, split: f64, config: Option<&Path>, out: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(RunConfig::default(), config)?;
    cfg.train_fraction = split;
    let ds = load_dataset(data, LoadOptions::default())?;
    let dir = match out.or_else(|| cfg.out_dir.clone()) {
        Some(d) => Some(output_dir(&mut cfg, Some(d))?),
        None => None,
    };
    let log = dir.as_ref().map(|d| d.join("episodes.jsonl"));
    if let Some(log) = &log {
        remove_stale(log)?;
    }
    let (pipeline, reports) = run_custom(&ds, &dataset_name(data), &cfg, log.as_deref())?;
    if let Some(dir) = &dir {
        save_run(dir, &cfg, &pipeline, &reports)?;
    }
    print_reports(&reports);
    Ok(())
}

fn toy(name: Toy, out: PathBuf, config: Option<&Path>) -> CliResult {
    let preset = match name {
        Toy::Sine => "sine_toy",
        Toy::Clusters => "theorem_clusters",
    };
    let mut cfg = load_config(RunConfig::preset(preset)?, config)?;
    let dir = output_dir(&mut cfg, Some(out))?;
    match name {
        Toy::Sine => {
            let log = dir.join("episodes.jsonl");
            remove_stale(&log)?;
            let outcome = run_sine_toy(&cfg, Some(&log))?;
            save_run(&dir, &cfg, &outcome.pipeline, &outcome.reports)?;
            print_reports(&outcome.reports);
            eprintln!(
                "episodes {}  reward trend tau {:.3}  infeasible share {:.3} -> {:.3}",
                outcome.pipeline.artifacts.reports.len(),
                outcome.reward_tau,
                outcome.infeasible_first,
                outcome.infeasible_last
            );
        }
        Toy::Clusters => {
            let outcome = run_cluster_comparison(&cfg)?;
            cfg.save(dir.join("config.txt"))?;
            write_reports(&dir.join("reports.jsonl"), &outcome.reports)?;
            let json = serde_json::to_string_pretty(&outcome).map_err(|e| usage(e.to_string()))?;
            write_text(&dir.join("clusters.json"), &(json + "\n"))?;
            print_reports(&outcome.reports);
            eprintln!(
                "median test error: single {:.4}  mixture {:.4}",
                outcome.median_single_test_error, outcome.median_mome_test_error
            );
        }
    }
    Ok(())
}

fn detect(
    model: &Path,
    input: &Path,
    threshold: Option<f64>,
    variant: Variant,
    out: Option<PathBuf>,
) -> CliResult {
    let bundle = ModelBundle::load(model)?;
    let mut cfg = bundle.config.clone();
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let mut rows = parse_rows(&text, ',')?;
    let p = bundle.feature_dim();
    let labels = match rows.first().map(Vec::len) {
        Some(w) if w == p + 1 => Some(
            rows.iter_mut()
                .enumerate()
                .map(|(i, r)| {
                    let v = r.pop().expect("row has a label column");
                    Label::from_sign(v).ok_or(Error::Parse {
                        row: i + 1,
                        message: format!("label {v} not in {{0, 1}} or {{-1, 1}}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(w) if w != p => return Err(Error::Shape(format!("input has {w} columns, model expects {p}")).into()),
        _ => None,
    };
    let scores = bundle.score(variant.into(), &rows)?;
    let mut table = String::from("score,anomalous\n");
    for s in &scores {
        let _ = writeln!(table, "{s},{}", u8::from(*s > cfg.threshold));
    }
    match &out {
        Some(path) => {
            write_text(path, &table)?;
            let mut cfg_path = path.clone().into_os_string();
            cfg_path.push(".config.txt");
            cfg.save(PathBuf::from(cfg_path))?;
        }
        None => print!("{table}"),
    }
    if let Some(labels) = labels {
        let prf = prf_at_threshold(&scores, &labels, cfg.threshold);
        let auc = auc_roc(&scores, &labels).map_or_else(|_| "undefined".to_string(), |a| format!("{a:.6}"));
        eprintln!(
            "auc_roc {auc}  precision {:.4}  recall {:.4}  f1 {:.4}  threshold {}",
            prf.precision, prf.recall, prf.f1, cfg.threshold
        );
    }
    Ok(())
}

fn inspect(model: &Path) -> CliResult {
    let bundle = ModelBundle::load(model)?;
    println!("features {}  experts {}  top_k {}", bundle.feature_dim(), bundle.mome.n_experts(), bundle.mome.top_k);
    for (name, count) in bundle.parameter_table() {
        println!("{name:<32}{count:>12}");
    }
    Ok(())
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { data, config, out } => train(&data, config.as_deref(), out),
        Command::Detect {
            model,
            input,
            threshold,
            variant,
            out,
        } => detect(&model, &input, threshold, variant, out),
        Command::Bench {
            data,
            split,
            config,
            out,
        } => bench(&data, split, config.as_deref(), out),
        Command::Toy { name, out, config } => toy(name, out, config.as_deref()),
        Command::Inspect { model } => inspect(&model),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
