use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a3rank::alignment::TermSet;
use a3rank::baselines::{rank, Method, RankError, RankedList, RankerSpec};
use a3rank::detector::{
    defense_success_rate, false_rejection_rate, fit_detector, DetectorError, DetectorModel,
    FeatureSchema, FeatureVector, FitOptions, DEFAULT_MIN_TRAIN, DEFAULT_QUANTILE,
};
use a3rank::evaluation::{
    evaluate_rankings, quadrant_counts, top_failing_confidences, wilcoxon_signed_rank,
    write_confidence_csv, Budget, REPORT_VERSION,
};
use a3rank::pipeline::{
    self, label_subtle, run_full, with_parallelism, BenchmarkSource, LabelSource, Labels,
    PipelineConfig, PipelineError, SchemaChoice, Warning,
};
use a3rank::record::{load_dataset_path, write_dataset, Dataset};
use a3rank::rejection::{decide_all, Decision, RejectorSpec};
use a3rank::synth::{build_world, default_ops, default_train_ops, WorldConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::Value;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INSUFFICIENT: u8 = 3;

/// Rank samples by augmentation alignment and build reject-option detectors.
#[derive(Parser)]
#[command(name = "a3rank", version)]
struct Cli {
    /// Seed shared by every seeded step.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads. Outputs do not depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    parallelism: u64,

    /// Directory for output files. Commands that write a single file print to
    /// stdout when neither this nor --out is given.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Exit with status 3 when a step lacks data (e.g. too few subtle samples
    /// to fit a detector) instead of warning.
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-record score breakdown as CSV.
    Score {
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank a dataset; writes `rank,sample_id,key` CSV.
    Rank {
        dataset: PathBuf,
        #[command(flatten)]
        ranker: RankerArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Take the labeling budget from a ranking and keep the subtle samples
    /// (failing and passing the rejector). Writes JSONL.
    Select {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ranked: PathBuf,
        #[arg(long, default_value = "top:0.1")]
        budget: Budget,
        #[arg(long, value_parser = parse_theta)]
        theta: f64,
        /// CSV `sample_id,label`; defaults to labels embedded in the dataset.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-stage decision per record: `sample_id,outcome,predicted_class`.
    /// A record is rejected when confidence < theta; exactly theta passes.
    Decide {
        dataset: PathBuf,
        #[arg(long, value_parser = parse_theta)]
        theta: f64,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit or evaluate the hypersphere detector.
    #[command(subcommand)]
    Detector(DetectorCommand),
    /// Compare rankings of one labeled dataset; writes a JSON report.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// `name=path` or a bare path (named after the file stem). Repeatable.
        #[arg(long, required = true)]
        ranked: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.8,0.9", value_parser = parse_theta)]
        theta: Vec<f64>,
        #[arg(long, default_value = "top:0.1")]
        budget: Budget,
        /// Failing samples per ranking in the confidence distribution.
        #[arg(long, default_value_t = 50)]
        top_k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-sided Wilcoxon signed-rank test on paired per-run values.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Column holding the values; defaults to `value`, else the last column.
        #[arg(long)]
        column: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the seeded synthetic world.
    Synth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Evaluation points per class.
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        /// Training points per class.
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: rank, label the budget, fit the detector, report.
    Run {
        dataset: PathBuf,
        #[command(flatten)]
        ranker: RankerArgs,
        #[arg(long, default_value = "top:0.1")]
        budget: Budget,
        #[arg(long, default_value_t = 0.9, value_parser = parse_theta)]
        theta: f64,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Labeled dataset for measuring the detector.
        #[arg(long, conflicts_with = "holdout")]
        benchmark: Option<PathBuf>,
        /// Hold out this fraction of the input as the benchmark.
        #[arg(long)]
        holdout: Option<f64>,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 50)]
        top_k: usize,
    },
}

#[derive(Subcommand)]
enum DetectorCommand {
    /// Fit on a subtle set (JSONL) and write the model as JSON.
    Fit {
        subtle: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Defense success rate, false rejections and quadrant counts on a
    /// labeled benchmark.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long, value_parser = parse_theta)]
        theta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RankerArgs {
    #[arg(long, default_value = "a3")]
    method: Method,
    /// Alignment terms to drop, e.g. `g1` or `g2,g3` (a3 only).
    #[arg(long, value_parser = TermSet::parse)]
    ablate: Option<TermSet>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    quantile: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_TRAIN)]
    min_train: usize,
    #[arg(long, value_enum, default_value_t = SchemaArg::Auto)]
    schema: SchemaArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    Auto,
    External,
    Derived,
}

impl From<SchemaArg> for SchemaChoice {
    fn from(s: SchemaArg) -> Self {
        match s {
            SchemaArg::Auto => SchemaChoice::Auto,
            SchemaArg::External => SchemaChoice::External,
            SchemaArg::Derived => SchemaChoice::Derived,
        }
    }
}

fn parse_theta(s: &str) -> Result<f64, String> {
    let t: f64 = s.trim().parse().map_err(|_| format!("not a number: {s:?}"))?;
    RejectorSpec::new(t).map(|r| r.theta()).map_err(|e| e.to_string())
}

/// Error caused by how the tool was invoked rather than by the data.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Completed, but a step had too little data.
struct Insufficient(Vec<String>);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
    let strict = cli.strict;
    match with_parallelism(cli.parallelism as usize, || dispatch(&cli)) {
        Ok(Ok(None)) => ExitCode::SUCCESS,
        Ok(Ok(Some(Insufficient(msgs)))) => {
            for m in &msgs {
                warn!("{m}");
            }
            if strict {
                ExitCode::from(EXIT_INSUFFICIENT)
            } else {
                ExitCode::SUCCESS
            }
        }
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(PipelineError::Config(_)) = cause.downcast_ref::<PipelineError>() {
            return EXIT_USAGE;
        }
        if let Some(
            RankError::UnknownMethod(_)
            | RankError::MissingSeed
            | RankError::UnexpectedSeed
            | RankError::AblationNotSupported,
        ) = cause.downcast_ref::<RankError>()
        {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

fn dispatch(cli: &Cli) -> Result<Option<Insufficient>> {
    match &cli.command {
        Command::Score { dataset, out } => {
            let d = load(dataset)?;
            let w = sink(cli, out.as_deref(), pipeline::BREAKDOWN_FILE)?;
            pipeline::write_breakdown_csv(&d, w)?;
            Ok(None)
        }
        Command::Rank {
            dataset,
            ranker,
            out,
        } => {
            let d = load(dataset)?;
            let spec = ranker_spec(ranker, cli.seed)?;
            let ranked = rank(&d, &spec);
            ranked.write_csv(sink(cli, out.as_deref(), pipeline::RANKING_FILE)?)?;
            Ok(None)
        }
        Command::Select {
            dataset,
            ranked,
            budget,
            theta,
            labels,
            out,
        } => {
            let d = load(dataset)?;
            let ranked = read_ranking(ranked)?;
            let labels = load_labels(labels.as_deref())?;
            let omega = budget.resolve(&labels.apply(&d)?)?;
            let spec = RejectorSpec::new(*theta)?;
            let t_sub = label_subtle(&ranked, &d, omega, &spec, &labels)?;
            info!("omega = {omega}, subtle samples = {}", t_sub.len());
            write_dataset(&t_sub, sink(cli, out.as_deref(), pipeline::SUBTLE_FILE)?)?;
            Ok(None)
        }
        Command::Decide {
            dataset,
            theta,
            detector,
            out,
        } => {
            let d = load(dataset)?;
            let spec = RejectorSpec::new(*theta)?;
            let model = detector.as_deref().map(load_model).transpose()?;
            let decisions = decide_all(&d, &spec, model.as_ref())?;
            let mut w = sink(cli, out.as_deref(), "decisions.csv")?;
            writeln!(w, "sample_id,outcome,predicted_class")?;
            for (r, dec) in d.iter().zip(decisions) {
                let class = match dec {
                    Decision::Predicted(c) => c.to_string(),
                    _ => String::new(),
                };
                writeln!(w, "{},{},{}", csv_field(r.sample_id()), dec.outcome_name(), class)?;
            }
            w.flush()?;
            Ok(None)
        }
        Command::Detector(DetectorCommand::Fit { subtle, fit, out }) => {
            let d = load(subtle)?;
            let options = fit_options(fit, &d);
            let features = features_of(&d, options.schema)?;
            match fit_detector(&features, &options) {
                Ok(model) => {
                    let text = model.to_json();
                    let mut w = sink(cli, out.as_deref(), pipeline::DETECTOR_FILE)?;
                    w.write_all(text.as_bytes())?;
                    w.write_all(b"\n")?;
                    w.flush()?;
                    Ok(None)
                }
                Err(e @ DetectorError::InsufficientSubtleSamples { .. }) => Ok(Some(Insufficient(
                    vec![format!("{e}; no model written")],
                ))),
                Err(e) => Err(e.into()),
            }
        }
        Command::Detector(DetectorCommand::Eval {
            model,
            benchmark,
            theta,
            out,
        }) => {
            let model = load_model(model)?;
            let bench = load(benchmark)?;
            let spec = RejectorSpec::new(*theta)?;
            let mut missing = Vec::new();
            let mut rate = |r: Result<f64, DetectorError>, what: &str| match r {
                Ok(v) => Ok(Value::from(v)),
                Err(DetectorError::EmptyEvaluationSet) => {
                    missing.push(format!("no benchmark samples for the {what}"));
                    Ok(Value::Null)
                }
                Err(e) => Err(e),
            };
            let dsr = rate(
                defense_success_rate(&model, &bench, &spec),
                "defense success rate",
            )?;
            let frr = rate(
                false_rejection_rate(&model, &bench, &spec),
                "false rejection rate",
            )?;
            let report = serde_json::json!({
                "spec_version": REPORT_VERSION,
                "theta": spec.theta(),
                "benchmark_size": bench.len(),
                "defense_success_rate": dsr,
                "false_rejection_rate": frr,
                "quadrants": quadrant_counts(&bench, &spec, Some(&model))?,
            });
            write_json(cli, out.as_deref(), "detector_eval.json", &report)?;
            Ok((!missing.is_empty()).then_some(Insufficient(missing)))
        }
        Command::Evaluate {
            dataset,
            ranked,
            theta,
            budget,
            top_k,
            out,
        } => {
            let d = load(dataset)?;
            let mut rankings = Vec::new();
            for arg in ranked {
                let (name, path) = match arg.split_once('=') {
                    Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
                    _ => {
                        let p = PathBuf::from(arg);
                        let stem = p
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| arg.clone());
                        (stem, p)
                    }
                };
                if rankings.iter().any(|(n, _)| *n == name) {
                    return Err(usage(format!("duplicate ranking name {name:?}")));
                }
                rankings.push((name, read_ranking(&path)?));
            }
            let specs = theta
                .iter()
                .map(|&t| RejectorSpec::new(t))
                .collect::<Result<Vec<_>, _>>()?;
            let report = evaluate_rankings(&d, &rankings, budget, &specs, *top_k)?;
            write_json(cli, out.as_deref(), pipeline::REPORT_FILE, &report)?;
            if let Some(dir) = &cli.output_dir {
                let mut rows = Vec::new();
                for (name, r) in &rankings {
                    rows.push((name.clone(), top_failing_confidences(r, &d, *top_k)?));
                }
                let path = dir.join(pipeline::CONFIDENCE_FILE);
                write_confidence_csv(&rows, BufWriter::new(create(&path)?))?;
            }
            Ok(None)
        }
        Command::Compare { a, b, column, out } => {
            let xs = read_column(a, column.as_deref())?;
            let ys = read_column(b, column.as_deref())?;
            if xs.len() != ys.len() {
                bail!(
                    "{} has {} values but {} has {}",
                    a.display(),
                    xs.len(),
                    b.display(),
                    ys.len()
                );
            }
            let result = wilcoxon_signed_rank(&xs, &ys)?;
            let mut value = serde_json::to_value(&result)?;
            value["spec_version"] = Value::from(REPORT_VERSION);
            write_json(cli, out.as_deref(), "compare.json", &value)?;
            Ok(None)
        }
        Command::Synth {
            classes,
            per_class,
            train_per_class,
            epochs,
            out,
        } => {
            let defaults = WorldConfig::default();
            let config = WorldConfig {
                num_classes: *classes,
                per_class: *per_class,
                train_per_class: train_per_class.unwrap_or(defaults.train_per_class),
                epochs: epochs.unwrap_or(defaults.epochs),
                ops: default_ops(defaults.dim),
                train_ops: default_train_ops(defaults.dim),
                seed: cli.seed,
                ..defaults
            };
            config
                .validate()
                .map_err(|e| usage(e.to_string()))?;
            let dir = out
                .clone()
                .or_else(|| cli.output_dir.clone())
                .ok_or_else(|| usage("synth needs --out or --output-dir"))?;
            let world = build_world(&config)?;
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write_dataset(&world.train, BufWriter::new(create(&dir.join("train.jsonl"))?))?;
            write_dataset(&world.eval, BufWriter::new(create(&dir.join("eval.jsonl"))?))?;
            let mut text = serde_json::to_string_pretty(&world.manifest)?;
            text.push('\n');
            fs::write(dir.join("manifest.json"), text)?;
            info!("wrote {}", dir.display());
            Ok(None)
        }
        Command::Run {
            dataset,
            ranker,
            budget,
            theta,
            labels,
            benchmark,
            holdout,
            fit,
            top_k,
        } => {
            let output_dir = cli
                .output_dir
                .clone()
                .ok_or_else(|| usage("run needs --output-dir"))?;
            let config = PipelineConfig {
                input: dataset.clone(),
                ranker: ranker_spec(ranker, cli.seed)?,
                budget: *budget,
                theta: *theta,
                detector_quantile: fit.quantile,
                min_train: fit.min_train,
                feature_schema: fit.schema.into(),
                labels: labels
                    .clone()
                    .map(LabelSource::File)
                    .unwrap_or(LabelSource::Embedded),
                benchmark: match (benchmark, holdout) {
                    (Some(p), _) => BenchmarkSource::File(p.clone()),
                    (None, Some(f)) => BenchmarkSource::HoldOut(*f),
                    (None, None) => BenchmarkSource::None,
                },
                output_dir,
                parallelism: cli.parallelism as usize,
                seed: cli.seed,
                top_failing_k: *top_k,
            };
            let out = run_full(&config)?;
            info!(
                "ranked {} samples, {} subtle, detector: {}",
                out.report.rank_set_size,
                out.report.subtle_count,
                out.bundle.detector.is_some()
            );
            let insufficient: Vec<String> = out
                .report
                .warnings
                .iter()
                .filter_map(|w| match w {
                    Warning::InsufficientSubtleSamples { required, found } => Some(format!(
                        "only {found} subtle samples (need {required}); no detector fitted"
                    )),
                    Warning::EmptyDefenseSet => {
                        Some("benchmark has no failing samples passing the rejector".into())
                    }
                    Warning::EmptyFalseRejectionSet => {
                        Some("benchmark has no correct samples passing the rejector".into())
                    }
                    Warning::UnlabeledRankSet { .. } => None,
                })
                .collect();
            for w in &out.report.warnings {
                if let Warning::UnlabeledRankSet { unlabeled } = w {
                    warn!("{unlabeled} records lack labels; skipped the evaluation report");
                }
            }
            Ok((!insufficient.is_empty()).then_some(Insufficient(insufficient)))
        }
    }
}

fn ranker_spec(args: &RankerArgs, seed: u64) -> Result<RankerSpec> {
    let seed = (args.method == Method::Random).then_some(seed);
    let spec = RankerSpec::new(args.method, seed)?;
    Ok(match args.ablate {
        Some(drop) => spec.with_ablation(drop)?,
        None => spec,
    })
}

fn fit_options(fit: &FitArgs, subtle: &Dataset) -> FitOptions {
    let schema = match fit.schema {
        SchemaArg::External => FeatureSchema::External,
        SchemaArg::Derived => FeatureSchema::Derived,
        SchemaArg::Auto => {
            if !subtle.is_empty() && subtle.iter().all(|r| r.features().is_some()) {
                FeatureSchema::External
            } else {
                FeatureSchema::Derived
            }
        }
    };
    FitOptions {
        quantile: fit.quantile,
        min_train: fit.min_train,
        schema,
    }
}

fn features_of(d: &Dataset, schema: FeatureSchema) -> Result<Vec<FeatureVector>> {
    d.iter()
        .map(|r| match schema {
            FeatureSchema::Derived => Ok(a3rank::detector::derive_features(r)),
            FeatureSchema::External => r
                .features()
                .ok_or_else(|| DetectorError::MissingFeatures(r.sample_id().into()))
                .and_then(|f| FeatureVector::new(f.to_vec())),
        })
        .collect::<Result<_, _>>()
        .map_err(Into::into)
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset_path(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<DetectorModel> {
    DetectorModel::load(path).with_context(|| format!("reading detector {}", path.display()))
}

fn load_labels(path: Option<&Path>) -> Result<Labels> {
    match path {
        None => Ok(Labels::Embedded),
        Some(p) => Labels::load(&LabelSource::File(p.to_path_buf()))
            .with_context(|| format!("reading labels {}", p.display())),
    }
}

fn read_ranking(path: &Path) -> Result<RankedList> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    RankedList::read_csv(file).with_context(|| format!("reading ranking {}", path.display()))
}

fn read_column(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .with_context(|| format!("{} is empty", path.display()))?
        .split(',')
        .map(str::trim)
        .collect();
    let idx = match column {
        Some(c) => header
            .iter()
            .position(|h| *h == c)
            .ok_or_else(|| usage(format!("{} has no column {c:?}", path.display())))?,
        None => header
            .iter()
            .position(|h| *h == "value")
            .unwrap_or(header.len() - 1),
    };
    lines
        .enumerate()
        .map(|(i, line)| {
            let field = line.split(',').nth(idx).map(str::trim).unwrap_or("");
            field.parse::<f64>().with_context(|| {
                format!("{} line {}: bad value {field:?}", path.display(), i + 2)
            })
        })
        .collect()
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

/// Output target: `--out`, else `<output-dir>/<default_name>`, else stdout.
fn sink(cli: &Cli, out: Option<&Path>, default_name: &str) -> Result<Box<dyn Write>> {
    let path = match (out, &cli.output_dir) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(dir)) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Some(dir.join(default_name))
        }
        (None, None) => None,
    };
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(create(&p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize + ?Sized>(
    cli: &Cli,
    out: Option<&Path>,
    default_name: &str,
    value: &T,
) -> Result<()> {
    let mut w = sink(cli, out, default_name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
