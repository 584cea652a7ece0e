use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use chartcast::analysis::relevance_file_name;
use chartcast::baselines::Strategy;
use chartcast::encoder::{
    write_surrogate, Encoder, EncoderKind, EncoderSpec, IdentityEncoder, PretrainedEncoder, Representation,
    DEFAULT_CHECKPOINT,
};
use chartcast::evaluation::{evaluate, render_table};
use chartcast::experiment::ModelKind;
use chartcast::market_data::{
    generate_synthetic, ingest, label, split, statistics, write_csv, InputFormat, LabelScheme, LabeledSample,
    OhlcSeries, SplitSpec, SyntheticConfig,
};
use chartcast::pipeline::{analyze_run, read_predictions, run_pipeline, validate_config, AnalysisKind, RunConfig};
use chartcast::representation::{render_chart, serialize_text, RenderConfig};
use chartcast::Error;

#[derive(Parser)]
#[command(name = "chartcast", version, about = "Direction forecasting from OHLC charts, text records and raw features")]
struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Hourly OHLC file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum Format {
    Csv,
    Jsonl,
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<OhlcSeries> {
        let format = match self.format {
            Format::Csv => InputFormat::Csv,
            Format::Jsonl => InputFormat::JsonLines,
        };
        Ok(ingest(&self.data, format).with_context(|| format!("reading {}", self.data.display()))?)
    }
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum SplitChoice {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalise an OHLC file into a dataset directory.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Label every anchor hour as JSON lines.
    Label {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "standard")]
        scheme: String,
    },
    /// Label-delta statistics per split.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "standard")]
        scheme: String,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitChoice,
    },
    /// Seeded synthetic hourly series as CSV.
    Synth {
        #[arg(long)]
        bars: usize,
        #[arg(long, default_value_t = 25.0)]
        volatility: f64,
    },
    /// Render sliding-window charts as PNG files.
    Render {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 20)]
        window: usize,
        /// Hours between consecutive charts.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// One text record per bar.
    Textify {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Embeddings as JSON lines `{timestamp, vector}`.
    Embed {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = DEFAULT_CHECKPOINT)]
        checkpoint: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train one model with fixed hyperparameters.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "standard")]
        label: String,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        w: f64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value = DEFAULT_CHECKPOINT)]
        checkpoint: String,
    },
    /// Evaluate a baseline strategy on the test split.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value = "standard")]
        scheme: String,
    },
    /// Score test-split predictions.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "standard")]
        scheme: String,
    },
    /// Random hyperparameter search for one model and scheme.
    Search {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "standard")]
        scheme: String,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Comparison tables from every `metrics.json` under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Relevance heatmaps, text-embedding t-SNE or the number study for a
    /// finished run.
    Analyze {
        #[arg(long)]
        what: String,
        /// Run directory.
        #[arg(long)]
        model: PathBuf,
    },
    /// The full pipeline.
    Run {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a small seeded checkpoint in the pretrained on-disk layout.
    Surrogate,
}

fn output(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            Box::new(std::io::BufWriter::new(
                std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn test_labels(series: &OhlcSeries, scheme: LabelScheme) -> anyhow::Result<(OhlcSeries, Vec<LabeledSample>)> {
    let splits = split(series, &SplitSpec::default())?;
    let labels = label(&splits.test, scheme);
    Ok((splits.test, labels))
}

/// Starting config: `--config` if given, else defaults around `data`.
fn base_config(cli: &Cli, data: Option<&PathBuf>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&cli.config, data) {
        (Some(path), _) => validate_config(path)?,
        (None, Some(d)) => RunConfig::with_dataset(d.clone()),
        (None, None) => bail!(Error::Config("pass --config or --data".into())),
    };
    if let Some(d) = data {
        cfg.dataset = Some(d.clone());
        cfg.synthetic = None;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Ingest { input, format } => {
            let data = DataArgs {
                data: input.clone(),
                format: *format,
            };
            let series = data.load()?;
            let dir = out.unwrap_or(Path::new("dataset"));
            std::fs::create_dir_all(dir)?;
            write_csv(&series, std::fs::File::create(dir.join("bars.csv"))?)?;
            let mut stats = serde_json::Map::new();
            for scheme in LabelScheme::ALL {
                stats.insert(scheme.name().into(), serde_json::to_value(statistics(&label(&series, scheme))?)?);
            }
            std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
            println!("{} bars -> {}", series.len(), dir.display());
        }
        Command::Label { data, scheme } => {
            let scheme: LabelScheme = scheme.parse()?;
            let series = data.load()?;
            let mut w = output(out)?;
            for s in label(&series, scheme) {
                writeln!(w, "{}", serde_json::to_string(&s)?)?;
            }
        }
        Command::Stats { data, scheme, split: which } => {
            let scheme: LabelScheme = scheme.parse()?;
            let series = data.load()?;
            let part = match which {
                SplitChoice::All => series,
                other => {
                    let s = split(&series, &SplitSpec::default())?;
                    match other {
                        SplitChoice::Train => s.train,
                        SplitChoice::Validation => s.validation,
                        _ => s.test,
                    }
                }
            };
            let stats = statistics(&label(&part, scheme))?;
            writeln!(output(out)?, "{}", serde_json::to_string_pretty(&stats)?)?;
        }
        Command::Synth { bars, volatility } => {
            let series = generate_synthetic(&SyntheticConfig {
                seed,
                n_bars: *bars,
                volatility: *volatility,
            });
            write_csv(&series, output(out)?)?;
        }
        Command::Render {
            data,
            window,
            stride,
            limit,
        } => {
            let series = data.load()?;
            let cfg = RenderConfig {
                window_hours: *window,
                ..RenderConfig::default()
            };
            cfg.validate()?;
            let dir = out.unwrap_or(Path::new("charts"));
            std::fs::create_dir_all(dir)?;
            let bars = series.bars();
            let mut n = 0;
            for start in (0..(bars.len() + 1).saturating_sub(*window)).step_by((*stride).max(1)) {
                if limit.is_some_and(|l| n >= l) {
                    break;
                }
                let w = &bars[start..start + window];
                let name = relevance_file_name(&w[window - 1].timestamp).replacen("relevance_", "chart_", 1);
                render_chart(w, &cfg)?.save_png(&dir.join(name))?;
                n += 1;
            }
            println!("{n} charts -> {}", dir.display());
        }
        Command::Textify { data } => {
            let series = data.load()?;
            let mut w = output(out)?;
            for b in series.bars() {
                writeln!(w, "{}", serialize_text(b).text)?;
            }
        }
        Command::Embed {
            data,
            kind,
            checkpoint,
            limit,
        } => {
            let kind: EncoderKind = kind.parse()?;
            let series = data.load()?;
            let encoder: Box<dyn Encoder> = match kind {
                EncoderKind::Identity => Box::new(IdentityEncoder::new(None)),
                k => Box::new(PretrainedEncoder::load(&EncoderSpec::pretrained(k, checkpoint))?),
            };
            let render = RenderConfig::default();
            let bars = series.bars();
            let first = if kind == EncoderKind::PretrainedImage { render.window_hours - 1 } else { 0 };
            let mut w = output(out)?;
            for (i, bar) in bars.iter().enumerate().skip(first).take(limit.unwrap_or(usize::MAX)) {
                let text;
                let image;
                let rep = match kind {
                    EncoderKind::Identity => Representation::Numeric(bar.features()),
                    EncoderKind::PretrainedText => {
                        text = serialize_text(bar);
                        Representation::Text(&text)
                    }
                    EncoderKind::PretrainedImage => {
                        image = render_chart(&bars[i + 1 - render.window_hours..=i], &render)?;
                        Representation::Image(&image)
                    }
                };
                let e = encoder.encode(rep)?;
                let line = serde_json::json!({
                    "timestamp": bar.timestamp.format(chartcast::market_data::TIMESTAMP_FORMAT).to_string(),
                    "vector": e.vector,
                });
                writeln!(w, "{line}")?;
            }
        }
        Command::Train {
            data,
            model,
            label: scheme,
            batch_size,
            lr,
            dropout,
            w,
            epochs,
            checkpoint,
        } => {
            let model: ModelKind = model.parse()?;
            let mut cfg = base_config(cli, Some(&data.data))?;
            cfg.models = vec![model];
            cfg.schemes = vec![scheme.parse()?];
            cfg.search.batch_sizes = vec![*batch_size];
            cfg.search.learning_rates = vec![*lr];
            cfg.search.dropouts = vec![*dropout];
            cfg.search.w_values = vec![*w];
            cfg.search.n_trials = 1;
            cfg.training.max_epochs = *epochs;
            cfg.encoder.checkpoint_id = checkpoint.clone();
            cfg.analysis.enabled = false;
            let summary = run_pipeline(&cfg)?;
            println!("{}", summary.report);
            println!("run directory: {}", summary.run_dir.display());
        }
        Command::Baseline { data, strategy, scheme } => {
            let strategy: Strategy = strategy.parse()?;
            let scheme: LabelScheme = scheme.parse()?;
            let (test, labels) = test_labels(&data.load()?, scheme)?;
            let decisions = strategy.decide(&labels, seed);
            if let Some(p) = out {
                chartcast::pipeline::write_predictions(p, &decisions)?;
            }
            let report = evaluate(&decisions, &labels, &test, scheme)?;
            println!("{}", render_table(Some(scheme.title()), &[(strategy.title().to_string(), report)]));
        }
        Command::Eval {
            data,
            predictions,
            scheme,
        } => {
            let scheme: LabelScheme = scheme.parse()?;
            let (test, labels) = test_labels(&data.load()?, scheme)?;
            let decisions = read_predictions(predictions)?;
            let by_index: std::collections::HashMap<usize, &LabeledSample> =
                labels.iter().map(|l| (l.anchor_index, l)).collect();
            let aligned: Vec<LabeledSample> = decisions
                .iter()
                .map(|d| {
                    by_index
                        .get(&d.anchor_index)
                        .map(|l| **l)
                        .ok_or_else(|| Error::Validation(format!("no test label at anchor {}", d.anchor_index)))
                })
                .collect::<Result<_, _>>()?;
            let report = evaluate(&decisions, &aligned, &test, scheme)?;
            writeln!(output(out)?, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Search {
            data,
            model,
            scheme,
            trials,
        } => {
            let mut cfg = base_config(cli, data.as_ref())?;
            cfg.models = vec![model.parse()?];
            cfg.schemes = vec![scheme.parse()?];
            if let Some(n) = trials {
                cfg.search.n_trials = *n;
            }
            cfg.analysis.enabled = false;
            let summary = run_pipeline(&cfg)?;
            println!("{}", summary.report);
            println!("run directory: {}", summary.run_dir.display());
        }
        Command::Report { runs } => {
            let mut files = Vec::new();
            collect_metrics(runs, &mut files)?;
            if files.is_empty() {
                bail!(Error::Validation(format!("no metrics.json under {}", runs.display())));
            }
            files.sort();
            let mut w = output(out)?;
            for f in files {
                let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&f)?)?;
                let entries: Vec<chartcast::experiment::ReportEntry> = serde_json::from_value(doc["entries"].clone())?;
                writeln!(w, "## {}\n", f.parent().unwrap_or(&f).display())?;
                writeln!(w, "{}", chartcast::experiment::render_report(&entries))?;
            }
        }
        Command::Analyze { what, model } => {
            let what: AnalysisKind = what.parse()?;
            let summary = analyze_run(model, what)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Run { data } => {
            let cfg = base_config(cli, data.as_ref())?;
            let summary = run_pipeline(&cfg)?;
            println!("{}", summary.report);
            if let Some(a) = &summary.analysis {
                println!("analysis: {}", serde_json::to_string(a)?);
            }
            println!("run directory: {}", summary.run_dir.display());
        }
        Command::Surrogate => {
            let dir = out.unwrap_or(Path::new("models/clip-vit-base-patch32"));
            write_surrogate(dir, seed)?;
            println!("surrogate checkpoint -> {}", dir.display());
        }
    }
    Ok(())
}

fn collect_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_metrics(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.json") && path.with_file_name("report.md").is_file() {
            found.push(path);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
