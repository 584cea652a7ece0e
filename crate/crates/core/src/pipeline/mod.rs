//! End-to-end orchestration: ingest, label, represent, embed, search,
//! baselines, report and analysis, inside a run directory named by the
//! configuration hash.

mod config;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{validate_config, AnalysisSettings, EncoderSettings, RunConfig, SearchConfig, TrainingSettings};

use crate::analysis::{
    self, line_vs_blank_ratio, number_embedding_study, project_embeddings, relevance, trajectory_summary,
    ClusterSummary, Provenance, TrajectorySummary,
};
use crate::baselines::Strategy;
use crate::encoder::{
    cache_key, encode_sequence, resolve_checkpoint, CacheStats, ClipModel, EmbeddingCache, EmbeddingSequence, Encoder, EncoderKind,
    EncoderSpec, IdentityEncoder, PretrainedEncoder, Representation,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::baselines::StrategyDecision;
use crate::experiment::{decide, render_report, run_search, trial_dir, ExperimentData, ModelKind, ReportEntry, SearchSettings, TrialStatus};
use crate::forecaster::{load_model, LstmHeadConfig};
use crate::market_data::{
    generate_synthetic, ingest, label, split, statistics, write_csv, LabelScheme, LabeledSample, OhlcSeries, Splits,
};
use crate::representation::{
    fit_normalizer, make_windows, render_chart, serialize_text, ModelWindow, RenderConfig, WindowKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Label,
    Represent,
    Embed,
    Search,
    Baseline,
    Report,
    Analyze,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Label => "label",
            Stage::Represent => "represent",
            Stage::Embed => "embed",
            Stage::Search => "search",
            Stage::Baseline => "baseline",
            Stage::Report => "report",
            Stage::Analyze => "analyze",
        }
    }

    /// Stages that must have completed first.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Label => &[Stage::Ingest],
            Stage::Represent => &[Stage::Label],
            Stage::Embed => &[Stage::Represent],
            Stage::Search => &[Stage::Embed],
            Stage::Baseline => &[Stage::Label],
            Stage::Report => &[Stage::Search, Stage::Baseline],
            Stage::Analyze => &[Stage::Embed],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    /// Work was done.
    Ran,
    /// Every output came from an earlier run (checkpoints, cache).
    Reused,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub config_hash: String,
    pub detail: String,
}

/// Enforces stage ordering and writes `stages/<name>.json` markers.
struct Tracker {
    dir: PathBuf,
    hash: String,
    done: Vec<Stage>,
    records: Vec<StageRecord>,
}

impl Tracker {
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<(T, StageStatus, String)>) -> Result<T> {
        if let Some(missing) = stage.deps().iter().find(|d| !self.done.contains(d)) {
            return Err(Error::Stage {
                stage: stage.name().into(),
                source: Box::new(Error::Config(format!("stage `{missing}` has not completed"))),
            });
        }
        log::info!("stage {stage}");
        let (value, status, detail) = f().map_err(|e| Error::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        })?;
        let record = StageRecord {
            stage,
            status,
            config_hash: self.hash.clone(),
            detail,
        };
        write_json(&self.dir.join("stages").join(format!("{stage}.json")), &record)?;
        self.done.push(stage);
        self.records.push(record);
        Ok(value)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` unless the file already holds exactly them. Returns
/// whether anything was written.
fn write_once(path: &Path, bytes: &[u8]) -> Result<bool> {
    if std::fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(false);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

/// One decision per line, in anchor order.
pub fn write_predictions(path: &Path, decisions: &[StrategyDecision]) -> Result<()> {
    let mut text = String::new();
    for d in decisions {
        text.push_str(&serde_json::to_string(d)?);
        text.push('\n');
    }
    write_once(path, text.as_bytes()).map(|_| ())
}

pub fn read_predictions(path: &Path) -> Result<Vec<StrategyDecision>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                row: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Measured numbers of the soft analysis checks. `passed` fields are
/// advisory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub numbers: Option<ClusterSummary>,
    pub trajectory: Option<TrajectorySummary>,
    /// Line-to-blank relevance ratio per heatmap.
    pub relevance_ratios: Vec<Option<f64>>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub cache: CacheStats,
    pub trials_trained: usize,
    pub trials_resumed: usize,
    pub entries: Vec<ReportEntry>,
    pub report: String,
    pub analysis: Option<AnalysisSummary>,
}

pub fn run_dir_for(cfg: &RunConfig, hash: &str) -> PathBuf {
    cfg.out.join(format!("run-{}", &hash[..12]))
}

/// Labels of one split.
struct SplitLabels {
    train: Vec<LabeledSample>,
    validation: Vec<LabeledSample>,
    test: Vec<LabeledSample>,
}

struct SplitWindows {
    train: Vec<ModelWindow>,
    validation: Vec<ModelWindow>,
    test: Vec<ModelWindow>,
}

struct SplitEmbeddings {
    train: Vec<EmbeddingSequence>,
    validation: Vec<EmbeddingSequence>,
    test: Vec<EmbeddingSequence>,
}

/// Which encoder a model's windows go through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum EncoderChoice {
    Normalized,
    Raw,
    Text,
    Image,
}

fn encoder_choice(model: ModelKind) -> EncoderChoice {
    match model.encoder_kind() {
        EncoderKind::PretrainedText => EncoderChoice::Text,
        EncoderKind::PretrainedImage => EncoderChoice::Image,
        EncoderKind::Identity if model.normalizes_inputs() => EncoderChoice::Normalized,
        EncoderKind::Identity => EncoderChoice::Raw,
    }
}

/// Runs every stage for `cfg`. Re-running an identical configuration
/// reuses checkpoints and cached embeddings and recomputes nothing
/// expensive.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let run_dir = run_dir_for(cfg, &hash);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_json(
        &run_dir.join("config.json"),
        &serde_json::json!({ "config_hash": hash, "config": cfg }),
    )?;
    let cache = EmbeddingCache::open(&cfg.cache_dir())?;
    let render = RenderConfig::default();
    let mut tracker = Tracker {
        dir: run_dir.clone(),
        hash: hash.clone(),
        done: Vec::new(),
        records: Vec::new(),
    };

    let splits: Splits = tracker.run(Stage::Ingest, || {
        let series = match (&cfg.dataset, &cfg.synthetic) {
            (Some(path), _) => ingest(path, cfg.format)?,
            (None, Some(s)) => generate_synthetic(s),
            (None, None) => unreachable!("validated"),
        };
        let mut csv = Vec::new();
        write_csv(&series, &mut csv)?;
        let wrote = write_once(&run_dir.join("dataset").join("bars.csv"), &csv)?;
        let splits = split(&series, &cfg.split)?;
        write_json(
            &run_dir.join("dataset").join("splits.json"),
            &serde_json::json!({
                "config_hash": hash,
                "bars": series.len(),
                "train": splits.train.len(),
                "validation": splits.validation.len(),
                "test": splits.test.len(),
            }),
        )?;
        let status = if wrote { StageStatus::Ran } else { StageStatus::Reused };
        Ok((splits, status, format!("{} bars", series.len())))
    })?;

    let labels: HashMap<LabelScheme, SplitLabels> = tracker.run(Stage::Label, || {
        let mut out = HashMap::new();
        for &scheme in &cfg.schemes {
            let l = SplitLabels {
                train: label(&splits.train, scheme),
                validation: label(&splits.validation, scheme),
                test: label(&splits.test, scheme),
            };
            let dir = run_dir.join("labels");
            for (name, samples) in [("train", &l.train), ("validation", &l.validation), ("test", &l.test)] {
                let mut lines = String::new();
                for s in samples {
                    lines.push_str(&serde_json::to_string(s)?);
                    lines.push('\n');
                }
                write_once(&dir.join(format!("{scheme}_{name}.jsonl")), lines.as_bytes())?;
            }
            write_json(
                &dir.join(format!("{scheme}_stats.json")),
                &serde_json::json!({
                    "config_hash": hash,
                    "train": statistics(&l.train)?,
                    "validation": statistics(&l.validation)?,
                    "test": statistics(&l.test)?,
                }),
            )?;
            out.insert(scheme, l);
        }
        Ok((out, StageStatus::Ran, format!("{} scheme(s)", cfg.schemes.len())))
    })?;

    let mut kinds: Vec<WindowKind> = cfg.models.iter().map(|m| m.window_kind()).collect();
    kinds.sort_by_key(|k| k.name());
    kinds.dedup();
    let windows: HashMap<(LabelScheme, WindowKind), SplitWindows> = tracker.run(Stage::Represent, || {
        let mut out = HashMap::new();
        let mut summary = Vec::new();
        for &scheme in &cfg.schemes {
            let l = &labels[&scheme];
            for &kind in &kinds {
                let train = make_windows(&splits.train, &l.train, kind);
                let validation = make_windows(&splits.validation, &l.validation, kind);
                let test = make_windows(&splits.test, &l.test, kind);
                summary.push(serde_json::json!({
                    "scheme": scheme,
                    "kind": kind,
                    "train": train.windows.len(),
                    "validation": validation.windows.len(),
                    "test": test.windows.len(),
                    "dropped": train.dropped.len() + validation.dropped.len() + test.dropped.len(),
                }));
                out.insert(
                    (scheme, kind),
                    SplitWindows {
                        train: train.windows,
                        validation: validation.windows,
                        test: test.windows,
                    },
                );
            }
        }
        let dir = run_dir.join("representations");
        if let Some(w) = out.values().find_map(|s| s.test.iter().find(|w| w.kind == WindowKind::Image5x20)) {
            let span = &w.spans[0];
            let png = render_chart(&splits.test.bars()[span.clone()], &render)?.to_png()?;
            write_once(&dir.join("sample_chart.png"), &png)?;
        }
        if let Some(w) = out.values().find_map(|s| s.test.iter().find(|w| w.kind == WindowKind::Text24)) {
            let text: String = w
                .spans
                .iter()
                .map(|r| serialize_text(&splits.test.bars()[r.start]).text + "\n")
                .collect();
            write_once(&dir.join("sample_text.txt"), text.as_bytes())?;
        }
        write_json(
            &dir.join("windows.json"),
            &serde_json::json!({ "config_hash": hash, "windows": summary }),
        )?;
        Ok((out, StageStatus::Ran, format!("{} window kind(s)", kinds.len())))
    })?;

    let uses_clip = cfg
        .models
        .iter()
        .any(|m| matches!(encoder_choice(*m), EncoderChoice::Text | EncoderChoice::Image));
    let (text_encoder, image_encoder) = if cfg.needs_pretrained() {
        match load_clip(cfg) {
            Ok((t, i)) => (Some(t), Some(i)),
            Err(e) if uses_clip => {
                return Err(Error::Stage {
                    stage: Stage::Embed.name().into(),
                    source: Box::new(e),
                })
            }
            Err(e) => {
                log::warn!("analysis disabled: {e}");
                (None, None)
            }
        }
    } else {
        (None, None)
    };
    let normalizer = fit_normalizer(&splits.train)?;
    let normalized_encoder = IdentityEncoder::new(Some(normalizer));
    let raw_encoder = IdentityEncoder::new(None);
    let encoder_for = |choice: EncoderChoice| -> Option<&dyn Encoder> {
        match choice {
            EncoderChoice::Normalized => Some(&normalized_encoder),
            EncoderChoice::Raw => Some(&raw_encoder),
            EncoderChoice::Text => text_encoder.as_ref().map(|e| e as &dyn Encoder),
            EncoderChoice::Image => image_encoder.as_ref().map(|e| e as &dyn Encoder),
        }
    };

    let mut jobs: Vec<(LabelScheme, WindowKind, EncoderChoice)> = Vec::new();
    for &scheme in &cfg.schemes {
        for &m in &cfg.models {
            jobs.push((scheme, m.window_kind(), encoder_choice(m)));
        }
    }
    jobs.sort_by_key(|j| (j.0, j.1.name(), j.2 as u8));
    jobs.dedup();
    let embeddings: HashMap<(LabelScheme, WindowKind, EncoderChoice), SplitEmbeddings> =
        tracker.run(Stage::Embed, || {
            let before = cache.stats();
            let mut out = HashMap::new();
            for &(scheme, kind, choice) in &jobs {
                let enc = encoder_for(choice).expect("pretrained encoders loaded when needed");
                let w = &windows[&(scheme, kind)];
                let e = SplitEmbeddings {
                    train: encode_sequence(&w.train, &splits.train, enc, &render, Some(&cache))?,
                    validation: encode_sequence(&w.validation, &splits.validation, enc, &render, Some(&cache))?,
                    test: encode_sequence(&w.test, &splits.test, enc, &render, Some(&cache))?,
                };
                out.insert((scheme, kind, choice), e);
            }
            let after = cache.stats();
            let computed = after.computed - before.computed;
            let hits = after.hits - before.hits;
            write_json(
                &run_dir.join("embeddings").join("summary.json"),
                &serde_json::json!({
                    "config_hash": hash,
                    "checkpoint_id": text_encoder.as_ref().map(|e| e.spec().checkpoint_id.clone()),
                    "jobs": jobs.len(),
                    "cache_hits": hits,
                    "computed": computed,
                }),
            )?;
            let status = if computed == 0 { StageStatus::Reused } else { StageStatus::Ran };
            Ok((out, status, format!("{hits} cache hits, {computed} computed")))
        })?;

    let (results, trained, resumed) = tracker.run(Stage::Search, || {
        let mut results = Vec::new();
        let (mut trained, mut resumed) = (0, 0);
        for &scheme in &cfg.schemes {
            for &model in &cfg.models {
                let e = &embeddings[&(scheme, model.window_kind(), encoder_choice(model))];
                let dim = e.train.first().map(|s| s.dim()).ok_or(Error::NoSamples)?;
                let head = LstmHeadConfig {
                    input_dim: dim,
                    hidden_dim: cfg.training.hidden_dim,
                    num_layers: model.lstm_layers(),
                    mlp_hidden: cfg.training.mlp_hidden,
                    dropout: 0.0,
                };
                let settings = SearchSettings {
                    head,
                    dain: model.uses_dain().then(|| cfg.dain.clone()),
                    max_epochs: cfg.training.max_epochs,
                    patience: cfg.training.patience,
                    config_hash: Some(hash.clone()),
                };
                let data = ExperimentData {
                    train: &e.train,
                    validation: &e.validation,
                    test: &e.test,
                    test_series: &splits.test,
                    scheme,
                };
                let r = run_search(
                    model,
                    &cfg.search.space(cfg.seed),
                    &settings,
                    &data,
                    Some(&run_dir.join("search")),
                )?;
                let best = trial_dir(&run_dir.join("search"), model, scheme, r.selected[0]);
                let (best, _) = load_model(&best)?;
                write_predictions(
                    &run_dir.join("predictions").join(format!("{model}_{scheme}.jsonl")),
                    &decide(&best, &e.test)?,
                )?;
                trained += r.trials.iter().filter(|t| t.status == TrialStatus::Trained).count();
                resumed += r.trials.iter().filter(|t| t.status == TrialStatus::Resumed).count();
                results.push(r);
            }
        }
        let status = if trained == 0 { StageStatus::Reused } else { StageStatus::Ran };
        Ok(((results, trained, resumed), status, format!("{trained} trained, {resumed} resumed")))
    })?;

    let baselines: Vec<ReportEntry> = tracker.run(Stage::Baseline, || {
        let mut out = Vec::new();
        for &scheme in &cfg.schemes {
            let test = &labels[&scheme].test;
            let mut reports: Vec<(Strategy, MetricsReport)> = Vec::new();
            for strategy in [Strategy::Random, Strategy::Long, Strategy::Short] {
                let decisions = strategy.decide(test, cfg.seed);
                reports.push((strategy, evaluate(&decisions, test, &splits.test, scheme)?));
            }
            write_json(
                &run_dir.join("baselines").join(format!("{scheme}.json")),
                &serde_json::json!({
                    "config_hash": hash,
                    "seed": cfg.seed,
                    "reports": reports.iter().map(|(s, r)| (s.name(), r)).collect::<HashMap<_, _>>(),
                }),
            )?;
            out.extend(reports.into_iter().map(|(s, report)| ReportEntry {
                name: s.title().to_string(),
                report,
            }));
        }
        Ok((out, StageStatus::Ran, "random, long, short".to_string()))
    })?;

    let (entries, report) = tracker.run(Stage::Report, || {
        let entries: Vec<ReportEntry> = baselines
            .iter()
            .cloned()
            .chain(results.iter().map(ReportEntry::from))
            .collect();
        let report = render_report(&entries);
        write_once(
            &run_dir.join("report.md"),
            format!("<!-- config_hash: {hash} -->\n{report}").as_bytes(),
        )?;
        write_json(
            &run_dir.join("metrics.json"),
            &serde_json::json!({ "config_hash": hash, "entries": entries }),
        )?;
        Ok(((entries, report), StageStatus::Ran, format!("{} rows", results.len() + baselines.len())))
    })?;

    let analysis = if cfg.analysis.enabled {
        Some(tracker.run(Stage::Analyze, || {
            let (Some(text), Some(image)) = (&text_encoder, &image_encoder) else {
                let summary = AnalysisSummary {
                    skipped: Some("no pretrained checkpoint".into()),
                    ..Default::default()
                };
                return Ok((summary, StageStatus::Skipped, "no pretrained checkpoint".into()));
            };
            let ctx = AnalysisContext {
                cfg,
                provenance: Provenance {
                    checkpoint_id: cfg.encoder.checkpoint_id.clone(),
                    seed: cfg.seed,
                    config_hash: Some(hash.clone()),
                },
                dir: run_dir.join("analysis"),
                test: &splits.test,
                text,
                image,
                cache: &cache,
                render: &render,
            };
            let summary = ctx.run(&AnalysisKind::ALL)?;
            Ok((summary, StageStatus::Ran, String::new()))
        })?)
    } else {
        None
    };

    Ok(RunSummary {
        run_dir,
        config_hash: hash,
        stages: tracker.records,
        cache: cache.stats(),
        trials_trained: trained,
        trials_resumed: resumed,
        entries,
        report,
        analysis,
    })
}

/// Which analysis `analyze_run` performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Relevance,
    Tsne,
    Numbers,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 3] = [AnalysisKind::Relevance, AnalysisKind::Tsne, AnalysisKind::Numbers];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::Relevance => "relevance",
            AnalysisKind::Tsne => "tsne",
            AnalysisKind::Numbers => "numbers",
        }
    }
}

impl std::str::FromStr for AnalysisKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AnalysisKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::error::unknown_choice("analysis", s, &AnalysisKind::ALL.map(|k| k.name())))
    }
}

/// Inputs shared by the analyses of one run.
struct AnalysisContext<'a> {
    cfg: &'a RunConfig,
    provenance: Provenance,
    dir: PathBuf,
    test: &'a OhlcSeries,
    text: &'a PretrainedEncoder,
    image: &'a PretrainedEncoder,
    cache: &'a EmbeddingCache,
    render: &'a RenderConfig,
}

impl AnalysisContext<'_> {
    fn tsne_config(&self) -> analysis::TsneConfig {
        analysis::TsneConfig {
            seed: self.cfg.seed,
            ..self.cfg.analysis.tsne.clone()
        }
    }

    fn run(&self, kinds: &[AnalysisKind]) -> Result<AnalysisSummary> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut summary = AnalysisSummary::default();
        for kind in kinds {
            match kind {
                AnalysisKind::Numbers => summary.numbers = self.numbers()?,
                AnalysisKind::Tsne => summary.trajectory = self.tsne()?,
                AnalysisKind::Relevance => summary.relevance_ratios = self.relevance()?,
            }
        }
        analysis::write_artifact(&self.dir.join("summary.json"), &self.provenance, &summary)?;
        Ok(summary)
    }

    fn numbers(&self) -> Result<Option<ClusterSummary>> {
        let study = number_embedding_study(self.cfg.analysis.number_range, self.text, &self.tsne_config())?;
        study.projection.write_csv(&self.dir.join("numbers.csv"))?;
        analysis::write_artifact(&self.dir.join("numbers.json"), &self.provenance, &study.summary)?;
        Ok(study.summary)
    }

    /// Projects the text embedding of each labeled test hour, in time order.
    fn tsne(&self) -> Result<Option<TrajectorySummary>> {
        let scheme = self.cfg.schemes[0];
        let samples = label(self.test, scheme);
        let samples = &samples[..samples.len().min(self.cfg.analysis.tsne_points)];
        let variant = self.text.cache_variant().expect("pretrained encoders are cacheable");
        let vecs: Vec<Vec<f32>> = samples
            .iter()
            .map(|s| {
                let rec = serialize_text(&self.test.bars()[s.anchor_index]);
                let rep = Representation::Text(&rec);
                let key = cache_key(&self.text.spec().checkpoint_id, &variant, &rep.bytes());
                self.cache.get_or_compute(&key, || self.text.encode(rep).map(|e| e.vector))
            })
            .collect::<Result<_>>()?;
        let trajectory = if vecs.len() >= 2 {
            let labels: Vec<i64> = samples.iter().map(|s| i64::from(s.label)).collect();
            let anchors: Vec<String> = samples.iter().map(|s| s.anchor_ts.to_string()).collect();
            let p = project_embeddings(&vecs, &labels, &anchors, &self.tsne_config())?;
            p.write_csv(&self.dir.join("tsne_text.csv"))?;
            trajectory_summary(&p)
        } else {
            None
        };
        analysis::write_artifact(&self.dir.join("tsne_text.json"), &self.provenance, &trajectory)?;
        Ok(trajectory)
    }

    /// Heatmaps for charts spread evenly over the test split.
    fn relevance(&self) -> Result<Vec<Option<f64>>> {
        let bars = self.test.bars();
        let hours = self.render.window_hours;
        let n_windows = (bars.len() + 1).saturating_sub(hours);
        let samples = self.cfg.analysis.relevance_samples.min(n_windows);
        let mut ratios = Vec::with_capacity(samples);
        for k in 0..samples {
            let start = k * n_windows / samples;
            let window = &bars[start..start + hours];
            let chart = render_chart(window, self.render)?;
            let map = relevance(&chart, None, self.image)?;
            let anchor = window[hours - 1].timestamp;
            map.overlay.save_png(&self.dir.join(analysis::relevance_file_name(&anchor)))?;
            ratios.push(line_vs_blank_ratio(&map, &chart, self.render.background, self.render.grid_color));
        }
        analysis::write_artifact(&self.dir.join("relevance.json"), &self.provenance, &ratios)?;
        Ok(ratios)
    }
}

fn load_clip(cfg: &RunConfig) -> Result<(PretrainedEncoder, PretrainedEncoder)> {
    let dir = resolve_checkpoint(&cfg.encoder.checkpoint_id)?;
    let model = Arc::new(ClipModel::load(&cfg.encoder.checkpoint_id, &dir)?);
    let make = |kind| {
        let mut spec = EncoderSpec::pretrained(kind, &cfg.encoder.checkpoint_id);
        spec.output = cfg.encoder.output;
        PretrainedEncoder::from_model(spec, model.clone())
    };
    Ok((make(EncoderKind::PretrainedText), make(EncoderKind::PretrainedImage)))
}

/// Runs one analysis against an existing run directory, using its stored
/// configuration and dataset copy. Outputs go to `<run_dir>/analysis`.
pub fn analyze_run(run_dir: &Path, what: AnalysisKind) -> Result<AnalysisSummary> {
    let path = run_dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct Stored {
        config_hash: String,
        config: RunConfig,
    }
    let stored: Stored = serde_json::from_str(&text)?;
    let cfg = stored.config;
    let bars = run_dir.join("dataset").join("bars.csv");
    let series = ingest(&bars, crate::market_data::InputFormat::Csv)?;
    let splits = split(&series, &cfg.split)?;
    let (text_enc, image_enc) = load_clip(&cfg)?;
    let cache = EmbeddingCache::open(&cfg.cache_dir())?;
    let render = RenderConfig::default();
    let ctx = AnalysisContext {
        cfg: &cfg,
        provenance: Provenance {
            checkpoint_id: cfg.encoder.checkpoint_id.clone(),
            seed: cfg.seed,
            config_hash: Some(stored.config_hash),
        },
        dir: run_dir.join("analysis"),
        test: &splits.test,
        text: &text_enc,
        image: &image_enc,
        cache: &cache,
        render: &render,
    };
    ctx.run(&[what])
}
