//! Random search over training hyperparameters with top-three selection on
//! validation F1 and mean-of-three test reporting.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::StrategyDecision;
use crate::encoder::{EmbeddingSequence, EncoderKind};
use crate::error::{unknown_choice, Error, Result};
use crate::evaluation::{evaluate, render_table, MetricsReport};
use crate::forecaster::{load_model, save_model, train, DainConfig, Forecaster, LstmHeadConfig, TrainConfig};
use crate::market_data::{LabelScheme, LabeledSample, OhlcSeries};
use crate::representation::WindowKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", try_from = "String")]
pub enum ModelKind {
    Lstm,
    LstmLong,
    Stacked,
    Dain,
    ClipImage,
    ClipText,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Lstm,
        ModelKind::LstmLong,
        ModelKind::Stacked,
        ModelKind::Dain,
        ModelKind::ClipImage,
        ModelKind::ClipText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::LstmLong => "lstm-long",
            ModelKind::Stacked => "stacked",
            ModelKind::Dain => "dain",
            ModelKind::ClipImage => "clip-image",
            ModelKind::ClipText => "clip-text",
        }
    }

    /// Row label in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            ModelKind::Lstm => "LSTM",
            ModelKind::LstmLong => "LSTM (long sequence)",
            ModelKind::Stacked => "Stacked-LSTM (long sequence)",
            ModelKind::Dain => "DAIN-LSTM",
            ModelKind::ClipImage => "CLIP-LSTM (image)",
            ModelKind::ClipText => "CLIP-LSTM (text)",
        }
    }

    pub fn window_kind(self) -> WindowKind {
        match self {
            ModelKind::Lstm => WindowKind::Numeric24,
            ModelKind::LstmLong | ModelKind::Stacked | ModelKind::Dain => WindowKind::Numeric48,
            ModelKind::ClipImage => WindowKind::Image5x20,
            ModelKind::ClipText => WindowKind::Text24,
        }
    }

    pub fn encoder_kind(self) -> EncoderKind {
        match self {
            ModelKind::ClipImage => EncoderKind::PretrainedImage,
            ModelKind::ClipText => EncoderKind::PretrainedText,
            _ => EncoderKind::Identity,
        }
    }

    /// Whether numeric inputs are z-scored with training-split statistics
    /// before reaching the model.
    pub fn normalizes_inputs(self) -> bool {
        self.encoder_kind() == EncoderKind::Identity && self != ModelKind::Dain
    }

    pub fn uses_dain(self) -> bool {
        self == ModelKind::Dain
    }

    pub fn lstm_layers(self) -> usize {
        if self == ModelKind::Stacked {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| unknown_choice("model", s, &ModelKind::ALL.map(|k| k.name())))
    }
}

impl TryFrom<String> for ModelKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub w_values: Vec<f64>,
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            batch_sizes: vec![16, 32, 64, 128, 256],
            learning_rates: vec![0.00005, 0.0001, 0.0005, 0.001],
            dropouts: vec![0.0, 0.2, 0.4],
            w_values: vec![-0.00015, -0.00005, 0.0],
            n_trials: 30,
            seed: 0,
        }
    }
}

/// One sampled point of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub index: usize,
    /// Position of the combination in the full grid.
    pub combination: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub w: f64,
    pub seed: u64,
}

/// Seed of trial `index` under `master`.
pub fn trial_seed(master: u64, index: usize) -> u64 {
    let mut z = master ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SearchSpace {
    pub fn size(&self) -> usize {
        self.batch_sizes.len() * self.learning_rates.len() * self.dropouts.len() * self.w_values.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() == 0 {
            return Err(Error::Config("every search dimension needs at least one value".into()));
        }
        if self.n_trials == 0 || self.n_trials > self.size() {
            return Err(Error::Config(format!(
                "n_trials must lie in [1, {}], got {}",
                self.size(),
                self.n_trials
            )));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.dropouts.iter().any(|d| !(0.0..1.0).contains(d)) {
            return Err(Error::Config("dropouts must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn decode(&self, combination: usize) -> (usize, f64, f64, f64) {
        let mut c = combination;
        let w = self.w_values[c % self.w_values.len()];
        c /= self.w_values.len();
        let d = self.dropouts[c % self.dropouts.len()];
        c /= self.dropouts.len();
        let lr = self.learning_rates[c % self.learning_rates.len()];
        c /= self.learning_rates.len();
        (self.batch_sizes[c], lr, d, w)
    }

    /// `n_trials` distinct grid points in sampling order.
    pub fn sample(&self) -> Result<Vec<TrialSpec>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let picks = rand::seq::index::sample(&mut rng, self.size(), self.n_trials);
        Ok(picks
            .into_iter()
            .enumerate()
            .map(|(index, combination)| {
                let (batch_size, learning_rate, dropout, w) = self.decode(combination);
                TrialSpec {
                    index,
                    combination,
                    batch_size,
                    learning_rate,
                    dropout,
                    w,
                    seed: trial_seed(self.seed, index),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    TrialTrained,
    TrialResumed,
    TrialFailed,
    Selection,
    TestEvaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: usize,
    pub kind: AuditKind,
    pub trials: Vec<usize>,
    pub detail: String,
}

/// True when test metrics were only computed after selection and only for
/// selected trials.
pub fn audit_is_clean(events: &[AuditEvent]) -> bool {
    let Some(sel) = events.iter().position(|e| e.kind == AuditKind::Selection) else {
        return !events.iter().any(|e| e.kind == AuditKind::TestEvaluated);
    };
    let selected = &events[sel].trials;
    events.iter().enumerate().all(|(i, e)| {
        e.kind != AuditKind::TestEvaluated || (i > sel && e.trials.iter().all(|t| selected.contains(t)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Trained,
    Resumed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub spec: TrialSpec,
    pub config: TrainConfig,
    pub status: TrialStatus,
    pub validation_f1: Option<f64>,
    pub error: Option<String>,
    pub test: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: ModelKind,
    pub scheme: LabelScheme,
    pub space: SearchSpace,
    pub trials: Vec<TrialRecord>,
    pub selected: Vec<usize>,
    pub aggregate: MetricsReport,
    pub audit: Vec<AuditEvent>,
}

/// Embedded splits for one model kind and label scheme. Test sequences
/// index into `test_series`.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub train: &'a [EmbeddingSequence],
    pub validation: &'a [EmbeddingSequence],
    pub test: &'a [EmbeddingSequence],
    pub test_series: &'a OhlcSeries,
    pub scheme: LabelScheme,
}

/// Settings shared by every trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub head: LstmHeadConfig,
    pub dain: Option<DainConfig>,
    pub max_epochs: usize,
    pub patience: usize,
    /// Written into every persisted trial file.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrialFile {
    model: ModelKind,
    scheme: LabelScheme,
    spec: TrialSpec,
    train: TrainConfig,
    head: LstmHeadConfig,
    dain: Option<DainConfig>,
    config_hash: Option<String>,
}

pub fn trial_dir(runs: &Path, model: ModelKind, scheme: LabelScheme, index: usize) -> PathBuf {
    runs.join(model.name()).join(scheme.name()).join(format!("trial_{index}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Decisions of `model` for each sequence.
pub fn decide(model: &Forecaster, seqs: &[EmbeddingSequence]) -> Result<Vec<StrategyDecision>> {
    let preds = model.predict(seqs)?;
    Ok(seqs
        .iter()
        .zip(preds)
        .map(|(s, direction)| StrategyDecision {
            anchor_index: s.anchor_index,
            anchor_ts: s.anchor_ts,
            direction,
        })
        .collect())
}

/// Labeled anchors carried by `seqs`.
pub fn sequence_labels(seqs: &[EmbeddingSequence], scheme: LabelScheme) -> Vec<LabeledSample> {
    seqs.iter()
        .map(|s| LabeledSample {
            anchor_index: s.anchor_index,
            anchor_ts: s.anchor_ts,
            scheme,
            delta: s.delta,
            label: s.label,
        })
        .collect()
}

/// Test report of `model` on `data`.
pub fn evaluate_model(model: &Forecaster, data: &ExperimentData<'_>) -> Result<MetricsReport> {
    let decisions = decide(model, data.test)?;
    evaluate(
        &decisions,
        &sequence_labels(data.test, data.scheme),
        data.test_series,
        data.scheme,
    )
}

enum Outcome {
    Trained(Forecaster, f64),
    Resumed(Forecaster, f64),
    Failed(String),
}

/// Indices of the three best trials by validation F1, lower index first
/// on ties.
pub fn select_top(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Trains every sampled trial (in parallel), selects the top three on
/// validation F1, and only then evaluates those three on the test split.
/// With `runs` set, each trial is persisted under
/// `runs/<model>/<scheme>/trial_<k>/`, and a trial whose directory already
/// holds a matching configuration and checkpoint is loaded instead of
/// retrained.
pub fn run_search(
    model: ModelKind,
    space: &SearchSpace,
    settings: &SearchSettings,
    data: &ExperimentData<'_>,
    runs: Option<&Path>,
) -> Result<ExperimentResult> {
    let specs = space.sample()?;
    let scheme = data.scheme;
    let outcomes: Vec<(TrainConfig, Outcome)> = specs
        .par_iter()
        .map(|spec| {
            let cfg = TrainConfig {
                batch_size: spec.batch_size,
                learning_rate: spec.learning_rate,
                dropout: spec.dropout,
                w: spec.w,
                max_epochs: settings.max_epochs,
                patience: settings.patience,
                seed: spec.seed,
            };
            let file = TrialFile {
                model,
                scheme,
                spec: spec.clone(),
                train: cfg.clone(),
                head: settings.head.clone(),
                dain: settings.dain.clone(),
                config_hash: settings.config_hash.clone(),
            };
            let dir = runs.map(|r| trial_dir(r, model, scheme, spec.index));
            if let Some(dir) = &dir {
                let previous = std::fs::read_to_string(dir.join("config.json"))
                    .ok()
                    .and_then(|s| serde_json::from_str::<TrialFile>(&s).ok());
                if previous.as_ref() == Some(&file) {
                    if let Ok((m, side)) = load_model(dir) {
                        return Ok((cfg, Outcome::Resumed(m, side.validation_f1)));
                    }
                }
            }
            let outcome = match train(settings.head.clone(), settings.dain.clone(), data.train, data.validation, &cfg) {
                Ok(trained) => {
                    if let Some(dir) = &dir {
                        write_json(&dir.join("config.json"), &file)?;
                        save_model(dir, &trained, settings.config_hash.as_deref())?;
                    }
                    Outcome::Trained(trained.model, trained.validation_f1)
                }
                Err(e @ (Error::Divergence { .. } | Error::Config(_))) => {
                    log::warn!("{model}/{scheme} trial {} failed: {e}", spec.index);
                    Outcome::Failed(e.to_string())
                }
                Err(e) => return Err(e),
            };
            Ok((cfg, outcome))
        })
        .collect::<Result<_>>()?;

    let mut audit = Vec::new();
    let mut log_event = |kind, trials: Vec<usize>, detail: String| {
        let seq = audit.len();
        audit.push(AuditEvent { seq, kind, trials, detail });
    };
    let mut records = Vec::with_capacity(specs.len());
    let mut models: Vec<Option<Forecaster>> = Vec::with_capacity(specs.len());
    for (spec, (cfg, outcome)) in specs.iter().zip(outcomes) {
        let (status, f1, error, m) = match outcome {
            Outcome::Trained(m, f1) => (TrialStatus::Trained, Some(f1), None, Some(m)),
            Outcome::Resumed(m, f1) => (TrialStatus::Resumed, Some(f1), None, Some(m)),
            Outcome::Failed(e) => (TrialStatus::Failed, None, Some(e), None),
        };
        let kind = match status {
            TrialStatus::Trained => AuditKind::TrialTrained,
            TrialStatus::Resumed => AuditKind::TrialResumed,
            TrialStatus::Failed => AuditKind::TrialFailed,
        };
        let detail = match (f1, &error) {
            (Some(f1), _) => format!("validation F1 {f1:.6}"),
            (None, Some(e)) => e.clone(),
            (None, None) => String::new(),
        };
        log_event(kind, vec![spec.index], detail);
        records.push(TrialRecord {
            spec: spec.clone(),
            config: cfg,
            status,
            validation_f1: f1,
            error,
            test: None,
        });
        models.push(m);
    }

    let scores: Vec<(usize, f64)> = records
        .iter()
        .filter_map(|r| r.validation_f1.map(|f| (r.spec.index, f)))
        .collect();
    if scores.is_empty() {
        return Err(Error::Validation(format!("every {model}/{scheme} trial failed")));
    }
    let selected = select_top(&scores, 3);
    log_event(AuditKind::Selection, selected.clone(), "top three by validation F1".into());

    let mut reports = Vec::with_capacity(selected.len());
    for &i in &selected {
        let m = models[i].as_ref().expect("selected trials have models");
        let report = evaluate_model(m, data)?;
        log_event(AuditKind::TestEvaluated, vec![i], format!("test F1 {:.6}", report.f1));
        if let Some(r) = runs {
            let dir = trial_dir(r, model, scheme, i);
            write_json(
                &dir.join("metrics.json"),
                &serde_json::json!({
                    "config_hash": settings.config_hash,
                    "validation_f1": records[i].validation_f1,
                    "test": report,
                }),
            )?;
        }
        records[i].test = Some(report.clone());
        reports.push(report);
    }
    if let Some(r) = runs {
        for rec in records.iter().filter(|rec| rec.test.is_none() && rec.validation_f1.is_some()) {
            let dir = trial_dir(r, model, scheme, rec.spec.index);
            write_json(
                &dir.join("metrics.json"),
                &serde_json::json!({
                    "config_hash": settings.config_hash,
                    "validation_f1": rec.validation_f1,
                    "test": null,
                }),
            )?;
        }
    }
    let aggregate = MetricsReport::mean(&reports).expect("at least one selected trial");
    let result = ExperimentResult {
        model,
        scheme,
        space: space.clone(),
        trials: records,
        selected,
        aggregate,
        audit,
    };
    if let Some(r) = runs {
        let base = r.join(model.name()).join(scheme.name());
        write_json(&base.join("result.json"), &result)?;
        let lines: Vec<String> = result
            .audit
            .iter()
            .map(serde_json::to_string)
            .collect::<std::result::Result<_, _>>()?;
        let path = base.join("audit.jsonl");
        std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}

/// A named row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub report: MetricsReport,
}

impl From<&ExperimentResult> for ReportEntry {
    fn from(r: &ExperimentResult) -> Self {
        ReportEntry {
            name: r.model.title().to_string(),
            report: r.aggregate.clone(),
        }
    }
}

/// Comparison table with one section per label scheme, rows in input
/// order.
pub fn render_report(entries: &[ReportEntry]) -> String {
    if entries.is_empty() {
        return render_table(None, &[]);
    }
    let mut out = String::new();
    for scheme in LabelScheme::ALL {
        let rows: Vec<(String, MetricsReport)> = entries
            .iter()
            .filter(|e| e.report.scheme == scheme)
            .map(|e| (e.name.clone(), e.report.clone()))
            .collect();
        if rows.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&render_table(Some(scheme.title()), &rows));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::ConfusionCounts;

    #[test]
    fn full_grid_has_180_points() {
        assert_eq!(SearchSpace::default().size(), 180);
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        let space = SearchSpace {
            n_trials: 180,
            seed: 4,
            ..SearchSpace::default()
        };
        let a = space.sample().unwrap();
        assert_eq!(a, space.sample().unwrap());
        let mut combos: Vec<usize> = a.iter().map(|t| t.combination).collect();
        combos.sort_unstable();
        combos.dedup();
        assert_eq!(combos.len(), 180);
        let too_many = SearchSpace {
            n_trials: 181,
            ..SearchSpace::default()
        };
        assert!(matches!(too_many.sample(), Err(Error::Config(_))));
    }

    #[test]
    fn decode_covers_every_value() {
        let space = SearchSpace::default();
        let all: Vec<_> = (0..space.size()).map(|c| space.decode(c)).collect();
        for bs in &space.batch_sizes {
            assert_eq!(all.iter().filter(|t| t.0 == *bs).count(), 36);
        }
    }

    #[test]
    fn selection_ties_and_scaling() {
        let scores = [(0, 0.5), (1, 0.7), (2, 0.5), (3, 0.6), (4, 0.1)];
        assert_eq!(select_top(&scores, 3), vec![1, 3, 0]);
        let scaled: Vec<_> = scores.iter().map(|&(i, f)| (i, f * 0.37)).collect();
        assert_eq!(select_top(&scaled, 3), vec![1, 3, 0]);
        assert_eq!(select_top(&scores[..1], 3), vec![0]);
    }

    fn report(scheme: LabelScheme) -> MetricsReport {
        MetricsReport {
            f1: 0.73,
            mcc: 0.0,
            balanced_acc: 0.5,
            precision_short: 0.0,
            precision_long: 58.03,
            pip_short: 0.0,
            pip_long: 933.49,
            counts: ConfusionCounts::default(),
            scheme,
            dropped: 0,
        }
    }

    #[test]
    fn report_sections() {
        let entries = vec![
            ReportEntry {
                name: "Always Long".into(),
                report: report(LabelScheme::Standard),
            },
            ReportEntry {
                name: "Always Long".into(),
                report: report(LabelScheme::Delayed),
            },
        ];
        let text = render_report(&entries);
        let std_at = text.find("Standard Label").unwrap();
        let del_at = text.find("Delayed Label").unwrap();
        assert!(std_at < del_at);
        assert!(text.contains("933.49"));
        assert_eq!(render_report(&[]).lines().count(), 2);
    }

    #[test]
    fn audit_check_detects_early_test_access() {
        let ev = |seq, kind, trials: Vec<usize>| AuditEvent {
            seq,
            kind,
            trials,
            detail: String::new(),
        };
        let good = vec![
            ev(0, AuditKind::TrialTrained, vec![0]),
            ev(1, AuditKind::Selection, vec![0]),
            ev(2, AuditKind::TestEvaluated, vec![0]),
        ];
        assert!(audit_is_clean(&good));
        let early = vec![
            ev(0, AuditKind::TestEvaluated, vec![0]),
            ev(1, AuditKind::Selection, vec![0]),
        ];
        assert!(!audit_is_clean(&early));
        let unselected = vec![
            ev(0, AuditKind::Selection, vec![0]),
            ev(1, AuditKind::TestEvaluated, vec![1]),
        ];
        assert!(!audit_is_clean(&unselected));
    }

    #[test]
    fn model_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        let err = "stackd".parse::<ModelKind>().unwrap_err().to_string();
        assert!(err.contains("stacked"), "{err}");
    }
}
