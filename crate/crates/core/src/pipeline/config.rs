use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::TsneConfig;
use crate::encoder::{EmbeddingOutput, DEFAULT_CHECKPOINT};
use crate::error::{Error, Result};
use crate::experiment::{ModelKind, SearchSpace};
use crate::forecaster::DainConfig;
use crate::market_data::{InputFormat, LabelScheme, SplitSpec, SyntheticConfig};

/// Everything a pipeline run needs. Loaded from TOML or JSON; unknown keys
/// are rejected and omitted keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Hourly OHLC file. Exactly one of `dataset` and `synthetic` is set.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub format: InputFormat,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "all_schemes", alias = "scheme", deserialize_with = "one_or_many")]
    pub schemes: Vec<LabelScheme>,
    #[serde(default = "all_models", alias = "model", deserialize_with = "one_or_many")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default)]
    pub dain: DainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub analysis: AnalysisSettings,
    /// Master seed for trial sampling, the random baseline and t-SNE.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Embedding cache; defaults to `<out>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn all_schemes() -> Vec<LabelScheme> {
    LabelScheme::ALL.to_vec()
}

fn all_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Accepts a single name or a list of names, parsing each with `FromStr`
/// so that typos get a suggestion.
fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: std::str::FromStr<Err = Error>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(String),
        Many(Vec<String>),
    }
    let names = match Raw::deserialize(d)? {
        Raw::One(s) => vec![s],
        Raw::Many(v) => v,
    };
    names.iter().map(|s| s.parse().map_err(de::Error::custom)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    /// Checkpoint id or directory for both pretrained towers.
    pub checkpoint_id: String,
    pub output: EmbeddingOutput,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            checkpoint_id: DEFAULT_CHECKPOINT.to_string(),
            output: EmbeddingOutput::default(),
        }
    }
}

/// Search grid; the sampling seed is the run's master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub w_values: Vec<f64>,
    pub n_trials: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let s = SearchSpace::default();
        SearchConfig {
            batch_sizes: s.batch_sizes,
            learning_rates: s.learning_rates,
            dropouts: s.dropouts,
            w_values: s.w_values,
            n_trials: s.n_trials,
        }
    }
}

impl SearchConfig {
    pub fn space(&self, seed: u64) -> SearchSpace {
        SearchSpace {
            batch_sizes: self.batch_sizes.clone(),
            learning_rates: self.learning_rates.clone(),
            dropouts: self.dropouts.clone(),
            w_values: self.w_values.clone(),
            n_trials: self.n_trials,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSettings {
    pub max_epochs: usize,
    pub patience: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            max_epochs: 100,
            patience: 15,
            hidden_dim: 64,
            mlp_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSettings {
    pub enabled: bool,
    /// Numbers "1" to `number_range` go into the number study.
    pub number_range: u64,
    /// Test hours projected in the text-embedding t-SNE.
    pub tsne_points: usize,
    /// Test charts given a relevance heatmap.
    pub relevance_samples: usize,
    pub tsne: TsneConfig,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            enabled: true,
            number_range: 1000,
            tsne_points: 300,
            relevance_samples: 2,
            tsne: TsneConfig::default(),
        }
    }
}

fn range_err(key: &str, value: impl std::fmt::Display, bounds: &str) -> Error {
    Error::Config(format!("`{key}` = {value} is out of range; expected {bounds}"))
}

impl RunConfig {
    /// Config with defaults for everything but the data source.
    pub fn with_dataset(dataset: PathBuf) -> Self {
        Self::from_toml(&format!("dataset = {:?}", dataset.display().to_string())).expect("minimal config parses")
    }

    pub fn with_synthetic(synthetic: SyntheticConfig) -> Self {
        let mut cfg = Self::from_toml("synthetic = { seed = 0, bars = 100 }").expect("minimal config parses");
        cfg.synthetic = Some(synthetic);
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Range and consistency checks. Does not touch the filesystem beyond
    /// checking that the dataset exists.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (None, None) => return Err(Error::Config("missing `dataset` (or a `synthetic` table)".into())),
            (Some(_), Some(_)) => {
                return Err(Error::Config("`dataset` and `synthetic` are mutually exclusive".into()))
            }
            (Some(p), None) if !p.is_file() => {
                return Err(Error::Config(format!("dataset `{}` does not exist", p.display())))
            }
            (None, Some(s)) if s.n_bars < 100 => return Err(range_err("synthetic.bars", s.n_bars, "≥ 100")),
            _ => {}
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("`schemes` must name at least one label scheme".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("`models` must name at least one model".into()));
        }
        let s = &self.search;
        if let Some(d) = s.dropouts.iter().find(|d| !(0.0..1.0).contains(*d)) {
            return Err(range_err("search.dropouts", d, "[0, 1)"));
        }
        if let Some(lr) = s.learning_rates.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return Err(range_err("search.learning_rates", lr, "> 0"));
        }
        if let Some(w) = s.w_values.iter().find(|w| !w.is_finite()) {
            return Err(range_err("search.w_values", w, "a finite number"));
        }
        if s.batch_sizes.contains(&0) {
            return Err(range_err("search.batch_sizes", 0, "≥ 1"));
        }
        self.search.space(self.seed).validate()?;
        let t = &self.training;
        if t.max_epochs == 0 {
            return Err(range_err("training.max_epochs", 0, "≥ 1"));
        }
        if t.hidden_dim == 0 || t.mlp_hidden == 0 {
            return Err(range_err("training.hidden_dim/mlp_hidden", 0, "≥ 1"));
        }
        self.dain.validate()?;
        self.split.validate()?;
        let a = &self.analysis;
        if a.number_range == 0 {
            return Err(range_err("analysis.number_range", 0, "≥ 1"));
        }
        if !(a.tsne.perplexity > 0.0) {
            return Err(range_err("analysis.tsne.perplexity", a.tsne.perplexity, "> 0"));
        }
        if self.encoder.checkpoint_id.is_empty() {
            return Err(Error::Config("`encoder.checkpoint_id` must not be empty".into()));
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out.join("cache"))
    }

    pub fn needs_pretrained(&self) -> bool {
        self.analysis.enabled
            || self
                .models
                .iter()
                .any(|m| matches!(m, ModelKind::ClipImage | ModelKind::ClipText))
    }

    /// SHA-256 over the configuration (minus output locations) and the
    /// dataset bytes.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.cache_dir = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical)?);
        if let Some(p) = &self.dataset {
            h.update(std::fs::read(p).map_err(|e| Error::io(p, e))?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Reads a TOML (or, by `.json` extension, JSON) config file, applies
/// defaults and validates it. A relative dataset path is taken relative to
/// the config file.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let mut cfg = if is_json {
        RunConfig::from_json(&text)?
    } else {
        RunConfig::from_toml(&text)?
    };
    if let (Some(ds), Some(parent)) = (&cfg.dataset, path.parent()) {
        if ds.is_relative() && !ds.is_file() {
            cfg.dataset = Some(parent.join(ds));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset_file() -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "timestamp,open,high,low,close\n").unwrap();
        f
    }

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let f = dataset_file();
        let cfg = RunConfig::from_toml(&format!("dataset = {:?}\nmodel = \"lstm\"", f.path())).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.models, vec![ModelKind::Lstm]);
        assert_eq!(cfg.schemes, LabelScheme::ALL.to_vec());
        assert_eq!(cfg.search, SearchConfig::default());
        assert_eq!(cfg.training, TrainingSettings::default());
        assert_eq!(cfg.out, PathBuf::from("runs"));
        assert_eq!(cfg.search.space(cfg.seed).size(), 180);
    }

    #[test]
    fn dropout_out_of_range() {
        let f = dataset_file();
        let cfg = RunConfig::from_toml(&format!("dataset = {:?}\n[search]\ndropouts = [0.0, 1.5]", f.path())).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("search.dropouts") && msg.contains("1.5") && msg.contains("[0, 1)"), "{msg}");
    }

    #[test]
    fn misspelt_scheme_gets_a_suggestion() {
        let err = RunConfig::from_toml("dataset = \"x.csv\"\nscheme = \"delayd\"").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("did you mean `delayed`"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("dataset = \"x.csv\"\nlearning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = RunConfig::from_json(r#"{"dataset": "x.csv", "search": {"trials": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("trials"), "{err}");
    }

    #[test]
    fn missing_dataset_is_rejected() {
        let cfg = RunConfig::from_toml("dataset = \"/nonexistent/bars.csv\"").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig::from_toml("model = \"lstm\"").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("dataset"));
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let f = dataset_file();
        let a = RunConfig::with_dataset(f.path().to_path_buf());
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn json_and_toml_agree() {
        let t = RunConfig::from_toml("synthetic = { seed = 7, bars = 500 }\nmodels = [\"lstm\", \"dain\"]").unwrap();
        let j = RunConfig::from_json(r#"{"synthetic": {"seed": 7, "bars": 500}, "models": ["lstm", "dain"]}"#).unwrap();
        assert_eq!(t, j);
        t.validate().unwrap();
    }
}
