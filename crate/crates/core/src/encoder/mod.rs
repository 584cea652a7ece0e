//! Encoders turning representations into fixed-width embedding sequences.

mod cache;
mod checkpoint;
pub mod clip;
pub mod tokenizer;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{cache_key, CacheEntry, CacheStats, EmbeddingCache};
pub use checkpoint::{resolve_checkpoint, search_roots, surrogate_config, write_surrogate, MODELS_ENV};
pub use clip::{ClipConfig, ClipModel, EmbeddingOutput};

use crate::error::{Error, Result};
use crate::market_data::OhlcSeries;
use crate::representation::{
    render_chart, serialize_text, ChartImage, ModelWindow, NormalizationParams, RenderConfig, TextRecord, WindowKind,
};

pub const DEFAULT_CHECKPOINT: &str = "clip-vit-base-patch32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Text,
    Image,
    RawNumeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub source_kind: SourceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    PretrainedText,
    PretrainedImage,
    Identity,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::PretrainedText => "text",
            EncoderKind::PretrainedImage => "image",
            EncoderKind::Identity => "numeric",
        }
    }

    pub fn accepts(self, window: WindowKind) -> bool {
        matches!(
            (self, window),
            (EncoderKind::PretrainedText, WindowKind::Text24)
                | (EncoderKind::PretrainedImage, WindowKind::Image5x20)
                | (EncoderKind::Identity, WindowKind::Numeric24 | WindowKind::Numeric48)
        )
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "pretrained_text" => Ok(EncoderKind::PretrainedText),
            "image" | "pretrained_image" => Ok(EncoderKind::PretrainedImage),
            "numeric" | "identity" => Ok(EncoderKind::Identity),
            other => Err(Error::Config(format!(
                "unknown encoder kind `{other}` (expected text, image or numeric)"
            ))),
        }
    }
}

fn default_frozen() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    #[serde(default = "default_checkpoint")]
    pub checkpoint_id: String,
    #[serde(default = "default_frozen")]
    pub frozen: bool,
    #[serde(default)]
    pub output: EmbeddingOutput,
}

fn default_checkpoint() -> String {
    DEFAULT_CHECKPOINT.to_string()
}

impl EncoderSpec {
    pub fn identity() -> Self {
        EncoderSpec {
            kind: EncoderKind::Identity,
            checkpoint_id: String::new(),
            frozen: true,
            output: EmbeddingOutput::default(),
        }
    }

    pub fn pretrained(kind: EncoderKind, checkpoint_id: &str) -> Self {
        EncoderSpec {
            kind,
            checkpoint_id: checkpoint_id.to_string(),
            frozen: true,
            output: EmbeddingOutput::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::Config("encoders are frozen feature extractors; `frozen` must be true".into()));
        }
        if self.kind != EncoderKind::Identity && self.checkpoint_id.is_empty() {
            return Err(Error::Config("pretrained encoder needs a checkpoint id".into()));
        }
        Ok(())
    }
}

/// One input item for an encoder.
#[derive(Debug, Clone, Copy)]
pub enum Representation<'a> {
    Numeric([f64; 4]),
    Text(&'a TextRecord),
    Image(&'a ChartImage),
}

impl Representation<'_> {
    /// Canonical bytes used for content hashing.
    pub fn bytes(&self) -> Vec<u8> {
        match self {
            Representation::Numeric(x) => x.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Representation::Text(t) => t.text.as_bytes().to_vec(),
            Representation::Image(img) => {
                let mut out = Vec::with_capacity(img.pixels.len() + 8);
                out.extend(img.width.to_le_bytes());
                out.extend(img.height.to_le_bytes());
                out.extend(&img.pixels);
                out
            }
        }
    }

    fn source_kind(&self) -> SourceKind {
        match self {
            Representation::Numeric(_) => SourceKind::RawNumeric,
            Representation::Text(_) => SourceKind::Text,
            Representation::Image(_) => SourceKind::Image,
        }
    }
}

pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Width of every embedding produced.
    fn dim(&self) -> usize;

    fn encode(&self, rep: Representation<'_>) -> Result<Embedding>;

    /// Tag mixed into cache keys; `None` disables caching.
    fn cache_variant(&self) -> Option<String> {
        None
    }

    /// The underlying transformer when it supports attention introspection.
    fn clip(&self) -> Option<&ClipModel> {
        None
    }
}

/// Passes the four bar features through, z-scored when a normalizer is
/// given.
#[derive(Debug, Clone)]
pub struct IdentityEncoder {
    spec: EncoderSpec,
    normalizer: Option<NormalizationParams>,
}

impl IdentityEncoder {
    pub fn new(normalizer: Option<NormalizationParams>) -> Self {
        IdentityEncoder {
            spec: EncoderSpec::identity(),
            normalizer,
        }
    }
}

impl Encoder for IdentityEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn dim(&self) -> usize {
        4
    }

    fn encode(&self, rep: Representation<'_>) -> Result<Embedding> {
        let Representation::Numeric(x) = rep else {
            return Err(Error::Config("identity encoder takes numeric features".into()));
        };
        let x = match &self.normalizer {
            Some(p) => p.normalize_features(x),
            None => x,
        };
        Ok(Embedding {
            vector: x.iter().map(|&v| v as f32).collect(),
            source_kind: SourceKind::RawNumeric,
        })
    }
}

/// A frozen text or image tower of a loaded checkpoint.
#[derive(Debug, Clone)]
pub struct PretrainedEncoder {
    spec: EncoderSpec,
    model: Arc<ClipModel>,
}

impl PretrainedEncoder {
    pub fn load(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind == EncoderKind::Identity {
            return Err(Error::Config("identity spec passed to a pretrained encoder".into()));
        }
        let dir = resolve_checkpoint(&spec.checkpoint_id)?;
        let model = ClipModel::load(&spec.checkpoint_id, &dir)?;
        Ok(Self::from_model(spec.clone(), Arc::new(model)))
    }

    pub fn from_model(spec: EncoderSpec, model: Arc<ClipModel>) -> Self {
        PretrainedEncoder { spec, model }
    }

    pub fn model(&self) -> &Arc<ClipModel> {
        &self.model
    }

    pub fn encode_text(&self, record: &TextRecord) -> Result<Embedding> {
        self.encode(Representation::Text(record))
    }

    pub fn encode_image(&self, image: &ChartImage) -> Result<Embedding> {
        self.encode(Representation::Image(image))
    }
}

impl Encoder for PretrainedEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn dim(&self) -> usize {
        self.model
            .output_dim(self.spec.kind == EncoderKind::PretrainedText, self.spec.output)
    }

    fn encode(&self, rep: Representation<'_>) -> Result<Embedding> {
        let vector = match (self.spec.kind, rep) {
            (EncoderKind::PretrainedText, Representation::Text(t)) => self.model.embed_text(&t.text, self.spec.output)?.0,
            (EncoderKind::PretrainedImage, Representation::Image(img)) => {
                self.model.embed_image(img, self.spec.output)?
            }
            (kind, rep) => {
                return Err(Error::Config(format!(
                    "{kind} encoder cannot take {:?} input",
                    rep.source_kind()
                )))
            }
        };
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("encoder produced a non-finite embedding".into()));
        }
        Ok(Embedding {
            vector,
            source_kind: rep.source_kind(),
        })
    }

    fn cache_variant(&self) -> Option<String> {
        Some(format!("{}:{}:{}", self.spec.checkpoint_id, self.spec.kind, self.spec.output.name()))
    }

    fn clip(&self) -> Option<&ClipModel> {
        Some(&self.model)
    }
}

/// Ordered embeddings for one model window. Rows are shared between
/// windows that cover the same bars.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub items: Vec<Arc<[f32]>>,
    pub anchor_index: usize,
    pub anchor_ts: NaiveDateTime,
    pub label: u8,
    pub delta: f64,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, |r| r.len())
    }
}

fn encode_span(
    series: &OhlcSeries,
    span: (usize, usize),
    kind: WindowKind,
    encoder: &dyn Encoder,
    render: &RenderConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<Arc<[f32]>> {
    let bars = &series.bars()[span.0..span.1];
    let text;
    let image;
    let rep = match kind {
        WindowKind::Numeric24 | WindowKind::Numeric48 => Representation::Numeric(bars[0].features()),
        WindowKind::Text24 => {
            text = serialize_text(&bars[0]);
            Representation::Text(&text)
        }
        WindowKind::Image5x20 => {
            image = render_chart(bars, render)?;
            Representation::Image(&image)
        }
    };
    let vector = match (cache, encoder.cache_variant()) {
        (Some(cache), Some(variant)) => {
            let key = cache_key(&encoder.spec().checkpoint_id, &variant, &rep.bytes());
            cache.get_or_compute(&key, || encoder.encode(rep).map(|e| e.vector))?
        }
        _ => encoder.encode(rep)?.vector,
    };
    if vector.len() != encoder.dim() {
        return Err(Error::Validation(format!(
            "embedding width {} differs from encoder width {}",
            vector.len(),
            encoder.dim()
        )));
    }
    Ok(vector.into())
}

/// Embeds every window. Windows must share one kind compatible with the
/// encoder; bar spans shared between windows are encoded once.
pub fn encode_sequence(
    windows: &[ModelWindow],
    series: &OhlcSeries,
    encoder: &dyn Encoder,
    render: &RenderConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<EmbeddingSequence>> {
    let Some(first) = windows.first() else {
        return Ok(Vec::new());
    };
    let kind = first.kind;
    if let Some(w) = windows.iter().find(|w| w.kind != kind) {
        return Err(Error::Config(format!(
            "mixed window kinds in one batch: {kind} and {}",
            w.kind
        )));
    }
    let spec = encoder.spec();
    spec.validate()?;
    if !spec.kind.accepts(kind) {
        return Err(Error::Config(format!(
            "{} encoder is incompatible with {kind} windows",
            spec.kind
        )));
    }
    if let Some(w) = windows.iter().find(|w| w.last_bar() >= series.len()) {
        return Err(Error::Validation(format!(
            "window anchored at {} reaches past the series end",
            w.anchor_index
        )));
    }

    let mut unique: Vec<(usize, usize)> = windows
        .iter()
        .flat_map(|w| w.spans.iter().map(|r| (r.start, r.end)))
        .collect();
    unique.sort_unstable();
    unique.dedup();
    let rows: Vec<Arc<[f32]>> = unique
        .par_iter()
        .map(|&span| encode_span(series, span, kind, encoder, render, cache))
        .collect::<Result<_>>()?;
    let lookup: HashMap<(usize, usize), Arc<[f32]>> = unique.into_iter().zip(rows).collect();

    Ok(windows
        .iter()
        .map(|w| EmbeddingSequence {
            items: w.spans.iter().map(|r| lookup[&(r.start, r.end)].clone()).collect(),
            anchor_index: w.anchor_index,
            anchor_ts: w.anchor_ts,
            label: w.label,
            delta: w.delta,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{generate_synthetic, label, LabelScheme, SyntheticConfig};
    use crate::representation::{fit_normalizer, make_windows};

    fn series() -> OhlcSeries {
        generate_synthetic(&SyntheticConfig {
            seed: 3,
            n_bars: 80,
            volatility: 25.0,
        })
    }

    #[test]
    fn identity_passes_normalized_features() {
        let s = series();
        let norm = fit_normalizer(&s).unwrap();
        let samples = label(&s, LabelScheme::Standard);
        let windows = make_windows(&s, &samples, WindowKind::Numeric24).windows;
        let enc = IdentityEncoder::new(Some(norm.clone()));
        let seqs = encode_sequence(&windows, &s, &enc, &RenderConfig::default(), None).unwrap();
        assert_eq!(seqs.len(), windows.len());
        for (seq, w) in seqs.iter().zip(&windows) {
            assert_eq!(seq.len(), 24);
            assert_eq!(seq.dim(), 4);
            for (row, span) in seq.items.iter().zip(&w.spans) {
                let z = norm.normalize(&s.bars()[span.start]);
                let expect: Vec<f32> = z.iter().map(|&v| v as f32).collect();
                assert_eq!(&row[..], &expect[..]);
            }
        }
    }

    #[test]
    fn kind_mismatch_is_config_error() {
        let s = series();
        let samples = label(&s, LabelScheme::Standard);
        let windows = make_windows(&s, &samples, WindowKind::Text24).windows;
        let enc = IdentityEncoder::new(None);
        let err = encode_sequence(&windows, &s, &enc, &RenderConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unfrozen_spec_rejected() {
        let mut spec = EncoderSpec::pretrained(EncoderKind::PretrainedText, "x");
        spec.frozen = false;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn compatibility_table() {
        assert!(EncoderKind::PretrainedText.accepts(WindowKind::Text24));
        assert!(EncoderKind::PretrainedImage.accepts(WindowKind::Image5x20));
        assert!(EncoderKind::Identity.accepts(WindowKind::Numeric48));
        assert!(!EncoderKind::Identity.accepts(WindowKind::Image5x20));
        assert!(!EncoderKind::PretrainedText.accepts(WindowKind::Numeric24));
    }
}
