use std::sync::{Arc, OnceLock};

use chartcast::analysis::relevance;
use chartcast::encoder::{
    encode_sequence, write_surrogate, ClipModel, EmbeddingCache, Encoder, EncoderKind, EncoderSpec,
    PretrainedEncoder, Representation,
};
use chartcast::forecaster::{train, LstmHeadConfig, TrainConfig};
use chartcast::market_data::{generate_synthetic, label, LabelScheme, OhlcBar, OhlcSeries, SyntheticConfig};
use chartcast::representation::{make_windows, render_chart, serialize_text, ChartImage, RenderConfig, TextRecord, WindowKind};
use chrono::NaiveDate;

struct Fixture {
    _dir: tempfile::TempDir,
    id: String,
    model: Arc<ClipModel>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip");
        write_surrogate(&path, 3).unwrap();
        let id = path.display().to_string();
        let model = Arc::new(ClipModel::load(&id, &path).unwrap());
        Fixture { _dir: dir, id, model }
    })
}

fn encoder(kind: EncoderKind) -> PretrainedEncoder {
    let f = fixture();
    PretrainedEncoder::from_model(EncoderSpec::pretrained(kind, &f.id), f.model.clone())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

fn series() -> OhlcSeries {
    generate_synthetic(&SyntheticConfig {
        seed: 21,
        n_bars: 120,
        volatility: 25.0,
    })
}

fn table_records() -> [TextRecord; 2] {
    let day = NaiveDate::from_ymd_opt(2020, 4, 21).unwrap();
    [
        serialize_text(&OhlcBar::new(day.and_hms_opt(22, 0, 0).unwrap(), 10282.5, 10306.1, 10277.4, 10298.7)),
        serialize_text(&OhlcBar::new(day.and_hms_opt(23, 0, 0).unwrap(), 10301.4, 10320.8, 10300.5, 10316.0)),
    ]
}

#[test]
fn text_embeddings_are_deterministic_512_vectors() {
    let enc = encoder(EncoderKind::PretrainedText);
    let [a, b] = table_records();
    let first = enc.encode_text(&a).unwrap();
    assert_eq!(first.vector.len(), 512);
    assert_eq!(enc.dim(), 512);
    assert!(first.vector.iter().all(|v| v.is_finite()));
    assert_eq!(first, enc.encode_text(&a).unwrap());
    let other = enc.encode_text(&b).unwrap();
    assert!(cosine(&first.vector, &other.vector) < 1.0);
}

#[test]
fn long_text_is_truncated_with_a_count() {
    let f = fixture();
    let long = table_records()[0].text.repeat(20);
    let (vector, dropped) = f.model.embed_text(&long, Default::default()).unwrap();
    assert_eq!(vector.len(), 512);
    assert!(dropped > 0);
    let (_, none) = f.model.embed_text(&table_records()[0].text, Default::default()).unwrap();
    assert_eq!(none, 0);
}

#[test]
fn image_embeddings_are_deterministic_and_non_degenerate() {
    let enc = encoder(EncoderKind::PretrainedImage);
    let cfg = RenderConfig::default();
    let s = series();
    let charts: Vec<ChartImage> = [0, 30, 60]
        .iter()
        .map(|&i| render_chart(&s.bars()[i..i + 20], &cfg).unwrap())
        .collect();
    let e: Vec<Vec<f32>> = charts.iter().map(|c| enc.encode_image(c).unwrap().vector).collect();
    assert_eq!(e[0].len(), 512);
    assert_eq!(e[0], enc.encode_image(&charts[0]).unwrap().vector);

    let white = ChartImage::blank(cfg.width, cfg.height, cfg.background);
    let blank = enc.encode_image(&white).unwrap().vector;
    assert!(cosine(&blank, &e[0]) < 1.0);

    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let c = cosine(&e[i], &e[j]);
        assert!(c > 0.0 && c < 1.0, "charts {i} and {j}: cosine {c}");
    }
}

#[test]
fn towers_reject_the_wrong_representation() {
    let enc = encoder(EncoderKind::PretrainedText);
    assert!(enc.encode(Representation::Numeric([1.0; 4])).is_err());
}

#[test]
fn sequences_have_the_window_shape() {
    let s = series();
    let anchors = label(&s, LabelScheme::Standard);
    let render = RenderConfig::default();
    for (kind, enc, len) in [
        (WindowKind::Image5x20, encoder(EncoderKind::PretrainedImage), 5),
        (WindowKind::Text24, encoder(EncoderKind::PretrainedText), 24),
    ] {
        let windows = make_windows(&s, &anchors[..60], kind).windows;
        assert!(!windows.is_empty());
        let seqs = encode_sequence(&windows, &s, &enc, &render, None).unwrap();
        assert_eq!(seqs.len(), windows.len());
        for (seq, w) in seqs.iter().zip(&windows) {
            assert_eq!((seq.len(), seq.dim()), (len, 512));
            assert_eq!((seq.anchor_index, seq.label), (w.anchor_index, w.label));
        }
    }
}

#[test]
fn cached_sequences_match_and_skip_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let s = series();
    let anchors = label(&s, LabelScheme::Delayed);
    let windows = make_windows(&s, &anchors[..40], WindowKind::Text24).windows;
    let enc = encoder(EncoderKind::PretrainedText);
    let render = RenderConfig::default();

    let cache = EmbeddingCache::open(dir.path()).unwrap();
    let cold = encode_sequence(&windows, &s, &enc, &render, Some(&cache)).unwrap();
    assert!(cache.stats().computed > 0);
    let cache = EmbeddingCache::open(dir.path()).unwrap();
    let warm = encode_sequence(&windows, &s, &enc, &render, Some(&cache)).unwrap();
    assert_eq!(cache.stats().computed, 0);
    assert_eq!(cold, warm);
    assert_eq!(cold, encode_sequence(&windows, &s, &enc, &render, None).unwrap());
}

#[test]
fn training_leaves_encoder_weights_untouched() {
    let f = fixture();
    let before = f.model.parameter_digest();
    let s = series();
    let anchors = label(&s, LabelScheme::Standard);
    let windows = make_windows(&s, &anchors, WindowKind::Text24).windows;
    let seqs = encode_sequence(&windows, &s, &encoder(EncoderKind::PretrainedText), &RenderConfig::default(), None).unwrap();
    let (tr, va) = seqs.split_at(seqs.len() * 3 / 4);
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let mut head = LstmHeadConfig::new(512);
    head.hidden_dim = 8;
    train(head, None, tr, va, &cfg).unwrap();
    assert_eq!(before, f.model.parameter_digest());
}

#[test]
fn relevance_covers_the_patch_grid() {
    let enc = encoder(EncoderKind::PretrainedImage);
    let cfg = RenderConfig::default();
    let chart = render_chart(&series().bars()[10..30], &cfg).unwrap();
    let map = relevance(&chart, None, &enc).unwrap();
    assert_eq!(map.grid.dim(), (7, 7));
    assert!(map.grid.iter().all(|v| v.is_finite() && *v >= 0.0));
    let peak = map.normalized.iter().cloned().fold(0.0f32, f32::max);
    assert!(peak == 1.0 || map.grid.iter().all(|v| *v == 0.0));
    assert_eq!((map.overlay.width, map.overlay.height), (chart.width, chart.height));
    assert_eq!(map, relevance(&chart, None, &enc).unwrap());
    assert!(relevance(&chart, None, &chartcast::encoder::IdentityEncoder::new(None)).is_err());
}
