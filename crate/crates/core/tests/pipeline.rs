use std::path::Path;

use chartcast::encoder::write_surrogate;
use chartcast::experiment::ModelKind;
use chartcast::market_data::SyntheticConfig;
use chartcast::pipeline::{run_pipeline, RunConfig, StageStatus};

fn small_config(out: &Path, models: Vec<ModelKind>) -> RunConfig {
    let mut cfg = RunConfig::with_synthetic(SyntheticConfig {
        seed: 7,
        n_bars: 400,
        volatility: 25.0,
    });
    cfg.models = models;
    cfg.out = out.to_path_buf();
    cfg.search.n_trials = 3;
    cfg.training.max_epochs = 3;
    cfg.training.hidden_dim = 8;
    cfg.training.mlp_hidden = 8;
    cfg.analysis.enabled = false;
    cfg
}

#[test]
fn identity_run_writes_metrics_and_reruns_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), vec![ModelKind::Lstm, ModelKind::Dain]);
    let first = run_pipeline(&cfg).unwrap();
    assert!(first.run_dir.join("metrics.json").is_file());
    assert!(first.run_dir.join("report.md").is_file());
    assert_eq!(first.trials_trained, 2 * 2 * 3);
    assert!(first.report.contains("Standard Label") && first.report.contains("Delayed Label"));
    assert!(first.report.contains("Always Long") && first.report.contains("DAIN-LSTM"));

    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(second.run_dir, first.run_dir);
    assert_eq!(second.trials_trained, 0);
    assert_eq!(second.trials_resumed, 12);
    assert_eq!(second.report, first.report);
    let search = second.stages.iter().find(|s| s.stage.name() == "search").unwrap();
    assert_eq!(search.status, StageStatus::Reused);

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.run_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"], first.config_hash.as_str());
}

#[test]
fn changed_config_gets_a_fresh_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), vec![ModelKind::Lstm]);
    cfg.schemes = vec![chartcast::market_data::LabelScheme::Standard];
    let a = run_pipeline(&cfg).unwrap();
    cfg.seed = 1;
    let b = run_pipeline(&cfg).unwrap();
    assert_ne!(a.run_dir, b.run_dir);
    assert!(a.run_dir.join("metrics.json").is_file());
}

#[test]
fn pretrained_run_is_a_full_cache_hit_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("surrogate");
    write_surrogate(&ckpt, 11).unwrap();
    let mut cfg = small_config(&dir.path().join("runs"), vec![ModelKind::ClipText, ModelKind::ClipImage]);
    cfg.synthetic.as_mut().unwrap().n_bars = 200;
    cfg.encoder.checkpoint_id = ckpt.display().to_string();
    cfg.analysis.enabled = true;
    cfg.analysis.number_range = 120;
    cfg.analysis.tsne_points = 40;
    cfg.analysis.tsne.iterations = 200;
    cfg.analysis.relevance_samples = 1;
    let first = run_pipeline(&cfg).unwrap();
    assert!(first.cache.computed > 0);
    let analysis = first.analysis.as_ref().unwrap();
    assert!(analysis.skipped.is_none());
    assert!(analysis.numbers.is_some());
    assert_eq!(analysis.relevance_ratios.len(), 1);
    let pngs = std::fs::read_dir(first.run_dir.join("analysis"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("relevance_"))
        .count();
    assert_eq!(pngs, 1);

    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(second.cache.computed, 0);
    assert!(second.cache.hits > 0);
    assert_eq!(second.trials_trained, 0);
    assert_eq!(second.report, first.report);
    assert_eq!(second.analysis, first.analysis);
}
