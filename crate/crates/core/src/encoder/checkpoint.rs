//! Locating checkpoint directories and writing seeded surrogate checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::clip::ClipConfig;
use super::tokenizer::build_vocab;
use crate::error::{Error, Result};

pub const MODELS_ENV: &str = "CHARTCAST_MODELS";

/// Directories searched for a checkpoint id, in order.
pub fn search_roots() -> Vec<PathBuf> {
    let mut roots = Vec::new();
    if let Ok(dir) = std::env::var(MODELS_ENV) {
        roots.push(PathBuf::from(dir));
    }
    if let Some(home) = std::env::var_os("HOME") {
        roots.push(PathBuf::from(home).join(".cache").join("chartcast").join("models"));
    }
    roots.push(PathBuf::from("models"));
    roots
}

fn is_checkpoint_dir(dir: &Path) -> bool {
    dir.join("config.json").is_file() && dir.join("model.safetensors").is_file()
}

/// Resolves a checkpoint id to a directory. The id may itself be a path;
/// otherwise it is looked up under each search root, both verbatim and by
/// its last `/`-separated segment (so `openai/clip-vit-base-patch32`
/// finds `clip-vit-base-patch32`).
pub fn resolve_checkpoint(id: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(id);
    if is_checkpoint_dir(&direct) {
        return Ok(direct);
    }
    let short = id.rsplit('/').next().unwrap_or(id);
    let mut tried = Vec::new();
    for root in search_roots() {
        for name in [id, short] {
            let candidate = root.join(name);
            if is_checkpoint_dir(&candidate) {
                return Ok(candidate);
            }
            tried.push(candidate.display().to_string());
        }
    }
    tried.dedup();
    Err(Error::Checkpoint(format!(
        "checkpoint `{id}` not found (looked in {})",
        tried.join(", ")
    )))
}

/// A small randomly initialised model in the same on-disk layout as the
/// published checkpoints.
pub fn surrogate_config() -> ClipConfig {
    let mut cfg = ClipConfig::default();
    cfg.text_config.hidden_size = 64;
    cfg.text_config.intermediate_size = 128;
    cfg.text_config.num_attention_heads = 4;
    cfg.text_config.num_hidden_layers = 2;
    cfg.vision_config.hidden_size = 64;
    cfg.vision_config.intermediate_size = 128;
    cfg.vision_config.num_attention_heads = 4;
    cfg.vision_config.num_hidden_layers = 2;
    cfg
}

struct Writer {
    rng: ChaCha8Rng,
    tensors: Vec<(String, Vec<usize>, Vec<u8>)>,
}

impl Writer {
    fn put(&mut self, name: String, shape: Vec<usize>, values: Vec<f32>) {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.tensors.push((name, shape, bytes));
    }

    fn normal(&mut self, name: String, shape: Vec<usize>, std: f32) {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.put(name, shape, values);
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f32) {
        let n = shape.iter().product();
        self.put(name, shape, vec![value; n]);
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize, bias: bool) {
        let std = (input as f32).powf(-0.5);
        self.normal(format!("{prefix}.weight"), vec![output, input], std);
        if bias {
            self.normal(format!("{prefix}.bias"), vec![output], 0.02);
        }
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.constant(format!("{prefix}.weight"), vec![width], 1.0);
        self.constant(format!("{prefix}.bias"), vec![width], 0.0);
    }

    fn blocks(&mut self, prefix: &str, layers: usize, width: usize, inner: usize) {
        for i in 0..layers {
            let p = format!("{prefix}.encoder.layers.{i}");
            self.layer_norm(&format!("{p}.layer_norm1"), width);
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                self.linear(&format!("{p}.self_attn.{proj}"), width, width, true);
            }
            self.layer_norm(&format!("{p}.layer_norm2"), width);
            self.linear(&format!("{p}.mlp.fc1"), width, inner, true);
            self.linear(&format!("{p}.mlp.fc2"), inner, width, true);
        }
    }
}

/// Writes `config.json`, `model.safetensors`, `vocab.json` and
/// `merges.txt` for a seeded surrogate model into `dir`.
pub fn write_surrogate(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = surrogate_config();
    let (vocab, merges) = build_vocab(&["date", "time", "close", "open", "high", "low"]);
    let tc = &cfg.text_config;
    let vc = &cfg.vision_config;
    let mut config_json = serde_json::to_value(&cfg)?;
    config_json["text_config"]["vocab_size"] = json!(vocab.len());
    config_json["model_type"] = json!("clip");

    let mut w = Writer {
        rng: ChaCha8Rng::seed_from_u64(seed),
        tensors: Vec::new(),
    };
    w.normal("text_model.embeddings.token_embedding.weight".into(), vec![vocab.len(), tc.hidden_size], 1.0);
    w.normal(
        "text_model.embeddings.position_embedding.weight".into(),
        vec![tc.max_position_embeddings, tc.hidden_size],
        0.5,
    );
    w.blocks("text_model", tc.num_hidden_layers, tc.hidden_size, tc.intermediate_size);
    w.layer_norm("text_model.final_layer_norm", tc.hidden_size);
    w.linear("text_projection", tc.hidden_size, cfg.projection_dim, false);

    let p = vc.patch_size;
    w.linear("vision_model.embeddings.patch_embedding", 3 * p * p, vc.hidden_size, false);
    // the published layout stores the patch kernel as a 4-d conv weight
    if let Some(t) = w.tensors.last_mut() {
        t.1 = vec![vc.hidden_size, 3, p, p];
    }
    w.normal("vision_model.embeddings.class_embedding".into(), vec![vc.hidden_size], 1.0);
    w.normal(
        "vision_model.embeddings.position_embedding.weight".into(),
        vec![vc.grid() * vc.grid() + 1, vc.hidden_size],
        0.5,
    );
    w.layer_norm("vision_model.pre_layrnorm", vc.hidden_size);
    w.blocks("vision_model", vc.num_hidden_layers, vc.hidden_size, vc.intermediate_size);
    w.layer_norm("vision_model.post_layernorm", vc.hidden_size);
    w.linear("visual_projection", vc.hidden_size, cfg.projection_dim, false);

    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = w
        .tensors
        .iter()
        .map(|(name, shape, bytes)| {
            let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                .expect("consistent tensor");
            (name.clone(), view)
        })
        .collect();
    let metadata: Option<HashMap<String, String>> =
        Some(HashMap::from([("format".to_string(), "pt".to_string())]));
    let blob = safetensors::serialize(views, &metadata)
        .map_err(|e| Error::Checkpoint(format!("serializing surrogate: {e}")))?;

    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write("model.safetensors", &blob)?;
    write("config.json", serde_json::to_string_pretty(&config_json)?.as_bytes())?;
    write("vocab.json", serde_json::to_string(&vocab)?.as_bytes())?;
    write("merges.txt", merges.as_bytes())?;
    Ok(())
}
