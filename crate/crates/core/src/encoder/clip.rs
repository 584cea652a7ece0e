//! Frozen CLIP text and vision towers, evaluated in f32 inference mode.
//!
//! Weights are read from a checkpoint directory in the Hugging Face layout
//! (`config.json`, `model.safetensors`, `vocab.json`, `merges.txt`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{ClipTokenizer, Tokenized};
use crate::error::{Error, Result};
use crate::representation::ChartImage;

/// Per-channel normalization published with the CLIP checkpoints.
pub const IMAGE_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const IMAGE_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_attention_heads: usize,
    pub num_hidden_layers: usize,
    pub max_position_embeddings: usize,
    pub vocab_size: usize,
    pub layer_norm_eps: f64,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            hidden_size: 512,
            intermediate_size: 2048,
            num_attention_heads: 8,
            num_hidden_layers: 12,
            max_position_embeddings: 77,
            vocab_size: 49408,
            layer_norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_attention_heads: usize,
    pub num_hidden_layers: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub layer_norm_eps: f64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            hidden_size: 768,
            intermediate_size: 3072,
            num_attention_heads: 12,
            num_hidden_layers: 12,
            image_size: 224,
            patch_size: 32,
            layer_norm_eps: 1e-5,
        }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// Subset of the Hugging Face `CLIPConfig` the towers need; missing keys
/// take the ViT-B/32 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub text_config: TextConfig,
    pub vision_config: VisionConfig,
    pub projection_dim: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            text_config: TextConfig::default(),
            vision_config: VisionConfig::default(),
            projection_dim: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    /// Stored as (in, out).
    pub w: Array2<f32>,
    pub b: Option<Array1<f32>>,
}

impl Linear {
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let y = x.dot(&self.w);
        match &self.b {
            Some(b) => y + b,
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let n = x.ncols() as f32;
        let mean = x.sum_axis(Axis(1)).mapv(|s| s / n).insert_axis(Axis(1));
        let centered = x - &mean;
        let var = centered.mapv(|d| d * d).sum_axis(Axis(1)).mapv(|s| s / n);
        let inv = var.mapv(|v| 1.0 / (v + self.eps).sqrt()).insert_axis(Axis(1));
        &(&centered * &inv) * &self.gamma + &self.beta
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub(crate) fn quick_gelu(x: f32) -> f32 {
    x / (1.0 + (-1.702 * x).exp())
}

impl Block {
    fn attention(&self, x: &Array2<f32>, heads: usize, causal: bool) -> Array2<f32> {
        let width = x.ncols();
        let hd = width / heads;
        let scale = (hd as f32).powf(-0.5);
        let q = self.q.forward(x) * scale;
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let n = x.nrows();
        let mut merged = Array2::<f32>::zeros((n, width));
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            if causal {
                for i in 0..n {
                    for j in i + 1..n {
                        scores[[i, j]] = f32::NEG_INFINITY;
                    }
                }
            }
            let probs = crate::autograd::softmax_rows(&scores);
            merged.slice_mut(cols).assign(&probs.dot(&v.slice(cols)));
        }
        self.out.forward(&merged)
    }

    pub fn forward(&self, x: &Array2<f32>, heads: usize, causal: bool) -> Array2<f32> {
        let h = x + &self.attention(&self.ln1.forward(x), heads, causal);
        let m = self.fc1.forward(&self.ln2.forward(&h)).mapv(quick_gelu);
        &h + &self.fc2.forward(&m)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TextTower {
    pub token_embedding: Array2<f32>,
    pub position_embedding: Array2<f32>,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub projection: Array2<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct VisionTower {
    /// Patch kernel flattened to (3 * p * p, hidden), channel-major.
    pub patch: Array2<f32>,
    pub class_embedding: Array1<f32>,
    pub position_embedding: Array2<f32>,
    pub pre_ln: LayerNorm,
    pub blocks: Vec<Block>,
    pub post_ln: LayerNorm,
    pub projection: Array2<f32>,
}

/// Which vector a tower hands downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingOutput {
    /// Final-layer-norm output at the pooling position (end-of-text token or
    /// class token), before the joint-space projection.
    Pooled,
    /// Pooled output mapped into the joint text-image space.
    #[default]
    Projected,
}

impl EmbeddingOutput {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingOutput::Pooled => "pooled",
            EmbeddingOutput::Projected => "projected",
        }
    }
}

/// A loaded checkpoint. Immutable after loading and shareable across
/// threads.
#[derive(Debug)]
pub struct ClipModel {
    pub id: String,
    pub dir: PathBuf,
    pub config: ClipConfig,
    pub(crate) text: TextTower,
    pub(crate) vision: VisionTower,
    pub(crate) tokenizer: ClipTokenizer,
}

struct TensorFile {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorFile {
    fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let values: Vec<f32> = match view.dtype() {
                safetensors::Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                safetensors::Dtype::F16 => data
                    .chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                safetensors::Dtype::BF16 => data
                    .chunks_exact(2)
                    .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                // position_ids buffers and similar integer tensors are not weights
                _ => continue,
            };
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        Ok(TensorFile { tensors })
    }

    fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let (shape, data) = self.take(name)?;
        if shape.iter().product::<usize>() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected ({rows}, {cols})"
            )));
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("checked size"))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f32>> {
        let (shape, data) = self.take(name)?;
        if data.len() != len {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected ({len})"
            )));
        }
        Ok(Array1::from(data))
    }

    /// Torch linear weights are (out, in); stored transposed.
    fn linear(&mut self, prefix: &str, input: usize, output: usize, bias: bool) -> Result<Linear> {
        let w = self.matrix(&format!("{prefix}.weight"), output, input)?.reversed_axes();
        let w = w.as_standard_layout().to_owned();
        let b = if bias {
            Some(self.vector(&format!("{prefix}.bias"), output)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    fn layer_norm(&mut self, prefix: &str, width: usize, eps: f64) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.vector(&format!("{prefix}.weight"), width)?,
            beta: self.vector(&format!("{prefix}.bias"), width)?,
            eps: eps as f32,
        })
    }

    fn blocks(&mut self, prefix: &str, layers: usize, width: usize, inner: usize, eps: f64) -> Result<Vec<Block>> {
        (0..layers)
            .map(|i| {
                let p = format!("{prefix}.encoder.layers.{i}");
                Ok(Block {
                    ln1: self.layer_norm(&format!("{p}.layer_norm1"), width, eps)?,
                    q: self.linear(&format!("{p}.self_attn.q_proj"), width, width, true)?,
                    k: self.linear(&format!("{p}.self_attn.k_proj"), width, width, true)?,
                    v: self.linear(&format!("{p}.self_attn.v_proj"), width, width, true)?,
                    out: self.linear(&format!("{p}.self_attn.out_proj"), width, width, true)?,
                    ln2: self.layer_norm(&format!("{p}.layer_norm2"), width, eps)?,
                    fc1: self.linear(&format!("{p}.mlp.fc1"), width, inner, true)?,
                    fc2: self.linear(&format!("{p}.mlp.fc2"), inner, width, true)?,
                })
            })
            .collect()
    }
}

impl ClipModel {
    /// Loads a checkpoint directory. `id` is recorded for provenance and
    /// cache keys.
    pub fn load(id: &str, dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let raw = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ClipConfig = serde_json::from_str(&raw)?;
        let weights_path = dir.join("model.safetensors");
        if !weights_path.exists() {
            return Err(Error::Checkpoint(format!(
                "{} has no model.safetensors",
                dir.display()
            )));
        }
        let mut tf = TensorFile::read(&weights_path)?;
        let tc = &config.text_config;
        let vc = &config.vision_config;
        if tc.hidden_size % tc.num_attention_heads != 0 || vc.hidden_size % vc.num_attention_heads != 0 {
            return Err(Error::Checkpoint("hidden size not divisible by head count".into()));
        }
        let text = TextTower {
            token_embedding: tf.matrix("text_model.embeddings.token_embedding.weight", tc.vocab_size, tc.hidden_size)?,
            position_embedding: tf.matrix(
                "text_model.embeddings.position_embedding.weight",
                tc.max_position_embeddings,
                tc.hidden_size,
            )?,
            blocks: tf.blocks("text_model", tc.num_hidden_layers, tc.hidden_size, tc.intermediate_size, tc.layer_norm_eps)?,
            final_ln: tf.layer_norm("text_model.final_layer_norm", tc.hidden_size, tc.layer_norm_eps)?,
            projection: tf
                .linear("text_projection", tc.hidden_size, config.projection_dim, false)?
                .w,
        };
        let p = vc.patch_size;
        let n_pos = vc.grid() * vc.grid() + 1;
        let vision = VisionTower {
            patch: tf
                .matrix("vision_model.embeddings.patch_embedding.weight", vc.hidden_size, 3 * p * p)?
                .reversed_axes()
                .as_standard_layout()
                .to_owned(),
            class_embedding: tf.vector("vision_model.embeddings.class_embedding", vc.hidden_size)?,
            position_embedding: tf.matrix("vision_model.embeddings.position_embedding.weight", n_pos, vc.hidden_size)?,
            pre_ln: tf.layer_norm("vision_model.pre_layrnorm", vc.hidden_size, vc.layer_norm_eps)?,
            blocks: tf.blocks("vision_model", vc.num_hidden_layers, vc.hidden_size, vc.intermediate_size, vc.layer_norm_eps)?,
            post_ln: tf.layer_norm("vision_model.post_layernorm", vc.hidden_size, vc.layer_norm_eps)?,
            projection: tf
                .linear("visual_projection", vc.hidden_size, config.projection_dim, false)?
                .w,
        };
        let tokenizer = ClipTokenizer::from_dir(dir)?;
        Ok(ClipModel {
            id: id.to_string(),
            dir: dir.to_path_buf(),
            config,
            text,
            vision,
            tokenizer,
        })
    }

    pub fn tokenizer(&self) -> &ClipTokenizer {
        &self.tokenizer
    }

    pub fn output_dim(&self, tower_is_text: bool, output: EmbeddingOutput) -> usize {
        match (output, tower_is_text) {
            (EmbeddingOutput::Projected, _) => self.config.projection_dim,
            (EmbeddingOutput::Pooled, true) => self.config.text_config.hidden_size,
            (EmbeddingOutput::Pooled, false) => self.config.vision_config.hidden_size,
        }
    }

    /// SHA-256 over every weight in a fixed order.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |a: &[f32]| {
            for x in a {
                h.update(x.to_le_bytes());
            }
        };
        let blocks = |bs: &[Block], feed: &mut dyn FnMut(&[f32])| {
            for b in bs {
                for ln in [&b.ln1, &b.ln2] {
                    feed(ln.gamma.as_slice().unwrap());
                    feed(ln.beta.as_slice().unwrap());
                }
                for l in [&b.q, &b.k, &b.v, &b.out, &b.fc1, &b.fc2] {
                    feed(l.w.as_slice().unwrap());
                    if let Some(bias) = &l.b {
                        feed(bias.as_slice().unwrap());
                    }
                }
            }
        };
        let t = &self.text;
        feed(t.token_embedding.as_slice().unwrap());
        feed(t.position_embedding.as_slice().unwrap());
        blocks(&t.blocks, &mut feed);
        feed(t.final_ln.gamma.as_slice().unwrap());
        feed(t.final_ln.beta.as_slice().unwrap());
        feed(t.projection.as_slice().unwrap());
        let v = &self.vision;
        feed(v.patch.as_slice().unwrap());
        feed(v.class_embedding.as_slice().unwrap());
        feed(v.position_embedding.as_slice().unwrap());
        feed(v.pre_ln.gamma.as_slice().unwrap());
        feed(v.pre_ln.beta.as_slice().unwrap());
        blocks(&v.blocks, &mut feed);
        feed(v.post_ln.gamma.as_slice().unwrap());
        feed(v.post_ln.beta.as_slice().unwrap());
        feed(v.projection.as_slice().unwrap());
        hex::encode(h.finalize())
    }

    pub fn tokenize(&self, text: &str) -> Result<Tokenized> {
        self.tokenizer
            .encode_for_model(text, self.config.text_config.max_position_embeddings)
    }

    /// Text embedding; returns the vector and the number of truncated
    /// tokens.
    pub fn embed_text(&self, text: &str, output: EmbeddingOutput) -> Result<(Vec<f32>, usize)> {
        let tok = self.tokenize(text)?;
        if tok.truncated > 0 {
            log::warn!("text input truncated by {} tokens: `{text}`", tok.truncated);
        }
        let t = &self.text;
        let n = tok.ids.len();
        let width = self.config.text_config.hidden_size;
        let mut x = Array2::<f32>::zeros((n, width));
        for (i, id) in tok.ids.iter().enumerate() {
            let row = t.token_embedding.row(*id as usize).to_owned() + t.position_embedding.row(i);
            x.row_mut(i).assign(&row);
        }
        let heads = self.config.text_config.num_attention_heads;
        for b in &t.blocks {
            x = b.forward(&x, heads, true);
        }
        let x = t.final_ln.forward(&x);
        // the end marker is always the last position
        let pooled = x.slice(s![n - 1..n, ..]).to_owned();
        let out = match output {
            EmbeddingOutput::Pooled => pooled,
            EmbeddingOutput::Projected => pooled.dot(&t.projection),
        };
        Ok((out.into_raw_vec_and_offset().0, tok.truncated))
    }

    /// Resizes (bicubic, shortest side), center-crops and normalizes an RGB
    /// chart into a (3, S, S) channel-major buffer.
    pub fn preprocess(&self, image: &ChartImage) -> Vec<f32> {
        let size = self.config.vision_config.image_size as u32;
        let mut rgb = image.to_rgb_image();
        if rgb.width() != size || rgb.height() != size {
            let (w, h) = (rgb.width(), rgb.height());
            let scale = size as f64 / w.min(h) as f64;
            let (nw, nh) = (
                ((w as f64 * scale).round() as u32).max(size),
                ((h as f64 * scale).round() as u32).max(size),
            );
            let resized = image::imageops::resize(&rgb, nw, nh, FilterType::CatmullRom);
            let (x0, y0) = ((nw - size) / 2, (nh - size) / 2);
            rgb = image::imageops::crop_imm(&resized, x0, y0, size, size).to_image();
        }
        let s = size as usize;
        let mut out = vec![0.0f32; 3 * s * s];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                let v = px.0[c] as f32 / 255.0;
                out[c * s * s + y as usize * s + x as usize] = (v - IMAGE_MEAN[c]) / IMAGE_STD[c];
            }
        }
        out
    }

    /// Patch rows (grid*grid, 3*p*p) in the kernel's channel-major order.
    pub(crate) fn patchify(&self, pixels: &[f32]) -> Array2<f32> {
        let vc = &self.config.vision_config;
        let (s, p, g) = (vc.image_size, vc.patch_size, vc.grid());
        let mut patches = Array2::<f32>::zeros((g * g, 3 * p * p));
        for py in 0..g {
            for px in 0..g {
                let mut row = patches.row_mut(py * g + px);
                let mut k = 0;
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            row[k] = pixels[c * s * s + (py * p + ky) * s + px * p + kx];
                            k += 1;
                        }
                    }
                }
            }
        }
        patches
    }

    pub fn embed_image(&self, image: &ChartImage, output: EmbeddingOutput) -> Result<Vec<f32>> {
        let v = &self.vision;
        let patches = self.patchify(&self.preprocess(image)).dot(&v.patch);
        let width = self.config.vision_config.hidden_size;
        let n = patches.nrows() + 1;
        let mut x = Array2::<f32>::zeros((n, width));
        x.row_mut(0).assign(&v.class_embedding);
        x.slice_mut(s![1.., ..]).assign(&patches);
        x += &v.position_embedding;
        let mut x = v.pre_ln.forward(&x);
        let heads = self.config.vision_config.num_attention_heads;
        for b in &v.blocks {
            x = b.forward(&x, heads, false);
        }
        let pooled = v.post_ln.forward(&x.slice(s![0..1, ..]).to_owned());
        let out = match output {
            EmbeddingOutput::Pooled => pooled,
            EmbeddingOutput::Projected => pooled.dot(&v.projection),
        };
        Ok(out.into_raw_vec_and_offset().0)
    }
}
