//! Attention-times-gradient relevance over the image tower's patch grid.

use ndarray::{Array2, Axis};

use crate::autograd::{Mat, Tape, Var};
use crate::encoder::clip::{Block, LayerNorm, Linear};
use crate::encoder::{ClipModel, EmbeddingOutput, Encoder};
use crate::error::{Error, Result};
use crate::representation::ChartImage;

/// Overlay hue (red) and opacity at full relevance.
const OVERLAY_RGB: [f32; 3] = [220.0, 20.0, 20.0];
const OVERLAY_ALPHA: f32 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    /// Rectified relevance per patch, row-major over the patch grid.
    pub grid: Array2<f32>,
    /// `grid` scaled to [0, 1] by its maximum.
    pub normalized: Array2<f32>,
    pub overlay: ChartImage,
}

struct Recorder<'t> {
    tape: &'t mut Tape<f32>,
}

impl Recorder<'_> {
    fn linear(&mut self, x: Var, l: &Linear) -> Var {
        let w = self.tape.leaf(l.w.clone());
        let y = self.tape.matmul(x, w);
        match &l.b {
            Some(b) => {
                let b = self.tape.leaf(b.clone().insert_axis(Axis(0)));
                self.tape.add_row(y, b)
            }
            None => y,
        }
    }

    fn layer_norm(&mut self, x: Var, ln: &LayerNorm) -> Var {
        let z = self.tape.layer_norm_rows(x, ln.eps);
        let g = self.tape.leaf(ln.gamma.clone().insert_axis(Axis(0)));
        let b = self.tape.leaf(ln.beta.clone().insert_axis(Axis(0)));
        let z = self.tape.mul_row(z, g);
        self.tape.add_row(z, b)
    }

    /// Runs one block, returning its output and the per-head attention
    /// probability nodes.
    fn block(&mut self, x: Var, b: &Block, heads: usize) -> (Var, Vec<Var>) {
        let h = self.layer_norm(x, &b.ln1);
        let width = self.tape.value(h).ncols();
        let hd = width / heads;
        let q = self.linear(h, &b.q);
        let q = self.tape.scale(q, (hd as f32).powf(-0.5));
        let k = self.linear(h, &b.k);
        let v = self.linear(h, &b.v);
        let mut probs = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = self.tape.slice_cols(q, head * hd, (head + 1) * hd);
            let kh = self.tape.slice_cols(k, head * hd, (head + 1) * hd);
            let vh = self.tape.slice_cols(v, head * hd, (head + 1) * hd);
            let kt = self.tape.transpose(kh);
            let scores = self.tape.matmul(qh, kt);
            let p = self.tape.softmax_rows(scores);
            probs.push(p);
            outs.push(self.tape.matmul(p, vh));
        }
        let merged = self.tape.concat_cols(&outs);
        let attn = self.linear(merged, &b.out);
        let x = self.tape.add(x, attn);
        let h = self.layer_norm(x, &b.ln2);
        let h = self.linear(h, &b.fc1);
        let h = self.tape.quick_gelu(h);
        let h = self.linear(h, &b.fc2);
        (self.tape.add(x, h), probs)
    }
}

/// Relevance of each image patch for the score `<embedding, target>`.
///
/// Per block, attention probabilities are multiplied by their gradients,
/// negative products are clamped to zero, heads are averaged, and blocks
/// are combined by rollout (`R += cam · R`, starting from the identity).
/// The class-token row of the result, without its self entry, is the patch
/// relevance. A `None` target uses the embedding itself.
pub fn relevance(
    image: &ChartImage,
    target: Option<&[f32]>,
    encoder: &dyn Encoder,
) -> Result<RelevanceMap> {
    let model = encoder.clip().ok_or_else(|| {
        Error::UnsupportedEncoder(format!(
            "{} encoder exposes no attention maps",
            encoder.spec().kind
        ))
    })?;
    relevance_with_model(image, target, model, encoder.spec().output)
}

pub fn relevance_with_model(
    image: &ChartImage,
    target: Option<&[f32]>,
    model: &ClipModel,
    output: EmbeddingOutput,
) -> Result<RelevanceMap> {
    let vc = &model.config.vision_config;
    let v = &model.vision;
    let mut tape = Tape::<f32>::new();
    let mut rec = Recorder { tape: &mut tape };

    let patches = model.patchify(&model.preprocess(image));
    let patches = rec.tape.leaf(patches);
    let kernel = rec.tape.leaf(v.patch.clone());
    let emb = rec.tape.matmul(patches, kernel);
    let cls = rec.tape.leaf(v.class_embedding.clone().insert_axis(Axis(0)));
    // class token row on top of the patch rows
    let cls_t = rec.tape.transpose(cls);
    let emb_t = rec.tape.transpose(emb);
    let stacked_t = rec.tape.concat_cols(&[cls_t, emb_t]);
    let stacked = rec.tape.transpose(stacked_t);
    let pos = rec.tape.leaf(v.position_embedding.clone());
    let mut x = rec.tape.add(stacked, pos);
    x = rec.layer_norm(x, &v.pre_ln);
    let mut attention = Vec::with_capacity(v.blocks.len());
    for b in &v.blocks {
        let (y, probs) = rec.block(x, b, vc.num_attention_heads);
        x = y;
        attention.push(probs);
    }
    let cls_out = rec.tape.slice_rows(x, 0, 1);
    let pooled = rec.layer_norm(cls_out, &v.post_ln);
    let out = match output {
        EmbeddingOutput::Pooled => pooled,
        EmbeddingOutput::Projected => {
            let proj = rec.tape.leaf(v.projection.clone());
            rec.tape.matmul(pooled, proj)
        }
    };
    let out_value = tape.value(out).clone();
    let target = match target {
        Some(t) => {
            if t.len() != out_value.ncols() {
                return Err(Error::Validation(format!(
                    "target has {} components, embedding has {}",
                    t.len(),
                    out_value.ncols()
                )));
            }
            Array2::from_shape_vec((1, t.len()), t.to_vec()).expect("row")
        }
        None => out_value,
    };
    let score = tape.dot_const(out, target);
    let grads = tape.backward(score);

    let n = vc.grid() * vc.grid() + 1;
    let mut rollout: Mat<f32> = Array2::eye(n);
    for probs in &attention {
        let mut cam = Array2::<f32>::zeros((n, n));
        for &p in probs {
            let a = tape.value(p);
            let g = grads.get_or_zeros(p, a);
            cam += &(a * &g).mapv(|x| x.max(0.0));
        }
        cam /= probs.len() as f32;
        rollout = &rollout + &cam.dot(&rollout);
    }
    let g = vc.grid();
    let grid = Array2::from_shape_fn((g, g), |(r, c)| rollout[[0, 1 + r * g + c]]);
    let max = grid.iter().copied().fold(0.0f32, f32::max);
    let normalized = if max > 0.0 { grid.mapv(|x| x / max) } else { grid.clone() };
    let overlay = overlay(image, &normalized);
    Ok(RelevanceMap {
        grid,
        normalized,
        overlay,
    })
}

/// Alpha-blends a single-hue heatmap of `normalized` (nearest-patch
/// upsampling) over the chart.
pub fn overlay(image: &ChartImage, normalized: &Array2<f32>) -> ChartImage {
    let mut out = image.clone();
    let (gh, gw) = normalized.dim();
    for y in 0..image.height {
        for x in 0..image.width {
            let r = ((y as usize * gh) / image.height as usize).min(gh - 1);
            let c = ((x as usize * gw) / image.width as usize).min(gw - 1);
            let a = OVERLAY_ALPHA * normalized[[r, c]].clamp(0.0, 1.0);
            let i = ((y * image.width + x) * 3) as usize;
            for ch in 0..3 {
                let base = out.pixels[i + ch] as f32;
                out.pixels[i + ch] = ((1.0 - a) * base + a * OVERLAY_RGB[ch]).round() as u8;
            }
        }
    }
    out
}

/// Mean relevance of patches touching chart lines divided by the mean over
/// patches showing only background or gridlines. `None` if either group is
/// empty or blank patches carry no relevance.
pub fn line_vs_blank_ratio(map: &RelevanceMap, image: &ChartImage, background: [u8; 3], grid: [u8; 3]) -> Option<f64> {
    let (gh, gw) = map.grid.dim();
    let mut line = Vec::new();
    let mut blank = Vec::new();
    for r in 0..gh {
        for c in 0..gw {
            let (y0, y1) = (r as u32 * image.height / gh as u32, (r as u32 + 1) * image.height / gh as u32);
            let (x0, x1) = (c as u32 * image.width / gw as u32, (c as u32 + 1) * image.width / gw as u32);
            let has_line = (y0..y1).any(|y| {
                (x0..x1).any(|x| {
                    let p = image.pixel(x, y);
                    p != background && p != grid
                })
            });
            let v = f64::from(map.grid[[r, c]]);
            if has_line {
                line.push(v);
            } else {
                blank.push(v);
            }
        }
    }
    if line.is_empty() || blank.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let b = mean(&blank);
    (b > 0.0).then(|| mean(&line) / b)
}
