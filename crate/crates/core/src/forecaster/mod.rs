//! LSTM direction classifiers with an optional adaptive normalization
//! front-end.

mod checkpoint;
mod dain;
mod train;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_model, save_model, ModelSidecar, CHECKPOINT_VERSION};
pub use dain::{dain_forward, dain_tape, DainConfig, DainParams, DainVars};
pub use train::{train, weight_short, weighted_bce, EpochRecord, TrainConfig, TrainedModel, WEIGHT_FORMULA};

use crate::autograd::{Mat, Tape, Var};
use crate::encoder::EmbeddingSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmHeadConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    1
}
fn default_mlp_hidden() -> usize {
    32
}

impl LstmHeadConfig {
    pub fn new(input_dim: usize) -> Self {
        LstmHeadConfig {
            input_dim,
            hidden_dim: default_hidden(),
            num_layers: default_layers(),
            mlp_hidden: default_mlp_hidden(),
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.mlp_hidden == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "input_dim, hidden_dim, mlp_hidden and num_layers must all be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Optimizer group of a parameter; each group has its own learning-rate
/// multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Head,
    DainShift,
    DainScale,
    DainGate,
}

impl ParamGroup {
    fn code(self) -> u8 {
        match self {
            ParamGroup::Head => 0,
            ParamGroup::DainShift => 1,
            ParamGroup::DainScale => 2,
            ParamGroup::DainGate => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [ParamGroup::Head, ParamGroup::DainShift, ParamGroup::DainScale, ParamGroup::DainGate]
            .into_iter()
            .find(|g| g.code() == c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

/// A direction classifier: optional normalization front-end, one or more
/// LSTM layers, and a two-layer perceptron producing two class scores
/// (short, long).
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub head: LstmHeadConfig,
    pub dain: Option<DainConfig>,
    pub params: Vec<Param>,
}

struct Built {
    logits: Var,
    vars: Vec<Var>,
    clamps: usize,
}

impl Forecaster {
    /// Fresh parameters: uniform(±1/√fan) for recurrent and dense layers,
    /// identity maps for the normalization shift and scale stages.
    pub fn init(head: LstmHeadConfig, dain: Option<DainConfig>, rng: &mut ChaCha8Rng) -> Result<Self> {
        head.validate()?;
        if let Some(d) = &dain {
            d.validate()?;
            if d.feature_dim != head.input_dim {
                return Err(Error::Config(format!(
                    "normalization layer width {} differs from input width {}",
                    d.feature_dim, head.input_dim
                )));
            }
        }
        let mut params = Vec::new();
        let mut uniform = |name: String, group, rows, cols, k: f64, rng: &mut ChaCha8Rng| {
            let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-k..=k));
            params.push(Param { name, group, value });
        };
        let h = head.hidden_dim;
        let kh = 1.0 / (h as f64).sqrt();
        if let Some(d) = &dain {
            let n = d.feature_dim;
            let kn = 1.0 / (n as f64).sqrt();
            uniform("dain.gate_w".into(), ParamGroup::DainGate, n, n, kn, rng);
            uniform("dain.gate_b".into(), ParamGroup::DainGate, 1, n, kn, rng);
        }
        for l in 0..head.num_layers {
            let input = if l == 0 { head.input_dim } else { h };
            uniform(format!("lstm{l}.w_ih"), ParamGroup::Head, input, 4 * h, kh, rng);
            uniform(format!("lstm{l}.w_hh"), ParamGroup::Head, h, 4 * h, kh, rng);
            uniform(format!("lstm{l}.b_ih"), ParamGroup::Head, 1, 4 * h, kh, rng);
            uniform(format!("lstm{l}.b_hh"), ParamGroup::Head, 1, 4 * h, kh, rng);
        }
        let m = head.mlp_hidden;
        let km = 1.0 / (m as f64).sqrt();
        uniform("mlp.w1".into(), ParamGroup::Head, h, m, kh, rng);
        uniform("mlp.b1".into(), ParamGroup::Head, 1, m, kh, rng);
        uniform("mlp.w2".into(), ParamGroup::Head, m, 2, km, rng);
        uniform("mlp.b2".into(), ParamGroup::Head, 1, 2, km, rng);
        if let Some(d) = &dain {
            let n = d.feature_dim;
            params.insert(
                0,
                Param {
                    name: "dain.shift".into(),
                    group: ParamGroup::DainShift,
                    value: Array2::eye(n),
                },
            );
            params.insert(
                1,
                Param {
                    name: "dain.scale".into(),
                    group: ParamGroup::DainScale,
                    value: Array2::eye(n),
                },
            );
        }
        Ok(Forecaster { head, dain, params })
    }

    fn index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn param(&self, name: &str) -> &Array2<f64> {
        &self.params[self.index(name)].value
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One (batch, input_dim) matrix per time step.
    pub fn batch_steps(&self, batch: &[&EmbeddingSequence]) -> Result<Vec<Mat<f64>>> {
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        let steps = first.len();
        for s in batch {
            if s.len() != steps {
                return Err(Error::Config(format!(
                    "sequence lengths differ within a batch ({} vs {steps})",
                    s.len()
                )));
            }
            if s.dim() != self.head.input_dim {
                return Err(Error::Config(format!(
                    "sequence width {} does not match model input width {}",
                    s.dim(),
                    self.head.input_dim
                )));
            }
        }
        Ok((0..steps)
            .map(|t| {
                let mut m = Array2::zeros((batch.len(), self.head.input_dim));
                for (b, s) in batch.iter().enumerate() {
                    for (dst, &src) in m.row_mut(b).iter_mut().zip(s.items[t].iter()) {
                        *dst = f64::from(src);
                    }
                }
                m
            })
            .collect())
    }

    fn dropout(tape: &mut Tape<f64>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 - p;
                let mask = tape.value(x).mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Records the forward pass on `tape`. Dropout is active only when a
    /// generator is supplied.
    fn build(&self, tape: &mut Tape<f64>, steps: &[Mat<f64>], mut rng: Option<&mut ChaCha8Rng>) -> Built {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let v = |name: &str| vars[self.index(name)];
        let mut xs: Vec<Var> = steps.iter().map(|m| tape.leaf(m.clone())).collect();
        let mut clamps = 0;
        if let Some(d) = &self.dain {
            let dv = DainVars {
                shift: v("dain.shift"),
                scale: v("dain.scale"),
                gate_w: v("dain.gate_w"),
                gate_b: v("dain.gate_b"),
            };
            let (out, c) = dain_tape(tape, &xs, dv, d.eps);
            xs = out;
            clamps = c;
        }
        let batch = steps[0].nrows();
        let n_steps = steps.len();
        let mut seq = tape.concat_rows(&xs);
        for l in 0..self.head.num_layers {
            if l > 0 {
                seq = Self::dropout(tape, seq, self.head.dropout, rng.as_deref_mut());
            }
            let (w_ih, w_hh) = (v(&format!("lstm{l}.w_ih")), v(&format!("lstm{l}.w_hh")));
            let bias = tape.add(v(&format!("lstm{l}.b_ih")), v(&format!("lstm{l}.b_hh")));
            seq = tape.lstm_layer(seq, w_ih, w_hh, bias, n_steps);
        }
        let last = tape.slice_rows(seq, (n_steps - 1) * batch, n_steps * batch);
        let last = Self::dropout(tape, last, self.head.dropout, rng.as_deref_mut());
        let z = tape.matmul(last, v("mlp.w1"));
        let z = tape.add_row(z, v("mlp.b1"));
        let z = tape.relu(z);
        let z = Self::dropout(tape, z, self.head.dropout, rng.as_deref_mut());
        let z = tape.matmul(z, v("mlp.w2"));
        let logits = tape.add_row(z, v("mlp.b2"));
        Built { logits, vars, clamps }
    }

    /// Class probabilities, one (short, long) row per sequence, in
    /// inference mode.
    pub fn predict_proba(&self, batch: &[EmbeddingSequence]) -> Result<Array2<f64>> {
        const CHUNK: usize = 512;
        let mut out = Array2::zeros((batch.len(), 2));
        if batch.is_empty() {
            return Ok(out);
        }
        for (c, chunk) in batch.chunks(CHUNK).enumerate() {
            let refs: Vec<&EmbeddingSequence> = chunk.iter().collect();
            let steps = self.batch_steps(&refs)?;
            if steps.is_empty() {
                return Err(Error::Config("empty sequences cannot be classified".into()));
            }
            let mut tape = Tape::new();
            let built = self.build(&mut tape, &steps, None);
            let probs = crate::autograd::softmax_rows(tape.value(built.logits));
            out.slice_mut(ndarray::s![c * CHUNK..c * CHUNK + chunk.len(), ..]).assign(&probs);
        }
        Ok(out)
    }

    /// Direction per sequence: long when its probability exceeds short's.
    pub fn predict(&self, batch: &[EmbeddingSequence]) -> Result<Vec<u8>> {
        let p = self.predict_proba(batch)?;
        Ok(p.rows().into_iter().map(|r| u8::from(r[1] > r[0])).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDateTime;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    pub(crate) fn random_sequences(n: usize, len: usize, dim: usize, seed: u64) -> Vec<EmbeddingSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| EmbeddingSequence {
                items: (0..len)
                    .map(|_| {
                        let row: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                        Arc::from(row)
                    })
                    .collect(),
                anchor_index: i,
                anchor_ts: NaiveDateTime::default(),
                label: (i % 2) as u8,
                delta: 0.0,
            })
            .collect()
    }

    fn model(dim: usize, layers: usize, dain: bool) -> Forecaster {
        let mut head = LstmHeadConfig::new(dim);
        head.hidden_dim = 3;
        head.mlp_hidden = 4;
        head.num_layers = layers;
        let dain = dain.then(|| DainConfig {
            feature_dim: dim,
            ..DainConfig::default()
        });
        Forecaster::init(head, dain, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = model(4, 2, true);
        let p = m.predict_proba(&random_sequences(7, 5, 4, 1)).unwrap();
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-6);
            assert!(r.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let mut m = model(4, 1, false);
        for p in &mut m.params {
            p.value.fill(0.0);
        }
        let p = m.predict_proba(&random_sequences(3, 5, 4, 2)).unwrap();
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn repeated_batch_repeats_predictions() {
        let m = model(4, 1, false);
        let seqs = random_sequences(4, 5, 4, 3);
        let doubled: Vec<_> = seqs.iter().chain(&seqs).cloned().collect();
        let a = m.predict_proba(&seqs).unwrap();
        let b = m.predict_proba(&doubled).unwrap();
        assert_eq!(a, b.slice(ndarray::s![0..4, ..]));
        assert_eq!(a, b.slice(ndarray::s![4..8, ..]));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let m = model(4, 1, false);
        let err = m.predict_proba(&random_sequences(2, 5, 3, 4)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn long_logit_monotonicity() {
        let mut m = model(4, 1, false);
        let seqs = random_sequences(1, 5, 4, 5);
        let before = m.predict_proba(&seqs).unwrap()[[0, 1]];
        let b2 = m.index("mlp.b2");
        m.params[b2].value[[0, 1]] += 0.5;
        let after = m.predict_proba(&seqs).unwrap()[[0, 1]];
        assert!(after > before);
    }

    #[test]
    fn full_model_gradient_check() {
        for (layers, dain) in [(1, false), (2, false), (1, true)] {
            let m = model(4, layers, dain);
            let seqs = random_sequences(3, 5, 4, 6);
            let refs: Vec<&EmbeddingSequence> = seqs.iter().collect();
            let steps = m.batch_steps(&refs).unwrap();
            let labels = [0usize, 1, 1];
            let weights = [0.8, 1.0, 1.0];
            let loss_of = |m: &Forecaster| {
                let mut tape = Tape::new();
                let b = m.build(&mut tape, &steps, None);
                let loss = tape.softmax_cross_entropy(b.logits, &labels, &weights);
                (tape, b, loss)
            };
            let (tape, built, loss) = loss_of(&m);
            let grads = tape.backward(loss);
            let h = 1e-6;
            for (k, p) in m.params.iter().enumerate() {
                let analytic = grads.get_or_zeros(built.vars[k], &p.value);
                let mut numeric = Array2::zeros(p.value.dim());
                for idx in 0..p.value.len() {
                    let (r, c) = (idx / p.value.ncols(), idx % p.value.ncols());
                    let mut plus = m.clone();
                    plus.params[k].value[[r, c]] += h;
                    let mut minus = m.clone();
                    minus.params[k].value[[r, c]] -= h;
                    let (tp, _, lp) = loss_of(&plus);
                    let (tm, _, lm) = loss_of(&minus);
                    numeric[[r, c]] = (tp.value(lp)[[0, 0]] - tm.value(lm)[[0, 0]]) / (2.0 * h);
                }
                let diff = (&analytic - &numeric).mapv(|x| x * x).sum().sqrt();
                let scale = analytic.mapv(|x| x * x).sum().sqrt() + numeric.mapv(|x| x * x).sum().sqrt();
                let rel = if scale < 1e-12 { 0.0 } else { diff / scale };
                assert!(rel < 1e-3, "{} (layers {layers}, dain {dain}): {rel}", p.name);
            }
        }
    }
}
