use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DainConfig, Forecaster, LstmHeadConfig, ParamGroup};
use crate::autograd::Tape;
use crate::encoder::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::evaluation::ConfusionCounts;

/// Weight applied to short (label 0) samples, as recorded in checkpoints.
pub const WEIGHT_FORMULA: &str = "weight_short = 1 + w * n_train";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Short-sample weighting parameter.
    #[serde(default)]
    pub w: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    15
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.001,
            dropout: 0.0,
            w: 0.0,
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `1 + w * n_train`; must stay positive.
pub fn weight_short(w: f64, n_train: usize) -> Result<f64> {
    let ws = 1.0 + w * n_train as f64;
    if ws > 0.0 && ws.is_finite() {
        Ok(ws)
    } else {
        Err(Error::Config(format!(
            "short-sample weight {ws} (w = {w}, n_train = {n_train}) must be > 0"
        )))
    }
}

/// Mean cross-entropy over the batch, with short samples scaled by
/// [`weight_short`]. `probs` holds (short, long) rows.
pub fn weighted_bce(probs: &Array2<f64>, labels: &[u8], w: f64, n_train: usize) -> Result<f64> {
    let ws = weight_short(w, n_train)?;
    if probs.nrows() != labels.len() || probs.ncols() != 2 {
        return Err(Error::Validation("probabilities must be one (short, long) row per label".into()));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let (p, weight) = match y {
            0 => (row[0], ws),
            1 => (row[1], 1.0),
            other => return Err(Error::Validation(format!("label {other} is not binary"))),
        };
        total += -weight * p.ln();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_f1: f64,
    pub validation_accuracy: f64,
    pub validation_balanced_acc: f64,
    pub dain_clamps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Forecaster,
    pub config: TrainConfig,
    pub validation_f1: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub weight_short: f64,
    pub n_train: usize,
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Forecaster) -> Self {
        let zeros: Vec<Array2<f64>> = model.params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Forecaster, grads: &[Array2<f64>], lrs: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, p) in model.params.iter_mut().enumerate() {
            let g = &grads[k];
            self.m[k].zip_mut_with(g, |m, &g| *m = Self::B1 * *m + (1.0 - Self::B1) * g);
            self.v[k].zip_mut_with(g, |v, &g| *v = Self::B2 * *v + (1.0 - Self::B2) * g * g);
            let lr = lrs[k];
            ndarray::Zip::from(&mut p.value)
                .and(&self.m[k])
                .and(&self.v[k])
                .for_each(|w, &m, &v| *w -= lr * (m / c1) / ((v / c2).sqrt() + Self::EPS));
        }
    }
}

fn validation_counts(model: &Forecaster, validation: &[EmbeddingSequence]) -> Result<ConfusionCounts> {
    let preds = model.predict(validation)?;
    Ok(ConfusionCounts::from_pairs(
        preds.into_iter().zip(validation.iter().map(|s| s.label)),
    ))
}

/// Trains with Adam on the weighted loss, evaluating validation F1 after
/// every epoch and keeping the parameters of the best epoch. Stops after
/// `patience` epochs without improvement.
pub fn train(
    head: LstmHeadConfig,
    dain: Option<DainConfig>,
    train_set: &[EmbeddingSequence],
    validation: &[EmbeddingSequence],
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::NoSamples);
    }
    let ws = weight_short(config.w, train_set.len())?;
    let mut head = head;
    head.dropout = config.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Forecaster::init(head, dain, &mut rng)?;
    let lrs: Vec<f64> = model
        .params
        .iter()
        .map(|p| {
            let mult = match (p.group, &model.dain) {
                (ParamGroup::Head, _) | (_, None) => 1.0,
                (ParamGroup::DainShift, Some(d)) => d.shift_lr,
                (ParamGroup::DainScale, Some(d)) => d.scale_lr,
                (ParamGroup::DainGate, Some(d)) => d.gate_lr,
            };
            config.learning_rate * mult
        })
        .collect();
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Forecaster)> = None;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut clamps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EmbeddingSequence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let steps = model.batch_steps(&batch)?;
            let labels: Vec<usize> = batch.iter().map(|s| usize::from(s.label)).collect();
            let weights: Vec<f64> = labels.iter().map(|&y| if y == 0 { ws } else { 1.0 }).collect();
            let mut tape = Tape::new();
            let built = model.build(&mut tape, &steps, Some(&mut rng));
            let loss = tape.softmax_cross_entropy(built.logits, &labels, &weights);
            let value = tape.value(loss)[[0, 0]];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("training loss became {value}"),
                });
            }
            let grads = tape.backward(loss);
            let gs: Vec<Array2<f64>> = built
                .vars
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
                .collect();
            if gs.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    msg: "non-finite gradient".into(),
                });
            }
            adam.step(&mut model, &gs, &lrs);
            loss_sum += value * chunk.len() as f64;
            clamps += built.clamps;
        }
        let counts = validation_counts(&model, validation)?;
        let f1 = counts.f1();
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            validation_f1: f1,
            validation_accuracy: counts.accuracy(),
            validation_balanced_acc: counts.balanced_accuracy(),
            dain_clamps: clamps,
        });
        log::debug!("epoch {epoch}: loss {:.5}, validation F1 {f1:.4}", loss_sum / train_set.len() as f64);
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (validation_f1, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainedModel {
        model,
        config: config.clone(),
        validation_f1,
        best_epoch,
        history,
        weight_short: ws,
        n_train: train_set.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDateTime;
    use ndarray::array;
    use std::sync::Arc;

    #[test]
    fn weight_mapping() {
        assert!((weight_short(-0.00005, 4000).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(weight_short(0.0, 10).unwrap(), 1.0);
        assert!(matches!(weight_short(-0.001, 1000), Err(Error::Config(_))));
    }

    #[test]
    fn hand_computed_weighted_loss() {
        let probs = array![[0.7, 0.3], [0.4, 0.6]];
        let loss = weighted_bce(&probs, &[0, 1], -0.00005, 4000).unwrap();
        let expect = (-0.8 * 0.7f64.ln() - 0.6f64.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-9);
        let unweighted = weighted_bce(&probs, &[0, 1], 0.0, 4000).unwrap();
        assert!((unweighted - (-(0.7f64.ln()) - 0.6f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        for w in [-0.00015, -0.00005, 0.0] {
            assert_eq!(weighted_bce(&probs, &[0, 1], w, 1000).unwrap(), 0.0);
        }
    }

    fn seq(values: &[[f32; 2]], label: u8) -> EmbeddingSequence {
        EmbeddingSequence {
            items: values.iter().map(|v| Arc::from(v.to_vec())).collect(),
            anchor_index: 0,
            anchor_ts: NaiveDateTime::default(),
            label,
            delta: 0.0,
        }
    }

    #[test]
    fn same_seed_same_result() {
        let data: Vec<EmbeddingSequence> = (0..40)
            .map(|i| {
                let x = (i as f32 / 40.0) - 0.5;
                seq(&[[x, -x], [x * 2.0, 0.1]], u8::from(x > 0.0))
            })
            .collect();
        let mut head = LstmHeadConfig::new(2);
        head.hidden_dim = 4;
        head.mlp_hidden = 4;
        let cfg = TrainConfig {
            batch_size: 8,
            learning_rate: 0.01,
            max_epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(head.clone(), None, &data[..30], &data[30..], &cfg).unwrap();
        let b = train(head, None, &data[..30], &data[30..], &cfg).unwrap();
        assert_eq!(a.validation_f1, b.validation_f1);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 5);
    }
}
