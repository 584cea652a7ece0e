//! Adaptive input normalization: learned shift, scale and gate stages
//! applied per sequence.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Scalar, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DainConfig {
    pub shift_lr: f64,
    pub scale_lr: f64,
    pub gate_lr: f64,
    pub feature_dim: usize,
    pub eps: f64,
}

impl Default for DainConfig {
    fn default() -> Self {
        DainConfig {
            shift_lr: 1.0,
            scale_lr: 0.1,
            gate_lr: 0.01,
            feature_dim: 4,
            eps: 1e-8,
        }
    }
}

impl DainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("shift_lr", self.shift_lr), ("scale_lr", self.scale_lr), ("gate_lr", self.gate_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("dain.{name} must be > 0, got {v}")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("dain.feature_dim must be ≥ 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("dain.eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Weights of the three stages. Maps act on row vectors (`summary @ w`).
#[derive(Debug, Clone, PartialEq)]
pub struct DainParams {
    pub shift: Array2<f64>,
    pub scale: Array2<f64>,
    pub gate_w: Array2<f64>,
    pub gate_b: Array2<f64>,
}

impl DainParams {
    /// Identity shift and scale maps, zero gate.
    pub fn identity(dim: usize) -> Self {
        DainParams {
            shift: Array2::eye(dim),
            scale: Array2::eye(dim),
            gate_w: Array2::zeros((dim, dim)),
            gate_b: Array2::zeros((1, dim)),
        }
    }
}

/// Tape handles of the stage weights.
#[derive(Debug, Clone, Copy)]
pub struct DainVars {
    pub shift: Var,
    pub scale: Var,
    pub gate_w: Var,
    pub gate_b: Var,
}

fn mean_over_time<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x);
    }
    tape.scale(acc, T::one() / T::from_usize(xs.len()).expect("length"))
}

/// Applies the three stages to a batch given as one (batch, features)
/// matrix per time step. Returns the normalized steps and the number of
/// scale entries clamped at `eps`.
pub fn dain_tape<T: Scalar>(tape: &mut Tape<T>, xs: &[Var], p: DainVars, eps: T) -> (Vec<Var>, usize) {
    // shift: subtract a learned map of the per-sequence mean
    let mean = mean_over_time(tape, xs);
    let alpha = tape.matmul(mean, p.shift);
    let x1: Vec<Var> = xs.iter().map(|&x| tape.sub(x, alpha)).collect();

    // scale: divide by a learned map of the root-mean-square of centered values
    let squares: Vec<Var> = x1.iter().map(|&x| tape.mul(x, x)).collect();
    let ms = mean_over_time(tape, &squares);
    let dim = tape.value(ms).ncols();
    let eps_row = tape.leaf(Mat::from_elem((1, dim), eps));
    let ms = tape.add_row(ms, eps_row);
    let rms = tape.sqrt(ms);
    let beta = tape.matmul(rms, p.scale);
    let clamps = tape.value(beta).iter().filter(|&&b| b < eps).count();
    let beta = tape.clamp_min(beta, eps);
    let x2: Vec<Var> = x1.iter().map(|&x| tape.div(x, beta)).collect();

    // gate: multiply by a sigmoid of a learned map of the scaled mean
    let summary = mean_over_time(tape, &x2);
    let logits = tape.matmul(summary, p.gate_w);
    let logits = tape.add_row(logits, p.gate_b);
    let gamma = tape.sigmoid(logits);
    let out = x2.iter().map(|&x| tape.mul(x, gamma)).collect();
    (out, clamps)
}

/// Normalizes a batch of (steps, features) sequences. Returns the outputs
/// and the clamp count.
pub fn dain_forward(batch: &[Array2<f64>], params: &DainParams, eps: f64) -> Result<(Vec<Array2<f64>>, usize)> {
    let Some(first) = batch.first() else {
        return Ok((Vec::new(), 0));
    };
    let (steps, dim) = first.dim();
    if steps == 0 || batch.iter().any(|s| s.dim() != (steps, dim)) {
        return Err(Error::Validation("sequences must share a non-zero (steps, features) shape".into()));
    }
    if params.shift.dim() != (dim, dim) {
        return Err(Error::Config(format!(
            "normalization layer expects {} features, input has {dim}",
            params.shift.nrows()
        )));
    }
    let mut tape = Tape::new();
    let xs: Vec<Var> = (0..steps)
        .map(|t| {
            let mut m = Array2::zeros((batch.len(), dim));
            for (b, s) in batch.iter().enumerate() {
                m.row_mut(b).assign(&s.row(t));
            }
            tape.leaf(m)
        })
        .collect();
    let vars = DainVars {
        shift: tape.leaf(params.shift.clone()),
        scale: tape.leaf(params.scale.clone()),
        gate_w: tape.leaf(params.gate_w.clone()),
        gate_b: tape.leaf(params.gate_b.clone()),
    };
    let (out, clamps) = dain_tape(&mut tape, &xs, vars, eps);
    let result = (0..batch.len())
        .map(|b| {
            let mut s = Array2::zeros((steps, dim));
            for (t, &v) in out.iter().enumerate() {
                s.row_mut(t).assign(&tape.value(v).row(b));
            }
            s
        })
        .collect();
    Ok((result, clamps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
    }

    #[test]
    fn open_gate_reduces_to_standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = random(&mut rng, 6, 4, 3.0) + 100.0;
        let mut p = DainParams::identity(4);
        p.gate_b.fill(60.0);
        let (out, clamps) = dain_forward(std::slice::from_ref(&seq), &p, 1e-12).unwrap();
        assert_eq!(clamps, 0);
        for f in 0..4 {
            let col = seq.column(f);
            let mean = col.sum() / 6.0;
            let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
            for t in 0..6 {
                let expect = (seq[[t, f]] - mean) / std;
                assert!((out[0][[t, f]] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_input_zero_maps_is_finite() {
        let p = DainParams {
            shift: Array2::zeros((4, 4)),
            scale: Array2::zeros((4, 4)),
            gate_w: Array2::zeros((4, 4)),
            gate_b: Array2::zeros((1, 4)),
        };
        let (out, clamps) = dain_forward(&[Array2::zeros((3, 4))], &p, 1e-8).unwrap();
        assert!(out[0].iter().all(|v| v.is_finite()));
        assert_eq!(clamps, 4);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = [random(&mut rng, 3, 4, 2.0) + 1.0, random(&mut rng, 3, 4, 0.5) - 2.0];
        let mut p = DainParams::identity(4);
        p.shift = p.shift + random(&mut rng, 4, 4, 0.1);
        p.scale = p.scale + random(&mut rng, 4, 4, 0.1);
        p.gate_w = random(&mut rng, 4, 4, 0.3);
        p.gate_b = random(&mut rng, 1, 4, 0.3);
        let weights: Vec<Array2<f64>> = (0..3).map(|_| random(&mut rng, 2, 4, 1.0)).collect();

        let loss_and_grads = |batch: &[Array2<f64>], p: &DainParams| {
            let mut tape = Tape::new();
            let xs: Vec<Var> = (0..3)
                .map(|t| {
                    let mut m = Array2::zeros((2, 4));
                    for (b, s) in batch.iter().enumerate() {
                        m.row_mut(b).assign(&s.row(t));
                    }
                    tape.leaf(m)
                })
                .collect();
            let vars = DainVars {
                shift: tape.leaf(p.shift.clone()),
                scale: tape.leaf(p.scale.clone()),
                gate_w: tape.leaf(p.gate_w.clone()),
                gate_b: tape.leaf(p.gate_b.clone()),
            };
            let (out, _) = dain_tape(&mut tape, &xs, vars, 1e-8);
            let terms: Vec<Var> = out.iter().zip(&weights).map(|(&o, w)| tape.dot_const(o, w.clone())).collect();
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = tape.add(loss, t);
            }
            let g = tape.backward(loss);
            let value = tape.value(loss)[[0, 0]];
            let grad_of = |v: Var| g.get_or_zeros(v, tape.value(v));
            let gx: Vec<Array2<f64>> = xs.iter().map(|&v| grad_of(v)).collect();
            let gp = [grad_of(vars.shift), grad_of(vars.scale), grad_of(vars.gate_w), grad_of(vars.gate_b)];
            (value, gx, gp)
        };

        let (_, gx, gp) = loss_and_grads(&batch, &p);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        };
        for b in 0..2 {
            for t in 0..3 {
                for f in 0..4 {
                    let mut plus = batch.clone();
                    plus[b][[t, f]] += h;
                    let mut minus = batch.clone();
                    minus[b][[t, f]] -= h;
                    let num = (loss_and_grads(&plus, &p).0 - loss_and_grads(&minus, &p).0) / (2.0 * h);
                    check(gx[t][[b, f]], num);
                }
            }
        }
        for k in 0..4 {
            let shape = gp[k].dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let bump = |d: f64| {
                        let mut q = p.clone();
                        let m = match k {
                            0 => &mut q.shift,
                            1 => &mut q.scale,
                            2 => &mut q.gate_w,
                            _ => &mut q.gate_b,
                        };
                        m[[i, j]] += d;
                        loss_and_grads(&batch, &q).0
                    };
                    check(gp[k][[i, j]], (bump(h) - bump(-h)) / (2.0 * h));
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    proptest! {
        #[test]
        fn constant_offset_invariance(seed in 0u64..1000, c in prop::array::uniform4(-500.0f64..500.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = random(&mut rng, 5, 4, 1.0);
            let mut p = DainParams::identity(4);
            p.scale = p.scale + random(&mut rng, 4, 4, 0.05);
            p.gate_w = random(&mut rng, 4, 4, 0.5);
            let shifted = &seq + &ndarray::Array1::from(c.to_vec());
            let (a, clamped) = dain_forward(&[seq], &p, 1e-8).unwrap();
            // a clamped scale amplifies rounding in the centering by 1/eps
            prop_assume!(clamped == 0);
            let (b, _) = dain_forward(&[shifted], &p, 1e-8).unwrap();
            for (x, y) in a[0].iter().zip(b[0].iter()) {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
