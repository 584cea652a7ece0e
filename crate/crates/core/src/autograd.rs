//! Reverse-mode differentiation over 2-D matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar output with
//! respect to every recorded node. Sequences are handled by the caller as one
//! matrix per time step.

use std::fmt::Debug;

use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + Debug + Send + Sync + std::iter::Sum + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type Mat<T> = Array2<T>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Mat<T>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    QuickGelu(Var),
    Sqrt(Var),
    ClampMin(Var, T),
    SoftmaxRows(Var),
    /// Row-wise standardization; keeps x-hat and 1/sigma per row.
    LayerNormRows(Var, Mat<T>, Mat<T>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SumAll(Var),
    /// Weighted mean cross-entropy of row-wise softmax; keeps probabilities.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Mat<T>,
    },
    DotConst(Var, Mat<T>),
    /// Whole LSTM layer over time-major stacked rows; keeps gates and cells.
    LstmLayer {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        steps: usize,
        gates: Mat<T>,
        cells: Mat<T>,
    },
    ConcatRows(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes the output does not
/// depend on.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when untouched.
    pub fn get_or_zeros(&self, v: Var, like: &Mat<T>) -> Mat<T> {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    /// `a` (m x n) plus a broadcast row (1 x n).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn mul_const(&mut self, a: Var, k: Mat<T>) -> Var {
        let v = self.value(a) * &k;
        self.push(v, Op::MulConst(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(Float::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    /// `x * sigmoid(1.702 x)`
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let k = c::<T>(1.702);
        let v = self.value(a).mapv(|x| x * sigmoid(k * x));
        self.push(v, Op::QuickGelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(Float::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, min: T) -> Var {
        let v = self.value(a).mapv(|x| x.max(min));
        self.push(v, Op::ClampMin(a, min))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.ncols()).expect("cols");
        let mean = x.sum_axis(Axis(1)).mapv(|s| s / n).insert_axis(Axis(1));
        let centered = x - &mean;
        let var = centered.mapv(|d| d * d).sum_axis(Axis(1)).mapv(|s| s / n);
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt()).insert_axis(Axis(1));
        let xhat = &centered * &inv_std;
        self.push(xhat.clone(), Op::LayerNormRows(a, xhat, inv_std))
    }

    /// Runs an LSTM layer over `x`, whose rows are `steps` consecutive
    /// (batch, input) blocks. Gates are packed (i, f, g, o) along the
    /// columns of `w_ih` (input x 4h) and `w_hh` (h x 4h); `bias` is one
    /// row. Returns the hidden states, stacked the same way as `x`.
    pub fn lstm_layer(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, steps: usize) -> Var {
        let xv = self.value(x);
        let whh = self.value(w_hh);
        let h = whh.nrows();
        let rows = xv.nrows();
        assert!(steps > 0 && rows % steps == 0, "rows must split into equal steps");
        let b = rows / steps;
        let mut gates = xv.dot(self.value(w_ih)) + self.value(bias);
        let mut cells = Mat::<T>::zeros((rows, h));
        let mut out = Mat::<T>::zeros((rows, h));
        let mut h_prev = Mat::<T>::zeros((b, h));
        for t in 0..steps {
            let zh = h_prev.dot(whh);
            for i in 0..b {
                let r = t * b + i;
                for j in 0..h {
                    let zi = sigmoid(gates[[r, j]] + zh[[i, j]]);
                    let zf = sigmoid(gates[[r, h + j]] + zh[[i, h + j]]);
                    let zg = (gates[[r, 2 * h + j]] + zh[[i, 2 * h + j]]).tanh();
                    let zo = sigmoid(gates[[r, 3 * h + j]] + zh[[i, 3 * h + j]]);
                    gates[[r, j]] = zi;
                    gates[[r, h + j]] = zf;
                    gates[[r, 2 * h + j]] = zg;
                    gates[[r, 3 * h + j]] = zo;
                    let cp = if t == 0 { T::zero() } else { cells[[r - b, j]] };
                    let c = zf * cp + zi * zg;
                    cells[[r, j]] = c;
                    let hv = zo * c.tanh();
                    out[[r, j]] = hv;
                    h_prev[[i, j]] = hv;
                }
            }
        }
        self.push(
            out,
            Op::LstmLayer {
                x,
                w_ih,
                w_hh,
                bias,
                steps,
                gates,
                cells,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("equal column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// `sum(a * k)` as a 1x1 node.
    pub fn dot_const(&mut self, a: Var, k: Mat<T>) -> Var {
        let s = (self.value(a) * &k).sum();
        self.push(Mat::from_elem((1, 1), s), Op::DotConst(a, k))
    }

    /// Mean over rows of `weight[i] * -log softmax(logits[i])[label[i]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len());
        assert_eq!(z.nrows(), weights.len());
        let probs = softmax_rows(z);
        let b = T::from_usize(labels.len()).expect("batch");
        let mut loss = T::zero();
        for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            let row = z.row(i);
            let m = row.fold(T::neg_infinity(), |a, &x| a.max(x));
            let lse = row.fold(T::zero(), |a, &x| a + (x - m).exp()).ln() + m;
            loss = loss + w * (lse - row[y]);
        }
        let value = Mat::from_elem((1, 1), loss / b);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of the 1x1 node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let seed = Mat::ones(self.value(out).raw_dim());
        self.backward_with(out, seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Mat<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc(&mut grads, *a, &g / bv);
                    let mut gb = &g * self.value(*a);
                    Zip::from(&mut gb).and(bv).for_each(|x, &d| *x = -*x / (d * d));
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let grow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, grow);
                    acc(&mut grads, *a, &g * self.value(*row));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::MulConst(a, k) => acc(&mut grads, *a, &g * k),
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(val).for_each(|x, &y| *x = *x * y * (T::one() - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(val).for_each(|x, &y| *x = *x * (T::one() - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|x, &z| *x = if z > T::zero() { *x } else { T::zero() });
                    acc(&mut grads, *a, ga);
                }
                Op::QuickGelu(a) => {
                    let k = c::<T>(1.702);
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|x, &z| {
                        let s = sigmoid(k * z);
                        *x = *x * (s + k * z * s * (T::one() - s));
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let two = c::<T>(2.0);
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(val).for_each(|x, &y| *x = *x / (two * y));
                    acc(&mut grads, *a, ga);
                }
                Op::ClampMin(a, min) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|x, &z| *x = if z >= *min { *x } else { T::zero() });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let dot = (&g * val).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = val * &(&g - &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, xhat, inv_std) => {
                    let n = T::from_usize(xhat.ncols()).expect("cols");
                    let sum_g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_gx = (&g * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let inner = &(&g * n - &sum_g) - &(xhat * &sum_gx);
                    let ga = &inner * &inv_std.mapv(|s| s / n);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.value(*a).raw_dim(), k));
                }
                Op::DotConst(a, k) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, k * s);
                }
                Op::LstmLayer {
                    x,
                    w_ih,
                    w_hh,
                    bias,
                    steps,
                    gates,
                    cells,
                } => {
                    let whh = self.value(*w_hh);
                    let h = whh.nrows();
                    let rows = val.nrows();
                    let b = rows / steps;
                    let mut dz = Mat::<T>::zeros((rows, 4 * h));
                    let mut dh_next = Mat::<T>::zeros((b, h));
                    let mut dc_next = Mat::<T>::zeros((b, h));
                    for t in (0..*steps).rev() {
                        for i in 0..b {
                            let r = t * b + i;
                            for j in 0..h {
                                let (zi, zf, zg, zo) =
                                    (gates[[r, j]], gates[[r, h + j]], gates[[r, 2 * h + j]], gates[[r, 3 * h + j]]);
                                let tc = cells[[r, j]].tanh();
                                let dh = g[[r, j]] + dh_next[[i, j]];
                                let dc = dh * zo * (T::one() - tc * tc) + dc_next[[i, j]];
                                let cp = if t == 0 { T::zero() } else { cells[[r - b, j]] };
                                dz[[r, j]] = dc * zg * zi * (T::one() - zi);
                                dz[[r, h + j]] = dc * cp * zf * (T::one() - zf);
                                dz[[r, 2 * h + j]] = dc * zi * (T::one() - zg * zg);
                                dz[[r, 3 * h + j]] = dh * tc * zo * (T::one() - zo);
                                dc_next[[i, j]] = dc * zf;
                            }
                        }
                        dh_next = dz.slice(s![t * b..(t + 1) * b, ..]).dot(&whh.t());
                    }
                    let mut h_prev = Mat::<T>::zeros((rows, h));
                    if *steps > 1 {
                        h_prev.slice_mut(s![b.., ..]).assign(&val.slice(s![..rows - b, ..]));
                    }
                    acc(&mut grads, *w_hh, h_prev.t().dot(&dz));
                    acc(&mut grads, *w_ih, self.value(*x).t().dot(&dz));
                    acc(&mut grads, *bias, dz.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, dz.dot(&self.value(*w_ih).t()));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let b = T::from_usize(labels.len()).expect("batch");
                    let up = g[[0, 0]];
                    let mut ga = probs.clone();
                    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        ga[[i, y]] = ga[[i, y]] - T::one();
                        let k = w * up / b;
                        ga.row_mut(i).mapv_inplace(|x| x * k);
                    }
                    acc(&mut grads, *logits, ga);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.zip_mut_with(&g, |a, &b| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_rows<T: Scalar>(z: &Mat<T>) -> Mat<T> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &x| a.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Builds a scalar from three leaves using every op; returns (tape, out, leaves).
    fn build(a: &Mat<f64>, b: &Mat<f64>, r: &Mat<f64>) -> (Tape<f64>, Var, [Var; 3]) {
        let mut t = Tape::new();
        let va = t.leaf(a.clone());
        let vb = t.leaf(b.clone());
        let vr = t.leaf(r.clone());
        let m = t.matmul(va, vb); // 2x3
        let m = t.add_row(m, vr);
        let s1 = t.sigmoid(m);
        let t1 = t.tanh(m);
        let p = t.mul(s1, t1);
        let q = t.sub(p, m);
        let sq = t.mul(q, q);
        let one = t.leaf(Mat::from_elem((2, 3), 1.0));
        let pos = t.add(sq, one);
        let rt = t.sqrt(pos);
        let d = t.div(q, rt);
        let g = t.quick_gelu(d);
        let re = t.relu(g);
        let ln = t.layer_norm_rows(m, 1e-5);
        let lr = t.mul_row(ln, vr);
        let sm = t.softmax_rows(lr);
        let tr = t.transpose(sm);
        let tt = t.transpose(tr);
        let cat = t.concat_cols(&[tt, re]);
        let sl = t.slice_cols(cat, 1, 5);
        let sr = t.slice_rows(sl, 0, 2);
        let cl = t.clamp_min(sr, -0.3);
        let sc = t.scale(cl, 1.7);
        let mc = t.mul_const(sc, array![[1.0, 0.5, -1.0, 2.0], [0.3, 1.0, 1.0, -0.7]]);
        let dc = t.dot_const(mc, array![[0.2, -1.0, 0.4, 1.0], [1.0, 0.1, -0.5, 0.3]]);
        let ce = t.softmax_cross_entropy(lr, &[2, 0], &[0.8, 1.3]);
        let tot = t.add(dc, ce);
        let sa = t.sum_all(m);
        let sa = t.scale(sa, 0.01);
        let out = t.add(tot, sa);
        // three steps of a two-row batch, hidden width 2
        let seq = t.concat_rows(&[sr, cl, mc]);
        let w_ih = t.concat_cols(&[cat, cat]);
        let w_ih = t.slice_cols(w_ih, 0, 8);
        let w_ih = t.concat_rows(&[w_ih, w_ih]);
        let w_hh = t.concat_cols(&[m, m, m]);
        let w_hh = t.slice_cols(w_hh, 0, 8);
        let w_hh = t.scale(w_hh, 0.5);
        let bias = t.concat_cols(&[vr, vr, vr]);
        let bias = t.slice_cols(bias, 1, 9);
        let layer = t.lstm_layer(seq, w_ih, w_hh, bias, 3);
        let layer = t.mul(layer, layer);
        let ls = t.sum_all(layer);
        let out = t.add(out, ls);
        (t, out, [va, vb, vr])
    }

    #[test]
    fn all_ops_match_finite_differences() {
        let a = array![[0.3, -0.7], [1.1, 0.4]];
        let b = array![[0.5, -0.2, 0.9], [-1.3, 0.8, 0.1]];
        let r = array![[0.05, -0.4, 0.7]];
        let (t, out, leaves) = build(&a, &b, &r);
        let grads = t.backward(out);
        let f = |a: &Mat<f64>, b: &Mat<f64>, r: &Mat<f64>| {
            let (t, o, _) = build(a, b, r);
            t.value(o)[[0, 0]]
        };
        let h = 1e-6;
        let inputs = [a.clone(), b.clone(), r.clone()];
        for (k, leaf) in leaves.iter().enumerate() {
            let g = grads.get(*leaf).unwrap();
            for idx in ndarray::indices(inputs[k].raw_dim()) {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k][idx] += h;
                minus[k][idx] -= h;
                let fd = (f(&plus[0], &plus[1], &plus[2]) - f(&minus[0], &minus[1], &minus[2])) / (2.0 * h);
                let an = g[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "leaf {k} {idx:?}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn lstm_layer_matches_stepwise_cell() {
        let mut t = Tape::<f64>::new();
        let (b, h, steps) = (2, 3, 4);
        let x = Mat::from_shape_fn((steps * b, 2), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        let w_ih = Mat::from_shape_fn((2, 4 * h), |(i, j)| ((i + 2 * j) % 7) as f64 * 0.1 - 0.3);
        let w_hh = Mat::from_shape_fn((h, 4 * h), |(i, j)| ((3 * i + j) % 5) as f64 * 0.1 - 0.2);
        let bias = Mat::from_shape_fn((1, 4 * h), |(_, j)| (j % 3) as f64 * 0.1);
        let vars = [x.clone(), w_ih.clone(), w_hh.clone(), bias.clone()].map(|m| t.leaf(m));
        let layer = t.lstm_layer(vars[0], vars[1], vars[2], vars[3], steps);

        let mut hs = Mat::<f64>::zeros((b, h));
        let mut cs = Mat::<f64>::zeros((b, h));
        for step in 0..steps {
            let z = x.slice(s![step * b..(step + 1) * b, ..]).dot(&w_ih) + hs.dot(&w_hh) + &bias;
            let gate = |k: usize, f: fn(f64) -> f64| z.slice(s![.., k * h..(k + 1) * h]).mapv(f);
            let (i, f, g, o) = (gate(0, sigmoid), gate(1, sigmoid), gate(2, f64::tanh), gate(3, sigmoid));
            cs = &f * &cs + &i * &g;
            hs = &o * &cs.mapv(f64::tanh);
            let got = t.value(layer).slice(s![step * b..(step + 1) * b, ..]).to_owned();
            assert!((&got - &hs).iter().all(|d| d.abs() < 1e-14), "step {step}");
        }
    }

    #[test]
    fn cross_entropy_value_matches_direct_formula() {
        let mut t = Tape::<f64>::new();
        let z = t.leaf(array![[0.0, 0.0], [2.0, -1.0]]);
        let l = t.softmax_cross_entropy(z, &[1, 0], &[1.0, 0.5]);
        let p1 = 0.5_f64;
        let p2 = 2f64.exp() / (2f64.exp() + (-1f64).exp());
        let want = (-(p1.ln()) + 0.5 * -(p2.ln())) / 2.0;
        assert!((t.value(l)[[0, 0]] - want).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&array![[1000.0_f32, 1001.0], [-3.0, 4.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
