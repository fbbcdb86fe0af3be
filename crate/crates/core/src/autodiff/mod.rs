//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! A [`Tape`] evaluates eagerly: every op computes its value on the spot and
//! records how to backpropagate through it. [`Tape::backward`] then walks the
//! nodes in reverse, accumulating vector-Jacobian products.
//!
//! Forward ops reject non-finite outputs, naming the offending op, so a NaN
//! surfaces where it is produced rather than in the loss.

mod grad;
mod kernels;

pub use grad::{
    check_gradients, finite_difference_grad, grad_with, value_with, verify_gradients, BoundParams,
    GradCheckReport, Gradients, LossBuilder, ParamCheck, ParamSet,
};
pub use kernels::{Conv1dDims, Conv2dDims};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    AddBias { x: usize, b: usize },
    Matmul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, dims: Conv2dDims },
    Conv1d { x: usize, w: usize, b: Option<usize>, dims: Conv1dDims },
    Relu(usize),
    Softplus(usize),
    Dropout { x: usize, mask: Tensor<T> },
    MaskedSoftmax { scores: usize, mask: Vec<bool> },
    MaskedMeanRows { x: usize, mask: Vec<bool> },
    MaskedMaxRows { x: usize, argmax: Vec<usize> },
    Sum(usize),
    Mean(usize),
    GlobalAvgPool2d(usize),
    Concat1d(Vec<usize>),
    StackScalars(Vec<usize>),
    Element1d { x: usize, index: usize },
    SliceCols { x: usize, start: usize, len: usize },
    SliceRows { x: usize, start: usize, len: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    BceWithLogits { logits: usize, labels: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Eager autodiff tape.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf (input or parameter) value.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cv = T::from_f64(c);
        let ta = &self.nodes[a.0].value;
        let value = Tensor::from_vec(ta.shape().to_vec(), ta.data().iter().map(|x| *x + cv).collect())?;
        self.push("add_scalar", value, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cv = T::from_f64(c);
        let ta = &self.nodes[a.0].value;
        let value = Tensor::from_vec(ta.shape().to_vec(), ta.data().iter().map(|x| *x * cv).collect())?;
        self.push("mul_scalar", value, Op::MulScalar(a.0, cv))
    }

    /// x: R×C, bias: C, added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (xs, bs) = (tx.shape(), tb.shape());
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", xs, bs),
            });
        }
        let (r, c) = (xs[0], xs[1]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(tx.data()[i * c + j] + tb.data()[j]);
            }
        }
        let value = Tensor::from_vec(vec![r, c], data)?;
        self.push("add_bias", value, Op::AddBias { x: x.0, b: bias.0 })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(ta.data(), tb.data(), r, k, c);
        let value = Tensor::from_vec(vec![r, c], data)?;
        self.push("matmul", value, Op::Matmul { a: a.0, b: b.0 })
    }

    /// x: N×C×H×W, w: OC×C×KH×KW, bias: OC.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, weight {:?}", xs, ws),
            });
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {:?} too large for input {:?} (pad {pad})", ws, xs),
            });
        }
        let dims = Conv2dDims {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [dims.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?}, expected [{}]", bs, dims.c_out),
                });
            }
        }
        let bdata = bias.map(|b| self.nodes[b.0].value.clone());
        let data = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            bdata.as_ref().map(|t| t.data()),
            &dims,
        );
        let value = Tensor::from_vec(vec![dims.n, dims.c_out, dims.out_h(), dims.out_w()], data)?;
        self.push("conv2d", value, Op::Conv2d { x: x.0, w: w.0, b: bias.map(|b| b.0), dims })
    }

    /// x: N×C×L, w: OC×C×K, bias: OC.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("input {:?}, weight {:?}", xs, ws),
            });
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("kernel {:?} too large for input {:?} (pad {pad})", ws, xs),
            });
        }
        let dims = Conv1dDims {
            n: xs[0],
            c_in: xs[1],
            len: xs[2],
            c_out: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [dims.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    detail: format!("bias {:?}, expected [{}]", bs, dims.c_out),
                });
            }
        }
        let bdata = bias.map(|b| self.nodes[b.0].value.clone());
        let data = kernels::conv1d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            bdata.as_ref().map(|t| t.data()),
            &dims,
        );
        let value = Tensor::from_vec(vec![dims.n, dims.c_out, dims.out_len()], data)?;
        self.push("conv1d", value, Op::Conv1d { x: x.0, w: w.0, b: bias.map(|b| b.0), dims })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| v.maximum(T::ZERO)).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(x.0))
    }

    /// ln(1 + e^x), evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| softplus_val(*v)).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        self.push("softplus", value, Op::Softplus(x.0))
    }

    /// Inverted dropout: at train time each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p). Eval-mode code
    /// simply does not call this.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout p={p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let tx = &self.nodes[x.0].value;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = T::from_f64(1.0 / (1.0 - p));
        let mask_data: Vec<T> = (0..tx.numel())
            .map(|_| if rng.random_range(0.0..1.0f64) < p { T::ZERO } else { scale })
            .collect();
        let mask = Tensor::from_vec(tx.shape().to_vec(), mask_data)?;
        let data = tx.data().iter().zip(mask.data()).map(|(v, m)| *v * *m).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x: x.0, mask })
    }

    /// Softmax over the last axis of a 1-D `[T]` or 2-D `[R,T]` input with a
    /// shared validity mask of length T. Masked positions get weight exactly
    /// zero; scores are stabilized by subtracting the max over valid
    /// positions.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let ts = &self.nodes[scores.0].value;
        let shape = ts.shape().to_vec();
        let t = *shape.last().ok_or(Error::ShapeMismatch {
            op: "masked_softmax",
            detail: "rank-0 scores".into(),
        })?;
        if shape.len() > 2 || mask.len() != t {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("scores {:?}, mask length {}", shape, mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let rows = ts.numel() / t;
        let mut data = vec![T::ZERO; ts.numel()];
        for r in 0..rows {
            let row = &ts.data()[r * t..(r + 1) * t];
            let out = &mut data[r * t..(r + 1) * t];
            masked_softmax_row(row, mask, out);
        }
        let value = Tensor::from_vec(shape, data)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax { scores: scores.0, mask: mask.to_vec() })
    }

    /// Mean over valid rows of a T×D input.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if shape.len() != 2 || mask.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "masked_mean_rows",
                detail: format!("input {:?}, mask length {}", shape, mask.len()),
            });
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::AllMasked);
        }
        let (rows, cols) = (shape[0], shape[1]);
        let inv = T::from_f64(1.0 / valid as f64);
        let mut data = vec![T::ZERO; cols];
        for r in 0..rows {
            if mask[r] {
                let row = &tx.data()[r * cols..(r + 1) * cols];
                for (acc, v) in data.iter_mut().zip(row) {
                    *acc += *v;
                }
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let value = Tensor::from_vec(vec![cols], data)?;
        self.push("masked_mean_rows", value, Op::MaskedMeanRows { x: x.0, mask: mask.to_vec() })
    }

    /// Columnwise max over valid rows of a T×D input. Ties break toward the
    /// lowest row index.
    pub fn masked_max_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if shape.len() != 2 || mask.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "masked_max_rows",
                detail: format!("input {:?}, mask length {}", shape, mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut argmax = vec![usize::MAX; cols];
        let mut data = vec![T::NEG_INFINITY; cols];
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &tx.data()[r * cols..(r + 1) * cols];
            for c in 0..cols {
                if argmax[c] == usize::MAX || row[c] > data[c] {
                    data[c] = row[c];
                    argmax[c] = r;
                }
            }
        }
        let value = Tensor::from_vec(vec![cols], data)?;
        self.push("masked_max_rows", value, Op::MaskedMaxRows { x: x.0, argmax })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let mut acc = T::ZERO;
        for v in tx.data() {
            acc += *v;
        }
        self.push("sum", Tensor::scalar(acc), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.numel() == 0 {
            return Err(Error::EmptyInput("mean"));
        }
        let mut acc = T::ZERO;
        for v in tx.data() {
            acc += *v;
        }
        let value = Tensor::scalar(acc * T::from_f64(1.0 / tx.numel() as f64));
        self.push("mean", value, Op::Mean(x.0))
    }

    /// N×C×H×W -> N×C spatial mean.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool2d",
                detail: format!("{:?}", shape),
            });
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = T::from_f64(1.0 / plane as f64);
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let mut acc = T::ZERO;
            for v in &tx.data()[i * plane..(i + 1) * plane] {
                acc += *v;
            }
            data.push(acc * inv);
        }
        let value = Tensor::from_vec(vec![n, c], data)?;
        self.push("global_avg_pool2d", value, Op::GlobalAvgPool2d(x.0))
    }

    /// Concatenate rank-1 vectors.
    pub fn concat1d(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat1d"));
        }
        let mut data = Vec::new();
        for p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.shape().len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat1d",
                    detail: format!("{:?}", tp.shape()),
                });
            }
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::from_vec(vec![data.len()], data)?;
        self.push("concat1d", value, Op::Concat1d(parts.iter().map(|v| v.0).collect()))
    }

    /// Stack one-element tensors into a vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("stack_scalars"));
        }
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            data.push(self.nodes[p.0].value.item()?);
        }
        let value = Tensor::from_vec(vec![data.len()], data)?;
        self.push("stack_scalars", value, Op::StackScalars(parts.iter().map(|v| v.0).collect()))
    }

    /// Single element of a rank-1 vector, as a scalar.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 1 || index >= tx.numel() {
            return Err(Error::ShapeMismatch {
                op: "element",
                detail: format!("index {} of {:?}", index, tx.shape()),
            });
        }
        let value = Tensor::scalar(tx.data()[index]);
        self.push("element", value, Op::Element1d { x: x.0, index })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols [{start}, {}) of {:?}", start + len, shape),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_vec(vec![rows, len], data)?;
        self.push("slice_cols", value, Op::SliceCols { x: x.0, start, len })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if shape.len() != 2 || start + len > shape[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows [{start}, {}) of {:?}", start + len, shape),
            });
        }
        let cols = shape[1];
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_vec(vec![len, cols], data)?;
        self.push("slice_rows", value, Op::SliceRows { x: x.0, start, len })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x.0))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::ShapeMismatch {
                op: "permute",
                detail: format!("perm {:?} for rank {}", perm, rank),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(tx.data(), shape, perm);
        let value = Tensor::from_vec(out_shape, data)?;
        self.push("permute", value, Op::Permute { x: x.0, perm: perm.to_vec() })
    }

    /// Mean binary cross-entropy with logits over a rank-1 batch, in the
    /// stable max(z,0) - z*y + ln(1 + e^-|z|) form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.shape().len() != 1 || tl.numel() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("logits {:?}, {} labels", tl.shape(), labels.len()),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("bce_with_logits"));
        }
        for y in labels {
            let v = y.to_f64();
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidLabel(v));
            }
        }
        let mut acc = T::ZERO;
        for (z, y) in tl.data().iter().zip(labels) {
            acc += z.maximum(T::ZERO) - *z * *y + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(acc * T::from_f64(1.0 / labels.len() as f64));
        self.push(
            "bce_with_logits",
            value,
            Op::BceWithLogits { logits: logits.0, labels: labels.to_vec() },
        )
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; entries
    /// for nodes the loss does not depend on are `None`.
    pub fn backward(&self, loss: Var) -> Result<TapeGrads<T>> {
        let loss_val = self.nodes[loss.0].value.clone();
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss { elements: loss_val.numel() });
        }
        let mut bufs: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        bufs[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = (match self.nodes[idx].op {
                Op::Leaf => None, // keep leaf gradients in place
                _ => bufs[idx].take(),
            }) else {
                continue;
            };
            self.backprop_node(idx, &g, &mut bufs);
        }
        Ok(TapeGrads { bufs, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backprop_node(&self, idx: usize, g: &[T], bufs: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[idx];
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(bufs, *a, g.to_vec());
                accumulate(bufs, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(bufs, *a, g.to_vec());
                accumulate(bufs, *b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(bufs, *a, g.iter().zip(vb).map(|(gv, y)| *gv * *y).collect());
                accumulate(bufs, *b, g.iter().zip(va).map(|(gv, x)| *gv * *x).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(bufs, *a, g.iter().zip(vb).map(|(gv, y)| *gv / *y).collect());
                accumulate(
                    bufs,
                    *b,
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(gv, (x, y))| -(*gv) * *x / (*y * *y))
                        .collect(),
                );
            }
            Op::AddScalar(a) => accumulate(bufs, *a, g.to_vec()),
            Op::MulScalar(a, c) => {
                accumulate(bufs, *a, g.iter().map(|v| *v * *c).collect());
            }
            Op::AddBias { x, b } => {
                accumulate(bufs, *x, g.to_vec());
                let cols = self.nodes[*b].value.numel();
                let mut db = vec![T::ZERO; cols];
                for (i, gv) in g.iter().enumerate() {
                    db[i % cols] += *gv;
                }
                accumulate(bufs, *b, db);
            }
            Op::Matmul { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                accumulate(bufs, *a, kernels::matmul_grad_lhs(g, val(*b), r, k, c));
                accumulate(bufs, *b, kernels::matmul_grad_rhs(g, val(*a), r, k, c));
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, dims);
                accumulate(bufs, *x, dx);
                accumulate(bufs, *w, dw);
                if let Some(b) = b {
                    accumulate(bufs, *b, db);
                }
            }
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv1d_backward(val(*x), val(*w), g, dims);
                accumulate(bufs, *x, dx);
                accumulate(bufs, *w, dw);
                if let Some(b) = b {
                    accumulate(bufs, *b, db);
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                accumulate(
                    bufs,
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(gv, v)| if *v > T::ZERO { *gv } else { T::ZERO })
                        .collect(),
                );
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                accumulate(
                    bufs,
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(gv, v)| *gv * sigmoid_val(*v))
                        .collect(),
                );
            }
            Op::Dropout { x, mask } => {
                accumulate(
                    bufs,
                    *x,
                    g.iter().zip(mask.data()).map(|(gv, m)| *gv * *m).collect(),
                );
            }
            Op::MaskedSoftmax { scores, mask } => {
                let y = node.value.data();
                let t = mask.len();
                let rows = y.len() / t;
                let mut dx = vec![T::ZERO; y.len()];
                for r in 0..rows {
                    let yr = &y[r * t..(r + 1) * t];
                    let gr = &g[r * t..(r + 1) * t];
                    let mut dot = T::ZERO;
                    for i in 0..t {
                        if mask[i] {
                            dot += gr[i] * yr[i];
                        }
                    }
                    let dr = &mut dx[r * t..(r + 1) * t];
                    for i in 0..t {
                        if mask[i] {
                            dr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                }
                accumulate(bufs, *scores, dx);
            }
            Op::MaskedMeanRows { x, mask } => {
                let shape = self.nodes[*x].value.shape();
                let (rows, cols) = (shape[0], shape[1]);
                let valid = mask.iter().filter(|&&m| m).count();
                let inv = T::from_f64(1.0 / valid as f64);
                let mut dx = vec![T::ZERO; rows * cols];
                for r in 0..rows {
                    if mask[r] {
                        for c in 0..cols {
                            dx[r * cols + c] = g[c] * inv;
                        }
                    }
                }
                accumulate(bufs, *x, dx);
            }
            Op::MaskedMaxRows { x, argmax } => {
                let shape = self.nodes[*x].value.shape();
                let cols = shape[1];
                let mut dx = vec![T::ZERO; shape[0] * cols];
                for (c, &r) in argmax.iter().enumerate() {
                    dx[r * cols + c] += g[c];
                }
                accumulate(bufs, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.numel();
                accumulate(bufs, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                let gv = g[0] * T::from_f64(1.0 / n as f64);
                accumulate(bufs, *x, vec![gv; n]);
            }
            Op::GlobalAvgPool2d(x) => {
                let shape = self.nodes[*x].value.shape();
                let plane = shape[2] * shape[3];
                let inv = T::from_f64(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(shape.iter().product());
                for gv in g {
                    let v = *gv * inv;
                    dx.extend(std::iter::repeat_n(v, plane));
                }
                accumulate(bufs, *x, dx);
            }
            Op::Concat1d(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[*p].value.numel();
                    accumulate(bufs, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::StackScalars(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    accumulate(bufs, *p, vec![g[i]]);
                }
            }
            Op::Element1d { x, index } => {
                let n = self.nodes[*x].value.numel();
                let mut dx = vec![T::ZERO; n];
                dx[*index] = g[0];
                accumulate(bufs, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let shape = self.nodes[*x].value.shape();
                let (rows, cols) = (shape[0], shape[1]);
                let mut dx = vec![T::ZERO; rows * cols];
                for r in 0..rows {
                    for j in 0..*len {
                        dx[r * cols + start + j] = g[r * len + j];
                    }
                }
                accumulate(bufs, *x, dx);
            }
            Op::SliceRows { x, start, len } => {
                let shape = self.nodes[*x].value.shape();
                let cols = shape[1];
                let mut dx = vec![T::ZERO; shape[0] * cols];
                dx[start * cols..(start + len) * cols].copy_from_slice(g);
                accumulate(bufs, *x, dx);
            }
            Op::Reshape(x) => accumulate(bufs, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let in_shape = self.nodes[*x].value.shape();
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(bufs, *x, permute_data(g, &out_shape, &inv));
            }
            Op::BceWithLogits { logits, labels } => {
                let z = val(*logits);
                let inv_n = T::from_f64(1.0 / labels.len() as f64);
                let dz = z
                    .iter()
                    .zip(labels)
                    .map(|(zv, y)| g[0] * inv_n * (sigmoid_val(*zv) - *y))
                    .collect();
                accumulate(bufs, *logits, dz);
            }
        }
    }
}

/// Gradients for every node of a tape after `backward`.
pub struct TapeGrads<T: Scalar> {
    bufs: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> TapeGrads<T> {
    /// Gradient w.r.t. a var; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.bufs[v.0] {
            Some(buf) => Tensor::from_vec(self.shapes[v.0].clone(), buf.clone())
                .expect("gradient buffer matches node shape"),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

fn accumulate<T: Scalar>(bufs: &mut [Option<Vec<T>>], idx: usize, contrib: Vec<T>) {
    match &mut bufs[idx] {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
        None => bufs[idx] = Some(contrib),
    }
}

fn masked_softmax_row<T: Scalar>(row: &[T], mask: &[bool], out: &mut [T]) {
    let mut max = T::NEG_INFINITY;
    for (v, &m) in row.iter().zip(mask) {
        if m && *v > max {
            max = *v;
        }
    }
    let mut z = T::ZERO;
    for i in 0..row.len() {
        if mask[i] {
            let e = (row[i] - max).exp();
            out[i] = e;
            z += e;
        } else {
            out[i] = T::ZERO;
        }
    }
    for v in out.iter_mut() {
        *v /= z;
    }
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus_val<T: Scalar>(x: T) -> T {
    x.maximum(T::ZERO) + (-x.abs()).exp().ln_1p()
}

fn permute_data<T: Scalar>(data: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = in_shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let out_strides = strides(&out_shape);
    let n = data.len();
    let mut out = vec![data[0]; n];
    let mut idx = vec![0usize; rank];
    for (flat, item) in data.iter().enumerate() {
        // idx holds the multi-index into the input
        let mut out_flat = 0;
        for (j, &p) in perm.iter().enumerate() {
            out_flat += idx[p] * out_strides[j];
        }
        out[out_flat] = *item;
        let _ = flat;
        // increment multi-index
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(t(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0f32; 6]);
    }

    #[test]
    fn quadratic_gradient_is_w() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(t(vec![2], vec![1.0, -2.0]));
        let sq = tape.mul(w, w).unwrap();
        let half = tape.mul_scalar(sq, 0.5).unwrap();
        let loss = tape.sum(half).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(w),
            Err(Error::NonScalarLoss { elements: 2 })
        ));
    }

    #[test]
    fn nan_forward_names_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(vec![1], vec![1.0]));
        let b = tape.leaf(t(vec![1], vec![0.0]));
        match tape.div(a, b) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "div"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn masked_softmax_matches_direct_computation() {
        let mut tape = Tape::<f32>::new();
        let s = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]));
        let y = tape.masked_softmax(s, &[true, true, true]).unwrap();
        let got = tape.value(y).data().to_vec();
        // direct exp/normalize in 64-bit
        let expect = [0.090031f32, 0.244728, 0.665241];
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn masked_softmax_excludes_masked_positions_exactly() {
        let mut tape = Tape::<f32>::new();
        let s = tape.leaf(t(vec![3], vec![2.0, 2.0, 9.0]));
        let y = tape.masked_softmax(s, &[true, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        let mut tape = Tape::<f32>::new();
        let s = tape.leaf(t(vec![2], vec![0.0, 0.0]));
        assert!(matches!(tape.masked_softmax(s, &[false, false]), Err(Error::AllMasked)));
    }

    #[test]
    fn masked_softmax_gradient_is_zero_at_masked_positions() {
        let mut tape = Tape::<f32>::new();
        let s = tape.leaf(t(vec![4], vec![0.3, -1.0, 2.0, 0.7]));
        let mask = [true, false, true, false];
        let y = tape.masked_softmax(s, &mask).unwrap();
        let w = tape.leaf(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ds = grads.wrt(s);
        assert_eq!(ds.data()[1], 0.0);
        assert_eq!(ds.data()[3], 0.0);
        assert!(ds.data()[0] != 0.0 && ds.data()[2] != 0.0);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(vec![1000], vec![1.0; 1000]));
        let y = tape.dropout(x, 0.5, 42).unwrap();
        let vals = tape.value(y).data();
        let kept = vals.iter().filter(|v| **v != 0.0).count();
        assert!(vals.iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!((400..600).contains(&kept), "kept {kept} of 1000 at p=0.5");
        // Same seed reproduces the same mask.
        let mut tape2 = Tape::<f32>::new();
        let x2 = tape2.leaf(t(vec![1000], vec![1.0; 1000]));
        let y2 = tape2.dropout(x2, 0.5, 42).unwrap();
        assert_eq!(tape.value(y).data(), tape2.value(y2).data());
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(vec![2, 3, 4], (0..24).map(|i| i as f32).collect()));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_known_value() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn bce_with_logits_known_values() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(t(vec![1], vec![0.0]));
        let loss = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!((tape.value(loss).item().unwrap() - std::f32::consts::LN_2).abs() < 1e-6);

        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(t(vec![1], vec![40.0]));
        let loss = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-6);

        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(t(vec![1], vec![-2.0]));
        let loss = tape.bce_with_logits(z, &[0.0]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(t(vec![1], vec![0.0]));
        assert!(matches!(tape.bce_with_logits(z, &[0.5]), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn masked_max_ties_break_low() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(vec![3, 1], vec![5.0, 5.0, 1.0]));
        let y = tape.masked_max_rows(x, &[true, true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 0.0, 0.0]);
    }
}
