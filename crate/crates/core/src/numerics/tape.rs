//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it once in reverse
//! and consumes the tape.

use super::kernels;
use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation kinds exposed through [`Tape::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Multiply,
    Tanh,
    Relu,
    SoftmaxRows,
    Log,
    GatherRows,
    LayerNorm,
    Mean,
    Sum,
    SquaredError,
    CrossEntropyFromLogits,
}

#[derive(Debug)]
enum Op {
    Leaf {
        param_offset: Option<usize>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    SquaredError(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`] for every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(Var, Option<usize>, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves
            .iter()
            .find(|(v, _, _)| *v == var)
            .map(|(_, _, g)| g)
    }

    /// Adds parameter-leaf gradients into a flat buffer laid out like a
    /// [`ParameterStore`].
    pub fn accumulate_into(&self, flat: &mut [f64]) {
        for (_, offset, g) in &self.leaves {
            if let Some(off) = offset {
                for (dst, src) in flat[*off..*off + g.len()].iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor, x: Var, op: Op) -> Var {
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    fn binary(&mut self, value: Tensor, a: Var, b: Var, op: Op) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param_offset: None }, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param_offset: None }, false)
    }

    /// Records a parameter of `store` as a leaf. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let spec = store.spec(id);
        let value = store.tensor(id);
        let trainable = store.is_trainable();
        self.push(
            value,
            Op::Leaf {
                param_offset: trainable.then_some(spec.offset),
            },
            trainable,
        )
    }

    /// Dispatches one of the named primitive kinds. `GatherRows` takes its
    /// indices from `indices`; `CrossEntropyFromLogits` takes targets from it.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], indices: &[usize]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Multiply => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Tanh => {
                arity(1)?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::SoftmaxRows => {
                arity(1)?;
                Ok(self.softmax_rows(inputs[0]))
            }
            OpKind::Log => {
                arity(1)?;
                Ok(self.log(inputs[0]))
            }
            OpKind::GatherRows => {
                arity(1)?;
                self.gather_rows(inputs[0], indices)
            }
            OpKind::LayerNorm => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::SquaredError => {
                arity(2)?;
                self.squared_error(inputs[0], inputs[1])
            }
            OpKind::CrossEntropyFromLogits => {
                arity(1)?;
                self.cross_entropy(inputs[0], indices)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(va.rows(), va.cols(), data);
        Ok(self.binary(t, a, b, Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", va.shape(), vr.shape()),
            ));
        }
        let n = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vr.data()[i % n])
            .collect();
        let t = Tensor::from_parts(va.rows(), n, data);
        Ok(self.binary(t, a, row, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_parts(va.rows(), va.cols(), data);
        Ok(self.binary(t, a, b, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("multiply", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(va.rows(), va.cols(), data);
        Ok(self.binary(t, a, b, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let t = Tensor::from_parts(vx.rows(), vx.cols(), vx.data().iter().map(|v| v * c).collect());
        self.unary(t, x, Op::Scale(x, c))
    }

    /// Multiplies every entry of `x` by the `1 × 1` value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let Some(c) = self.value(s).item() else {
            return Err(Error::shape("scale_by", format!("scale {:?}", self.value(s).shape())));
        };
        let vx = self.value(x);
        let t = Tensor::from_parts(vx.rows(), vx.cols(), vx.data().iter().map(|v| v * c).collect());
        Ok(self.binary(t, x, s, Op::ScaleBy(x, s)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let t = Tensor::from_parts(vx.rows(), vx.cols(), vx.data().iter().map(|v| v + c).collect());
        self.unary(t, x, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let t = Tensor::from_parts(m, n, out);
        Ok(self.binary(t, a, b, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        let mut out = vec![0.0; m * n];
        kernels::matmul_t_acc(va.data(), vb.data(), &mut out, m, k, n);
        let t = Tensor::from_parts(m, n, out);
        Ok(self.binary(t, a, b, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = vx.data()[i * n + j];
            }
        }
        let t = Tensor::from_parts(n, m, out);
        self.unary(t, x, Op::Transpose(x))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let vx = self.value(x);
        let t = Tensor::from_parts(vx.rows(), vx.cols(), vx.data().iter().map(|&v| f(v)).collect());
        self.unary(t, x, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, f64::sqrt, Op::Sqrt(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vec![0.0; vx.len()];
        for r in 0..vx.rows() {
            kernels::softmax_row(vx.row_slice(r), &mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::from_parts(vx.rows(), n, out);
        self.unary(t, x, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vec![0.0; vx.len()];
        for r in 0..vx.rows() {
            kernels::log_softmax_row(vx.row_slice(r), &mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::from_parts(vx.rows(), n, out);
        self.unary(t, x, Op::LogSoftmaxRows(x))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let n = vt.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= vt.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {i} out of range for table {:?}", vt.shape()),
                ));
            }
            out.extend_from_slice(vt.row_slice(i));
        }
        let t = Tensor::from_parts(idx.len(), n, out);
        Ok(self.unary(t, table, Op::GatherRows(table, idx.to_vec())))
    }

    /// Picks `x[r, idx[r]]` for every row, giving an `m × 1` column.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if idx.len() != vx.rows() || idx.iter().any(|&i| i >= vx.cols()) {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} indices for {:?}", idx.len(), vx.shape()),
            ));
        }
        let out = idx.iter().enumerate().map(|(r, &c)| vx.get(r, c)).collect();
        let t = Tensor::from_parts(idx.len(), 1, out);
        Ok(self.unary(t, x, Op::PickPerRow(x, idx.to_vec())))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols();
        if vg.shape() != [1, n] || vb.shape() != [1, n] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let mut normalized = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let span = r * n..(r + 1) * n;
            inv_std.push(kernels::layer_norm_row(
                vx.row_slice(r),
                vg.data(),
                vb.data(),
                &mut normalized[span.clone()],
                &mut out[span],
            ));
        }
        let t = Tensor::from_parts(vx.rows(), n, out);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(Tensor::scalar(s), x, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().sum::<f64>() / vx.len().max(1) as f64;
        self.unary(Tensor::scalar(s), x, Op::Mean(x))
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = (0..vx.rows()).map(|r| vx.row_slice(r).iter().sum()).collect();
        let t = Tensor::from_parts(vx.rows(), 1, out);
        self.unary(t, x, Op::SumCols(x))
    }

    /// Column means: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() == 0 {
            return Err(Error::shape("mean_rows", "empty matrix"));
        }
        let (m, n) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            add_into(&mut out, vx.row_slice(r));
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let t = Tensor::from_parts(1, n, out);
        Ok(self.unary(t, x, Op::MeanRows(x)))
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("squared_error", va, vb)?;
        let s = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.binary(Tensor::scalar(s), a, b, Op::SquaredError(a, b)))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let n = vl.cols();
        if targets.len() != vl.rows() || targets.iter().any(|&t| t >= n) {
            return Err(Error::shape(
                "cross_entropy_from_logits",
                format!("{} targets for logits {:?}", targets.len(), vl.shape()),
            ));
        }
        let mut probs = vec![0.0; vl.len()];
        let mut logp = vec![0.0; n];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            kernels::log_softmax_row(vl.row_slice(r), &mut logp);
            loss -= logp[t];
            for (p, lp) in probs[r * n..(r + 1) * n].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        loss /= targets.len().max(1) as f64;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.unary(Tensor::scalar(loss), logits, op))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        let mut needs = false;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} columns vs {:?}", n, vp.shape()),
                ));
            }
            rows += vp.rows();
            out.extend_from_slice(vp.data());
            needs |= self.needs(p);
        }
        Ok(self.push(Tensor::from_parts(rows, n, out), Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, vx.shape()),
            ));
        }
        let n = vx.cols();
        let t = Tensor::from_parts(len, n, vx.data()[start * n..(start + len) * n].to_vec());
        Ok(self.unary(t, x, Op::SliceRows(x, start)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("minimum", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x.min(*y)).collect();
        let t = Tensor::from_parts(va.rows(), va.cols(), data);
        Ok(self.binary(t, a, b, Op::Minimum(a, b)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Causal multi-head scaled dot-product attention over `n × d` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() || heads == 0 || vq.cols() % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}",
                    vq.shape(),
                    vk.shape(),
                    vv.shape()
                ),
            ));
        }
        let (n, d) = (vq.rows(), vq.cols());
        let hd = d / heads;
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                kernels::attend_row(
                    vq.row_slice(i),
                    vk.data(),
                    vv.data(),
                    d,
                    h * hd,
                    hd,
                    i,
                    p,
                    &mut out[i * d..(i + 1) * d],
                );
            }
        }
        let t = Tensor::from_parts(n, d, out);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vec![0.0; vx.len()];
        let mut norms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row_slice(r);
            let norm = kernels::dot(row, row).sqrt().max(1e-12);
            norms.push(norm);
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let t = Tensor::from_parts(vx.rows(), n, out);
        self.unary(t, x, Op::L2NormalizeRows { x, norms })
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        add_into(gb, &g);
                    }
                }
                Op::AddRow(a, row) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        add_into(ga, &g);
                    }
                    let n = y.cols();
                    if let Some(gr) = acc(&mut grads, &nodes, *row) {
                        for (i, gv) in g.iter().enumerate() {
                            gr[i % n] += gv;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for (d, s) in gb.iter_mut().zip(&g) {
                            *d -= s;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * vb[i];
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for i in 0..g.len() {
                            gb[i] += g[i] * va[i];
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (d, s) in gx.iter_mut().zip(&g) {
                            *d += c * s;
                        }
                    }
                }
                Op::ScaleBy(x, s) => {
                    let c = nodes[s.0].value.data()[0];
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (d, gv) in gx.iter_mut().zip(&g) {
                            *d += c * gv;
                        }
                    }
                    if let Some(gs) = acc(&mut grads, &nodes, *s) {
                        gs[0] += kernels::dot(&g, vx);
                    }
                }
                Op::AddScalar(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        add_into(gx, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        kernels::matmul_t_acc(&g, vb.data(), ga, m, n, k);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        kernels::t_matmul_acc(va.data(), &g, gb, m, k, n);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        kernels::matmul_acc(&g, vb.data(), ga, m, n, k);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        kernels::t_matmul_acc(&g, va.data(), gb, m, n, k);
                    }
                }
                Op::Transpose(x) => {
                    let (m, n) = (y.rows(), y.cols());
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for i in 0..m {
                            for j in 0..n {
                                gx[j * m + i] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (i, yv) in y.data().iter().enumerate() {
                            gx[i] += g[i] * (1.0 - yv * yv);
                        }
                    }
                }
                Op::Relu(x) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for i in 0..g.len() {
                            if vx[i] > 0.0 {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::Exp(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (i, yv) in y.data().iter().enumerate() {
                            gx[i] += g[i] * yv;
                        }
                    }
                }
                Op::Log(x) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for i in 0..g.len() {
                            gx[i] += g[i] / vx[i];
                        }
                    }
                }
                Op::Sqrt(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (i, yv) in y.data().iter().enumerate() {
                            gx[i] += g[i] / (2.0 * yv);
                        }
                    }
                }
                Op::Softplus(x) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for i in 0..g.len() {
                            gx[i] += g[i] * sigmoid(vx[i]);
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let n = y.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for r in 0..y.rows() {
                            let yr = y.row_slice(r);
                            let gr = &g[r * n..(r + 1) * n];
                            let inner = kernels::dot(gr, yr);
                            for j in 0..n {
                                gx[r * n + j] += yr[j] * (gr[j] - inner);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    let n = y.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for r in 0..y.rows() {
                            let yr = y.row_slice(r);
                            let gr = &g[r * n..(r + 1) * n];
                            let total: f64 = gr.iter().sum();
                            for j in 0..n {
                                gx[r * n + j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    }
                }
                Op::GatherRows(table, idx) => {
                    let n = y.cols();
                    if let Some(gt) = acc(&mut grads, &nodes, *table) {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut gt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    }
                }
                Op::PickPerRow(x, idx) => {
                    let n = nodes[x.0].value.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (r, &c) in idx.iter().enumerate() {
                            gx[r * n + c] += g[r];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let n = y.cols();
                    let rows = y.rows();
                    if let Some(gb) = acc(&mut grads, &nodes, *bias) {
                        for r in 0..rows {
                            add_into(gb, &g[r * n..(r + 1) * n]);
                        }
                    }
                    if let Some(gg) = acc(&mut grads, &nodes, *gain) {
                        for r in 0..rows {
                            for j in 0..n {
                                gg[j] += g[r * n + j] * normalized[r * n + j];
                            }
                        }
                    }
                    let gain_v = nodes[gain.0].value.data();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let nf = n as f64;
                        for r in 0..rows {
                            let mut sum_gn = 0.0;
                            let mut sum_gn_n = 0.0;
                            for j in 0..n {
                                let gn = g[r * n + j] * gain_v[j];
                                sum_gn += gn;
                                sum_gn_n += gn * normalized[r * n + j];
                            }
                            for j in 0..n {
                                let gn = g[r * n + j] * gain_v[j];
                                gx[r * n + j] += inv_std[r] / nf
                                    * (nf * gn - sum_gn - normalized[r * n + j] * sum_gn_n);
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        gx.iter_mut().for_each(|v| *v += g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let c = g[0] / gx.len().max(1) as f64;
                        gx.iter_mut().for_each(|v| *v += c);
                    }
                }
                Op::SumCols(x) => {
                    let n = nodes[x.0].value.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (i, v) in gx.iter_mut().enumerate() {
                            *v += g[i / n];
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let m = nodes[x.0].value.rows() as f64;
                    let n = y.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (i, v) in gx.iter_mut().enumerate() {
                            *v += g[i % n] / m;
                        }
                    }
                }
                Op::SquaredError(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| 2.0 * (x - y) * g[0]).collect();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        add_into(ga, &diff);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for (d, s) in gb.iter_mut().zip(&diff) {
                            *d -= s;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = nodes[logits.0].value.cols();
                    let c = g[0] / targets.len().max(1) as f64;
                    if let Some(gl) = acc(&mut grads, &nodes, *logits) {
                        for (r, &t) in targets.iter().enumerate() {
                            for j in 0..n {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                gl[r * n + j] += c * (probs[r * n + j] - onehot);
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        if let Some(gp) = acc(&mut grads, &nodes, *p) {
                            add_into(gp, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SliceRows(x, start) => {
                    let n = y.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        add_into(&mut gx[start * n..start * n + g.len()], &g);
                    }
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for i in 0..g.len() {
                            if va[i] <= vb[i] {
                                ga[i] += g[i];
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for i in 0..g.len() {
                            if va[i] > vb[i] {
                                gb[i] += g[i];
                            }
                        }
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for i in 0..g.len() {
                            if vx[i] >= *lo && vx[i] <= *hi {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (vq, vk, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let (n, d) = (vq.rows(), vq.cols());
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut gq = vec![0.0; n * d];
                    let mut gk = vec![0.0; n * d];
                    let mut gv = vec![0.0; n * d];
                    let mut dp = vec![0.0; n];
                    for h in 0..*heads {
                        let off = h * hd;
                        for i in 0..n {
                            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                            let go = &g[i * d + off..i * d + off + hd];
                            // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                            for j in 0..=i {
                                let vj = &vv.data()[j * d + off..j * d + off + hd];
                                dp[j] = kernels::dot(go, vj);
                                let gvj = &mut gv[j * d + off..j * d + off + hd];
                                for (dst, &src) in gvj.iter_mut().zip(go) {
                                    *dst += p[j] * src;
                                }
                            }
                            let inner: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                            let qi = &vq.data()[i * d + off..i * d + off + hd];
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &vk.data()[j * d + off..j * d + off + hd];
                                for t in 0..hd {
                                    gq[i * d + off + t] += ds * kj[t];
                                    gk[j * d + off + t] += ds * qi[t];
                                }
                            }
                        }
                    }
                    if let Some(dst) = acc(&mut grads, &nodes, *q) {
                        add_into(dst, &gq);
                    }
                    if let Some(dst) = acc(&mut grads, &nodes, *k) {
                        add_into(dst, &gk);
                    }
                    if let Some(dst) = acc(&mut grads, &nodes, *v) {
                        add_into(dst, &gv);
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    let n = y.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for r in 0..y.rows() {
                            let yr = y.row_slice(r);
                            let gr = &g[r * n..(r + 1) * n];
                            let inner = kernels::dot(gr, yr);
                            for j in 0..n {
                                gx[r * n + j] += (gr[j] - yr[j] * inner) / norms[r];
                            }
                        }
                    }
                }
            }
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Leaf { param_offset } if node.needs_grad => {
                    let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some((
                        Var(i),
                        param_offset,
                        Tensor::from_parts(node.value.rows(), node.value.cols(), g),
                    ))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec())
    }

    #[test]
    fn add_is_elementwise() {
        let mut t = Tape::new();
        let a = t.constant(row(&[1.0, 2.0]));
        let b = t.constant(row(&[3.0, 4.0]));
        let c = t.forward_op(OpKind::Add, &[a, b], &[]).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(row(&[0.0, 0.0]));
        let s = t.softmax_rows(a);
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_by_zeros_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::filled(3, 4, 1.0));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), [2, 4]);
        assert!(t.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t.constant(Tensor::zeros(1, 2));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, -2.0, 3.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_error_gradient_is_two_x() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[2.0]));
        let z = t.constant(row(&[0.0]));
        let l = t.squared_error(x, z).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_is_zero_only_at_certainty() {
        let mut t = Tape::new();
        let l = t.constant(row(&[0.0, 800.0, 0.0]));
        let ce = t.cross_entropy(l, &[1]).unwrap();
        assert_eq!(t.value(ce).item().unwrap(), 0.0);
        let l2 = t.constant(row(&[0.0, 2.0, 0.0]));
        let ce2 = t.cross_entropy(l2, &[1]).unwrap();
        assert!(t.value(ce2).item().unwrap() > 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
    }
}
