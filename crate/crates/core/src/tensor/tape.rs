use super::kernels::{self, axis_split, broadcast_shape, gemm, transpose_last2, Bcast, MatRef};
use super::Tensor;
use crate::error::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2(Var),
    Reshape(Var),
    Concat { a: Var, b: Var, wa: usize, wb: usize },
    Narrow { a: Var, start: usize, width: usize },
    IndexSelect { a: Var, indices: Vec<usize> },
    Add { a: Var, b: Var, ma: Bcast, mb: Bcast },
    Sub { a: Var, b: Var, ma: Bcast, mb: Bcast },
    Mul { a: Var, b: Var, ma: Bcast, mb: Bcast },
    Div { a: Var, b: Var, ma: Bcast, mb: Bcast },
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LogSoftmax(Var),
    RowNorm(Var),
    NormalizeRows { a: Var, eps: f64, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    Variance(Var),
    VarianceAxis { a: Var, axis: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::TransposeLast2(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::RowNorm(_) => "row_norm",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Variance(_) => "variance",
            Op::VarianceAxis { .. } => "variance_axis",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order and never removed; `backward`
/// walks them from last to first.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf. Its `requires_grad` flag decides whether it collects a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var, TensorError> {
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        if data.iter().fold(false, |bad, v| bad | (v.to_bits() & EXP == EXP)) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let mut value = Tensor::from_parts(shape, data);
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., k] · b[k, n]`, treating the leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        self.push(Op::MatMul { a, b, m, k, n }, shape, out, &[a, b])
    }

    /// Batched `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shape("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push(Op::BatchMatMul { a, b, batch, m, k, n }, vec![batch, m, n], out, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("transpose", format!("rank {} < 2", s.len())));
        }
        let out = transpose_last2(self.value(a).data(), &s);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        self.push(Op::TransposeLast2(a), shape, out, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if shape.iter().product::<usize>() != s.iter().product::<usize>() || shape.contains(&0) {
            return Err(TensorError::shape("reshape", s, shape));
        }
        let data = self.value(a).data().to_vec();
        self.push(Op::Reshape(a), shape.to_vec(), data, &[a])
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::shape("concat", &sa, &sb));
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).len() / wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        self.push(Op::Concat { a, b, wa, wb }, shape, out, &[a, b])
    }

    /// Concatenates several tensors along the last axis.
    pub fn concat_all(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &p| self.concat(acc, p))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        let width = *s.last().unwrap();
        if len == 0 || start + len > width {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} outside width {width}", start + len),
            ));
        }
        let rows = self.value(a).len() / width;
        let da = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&da[r * width + start..r * width + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push(Op::Narrow { a, start, width }, shape, out, &[a])
    }

    /// Gathers slices along the first axis.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if indices.is_empty() {
            return Err(TensorError::invalid("index_select", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::invalid(
                "index_select",
                format!("index {bad} out of range for axis of size {}", s[0]),
            ));
        }
        let block = self.value(a).len() / s[0];
        let da = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            out.extend_from_slice(&da[i * block..(i + 1) * block]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        self.push(
            Op::IndexSelect {
                a,
                indices: indices.to_vec(),
            },
            shape,
            out,
            &[a],
        )
    }

    // ---- broadcasting elementwise --------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, Bcast, Bcast), TensorError> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let ma = Bcast::new(&shape, self.shape(a));
        let mb = Bcast::new(&shape, self.shape(b));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let out = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => ma.indices(n).zip(mb.indices(n)).map(|(i, j)| f(da[i], db[j])).collect(),
        };
        Ok((shape, out, ma, mb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out, ma, mb) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add { a, b, ma, mb }, shape, out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out, ma, mb) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub { a, b, ma, mb }, shape, out, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out, ma, mb) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul { a, b, ma, mb }, shape, out, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(b).data().contains(&0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        let (shape, out, ma, mb) = self.binary("div", a, b, |x, y| x / y)?;
        self.push(Op::Div { a, b, ma, mb }, shape, out, &[a, b])
    }

    // ---- unary ---------------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let out = v.data().iter().map(|&x| f(x)).collect();
        self.push(op, shape, out, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary(a, Op::MulScalar(a, s), |x| x * s)
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        if s == 0.0 {
            return Err(TensorError::DivisionByZero { op: "div_scalar" });
        }
        self.mul_scalar(a, 1.0 / s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul_scalar(a, -1.0)
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Result<Var, TensorError> {
        let n = self.neg(a)?;
        self.add_scalar(n, s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Softplus(a), kernels::softplus)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if lo > hi {
            return Err(TensorError::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary(a, Op::Clamp { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    // ---- row-wise over the last axis ------------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let w = v.last_dim();
        let shape = v.shape().to_vec();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(Op::Softmax(a), shape, out, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let w = v.last_dim();
        let shape = v.shape().to_vec();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(Op::LogSoftmax(a), shape, out, &[a])
    }

    /// L2 norm of each row; output keeps the last axis with size 1.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let w = v.last_dim();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let out = v
            .data()
            .chunks(w)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Op::RowNorm(a), shape, out, &[a])
    }

    /// Divides each row by its L2 norm; rows with norm below `eps` become zero
    /// and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let w = v.last_dim();
        let shape = v.shape().to_vec();
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < eps {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= n);
            }
            norms.push(n);
        }
        self.push(Op::NormalizeRows { a, eps, norms }, shape, out, &[a])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s], &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), vec![1], vec![m], &[a])
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let n = v.len() as f64;
        let m = v.data().iter().sum::<f64>() / n;
        let var = v.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        self.push(Op::Variance(a), vec![1], vec![var], &[a])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, name: &'static str) -> Result<(Vec<usize>, usize, usize, usize), TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::invalid(name, format!("axis {axis} out of range for rank {}", s.len())));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let mut shape = s;
        shape[axis] = 1;
        Ok((shape, outer, len, inner))
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (shape, outer, len, inner) = self.reduce_axis(a, axis, "sum_axis")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += x;
                }
            }
        }
        self.push(Op::SumAxis { a, axis }, shape, out, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (shape, outer, len, inner) = self.reduce_axis(a, axis, "mean_axis")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= len as f64);
        self.push(Op::MeanAxis { a, axis }, shape, out, &[a])
    }

    /// Population variance over one axis, keeping it with size 1.
    pub fn variance_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (shape, outer, len, inner) = self.reduce_axis(a, axis, "variance_axis")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| d[(o * len + l) * inner + i];
                let m = (0..len).map(at).sum::<f64>() / len as f64;
                out[o * inner + i] = (0..len).map(|l| (at(l) - m).powi(2)).sum::<f64>() / len as f64;
            }
        }
        self.push(Op::VarianceAxis { a, axis }, shape, out, &[a])
    }

    // ---- backward ------------------------------------------------------

    /// Back-propagates from a single-element output, accumulating into leaf
    /// gradients. Calling it twice without [`Tape::zero_grad`] doubles them.
    pub fn backward(&mut self, out: Var) -> Result<(), TensorError> {
        if self.value(out).len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", self.shape(out)),
            ));
        }
        self.backward_with(out, vec![1.0])
    }

    /// Back-propagates an explicit upstream gradient of `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<f64>) -> Result<(), TensorError> {
        if seed.len() != self.value(out).len() {
            return Err(TensorError::shape("backward", &[seed.len()], self.shape(out)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) || !node.value.requires_grad {
                continue;
            }
            let n = node.value.len();
            let acc = node.value.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = g {
                acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x);
            }
        }
        // Leaves that were never reached still get an explicit zero gradient.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].value.requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let n = self.nodes[$v.0].value.len();
                grads[$v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let gb = MatRef::new(val(b), k, n).t();
                    gemm(MatRef::new(g, m, n), gb, slot!(a), 1.0);
                }
                if wants(b) {
                    let at = MatRef::new(val(a), m, k).t();
                    gemm(at, MatRef::new(g, m, n), slot!(b), 1.0);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                if wants(a) {
                    let db = val(b);
                    let ga = slot!(a);
                    for t in 0..batch {
                        gemm(
                            MatRef::new(&g[t * m * n..(t + 1) * m * n], m, n),
                            MatRef::new(&db[t * k * n..(t + 1) * k * n], k, n).t(),
                            &mut ga[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if wants(b) {
                    let da = val(a);
                    let gb = slot!(b);
                    for t in 0..batch {
                        gemm(
                            MatRef::new(&da[t * m * k..(t + 1) * m * k], m, k).t(),
                            MatRef::new(&g[t * m * n..(t + 1) * m * n], m, n),
                            &mut gb[t * k * n..(t + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            &Op::TransposeLast2(a) => {
                let gt = transpose_last2(g, node.value.shape());
                add_into(slot!(a), &gt);
            }
            &Op::Reshape(a) => add_into(slot!(a), g),
            &Op::Concat { a, b, wa, wb } => {
                let rows = g.len() / (wa + wb);
                if wants(a) {
                    let ga = slot!(a);
                    for r in 0..rows {
                        add_into(&mut ga[r * wa..(r + 1) * wa], &g[r * (wa + wb)..r * (wa + wb) + wa]);
                    }
                }
                if wants(b) {
                    let gb = slot!(b);
                    for r in 0..rows {
                        add_into(&mut gb[r * wb..(r + 1) * wb], &g[r * (wa + wb) + wa..(r + 1) * (wa + wb)]);
                    }
                }
            }
            &Op::Narrow { a, start, width } => {
                let len = node.value.last_dim();
                let ga = slot!(a);
                for (r, src) in g.chunks(len).enumerate() {
                    add_into(&mut ga[r * width + start..r * width + start + len], src);
                }
            }
            Op::IndexSelect { a, indices } => {
                let block = g.len() / indices.len();
                let ga = slot!(*a);
                for (j, &src) in indices.iter().enumerate() {
                    add_into(&mut ga[src * block..(src + 1) * block], &g[j * block..(j + 1) * block]);
                }
            }
            Op::Add { a, b, ma, mb } => {
                if wants(*a) {
                    scatter(slot!(*a), ma, g.iter().copied());
                }
                if wants(*b) {
                    scatter(slot!(*b), mb, g.iter().copied());
                }
            }
            Op::Sub { a, b, ma, mb } => {
                if wants(*a) {
                    scatter(slot!(*a), ma, g.iter().copied());
                }
                if wants(*b) {
                    scatter(slot!(*b), mb, g.iter().map(|x| -x));
                }
            }
            Op::Mul { a, b, ma, mb } => {
                let (da, db) = (val(*a), val(*b));
                if wants(*a) {
                    let it = g.iter().zip(mb.indices(g.len())).map(|(x, j)| x * db[j]);
                    scatter(slot!(*a), ma, it);
                }
                if wants(*b) {
                    let it = g.iter().zip(ma.indices(g.len())).map(|(x, i)| x * da[i]);
                    scatter(slot!(*b), mb, it);
                }
            }
            Op::Div { a, b, ma, mb } => {
                let (da, db) = (val(*a), val(*b));
                if wants(*a) {
                    let it = g.iter().zip(mb.indices(g.len())).map(|(x, j)| x / db[j]);
                    scatter(slot!(*a), ma, it);
                }
                if wants(*b) {
                    let it = g.iter().zip(ma.indices(g.len()).zip(mb.indices(g.len()))).map(|(x, (i, j))| {
                        let y = db[j];
                        -x * da[i] / (y * y)
                    });
                    scatter(slot!(*b), mb, it);
                }
            }
            &Op::AddScalar(a) => add_into(slot!(a), g),
            &Op::MulScalar(a, s) => zip_into(slot!(a), g, |x| x * s),
            &Op::Exp(a) => zip2_into(slot!(a), g, out, |x, y| x * y),
            &Op::Log(a) => zip2_into(slot!(a), g, val(a), |x, y| x / y),
            &Op::Sigmoid(a) => zip2_into(slot!(a), g, out, |x, y| x * y * (1.0 - y)),
            &Op::Tanh(a) => zip2_into(slot!(a), g, out, |x, y| x * (1.0 - y * y)),
            &Op::Relu(a) => zip2_into(slot!(a), g, val(a), |x, y| if y > 0.0 { x } else { 0.0 }),
            &Op::Softplus(a) => zip2_into(slot!(a), g, val(a), |x, y| x * kernels::sigmoid(y)),
            &Op::Sqrt(a) => zip2_into(slot!(a), g, out, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 }),
            &Op::Square(a) => zip2_into(slot!(a), g, val(a), |x, y| 2.0 * x * y),
            &Op::Clamp { a, lo, hi } => {
                zip2_into(slot!(a), g, val(a), |x, y| if (lo..=hi).contains(&y) { x } else { 0.0 })
            }
            &Op::Softmax(a) => {
                let w = node.value.last_dim();
                let ga = slot!(a);
                for ((gr, yr), dst) in g.chunks(w).zip(out.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, x), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += y * (x - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let w = node.value.last_dim();
                let ga = slot!(a);
                for ((gr, yr), dst) in g.chunks(w).zip(out.chunks(w)).zip(ga.chunks_mut(w)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, x), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += x - y.exp() * total;
                    }
                }
            }
            &Op::RowNorm(a) => {
                let da = val(a);
                let w = self.nodes[a.0].value.last_dim();
                let ga = slot!(a);
                for (r, (&gr, &n)) in g.iter().zip(out).enumerate() {
                    if n > 0.0 {
                        for c in 0..w {
                            ga[r * w + c] += gr * da[r * w + c] / n;
                        }
                    }
                }
            }
            Op::NormalizeRows { a, eps, norms } => {
                let w = node.value.last_dim();
                let ga = slot!(*a);
                for (r, &n) in norms.iter().enumerate() {
                    if n < *eps {
                        continue;
                    }
                    let u = &out[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: f64 = u.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for c in 0..w {
                        ga[r * w + c] += (gr[c] - u[c] * dot) / n;
                    }
                }
            }
            &Op::Sum(a) => {
                let s = g[0];
                slot!(a).iter_mut().for_each(|x| *x += s);
            }
            &Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let s = g[0] / n;
                slot!(a).iter_mut().for_each(|x| *x += s);
            }
            &Op::Variance(a) => {
                let da = val(a);
                let n = da.len() as f64;
                let m = da.iter().sum::<f64>() / n;
                let s = g[0];
                zip_into_idx(slot!(a), |k| s * 2.0 * (da[k] - m) / n);
            }
            &Op::SumAxis { a, axis } | &Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = axis_split(self.nodes[a.0].value.shape(), axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / len as f64 } else { 1.0 };
                let ga = slot!(a);
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
            &Op::VarianceAxis { a, axis } => {
                let da = val(a);
                let (outer, len, inner) = axis_split(self.nodes[a.0].value.shape(), axis);
                let ga = slot!(a);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let m = (0..len).map(|l| da[idx(l)]).sum::<f64>() / len as f64;
                        let s = g[o * inner + i] * 2.0 / len as f64;
                        for l in 0..len {
                            ga[idx(l)] += s * (da[idx(l)] - m);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_into(dst: &mut [f64], g: &[f64], f: impl Fn(f64) -> f64) {
    dst.iter_mut().zip(g).for_each(|(d, &x)| *d += f(x));
}

fn zip2_into(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    dst.iter_mut()
        .zip(g.iter().zip(other))
        .for_each(|(d, (&x, &y))| *d += f(x, y));
}

fn zip_into_idx(dst: &mut [f64], f: impl Fn(usize) -> f64) {
    dst.iter_mut().enumerate().for_each(|(k, d)| *d += f(k));
}

/// Sums output-shaped gradient values back onto a broadcast operand.
fn scatter(dst: &mut [f64], map: &Bcast, src: impl ExactSizeIterator<Item = f64>) {
    match map {
        Bcast::Same => dst.iter_mut().zip(src).for_each(|(d, x)| *d += x),
        _ => {
            let n = src.len();
            for (i, x) in map.indices(n).zip(src) {
                dst[i] += x;
            }
        }
    }
}
