//! Reverse-mode tape. Ops append nodes holding the forward value, the recipe,
//! and whether any ancestor requires gradients; `backward` replays the record
//! in reverse. Node indices are topologically ordered by construction (an op
//! can only reference vars that already exist), so a single reverse sweep
//! suffices and repeated sweeps are bit-identical.
//!
//! Every op validates shapes up front and scans its output for non-finite
//! values; a NaN/Inf is surfaced as [`SfcError::NumericFault`] naming the op,
//! never propagated.

use std::collections::BTreeMap;

use super::kernels::{self, Conv1dDims, Conv2dDims, ScanDims};
use super::{numel, Parameter, Scalar, Tensor};
use crate::dsp::stft;
use crate::error::{Result, SfcError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Input,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Silu(Var),
    SoftmaxLast(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    GatherLast { x: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    StackLast { xs: Vec<Var> },
    ReverseLast(Var),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Deconv2d { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, groups: usize, pad_left: usize, pad_right: usize },
    AddBias0 { x: Var, b: Var },
    MulBcast0 { x: Var, s: Var },
    MulBcastLast { x: Var, s: Var },
    SumAll(Var),
    SumLast(Var),
    RmsNorm { x: Var, g: Var },
    SsmScan { x: Var, dt: Var, a: Var, b: Var, c: Var, d_skip: Var },
    ComplexMask { m: Var, x: Var },
    Istft { spec: Var, n_fft: usize, hop: usize },
    BandMerge { xs: Vec<Var>, bands: Vec<(usize, usize)>, counts: Vec<usize> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Silu(..) => "silu",
            Op::SoftmaxLast(..) => "softmax_last",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::GatherLast { .. } => "gather_last",
            Op::Concat { .. } => "concat",
            Op::StackLast { .. } => "stack_last",
            Op::ReverseLast(..) => "reverse_last",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Conv1d { .. } => "conv1d",
            Op::AddBias0 { .. } => "add_bias0",
            Op::MulBcast0 { .. } => "mul_bcast0",
            Op::MulBcastLast { .. } => "mul_bcast_last",
            Op::SumAll(..) => "sum_all",
            Op::SumLast(..) => "sum_last",
            Op::RmsNorm { .. } => "rms_norm",
            Op::SsmScan { .. } => "ssm_scan",
            Op::ComplexMask { .. } => "complex_mask",
            Op::Istft { .. } => "istft",
            Op::BandMerge { .. } => "band_merge",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Forward-pass byproducts kept for the reverse rule (scan states, norm scales).
    aux: Option<Vec<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<String, Var>,
    grad_ops: usize,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    for (index, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(SfcError::NumericFault { op, index });
        }
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bound: BTreeMap::new(), grad_ops: 0, grads: Vec::new() }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
        aux: Option<Vec<T>>,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{}: shape/value disagree", op.name());
        check_finite(op.name(), &value)?;
        if needs_grad && !matches!(op, Op::Leaf | Op::Input) {
            self.grad_ops += 1;
        }
        self.nodes.push(Node { shape, value, op, needs_grad, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.needs(*v))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("node invariant")
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of recorded differentiable primitive applications. Zero when no
    /// requires-grad input participated in the forward pass.
    pub fn recorded_grad_ops(&self) -> usize {
        self.grad_ops
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Parameter bindings made by [`Tape::param`], in name order.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false, None)
    }

    pub fn input_data(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(SfcError::shape("input", format!("shape {:?} vs {} values", shape, data.len())));
        }
        self.push(shape.to_vec(), data, Op::Input, false, None)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.push(vec![], vec![v], Op::Input, false, None)
    }

    /// Bind a named parameter as a gradient leaf. Binding the same name twice
    /// returns the same leaf, so shared parameters accumulate correctly.
    pub fn param(&mut self, p: &Parameter<T>) -> Result<Var> {
        if let Some(v) = self.bound.get(&p.name) {
            return Ok(*v);
        }
        let v = self.push(p.value.shape().to_vec(), p.value.data().to_vec(), Op::Leaf, true, None)?;
        self.bound.insert(p.name.clone(), v);
        Ok(v)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SfcError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let v: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let needs = self.any_needs(&[a, b]);
        self.push(self.shape(a).to_vec(), v, Op::Add(a, b), needs, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let v: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x - *y).collect();
        let needs = self.any_needs(&[a, b]);
        self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), needs, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let v: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let needs = self.any_needs(&[a, b]);
        self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), needs, None)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let v: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x / *y).collect();
        let needs = self.any_needs(&[a, b]);
        self.push(self.shape(a).to_vec(), v, Op::Div(a, b), needs, None)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v: Vec<T> = self.value(a).iter().map(|x| *x + c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a), needs, None)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v: Vec<T> = self.value(a).iter().map(|x| *x * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), v, Op::MulScalar(a, c), needs, None)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let v: Vec<T> = self.value(a).iter().map(|x| f(*x)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), v, op, needs, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    // ---- softmax / reductions ---------------------------------------------

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let l = *shape.last().ok_or_else(|| SfcError::shape("softmax_last", "rank 0"))?;
        let x = self.value(a);
        let mut v = vec![T::zero(); x.len()];
        for r in 0..x.len() / l {
            let row = &x[r * l..(r + 1) * l];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..l {
                let e = (row[j] - m).exp();
                v[r * l + j] = e;
                s += e;
            }
            for j in 0..l {
                v[r * l + j] /= s;
            }
        }
        let needs = self.needs(a);
        self.push(shape, v, Op::SoftmaxLast(a), needs, None)
    }

    /// Softmax over an arbitrary axis, routed through permutes when needed.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if axis + 1 == rank {
            return self.softmax_last(a);
        }
        let mut axes: Vec<usize> = (0..rank).filter(|&i| i != axis).collect();
        axes.push(axis);
        let moved = self.permute(a, &axes)?;
        let sm = self.softmax_last(moved)?;
        // Inverse permutation restores the original layout.
        let mut inv = vec![0usize; rank];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.permute(sm, &inv)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).iter().cloned().sum();
        let needs = self.needs(a);
        self.push(vec![], vec![s], Op::SumAll(a), needs, None)
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let l = *shape.last().ok_or_else(|| SfcError::shape("sum_last", "rank 0"))?;
        let x = self.value(a);
        let v: Vec<T> = (0..x.len() / l).map(|r| x[r * l..(r + 1) * l].iter().cloned().sum()).collect();
        let needs = self.needs(a);
        self.push(shape[..shape.len() - 1].to_vec(), v, Op::SumLast(a), needs, None)
    }

    // ---- matmul ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SfcError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut v = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut v, m, k, n);
        let needs = self.any_needs(&[a, b]);
        self.push(vec![m, n], v, Op::MatMul(a, b), needs, None)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(SfcError::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut v = vec![T::zero(); bt * m * n];
        for q in 0..bt {
            kernels::matmul_acc(
                &self.value(a)[q * m * k..(q + 1) * m * k],
                &self.value(b)[q * k * n..(q + 1) * k * n],
                &mut v[q * m * n..(q + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = self.any_needs(&[a, b]);
        self.push(vec![bt, m, n], v, Op::BatchMatMul(a, b), needs, None)
    }

    // ---- layout ------------------------------------------------------------

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(SfcError::shape("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let v = permute_data(self.value(a), &shape, axes);
        let needs = self.needs(a);
        self.push(out_shape, v, Op::Permute(a, axes.to_vec()), needs, None)
    }

    /// Transpose the two trailing axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        match self.shape(a).len() {
            2 => self.permute(a, &[1, 0]),
            3 => self.permute(a, &[0, 2, 1]),
            r => Err(SfcError::shape("transpose", format!("rank {r}"))),
        }
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        if numel(new_shape) != self.value(a).len() {
            return Err(SfcError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), new_shape),
            ));
        }
        let v = self.value(a).to_vec();
        let needs = self.needs(a);
        self.push(new_shape.to_vec(), v, Op::Reshape(a), needs, None)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(SfcError::shape(
                "narrow",
                format!("axis {axis} [{start},{}) of {:?}", start + len, shape),
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut v = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            v.extend_from_slice(&x[base..base + len * inner]);
        }
        let needs = self.needs(a);
        self.push(out_shape, v, Op::Narrow { x: a, axis, start }, needs, None)
    }

    /// Select index `i` along `axis` and drop that axis.
    pub fn index(&mut self, a: Var, axis: usize, i: usize) -> Result<Var> {
        let n = self.narrow(a, axis, i, 1)?;
        let mut shape = self.shape(n).to_vec();
        shape.remove(axis);
        self.reshape(n, &shape)
    }

    pub fn gather_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let l = *shape.last().ok_or_else(|| SfcError::shape("gather_last", "rank 0"))?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= l) {
            return Err(SfcError::shape("gather_last", format!("index {bad} out of {l}")));
        }
        let rows = numel(&shape) / l;
        let x = self.value(a);
        let mut v = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = &x[r * l..(r + 1) * l];
            v.extend(idx.iter().map(|&j| row[j]));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = idx.len();
        let needs = self.needs(a);
        self.push(out_shape, v, Op::GatherLast { x: a, idx: idx.to_vec() }, needs, None)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(SfcError::shape("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(SfcError::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(SfcError::shape("concat", format!("{s:?} vs {first:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut v = vec![T::zero(); numel(&out_shape)];
        let mut off = 0;
        for &x in xs {
            let len = self.shape(x)[axis];
            let data = self.value(x);
            for o in 0..outer {
                let src = &data[o * len * inner..(o + 1) * len * inner];
                let dst = (o * axis_total + off) * inner;
                v[dst..dst + len * inner].copy_from_slice(src);
            }
            off += len;
        }
        let needs = self.any_needs(xs);
        self.push(out_shape, v, Op::Concat { xs: xs.to_vec(), axis }, needs, None)
    }

    /// Stack equal-shaped tensors along a new trailing axis.
    pub fn stack_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(SfcError::shape("stack_last", "no inputs"));
        }
        let base = self.shape(xs[0]).to_vec();
        for &x in xs {
            if self.shape(x) != base.as_slice() {
                return Err(SfcError::shape(
                    "stack_last",
                    format!("{:?} vs {:?}", self.shape(x), base),
                ));
            }
        }
        let n = xs.len();
        let e = numel(&base);
        let mut v = vec![T::zero(); e * n];
        for (i, &x) in xs.iter().enumerate() {
            let data = self.value(x);
            for (j, val) in data.iter().enumerate() {
                v[j * n + i] = *val;
            }
        }
        let mut out_shape = base;
        out_shape.push(n);
        let needs = self.any_needs(xs);
        self.push(out_shape, v, Op::StackLast { xs: xs.to_vec() }, needs, None)
    }

    pub fn reverse_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let l = *shape.last().ok_or_else(|| SfcError::shape("reverse_last", "rank 0"))?;
        let x = self.value(a);
        let mut v = vec![T::zero(); x.len()];
        for r in 0..x.len() / l {
            for j in 0..l {
                v[r * l + j] = x[r * l + l - 1 - j];
            }
        }
        let needs = self.needs(a);
        self.push(shape, v, Op::ReverseLast(a), needs, None)
    }

    // ---- broadcast helpers ---------------------------------------------------

    pub fn add_bias0(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if self.shape(b).len() != 1 || shape.is_empty() || self.shape(b)[0] != shape[0] {
            return Err(SfcError::shape(
                "add_bias0",
                format!("{:?} + {:?}", shape, self.shape(b)),
            ));
        }
        let inner = numel(&shape) / shape[0];
        let xv = self.value(x);
        let bv = self.value(b);
        let mut v = vec![T::zero(); xv.len()];
        for c in 0..shape[0] {
            let bc = bv[c];
            for i in 0..inner {
                v[c * inner + i] = xv[c * inner + i] + bc;
            }
        }
        let needs = self.any_needs(&[x, b]);
        self.push(shape, v, Op::AddBias0 { x, b }, needs, None)
    }

    /// Scale each axis-0 slice by the matching element of vector `s`.
    pub fn mul_bcast0(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if self.shape(s).len() != 1 || shape.is_empty() || self.shape(s)[0] != shape[0] {
            return Err(SfcError::shape(
                "mul_bcast0",
                format!("{:?} * {:?}", shape, self.shape(s)),
            ));
        }
        let inner = numel(&shape) / shape[0];
        let xv = self.value(x);
        let sv = self.value(s);
        let mut v = vec![T::zero(); xv.len()];
        for c in 0..shape[0] {
            let sc = sv[c];
            for i in 0..inner {
                v[c * inner + i] = xv[c * inner + i] * sc;
            }
        }
        let needs = self.any_needs(&[x, s]);
        self.push(shape, v, Op::MulBcast0 { x, s }, needs, None)
    }

    /// Scale along the last axis by vector `s`.
    pub fn mul_bcast_last(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().ok_or_else(|| SfcError::shape("mul_bcast_last", "rank 0"))?;
        if self.shape(s) != [l] {
            return Err(SfcError::shape(
                "mul_bcast_last",
                format!("{:?} * {:?}", shape, self.shape(s)),
            ));
        }
        let xv = self.value(x);
        let sv = self.value(s).to_vec();
        let mut v = vec![T::zero(); xv.len()];
        for r in 0..xv.len() / l {
            for j in 0..l {
                v[r * l + j] = xv[r * l + j] * sv[j];
            }
        }
        let needs = self.any_needs(&[x, s]);
        self.push(shape, v, Op::MulBcastLast { x, s }, needs, None)
    }

    // ---- conv ----------------------------------------------------------------

    fn conv2d_dims(&self, op: &'static str, x: Var, w: Var, swapped: bool) -> Result<Conv2dDims> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 {
            return Err(SfcError::shape(op, format!("x {sx:?}, w {sw:?}")));
        }
        let (wc0, wc1) = (sw[0], sw[1]);
        let (c_in, c_out) = if swapped { (wc0, wc1) } else { (wc1, wc0) };
        let (kh, kw) = (sw[2], sw[3]);
        if sx[0] != c_in || kh % 2 == 0 || kw % 2 == 0 {
            return Err(SfcError::shape(
                op,
                format!("x {sx:?} with w {sw:?} (kernels must be odd, channels must agree)"),
            ));
        }
        Ok(Conv2dDims { c_in, c_out, h: sx[1], w: sx[2], kh, kw })
    }

    /// Same-size 2-D convolution: x (C_in,H,W), w (C_out,C_in,kh,kw), optional bias (C_out,).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let d = self.conv2d_dims("conv2d", x, w, false)?;
        let mut v = kernels::conv2d(self.value(x), self.value(w), &d);
        if let Some(bias) = b {
            self.apply_channel_bias("conv2d", &mut v, bias, d.c_out)?;
        }
        let needs = self.any_needs(&[x, w]) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(vec![d.c_out, d.h, d.w], v, Op::Conv2d { x, w, b }, needs, None)
    }

    /// Same-size transpose convolution: x (C_in,H,W), w (C_in,C_out,kh,kw).
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let d = self.conv2d_dims("deconv2d", x, w, true)?;
        let mut v = kernels::deconv2d(self.value(x), self.value(w), &d);
        if let Some(bias) = b {
            self.apply_channel_bias("deconv2d", &mut v, bias, d.c_out)?;
        }
        let needs = self.any_needs(&[x, w]) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(vec![d.c_out, d.h, d.w], v, Op::Deconv2d { x, w, b }, needs, None)
    }

    fn apply_channel_bias(&self, op: &'static str, v: &mut [T], bias: Var, c_out: usize) -> Result<()> {
        if self.shape(bias) != [c_out] {
            return Err(SfcError::shape(op, format!("bias {:?} for {} channels", self.shape(bias), c_out)));
        }
        let inner = v.len() / c_out;
        let bv = self.value(bias);
        for c in 0..c_out {
            for i in 0..inner {
                v[c * inner + i] += bv[c];
            }
        }
        Ok(())
    }

    /// Grouped 1-D convolution with explicit padding: x (C_in,L), w (C_out,C_in/groups,k).
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || groups == 0 {
            return Err(SfcError::shape("conv1d", format!("x {sx:?}, w {sw:?}")));
        }
        let (c_in, len) = (sx[0], sx[1]);
        let (c_out, cpg, k) = (sw[0], sw[1], sw[2]);
        if c_in % groups != 0 || c_out % groups != 0 || cpg != c_in / groups {
            return Err(SfcError::shape(
                "conv1d",
                format!("groups {groups} with x {sx:?}, w {sw:?}"),
            ));
        }
        if len + pad_left + pad_right < k {
            return Err(SfcError::shape("conv1d", format!("kernel {k} exceeds padded length")));
        }
        let d = Conv1dDims { c_in, c_out, len, k, groups, pad_left, pad_right };
        let out_len = d.out_len();
        let mut v = kernels::conv1d(self.value(x), self.value(w), &d);
        if let Some(bias) = b {
            self.apply_channel_bias("conv1d", &mut v, bias, c_out)?;
        }
        let needs = self.any_needs(&[x, w]) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(vec![c_out, out_len], v, Op::Conv1d { x, w, b, groups, pad_left, pad_right }, needs, None)
    }

    // ---- normalization ---------------------------------------------------------

    /// RMS normalization over axis 0 with learnable per-channel gain:
    /// y[c, p] = x[c, p] · g[c] / sqrt(mean_c(x²) + eps), one scale per position p.
    pub fn rms_norm(&mut self, x: Var, g: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || self.shape(g) != [shape[0]] {
            return Err(SfcError::shape(
                "rms_norm",
                format!("x {:?} with gain {:?}", shape, self.shape(g)),
            ));
        }
        let c = shape[0];
        let p = numel(&shape) / c;
        let xv = self.value(x);
        let gv = self.value(g);
        let mut rinv = vec![T::zero(); p];
        let cn = T::f(c as f64);
        for j in 0..p {
            let mut s = T::zero();
            for i in 0..c {
                let v = xv[i * p + j];
                s += v * v;
            }
            rinv[j] = T::one() / (s / cn + eps).sqrt();
        }
        let mut v = vec![T::zero(); xv.len()];
        for i in 0..c {
            for j in 0..p {
                v[i * p + j] = xv[i * p + j] * gv[i] * rinv[j];
            }
        }
        let needs = self.any_needs(&[x, g]);
        self.push(shape, v, Op::RmsNorm { x, g }, needs, Some(rinv))
    }

    // ---- sequence / spectral ops ------------------------------------------------

    /// Selective-scan recurrence; see [`kernels::ssm_scan`] for the exact update.
    /// x,dt: (D,L); a: (D,N); b,c: (N,L); d_skip: (D,).
    pub fn ssm_scan(&mut self, x: Var, dt: Var, a: Var, b: Var, c: Var, d_skip: Var) -> Result<Var> {
        let (sx, sdt, sa, sb, sc, sd) =
            (self.shape(x), self.shape(dt), self.shape(a), self.shape(b), self.shape(c), self.shape(d_skip));
        if sx.len() != 2 || sdt != sx || sa.len() != 2 || sa[0] != sx[0] {
            return Err(SfcError::shape("ssm_scan", format!("x {sx:?}, dt {sdt:?}, a {sa:?}")));
        }
        let (d, len, n) = (sx[0], sx[1], sa[1]);
        if sb != [n, len] || sc != [n, len] || sd != [d] {
            return Err(SfcError::shape(
                "ssm_scan",
                format!("b {sb:?}, c {sc:?}, d_skip {sd:?} for (D={d}, N={n}, L={len})"),
            ));
        }
        let dims = ScanDims { d, n, len };
        let (y, h) = kernels::ssm_scan(
            self.value(x),
            self.value(dt),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d_skip),
            &dims,
        );
        let needs = self.any_needs(&[x, dt, a, b, c, d_skip]);
        self.push(vec![d, len], y, Op::SsmScan { x, dt, a, b, c, d_skip }, needs, Some(h))
    }

    /// Complex mask application on stacked real/imag channel pairs.
    /// m: (..., C, F, T) with any number of leading axes, x: (C, F, T), C even.
    /// Out (same shape as m): per pair (a+bi)·(c+di) = (ac−bd) + (ad+bc)i.
    pub fn complex_mask(&mut self, m: Var, x: Var) -> Result<Var> {
        let (sm, sx) = (self.shape(m).to_vec(), self.shape(x));
        if sx.len() != 3 || sm.len() < 3 || sm[sm.len() - 3..] != *sx || sx[0] % 2 != 0 {
            return Err(SfcError::shape("complex_mask", format!("m {sm:?} on x {sx:?}")));
        }
        let (c, f, t) = (sx[0], sx[1], sx[2]);
        let plane = f * t;
        let batch = numel(&sm) / (c * plane);
        let mv = self.value(m);
        let xv = self.value(x);
        let mut v = vec![T::zero(); mv.len()];
        for q in 0..batch {
            let base = q * c * plane;
            for p in 0..c / 2 {
                let ro = base + 2 * p * plane;
                let io = base + (2 * p + 1) * plane;
                let xr = 2 * p * plane;
                let xi = (2 * p + 1) * plane;
                for e in 0..plane {
                    let (mr, mi) = (mv[ro + e], mv[io + e]);
                    let (cr, ci) = (xv[xr + e], xv[xi + e]);
                    v[ro + e] = mr * cr - mi * ci;
                    v[io + e] = mr * ci + mi * cr;
                }
            }
        }
        let needs = self.any_needs(&[m, x]);
        self.push(sm, v, Op::ComplexMask { m, x }, needs, None)
    }

    /// Inverse STFT of a single complex spectrogram stored as (2, F, T):
    /// per-frame inverse real FFT, synthesis windowing, overlap-add, pointwise
    /// COLA normalization, and removal of the analysis center padding.
    /// Output length is `out_len` samples.
    pub fn istft(&mut self, spec: Var, n_fft: usize, hop: usize, out_len: usize) -> Result<Var> {
        let s = self.shape(spec).to_vec();
        if s.len() != 3 || s[0] != 2 || s[1] != n_fft / 2 + 1 {
            return Err(SfcError::shape(
                "istft",
                format!("spec {s:?} for n_fft {n_fft} (want (2, {}, T))", n_fft / 2 + 1),
            ));
        }
        let frames = s[2];
        let v = stft::istft_core(self.value(spec), n_fft, hop, frames, out_len)?;
        let needs = self.needs(spec);
        self.push(vec![out_len], v, Op::Istft { spec, n_fft, hop }, needs, None)
    }

    /// Merge per-band planes back onto the full frequency axis, averaging where
    /// bands overlap. xs[k]: (C, width_k, T); out: (C, F, T).
    pub fn band_merge(&mut self, xs: &[Var], bands: &[(usize, usize)], f_bins: usize) -> Result<Var> {
        if xs.len() != bands.len() || xs.is_empty() {
            return Err(SfcError::shape("band_merge", "one input per band required"));
        }
        let s0 = self.shape(xs[0]).to_vec();
        if s0.len() != 3 {
            return Err(SfcError::shape("band_merge", format!("rank {} input", s0.len())));
        }
        let (c, t) = (s0[0], s0[2]);
        let mut counts = vec![0usize; f_bins];
        for (&x, &(s, e)) in xs.iter().zip(bands) {
            let sx = self.shape(x);
            if sx[0] != c || sx[2] != t || sx[1] != e - s || e > f_bins || s >= e {
                return Err(SfcError::shape(
                    "band_merge",
                    format!("band [{s},{e}) with input {sx:?}"),
                ));
            }
            for f in s..e {
                counts[f] += 1;
            }
        }
        if counts.iter().any(|&n| n == 0) {
            return Err(SfcError::shape("band_merge", "bands do not cover every bin"));
        }
        let mut v = vec![T::zero(); c * f_bins * t];
        for (&x, &(s, e)) in xs.iter().zip(bands) {
            let w = e - s;
            let data = self.value(x);
            for ch in 0..c {
                for j in 0..w {
                    let dst = (ch * f_bins + s + j) * t;
                    let src = (ch * w + j) * t;
                    for ti in 0..t {
                        v[dst + ti] += data[src + ti];
                    }
                }
            }
        }
        for ch in 0..c {
            for f in 0..f_bins {
                let inv = T::one() / T::f(counts[f] as f64);
                for ti in 0..t {
                    v[(ch * f_bins + f) * t + ti] *= inv;
                }
            }
        }
        let needs = self.any_needs(xs);
        self.push(
            vec![c, f_bins, t],
            v,
            Op::BandMerge { xs: xs.to_vec(), bands: bands.to_vec(), counts },
            needs,
            None,
        )
    }

    // ---- backward ----------------------------------------------------------------

    /// Reverse accumulation from a scalar loss. Gradients are retrievable via
    /// [`Tape::grad`] until the next `backward` call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(SfcError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients for all bound parameters, keyed by name. Empty entries (leaf
    /// never reached by the loss) come back as zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .map(|(name, var)| {
                let g = self
                    .grad(*var)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); self.nodes[var.0].value.len()]);
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate_parents(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let add_into = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, &mut |d| acc(d, g));
                add_into(grads, *b, &mut |d| acc(d, g));
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, &mut |d| acc(d, g));
                add_into(grads, *b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= *y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                add_into(grads, *b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / bv[k];
                    }
                });
                add_into(grads, *b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddScalar(a) => add_into(grads, *a, &mut |d| acc(d, g)),
            Op::MulScalar(a, c) => {
                let c = *c;
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * c;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (T::one() - y[k] * y[k]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (T::one() - y[k]);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sigmoid(x[k]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / x[k];
                    }
                });
            }
            Op::Silu(a) => {
                let x = &self.nodes[a.0].value;
                add_into(grads, *a, &mut |d| {
                    for k in 0..d.len() {
                        let s = sigmoid(x[k]);
                        d[k] += g[k] * s * (T::one() + x[k] * (T::one() - s));
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let l = *node.shape.last().unwrap();
                add_into(grads, *a, &mut |d| {
                    for r in 0..d.len() / l {
                        let row = r * l;
                        let mut dot = T::zero();
                        for j in 0..l {
                            dot += g[row + j] * y[row + j];
                        }
                        for j in 0..l {
                            d[row + j] += y[row + j] * (g[row + j] - dot);
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                add_into(grads, *a, &mut |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::SumLast(a) => {
                let l = *self.nodes[a.0].shape.last().unwrap();
                add_into(grads, *a, &mut |d| {
                    for r in 0..d.len() / l {
                        for j in 0..l {
                            d[r * l + j] += g[r];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add_into(grads, *a, &mut |d| kernels::matmul_a_bt_acc(g, bv, d, m, n, k));
                add_into(grads, *b, &mut |d| kernels::matmul_at_b_acc(av, g, d, k, m, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add_into(grads, *a, &mut |d| {
                    for q in 0..bt {
                        kernels::matmul_a_bt_acc(
                            &g[q * m * n..(q + 1) * m * n],
                            &bv[q * k * n..(q + 1) * k * n],
                            &mut d[q * m * k..(q + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                add_into(grads, *b, &mut |d| {
                    for q in 0..bt {
                        kernels::matmul_at_b_acc(
                            &av[q * m * k..(q + 1) * m * k],
                            &g[q * m * n..(q + 1) * m * n],
                            &mut d[q * k * n..(q + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Permute(a, axes) => {
                // Route the gradient back through the inverse permutation.
                let mut inv = vec![0usize; axes.len()];
                for (j, &ax) in axes.iter().enumerate() {
                    inv[ax] = j;
                }
                let gperm = permute_data(g, &node.shape, &inv);
                add_into(grads, *a, &mut |d| acc(d, &gperm));
            }
            Op::Reshape(a) => add_into(grads, *a, &mut |d| acc(d, g)),
            Op::Narrow { x, axis, start } => {
                let sx = &self.nodes[x.0].shape;
                let len = node.shape[*axis];
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[*axis + 1..].iter().product();
                add_into(grads, *x, &mut |d| {
                    for o in 0..outer {
                        let dst = (o * sx[*axis] + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            d[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::GatherLast { x, idx } => {
                let l = *self.nodes[x.0].shape.last().unwrap();
                let j = idx.len();
                add_into(grads, *x, &mut |d| {
                    for r in 0..d.len() / l {
                        for (jj, &src) in idx.iter().enumerate() {
                            d[r * l + src] += g[r * j + jj];
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let total = node.shape[*axis];
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].shape[*axis];
                    let start = off;
                    add_into(grads, x, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                d[dst + k] += g[src + k];
                            }
                        }
                    });
                    off += len;
                }
            }
            Op::StackLast { xs } => {
                let n = xs.len();
                for (i2, &x) in xs.iter().enumerate() {
                    add_into(grads, x, &mut |d| {
                        for (j, dv) in d.iter_mut().enumerate() {
                            *dv += g[j * n + i2];
                        }
                    });
                }
            }
            Op::ReverseLast(a) => {
                let l = *node.shape.last().unwrap();
                add_into(grads, *a, &mut |d| {
                    for r in 0..d.len() / l {
                        for j in 0..l {
                            d[r * l + j] += g[r * l + l - 1 - j];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let d = self.conv2d_dims("conv2d", *x, *w, false).expect("validated at forward");
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                // Input and weight grads share one fused loop; run it when either is needed.
                self.conv_pair_backward(grads, *x, *w, |dx, dw| {
                    kernels::conv2d_backward(xv, wv, g, &d, dx, dw)
                });
                if let Some(bias) = b {
                    let inner = d.h * d.w;
                    add_into(grads, *bias, &mut |db| {
                        for c in 0..d.c_out {
                            let mut s = T::zero();
                            for k in 0..inner {
                                s += g[c * inner + k];
                            }
                            db[c] += s;
                        }
                    });
                }
            }
            Op::Deconv2d { x, w, b } => {
                let d = self.conv2d_dims("deconv2d", *x, *w, true).expect("validated at forward");
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                self.conv_pair_backward(grads, *x, *w, |dx, dw| {
                    kernels::deconv2d_backward(xv, wv, g, &d, dx, dw)
                });
                if let Some(bias) = b {
                    let inner = d.h * d.w;
                    add_into(grads, *bias, &mut |db| {
                        for c in 0..d.c_out {
                            let mut s = T::zero();
                            for k in 0..inner {
                                s += g[c * inner + k];
                            }
                            db[c] += s;
                        }
                    });
                }
            }
            Op::Conv1d { x, w, b, groups, pad_left, pad_right } => {
                let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
                let d = Conv1dDims {
                    c_in: sx[0],
                    c_out: sw[0],
                    len: sx[1],
                    k: sw[2],
                    groups: *groups,
                    pad_left: *pad_left,
                    pad_right: *pad_right,
                };
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                self.conv_pair_backward(grads, *x, *w, |dx, dw| {
                    kernels::conv1d_backward(xv, wv, g, &d, dx, dw)
                });
                if let Some(bias) = b {
                    let out_len = d.out_len();
                    add_into(grads, *bias, &mut |db| {
                        for c in 0..d.c_out {
                            let mut s = T::zero();
                            for k in 0..out_len {
                                s += g[c * out_len + k];
                            }
                            db[c] += s;
                        }
                    });
                }
            }
            Op::AddBias0 { x, b } => {
                let c0 = node.shape[0];
                let inner = node.value.len() / c0;
                add_into(grads, *x, &mut |d| acc(d, g));
                add_into(grads, *b, &mut |d| {
                    for c in 0..c0 {
                        let mut s = T::zero();
                        for k in 0..inner {
                            s += g[c * inner + k];
                        }
                        d[c] += s;
                    }
                });
            }
            Op::MulBcast0 { x, s } => {
                let c0 = node.shape[0];
                let inner = node.value.len() / c0;
                let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
                add_into(grads, *x, &mut |d| {
                    for c in 0..c0 {
                        for k in 0..inner {
                            d[c * inner + k] += g[c * inner + k] * sv[c];
                        }
                    }
                });
                add_into(grads, *s, &mut |d| {
                    for c in 0..c0 {
                        let mut acc2 = T::zero();
                        for k in 0..inner {
                            acc2 += g[c * inner + k] * xv[c * inner + k];
                        }
                        d[c] += acc2;
                    }
                });
            }
            Op::MulBcastLast { x, s } => {
                let l = *node.shape.last().unwrap();
                let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
                add_into(grads, *x, &mut |d| {
                    for r in 0..d.len() / l {
                        for j in 0..l {
                            d[r * l + j] += g[r * l + j] * sv[j];
                        }
                    }
                });
                add_into(grads, *s, &mut |d| {
                    for r in 0..xv.len() / l {
                        for j in 0..l {
                            d[j] += g[r * l + j] * xv[r * l + j];
                        }
                    }
                });
            }
            Op::RmsNorm { x, g: gain } => {
                let c = node.shape[0];
                let p = node.value.len() / c;
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let rinv = node.aux.as_ref().expect("rms aux");
                let cn = T::f(c as f64);
                add_into(grads, *x, &mut |d| {
                    for j in 0..p {
                        let ri = rinv[j];
                        let mut dot = T::zero();
                        for i2 in 0..c {
                            dot += g[i2 * p + j] * gv[i2] * xv[i2 * p + j];
                        }
                        let corr = dot * ri * ri * ri / cn;
                        for i2 in 0..c {
                            d[i2 * p + j] += g[i2 * p + j] * gv[i2] * ri - xv[i2 * p + j] * corr;
                        }
                    }
                });
                add_into(grads, *gain, &mut |d| {
                    for i2 in 0..c {
                        let mut s = T::zero();
                        for j in 0..p {
                            s += g[i2 * p + j] * xv[i2 * p + j] * rinv[j];
                        }
                        d[i2] += s;
                    }
                });
            }
            Op::SsmScan { x, dt, a, b, c, d_skip } => {
                let (d0, len) = (node.shape[0], node.shape[1]);
                let n = self.nodes[a.0].shape[1];
                let dims = ScanDims { d: d0, n, len };
                let h = node.aux.as_ref().expect("scan aux");
                // The fused reverse rule fills all six gradients; stage into
                // locals and scatter into whichever parents require them.
                let mut dx = vec![T::zero(); d0 * len];
                let mut ddt = vec![T::zero(); d0 * len];
                let mut da = vec![T::zero(); d0 * n];
                let mut db = vec![T::zero(); n * len];
                let mut dc = vec![T::zero(); n * len];
                let mut dd = vec![T::zero(); d0];
                kernels::ssm_scan_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[dt.0].value,
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    &self.nodes[c.0].value,
                    &self.nodes[d_skip.0].value,
                    h,
                    g,
                    &dims,
                    &mut dx,
                    &mut ddt,
                    &mut da,
                    &mut db,
                    &mut dc,
                    &mut dd,
                );
                add_into(grads, *x, &mut |d| acc(d, &dx));
                add_into(grads, *dt, &mut |d| acc(d, &ddt));
                add_into(grads, *a, &mut |d| acc(d, &da));
                add_into(grads, *b, &mut |d| acc(d, &db));
                add_into(grads, *c, &mut |d| acc(d, &dc));
                add_into(grads, *d_skip, &mut |d| acc(d, &dd));
            }
            Op::ComplexMask { m, x } => {
                let sx = &self.nodes[x.0].shape;
                let (c, f, t) = (sx[0], sx[1], sx[2]);
                let plane = f * t;
                let batch = node.value.len() / (c * plane);
                let (mv, xv) = (&self.nodes[m.0].value, &self.nodes[x.0].value);
                add_into(grads, *m, &mut |d| {
                    for q in 0..batch {
                        let base = q * c * plane;
                        for p in 0..c / 2 {
                            let ro = base + 2 * p * plane;
                            let io = base + (2 * p + 1) * plane;
                            let xr = 2 * p * plane;
                            let xi = (2 * p + 1) * plane;
                            for e in 0..plane {
                                let (cr, ci) = (xv[xr + e], xv[xi + e]);
                                d[ro + e] += g[ro + e] * cr + g[io + e] * ci;
                                d[io + e] += g[io + e] * cr - g[ro + e] * ci;
                            }
                        }
                    }
                });
                add_into(grads, *x, &mut |d| {
                    for q in 0..batch {
                        let base = q * c * plane;
                        for p in 0..c / 2 {
                            let ro = base + 2 * p * plane;
                            let io = base + (2 * p + 1) * plane;
                            let xr = 2 * p * plane;
                            let xi = (2 * p + 1) * plane;
                            for e in 0..plane {
                                let (mr, mi) = (mv[ro + e], mv[io + e]);
                                d[xr + e] += g[ro + e] * mr + g[io + e] * mi;
                                d[xi + e] += g[io + e] * mr - g[ro + e] * mi;
                            }
                        }
                    }
                });
            }
            Op::Istft { spec, n_fft, hop } => {
                let frames = self.nodes[spec.0].shape[2];
                let adj = stft::istft_adjoint_core(g, *n_fft, *hop, frames).expect("istft adjoint");
                add_into(grads, *spec, &mut |d| acc(d, &adj));
            }
            Op::BandMerge { xs, bands, counts } => {
                let (c, f_bins, t) = (node.shape[0], node.shape[1], node.shape[2]);
                let _ = f_bins;
                for (&x, &(s, e)) in xs.iter().zip(bands) {
                    let w = e - s;
                    add_into(grads, x, &mut |d| {
                        for ch in 0..c {
                            for j in 0..w {
                                let inv = T::one() / T::f(counts[s + j] as f64);
                                let src = (ch * node.shape[1] + s + j) * t;
                                let dst = (ch * w + j) * t;
                                for ti in 0..t {
                                    d[dst + ti] += g[src + ti] * inv;
                                }
                            }
                        }
                    });
                }
            }
        }
    }

    /// Run a fused input+weight reverse rule, then scatter into whichever of
    /// the two parents participates in the gradient.
    fn conv_pair_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        x: Var,
        w: Var,
        run: impl FnOnce(&mut [T], &mut [T]),
    ) {
        let xn = self.nodes[x.0].needs_grad;
        let wn = self.nodes[w.0].needs_grad;
        if !xn && !wn {
            return;
        }
        let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
        let mut dw = vec![T::zero(); self.nodes[w.0].value.len()];
        run(&mut dx, &mut dw);
        if xn {
            let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); dx.len()]);
            acc(slot, &dx);
        }
        if wn {
            let slot = grads[w.0].get_or_insert_with(|| vec![T::zero(); dw.len()]);
            acc(slot, &dw);
        }
    }
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // ln(1+e^x) in the overflow-safe arrangement.
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}

fn permute_data<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let mut out_strides = vec![0usize; rank];
    {
        // Stride of each output axis, mapped back onto the input axis order.
        let mut s = 1;
        let mut tmp = vec![0usize; rank];
        for i in (0..rank).rev() {
            tmp[i] = s;
            s *= out_shape[i];
        }
        for (i, &ax) in axes.iter().enumerate() {
            out_strides[ax] = tmp[i];
        }
    }
    let mut out = vec![T::zero(); x.len()];
    let mut idx = vec![0usize; rank];
    for (flat, v) in x.iter().enumerate() {
        let mut pos = 0;
        for i in 0..rank {
            pos += idx[i] * out_strides[i];
        }
        out[pos] = *v;
        let _ = flat;
        // Odometer increment over the input shape.
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn no_grad_forward_records_nothing() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t64(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.input(&t64(&[2, 2], vec![0.5; 4])).unwrap();
        let c = tape.mul(a, b).unwrap();
        let _ = tape.sum_all(c).unwrap();
        assert_eq!(tape.recorded_grad_ops(), 0);
    }

    #[test]
    fn leaf_participation_is_recorded() {
        let mut tape = Tape::<f64>::new();
        let p = Parameter::new("w", t64(&[2], vec![1.0, -1.0]));
        let w = tape.param(&p).unwrap();
        let x = tape.input(&t64(&[2], vec![3.0, 4.0])).unwrap();
        let y = tape.mul(w, x).unwrap();
        let _ = tape.sum_all(y).unwrap();
        assert_eq!(tape.recorded_grad_ops(), 2);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::<f64>::new();
        let p = Parameter::new("w", t64(&[3], vec![0.3, -0.2, 1.7]));
        let w = tape.param(&p).unwrap();
        let y = tape.tanh(w).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        let g1 = tape.grad(w).unwrap().to_vec();
        tape.backward(l).unwrap();
        let g2 = tape.grad(w).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn shared_leaf_accumulates_both_uses() {
        // f = sum(w*w) => df/dw = 2w, via two bindings of the same name.
        let mut tape = Tape::<f64>::new();
        let p = Parameter::new("w", t64(&[2], vec![2.0, -3.0]));
        let w1 = tape.param(&p).unwrap();
        let w2 = tape.param(&p).unwrap();
        assert_eq!(w1, w2);
        let y = tape.mul(w1, w2).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w1).unwrap(), &[4.0, -6.0]);
    }

    #[test]
    fn non_finite_output_is_an_error_not_a_value() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t64(&[1], vec![0.0])).unwrap();
        let err = tape.log(a).unwrap_err();
        assert!(matches!(err, SfcError::NumericFault { op: "log", .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t64(&[2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0])).unwrap();
        let s = tape.softmax_last(a).unwrap();
        let v = tape.value(s);
        assert!((v[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let b = tape.add_scalar(a, 100.0).unwrap();
        let s2 = tape.softmax_last(b).unwrap();
        for (x, y) in tape.value(s).iter().zip(tape.value(s2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_over_leading_axis_permutes_correctly() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t64(&[2, 2], vec![1.0, 10.0, 3.0, 10.0])).unwrap();
        let s = tape.softmax(a, 0).unwrap();
        let v = tape.value(s);
        // Columns sum to one.
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permute_roundtrip_restores_data() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t64(&[2, 3, 4], (0..24).map(|i| i as f64).collect())).unwrap();
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(a), tape.value(back));
    }

    #[test]
    fn narrow_then_concat_roundtrips() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t64(&[2, 5], (0..10).map(|i| i as f64).collect())).unwrap();
        let l = tape.narrow(a, 1, 0, 2).unwrap();
        let r = tape.narrow(a, 1, 2, 3).unwrap();
        let c = tape.concat(&[l, r], 1).unwrap();
        assert_eq!(tape.value(a), tape.value(c));
    }

    #[test]
    fn stack_last_interleaves_elements() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t64(&[2], vec![1.0, 2.0])).unwrap();
        let b = tape.input(&t64(&[2], vec![3.0, 4.0])).unwrap();
        let s = tape.stack_last(&[a, b]).unwrap();
        assert_eq!(tape.shape(s), &[2, 2]);
        assert_eq!(tape.value(s), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn band_merge_averages_overlap() {
        let mut tape = Tape::<f64>::new();
        // Two full-range bands over F=2, C=1, T=1, holding constants 1 and 3.
        let a = tape.input(&t64(&[1, 2, 1], vec![1.0, 1.0])).unwrap();
        let b = tape.input(&t64(&[1, 2, 1], vec![3.0, 3.0])).unwrap();
        let m = tape.band_merge(&[a, b], &[(0, 2), (0, 2)], 2).unwrap();
        assert_eq!(tape.value(m), &[2.0, 2.0]);
    }
}

/// Per-op gradient certification. Every differentiable primitive is checked
/// against central finite differences across 100 random seeds. The scalar loss
/// is a randomly weighted sum of the op output — a plain unweighted sum would
/// make several gradients vanish identically (softmax rows, for one) and prove
/// nothing.
#[cfg(test)]
mod grad_certification {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOpts};
    use crate::tensor::Tensor;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const SEEDS: u64 = 100;

    fn uni(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::uniform(shape, lo, hi, rng)
    }

    /// Random-weight scalar readout of an op output.
    fn wsum(tape: &mut Tape<f64>, y: Var, weights: &[f64]) -> Result<Var> {
        let shape = tape.shape(y).to_vec();
        let w = tape.input_data(&shape, weights.to_vec())?;
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    }

    fn weights(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Run `make` for each seed; it returns the parameters plus a graph builder
    /// ending in a scalar. Panics with the seed and per-param report on failure.
    fn certify<B>(make: impl Fn(&mut ChaCha12Rng) -> (Vec<Parameter<f64>>, B))
    where
        B: Fn(&mut Tape<f64>, &[Parameter<f64>]) -> Result<Var>,
    {
        for seed in 0..SEEDS {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let (params, build) = make(&mut rng);
            let report = grad_check(&build, &params, &GradCheckOpts::default()).unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn grads_add_sub_mul_div() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[2, 3], -2.0, 2.0));
            let b = Parameter::new("b", uni(rng, &[2, 3], 0.5, 2.0)); // away from zero for div
            let ws: Vec<Vec<f64>> = (0..4).map(|_| weights(rng, 6)).collect();
            (vec![a, b], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let b = t.param(&ps[1])?;
                // Independent readouts so no op's gradient can cancel another's.
                let y0 = t.add(a, b)?;
                let y1 = t.sub(a, b)?;
                let y2 = t.mul(a, b)?;
                let y3 = t.div(a, b)?;
                let mut loss = wsum(t, y0, &ws[0])?;
                for (y, w) in [(y1, &ws[1]), (y2, &ws[2]), (y3, &ws[3])] {
                    let l = wsum(t, y, w)?;
                    loss = t.add(loss, l)?;
                }
                Ok(loss)
            })
        });
    }

    #[test]
    fn grads_scalar_ops() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[5], -2.0, 2.0));
            let c = rng.random_range(-1.5..1.5);
            let w = weights(rng, 5);
            (vec![a], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let x = t.add_scalar(a, c)?;
                let y = t.mul_scalar(x, 1.0 + c * c)?;
                wsum(t, y, &w)
            })
        });
    }

    #[test]
    fn grads_tanh_sigmoid_softplus_silu() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[7], -3.0, 3.0));
            let w = weights(rng, 7);
            (vec![a], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let x = t.tanh(a)?;
                let x = t.sigmoid(x)?;
                let x = t.softplus(x)?;
                let x = t.silu(x)?;
                wsum(t, x, &w)
            })
        });
    }

    #[test]
    fn grads_exp_log() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[6], 0.2, 2.0));
            let w = weights(rng, 6);
            (vec![a], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let x = t.log(a)?;
                let x = t.exp(x)?;
                wsum(t, x, &w)
            })
        });
    }

    #[test]
    fn grads_softmax_last_and_axis0() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[3, 4], -2.0, 2.0));
            let w = weights(rng, 12);
            let axis = rng.random_range(0..2usize);
            (vec![a], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let s = t.softmax(a, axis)?;
                wsum(t, s, &w)
            })
        });
    }

    #[test]
    fn grads_matmul_chain() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[3, 4], -1.0, 1.0));
            let b = Parameter::new("b", uni(rng, &[4, 2], -1.0, 1.0));
            let w = weights(rng, 6);
            (vec![a, b], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let b = t.param(&ps[1])?;
                let c = t.matmul(a, b)?;
                wsum(t, c, &w)
            })
        });
    }

    #[test]
    fn grads_batch_matmul() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[2, 3, 4], -1.0, 1.0));
            let b = Parameter::new("b", uni(rng, &[2, 4, 2], -1.0, 1.0));
            let w = weights(rng, 12);
            (vec![a, b], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let b = t.param(&ps[1])?;
                let c = t.batch_matmul(a, b)?;
                wsum(t, c, &w)
            })
        });
    }

    #[test]
    fn grads_permute_reshape() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[2, 3, 4], -1.0, 1.0));
            let w = weights(rng, 24);
            let axes = match rng.random_range(0..3usize) {
                0 => vec![2, 0, 1],
                1 => vec![1, 2, 0],
                _ => vec![0, 2, 1],
            };
            (vec![a], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let p = t.permute(a, &axes)?;
                let r = t.reshape(p, &[6, 4])?;
                wsum(t, r, &w)
            })
        });
    }

    #[test]
    fn grads_narrow_index_gather() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[3, 6], -1.0, 1.0));
            let start = rng.random_range(0..3usize);
            let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..6usize)).collect();
            let w1 = weights(rng, 3 * 3);
            let w2 = weights(rng, 3 * 4);
            (vec![a], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let n = t.narrow(a, 1, start, 3)?;
                let g = t.gather_last(a, &idx)?;
                let l1 = wsum(t, n, &w1)?;
                let l2 = wsum(t, g, &w2)?;
                t.add(l1, l2)
            })
        });
    }

    #[test]
    fn grads_concat_stack_reverse() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[2, 3], -1.0, 1.0));
            let b = Parameter::new("b", uni(rng, &[2, 2], -1.0, 1.0));
            let c = Parameter::new("c", uni(rng, &[2, 5], -1.0, 1.0));
            let w1 = weights(rng, 2 * 10);
            let w2 = weights(rng, 2 * 5 * 2);
            (vec![a, b, c], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let b = t.param(&ps[1])?;
                let c = t.param(&ps[2])?;
                let cat = t.concat(&[a, b, c], 1)?;
                let rev = t.reverse_last(c)?;
                let st = t.stack_last(&[c, rev])?;
                let l1 = wsum(t, cat, &w1)?;
                let l2 = wsum(t, st, &w2)?;
                t.add(l1, l2)
            })
        });
    }

    #[test]
    fn grads_conv2d_with_bias() {
        certify(|rng| {
            let x = Parameter::new("x", uni(rng, &[2, 4, 3], -1.0, 1.0));
            let w = Parameter::new("w", uni(rng, &[3, 2, 3, 1], -1.0, 1.0));
            let b = Parameter::new("b", uni(rng, &[3], -0.5, 0.5));
            let wl = weights(rng, 3 * 4 * 3);
            (vec![x, w, b], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let x = t.param(&ps[0])?;
                let w = t.param(&ps[1])?;
                let b = t.param(&ps[2])?;
                let y = t.conv2d(x, w, Some(b))?;
                wsum(t, y, &wl)
            })
        });
    }

    #[test]
    fn grads_conv2d_square_kernel() {
        certify(|rng| {
            let x = Parameter::new("x", uni(rng, &[2, 4, 5], -1.0, 1.0));
            let w = Parameter::new("w", uni(rng, &[2, 2, 3, 3], -1.0, 1.0));
            let wl = weights(rng, 2 * 4 * 5);
            (vec![x, w], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let x = t.param(&ps[0])?;
                let w = t.param(&ps[1])?;
                let y = t.conv2d(x, w, None)?;
                wsum(t, y, &wl)
            })
        });
    }

    #[test]
    fn grads_deconv2d_with_bias() {
        certify(|rng| {
            let x = Parameter::new("x", uni(rng, &[3, 4, 3], -1.0, 1.0));
            let w = Parameter::new("w", uni(rng, &[3, 2, 3, 1], -1.0, 1.0));
            let b = Parameter::new("b", uni(rng, &[2], -0.5, 0.5));
            let wl = weights(rng, 2 * 4 * 3);
            (vec![x, w, b], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let x = t.param(&ps[0])?;
                let w = t.param(&ps[1])?;
                let b = t.param(&ps[2])?;
                let y = t.deconv2d(x, w, Some(b))?;
                wsum(t, y, &wl)
            })
        });
    }

    #[test]
    fn grads_conv1d_grouped_causal() {
        certify(|rng| {
            // Depthwise causal setup as used by the scan codec: groups == channels.
            let x = Parameter::new("x", uni(rng, &[4, 6], -1.0, 1.0));
            let w = Parameter::new("w", uni(rng, &[4, 1, 4], -1.0, 1.0));
            let b = Parameter::new("b", uni(rng, &[4], -0.5, 0.5));
            let wl = weights(rng, 4 * 6);
            (vec![x, w, b], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let x = t.param(&ps[0])?;
                let w = t.param(&ps[1])?;
                let b = t.param(&ps[2])?;
                let y = t.conv1d(x, w, Some(b), 4, 3, 0)?;
                wsum(t, y, &wl)
            })
        });
    }

    #[test]
    fn grads_conv1d_dense_symmetric() {
        certify(|rng| {
            let x = Parameter::new("x", uni(rng, &[2, 5], -1.0, 1.0));
            let w = Parameter::new("w", uni(rng, &[3, 2, 8], -1.0, 1.0));
            let wl = weights(rng, 3 * 5);
            (vec![x, w], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let x = t.param(&ps[0])?;
                let w = t.param(&ps[1])?;
                let y = t.conv1d(x, w, None, 1, 3, 4)?;
                wsum(t, y, &wl)
            })
        });
    }

    #[test]
    fn grads_bias_and_broadcast_scales() {
        certify(|rng| {
            let x = Parameter::new("x", uni(rng, &[3, 2, 2], -1.0, 1.0));
            let b = Parameter::new("b", uni(rng, &[3], -1.0, 1.0));
            let s0 = Parameter::new("s0", uni(rng, &[3], 0.5, 1.5));
            let sl = Parameter::new("sl", uni(rng, &[2], 0.5, 1.5));
            let wl = weights(rng, 12);
            (vec![x, b, s0, sl], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let x = t.param(&ps[0])?;
                let b = t.param(&ps[1])?;
                let s0 = t.param(&ps[2])?;
                let sl = t.param(&ps[3])?;
                let y = t.add_bias0(x, b)?;
                let y = t.mul_bcast0(y, s0)?;
                let y = t.mul_bcast_last(y, sl)?;
                wsum(t, y, &wl)
            })
        });
    }

    #[test]
    fn grads_sum_last() {
        certify(|rng| {
            let a = Parameter::new("a", uni(rng, &[3, 4], -1.0, 1.0));
            let w = weights(rng, 3);
            (vec![a], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let s = t.sum_last(a)?;
                wsum(t, s, &w)
            })
        });
    }

    #[test]
    fn grads_rms_norm() {
        certify(|rng| {
            let x = Parameter::new("x", uni(rng, &[4, 3], -2.0, 2.0));
            let g = Parameter::new("g", uni(rng, &[4], 0.5, 1.5));
            let w = weights(rng, 12);
            (vec![x, g], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let x = t.param(&ps[0])?;
                let g = t.param(&ps[1])?;
                let y = t.rms_norm(x, g, 1e-5)?;
                wsum(t, y, &w)
            })
        });
    }

    #[test]
    fn grads_ssm_scan_all_six_inputs() {
        certify(|rng| {
            let x = Parameter::new("x", uni(rng, &[3, 5], -1.0, 1.0));
            let dt = Parameter::new("dt", uni(rng, &[3, 5], 0.05, 0.5));
            let a = Parameter::new("a", uni(rng, &[3, 2], -1.5, -0.1));
            let b = Parameter::new("b", uni(rng, &[2, 5], -1.0, 1.0));
            let c = Parameter::new("c", uni(rng, &[2, 5], -1.0, 1.0));
            let d = Parameter::new("d", uni(rng, &[3], -1.0, 1.0));
            let w = weights(rng, 15);
            (vec![x, dt, a, b, c, d], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let x = t.param(&ps[0])?;
                let dt = t.param(&ps[1])?;
                let a = t.param(&ps[2])?;
                let b = t.param(&ps[3])?;
                let c = t.param(&ps[4])?;
                let d = t.param(&ps[5])?;
                let y = t.ssm_scan(x, dt, a, b, c, d)?;
                wsum(t, y, &w)
            })
        });
    }

    #[test]
    fn grads_complex_mask_both_sides() {
        certify(|rng| {
            let m = Parameter::new("m", uni(rng, &[2, 4, 2, 3], -1.0, 1.0));
            let x = Parameter::new("x", uni(rng, &[4, 2, 3], -1.0, 1.0));
            let w = weights(rng, 2 * 4 * 2 * 3);
            (vec![m, x], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let m = t.param(&ps[0])?;
                let x = t.param(&ps[1])?;
                let y = t.complex_mask(m, x)?;
                wsum(t, y, &w)
            })
        });
    }

    #[test]
    fn grads_istft() {
        certify(|rng| {
            let (n_fft, hop, frames, out_len) = (16usize, 4usize, 5usize, 18usize);
            let spec = Parameter::new("spec", uni(rng, &[2, n_fft / 2 + 1, frames], -1.0, 1.0));
            let w = weights(rng, out_len);
            (vec![spec], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let s = t.param(&ps[0])?;
                let y = t.istft(s, n_fft, hop, out_len)?;
                wsum(t, y, &w)
            })
        });
    }

    #[test]
    fn grads_band_merge_with_overlap() {
        certify(|rng| {
            let bands = [(0usize, 3usize), (2, 5), (4, 8)];
            let a = Parameter::new("a", uni(rng, &[2, 3, 2], -1.0, 1.0));
            let b = Parameter::new("b", uni(rng, &[2, 3, 2], -1.0, 1.0));
            let c = Parameter::new("c", uni(rng, &[2, 4, 2], -1.0, 1.0));
            let w = weights(rng, 2 * 8 * 2);
            (vec![a, b, c], move |t: &mut Tape<f64>, ps: &[Parameter<f64>]| {
                let a = t.param(&ps[0])?;
                let b = t.param(&ps[1])?;
                let c = t.param(&ps[2])?;
                let y = t.band_merge(&[a, b, c], &bands, 8)?;
                wsum(t, y, &w)
            })
        });
    }

    #[test]
    fn grads_survive_f32_too() {
        // Same chain in f32 with a looser tolerance: certifies the training
        // dtype runs the identical code path.
        for seed in 0..20u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x = Parameter::new("x", Tensor::<f32>::uniform(&[3, 4], -1.0, 1.0, &mut rng));
            let g = Parameter::new("g", Tensor::<f32>::uniform(&[3], 0.5, 1.5, &mut rng));
            let w: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let opts = GradCheckOpts { h: 1e-2, tol: 2e-2, floor: 1e-3 };
            let report = grad_check(
                |t: &mut Tape<f32>, ps: &[Parameter<f32>]| {
                    let x = t.param(&ps[0])?;
                    let g = t.param(&ps[1])?;
                    let y = t.rms_norm(x, g, 1e-5)?;
                    let yw = t.input_data(&[3, 4], w.clone())?;
                    let p = t.mul(y, yw)?;
                    t.sum_all(p)
                },
                &[x, g],
                &opts,
            )
            .unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
        }
    }
}
