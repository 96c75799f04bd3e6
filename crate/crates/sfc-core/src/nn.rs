//! Parameter-holding layers. Everything is channels-first: the feature axis
//! is axis 0 and layers map `(in, ...)` to `(out, ...)` positionwise, which
//! matches the `(2M, F, T)` / `(D, K, T)` tensor layouts used throughout.
//!
//! Construction draws from a caller-supplied seeded RNG in a fixed order
//! (weights before biases, fields in declaration order), so a model built
//! from a seed is reproducible. Weights are U(-1/sqrt(fan_in), +1/sqrt(fan_in)),
//! biases start at zero, norm gains at one.

use crate::error::Result;
use crate::tensor::{Parameter, Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha12Rng;

/// Visits every parameter of a layer (or model) in a stable order. The order
/// defines checkpoint layout and optimizer state slots.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    fn collect_params(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }
}

impl<T: Scalar> Params<T> for Vec<Parameter<T>> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        for p in self {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for p in self {
            f(p);
        }
    }
}

/// Overwrite a model's parameter values from a slice in visit order (the
/// same order `collect_params` produces). Names must line up.
pub fn load_params<T: Scalar>(model: &mut impl Params<T>, ps: &[Parameter<T>]) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    model.visit_mut(&mut |p| {
        if i < ps.len() && ps[i].name == p.name {
            p.value = ps[i].value.clone();
        } else if err.is_none() {
            err = Some(format!(
                "slot {i}: model has {:?}, slice has {:?}",
                p.name,
                ps.get(i).map(|q| &q.name)
            ));
        }
        i += 1;
    });
    if i != ps.len() && err.is_none() {
        err = Some(format!("model has {i} parameters, slice has {}", ps.len()));
    }
    match err {
        Some(detail) => Err(crate::error::SfcError::Config(format!("parameter load: {detail}"))),
        None => Ok(()),
    }
}

pub fn init_uniform<T: Scalar>(
    name: impl Into<String>,
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha12Rng,
) -> Parameter<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Parameter::new(name, Tensor::uniform(shape, -bound, bound, rng))
}

/// Affine map on the feature axis: `(in, ...) -> (out, ...)`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Option<Parameter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha12Rng) -> Self {
        let w = init_uniform(format!("{name}.w"), &[d_out, d_in], d_in, rng);
        let b = bias.then(|| Parameter::new(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d_in = self.w.value.shape()[1];
        let cols = shape.iter().product::<usize>() / d_in;
        let flat = tape.reshape(x, &[d_in, cols])?;
        let w = tape.param(&self.w)?;
        let mut y = tape.matmul(w, flat)?;
        if let Some(b) = &self.b {
            let bv = tape.param(b)?;
            y = tape.add_bias0(y, bv)?;
        }
        let mut out_shape = shape;
        out_shape[0] = self.w.value.shape()[0];
        tape.reshape(y, &out_shape)
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// Same-size 2-D convolution `(C_in,H,W) -> (C_out,H,W)`, odd kernel.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Option<Parameter<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = init_uniform(format!("{name}.w"), &[c_out, c_in, kh, kw], c_in * kh * kw, rng);
        let b = bias.then(|| Parameter::new(format!("{name}.b"), Tensor::zeros(&[c_out])));
        Conv2d { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w)?;
        let b = self.b.as_ref().map(|b| tape.param(b)).transpose()?;
        tape.conv2d(x, w, b)
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// Same-size 2-D transpose convolution `(C_in,H,W) -> (C_out,H,W)`.
#[derive(Debug, Clone)]
pub struct Deconv2d<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Option<Parameter<T>>,
}

impl<T: Scalar> Deconv2d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = init_uniform(format!("{name}.w"), &[c_in, c_out, kh, kw], c_in * kh * kw, rng);
        let b = bias.then(|| Parameter::new(format!("{name}.b"), Tensor::zeros(&[c_out])));
        Deconv2d { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w)?;
        let b = self.b.as_ref().map(|b| tape.param(b)).transpose()?;
        tape.deconv2d(x, w, b)
    }
}

impl<T: Scalar> Params<T> for Deconv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// Grouped 1-D convolution with explicit padding `(C_in,L) -> (C_out,L')`.
#[derive(Debug, Clone)]
pub struct Conv1d<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Option<Parameter<T>>,
    pub groups: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl<T: Scalar> Conv1d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        groups: usize,
        pad_left: usize,
        pad_right: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let cpg = c_in / groups;
        let w = init_uniform(format!("{name}.w"), &[c_out, cpg, k], cpg * k, rng);
        let b = bias.then(|| Parameter::new(format!("{name}.b"), Tensor::zeros(&[c_out])));
        Conv1d { w, b, groups, pad_left, pad_right }
    }

    /// Length-preserving layer for kernel k: pads (k/2, (k-1)/2).
    pub fn same(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self::new(name, c_in, c_out, k, 1, k / 2, (k - 1) / 2, bias, rng)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w)?;
        let b = self.b.as_ref().map(|b| tape.param(b)).transpose()?;
        tape.conv1d(x, w, b, self.groups, self.pad_left, self.pad_right)
    }
}

impl<T: Scalar> Params<T> for Conv1d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// RMS normalization over the feature axis with learnable gain, gain init 1.
#[derive(Debug, Clone)]
pub struct RmsNorm<T: Scalar> {
    pub g: Parameter<T>,
    pub eps: T,
}

impl<T: Scalar> RmsNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        RmsNorm {
            g: Parameter::new(format!("{name}.g"), Tensor::full(&[dim], T::one())),
            eps: T::f(1e-8),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.g)?;
        tape.rms_norm(x, g, self.eps)
    }
}

impl<T: Scalar> Params<T> for RmsNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.g);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.g);
    }
}

/// Gated linear unit along the feature axis: split `(2C, ...)` in half,
/// gate the first half with the sigmoid of the second.
pub fn glu0<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c2 = tape.shape(x)[0];
    let half = c2 / 2;
    let a = tape.narrow(x, 0, 0, half)?;
    let b = tape.narrow(x, 0, half, half)?;
    let gate = tape.sigmoid(b)?;
    tape.mul(a, gate)
}

/// Two-layer feed-forward with a swish gate, bias-free:
/// `down( silu(gate(x)) * up(x) )`.
#[derive(Debug, Clone)]
pub struct SwiGluFfn<T: Scalar> {
    pub w_gate: Linear<T>,
    pub w_up: Linear<T>,
    pub w_down: Linear<T>,
}

impl<T: Scalar> SwiGluFfn<T> {
    pub fn new(name: &str, d_in: usize, d_inner: usize, d_out: usize, rng: &mut ChaCha12Rng) -> Self {
        SwiGluFfn {
            w_gate: Linear::new(&format!("{name}.gate"), d_in, d_inner, false, rng),
            w_up: Linear::new(&format!("{name}.up"), d_in, d_inner, false, rng),
            w_down: Linear::new(&format!("{name}.down"), d_inner, d_out, false, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = self.w_gate.forward(tape, x)?;
        let g = tape.silu(g)?;
        let u = self.w_up.forward(tape, x)?;
        let h = tape.mul(g, u)?;
        self.w_down.forward(tape, h)
    }
}

impl<T: Scalar> Params<T> for SwiGluFfn<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.w_gate.visit(f);
        self.w_up.visit(f);
        self.w_down.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.w_gate.visit_mut(f);
        self.w_up.visit_mut(f);
        self.w_down.visit_mut(f);
    }
}

/// Feed-forward with 1-D convolutions in place of the linears: a single conv
/// produces gate and value halves (swish-gated), a second conv projects back.
/// Kernel 8, stride 1, length-preserving padding.
#[derive(Debug, Clone)]
pub struct ConvSwiGluFfn<T: Scalar> {
    pub conv_in: Conv1d<T>,
    pub conv_out: Conv1d<T>,
}

impl<T: Scalar> ConvSwiGluFfn<T> {
    pub fn new(name: &str, d: usize, hidden: usize, kernel: usize, rng: &mut ChaCha12Rng) -> Self {
        ConvSwiGluFfn {
            conv_in: Conv1d::same(&format!("{name}.conv_in"), d, 2 * hidden, kernel, true, rng),
            conv_out: Conv1d::same(&format!("{name}.conv_out"), hidden, d, kernel, true, rng),
        }
    }

    /// x: (D, L) -> (D, L).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h2 = self.conv_in.forward(tape, x)?;
        let hidden = tape.shape(h2)[0] / 2;
        let val = tape.narrow(h2, 0, 0, hidden)?;
        let gate = tape.narrow(h2, 0, hidden, hidden)?;
        let gate = tape.silu(gate)?;
        let h = tape.mul(val, gate)?;
        self.conv_out.forward(tape, h)
    }
}

impl<T: Scalar> Params<T> for ConvSwiGluFfn<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.conv_in.visit(f);
        self.conv_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv_in.visit_mut(f);
        self.conv_out.visit_mut(f);
    }
}

/// Multi-head self-attention over the last axis, no positional encoding.
/// Input `(D, B, L)`: B independent sequences of length L attend among
/// themselves; scores are scaled by 1/sqrt(D/H).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(name: &str, d: usize, heads: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(d % heads == 0, "feature dim {d} must divide into {heads} heads");
        MultiHeadAttention {
            q: Linear::new(&format!("{name}.q"), d, d, true, rng),
            k: Linear::new(&format!("{name}.k"), d, d, true, rng),
            v: Linear::new(&format!("{name}.v"), d, d, true, rng),
            o: Linear::new(&format!("{name}.o"), d, d, true, rng),
            heads,
        }
    }

    /// (D, B, L) -> per-head batch (B*H, L, d_h).
    fn to_batch_heads(&self, tape: &mut Tape<T>, x: Var, b: usize, l: usize) -> Result<Var> {
        let d = tape.shape(x)[0];
        let dh = d / self.heads;
        let split = tape.reshape(x, &[self.heads, dh, b, l])?;
        let perm = tape.permute(split, &[2, 0, 3, 1])?; // (B, H, L, dh)
        tape.reshape(perm, &[b * self.heads, l, dh])
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (d, b, l) = (shape[0], shape[1], shape[2]);
        let dh = d / self.heads;
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let qb = self.to_batch_heads(tape, q, b, l)?;
        let kb = self.to_batch_heads(tape, k, b, l)?;
        let vb = self.to_batch_heads(tape, v, b, l)?;
        let kt = tape.permute(kb, &[0, 2, 1])?; // (B*H, dh, L)
        let scores = tape.batch_matmul(qb, kt)?;
        let scores = tape.mul_scalar(scores, T::f(1.0 / (dh as f64).sqrt()))?;
        let attn = tape.softmax_last(scores)?;
        let ctx = tape.batch_matmul(attn, vb)?; // (B*H, L, dh)
        let unbatch = tape.reshape(ctx, &[b, self.heads, l, dh])?;
        let back = tape.permute(unbatch, &[1, 3, 0, 2])?; // (H, dh, B, L)
        let merged = tape.reshape(back, &[d, b, l])?;
        self.o.forward(tape, merged)
    }
}

impl<T: Scalar> Params<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.o.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.o.visit_mut(f);
    }
}
