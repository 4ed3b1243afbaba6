//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and whatever
//! its backward rule needs. Nodes are only ever appended, so inputs always
//! precede their consumers and a reverse scan is a valid topological order.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::kernels::{self, ConvGeometry};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch-normalization node standardizes with.
#[derive(Clone, Debug)]
pub enum NormStats<'a, T> {
    /// Per-channel mean and biased variance over `(n, h, w)` of the input.
    Batch,
    /// Fixed running estimates; the node is then affine in its input.
    Running { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SumAll(Var),
    Reshape(Var),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    Map {
        x: Var,
        derivative: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geometry: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u8>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    PRelu {
        x: Var,
        slope: Var,
    },
    L2Norm {
        x: Var,
        norms: Vec<T>,
    },
    GaussianGate {
        y1: Var,
        y2: Var,
        p: Var,
    },
    Boost {
        x: Var,
        g: Var,
        through_gate: bool,
    },
    PairDistance {
        a: Var,
        b: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::SumAll(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Map { .. } => "map",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::PRelu { .. } => "prelu",
            Op::L2Norm { .. } => "l2norm",
            Op::GaussianGate { .. } => "gaussian_gate",
            Op::Boost { .. } => "boost",
            Op::PairDistance { .. } => "pair_distance",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(&'static str, T)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch mean and biased variance computed by a batch-normalization node
    /// running on [`NormStats::Batch`].
    pub fn batch_statistics(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean, var, batch: true, ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    /// Hash of the branch taken by every piecewise-linear op: the sign of
    /// each PReLU input and each pooling argmax. Two evaluations with equal
    /// signatures lie on the same linear piece of those ops.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::PRelu { x, .. } => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Scales every gradient emitted by ops named `op` during backward.
    /// Only useful for negative-control tests of gradient checking.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &'static str, factor: T) {
        self.fault = Some((op, factor));
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa} vs {sb}")));
        }
        Ok(sa)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Each batch entry flattened to a `(1, 1, h·w·c)` row.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        self.reshape(x, Shape::new(s.n, 1, 1, s.sample_len()))
    }

    /// Concatenation along the batch axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::stack(&[self.value(a), self.value(b)])?;
        Ok(self.push(v, Op::Concat(a, b), &[a, b]))
    }

    /// Batch entries `start..start + len`.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.n {
            return Err(Error::shape(
                "slice_batch",
                format!("batch range {start}..{} outside batch of {}", start + len, s.n),
            ));
        }
        let per = s.sample_len();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let v = Tensor::new(s.with_n(len), data)?;
        Ok(self.push(v, Op::Slice { x, start }, &[x]))
    }

    /// Elementwise map given as `f(flat_index, value) -> (output, derivative)`.
    pub fn map_with_derivative(&mut self, x: Var, mut f: impl FnMut(usize, T) -> (T, T)) -> Var {
        let input = self.value(x);
        let mut out = Vec::with_capacity(input.len());
        let mut derivative = Vec::with_capacity(input.len());
        for (i, &e) in input.data().iter().enumerate() {
            let (y, dy) = f(i, e);
            out.push(y);
            derivative.push(dy);
        }
        let v = Tensor::new(input.shape(), out).expect("same shape");
        self.push(v, Op::Map { x, derivative }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map_with_derivative(x, |_, v| (v * v, v + v))
    }

    /// Stride-1 cross-correlation. `w` is `(kh, kw, cin, cout)`, `b` holds
    /// `cout` values, and `pad` is `(rows, cols)` of zero padding added on
    /// each side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: (usize, usize)) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let [kh, kw, cin, cout] = ws.dims();
        if xs.c != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channels {} do not match filter cin {cin} (input {xs}, filters {ws})",
                    xs.c
                ),
            ));
        }
        if bs.len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for cout {cout}", bs.len()),
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", format!("empty kernel {ws}")));
        }
        if kh > xs.h + 2 * pad.0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel height {kh} exceeds padded input height {}", xs.h + 2 * pad.0),
            ));
        }
        if kw > xs.w + 2 * pad.1 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel width {kw} exceeds padded input width {}", xs.w + 2 * pad.1),
            ));
        }
        let geometry = ConvGeometry {
            n: xs.n,
            h: xs.h,
            w: xs.w,
            cin,
            kh,
            kw,
            cout,
            pad_h: pad.0,
            pad_w: pad.1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geometry,
        );
        let shape = Shape::new(xs.n, geometry.out_h(), geometry.out_w(), cout);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geometry }, &[x, w, b]))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::shape(
                "maxpool2x2",
                format!("height {} and width {} must both be even", s.h, s.w),
            ));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), (s.n, s.h, s.w, s.c));
        let v = Tensor::new(Shape::new(s.n, s.h / 2, s.w / 2, s.c), out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    fn check_channel_vector(&self, op: &'static str, what: &str, v: Var, c: usize) -> Result<()> {
        let n = self.shape(v).len();
        if n != c {
            return Err(Error::shape(op, format!("{what} has {n} entries for {c} channels")));
        }
        Ok(())
    }

    /// Per-channel batch normalization with affine `gamma`, `beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_, T>, eps: T) -> Result<Var> {
        let s = self.shape(x);
        let c = s.c;
        self.check_channel_vector("batch_norm", "gamma", gamma, c)?;
        self.check_channel_vector("batch_norm", "beta", beta, c)?;
        let xv = self.value(x).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let m = s.n * s.h * s.w;
                if m == 0 {
                    return Err(Error::shape("batch_norm", "empty batch"));
                }
                let inv_m = T::one() / T::of(m as f64);
                let mut mean = vec![T::zero(); c];
                for row in xv.chunks_exact(c) {
                    for (a, v) in mean.iter_mut().zip(row) {
                        *a += *v;
                    }
                }
                mean.iter_mut().for_each(|a| *a *= inv_m);
                let mut var = vec![T::zero(); c];
                for row in xv.chunks_exact(c) {
                    for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = *v - *mu;
                        *a += d * d;
                    }
                }
                var.iter_mut().for_each(|a| *a *= inv_m);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!(
                            "running statistics of length {}/{} for {c} channels",
                            mean.len(),
                            var.len()
                        ),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        // y = x·scale + shift per channel
        let scale: Vec<T> = inv_std.iter().zip(g).map(|(s, g)| *s * *g).collect();
        let shift: Vec<T> = bt
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((b, m), s)| *b - *m * *s)
            .collect();
        let mut out = vec![T::zero(); xv.len()];
        for (orow, row) in out.chunks_exact_mut(c).zip(xv.chunks_exact(c)) {
            for (((o, v), s), b) in orow.iter_mut().zip(row).zip(&scale).zip(&shift) {
                *o = *v * *s + *b;
            }
        }
        let v = Tensor::new(s, out)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
                batch,
            },
            &[x, gamma, beta],
        ))
    }

    /// `v` where `v ≥ 0`, `slope[c]·v` elsewhere.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let c = self.shape(x).c;
        self.check_channel_vector("prelu", "slope", slope, c)?;
        let a = self.value(slope).data();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (orow, row) in out.chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
            for ((o, v), s) in orow.iter_mut().zip(row).zip(a) {
                *o = if *v >= T::zero() { *v } else { *s * *v };
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        Ok(self.push(v, Op::PRelu { x, slope }, &[x, slope]))
    }

    /// Divides the channel vector at every `(n, h, w)` by `max(‖v‖₂, eps)`.
    pub fn l2norm_channels(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let c = xv.shape().c.max(1);
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(xv.len() / c);
        for row in xv.data().chunks_exact(c) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|v| *v / n));
        }
        let v = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(v, Op::L2Norm { x, norms }, &[x])
    }

    /// `exp(−(y1 − y2)² / p²)` elementwise, `p` broadcast over channels.
    pub fn gaussian_gate(&mut self, y1: Var, y2: Var, p: Var) -> Result<Var> {
        let s = self.same_shape("gaussian_gate", y1, y2)?;
        self.check_channel_vector("gaussian_gate", "p", p, s.c)?;
        let pv = self.value(p).data();
        let a = self.value(y1).data();
        let b = self.value(y2).data();
        let mut out = Vec::with_capacity(a.len());
        for (ra, rb) in a.chunks_exact(s.c).zip(b.chunks_exact(s.c)) {
            for ((u, v), p) in ra.iter().zip(rb).zip(pv) {
                let d = *u - *v;
                out.push((-(d * d) / (*p * *p)).exp());
            }
        }
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::GaussianGate { y1, y2, p }, &[y1, y2, p]))
    }

    /// `x + x ⊙ G`, where `G` repeats the one-column gate `g` across the
    /// width of `x`. With `through_gate = false` the gate is treated as a
    /// constant on backward.
    pub fn boost(&mut self, x: Var, g: Var, through_gate: bool) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(g));
        if gs != Shape::new(xs.n, xs.h, 1, xs.c) {
            return Err(Error::shape(
                "boost",
                format!("gate {gs} cannot be repeated across input {xs}"),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(g).data();
        let mut out = Vec::with_capacity(xv.len());
        for (row, grow) in xv.chunks_exact(xs.w * xs.c).zip(gv.chunks_exact(xs.c)) {
            for col in row.chunks_exact(xs.c) {
                out.extend(col.iter().zip(grow).map(|(v, g)| *v + *v * *g));
            }
        }
        let v = Tensor::new(xs, out)?;
        let inputs: &[Var] = if through_gate { &[x, g] } else { &[x] };
        Ok(self.push(v, Op::Boost { x, g, through_gate }, inputs))
    }

    /// Euclidean distance between matching batch entries; `(n, 1, 1, 1)`.
    pub fn pair_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("pair_distance", a, b)?;
        let per = s.sample_len();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let d: Vec<T> = (0..s.n)
            .map(|i| {
                let r = i * per..(i + 1) * per;
                av[r.clone()]
                    .iter()
                    .zip(&bv[r])
                    .map(|(x, y)| (*x - *y) * (*x - *y))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let v = Tensor::new(Shape::new(s.n, 1, 1, 1), d)?;
        Ok(self.push(v, Op::PairDistance { a, b }, &[a, b]))
    }

    /// Reverse sweep from the single-element `loss`. Returns gradients for
    /// every leaf created with [`Graph::param`] that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be a scalar, got {ls}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let mut emitted = self.input_grads(node, dy)?;
            if let Some((name, factor)) = self.fault {
                if name == node.op.name() {
                    for (_, g) in emitted.iter_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            for (v, g) in emitted {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Elementwise ops write their input gradient over `dy` in place.
    fn input_grads(&self, node: &Node<T>, mut dy: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        match &node.op {
            Op::Add(a, b) => {
                let other = if self.wants(*b) { Some(dy.clone()) } else { None };
                let mut out = vec![(*a, dy)];
                out.extend(other.map(|d| (*b, d)));
                Ok(out)
            }
            Op::Scale(x, f) => {
                dy.data_mut().iter_mut().for_each(|v| *v *= *f);
                Ok(vec![(*x, dy)])
            }
            Op::Reshape(x) => Ok(vec![(*x, dy.reshape(self.shape(*x))?)]),
            Op::Map { x, derivative } => {
                for (g, k) in dy.data_mut().iter_mut().zip(derivative) {
                    *g *= *k;
                }
                Ok(vec![(*x, dy)])
            }
            Op::PRelu { x, slope } => {
                let xv = self.value(*x);
                let c = xv.shape().c;
                let a = self.value(*slope).data();
                let mut da = vec![T::zero(); c];
                for (drow, row) in dy.data_mut().chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
                    for ch in 0..c {
                        let neg = row[ch] < T::zero();
                        da[ch] += if neg { drow[ch] * row[ch] } else { T::zero() };
                        drow[ch] = if neg { drow[ch] * a[ch] } else { drow[ch] };
                    }
                }
                Ok(vec![(*x, dy), (*slope, Tensor::new(self.shape(*slope), da)?)])
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
                ..
            } => {
                let xv = self.value(*x);
                let c = xv.shape().c;
                let g = self.value(*gamma).data();
                // dgamma = Σ dy·(x − μ)·σ⁻¹, accumulated as Σ dy·x − μ·Σ dy
                let mut dyx = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (row, drow) in xv.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
                    for (((a, b), v), d) in dyx.iter_mut().zip(dbeta.iter_mut()).zip(row).zip(drow) {
                        *a += *d * *v;
                        *b += *d;
                    }
                }
                let dgamma: Vec<T> = (0..c)
                    .map(|ch| (dyx[ch] - mean[ch] * dbeta[ch]) * inv_std[ch])
                    .collect();
                let mut out = Vec::with_capacity(3);
                out.push((*gamma, Tensor::new(self.shape(*gamma), dgamma.clone())?));
                out.push((*beta, Tensor::new(self.shape(*beta), dbeta.clone())?));
                if self.wants(*x) {
                    // dx = k·dy + a·x + b per channel
                    let k: Vec<T> = (0..c).map(|ch| g[ch] * inv_std[ch]).collect();
                    let (a, b): (Vec<T>, Vec<T>) = if *batch {
                        let m = T::of((xv.len() / c) as f64);
                        let a: Vec<T> = (0..c).map(|ch| -k[ch] * inv_std[ch] * dgamma[ch] / m).collect();
                        let b = (0..c).map(|ch| -k[ch] * dbeta[ch] / m - a[ch] * mean[ch]).collect();
                        (a, b)
                    } else {
                        (vec![T::zero(); c], vec![T::zero(); c])
                    };
                    for (drow, row) in dy.data_mut().chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
                        for ch in 0..c {
                            drow[ch] = k[ch] * drow[ch] + a[ch] * row[ch] + b[ch];
                        }
                    }
                    out.push((*x, dy));
                }
                Ok(out)
            }
            _ => self.input_grads_copying(node, &dy),
        }
    }

    fn input_grads_copying(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let dyv = dy.data();
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf
            | Op::Add(..)
            | Op::Scale(..)
            | Op::Reshape(..)
            | Op::Map { .. }
            | Op::PRelu { .. }
            | Op::BatchNorm { .. } => unreachable!("handled in place"),
            Op::Sub(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = dyv.iter().zip(bv.data()).map(|(g, y)| *g * *y).collect();
                    out.push((*a, Tensor::new(av.shape(), d)?));
                }
                if self.wants(*b) {
                    let d = dyv.iter().zip(av.data()).map(|(g, x)| *g * *x).collect();
                    out.push((*b, Tensor::new(bv.shape(), d)?));
                }
            }
            Op::SumAll(x) => out.push((*x, Tensor::full(self.shape(*x), dyv[0]))),
            Op::Concat(a, b) => {
                let split = self.value(*a).len();
                out.push((*a, Tensor::new(self.shape(*a), dyv[..split].to_vec())?));
                out.push((*b, Tensor::new(self.shape(*b), dyv[split..].to_vec())?));
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x);
                let mut d = Tensor::zeros(s);
                let off = start * s.sample_len();
                d.data_mut()[off..off + dyv.len()].copy_from_slice(dyv);
                out.push((*x, d));
            }
            Op::Conv2d { x, w, b, geometry } => {
                let grads = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dyv,
                    geometry,
                    self.wants(*x),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                out.push((*w, Tensor::new(self.shape(*w), grads.dw)?));
                out.push((*b, Tensor::new(self.shape(*b), grads.db)?));
            }
            Op::MaxPool { x, argmax } => {
                let s = self.shape(*x);
                let dims = (s.n, s.h, s.w, s.c);
                let mut d = Tensor::zeros(s);
                let dd = d.data_mut();
                for (o, (g, &a)) in dyv.iter().zip(argmax).enumerate() {
                    dd[kernels::pool_input_index(o, a, dims)] += *g;
                }
                out.push((*x, d));
            }
            Op::L2Norm { x, norms } => {
                let xv = self.value(*x);
                let c = xv.shape().c.max(1);
                let y = node.value.data();
                let mut dx = Vec::with_capacity(xv.len());
                for (((row, yrow), drow), n) in xv
                    .data()
                    .chunks_exact(c)
                    .zip(y.chunks_exact(c))
                    .zip(dyv.chunks_exact(c))
                    .zip(norms)
                {
                    let raw = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
                    if raw < *n {
                        // Clamped by eps: the map is linear there.
                        dx.extend(drow.iter().map(|g| *g / *n));
                    } else {
                        let dot: T = yrow.iter().zip(drow).map(|(a, b)| *a * *b).sum();
                        dx.extend(yrow.iter().zip(drow).map(|(yv, g)| (*g - *yv * dot) / *n));
                    }
                }
                out.push((*x, Tensor::new(xv.shape(), dx)?));
            }
            Op::GaussianGate { y1, y2, p } => {
                let s = self.shape(*y1);
                let c = s.c;
                let (a, b) = (self.value(*y1).data(), self.value(*y2).data());
                let pv = self.value(*p).data();
                let gv = node.value.data();
                let mut d1 = Vec::with_capacity(a.len());
                let mut dp = vec![T::zero(); c];
                for i in 0..a.len() {
                    let ch = i % c;
                    let d = a[i] - b[i];
                    let p2 = pv[ch] * pv[ch];
                    let two = T::of(2.0);
                    let gd = dyv[i] * gv[i];
                    d1.push(-gd * two * d / p2);
                    dp[ch] += gd * two * d * d / (p2 * pv[ch]);
                }
                let d2: Vec<T> = d1.iter().map(|v| -*v).collect();
                out.push((*y1, Tensor::new(s, d1)?));
                out.push((*y2, Tensor::new(s, d2)?));
                out.push((*p, Tensor::new(self.shape(*p), dp)?));
            }
            Op::Boost { x, g, through_gate } => {
                let xs = self.shape(*x);
                let xv = self.value(*x).data();
                let gv = self.value(*g).data();
                let row_len = xs.w * xs.c;
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![T::zero(); gv.len()];
                for (r, (row, drow)) in xv.chunks_exact(row_len).zip(dyv.chunks_exact(row_len)).enumerate() {
                    let grow = &gv[r * xs.c..(r + 1) * xs.c];
                    let dgrow = &mut dg[r * xs.c..(r + 1) * xs.c];
                    for (col, dcol) in row.chunks_exact(xs.c).zip(drow.chunks_exact(xs.c)) {
                        for ch in 0..xs.c {
                            dx.push(dcol[ch] * (T::one() + grow[ch]));
                            dgrow[ch] += dcol[ch] * col[ch];
                        }
                    }
                }
                out.push((*x, Tensor::new(xs, dx)?));
                if *through_gate {
                    out.push((*g, Tensor::new(self.shape(*g), dg)?));
                }
            }
            Op::PairDistance { a, b } => {
                let s = self.shape(*a);
                let per = s.sample_len();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let dist = node.value.data();
                let mut da = Vec::with_capacity(av.len());
                for i in 0..s.n {
                    let k = if dist[i] > T::zero() {
                        dyv[i] / dist[i]
                    } else {
                        T::zero()
                    };
                    let r = i * per..(i + 1) * per;
                    da.extend(av[r.clone()].iter().zip(&bv[r]).map(|(x, y)| k * (*x - *y)));
                }
                let db = da.iter().map(|v| -*v).collect();
                out.push((*a, Tensor::new(s, da)?));
                out.push((*b, Tensor::new(s, db)?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let m = g.mul(x, c).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn reused_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.5]));
        let a = g.add(x, x).unwrap();
        let grads = g.backward(a).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn pool_rejects_odd_input() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 1)));
        let err = g.maxpool2x2(x).unwrap_err().to_string();
        assert!(err.contains("height 3"), "{err}");
    }

    #[test]
    fn conv_names_bad_channel_dim() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 4, 4, 2)));
        let w = g.constant(Tensor::zeros(Shape::new(3, 3, 3, 1)));
        let b = g.constant(Tensor::zeros(Shape::vector(1)));
        let err = g.conv2d(x, w, b, (0, 0)).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
    }

    #[test]
    fn boost_without_gate_path_stops_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(Shape::new(1, 1, 2, 1), 2.0));
        let gate = g.param(Tensor::full(Shape::new(1, 1, 1, 1), 0.5));
        let a = g.boost(x, gate, false).unwrap();
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, 1.5]);
        assert!(grads.get(gate).is_none());
    }
}
