//! ConvBlock (convolution → batch normalization → PReLU), channel L2
//! normalization and parameter initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NormStats, Real, Shape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Filter geometry of one ConvBlock: `kh × kw × cin × cout`, zero padding
/// `(rows, cols)` on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub pad: (usize, usize),
}

impl ConvBlockSpec {
    pub const fn new(kh: usize, kw: usize, cin: usize, cout: usize, pad: usize) -> Self {
        ConvBlockSpec {
            kh,
            kw,
            cin,
            cout,
            pad: (pad, pad),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        let (ph, pw) = (input.h + 2 * self.pad.0, input.w + 2 * self.pad.1);
        if input.c != self.cin || self.kh > ph || self.kw > pw {
            return Err(Error::shape(
                "convblock",
                format!(
                    "{}×{}×{}×{} block cannot consume input {input}",
                    self.kh, self.kw, self.cin, self.cout
                ),
            ));
        }
        Ok(Shape::new(input.n, ph + 1 - self.kh, pw + 1 - self.kw, self.cout))
    }
}

/// Uniform on `±√(6 / fan_in)`.
pub fn uniform_filters<T: Real, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.len())
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("shape length")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T> {
    pub spec: ConvBlockSpec,
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub bn_running_mean: Tensor<T>,
    pub bn_running_var: Tensor<T>,
    pub prelu_slope: Tensor<T>,
}

/// Names of the trainable tensors of a block, in binding order.
pub const BLOCK_TRAINABLE: [&str; 5] = ["filters", "bias", "bn_gamma", "bn_beta", "prelu_slope"];
pub const BLOCK_RUNNING: [&str; 2] = ["bn_running_mean", "bn_running_var"];

impl<T: Real> ConvBlockParams<T> {
    pub fn init<R: Rng + ?Sized>(spec: ConvBlockSpec, rng: &mut R) -> Self {
        let c = spec.cout;
        ConvBlockParams {
            spec,
            filters: uniform_filters(Shape::new(spec.kh, spec.kw, spec.cin, c), spec.fan_in(), rng),
            bias: Tensor::zeros(Shape::vector(c)),
            bn_gamma: Tensor::full(Shape::vector(c), T::one()),
            bn_beta: Tensor::zeros(Shape::vector(c)),
            bn_running_mean: Tensor::zeros(Shape::vector(c)),
            bn_running_var: Tensor::full(Shape::vector(c), T::one()),
            prelu_slope: Tensor::full(Shape::vector(c), T::of(PRELU_INIT)),
        }
    }

    pub fn trainable(&self) -> [&Tensor<T>; 5] {
        [
            &self.filters,
            &self.bias,
            &self.bn_gamma,
            &self.bn_beta,
            &self.prelu_slope,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor<T>; 5] {
        [
            &mut self.filters,
            &mut self.bias,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.prelu_slope,
        ]
    }

    pub fn running(&self) -> [&Tensor<T>; 2] {
        [&self.bn_running_mean, &self.bn_running_var]
    }

    pub fn running_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.bn_running_mean, &mut self.bn_running_var]
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ConvBlockVars {
        ConvBlockVars {
            filters: g.param(self.filters.clone()),
            bias: g.param(self.bias.clone()),
            gamma: g.param(self.bn_gamma.clone()),
            beta: g.param(self.bn_beta.clone()),
            slope: g.param(self.prelu_slope.clone()),
        }
    }

    /// `running ← (1 − m)·running + m·batch`.
    pub fn update_running_stats(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, b) in self.bn_running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + momentum * *b;
        }
        for (r, b) in self.bn_running_var.data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + momentum * *b;
        }
    }

    pub fn cast<U: Real>(&self) -> ConvBlockParams<U> {
        ConvBlockParams {
            spec: self.spec,
            filters: self.filters.cast(),
            bias: self.bias.cast(),
            bn_gamma: self.bn_gamma.cast(),
            bn_beta: self.bn_beta.cast(),
            bn_running_mean: self.bn_running_mean.cast(),
            bn_running_var: self.bn_running_var.cast(),
            prelu_slope: self.prelu_slope.cast(),
        }
    }
}

/// Graph handles of a block's trainable tensors.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub filters: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
    pub slope: Var,
}

impl ConvBlockVars {
    pub fn from_ordered(v: &[Var]) -> Self {
        ConvBlockVars {
            filters: v[0],
            bias: v[1],
            gamma: v[2],
            beta: v[3],
            slope: v[4],
        }
    }

    pub fn ordered(&self) -> [Var; 5] {
        [self.filters, self.bias, self.gamma, self.beta, self.slope]
    }
}

pub struct BlockOutput {
    pub out: Var,
    /// The batch-normalization node; in train mode its batch statistics
    /// feed [`ConvBlockParams::update_running_stats`].
    pub norm: Var,
}

/// `PReLU(BN(conv(x)))`.
pub fn convblock_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: &ConvBlockVars,
    params: &ConvBlockParams<T>,
    mode: Mode,
) -> Result<BlockOutput> {
    let conv = g.conv2d(x, vars.filters, vars.bias, params.spec.pad)?;
    let stats = match mode {
        Mode::Train => NormStats::Batch,
        Mode::Eval => NormStats::Running {
            mean: params.bn_running_mean.data(),
            var: params.bn_running_var.data(),
        },
    };
    let norm = g.batch_norm(conv, vars.gamma, vars.beta, stats, T::of(BN_EPS))?;
    let out = g.prelu(norm, vars.slope)?;
    Ok(BlockOutput { out, norm })
}

/// Unit-length channel vector at every spatial location.
pub fn l2norm_channels<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    g.l2norm_channels(x, T::of(L2_EPS))
}

/// Freshly initialized blocks for a list of block geometries, drawn in order
/// from one generator.
pub fn init_params<T: Real, R: Rng + ?Sized>(rng: &mut R, specs: &[ConvBlockSpec]) -> Vec<ConvBlockParams<T>> {
    specs.iter().map(|s| ConvBlockParams::init(*s, rng)).collect()
}
