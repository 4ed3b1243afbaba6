//! Matching gate.
//!
//! Given the same mid-level feature map from both siamese streams, each
//! horizontal stripe (one row, all columns) is summarized into a single
//! `h`-vector by a full-width convolution followed by PReLU. The two
//! summaries are compared per channel through a Gaussian,
//! `g = exp(−(y1 − y2)² / p²)`, and the gate, repeated across the stripe,
//! boosts both inputs as `a = x + x ⊙ G` before channel-wise L2
//! normalization.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{l2norm_channels, uniform_filters, PRELU_INIT};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Lower bound enforced on every `p` entry after each optimizer step.
pub const P_FLOOR: f64 = 1e-3;

pub const GATE_TRAINABLE: [&str; 4] = ["w", "b", "slope", "p"];

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingGateParams<T> {
    /// `(1, columns, channels, channels)`: one full-width filter per output channel.
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub slope: Tensor<T>,
    pub p: Tensor<T>,
}

impl<T: Real> MatchingGateParams<T> {
    pub fn init<R: Rng + ?Sized>(columns: usize, channels: usize, p_init: f64, rng: &mut R) -> Self {
        let shape = Shape::new(1, columns, channels, channels);
        MatchingGateParams {
            w: uniform_filters(shape, columns * channels, rng),
            b: Tensor::zeros(Shape::vector(channels)),
            slope: Tensor::full(Shape::vector(channels), T::of(PRELU_INIT)),
            p: Tensor::full(Shape::vector(channels), T::of(p_init)),
        }
    }

    pub fn columns(&self) -> usize {
        self.w.shape().h
    }

    pub fn channels(&self) -> usize {
        self.w.shape().c
    }

    pub fn trainable(&self) -> [&Tensor<T>; 4] {
        [&self.w, &self.b, &self.slope, &self.p]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w, &mut self.b, &mut self.slope, &mut self.p]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> GateVars {
        GateVars {
            w: g.param(self.w.clone()),
            b: g.param(self.b.clone()),
            slope: g.param(self.slope.clone()),
            p: g.param(self.p.clone()),
        }
    }

    pub fn clamp_p(&mut self) {
        let floor = T::of(P_FLOOR);
        for v in self.p.data_mut() {
            if !(*v >= floor) {
                *v = floor;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> MatchingGateParams<U> {
        MatchingGateParams {
            w: self.w.cast(),
            b: self.b.cast(),
            slope: self.slope.cast(),
            p: self.p.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w: Var,
    pub b: Var,
    pub slope: Var,
    pub p: Var,
}

impl GateVars {
    pub fn from_ordered(v: &[Var]) -> Self {
        GateVars {
            w: v[0],
            b: v[1],
            slope: v[2],
            p: v[3],
        }
    }

    pub fn ordered(&self) -> [Var; 4] {
        [self.w, self.b, self.slope, self.p]
    }
}

/// Collapses every row of `x` `(n, rows, cols, h)` to `(n, rows, 1, h)`.
pub fn summarize_stripes<T: Real>(g: &mut Graph<T>, x: Var, vars: &GateVars) -> Result<Var> {
    let (xs, ws) = (g.shape(x), g.shape(vars.w));
    if ws.h != xs.w || ws.n != 1 {
        return Err(Error::shape(
            "summarize_stripes",
            format!("summarizer {ws} must span the full input width {} in one row", xs.w),
        ));
    }
    let y = g.conv2d(x, vars.w, vars.b, (0, 0))?;
    g.prelu(y, vars.slope)
}

/// Per-channel Gaussian similarity of two stripe summaries.
pub fn gate_values<T: Real>(g: &mut Graph<T>, y1: Var, y2: Var, p: Var) -> Result<Var> {
    g.gaussian_gate(y1, y2, p)
}

/// `x + x ⊙ G` for both streams, then channel L2 normalization.
pub fn boost<T: Real>(g: &mut Graph<T>, x1: Var, x2: Var, gate: Var, through_gate: bool) -> Result<(Var, Var)> {
    let a1 = g.boost(x1, gate, through_gate)?;
    let a2 = g.boost(x2, gate, through_gate)?;
    Ok((l2norm_channels(g, a1), l2norm_channels(g, a2)))
}

pub struct GateOutput {
    pub a1: Var,
    pub a2: Var,
    /// `(n, rows, 1, channels)` gate values.
    pub gate: Var,
}

/// Summarize → compare → boost. With `through_gate = false` the mask is
/// treated as a constant on backward, so neither stream receives gradient
/// through the other.
pub fn matching_gate_forward<T: Real>(
    g: &mut Graph<T>,
    x1: Var,
    x2: Var,
    vars: &GateVars,
    through_gate: bool,
) -> Result<GateOutput> {
    let (s1, s2) = (g.shape(x1), g.shape(x2));
    if s1 != s2 {
        return Err(Error::shape("matching_gate", format!("streams differ: {s1} vs {s2}")));
    }
    let y1 = summarize_stripes(g, x1, vars)?;
    let y2 = summarize_stripes(g, x2, vars)?;
    let gate = gate_values(g, y1, y2, vars.p)?;
    let (a1, a2) = boost(g, x1, x2, gate, through_gate)?;
    Ok(GateOutput { a1, a2, gate })
}

/// Gate values of one pair, `rows × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMask<T> {
    pub rows: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Real> GateMask<T> {
    /// Entry `i` of a `(n, rows, 1, channels)` gate tensor.
    pub fn from_tensor(t: &Tensor<T>, i: usize) -> Result<Self> {
        let s = t.shape();
        if s.w != 1 || i >= s.n {
            return Err(Error::shape(
                "gate_mask",
                format!("cannot take pair {i} of gate tensor {s}"),
            ));
        }
        Ok(GateMask {
            rows: s.h,
            channels: s.c,
            values: t.sample(i).into_data(),
        })
    }

    pub fn get(&self, row: usize, channel: usize) -> T {
        self.values[row * self.channels + channel]
    }

    /// The gate repeated across `width` columns, `(1, rows, width, channels)`.
    pub fn broadcast(&self, width: usize) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, self.rows, width, self.channels), |_, r, _, c| {
            self.get(r, c)
        })
    }

    /// Mean over channels for every row.
    pub fn row_profile(&self) -> Vec<T> {
        self.values
            .chunks_exact(self.channels)
            .map(|row| row.iter().copied().sum::<T>() / T::of(self.channels as f64))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks_exact(self.channels) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn profile_csv(&self) -> String {
        let mut s = String::from("row,mean_gate\n");
        for (r, v) in self.row_profile().iter().enumerate() {
            let _ = writeln!(s, "{r},{v:e}");
        }
        s
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut values = Vec::new();
        let mut rows = 0;
        let mut channels = None;
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Vec<T> = line
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map(T::of)
                        .map_err(|e| format!("line {}: {e}", ln + 1))
                })
                .collect::<std::result::Result<_, _>>()?;
            match channels {
                None => channels = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(format!("line {}: {} values, expected {c}", ln + 1, row.len()))
                }
                _ => {}
            }
            values.extend(row);
            rows += 1;
        }
        Ok(GateMask {
            rows,
            channels: channels.unwrap_or(0),
            values,
        })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|d| Error::format(path, d))
    }
}
