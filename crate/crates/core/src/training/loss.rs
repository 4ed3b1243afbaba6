//! Contrastive loss. Label 0 marks a positive (same identity) pair and 1 a
//! negative pair.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

pub const DEFAULT_MARGIN: f64 = 1.0;

/// Loss of one pair at distance `d` and its derivative in `d`:
/// `(1 − l)·½d² + l·½·max(0, m − d)²`.
pub fn contrastive_loss(d: f64, label: u8, margin: f64) -> Result<(f64, f64)> {
    match label {
        0 => Ok((0.5 * d * d, d)),
        1 => {
            let gap = (margin - d).max(0.0);
            Ok((0.5 * gap * gap, -gap))
        }
        other => Err(Error::InvalidArgument(format!(
            "pair label must be 0 or 1, got {other}"
        ))),
    }
}

/// Mean contrastive loss over a batch of distances `(n, 1, 1, 1)`.
pub fn contrastive_loss_node<T: Real>(g: &mut Graph<T>, d: Var, labels: &[u8], margin: f64) -> Result<Var> {
    let n = g.shape(d).len();
    if n != labels.len() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{n} distances for {} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|l| **l > 1) {
        return Err(Error::InvalidArgument(format!("pair label must be 0 or 1, got {bad}")));
    }
    let per_pair = g.map_with_derivative(d, |i, d| {
        let (l, dl) = contrastive_loss(d.as_f64(), labels[i], margin).expect("labels checked");
        (T::of(l), T::of(dl))
    });
    Ok(g.mean(per_pair))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn reference_values() {
        assert_eq!(contrastive_loss(0.0, 0, 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(contrastive_loss(1.3, 1, 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(contrastive_loss(1.0, 1, 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(contrastive_loss(0.0, 1, 1.0).unwrap(), (0.5, -1.0));
        assert!(contrastive_loss(0.5, 2, 1.0).is_err());
    }

    #[test]
    fn batch_loss_is_the_mean() {
        let mut g = Graph::<f64>::new();
        let d = g.param(Tensor::new(Shape::new(2, 1, 1, 1), vec![0.0, 0.4]).unwrap());
        let l = contrastive_loss_node(&mut g, d, &[1, 0], 1.0).unwrap();
        assert!((g.value(l).data()[0] - (0.5 + 0.08) / 2.0).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(d).unwrap().data(), &[-0.5, 0.2]);
    }
}
