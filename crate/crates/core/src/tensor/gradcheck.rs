//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Coordinates sampled per tensor; tensors with fewer entries are
    /// checked exhaustively.
    pub coords_per_tensor: usize,
    pub step: f64,
    pub seed: u64,
    /// Watch for coordinates whose `±step` perturbation moves any PReLU
    /// input across zero or changes any pooling argmax: there the function
    /// is not differentiable within the difference window. Such coordinates
    /// are re-differenced with steps shrunk tenfold up to `kink_retries`
    /// times, then replaced by further samples.
    pub skip_kinks: bool,
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            coords_per_tensor: 200,
            step: 1e-5,
            seed: 0,
            skip_kinks: true,
            kink_retries: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub tensor: usize,
    pub checked: usize,
    /// Coordinates differenced with a step below the configured one.
    pub reduced_step: usize,
    /// Smallest step used (the configured step if none was reduced).
    pub min_step: f64,
    /// Coordinates rejected for straddling a kink at every step.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar computation against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on sampled coordinates of every tensor in
/// `params`.
///
/// `build` receives a fresh graph and one trainable leaf per entry of
/// `params` (same order) and returns the scalar loss node.
pub fn gradcheck<F>(params: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, u64, Option<Vec<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let lv = g.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "gradcheck",
                format!("loss must be a scalar, got {}", lv.shape()),
            ));
        }
        let l = lv.data()[0];
        let kinks = if opts.skip_kinks { g.kink_signature() } else { 0 };
        if !with_grad {
            return Ok((l, kinks, None));
        }
        let mut grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(values)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((l, kinks, Some(out)))
    };

    let (base, base_kinks, analytic) = eval(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradcheck: loss {base} at the unperturbed point"
        )));
    }
    let analytic = analytic.expect("requested gradients");

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport::default();
    for (ti, t) in params.iter().enumerate() {
        // candidate coordinates in random order; small tensors are exhausted
        let order: Vec<usize> = if t.len() <= opts.coords_per_tensor {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), t.len()).into_vec()
        };
        let mut check = TensorCheck {
            tensor: ti,
            checked: 0,
            reduced_step: 0,
            min_step: opts.step,
            skipped: 0,
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &order {
            if check.checked == opts.coords_per_tensor {
                break;
            }
            let orig = work[ti].data()[i];
            let mut numeric = None;
            let mut step = opts.step;
            for attempt in 0..=opts.kink_retries {
                work[ti].data_mut()[i] = orig + step;
                let (plus, plus_kinks, _) = eval(&work, false)?;
                work[ti].data_mut()[i] = orig - step;
                let (minus, minus_kinks, _) = eval(&work, false)?;
                work[ti].data_mut()[i] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradcheck: loss not finite when perturbing tensor {ti} coordinate {i}"
                    )));
                }
                if plus_kinks == base_kinks && minus_kinks == base_kinks {
                    numeric = Some((plus - minus) / (2.0 * step));
                    if attempt > 0 {
                        check.reduced_step += 1;
                        check.min_step = check.min_step.min(step);
                    }
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                check.skipped += 1;
                continue;
            };
            check.checked += 1;
            let a = analytic[ti].data()[i];
            let err = relative_error(a, numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_coord = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.tensors.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(Shape::new(2, 3, 2, 1), |n, h, w, _| (n + 2 * h + 3 * w) as f64 * 0.1);
        let report = gradcheck(&[x], |g, v| Ok(g.sum(v[0])), &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error() < 1e-10);
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let x = Tensor::vector(vec![1.0, 1e-6]);
        // log is undefined once the perturbation pushes 1e-6 below zero.
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let l = g.map_with_derivative(v[0], |_, x| (x.ln(), 1.0 / x));
            Ok(g.sum(l))
        };
        let opts = GradCheckOptions {
            step: 1e-5,
            ..Default::default()
        };
        let err = gradcheck(&[x], build, &opts).unwrap_err().to_string();
        assert!(err.contains("coordinate 1"), "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            // claims d/dx x³ = 2x²
            let c = g.map_with_derivative(v[0], |_, x| (x * x * x, 2.0 * x * x));
            Ok(g.sum(c))
        };
        let report = gradcheck(&[x], build, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error() > 0.1);
    }

    #[test]
    fn kink_crossings_use_smaller_steps() {
        // the first entry sits within the step of the PReLU kink
        let x = Tensor::vector(vec![4e-6, 0.5, -0.8]);
        let slope = Tensor::vector(vec![0.25]);
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let x = g.reshape(v[0], Shape::new(1, 1, 3, 1))?;
            let y = g.prelu(x, v[1])?;
            Ok(g.sum(y))
        };
        let params = [x, slope];
        let strict = GradCheckOptions {
            skip_kinks: false,
            ..Default::default()
        };
        let report = gradcheck(&params, build, &strict).unwrap();
        assert!(report.tensors[0].max_rel_error > 0.1);
        let report = gradcheck(&params, build, &GradCheckOptions::default()).unwrap();
        let t = &report.tensors[0];
        assert_eq!((t.checked, t.reduced_step, t.skipped), (3, 1, 0));
        assert!((t.min_step - 1e-6).abs() < 1e-18);
        assert!(report.max_rel_error() < 1e-8);
        let no_retry = GradCheckOptions {
            kink_retries: 0,
            ..Default::default()
        };
        let report = gradcheck(&params, build, &no_retry).unwrap();
        assert_eq!((report.tensors[0].checked, report.tensors[0].skipped), (2, 1));
    }
}
