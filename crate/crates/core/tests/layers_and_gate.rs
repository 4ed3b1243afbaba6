use gscnn::gate::{boost, gate_values, matching_gate_forward, summarize_stripes, GateMask, MatchingGateParams};
use gscnn::layers::{convblock_forward, l2norm_channels, ConvBlockParams, ConvBlockSpec, ConvBlockVars, Mode};
use gscnn::rng::{stream, Stream};
use gscnn::tensor::{gradcheck, GradCheckOptions};
use gscnn::{Graph, Shape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let r = random(g.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
    let c = g.constant(r);
    let m = g.mul(y, c).unwrap();
    g.sum(m)
}

fn block(spec: ConvBlockSpec, seed: u64) -> ConvBlockParams<f64> {
    let mut p = ConvBlockParams::init(spec, &mut stream(seed, Stream::Init));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    // move away from the initial values so every term of the backward rule matters
    p.bias = random(Shape::vector(spec.cout), &mut rng);
    p.bn_gamma = random(Shape::vector(spec.cout), &mut rng).map(|v| 1.0 + 0.5 * v);
    p.bn_beta = random(Shape::vector(spec.cout), &mut rng);
    p.bn_running_mean = random(Shape::vector(spec.cout), &mut rng);
    p.bn_running_var = random(Shape::vector(spec.cout), &mut rng).map(|v| 1.0 + 0.5 * v);
    p
}

#[test]
fn convblock_gradcheck_both_modes() {
    let spec = ConvBlockSpec::new(3, 3, 2, 3, 1);
    let p = block(spec, 4);
    let x = random(Shape::new(3, 4, 4, 2), &mut ChaCha8Rng::seed_from_u64(9));
    for mode in [Mode::Train, Mode::Eval] {
        let mut params = vec![x.clone()];
        params.extend(p.trainable().into_iter().cloned());
        let report = gradcheck(
            &params,
            |g, v| {
                let vars = ConvBlockVars::from_ordered(&v[1..]);
                let out = convblock_forward(g, v[0], &vars, &p, mode)?;
                Ok(project(g, out.out, 3))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.tensors.len(), 6);
        for t in &report.tensors {
            if mode == Mode::Train && t.tensor == 2 {
                // Batch statistics cancel a per-channel constant, so the bias
                // gradient is identically zero and the finite difference is
                // pure round-off; compare absolutely.
                assert!(t.analytic.abs() < 1e-12 && t.numeric.abs() < 1e-8, "{t:?}");
            } else {
                assert!(t.max_rel_error < 1e-4, "{mode:?}: {t:?}");
            }
        }
    }
}

#[test]
fn relu_region_with_identity_norm_is_plain_conv() {
    let spec = ConvBlockSpec::new(1, 1, 2, 2, 0);
    let mut p = ConvBlockParams::<f64>::init(spec, &mut stream(1, Stream::Init));
    p.prelu_slope = Tensor::zeros(Shape::vector(2));
    p.filters = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 0.5, 0.25, 2.0]).unwrap();
    let x = Tensor::from_fn(Shape::new(1, 2, 3, 2), |_, h, w, c| (h + w + c) as f64 * 0.1);
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = convblock_forward(&mut g, xv, &vars, &p, Mode::Eval).unwrap();
    let conv = g.conv2d(xv, vars.filters, vars.bias, (0, 0)).unwrap();
    // BN eval with mean 0, var 1 scales by 1/√(1 + ε)
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in g.value(out.out).data().iter().zip(g.value(conv).data()) {
        assert!((a - b * scale).abs() < 1e-12);
    }
}

#[test]
fn train_mode_normalizes_batches() {
    let spec = ConvBlockSpec::new(3, 3, 3, 4, 1);
    let p = ConvBlockParams::<f64>::init(spec, &mut stream(2, Stream::Init));
    let x = random(Shape::new(4, 6, 5, 3), &mut ChaCha8Rng::seed_from_u64(2)).map(|v| 3.0 * v + 1.0);
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let xv = g.constant(x);
    let out = convblock_forward(&mut g, xv, &vars, &p, Mode::Train).unwrap();
    let y = g.value(out.norm);
    let c = y.shape().c;
    let m = (y.len() / c) as f64;
    for ch in 0..c {
        let vals: Vec<f64> = y.data().iter().skip(ch).step_by(c).copied().collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn table_block_shape_and_eval_purity() {
    let spec = ConvBlockSpec::new(1, 4, 32, 32, 0);
    let p = ConvBlockParams::<f32>::init(spec, &mut stream(3, Stream::Init));
    let x = random(Shape::new(1, 16, 8, 32), &mut ChaCha8Rng::seed_from_u64(1)).cast::<f32>();
    let run = || {
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = convblock_forward(&mut g, xv, &vars, &p, Mode::Eval).unwrap();
        g.value(out.out).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.shape(), Shape::new(1, 16, 5, 32));
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn init_statistics() {
    let spec = ConvBlockSpec::new(5, 5, 3, 32, 2);
    let mut rng = stream(8, Stream::Init);
    let bound = (6.0f64 / 75.0).sqrt();
    let mut samples = Vec::new();
    while samples.len() < 100_000 {
        samples.extend_from_slice(ConvBlockParams::<f64>::init(spec, &mut rng).filters.data());
    }
    samples.truncate(100_000);
    assert!(samples.iter().all(|v| v.abs() <= bound));
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    assert!(mean.abs() <= 3.0 * bound / (3.0f64 * 1e5).sqrt(), "mean {mean}");
    let p = ConvBlockParams::<f64>::init(spec, &mut rng);
    assert!(p.bias.data().iter().all(|v| *v == 0.0));
    assert!(p.bn_beta.data().iter().all(|v| *v == 0.0));
    assert!(p.bn_gamma.data().iter().all(|v| *v == 1.0));
    assert!(p.prelu_slope.data().iter().all(|v| *v == 0.25));
}

fn l2(x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = l2norm_channels(&mut g, v);
    g.value(y).clone()
}

#[test]
fn l2norm_reference_vector() {
    let y = l2(&Tensor::vector(vec![3.0, 4.0]));
    assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
}

proptest! {
    #[test]
    fn l2norm_is_unit_scale_invariant_and_idempotent(seed in any::<u64>(), k in 0.01f64..100.0) {
        let x = random(Shape::new(2, 3, 2, 5), &mut ChaCha8Rng::seed_from_u64(seed));
        let y = l2(&x);
        for row in y.data().chunks(5) {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
        prop_assert!(l2(&x.map(|v| v * k)).max_abs_diff(&y) < 1e-6);
        prop_assert!(l2(&y).max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn prelu_unit_slope_is_identity_and_zero_slope_is_relu(seed in any::<u64>()) {
        let x = random(Shape::new(1, 2, 2, 3), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let one = g.constant(Tensor::full(Shape::vector(3), 1.0));
        let zero = g.constant(Tensor::zeros(Shape::vector(3)));
        let a = g.prelu(xv, one).unwrap();
        let b = g.prelu(xv, zero).unwrap();
        prop_assert_eq!(g.value(a), &x);
        prop_assert_eq!(g.value(b), &x.map(|v| v.max(0.0)));
    }
}

// ---------------------------------------------------------------- gate

struct GateRun {
    a1: Tensor<f64>,
    a2: Tensor<f64>,
    gate: Tensor<f64>,
}

fn run_gate(p: &MatchingGateParams<f64>, x1: &Tensor<f64>, x2: &Tensor<f64>) -> GateRun {
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let (v1, v2) = (g.constant(x1.clone()), g.constant(x2.clone()));
    let out = matching_gate_forward(&mut g, v1, v2, &vars, true).unwrap();
    GateRun {
        a1: g.value(out.a1).clone(),
        a2: g.value(out.a2).clone(),
        gate: g.value(out.gate).clone(),
    }
}

fn gate_params(cols: usize, ch: usize, seed: u64) -> MatchingGateParams<f64> {
    MatchingGateParams::init(cols, ch, 4.0, &mut stream(seed, Stream::Init))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gate_is_symmetric_and_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = gate_params(5, 6, seed);
        let x1 = random(Shape::new(2, 4, 5, 6), &mut rng);
        let x2 = random(Shape::new(2, 4, 5, 6), &mut rng);
        let ab = run_gate(&p, &x1, &x2);
        let ba = run_gate(&p, &x2, &x1);
        prop_assert_eq!(&ab.gate, &ba.gate);
        prop_assert_eq!(&ab.a1, &ba.a2);
        prop_assert_eq!(&ab.a2, &ba.a1);
        prop_assert!(ab.gate.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn boost_preserves_sign_and_amplifies(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape::new(1, 3, 4, 5), &mut rng);
        let gate = random(Shape::new(1, 3, 1, 5), &mut rng).map(|v| 0.5 + 0.5 * v.abs().max(1e-9));
        let mut g = Graph::<f64>::new();
        let xv = g.param(x.clone());
        let gv = g.constant(gate.clone());
        let a = g.boost(xv, gv, false).unwrap();
        let s = g.sum(a);
        let av = g.value(a).clone();
        let dx = g.backward(s).unwrap().get(xv).unwrap().clone();
        for i in 0..x.len() {
            let (xi, ai) = (x.data()[i], av.data()[i]);
            prop_assert!(xi == 0.0 || xi.signum() == ai.signum());
            prop_assert!(xi.abs() <= ai.abs() && ai.abs() <= 2.0 * xi.abs());
            prop_assert!((1.0..=2.0).contains(&dx.data()[i]));
        }
    }

    #[test]
    fn gate_decreases_with_summary_gap(a in 0.0f64..3.0, extra in 1e-3f64..3.0, p in 0.5f64..8.0) {
        let value = |gap: f64| {
            let mut g = Graph::<f64>::new();
            let y1 = g.constant(Tensor::vector(vec![0.0]));
            let y2 = g.constant(Tensor::vector(vec![gap]));
            let pv = g.constant(Tensor::vector(vec![p]));
            let out = gate_values(&mut g, y1, y2, pv).unwrap();
            g.value(out).data()[0]
        };
        prop_assert!(value(a + extra) < value(a));
    }
}

#[test]
fn gate_is_one_exactly_for_equal_summaries() {
    let mut g = Graph::<f64>::new();
    let y1 = g.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let y2 = g.constant(Tensor::vector(vec![0.3, -1.0 + 1e-4, 5.0]));
    let p = g.constant(Tensor::vector(vec![4.0, 4.0, 3.0]));
    let gv = gate_values(&mut g, y1, y2, p).unwrap();
    let v = g.value(gv).data();
    assert_eq!(v[0], 1.0);
    assert!(v[1] < 1.0);
    assert!((v[2] - (-1.0f64).exp()).abs() < 1e-6);
}

#[test]
fn identical_streams_open_the_gate() {
    let p = gate_params(5, 4, 2);
    let x = random(Shape::new(1, 3, 5, 4), &mut ChaCha8Rng::seed_from_u64(3));
    let r = run_gate(&p, &x, &x);
    assert!(r.gate.data().iter().all(|v| *v == 1.0));
    assert!(r.a1.max_abs_diff(&l2(&x)) < 1e-12);
    assert_eq!(r.a1, r.a2);
}

#[test]
fn huge_p_reduces_to_channel_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = gate_params(5, 8, 7);
    p.p = p.p.map(|v| v * 1000.0);
    let x1 = random(Shape::new(2, 4, 5, 8), &mut rng);
    let x2 = random(Shape::new(2, 4, 5, 8), &mut rng);
    let r = run_gate(&p, &x1, &x2);
    assert!(r.a1.max_abs_diff(&l2(&x1)) < 1e-3);
    assert!(r.a2.max_abs_diff(&l2(&x2)) < 1e-3);
}

#[test]
fn summarizer_matches_row_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = gate_params(5, 3, 4);
    let x = random(Shape::new(2, 4, 5, 3), &mut rng);
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = summarize_stripes(&mut g, xv, &vars).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), Shape::new(2, 4, 1, 3));
    for n in 0..2 {
        for r in 0..4 {
            for o in 0..3 {
                let mut acc = p.b.data()[o];
                for col in 0..5 {
                    for i in 0..3 {
                        acc += x.get(n, r, col, i) * p.w.get(0, col, i, o);
                    }
                }
                let expect = if acc >= 0.0 { acc } else { p.slope.data()[o] * acc };
                assert!((y.get(n, r, 0, o) - expect).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn summarizer_rejects_width_mismatch() {
    let p = gate_params(5, 3, 4);
    let mut g = Graph::<f64>::new();
    let vars = p.bind(&mut g);
    let xv = g.constant(Tensor::zeros(Shape::new(1, 4, 3, 3)));
    assert!(summarize_stripes(&mut g, xv, &vars).is_err());
}

#[test]
fn boost_reference_entry() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(Shape::new(1, 1, 1, 2), vec![-1.5, 2.0]).unwrap());
    let gate = g.constant(Tensor::new(Shape::new(1, 1, 1, 2), vec![0.5, 1.0]).unwrap());
    let a = g.boost(x, gate, true).unwrap();
    assert_eq!(g.value(a).data(), &[-2.25, 4.0]);
    let (n1, _) = boost(&mut g, x, x, gate, true).unwrap();
    assert!((g.value(n1).data()[0] - (-2.25 / (2.25f64 * 2.25 + 16.0).sqrt())).abs() < 1e-12);
}

#[test]
fn full_gate_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = gate_params(4, 3, 5);
    p.p = Tensor::vector(vec![0.8, 1.1, 1.5]);
    p.b = random(Shape::vector(3), &mut rng).map(|v| 0.1 * v);
    let x1 = random(Shape::new(2, 3, 4, 3), &mut rng);
    let x2 = random(Shape::new(2, 3, 4, 3), &mut rng);
    for through in [true, false] {
        let mut params = vec![x1.clone(), x2.clone()];
        params.extend(p.trainable().into_iter().cloned());
        let report = gradcheck(
            &params,
            |g, v| {
                let vars = gscnn::gate::GateVars::from_ordered(&v[2..]);
                let out = matching_gate_forward(g, v[0], v[1], &vars, through)?;
                let l1 = project(g, out.a1, 1);
                let l2 = project(g, out.a2, 2);
                g.add(l1, l2)
            },
            &GradCheckOptions::default(),
        );
        let report = report.unwrap();
        if through {
            assert!(report.max_rel_error() < 1e-4, "{:?}", report.tensors);
        } else {
            // with a constant mask the gate parameters receive no gradient,
            // which the finite differences contradict
            assert!(report.tensors[2..].iter().any(|t| t.max_rel_error > 1e-2));
        }
    }
}

#[test]
fn mask_csv_round_trip() {
    let p = gate_params(5, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = run_gate(
        &p,
        &random(Shape::new(1, 3, 5, 4), &mut rng),
        &random(Shape::new(1, 3, 5, 4), &mut rng),
    );
    let mask = GateMask::from_tensor(&r.gate, 0).unwrap();
    let back = GateMask::<f64>::from_csv(&mask.to_csv()).unwrap();
    assert_eq!(back, mask);
    assert_eq!(mask.broadcast(5).shape(), Shape::new(1, 3, 5, 4));
    assert_eq!(mask.row_profile().len(), 3);
}
