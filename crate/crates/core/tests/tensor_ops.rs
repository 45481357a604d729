use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ror_core::tensor::gradcheck::{finite_diff_check, GradCheckConfig, ScalarGraph};
use ror_core::tensor::{BnMode, Element, RunningStats, Tape, Tensor, TensorError, Var};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let (o, _, kh, kw) = k.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let y = (i * stride + di) as isize - pad as isize;
                                let xx = (j * stride + dj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + y as usize) * w + xx as usize]
                                    * k.data()[((oc * c + ic) * kh + di) * kw + dj];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, ho, wo], out).unwrap()
}

fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[1];
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut acc = b.data()[c];
            for k in 0..i {
                acc += x.data()[r * i + k] * w.data()[k * o + c];
            }
            out[r * o + c] = acc;
        }
    }
    out
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_f64([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
    let k = tape.constant(Tensor::ones([1, 1, 1, 1]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn conv_counting_window() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones([1, 1, 4, 4]));
    let k = tape.constant(Tensor::ones([1, 1, 2, 2]));
    let y = tape.conv2d(x, k, 2, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv_matches_six_loop_oracle() {
    let x = random(&[2, 3, 8, 8], 1);
    let k = random(&[4, 3, 3, 3], 2);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let expected = naive_conv(&x, &k, stride, pad);

        let mut tape = Tape::<f64>::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        assert_eq!(tape.value(y).shape(), expected.shape());
        assert!(max_rel(tape.value(y).data(), expected.data()) < 1e-12);

        let mut tape = Tape::<f32>::new();
        let (xv, kv) = (tape.constant(x.cast()), tape.constant(k.cast()));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        assert!(max_rel(&tape.value(y).to_f64_vec(), expected.data()) < 1e-6);
    }
    // pointwise fast path
    let k1 = random(&[5, 3, 1, 1], 3);
    let expected = naive_conv(&x, &k1, 1, 0);
    let mut tape = Tape::<f64>::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k1));
    let y = tape.conv2d(xv, kv, 1, 0).unwrap();
    assert!(max_rel(tape.value(y).data(), expected.data()) < 1e-12);
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    let err = tape.conv2d(x, k, 1, 1).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "conv2d",
            left: vec![1, 2, 4, 4],
            right: vec![1, 3, 3, 3]
        }
    );
    let k = tape.constant(Tensor::zeros([1, 2, 5, 5]));
    assert!(tape.conv2d(x, k, 1, 0).is_err());
}

#[test]
fn batch_norm_constant_channel_yields_beta() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full([1, 1, 2, 2], 3.5));
    let g = tape.constant(Tensor::ones([1]));
    let b = tape.constant(Tensor::full([1], 0.25));
    let mut stats = RunningStats::new(1);
    let y = tape.batch_norm(x, g, b, BnMode::Train(Some(&mut stats))).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    assert!(tape.value(y).is_finite());
    assert!(stats.populated);
}

#[test]
fn batch_norm_matches_hand_normalization() {
    // 2x1x1x2 input: values 1, 3, 5, 7 -> mean 4, biased variance 5.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([2, 1, 1, 2], &[1., 3., 5., 7.]).unwrap());
    let g = tape.constant(Tensor::ones([1]));
    let b = tape.constant(Tensor::zeros([1]));
    let mut stats = RunningStats::new(1);
    let y = tape.batch_norm(x, g, b, BnMode::Train(Some(&mut stats))).unwrap();
    let denom = (5.0f64 + 1e-5).sqrt();
    let expected = [-3.0 / denom, -1.0 / denom, 1.0 / denom, 3.0 / denom];
    for (a, e) in tape.value(y).data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-12);
    }
    // running stats: momentum 0.1, unbiased variance 20/3
    assert!((stats.mean[0] - 0.4).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_eval_identity_and_unpopulated_rejection() {
    let mut tape = Tape::<f64>::new();
    let data = random(&[2, 3, 2, 2], 9);
    let x = tape.constant(data.clone());
    let g = tape.constant(Tensor::ones([3]));
    let b = tape.constant(Tensor::zeros([3]));
    let stats = RunningStats::identity(3);
    let y = tape.batch_norm(x, g, b, BnMode::Eval(&stats)).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, e) in tape.value(y).data().iter().zip(data.data()) {
        assert!((a - e * scale).abs() < 1e-12);
    }
    assert!((scale - 1.0).abs() < 1e-5);
    let fresh = RunningStats::new(3);
    assert_eq!(
        tape.batch_norm(x, g, b, BnMode::Eval(&fresh)).unwrap_err(),
        TensorError::MissingRunningStats
    );
}

#[test]
fn relu_values_and_subgradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let pos = tape.constant(Tensor::from_f64([2], &[0.5, 4.0]).unwrap());
    let r = tape.relu(pos);
    assert_eq!(tape.value(r), tape.value(pos));
}

#[test]
fn global_avg_pool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);

    let c = tape.constant(Tensor::full([2, 3, 4, 4], 0.75));
    let y = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.75));

    let r = random(&[3, 4, 5, 6], 4);
    let v = tape.constant(r.clone());
    let y = tape.global_avg_pool(v).unwrap();
    for (idx, plane) in r.data().chunks(30).enumerate() {
        let oracle: f64 = plane.iter().sum::<f64>() / 30.0;
        assert!((tape.value(y).data()[idx] - oracle).abs() < 1e-12);
    }
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([1, 2], &[1., 2.]).unwrap());
    let w = tape.constant(Tensor::from_f64([2, 2], &[1., 1., 0., 1.]).unwrap());
    let b = tape.constant(Tensor::zeros([2]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 3.0]);

    let eye = tape.constant(Tensor::from_f64([2, 2], &[1., 0., 0., 1.]).unwrap());
    let y = tape.linear(x, eye, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let (xr, wr, br) = (random(&[4, 7], 5), random(&[7, 3], 6), random(&[3], 7));
    let oracle = naive_linear(&xr, &wr, &br);
    let (xv, wv, bv) = (tape.constant(xr), tape.constant(wr), tape.constant(br));
    let y = tape.linear(xv, wv, bv).unwrap();
    assert!(max_rel(tape.value(y).data(), &oracle) < 1e-12);

    let bad = tape.constant(Tensor::zeros([5, 3]));
    assert!(matches!(tape.linear(xv, bad, bv), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn add_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(random(&[2, 3], 8));
    let z = tape.constant(Tensor::zeros([2, 3]));
    let s = tape.add(a, z).unwrap();
    assert_eq!(tape.value(s), tape.value(a));

    let p = tape.param(Tensor::scalar(2.0));
    let q = tape.param(Tensor::scalar(3.0));
    let r = tape.add(p, q).unwrap();
    assert_eq!(tape.value(r).item(), Some(5.0));
    let g = tape.backward(r).unwrap();
    assert_eq!(g.get(p).unwrap().item(), Some(1.0));
    assert_eq!(g.get(q).unwrap().item(), Some(1.0));

    let bad = tape.constant(Tensor::zeros([3, 2]));
    assert!(tape.add(a, bad).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random(&[2, 3, 4], 10));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64([2], &[-1.0, 2.0]).unwrap());
    let r = tape.relu(x);
    let s = tape.sum(r);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);

    assert!(matches!(tape.backward(r), Err(TensorError::NotScalar(_))));
}

#[test]
fn backward_visits_each_node_once() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random(&[2, 2, 4, 4], 11));
    let k = tape.param(random(&[2, 2, 3, 3], 12));
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    // diamond: y feeds two paths that rejoin
    let a = tape.relu(y);
    let b = tape.scale(y, 0.5);
    let c = tape.add(a, b).unwrap();
    let d = tape.add(c, y).unwrap();
    let s = tape.sum(d);
    let g = tape.backward(s).unwrap();
    assert!(g.visits().iter().all(|&v| v == 1), "{:?}", g.visits());
    assert_eq!(g.visits().len(), tape.len());
}

/// conv -> bn -> relu -> pool -> linear, projected to a scalar with fixed weights.
struct Composite;

impl ScalarGraph for Composite {
    fn build<T: Element>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var, TensorError> {
        let y = tape.conv2d(v[0], v[1], 1, 1)?;
        let y = tape.batch_norm(y, v[2], v[3], BnMode::Train(None))?;
        let y = tape.relu(y);
        let y = tape.global_avg_pool(y)?;
        let y = tape.linear(y, v[4], v[5])?;
        let proj = tape.constant(Tensor::from_f64([2, 3], &[0.3, -1.2, 0.8, 1.1, 0.4, -0.6]).unwrap());
        let y = tape.mul(y, proj)?;
        Ok(tape.sum(y))
    }
}

fn composite_inputs() -> Vec<Tensor<f64>> {
    vec![
        random(&[2, 2, 5, 5], 20),
        random(&[4, 2, 3, 3], 21),
        random(&[4], 22),
        random(&[4], 23),
        random(&[4, 3], 24),
        random(&[3], 25),
    ]
}

#[test]
fn composite_graph_gradients_match_finite_differences() {
    let inputs = composite_inputs();
    let single = finite_diff_check(&Composite, &inputs, &GradCheckConfig::single()).unwrap();
    assert!(single.passed(), "{single:?}");
    let double = finite_diff_check(&Composite, &inputs, &GradCheckConfig::double()).unwrap();
    assert!(double.passed(), "{double:?}");
}

macro_rules! primitive_graph {
    ($name:ident, |$tape:ident, $v:ident| $body:expr) => {
        struct $name;
        impl ScalarGraph for $name {
            fn build<T: Element>(&self, $tape: &mut Tape<T>, $v: &[Var]) -> Result<Var, TensorError> {
                let out = $body;
                // random projection keeps the gradient away from trivially uniform values
                let shape = $tape.value(out).shape().to_vec();
                let n: usize = shape.iter().product();
                let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 4.0).collect();
                let proj = $tape.constant(Tensor::from_f64(shape, &w)?);
                let p = $tape.mul(out, proj)?;
                Ok($tape.sum(p))
            }
        }
    };
}

primitive_graph!(ConvG, |t, v| t.conv2d(v[0], v[1], 2, 1)?);
primitive_graph!(BnTrainG, |t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Train(None))?);
primitive_graph!(BnEvalG, |t, v| {
    let st = RunningStats {
        mean: vec![T::of(0.3), T::of(-0.2)],
        var: vec![T::of(1.7), T::of(0.6)],
        populated: true,
    };
    t.batch_norm(v[0], v[1], v[2], BnMode::Eval(&st))?
});
primitive_graph!(ReluG, |t, v| t.relu(v[0]));
primitive_graph!(PoolG, |t, v| t.global_avg_pool(v[0])?);
primitive_graph!(LinearG, |t, v| t.linear(v[0], v[1], v[2])?);
primitive_graph!(AddG, |t, v| t.add(v[0], v[1])?);
primitive_graph!(SubsampleG, |t, v| t.subsample_pad(v[0], 2, 5)?);
primitive_graph!(WceG, |t, v| t.weighted_cross_entropy(v[0], &[1, 3, 2], &[T::one(), T::of(1.5), T::of(1.3)])?);

fn check_both<G: ScalarGraph>(g: &G, inputs: &[Tensor<f64>]) {
    for cfg in [GradCheckConfig::single(), GradCheckConfig::double()] {
        let r = finite_diff_check(g, inputs, &cfg).unwrap();
        assert!(r.passed(), "{:?}: {r:?}", cfg.analytic);
    }
}

#[test]
fn every_primitive_passes_gradient_check() {
    check_both(&ConvG, &[random(&[2, 3, 6, 6], 30), random(&[4, 3, 3, 3], 31)]);
    check_both(&BnTrainG, &[random(&[3, 2, 3, 3], 32), random(&[2], 33), random(&[2], 34)]);
    check_both(&BnEvalG, &[random(&[3, 2, 3, 3], 35), random(&[2], 36), random(&[2], 37)]);
    check_both(&ReluG, &[random(&[4, 5], 38)]);
    check_both(&PoolG, &[random(&[2, 3, 4, 4], 39)]);
    check_both(&LinearG, &[random(&[3, 4], 40), random(&[4, 5], 41), random(&[5], 42)]);
    check_both(&AddG, &[random(&[2, 3], 43), random(&[2, 3], 44)]);
    check_both(&SubsampleG, &[random(&[2, 3, 5, 5], 45)]);
    check_both(&WceG, &[random(&[3, 3], 46)]);
}

#[test]
fn linear_ops_are_homogeneous() {
    let x = random(&[2, 3, 5, 5], 50);
    let k = random(&[2, 3, 3, 3], 51);
    let w = random(&[6, 4], 52);
    let xi = random(&[3, 6], 53);
    for alpha in [0.0, 1.0, 2.0] {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let sx = tape.scale(xv, alpha);
        let kv = tape.constant(k.clone());
        let base = tape.conv2d(xv, kv, 1, 1).unwrap();
        let scaled = tape.conv2d(sx, kv, 1, 1).unwrap();
        for (a, b) in tape.value(scaled).data().iter().zip(tape.value(base).data()) {
            assert!((a - alpha * b).abs() < 1e-12);
        }
        let b0 = tape.constant(Tensor::zeros([4]));
        let iv = tape.constant(xi.clone());
        let si = tape.scale(iv, alpha);
        let wv = tape.constant(w.clone());
        let base = tape.linear(iv, wv, b0).unwrap();
        let scaled = tape.linear(si, wv, b0).unwrap();
        for (a, b) in tape.value(scaled).data().iter().zip(tape.value(base).data()) {
            assert!((a - alpha * b).abs() < 1e-12);
        }
        let sum = tape.add(xv, xv).unwrap();
        let ssum = tape.add(sx, sx).unwrap();
        for (a, b) in tape.value(ssum).data().iter().zip(tape.value(sum).data()) {
            assert!((a - alpha * b).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let inputs: Vec<Tensor<f32>> = composite_inputs().iter().map(|t| t.cast()).collect();
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = inputs.into_iter().map(|t| tape.param(t)).collect();
        let out = Composite.build(&mut tape, &vars).unwrap();
        let g = tape.backward(out).unwrap();
        let mut bits = vec![tape.value(out).data()[0].to_bits()];
        for v in vars {
            bits.extend(g.get(v).unwrap().data().iter().map(|x| x.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn independent_tapes_run_on_separate_threads() {
    let handles: Vec<_> = (0..4)
        .map(|_| {
            std::thread::spawn(|| {
                let mut tape = Tape::<f32>::new();
                let vars: Vec<Var> = composite_inputs().iter().map(|t| tape.param(t.cast())).collect();
                let out = Composite.build(&mut tape, &vars).unwrap();
                tape.value(out).data()[0].to_bits()
            })
        })
        .collect();
    let results: Vec<u32> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(results.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn subsample_pad_zero_fills_trailing_channels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[1, 2, 2, 2], 60));
    let y = tape.subsample_pad(x, 1, 4).unwrap();
    let out = tape.value(y).data();
    assert_eq!(&out[..8], tape.value(x).data());
    assert!(out[8..].iter().all(|&v| v == 0.0));
    assert!(tape.subsample_pad(x, 1, 1).is_err());

    let z = tape.constant(Tensor::from_f64([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
    let y = tape.subsample_pad(z, 2, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 3., 7., 9.]);
}

#[test]
fn cross_entropy_rejects_non_finite_logits() {
    let mut tape = Tape::<f32>::new();
    let z = tape.param(Tensor::from_f64([1, 2], &[f64::NAN, 0.0]).unwrap());
    assert_eq!(
        tape.weighted_cross_entropy(z, &[1], &[1.0, 1.0]).unwrap_err(),
        TensorError::NonFinite("weighted_cross_entropy")
    );
}
