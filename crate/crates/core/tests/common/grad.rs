use idp::layers::{
    BatchNorm, Block, IncompleteConv2d, IncompleteLinear, IncompleteSepConv2d, Param, ParamLayout, Pass, UpdateMask,
    WeightLayer,
};
use idp::profiles::{make_profile, ProfileKind};
use idp::tensor::{
    avgpool2d, avgpool2d_backward, batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, matmul,
    matmul_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, softmax_cross_entropy, BatchNormState, BnMode,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Values at least `gap` apart in magnitude from zero.
fn randn_away(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { *v - gap } else { *v + gap };
        }
    }
    t
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Worst relative error between `analytic` and central differences of `f` around `x`.
fn worst(analytic: &[f64], x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(analytic.len(), x.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + H;
        let up = f(&probe);
        probe[i] = x[i] - H;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

pub fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b, r) = (randn(&mut rng, &[4, 5]), randn(&mut rng, &[5, 3]), randn(&mut rng, &[4, 3]));
    let (da, db) = matmul_backward(&a, &b, &r).unwrap();
    let ea = worst(da.data(), a.data(), |v| dot(&matmul(&Tensor::new(vec![4, 5], v.to_vec()).unwrap(), &b).unwrap(), &r));
    let eb = worst(db.data(), b.data(), |v| dot(&matmul(&a, &Tensor::new(vec![5, 3], v.to_vec()).unwrap()).unwrap(), &r));
    assert!(ea <= TOL && eb <= TOL, "{ea} {eb}");
}

pub fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let x = randn(&mut rng, &[3, 7, 5]);
        let f = randn(&mut rng, &[2, 3, 3, 3]);
        let y = conv2d(&x, &f, stride, pad).unwrap();
        let r = randn(&mut rng, y.shape());
        let (dx, df) = conv2d_backward(&x, &f, stride, pad, &r).unwrap();
        let ex = worst(dx.data(), x.data(), |v| dot(&conv2d(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &f, stride, pad).unwrap(), &r));
        let ef = worst(df.data(), f.data(), |v| dot(&conv2d(&x, &Tensor::new(f.shape().to_vec(), v.to_vec()).unwrap(), stride, pad).unwrap(), &r));
        assert!(ex <= TOL && ef <= TOL, "stride {stride} pad {pad}: {ex} {ef}");
    }
}

pub fn relu_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn_away(&mut rng, &[2, 3, 4], 0.01);
    let r = randn(&mut rng, x.shape());
    let dx = relu_backward(&x, &r).unwrap();
    let e = worst(dx.data(), x.data(), |v| dot(&relu(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()), &r));
    assert!(e <= TOL, "{e}");
}

pub fn pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // distinct values spaced well beyond the step keep the argmax fixed
    let n = 2 * 2 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut rng);
    let x = Tensor::new(vec![2, 2, 4, 4], vals).unwrap();
    let (y, cache) = maxpool2d(&x, 2, 2).unwrap();
    let r = randn(&mut rng, y.shape());
    let dx = maxpool2d_backward(&cache, &r).unwrap();
    let e = worst(dx.data(), x.data(), |v| dot(&maxpool2d(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), 2, 2).unwrap().0, &r));
    assert!(e <= TOL, "max {e}");

    let (y, cache) = avgpool2d(&x, 2, 2).unwrap();
    let r = randn(&mut rng, y.shape());
    let dx = avgpool2d_backward(&cache, &r).unwrap();
    let e = worst(dx.data(), x.data(), |v| dot(&avgpool2d(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), 2, 2).unwrap().0, &r));
    assert!(e <= TOL, "avg {e}");
}

pub fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = randn(&mut rng, &[4, 6]);
    let labels = [0, 5, 2, 2];
    let (_, dz) = softmax_cross_entropy(&z, &labels).unwrap();
    let e = worst(dz.data(), z.data(), |v| softmax_cross_entropy(&Tensor::new(vec![4, 6], v.to_vec()).unwrap(), &labels).unwrap().0);
    assert!(e <= TOL, "{e}");
}

pub fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for mode in [BnMode::Train, BnMode::Eval] {
        let x = randn(&mut rng, &[4, 3, 2, 2]);
        let scale: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let shift: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut state = BatchNormState { mean: vec![0.1, -0.2, 0.3], var: vec![0.9, 1.1, 1.3] };
        let run = |x: &Tensor<f64>, scale: &[f64], shift: &[f64]| {
            let mut st = BatchNormState { mean: vec![0.1, -0.2, 0.3], var: vec![0.9, 1.1, 1.3] };
            batchnorm_forward(x, scale, shift, &mut st, mode, 0.1).unwrap()
        };
        let (y, cache) = batchnorm_forward(&x, &scale, &shift, &mut state, mode, 0.1).unwrap();
        let r = randn(&mut rng, y.shape());
        let (dx, dscale, dshift) = batchnorm_backward(&cache, &r).unwrap();
        let ex = worst(dx.data(), x.data(), |v| dot(&run(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &scale, &shift).0, &r));
        let es = worst(&dscale, &scale, |v| dot(&run(&x, v, &shift).0, &r));
        let eb = worst(&dshift, &shift, |v| dot(&run(&x, &scale, v).0, &r));
        assert!(ex <= TOL && es <= TOL && eb <= TOL, "{mode:?}: {ex} {es} {eb}");
    }
}

/// Loss `⟨layer(x), r⟩` checked against the layer's `dx` and parameter gradients.
fn check_layer(layer: &WeightLayer<f64>, x: &Tensor<f64>, k_in: usize, k_out: usize, mask: &UpdateMask, rng: &mut ChaCha8Rng) -> f64 {
    let mut l = layer.clone();
    let y = l.forward(x, k_in, k_out, &mut Pass::train(0)).unwrap();
    let r = randn(rng, y.shape());
    for p in l.params_mut() {
        p.zero_grad();
    }
    let dx = l.backward(&r, mask).unwrap();
    assert_eq!(dx.shape(), x.shape());
    let loss = |m: &mut WeightLayer<f64>, x: &Tensor<f64>| dot(&m.forward(x, k_in, k_out, &mut Pass::train(0)).unwrap(), &r);

    let mut e = worst(dx.data(), x.data(), |v| loss(&mut layer.clone(), &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()));
    let grads: Vec<(Vec<f64>, Vec<f64>, ParamLayout)> =
        l.params_mut().iter().map(|p| (p.grad.clone(), p.value.clone(), p.layout)).collect();
    for (pi, (grad, value, layout)) in grads.iter().enumerate() {
        let mut probe_layer = layer.clone();
        let mut probe = value.clone();
        for idx in 0..grad.len() {
            if !layout.trainable(idx, mask) {
                assert_eq!(grad[idx], 0.0, "param {pi} idx {idx} is frozen but has a gradient");
                continue;
            }
            let mut eval = |v: f64| {
                probe[idx] = v;
                probe_layer.params_mut()[pi].value.copy_from_slice(&probe);
                loss(&mut probe_layer, x)
            };
            let numeric = (eval(value[idx] + H) - eval(value[idx] - H)) / (2.0 * H);
            probe[idx] = value[idx];
            e = e.max(rel_err(grad[idx], numeric));
        }
    }
    e
}

fn gamma(kind: ProfileKind, n: usize) -> Option<idp::profiles::ProfileCoefficients> {
    Some(make_profile(kind, n).unwrap())
}

fn masks(n_in: usize, n_out: usize) -> Vec<UpdateMask> {
    vec![
        UpdateMask::full(n_in, n_out),
        UpdateMask { inputs: 2..n_in, outputs: 3..n_out },
        UpdateMask { inputs: 0..n_in - 1, outputs: 0..2 },
    ]
}

pub fn incomplete_linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in [None, Some(ProfileKind::Linear), Some(ProfileKind::Harmonic), Some(ProfileKind::HalfExp)] {
        let mut layer = IncompleteLinear::<f64>::new(6, 5, kind.and_then(|k| gamma(k, 6)), false, &mut rng).unwrap();
        layer.bias.value.iter_mut().for_each(|b| *b = rng.sample(StandardNormal));
        let layer = WeightLayer::Linear(layer);
        let x = randn(&mut rng, &[3, 6]);
        for (k_in, k_out) in [(6, 5), (3, 4), (1, 2)] {
            for m in masks(6, 5) {
                let e = check_layer(&layer, &x, k_in, k_out, &m, &mut rng);
                assert!(e <= TOL, "{kind:?} k=({k_in},{k_out}) {m:?}: {e}");
            }
        }
    }
}

pub fn incomplete_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (stride, pad) in [(1, 1), (2, 1)] {
        for kind in [None, Some(ProfileKind::Linear), Some(ProfileKind::Harmonic)] {
            let mut layer = IncompleteConv2d::<f64>::new(5, 4, 3, stride, pad, kind.and_then(|k| gamma(k, 5)), false, &mut rng).unwrap();
            layer.bias.value.iter_mut().for_each(|b| *b = rng.sample(StandardNormal));
            let layer = WeightLayer::Conv(layer);
            let x = randn(&mut rng, &[2, 5, 5, 5]);
            for (k_in, k_out) in [(5, 4), (3, 2)] {
                for m in masks(5, 4) {
                    let e = check_layer(&layer, &x, k_in, k_out, &m, &mut rng);
                    assert!(e <= TOL, "{kind:?} s{stride} k=({k_in},{k_out}) {m:?}: {e}");
                }
            }
        }
    }
}

pub fn incomplete_sepconv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in [None, Some(ProfileKind::Linear), Some(ProfileKind::HalfExp)] {
        let mut layer = IncompleteSepConv2d::<f64>::new(5, 6, 3, 1, 1, kind.and_then(|k| gamma(k, 6)), &mut rng).unwrap();
        layer.bias.value.iter_mut().for_each(|b| *b = rng.sample(StandardNormal));
        let layer = WeightLayer::SepConv(layer);
        let x = randn(&mut rng, &[2, 5, 4, 4]);
        for (k_in, k_out) in [(5, 6), (3, 4), (2, 1)] {
            for m in masks(5, 6) {
                let e = check_layer(&layer, &x, k_in, k_out, &m, &mut rng);
                assert!(e <= TOL, "{kind:?} k=({k_in},{k_out}) {m:?}: {e}");
            }
        }
    }
}

/// Straight-through: the latent gradient is the gradient with respect to the
/// binarized weight, zeroed where the latent magnitude exceeds 1.
pub fn binary_straight_through_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let latent: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.6..1.6)).collect();
    let signs: Vec<f64> = latent.iter().map(|&w| if w >= 0.0 { 1.0 } else { -1.0 }).collect();
    let x = randn(&mut rng, &[3, 6]);
    for (k_in, k_out) in [(6, 4), (3, 2)] {
        let g = gamma(ProfileKind::Linear, 6);
        let mk = |w: &[f64], binary: bool| {
            let weight = Param::new(vec![4, 6], w.to_vec(), ParamLayout::Weight { out: 4, inn: 6, inner: 1 }, true);
            let bias = Param::filled(vec![4], 0.0, ParamLayout::PerOutput, false);
            WeightLayer::Linear(IncompleteLinear::from_parts(weight, bias, g.clone(), binary).unwrap())
        };
        let mask = UpdateMask::full(6, 4);
        let mut bin = mk(&latent, true);
        let y = bin.forward(&x, k_in, k_out, &mut Pass::train(0)).unwrap();
        let r = randn(&mut rng, y.shape());
        let dx = bin.backward(&r, &mask).unwrap();
        let grad = bin.params_mut()[0].grad.clone();

        let run = |w: &[f64], x: &Tensor<f64>| dot(&mk(w, false).forward(x, k_in, k_out, &mut Pass::train(0)).unwrap(), &r);
        let ex = worst(dx.data(), x.data(), |v| run(&signs, &Tensor::new(vec![3, 6], v.to_vec()).unwrap()));
        let through: Vec<f64> = {
            let mut probe = signs.clone();
            (0..signs.len())
                .map(|i| {
                    probe[i] = signs[i] + H;
                    let up = run(&probe, &x);
                    probe[i] = signs[i] - H;
                    let down = run(&probe, &x);
                    probe[i] = signs[i];
                    if latent[i].abs() <= 1.0 { (up - down) / (2.0 * H) } else { 0.0 }
                })
                .collect()
        };
        let ew = grad.iter().zip(&through).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max);
        assert!(ex <= TOL && ew <= TOL, "k=({k_in},{k_out}): dx {ex} dw {ew}");
    }

    let mut conv = IncompleteConv2d::<f64>::new(3, 2, 3, 1, 1, gamma(ProfileKind::Linear, 3), true, &mut rng).unwrap();
    conv.weight.value.iter_mut().for_each(|w| *w = rng.gen_range(-1.5..1.5));
    let layer = WeightLayer::Conv(conv);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let mut l = layer.clone();
    let y = l.forward(&x, 2, 2, &mut Pass::train(0)).unwrap();
    let r = randn(&mut rng, y.shape());
    let dx = l.backward(&r, &UpdateMask::full(3, 2)).unwrap();
    let e = worst(dx.data(), x.data(), |v| dot(&layer.clone().forward(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), 2, 2, &mut Pass::train(0)).unwrap(), &r));
    assert!(e <= TOL, "binary conv dx {e}");
}

pub fn block_with_batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let conv = IncompleteConv2d::<f64>::new(4, 5, 3, 1, 1, gamma(ProfileKind::Linear, 4), false, &mut rng).unwrap();
    let mut block = Block::new(WeightLayer::Conv(conv), Some(BatchNorm::new(5, 2)), false);
    let x = randn(&mut rng, &[3, 4, 3, 3]);
    for (k_in, k_out) in [(4, 5), (2, 3)] {
        let mut b = block.clone();
        let y = b.forward(&x, k_in, k_out, &mut Pass::train(1)).unwrap();
        let r = randn(&mut rng, y.shape());
        for p in b.params_mut() {
            p.zero_grad();
        }
        let mask = UpdateMask::full(4, 5);
        let dx = b.backward(&r, &mask).unwrap();
        let e = worst(dx.data(), x.data(), |v| {
            dot(&block.clone().forward(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), k_in, k_out, &mut Pass::train(1)).unwrap(), &r)
        });
        assert!(e <= TOL, "dx {e}");
        let scale_grad = b.params_mut()[2].grad.clone();
        let scale = block.params_mut()[2].value.clone();
        let e = worst(&scale_grad, &scale, |v| {
            let mut c = block.clone();
            c.params_mut()[2].value.copy_from_slice(v);
            dot(&c.forward(&x, k_in, k_out, &mut Pass::train(1)).unwrap(), &r)
        });
        assert!(e <= TOL, "bn scale {e}");
    }
    block.clear_cache();
}

/// Every check, by name. Each panics on the first gradient outside tolerance.
pub const ALL: [(&str, fn()); 11] = [
    ("matmul", matmul_gradients),
    ("conv2d", conv2d_gradients),
    ("relu", relu_gradient),
    ("pooling", pooling_gradients),
    ("softmax_cross_entropy", softmax_cross_entropy_gradient),
    ("batchnorm", batchnorm_gradients),
    ("incomplete_linear", incomplete_linear_gradients),
    ("incomplete_conv", incomplete_conv_gradients),
    ("incomplete_sepconv", incomplete_sepconv_gradients),
    ("binary_straight_through", binary_straight_through_gradients),
    ("block_with_batch_norm", block_with_batch_norm_gradients),
];
