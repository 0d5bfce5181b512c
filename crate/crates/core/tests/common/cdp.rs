use idp::layers::{IncompleteConv2d, IncompleteLinear, IncompleteSepConv2d, Param, ParamLayout, Pass, WeightLayer};
use idp::profiles::{make_profile, ProfileKind};
use idp::tensor::Tensor;
use rand::Rng;

fn weight(shape: Vec<usize>, v: Vec<f32>) -> Param<f32> {
    let layout = ParamLayout::Weight { out: shape[0], inn: shape[1], inner: shape[2..].iter().product() };
    Param::new(shape, v, layout, true)
}

fn bias(v: Vec<f32>) -> Param<f32> {
    Param::new(vec![v.len()], v, ParamLayout::PerOutput, false)
}

fn sign(w: f32) -> f64 {
    if w >= 0.0 { 1.0 } else { -1.0 }
}

fn close(got: &Tensor<f32>, want: &[f64]) -> bool {
    got.data().iter().zip(want).all(|(&g, &w)| (g as f64 - w).abs() <= 1e-4 * (1.0 + w.abs()))
}

fn run(layer: &mut WeightLayer<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let (k_in, k_out) = (layer.inputs(), layer.outputs());
    layer.forward(x, k_in, k_out, &mut Pass::eval(0)).unwrap()
}

fn linear_oracle(x: &[f32], w: &[f32], b: &[f32], batch: usize, n: usize, m: usize, binary: bool) -> Vec<f64> {
    let mut y = vec![0.0; batch * m];
    for s in 0..batch {
        for j in 0..m {
            let mut acc = b[j] as f64;
            for i in 0..n {
                let wv = if binary { sign(w[j * n + i]) } else { w[j * n + i] as f64 };
                acc += wv * x[s * n + i] as f64;
            }
            y[s * m + j] = acc;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &[f32], w: &[f32], b: &[f32], dims: [usize; 4], m: usize, k: usize, stride: usize, pad: usize, binary: bool) -> (Vec<f64>, usize, usize) {
    let [batch, c, h, wd] = dims;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; batch * m * oh * ow];
    for s in 0..batch {
        for j in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[j] as f64;
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wv = w[((j * c + i) * k + ky) * k + kx];
                                let wv = if binary { sign(wv) } else { wv as f64 };
                                acc += wv * x[((s * c + i) * h + iy as usize) * wd + ix as usize] as f64;
                            }
                        }
                    }
                    y[((s * m + j) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (y, oh, ow)
}


/// Shapes and values of one linear case.
#[derive(Clone, Debug)]
pub struct LinearCase {
    pub batch: usize,
    pub n: usize,
    pub m: usize,
    pub x: Vec<f32>,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

/// Shapes and values of one convolution case; `w` holds `m·c·k·k` values.
#[derive(Clone, Debug)]
pub struct ConvCase {
    pub batch: usize,
    pub c: usize,
    pub m: usize,
    pub k: usize,
    pub stride: usize,
    pub hw: usize,
    pub x: Vec<f32>,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

fn uniform(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-2.0f32..2.0)).collect()
}

pub fn random_linear(rng: &mut impl Rng) -> LinearCase {
    let (batch, n, m) = (rng.gen_range(1..4), rng.gen_range(2..12), rng.gen_range(1..10));
    LinearCase { batch, n, m, x: uniform(rng, batch * n), w: uniform(rng, m * n), b: uniform(rng, m) }
}

/// Spatial size `(out - 1)·stride + 1` keeps the output size integral for both kernels.
pub fn random_conv(rng: &mut impl Rng) -> ConvCase {
    let (batch, c, m) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let stride = rng.gen_range(1..3);
    let hw = (rng.gen_range(2..6) - 1) * stride + 1;
    ConvCase { batch, c, m, k, stride, hw, x: uniform(rng, batch * c * hw * hw), w: uniform(rng, m * c * k * k), b: uniform(rng, m) }
}

pub fn linear(case: &LinearCase, binary: bool) -> Result<(), String> {
    let LinearCase { batch, n, m, x, w, b } = case.clone();
    let xt = Tensor::new(vec![batch, n], x.clone()).unwrap();
    let g = make_profile(ProfileKind::AllOne, n).unwrap();
    let mk = |g| WeightLayer::Linear(IncompleteLinear::from_parts(weight(vec![m, n], w.clone()), bias(b.clone()), g, binary).unwrap());
    let (yi, yc) = (run(&mut mk(Some(g)), &xt), run(&mut mk(None), &xt));
    if !yi.bit_eq(&yc) {
        return Err("all-one output differs from the complete layer".into());
    }
    if !close(&yi, &linear_oracle(&x, &w, &b, batch, n, m, binary)) {
        return Err("output differs from the loop oracle".into());
    }
    Ok(())
}

pub fn conv(case: &ConvCase, binary: bool) -> Result<(), String> {
    let ConvCase { batch, c, m, k, stride, hw, x, w, b } = case.clone();
    let pad = k / 2;
    let xt = Tensor::new(vec![batch, c, hw, hw], x.clone()).unwrap();
    let g = make_profile(ProfileKind::AllOne, c).unwrap();
    let mk = |g| WeightLayer::Conv(IncompleteConv2d::from_parts(weight(vec![m, c, k, k], w.clone()), bias(b.clone()), stride, pad, g, binary).unwrap());
    let (yi, yc) = (run(&mut mk(Some(g)), &xt), run(&mut mk(None), &xt));
    if !yi.bit_eq(&yc) {
        return Err("all-one output differs from the complete layer".into());
    }
    let (want, oh, ow) = conv_oracle(&x, &w, &b, [batch, c, hw, hw], m, k, stride, pad, binary);
    if yi.shape() != [batch, m, oh, ow] || !close(&yi, &want) {
        return Err("output differs from the loop oracle".into());
    }
    Ok(())
}

/// Depthwise filters come from `dw` (at least `c·k·k` values), pointwise
/// weights from the first `m·c` entries of the case's `w`.
pub fn sepconv(case: &ConvCase, dw: &[f32]) -> Result<(), String> {
    let ConvCase { batch, c, m, k, stride, hw, x, w, b } = case.clone();
    let pad = k / 2;
    let dw: Vec<f32> = dw[..c * k * k].to_vec();
    let pw: Vec<f32> = w[..m * c].to_vec();
    let xt = Tensor::new(vec![batch, c, hw, hw], x.clone()).unwrap();
    let g = make_profile(ProfileKind::AllOne, m).unwrap();
    let mk = |g| {
        let depth = Param::new(vec![c, k, k], dw.clone(), ParamLayout::PerInput { inner: k * k }, true);
        WeightLayer::SepConv(IncompleteSepConv2d::from_parts(depth, weight(vec![m, c], pw.clone()), bias(b.clone()), stride, pad, g).unwrap())
    };
    let (yi, yc) = (run(&mut mk(Some(g)), &xt), run(&mut mk(None), &xt));
    if !yi.bit_eq(&yc) {
        return Err("all-one output differs from the complete layer".into());
    }

    // depthwise per channel, then pointwise with bias
    let mut want_dw = Vec::new();
    let mut dims = (0, 0);
    for i in 0..c {
        let xi: Vec<f32> = (0..batch).flat_map(|s| x[(s * c + i) * hw * hw..(s * c + i + 1) * hw * hw].to_vec()).collect();
        let (y, oh, ow) = conv_oracle(&xi, &dw[i * k * k..(i + 1) * k * k], &[0.0], [batch, 1, hw, hw], 1, k, stride, pad, false);
        dims = (oh, ow);
        want_dw.push(y);
    }
    let (oh, ow) = dims;
    let px = oh * ow;
    let mut want = vec![0.0; batch * m * px];
    for s in 0..batch {
        for j in 0..m {
            for q in 0..px {
                let mut acc = b[j] as f64;
                for i in 0..c {
                    acc += pw[j * c + i] as f64 * want_dw[i][s * px + q];
                }
                want[(s * m + j) * px + q] = acc;
            }
        }
    }
    if !close(&yi, &want) {
        return Err("output differs from the loop oracle".into());
    }
    Ok(())
}
