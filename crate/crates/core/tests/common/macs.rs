use idp::layers::Pass;
use idp::networks::{ClassifierInput, LayerKind, LayerSpec, Model, NetworkSpec, ProfileRange};
use idp::profiles::ProfileKind;
use idp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn conv(out: usize) -> LayerSpec {
    LayerSpec::new(LayerKind::Conv { out, kernel: 3, stride: 1, pad: 1 }).relu()
}

/// `depth` IDP 64→64 convolutions between a complete stem and classifier.
pub fn conv_chain(depth: usize, classifier_input: ClassifierInput) -> NetworkSpec {
    let mut layers = vec![conv(64)];
    layers.extend((0..depth).map(|_| conv(64).idp()));
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Fc { out: 10 }));
    NetworkSpec {
        name: "chain".into(),
        input: [64, 32, 32],
        classes: 10,
        profile: ProfileKind::Linear,
        classifier_input,
        device_split: None,
        layers,
    }
}

#[derive(Clone, Debug)]
pub enum Piece {
    Conv(usize, bool),
    Sep(usize),
    BConv(usize),
    Pool,
}

impl Piece {
    pub fn random(rng: &mut impl Rng) -> Piece {
        match rng.gen_range(0..4) {
            0 => Piece::Conv(rng.gen_range(2..8), rng.gen_bool(0.5)),
            1 => Piece::Sep(rng.gen_range(2..7)),
            2 => Piece::BConv(rng.gen_range(2..7)),
            _ => Piece::Pool,
        }
    }
}

pub fn random_spec(c: usize, stem: usize, pieces: &[Piece], hidden: Option<usize>, prefix: bool) -> NetworkSpec {
    let mut layers = vec![conv(stem)];
    let mut hw = 8;
    for p in pieces {
        layers.push(match *p {
            Piece::Conv(out, idp) => {
                let l = conv(out);
                if idp { l.idp() } else { l }
            }
            Piece::Sep(out) => LayerSpec::new(LayerKind::Sepconv { out, kernel: 3, stride: 1, pad: 1 }).idp().relu(),
            Piece::BConv(out) => LayerSpec::new(LayerKind::BConv { out, kernel: 3, stride: 1, pad: 1 }).idp(),
            Piece::Pool if hw >= 4 => {
                hw /= 2;
                LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 })
            }
            Piece::Pool => LayerSpec::new(LayerKind::AvgPool { size: 1, stride: 1 }),
        });
    }
    layers.push(LayerSpec::new(LayerKind::Flatten));
    if let Some(h) = hidden {
        layers.push(LayerSpec::new(LayerKind::Fc { out: h }).idp().relu());
    }
    layers.push(LayerSpec::new(LayerKind::Fc { out: 3 }));
    NetworkSpec {
        name: "random".into(),
        input: [c, 8, 8],
        classes: 3,
        profile: ProfileKind::Harmonic,
        classifier_input: if prefix { ClassifierInput::ActivePrefix } else { ClassifierInput::Full },
        device_split: None,
        layers,
    }
}

/// Counts MACs on the instrumented reference kernels and the fast kernels for a
/// batch of two, and compares both with the analytic count. The two paths must
/// also agree bit for bit.
pub fn instrumented_matches(spec: &NetworkSpec, p: f64, seed: u64) -> Result<(), String> {
    let c = spec.input[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f32>::new(spec.clone(), vec![ProfileRange::full()], &mut rng).map_err(|e| e.to_string())?;
    let batch = 2;
    let x = Tensor::new(vec![batch, c, 8, 8], (0..batch * c * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();

    let mut reference = Pass::eval(0).reference();
    let slow = model.forward(&x, p, 0, &mut reference).map_err(|e| e.to_string())?;
    let mut fast = Pass::eval(0);
    let quick = model.forward(&x, p, 0, &mut fast).map_err(|e| e.to_string())?;

    let expected = batch as u64 * spec.count_macs(p).map_err(|e| e.to_string())?;
    if reference.macs != expected || fast.macs != expected {
        return Err(format!("p={p}: reference {} fast {} analytic {expected}", reference.macs, fast.macs));
    }
    if !slow.bit_eq(&quick) {
        return Err(format!("p={p}: fast and reference logits differ"));
    }
    Ok(())
}
