use idp::data::{Dataset, DatasetKind, Split};
use idp::networks::{ClassifierInput, LayerKind, LayerSpec, NetworkSpec};
use idp::profiles::ProfileKind;
use idp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_spec() -> NetworkSpec {
    let conv = |out| LayerSpec::new(LayerKind::Conv { out, kernel: 3, stride: 1, pad: 1 });
    NetworkSpec {
        name: "small".into(),
        input: [1, 8, 8],
        classes: 4,
        profile: ProfileKind::Linear,
        classifier_input: ClassifierInput::Full,
        device_split: None,
        layers: vec![
            conv(8).bn().relu(),
            conv(12).idp().bn().relu(),
            LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 }),
            conv(12).idp().bn().relu(),
            LayerSpec::new(LayerKind::Flatten),
            LayerSpec::new(LayerKind::Fc { out: 16 }).idp().relu(),
            LayerSpec::new(LayerKind::Fc { out: 4 }),
        ],
    }
}

/// Labels from the quadrant holding the brightest pixel.
pub fn toy_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let img: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let top = (0..64).max_by(|&a, &b| img[a].total_cmp(&img[b])).unwrap();
        labels.push((top / 32) * 2 + (top % 8) / 4);
        px.extend(img);
    }
    Dataset::new(DatasetKind::Mnist, Split::Train, Tensor::new(vec![n, 1, 8, 8], px).unwrap(), labels, 4).unwrap()
}

