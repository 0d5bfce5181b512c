use std::path::PathBuf;

use idp::data::{load_cifar10, load_mnist, parse_cifar_records, parse_idx_images, parse_idx_labels};
use idp::IdpError;

pub fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803, n, rows, cols] {
        b.extend(v.to_be_bytes());
    }
    b.extend((0..n * rows * cols).map(|i| (i % 251) as u8));
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = 0x0801u32.to_be_bytes().to_vec();
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend(labels);
    b
}

pub fn cifar(labels: &[u8]) -> Vec<u8> {
    labels.iter().flat_map(|&l| std::iter::once(l).chain((0..3072).map(|i| (i % 256) as u8))).collect()
}

#[derive(Debug, PartialEq)]
pub enum Class {
    Format,
    Label,
}

pub fn class<T: std::fmt::Debug>(r: Result<T, IdpError>) -> Class {
    match r {
        Err(IdpError::Format { .. }) => Class::Format,
        Err(IdpError::LabelRange { .. }) => Class::Label,
        other => panic!("expected a format or label error, got {other:?}"),
    }
}

pub fn images(b: Vec<u8>) -> Class {
    class(parse_idx_images(&b, "images"))
}

pub fn labels(b: Vec<u8>) -> Class {
    class(parse_idx_labels(&b, "labels", 10))
}

pub fn records(b: Vec<u8>) -> Class {
    class(parse_cifar_records(&b, "batch"))
}

pub fn with(mut b: Vec<u8>, at: usize, v: u8) -> Vec<u8> {
    b[at] = v;
    b
}

pub fn cut(mut b: Vec<u8>, len: usize) -> Vec<u8> {
    b.truncate(len);
    b
}

/// Twenty corrupted or truncated files: name, observed error class, expected class.
pub fn corruption_cases() -> Vec<(&'static str, Class, Class)> {
    use Class::*;
    vec![
        ("empty images", images(vec![]), Format),
        ("magic only", images(cut(idx_images(2, 3, 3), 4)), Format),
        ("header cut mid count", images(cut(idx_images(2, 3, 3), 10)), Format),
        ("header without pixels", images(cut(idx_images(2, 3, 3), 16)), Format),
        ("one pixel short", images(cut(idx_images(2, 3, 3), 33)), Format),
        ("trailing byte", images([idx_images(2, 3, 3), vec![0]].concat()), Format),
        ("label magic on images", images(with(idx_images(2, 3, 3), 3, 0x01)), Format),
        ("wrong dtype byte", images(with(idx_images(2, 3, 3), 2, 0x09)), Format),
        ("count inflated", images(with(idx_images(2, 3, 3), 7, 3)), Format),
        ("huge dimensions", images(with(with(idx_images(1, 1, 1), 8, 0xff), 12, 0xff)), Format),
        ("empty labels", labels(vec![]), Format),
        ("image magic on labels", labels(with(idx_labels(&[1, 2]), 3, 0x03)), Format),
        ("labels cut", labels(cut(idx_labels(&[1, 2, 3]), 9)), Format),
        ("labels extra", labels([idx_labels(&[1]), vec![4]].concat()), Format),
        ("label 10", labels(idx_labels(&[1, 10, 2])), Label),
        ("label 255", labels(idx_labels(&[255])), Label),
        ("empty batch", records(vec![]), Format),
        ("partial record", records(cut(cifar(&[1, 2]), 3073 + 100)), Format),
        ("record plus one", records([cifar(&[1]), vec![0]].concat()), Format),
        ("cifar label 10", records(cifar(&[3, 10])), Label),
    ]
}

pub fn data_dir(name: &str) -> Option<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name);
    dir.is_dir().then_some(dir)
}

/// Sample and per-class counts of the train split plus the test split size.
pub fn mnist_counts(dir: &std::path::Path) -> (usize, usize, [usize; 10]) {
    let (train, test) = load_mnist(dir).unwrap();
    assert_eq!(train.images.shape(), &[60_000, 1, 28, 28]);
    let mut counts = [0usize; 10];
    train.labels.iter().for_each(|&l| counts[l] += 1);
    (train.len(), test.len(), counts)
}

pub fn cifar_counts(dir: &std::path::Path) -> (usize, usize, [usize; 10]) {
    let (train, test) = load_cifar10(dir, None).unwrap();
    assert_eq!(test.images.shape(), &[10_000, 3, 32, 32]);
    let mut counts = [0usize; 10];
    train.labels.iter().for_each(|&l| counts[l] += 1);
    (train.len(), test.len(), counts)
}

pub const MNIST_TRAIN_CLASSES: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];
