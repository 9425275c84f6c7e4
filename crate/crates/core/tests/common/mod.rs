#![allow(dead_code)]

use dpmix::data::Dataset;
use dpmix::{make_toy_dataset, InputShape, LabeledExample, Tensor, ToySpec, ToySplit};
use rand::Rng;
use rand_distr::StandardNormal;

/// Gaussian image with entries scaled by `scale`.
pub fn random_features<R: Rng>(rng: &mut R, shape: InputShape, scale: f64) -> Tensor {
    let data = (0..shape.len()).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.dims().to_vec(), data).unwrap()
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    y
}

/// A random point of the probability simplex.
pub fn soft_label<R: Rng>(rng: &mut R, classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

pub fn random_example<R: Rng>(rng: &mut R, shape: InputShape, classes: usize, scale: f64) -> LabeledExample {
    let label = one_hot(rng.random_range(0..classes), classes);
    LabeledExample::new(random_features(rng, shape, scale), label).unwrap()
}

/// Toy train and test splits, normalized with train statistics.
pub fn toy_splits(spec: &ToySpec, test_per_class: usize) -> (Dataset, Dataset) {
    let mut train = make_toy_dataset(spec, ToySplit::Train).unwrap();
    let mut test = make_toy_dataset(&ToySpec { per_class: test_per_class, ..spec.clone() }, ToySplit::Test).unwrap();
    let stats = train.normalize().unwrap();
    test.normalize_with(&stats).unwrap();
    (train, test)
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Asymptotic Kolmogorov-Smirnov p-value for statistic `d` on `n` samples,
/// with the usual small-sample correction of the argument.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
