//! Per-parameter gradient magnitude diagnostics, taken before clipping and
//! noise.

use rayon::prelude::*;
use serde::Serialize;

use super::noisy::{augmented_gradient, AugmentationSource};
use crate::error::{Error, Result};
use crate::nn::{LabeledExample, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradStatsOptions {
    pub bins: usize,
    /// Multiplies the loss (and so every gradient) before measuring.
    pub loss_scale: f64,
}

impl Default for GradStatsOptions {
    fn default() -> Self {
        GradStatsOptions { bins: 50, loss_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[0, max(values)]`. All-zero input gives the
    /// single bin `[0, 0]`.
    pub fn of(values: &[f64], bins: usize) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max);
        if max == 0.0 || bins == 0 {
            return Histogram { edges: vec![0.0, max], counts: vec![values.len()] };
        }
        let width = max / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { max } else { i as f64 * width }).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Statistics recorded at one point of training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochGradStats {
    pub epoch: u64,
    /// Per-parameter mean of `|g|` over the sampled examples.
    pub mean_abs: Vec<f64>,
    /// Mean of `mean_abs` across parameters.
    pub mean: f64,
    /// Population standard deviation of `mean_abs` across parameters.
    pub std: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradientStats {
    pub epochs: Vec<EpochGradStats>,
}

impl GradientStats {
    pub fn at_epoch(&self, epoch: u64) -> Option<&EpochGradStats> {
        self.epochs.iter().find(|e| e.epoch == epoch)
    }
}

/// Measures pre-clip gradients of `examples` at the model's current
/// parameters. With a `source`, each example's gradient is the
/// augmentation average used by the augmentation-multiplicity regimes.
pub fn gradient_stats(
    model: &Model,
    examples: &[(u64, LabeledExample)],
    source: Option<&dyn AugmentationSource>,
    options: &GradStatsOptions,
    epoch: u64,
) -> Result<EpochGradStats> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let p = model.num_params();
    let grads = examples
        .par_iter()
        .map(|(key, x)| {
            let mut g = vec![0.0; p];
            match source {
                Some(src) => augmented_gradient(model, src, *key, x, &mut g)?,
                None => {
                    model.accumulate_gradient(x, 1.0, &mut g)?;
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow("per-example gradient"));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean_abs = vec![0.0; p];
    for g in &grads {
        for (m, v) in mean_abs.iter_mut().zip(g) {
            *m += (options.loss_scale * v).abs();
        }
    }
    let inv = 1.0 / examples.len() as f64;
    mean_abs.iter_mut().for_each(|m| *m *= inv);
    let mean = mean_abs.iter().sum::<f64>() / p as f64;
    let var = mean_abs.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / p as f64;
    let histogram = Histogram::of(&mean_abs, options.bins);
    Ok(EpochGradStats { epoch, mean_abs, mean, std: var.sqrt(), histogram })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, InputShape};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn histogram_mass_equals_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let values: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let h = Histogram::of(&values, 17);
        assert_eq!(h.total(), 1000);
        assert_eq!(h.edges.len(), 18);
        let zero = Histogram::of(&[0.0; 5], 10);
        assert_eq!(zero.counts, vec![5]);
        assert_eq!(zero.edges, vec![0.0, 0.0]);
    }

    #[test]
    fn stationary_sample_gives_zero_stats() {
        let m = Model::zeros(Architecture::LogisticRegression, InputShape::new(1, 2, 2), 4).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let uniform = LabeledExample::new(x, vec![0.25; 4]).unwrap();
        let sample = vec![(0, uniform.clone()), (1, uniform)];
        let s = gradient_stats(&m, &sample, None, &GradStatsOptions::default(), 1).unwrap();
        assert!(s.mean_abs.iter().all(|v| *v == 0.0));
        assert_eq!((s.mean, s.std), (0.0, 0.0));
        assert_eq!(s.histogram.counts, vec![m.num_params()]);
    }

    #[test]
    fn loss_scale_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = InputShape::new(1, 3, 3);
        let m = Model::init(Architecture::Mlp { hidden: vec![4] }, input, 3, &mut rng).unwrap();
        let sample: Vec<_> = (0..4u64)
            .map(|i| {
                let x = Tensor::new(vec![1, 3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let mut y = vec![0.0; 3];
                y[i as usize % 3] = 1.0;
                (i, LabeledExample::new(x, y).unwrap())
            })
            .collect();
        let one = gradient_stats(&m, &sample, None, &GradStatsOptions::default(), 0).unwrap();
        let two = gradient_stats(&m, &sample, None, &GradStatsOptions { loss_scale: 2.0, ..Default::default() }, 0)
            .unwrap();
        for (a, b) in one.mean_abs.iter().zip(&two.mean_abs) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        assert!((2.0 * one.std - two.std).abs() < 1e-12);
    }
}
