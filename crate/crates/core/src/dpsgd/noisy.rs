//! Clipping, Poisson sampling and the noisy gradient of each regime.
//!
//! Every regime is split in two: a pre-noise *clipped sum* (the quantity whose
//! sensitivity the privacy analysis bounds) and [`privatize`], which adds one
//! `N(0, C²σ²)` draw per coordinate and rescales. The sums are computed per
//! contribution in parallel and reduced in index order, so results do not
//! depend on the worker count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::augment::{
    build_augmentation_set, mixup, sample_lambda, self_augment, AugmentationConfig, MixupConfig,
    SyntheticPool, TransformPipeline,
};
use crate::error::{Error, Result};
use crate::nn::{LabeledExample, Model};
use crate::rng::{Purpose, SeedStreams};
use crate::tensor::{add_assign, l2_norm, Tensor};

/// Scales `g` in place to L2 norm at most `c`; returns whether it was scaled.
/// Vectors already within the bound are left bit-for-bit unchanged.
pub fn clip_in_place(g: &mut [f64], c: f64) -> bool {
    let norm = l2_norm(g);
    if norm <= c {
        return false;
    }
    let factor = c / norm;
    g.iter_mut().for_each(|v| *v *= factor);
    true
}

/// `g · min(1, C / ‖g‖₂)`.
pub fn clip(g: &Tensor, c: f64) -> Result<Tensor> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("clip bound must be positive, got {c}")));
    }
    let mut out = g.clone();
    clip_in_place(out.data_mut(), c);
    Ok(out)
}

/// Includes each of `0..n` independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Parameter(format!("sampling rate must be in [0, 1], got {q}")));
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < q).collect())
}

/// Pre-noise sum of clipped contributions plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedSum {
    pub sum: Vec<f64>,
    /// Terms in the sum (examples, or microbatches).
    pub contributions: usize,
    /// Number of times the clip operator ran.
    pub clip_calls: usize,
    /// Terms whose norm exceeded the bound.
    pub clipped: usize,
    /// Examples folded into the sum (after any remainder was dropped).
    pub examples_used: usize,
}

impl ClippedSum {
    pub fn clip_fraction(&self) -> f64 {
        if self.contributions == 0 {
            0.0
        } else {
            self.clipped as f64 / self.contributions as f64
        }
    }
}

fn check_clip(c: f64) -> Result<()> {
    if !(c > 0.0) || c.is_nan() {
        return Err(Error::Config(format!("clip bound must be positive, got {c}")));
    }
    Ok(())
}

/// Clips each per-contribution gradient and sums in index order.
fn reduce_clipped(
    model: &Model,
    count: usize,
    c: f64,
    examples_used: usize,
    contribution: impl Fn(usize, &mut [f64]) -> Result<()> + Sync,
) -> Result<ClippedSum> {
    let p = model.num_params();
    let parts = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; p];
            contribution(i, &mut g)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow("per-example gradient"));
            }
            let was_clipped = clip_in_place(&mut g, c);
            Ok((g, was_clipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; p];
    let mut clipped = 0;
    for (g, was_clipped) in &parts {
        add_assign(&mut sum, g);
        clipped += usize::from(*was_clipped);
    }
    Ok(ClippedSum { sum, contributions: count, clip_calls: parts.len(), clipped, examples_used })
}

/// `Σᵢ clip(gᵢ)` over individual examples.
pub fn clipped_sum_per_example(model: &Model, batch: &[LabeledExample], c: f64) -> Result<ClippedSum> {
    check_clip(c)?;
    reduce_clipped(model, batch.len(), c, batch.len(), |i, g| {
        model.accumulate_gradient(&batch[i], 1.0, g).map(drop)
    })
}

/// Input mixup inside size-2 microbatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MicrobatchMixup {
    #[default]
    Off,
    /// The microbatch is replaced by the single mixed example.
    Replace,
    /// The mixed example joins the microbatch as a third member.
    Append,
}

/// `Σᵢ clip((1/b) Σⱼ g_{i,j})` over consecutive microbatches of size `b`.
/// A trailing remainder smaller than `b` is dropped.
pub fn clipped_sum_microbatch<R: Rng + ?Sized>(
    model: &Model,
    batch: &[LabeledExample],
    b: usize,
    c: f64,
    mixup_mode: MicrobatchMixup,
    mix: &MixupConfig,
    lambda_rng: &mut R,
) -> Result<ClippedSum> {
    check_clip(c)?;
    if b == 0 {
        return Err(Error::Config("microbatch size must be at least 1".into()));
    }
    if b > batch.len() {
        return Err(Error::Config(format!("microbatch size {b} exceeds batch size {}", batch.len())));
    }
    if mixup_mode != MicrobatchMixup::Off && b != 2 {
        return Err(Error::Config(format!("microbatch mixup needs microbatch size 2, got {b}")));
    }
    let groups = batch.len() / b;
    let lambdas = match mixup_mode {
        MicrobatchMixup::Off => Vec::new(),
        _ => (0..groups).map(|_| sample_lambda(lambda_rng, mix)).collect::<Result<Vec<_>>>()?,
    };
    reduce_clipped(model, groups, c, groups * b, |i, g| {
        let members = &batch[i * b..(i + 1) * b];
        match mixup_mode {
            MicrobatchMixup::Off => {
                let w = 1.0 / b as f64;
                for ex in members {
                    model.accumulate_gradient(ex, w, g)?;
                }
            }
            MicrobatchMixup::Replace => {
                let mixed = mixup(&members[0], &members[1], lambdas[i])?;
                model.accumulate_gradient(&mixed, 1.0, g)?;
            }
            MicrobatchMixup::Append => {
                let mixed = mixup(&members[0], &members[1], lambdas[i])?;
                let w = 1.0 / 3.0;
                for ex in members.iter().chain(std::iter::once(&mixed)) {
                    model.accumulate_gradient(ex, w, g)?;
                }
            }
        }
        Ok(())
    })
}

/// Produces the augmentation set of one private example. `key` identifies the
/// example (its dataset index) and selects its RNG substream.
pub trait AugmentationSource: Sync {
    fn augment(&self, key: u64, x: &LabeledExample) -> Result<Vec<LabeledExample>>;
}

/// Self-Aug: `ka` transforms of the example.
#[derive(Debug, Clone, Copy)]
pub struct SelfAugSource<'a> {
    pub ka: usize,
    pub pipeline: TransformPipeline,
    pub streams: &'a SeedStreams,
    pub step: u64,
}

impl AugmentationSource for SelfAugSource<'_> {
    fn augment(&self, key: u64, x: &LabeledExample) -> Result<Vec<LabeledExample>> {
        if self.ka == 0 {
            return Err(Error::Config("augmentation.ka must be at least 1 for self-aug".into()));
        }
        let mut rng = self.streams.rng(Purpose::Augmentation, self.step, key);
        self_augment(x, self.ka, &self.pipeline, &mut rng)
    }
}

/// Self-Mix / DP-Mix_Diff: the full `S ∪ S'` builder.
#[derive(Debug, Clone, Copy)]
pub struct MixSource<'a> {
    pub config: AugmentationConfig,
    pub pipeline: TransformPipeline,
    pub mix: MixupConfig,
    pub pool: Option<&'a SyntheticPool>,
    pub streams: &'a SeedStreams,
    pub step: u64,
}

impl AugmentationSource for MixSource<'_> {
    fn augment(&self, key: u64, x: &LabeledExample) -> Result<Vec<LabeledExample>> {
        let mut rng = self.streams.rng(Purpose::Augmentation, self.step, key);
        build_augmentation_set(x, self.pool, &self.config, &self.pipeline, &self.mix, &mut rng)
    }
}

/// Augmentation-averaged gradient `(1/K) Σₖ g_k` of one example, before
/// clipping.
pub fn augmented_gradient(
    model: &Model,
    source: &dyn AugmentationSource,
    key: u64,
    x: &LabeledExample,
    out: &mut [f64],
) -> Result<()> {
    let set = source.augment(key, x)?;
    if set.is_empty() {
        return Err(Error::Config("augmentation set is empty".into()));
    }
    let w = 1.0 / set.len() as f64;
    for aug in &set {
        model.accumulate_gradient(aug, w, out)?;
    }
    Ok(())
}

/// `Σᵢ clip((1/K) Σₖ g_{i,k})`: one clip per original example, applied after
/// averaging over its augmentations.
pub fn clipped_sum_augmult(
    model: &Model,
    batch: &[(u64, LabeledExample)],
    c: f64,
    source: &dyn AugmentationSource,
) -> Result<ClippedSum> {
    check_clip(c)?;
    reduce_clipped(model, batch.len(), c, batch.len(), |i, g| {
        let (key, x) = &batch[i];
        augmented_gradient(model, source, *key, x, g)
    })
}

/// `scale · (sum + N(0, C²σ²I))`, one Gaussian draw per coordinate.
pub fn privatize<R: Rng + ?Sized>(sum: &[f64], c: f64, sigma: f64, scale: f64, noise_rng: &mut R) -> Vec<f64> {
    let std = c * sigma;
    sum.iter()
        .map(|s| {
            let noisy = if sigma > 0.0 {
                let z: f64 = noise_rng.sample(StandardNormal);
                s + std * z
            } else {
                *s
            };
            noisy * scale
        })
        .collect()
}

/// `(1/n) [Σ clip(gᵢ) + N(0, C²σ²I)]`.
pub fn noisy_grad_per_example<R: Rng + ?Sized>(
    batch: &[LabeledExample],
    model: &Model,
    c: f64,
    sigma: f64,
    noise_rng: &mut R,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s = clipped_sum_per_example(model, batch, c)?;
    Tensor::vector(privatize(&s.sum, c, sigma, 1.0 / batch.len() as f64, noise_rng))
}

/// `(b/n) [Σᵢ clip((1/b) Σⱼ g_{i,j}) + N(0, C²σ²I)]` with `n` the number of
/// examples kept after dropping the remainder.
#[allow(clippy::too_many_arguments)]
pub fn noisy_grad_microbatch<R: Rng + ?Sized, S: Rng + ?Sized>(
    batch: &[LabeledExample],
    b: usize,
    model: &Model,
    c: f64,
    sigma: f64,
    mixup_mode: MicrobatchMixup,
    mix: &MixupConfig,
    lambda_rng: &mut S,
    noise_rng: &mut R,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s = clipped_sum_microbatch(model, batch, b, c, mixup_mode, mix, lambda_rng)?;
    let scale = b as f64 / s.examples_used as f64;
    Tensor::vector(privatize(&s.sum, c, sigma, scale, noise_rng))
}

/// `(1/n) [Σᵢ clip((1/K) Σₖ g_{i,k}) + N(0, C²σ²I)]`.
pub fn noisy_grad_augmult<R: Rng + ?Sized>(
    batch: &[(u64, LabeledExample)],
    model: &Model,
    c: f64,
    sigma: f64,
    source: &dyn AugmentationSource,
    noise_rng: &mut R,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s = clipped_sum_augmult(model, batch, c, source)?;
    Tensor::vector(privatize(&s.sum, c, sigma, 1.0 / batch.len() as f64, noise_rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, InputShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lr_model(d: usize, classes: usize, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::init(Architecture::LogisticRegression, InputShape::new(1, 1, d), classes, &mut rng).unwrap()
    }

    fn ex(x: Vec<f64>, label: usize, classes: usize) -> LabeledExample {
        let mut y = vec![0.0; classes];
        y[label] = 1.0;
        let d = x.len();
        LabeledExample::new(Tensor::new(vec![1, 1, d], x).unwrap(), y).unwrap()
    }

    #[test]
    fn clip_examples() {
        let g = Tensor::vector(vec![1.2, 1.6]).unwrap(); // norm 2
        let out = clip(&g, 1.0).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15 && (out.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&Tensor::vector(vec![0.0; 3]).unwrap(), 1.0).unwrap().data(), &[0.0; 3]);
        let small = Tensor::vector(vec![0.3, 0.4]).unwrap(); // norm 0.5
        let same = clip(&small, 1.0).unwrap();
        assert_eq!(same.data()[0].to_bits(), 0.3f64.to_bits());
        assert_eq!(same.data()[1].to_bits(), 0.4f64.to_bits());
        assert!(clip(&small, 0.0).is_err());
    }

    #[test]
    fn poisson_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(poisson_sample(100, 0.0, &mut rng).unwrap().is_empty());
        assert_eq!(poisson_sample(100, 1.0, &mut rng).unwrap(), (0..100).collect::<Vec<_>>());
        assert!(poisson_sample(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn single_unclipped_example_passes_through() {
        let m = lr_model(3, 2, 1);
        let e = ex(vec![0.1, -0.2, 0.05], 0, 2);
        let g = m.per_example_gradient(&e).unwrap();
        assert!(g.l2_norm() <= 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = noisy_grad_per_example(&[e], &m, 10.0, 0.0, &mut rng).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn opposite_gradients_cancel() {
        // At θ = 0 the gradient of (x, e₀) is the negative of (x, e₁) for 2 classes.
        let m = Model::zeros(Architecture::LogisticRegression, InputShape::new(1, 1, 2), 2).unwrap();
        let batch = [ex(vec![0.3, 0.1], 0, 2), ex(vec![0.3, 0.1], 1, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = noisy_grad_per_example(&batch, &m, 1.0, 0.0, &mut rng).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let m = lr_model(2, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(noisy_grad_per_example(&[], &m, 1.0, 1.0, &mut rng), Err(Error::EmptyBatch)));
    }

    #[test]
    fn microbatch_of_one_equals_per_example() {
        let m = lr_model(4, 3, 2);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<_> = (0..7)
            .map(|i| ex((0..4).map(|_| r.random_range(-3.0..3.0)).collect(), i % 3, 3))
            .collect();
        let a = noisy_grad_per_example(&batch, &m, 0.5, 1.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = noisy_grad_microbatch(
            &batch,
            1,
            &m,
            0.5,
            1.3,
            MicrobatchMixup::Off,
            &MixupConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_microbatch_is_clipped_mean() {
        let m = lr_model(3, 2, 3);
        let batch = vec![ex(vec![4.0, 0.0, 1.0], 0, 2), ex(vec![0.0, 5.0, -1.0], 1, 2)];
        let mut mean = vec![0.0; m.num_params()];
        for e in &batch {
            m.accumulate_gradient(e, 0.5, &mut mean).unwrap();
        }
        let expected = clip(&Tensor::vector(mean).unwrap(), 0.1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = noisy_grad_microbatch(
            &batch,
            2,
            &m,
            0.1,
            0.0,
            MicrobatchMixup::Off,
            &MixupConfig::default(),
            &mut r.clone(),
            &mut r,
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn microbatch_errors() {
        let m = lr_model(2, 2, 0);
        let batch = vec![ex(vec![1.0, 0.0], 0, 2)];
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mix = MixupConfig::default();
        assert!(matches!(
            clipped_sum_microbatch(&m, &batch, 2, 1.0, MicrobatchMixup::Off, &mix, &mut r),
            Err(Error::Config(_))
        ));
        let batch3 = vec![batch[0].clone(), batch[0].clone(), batch[0].clone()];
        assert!(clipped_sum_microbatch(&m, &batch3, 3, 1.0, MicrobatchMixup::Replace, &mix, &mut r).is_err());
        let s = clipped_sum_microbatch(&m, &batch3, 2, 1.0, MicrobatchMixup::Off, &mix, &mut r).unwrap();
        assert_eq!((s.contributions, s.examples_used), (1, 2));
    }

    #[test]
    fn augmult_with_k_one_equals_per_example() {
        let m = lr_model(4, 3, 4);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<_> = (0..5)
            .map(|i| ex((0..4).map(|_| r.random_range(-2.0..2.0)).collect(), i % 3, 3))
            .collect();
        let keyed: Vec<_> = batch.iter().cloned().enumerate().map(|(i, e)| (i as u64, e)).collect();
        let streams = SeedStreams::new(1);
        let src = SelfAugSource { ka: 1, pipeline: TransformPipeline::identity(), streams: &streams, step: 0 };
        let a = noisy_grad_per_example(&batch, &m, 0.7, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = noisy_grad_augmult(&keyed, &m, 0.7, 0.0, &src, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augmult_clips_once_per_example() {
        let m = Model::zeros(Architecture::LogisticRegression, InputShape::new(1, 4, 4), 3).unwrap();
        let streams = SeedStreams::new(3);
        let batch: Vec<_> = (0..6u64)
            .map(|i| {
                let x = (0..16).map(|j| ((i as usize + j) % 5) as f64).collect();
                let mut y = vec![0.0; 3];
                y[i as usize % 3] = 1.0;
                (i, LabeledExample::new(Tensor::new(vec![1, 4, 4], x).unwrap(), y).unwrap())
            })
            .collect();
        let src = MixSource {
            config: AugmentationConfig::new(4, 4, 0),
            pipeline: TransformPipeline { crop_padding: 1, ..TransformPipeline::default() },
            mix: MixupConfig::default(),
            pool: None,
            streams: &streams,
            step: 0,
        };
        let s = clipped_sum_augmult(&m, &batch, 0.01, &src).unwrap();
        assert_eq!(s.clip_calls, batch.len());
        assert_eq!(s.contributions, batch.len());
    }
}
