//! Single-sample transforms, mixup, and the per-example augmentation set
//! builder behind Self-Aug, Self-Mix and DP-Mix_Diff.
//!
//! Everything here works on exactly one private example at a time. The only
//! other input the set builder may read is the synthetic pool, which is
//! generated without access to private data.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LabeledExample;
use crate::tensor::Tensor;

/// Random horizontal flip followed by a reflect-padded random crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformPipeline {
    pub flip_enabled: bool,
    pub flip_probability: f64,
    pub crop_enabled: bool,
    /// Reflect padding on each side before cropping back to the input size.
    pub crop_padding: usize,
}

impl Default for TransformPipeline {
    fn default() -> Self {
        TransformPipeline { flip_enabled: true, flip_probability: 0.5, crop_enabled: true, crop_padding: 4 }
    }
}

impl TransformPipeline {
    /// A pipeline that returns its input unchanged.
    pub fn identity() -> Self {
        TransformPipeline { flip_enabled: false, flip_probability: 0.0, crop_enabled: false, crop_padding: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability must be in [0, 1], got {}",
                self.flip_probability
            )));
        }
        Ok(())
    }

    /// Applies the pipeline to a `C x H x W` image. Output has the input's
    /// shape and only contains pixel values present in the input.
    pub fn apply<R: Rng + ?Sized>(&self, image: &Tensor, rng: &mut R) -> Result<Tensor> {
        let [c, h, w] = image_dims(image)?;
        let flip = self.flip_enabled && rng.random::<f64>() < self.flip_probability;
        let (dy, dx) = if self.crop_enabled {
            let span = 2 * self.crop_padding as i64;
            (rng.random_range(0..=span), rng.random_range(0..=span))
        } else {
            (self.crop_padding as i64, self.crop_padding as i64)
        };
        // Offsets of the crop window relative to the unpadded image.
        let (oy, ox) = (dy - self.crop_padding as i64, dx - self.crop_padding as i64);
        if !flip && oy == 0 && ox == 0 {
            return Ok(image.clone());
        }
        let src = image.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for i in 0..h {
                let si = reflect(i as i64 + oy, h);
                for j in 0..w {
                    let jj = if flip { w - 1 - j } else { j };
                    let sj = reflect(jj as i64 + ox, w);
                    out[(ch * h + i) * w + j] = src[(ch * h + si) * w + sj];
                }
            }
        }
        Tensor::new(image.shape().to_vec(), out)
    }
}

fn image_dims(image: &Tensor) -> Result<[usize; 3]> {
    match *image.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref other => Err(Error::Shape { expected: vec![0, 0, 0], actual: other.to_vec() }),
    }
}

/// Mirror-reflect an index into `[0, n)` without repeating the edge pixel.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Distribution of the mixup coefficient: `λ ~ Beta(alpha, alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { alpha: 0.2 }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("mixup alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, config: &MixupConfig) -> Result<f64> {
    config.validate()?;
    let beta = Beta::new(config.alpha, config.alpha)
        .map_err(|e| Error::Config(format!("beta distribution: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// `λ a + (1 - λ) b` on both features and labels.
pub fn mixup(a: &LabeledExample, b: &LabeledExample, lambda: f64) -> Result<LabeledExample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("mixup coefficient {lambda} outside [0, 1]")));
    }
    if a.features.shape() != b.features.shape() {
        return Err(Error::Shape {
            expected: a.features.shape().to_vec(),
            actual: b.features.shape().to_vec(),
        });
    }
    if a.label.len() != b.label.len() {
        return Err(Error::Length { expected: a.label.len(), actual: b.label.len() });
    }
    let mu = 1.0 - lambda;
    // Equal coordinates are copied so that mixing two copies of a label
    // returns it bit for bit.
    let combine = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(&u, &v)| if u == v { u } else { lambda * u + mu * v }).collect()
    };
    Ok(LabeledExample {
        features: Tensor::new(a.features.shape().to_vec(), combine(a.features.data(), b.features.data()))?,
        label: combine(&a.label, &b.label),
    })
}

/// `ka` independent transforms of `x`, each keeping `x`'s label.
pub fn self_augment<R: Rng + ?Sized>(
    x: &LabeledExample,
    ka: usize,
    pipeline: &TransformPipeline,
    rng: &mut R,
) -> Result<Vec<LabeledExample>> {
    (0..ka)
        .map(|_| {
            Ok(LabeledExample { features: pipeline.apply(&x.features, rng)?, label: x.label.clone() })
        })
        .collect()
}

/// How many augmentations of each kind to build per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Base self-augmentations.
    pub ka: usize,
    /// Mixup outputs.
    pub km: usize,
    /// Synthetic pool samples.
    pub kd: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig { ka: 16, km: 0, kd: 0 }
    }
}

impl AugmentationConfig {
    pub fn new(ka: usize, km: usize, kd: usize) -> Self {
        AugmentationConfig { ka, km, kd }
    }

    pub fn k_total(&self) -> usize {
        self.ka + self.km + self.kd
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_total() == 0 {
            return Err(Error::Config("augmentation.ka + km + kd must be at least 1".into()));
        }
        if self.km > 0 && self.ka + self.kd < 2 {
            return Err(Error::Config(
                "augmentation.km > 0 needs at least two base samples (ka + kd >= 2) to mix".into(),
            ));
        }
        Ok(())
    }
}

/// Class-labeled samples produced without touching private data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticPool {
    samples: Vec<LabeledExample>,
    by_class: Vec<Vec<usize>>,
    pub provenance: String,
    /// Classes with no samples in the pool.
    pub missing_classes: Vec<usize>,
}

impl SyntheticPool {
    /// Every label must be one-hot over `num_classes`.
    pub fn new(samples: Vec<LabeledExample>, num_classes: usize, provenance: impl Into<String>) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, s) in samples.iter().enumerate() {
            let class = one_hot_class(&s.label)
                .ok_or_else(|| Error::Domain(format!("pool sample {i} does not carry a one-hot label")))?;
            if class >= num_classes || s.label.len() != num_classes {
                return Err(Error::LabelRange { label: class, num_classes });
            }
            if i > 0 && s.features.shape() != samples[0].features.shape() {
                return Err(Error::Shape {
                    expected: samples[0].features.shape().to_vec(),
                    actual: s.features.shape().to_vec(),
                });
            }
            by_class[class].push(i);
        }
        let missing_classes = by_class.iter().enumerate().filter(|(_, v)| v.is_empty()).map(|(c, _)| c).collect();
        Ok(SyntheticPool { samples, by_class, provenance: provenance.into(), missing_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledExample] {
        &self.samples
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        self.by_class.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }
}

fn one_hot_class(label: &[f64]) -> Option<usize> {
    let hot = label.iter().position(|v| *v == 1.0)?;
    label.iter().enumerate().all(|(i, v)| i == hot || *v == 0.0).then_some(hot)
}

/// Builds `S ∪ S'` for one private example:
///
/// 1. `S` starts as `ka` self-augmentations of `x`,
/// 2. then `kd` pool samples drawn uniformly without replacement are appended,
/// 3. `S'` holds `km` mixups, each of two distinct elements of `S` with a
///    fresh `λ`.
///
/// The result has `ka + kd + km` elements in that order. Pool samples are not
/// transformed.
pub fn build_augmentation_set<R: Rng + ?Sized>(
    x: &LabeledExample,
    pool: Option<&SyntheticPool>,
    config: &AugmentationConfig,
    pipeline: &TransformPipeline,
    mix: &MixupConfig,
    rng: &mut R,
) -> Result<Vec<LabeledExample>> {
    config.validate()?;
    let mut set = self_augment(x, config.ka, pipeline, rng)?;
    if config.kd > 0 {
        let pool = pool.filter(|p| !p.is_empty()).ok_or_else(|| {
            Error::Config("augmentation.kd > 0 requires a non-empty synthetic pool".into())
        })?;
        if pool.len() < config.kd {
            return Err(Error::Config(format!(
                "augmentation.kd = {} exceeds synthetic pool size {}",
                config.kd,
                pool.len()
            )));
        }
        for i in index::sample(rng, pool.len(), config.kd) {
            let s = &pool.samples[i];
            if s.features.shape() != x.features.shape() || s.label.len() != x.label.len() {
                return Err(Error::Shape {
                    expected: x.features.shape().to_vec(),
                    actual: s.features.shape().to_vec(),
                });
            }
            set.push(s.clone());
        }
    }
    let base = set.len();
    set.reserve(config.km);
    for _ in 0..config.km {
        let pair = index::sample(rng, base, 2);
        let lambda = sample_lambda(rng, mix)?;
        let mixed = mixup(&set[pair.index(0)], &set[pair.index(1)], lambda)?;
        set.push(mixed);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap()
    }

    fn example(label: usize, classes: usize) -> LabeledExample {
        let mut y = vec![0.0; classes];
        y[label] = 1.0;
        LabeledExample::new(image(2, 4, 4, |i| i as f64 / 32.0), y).unwrap()
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(5, 4), 1);
        assert_eq!(reflect(2, 4), 2);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn identity_pipeline_is_identity() {
        let x = example(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self_augment(&x, 1, &TransformPipeline::identity(), &mut rng).unwrap();
        assert_eq!(out, vec![x]);
    }

    #[test]
    fn forced_flip_mirrors_rows() {
        let x = image(1, 2, 3, |i| i as f64);
        let p = TransformPipeline { flip_enabled: true, flip_probability: 1.0, crop_enabled: false, crop_padding: 0 };
        let out = p.apply(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn transforms_keep_shape_and_value_set() {
        let x = image(3, 8, 8, |i| (i % 17) as f64 / 16.0);
        let p = TransformPipeline::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let out = p.apply(&x, &mut rng).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.data().iter().all(|v| x.data().contains(v)));
        }
    }

    #[test]
    fn self_augment_keeps_labels_and_is_seeded() {
        let x = example(2, 4);
        let p = TransformPipeline::default();
        let a = self_augment(&x, 16, &p, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = self_augment(&x, 16, &p, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|e| e.label == x.label));
        assert_eq!(a, b);
    }

    #[test]
    fn mixup_endpoints_and_arithmetic() {
        let zeros = LabeledExample::new(image(1, 2, 2, |_| 0.0), vec![1.0, 0.0]).unwrap();
        let ones = LabeledExample::new(image(1, 2, 2, |_| 1.0), vec![0.0, 1.0]).unwrap();
        assert_eq!(mixup(&zeros, &ones, 1.0).unwrap(), zeros);
        assert_eq!(mixup(&zeros, &ones, 0.0).unwrap(), ones);
        let m = mixup(&zeros, &ones, 0.25).unwrap();
        assert!(m.features.data().iter().all(|v| *v == 0.75));
        assert_eq!(m.label, vec![0.25, 0.75]);
    }

    #[test]
    fn mixup_errors() {
        let a = LabeledExample::new(image(1, 2, 2, |_| 0.0), vec![1.0, 0.0]).unwrap();
        let b = LabeledExample::new(image(1, 2, 3, |_| 0.0), vec![1.0, 0.0]).unwrap();
        assert!(matches!(mixup(&a, &b, 0.5), Err(Error::Shape { .. })));
        assert!(matches!(mixup(&a, &a, 1.5), Err(Error::Domain(_))));
        let c = LabeledExample::new(image(1, 2, 2, |_| 0.0), vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(mixup(&a, &c, 0.5), Err(Error::Length { .. })));
    }

    #[test]
    fn lambda_is_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MixupConfig::default();
        for _ in 0..10_000 {
            let l = sample_lambda(&mut rng, &cfg).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
        assert!(sample_lambda(&mut rng, &MixupConfig { alpha: 0.0 }).is_err());
    }

    fn pool(n_per_class: usize, classes: usize) -> SyntheticPool {
        let samples = (0..classes)
            .flat_map(|c| (0..n_per_class).map(move |_| example(c, classes)))
            .collect();
        SyntheticPool::new(samples, classes, "test").unwrap()
    }

    #[test]
    fn set_sizes_follow_config() {
        let x = example(0, 3);
        let p = pool(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (ka, km, kd) in [(16, 0, 0), (16, 18, 2), (8, 8, 4)] {
            let cfg = AugmentationConfig::new(ka, km, kd);
            let set = build_augmentation_set(
                &x,
                Some(&p),
                &cfg,
                &TransformPipeline::default(),
                &MixupConfig::default(),
                &mut rng,
            )
            .unwrap();
            assert_eq!(set.len(), ka + km + kd);
        }
    }

    #[test]
    fn self_aug_special_case_matches_self_augment() {
        let x = example(1, 3);
        let pipe = TransformPipeline::default();
        let a = build_augmentation_set(
            &x,
            None,
            &AugmentationConfig::new(16, 0, 0),
            &pipe,
            &MixupConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = self_augment(&x, 16, &pipe, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kd_without_pool_is_a_config_error() {
        let x = example(0, 3);
        let empty = SyntheticPool::new(Vec::new(), 3, "empty").unwrap();
        for p in [None, Some(&empty)] {
            let r = build_augmentation_set(
                &x,
                p,
                &AugmentationConfig::new(4, 2, 2),
                &TransformPipeline::default(),
                &MixupConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(0),
            );
            assert!(matches!(r, Err(Error::Config(_))));
        }
    }

    #[test]
    fn pool_tracks_classes() {
        let samples = vec![example(0, 4), example(0, 4), example(2, 4)];
        let p = SyntheticPool::new(samples, 4, "partial").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.missing_classes, vec![1, 3]);
        assert_eq!(p.class_indices(0), &[0, 1]);
        let soft = LabeledExample::new(image(2, 4, 4, |_| 0.0), vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(SyntheticPool::new(vec![soft], 4, "bad").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::new(0, 0, 0).validate().is_err());
        assert!(AugmentationConfig::new(1, 1, 0).validate().is_err());
        assert!(AugmentationConfig::new(2, 1, 0).validate().is_ok());
        assert!(AugmentationConfig::new(0, 4, 2).validate().is_ok());
    }
}
