//! Differentially private SGD with mixup-based augmentation multiplicity.
//!
//! The crate trains small image classifiers under DP-SGD with three clipping
//! regimes:
//!
//! * per-example clipping, `(1/n) [Σ clip(gᵢ) + N(0, C²σ²I)]`;
//! * microbatch clipping, which clips the mean gradient of `b` examples and
//!   therefore has sensitivity `2C` rather than `C`;
//! * augmentation multiplicity, which averages the gradients of `K`
//!   augmentations of one example before its single clip. Self-Aug uses
//!   only transforms, Self-Mix adds mixups of those transforms, and
//!   DP-Mix_Diff also mixes in samples from a pre-generated synthetic pool.
//!
//! Privacy is tracked with a Rényi-DP accountant for the Poisson-subsampled
//! Gaussian mechanism, which also calibrates the noise multiplier for a
//! target `(ε, δ)`.
//!
//! ```
//! use dpmix::{calibrate_sigma, init_model, make_toy_dataset, train};
//! use dpmix::{Architecture, Regime, ToySpec, ToySplit, TrainingConfig, DEFAULT_ORDERS};
//!
//! let spec = ToySpec { per_class: 20, ..ToySpec::default() };
//! let train_set = make_toy_dataset(&spec, ToySplit::Train)?;
//! let test_set = make_toy_dataset(&spec, ToySplit::Test)?;
//!
//! let mut config = TrainingConfig {
//!     regime: Regime::PerExample,
//!     sampling_rate: 0.1,
//!     steps: 20,
//!     ..TrainingConfig::default()
//! };
//! config.noise_multiplier = calibrate_sigma(8.0, 0.1, 20, 1e-5, &DEFAULT_ORDERS)?;
//!
//! let model = init_model(Architecture::LogisticRegression, train_set.shape(), 10, 0)?;
//! let out = train(&config, &train_set, Some(&test_set), None, model)?;
//! assert!(out.epsilon.unwrap() <= 8.0);
//! # Ok::<(), dpmix::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cli;
pub mod data;
pub mod dpsgd;
pub mod error;
pub mod nn;
pub mod privacy;
pub mod rng;
pub mod tensor;

pub use augment::{
    build_augmentation_set, mixup, sample_lambda, self_augment, AugmentationConfig, MixupConfig,
    SyntheticPool, TransformPipeline,
};
pub use data::{
    load_cifar10_binary, load_container, load_synthetic_pool, make_toy_dataset, one_hot, save_container,
    Dataset, Normalization, PixelType, ToySpec, ToySplit,
};
pub use dpsgd::{evaluate, init_model, train, Regime, TrainOutput, Trainer, TrainingConfig};
pub use error::{Error, Result};
pub use nn::{Architecture, InputShape, LabeledExample, Model};
pub use privacy::{calibrate_sigma, compose, rdp_subsampled_gaussian, rdp_to_dp, AccountantParams, RdpCurve, DEFAULT_ORDERS};
pub use rng::{Purpose, SeedStreams};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/clipping.md")]
    mod clipping {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/accounting.md")]
    mod accounting {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
