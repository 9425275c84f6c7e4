//! DP-SGD: clipping regimes, noisy gradients and the training loop.

mod noisy;
mod stats;
mod train;

use serde::{Deserialize, Serialize};

pub use noisy::{
    augmented_gradient, clip, clip_in_place, clipped_sum_augmult, clipped_sum_microbatch,
    clipped_sum_per_example, noisy_grad_augmult, noisy_grad_microbatch, noisy_grad_per_example,
    poisson_sample, privatize, AugmentationSource, ClippedSum, MicrobatchMixup, MixSource,
    SelfAugSource,
};
pub use stats::{gradient_stats, EpochGradStats, GradStatsOptions, GradientStats, Histogram};
pub use train::{evaluate, init_model, train, AugmentationPath, EvalRecord, StepRecord, TrainOutput, Trainer};

use crate::augment::{AugmentationConfig, MixupConfig, TransformPipeline};
use crate::error::{Error, Result};
use crate::privacy::DEFAULT_ORDERS;

/// How per-example contributions are formed before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    PerExample,
    Microbatch,
    SelfAug,
    SelfMix,
    DpMixDiff,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::PerExample => "per-example",
            Regime::Microbatch => "microbatch",
            Regime::SelfAug => "self-aug",
            Regime::SelfMix => "self-mix",
            Regime::DpMixDiff => "dp-mix-diff",
        }
    }

    /// Regimes that average augmentation gradients before a single clip.
    pub fn uses_augmentation(self) -> bool {
        matches!(self, Regime::SelfAug | Regime::SelfMix | Regime::DpMixDiff)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradStatsPlan {
    /// Epochs (1-based) after which statistics are recorded.
    pub epochs: Vec<u64>,
    pub sample_size: usize,
    pub bins: usize,
}

impl Default for GradStatsPlan {
    fn default() -> Self {
        GradStatsPlan { epochs: Vec::new(), sample_size: 256, bins: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub clip_bound: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub learning_rate: f64,
    pub regime: Regime,
    pub microbatch_size: usize,
    /// Input mixup of each size-2 microbatch.
    pub microbatch_mixup: bool,
    /// Let the mixed example replace the pair instead of joining it.
    pub microbatch_mixup_replace: bool,
    pub augmentation: AugmentationConfig,
    pub transforms: TransformPipeline,
    pub mixup: MixupConfig,
    pub master_seed: u64,
    pub delta: f64,
    pub orders: Vec<f64>,
    /// Evaluate on the test split every this many steps; 0 means once per epoch.
    pub eval_every: u64,
    pub grad_stats: Option<GradStatsPlan>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            clip_bound: 1.0,
            noise_multiplier: 1.0,
            sampling_rate: 0.1,
            steps: 100,
            learning_rate: 1.0,
            regime: Regime::PerExample,
            microbatch_size: 2,
            microbatch_mixup: false,
            microbatch_mixup_replace: false,
            augmentation: AugmentationConfig::default(),
            transforms: TransformPipeline::default(),
            mixup: MixupConfig::default(),
            master_seed: 0,
            delta: 1e-5,
            orders: DEFAULT_ORDERS.to_vec(),
            eval_every: 0,
            grad_stats: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(self.clip_bound > 0.0) {
            return cfg(format!("training.clip_bound must be positive, got {}", self.clip_bound));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return cfg(format!("training.noise_multiplier must be >= 0, got {}", self.noise_multiplier));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return cfg(format!("training.sampling_rate must be in (0, 1], got {}", self.sampling_rate));
        }
        if self.steps == 0 {
            return cfg("training.steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return cfg(format!("training.learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return cfg(format!("privacy.delta must be in (0, 1), got {}", self.delta));
        }
        self.transforms.validate()?;
        self.mixup.validate()?;
        let aug = &self.augmentation;
        match self.regime {
            Regime::PerExample => {}
            Regime::Microbatch => {
                if self.microbatch_size == 0 {
                    return cfg("training.microbatch_size must be at least 1".into());
                }
                if self.microbatch_mixup && self.microbatch_size != 2 {
                    return cfg(format!(
                        "training.microbatch_mixup requires microbatch_size = 2, got {}",
                        self.microbatch_size
                    ));
                }
            }
            Regime::SelfAug => {
                if aug.km != 0 || aug.kd != 0 || aug.ka == 0 {
                    return cfg("regime self-aug requires augmentation.ka >= 1 and km = kd = 0".into());
                }
            }
            Regime::SelfMix => {
                if aug.km == 0 || aug.kd != 0 {
                    return cfg("regime self-mix requires augmentation.km > 0 and kd = 0".into());
                }
            }
            Regime::DpMixDiff => {
                if aug.kd == 0 {
                    return cfg("regime dp-mix-diff requires augmentation.kd > 0".into());
                }
            }
        }
        if self.regime.uses_augmentation() {
            aug.validate()?;
        }
        if self.microbatch_mixup && self.regime != Regime::Microbatch {
            return cfg("training.microbatch_mixup only applies to the microbatch regime".into());
        }
        Ok(())
    }

    /// Worst-case L2 change of the clipped sum when one example changes, in
    /// units of the clip bound: 2 for microbatches of two or more, else 1.
    pub fn sensitivity_factor(&self) -> f64 {
        if self.regime == Regime::Microbatch && self.microbatch_size >= 2 {
            2.0
        } else {
            1.0
        }
    }

    /// Noise multiplier relative to the sensitivity, as seen by the
    /// accountant.
    pub fn accounting_sigma(&self) -> f64 {
        self.noise_multiplier / self.sensitivity_factor()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (1.0 / self.sampling_rate).ceil() as u64
    }

    pub fn microbatch_mixup_mode(&self) -> MicrobatchMixup {
        match (self.microbatch_mixup, self.microbatch_mixup_replace) {
            (false, _) => MicrobatchMixup::Off,
            (true, false) => MicrobatchMixup::Append,
            (true, true) => MicrobatchMixup::Replace,
        }
    }
}
