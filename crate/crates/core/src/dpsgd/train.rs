use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::Serialize;

use super::noisy::{
    clipped_sum_augmult, clipped_sum_microbatch, clipped_sum_per_example, poisson_sample, privatize,
    AugmentationSource, ClippedSum, MixSource, SelfAugSource,
};
use super::stats::{gradient_stats, EpochGradStats, GradStatsOptions, GradientStats};
use super::{GradStatsPlan, Regime, TrainingConfig};
use crate::augment::SyntheticPool;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Architecture, InputShape, LabeledExample, Model};
use crate::privacy::{rdp_to_dp, RdpCurve};
use crate::rng::{Purpose, SeedStreams};

/// Which code path builds augmentation sets in the Self-Aug regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentationPath {
    /// The regime's own builder (plain self-augmentation for Self-Aug).
    #[default]
    Dedicated,
    /// Always go through the general `S ∪ S'` set builder.
    SetBuilder,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub batch_size: usize,
    /// Mean loss of the sampled (unaugmented) examples before the update.
    pub train_loss: Option<f64>,
    pub clip_fraction: f64,
    /// `ε` spent after this step; `None` when training without noise.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Composed RDP curve after all steps; `None` without noise.
    pub curve: Option<RdpCurve>,
    pub epsilon: Option<f64>,
    pub best_order: Option<f64>,
    pub delta: f64,
    pub grad_stats: GradientStats,
}

impl TrainOutput {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evals.last().map(|e| e.test_accuracy)
    }
}

/// Model initialized from the `Init` substream of `master_seed`.
pub fn init_model(architecture: Architecture, input: InputShape, num_classes: usize, master_seed: u64) -> Result<Model> {
    let mut rng = SeedStreams::new(master_seed).rng(Purpose::Init, 0, 0);
    Model::init(architecture, input, num_classes, &mut rng)
}

fn check_compatible(model: &Model, dataset: &Dataset) -> Result<()> {
    if model.input_shape() != dataset.shape() {
        return Err(Error::Shape {
            expected: model.input_shape().dims().to_vec(),
            actual: dataset.shape().dims().to_vec(),
        });
    }
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::Length { expected: model.num_classes(), actual: dataset.num_classes() });
    }
    Ok(())
}

/// Top-1 accuracy of `model` on `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    check_compatible(model, dataset)?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let correct = (0..dataset.len())
        .into_par_iter()
        .map(|i| Ok(usize::from(model.predict(&dataset.features(i))? == dataset.labels()[i])))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Step-by-step driver of one training run.
pub struct Trainer<'a> {
    config: TrainingConfig,
    train: &'a Dataset,
    pool: Option<&'a SyntheticPool>,
    streams: SeedStreams,
    model: Model,
    step_curve: Option<RdpCurve>,
    steps_taken: u64,
    last_clip_calls: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainingConfig, train: &'a Dataset, pool: Option<&'a SyntheticPool>, model: Model) -> Result<Self> {
        config.validate()?;
        check_compatible(&model, train)?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if config.regime == Regime::DpMixDiff && pool.is_none_or(|p| p.is_empty()) {
            return Err(Error::Config("regime dp-mix-diff with augmentation.kd > 0 needs a non-empty pool".into()));
        }
        let step_curve = if config.noise_multiplier > 0.0 {
            let curve = RdpCurve::subsampled_gaussian(config.sampling_rate, config.accounting_sigma(), &config.orders)?;
            let total = curve.compose(config.steps);
            let (eps, _) = rdp_to_dp(&total, config.delta)?;
            if !total.is_finite() || !eps.is_finite() {
                return Err(Error::Parameter(format!(
                    "accountant overflow: ε is unbounded for σ = {} over {} steps",
                    config.noise_multiplier, config.steps
                )));
            }
            Some(curve)
        } else {
            None
        };
        let streams = SeedStreams::new(config.master_seed);
        Ok(Trainer { config, train, pool, streams, model, step_curve, steps_taken: 0, last_clip_calls: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Clip invocations during the most recent step.
    pub fn last_clip_calls(&self) -> usize {
        self.last_clip_calls
    }

    /// Single-step RDP curve at the accounting noise multiplier.
    pub fn step_curve(&self) -> Option<&RdpCurve> {
        self.step_curve.as_ref()
    }

    /// `(ε, order)` after `steps` steps.
    pub fn epsilon_after(&self, steps: u64) -> Result<Option<(f64, f64)>> {
        self.step_curve.as_ref().map(|c| rdp_to_dp(&c.compose(steps), self.config.delta)).transpose()
    }

    fn source(&self, path: AugmentationPath, step: u64) -> Box<dyn AugmentationSource + '_> {
        let cfg = &self.config;
        match (cfg.regime, path) {
            (Regime::SelfAug, AugmentationPath::Dedicated) => Box::new(SelfAugSource {
                ka: cfg.augmentation.ka,
                pipeline: cfg.transforms,
                streams: &self.streams,
                step,
            }),
            _ => Box::new(MixSource {
                config: cfg.augmentation,
                pipeline: cfg.transforms,
                mix: cfg.mixup,
                pool: self.pool,
                streams: &self.streams,
                step,
            }),
        }
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        self.step_with(AugmentationPath::Dedicated)
    }

    /// Runs one step of `θ ← θ - η ĝ`.
    pub fn step_with(&mut self, path: AugmentationPath) -> Result<StepRecord> {
        let t = self.steps_taken;
        let cfg = &self.config;
        let mut sampling = self.streams.rng(Purpose::Sampling, t, 0);
        let mut indices = poisson_sample(self.train.len(), cfg.sampling_rate, &mut sampling)?;
        indices.shuffle(&mut sampling);
        let batch: Vec<LabeledExample> = indices.iter().map(|&i| self.train.example(i)).collect();

        let train_loss = if batch.is_empty() {
            None
        } else {
            let total: f64 = batch
                .par_iter()
                .map(|ex| self.model.example_loss(ex))
                .collect::<Result<Vec<_>>>()?
                .iter()
                .sum();
            Some(total / batch.len() as f64)
        };

        let aggregate: Option<(ClippedSum, f64)> = match cfg.regime {
            _ if batch.is_empty() => None,
            Regime::PerExample => {
                let s = clipped_sum_per_example(&self.model, &batch, cfg.clip_bound)?;
                let scale = 1.0 / s.examples_used as f64;
                Some((s, scale))
            }
            Regime::Microbatch if batch.len() < cfg.microbatch_size => None,
            Regime::Microbatch => {
                let mut lambda_rng = self.streams.rng(Purpose::Augmentation, t, u64::MAX);
                let s = clipped_sum_microbatch(
                    &self.model,
                    &batch,
                    cfg.microbatch_size,
                    cfg.clip_bound,
                    cfg.microbatch_mixup_mode(),
                    &cfg.mixup,
                    &mut lambda_rng,
                )?;
                let scale = cfg.microbatch_size as f64 / s.examples_used as f64;
                Some((s, scale))
            }
            Regime::SelfAug | Regime::SelfMix | Regime::DpMixDiff => {
                let keyed: Vec<(u64, LabeledExample)> =
                    indices.iter().map(|&i| i as u64).zip(batch).collect();
                let source = self.source(path, t);
                let s = clipped_sum_augmult(&self.model, &keyed, cfg.clip_bound, source.as_ref())?;
                let scale = 1.0 / s.examples_used as f64;
                Some((s, scale))
            }
        };

        let (clip_fraction, clip_calls) = match aggregate {
            Some((sum, scale)) => {
                let mut noise = self.streams.rng(Purpose::Noise, t, 0);
                let update = privatize(&sum.sum, cfg.clip_bound, cfg.noise_multiplier, scale, &mut noise);
                let lr = cfg.learning_rate;
                self.model.apply_update(lr, &update)?;
                (sum.clip_fraction(), sum.clip_calls)
            }
            // An empty step releases nothing but is still charged by the accountant.
            None => (0.0, 0),
        };
        self.last_clip_calls = clip_calls;
        self.steps_taken += 1;
        let epsilon = self.epsilon_after(self.steps_taken)?.map(|(e, _)| e);
        Ok(StepRecord { step: self.steps_taken, batch_size: indices.len(), train_loss, clip_fraction, epsilon })
    }

    /// Pre-clip gradient statistics on a seeded subsample of the training
    /// set, using the regime's augmentation averaging where it applies.
    pub fn gradient_stats(&self, epoch: u64, plan: &GradStatsPlan) -> Result<EpochGradStats> {
        let n = self.train.len();
        let size = plan.sample_size.min(n);
        let mut rng = self.streams.rng(Purpose::Eval, epoch, 1);
        let mut picked: Vec<usize> = index::sample(&mut rng, n, size).into_vec();
        picked.sort_unstable();
        let sample: Vec<(u64, LabeledExample)> =
            picked.iter().map(|&i| (i as u64, self.train.example(i))).collect();
        let stats_step = (1u64 << 63) | epoch;
        let source = self.config.regime.uses_augmentation().then(|| self.source(AugmentationPath::Dedicated, stats_step));
        let options = GradStatsOptions { bins: plan.bins, ..Default::default() };
        gradient_stats(&self.model, &sample, source.as_deref(), &options, epoch)
    }
}

/// Runs `config.steps` DP-SGD steps and collects metrics, periodic test
/// accuracy, optional gradient statistics and the final privacy spend.
pub fn train(
    config: &TrainingConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    pool: Option<&SyntheticPool>,
    model: Model,
) -> Result<TrainOutput> {
    if let Some(test) = test_set {
        check_compatible(&model, test)?;
    }
    let mut trainer = Trainer::new(config.clone(), train_set, pool, model)?;
    let spe = config.steps_per_epoch();
    let eval_every = if config.eval_every == 0 { spe } else { config.eval_every };
    let mut steps = Vec::with_capacity(config.steps as usize);
    let mut evals = Vec::new();
    let mut grad_stats = GradientStats::default();
    for s in 1..=config.steps {
        steps.push(trainer.step()?);
        if let Some(test) = test_set {
            if s % eval_every == 0 || s == config.steps {
                evals.push(EvalRecord {
                    step: s,
                    epoch: s as f64 / spe as f64,
                    test_accuracy: evaluate(trainer.model(), test)?,
                });
            }
        }
        if let Some(plan) = &config.grad_stats {
            if s % spe == 0 && plan.epochs.contains(&(s / spe)) {
                grad_stats.epochs.push(trainer.gradient_stats(s / spe, plan)?);
            }
        }
    }
    let (epsilon, best_order) = match trainer.epsilon_after(config.steps)? {
        Some((e, o)) => (Some(e), Some(o)),
        None => (None, None),
    };
    let curve = trainer.step_curve().map(|c| c.compose(config.steps));
    Ok(TrainOutput {
        model: trainer.into_model(),
        steps,
        evals,
        curve,
        epsilon,
        best_order,
        delta: config.delta,
        grad_stats,
    })
}

