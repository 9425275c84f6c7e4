//! The `dpmix` command line: run configuration, the five commands and their
//! output files.
//!
//! A run is described by a TOML document with the sections `[data]`,
//! `[model]`, `[training]`, `[augmentation]`, `[privacy]`, `[gradstats]` and
//! `[output]`. Any key can be overridden on the command line with a flag of
//! the same dotted name, e.g. `--training.regime self-mix` or
//! `--augmentation.km=16`. Values are read as TOML literals and fall back to
//! plain strings.
//!
//! Exit codes: 0 success, 1 output failure, 2 configuration error, 3 noise
//! calibration failure, 4 data error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationConfig, MixupConfig, SyntheticPool, TransformPipeline};
use crate::data::{self, Dataset, Normalization, ToySpec, ToySplit};
use crate::dpsgd::{self, GradStatsPlan, Regime, TrainOutput, TrainingConfig};
use crate::error::Error;
use crate::nn::{Architecture, InputShape, Model};
use crate::privacy::{calibrate_sigma, AccountantParams, DEFAULT_ORDERS};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DPMIX_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "dpmix-out";
pub const MODEL_MAGIC: &[u8; 8] = b"DPMIXMD1";
const MODEL_VERSION: u32 = 1;

pub const EXIT_OUTPUT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CALIBRATION: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: message.into() }
    }

    fn output(path: &Path, e: impl fmt::Display) -> Self {
        CliError { code: EXIT_OUTPUT, message: format!("cannot write {}: {e}", path.display()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code for a library error raised outside data loading.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Domain(_) => EXIT_CONFIG,
        Error::Calibration(_) => EXIT_CALIBRATION,
        Error::Format { .. } | Error::LabelRange { .. } | Error::Shape { .. } | Error::Length { .. } | Error::Io { .. } => {
            EXIT_DATA
        }
        Error::NumericOverflow(_) | Error::EmptyBatch => EXIT_OUTPUT,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { code: exit_code(&e), message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate the toy task from `[data.toy]`.
    #[default]
    Toy,
    /// `DPMIXDS1` container files.
    Container,
    /// CIFAR-10 binary batches; a directory means the standard file names.
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Synthetic pool container, needed when `augmentation.kd > 0`.
    pub pool: Option<PathBuf>,
    /// Normalize every split with per-channel statistics of the train split.
    pub normalize: bool,
    pub toy: ToySpec,
    pub toy_test_per_class: usize,
    /// Size per class of a generated toy pool; 0 generates none.
    pub toy_pool_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Toy,
            train: None,
            test: None,
            pool: None,
            normalize: true,
            toy: ToySpec::default(),
            toy_test_per_class: 100,
            toy_pool_per_class: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub clip_bound: f64,
    /// Fixed noise multiplier; leave unset when `privacy.target_epsilon` is.
    pub noise_multiplier: Option<f64>,
    pub sampling_rate: f64,
    pub steps: Option<u64>,
    /// Alternative to `steps`: `epochs * ceil(1/sampling_rate)` steps.
    pub epochs: Option<u64>,
    pub learning_rate: f64,
    pub regime: Regime,
    pub microbatch_size: usize,
    pub microbatch_mixup: bool,
    pub microbatch_mixup_replace: bool,
    pub seed: u64,
    pub eval_every: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        TrainingSection {
            clip_bound: t.clip_bound,
            noise_multiplier: None,
            sampling_rate: t.sampling_rate,
            steps: None,
            epochs: None,
            learning_rate: t.learning_rate,
            regime: t.regime,
            microbatch_size: t.microbatch_size,
            microbatch_mixup: t.microbatch_mixup,
            microbatch_mixup_replace: t.microbatch_mixup_replace,
            seed: t.master_seed,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub ka: usize,
    pub km: usize,
    pub kd: usize,
    pub transforms: TransformPipeline,
    pub mixup: MixupConfig,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        let a = AugmentationConfig::default();
        AugmentationSection {
            ka: a.ka,
            km: a.km,
            kd: a.kd,
            transforms: TransformPipeline::default(),
            mixup: MixupConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    /// Calibrate the noise multiplier to reach this ε.
    pub target_epsilon: Option<f64>,
    pub delta: f64,
    pub orders: Vec<f64>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        PrivacySection { target_epsilon: None, delta: 1e-5, orders: DEFAULT_ORDERS.to_vec() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Defaults to `$DPMIX_OUT_DIR`, then `dpmix-out`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: Architecture,
    pub training: TrainingSection,
    pub augmentation: AugmentationSection,
    pub privacy: PrivacySection,
    pub gradstats: GradStatsPlan,
    pub output: OutputSection,
}

/// A dotted configuration key and its raw value.
pub type Override = (String, String);

/// Splits `--dotted.key value` and `--dotted.key=value` overrides from the
/// remaining arguments.
pub fn split_overrides<I, S>(args: I) -> CliResult<(Vec<String>, Vec<Override>)>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().map(Into::into);
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::config(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for p in parents {
        let entry = cursor.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cursor.insert(last.to_string(), parse_literal(raw));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies the overrides in order and
    /// deserializes, rejecting unknown keys.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> CliResult<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::config(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            apply_override(&mut table, key, raw)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("invalid configuration: {}", e.message())))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// The training configuration with the given noise multiplier and step
    /// count.
    fn training_config(&self, noise_multiplier: f64, steps: u64) -> TrainingConfig {
        let t = &self.training;
        let a = &self.augmentation;
        TrainingConfig {
            clip_bound: t.clip_bound,
            noise_multiplier,
            sampling_rate: t.sampling_rate,
            steps,
            learning_rate: t.learning_rate,
            regime: t.regime,
            microbatch_size: t.microbatch_size,
            microbatch_mixup: t.microbatch_mixup,
            microbatch_mixup_replace: t.microbatch_mixup_replace,
            augmentation: AugmentationConfig::new(a.ka, a.km, a.kd),
            transforms: a.transforms,
            mixup: a.mixup,
            master_seed: t.seed,
            delta: self.privacy.delta,
            orders: self.privacy.orders.clone(),
            eval_every: t.eval_every,
            grad_stats: (!self.gradstats.epochs.is_empty()).then(|| self.gradstats.clone()),
        }
    }

    fn resolved_steps(&self) -> CliResult<u64> {
        let t = &self.training;
        if !(t.sampling_rate > 0.0 && t.sampling_rate <= 1.0) {
            return Err(CliError::config(format!(
                "training.sampling_rate must be in (0, 1], got {}",
                t.sampling_rate
            )));
        }
        match (t.steps, t.epochs) {
            (Some(_), Some(_)) => Err(CliError::config("set only one of training.steps and training.epochs")),
            (Some(s), None) => Ok(s),
            (None, Some(e)) => Ok(e * (1.0 / t.sampling_rate).ceil() as u64),
            (None, None) => Ok(TrainingConfig::default().steps),
        }
    }
}

/// A run configuration with the noise multiplier, step count and output
/// directory pinned down.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    /// The effective configuration, as written next to the outputs.
    pub config: RunConfig,
    pub training: TrainingConfig,
    pub target_epsilon: Option<f64>,
    pub out_dir: PathBuf,
}

/// Validates the configuration and, when `privacy.target_epsilon` is set,
/// calibrates the noise multiplier. For microbatches of two or more the
/// calibrated value is doubled to cover the `2C` sensitivity.
pub fn resolve(mut config: RunConfig) -> CliResult<ResolvedRun> {
    let steps = config.resolved_steps()?;
    let target = config.privacy.target_epsilon;
    let probe = config.training_config(config.training.noise_multiplier.unwrap_or(1.0), steps);
    probe.validate()?;
    if config.augmentation.kd > 0 && config.data.pool.is_none() && config.data.toy_pool_per_class == 0 {
        return Err(CliError::config(
            "data.pool is required when augmentation.kd > 0 (or set data.toy_pool_per_class for a toy pool)",
        ));
    }
    let sigma = match (target, config.training.noise_multiplier) {
        (Some(_), Some(_)) => {
            return Err(CliError::config("set only one of privacy.target_epsilon and training.noise_multiplier"))
        }
        (Some(eps), None) => {
            if !(eps > 0.0) {
                return Err(CliError::config(format!("privacy.target_epsilon must be positive, got {eps}")));
            }
            let base = calibrate_sigma(eps, probe.sampling_rate, steps, probe.delta, &probe.orders)?;
            base * probe.sensitivity_factor()
        }
        (None, Some(s)) => s,
        (None, None) => 1.0,
    };
    let training = config.training_config(sigma, steps);
    training.validate()?;
    let out_dir = config.output_dir();
    config.training.noise_multiplier = Some(sigma);
    config.training.steps = Some(steps);
    config.training.epochs = None;
    config.privacy.target_epsilon = None;
    config.output.dir = Some(out_dir.clone());
    Ok(ResolvedRun { config, training, target_epsilon: target, out_dir })
}

/// Train, test and pool splits ready for training.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub pool: Option<SyntheticPool>,
    pub normalization: Option<Normalization>,
}

fn data_err(e: Error) -> CliError {
    CliError::data(e.to_string())
}

fn cifar_paths(path: &Path, train: bool) -> Vec<PathBuf> {
    if path.is_dir() {
        if train {
            (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect()
        } else {
            vec![path.join("test_batch.bin")]
        }
    } else {
        vec![path.to_path_buf()]
    }
}

pub fn load_data(config: &RunConfig) -> CliResult<LoadedData> {
    let d = &config.data;
    let (mut train, mut test, mut pool) = match d.source {
        DataSource::Toy => {
            let test_spec = ToySpec { per_class: d.toy_test_per_class, ..d.toy.clone() };
            let pool_spec = ToySpec { per_class: d.toy_pool_per_class, ..d.toy.clone() };
            let train = data::make_toy_dataset(&d.toy, ToySplit::Train)?;
            let test = (d.toy_test_per_class > 0)
                .then(|| data::make_toy_dataset(&test_spec, ToySplit::Test))
                .transpose()?;
            let pool = (d.toy_pool_per_class > 0)
                .then(|| data::make_toy_dataset(&pool_spec, ToySplit::Pool))
                .transpose()?;
            (train, test, pool)
        }
        DataSource::Container | DataSource::Cifar10 => {
            let train_path = d.train.as_ref().ok_or_else(|| CliError::config("data.train is required"))?;
            let load = |p: &Path, is_train: bool| match d.source {
                DataSource::Cifar10 => data::load_cifar10_binary(&cifar_paths(p, is_train)),
                _ => data::load_container(p),
            };
            let train = load(train_path, true).map_err(data_err)?;
            let test = d.test.as_deref().map(|p| load(p, false)).transpose().map_err(data_err)?;
            (train, test, None)
        }
    };
    if let Some(p) = &d.pool {
        pool = Some(data::load_container(p).map_err(data_err)?);
    }
    let normalization = if d.normalize {
        let stats = train.normalize().map_err(data_err)?;
        if let Some(t) = test.as_mut() {
            t.normalize_with(&stats).map_err(data_err)?;
        }
        if let Some(p) = pool.as_mut() {
            p.normalize_with(&stats).map_err(data_err)?;
        }
        Some(stats)
    } else {
        None
    };
    for split in test.iter().chain(pool.iter()) {
        if split.shape() != train.shape() {
            return Err(CliError::data(format!(
                "split shape {:?} differs from train shape {:?}",
                split.shape().dims(),
                train.shape().dims()
            )));
        }
    }
    if let Some(t) = &test {
        if t.num_classes() != train.num_classes() {
            return Err(CliError::data("test and train splits disagree on the number of classes"));
        }
    }
    let pool = match pool {
        Some(p) => {
            let path = d.pool.clone().unwrap_or_else(|| PathBuf::from("<toy pool>"));
            let pool = data::pool_from_dataset(p, train.num_classes(), &path).map_err(data_err)?;
            if !pool.missing_classes.is_empty() {
                eprintln!("warning: pool has no samples for classes {:?}", pool.missing_classes);
            }
            Some(pool)
        }
        None => None,
    };
    Ok(LoadedData { train, test, pool, normalization })
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    architecture: Architecture,
    input: InputShape,
    num_classes: usize,
    normalization: Option<Normalization>,
}

/// Model file: magic `DPMIXMD1`, u32 version, u32 header length, a JSON
/// header (architecture, input shape, classes, normalization), u64 parameter
/// count and the parameters as f64, all little-endian.
pub fn encode_model(model: &Model, normalization: Option<&Normalization>) -> Vec<u8> {
    let header = ModelHeader {
        architecture: model.architecture().clone(),
        input: model.input_shape(),
        num_classes: model.num_classes(),
        normalization: normalization.cloned(),
    };
    let json = serde_json::to_vec(&header).expect("model header serializes");
    let params = model.params().data();
    let mut out = Vec::with_capacity(24 + json.len() + 8 * params.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8], path: &Path) -> crate::Result<(Model, Option<Normalization>)> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let take = |range: std::ops::Range<usize>| bytes.get(range).ok_or_else(|| bad("truncated model file"));
    if take(0..8)? != MODEL_MAGIC {
        return Err(bad("not a dpmix model file"));
    }
    let version = u32::from_le_bytes(take(8..12)?.try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(bad(&format!("unsupported model version {version}")));
    }
    let json_len = u32::from_le_bytes(take(12..16)?.try_into().expect("4 bytes")) as usize;
    let header: ModelHeader =
        serde_json::from_slice(take(16..16 + json_len)?).map_err(|e| bad(&format!("model header: {e}")))?;
    let at = 16 + json_len;
    let count = u64::from_le_bytes(take(at..at + 8)?.try_into().expect("8 bytes")) as usize;
    let body = take(at + 8..at + 8 + 8 * count)?;
    if bytes.len() != at + 8 + 8 * count {
        return Err(bad("trailing bytes after parameters"));
    }
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let model = Model::with_params(header.architecture, header.input, header.num_classes, params)
        .map_err(|e| bad(&e.to_string()))?;
    Ok((model, header.normalization))
}

pub fn save_model(model: &Model, normalization: Option<&Normalization>, path: &Path) -> CliResult<()> {
    fs::write(path, encode_model(model, normalization)).map_err(|e| CliError::output(path, e))
}

pub fn load_model(path: &Path) -> crate::Result<(Model, Option<Normalization>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

#[derive(Serialize)]
struct MetricRecord {
    step: u64,
    batch_size: usize,
    train_loss: Option<f64>,
    clip_fraction: f64,
    epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    regime: &'a str,
    final_test_accuracy: Option<f64>,
    epsilon: Option<f64>,
    best_order: Option<f64>,
    delta: f64,
    noise_multiplier: f64,
    accounting_noise_multiplier: f64,
    target_epsilon: Option<f64>,
    seed: u64,
    steps: u64,
    sampling_rate: f64,
    clip_bound: f64,
    learning_rate: f64,
    microbatch_size: Option<usize>,
    ka: usize,
    km: usize,
    kd: usize,
    train_size: usize,
    test_size: Option<usize>,
    pool_size: Option<usize>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::output(path, e))
}

fn prepare_out_dir(run: &ResolvedRun) -> CliResult<()> {
    fs::create_dir_all(&run.out_dir).map_err(|e| CliError::output(&run.out_dir, e))?;
    let text = toml::to_string_pretty(&run.config).map_err(|e| CliError::config(e.to_string()))?;
    write_file(&run.out_dir.join("config.toml"), text)
}

fn run_training(run: &ResolvedRun) -> CliResult<(LoadedData, TrainOutput)> {
    let data = load_data(&run.config)?;
    if run.training.regime == Regime::DpMixDiff && data.pool.as_ref().is_none_or(|p| p.is_empty()) {
        return Err(CliError::config("data.pool is empty; augmentation.kd > 0 needs pool samples"));
    }
    let model = dpsgd::init_model(
        run.config.model.clone(),
        data.train.shape(),
        data.train.num_classes(),
        run.training.master_seed,
    )?;
    let out = dpsgd::train(&run.training, &data.train, data.test.as_ref(), data.pool.as_ref(), model)?;
    Ok((data, out))
}

fn gradstats_csv(out: &TrainOutput) -> String {
    let mut csv = String::from("bin_left,bin_right,count,epoch\n");
    for e in &out.grad_stats.epochs {
        let h = &e.histogram;
        for (i, count) in h.counts.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{}\n", h.edges[i], h.edges[i + 1], count, e.epoch));
        }
    }
    csv
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain records serialize")
}

/// `train`: writes `config.toml`, `metrics.jsonl`, `final_model.bin`,
/// `summary.json` and, when gradient statistics are requested,
/// `gradstats.csv`. Returns the summary JSON.
pub fn cmd_train(config: RunConfig) -> CliResult<String> {
    let run = resolve(config)?;
    prepare_out_dir(&run)?;
    let (data, out) = run_training(&run)?;

    let mut metrics = String::new();
    for s in &out.steps {
        let test_accuracy = out.evals.iter().find(|e| e.step == s.step).map(|e| e.test_accuracy);
        let record = MetricRecord {
            step: s.step,
            batch_size: s.batch_size,
            train_loss: s.train_loss,
            clip_fraction: s.clip_fraction,
            epsilon: s.epsilon,
            test_accuracy,
        };
        metrics.push_str(&to_json(&record));
        metrics.push('\n');
    }
    write_file(&run.out_dir.join("metrics.jsonl"), metrics)?;
    save_model(&out.model, data.normalization.as_ref(), &run.out_dir.join("final_model.bin"))?;
    if !out.grad_stats.epochs.is_empty() {
        write_file(&run.out_dir.join("gradstats.csv"), gradstats_csv(&out))?;
    }

    let t = &run.training;
    let summary = Summary {
        regime: t.regime.name(),
        final_test_accuracy: out.final_accuracy(),
        epsilon: out.epsilon,
        best_order: out.best_order,
        delta: out.delta,
        noise_multiplier: t.noise_multiplier,
        accounting_noise_multiplier: t.accounting_sigma(),
        target_epsilon: run.target_epsilon,
        seed: t.master_seed,
        steps: t.steps,
        sampling_rate: t.sampling_rate,
        clip_bound: t.clip_bound,
        learning_rate: t.learning_rate,
        microbatch_size: (t.regime == Regime::Microbatch).then_some(t.microbatch_size),
        ka: t.augmentation.ka,
        km: t.augmentation.km,
        kd: t.augmentation.kd,
        train_size: data.train.len(),
        test_size: data.test.as_ref().map(Dataset::len),
        pool_size: data.pool.as_ref().map(SyntheticPool::len),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&run.out_dir.join("summary.json"), format!("{json}\n"))?;
    Ok(json)
}

#[derive(Serialize)]
struct Calibration {
    noise_multiplier: f64,
    accounting_noise_multiplier: f64,
    epsilon: f64,
    best_order: f64,
    target_epsilon: f64,
    delta: f64,
    sampling_rate: f64,
    steps: u64,
}

/// `calibrate`: the noise multiplier for `privacy.target_epsilon` and the
/// ε the accountant verifies for it, as JSON.
pub fn cmd_calibrate(config: RunConfig) -> CliResult<String> {
    let target = config
        .privacy
        .target_epsilon
        .ok_or_else(|| CliError::config("privacy.target_epsilon is required for calibrate"))?;
    let run = resolve(config)?;
    let t = &run.training;
    let params = AccountantParams {
        q: t.sampling_rate,
        sigma: t.accounting_sigma(),
        steps: t.steps,
        delta: t.delta,
        orders: t.orders.clone(),
    };
    let (epsilon, best_order) = params.epsilon()?;
    Ok(to_json(&Calibration {
        noise_multiplier: t.noise_multiplier,
        accounting_noise_multiplier: params.sigma,
        epsilon,
        best_order,
        target_epsilon: target,
        delta: t.delta,
        sampling_rate: t.sampling_rate,
        steps: t.steps,
    }))
}

#[derive(Serialize)]
struct EpochLine {
    epoch: u64,
    mean: f64,
    std: f64,
}

/// `gradstats`: trains as `train` does and writes `gradstats.csv` with one
/// row per histogram bin and recorded epoch. Returns one JSON line per epoch.
pub fn cmd_gradstats(config: RunConfig) -> CliResult<String> {
    if config.gradstats.epochs.is_empty() {
        return Err(CliError::config("gradstats.epochs must list at least one epoch"));
    }
    let run = resolve(config)?;
    prepare_out_dir(&run)?;
    let (_, out) = run_training(&run)?;
    if out.grad_stats.epochs.is_empty() {
        return Err(CliError::config(format!(
            "no gradstats.epochs fall within {} steps ({} per epoch)",
            run.training.steps,
            run.training.steps_per_epoch()
        )));
    }
    write_file(&run.out_dir.join("gradstats.csv"), gradstats_csv(&out))?;
    let lines: Vec<String> = out
        .grad_stats
        .epochs
        .iter()
        .map(|e| to_json(&EpochLine { epoch: e.epoch, mean: e.mean, std: e.std }))
        .collect();
    Ok(lines.join("\n"))
}

#[derive(Serialize)]
struct EvalResult {
    accuracy: f64,
    examples: usize,
}

/// `eval`: top-1 accuracy of a saved model on a container dataset. The
/// model's stored normalization is applied to unnormalized data.
pub fn cmd_eval(model_path: &Path, data_path: &Path) -> CliResult<String> {
    let (model, normalization) = load_model(model_path).map_err(data_err)?;
    let mut dataset = data::load_container(data_path).map_err(data_err)?;
    if let (Some(stats), None) = (&normalization, dataset.normalization()) {
        dataset.normalize_with(stats).map_err(data_err)?;
    }
    let accuracy = dpsgd::evaluate(&model, &dataset).map_err(data_err)?;
    Ok(to_json(&EvalResult { accuracy, examples: dataset.len() }))
}

#[derive(Serialize)]
struct GeneratedSplit {
    path: PathBuf,
    examples: usize,
}

/// `gen-toy-data`: writes `train.bin`, `test.bin` and (if requested)
/// `pool.bin` containers into `out`.
pub fn cmd_gen_toy_data(spec: &ToySpec, test_per_class: usize, pool_per_class: usize, out: &Path) -> CliResult<String> {
    fs::create_dir_all(out).map_err(|e| CliError::output(out, e))?;
    let mut written = Vec::new();
    let splits = [
        (ToySplit::Train, spec.per_class, "train.bin"),
        (ToySplit::Test, test_per_class, "test.bin"),
        (ToySplit::Pool, pool_per_class, "pool.bin"),
    ];
    for (split, per_class, name) in splits {
        if per_class == 0 && split != ToySplit::Train {
            continue;
        }
        let dataset = data::make_toy_dataset(&ToySpec { per_class, ..spec.clone() }, split)
            .map_err(|e| CliError::config(e.to_string()))?;
        let path = out.join(name);
        data::save_container(&dataset, &path).map_err(|e| CliError::output(&path, e))?;
        written.push(GeneratedSplit { path, examples: dataset.len() });
    }
    Ok(to_json(&written))
}

#[derive(Debug, Parser)]
#[command(
    name = "dpmix",
    version,
    about = "Differentially private SGD with mixup augmentation multiplicity",
    after_help = "Any configuration key can be set with a flag of the same dotted name, \
                  e.g. --training.regime self-mix or --privacy.target_epsilon=8."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, the final model and a summary.
    Train(ConfigArgs),
    /// Find the noise multiplier for privacy.target_epsilon.
    Calibrate(ConfigArgs),
    /// Train and record per-parameter gradient magnitude histograms.
    Gradstats(ConfigArgs),
    /// Evaluate a saved model on a container dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write toy train/test/pool container files.
    GenToyData(ToyArgs),
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// Output directory; defaults to $DPMIX_OUT_DIR, then dpmix-out.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pool_per_class: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 1)]
    max_shift: usize,
    #[arg(long, default_value_t = 0.5)]
    pool_gap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn dispatch(command: Command, overrides: &[Override]) -> CliResult<String> {
    let config_only = |args: &ConfigArgs| RunConfig::load(args.config.as_deref(), overrides);
    if !overrides.is_empty() && matches!(command, Command::Eval { .. } | Command::GenToyData(_)) {
        return Err(CliError::config("dotted configuration flags only apply to train, calibrate and gradstats"));
    }
    match command {
        Command::Train(args) => cmd_train(config_only(&args)?),
        Command::Calibrate(args) => cmd_calibrate(config_only(&args)?),
        Command::Gradstats(args) => cmd_gradstats(config_only(&args)?),
        Command::Eval { model, data } => cmd_eval(&model, &data),
        Command::GenToyData(a) => {
            let spec = ToySpec {
                classes: a.classes,
                per_class: a.per_class,
                channels: a.channels,
                height: a.height,
                width: a.width,
                separation: a.separation,
                noise_std: a.noise_std,
                max_shift: a.max_shift,
                pool_gap: a.pool_gap,
                seed: a.seed,
            };
            let out = RunConfig { output: OutputSection { dir: a.out }, ..Default::default() }.output_dir();
            cmd_gen_toy_data(&spec, a.test_per_class, a.pool_per_class, &out)
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<String> = args.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.code;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, &overrides) {
        Ok(stdout) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{stdout}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
