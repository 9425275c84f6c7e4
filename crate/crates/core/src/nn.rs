//! Small differentiable classifiers with exact per-example gradients.
//!
//! Three architectures are supported, all trained with softmax cross-entropy
//! against probability-vector labels (so mixed labels work unchanged):
//!
//! * logistic regression: `logits = W x + b`
//! * MLP: dense layers with `tanh` between them
//! * small CNN: one valid convolution, `tanh`, non-overlapping average pool,
//!   then a dense layer to the logits
//!
//! Parameters live in one flat vector. Each layer stores its weight matrix
//! row-major (`out x in`, or `channels x in_channels x k x k` for the
//! convolution) followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Tensor};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    #[default]
    LogisticRegression,
    Mlp { hidden: Vec<usize> },
    SmallCnn { channels: usize, kernel: usize, pool: usize },
}

/// Input image shape `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// An image with a probability-vector label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Tensor,
    pub label: Vec<f64>,
}

impl LabeledExample {
    /// Checks that the label is a probability vector (non-negative, sums to 1
    /// within 1e-9).
    pub fn new(features: Tensor, label: Vec<f64>) -> Result<Self> {
        check_probability_vector(&label)?;
        Ok(LabeledExample { features, label })
    }
}

pub(crate) fn check_probability_vector(label: &[f64]) -> Result<()> {
    if label.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::Domain("label entries must be finite and non-negative".into()));
    }
    let total: f64 = label.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("label sums to {total}, expected 1")));
    }
    Ok(())
}

/// Layer geometry resolved from an architecture and input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Plan {
    Dense { sizes: Vec<usize> },
    Cnn(CnnPlan),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CnnPlan {
    cin: usize,
    h: usize,
    w: usize,
    channels: usize,
    kernel: usize,
    pool: usize,
    // conv output
    ho: usize,
    wo: usize,
    // pooled output
    ph: usize,
    pw: usize,
    classes: usize,
}

impl CnnPlan {
    fn conv_weights(&self) -> usize {
        self.channels * self.cin * self.kernel * self.kernel
    }

    fn pooled_len(&self) -> usize {
        self.channels * self.ph * self.pw
    }

    fn param_count(&self) -> usize {
        self.conv_weights() + self.channels + self.classes * self.pooled_len() + self.classes
    }
}

impl Plan {
    fn resolve(arch: &Architecture, input: InputShape, classes: usize) -> Result<Plan> {
        if classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if input.is_empty() {
            return Err(Error::Config("input shape must be non-empty".into()));
        }
        match arch {
            Architecture::LogisticRegression => {
                Ok(Plan::Dense { sizes: vec![input.len(), classes] })
            }
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::Config("hidden layer sizes must be positive".into()));
                }
                let mut sizes = vec![input.len()];
                sizes.extend(hidden);
                sizes.push(classes);
                Ok(Plan::Dense { sizes })
            }
            &Architecture::SmallCnn { channels, kernel, pool } => {
                if channels == 0 || kernel == 0 || pool == 0 {
                    return Err(Error::Config("cnn channels, kernel and pool must be positive".into()));
                }
                if kernel > input.height || kernel > input.width {
                    return Err(Error::Config(format!(
                        "kernel {kernel} larger than input {}x{}",
                        input.height, input.width
                    )));
                }
                let ho = input.height - kernel + 1;
                let wo = input.width - kernel + 1;
                let (ph, pw) = (ho / pool, wo / pool);
                if ph == 0 || pw == 0 {
                    return Err(Error::Config(format!(
                        "pool {pool} larger than conv output {ho}x{wo}"
                    )));
                }
                Ok(Plan::Cnn(CnnPlan {
                    cin: input.channels,
                    h: input.height,
                    w: input.width,
                    channels,
                    kernel,
                    pool,
                    ho,
                    wo,
                    ph,
                    pw,
                    classes,
                }))
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Plan::Dense { sizes } => sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
            Plan::Cnn(c) => c.param_count(),
        }
    }

    /// Fan-in of the layer owning each parameter, in layout order.
    fn fan_ins(&self) -> Vec<(usize, usize)> {
        match self {
            Plan::Dense { sizes } => {
                sizes.windows(2).map(|w| (w[0] * w[1] + w[1], w[0])).collect()
            }
            Plan::Cnn(c) => vec![
                (c.conv_weights() + c.channels, c.cin * c.kernel * c.kernel),
                (c.classes * c.pooled_len() + c.classes, c.pooled_len()),
            ],
        }
    }
}

/// Number of parameters for `arch` on `input` with `num_classes` outputs.
pub fn param_count(arch: &Architecture, input: InputShape, num_classes: usize) -> Result<usize> {
    Ok(Plan::resolve(arch, input, num_classes)?.param_count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    architecture: Architecture,
    input: InputShape,
    num_classes: usize,
    plan: Plan,
    params: Tensor,
}

impl Model {
    /// All-zero parameters.
    pub fn zeros(architecture: Architecture, input: InputShape, num_classes: usize) -> Result<Self> {
        let plan = Plan::resolve(&architecture, input, num_classes)?;
        let params = Tensor::zeros(vec![plan.param_count()]);
        Ok(Model { architecture, input, num_classes, plan, params })
    }

    /// Uniform(-s, s) initialization with `s = 1/sqrt(fan_in)` per layer,
    /// biases included.
    pub fn init<R: Rng + ?Sized>(
        architecture: Architecture,
        input: InputShape,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Model::zeros(architecture, input, num_classes)?;
        let mut offset = 0;
        for (count, fan_in) in model.plan.fan_ins() {
            let s = 1.0 / (fan_in as f64).sqrt();
            for p in &mut model.params.data_mut()[offset..offset + count] {
                *p = rng.random_range(-s..s);
            }
            offset += count;
        }
        Ok(model)
    }

    pub fn with_params(
        architecture: Architecture,
        input: InputShape,
        num_classes: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Model::zeros(architecture, input, num_classes)?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.plan.param_count() {
            return Err(Error::Length { expected: self.plan.param_count(), actual: params.len() });
        }
        self.params = Tensor::vector(params)?;
        Ok(())
    }

    /// `θ ← θ - lr * update`.
    pub fn apply_update(&mut self, lr: f64, update: &[f64]) -> Result<()> {
        if update.len() != self.params.len() {
            return Err(Error::Length { expected: self.params.len(), actual: update.len() });
        }
        for (p, u) in self.params.data_mut().iter_mut().zip(update) {
            *p -= lr * u;
        }
        if self.params.data().iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericOverflow("parameter update"));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.input.dims();
        if x.shape() != expected && !(x.shape() == [self.input.len()]) {
            return Err(Error::Shape { expected: expected.to_vec(), actual: x.shape().to_vec() });
        }
        Ok(())
    }

    fn check_example(&self, example: &LabeledExample) -> Result<()> {
        self.check_input(&example.features)?;
        if example.label.len() != self.num_classes {
            return Err(Error::Length { expected: self.num_classes, actual: example.label.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let logits = logits_with(&self.plan, self.params.data(), x.data());
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("forward"));
        }
        Tensor::vector(logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(crate::tensor::argmax(self.forward(x)?.data()))
    }

    /// Loss of one example at the current parameters.
    pub fn example_loss(&self, example: &LabeledExample) -> Result<f64> {
        self.check_example(example)?;
        let logits = logits_with(&self.plan, self.params.data(), example.features.data());
        cross_entropy(&logits, &example.label)
    }

    /// Gradient of the example's loss with respect to the flat parameters.
    pub fn per_example_gradient(&self, example: &LabeledExample) -> Result<Tensor> {
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_gradient(example, 1.0, &mut grad)?;
        Tensor::vector(grad)
    }

    /// Adds `weight * ∇θ loss(example)` into `acc` and returns the loss.
    pub fn accumulate_gradient(
        &self,
        example: &LabeledExample,
        weight: f64,
        acc: &mut [f64],
    ) -> Result<f64> {
        self.check_example(example)?;
        if acc.len() != self.num_params() {
            return Err(Error::Length { expected: self.num_params(), actual: acc.len() });
        }
        let params = self.params.data();
        let x = example.features.data();
        let loss = match &self.plan {
            Plan::Dense { sizes } => dense_backward(sizes, params, x, &example.label, weight, acc),
            Plan::Cnn(plan) => cnn_backward(plan, params, x, &example.label, weight, acc),
        };
        // Non-finite gradients are caught by the callers' reductions; a
        // finite loss rules out the common overflow paths here.
        if !loss.is_finite() {
            return Err(Error::NumericOverflow("per-example gradient"));
        }
        Ok(loss)
    }

    /// Fourth-order central differences
    /// `(-L(θ + 2h e_i) + 8 L(θ + h e_i) - 8 L(θ - h e_i) + L(θ - 2h e_i)) / 12h`
    /// for every coordinate. Used as an independent check of the analytic
    /// gradient; the O(h⁴) truncation error allows a step large enough to
    /// keep cancellation in the loss differences small.
    pub fn finite_difference_gradient(&self, example: &LabeledExample, h: f64) -> Result<Tensor> {
        if !(h > 0.0) {
            return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
        }
        self.check_example(example)?;
        let mut theta = self.params.data().to_vec();
        let x = example.features.data();
        let mut grad = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let orig = theta[i];
            let mut at = |offset: f64| {
                theta[i] = orig + offset;
                cross_entropy(&logits_with(&self.plan, &theta, x), &example.label)
            };
            let (up2, up, down, down2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            theta[i] = orig;
            grad.push((8.0 * (up - down) - (up2 - down2)) / (12.0 * h));
        }
        Tensor::vector(grad)
    }
}

/// Softmax cross-entropy `H(y, softmax(z)) = logsumexp(z) - Σ y_i z_i`,
/// valid for any probability-vector label.
pub fn loss(logits: &Tensor, label: &[f64]) -> Result<f64> {
    cross_entropy(logits.data(), label)
}

fn cross_entropy(logits: &[f64], label: &[f64]) -> Result<f64> {
    if logits.len() != label.len() {
        return Err(Error::Length { expected: logits.len(), actual: label.len() });
    }
    let lse = log_sum_exp(logits);
    let value: f64 = label.iter().zip(logits).map(|(y, z)| y * (lse - z)).sum();
    if !value.is_finite() {
        return Err(Error::NumericOverflow("loss"));
    }
    Ok(value)
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn logits_with(plan: &Plan, params: &[f64], x: &[f64]) -> Vec<f64> {
    match plan {
        Plan::Dense { sizes } => {
            let mut act = x.to_vec();
            let mut offset = 0;
            let layers = sizes.len() - 1;
            for l in 0..layers {
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let (w, b) = dense_slices(params, offset, n_in, n_out);
                let mut z = affine(w, b, &act, n_in);
                if l + 1 < layers {
                    z.iter_mut().for_each(|v| *v = v.tanh());
                }
                act = z;
                offset += n_in * n_out + n_out;
            }
            act
        }
        Plan::Cnn(c) => {
            let (conv_w, conv_b, fc_w, fc_b) = cnn_slices(c, params);
            let activ = conv_tanh(c, conv_w, conv_b, x);
            let pooled = avg_pool(c, &activ);
            affine(fc_w, fc_b, &pooled, c.pooled_len())
        }
    }
}

fn dense_slices(params: &[f64], offset: usize, n_in: usize, n_out: usize) -> (&[f64], &[f64]) {
    let w = &params[offset..offset + n_in * n_out];
    let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
    (w, b)
}

fn affine(w: &[f64], b: &[f64], x: &[f64], n_in: usize) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bias)| bias + crate::tensor::dot(&w[o * n_in..(o + 1) * n_in], x))
        .collect()
}

/// Forward and backward pass through the dense chain; returns the loss.
fn dense_backward(
    sizes: &[usize],
    params: &[f64],
    x: &[f64],
    label: &[f64],
    weight: f64,
    acc: &mut [f64],
) -> f64 {
    let layers = sizes.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
    acts.push(x.to_vec());
    let mut offset = 0;
    for l in 0..layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        offsets.push(offset);
        let (w, b) = dense_slices(params, offset, n_in, n_out);
        let mut z = affine(w, b, &acts[l], n_in);
        if l + 1 < layers {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
        offset += n_in * n_out + n_out;
    }
    let logits = &acts[layers];
    let lse = log_sum_exp(logits);
    let loss: f64 = label.iter().zip(logits).map(|(y, z)| y * (lse - z)).sum();

    // dL/dz at the output is softmax(z) - y.
    let mut delta: Vec<f64> = softmax(logits).iter().zip(label).map(|(p, y)| p - y).collect();
    for l in (0..layers).rev() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let off = offsets[l];
        let input = &acts[l];
        for o in 0..n_out {
            let d = weight * delta[o];
            if d != 0.0 {
                let row = &mut acc[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            acc[off + n_in * n_out + o] += d;
        }
        if l > 0 {
            let w = &params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += wi * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
    loss
}

fn cnn_slices<'a>(c: &CnnPlan, params: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
    let cw = c.conv_weights();
    let fw = c.classes * c.pooled_len();
    let (conv_w, rest) = params.split_at(cw);
    let (conv_b, rest) = rest.split_at(c.channels);
    let (fc_w, fc_b) = rest.split_at(fw);
    (conv_w, conv_b, fc_w, &fc_b[..c.classes])
}

/// Valid convolution followed by tanh. Output is `channels x ho x wo`.
fn conv_tanh(c: &CnnPlan, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let k = c.kernel;
    let mut out = vec![0.0; c.channels * c.ho * c.wo];
    for ch in 0..c.channels {
        for i in 0..c.ho {
            for j in 0..c.wo {
                let mut s = b[ch];
                for ci in 0..c.cin {
                    for u in 0..k {
                        let xrow = &x[(ci * c.h + i + u) * c.w + j..][..k];
                        let wrow = &w[((ch * c.cin + ci) * k + u) * k..][..k];
                        s += crate::tensor::dot(wrow, xrow);
                    }
                }
                out[(ch * c.ho + i) * c.wo + j] = s.tanh();
            }
        }
    }
    out
}

fn avg_pool(c: &CnnPlan, a: &[f64]) -> Vec<f64> {
    let p = c.pool;
    let inv = 1.0 / (p * p) as f64;
    let mut out = vec![0.0; c.pooled_len()];
    for ch in 0..c.channels {
        for pi in 0..c.ph {
            for pj in 0..c.pw {
                let mut s = 0.0;
                for u in 0..p {
                    for v in 0..p {
                        s += a[(ch * c.ho + pi * p + u) * c.wo + pj * p + v];
                    }
                }
                out[(ch * c.ph + pi) * c.pw + pj] = s * inv;
            }
        }
    }
    out
}

fn cnn_backward(
    c: &CnnPlan,
    params: &[f64],
    x: &[f64],
    label: &[f64],
    weight: f64,
    acc: &mut [f64],
) -> f64 {
    let (conv_w, conv_b, fc_w, fc_b) = cnn_slices(c, params);
    let activ = conv_tanh(c, conv_w, conv_b, x);
    let pooled = avg_pool(c, &activ);
    let logits = affine(fc_w, fc_b, &pooled, c.pooled_len());
    let lse = log_sum_exp(&logits);
    let loss: f64 = label.iter().zip(&logits).map(|(y, z)| y * (lse - z)).sum();
    let delta: Vec<f64> = softmax(&logits).iter().zip(label).map(|(p, y)| p - y).collect();

    let cw = c.conv_weights();
    let fc_off = cw + c.channels;
    let np = c.pooled_len();
    let mut d_pooled = vec![0.0; np];
    for (o, d) in delta.iter().enumerate() {
        let wd = weight * d;
        let row = &mut acc[fc_off + o * np..fc_off + (o + 1) * np];
        for (g, p) in row.iter_mut().zip(&pooled) {
            *g += wd * p;
        }
        acc[fc_off + c.classes * np + o] += wd;
        for (dp, wi) in d_pooled.iter_mut().zip(&fc_w[o * np..(o + 1) * np]) {
            *dp += wi * d;
        }
    }

    // Through the pool and tanh: dz = dpooled / p² * (1 - a²) on pooled cells.
    let p = c.pool;
    let inv = 1.0 / (p * p) as f64;
    let mut dz = vec![0.0; activ.len()];
    for ch in 0..c.channels {
        for i in 0..c.ph * p {
            for j in 0..c.pw * p {
                let idx = (ch * c.ho + i) * c.wo + j;
                let a = activ[idx];
                dz[idx] = d_pooled[(ch * c.ph + i / p) * c.pw + j / p] * inv * (1.0 - a * a);
            }
        }
    }

    let k = c.kernel;
    for ch in 0..c.channels {
        let mut db = 0.0;
        for i in 0..c.ho {
            for j in 0..c.wo {
                let d = dz[(ch * c.ho + i) * c.wo + j];
                if d == 0.0 {
                    continue;
                }
                db += d;
                let wd = weight * d;
                for ci in 0..c.cin {
                    for u in 0..k {
                        let xrow = &x[(ci * c.h + i + u) * c.w + j..][..k];
                        let grow = &mut acc[((ch * c.cin + ci) * k + u) * k..][..k];
                        for (g, xv) in grow.iter_mut().zip(xrow) {
                            *g += wd * xv;
                        }
                    }
                }
            }
        }
        acc[cw + ch] += weight * db;
    }
    loss
}
