//! Dense tensors, a small fully-connected binary classifier with analytic
//! gradients, and an adaptive-moment optimizer.
//!
//! Parameters live in a single flat [`ParamVector`]. The layout is fixed by
//! the [`ClassifierSpec`]: for each layer in order, the weight matrix
//! (`fan_out x fan_in`, row-major) followed by the bias vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of output classes. Class 0 is "real", class 1 is "fake".
pub const OUTPUT_CLASSES: usize = 2;

/// Lower clamp applied to the true-class probability before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("tensor contains non-finite values"));
        }
        Ok(Tensor { shape, values })
    }

    /// One-dimensional tensor.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and its output.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::domain(format!("unknown activation '{other}'"))),
        }
    }
}

/// Architecture of the reference detector: an MLP over flattened inputs
/// ending in two logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl ClassifierSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = ClassifierSpec {
            input_dim,
            hidden_dims,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::domain(format!(
                "layer widths must be positive: input {} hidden {:?}",
                self.input_dim, self.hidden_dims
            )));
        }
        Ok(())
    }

    pub fn output_classes(&self) -> usize {
        OUTPUT_CLASSES
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(OUTPUT_CLASSES);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector(values)
    }
}

/// Flat parameter storage for a [`ClassifierSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(spec: &ClassifierSpec) -> Self {
        ParamVector(vec![0.0; spec.param_count()])
    }

    pub fn from_vec(spec: &ClassifierSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite parameter"));
        }
        Ok(ParamVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean distance to another vector of the same length.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Softmax output of the classifier, indexed by class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs(pub [f64; OUTPUT_CLASSES]);

impl ClassProbs {
    pub fn real(&self) -> f64 {
        self.0[0]
    }

    pub fn fake(&self) -> f64 {
        self.0[1]
    }

    pub fn of(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn predicted_class(&self) -> usize {
        usize::from(self.0[1] > self.0[0])
    }
}

/// Numerically stable two-way softmax.
pub fn softmax(logits: [f64; OUTPUT_CLASSES]) -> ClassProbs {
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let total = e0 + e1;
    ClassProbs([e0 / total, e1 / total])
}

/// One labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

impl Example {
    pub fn new(input: Tensor, label: usize) -> Self {
        Example { input, label }
    }
}

/// Activations recorded during a forward pass, kept for backprop.
pub(crate) struct Trace {
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations of each hidden layer.
    post: Vec<Vec<f64>>,
    pub(crate) logits: [f64; OUTPUT_CLASSES],
    pub(crate) probs: ClassProbs,
}

fn check_params(spec: &ClassifierSpec, params: &ParamVector) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::shape(format!(
            "spec needs {} parameters, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    Ok(())
}

fn affine(weights: &[f64], bias: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let fan_in = input.len();
    out.clear();
    out.extend(bias.iter().enumerate().map(|(o, b)| {
        let row = &weights[o * fan_in..(o + 1) * fan_in];
        row.iter().zip(input).fold(*b, |acc, (w, x)| acc + w * x)
    }));
}

pub(crate) fn forward_trace(spec: &ClassifierSpec, params: &ParamVector, input: &Tensor) -> Result<Trace> {
    check_params(spec, params)?;
    if input.len() != spec.input_dim {
        return Err(Error::shape(format!(
            "input has {} values, spec expects {}",
            input.len(),
            spec.input_dim
        )));
    }
    let theta = params.as_slice();
    let layers = spec.layer_dims();
    let mut pre = Vec::with_capacity(layers.len() - 1);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len() - 1);
    let mut offset = 0;
    let mut z = Vec::new();
    for (i, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let weights = &theta[offset..offset + fan_in * fan_out];
        offset += fan_in * fan_out;
        let bias = &theta[offset..offset + fan_out];
        offset += fan_out;
        let a = if i == 0 { input.values() } else { &post[i - 1][..] };
        affine(weights, bias, a, &mut z);
        if i + 1 < layers.len() {
            let act: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z.clone());
            post.push(act);
        }
    }
    let logits = [z[0], z[1]];
    if !logits[0].is_finite() || !logits[1].is_finite() {
        return Err(Error::numeric("non-finite logits"));
    }
    let probs = softmax(logits);
    Ok(Trace {
        pre,
        post,
        logits,
        probs,
    })
}

/// Class probabilities `(p_real, p_fake)` for one input.
pub fn forward(spec: &ClassifierSpec, params: &ParamVector, input: &Tensor) -> Result<ClassProbs> {
    forward_trace(spec, params, input).map(|t| t.probs)
}

/// Raw logits for one input.
pub fn logits(spec: &ClassifierSpec, params: &ParamVector, input: &Tensor) -> Result<[f64; OUTPUT_CLASSES]> {
    forward_trace(spec, params, input).map(|t| t.logits)
}

/// `-ln p(label)`, with the probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: ClassProbs, label: usize) -> Result<f64> {
    if label >= OUTPUT_CLASSES {
        return Err(Error::domain(format!("label {label} is not 0 or 1")));
    }
    Ok(-probs.of(label).max(PROB_FLOOR).ln())
}

/// Accumulates `scale * d(output)/d(theta)` for one sample into `grad`,
/// given the loss gradient with respect to the logits.
fn backprop(
    spec: &ClassifierSpec,
    theta: &[f64],
    input: &[f64],
    trace: &Trace,
    dlogits: [f64; OUTPUT_CLASSES],
    grad: &mut [f64],
) {
    let layers = spec.layer_dims();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for &(fan_in, fan_out) in &layers {
        offsets.push(offset);
        offset += fan_in * fan_out + fan_out;
    }

    let mut delta: Vec<f64> = dlogits.to_vec();
    for layer in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[layer];
        let w_off = offsets[layer];
        let b_off = w_off + fan_in * fan_out;
        let a_prev: &[f64] = if layer == 0 { input } else { &trace.post[layer - 1] };
        for o in 0..fan_out {
            let d = delta[o];
            let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
            for (g, a) in row.iter_mut().zip(a_prev) {
                *g += d * a;
            }
            grad[b_off + o] += d;
        }
        if layer > 0 {
            let weights = &theta[w_off..w_off + fan_in * fan_out];
            let pre = &trace.pre[layer - 1];
            let post = &trace.post[layer - 1];
            let mut next = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += w * d;
                }
            }
            for ((n, p), q) in next.iter_mut().zip(pre).zip(post) {
                *n *= spec.activation.derivative(*p, *q);
            }
            delta = next;
        }
    }
}

/// Mean-reduced gradient over a batch where the caller supplies the logit
/// gradient of each sample's loss term.
///
/// Returns the gradient of `(1/B) * sum_i loss_i + weight_decay/2 * |theta|^2`
/// together with each sample's forward probabilities. Samples are reduced in
/// batch order on the calling thread, so results are bit-reproducible.
pub(crate) fn batch_gradient<F>(
    spec: &ClassifierSpec,
    params: &ParamVector,
    batch: &[Example],
    weight_decay: f64,
    mut logit_grad: F,
) -> Result<(Vec<f64>, Vec<ClassProbs>)>
where
    F: FnMut(usize, &Example, &Trace) -> Result<[f64; OUTPUT_CLASSES]>,
{
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    check_params(spec, params)?;
    let theta = params.as_slice();
    let mut grad = vec![0.0; theta.len()];
    let mut probs = Vec::with_capacity(batch.len());
    for (i, example) in batch.iter().enumerate() {
        let trace = forward_trace(spec, params, &example.input)?;
        let dlogits = logit_grad(i, example, &trace)?;
        backprop(spec, theta, example.input.values(), &trace, dlogits, &mut grad);
        probs.push(trace.probs);
    }
    let inv_b = 1.0 / batch.len() as f64;
    for (g, t) in grad.iter_mut().zip(theta) {
        *g = *g * inv_b + weight_decay * t;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok((grad, probs))
}

/// Logit gradient of `weight * CE(label, softmax(logits))`.
///
/// The probability clamp only affects the reported loss value; the gradient
/// is that of the unclamped cross-entropy.
pub(crate) fn weighted_ce_logit_grad(probs: ClassProbs, label: usize, weight: f64) -> Result<[f64; 2]> {
    if label >= OUTPUT_CLASSES {
        return Err(Error::domain(format!("label {label} is not 0 or 1")));
    }
    let mut d = probs.0;
    d[label] -= 1.0;
    Ok([weight * d[0], weight * d[1]])
}

/// Gradient of `(1/B) * sum_i w_i * CE_i + weight_decay/2 * |theta|^2`.
pub fn gradient(
    spec: &ClassifierSpec,
    params: &ParamVector,
    batch: &[Example],
    per_sample_weights: &[f64],
    weight_decay: f64,
) -> Result<Vec<f64>> {
    check_weights(batch, per_sample_weights)?;
    batch_gradient(spec, params, batch, weight_decay, |i, ex, trace| {
        weighted_ce_logit_grad(trace.probs, ex.label, per_sample_weights[i])
    })
    .map(|(g, _)| g)
}

pub(crate) fn check_weights(batch: &[Example], weights: &[f64]) -> Result<()> {
    if weights.len() != batch.len() {
        return Err(Error::shape(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::domain("sample weights must be finite and >= 0"));
    }
    Ok(())
}

/// The loss whose gradient [`gradient`] computes. Used by finite-difference checks.
pub fn weighted_loss(
    spec: &ClassifierSpec,
    params: &ParamVector,
    batch: &[Example],
    per_sample_weights: &[f64],
    weight_decay: f64,
) -> Result<f64> {
    check_weights(batch, per_sample_weights)?;
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let mut total = 0.0;
    for (ex, w) in batch.iter().zip(per_sample_weights) {
        total += w * cross_entropy(forward(spec, params, &ex.input)?, ex.label)?;
    }
    let reg: f64 = params.as_slice().iter().map(|t| t * t).sum::<f64>() * 0.5 * weight_decay;
    Ok(total / batch.len() as f64 + reg)
}

/// Adam state. Defaults follow the training recipe: lr 1e-4,
/// beta1 0.9, beta2 0.99, epsilon 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-8;

impl OptimizerState {
    pub fn new(param_count: usize, lr: f64) -> Result<Self> {
        Self::with_hyperparams(param_count, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON)
    }

    pub fn with_hyperparams(param_count: usize, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::domain(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::domain(format!("betas must lie in [0, 1): {beta1}, {beta2}")));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::domain("epsilon must be finite and >= 0"));
        }
        Ok(OptimizerState {
            lr,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        })
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &[f64]) -> Result<()> {
        let n = params.len();
        if grad.len() != n || self.first_moment.len() != n || self.second_moment.len() != n {
            return Err(Error::shape(format!(
                "optimizer step with params {n}, grad {}, moments {}/{}",
                grad.len(),
                self.first_moment.len(),
                self.second_moment.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite gradient"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let theta = params.as_mut_slice();
        for j in 0..n {
            let g = grad[j];
            let m = self.beta1 * self.first_moment[j] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[j] + (1.0 - self.beta2) * g * g;
            self.first_moment[j] = m;
            self.second_moment[j] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            theta[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::numeric("optimizer produced non-finite parameters"));
        }
        Ok(())
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub param_count: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
const GRAD_CHECK_MAX_PARAMS: usize = 10_000;

/// Checks [`gradient`] against central finite differences on a seeded
/// random batch of three samples.
pub fn grad_check(spec: &ClassifierSpec, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(spec, seed, |_| {})
}

/// [`grad_check`] with a hook that may tamper with the analytic gradient
/// before comparison (used to confirm the check actually detects faults).
pub fn grad_check_with<F>(spec: &ClassifierSpec, seed: u64, tamper: F) -> Result<GradCheckReport>
where
    F: FnOnce(&mut [f64]),
{
    spec.validate()?;
    let n = spec.param_count();
    if n > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::domain(format!(
            "grad_check supports up to {GRAD_CHECK_MAX_PARAMS} parameters, spec has {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec.init_params(rng.random());
    // Non-zero biases so no unit sits exactly at a ReLU kink.
    let mut params = params.into_vec();
    for p in params.iter_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let params = ParamVector(params);
    let batch: Vec<Example> = (0..3)
        .map(|_| {
            let x = (0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            Example::new(Tensor::vector(x).expect("finite"), rng.random_range(0..2))
        })
        .collect();
    let weights: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(0.5..2.0)).collect();
    let weight_decay = 0.01;

    let mut analytic = gradient(spec, &params, &batch, &weights, weight_decay)?;
    tamper(&mut analytic);

    let mut probe = params.clone();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (j, &a) in analytic.iter().enumerate() {
        let orig = probe.0[j];
        probe.0[j] = orig + GRAD_CHECK_STEP;
        let up = weighted_loss(spec, &probe, &batch, &weights, weight_decay)?;
        probe.0[j] = orig - GRAD_CHECK_STEP;
        let down = weighted_loss(spec, &probe, &batch, &weights, weight_decay)?;
        probe.0[j] = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = j;
        }
    }
    Ok(GradCheckReport {
        param_count: n,
        max_rel_error,
        worst_index,
        passed: max_rel_error < GRAD_CHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_spec(activation: Activation) -> ClassifierSpec {
        ClassifierSpec::new(4, vec![5], activation).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_probs() {
        let spec = reference_spec(Activation::Relu);
        let params = ParamVector::zeros(&spec);
        let x = Tensor::vector(vec![3.0, -1.0, 0.5, 7.0]).unwrap();
        let p = forward(&spec, &params, &x).unwrap();
        assert_eq!(p.0, [0.5, 0.5]);
    }

    #[test]
    fn hand_built_logits_give_three_to_one() {
        // No hidden layer: logits = W x + b with W = [[ln 3], [0]], x = [1].
        let spec = ClassifierSpec::new(1, vec![], Activation::Relu).unwrap();
        let params = ParamVector::from_vec(&spec, vec![3f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let p = forward(&spec, &params, &Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!((p.real() - 0.75).abs() < 1e-12);
        assert!((p.fake() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let spec = reference_spec(Activation::Tanh);
        let params = ParamVector::zeros(&spec);
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(forward(&spec, &params, &x), Err(Error::Shape(_))));
        let short = ParamVector(vec![0.0; 3]);
        let x = Tensor::vector(vec![0.0; 4]).unwrap();
        assert!(matches!(forward(&spec, &short, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_flags_overflowing_logits() {
        let spec = ClassifierSpec::new(1, vec![], Activation::Relu).unwrap();
        let params = ParamVector::from_vec(&spec, vec![1e308, 0.0, 0.0, 0.0]).unwrap();
        let x = Tensor::vector(vec![10.0]).unwrap();
        assert!(matches!(forward(&spec, &params, &x), Err(Error::Numeric(_))));
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::vector(vec![f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(ClassProbs([1.0, 0.0]), 0).unwrap(), 0.0);
        let u = ClassProbs([0.5, 0.5]);
        assert!((cross_entropy(u, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(u, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = ClassProbs([0.9, 0.1]);
        assert!((cross_entropy(p, 1).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        // clamp keeps the loss finite
        assert!((cross_entropy(ClassProbs([1.0, 0.0]), 1).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(matches!(cross_entropy(u, 2), Err(Error::Domain(_))));
    }

    fn small_batch(spec: &ClassifierSpec, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|_| {
                let x = (0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                Example::new(Tensor::vector(x).unwrap(), rng.random_range(0..2))
            })
            .collect()
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let spec = reference_spec(Activation::Relu);
        let params = spec.init_params(1);
        let batch = small_batch(&spec, 2);
        let g = gradient(&spec, &params, &batch, &[0.0; 3], 0.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_weight() {
        let spec = reference_spec(Activation::Tanh);
        let params = spec.init_params(3);
        let batch = small_batch(&spec, 4);
        let one = gradient(&spec, &params, &batch[..1], &[1.0], 0.0).unwrap();
        let two = gradient(&spec, &params, &batch[..1], &[2.0], 0.0).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn gradient_errors() {
        let spec = reference_spec(Activation::Relu);
        let params = spec.init_params(0);
        assert!(matches!(gradient(&spec, &params, &[], &[], 0.0), Err(Error::Domain(_))));
        let batch = small_batch(&spec, 0);
        assert!(matches!(gradient(&spec, &params, &batch, &[1.0], 0.0), Err(Error::Shape(_))));
        assert!(matches!(
            gradient(&spec, &params, &batch, &[1.0, -1.0, 1.0], 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn init_params_layout_and_bounds() {
        let spec = ClassifierSpec::new(4, vec![5], Activation::Relu).unwrap();
        assert_eq!(spec.param_count(), 4 * 5 + 5 + 5 * 2 + 2);
        let p = spec.init_params(9);
        let s1 = (6.0f64 / 9.0).sqrt();
        assert!(p.as_slice()[..20].iter().all(|w| w.abs() <= s1));
        assert!(p.as_slice()[20..25].iter().all(|&b| b == 0.0));
        assert_eq!(p, spec.init_params(9));
        assert_ne!(p, spec.init_params(10));
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state() {
        let mut params = ParamVector(vec![0.3, -1.2]);
        let mut opt = OptimizerState::new(2, 0.1).unwrap();
        opt.step(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params.as_slice(), &[0.3, -1.2]);
        assert_eq!(opt.step_count, 1);
        assert_eq!(opt.first_moment, vec![0.0, 0.0]);
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let mut params = ParamVector(vec![0.0]);
        let mut opt = OptimizerState::new(1, 0.1).unwrap();
        opt.first_moment = vec![1.0];
        opt.second_moment = vec![1.0];
        opt.step(&mut params, &[0.0]).unwrap();
        assert_eq!(opt.first_moment, vec![0.9]);
        assert_eq!(opt.second_moment, vec![0.99]);
    }

    #[test]
    fn adam_first_step_is_bounded_by_lr() {
        let g = [3.0, -0.002, 1e-3, -50.0];
        let mut params = ParamVector(vec![0.0; 4]);
        let mut opt = OptimizerState::new(4, 1e-4).unwrap();
        opt.step(&mut params, &g).unwrap();
        for (p, gj) in params.as_slice().iter().zip(g) {
            assert!(p.abs() <= 1e-4 * (1.0 + 1e-6));
            assert_eq!(p.signum(), -gj.signum());
        }
    }

    #[test]
    fn adam_descends_scalar_quadratic() {
        let mut params = ParamVector(vec![1.0]);
        let mut opt = OptimizerState::new(1, 0.1).unwrap();
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = 2.0 * params.as_slice()[0];
            opt.step(&mut params, &[g]).unwrap();
            let cur = params.as_slice()[0].abs();
            assert!(cur < prev, "{cur} !< {prev}");
            prev = cur;
        }
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut params = ParamVector(vec![0.0; 2]);
        let mut opt = OptimizerState::new(2, 0.1).unwrap();
        assert!(matches!(opt.step(&mut params, &[f64::NAN, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(opt.step(&mut params, &[0.0]), Err(Error::Shape(_))));
        assert!(OptimizerState::new(2, 0.0).is_err());
        assert!(OptimizerState::with_hyperparams(2, 0.1, 1.0, 0.5, 1e-8).is_err());
    }

    #[test]
    fn grad_check_passes_for_both_activations() {
        for act in [Activation::Relu, Activation::Tanh] {
            let report = grad_check(&reference_spec(act), 0).unwrap();
            assert!(report.passed, "{act:?}: {report:?}");
        }
    }

    #[test]
    fn grad_check_detects_corruption() {
        let spec = reference_spec(Activation::Relu);
        let clean = gradient_probe_index(&spec);
        let report = grad_check_with(&spec, 0, |g| g[clean] *= 2.0).unwrap();
        assert!(report.max_rel_error > 0.3, "{report:?}");
        assert!(!report.passed);
    }

    /// Index of a gradient component far from zero in the seed-0 check.
    fn gradient_probe_index(spec: &ClassifierSpec) -> usize {
        let mut idx = 0;
        grad_check_with(spec, 0, |g| {
            idx = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap();
        })
        .unwrap();
        idx
    }

    #[test]
    fn grad_check_rejects_large_specs() {
        let spec = ClassifierSpec::new(3072, vec![64], Activation::Relu).unwrap();
        assert!(matches!(grad_check(&spec, 0), Err(Error::Domain(_))));
    }
}
