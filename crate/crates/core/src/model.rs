//! Small classifiers trained with plain mini-batch SGD on a distillation
//! loss.
//!
//! Parameters live in one flat `Vec<f64>` so that a state can be compared,
//! checkpointed and restored bit for bit. Layouts (row-major):
//!
//! - `SoftmaxLinear`: `W[d×K]`, `b[K]`
//! - `OneHiddenLayer`: `W1[d×H]`, `b1[H]`, `W2[H×K]`, `b2[K]`, tanh hidden units

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PointId;
use crate::{seed, Error, Result};

/// Probabilities are clamped below at this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.05;

const DIST_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchKind {
    SoftmaxLinear,
    OneHiddenLayer { hidden_units: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    #[serde(flatten)]
    pub kind: ArchKind,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ModelArch {
    pub fn softmax_linear(feature_dim: usize, num_classes: usize) -> Self {
        ModelArch {
            kind: ArchKind::SoftmaxLinear,
            feature_dim,
            num_classes,
        }
    }

    pub fn one_hidden_layer(feature_dim: usize, hidden_units: usize, num_classes: usize) -> Self {
        ModelArch {
            kind: ArchKind::OneHiddenLayer { hidden_units },
            feature_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hidden_ok = match self.kind {
            ArchKind::SoftmaxLinear => true,
            ArchKind::OneHiddenLayer { hidden_units } => hidden_units > 0,
        };
        if self.feature_dim == 0 || self.num_classes == 0 || !hidden_ok {
            return Err(Error::InvalidArgument(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn hidden_units(&self) -> Option<usize> {
        match self.kind {
            ArchKind::SoftmaxLinear => None,
            ArchKind::OneHiddenLayer { hidden_units } => Some(hidden_units),
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, k) = (self.feature_dim, self.num_classes);
        match self.kind {
            ArchKind::SoftmaxLinear => d * k + k,
            ArchKind::OneHiddenLayer { hidden_units: h } => d * h + h + h * k + k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: ModelArch,
    pub params: Vec<f64>,
    /// Number of seeded permutations consumed by training so far.
    pub rng_cursor: u64,
}

impl ModelState {
    pub fn zeros(arch: ModelArch) -> Self {
        ModelState {
            arch,
            params: vec![0.0; arch.param_count()],
            rng_cursor: 0,
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ModelState) -> bool {
        self.arch == other.arch
            && self.rng_cursor == other.rng_cursor
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute parameter difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &ModelState) -> f64 {
        if self.arch != other.arch || self.params.len() != other.params.len() {
            return f64::INFINITY;
        }
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the one-hot hard label in the target mixture.
    #[serde(default)]
    pub hard_label_weight: f64,
    /// Softmax temperature applied when this model's teachers emit soft labels.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub seed: u64,
}

fn default_temperature() -> f64 {
    1.0
}

impl TrainHyper {
    pub fn new(learning_rate: f64, batch_size: usize, seed: u64) -> Self {
        TrainHyper {
            learning_rate,
            batch_size,
            hard_label_weight: 0.0,
            temperature: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || self.batch_size == 0
            || !(0.0..=1.0).contains(&self.hard_label_weight)
            || !(self.temperature > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid training hyper-parameters: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Ordered soft labels for the points of one chunk.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SoftLabelChunk {
    pub entries: Vec<(PointId, Vec<f64>)>,
}

impl SoftLabelChunk {
    pub fn get(&self, id: PointId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, v)| v.as_slice())
    }

    pub fn remove(&mut self, id: PointId) -> bool {
        let before = self.entries.len();
        self.entries.retain(|(p, _)| *p != id);
        self.entries.len() != before
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bit_eq(&self, other: &SoftLabelChunk) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, va), (b, vb))| {
                a == b
                    && va.len() == vb.len()
                    && va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// One training example: the target is a probability vector (soft label).
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub soft_label: &'a [f64],
    pub hard_label: usize,
}

pub fn init_model(arch: ModelArch, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let mut rng = seed::rng(seed);
    let params = (0..arch.param_count())
        .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
        .collect();
    Ok(ModelState {
        arch,
        params,
        rng_cursor: 0,
    })
}

fn check_features(arch: &ModelArch, features: &[f64]) -> Result<()> {
    if features.len() != arch.feature_dim {
        return Err(Error::Dimension {
            expected: arch.feature_dim,
            found: features.len(),
        });
    }
    Ok(())
}

/// Forward pass writing logits into `out` and, for the hidden-layer model,
/// the hidden activations into `hidden`.
fn forward(arch: &ModelArch, params: &[f64], x: &[f64], hidden: &mut Vec<f64>, out: &mut [f64]) {
    let (d, k) = (arch.feature_dim, arch.num_classes);
    match arch.kind {
        ArchKind::SoftmaxLinear => {
            let (w, b) = params.split_at(d * k);
            out.copy_from_slice(b);
            for (i, &xi) in x.iter().enumerate() {
                let row = &w[i * k..(i + 1) * k];
                for (o, &wic) in out.iter_mut().zip(row) {
                    *o += xi * wic;
                }
            }
        }
        ArchKind::OneHiddenLayer { hidden_units: h } => {
            let (w1, rest) = params.split_at(d * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h * k);
            hidden.clear();
            hidden.extend_from_slice(b1);
            for (i, &xi) in x.iter().enumerate() {
                let row = &w1[i * h..(i + 1) * h];
                for (a, &w) in hidden.iter_mut().zip(row) {
                    *a += xi * w;
                }
            }
            for a in hidden.iter_mut() {
                *a = a.tanh();
            }
            out.copy_from_slice(b2);
            for (u, &a) in hidden.iter().enumerate() {
                let row = &w2[u * k..(u + 1) * k];
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += a * w;
                }
            }
        }
    }
}

/// In-place softmax of `z / temperature`.
pub fn softmax_in_place(z: &mut [f64], temperature: f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn logits(state: &ModelState, features: &[f64]) -> Result<Vec<f64>> {
    check_features(&state.arch, features)?;
    let mut out = vec![0.0; state.arch.num_classes];
    forward(&state.arch, &state.params, features, &mut Vec::new(), &mut out);
    Ok(out)
}

pub fn predict(state: &ModelState, features: &[f64]) -> Result<Vec<f64>> {
    predict_with_temperature(state, features, 1.0)
}

pub fn predict_with_temperature(
    state: &ModelState,
    features: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    let mut z = logits(state, features)?;
    softmax_in_place(&mut z, temperature);
    Ok(z)
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > DIST_TOLERANCE * v.len().max(1) as f64 {
        return Err(Error::InvalidDistribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

fn cross_entropy(target: &[f64], prediction: &[f64]) -> f64 {
    -target
        .iter()
        .zip(prediction)
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * p.max(PROB_FLOOR).ln() })
        .sum::<f64>()
}

/// `(1-α)·CE(soft ‖ pred) + α·CE(onehot(hard) ‖ pred)`.
pub fn distill_loss(
    prediction: &[f64],
    soft_label: &[f64],
    hard_label: usize,
    alpha: f64,
) -> Result<f64> {
    if prediction.len() != soft_label.len() {
        return Err(Error::Dimension {
            expected: prediction.len(),
            found: soft_label.len(),
        });
    }
    if hard_label >= prediction.len() {
        return Err(Error::InvalidArgument(format!(
            "hard label {hard_label} out of range for {} classes",
            prediction.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} not in [0,1]")));
    }
    check_distribution(prediction, "prediction")?;
    check_distribution(soft_label, "soft label")?;
    let soft = cross_entropy(soft_label, prediction);
    let hard = -prediction[hard_label].max(PROB_FLOOR).ln();
    Ok((1.0 - alpha) * soft + alpha * hard)
}

/// Reusable buffers for gradient evaluation.
struct Scratch {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    delta: Vec<f64>,
}

impl Scratch {
    fn new(arch: &ModelArch) -> Self {
        Scratch {
            hidden: Vec::with_capacity(arch.hidden_units().unwrap_or(0)),
            probs: vec![0.0; arch.num_classes],
            delta: vec![0.0; arch.num_classes],
        }
    }
}

/// Adds the gradient of the example loss to `grad`, returning the loss.
fn accumulate_gradient(
    arch: &ModelArch,
    params: &[f64],
    ex: &Example<'_>,
    alpha: f64,
    scratch: &mut Scratch,
    grad: &mut [f64],
) -> f64 {
    let (d, k) = (arch.feature_dim, arch.num_classes);
    forward(arch, params, ex.features, &mut scratch.hidden, &mut scratch.probs);
    softmax_in_place(&mut scratch.probs, 1.0);
    let mut loss = 0.0;
    // dL/dz = p - target, with target = (1-α)·soft + α·onehot
    for c in 0..k {
        let onehot = if c == ex.hard_label { 1.0 } else { 0.0 };
        let t = (1.0 - alpha) * ex.soft_label[c] + alpha * onehot;
        if t != 0.0 {
            loss -= t * scratch.probs[c].max(PROB_FLOOR).ln();
        }
        scratch.delta[c] = scratch.probs[c] - t;
    }
    let delta = &scratch.delta;
    match arch.kind {
        ArchKind::SoftmaxLinear => {
            let (gw, gb) = grad.split_at_mut(d * k);
            for (i, &xi) in ex.features.iter().enumerate() {
                for (g, &dc) in gw[i * k..(i + 1) * k].iter_mut().zip(delta) {
                    *g += xi * dc;
                }
            }
            for (g, &dc) in gb.iter_mut().zip(delta) {
                *g += dc;
            }
        }
        ArchKind::OneHiddenLayer { hidden_units: h } => {
            let w2 = &params[d * h + h..d * h + h + h * k];
            let (gw1, rest) = grad.split_at_mut(d * h);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(h * k);
            for (u, &a) in scratch.hidden.iter().enumerate() {
                let mut back = 0.0;
                for c in 0..k {
                    gw2[u * k + c] += a * delta[c];
                    back += w2[u * k + c] * delta[c];
                }
                let pre = back * (1.0 - a * a);
                gb1[u] += pre;
                for (i, &xi) in ex.features.iter().enumerate() {
                    gw1[i * h + u] += xi * pre;
                }
            }
            for (g, &dc) in gb2.iter_mut().zip(delta) {
                *g += dc;
            }
        }
    }
    loss
}

/// Loss of one example at `state`, with the target mixture weight `alpha`.
pub fn example_loss(state: &ModelState, ex: &Example<'_>, alpha: f64) -> Result<f64> {
    let p = predict(state, ex.features)?;
    distill_loss(&p, ex.soft_label, ex.hard_label, alpha)
}

/// Analytic gradient of [`example_loss`] with respect to the parameters.
pub fn example_gradient(state: &ModelState, ex: &Example<'_>, alpha: f64) -> Result<Vec<f64>> {
    validate_example(&state.arch, ex)?;
    let mut grad = vec![0.0; state.params.len()];
    let mut scratch = Scratch::new(&state.arch);
    accumulate_gradient(&state.arch, &state.params, ex, alpha, &mut scratch, &mut grad);
    Ok(grad)
}

fn validate_example(arch: &ModelArch, ex: &Example<'_>) -> Result<()> {
    check_features(arch, ex.features)?;
    if ex.soft_label.len() != arch.num_classes {
        return Err(Error::Dimension {
            expected: arch.num_classes,
            found: ex.soft_label.len(),
        });
    }
    if ex.hard_label >= arch.num_classes {
        return Err(Error::InvalidArgument(format!(
            "hard label {} out of range for {} classes",
            ex.hard_label, arch.num_classes
        )));
    }
    Ok(())
}

/// Mean loss over `examples` at `state`.
pub fn mean_loss(state: &ModelState, examples: &[Example<'_>], alpha: f64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("mean loss of no examples".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        total += example_loss(state, ex, alpha)?;
    }
    Ok(total / examples.len() as f64)
}

/// Mini-batch SGD for `epochs` passes over `examples`.
///
/// One permutation of the examples is drawn at call start from
/// `derive(hyper.seed, [round])` and reused by every epoch. The returned
/// state depends only on the arguments.
pub fn train(
    state: &ModelState,
    examples: &[Example<'_>],
    epochs: usize,
    hyper: &TrainHyper,
    round: u64,
) -> Result<ModelState> {
    if epochs == 0 {
        return Ok(state.clone());
    }
    hyper.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "training for a positive number of epochs needs examples".into(),
        ));
    }
    let arch = state.arch;
    for ex in examples {
        validate_example(&arch, ex)?;
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(hyper.seed, &[round])));

    let mut params = state.params.clone();
    let mut grad = vec![0.0; params.len()];
    let mut scratch = Scratch::new(&arch);
    for _ in 0..epochs {
        for batch in order.chunks(hyper.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                accumulate_gradient(
                    &arch,
                    &params,
                    &examples[i],
                    hyper.hard_label_weight,
                    &mut scratch,
                    &mut grad,
                );
            }
            let step = hyper.learning_rate / batch.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
    }
    Ok(ModelState {
        arch,
        params,
        rng_cursor: state.rng_cursor + 1,
    })
}

/// Component-wise mean of equal-length probability vectors.
pub fn aggregate(predictions: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot aggregate zero predictions".into()))?;
    let mut out = vec![0.0; first.len()];
    for p in predictions {
        if p.len() != out.len() {
            return Err(Error::Dimension {
                expected: out.len(),
                found: p.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let n = predictions.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Averaged member predictions for every point, in the given order.
pub fn subensemble_soft_labels<'a, I>(
    models: &[&ModelState],
    points: I,
    temperature: f64,
) -> Result<SoftLabelChunk>
where
    I: IntoIterator<Item = (PointId, &'a [f64])>,
{
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty teacher subensemble".into()))?;
    if let Some(m) = models.iter().find(|m| m.arch.num_classes != first.arch.num_classes) {
        return Err(Error::Dimension {
            expected: first.arch.num_classes,
            found: m.arch.num_classes,
        });
    }
    let entries = points
        .into_iter()
        .map(|(id, x)| {
            let preds = models
                .iter()
                .map(|m| predict_with_temperature(m, x, temperature))
                .collect::<Result<Vec<_>>>()?;
            Ok((id, aggregate(&preds)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftLabelChunk { entries })
}

/// Anything that maps features to a class-probability vector.
pub trait Classifier {
    fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>>;
}

impl Classifier for ModelState {
    fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        predict(self, features)
    }
}

/// Fraction of points whose arg-max prediction equals the hard label.
pub fn evaluate_accuracy<C: Classifier + ?Sized>(
    model: &C,
    dataset: &crate::data::Dataset,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for p in dataset.points() {
        if argmax(&model.predict_proba(&p.features)?) == p.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Index of the largest component; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    v
}
