//! Feed-forward softmax classifier trained with mini-batch SGD and momentum,
//! following the warmup-then-hybrid schedule of CPLS.
//!
//! Per epoch: shuffle, train with the phase's loss, evaluate the validation
//! split, fold its confusion counts into the tracker and normalize. The
//! normalized matrix is only consumed once the warmup threshold has passed.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::math::{affine_forward, argmax, ce_softmax_gradient, softmax, Matrix, RngSeed};
use crate::par::{self, Execution};
use crate::smoothing::{
    convex_mix, hard_ce, hard_target, hybrid_loss, hybrid_target, soft_ce, vanilla_ls_target,
    ConfusionTracker, OlsState, Phase, TargetStrategy,
};

/// Layer widths `[d_in, h_1, ..., h_k, C]`. ReLU on hidden layers, softmax
/// on the output. `[d_in, C]` is plain softmax regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layer_sizes = vec![input_dim];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(num_classes);
        Self { layer_sizes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(
                "layer sizes need at least an input and an output width".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive: {:?}",
                self.layer_sizes
            )));
        }
        if self.num_classes() < 2 {
            return Err(Error::Config("need at least 2 output classes".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    pub fn num_hidden(&self) -> usize {
        self.layer_sizes.len().saturating_sub(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub strategy: TargetStrategy,
    pub seed: RngSeed,
    pub ece_bins: usize,
    /// Skip the per-epoch confusion refresh so the tracker stays at its
    /// identity warm start. Only useful for ablations and tests.
    #[serde(default)]
    pub freeze_confusion: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            strategy: TargetStrategy::Hard,
            seed: RngSeed(0),
            ece_bins: calibration::DEFAULT_NUM_BINS,
            freeze_confusion: false,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        // Zero is allowed: it turns the update into a no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("need at least one ECE bin".into()));
        }
        self.strategy.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    weight_velocity: Matrix,
    bias_velocity: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            weight_velocity: Matrix::zeros(outputs, inputs),
            bias_velocity: vec![0.0; outputs],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// All-zero weights and biases.
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.rows()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Weights then bias of each layer, in layer order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat). Momentum buffers are untouched.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.data().len());
            l.weights.data_mut().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    /// True when weights and biases match `other` bit for bit.
    pub fn same_weights(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights == b.weights && a.bias == b.bias)
    }
}

/// He-style initialization: weights `N(0, 2 / fan_in)`, zero biases.
pub fn init_params(config: &MlpConfig, seed: RngSeed) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = seed.rng();
    for layer in &mut params.layers {
        let fan_in = layer.weights.cols();
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        for w in layer.weights.data_mut() {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    /// Post-ReLU activations of each hidden layer.
    pub hidden: Vec<Vec<f64>>,
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardPass> {
    if x.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input of length {} for a network expecting {}",
            x.len(),
            params.input_dim()
        )));
    }
    let (last, hidden_layers) = params.layers.split_last().expect("at least one layer");
    let mut hidden = Vec::with_capacity(hidden_layers.len());
    for layer in hidden_layers {
        let input = hidden.last().map_or(x, |h: &Vec<f64>| h.as_slice());
        let mut h = affine_forward(&layer.weights, &layer.bias, input)?;
        for v in &mut h {
            *v = v.max(0.0);
        }
        hidden.push(h);
    }
    let input = hidden.last().map_or(x, |h| h.as_slice());
    let logits = affine_forward(&last.weights, &last.bias, input)?;
    Ok(ForwardPass { logits, hidden })
}

pub fn predict_proba(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    softmax(&forward(params, x)?.logits)
}

/// Weight of the hard-label term in the OLS loss once online targets are
/// active; the remainder goes to the online soft targets.
pub const OLS_HARD_WEIGHT: f64 = 0.5;

/// Mutable state a strategy carries across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyState {
    pub tracker: ConfusionTracker,
    pub ols: OlsState,
}

impl StrategyState {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tracker: ConfusionTracker::new(num_classes),
            ols: OlsState::new(num_classes),
        }
    }
}

/// Per-sample loss and the target whose `p - target` is its logit gradient.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub strategy: TargetStrategy,
    pub phase: Phase,
    pub state: &'a StrategyState,
}

impl<'a> Objective<'a> {
    pub fn new(strategy: TargetStrategy, phase: Phase, state: &'a StrategyState) -> Self {
        Self {
            strategy,
            phase,
            state,
        }
    }

    pub fn target_and_loss(&self, p: &[f64], y: usize) -> Result<(Vec<f64>, f64)> {
        let c = p.len();
        match (self.strategy, self.phase) {
            (TargetStrategy::VanillaLs { alpha }, _) => {
                let t = vanilla_ls_target(y, alpha, c)?;
                let loss = soft_ce(p, t.probs())?;
                Ok((t.into_vec(), loss))
            }
            (TargetStrategy::Cpls { beta, .. }, Phase::Hybrid) => {
                let t = hybrid_target(&self.state.tracker, y, beta)?;
                let loss = hybrid_loss(p, y, &self.state.tracker, beta)?;
                Ok((t.into_vec(), loss))
            }
            (TargetStrategy::Ols { .. }, Phase::Hybrid) => {
                let soft = self.state.ols.target(y)?;
                let loss = convex_mix(hard_ce(p, y)?, soft_ce(p, soft.probs())?, OLS_HARD_WEIGHT);
                let t = soft
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(c, &s)| convex_mix(if c == y { 1.0 } else { 0.0 }, s, OLS_HARD_WEIGHT))
                    .collect();
                Ok((t, loss))
            }
            _ => Ok((hard_target(y, c)?.into_vec(), hard_ce(p, y)?)),
        }
    }
}

/// Parameter-shaped gradient (weights and biases only).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl Gradient {
    fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weights.rows(), l.weights.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradient) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, o) in w.data_mut().iter_mut().zip(ow.data()) {
                *a += o;
            }
            for (a, o) in b.iter_mut().zip(ob) {
                *a += o;
            }
        }
    }

    fn divide(&mut self, n: f64) {
        for (w, b) in &mut self.layers {
            for v in w.data_mut().iter_mut().chain(b.iter_mut()) {
                *v /= n;
            }
        }
    }

    /// Same layout as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }
}

struct SampleResult {
    loss: f64,
    probs: Vec<f64>,
    gradient: Gradient,
}

fn sample_result(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    objective: &Objective<'_>,
) -> Result<SampleResult> {
    let pass = forward(params, x)?;
    let probs = softmax(&pass.logits)?;
    let (target, loss) = objective.target_and_loss(&probs, y)?;
    let mut delta = ce_softmax_gradient(&probs, &target)?;

    let mut gradient = Gradient::zeros_like(params);
    for l in (0..params.layers.len()).rev() {
        let input = if l == 0 {
            x
        } else {
            pass.hidden[l - 1].as_slice()
        };
        let (gw, gb) = &mut gradient.layers[l];
        for (r, &d) in delta.iter().enumerate() {
            for (g, &xi) in gw.row_mut(r).iter_mut().zip(input) {
                *g = d * xi;
            }
        }
        gb.copy_from_slice(&delta);
        if l > 0 {
            let mut back = params.layers[l].weights.matvec_transposed(&delta)?;
            // ReLU derivative, taking 0 at the kink.
            for (b, &h) in back.iter_mut().zip(&pass.hidden[l - 1]) {
                if h <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
    }
    Ok(SampleResult {
        loss,
        probs,
        gradient,
    })
}

/// Loss and gradient of a mini-batch, averaged over its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub mean_loss: f64,
    pub gradient: Gradient,
    /// Per-sample predicted probabilities, in batch order.
    pub probs: Vec<Vec<f64>>,
}

/// Per-sample passes may run in parallel; losses and gradients are summed
/// in ascending batch order.
pub fn batch_gradient(
    params: &ModelParams,
    ds: &LabeledDataset,
    indices: &[usize],
    objective: &Objective<'_>,
    exec: Execution,
) -> Result<BatchOutput> {
    if indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let results = par::map_indexed(exec, indices.len(), |k| {
        let (x, y) = ds.sample(indices[k]);
        sample_result(params, x, y, objective)
    });
    let mut gradient = Gradient::zeros_like(params);
    let mut loss_sum = 0.0;
    let mut probs = Vec::with_capacity(indices.len());
    for r in results {
        let r = r?;
        loss_sum += r.loss;
        gradient.add_assign(&r.gradient);
        probs.push(r.probs);
    }
    let n = indices.len() as f64;
    gradient.divide(n);
    Ok(BatchOutput {
        mean_loss: loss_sum / n,
        gradient,
        probs,
    })
}

fn apply_update(params: &mut ModelParams, gradient: &Gradient, lr: f64, momentum: f64) {
    for (layer, (gw, gb)) in params.layers.iter_mut().zip(&gradient.layers) {
        let pairs = layer
            .weights
            .data_mut()
            .iter_mut()
            .zip(layer.weight_velocity.data_mut().iter_mut())
            .zip(gw.data())
            .chain(
                layer
                    .bias
                    .iter_mut()
                    .zip(layer.bias_velocity.iter_mut())
                    .zip(gb.iter()),
            );
        for ((w, v), g) in pairs {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}

fn check_shapes(params: &ModelParams, ds: &LabeledDataset) -> Result<()> {
    if ds.dimension() != params.input_dim() || ds.num_classes() != params.num_classes() {
        return Err(Error::Dimension(format!(
            "dataset with {} features / {} classes for a {}-input, {}-class network",
            ds.dimension(),
            ds.num_classes(),
            params.input_dim(),
            params.num_classes()
        )));
    }
    Ok(())
}

/// One pass over `train` for the 1-based `epoch`. Returns the mean
/// per-sample loss. OLS accumulates correct training predictions here.
pub fn train_epoch(
    params: &mut ModelParams,
    train: &LabeledDataset,
    state: &mut StrategyState,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    check_shapes(params, train)?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(
        &mut config
            .seed
            .derive("shuffle")
            .derive_index(epoch as u64)
            .rng(),
    );

    let phase = config.strategy.phase(epoch);
    let tracks_ols = matches!(config.strategy, TargetStrategy::Ols { .. });
    let mut loss_sum = 0.0;
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        let out = {
            let objective = Objective::new(config.strategy, phase, state);
            batch_gradient(params, train, batch, &objective, config.execution)?
        };
        if !out.mean_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch}, batch {b}"
            )));
        }
        if tracks_ols {
            for (&i, p) in batch.iter().zip(&out.probs) {
                state.ols.update(p, train.labels()[i])?;
            }
        }
        loss_sum += out.mean_loss * batch.len() as f64;
        apply_update(params, &out.gradient, config.learning_rate, config.momentum);
        if !params.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters diverged at epoch {epoch}, batch {b}"
            )));
        }
    }
    if tracks_ols {
        state.ols.end_epoch();
    }
    Ok(loss_sum / train.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `n_samples × C`
    pub probs: Matrix,
    /// `C × C`, rows are true classes.
    pub confusion: Matrix,
    /// Mean hard-label cross-entropy.
    pub mean_hard_loss: f64,
}

pub fn evaluate(params: &ModelParams, ds: &LabeledDataset) -> Result<Evaluation> {
    evaluate_with(params, ds, Execution::default())
}

pub fn evaluate_with(
    params: &ModelParams,
    ds: &LabeledDataset,
    exec: Execution,
) -> Result<Evaluation> {
    check_shapes(params, ds)?;
    let c = ds.num_classes();
    let rows = par::map_indexed(exec, ds.len(), |i| {
        predict_proba(params, ds.features().row(i))
    });
    let mut probs = Vec::with_capacity(ds.len() * c);
    let mut confusion = Matrix::zeros(c, c);
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for (row, &y) in rows.into_iter().zip(ds.labels()) {
        let row = row?;
        let pred = argmax(&row);
        if pred == y {
            correct += 1;
        }
        confusion.set(y, pred, confusion.get(y, pred) + 1.0);
        loss_sum += hard_ce(&row, y)?;
        probs.extend_from_slice(&row);
    }
    let n = ds.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        probs: Matrix::from_vec(ds.len(), c, probs)?,
        confusion,
        mean_hard_loss: loss_sum / n,
    })
}

/// Penultimate-layer activations, one row per sample.
pub fn extract_features(params: &ModelParams, ds: &LabeledDataset) -> Result<Matrix> {
    if params.layers.len() < 2 {
        return Err(Error::Config(
            "feature export needs at least one hidden layer".into(),
        ));
    }
    check_shapes(params, ds)?;
    let width = params.layers[params.layers.len() - 2].weights.rows();
    let rows = par::map_indexed(Execution::default(), ds.len(), |i| {
        forward(params, ds.features().row(i)).map(|mut f| f.hidden.pop().unwrap_or_default())
    });
    let mut data = Vec::with_capacity(ds.len() * width);
    for r in rows {
        data.extend(r?);
    }
    Matrix::from_vec(ds.len(), width, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    /// Mean hard-label cross-entropy on validation, comparable across strategies.
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_ece: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    pub tracker: ConfusionTracker,
}

pub fn fit(
    train: &LabeledDataset,
    val: &LabeledDataset,
    mlp: &MlpConfig,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    fit_with_observer(train, val, mlp, config, |_, _| {})
}

/// [`fit`], calling `observer` after every epoch with that epoch's metrics
/// and the freshly normalized tracker.
pub fn fit_with_observer<F>(
    train: &LabeledDataset,
    val: &LabeledDataset,
    mlp: &MlpConfig,
    config: &TrainConfig,
    mut observer: F,
) -> Result<FitOutcome>
where
    F: FnMut(&EpochMetrics, &ConfusionTracker),
{
    config.validate()?;
    mlp.validate()?;
    if train.dimension() != val.dimension() || train.num_classes() != val.num_classes() {
        return Err(Error::Dimension(
            "train and validation splits disagree on features or classes".into(),
        ));
    }
    let mut params = init_params(mlp, config.seed.derive("init"))?;
    check_shapes(&params, train)?;
    let mut state = StrategyState::new(train.num_classes());
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let train_loss = train_epoch(&mut params, train, &mut state, config, epoch)?;
        let eval = evaluate_with(&params, val, config.execution)?;
        if !config.freeze_confusion {
            state.tracker.accumulate_counts(&eval.confusion)?;
            state.tracker.normalize();
        }
        let m = EpochMetrics {
            epoch,
            phase: config.strategy.phase(epoch),
            train_loss,
            val_loss: eval.mean_hard_loss,
            val_accuracy: eval.accuracy,
            val_ece: calibration::ece(&eval.probs, val.labels(), config.ece_bins)?,
        };
        observer(&m, &state.tracker);
        metrics.push(m);
    }
    Ok(FitOutcome {
        params,
        metrics,
        tracker: state.tracker,
    })
}
