//! Target distributions and losses for hard labels, vanilla label smoothing,
//! online label smoothing (OLS) and confusion-penalty label smoothing (CPLS),
//! plus the validation confusion tracker that feeds CPLS.
//!
//! Every loss takes a probability vector `p` and evaluates `log p` through a
//! floor of [`LOG_PROB_FLOOR`], so losses stay finite when a prediction
//! collapses to zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, Matrix};

/// Probabilities below this are treated as this value inside `log`.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_WARMUP_EPOCHS: usize = 5;

fn floored_ln(p: f64) -> f64 {
    p.max(LOG_PROB_FLOOR).ln()
}

/// How training targets are built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetStrategy {
    Hard,
    VanillaLs { alpha: f64 },
    Ols { warmup_epochs: usize },
    Cpls { beta: f64, warmup_epochs: usize },
}

/// Which loss a given epoch trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// The strategy's base loss: hard CE for Hard, OLS and CPLS warmup;
    /// the smoothed CE for vanilla LS.
    Warmup,
    /// Past the warmup threshold: the hybrid loss for CPLS; for OLS an even
    /// mix of hard CE and CE against the online soft targets.
    Hybrid,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Hybrid => "hybrid",
        }
    }
}

impl TargetStrategy {
    pub fn cpls() -> Self {
        TargetStrategy::Cpls {
            beta: DEFAULT_BETA,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
        }
    }

    pub fn vanilla() -> Self {
        TargetStrategy::VanillaLs {
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn ols() -> Self {
        TargetStrategy::Ols {
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
        }
    }

    /// Short name, as used in comparison tables.
    pub fn name(&self) -> &'static str {
        match self {
            TargetStrategy::Hard => "hard",
            TargetStrategy::VanillaLs { .. } => "vanilla",
            TargetStrategy::Ols { .. } => "ols",
            TargetStrategy::Cpls { .. } => "cpls",
        }
    }

    /// `β = 0` and `β = 1` are accepted so the loss endpoints can be exercised.
    pub fn validate(&self) -> Result<()> {
        match *self {
            TargetStrategy::VanillaLs { alpha } if !(0.0..1.0).contains(&alpha) => {
                Err(Error::Domain(format!(
                    "smoothing weight alpha must be in [0, 1), got {alpha}"
                )))
            }
            TargetStrategy::Cpls { beta, .. } if !(0.0..=1.0).contains(&beta) => Err(
                Error::Domain(format!("hybrid weight beta must be in [0, 1], got {beta}")),
            ),
            _ => Ok(()),
        }
    }

    /// Phase of a 1-based epoch: epochs `1..=N` warm up, later epochs are hybrid.
    pub fn phase(&self, epoch: usize) -> Phase {
        match *self {
            TargetStrategy::Ols { warmup_epochs } | TargetStrategy::Cpls { warmup_epochs, .. }
                if epoch > warmup_epochs =>
            {
                Phase::Hybrid
            }
            _ => Phase::Warmup,
        }
    }
}

impl fmt::Display for TargetStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetStrategy::Hard => write!(f, "hard"),
            TargetStrategy::VanillaLs { alpha } => write!(f, "vanilla(alpha={alpha})"),
            TargetStrategy::Ols { warmup_epochs } => write!(f, "ols(N={warmup_epochs})"),
            TargetStrategy::Cpls {
                beta,
                warmup_epochs,
            } => write!(f, "cpls(beta={beta}, N={warmup_epochs})"),
        }
    }
}

/// A probability vector over the classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    probs: Vec<f64>,
}

impl SoftTarget {
    /// Accepts `probs` if its entries lie in `[0, 1]` and sum to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Dimension("empty target".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain(format!(
                "target entries outside [0, 1]: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("target sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl AsRef<[f64]> for SoftTarget {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

fn check_class(y: usize, c: usize) -> Result<()> {
    if y >= c {
        return Err(Error::Domain(format!("class {y} outside [0, {c})")));
    }
    Ok(())
}

pub fn hard_target(y: usize, num_classes: usize) -> Result<SoftTarget> {
    check_class(y, num_classes)?;
    let mut probs = vec![0.0; num_classes];
    probs[y] = 1.0;
    Ok(SoftTarget { probs })
}

/// `-log p[y]`
pub fn hard_ce(p: &[f64], y: usize) -> Result<f64> {
    check_class(y, p.len())?;
    Ok(-floored_ln(p[y]))
}

/// `(1 - α)·one_hot(y) + α/C`
pub fn vanilla_ls_target(y: usize, alpha: f64, num_classes: usize) -> Result<SoftTarget> {
    check_class(y, num_classes)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "smoothing weight alpha must be in [0, 1), got {alpha}"
        )));
    }
    let uniform = alpha / num_classes as f64;
    let probs = (0..num_classes)
        .map(|c| {
            if c == y {
                (1.0 - alpha) + uniform
            } else {
                uniform
            }
        })
        .collect();
    Ok(SoftTarget { probs })
}

/// `-Σ target[c]·log p[c]`. Zero-weight classes contribute nothing, so a
/// one-hot target reproduces [`hard_ce`] exactly.
pub fn soft_ce(p: &[f64], target: &[f64]) -> Result<f64> {
    if p.len() != target.len() {
        return Err(Error::Dimension(format!(
            "probabilities of length {} vs target of length {}",
            p.len(),
            target.len()
        )));
    }
    let mut acc = 0.0;
    for (&pc, &tc) in p.iter().zip(target) {
        if tc != 0.0 {
            acc += tc * floored_ln(pc);
        }
    }
    Ok(-acc)
}

/// `β·a + (1 − β)·b`, returning `a` itself when the two agree so that
/// mixing equal quantities never perturbs them by rounding.
pub fn convex_mix(a: f64, b: f64, beta: f64) -> f64 {
    if a == b {
        a
    } else {
        beta * a + (1.0 - beta) * b
    }
}

/// Per-epoch validation confusion matrix and its row-normalized form.
///
/// Rows are true classes, columns predicted classes. The normalized matrix
/// starts as the identity and is replaced only by [`normalize`](Self::normalize),
/// which also clears the counts for the next epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionTracker {
    counts: Matrix,
    normalized: Matrix,
    epoch_tag: usize,
}

impl ConfusionTracker {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Matrix::zeros(num_classes, num_classes),
            normalized: Matrix::identity(num_classes),
            epoch_tag: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.rows()
    }

    pub fn counts(&self) -> &Matrix {
        &self.counts
    }

    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }

    /// Number of normalizations so far; 0 means the identity warm start.
    pub fn epoch_tag(&self) -> usize {
        self.epoch_tag
    }

    pub fn accumulate(&mut self, true_class: usize, predicted_class: usize) -> Result<()> {
        let c = self.num_classes();
        check_class(true_class, c)?;
        check_class(predicted_class, c)?;
        let v = self.counts.get(true_class, predicted_class);
        self.counts.set(true_class, predicted_class, v + 1.0);
        Ok(())
    }

    /// Adds a whole count matrix (e.g. from an evaluation pass).
    pub fn accumulate_counts(&mut self, counts: &Matrix) -> Result<()> {
        if counts.rows() != self.counts.rows() || counts.cols() != self.counts.cols() {
            return Err(Error::Dimension(format!(
                "{}x{} counts for a {}-class tracker",
                counts.rows(),
                counts.cols(),
                self.num_classes()
            )));
        }
        for (a, b) in self.counts.data_mut().iter_mut().zip(counts.data()) {
            *a += b;
        }
        Ok(())
    }

    /// Row-normalizes the counts. Rows without any samples fall back to the
    /// identity row.
    pub fn normalize(&mut self) {
        let c = self.num_classes();
        let mut normalized = Matrix::zeros(c, c);
        for i in 0..c {
            let row = self.counts.row(i);
            let total: f64 = row.iter().sum();
            let out = normalized.row_mut(i);
            if total > 0.0 {
                for (o, v) in out.iter_mut().zip(row) {
                    *o = v / total;
                }
            } else {
                out[i] = 1.0;
            }
        }
        self.normalized = normalized;
        self.counts = Matrix::zeros(c, c);
        self.epoch_tag += 1;
    }

    /// Normalized confusion row of class `y`: the CPLS target for samples of `y`.
    pub fn row(&self, y: usize) -> Result<&[f64]> {
        check_class(y, self.num_classes())?;
        Ok(self.normalized.row(y))
    }
}

/// `-Σ_c m[y][c]·log p[c]` with `m` the tracker's normalized matrix.
pub fn cpls_ce(p: &[f64], tracker: &ConfusionTracker, y: usize) -> Result<f64> {
    soft_ce(p, tracker.row(y)?)
}

/// `β·hard_ce + (1 − β)·cpls_ce`
pub fn hybrid_loss(p: &[f64], y: usize, tracker: &ConfusionTracker, beta: f64) -> Result<f64> {
    let hard = hard_ce(p, y)?;
    let cpls = cpls_ce(p, tracker, y)?;
    Ok(convex_mix(hard, cpls, beta))
}

/// Target whose cross-entropy equals [`hybrid_loss`]: `β·one_hot(y) + (1 − β)·m[y]`.
pub fn hybrid_target(tracker: &ConfusionTracker, y: usize, beta: f64) -> Result<SoftTarget> {
    let row = tracker.row(y)?;
    let probs = row
        .iter()
        .enumerate()
        .map(|(c, &m)| convex_mix(if c == y { 1.0 } else { 0.0 }, m, beta))
        .collect();
    Ok(SoftTarget { probs })
}

/// Online label smoothing state: per-class sums of the model's own
/// predictions on correctly classified samples.
///
/// Targets are served from the previous epoch's accumulation; the current
/// epoch's sums become visible after [`end_epoch`](Self::end_epoch).
#[derive(Debug, Clone, PartialEq)]
pub struct OlsState {
    accumulating: Matrix,
    targets: Matrix,
}

impl OlsState {
    pub fn new(num_classes: usize) -> Self {
        Self {
            accumulating: Matrix::zeros(num_classes, num_classes),
            targets: Matrix::identity(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.targets.rows()
    }

    /// Adds `p` to the class-`y` sum when `argmax(p) == y`.
    pub fn update(&mut self, p: &[f64], y: usize) -> Result<()> {
        let c = self.num_classes();
        check_class(y, c)?;
        if p.len() != c {
            return Err(Error::Dimension(format!(
                "{}-class prediction for a {c}-class OLS state",
                p.len()
            )));
        }
        if argmax(p) == y {
            for (a, v) in self.accumulating.row_mut(y).iter_mut().zip(p) {
                *a += v;
            }
        }
        Ok(())
    }

    /// Publishes the sums gathered this epoch as next epoch's targets.
    pub fn end_epoch(&mut self) {
        let c = self.num_classes();
        let mut targets = Matrix::zeros(c, c);
        for y in 0..c {
            let row = self.accumulating.row(y);
            let total: f64 = row.iter().sum();
            let out = targets.row_mut(y);
            if total > 0.0 {
                for (o, v) in out.iter_mut().zip(row) {
                    *o = v / total;
                }
            } else {
                out[y] = 1.0;
            }
        }
        self.targets = targets;
        self.accumulating = Matrix::zeros(c, c);
    }

    pub fn target(&self, y: usize) -> Result<SoftTarget> {
        check_class(y, self.num_classes())?;
        Ok(SoftTarget {
            probs: self.targets.row(y).to_vec(),
        })
    }
}
