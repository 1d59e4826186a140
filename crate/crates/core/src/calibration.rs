//! Reliability bins and expected calibration error (ECE).
//!
//! A sample's confidence is its largest predicted probability. Bins split
//! `[0, 1]` into `n` equal intervals `((m-1)/n, m/n]`, the first one closed
//! at 0. ECE weights each bin's `|accuracy - confidence|` gap by the share of
//! all samples it holds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, Matrix};

pub const DEFAULT_NUM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// 0 for an empty bin.
    pub mean_confidence: f64,
    /// 0 for an empty bin.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub total_samples: usize,
}

fn bin_edge(m: usize, n: usize) -> f64 {
    m as f64 / n as f64
}

/// Bin of a confidence in `[0, 1]`, consistent with [`bin_edge`].
fn bin_index(confidence: f64, n: usize) -> usize {
    let mut m = ((confidence * n as f64).ceil() as usize)
        .saturating_sub(1)
        .min(n - 1);
    while m + 1 < n && confidence > bin_edge(m + 1, n) {
        m += 1;
    }
    while m > 0 && confidence <= bin_edge(m, n) {
        m -= 1;
    }
    m
}

fn check_inputs(probs: &Matrix, labels: &[usize], num_bins: usize) -> Result<()> {
    if num_bins == 0 {
        return Err(Error::Domain("need at least one bin".into()));
    }
    if probs.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::Domain("no samples".into()));
    }
    for (i, (row, &y)) in probs.iter_rows().zip(labels).enumerate() {
        if y >= row.len() {
            return Err(Error::Domain(format!("sample {i}: label {y} out of range")));
        }
        let total: f64 = row.iter().sum();
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "sample {i}: not a probability vector (sum {total})"
            )));
        }
    }
    Ok(())
}

pub fn reliability_bins(
    probs: &Matrix,
    labels: &[usize],
    num_bins: usize,
) -> Result<ReliabilityBins> {
    check_inputs(probs, labels, num_bins)?;
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for (row, &y) in probs.iter_rows().zip(labels) {
        let pred = argmax(row);
        let confidence = row[pred];
        let m = bin_index(confidence, num_bins);
        count[m] += 1;
        conf_sum[m] += confidence;
        if pred == y {
            correct[m] += 1;
        }
    }
    let bins = (0..num_bins)
        .map(|m| {
            let n = count[m];
            let (mean_confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[m] / n as f64, correct[m] as f64 / n as f64)
            };
            Bin {
                lo: bin_edge(m, num_bins),
                hi: bin_edge(m + 1, num_bins),
                count: n,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        total_samples: labels.len(),
    })
}

impl ReliabilityBins {
    pub fn ece(&self) -> f64 {
        let total = self.total_samples as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / total * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }

    /// CSV with header `bin_lo,bin_hi,count,mean_conf,accuracy`, 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,mean_conf,accuracy\n");
        for b in &self.bins {
            let _ = writeln!(
                out,
                "{:.6},{:.6},{},{:.6},{:.6}",
                b.lo, b.hi, b.count, b.mean_confidence, b.accuracy
            );
        }
        out
    }
}

/// Expected calibration error in `[0, 1]`.
pub fn ece(probs: &Matrix, labels: &[usize], num_bins: usize) -> Result<f64> {
    Ok(reliability_bins(probs, labels, num_bins)?.ece())
}
