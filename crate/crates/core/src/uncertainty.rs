//! Predictive entropy and likelihood ratios for in- vs out-of-distribution data.

use crate::error::{Error, Result};
use crate::network::{mean_of, Ensemble, Example};
use crate::par;
use crate::tensor::Tensor;

/// `−Σ_c p_c ln p_c` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.max(0.0)
}

/// Uncertainty statistics of the ensemble at one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointUncertainty {
    /// Mean over samples of the per-network softmax entropy.
    pub mean_sample_entropy: f64,
    /// Entropy of the averaged predictive.
    pub entropy_of_mean: f64,
    /// Largest entry of the averaged predictive.
    pub max_prob: f64,
}

pub fn point_uncertainty(ensemble: &Ensemble, x: &Tensor) -> Result<PointUncertainty> {
    let probs = ensemble.member_probabilities(x)?;
    let mean_sample_entropy = probs.iter().map(|p| entropy(p.data())).sum::<f64>() / probs.len() as f64;
    let mean = mean_of(&probs);
    Ok(PointUncertainty {
        mean_sample_entropy,
        entropy_of_mean: entropy(mean.data()),
        max_prob: mean.max(),
    })
}

/// `E_w[−Σ_c σ_c ln σ_c]` over the ensemble's weight samples.
pub fn predictive_entropy(ensemble: &Ensemble, x: &Tensor) -> Result<f64> {
    Ok(point_uncertainty(ensemble, x)?.mean_sample_entropy)
}

pub fn dataset_uncertainty(ensemble: &Ensemble, data: &[&Example]) -> Result<Vec<PointUncertainty>> {
    par::map(data, |e| point_uncertainty(ensemble, &e.input)).into_iter().collect()
}

fn mean_max_prob(stats: &[PointUncertainty]) -> f64 {
    stats.iter().map(|s| s.max_prob).sum::<f64>() / stats.len() as f64
}

/// Mean max-probability on `out_set` divided by that on `in_set`.
pub fn likelihood_ratio(ensemble: &Ensemble, in_set: &[&Example], out_set: &[&Example]) -> Result<f64> {
    if in_set.is_empty() || out_set.is_empty() {
        return Err(Error::usage("likelihood ratio needs two non-empty sets"));
    }
    let a = dataset_uncertainty(ensemble, in_set)?;
    let b = dataset_uncertainty(ensemble, out_set)?;
    Ok(likelihood_ratio_from(&a, &b))
}

pub fn likelihood_ratio_from(in_stats: &[PointUncertainty], out_stats: &[PointUncertainty]) -> f64 {
    mean_max_prob(out_stats) / mean_max_prob(in_stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// Bin edges, `bins + 1` values from 0 to `ln C`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Counts `values` into `bins` equal bins over `[0, max]`; the top edge is inclusive.
    pub fn new(values: &[f64], bins: usize, max: f64) -> Result<Self> {
        if bins < 2 {
            return Err(Error::usage(format!("histogram needs at least 2 bins, got {bins}")));
        }
        let width = max / bins as f64;
        let edges = (0..=bins).map(|k| k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = ((v / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Mean of the data as seen through bin midpoints.
    pub fn binned_mean(&self) -> f64 {
        let total = self.total() as f64;
        self.counts
            .iter()
            .enumerate()
            .map(|(k, &c)| 0.5 * (self.edges[k] + self.edges[k + 1]) * c as f64)
            .sum::<f64>()
            / total
    }
}

/// Histogram of the mean-sample entropy over `[0, ln C]`.
pub fn entropy_histogram(ensemble: &Ensemble, data: &[&Example], bins: usize) -> Result<Histogram> {
    let stats = dataset_uncertainty(ensemble, data)?;
    let values: Vec<f64> = stats.iter().map(|s| s.mean_sample_entropy).collect();
    Histogram::new(&values, bins, (ensemble.arch().class_count() as f64).ln())
}
