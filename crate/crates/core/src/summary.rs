//! Posterior summaries of a chain: support-size histogram, distance quantiles
//! against a known truth and exceedance frequencies.

use serde::Serialize;

use crate::divergences;
use crate::error::{Error, Result};
use crate::likelihood::fill_predictors;
use crate::model::{CovarianceParam, Dataset, RegressionFunction, SparseCoefficients};
use crate::sampler::{ChainRecord, PosteriorChain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    DnGamma,
    FrobGamma,
    Pn,
    Xbeta,
    L2Beta,
    L1Beta,
}

pub const METRICS: [Metric; 6] = [Metric::DnGamma, Metric::FrobGamma, Metric::Pn, Metric::Xbeta, Metric::L2Beta, Metric::L1Beta];

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::DnGamma => "dn_gamma",
            Metric::FrobGamma => "frob_gamma",
            Metric::Pn => "P_n",
            Metric::Xbeta => "Xbeta",
            Metric::L2Beta => "l2_beta",
            Metric::L1Beta => "l1_beta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        METRICS.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn is_beta_metric(self) -> bool {
        matches!(self, Metric::Xbeta | Metric::L2Beta | Metric::L1Beta)
    }
}

pub const QUANTILE_LEVELS: [f64; 3] = [0.5, 0.9, 0.95];

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * level.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantiles(values: &[f64], levels: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    levels.iter().map(|l| quantile_sorted(&v, *l)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    quantiles(values, &[0.5])[0]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: Metric,
    /// Posterior quantiles at [`QUANTILE_LEVELS`].
    pub quantiles: [f64; 3],
    /// `(threshold, posterior frequency of metric > threshold)`.
    pub exceedance: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub draws: usize,
    /// Posterior frequency of `|S| = k`.
    pub size_histogram: Vec<f64>,
    pub size_median: f64,
    pub logpost_quantiles: [f64; 3],
    /// Empty when the truth is unknown.
    pub metrics: Vec<MetricSummary>,
}

impl PosteriorSummary {
    /// Posterior probability of `|S| > bound`.
    pub fn size_exceedance(&self, bound: f64) -> f64 {
        self.size_histogram.iter().enumerate().filter(|(k, _)| *k as f64 > bound).map(|(_, w)| w).sum()
    }

    pub fn metric(&self, m: Metric) -> Option<&MetricSummary> {
        self.metrics.iter().find(|x| x.metric == m)
    }
}

/// Distances of one draw from the truth, in [`METRICS`] order.
pub fn draw_metrics(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    beta: &SparseCoefficients,
    gamma: &CovarianceParam,
    beta0: &SparseCoefficients,
    gamma0: &CovarianceParam,
    truth_predictors: &[f64],
    buf: &mut Vec<f64>,
) -> Result<[f64; 6]> {
    let dn = divergences::dn(dataset, gamma, gamma0)?;
    let frob = (gamma.matrix() - gamma0.matrix()).norm();
    let pn = divergences::prediction_distance(dataset, rf, beta, beta0)?;
    fill_predictors(dataset, beta, buf);
    let xb = buf.iter().zip(truth_predictors).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let diff: Vec<f64> = beta.to_dense().iter().zip(beta0.to_dense()).map(|(a, b)| a - b).collect();
    let l2 = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let l1 = diff.iter().map(|d| d.abs()).sum();
    Ok([dn, frob, pn, xb, l2, l1])
}

fn records_metrics(
    records: &[ChainRecord],
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    beta0: &SparseCoefficients,
    gamma0: &CovarianceParam,
    dim: usize,
) -> Result<Vec<[f64; 6]>> {
    let mut truth = Vec::new();
    fill_predictors(dataset, beta0, &mut truth);
    let mut buf = Vec::new();
    records
        .iter()
        .map(|rec| {
            let gamma = rec.gamma(dataset.r)?;
            draw_metrics(dataset, rf, &rec.beta(dim), &gamma, beta0, gamma0, &truth, &mut buf)
        })
        .collect()
}

/// Summaries of the post-burn-in records. `thresholds` lists, per metric,
/// the levels whose posterior exceedance frequency is reported.
pub fn posterior_summaries(
    chain: &PosteriorChain,
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    truth: Option<(&SparseCoefficients, &CovarianceParam)>,
    thresholds: &[(Metric, f64)],
) -> Result<PosteriorSummary> {
    let records = &chain.records;
    if records.is_empty() {
        return Err(Error::Insufficient("chain has no post-burn-in records".into()));
    }
    let draws = records.len();
    let max_s = records.iter().map(|r| r.support.len()).max().unwrap_or(0).max(chain.cap);
    let mut size_histogram = vec![0.0; max_s + 1];
    for rec in records {
        size_histogram[rec.support.len()] += 1.0;
    }
    size_histogram.iter_mut().for_each(|h| *h /= draws as f64);
    let sizes: Vec<f64> = records.iter().map(|r| r.support.len() as f64).collect();
    let lp: Vec<f64> = records.iter().map(|r| r.logpost).collect();
    let lpq = quantiles(&lp, &QUANTILE_LEVELS);
    let mut metrics = Vec::new();
    if let Some((beta0, gamma0)) = truth {
        if beta0.dim() != chain.dim || gamma0.r() != chain.r {
            return Err(Error::Dimension("truth does not match the chain dimensions".into()));
        }
        let values = records_metrics(records, dataset, rf, beta0, gamma0, chain.dim)?;
        for (k, m) in METRICS.into_iter().enumerate() {
            let column: Vec<f64> = values.iter().map(|v| v[k]).collect();
            let q = quantiles(&column, &QUANTILE_LEVELS);
            let exceedance = thresholds
                .iter()
                .filter(|(tm, _)| *tm == m)
                .map(|(_, t)| (*t, column.iter().filter(|x| **x > *t).count() as f64 / draws as f64))
                .collect();
            metrics.push(MetricSummary { metric: m, quantiles: [q[0], q[1], q[2]], exceedance });
        }
    }
    Ok(PosteriorSummary {
        draws,
        size_histogram,
        size_median: median(&sizes),
        logpost_quantiles: [lpq[0], lpq[1], lpq[2]],
        metrics,
    })
}
