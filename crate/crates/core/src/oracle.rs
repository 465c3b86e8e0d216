//! Exact posterior over supports for tiny instances: every support with
//! `|S| <= 2` is integrated against its Laplace slab by adaptive quadrature.

use rand_distr::Distribution;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::likelihood::{GammaFactors, Scratch};
use crate::model::{CovarianceParam, Dataset, RegressionFunction};
use crate::priors::{log_sum_exp, Priors};
use crate::quadrature::{integrate, Tolerance};
use crate::rng;

pub const MAX_SUPPORT: usize = 2;
pub const MAX_DIM: usize = 12;
pub const MAX_GRID: usize = 64;
/// Slab coordinates are integrated over `[-TAIL / lambda, TAIL / lambda]`.
pub const TAIL: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub enum GammaMode {
    Fixed(CovarianceParam),
    /// Scalar grid for `r = 1`, weighted by the inverse-Wishart prior.
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub tolerance: Tolerance,
    /// Largest support size enumerated (at most [`MAX_SUPPORT`]).
    pub max_support: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { tolerance: Tolerance { abs: 0.0, rel: 1e-10, max_intervals: 4000 }, max_support: MAX_SUPPORT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportEvidence {
    /// 0-based coordinates.
    pub support: Vec<usize>,
    /// `log( pi_p(s) / C(D, s) * int L g_S )`.
    pub log_evidence: f64,
    pub probability: f64,
    /// Relative quadrature error bound of the evidence.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub supports: Vec<SupportEvidence>,
    pub log_total_evidence: f64,
    pub max_rel_error: f64,
    /// `true` in grid mode, where `Gamma` is integrated on a finite grid.
    pub approximate: bool,
}

impl OracleResult {
    pub fn probability(&self, support: &[usize]) -> Option<f64> {
        self.supports.iter().find(|s| s.support == support).map(|s| s.probability)
    }

    /// Posterior mass of each support size.
    pub fn size_probabilities(&self) -> Vec<f64> {
        let max = self.supports.iter().map(|s| s.support.len()).max().unwrap_or(0);
        let mut out = vec![0.0; max + 1];
        for s in &self.supports {
            out[s.support.len()] += s.probability;
        }
        out
    }
}

/// All supports of size `<= max` in lexicographic order within each size.
pub fn enumerate_supports(dim: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    if max >= 1 {
        out.extend((0..dim).map(|j| vec![j]));
    }
    if max >= 2 {
        for a in 0..dim {
            for b in a + 1..dim {
                out.push(vec![a, b]);
            }
        }
    }
    out
}

/// Log-likelihood restricted to the coordinates of one support.
struct SupportLik<'a> {
    data: &'a Dataset,
    rf: &'a dyn RegressionFunction,
    factors: &'a GammaFactors,
    cols: Vec<Vec<f64>>,
    phis: Vec<f64>,
    scratch: Scratch,
}

impl<'a> SupportLik<'a> {
    fn new(data: &'a Dataset, rf: &'a dyn RegressionFunction, factors: &'a GammaFactors, support: &[usize]) -> Self {
        let (p, q) = (data.p, data.q);
        let cols = support
            .iter()
            .map(|&j| {
                let mut c = vec![0.0; data.n() * q];
                for (i, ind) in data.individuals.iter().enumerate() {
                    c[i * q + j / p] = ind.v[j % p];
                }
                c
            })
            .collect();
        Self { data, rf, factors, cols, phis: vec![0.0; data.n() * q], scratch: Scratch::default() }
    }

    fn eval(&mut self, b: &[f64]) -> f64 {
        self.phis.iter_mut().for_each(|x| *x = 0.0);
        for (col, bk) in self.cols.iter().zip(b) {
            for (x, c) in self.phis.iter_mut().zip(col) {
                *x += bk * c;
            }
        }
        self.factors.loglik_from_predictors(self.data, self.rf, &self.phis, &mut self.scratch, true)
    }
}

const GRID: usize = 401;
const INNER_GRID: usize = 41;
const GOLDEN_ITERS: usize = 80;
const WIDTH_MULTIPLES: [f64; 7] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

/// Maximizer of `f` on `[lo, hi]`: best of `points` grid values refined by
/// golden-section search between its neighbours.
fn maximize<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, points: usize) -> (f64, f64) {
    let step = (hi - lo) / (points - 1) as f64;
    let mut best = (lo, f(lo));
    for k in 1..points {
        let x = lo + k as f64 * step;
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    let (mut a, mut b) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        if b - a <= 1e-13 * (1.0 + best.0.abs()) {
            break;
        }
    }
    let x = 0.5 * (a + b);
    let v = f(x);
    if v >= best.1 {
        (x, v)
    } else {
        best
    }
}

/// Curvature-based width `1 / sqrt(-f'')` of a smooth log-density at `x`,
/// falling back to `fallback` when the curvature is not negative.
fn width<F: FnMut(f64) -> f64>(mut f: F, x: f64, fallback: f64) -> f64 {
    let h = 1e-4 * (1.0 + x.abs());
    let c = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
    if c < 0.0 && c.is_finite() {
        (1.0 / (-c).sqrt()).min(fallback)
    } else {
        fallback
    }
}

fn breakpoints(centre: f64, w: f64) -> Vec<f64> {
    let mut out = vec![0.0, centre];
    for k in WIDTH_MULTIPLES {
        out.push(centre - k * w);
        out.push(centre + k * w);
    }
    out
}

/// `log int L(beta_S) g_S(beta_S) dbeta_S` with its relative error bound.
fn log_slab_integral(lik: &mut SupportLik, lambda: f64, tol: Tolerance) -> Result<(f64, f64)> {
    let lo = -TAIL / lambda;
    let hi = TAIL / lambda;
    let log_g = |b: f64| (0.5 * lambda).ln() - lambda * b.abs();
    match lik.cols.len() {
        0 => Ok((lik.eval(&[]), 0.0)),
        1 => {
            let (mode, peak) = maximize(|b| lik.eval(&[b]) + log_g(b), lo, hi, GRID);
            let w = width(|b| lik.eval(&[b]), mode, 1.0 / lambda);
            let r = integrate(|b| (lik.eval(&[b]) + log_g(b) - peak).exp(), lo, hi, &breakpoints(mode, w), tol)?;
            Ok((peak + r.value.ln(), r.error / r.value))
        }
        2 => {
            let lik = std::cell::RefCell::new(lik);
            let cond = |b1: f64, b2: f64| lik.borrow_mut().eval(&[b1, b2]) + log_g(b2);
            let profile = |b1: f64| maximize(|b2| cond(b1, b2), lo, hi, INNER_GRID);
            let (m1, _) = maximize(|b1| profile(b1).1 + log_g(b1), lo, hi, INNER_GRID);
            let (m2, _) = profile(m1);
            let w1 = width(|b1| profile(b1).1, m1, 1.0 / lambda);
            let w2 = width(|b2| lik.borrow_mut().eval(&[m1, b2]), m2, 1.0 / lambda);
            let worst = std::cell::Cell::new(0.0f64);
            let failure = std::cell::RefCell::new(None);
            // log of the inner integral over b2 at fixed b1
            let inner = |b1: f64| -> f64 {
                let (c, peak) = maximize(|b2| cond(b1, b2), lo, hi, INNER_GRID);
                match integrate(|b2| (cond(b1, b2) - peak).exp(), lo, hi, &breakpoints(c, w2), tol) {
                    Ok(r) => {
                        worst.set(worst.get().max(r.error / r.value));
                        peak + r.value.ln()
                    }
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        f64::NAN
                    }
                }
            };
            let top = inner(m1) + log_g(m1);
            let outer = integrate(|b1| (inner(b1) + log_g(b1) - top).exp(), lo, hi, &breakpoints(m1, w1), tol);
            if let Some(e) = failure.into_inner() {
                return Err(e);
            }
            let r = outer?;
            Ok((top + r.value.ln(), r.error / r.value + worst.get()))
        }
        k => Err(Error::InvalidParameter(format!("oracle supports have at most {MAX_SUPPORT} coordinates, got {k}"))),
    }
}

fn check_limits(dataset: &Dataset, priors: &Priors, opts: &OracleOptions, mode: &GammaMode) -> Result<()> {
    if opts.max_support > MAX_SUPPORT {
        return Err(Error::InvalidParameter(format!("oracle support limit {} exceeds {MAX_SUPPORT}", opts.max_support)));
    }
    if dataset.dim() > MAX_DIM {
        return Err(Error::InvalidParameter(format!("oracle needs qp <= {MAX_DIM}, got {}", dataset.dim())));
    }
    if priors.dimension.max_dim != dataset.dim() {
        return Err(Error::Dimension("dimension prior does not match qp".into()));
    }
    match mode {
        GammaMode::Fixed(g) if g.r() != dataset.r => Err(Error::Dimension("fixed Gamma is not r x r".into())),
        GammaMode::Grid(_) if dataset.r != 1 => {
            Err(Error::InvalidParameter(format!("Gamma grid needs r = 1, got {}", dataset.r)))
        }
        GammaMode::Grid(v) if v.is_empty() || v.len() > MAX_GRID => {
            Err(Error::InvalidParameter(format!("Gamma grid must have 1..={MAX_GRID} points, got {}", v.len())))
        }
        GammaMode::Grid(v) if v.iter().any(|g| !(*g > 0.0 && g.is_finite())) => {
            Err(Error::InvalidParameter("Gamma grid values must be positive".into()))
        }
        _ => Ok(()),
    }
}

/// Posterior probability of every support with `|S| <= opts.max_support`,
/// i.e. the posterior restricted to those supports.
pub fn enumerate_posterior(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    priors: &Priors,
    mode: &GammaMode,
    opts: &OracleOptions,
) -> Result<OracleResult> {
    check_limits(dataset, priors, opts, mode)?;
    let (gammas, log_weights): (Vec<CovarianceParam>, Vec<f64>) = match mode {
        GammaMode::Fixed(g) => (vec![g.clone()], vec![0.0]),
        GammaMode::Grid(values) => {
            let gammas: Vec<CovarianceParam> =
                values.iter().map(|g| CovarianceParam::scaled_identity(1, *g)).collect::<Result<_>>()?;
            let lw: Vec<f64> = gammas.iter().map(|g| priors.iw.log_density(g)).collect::<Result<_>>()?;
            let norm = log_sum_exp(&lw);
            (gammas, lw.iter().map(|w| w - norm).collect())
        }
    };
    let factors: Vec<GammaFactors> = gammas.iter().map(|g| GammaFactors::new(dataset, g)).collect::<Result<_>>()?;
    let d = dataset.dim();
    let lambda = priors.slab.lambda;
    let supports = enumerate_supports(d, opts.max_support.min(d));
    let evidences: Vec<(f64, f64)> = supports
        .par_iter()
        .map(|s| {
            let log_prior = priors.dimension.log_pmf(s.len()) - ln_binomial(d as u64, s.len() as u64);
            let mut terms = Vec::with_capacity(factors.len());
            let mut err = 0.0f64;
            for (f, lw) in factors.iter().zip(&log_weights) {
                let mut lik = SupportLik::new(dataset, rf, f, s);
                let (v, e) = log_slab_integral(&mut lik, lambda, opts.tolerance)?;
                terms.push(lw + v);
                err = err.max(e);
            }
            Ok((log_prior + log_sum_exp(&terms), err))
        })
        .collect::<Result<_>>()?;
    let logs: Vec<f64> = evidences.iter().map(|e| e.0).collect();
    let total = log_sum_exp(&logs);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total log-evidence {total}")));
    }
    let supports: Vec<SupportEvidence> = supports
        .into_iter()
        .zip(&evidences)
        .map(|(support, (le, err))| SupportEvidence {
            support,
            log_evidence: *le,
            probability: (le - total).exp(),
            rel_error: *err,
        })
        .collect();
    let max_rel_error = supports.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(OracleResult { supports, log_total_evidence: total, max_rel_error, approximate: matches!(mode, GammaMode::Grid(_)) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEvidence {
    /// Log of the Monte-Carlo mean of `L(beta_S)` under the slab.
    pub log_mean: f64,
    /// Standard error of the mean divided by the mean.
    pub rel_se: f64,
}

const MC_CHUNKS: u64 = 16;

/// Importance-sampling estimate of `int L g_S` with the Laplace slab as
/// proposal, for a fixed `Gamma`. Chunk `c` draws from stream `c` of `seed`.
pub fn mc_slab_integral(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    gamma: &CovarianceParam,
    lambda: f64,
    support: &[usize],
    draws: usize,
    seed: u64,
) -> Result<McEvidence> {
    if draws < 2 {
        return Err(Error::InvalidParameter("at least two draws are needed".into()));
    }
    let factors = GammaFactors::new(dataset, gamma)?;
    let slab = rand_distr::Exp::new(lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let per = draws.div_ceil(MC_CHUNKS as usize);
    let parts: Vec<Vec<f64>> = (0..MC_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, c);
            let start = c as usize * per;
            let count = per.min(draws.saturating_sub(start));
            let mut lik = SupportLik::new(dataset, rf, &factors, support);
            let mut b = vec![0.0; support.len()];
            (0..count)
                .map(|_| {
                    for x in b.iter_mut() {
                        let mag: f64 = slab.sample(&mut rng);
                        *x = if rand::Rng::random::<bool>(&mut rng) { mag } else { -mag };
                    }
                    lik.eval(&b)
                })
                .collect()
        })
        .collect();
    let all: Vec<f64> = parts.into_iter().flatten().collect();
    let top = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::NonFinite("Monte-Carlo log-likelihood".into()));
    }
    let n = all.len() as f64;
    let w: Vec<f64> = all.iter().map(|l| (l - top).exp()).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(McEvidence { log_mean: top + mean.ln(), rel_se: (var / n).sqrt() / mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Individual, Linear, SparseCoefficients};
    use crate::priors::{DimensionPrior, InverseWishartPrior, SlabPrior};
    use nalgebra::DMatrix;
    use rand_distr::StandardNormal;

    fn linear_data(n: usize, p: usize, beta: &[(usize, f64)], seed: u64, exchangeable: bool) -> Dataset {
        noisy_linear_data(n, p, beta, seed, exchangeable, 0.5)
    }

    fn noisy_linear_data(n: usize, p: usize, beta: &[(usize, f64)], seed: u64, exchangeable: bool, noise: f64) -> Dataset {
        let mut rng = rng::seeded(seed);
        let inds = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
                if exchangeable {
                    v[1] = v[0];
                }
                Individual { id: format!("i{i}"), times: vec![0.0, 1.0], y: vec![0.0; 2], z: DMatrix::from_element(2, 1, 1.0), v }
            })
            .collect();
        let sk = Dataset::new(inds, p, 1, 1, noise).unwrap();
        let (s, v): (Vec<usize>, Vec<f64>) = beta.iter().copied().unzip();
        let b0 = SparseCoefficients::new(p, s, v).unwrap();
        crate::model::simulate(&sk, &Linear { q: 1 }, &b0, &CovarianceParam::scaled_identity(1, noise).unwrap(), seed).unwrap()
    }

    fn priors(d: usize) -> Priors {
        Priors { dimension: DimensionPrior::default_for(d, d), slab: SlabPrior::new(1.0).unwrap(), iw: InverseWishartPrior::default_for(1) }
    }

    fn fixed() -> GammaMode {
        GammaMode::Fixed(CovarianceParam::scaled_identity(1, 0.5).unwrap())
    }

    #[test]
    fn probabilities_normalized() {
        let data = linear_data(15, 4, &[(1, 0.8)], 2, false);
        let res = enumerate_posterior(&data, &Linear { q: 1 }, &priors(4), &fixed(), &OracleOptions::default()).unwrap();
        assert_eq!(res.supports.len(), 1 + 4 + 6);
        let total: f64 = res.supports.iter().map(|s| s.probability).sum();
        assert!((total - 1.0).abs() < 1e-8);
        assert!(res.max_rel_error < 1e-8);
    }

    #[test]
    fn exchangeable_covariates_share_mass() {
        let data = linear_data(20, 2, &[], 3, true);
        let res = enumerate_posterior(&data, &Linear { q: 1 }, &priors(2), &fixed(), &OracleOptions::default()).unwrap();
        let (a, b) = (res.probability(&[0]).unwrap(), res.probability(&[1]).unwrap());
        assert!((a - b).abs() < 1e-6, "{a} {b}");
    }

    #[test]
    fn strong_signal_selected_and_confirmed_by_monte_carlo() {
        let data = noisy_linear_data(50, 2, &[(0, 1.0)], 4, false, 0.02);
        let rf = Linear { q: 1 };
        let pr = priors(2);
        let gamma = CovarianceParam::scaled_identity(1, 0.02).unwrap();
        let mode = GammaMode::Fixed(gamma.clone());
        let res = enumerate_posterior(&data, &rf, &pr, &mode, &OracleOptions::default()).unwrap();
        assert!(res.probability(&[0]).unwrap() > 0.9, "{:?}", res.supports);
        for s in &res.supports {
            let k = s.support.len();
            let quad = s.log_evidence - pr.dimension.log_pmf(k) + ln_binomial(2, k as u64);
            let mc = mc_slab_integral(&data, &rf, &gamma, 1.0, &s.support, 1_000_000, 9).unwrap();
            let ratio = (quad - mc.log_mean).exp();
            assert!((ratio - 1.0).abs() <= 3.0 * mc.rel_se + 1e-9, "{:?}: ratio {ratio} se {}", s.support, mc.rel_se);
        }
    }

    #[test]
    fn tighter_tolerance_is_stable() {
        let data = linear_data(12, 3, &[(2, 0.6)], 5, false);
        let rf = Linear { q: 1 };
        let a = enumerate_posterior(&data, &rf, &priors(3), &fixed(), &OracleOptions::default()).unwrap();
        let mut opts = OracleOptions::default();
        opts.tolerance.rel /= 10.0;
        let b = enumerate_posterior(&data, &rf, &priors(3), &fixed(), &opts).unwrap();
        for (x, y) in a.supports.iter().zip(&b.supports) {
            assert!((x.probability - y.probability).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_mode_and_limits() {
        let data = linear_data(10, 2, &[(0, 1.0)], 6, false);
        let rf = Linear { q: 1 };
        let grid: Vec<f64> = (1..=16).map(|k| 0.1 * k as f64).collect();
        let res = enumerate_posterior(&data, &rf, &priors(2), &GammaMode::Grid(grid), &OracleOptions::default()).unwrap();
        assert!(res.approximate);
        assert!((res.supports.iter().map(|s| s.probability).sum::<f64>() - 1.0).abs() < 1e-8);
        let big = linear_data(3, 13, &[], 1, false);
        assert!(enumerate_posterior(&big, &rf, &priors(13), &fixed(), &OracleOptions::default()).is_err());
        let opts = OracleOptions { max_support: 3, ..Default::default() };
        assert!(enumerate_posterior(&data, &rf, &priors(2), &fixed(), &opts).is_err());
        assert!(enumerate_posterior(&data, &rf, &priors(2), &GammaMode::Grid(vec![]), &OracleOptions::default()).is_err());
    }

    #[test]
    fn single_coordinate_matches_closed_form() {
        // one individual, one observation, Gamma + sigma2 = 1, y = 0, v = 1:
        // int N(0; b, 1) (1/2) e^{-|b|} db = e^{1/2} Phi(-1)
        let ind = Individual { id: "a".into(), times: vec![0.0], y: vec![0.0], z: DMatrix::from_element(1, 1, 1.0), v: vec![1.0] };
        let data = Dataset::new(vec![ind], 1, 1, 1, 0.5).unwrap();
        let g = CovarianceParam::scaled_identity(1, 0.5).unwrap();
        let f = GammaFactors::new(&data, &g).unwrap();
        let mut lik = SupportLik::new(&data, &Linear { q: 1 }, &f, &[0]);
        let (v, _) = log_slab_integral(&mut lik, 1.0, OracleOptions::default().tolerance).unwrap();
        let phi_m1 = 0.158_655_253_931_457_05_f64;
        assert!((v - (0.5 + phi_m1.ln())).abs() < 1e-10, "{v}");
    }
}
