//! Design quantities and finite-sample surrogates for the modelling
//! assumptions: `||X||_*`, compatibility numbers, Lipschitz estimates, the
//! `lambda` bracket and the stability-estimate probe.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use statrs::function::factorial::binomial;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, CovarianceParam, Dataset, RegressionFunction, SparseCoefficients};
use crate::priors::DimensionPrior;
use crate::rng;

/// `||A||_* = max_j ||A_{.j}||_2`.
pub fn column_norm_max(x: &DMatrix<f64>) -> f64 {
    x.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompatOptions {
    /// Largest number of supports enumerated in exact mode.
    pub budget: u64,
    /// When set, fall back to this many random supports once the budget is exceeded.
    pub sampled: Option<usize>,
    /// Restarts of the inner simplex search for `phi1`.
    pub starts: usize,
    pub seed: u64,
}

impl Default for CompatOptions {
    fn default() -> Self {
        Self { budget: 200_000, sampled: None, starts: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompatValue {
    pub value: f64,
    /// `false` when only a random subset of supports was examined, in which
    /// case `value` is an upper bound.
    pub exact: bool,
    pub supports: usize,
}

/// Supports to examine: every support of size `<= s` in exact mode, nested
/// prefixes of random size-`s` supports in sampled mode.
fn supports_for(d: usize, s: usize, opts: &CompatOptions) -> Result<(Vec<Vec<usize>>, bool)> {
    if s == 0 || s > d {
        return Err(Error::InvalidParameter(format!("support size s = {s} must lie in 1..={d}")));
    }
    let total: f64 = (1..=s).map(|t| binomial(d as u64, t as u64)).sum();
    if total <= opts.budget as f64 {
        let mut out = Vec::with_capacity(total as usize);
        for t in 1..=s {
            let mut comb: Vec<usize> = (0..t).collect();
            loop {
                out.push(comb.clone());
                // next combination in lexicographic order
                let mut i = t;
                while i > 0 && comb[i - 1] == d - t + i - 1 {
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
                comb[i - 1] += 1;
                for k in i..t {
                    comb[k] = comb[k - 1] + 1;
                }
            }
        }
        return Ok((out, true));
    }
    let Some(k) = opts.sampled else {
        return Err(Error::Budget(format!(
            "{total:.0} supports of size <= {s} among {d} columns exceed the budget of {}",
            opts.budget
        )));
    };
    let mut rng = rng::stream(opts.seed, 0x5u64);
    let mut idx: Vec<usize> = (0..d).collect();
    let mut out = Vec::with_capacity(k * s);
    for _ in 0..k {
        let (chosen, _) = idx.partial_shuffle(&mut rng, s);
        let chain = chosen.to_vec();
        for t in 1..=s {
            let mut sub = chain[..t].to_vec();
            sub.sort_unstable();
            out.push(sub);
        }
    }
    Ok((out, false))
}

/// Smallest scaled singular value of dimension `s`:
/// `min_{|T| <= s} sigma_min(X_T) / ||X||_*`.
pub fn phi2(x: &DMatrix<f64>, s: usize, opts: &CompatOptions) -> Result<CompatValue> {
    let norm = column_norm_max(x);
    if norm == 0.0 {
        return Err(Error::InvalidParameter("design has only zero columns".into()));
    }
    let (supports, exact) = supports_for(x.ncols(), s, opts)?;
    let value = supports
        .par_iter()
        .map(|t| linalg::smallest_singular_value(&x.select_columns(t)))
        .reduce(|| f64::INFINITY, f64::min)
        / norm;
    Ok(CompatValue { value, exact, supports: supports.len() })
}

/// Uniform compatibility number of dimension `s`:
/// `min_{|T| <= s} sqrt(|T|) min_{supp b = T} ||X b||_2 / ||b||_1 / ||X||_*`.
///
/// For a fixed support and sign pattern the inner problem is a convex
/// quadratic over the simplex; it is solved by exponentiated-gradient descent
/// from `opts.starts` seeded starts spread over the sign patterns. Singletons
/// use the closed form `||x_j||_2`.
pub fn phi1(x: &DMatrix<f64>, s: usize, opts: &CompatOptions) -> Result<CompatValue> {
    let norm = column_norm_max(x);
    if norm == 0.0 {
        return Err(Error::InvalidParameter("design has only zero columns".into()));
    }
    let (supports, exact) = supports_for(x.ncols(), s, opts)?;
    let value = supports
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            if t.len() == 1 {
                return x.column(t[0]).norm();
            }
            let xt = x.select_columns(t);
            let gram = xt.transpose() * &xt;
            let mut rng = rng::stream(opts.seed, k as u64 + 1);
            (t.len() as f64).sqrt() * min_l1_ratio(&gram, opts.starts.max(1), &mut rng)
        })
        .reduce(|| f64::INFINITY, f64::min)
        / norm;
    Ok(CompatValue { value, exact, supports: supports.len() })
}

// min over ||b||_1 = 1 of sqrt(b' G b), searched over sign patterns.
fn min_l1_ratio(gram: &DMatrix<f64>, starts: usize, rng: &mut rng::Rng) -> f64 {
    let t = gram.nrows();
    let patterns = if t - 1 >= 63 { u64::MAX } else { 1u64 << (t - 1) };
    let mut best = f64::INFINITY;
    let mut h = gram.clone();
    let mut w = vec![0.0; t];
    for start in 0..starts {
        let pattern = if patterns <= starts as u64 {
            start as u64 % patterns
        } else {
            rng.random::<u64>() % patterns
        };
        // the first coordinate's sign is fixed; b and -b give the same value
        let sign = |i: usize| if i > 0 && (pattern >> (i - 1)) & 1 == 1 { -1.0 } else { 1.0 };
        for i in 0..t {
            for j in 0..t {
                h[(i, j)] = sign(i) * sign(j) * gram[(i, j)];
            }
        }
        if (start as u64) < patterns {
            w.iter_mut().for_each(|v| *v = 1.0 / t as f64);
        } else {
            let draws: Vec<f64> = (0..t).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            w.iter_mut().zip(draws).for_each(|(v, d)| *v = d / total);
        }
        best = best.min(simplex_quadratic_min(&h, &mut w).max(0.0).sqrt());
    }
    best
}

// Exponentiated gradient for min w'Hw over the simplex, stopped on the
// Frank–Wolfe duality gap.
fn simplex_quadratic_min(h: &DMatrix<f64>, w: &mut [f64]) -> f64 {
    let t = w.len();
    let scale = h.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let step = 1.0 / (2.0 * scale);
    let mut grad = vec![0.0; t];
    let mut best = f64::INFINITY;
    for _ in 0..5000 {
        for i in 0..t {
            grad[i] = 2.0 * (0..t).map(|j| h[(i, j)] * w[j]).sum::<f64>();
        }
        let f = 0.5 * grad.iter().zip(w.iter()).map(|(g, x)| g * x).sum::<f64>();
        best = best.min(f);
        let gmin = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let gap = 2.0 * f - gmin;
        if gap <= 1e-13 * scale {
            break;
        }
        let mut total = 0.0;
        for i in 0..t {
            w[i] *= (-step * (grad[i] - gmin)).exp();
            total += w[i];
        }
        w.iter_mut().for_each(|v| *v /= total);
    }
    best
}

/// Grid estimate of `K = sup |grad_phi f(phi, t)|_2` over `phi` in
/// `[-50, 50]^q` and `t` in `[t_min, t_max]` together with `extra_times`.
pub fn estimate_lipschitz(rf: &dyn RegressionFunction, t_min: f64, t_max: f64, extra_times: &[f64]) -> f64 {
    let q = rf.q();
    let per_dim: usize = match q {
        1 => 2001,
        2 => 201,
        _ => 41,
    };
    let axis: Vec<f64> = (0..per_dim).map(|k| -50.0 + 100.0 * k as f64 / (per_dim - 1) as f64).collect();
    let mut times: Vec<f64> = (0..=100).map(|k| t_min + (t_max - t_min) * k as f64 / 100.0).collect();
    times.extend_from_slice(extra_times);
    times.sort_by(f64::total_cmp);
    times.dedup();
    let total = (per_dim as usize).pow(q as u32);
    (0..total)
        .into_par_iter()
        .map(|code| {
            let mut phi = vec![0.0; q];
            let mut c = code;
            for v in phi.iter_mut() {
                *v = axis[c % per_dim];
                c /= per_dim;
            }
            let mut g = vec![0.0; q];
            times
                .iter()
                .map(|&t| {
                    rf.grad_phi(&phi, t, &mut g);
                    g.iter().map(|x| x * x).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

fn time_range(dataset: &Dataset) -> (f64, f64, Vec<f64>) {
    let mut all: Vec<f64> = dataset.individuals.iter().flat_map(|i| i.times.iter().copied()).collect();
    if all.is_empty() {
        return (0.0, 1.0, all);
    }
    all.sort_by(f64::total_cmp);
    all.dedup();
    (all[0], all[all.len() - 1], all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSummary {
    /// Stacked design `X` (`nq x qp`).
    pub x: DMatrix<f64>,
    pub x_star: f64,
    /// `rho_min^{1/2}(Z_i' Z_i)` for individuals with `m_i >= r`, `None` otherwise.
    pub rho_z_min: Vec<Option<f64>>,
    pub z_sp: Vec<f64>,
    pub count_m_ge_r: usize,
    pub k: f64,
    /// `K' = sqrt(K^2 M_obs)` with `M_obs = max_i m_i`.
    pub k_prime: f64,
    pub m_obs: usize,
}

pub fn design_summary(dataset: &Dataset, rf: &dyn RegressionFunction) -> DesignSummary {
    let x = dataset.stacked_design();
    let x_star = column_norm_max(&x);
    let r = dataset.r;
    let rho_z_min = dataset
        .individuals
        .iter()
        .map(|ind| {
            (ind.m() >= r).then(|| linalg::smallest_singular_value(&ind.z))
        })
        .collect();
    let z_sp = dataset.individuals.iter().map(|ind| linalg::spectral_norm(&ind.z)).collect();
    let count_m_ge_r = dataset.individuals.iter().filter(|i| i.m() >= r).count();
    let (lo, hi, times) = time_range(dataset);
    let k = estimate_lipschitz(rf, lo, hi, &times);
    let m_obs = dataset.max_m();
    DesignSummary { x, x_star, rho_z_min, z_sp, count_m_ge_r, k, k_prime: (k * k * m_obs as f64).sqrt(), m_obs }
}

/// `(||X||_* K' / (L1 p^L2), L3 ||X||_* K' / sqrt(n))`.
pub fn lambda_bracket(x_star: f64, k_prime: f64, p: usize, n: usize, l: [f64; 3]) -> (f64, f64) {
    let base = x_star * k_prime;
    (base / (l[0] * (p as f64).powf(l[1])), l[2] * base / (n.max(1) as f64).sqrt())
}

/// Upper end of the `lambda` bracket.
pub fn auto_lambda(summary: &DesignSummary, p: usize, n: usize, l: [f64; 3]) -> f64 {
    lambda_bracket(summary.x_star, summary.k_prime, p, n, l).1
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityOptions {
    pub deltas: Vec<f64>,
    /// Candidate directions per `delta`; half random, half hill-climbing.
    pub samples: usize,
    /// Bound on `||beta||_inf`.
    pub box_bound: Option<f64>,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self { deltas: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6], samples: 200, box_bound: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityEstimate {
    /// `(delta, estimated sup)` for every delta with a feasible direction.
    pub points: Vec<(f64, f64)>,
    pub omitted: Vec<f64>,
    pub l: f64,
    pub eta: f64,
    pub r2: f64,
}

struct Probe<'a> {
    dataset: &'a Dataset,
    rf: &'a dyn RegressionFunction,
    beta0: Vec<f64>,
    base_phi: Vec<f64>,
    base_f: Vec<Vec<f64>>,
}

impl<'a> Probe<'a> {
    fn new(dataset: &'a Dataset, rf: &'a dyn RegressionFunction, beta0: &SparseCoefficients) -> Self {
        let q = dataset.q;
        let mut base_phi = vec![0.0; dataset.n() * q];
        for (i, ind) in dataset.individuals.iter().enumerate() {
            model::linear_predictor(&ind.v, q, beta0, &mut base_phi[i * q..(i + 1) * q]);
        }
        let base_f = dataset
            .individuals
            .iter()
            .enumerate()
            .map(|(i, ind)| model::f_vec(rf, &base_phi[i * q..(i + 1) * q], &ind.times))
            .collect();
        Self { dataset, rf, beta0: beta0.to_dense(), base_phi, base_f }
    }

    fn direction_predictors(&self, u: &[f64]) -> Vec<f64> {
        let (q, p) = (self.dataset.q, self.dataset.p);
        let mut a = vec![0.0; self.dataset.n() * q];
        for (i, ind) in self.dataset.individuals.iter().enumerate() {
            for (l, &ul) in u.iter().enumerate() {
                a[i * q + l / p] += ind.v[l % p] * ul;
            }
        }
        a
    }

    // mean squared f-gap at beta0 + t u
    fn gap(&self, a: &[f64], t: f64) -> f64 {
        let q = self.dataset.q;
        let mut phi = vec![0.0; q];
        let mut total = 0.0;
        for (i, ind) in self.dataset.individuals.iter().enumerate() {
            for k in 0..q {
                phi[k] = self.base_phi[i * q + k] + t * a[i * q + k];
            }
            for (j, &tj) in ind.times.iter().enumerate() {
                total += (self.rf.eval(&phi, tj) - self.base_f[i][j]).powi(2);
            }
        }
        total / self.dataset.n() as f64
    }

    fn box_limit(&self, u: &[f64], bound: Option<f64>) -> f64 {
        let Some(b) = bound else { return f64::INFINITY };
        u.iter()
            .zip(&self.beta0)
            .filter(|(ul, _)| **ul != 0.0)
            .map(|(&ul, &b0)| (b - b0 * ul.signum()) / ul.abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// `(1/n) ||X (beta - beta0)||^2` at the largest feasible step along `u`.
    fn value(&self, u: &[f64], delta: f64, bound: Option<f64>) -> Option<f64> {
        let a = self.direction_predictors(u);
        let spread = a.iter().map(|x| x * x).sum::<f64>() / self.dataset.n() as f64;
        if spread == 0.0 {
            return Some(0.0);
        }
        let t_box = self.box_limit(u, bound);
        if t_box <= 0.0 {
            return None;
        }
        const T_CAP: f64 = 1e6;
        let limit = t_box.min(T_CAP);
        let (mut lo, mut hi);
        if self.gap(&a, limit) <= delta {
            lo = limit;
        } else {
            lo = 0.0;
            hi = (delta / spread).sqrt().min(limit);
            // expand until the gap exceeds delta
            while self.gap(&a, hi) <= delta {
                lo = hi;
                hi = (2.0 * hi).min(limit);
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if self.gap(&a, mid) <= delta {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        if lo <= 0.0 {
            return None;
        }
        Some(lo * lo * spread)
    }
}

/// Estimates `sup {(1/n)||X(beta - beta0)||^2 : mean f-gap <= delta}` for each
/// delta and fits `log sup = log L + eta log delta` by least squares. Every
/// delta reuses the same random directions.
pub fn stability_probe(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    beta0: &SparseCoefficients,
    opts: &StabilityOptions,
    seed: u64,
) -> Result<StabilityEstimate> {
    if beta0.dim() != dataset.dim() || rf.q() != dataset.q {
        return Err(Error::Dimension("beta0 and the function must match the dataset".into()));
    }
    if dataset.n() == 0 {
        return Err(Error::Insufficient("stability probe needs at least one individual".into()));
    }
    if opts.deltas.iter().any(|d| !(*d > 0.0)) || opts.deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("deltas must be positive and strictly decreasing".into()));
    }
    let probe = Probe::new(dataset, rf, beta0);
    let d = dataset.dim();
    let samples = opts.samples.max(2);
    let results: Vec<Option<f64>> = opts
        .deltas
        .par_iter()
        .map(|&delta| {
            let mut rng = rng::seeded(seed);
            let mut best: Option<(f64, Vec<f64>)> = None;
            let random_dir = |rng: &mut rng::Rng| -> Vec<f64> {
                let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                g.into_iter().map(|x| x / norm).collect()
            };
            let n_random = samples / 2;
            for _ in 0..n_random {
                let u = random_dir(&mut rng);
                if let Some(v) = probe.value(&u, delta, opts.box_bound) {
                    if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                        best = Some((v, u));
                    }
                }
            }
            let mut radius = 0.5;
            for _ in n_random..samples {
                let Some((bv, bu)) = best.clone() else {
                    let u = random_dir(&mut rng);
                    if let Some(v) = probe.value(&u, delta, opts.box_bound) {
                        best = Some((v, u));
                    }
                    continue;
                };
                let step = random_dir(&mut rng);
                let cand: Vec<f64> = bu.iter().zip(&step).map(|(a, b)| a + radius * b).collect();
                let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cand: Vec<f64> = cand.into_iter().map(|x| x / norm).collect();
                match probe.value(&cand, delta, opts.box_bound) {
                    Some(v) if v > bv => best = Some((v, cand)),
                    _ => radius = (radius * 0.9).max(1e-3),
                }
            }
            best.map(|(v, _)| v).filter(|v| *v > 0.0)
        })
        .collect();
    let mut points = Vec::new();
    let mut omitted = Vec::new();
    for (&delta, res) in opts.deltas.iter().zip(results) {
        match res {
            Some(v) => points.push((delta, v)),
            None => omitted.push(delta),
        }
    }
    if points.len() < 2 {
        return Err(Error::Insufficient(format!("only {} deltas produced a feasible direction", points.len())));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let fit = least_squares(&xs, &ys);
    Ok(StabilityEstimate { points, omitted, l: fit.intercept.exp(), eta: fit.slope, r2: fit.r2 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LineFit { slope, intercept, r2 }
}

/// Free constants of the assumptions and the thresholds that make the
/// asymptotic statements checkable at finite `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionConstants {
    /// `A1..A4` of the dimension-prior decay condition.
    pub a: [f64; 4],
    /// `L1..L3` of the `lambda` bracket.
    pub l: [f64; 3],
    /// Allowed eigenvalue range of `Gamma0`.
    pub gamma_bounds: (f64, f64),
    /// `||beta0||_inf <= c log(p) / lambda`.
    pub beta_inf_factor: f64,
    /// `s0 log p <= fraction * n`.
    pub sparsity_fraction: f64,
    /// `#{i : m_i >= r} >= fraction * n`.
    pub m_ge_r_fraction: f64,
    /// Smallest admissible `rho_min^{1/2}(Z_i'Z_i)`.
    pub rho_z_floor: f64,
    /// Largest admissible `||Z_i||_sp`.
    pub rho_z_ceiling: f64,
    pub m_obs: usize,
    pub stability: Option<StabilityOptions>,
    pub stability_r2: f64,
}

impl Default for AssumptionConstants {
    fn default() -> Self {
        Self {
            a: [1.0; 4],
            l: [1.0; 3],
            gamma_bounds: (0.1, 10.0),
            beta_inf_factor: 1.0,
            sparsity_fraction: 0.25,
            m_ge_r_fraction: 0.5,
            rho_z_floor: 1e-6,
            rho_z_ceiling: 10.0,
            m_obs: 50,
            stability: Some(StabilityOptions::default()),
            stability_r2: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

impl Verdict {
    pub fn from_margin(margin: f64) -> Self {
        if margin.is_nan() {
            Verdict::Skipped
        } else if margin >= 0.0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub id: u8,
    pub verdict: Verdict,
    /// Signed slack: `>= 0` passes, `< 0` fails, NaN is skipped.
    pub margin: f64,
    /// The measured quantity the threshold is applied to.
    pub measured: f64,
    pub surrogate: String,
}

impl AssumptionCheck {
    fn new(id: u8, margin: f64, measured: f64, surrogate: String) -> Self {
        Self { id, verdict: Verdict::from_margin(margin), margin, measured, surrogate }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub summary: DesignSummary,
    pub lambda: f64,
    pub lambda_bracket: (f64, f64),
    pub rho_z_lower: f64,
    pub rho_z_upper: f64,
    pub rho_gamma0: (f64, f64),
    pub stability: Option<StabilityEstimate>,
    pub constants: AssumptionConstants,
}

impl AssumptionReport {
    pub fn get(&self, id: u8) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.verdict != Verdict::Fail)
    }
}

/// Evaluates assumptions 1 to 10 on a finite design. Assumption 9 is the bound
/// `max_i m_i <= M_obs` and assumption 10 the stability estimate.
#[allow(clippy::too_many_arguments)]
pub fn check_assumptions(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    beta0: &SparseCoefficients,
    gamma0: &CovarianceParam,
    lambda: f64,
    dimension: &DimensionPrior,
    constants: &AssumptionConstants,
    seed: u64,
) -> Result<AssumptionReport> {
    model::check_dims(dataset, rf, beta0, gamma0)?;
    let summary = design_summary(dataset, rf);
    let n = dataset.n();
    let p = dataset.p;
    let lp = (p as f64).ln();
    let mut checks = Vec::with_capacity(10);

    // 1: difference quotients never exceed the grid estimate of K
    let (t_lo, t_hi, _) = time_range(dataset);
    let mut rng = rng::stream(seed, 1);
    let q = dataset.q;
    let mut worst: f64 = 0.0;
    for k in 0..4000 {
        let width = if k % 2 == 0 { 50.0 } else { 2.0 };
        let x: Vec<f64> = (0..q).map(|_| rng.random_range(-width..width)).collect();
        let scale = 10f64.powf(rng.random_range(-4.0..0.0)) * width;
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-scale..scale)).collect();
        let t = if t_hi > t_lo { rng.random_range(t_lo..=t_hi) } else { t_lo };
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist > 0.0 {
            worst = worst.max((rf.eval(&x, t) - rf.eval(&y, t)).abs() / dist);
        }
    }
    checks.push(AssumptionCheck::new(
        1,
        summary.k * (1.0 + 1e-6) - worst,
        summary.k,
        "K = grid max |grad f| over phi in [-50,50]^q; 4000 sampled quotients must not exceed K".into(),
    ));

    // 2: nonzero, bounded and sparse truth
    let s0 = beta0.size();
    let inf_bound = constants.beta_inf_factor * lp / lambda;
    let m2 = if s0 == 0 {
        -1.0
    } else {
        (inf_bound - beta0.norm_inf()).min(constants.sparsity_fraction * n as f64 - s0 as f64 * lp)
    };
    checks.push(AssumptionCheck::new(
        2,
        m2,
        beta0.norm_inf(),
        format!(
            "beta0 != 0, ||beta0||_inf <= {} log(p)/lambda, s0 log(p) <= {} n",
            constants.beta_inf_factor, constants.sparsity_fraction
        ),
    ));

    // 3: eigenvalues of Gamma0
    let (gmin, gmax) = linalg::min_max_eigen(gamma0.matrix());
    let (glo, ghi) = constants.gamma_bounds;
    checks.push(AssumptionCheck::new(
        3,
        (gmin - glo).min(ghi - gmax),
        gmin,
        format!("{glo} <= rho_min(Gamma0) <= rho_max(Gamma0) <= {ghi}"),
    ));

    // 4: dimension prior decay
    let [a1, a2, a3, a4] = constants.a;
    let m4 = dimension.ratio_margin(a1, a2, a3, a4) + 1e-9;
    checks.push(AssumptionCheck::new(
        4,
        m4,
        dimension.log_pmf(1) - dimension.log_pmf(0),
        format!("A1 p^-A3 pi(s-1) <= pi(s) <= A2 p^-A4 pi(s-1) in log space with slack 1e-9, A = {:?}", constants.a),
    ));

    // 5: lambda bracket
    let bracket = lambda_bracket(summary.x_star, summary.k_prime, p, n, constants.l);
    checks.push(AssumptionCheck::new(
        5,
        (lambda - bracket.0).min(bracket.1 - lambda),
        lambda,
        format!("||X||_* K'/(L1 p^L2) <= lambda <= L3 ||X||_* K'/sqrt(n), L = {:?}", constants.l),
    ));

    // 6: enough individuals with m_i >= r
    let frac = if n == 0 { 0.0 } else { summary.count_m_ge_r as f64 / n as f64 };
    checks.push(AssumptionCheck::new(
        6,
        frac - constants.m_ge_r_fraction,
        frac,
        format!("#{{i : m_i >= r}} >= {} n", constants.m_ge_r_fraction),
    ));

    // 7: full-rank Z_i
    let rho_z_lower = summary.rho_z_min.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    checks.push(AssumptionCheck::new(
        7,
        rho_z_lower - constants.rho_z_floor,
        rho_z_lower,
        format!("min over m_i >= r of rho_min^(1/2)(Z_i'Z_i) >= {}", constants.rho_z_floor),
    ));

    // 8: bounded ||Z_i||_sp
    let rho_z_upper = summary.z_sp.iter().copied().fold(0.0, f64::max);
    checks.push(AssumptionCheck::new(
        8,
        constants.rho_z_ceiling - rho_z_upper,
        rho_z_upper,
        format!("max_i ||Z_i||_sp <= {}", constants.rho_z_ceiling),
    ));

    // 9: bounded number of observations
    checks.push(AssumptionCheck::new(
        9,
        constants.m_obs as f64 - summary.m_obs as f64,
        summary.m_obs as f64,
        format!("max_i m_i <= M_obs = {}", constants.m_obs),
    ));

    // 10: stability estimate
    let stability = match &constants.stability {
        Some(opts) => stability_probe(dataset, rf, beta0, opts, seed).ok(),
        None => None,
    };
    let (m10, measured10, note) = match (&constants.stability, &stability) {
        (None, _) => (f64::NAN, f64::NAN, "probe disabled".to_string()),
        (Some(_), None) => (-1.0, f64::NAN, "probe found fewer than two feasible deltas".to_string()),
        (Some(_), Some(est)) => (
            est.eta.min(est.r2 - constants.stability_r2),
            est.eta,
            format!("fitted eta > 0 with R^2 >= {} (L = {:.4e}, R^2 = {:.4})", constants.stability_r2, est.l, est.r2),
        ),
    };
    checks.push(AssumptionCheck::new(10, m10, measured10, note));

    Ok(AssumptionReport {
        checks,
        lambda,
        lambda_bracket: bracket,
        rho_z_lower,
        rho_z_upper,
        rho_gamma0: (gmin, gmax),
        stability,
        constants: constants.clone(),
        summary,
    })
}
