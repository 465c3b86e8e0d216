//! Spike-and-slab Laplace prior on `(S, beta_S)` and inverse-Wishart prior on
//! `Gamma`.

use nalgebra::DMatrix;
use rand_distr::{ChiSquared, Distribution, Exp, StandardNormal};
use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{CovarianceParam, SparseCoefficients};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimensionKind {
    /// `pi(s) ∝ (A p^-u)^s` on `{0..D}`.
    GeometricDecay,
    /// Binomial(D, w) with `w ~ Beta(A, D^u)`.
    BinomialBeta,
}

/// Prior `pi_p` on the support size, stored as normalized log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionPrior {
    pub kind: DimensionKind,
    pub u: f64,
    pub a: f64,
    /// Number of covariates `p` in the decay base `p^-u`.
    pub p: usize,
    /// Maximal support size `D = qp`.
    pub max_dim: usize,
    log_weights: Vec<f64>,
}

impl DimensionPrior {
    pub fn new(kind: DimensionKind, u: f64, a: f64, p: usize, max_dim: usize) -> Result<Self> {
        if !(u > 0.0 && u.is_finite()) || !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidParameter(format!("dimension prior needs u > 0 and A > 0 (u = {u}, A = {a})")));
        }
        if p == 0 || max_dim == 0 {
            return Err(Error::InvalidParameter("dimension prior needs p >= 1 and D >= 1".into()));
        }
        let d = max_dim as u64;
        let raw: Vec<f64> = match kind {
            DimensionKind::GeometricDecay => {
                let step = a.ln() - u * (p as f64).ln();
                (0..=max_dim).map(|s| s as f64 * step).collect()
            }
            DimensionKind::BinomialBeta => {
                let b = (max_dim as f64).powf(u);
                let ln_beta = |x: f64, y: f64| ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y);
                (0..=max_dim)
                    .map(|s| {
                        let sf = s as f64;
                        ln_binomial(d, s as u64) + ln_beta(a + sf, b + (max_dim - s) as f64) - ln_beta(a, b)
                    })
                    .collect()
            }
        };
        let norm = log_sum_exp(&raw);
        let log_weights = raw.iter().map(|w| w - norm).collect();
        Ok(Self { kind, u, a, p, max_dim, log_weights })
    }

    /// Default geometric decay with `A = 1`, `u = 1`.
    pub fn default_for(p: usize, max_dim: usize) -> Self {
        Self::new(DimensionKind::GeometricDecay, 1.0, 1.0, p, max_dim).expect("valid defaults")
    }

    pub fn log_pmf(&self, s: usize) -> f64 {
        self.log_weights.get(s).copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Smallest log-space slack of
    /// `A1 p^-A3 pi(s-1) <= pi(s) <= A2 p^-A4 pi(s-1)` over `s = 1..D`.
    pub fn ratio_margin(&self, a1: f64, a2: f64, a3: f64, a4: f64) -> f64 {
        let lp = (self.p as f64).ln();
        (1..=self.max_dim)
            .map(|s| {
                let prev = self.log_weights[s - 1];
                let cur = self.log_weights[s];
                let lower = a1.ln() - a3 * lp + prev;
                let upper = a2.ln() - a4 * lp + prev;
                (cur - lower).min(upper - cur)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn satisfies_ratio_bounds(&self, a1: f64, a2: f64, a3: f64, a4: f64) -> bool {
        self.ratio_margin(a1, a2, a3, a4) >= -1e-9
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, w) in self.log_weights.iter().enumerate() {
            acc += w.exp();
            if u < acc {
                return s;
            }
        }
        self.max_dim
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Laplace slab `lambda/2 exp(-lambda |b|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlabPrior {
    pub lambda: f64,
}

impl SlabPrior {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("slab lambda must be positive, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn log_density(&self, b: f64) -> f64 {
        (0.5 * self.lambda).ln() - self.lambda * b.abs()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let e: f64 = Exp::new(self.lambda).expect("positive rate").sample(rng);
        let e = if e == 0.0 { f64::MIN_POSITIVE } else { e };
        if rng.random::<bool>() {
            e
        } else {
            -e
        }
    }
}

/// Inverse-Wishart `IW(d, Sigma)` with density
/// `|Sigma|^{d/2} / (2^{dr/2} Gamma_r(d/2)) |G|^{-(d+r+1)/2} exp(-tr(Sigma G^-1)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseWishartPrior {
    pub dof: f64,
    pub scale: CovarianceParam,
}

impl InverseWishartPrior {
    pub fn new(dof: f64, scale: CovarianceParam) -> Result<Self> {
        let r = scale.r() as f64;
        if !(dof > r - 1.0 && dof.is_finite()) {
            return Err(Error::InvalidParameter(format!("inverse-Wishart dof must exceed r - 1 = {}, got {dof}", r - 1.0)));
        }
        Ok(Self { dof, scale })
    }

    /// Default `d = r + 2`, `Sigma = I_r`.
    pub fn default_for(r: usize) -> Self {
        Self::new(r as f64 + 2.0, CovarianceParam::identity(r)).expect("valid defaults")
    }

    pub fn r(&self) -> usize {
        self.scale.r()
    }

    pub fn log_normalizer(&self) -> f64 {
        let r = self.r() as f64;
        let d = self.dof;
        0.5 * d * self.scale.log_det() - 0.5 * d * r * std::f64::consts::LN_2 - ln_multivariate_gamma(self.r(), 0.5 * d)
    }

    pub fn log_density(&self, gamma: &CovarianceParam) -> Result<f64> {
        if gamma.r() != self.r() {
            return Err(Error::Dimension(format!("Gamma is {0}x{0}, prior is {1}x{1}", gamma.r(), self.r())));
        }
        let r = self.r() as f64;
        let tr = gamma.cholesky().solve(self.scale.matrix()).trace();
        Ok(self.log_normalizer() - 0.5 * (self.dof + r + 1.0) * gamma.log_det() - 0.5 * tr)
    }

    /// Bartlett draw: `Gamma = (C A^-T)(C A^-T)'` with `Sigma = C C'`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> CovarianceParam {
        let r = self.r();
        let c = self.scale.lower_factor();
        loop {
            let mut a = DMatrix::<f64>::zeros(r, r);
            for i in 0..r {
                let chi = ChiSquared::new(self.dof - i as f64).expect("dof > r - 1");
                a[(i, i)] = chi.sample(rng).sqrt();
                for j in 0..i {
                    a[(i, j)] = StandardNormal.sample(rng);
                }
            }
            let Some(a_inv) = a.clone().try_inverse() else { continue };
            let t = &c * a_inv.transpose();
            let g = &t * t.transpose();
            let g = (&g + g.transpose()) * 0.5;
            if let Ok(cp) = CovarianceParam::new(g) {
                return cp;
            }
        }
    }
}

fn ln_multivariate_gamma(r: usize, a: f64) -> f64 {
    let rf = r as f64;
    0.25 * rf * (rf - 1.0) * std::f64::consts::PI.ln() + (1..=r).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// `log pi_p(s) - log C(D, s) + sum_{l in S} log(lambda/2 exp(-lambda |b_l|))`.
pub fn log_prior_beta(sc: &SparseCoefficients, dp: &DimensionPrior, slab: &SlabPrior) -> Result<f64> {
    if sc.dim() != dp.max_dim {
        return Err(Error::Dimension(format!("beta has dimension {}, prior has D = {}", sc.dim(), dp.max_dim)));
    }
    if let Some(&last) = sc.support().last() {
        if last >= dp.max_dim {
            return Err(Error::InvalidParameter(format!("support index {} exceeds D = {}", last + 1, dp.max_dim)));
        }
    }
    let s = sc.size();
    let slab_sum: f64 = sc.values().iter().map(|&b| slab.log_density(b)).sum();
    Ok(dp.log_pmf(s) - ln_binomial(dp.max_dim as u64, s as u64) + slab_sum)
}

pub fn log_prior_gamma(gamma: &CovarianceParam, iw: &InverseWishartPrior) -> Result<f64> {
    iw.log_density(gamma)
}

/// Joint prior hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub dimension: DimensionPrior,
    pub slab: SlabPrior,
    pub iw: InverseWishartPrior,
}

impl Priors {
    pub fn log_density(&self, beta: &SparseCoefficients, gamma: &CovarianceParam) -> Result<f64> {
        Ok(log_prior_beta(beta, &self.dimension, &self.slab)? + log_prior_gamma(gamma, &self.iw)?)
    }
}

/// Exact joint prior draw: `s ~ pi_p`, a uniform support of size `s`, i.i.d.
/// Laplace values and `Gamma ~ IW`.
pub fn sample_prior(priors: &Priors, seed: u64) -> (SparseCoefficients, CovarianceParam) {
    let mut rng = rng::seeded(seed);
    sample_prior_with(priors, &mut rng)
}

pub fn sample_prior_with<R: rand::Rng + ?Sized>(priors: &Priors, rng: &mut R) -> (SparseCoefficients, CovarianceParam) {
    let d = priors.dimension.max_dim;
    let s = priors.dimension.sample(rng);
    let mut support = rand::seq::index::sample(rng, d, s).into_vec();
    support.sort_unstable();
    let values = (0..s).map(|_| priors.slab.sample(rng)).collect();
    let beta = SparseCoefficients::from_parts_unchecked(d, support, values);
    (beta, priors.iw.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gof;
    use statrs::distribution::{ContinuousCDF, InverseGamma};

    #[test]
    fn empty_support_is_dimension_mass() {
        let dp = DimensionPrior::default_for(4, 4);
        let slab = SlabPrior::new(1.3).unwrap();
        let v = log_prior_beta(&SparseCoefficients::zeros(4), &dp, &slab).unwrap();
        assert_eq!(v, dp.log_pmf(0));
    }

    #[test]
    fn single_coordinate_at_zero_with_unit_slab_constant() {
        let dp = DimensionPrior::default_for(4, 4);
        let slab = SlabPrior::new(2.0).unwrap();
        // value is ±tiny: |b| contributes nothing at the scale of the check
        let sc = SparseCoefficients::new(4, vec![2], vec![1e-300]).unwrap();
        let v = log_prior_beta(&sc, &dp, &slab).unwrap();
        assert!((v - (dp.log_pmf(1) - 4f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn geometric_ratios_enumerated() {
        let dp = DimensionPrior::new(DimensionKind::GeometricDecay, 1.0, 1.0, 4, 4).unwrap();
        let w = dp.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for s in 1..=4 {
            assert!((w[s] / w[s - 1] - 0.25).abs() < 1e-12);
        }
        assert!(dp.satisfies_ratio_bounds(1.0, 1.0, 1.0, 1.0));
        assert!(!dp.satisfies_ratio_bounds(1.0, 1.0, 2.0, 2.0));
    }

    #[test]
    fn binomial_beta_weights_normalize_and_decay() {
        let dp = DimensionPrior::new(DimensionKind::BinomialBeta, 1.5, 1.0, 20, 20).unwrap();
        let w = dp.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|x| *x > 0.0));
        assert!(w.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn slab_is_piecewise_linear_in_magnitude() {
        let dp = DimensionPrior::default_for(5, 5);
        let slab = SlabPrior::new(1.7).unwrap();
        let a = SparseCoefficients::new(5, vec![1, 3], vec![-0.4, 2.0]).unwrap();
        let b = SparseCoefficients::new(5, vec![1, 3], vec![-0.4 - 0.75, 2.0]).unwrap();
        let la = log_prior_beta(&a, &dp, &slab).unwrap();
        let lb = log_prior_beta(&b, &dp, &slab).unwrap();
        assert!((la - lb - 1.7 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn beta_prior_rejects_dimension_mismatch() {
        let dp = DimensionPrior::default_for(4, 4);
        let slab = SlabPrior::new(1.0).unwrap();
        assert!(log_prior_beta(&SparseCoefficients::zeros(5), &dp, &slab).is_err());
    }

    #[test]
    fn scalar_inverse_wishart_is_inverse_gamma() {
        // IW(d, s) on r = 1 equals inverse-gamma(d/2, s/2)
        let iw = InverseWishartPrior::new(3.0, CovarianceParam::scaled_identity(1, 2.0).unwrap()).unwrap();
        let g = CovarianceParam::scaled_identity(1, 1.0).unwrap();
        let got = iw.log_density(&g).unwrap();
        let (shape, scale, x) = (1.5_f64, 1.0_f64, 1.0_f64);
        let expect = shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn inverse_wishart_relabeling_symmetry() {
        let sigma = CovarianceParam::from_lower_triangle(3, &[2.0, 0.3, 1.0, -0.2, 0.1, 1.5]).unwrap();
        let g = CovarianceParam::from_lower_triangle(3, &[1.0, 0.2, 0.8, 0.1, -0.3, 2.0]).unwrap();
        let perm = nalgebra::DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let sp = CovarianceParam::new(perm.transpose() * sigma.matrix() * &perm).unwrap();
        let gp = CovarianceParam::new(perm.transpose() * g.matrix() * &perm).unwrap();
        let a = InverseWishartPrior::new(5.0, sigma).unwrap().log_density(&g).unwrap();
        let b = InverseWishartPrior::new(5.0, sp).unwrap().log_density(&gp).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn inverse_wishart_mode_on_grid() {
        let (d, s) = (4.0, 3.0);
        let iw = InverseWishartPrior::new(d, CovarianceParam::scaled_identity(1, s).unwrap()).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 1..=20_000 {
            let gamma = k as f64 * 1e-4;
            let v = iw.log_density(&CovarianceParam::scaled_identity(1, gamma).unwrap()).unwrap();
            if v > best.0 {
                best = (v, gamma);
            }
        }
        assert!((best.1 - s / (d + 2.0)).abs() <= 1e-4);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SlabPrior::new(0.0).is_err());
        assert!(InverseWishartPrior::new(0.5, CovarianceParam::identity(2)).is_err());
        assert!(DimensionPrior::new(DimensionKind::GeometricDecay, -1.0, 1.0, 3, 3).is_err());
    }

    fn default_priors(p: usize, r: usize, lambda: f64) -> Priors {
        Priors {
            dimension: DimensionPrior::default_for(p, p),
            slab: SlabPrior::new(lambda).unwrap(),
            iw: InverseWishartPrior::default_for(r),
        }
    }

    #[test]
    fn prior_support_sizes_match_weights() {
        let priors = default_priors(3, 1, 1.0);
        let mut rng = rng::seeded(17);
        let draws = 100_000;
        let mut counts = vec![0u64; 4];
        for _ in 0..draws {
            let (b, _) = sample_prior_with(&priors, &mut rng);
            counts[b.size()] += 1;
        }
        let pv = gof::chi_square_pvalue(&counts, &priors.dimension.weights());
        assert!(pv > 0.01, "p-value {pv}");
    }

    #[test]
    fn slab_draws_have_laplace_mean_magnitude() {
        let slab = SlabPrior::new(2.5).unwrap();
        let mut rng = rng::seeded(4);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| slab.sample(&mut rng).abs()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = (1.0 / 2.5) / (n as f64).sqrt();
        assert!((mean - 0.4).abs() < 4.0 * se);
    }

    #[test]
    fn scalar_wishart_moment_and_spd_draws() {
        let (d, s) = (5.0, 2.0);
        let iw = InverseWishartPrior::new(d, CovarianceParam::scaled_identity(1, s).unwrap()).unwrap();
        let mut rng = rng::seeded(8);
        let n = 100_000;
        let inv: Vec<f64> = (0..n).map(|_| 1.0 / iw.sample(&mut rng).matrix()[(0, 0)]).collect();
        let mean = inv.iter().sum::<f64>() / n as f64;
        let var = inv.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - d / s).abs() < 4.0 * (var / n as f64).sqrt(), "{mean}");

        let iw3 = InverseWishartPrior::default_for(3);
        for _ in 0..100_000 {
            let g = iw3.sample(&mut rng);
            assert!(nalgebra::Cholesky::new(g.matrix().clone()).is_some());
        }
    }

    #[test]
    fn scalar_inverse_wishart_draws_pass_ks() {
        let iw = InverseWishartPrior::new(3.0, CovarianceParam::scaled_identity(1, 2.0).unwrap()).unwrap();
        let ig = InverseGamma::new(1.5, 1.0).unwrap();
        let mut rng = rng::seeded(21);
        let xs: Vec<f64> = (0..5000).map(|_| iw.sample(&mut rng).matrix()[(0, 0)]).collect();
        let pv = gof::ks_pvalue(&xs, |x| ig.cdf(x));
        assert!(pv > 0.01, "{pv}");
    }

    #[test]
    fn prior_sampling_is_deterministic() {
        let priors = default_priors(6, 2, 1.0);
        let a = sample_prior(&priors, 99);
        let b = sample_prior(&priors, 99);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
