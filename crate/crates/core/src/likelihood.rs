//! Exact Gaussian log-likelihood of the marginal model via Cholesky factors of
//! `Delta_i = Z_i Gamma Z_i' + sigma2 I`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, marginal_cov, CovarianceParam, Dataset, RegressionFunction, SparseCoefficients};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct IndividualFactor {
    pub lower: DMatrix<f64>,
    pub log_det: f64,
}

/// Cholesky factors of every `Delta_i` for one value of `Gamma`.
#[derive(Debug, Clone)]
pub struct GammaFactors {
    fingerprint: u64,
    factors: Vec<IndividualFactor>,
}

impl GammaFactors {
    pub fn new(dataset: &Dataset, gamma: &CovarianceParam) -> Result<Self> {
        let factors = dataset
            .individuals
            .iter()
            .map(|ind| {
                let delta = marginal_cov(&ind.z, gamma, dataset.sigma2);
                let chol = linalg::cholesky_jittered(&delta).ok_or_else(|| Error::Cholesky(ind.id.clone()))?;
                let lower = chol.l();
                let log_det = linalg::log_det_from_factor(&lower);
                Ok(IndividualFactor { lower, log_det })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { fingerprint: gamma.fingerprint(), factors })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn factors(&self) -> &[IndividualFactor] {
        &self.factors
    }

    /// Log-likelihood from precomputed linear predictors `phi` (`n q` values,
    /// individual-major). `with_constant` adds the `-m/2 log(2 pi)` terms.
    pub fn loglik_from_predictors(
        &self,
        dataset: &Dataset,
        rf: &dyn RegressionFunction,
        phis: &[f64],
        scratch: &mut Scratch,
        with_constant: bool,
    ) -> f64 {
        let q = dataset.q;
        let mut total = 0.0;
        for (i, (ind, fac)) in dataset.individuals.iter().zip(&self.factors).enumerate() {
            let phi = &phis[i * q..(i + 1) * q];
            let m = ind.m();
            scratch.resize(m);
            for j in 0..m {
                scratch.resid[j] = ind.y[j] - rf.eval(phi, ind.times[j]);
            }
            linalg::forward_solve(&fac.lower, &scratch.resid[..m], &mut scratch.solved[..m]);
            let quad: f64 = scratch.solved[..m].iter().map(|x| x * x).sum();
            total += -0.5 * fac.log_det - 0.5 * quad;
            if with_constant {
                total -= 0.5 * m as f64 * LN_2PI;
            }
        }
        total
    }
}

#[derive(Debug, Clone, Default)]
pub struct Scratch {
    resid: Vec<f64>,
    solved: Vec<f64>,
}

impl Scratch {
    fn resize(&mut self, m: usize) {
        if self.resid.len() < m {
            self.resid.resize(m, 0.0);
            self.solved.resize(m, 0.0);
        }
    }
}

/// Per-thread likelihood workspace: a two-slot cache of `Delta_i` factors keyed
/// by the content hash of `Gamma`, plus scratch buffers.
#[derive(Debug, Default)]
pub struct LikelihoodWorkspace {
    slots: Vec<GammaFactors>,
    phis: Vec<f64>,
    scratch: Scratch,
}

impl LikelihoodWorkspace {
    const SLOTS: usize = 2;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn factors(&mut self, dataset: &Dataset, gamma: &CovarianceParam) -> Result<&GammaFactors> {
        let key = gamma.fingerprint();
        if let Some(pos) = self.slots.iter().position(|s| s.fingerprint == key) {
            return Ok(&self.slots[pos]);
        }
        let fresh = GammaFactors::new(dataset, gamma)?;
        if self.slots.len() == Self::SLOTS {
            self.slots.remove(0);
        }
        self.slots.push(fresh);
        Ok(self.slots.last().expect("just pushed"))
    }

    pub fn invalidate(&mut self) {
        self.slots.clear();
    }

    pub fn loglik(
        &mut self,
        dataset: &Dataset,
        rf: &dyn RegressionFunction,
        beta: &SparseCoefficients,
        gamma: &CovarianceParam,
    ) -> Result<f64> {
        model::check_dims(dataset, rf, beta, gamma)?;
        fill_predictors(dataset, beta, &mut self.phis);
        let key = gamma.fingerprint();
        self.factors(dataset, gamma)?;
        let slot = self.slots.iter().find(|s| s.fingerprint == key).expect("cached");
        Ok(slot.loglik_from_predictors(dataset, rf, &self.phis, &mut self.scratch, true))
    }
}

/// Linear predictors `X_i beta` for all individuals, individual-major.
pub fn fill_predictors(dataset: &Dataset, beta: &SparseCoefficients, out: &mut Vec<f64>) {
    let q = dataset.q;
    out.clear();
    out.resize(dataset.n() * q, 0.0);
    for (i, ind) in dataset.individuals.iter().enumerate() {
        model::linear_predictor(&ind.v, q, beta, &mut out[i * q..(i + 1) * q]);
    }
}

/// `sum_i log N(y_i; f_i(X_i beta), Delta_i)`.
pub fn loglik(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    beta: &SparseCoefficients,
    gamma: &CovarianceParam,
) -> Result<f64> {
    LikelihoodWorkspace::new().loglik(dataset, rf, beta, gamma)
}

/// `loglik(beta, gamma) - loglik(beta0, gamma0)` without the `2 pi` constants.
pub fn loglik_ratio(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    (beta, gamma): (&SparseCoefficients, &CovarianceParam),
    (beta0, gamma0): (&SparseCoefficients, &CovarianceParam),
) -> Result<f64> {
    model::check_dims(dataset, rf, beta, gamma)?;
    model::check_dims(dataset, rf, beta0, gamma0)?;
    let mut scratch = Scratch::default();
    let mut phis = Vec::new();
    fill_predictors(dataset, beta, &mut phis);
    let a = GammaFactors::new(dataset, gamma)?.loglik_from_predictors(dataset, rf, &phis, &mut scratch, false);
    fill_predictors(dataset, beta0, &mut phis);
    let b = GammaFactors::new(dataset, gamma0)?.loglik_from_predictors(dataset, rf, &phis, &mut scratch, false);
    Ok(a - b)
}

/// Woodbury evaluation, cheaper when `m_i > r`:
/// `Delta^-1 = s^-2 I - s^-4 Z (Gamma^-1 + Z'Z / s^2)^-1 Z'`.
pub fn loglik_woodbury(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    beta: &SparseCoefficients,
    gamma: &CovarianceParam,
) -> Result<f64> {
    model::check_dims(dataset, rf, beta, gamma)?;
    let s2 = dataset.sigma2;
    let gamma_inv = gamma.inverse();
    let log_det_gamma = gamma.log_det();
    let mut total = 0.0;
    for ind in &dataset.individuals {
        let m = ind.m();
        let mean = model::mean_vector(rf, ind, dataset.q, beta);
        let resid = DVector::from_iterator(m, ind.y.iter().zip(&mean).map(|(y, f)| y - f));
        let core = &gamma_inv + ind.z.transpose() * &ind.z / s2;
        let chol = linalg::cholesky_jittered(&core).ok_or_else(|| Error::Cholesky(ind.id.clone()))?;
        let zr = ind.z.transpose() * &resid;
        let solved = chol.solve(&zr);
        let quad = resid.dot(&resid) / s2 - zr.dot(&solved) / (s2 * s2);
        let log_det = m as f64 * s2.ln() + log_det_gamma + linalg::log_det_from_factor(&chol.l());
        total += -0.5 * m as f64 * LN_2PI - 0.5 * log_det - 0.5 * quad;
    }
    Ok(total)
}

/// Gradient of the log-likelihood with respect to the dense `beta` (length
/// `qp`): `sum_i X_i' J_i' Delta_i^-1 (y_i - f_i)`.
pub fn loglik_grad(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    beta: &SparseCoefficients,
    gamma: &CovarianceParam,
) -> Result<Vec<f64>> {
    model::check_dims(dataset, rf, beta, gamma)?;
    let (p, q) = (dataset.p, dataset.q);
    let mut grad = vec![0.0; p * q];
    let mut phi = vec![0.0; q];
    let mut jac_row = vec![0.0; q];
    for ind in &dataset.individuals {
        let m = ind.m();
        model::linear_predictor(&ind.v, q, beta, &mut phi);
        let resid = DVector::from_iterator(m, ind.times.iter().zip(&ind.y).map(|(&t, y)| y - rf.eval(&phi, t)));
        let delta = marginal_cov(&ind.z, gamma, dataset.sigma2);
        let chol = linalg::cholesky_jittered(&delta).ok_or_else(|| Error::Cholesky(ind.id.clone()))?;
        let w = chol.solve(&resid);
        let mut g = vec![0.0; q];
        for (j, &t) in ind.times.iter().enumerate() {
            rf.grad_phi(&phi, t, &mut jac_row);
            for k in 0..q {
                g[k] += jac_row[k] * w[j];
            }
        }
        for k in 0..q {
            for jj in 0..p {
                grad[k * p + jj] += ind.v[jj] * g[k];
            }
        }
    }
    Ok(grad)
}
