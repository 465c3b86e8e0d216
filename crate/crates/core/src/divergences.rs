//! Closed-form information metrics between the Gaussian marginals of two
//! parameter values: Kullback–Leibler divergence and variation, the average
//! Rényi divergence of order 1/2, the covariance pseudo-distance `d_n` and the
//! prediction distance `P_n`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, marginal_cov, CovarianceParam, Dataset, RegressionFunction, SparseCoefficients};

/// `K(p0, p)` and `V(p0, p)` for `p0 = N(f0, delta0)`, `p = N(f, delta)`, given
/// `diff = f - f0`.
pub fn gaussian_kl_variation(diff: &[f64], delta: &DMatrix<f64>, delta0: &DMatrix<f64>) -> Result<(f64, f64)> {
    let m = diff.len();
    if delta.nrows() != m || delta0.nrows() != m {
        return Err(Error::Dimension("mean difference and covariances disagree in size".into()));
    }
    let chol = linalg::cholesky_jittered(delta).ok_or_else(|| Error::NotSpd("Delta".into()))?;
    let chol0 = linalg::cholesky_jittered(delta0).ok_or_else(|| Error::NotSpd("Delta_0".into()))?;
    let log_det = linalg::log_det_from_factor(&chol.l());
    let log_det0 = linalg::log_det_from_factor(&chol0.l());
    // P = Delta^-1 Delta0 shares its trace and the trace of its square with Delta0 Delta^-1
    let p = chol.solve(delta0);
    let tr = p.trace();
    let tr2 = (&p * &p).trace();
    let d = DVector::from_column_slice(diff);
    let w = chol.solve(&d);
    let mahal = d.dot(&w);
    let kl = 0.5 * (log_det - log_det0 + tr - m as f64) + 0.5 * mahal;
    let variation = 0.5 * (tr2 - 2.0 * tr + m as f64) + w.dot(&(delta0 * &w));
    // both are nonnegative; clamp cancellation noise at equal arguments
    Ok((kl.max(0.0), variation.max(0.0)))
}

/// `log(1 - g^2) = log det(D)/4 + log det(D0)/4 - log det((D + D0)/2)/2`.
pub fn log_affinity_det(delta: &DMatrix<f64>, delta0: &DMatrix<f64>) -> Result<f64> {
    let ld = linalg::log_det_spd(delta)?;
    let ld0 = linalg::log_det_spd(delta0)?;
    let mid = (delta + delta0) * 0.5;
    let ldm = linalg::log_det_spd(&mid)?;
    Ok(0.25 * ld + 0.25 * ld0 - 0.5 * ldm)
}

/// `g^2 = 1 - det(D)^{1/4} det(D0)^{1/4} / det((D + D0)/2)^{1/2}`.
pub fn g_squared(delta: &DMatrix<f64>, delta0: &DMatrix<f64>) -> Result<f64> {
    Ok(-log_affinity_det(delta, delta0)?.exp_m1())
}

/// `-log int sqrt(p p0) = -log(1 - g^2) + |(D + D0)^{-1/2} diff|^2 / 4`.
pub fn gaussian_renyi_half(diff: &[f64], delta: &DMatrix<f64>, delta0: &DMatrix<f64>) -> Result<(f64, f64)> {
    let log_aff = log_affinity_det(delta, delta0)?;
    let sum = delta + delta0;
    let chol = linalg::cholesky_jittered(&sum).ok_or_else(|| Error::NotSpd("Delta + Delta_0".into()))?;
    let d = DVector::from_column_slice(diff);
    let mahal = d.dot(&chol.solve(&d));
    Ok((-log_aff + 0.25 * mahal, -log_aff.exp_m1()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualDivergence {
    pub id: String,
    pub kl: f64,
    pub variation: f64,
    /// Per-individual Rényi summand `-log int sqrt(p_i p0_i)`.
    pub renyi: f64,
    pub g2: f64,
    /// `||Z_i (Gamma - Gamma0) Z_i'||_F`.
    pub cov_gap: f64,
    /// `||f_i(X_i beta) - f_i(X_i beta0)||_2`.
    pub mean_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub individuals: Vec<IndividualDivergence>,
    pub kl_sum: f64,
    pub variation_sum: f64,
    pub renyi_avg: f64,
    pub dn: f64,
    pub pn: f64,
}

/// `(K_i, V_i)` for individual `index` between `p_{beta,Gamma}` and the truth.
pub fn kl_and_variation(
    dataset: &Dataset,
    index: usize,
    rf: &dyn RegressionFunction,
    (beta, gamma): (&SparseCoefficients, &CovarianceParam),
    (beta0, gamma0): (&SparseCoefficients, &CovarianceParam),
) -> Result<(f64, f64)> {
    model::check_dims(dataset, rf, beta, gamma)?;
    model::check_dims(dataset, rf, beta0, gamma0)?;
    let ind = dataset
        .individuals
        .get(index)
        .ok_or_else(|| Error::InvalidParameter(format!("no individual at index {index}")))?;
    let f = model::mean_vector(rf, ind, dataset.q, beta);
    let f0 = model::mean_vector(rf, ind, dataset.q, beta0);
    let diff: Vec<f64> = f.iter().zip(&f0).map(|(a, b)| a - b).collect();
    gaussian_kl_variation(
        &diff,
        &marginal_cov(&ind.z, gamma, dataset.sigma2),
        &marginal_cov(&ind.z, gamma0, dataset.sigma2),
    )
}

/// Average Rényi divergence of order 1/2 over individuals.
pub fn renyi_avg(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    params: (&SparseCoefficients, &CovarianceParam),
    truth: (&SparseCoefficients, &CovarianceParam),
) -> Result<f64> {
    Ok(divergence_report(dataset, rf, params, truth)?.renyi_avg)
}

/// `d_n(G1, G2) = sqrt(mean_i ||Z_i (G1 - G2) Z_i'||_F^2)`.
pub fn dn(dataset: &Dataset, gamma1: &CovarianceParam, gamma2: &CovarianceParam) -> Result<f64> {
    if gamma1.r() != dataset.r || gamma2.r() != dataset.r {
        return Err(Error::Dimension("covariances must be r x r".into()));
    }
    if dataset.n() == 0 {
        return Ok(0.0);
    }
    let diff = gamma1.matrix() - gamma2.matrix();
    let total: f64 = dataset
        .individuals
        .iter()
        .map(|ind| linalg::frobenius(&(&ind.z * &diff * ind.z.transpose())).powi(2))
        .sum();
    Ok((total / dataset.n() as f64).sqrt())
}

/// `P_n = sqrt(mean_i ||f_i(X_i beta) - f_i(X_i beta0)||^2)`.
pub fn prediction_distance(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    beta: &SparseCoefficients,
    beta0: &SparseCoefficients,
) -> Result<f64> {
    if beta.dim() != dataset.dim() || beta0.dim() != dataset.dim() || rf.q() != dataset.q {
        return Err(Error::Dimension("beta dimensions must equal qp".into()));
    }
    if dataset.n() == 0 {
        return Ok(0.0);
    }
    let total: f64 = dataset
        .individuals
        .iter()
        .map(|ind| {
            let f = model::mean_vector(rf, ind, dataset.q, beta);
            let f0 = model::mean_vector(rf, ind, dataset.q, beta0);
            f.iter().zip(&f0).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum();
    Ok((total / dataset.n() as f64).sqrt())
}

pub fn divergence_report(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    (beta, gamma): (&SparseCoefficients, &CovarianceParam),
    (beta0, gamma0): (&SparseCoefficients, &CovarianceParam),
) -> Result<DivergenceReport> {
    model::check_dims(dataset, rf, beta, gamma)?;
    model::check_dims(dataset, rf, beta0, gamma0)?;
    let gdiff = gamma.matrix() - gamma0.matrix();
    let mut rows = Vec::with_capacity(dataset.n());
    for ind in &dataset.individuals {
        let f = model::mean_vector(rf, ind, dataset.q, beta);
        let f0 = model::mean_vector(rf, ind, dataset.q, beta0);
        let diff: Vec<f64> = f.iter().zip(&f0).map(|(a, b)| a - b).collect();
        let delta = marginal_cov(&ind.z, gamma, dataset.sigma2);
        let delta0 = marginal_cov(&ind.z, gamma0, dataset.sigma2);
        let (kl, variation) = gaussian_kl_variation(&diff, &delta, &delta0)?;
        let (renyi, g2) = gaussian_renyi_half(&diff, &delta, &delta0)?;
        rows.push(IndividualDivergence {
            id: ind.id.clone(),
            kl,
            variation,
            renyi,
            g2,
            cov_gap: linalg::frobenius(&(&ind.z * &gdiff * ind.z.transpose())),
            mean_gap: diff.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    let n = dataset.n().max(1) as f64;
    Ok(DivergenceReport {
        kl_sum: rows.iter().map(|r| r.kl).sum(),
        variation_sum: rows.iter().map(|r| r.variation).sum(),
        renyi_avg: rows.iter().map(|r| r.renyi).sum::<f64>() / n,
        dn: (rows.iter().map(|r| r.cov_gap * r.cov_gap).sum::<f64>() / n).sqrt(),
        pn: (rows.iter().map(|r| r.mean_gap * r.mean_gap).sum::<f64>() / n).sqrt(),
        individuals: rows,
    })
}
