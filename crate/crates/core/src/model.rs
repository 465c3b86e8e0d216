//! Generative model: regression functions, per-individual designs, the
//! marginal covariance `Z Gamma Z' + sigma2 I` and data simulation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// A known regression function `f(phi, t)` with `phi` of dimension `q`.
pub trait RegressionFunction: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn q(&self) -> usize;

    fn eval(&self, phi: &[f64], t: f64) -> f64;

    /// Gradient of `f` with respect to `phi`. Central differences unless
    /// overridden.
    fn grad_phi(&self, phi: &[f64], t: f64, out: &mut [f64]) {
        let mut work = phi.to_vec();
        for k in 0..phi.len() {
            let h = 1e-6 * (1.0 + phi[k].abs());
            work[k] = phi[k] + h;
            let up = self.eval(&work, t);
            work[k] = phi[k] - h;
            let down = self.eval(&work, t);
            work[k] = phi[k];
            out[k] = (up - down) / (2.0 * h);
        }
    }
}

pub type SharedFunction = Arc<dyn RegressionFunction>;

/// `f(phi, t) = A / (1 + exp((t - t0) phi))`, scalar `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    pub amplitude: f64,
    pub t0: f64,
}

impl RegressionFunction for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn q(&self) -> usize {
        1
    }

    fn eval(&self, phi: &[f64], t: f64) -> f64 {
        self.amplitude * logistic_tail((t - self.t0) * phi[0])
    }

    fn grad_phi(&self, phi: &[f64], t: f64, out: &mut [f64]) {
        let x = (t - self.t0) * phi[0];
        let s = logistic_tail(x);
        out[0] = -self.amplitude * (t - self.t0) * s * (1.0 - s);
    }
}

/// Three-parameter growth curve `phi1 / (1 + exp(phi2 (t - phi3)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic3;

impl RegressionFunction for Logistic3 {
    fn name(&self) -> &str {
        "logistic3"
    }

    fn q(&self) -> usize {
        3
    }

    fn eval(&self, phi: &[f64], t: f64) -> f64 {
        phi[0] * logistic_tail(phi[1] * (t - phi[2]))
    }

    fn grad_phi(&self, phi: &[f64], t: f64, out: &mut [f64]) {
        let s = logistic_tail(phi[1] * (t - phi[2]));
        let ds = -s * (1.0 - s);
        out[0] = s;
        out[1] = phi[0] * ds * (t - phi[2]);
        out[2] = -phi[0] * ds * phi[1];
    }
}

/// Polynomial in time, `f(phi, t) = sum_k phi_k t^k`; for `q = 1` this is
/// `f(phi, t) = phi_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub q: usize,
}

impl RegressionFunction for Linear {
    fn name(&self) -> &str {
        "linear"
    }

    fn q(&self) -> usize {
        self.q
    }

    fn eval(&self, phi: &[f64], t: f64) -> f64 {
        phi.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    fn grad_phi(&self, _phi: &[f64], t: f64, out: &mut [f64]) {
        let mut pow = 1.0;
        for o in out.iter_mut() {
            *o = pow;
            pow *= t;
        }
    }
}

// 1 / (1 + e^x) without overflow.
fn logistic_tail(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

pub type FunctionParams = BTreeMap<String, f64>;

type Constructor = Arc<dyn Fn(&FunctionParams) -> Result<SharedFunction> + Send + Sync>;

/// Name-keyed registry of regression functions. `logistic`, `logistic3` and
/// `linear` are registered by default.
#[derive(Clone)]
pub struct FunctionRegistry {
    constructors: HashMap<String, Constructor>,
}

impl fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.constructors.keys().collect();
        names.sort();
        f.debug_struct("FunctionRegistry").field("names", &names).finish()
    }
}

impl Default for FunctionRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn param(params: &FunctionParams, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn check_known(name: &str, params: &FunctionParams, known: &[&str]) -> Result<()> {
    for key in params.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::InvalidParameter(format!(
                "unknown parameter `{key}` for function `{name}`"
            )));
        }
    }
    Ok(())
}

impl FunctionRegistry {
    pub fn empty() -> Self {
        Self { constructors: HashMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("logistic", |p| {
            check_known("logistic", p, &["amplitude", "t0"])?;
            let amplitude = param(p, "amplitude", 1.0);
            let t0 = param(p, "t0", 1.0);
            if !(amplitude > 0.0 && amplitude.is_finite() && t0.is_finite()) {
                return Err(Error::InvalidParameter("logistic needs amplitude > 0".into()));
            }
            Ok(Arc::new(Logistic { amplitude, t0 }) as SharedFunction)
        });
        reg.register("logistic3", |p| {
            check_known("logistic3", p, &[])?;
            Ok(Arc::new(Logistic3) as SharedFunction)
        });
        reg.register("linear", |p| {
            check_known("linear", p, &["q"])?;
            let q = param(p, "q", 1.0);
            if q < 1.0 || q.fract() != 0.0 {
                return Err(Error::InvalidParameter("linear needs integer q >= 1".into()));
            }
            Ok(Arc::new(Linear { q: q as usize }) as SharedFunction)
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, ctor: F)
    where
        F: Fn(&FunctionParams) -> Result<SharedFunction> + Send + Sync + 'static,
    {
        self.constructors.insert(name.to_string(), Arc::new(ctor));
    }

    pub fn build(&self, name: &str, params: &FunctionParams) -> Result<SharedFunction> {
        let ctor = self
            .constructors
            .get(name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown regression function `{name}`")))?;
        ctor(params)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.constructors.contains_key(name)
    }
}

/// Componentwise evaluation `(f(phi, t_1), ..., f(phi, t_m))`.
pub fn f_vec(rf: &dyn RegressionFunction, phi: &[f64], times: &[f64]) -> Vec<f64> {
    times.iter().map(|&t| rf.eval(phi, t)).collect()
}

/// Sparse regression vector `beta` of dimension `q p`: a strictly increasing
/// zero-based support and the nonzero values on it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCoefficients {
    dim: usize,
    support: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCoefficients {
    pub fn new(dim: usize, support: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if support.len() != values.len() {
            return Err(Error::Dimension(format!(
                "support has {} indices but {} values",
                support.len(),
                values.len()
            )));
        }
        for w in support.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidParameter("support indices must be strictly increasing".into()));
            }
        }
        if let Some(&last) = support.last() {
            if last >= dim {
                return Err(Error::InvalidParameter(format!(
                    "support index {} out of range for dimension {dim}",
                    last + 1
                )));
            }
        }
        if values.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter("support values must be finite and nonzero".into()));
        }
        Ok(Self { dim, support, values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, support: Vec::new(), values: Vec::new() }
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let mut support = Vec::new();
        let mut values = Vec::new();
        for (j, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                support.push(j);
                values.push(v);
            }
        }
        Self { dim: dense.len(), support, values }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&j, &v) in self.support.iter().zip(&self.values) {
            out[j] = v;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.support.len()
    }

    pub fn get(&self, j: usize) -> f64 {
        match self.support.binary_search(&j) {
            Ok(k) => self.values[k],
            Err(_) => 0.0,
        }
    }

    pub(crate) fn from_parts_unchecked(dim: usize, support: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert!(support.windows(2).all(|w| w[0] < w[1]));
        Self { dim, support, values }
    }

    pub fn norm_l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Symmetric positive-definite random-effects covariance with its lower
/// Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovarianceParam {
    gamma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl PartialEq for CovarianceParam {
    fn eq(&self, other: &Self) -> bool {
        self.gamma == other.gamma
    }
}

impl CovarianceParam {
    pub fn new(gamma: DMatrix<f64>) -> Result<Self> {
        if gamma.nrows() != gamma.ncols() || gamma.nrows() == 0 {
            return Err(Error::Dimension("covariance must be a nonempty square matrix".into()));
        }
        if !linalg::is_symmetric(&gamma, 1e-12) {
            return Err(Error::NotSpd("covariance is not symmetric".into()));
        }
        // exact symmetrization of rounding-level asymmetry
        let gamma = (&gamma + gamma.transpose()) * 0.5;
        let chol = Cholesky::new(gamma.clone())
            .ok_or_else(|| Error::NotSpd("covariance has a nonpositive Cholesky pivot".into()))?;
        if (0..gamma.nrows()).any(|k| !(chol.l_dirty()[(k, k)] > 0.0)) {
            return Err(Error::NotSpd("covariance has a nonpositive Cholesky pivot".into()));
        }
        Ok(Self { gamma, chol })
    }

    pub fn identity(r: usize) -> Self {
        Self::new(DMatrix::identity(r, r)).expect("identity is SPD")
    }

    pub fn scaled_identity(r: usize, scale: f64) -> Result<Self> {
        Self::new(DMatrix::identity(r, r) * scale)
    }

    /// Builds from the row-major lower triangle `g11, g21, g22, g31, ...`.
    pub fn from_lower_triangle(r: usize, lt: &[f64]) -> Result<Self> {
        if lt.len() != r * (r + 1) / 2 {
            return Err(Error::Dimension(format!(
                "lower triangle of a {r}x{r} matrix needs {} entries, got {}",
                r * (r + 1) / 2,
                lt.len()
            )));
        }
        let mut m = DMatrix::zeros(r, r);
        let mut k = 0;
        for i in 0..r {
            for j in 0..=i {
                m[(i, j)] = lt[k];
                m[(j, i)] = lt[k];
                k += 1;
            }
        }
        Self::new(m)
    }

    pub fn lower_triangle(&self) -> Vec<f64> {
        let r = self.r();
        let mut out = Vec::with_capacity(r * (r + 1) / 2);
        for i in 0..r {
            for j in 0..=i {
                out.push(self.gamma[(i, j)]);
            }
        }
        out
    }

    pub fn r(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn lower_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        linalg::log_det_from_factor(&self.chol.l())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Content hash of the matrix entries.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.gamma.nrows().hash(&mut h);
        for x in self.gamma.iter() {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// One subject: observation times, responses, random-effects design `Z`
/// (`m x r`) and covariates `V` (length `p`).
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub z: DMatrix<f64>,
    pub v: Vec<f64>,
}

impl Individual {
    pub fn m(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub individuals: Vec<Individual>,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub sigma2: f64,
}

impl Dataset {
    pub fn new(individuals: Vec<Individual>, p: usize, q: usize, r: usize, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
        }
        if p == 0 || q == 0 || r == 0 {
            return Err(Error::Dimension("p, q and r must be at least 1".into()));
        }
        for ind in &individuals {
            let m = ind.times.len();
            if m == 0 {
                return Err(Error::Data(format!("individual `{}` has no observations", ind.id)));
            }
            if ind.y.len() != m || ind.z.nrows() != m {
                return Err(Error::Dimension(format!(
                    "individual `{}`: times, y and Z rows must all have length {m}",
                    ind.id
                )));
            }
            if ind.z.ncols() != r {
                return Err(Error::Dimension(format!("individual `{}`: Z has {} columns, expected {r}", ind.id, ind.z.ncols())));
            }
            if ind.v.len() != p {
                return Err(Error::Dimension(format!("individual `{}`: V has length {}, expected {p}", ind.id, ind.v.len())));
            }
        }
        Ok(Self { individuals, p, q, r, sigma2 })
    }

    pub fn n(&self) -> usize {
        self.individuals.len()
    }

    pub fn dim(&self) -> usize {
        self.q * self.p
    }

    pub fn total_obs(&self) -> usize {
        self.individuals.iter().map(Individual::m).sum()
    }

    pub fn max_m(&self) -> usize {
        self.individuals.iter().map(Individual::m).max().unwrap_or(0)
    }

    /// Covariate matrix `V` (`n x p`).
    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.n(), self.p);
        for (i, ind) in self.individuals.iter().enumerate() {
            for j in 0..self.p {
                v[(i, j)] = ind.v[j];
            }
        }
        v
    }

    /// Stacked design `X = (X_1; ...; X_n)` of size `nq x qp`.
    pub fn stacked_design(&self) -> DMatrix<f64> {
        let (q, p) = (self.q, self.p);
        let mut x = DMatrix::zeros(self.n() * q, q * p);
        for (i, ind) in self.individuals.iter().enumerate() {
            for k in 0..q {
                for j in 0..p {
                    x[(i * q + k, k * p + j)] = ind.v[j];
                }
            }
        }
        x
    }
}

/// Block design `X_i` (`q x qp`) with `V_i'` repeated on the diagonal.
pub fn build_design(v: &[f64], q: usize) -> Result<DMatrix<f64>> {
    let p = v.len();
    if p == 0 || q == 0 {
        return Err(Error::Dimension("build_design needs p >= 1 and q >= 1".into()));
    }
    let mut x = DMatrix::zeros(q, q * p);
    for k in 0..q {
        for j in 0..p {
            x[(k, k * p + j)] = v[j];
        }
    }
    Ok(x)
}

/// `phi = X_i beta`, exploiting the block structure and the sparsity of beta.
pub fn linear_predictor(v: &[f64], q: usize, beta: &SparseCoefficients, out: &mut [f64]) {
    let p = v.len();
    out[..q].iter_mut().for_each(|o| *o = 0.0);
    for (&l, &b) in beta.support().iter().zip(beta.values()) {
        out[l / p] += v[l % p] * b;
    }
}

/// `f_i(X_i beta)` for one individual.
pub fn mean_vector(rf: &dyn RegressionFunction, ind: &Individual, q: usize, beta: &SparseCoefficients) -> Vec<f64> {
    let mut phi = vec![0.0; q];
    linear_predictor(&ind.v, q, beta, &mut phi);
    f_vec(rf, &phi, &ind.times)
}

/// `Delta = Z Gamma Z' + sigma2 I`.
pub fn marginal_cov(z: &DMatrix<f64>, gamma: &CovarianceParam, sigma2: f64) -> DMatrix<f64> {
    let m = z.nrows();
    let mut d = z * gamma.matrix() * z.transpose();
    for k in 0..m {
        d[(k, k)] += sigma2;
    }
    // enforce exact symmetry
    for i in 0..m {
        for j in 0..i {
            let s = 0.5 * (d[(i, j)] + d[(j, i)]);
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    d
}

/// Draws `y_i = f_i(X_i beta0) + Z_i xi_i + eps_i` for every individual of the
/// skeleton; existing responses are overwritten.
pub fn simulate(
    skeleton: &Dataset,
    rf: &dyn RegressionFunction,
    beta0: &SparseCoefficients,
    gamma0: &CovarianceParam,
    seed: u64,
) -> Result<Dataset> {
    check_dims(skeleton, rf, beta0, gamma0)?;
    let mut rng = rng::seeded(seed);
    let sigma = skeleton.sigma2.sqrt();
    let lg = gamma0.lower_factor();
    let r = skeleton.r;
    let mut out = skeleton.clone();
    for ind in out.individuals.iter_mut() {
        let mean = mean_vector(rf, ind, skeleton.q, beta0);
        let u: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xi = &lg * nalgebra::DVector::from_vec(u);
        let re = &ind.z * xi;
        for j in 0..ind.m() {
            let e: f64 = StandardNormal.sample(&mut rng);
            ind.y[j] = mean[j] + re[j] + sigma * e;
        }
    }
    Ok(out)
}

pub(crate) fn check_dims(
    data: &Dataset,
    rf: &dyn RegressionFunction,
    beta: &SparseCoefficients,
    gamma: &CovarianceParam,
) -> Result<()> {
    if rf.q() != data.q {
        return Err(Error::Dimension(format!("function `{}` has q = {}, dataset has q = {}", rf.name(), rf.q(), data.q)));
    }
    if beta.dim() != data.dim() {
        return Err(Error::Dimension(format!("beta has dimension {}, expected qp = {}", beta.dim(), data.dim())));
    }
    if gamma.r() != data.r {
        return Err(Error::Dimension(format!("Gamma is {}x{}, expected r = {}", gamma.r(), gamma.r(), data.r)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn linear1() -> SharedFunction {
        Arc::new(Linear { q: 1 })
    }

    #[test]
    fn design_single_parameter() {
        let x = build_design(&[1.0, 2.0], 1).unwrap();
        assert_eq!(x, DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
    }

    #[test]
    fn design_unit_covariate_two_parameters() {
        let x = build_design(&[1.0, 0.0], 2).unwrap();
        assert_eq!(x, DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn design_rejects_empty() {
        assert!(build_design(&[], 2).is_err());
        assert!(build_design(&[1.0], 0).is_err());
    }

    proptest! {
        // X_i Vec(B') = B V_i, exactly
        #[test]
        fn design_vec_identity(q in 1usize..4, p in 1usize..6, seed in any::<u64>()) {
            let mut rng = rng::seeded(seed);
            let v: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
            let bt = DMatrix::<f64>::from_fn(q, p, |_, _| rng.random_range(-3.0..3.0));
            let beta: Vec<f64> = (0..q).flat_map(|k| (0..p).map(move |j| (k, j))).map(|(k, j)| bt[(k, j)]).collect();
            let x = build_design(&v, q).unwrap();
            let lhs = &x * nalgebra::DVector::from_vec(beta.clone());
            let rhs = &bt * nalgebra::DVector::from_vec(v.clone());
            for k in 0..q {
                prop_assert_eq!(lhs[k], rhs[k]);
            }
            let mut phi = vec![0.0; q];
            linear_predictor(&v, q, &SparseCoefficients::from_dense(&beta), &mut phi);
            for k in 0..q {
                prop_assert!((phi[k] - rhs[k]).abs() <= 1e-12 * (1.0 + rhs[k].abs()));
            }
        }
    }

    #[test]
    fn logistic_examples() {
        let f = Logistic { amplitude: 1.0, t0: 1.0 };
        assert_eq!(f_vec(&f, &[0.0], &[0.0, 1.0, 2.0]), vec![0.5, 0.5, 0.5]);
        let g = Logistic { amplitude: 1.0, t0: 0.0 };
        assert!(g.eval(&[1e6], 1.0) < 1e-300);
        assert!(g.eval(&[f64::MAX], 1.0).is_finite());
        let lin = Linear { q: 1 };
        assert_eq!(f_vec(&lin, &[3.0], &[0.0, 5.0]), vec![3.0, 3.0]);
    }

    #[test]
    fn logistic_stays_in_open_range() {
        let f = Logistic { amplitude: 2.0, t0: 1.0 };
        let mut rng = rng::seeded(3);
        for _ in 0..10_000 {
            let phi = rng.random_range(-20.0..20.0);
            let t = rng.random_range(0.0..2.0);
            let v = f.eval(&[phi], t);
            assert!(v >= 0.0 && v <= 2.0 && v.is_finite());
            if ((t - 1.0) * phi).abs() < 30.0 {
                assert!(v > 0.0 && v < 2.0);
            }
        }
    }

    #[test]
    fn logistic_lipschitz_bound() {
        let (a, t0) = (1.5, 0.7);
        let f = Logistic { amplitude: a, t0 };
        let (tmin, tmax) = (0.0_f64, 2.0_f64);
        let k = a * (tmin - t0).abs().max((tmax - t0).abs()) / 4.0;
        let mut rng = rng::seeded(11);
        for _ in 0..100_000 {
            let x = rng.random_range(-10.0..10.0);
            let y = rng.random_range(-10.0..10.0);
            let t = rng.random_range(tmin..tmax);
            let gap = (f.eval(&[x], t) - f.eval(&[y], t)).abs();
            assert!(gap <= k * (x - y).abs() + 1e-15);
        }
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let fs: Vec<SharedFunction> = vec![
            Arc::new(Logistic { amplitude: 1.3, t0: 0.8 }),
            Arc::new(Logistic3),
            Arc::new(Linear { q: 3 }),
        ];
        for f in fs {
            let phi: Vec<f64> = (0..f.q()).map(|k| 0.3 + 0.4 * k as f64).collect();
            let mut g = vec![0.0; f.q()];
            f.grad_phi(&phi, 1.7, &mut g);
            for k in 0..f.q() {
                let h = 1e-6;
                let mut a = phi.clone();
                a[k] += h;
                let mut b = phi.clone();
                b[k] -= h;
                let fd = (f.eval(&a, 1.7) - f.eval(&b, 1.7)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7, "{} coord {k}", f.name());
            }
        }
    }

    #[test]
    fn registry_builds_and_rejects() {
        let reg = FunctionRegistry::with_builtins();
        let mut p = FunctionParams::new();
        p.insert("amplitude".into(), 2.0);
        assert_eq!(reg.build("logistic", &p).unwrap().eval(&[0.0], 3.0), 1.0);
        assert!(reg.build("nope", &p).is_err());
        p.insert("bogus".into(), 1.0);
        assert!(reg.build("logistic", &p).is_err());
        let mut reg = FunctionRegistry::empty();
        reg.register("const", |_| Ok(Arc::new(Linear { q: 1 }) as SharedFunction));
        assert!(reg.contains("const"));
    }

    #[test]
    fn marginal_cov_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let g = CovarianceParam::identity(2);
        assert_eq!(marginal_cov(&i2, &g, 1.0), i2.clone() * 2.0);
        let z = DMatrix::zeros(3, 2);
        assert_eq!(marginal_cov(&z, &g, 0.7), DMatrix::identity(3, 3) * 0.7);
    }

    fn random_spd(rng: &mut rng::Rng, r: usize) -> DMatrix<f64> {
        let a = DMatrix::<f64>::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(r, r) * 0.1
    }

    #[test]
    fn marginal_cov_weyl_and_rho_max_bound() {
        let mut rng = rng::seeded(5);
        for _ in 0..500 {
            let r = rng.random_range(1..4);
            let m = rng.random_range(1..7);
            let z = DMatrix::<f64>::from_fn(m, r, |_, _| rng.random_range(-2.0..2.0));
            let g = CovarianceParam::new(random_spd(&mut rng, r)).unwrap();
            let s2 = rng.random_range(0.05..3.0);
            let d = marginal_cov(&z, &g, s2);
            assert!(linalg::is_symmetric(&d, 0.0));
            assert!(Cholesky::new(d.clone()).is_some());
            let (lo, hi) = linalg::min_max_eigen(&d);
            assert!(lo >= s2 - 1e-10);
            let (_, ghi) = linalg::min_max_eigen(g.matrix());
            let zs = linalg::spectral_norm(&z);
            assert!(hi <= ghi * zs * zs + s2 + 1e-9);
        }
    }

    #[test]
    fn sparse_coefficients_invariants() {
        assert!(SparseCoefficients::new(4, vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseCoefficients::new(4, vec![4], vec![1.0]).is_err());
        assert!(SparseCoefficients::new(4, vec![1], vec![0.0]).is_err());
        let b = SparseCoefficients::new(4, vec![0, 3], vec![1.5, -2.0]).unwrap();
        assert_eq!(b.to_dense(), vec![1.5, 0.0, 0.0, -2.0]);
        assert_eq!(SparseCoefficients::from_dense(&b.to_dense()), b);
        assert_eq!(b.get(3), -2.0);
        assert_eq!(b.get(2), 0.0);
    }

    #[test]
    fn covariance_validation_and_triangle() {
        assert!(CovarianceParam::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(CovarianceParam::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        let g = CovarianceParam::from_lower_triangle(2, &[2.0, 0.3, 1.0]).unwrap();
        assert_eq!(g.matrix()[(0, 1)], 0.3);
        assert_eq!(g.lower_triangle(), vec![2.0, 0.3, 1.0]);
        assert_ne!(g.fingerprint(), CovarianceParam::identity(2).fingerprint());
        assert!(CovarianceParam::from_lower_triangle(2, &[1.0]).is_err());
    }

    fn skeleton(n: usize, m: usize, p: usize, r: usize, sigma2: f64, seed: u64) -> Dataset {
        let mut rng = rng::seeded(seed);
        let inds = (0..n)
            .map(|i| Individual {
                id: format!("id{i}"),
                times: (0..m).map(|j| j as f64 * 0.5).collect(),
                y: vec![0.0; m],
                z: DMatrix::from_fn(m, r, |a, b| if b == 0 { 1.0 } else { a as f64 * 0.5 }),
                v: (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        Dataset::new(inds, p, 1, r, sigma2).unwrap()
    }

    #[test]
    fn simulate_is_deterministic() {
        let d = skeleton(5, 4, 3, 2, 0.5, 1);
        let f = Logistic { amplitude: 1.0, t0: 1.0 };
        let b = SparseCoefficients::new(3, vec![1], vec![0.7]).unwrap();
        let g = CovarianceParam::identity(2);
        let a = simulate(&d, &f, &b, &g, 42).unwrap();
        let c = simulate(&d, &f, &b, &g, 42).unwrap();
        let bits = |d: &Dataset| d.individuals.iter().flat_map(|i| i.y.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&c));
        assert_ne!(bits(&a), bits(&simulate(&d, &f, &b, &g, 43).unwrap()));
    }

    #[test]
    fn simulate_rejects_wrong_dimensions() {
        let d = skeleton(2, 3, 3, 1, 1.0, 1);
        let b = SparseCoefficients::zeros(3);
        assert!(simulate(&d, linear1().as_ref(), &b, &CovarianceParam::identity(2), 1).is_err());
        assert!(simulate(&d, linear1().as_ref(), &SparseCoefficients::zeros(4), &CovarianceParam::identity(1), 1).is_err());
    }

    #[test]
    fn simulate_zero_mean_and_covariance_moments() {
        let d = skeleton(1, 3, 2, 2, 1.0, 9);
        let f = linear1();
        let b = SparseCoefficients::zeros(2);
        let g = CovarianceParam::from_lower_triangle(2, &[1.0, 0.3, 0.5]).unwrap();
        let reps = 10_000;
        let m = 3;
        let mut samples = Vec::with_capacity(reps);
        for s in 0..reps {
            let sim = simulate(&d, f.as_ref(), &b, &g, 1000 + s as u64).unwrap();
            samples.push(sim.individuals[0].y.clone());
        }
        let delta = marginal_cov(&d.individuals[0].z, &g, d.sigma2);
        for a in 0..m {
            let mean = samples.iter().map(|y| y[a]).sum::<f64>() / reps as f64;
            let se = (delta[(a, a)] / reps as f64).sqrt();
            assert!(mean.abs() < 4.0 * se, "mean {mean} se {se}");
        }
        for a in 0..m {
            for c in 0..m {
                let prods: Vec<f64> = samples.iter().map(|y| y[a] * y[c]).collect();
                let mean = prods.iter().sum::<f64>() / reps as f64;
                let var = prods.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
                let se = (var / reps as f64).sqrt();
                assert!((mean - delta[(a, c)]).abs() < 5.0 * se, "({a},{c}) {mean} vs {}", delta[(a, c)]);
            }
        }
    }
}
