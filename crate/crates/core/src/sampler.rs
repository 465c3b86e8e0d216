//! Trans-dimensional Metropolis-within-Gibbs sampler over `(S, beta_S, Gamma)`.
//!
//! Moves: ADD draws a new coordinate from the Laplace slab, DELETE drops one,
//! SWAP moves a value from an active to an inactive coordinate, WITHIN is a
//! Gaussian random walk on all active values and GAMMA proposes
//! `Gamma' ~ IW(kappa, (kappa - r - 1) Gamma)`. Move probabilities are
//! renormalized over the moves feasible at the current support size.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::{fill_predictors, GammaFactors, Scratch};
use crate::model::{self, CovarianceParam, Dataset, RegressionFunction, SparseCoefficients};
use crate::priors::{InverseWishartPrior, Priors};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Move {
    Add,
    Delete,
    Swap,
    Within,
    Gamma,
}

pub const MOVES: [Move; 5] = [Move::Add, Move::Delete, Move::Swap, Move::Within, Move::Gamma];

impl Move {
    pub fn name(self) -> &'static str {
        match self {
            Move::Add => "add",
            Move::Delete => "delete",
            Move::Swap => "swap",
            Move::Within => "within",
            Move::Gamma => "gamma",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoveProbabilities {
    pub add: f64,
    pub delete: f64,
    pub swap: f64,
    pub within: f64,
    pub gamma: f64,
}

impl Default for MoveProbabilities {
    fn default() -> Self {
        Self { add: 0.2, delete: 0.2, swap: 0.2, within: 0.25, gamma: 0.15 }
    }
}

impl MoveProbabilities {
    pub fn get(&self, m: Move) -> f64 {
        match m {
            Move::Add => self.add,
            Move::Delete => self.delete,
            Move::Swap => self.swap,
            Move::Within => self.within,
            Move::Gamma => self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Post-burn-in iterations.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub moves: MoveProbabilities,
    /// Initial standard deviation of the WITHIN random walk.
    pub rw_scale: f64,
    /// Robbins–Monro adaptation of the random-walk scale during burn-in.
    pub adapt: bool,
    /// Degrees of freedom `kappa` of the GAMMA proposal.
    pub gamma_dof: f64,
    pub update_gamma: bool,
    /// Support-size cap; `None` means `min(qp, n)`.
    pub max_support: Option<usize>,
    pub seed: u64,
    /// Warm start; `(empty support, I_r)` when absent.
    pub init: Option<(SparseCoefficients, CovarianceParam)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: 5_000,
            thin: 10,
            moves: MoveProbabilities::default(),
            rw_scale: 0.1,
            adapt: true,
            gamma_dof: 50.0,
            update_gamma: true,
            max_support: None,
            seed: 1,
            init: None,
        }
    }
}

pub const TARGET_ACCEPTANCE: f64 = 0.35;

impl SamplerConfig {
    pub fn validate(&self, r: usize) -> Result<()> {
        let mut issues = Vec::new();
        let probs: Vec<f64> = MOVES.iter().map(|m| self.moves.get(*m)).collect();
        if probs.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            issues.push("sampler.moves: every move probability must be positive".to_string());
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            issues.push(format!("sampler.moves: probabilities sum to {total}, expected 1"));
        }
        if self.gamma_dof <= r as f64 + 1.0 || !self.gamma_dof.is_finite() {
            issues.push(format!("sampler.gamma_dof: must exceed r + 1 = {}", r + 1));
        }
        if self.thin == 0 {
            issues.push("sampler.thin: must be at least 1".into());
        }
        if !(self.rw_scale > 0.0 && self.rw_scale.is_finite()) {
            issues.push("sampler.rw_scale: must be positive".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub iter: usize,
    pub logpost: f64,
    pub loglik: f64,
    pub support: Vec<usize>,
    pub values: Vec<f64>,
    /// Row-major lower triangle of `Gamma`.
    pub gamma_lt: Vec<f64>,
}

impl ChainRecord {
    pub fn beta(&self, dim: usize) -> SparseCoefficients {
        SparseCoefficients::from_parts_unchecked(dim, self.support.clone(), self.values.clone())
    }

    pub fn gamma(&self, r: usize) -> Result<CovarianceParam> {
        CovarianceParam::from_lower_triangle(r, &self.gamma_lt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub records: Vec<ChainRecord>,
    /// Post-burn-in acceptance counters, indexed like [`MOVES`].
    pub acceptance: [MoveStats; 5],
    pub burn_in_acceptance: [MoveStats; 5],
    /// Random-walk scale in force after burn-in.
    pub rw_scale: f64,
    pub dim: usize,
    pub r: usize,
    pub cap: usize,
}

impl PosteriorChain {
    pub fn stats(&self, m: Move) -> MoveStats {
        self.acceptance[m.index()]
    }

    pub fn size_histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.cap + 1];
        for rec in &self.records {
            h[rec.support.len()] += 1;
        }
        h
    }
}

/// Resolved support cap `min(qp, n)` unless configured.
pub fn support_cap(dataset: &Dataset, config: &SamplerConfig) -> usize {
    config.max_support.unwrap_or(dataset.dim().min(dataset.n())).min(dataset.dim())
}

/// Single-chain state machine. Keeps the linear predictors and the `Delta_i`
/// factors of the current state so each move costs one likelihood pass.
pub struct Sampler<'a> {
    data: &'a Dataset,
    rf: &'a dyn RegressionFunction,
    priors: &'a Priors,
    config: &'a SamplerConfig,
    cap: usize,
    support: Vec<usize>,
    values: Vec<f64>,
    gamma: CovarianceParam,
    factors: GammaFactors,
    phis: Vec<f64>,
    proposal: Vec<f64>,
    scratch: Scratch,
    loglik: f64,
    log_prior_gamma: f64,
    log_scale: f64,
    adapt_steps: u64,
    stats: [MoveStats; 5],
    rng: rng::Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(
        data: &'a Dataset,
        rf: &'a dyn RegressionFunction,
        priors: &'a Priors,
        config: &'a SamplerConfig,
        beta: &SparseCoefficients,
        gamma: CovarianceParam,
        rng: rng::Rng,
    ) -> Result<Self> {
        config.validate(data.r)?;
        model::check_dims(data, rf, beta, &gamma)?;
        if priors.dimension.max_dim != data.dim() || priors.iw.r() != data.r {
            return Err(Error::Dimension("priors do not match the dataset dimensions".into()));
        }
        let cap = support_cap(data, config);
        if beta.size() > cap {
            return Err(Error::InvalidParameter(format!("initial support size {} exceeds the cap {cap}", beta.size())));
        }
        let factors = GammaFactors::new(data, &gamma)?;
        let mut phis = Vec::new();
        fill_predictors(data, beta, &mut phis);
        let mut scratch = Scratch::default();
        let loglik = factors.loglik_from_predictors(data, rf, &phis, &mut scratch, true);
        let log_prior_gamma = priors.iw.log_density(&gamma)?;
        let sampler = Self {
            data,
            rf,
            priors,
            config,
            cap,
            support: beta.support().to_vec(),
            values: beta.values().to_vec(),
            gamma,
            factors,
            proposal: phis.clone(),
            phis,
            scratch,
            loglik,
            log_prior_gamma,
            log_scale: config.rw_scale.ln(),
            adapt_steps: 0,
            stats: [MoveStats::default(); 5],
            rng,
        };
        let lp = sampler.logpost()?;
        if !lp.is_finite() {
            return Err(Error::NonFinite(format!("log-posterior at the initial state is {lp}")));
        }
        Ok(sampler)
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn beta(&self) -> SparseCoefficients {
        SparseCoefficients::from_parts_unchecked(self.data.dim(), self.support.clone(), self.values.clone())
    }

    pub fn gamma(&self) -> &CovarianceParam {
        &self.gamma
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn rw_scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn stats(&self) -> [MoveStats; 5] {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = [MoveStats::default(); 5];
    }

    pub fn into_rng(self) -> rng::Rng {
        self.rng
    }

    pub fn logpost(&self) -> Result<f64> {
        let beta = self.beta();
        Ok(self.loglik + crate::priors::log_prior_beta(&beta, &self.priors.dimension, &self.priors.slab)? + self.log_prior_gamma)
    }

    fn feasible(&self, m: Move, s: usize) -> bool {
        let d = self.data.dim();
        match m {
            Move::Add => s < self.cap && s < d,
            Move::Delete => s > 0,
            Move::Swap => s > 0 && s < d,
            Move::Within => s > 0,
            Move::Gamma => self.config.update_gamma,
        }
    }

    // probability of choosing `m` at support size `s`
    fn move_prob(&self, m: Move, s: usize) -> f64 {
        if !self.feasible(m, s) {
            return 0.0;
        }
        let total: f64 = MOVES.iter().filter(|x| self.feasible(**x, s)).map(|x| self.config.moves.get(*x)).sum();
        self.config.moves.get(m) / total
    }

    fn choose_move(&mut self) -> Option<Move> {
        let s = self.support.len();
        let total: f64 = MOVES.iter().filter(|m| self.feasible(**m, s)).map(|m| self.config.moves.get(*m)).sum();
        if total <= 0.0 {
            return None;
        }
        let mut u = self.rng.random::<f64>() * total;
        let mut last = None;
        for m in MOVES {
            if !self.feasible(m, s) {
                continue;
            }
            last = Some(m);
            let p = self.config.moves.get(m);
            if u < p {
                return Some(m);
            }
            u -= p;
        }
        last
    }

    fn shift_predictors(&mut self, j: usize, delta: f64) {
        let (p, q) = (self.data.p, self.data.q);
        let (block, cov) = (j / p, j % p);
        for (i, ind) in self.data.individuals.iter().enumerate() {
            self.proposal[i * q + block] += ind.v[cov] * delta;
        }
    }

    fn proposal_loglik(&mut self) -> f64 {
        self.factors.loglik_from_predictors(self.data, self.rf, &self.proposal, &mut self.scratch, true)
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        if log_ratio.is_nan() {
            return false;
        }
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }

    // index of the k-th coordinate outside the sorted support
    fn kth_inactive(&self, mut k: usize) -> usize {
        let mut next = 0;
        for &a in &self.support {
            let gap = a - next;
            if k < gap {
                return next + k;
            }
            k -= gap;
            next = a + 1;
        }
        next + k
    }

    /// One Metropolis–Hastings step; `adapt` enables the scale update.
    pub fn step(&mut self, adapt: bool) {
        let Some(m) = self.choose_move() else { return };
        self.stats[m.index()].proposed += 1;
        let accepted = match m {
            Move::Add => self.add_move(),
            Move::Delete => self.delete_move(),
            Move::Swap => self.swap_move(),
            Move::Within => self.within_move(adapt),
            Move::Gamma => self.gamma_move(),
        };
        if accepted {
            self.stats[m.index()].accepted += 1;
        }
    }

    fn add_move(&mut self) -> bool {
        let s = self.support.len();
        let d = self.data.dim();
        let pick = self.rng.random_range(0..d - s);
        let j = self.kth_inactive(pick);
        let slab = self.priors.slab;
        let b = slab.sample(&mut self.rng);
        self.proposal.copy_from_slice(&self.phis);
        self.shift_predictors(j, b);
        let new_ll = self.proposal_loglik();
        let dp = &self.priors.dimension;
        let log_ratio = new_ll - self.loglik + dp.log_pmf(s + 1) - dp.log_pmf(s) + self.move_prob(Move::Delete, s + 1).ln()
            - self.move_prob(Move::Add, s).ln();
        if self.accept(log_ratio) {
            let pos = self.support.partition_point(|&a| a < j);
            self.support.insert(pos, j);
            self.values.insert(pos, b);
            std::mem::swap(&mut self.phis, &mut self.proposal);
            self.loglik = new_ll;
            return true;
        }
        false
    }

    fn delete_move(&mut self) -> bool {
        let s = self.support.len();
        let k = self.rng.random_range(0..s);
        let (j, b) = (self.support[k], self.values[k]);
        self.proposal.copy_from_slice(&self.phis);
        self.shift_predictors(j, -b);
        let new_ll = self.proposal_loglik();
        let dp = &self.priors.dimension;
        let log_ratio = new_ll - self.loglik + dp.log_pmf(s - 1) - dp.log_pmf(s) + self.move_prob(Move::Add, s - 1).ln()
            - self.move_prob(Move::Delete, s).ln();
        if self.accept(log_ratio) {
            self.support.remove(k);
            self.values.remove(k);
            std::mem::swap(&mut self.phis, &mut self.proposal);
            self.loglik = new_ll;
            return true;
        }
        false
    }

    fn swap_move(&mut self) -> bool {
        let s = self.support.len();
        let d = self.data.dim();
        let k = self.rng.random_range(0..s);
        let pick = self.rng.random_range(0..d - s);
        let j_new = self.kth_inactive(pick);
        let (j_old, b) = (self.support[k], self.values[k]);
        self.proposal.copy_from_slice(&self.phis);
        self.shift_predictors(j_old, -b);
        self.shift_predictors(j_new, b);
        let new_ll = self.proposal_loglik();
        if self.accept(new_ll - self.loglik) {
            self.support.remove(k);
            self.values.remove(k);
            let pos = self.support.partition_point(|&a| a < j_new);
            self.support.insert(pos, j_new);
            self.values.insert(pos, b);
            std::mem::swap(&mut self.phis, &mut self.proposal);
            self.loglik = new_ll;
            return true;
        }
        false
    }

    fn within_move(&mut self, adapt: bool) -> bool {
        let scale = self.log_scale.exp();
        let lambda = self.priors.slab.lambda;
        self.proposal.copy_from_slice(&self.phis);
        let mut fresh = self.values.clone();
        let mut log_prior = 0.0;
        for k in 0..fresh.len() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            fresh[k] += scale * z;
            log_prior += lambda * (self.values[k].abs() - fresh[k].abs());
        }
        let log_ratio = if fresh.iter().any(|v| *v == 0.0) {
            f64::NEG_INFINITY
        } else {
            for k in 0..fresh.len() {
                let j = self.support[k];
                let delta = fresh[k] - self.values[k];
                self.shift_predictors(j, delta);
            }
            let new_ll = self.proposal_loglik();
            new_ll - self.loglik + log_prior
        };
        if adapt {
            self.adapt_steps += 1;
            let alpha = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
            let gain = (self.adapt_steps as f64).powf(-0.6);
            self.log_scale = (self.log_scale + gain * (alpha - TARGET_ACCEPTANCE)).clamp(-12.0, 5.0);
        }
        if self.accept(log_ratio) {
            self.loglik += log_ratio - log_prior;
            self.values = fresh;
            std::mem::swap(&mut self.phis, &mut self.proposal);
            return true;
        }
        false
    }

    fn gamma_move(&mut self) -> bool {
        let r = self.data.r as f64;
        let kappa = self.config.gamma_dof;
        let forward = match self.proposal_kernel(&self.gamma, kappa, r) {
            Ok(k) => k,
            Err(_) => return false,
        };
        let candidate = forward.sample(&mut self.rng);
        let Ok(backward) = self.proposal_kernel(&candidate, kappa, r) else { return false };
        let Ok(factors) = GammaFactors::new(self.data, &candidate) else { return false };
        let new_ll = factors.loglik_from_predictors(self.data, self.rf, &self.phis, &mut self.scratch, true);
        let Ok(new_prior) = self.priors.iw.log_density(&candidate) else { return false };
        let (Ok(q_fwd), Ok(q_bwd)) = (forward.log_density(&candidate), backward.log_density(&self.gamma)) else {
            return false;
        };
        let log_ratio = new_ll - self.loglik + new_prior - self.log_prior_gamma + q_bwd - q_fwd;
        if self.accept(log_ratio) {
            self.gamma = candidate;
            self.factors = factors;
            self.loglik = new_ll;
            self.log_prior_gamma = new_prior;
            return true;
        }
        false
    }

    fn proposal_kernel(&self, center: &CovarianceParam, kappa: f64, r: f64) -> Result<InverseWishartPrior> {
        let scale = CovarianceParam::new(center.matrix() * (kappa - r - 1.0))?;
        InverseWishartPrior::new(kappa, scale)
    }

    /// Recomputes predictors and the log-likelihood from scratch to shed
    /// rounding drift of the incremental updates.
    pub fn refresh(&mut self) {
        let beta = self.beta();
        fill_predictors(self.data, &beta, &mut self.phis);
        self.proposal.resize(self.phis.len(), 0.0);
        self.loglik = self.factors.loglik_from_predictors(self.data, self.rf, &self.phis, &mut self.scratch, true);
    }

    pub fn record(&self, iter: usize) -> Result<ChainRecord> {
        Ok(ChainRecord {
            iter,
            logpost: self.logpost()?,
            loglik: self.loglik,
            support: self.support.clone(),
            values: self.values.clone(),
            gamma_lt: self.gamma.lower_triangle(),
        })
    }
}

const REFRESH_EVERY: usize = 1000;

/// Runs one chain: `burn_in` adaptive steps followed by `iterations` steps with
/// a frozen kernel, recording every `thin`-th state.
pub fn run_chain(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    priors: &Priors,
    config: &SamplerConfig,
) -> Result<PosteriorChain> {
    let (beta, gamma) = match &config.init {
        Some((b, g)) => (b.clone(), g.clone()),
        None => (SparseCoefficients::zeros(dataset.dim()), CovarianceParam::identity(dataset.r)),
    };
    let mut sampler = Sampler::new(dataset, rf, priors, config, &beta, gamma, rng::seeded(config.seed))?;
    for it in 0..config.burn_in {
        sampler.step(config.adapt);
        if (it + 1) % REFRESH_EVERY == 0 {
            sampler.refresh();
        }
    }
    let burn_in_acceptance = sampler.stats();
    sampler.reset_stats();
    let mut records = Vec::with_capacity(config.iterations / config.thin + 1);
    for it in 0..config.iterations {
        sampler.step(false);
        if (it + 1) % REFRESH_EVERY == 0 {
            sampler.refresh();
        }
        if (it + 1) % config.thin == 0 {
            let rec = sampler.record(config.burn_in + it + 1)?;
            if !rec.logpost.is_finite() {
                return Err(Error::NonFinite(format!("log-posterior {} at iteration {}", rec.logpost, rec.iter)));
            }
            records.push(rec);
        }
    }
    Ok(PosteriorChain {
        records,
        acceptance: sampler.stats(),
        burn_in_acceptance,
        rw_scale: sampler.rw_scale(),
        dim: dataset.dim(),
        r: dataset.r,
        cap: sampler.cap(),
    })
}

/// Independent chains in parallel; chain `c` uses seed `derive_seed(config.seed, c)`.
pub fn run_chains(
    dataset: &Dataset,
    rf: &dyn RegressionFunction,
    priors: &Priors,
    config: &SamplerConfig,
    chains: usize,
) -> Result<Vec<PosteriorChain>> {
    (0..chains)
        .into_par_iter()
        .map(|c| {
            let cfg = SamplerConfig { seed: rng::derive_seed(config.seed, c as u64), ..config.clone() };
            run_chain(dataset, rf, priors, &cfg)
        })
        .collect()
}
