//! Simulation-study harness: a grid of `(n, p, s0)` cells, replicated
//! simulate / fit / summarize runs and log-log rate regressions.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::design::{self, AssumptionConstants, AssumptionReport, CompatOptions, LineFit};
use crate::error::{Error, Result};
use crate::model::{self, CovarianceParam, Dataset, Individual, Linear, RegressionFunction, SparseCoefficients};
use crate::priors::{DimensionKind, DimensionPrior, InverseWishartPrior, Priors, SlabPrior};
use crate::rng;
use crate::sampler::{self, Move, SamplerConfig};
use crate::summary::{self, Metric, PosteriorSummary, METRICS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateScaling {
    /// Columns rescaled to Euclidean norm 1.
    UnitNorm,
    /// Columns rescaled to Euclidean norm `sqrt(n)`, entries of order one.
    SqrtN,
    Raw,
}

/// How the true parameters and the design of every replicate are generated.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRules {
    pub beta_magnitude: f64,
    pub gamma0_scale: f64,
    pub r: usize,
    pub m: usize,
    pub t_max: f64,
    pub sigma2: f64,
    pub covariates: CovariateScaling,
}

impl Default for TruthRules {
    fn default() -> Self {
        Self { beta_magnitude: 1.0, gamma0_scale: 1.0, r: 1, m: 5, t_max: 2.0, sigma2: 0.05, covariates: CovariateScaling::SqrtN }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    /// Upper end of the admissible bracket, recomputed per dataset.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub kind: DimensionKind,
    pub u: f64,
    pub a: f64,
    pub lambda: LambdaChoice,
    /// `None` gives `IW(r + 2, I_r)`.
    pub iw: Option<(f64, CovarianceParam)>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { kind: DimensionKind::GeometricDecay, u: 1.0, a: 1.0, lambda: LambdaChoice::Auto, iw: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub ns: Vec<usize>,
    pub ps: Vec<usize>,
    pub s0s: Vec<usize>,
    pub replicates: usize,
    pub truth: TruthRules,
    pub prior: PriorSpec,
    pub sampler: SamplerConfig,
    /// Multipliers `c` reported as `Pi(|S| > c s0 | Y)`.
    pub size_multipliers: Vec<f64>,
    /// `C1` in the compatibility numbers `phi((C1 + 1) s0)`; `None` skips them.
    pub compat_c1: Option<f64>,
    pub compat: CompatOptions,
    pub constants: AssumptionConstants,
    pub seed: u64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            ns: vec![50, 100, 200, 400],
            ps: vec![100],
            s0s: vec![2],
            replicates: 20,
            truth: TruthRules::default(),
            prior: PriorSpec::default(),
            sampler: SamplerConfig { iterations: 10_000, burn_in: 5_000, thin: 10, ..Default::default() },
            size_multipliers: vec![2.0, 3.0, 5.0],
            compat_c1: Some(2.0),
            compat: CompatOptions { budget: 20_000, sampled: Some(200), starts: 8, seed: 0 },
            constants: AssumptionConstants::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub n: usize,
    pub p: usize,
    pub s0: usize,
}

impl ExperimentPlan {
    /// Cells in plan order: `p` outermost, then `s0`, then `n`.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &p in &self.ps {
            for &s0 in &self.s0s {
                for &n in &self.ns {
                    out.push(Cell { n, p, s0 });
                }
            }
        }
        out
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        let mut issues = Vec::new();
        if self.ns.is_empty() || self.ps.is_empty() || self.s0s.is_empty() {
            issues.push("experiment: n, p and s0 grids must be non-empty".to_string());
        }
        if self.ns.contains(&0) || self.ps.contains(&0) {
            issues.push("experiment: n and p must be positive".into());
        }
        for &p in &self.ps {
            for &s0 in &self.s0s {
                if s0 > q * p {
                    issues.push(format!("experiment.s0: s0 = {s0} exceeds qp = {}", q * p));
                }
            }
        }
        if self.replicates == 0 {
            issues.push("experiment.replicates: must be at least 1".into());
        }
        let t = &self.truth;
        if !(t.sigma2 > 0.0 && t.sigma2.is_finite()) {
            issues.push("experiment.sigma2: must be positive".into());
        }
        if !(t.gamma0_scale > 0.0) {
            issues.push("experiment.gamma0_scale: must be positive".into());
        }
        if t.m == 0 || t.r == 0 {
            issues.push("experiment: m and r must be positive".into());
        }
        if !(t.beta_magnitude.is_finite()) {
            issues.push("experiment.beta_magnitude: must be finite".into());
        }
        if let LambdaChoice::Fixed(l) = self.prior.lambda {
            if !(l > 0.0 && l.is_finite()) {
                issues.push("prior.slab.lambda: must be positive".into());
            }
        }
        if let Err(Error::Config(v)) = self.sampler.validate(t.r) {
            issues.extend(v);
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Simulated replicate: design, truth and data.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub dataset: Dataset,
    pub beta0: SparseCoefficients,
    pub gamma0: CovarianceParam,
}

/// Builds the skeleton (covariates, times, `Z`) and the truth for one replicate
/// and simulates the responses.
pub fn generate(cell: Cell, q: usize, truth: &TruthRules, rf: &dyn RegressionFunction, seed: u64) -> Result<Replicate> {
    let mut rng = rng::stream(seed, 0);
    let (n, p) = (cell.n, cell.p);
    let mut v = DMatrix::<f64>::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    for mut col in v.column_iter_mut() {
        let norm = col.norm();
        let target = match truth.covariates {
            CovariateScaling::UnitNorm => 1.0,
            CovariateScaling::SqrtN => (n as f64).sqrt(),
            CovariateScaling::Raw => norm,
        };
        if norm > 0.0 {
            col *= target / norm;
        }
    }
    let times: Vec<f64> = if truth.m == 1 {
        vec![0.0]
    } else {
        (0..truth.m).map(|j| truth.t_max * j as f64 / (truth.m - 1) as f64).collect()
    };
    let z = DMatrix::from_fn(truth.m, truth.r, |j, k| times[j].powi(k as i32));
    let individuals = (0..n)
        .map(|i| Individual { id: format!("{}", i + 1), times: times.clone(), y: vec![0.0; truth.m], z: z.clone(), v: v.row(i).iter().copied().collect() })
        .collect();
    let skeleton = Dataset::new(individuals, p, q, truth.r, truth.sigma2)?;
    let d = q * p;
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(&mut rng);
    let mut support: Vec<usize> = idx[..cell.s0.min(d)].to_vec();
    support.sort_unstable();
    let values = support
        .iter()
        .map(|_| if rng.random::<bool>() { truth.beta_magnitude } else { -truth.beta_magnitude })
        .collect();
    let beta0 = if truth.beta_magnitude == 0.0 {
        SparseCoefficients::zeros(d)
    } else {
        SparseCoefficients::new(d, support, values)?
    };
    let gamma0 = CovarianceParam::scaled_identity(truth.r, truth.gamma0_scale)?;
    let dataset = model::simulate(&skeleton, rf, &beta0, &gamma0, rng::derive_seed(seed, 1))?;
    Ok(Replicate { dataset, beta0, gamma0 })
}

/// Fixed validation instance: `p = 4`, `q = 1`, `n = 30`, linear `f`,
/// random intercept with `Gamma0 = 0.5`, `sigma2 = 0.5`, three observations
/// per individual and `beta0 = (0.6, 0, -0.35, 0)`.
pub fn tiny_instance(seed: u64) -> Result<Replicate> {
    let mut rng = rng::seeded(seed);
    let times = vec![0.0, 1.0, 2.0];
    let individuals = (0..30)
        .map(|i| Individual {
            id: format!("{}", i + 1),
            times: times.clone(),
            y: vec![0.0; 3],
            z: DMatrix::from_element(3, 1, 1.0),
            v: (0..4).map(|_| StandardNormal.sample(&mut rng)).collect(),
        })
        .collect();
    let skeleton = Dataset::new(individuals, 4, 1, 1, 0.5)?;
    let beta0 = SparseCoefficients::new(4, vec![0, 2], vec![0.6, -0.35])?;
    let gamma0 = CovarianceParam::scaled_identity(1, 0.5)?;
    let dataset = model::simulate(&skeleton, &Linear { q: 1 }, &beta0, &gamma0, rng::derive_seed(seed, 1))?;
    Ok(Replicate { dataset, beta0, gamma0 })
}

/// Priors for one dataset; `lambda` resolves `Auto` against the design.
pub fn build_priors(spec: &PriorSpec, dataset: &Dataset, rf: &dyn RegressionFunction, l: [f64; 3]) -> Result<Priors> {
    let lambda = match spec.lambda {
        LambdaChoice::Fixed(v) => v,
        LambdaChoice::Auto => {
            let summary = design::design_summary(dataset, rf);
            design::auto_lambda(&summary, dataset.p, dataset.n(), l)
        }
    };
    let iw = match &spec.iw {
        Some((dof, scale)) => InverseWishartPrior::new(*dof, scale.clone())?,
        None => InverseWishartPrior::default_for(dataset.r),
    };
    Ok(Priors {
        dimension: DimensionPrior::new(spec.kind, spec.u, spec.a, dataset.p, dataset.dim())?,
        slab: SlabPrior::new(lambda)?,
        iw,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub cell: Cell,
    pub index: usize,
    /// Verdicts and margins of the assumption checks on replicate 0.
    pub assumptions: Option<AssumptionReport>,
    pub phi1: Option<f64>,
    pub phi2: Option<f64>,
    pub compat_exact: bool,
    pub x_star: f64,
    /// Whether the stability fit supports reporting `beta` metrics.
    pub beta_metrics: bool,
    /// Set when the sparsity surrogate `s0 log p <= n / 4` fails.
    pub flagged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub cell: Cell,
    pub cell_index: usize,
    pub replicate: usize,
    pub seed: u64,
    /// `None` on success.
    pub error: Option<String>,
    pub lambda: f64,
    pub summary: Option<PosteriorSummary>,
    /// `Pi(|S| > c s0 | Y)` for every plan multiplier.
    pub size_exceedance: Vec<f64>,
    pub within_acceptance: f64,
}

impl ResultRow {
    /// Posterior median of `metric`; NaN when unavailable.
    pub fn median(&self, metric: Metric) -> f64 {
        self.summary.as_ref().and_then(|s| s.metric(metric)).map_or(f64::NAN, |m| m.quantiles[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub cells: Vec<CellReport>,
    pub rows: Vec<ResultRow>,
    /// Wall-clock seconds per row, in row order.
    pub seconds: Vec<f64>,
}

fn cell_report(plan: &ExperimentPlan, rf: &dyn RegressionFunction, index: usize, cell: Cell) -> CellReport {
    let mut report = CellReport {
        cell,
        index,
        assumptions: None,
        phi1: None,
        phi2: None,
        compat_exact: false,
        x_star: f64::NAN,
        beta_metrics: false,
        flagged: cell.s0 as f64 * (cell.p as f64).ln() > 0.25 * cell.n as f64,
        error: None,
    };
    let seed = replicate_seed(plan.seed, index, 0);
    let mut run = || -> Result<()> {
        let rep = generate(cell, rf.q(), &plan.truth, rf, seed)?;
        let priors = build_priors(&plan.prior, &rep.dataset, rf, plan.constants.l)?;
        let ar = design::check_assumptions(
            &rep.dataset,
            rf,
            &rep.beta0,
            &rep.gamma0,
            priors.slab.lambda,
            &priors.dimension,
            &plan.constants,
            rng::derive_seed(seed, 7),
        )?;
        report.x_star = ar.summary.x_star;
        report.beta_metrics = ar.stability.as_ref().is_some_and(|s| s.r2 >= plan.constants.stability_r2);
        if let Some(c1) = plan.compat_c1 {
            let s = (((c1 + 1.0) * cell.s0 as f64).round() as usize).clamp(1, rep.dataset.dim());
            let opts = CompatOptions { seed: rng::derive_seed(seed, 8), ..plan.compat };
            if let (Ok(a), Ok(b)) = (design::phi1(&ar.summary.x, s, &opts), design::phi2(&ar.summary.x, s, &opts)) {
                report.phi1 = Some(a.value);
                report.phi2 = Some(b.value);
                report.compat_exact = a.exact && b.exact;
            }
        }
        report.assumptions = Some(ar);
        Ok(())
    };
    if let Err(e) = run() {
        report.error = Some(e.to_string());
    }
    report
}

/// Seed of replicate `rep` in cell `cell`.
pub fn replicate_seed(master: u64, cell: usize, rep: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(master, cell as u64), rep as u64)
}

fn run_replicate(plan: &ExperimentPlan, rf: &dyn RegressionFunction, report: &CellReport, rep: usize) -> ResultRow {
    let cell = report.cell;
    let seed = replicate_seed(plan.seed, report.index, rep);
    let mut row = ResultRow {
        cell,
        cell_index: report.index,
        replicate: rep,
        seed,
        error: None,
        lambda: f64::NAN,
        summary: None,
        size_exceedance: vec![],
        within_acceptance: f64::NAN,
    };
    let run = |row: &mut ResultRow| -> Result<()> {
        let data = generate(cell, rf.q(), &plan.truth, rf, seed)?;
        let priors = build_priors(&plan.prior, &data.dataset, rf, plan.constants.l)?;
        row.lambda = priors.slab.lambda;
        let config = SamplerConfig { seed: rng::derive_seed(seed, 2), ..plan.sampler.clone() };
        let chain = sampler::run_chain(&data.dataset, rf, &priors, &config)?;
        let thresholds: Vec<(Metric, f64)> = vec![];
        let mut s = summary::posterior_summaries(&chain, &data.dataset, rf, Some((&data.beta0, &data.gamma0)), &thresholds)?;
        if !report.beta_metrics {
            for m in s.metrics.iter_mut().filter(|m| m.metric.is_beta_metric()) {
                m.quantiles = [f64::NAN; 3];
            }
        }
        row.size_exceedance = plan.size_multipliers.iter().map(|c| s.size_exceedance(c * cell.s0 as f64)).collect();
        row.within_acceptance = chain.stats(Move::Within).rate();
        row.summary = Some(s);
        Ok(())
    };
    if let Err(e) = run(&mut row) {
        row.error = Some(format!("{}: {e}", e.class()));
    }
    row
}

/// Runs every cell and replicate. Rows come back in plan order; failures are
/// recorded in the row rather than aborting the plan.
pub fn run_plan(plan: &ExperimentPlan, rf: &dyn RegressionFunction) -> Result<ExperimentResult> {
    plan.validate(rf.q())?;
    let cells: Vec<CellReport> =
        plan.cells().into_par_iter().enumerate().map(|(i, c)| cell_report(plan, rf, i, c)).collect();
    let tasks: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..plan.replicates).map(move |r| (c, r))).collect();
    let out: Vec<(ResultRow, f64)> = tasks
        .par_iter()
        .map(|&(c, r)| {
            let start = Instant::now();
            let row = run_replicate(plan, rf, &cells[c], r);
            (row, start.elapsed().as_secs_f64())
        })
        .collect();
    let (rows, seconds) = out.into_iter().unzip();
    Ok(ExperimentResult { cells, rows, seconds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub metric: Metric,
    pub p: usize,
    pub s0: usize,
    pub fit: LineFit,
    /// `(n, median over replicates of the posterior median)`.
    pub points: Vec<(usize, f64)>,
}

/// Median over successful replicates of the posterior median of `metric`, per `n`.
pub fn median_by_n(rows: &[ResultRow], metric: Metric, p: usize, s0: usize) -> Vec<(usize, f64)> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.cell.p == p && r.cell.s0 == s0 && r.error.is_none()) {
        let v = row.median(metric);
        if v.is_finite() {
            groups.entry(row.cell.n).or_default().push(v);
        }
    }
    groups.into_iter().map(|(n, v)| (n, summary::median(&v))).collect()
}

/// Least-squares fit of `log median metric` against `log n` for fixed `(p, s0)`.
pub fn rate_regression(rows: &[ResultRow], metric: Metric, p: usize, s0: usize) -> Result<RateFit> {
    let points: Vec<(usize, f64)> = median_by_n(rows, metric, p, s0).into_iter().filter(|(_, v)| *v > 0.0).collect();
    if points.len() < 4 {
        return Err(Error::Insufficient(format!(
            "rate regression of {} needs at least 4 values of n with a positive median, got {}",
            metric.name(),
            points.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    Ok(RateFit { metric, p, s0, fit: design::least_squares(&xs, &ys), points })
}

/// Mean over replicates of `Pi(|S| > c s0 | Y)` per `n`, for multiplier index `k`.
pub fn exceedance_by_n(rows: &[ResultRow], k: usize, p: usize, s0: usize) -> Vec<(usize, f64)> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.cell.p == p && r.cell.s0 == s0 && r.error.is_none()) {
        if let Some(v) = row.size_exceedance.get(k) {
            groups.entry(row.cell.n).or_default().push(*v);
        }
    }
    groups.into_iter().map(|(n, v)| (n, v.iter().sum::<f64>() / v.len() as f64)).collect()
}

/// Rate fits for every `(p, s0)` group and metric that has enough points.
pub fn all_rate_fits(plan: &ExperimentPlan, rows: &[ResultRow]) -> Vec<RateFit> {
    let mut out = Vec::new();
    for &p in &plan.ps {
        for &s0 in &plan.s0s {
            for m in METRICS {
                if let Ok(fit) = rate_regression(rows, m, p, s0) {
                    out.push(fit);
                }
            }
        }
    }
    out
}
