//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line with the
//! measured quantities; the test fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::gamma_ur;

use sparse_nlme::design::{self, column_norm_max, phi1, phi2, CompatOptions, StabilityOptions};
use sparse_nlme::divergences::{dn, g_squared, gaussian_kl_variation, gaussian_renyi_half};
use sparse_nlme::experiments::{exceedance_by_n, rate_regression, run_plan, tiny_instance, ExperimentPlan, ExperimentResult};
use sparse_nlme::gof::{chi_square_pvalue, ks_pvalue};
use sparse_nlme::model::{self, marginal_cov, Linear, Logistic};
use sparse_nlme::oracle::{enumerate_posterior, GammaMode, OracleOptions};
use sparse_nlme::priors::{DimensionPrior, InverseWishartPrior, Priors, SlabPrior};
use sparse_nlme::rng;
use sparse_nlme::sampler::{run_chain, Sampler, SamplerConfig};
use sparse_nlme::summary::Metric;
use sparse_nlme::{CovarianceParam, Dataset, Individual, SparseCoefficients};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- criterion 1

fn oracle_equivalence() -> Outcome {
    let rep = tiny_instance(1).map_err(|e| e.to_string())?;
    let rf = Linear { q: 1 };
    let priors = Priors {
        dimension: DimensionPrior::default_for(4, 4),
        slab: SlabPrior::new(1.0).unwrap(),
        iw: InverseWishartPrior::default_for(1),
    };
    let start = Instant::now();
    let oracle = enumerate_posterior(&rep.dataset, &rf, &priors, &GammaMode::Fixed(rep.gamma0.clone()), &OracleOptions::default())
        .map_err(|e| e.to_string())?;
    let config = SamplerConfig {
        iterations: 210_000,
        burn_in: 10_000,
        thin: 1,
        update_gamma: false,
        max_support: Some(2),
        seed: 1,
        init: Some((SparseCoefficients::zeros(4), rep.gamma0.clone())),
        ..SamplerConfig::default()
    };
    let chain = run_chain(&rep.dataset, &rf, &priors, &config).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    let draws = chain.records.len() as f64;
    let tv = 0.5
        * oracle
            .supports
            .iter()
            .map(|s| {
                let freq = chain.records.iter().filter(|r| r.support == s.support).count() as f64 / draws;
                (freq - s.probability).abs()
            })
            .sum::<f64>();
    check(
        tv <= 0.05 && seconds < 60.0 && draws >= 2e5,
        format!("TV = {tv:.4} (<= 0.05) over {draws} draws, {seconds:.1} s (< 60 s)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

fn log_normal_1d(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mu).powi(2) / var)
}

/// `(K, V, R)` of `N(f0, v0)` against `N(f, v)` by quadrature.
fn quadrature_divergences(f: f64, v: f64, f0: f64, v0: f64) -> (f64, f64, f64) {
    let s = v.sqrt().max(v0.sqrt());
    let (a, b) = (f.min(f0) - 12.0 * s, f.max(f0) + 12.0 * s);
    let lr = |x: f64| log_normal_1d(x, f0, v0) - log_normal_1d(x, f, v);
    let p0 = |x: f64| log_normal_1d(x, f0, v0).exp();
    let k = simpson(&|x| p0(x) * lr(x), a, b, 1e-12);
    let var = simpson(&|x| p0(x) * (lr(x) - k).powi(2), a, b, 1e-12);
    let aff = simpson(&|x| (0.5 * (log_normal_1d(x, f, v) + log_normal_1d(x, f0, v0))).exp(), a, b, 1e-12);
    (k, var, -aff.ln())
}

fn random_spd(rng: &mut impl Rng, r: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(r, r, |_, _| StandardNormal.sample(rng));
    &a * a.transpose() + DMatrix::identity(r, r) * floor
}

fn log_normal(x: &DVector<f64>, mu: &DVector<f64>, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let d = x - mu;
    let w = chol.l().solve_lower_triangular(&d).unwrap();
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (d.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + w.norm_squared())
}

fn divergence_correctness() -> Outcome {
    // worked example: equal means, variances 1 (truth) and 2
    let one = DMatrix::from_element(1, 1, 1.0);
    let two = DMatrix::from_element(1, 1, 2.0);
    let (k, v) = gaussian_kl_variation(&[0.0], &two, &one).unwrap();
    let r = gaussian_renyi_half(&[0.0], &two, &one).unwrap().0;
    let (qk, qv, qr) = quadrature_divergences(0.0, 2.0, 0.0, 1.0);
    let six = |x: f64| format!("{x:.5e}");
    let worked = six(k) == "9.65736e-2" && six(v) == "1.25000e-1" && six(r) == "2.94458e-2";
    let worked_quad = (k - qk).abs() < 1e-8 && (v - qv).abs() < 1e-8 && (r - qr).abs() < 1e-8;

    let mut rng = rng::seeded(2);
    let mut worst_quad: f64 = 0.0;
    for _ in 0..50 {
        let f: f64 = StandardNormal.sample(&mut rng);
        let f0: f64 = StandardNormal.sample(&mut rng);
        let (var, var0) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let dm = DMatrix::from_element(1, 1, var);
        let dm0 = DMatrix::from_element(1, 1, var0);
        let (k, v) = gaussian_kl_variation(&[f - f0], &dm, &dm0).unwrap();
        let r = gaussian_renyi_half(&[f - f0], &dm, &dm0).unwrap().0;
        let (qk, qv, qr) = quadrature_divergences(f, var, f0, var0);
        worst_quad = worst_quad.max((k - qk).abs()).max((v - qv).abs()).max((r - qr).abs());
    }

    // m = 2: Monte Carlo with 10^6 draws from the truth per instance
    const DRAWS: usize = 1_000_000;
    let instances: Vec<(DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>)> = (0..50)
        .map(|_| {
            let f = DVector::from_fn(2, |_, _| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            let f0 = DVector::from_fn(2, |_, _| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            let z = DMatrix::<f64>::from_fn(2, 1, |_, _| StandardNormal.sample(&mut rng));
            let z0 = DMatrix::<f64>::from_fn(2, 1, |_, _| StandardNormal.sample(&mut rng));
            let d = &z * random_spd(&mut rng, 1, 0.1) * z.transpose() + DMatrix::identity(2, 2) * rng.random_range(0.3..1.5);
            let d0 = &z0 * random_spd(&mut rng, 1, 0.1) * z0.transpose() + DMatrix::identity(2, 2) * rng.random_range(0.3..1.5);
            (f, d, f0, d0)
        })
        .collect();
    let worst_z: Vec<[f64; 3]> = instances
        .par_iter()
        .enumerate()
        .map(|(i, (f, d, f0, d0))| {
            let diff: Vec<f64> = (f - f0).iter().copied().collect();
            let (k, v) = gaussian_kl_variation(&diff, d, d0).unwrap();
            let r = gaussian_renyi_half(&diff, d, d0).unwrap().0;
            let (c, c0) = (d.clone().cholesky().unwrap(), d0.clone().cholesky().unwrap());
            let mut stream = rng::stream(3, i as u64);
            let mut ls = Vec::with_capacity(DRAWS);
            for _ in 0..DRAWS {
                let u = DVector::from_fn(2, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut stream));
                let x = f0 + c0.l() * u;
                ls.push(log_normal(&x, f0, &c0) - log_normal(&x, f, &c));
            }
            // l = u'Au + b'u + const with u ~ N(0, I); exact cumulants give exact sampling SDs
            let dinv = d.clone().try_inverse().unwrap();
            let a = (c0.l().transpose() * &dinv * c0.l() - DMatrix::identity(2, 2)) * 0.5;
            let b = c0.l().transpose() * &dinv * (f0 - f);
            let a2 = &a * &a;
            let k2 = 2.0 * a2.trace() + b.dot(&b);
            let k4 = 48.0 * (&a2 * &a2).trace() + 48.0 * b.dot(&(&a2 * &b));
            let n = DRAWS as f64;
            let mean = ls.iter().sum::<f64>() / n;
            let var = ls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se_k = (k2 / n).sqrt();
            let se_v = ((k4 + 2.0 * k2 * k2) / n).sqrt();
            // E[w^2] = 1 under the truth, so Var w = 1 - exp(-2R)
            let wm = ls.iter().map(|l| (-0.5 * l).exp()).sum::<f64>() / n;
            let se_r = ((1.0 - (-2.0 * r).exp()) / n).sqrt() / (-r).exp();
            [(k - mean) / se_k, (v - var) / se_v, (r + wm.ln()) / se_r]
        })
        .collect();
    let zs: Vec<f64> = worst_z.iter().flatten().copied().collect();
    let max_z = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
    // calibration context: under a correct closed form each z is close to N(0, 1)
    let mean_z2 = zs.iter().map(|z| z * z).sum::<f64>() / zs.len() as f64;
    let beyond = zs.iter().filter(|z| z.abs() > 3.0).count();
    let total = zs.len();
    check(
        worked && worked_quad && worst_quad <= 1e-8 && max_z <= 3.0,
        format!(
            "worked K={} V={} R={} (quadrature agrees: {worked_quad}); m=1 max |closed - quadrature| = {worst_quad:.1e} (<= 1e-8); \
             m=2 max |closed - MC| / SE = {max_z:.2} (<= 3), mean z^2 = {mean_z2:.2}, {beyond} of {total} beyond 3",
            six(k),
            six(v),
            six(r)
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn laplace_cdf(x: f64, lambda: f64) -> f64 {
    if x < 0.0 {
        0.5 * (lambda * x).exp()
    } else {
        1.0 - 0.5 * (-lambda * x).exp()
    }
}

/// CDF of the `r = 1` inverse-Wishart law `IG(dof / 2, scale / 2)`.
fn inverse_gamma_cdf(x: f64, dof: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_ur(0.5 * dof, 0.5 * scale / x)
    }
}

struct Marginals {
    sizes: Vec<u64>,
    slab: Vec<f64>,
    gamma: Vec<f64>,
}

impl Marginals {
    fn new(dim: usize) -> Self {
        Self { sizes: vec![0; dim + 1], slab: Vec::new(), gamma: Vec::new() }
    }

    fn push(&mut self, beta: &SparseCoefficients, gamma: &CovarianceParam) {
        self.sizes[beta.size()] += 1;
        // one coordinate per draw keeps the slab sample independent within a draw
        if let Some(v) = beta.values().first() {
            self.slab.push(*v);
        }
        self.gamma.push(gamma.matrix()[(0, 0)]);
    }

    fn pvalues(&self, priors: &Priors) -> [f64; 3] {
        let probs = priors.dimension.weights();
        [
            chi_square_pvalue(&self.sizes, &probs),
            ks_pvalue(&self.slab, |x| laplace_cdf(x, priors.slab.lambda)),
            ks_pvalue(&self.gamma, |x| inverse_gamma_cdf(x, priors.iw.dof, priors.iw.scale.matrix()[(0, 0)])),
        ]
    }
}

fn geweke_skeleton(seed: u64) -> Dataset {
    let mut rng = rng::seeded(seed);
    let individuals = (0..5)
        .map(|i| Individual {
            id: format!("g{i}"),
            times: vec![0.0, 1.0, 2.0],
            y: vec![0.0; 3],
            z: DMatrix::from_element(3, 1, 1.0),
            v: (0..4).map(|_| StandardNormal.sample(&mut rng)).collect(),
        })
        .collect();
    Dataset::new(individuals, 4, 1, 1, 2.0).unwrap()
}

fn prior_machinery() -> Outcome {
    let rf = Linear { q: 1 };
    let priors = Priors {
        dimension: DimensionPrior::default_for(4, 4),
        slab: SlabPrior::new(1.0).unwrap(),
        iw: InverseWishartPrior::default_for(1),
    };
    let mut worst: f64 = 1.0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        // successive-conditional simulator: parameter moves given data, then data given parameters
        let skeleton = geweke_skeleton(seed);
        // a light Gamma proposal keeps successive cycles close to independent under the heavy-tailed prior
        let config = SamplerConfig { adapt: false, max_support: Some(4), gamma_dof: 5.0, seed, ..SamplerConfig::default() };
        let mut rng = rng::seeded(seed);
        let (mut beta, mut gamma) = sparse_nlme::priors::sample_prior_with(&priors, &mut rng);
        let mut data = model::simulate(&skeleton, &rf, &beta, &gamma, rng.random()).unwrap();
        let mut m = Marginals::new(4);
        for cycle in 0..20_000 {
            let mut s = Sampler::new(&data, &rf, &priors, &config, &beta, gamma.clone(), rng).map_err(|e| e.to_string())?;
            for _ in 0..20 {
                s.step(false);
            }
            beta = s.beta();
            gamma = s.gamma().clone();
            rng = s.into_rng();
            data = model::simulate(&skeleton, &rf, &beta, &gamma, rng.random()).unwrap();
            if cycle % 10 == 9 {
                m.push(&beta, &gamma);
            }
        }
        let g = m.pvalues(&priors);

        // no data: the chain targets the prior itself
        let empty = Dataset::new(Vec::new(), 4, 1, 1, 0.5).unwrap();
        let config = SamplerConfig {
            iterations: 505_000,
            burn_in: 5_000,
            thin: 200,
            max_support: Some(4),
            gamma_dof: 5.0,
            seed: seed + 100,
            ..SamplerConfig::default()
        };
        let chain = run_chain(&empty, &rf, &priors, &config).map_err(|e| e.to_string())?;
        let mut m = Marginals::new(4);
        for rec in &chain.records {
            m.push(&rec.beta(4), &rec.gamma(1).unwrap());
        }
        let e = m.pvalues(&priors);
        let min = g.iter().chain(e[..2].iter()).copied().fold(1.0, f64::min);
        worst = worst.min(min);
        lines.push(format!("seed {seed}: joint chi2/KS/KS p = {:.3}/{:.3}/{:.3}, no-data chi2/KS p = {:.3}/{:.3}", g[0], g[1], g[2], e[0], e[1]));
    }
    check(worst >= 0.01, format!("min p-value {worst:.4} (>= 0.01); {}", lines.join("; ")))
}

// ---------------------------------------------------------------- criterion 4

fn compatibility_numbers() -> Outcome {
    let mut rng = rng::seeded(4);
    let opts = CompatOptions::default();
    let mut worst_gap: f64 = 0.0;
    for _ in 0..20 {
        let x = DMatrix::<f64>::from_fn(10, 12, |_, _| StandardNormal.sample(&mut rng));
        let norm = column_norm_max(&x);
        let mut brute = f64::INFINITY;
        for s in 1..=3 {
            for t in combinations(12, s) {
                let sv = x.select_columns(&t).svd(false, false).singular_values.min();
                brute = brute.min(sv / norm);
            }
            let got = phi2(&x, s, &opts).map_err(|e| e.to_string())?;
            if !got.exact {
                return Err("phi2 fell back to sampled mode".into());
            }
            worst_gap = worst_gap.max((got.value - brute).abs());
        }
    }
    let mut order_violations = 0;
    let mut monotone_violations = 0;
    for _ in 0..100 {
        let x = DMatrix::<f64>::from_fn(10, 12, |_, _| StandardNormal.sample(&mut rng));
        let mut prev: Option<(f64, f64)> = None;
        for s in 1..=3 {
            let p1 = phi1(&x, s, &opts).map_err(|e| e.to_string())?.value;
            let p2 = phi2(&x, s, &opts).map_err(|e| e.to_string())?.value;
            if p1 < p2 - 1e-12 {
                order_violations += 1;
            }
            if let Some((q1, q2)) = prev {
                if p1 > q1 + 1e-12 || p2 > q2 + 1e-12 {
                    monotone_violations += 1;
                }
            }
            prev = Some((p1, p2));
        }
    }
    check(
        worst_gap <= 1e-10 && order_violations == 0 && monotone_violations == 0,
        format!(
            "phi2 vs SVD enumeration max gap {worst_gap:.1e} (<= 1e-10); phi1 < phi2 on {order_violations} cases, \
             non-monotone on {monotone_violations} cases (of 100 designs x s = 1..3)"
        ),
    )
}

fn combinations(d: usize, s: usize) -> Vec<Vec<usize>> {
    if s == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for last in (s - 1)..d {
        for mut c in combinations(last, s - 1) {
            c.push(last);
            out.push(c);
        }
    }
    out
}

// ---------------------------------------------------------------- criteria 5, 6

fn trend_experiment() -> (ExperimentPlan, ExperimentResult, f64) {
    let rf = Logistic { amplitude: 1.0, t0: 1.0 };
    let plan = ExperimentPlan::default();
    let start = Instant::now();
    let res = run_plan(&plan, &rf).expect("default plan runs");
    (plan, res, start.elapsed().as_secs_f64())
}

fn effective_dimension(plan: &ExperimentPlan, res: &ExperimentResult, seconds: f64) -> Outcome {
    let k = plan.size_multipliers.iter().position(|c| *c == 3.0).ok_or("plan lacks multiplier 3")?;
    let ex = exceedance_by_n(&res.rows, k, 100, 2);
    let failed = res.rows.iter().filter(|r| r.error.is_some()).count();
    let last = ex.last().map_or(f64::NAN, |e| e.1);
    let monotone = ex.windows(2).all(|w| w[1].1 <= w[0].1 + 0.05);
    let text: Vec<String> = ex.iter().map(|(n, e)| format!("n={n}: {e:.3}")).collect();
    check(
        ex.len() == 4 && failed == 0 && last <= 0.1 && monotone,
        format!(
            "mean P(|S| > 3 s0 | Y) {} (n=400 <= 0.1, non-increasing within 0.05); {} replicates, {failed} failed, {seconds:.0} s",
            text.join(", "),
            res.rows.len()
        ),
    )
}

fn contraction_rates(res: &ExperimentResult) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in [Metric::Pn, Metric::DnGamma, Metric::L2Beta] {
        match rate_regression(&res.rows, m, 100, 2) {
            Ok(fit) => {
                let s = fit.fit.slope;
                ok &= (-0.75..=-0.25).contains(&s);
                parts.push(format!("{} slope {s:.3} (R2 {:.2})", m.name(), fit.fit.r2));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{}: {e}", m.name()));
            }
        }
    }
    check(ok, format!("{} (band [-0.75, -0.25])", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 7

fn stability_probe() -> Outcome {
    let rf = Logistic { amplitude: 1.0, t0: 1.0 };
    let mut rng = rng::seeded(7);
    let (n, p) = (200, 10);
    let times: Vec<f64> = (0..5).map(|k| 0.5 * k as f64).collect();
    let individuals = (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let l1: f64 = raw.iter().map(|x: &f64| x.abs()).sum();
            let scale = rng.random_range(0.5..1.0) / l1;
            Individual {
                id: i.to_string(),
                times: times.clone(),
                y: vec![0.0; times.len()],
                z: DMatrix::from_element(times.len(), 1, 1.0),
                v: raw.iter().map(|x| x * scale).collect(),
            }
        })
        .collect();
    let skeleton = Dataset::new(individuals, p, 1, 1, 0.05).unwrap();
    let beta0 = SparseCoefficients::new(p, vec![1, 6], vec![1.0, -1.0]).unwrap();
    let data = model::simulate(&skeleton, &rf, &beta0, &CovarianceParam::identity(1), 7).unwrap();
    let max_l1 = data.individuals.iter().map(|i| i.v.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let opts = StabilityOptions { box_bound: Some(2.0), ..StabilityOptions::default() };
    let est = design::stability_probe(&data, &rf, &beta0, &opts, 7).map_err(|e| e.to_string())?;
    check(
        (0.8..=1.2).contains(&est.eta) && est.r2 >= 0.9 && max_l1 <= 1.0,
        format!("eta = {:.3} (in [0.8, 1.2]), R2 = {:.4} (>= 0.9), max ||V_i||_1 = {max_l1:.3}, ||beta||_inf <= 2", est.eta, est.r2),
    )
}

// ---------------------------------------------------------------- criterion 8

fn sym_eigen(m: &DMatrix<f64>) -> (f64, f64) {
    let e = m.clone().symmetric_eigen().eigenvalues;
    (e.min(), e.max())
}

fn spectral(a: &DMatrix<f64>) -> f64 {
    a.clone().svd(false, false).singular_values.max()
}

fn lemma_suite() -> Outcome {
    let mut rng = rng::seeded(8);
    let mut fails = [0usize; 5];
    let tol = 1e-10;
    for _ in 0..1000 {
        // B1: rho_min(B) ||A||^2 <= rho_max(A B A') <= rho_max(B) ||A||^2
        let (m, r) = (rng.random_range(1..6), rng.random_range(1..4));
        let a = DMatrix::<f64>::from_fn(m, r, |_, _| StandardNormal.sample(&mut rng));
        let b = random_spd(&mut rng, r, 0.05);
        let (bmin, bmax) = sym_eigen(&b);
        let top = sym_eigen(&(&a * &b * a.transpose())).1;
        let a2 = spectral(&a).powi(2);
        if !(bmin * a2 <= top * (1.0 + tol) + tol && top <= bmax * a2 * (1.0 + tol) + tol) {
            fails[0] += 1;
        }

        // B2: rho_min(Z Gamma Z' + sigma2 I) >= sigma2
        let sigma2 = rng.random_range(0.01..2.0);
        let gamma = CovarianceParam::new(random_spd(&mut rng, r, 0.05)).unwrap();
        let delta = marginal_cov(&a, &gamma, sigma2);
        if sym_eigen(&delta).0 < sigma2 - tol {
            fails[1] += 1;
        }

        // B3: max_i ||D1_i - D2_i||_F^2 <= c1 ||G1 - G2||_F^2 <= c2 dn^2
        let r = rng.random_range(1..3);
        let inds: Vec<Individual> = (0..6)
            .map(|i| {
                let m = rng.random_range(r..r + 4);
                Individual {
                    id: i.to_string(),
                    times: (0..m).map(|k| k as f64).collect(),
                    y: vec![0.0; m],
                    z: DMatrix::from_fn(m, r, |_, _| StandardNormal.sample(&mut rng)),
                    v: vec![1.0],
                }
            })
            .collect();
        let ds = Dataset::new(inds, 1, 1, r, 1.0).unwrap();
        let g1 = CovarianceParam::new(random_spd(&mut rng, r, 0.05)).unwrap();
        let g2 = CovarianceParam::new(random_spd(&mut rng, r, 0.05)).unwrap();
        let diff = g1.matrix() - g2.matrix();
        let lhs = ds
            .individuals
            .iter()
            .map(|ind| (marginal_cov(&ind.z, &g1, 1.0) - marginal_cov(&ind.z, &g2, 1.0)).norm_squared())
            .fold(0.0, f64::max);
        let c1 = ds.individuals.iter().map(|ind| spectral(&ind.z)).fold(0.0, f64::max).powi(4);
        let mid = c1 * diff.norm_squared();
        let floor = ds.individuals.iter().map(|ind| sym_eigen(&(ind.z.transpose() * &ind.z)).0.powi(2)).sum::<f64>() / ds.n() as f64;
        let rhs = c1 / floor * dn(&ds, &g1, &g2).unwrap().powi(2);
        if !(lhs <= mid * (1.0 + tol) && mid <= rhs * (1.0 + 1e-8)) {
            fails[2] += 1;
        }

        // B4: eigenvalues in [1, 1 + eps / sqrt(r)] give ||A - I||_F <= eps
        let r = rng.random_range(1..6);
        let eps = rng.random_range(1e-3..2.0);
        let q = DMatrix::<f64>::from_fn(r, r, |_, _| StandardNormal.sample(&mut rng)).qr().q();
        let lam = DVector::from_fn(r, |_, _| 1.0 + rng.random_range(0.0..=1.0) * eps / (r as f64).sqrt());
        let a = &q * DMatrix::from_diagonal(&lam) * q.transpose();
        if (a - DMatrix::identity(r, r)).norm() > eps * (1.0 + 1e-12) {
            fails[3] += 1;
        }
    }
    for _ in 0..10_000 {
        let m = rng.random_range(1..5);
        let (floor, floor0) = (rng.random_range(1e-3..1.0), rng.random_range(1e-3..1.0));
        let d = random_spd(&mut rng, m, floor);
        let d0 = random_spd(&mut rng, m, floor0);
        let g = g_squared(&d, &d0).unwrap();
        if !(0.0..1.0).contains(&g) {
            fails[4] += 1;
        }
    }
    check(
        fails.iter().all(|f| *f == 0),
        format!(
            "violations: B1 {}, B2 {}, B3 {}, B4 {} (of 1000 each); g2 outside [0, 1) {} (of 10000)",
            fails[0], fails[1], fails[2], fails[3], fails[4]
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

const CLI_CONFIG: &str = r#"
seed = 9
[model]
function = "logistic"
sigma2 = 0.05
[sampler]
iterations = 2000
burn_in = 1000
thin = 5
[simulate]
n = 30
p = 6
s0 = 2
[experiment]
n = [20, 40]
p = [8]
s0 = [1]
replicates = 2
compat_budget = 2000
compat_samples = 20
compat_starts = 4
[constants]
stability_samples = 20
[io]
data = "data.csv"
covariates = "covariates.csv"
truth = "truth.toml"
params = "params.toml"
out = "."
"#;

fn run_cli(config: &Path, out: &Path, command: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_sparse-nlme"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg(command)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("`{command}` failed: {}", String::from_utf8_lossy(&status.stderr).trim()))
    }
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CLI_CONFIG).unwrap();
    std::fs::write(dir.path().join("params.toml"), "beta0_support = [1, 4]\nbeta0_values = [0.5, -0.25]\ngamma0 = [1.5]\n").unwrap();
    run_cli(&config, dir.path(), "simulate")?;
    let commands = ["simulate", "loglik", "divergence", "design-check", "fit", "oracle", "experiment"];
    let mut compared = 0;
    for cmd in commands {
        let (a, b) = (dir.path().join(format!("{cmd}-1")), dir.path().join(format!("{cmd}-2")));
        run_cli(&config, &a, cmd)?;
        run_cli(&config, &b, cmd)?;
        let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names {
            // wall-clock timings are the one intentionally non-reproducible output
            if name == "timing.csv" {
                continue;
            }
            let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).map_err(|e| e.to_string())?);
            if x != y {
                return Err(format!("`{cmd}` output {} differs between runs", name.to_string_lossy()));
            }
            compared += 1;
        }
    }
    check(compared >= 15, format!("{compared} output files byte-identical across reruns of all 7 subcommands"))
}

// ----------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

#[test]
fn acceptance_criteria() {
    let mut outcomes: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut record = |id: u8, name: &'static str, o: Outcome| {
        println!("criterion {id} [{}] {name}: {}", if o.is_ok() { "PASS" } else { "FAIL" }, o.as_ref().unwrap_or_else(|e| e));
        outcomes.push((id, name, o));
    };
    record(1, "oracle equivalence", guarded(oracle_equivalence));
    record(2, "divergence correctness", guarded(divergence_correctness));
    record(3, "prior machinery", guarded(prior_machinery));
    record(4, "compatibility numbers", guarded(compatibility_numbers));
    match catch_unwind(trend_experiment) {
        Ok((plan, res, secs)) => {
            record(5, "effective dimension trend", guarded(|| effective_dimension(&plan, &res, secs)));
            record(6, "contraction-rate trend", guarded(|| contraction_rates(&res)));
        }
        Err(_) => {
            record(5, "effective dimension trend", Err("experiment panicked".into()));
            record(6, "contraction-rate trend", Err("experiment panicked".into()));
        }
    }
    record(7, "stability probe", guarded(stability_probe));
    record(8, "lemma property suite", guarded(lemma_suite));
    record(9, "CLI determinism", guarded(cli_determinism));
    let failed: Vec<String> = outcomes.iter().filter(|o| o.2.is_err()).map(|o| format!("{} ({})", o.0, o.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
