//! Command-line entry point. Every subcommand reads the run configuration,
//! writes its primary outputs atomically under the output directory together
//! with a resolved-config echo, and reports failures as one line
//! `error[Class]: message` on stderr.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{self, RunConfig};
use crate::design;
use crate::divergences::divergence_report;
use crate::error::{Error, Result};
use crate::experiments::{self, Cell, ExperimentPlan, ExperimentResult, TruthRules};
use crate::io::{self, fmt_f64, join_support, ParamFile};
use crate::likelihood;
use crate::model::{CovarianceParam, Dataset, FunctionRegistry, SharedFunction, SparseCoefficients};
use crate::oracle::{self, GammaMode, OracleOptions};
use crate::priors::Priors;
use crate::sampler::{self, PosteriorChain, MOVES};
use crate::summary::{self, METRICS};

#[derive(Debug, Parser)]
#[command(name = "sparse-nlme", version, about = "Sparse Bayesian non-linear mixed-effects models")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides `io.out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate a dataset and its truth file from the `[simulate]` section.
    Simulate,
    /// Marginal log-likelihood of `io.params` on the dataset.
    Loglik,
    /// Divergences between `io.params` and `io.truth` on the dataset.
    Divergence,
    /// Check the design assumptions at the truth `io.truth`.
    DesignCheck,
    /// Run the posterior sampler.
    Fit,
    /// Exact posterior over small supports.
    Oracle,
    /// Simulation study over the `[experiment]` grid.
    Experiment,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Loglik => "loglik",
            Command::Divergence => "divergence",
            Command::DesignCheck => "design-check",
            Command::Fit => "fit",
            Command::Oracle => "oracle",
            Command::Experiment => "experiment",
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[UsageError]: {line}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            1
        }
    }
}

struct Context {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
    rf: SharedFunction,
}

impl Context {
    fn path(&self, p: &Option<PathBuf>, key: &str, cmd: Command) -> Result<PathBuf> {
        match p {
            Some(p) if p.is_absolute() => Ok(p.clone()),
            Some(p) => Ok(self.base.join(p)),
            None => Err(Error::Config(vec![format!("io.{key}: required by `{}`", cmd.name())])),
        }
    }

    fn dataset(&self, cmd: Command) -> Result<Dataset> {
        let data = self.path(&self.cfg.io.data, "data", cmd)?;
        let cov = self.path(&self.cfg.io.covariates, "covariates", cmd)?;
        io::read_dataset(&data, &cov, self.rf.q(), self.cfg.model.sigma2)
    }

    fn params(&self, p: &Option<PathBuf>, key: &str, cmd: Command, ds: &Dataset) -> Result<(SparseCoefficients, CovarianceParam)> {
        io::read_params(&self.path(p, key, cmd)?)?.to_params(ds.dim(), ds.r)
    }

    fn priors(&self, ds: &Dataset) -> Result<Priors> {
        let spec = self.cfg.prior_spec(ds.r)?;
        experiments::build_priors(&spec, ds, self.rf.as_ref(), self.cfg.constants.l)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        io::atomic_write(&self.out.join(name), bytes)
    }

    fn write_csv<S: AsRef<str>>(&self, name: &str, header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
        let bytes = io::csv_bytes(header, rows)?;
        self.write(name, &bytes)?;
        Ok(bytes)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["--config: a configuration file is required".into()]))?;
    let mut cfg = config::parse_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config(vec!["--threads: must be at least 1".into()]));
        }
        // Fails only if a global pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = match (&cli.out, &cfg.io.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) if o.is_absolute() => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => PathBuf::from("out"),
    };
    let rf = FunctionRegistry::with_builtins().build(&cfg.model.function, &cfg.model.params)?;
    let ctx = Context { cfg, base, out, rf };
    ctx.write("config_echo.toml", ctx.cfg.echo().as_bytes())?;
    match cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Loglik => loglik(&ctx),
        Command::Divergence => divergence(&ctx),
        Command::DesignCheck => design_check(&ctx),
        Command::Fit => fit(&ctx),
        Command::Oracle => run_oracle(&ctx),
        Command::Experiment => experiment(&ctx),
    }
}

fn simulate(ctx: &Context) -> Result<()> {
    let s = &ctx.cfg.simulate;
    let e = &ctx.cfg.experiment;
    let truth = TruthRules {
        beta_magnitude: e.beta_magnitude,
        gamma0_scale: e.gamma0_scale,
        r: e.r,
        m: e.m,
        t_max: e.t_max,
        sigma2: ctx.cfg.model.sigma2,
        covariates: e.covariates,
    };
    let rep = experiments::generate(Cell { n: s.n, p: s.p, s0: s.s0 }, ctx.rf.q(), &truth, ctx.rf.as_ref(), ctx.cfg.seed)?;
    io::write_dataset(&rep.dataset, &ctx.out.join("data.csv"), &ctx.out.join("covariates.csv"))?;
    io::write_params(&ctx.out.join("truth.toml"), &ParamFile::from_params(&rep.beta0, &rep.gamma0, Some(rep.dataset.sigma2)))?;
    println!("simulated n={} p={} s0={} into {}", s.n, s.p, s.s0, ctx.out.display());
    Ok(())
}

fn loglik(ctx: &Context) -> Result<()> {
    let ds = ctx.dataset(Command::Loglik)?;
    let (beta, gamma) = ctx.params(&ctx.cfg.io.params, "params", Command::Loglik, &ds)?;
    let ll = likelihood::loglik(&ds, ctx.rf.as_ref(), &beta, &gamma)?;
    ctx.write("loglik.txt", format!("{}\n", fmt_f64(ll)).as_bytes())?;
    println!("{ll:.11e}");
    Ok(())
}

fn divergence(ctx: &Context) -> Result<()> {
    let ds = ctx.dataset(Command::Divergence)?;
    let p = ctx.params(&ctx.cfg.io.params, "params", Command::Divergence, &ds)?;
    let p0 = ctx.params(&ctx.cfg.io.truth, "truth", Command::Divergence, &ds)?;
    let rep = divergence_report(&ds, ctx.rf.as_ref(), (&p.0, &p.1), (&p0.0, &p0.1))?;
    let mut rows: Vec<Vec<String>> = rep
        .individuals
        .iter()
        .map(|d| {
            let mut row = vec![d.id.clone()];
            row.extend([d.kl, d.variation, d.renyi, d.g2, d.cov_gap, d.mean_gap].map(fmt_f64));
            row.extend([String::new(), String::new()]);
            row
        })
        .collect();
    let mut agg = vec!["aggregate".to_string(), fmt_f64(rep.kl_sum), fmt_f64(rep.variation_sum), fmt_f64(rep.renyi_avg)];
    agg.extend([String::new(), String::new(), String::new(), fmt_f64(rep.dn), fmt_f64(rep.pn)]);
    rows.push(agg);
    let bytes = ctx.write_csv(
        "divergence.csv",
        &["individual_id", "kl", "variation", "renyi", "g2", "cov_gap", "mean_gap", "dn", "pn"],
        &rows,
    )?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn assumption_rows(report: &design::AssumptionReport) -> Vec<Vec<String>> {
    report
        .checks
        .iter()
        .map(|c| vec![c.id.to_string(), c.verdict.as_str().to_string(), fmt_f64(c.margin), fmt_f64(c.measured), c.surrogate.clone()])
        .collect()
}

fn design_check(ctx: &Context) -> Result<()> {
    let ds = ctx.dataset(Command::DesignCheck)?;
    let (beta0, gamma0) = ctx.params(&ctx.cfg.io.truth, "truth", Command::DesignCheck, &ds)?;
    let priors = ctx.priors(&ds)?;
    let report = design::check_assumptions(
        &ds,
        ctx.rf.as_ref(),
        &beta0,
        &gamma0,
        priors.slab.lambda,
        &priors.dimension,
        &ctx.cfg.assumption_constants(),
        ctx.cfg.seed,
    )?;
    let bytes = ctx.write_csv(
        "assumptions.csv",
        &["assumption", "verdict", "margin", "measured", "surrogate"],
        &assumption_rows(&report),
    )?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn chain_json(chain: &PosteriorChain) -> serde_json::Value {
    let moves: serde_json::Map<String, serde_json::Value> = MOVES
        .iter()
        .map(|m| {
            let s = chain.stats(*m);
            (m.name().to_string(), json!({"proposed": s.proposed, "accepted": s.accepted, "rate": s.rate()}))
        })
        .collect();
    json!({"records": chain.records.len(), "rw_scale": chain.rw_scale, "support_cap": chain.cap, "acceptance": moves})
}

fn fit(ctx: &Context) -> Result<()> {
    let ds = ctx.dataset(Command::Fit)?;
    let priors = ctx.priors(&ds)?;
    let mut sc = ctx.cfg.sampler_config();
    if ctx.cfg.io.init.is_some() {
        sc.init = Some(ctx.params(&ctx.cfg.io.init, "init", Command::Fit, &ds)?);
    }
    let chains = sampler::run_chains(&ds, ctx.rf.as_ref(), &priors, &sc, ctx.cfg.sampler.chains)?;
    let single = chains.len() == 1;
    for (c, chain) in chains.iter().enumerate() {
        let name = if single { "chain.csv".to_string() } else { format!("chain_{}.csv", c + 1) };
        ctx.write(&name, &io::chain_bytes(chain)?)?;
    }
    let truth = match &ctx.cfg.io.truth {
        Some(_) => Some(ctx.params(&ctx.cfg.io.truth, "truth", Command::Fit, &ds)?),
        None => None,
    };
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        let s = summary::posterior_summaries(chain, &ds, ctx.rf.as_ref(), truth.as_ref().map(|(b, g)| (b, g)), &[])?;
        let chain_id = (c + 1).to_string();
        for (k, f) in s.size_histogram.iter().enumerate() {
            rows.push(vec![chain_id.clone(), format!("P(|S|={k})"), fmt_f64(*f), String::new(), String::new()]);
        }
        rows.push(vec![chain_id.clone(), "logpost".into(), fmt_f64(s.logpost_quantiles[0]), fmt_f64(s.logpost_quantiles[1]), fmt_f64(s.logpost_quantiles[2])]);
        for m in &s.metrics {
            rows.push(vec![
                chain_id.clone(),
                m.metric.name().into(),
                fmt_f64(m.quantiles[0]),
                fmt_f64(m.quantiles[1]),
                fmt_f64(m.quantiles[2]),
            ]);
        }
    }
    ctx.write_csv("posterior_summary.csv", &["chain", "quantity", "q50", "q90", "q95"], &rows)?;
    let meta = json!({
        "seed": ctx.cfg.seed,
        "lambda": priors.slab.lambda,
        "n": ds.n(),
        "p": ds.p,
        "q": ds.q,
        "r": ds.r,
        "chains": chains.iter().map(chain_json).collect::<Vec<_>>(),
        "config": ctx.cfg.echo(),
    });
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?;
    ctx.write("run.json", format!("{text}\n").as_bytes())?;
    println!("wrote {} chain(s) to {}", chains.len(), ctx.out.display());
    Ok(())
}

fn run_oracle(ctx: &Context) -> Result<()> {
    let ds = ctx.dataset(Command::Oracle)?;
    let priors = ctx.priors(&ds)?;
    let mode = match &ctx.cfg.oracle.gamma_grid {
        Some(grid) => GammaMode::Grid(grid.clone()),
        None => GammaMode::Fixed(ctx.params(&ctx.cfg.io.truth, "truth", Command::Oracle, &ds)?.1),
    };
    let opts = OracleOptions { tolerance: ctx.cfg.oracle_tolerance(), max_support: ctx.cfg.oracle.max_support };
    let res = oracle::enumerate_posterior(&ds, ctx.rf.as_ref(), &priors, &mode, &opts)?;
    let rows: Vec<Vec<String>> = res
        .supports
        .iter()
        .map(|s| {
            vec![
                join_support(&s.support),
                fmt_f64(s.log_evidence.exp()),
                fmt_f64(s.probability),
                fmt_f64(s.log_evidence),
            ]
        })
        .collect();
    ctx.write_csv("oracle.csv", &["support", "evidence", "posterior_probability", "log_evidence"], &rows)?;
    println!(
        "{} supports, log total evidence {}, max relative error {:.2e}",
        res.supports.len(),
        fmt_f64(res.log_total_evidence),
        res.max_rel_error
    );
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn experiment(ctx: &Context) -> Result<()> {
    let plan = ctx.cfg.experiment_plan()?;
    let res = experiments::run_plan(&plan, ctx.rf.as_ref())?;
    write_experiment(ctx, &plan, &res)?;
    for fit in experiments::all_rate_fits(&plan, &res.rows) {
        println!("p={} s0={} {}: slope {:.3} (R2 {:.3})", fit.p, fit.s0, fit.metric.name(), fit.fit.slope, fit.fit.r2);
    }
    Ok(())
}

fn write_experiment(ctx: &Context, plan: &ExperimentPlan, res: &ExperimentResult) -> Result<()> {
    let mut header: Vec<String> = ["cell", "n", "p", "s0", "replicate", "seed", "lambda", "error", "draws", "size_median"]
        .map(String::from)
        .to_vec();
    header.extend(plan.size_multipliers.iter().map(|c| format!("exceed_{}", fmt_f64(*c))));
    header.push("within_acceptance".into());
    header.extend(METRICS.iter().map(|m| format!("median_{}", m.name())));
    let rows: Vec<Vec<String>> = res
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.cell_index.to_string(),
                r.cell.n.to_string(),
                r.cell.p.to_string(),
                r.cell.s0.to_string(),
                r.replicate.to_string(),
                r.seed.to_string(),
                fmt_f64(r.lambda),
                r.error.clone().unwrap_or_default(),
                r.summary.as_ref().map_or(String::new(), |s| s.draws.to_string()),
                opt(r.summary.as_ref().map(|s| s.size_median)),
            ];
            row.extend(r.size_exceedance.iter().map(|x| fmt_f64(*x)));
            row.push(fmt_f64(r.within_acceptance));
            row.extend(METRICS.iter().map(|m| fmt_f64(r.median(*m))));
            row
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write_csv("results.csv", &h, &rows)?;

    let mut summary_rows: Vec<Vec<String>> = Vec::new();
    let mut plot_rows: Vec<Vec<String>> = Vec::new();
    for &p in &plan.ps {
        for &s0 in &plan.s0s {
            for m in METRICS {
                for (n, v) in experiments::median_by_n(&res.rows, m, p, s0) {
                    summary_rows.push(vec!["median".into(), p.to_string(), s0.to_string(), n.to_string(), m.name().into(), fmt_f64(v), String::new()]);
                    if v > 0.0 && s0 > 0 {
                        let x = (s0 as f64 * (p as f64).ln() / n as f64).ln();
                        plot_rows.push(vec![p.to_string(), s0.to_string(), n.to_string(), m.name().into(), fmt_f64(x), fmt_f64(v.ln())]);
                    }
                }
            }
            for (k, c) in plan.size_multipliers.iter().enumerate() {
                for (n, v) in experiments::exceedance_by_n(&res.rows, k, p, s0) {
                    summary_rows.push(vec![
                        "mean_exceedance".into(),
                        p.to_string(),
                        s0.to_string(),
                        n.to_string(),
                        format!("exceed_{}", fmt_f64(*c)),
                        fmt_f64(v),
                        String::new(),
                    ]);
                }
            }
        }
    }
    for fit in experiments::all_rate_fits(plan, &res.rows) {
        summary_rows.push(vec![
            "slope".into(),
            fit.p.to_string(),
            fit.s0.to_string(),
            String::new(),
            fit.metric.name().into(),
            fmt_f64(fit.fit.slope),
            fmt_f64(fit.fit.r2),
        ]);
    }
    ctx.write_csv("summary.csv", &["record", "p", "s0", "n", "metric", "value", "r2"], &summary_rows)?;
    if ctx.cfg.experiment.plot_data {
        ctx.write_csv("plot_data.csv", &["p", "s0", "n", "metric", "x", "y"], &plot_rows)?;
    }

    let cell_rows: Vec<Vec<String>> = res
        .cells
        .iter()
        .map(|c| {
            let stab = c.assumptions.as_ref().and_then(|a| a.stability.as_ref());
            vec![
                c.index.to_string(),
                c.cell.n.to_string(),
                c.cell.p.to_string(),
                c.cell.s0.to_string(),
                fmt_f64(c.x_star),
                opt(c.phi1),
                opt(c.phi2),
                c.compat_exact.to_string(),
                c.beta_metrics.to_string(),
                c.flagged.to_string(),
                opt(stab.map(|s| s.eta)),
                opt(stab.map(|s| s.r2)),
                c.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    ctx.write_csv(
        "cells.csv",
        &["cell", "n", "p", "s0", "x_star", "phi1", "phi2", "compat_exact", "beta_metrics", "flagged", "stability_eta", "stability_r2", "error"],
        &cell_rows,
    )?;
    let mut assumption_rows_all: Vec<Vec<String>> = Vec::new();
    for c in &res.cells {
        if let Some(a) = &c.assumptions {
            for mut row in assumption_rows(a) {
                row.insert(0, c.index.to_string());
                assumption_rows_all.push(row);
            }
        }
    }
    ctx.write_csv("cell_assumptions.csv", &["cell", "assumption", "verdict", "margin", "measured", "surrogate"], &assumption_rows_all)?;
    // Wall-clock timings are kept out of the deterministic outputs above.
    let timing: Vec<Vec<String>> = res
        .rows
        .iter()
        .zip(&res.seconds)
        .map(|(r, s)| vec![r.cell_index.to_string(), r.replicate.to_string(), format!("{s:.3}")])
        .collect();
    ctx.write_csv("timing.csv", &["cell", "replicate", "seconds"], &timing)?;
    Ok(())
}
