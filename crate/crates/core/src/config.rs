//! Run configuration in TOML. Parsing walks the document by hand so that every
//! violation (unknown key, wrong type, failed constraint) is collected with
//! its dotted key path instead of stopping at the first.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::design::{AssumptionConstants, CompatOptions, StabilityOptions};
use crate::error::{Error, Result};
use crate::experiments::{CovariateScaling, ExperimentPlan, LambdaChoice, PriorSpec, TruthRules};
use crate::model::{CovarianceParam, FunctionParams, FunctionRegistry};
use crate::priors::DimensionKind;
use crate::quadrature::Tolerance;
use crate::sampler::{MoveProbabilities, SamplerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub function: String,
    pub params: FunctionParams,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSection {
    pub kind: DimensionKind,
    pub u: f64,
    pub a: f64,
    pub lambda: LambdaChoice,
    pub iw_dof: Option<f64>,
    /// Row-major lower triangle of the inverse-Wishart scale.
    pub iw_scale: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub moves: MoveProbabilities,
    pub rw_scale: f64,
    pub adapt: bool,
    pub gamma_dof: f64,
    pub update_gamma: bool,
    pub max_support: Option<usize>,
    pub chains: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    pub s0: Vec<usize>,
    pub replicates: usize,
    pub beta_magnitude: f64,
    pub gamma0_scale: f64,
    pub r: usize,
    pub m: usize,
    pub t_max: f64,
    pub covariates: CovariateScaling,
    pub size_multipliers: Vec<f64>,
    pub compat_c1: Option<f64>,
    pub compat_budget: u64,
    pub compat_samples: usize,
    pub compat_starts: usize,
    pub plot_data: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSection {
    pub n: usize,
    pub p: usize,
    pub s0: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSection {
    pub max_support: usize,
    pub rel_tol: f64,
    /// Scalar `Gamma` grid (`r = 1`); fixed `Gamma` from the truth file when absent.
    pub gamma_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsSection {
    pub a: [f64; 4],
    pub l: [f64; 3],
    pub gamma_bounds: (f64, f64),
    pub beta_inf_factor: f64,
    pub sparsity_fraction: f64,
    pub m_ge_r_fraction: f64,
    pub rho_z_floor: f64,
    pub rho_z_ceiling: f64,
    pub m_obs: usize,
    pub stability: bool,
    pub stability_deltas: Vec<f64>,
    pub stability_samples: usize,
    pub stability_box: Option<f64>,
    pub stability_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IoSection {
    pub data: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub prior: PriorSection,
    pub sampler: SamplerSection,
    pub experiment: ExperimentSection,
    pub simulate: SimulateSection,
    pub oracle: OracleSection,
    pub constants: ConstantsSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_str("").expect("empty config is valid")
    }
}

struct View<'a> {
    path: String,
    table: Option<&'a Table>,
    used: RefCell<BTreeSet<String>>,
    errors: &'a RefCell<Vec<String>>,
}

impl<'a> View<'a> {
    fn key(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn err(&self, key: &str, msg: impl std::fmt::Display) {
        self.errors.borrow_mut().push(format!("{}: {msg}", self.key(key)));
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.table.and_then(|t| t.get(key))
    }

    fn sub(&self, key: &str) -> View<'a> {
        let table = match self.get(key) {
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.err(key, "expected a table");
                None
            }
            None => None,
        };
        View { path: self.key(key), table, used: RefCell::new(BTreeSet::new()), errors: self.errors }
    }

    fn finish(&self) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.used.borrow().contains(k) {
                    self.err(k, "unknown key");
                }
            }
        }
    }

    fn num(&self, key: &str, v: &Value) -> Option<f64> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            other => {
                self.err(key, format!("expected a number, found {}", other.type_str()));
                None
            }
        }
    }

    fn f64_opt(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| self.num(key, v))
    }

    fn f64(&self, key: &str, default: f64) -> f64 {
        self.f64_opt(key).unwrap_or(default)
    }

    fn int_opt(&self, key: &str) -> Option<i64> {
        match self.get(key)? {
            Value::Integer(i) => Some(*i),
            other => {
                self.err(key, format!("expected an integer, found {}", other.type_str()));
                None
            }
        }
    }

    fn usize_opt(&self, key: &str) -> Option<usize> {
        let i = self.int_opt(key)?;
        if i < 0 {
            self.err(key, format!("must be nonnegative, got {i}"));
            return None;
        }
        Some(i as usize)
    }

    fn usize(&self, key: &str, default: usize) -> usize {
        self.usize_opt(key).unwrap_or(default)
    }

    fn bool(&self, key: &str, default: bool) -> bool {
        match self.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(other) => {
                self.err(key, format!("expected a boolean, found {}", other.type_str()));
                default
            }
        }
    }

    fn string_opt(&self, key: &str) -> Option<String> {
        match self.get(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                self.err(key, format!("expected a string, found {}", other.type_str()));
                None
            }
        }
    }

    fn f64_list_opt(&self, key: &str) -> Option<Vec<f64>> {
        match self.get(key)? {
            Value::Array(a) => a.iter().map(|v| self.num(key, v)).collect(),
            other => {
                self.err(key, format!("expected an array of numbers, found {}", other.type_str()));
                None
            }
        }
    }

    fn usize_list(&self, key: &str, default: &[usize]) -> Vec<usize> {
        match self.get(key) {
            None => default.to_vec(),
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for v in a {
                    match v {
                        Value::Integer(i) if *i >= 0 => out.push(*i as usize),
                        _ => {
                            self.err(key, "expected an array of nonnegative integers");
                            return default.to_vec();
                        }
                    }
                }
                out
            }
            Some(other) => {
                self.err(key, format!("expected an array of integers, found {}", other.type_str()));
                default.to_vec()
            }
        }
    }

    fn path_opt(&self, key: &str) -> Option<PathBuf> {
        self.string_opt(key).map(PathBuf::from)
    }

    fn positive(&self, key: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.err(key, format!("must be positive and finite, got {v}"));
        }
    }
}

fn fixed_array<const N: usize>(view: &View, key: &str, default: [f64; N]) -> [f64; N] {
    match view.f64_list_opt(key) {
        None => default,
        Some(v) if v.len() == N => {
            let mut out = default;
            out.copy_from_slice(&v);
            out
        }
        Some(v) => {
            view.err(key, format!("expected {N} values, got {}", v.len()));
            default
        }
    }
}

fn parse_model(v: &View) -> ModelSection {
    let function = v.string_opt("function").unwrap_or_else(|| "logistic".into());
    let mut params = FunctionParams::new();
    let pv = v.sub("params");
    if let Some(t) = pv.table {
        for key in t.keys() {
            if let Some(x) = pv.f64_opt(key) {
                params.insert(key.clone(), x);
            }
        }
    }
    pv.finish();
    let sigma2 = v.f64("sigma2", 0.05);
    v.positive("sigma2", sigma2);
    if let Err(e) = FunctionRegistry::with_builtins().build(&function, &params) {
        v.err("function", e);
    }
    v.finish();
    ModelSection { function, params, sigma2 }
}

fn parse_prior(v: &View) -> PriorSection {
    let dim = v.sub("dimension");
    let kind = match dim.string_opt("kind").as_deref() {
        None | Some("geometric-decay") => DimensionKind::GeometricDecay,
        Some("binomial-beta") => DimensionKind::BinomialBeta,
        Some(other) => {
            dim.err("kind", format!("unknown kind `{other}` (expected geometric-decay or binomial-beta)"));
            DimensionKind::GeometricDecay
        }
    };
    let u = dim.f64("u", 1.0);
    dim.positive("u", u);
    let a = dim.f64("A", 1.0);
    dim.positive("A", a);
    dim.finish();
    let slab = v.sub("slab");
    let lambda = match slab.get("lambda") {
        None => LambdaChoice::Auto,
        Some(Value::String(s)) if s == "auto" => LambdaChoice::Auto,
        Some(val) => match slab.num("lambda", val) {
            Some(l) => {
                slab.positive("lambda", l);
                LambdaChoice::Fixed(l)
            }
            None => LambdaChoice::Auto,
        },
    };
    slab.finish();
    let iw = v.sub("iw");
    let iw_dof = iw.f64_opt("dof");
    let iw_scale = iw.f64_list_opt("scale");
    iw.finish();
    v.finish();
    PriorSection { kind, u, a, lambda, iw_dof, iw_scale }
}

fn parse_sampler(v: &View) -> SamplerSection {
    let d = SamplerConfig::default();
    let mv = v.sub("moves");
    let moves = MoveProbabilities {
        add: mv.f64("add", d.moves.add),
        delete: mv.f64("delete", d.moves.delete),
        swap: mv.f64("swap", d.moves.swap),
        within: mv.f64("within", d.moves.within),
        gamma: mv.f64("gamma", d.moves.gamma),
    };
    mv.finish();
    let s = SamplerSection {
        iterations: v.usize("iterations", d.iterations),
        burn_in: v.usize("burn_in", d.burn_in),
        thin: v.usize("thin", d.thin),
        moves,
        rw_scale: v.f64("rw_scale", d.rw_scale),
        adapt: v.bool("adapt", d.adapt),
        gamma_dof: v.f64("gamma_dof", d.gamma_dof),
        update_gamma: v.bool("update_gamma", d.update_gamma),
        max_support: v.usize_opt("max_support"),
        chains: v.usize("chains", 1),
    };
    if s.chains == 0 {
        v.err("chains", "must be at least 1");
    }
    v.finish();
    s
}

fn parse_experiment(v: &View) -> ExperimentSection {
    let plan = ExperimentPlan::default();
    let covariates = match v.string_opt("covariates").as_deref() {
        None | Some("sqrt-n") => CovariateScaling::SqrtN,
        Some("unit-norm") => CovariateScaling::UnitNorm,
        Some("raw") => CovariateScaling::Raw,
        Some(other) => {
            v.err("covariates", format!("unknown scaling `{other}` (expected sqrt-n, unit-norm or raw)"));
            CovariateScaling::SqrtN
        }
    };
    let e = ExperimentSection {
        n: v.usize_list("n", &plan.ns),
        p: v.usize_list("p", &plan.ps),
        s0: v.usize_list("s0", &plan.s0s),
        replicates: v.usize("replicates", plan.replicates),
        beta_magnitude: v.f64("beta_magnitude", plan.truth.beta_magnitude),
        gamma0_scale: v.f64("gamma0_scale", plan.truth.gamma0_scale),
        r: v.usize("r", plan.truth.r),
        m: v.usize("m", plan.truth.m),
        t_max: v.f64("t_max", plan.truth.t_max),
        covariates,
        size_multipliers: v.f64_list_opt("size_multipliers").unwrap_or(plan.size_multipliers.clone()),
        compat_c1: match v.get("compat_c1") {
            Some(Value::Boolean(false)) => None,
            Some(val) => v.num("compat_c1", val),
            None => plan.compat_c1,
        },
        compat_budget: v.usize("compat_budget", plan.compat.budget as usize) as u64,
        compat_samples: v.usize("compat_samples", plan.compat.sampled.unwrap_or(0)),
        compat_starts: v.usize("compat_starts", plan.compat.starts),
        plot_data: v.bool("plot_data", true),
    };
    for (key, grid) in [("n", &e.n), ("p", &e.p)] {
        if grid.is_empty() || grid.contains(&0) {
            v.err(key, "must be a non-empty list of positive integers");
        }
    }
    if e.s0.is_empty() {
        v.err("s0", "must be non-empty");
    }
    if e.replicates == 0 {
        v.err("replicates", "must be at least 1");
    }
    v.positive("gamma0_scale", e.gamma0_scale);
    v.positive("t_max", e.t_max);
    if e.r == 0 || e.m == 0 {
        v.err("m", "m and r must be at least 1");
    }
    v.finish();
    e
}

fn parse_simulate(v: &View) -> SimulateSection {
    let s = SimulateSection { n: v.usize("n", 50), p: v.usize("p", 10), s0: v.usize("s0", 2) };
    if s.n == 0 || s.p == 0 {
        v.err("n", "n and p must be positive");
    }
    v.finish();
    s
}

fn parse_oracle(v: &View) -> OracleSection {
    let o = OracleSection {
        max_support: v.usize("max_support", crate::oracle::MAX_SUPPORT),
        rel_tol: v.f64("rel_tol", 1e-10),
        gamma_grid: v.f64_list_opt("gamma_grid"),
    };
    if o.max_support > crate::oracle::MAX_SUPPORT {
        v.err("max_support", format!("must be at most {}", crate::oracle::MAX_SUPPORT));
    }
    v.positive("rel_tol", o.rel_tol);
    v.finish();
    o
}

fn parse_constants(v: &View) -> ConstantsSection {
    let d = AssumptionConstants::default();
    let sd = StabilityOptions::default();
    let bounds = fixed_array(v, "gamma_bounds", [d.gamma_bounds.0, d.gamma_bounds.1]);
    let c = ConstantsSection {
        a: fixed_array(v, "A", d.a),
        l: fixed_array(v, "L", d.l),
        gamma_bounds: (bounds[0], bounds[1]),
        beta_inf_factor: v.f64("beta_inf_factor", d.beta_inf_factor),
        sparsity_fraction: v.f64("sparsity_fraction", d.sparsity_fraction),
        m_ge_r_fraction: v.f64("m_ge_r_fraction", d.m_ge_r_fraction),
        rho_z_floor: v.f64("rho_z_floor", d.rho_z_floor),
        rho_z_ceiling: v.f64("rho_z_ceiling", d.rho_z_ceiling),
        m_obs: v.usize("m_obs", d.m_obs),
        stability: v.bool("stability", true),
        stability_deltas: v.f64_list_opt("stability_deltas").unwrap_or(sd.deltas),
        stability_samples: v.usize("stability_samples", sd.samples),
        stability_box: v.f64_opt("stability_box"),
        stability_r2: v.f64("stability_r2", d.stability_r2),
    };
    for (i, x) in c.a.iter().enumerate() {
        if !(*x > 0.0) {
            v.err("A", format!("A{} must be positive", i + 1));
        }
    }
    for (i, x) in c.l.iter().enumerate() {
        if !(*x > 0.0) {
            v.err("L", format!("L{} must be positive", i + 1));
        }
    }
    if !(c.gamma_bounds.0 > 0.0 && c.gamma_bounds.0 <= c.gamma_bounds.1) {
        v.err("gamma_bounds", "expected 0 < lower <= upper");
    }
    v.finish();
    c
}

fn parse_io(v: &View) -> IoSection {
    let io = IoSection {
        data: v.path_opt("data"),
        covariates: v.path_opt("covariates"),
        truth: v.path_opt("truth"),
        params: v.path_opt("params"),
        init: v.path_opt("init"),
        out: v.path_opt("out"),
    };
    v.finish();
    io
}

/// Parses configuration text; every problem is reported in one
/// [`Error::Config`].
pub fn parse_str(text: &str) -> Result<RunConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![format!("syntax: {}", e.message())]))?;
    let errors = RefCell::new(Vec::new());
    let root = View { path: String::new(), table: Some(&table), used: RefCell::new(BTreeSet::new()), errors: &errors };
    let seed = match root.int_opt("seed") {
        Some(s) if s >= 0 => s as u64,
        Some(s) => {
            root.err("seed", format!("must be nonnegative, got {s}"));
            0
        }
        None => 1,
    };
    let model = parse_model(&root.sub("model"));
    let prior = parse_prior(&root.sub("prior"));
    let sampler = parse_sampler(&root.sub("sampler"));
    let experiment = parse_experiment(&root.sub("experiment"));
    let simulate = parse_simulate(&root.sub("simulate"));
    let oracle = parse_oracle(&root.sub("oracle"));
    let constants = parse_constants(&root.sub("constants"));
    let io = parse_io(&root.sub("io"));
    root.finish();
    let cfg = RunConfig { seed, model, prior, sampler, experiment, simulate, oracle, constants, io };
    let mut issues = errors.into_inner();
    if let Err(Error::Config(v)) = cfg.sampler_config().validate(cfg.experiment.r) {
        issues.extend(v);
    }
    if let Some(scale) = &cfg.prior.iw_scale {
        let r = ((((8 * scale.len() + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
        if r * (r + 1) / 2 != scale.len() || CovarianceParam::from_lower_triangle(r, scale).is_err() {
            issues.push("prior.iw.scale: expected the lower triangle of a positive-definite matrix".into());
        }
    }
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(issues))
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_str(&text)
}

impl RunConfig {
    /// Sampler settings with the master seed; `init` is left empty.
    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            iterations: s.iterations,
            burn_in: s.burn_in,
            thin: s.thin,
            moves: s.moves,
            rw_scale: s.rw_scale,
            adapt: s.adapt,
            gamma_dof: s.gamma_dof,
            update_gamma: s.update_gamma,
            max_support: s.max_support,
            seed: self.seed,
            init: None,
        }
    }

    pub fn prior_spec(&self, r: usize) -> Result<PriorSpec> {
        let iw = match (&self.prior.iw_dof, &self.prior.iw_scale) {
            (None, None) => None,
            (dof, scale) => {
                let scale = match scale {
                    Some(lt) => CovarianceParam::from_lower_triangle(r, lt)
                        .map_err(|e| Error::Config(vec![format!("prior.iw.scale: {e}")]))?,
                    None => CovarianceParam::identity(r),
                };
                Some((dof.unwrap_or(r as f64 + 2.0), scale))
            }
        };
        Ok(PriorSpec { kind: self.prior.kind, u: self.prior.u, a: self.prior.a, lambda: self.prior.lambda, iw })
    }

    pub fn assumption_constants(&self) -> AssumptionConstants {
        let c = &self.constants;
        AssumptionConstants {
            a: c.a,
            l: c.l,
            gamma_bounds: c.gamma_bounds,
            beta_inf_factor: c.beta_inf_factor,
            sparsity_fraction: c.sparsity_fraction,
            m_ge_r_fraction: c.m_ge_r_fraction,
            rho_z_floor: c.rho_z_floor,
            rho_z_ceiling: c.rho_z_ceiling,
            m_obs: c.m_obs,
            stability: c.stability.then(|| StabilityOptions {
                deltas: c.stability_deltas.clone(),
                samples: c.stability_samples,
                box_bound: c.stability_box,
            }),
            stability_r2: c.stability_r2,
        }
    }

    pub fn experiment_plan(&self) -> Result<ExperimentPlan> {
        let e = &self.experiment;
        Ok(ExperimentPlan {
            ns: e.n.clone(),
            ps: e.p.clone(),
            s0s: e.s0.clone(),
            replicates: e.replicates,
            truth: TruthRules {
                beta_magnitude: e.beta_magnitude,
                gamma0_scale: e.gamma0_scale,
                r: e.r,
                m: e.m,
                t_max: e.t_max,
                sigma2: self.model.sigma2,
                covariates: e.covariates,
            },
            prior: self.prior_spec(e.r)?,
            sampler: self.sampler_config(),
            size_multipliers: e.size_multipliers.clone(),
            compat_c1: e.compat_c1,
            compat: CompatOptions {
                budget: e.compat_budget,
                sampled: (e.compat_samples > 0).then_some(e.compat_samples),
                starts: e.compat_starts,
                seed: self.seed,
            },
            constants: self.assumption_constants(),
            seed: self.seed,
        })
    }

    pub fn oracle_tolerance(&self) -> Tolerance {
        Tolerance { abs: 0.0, rel: self.oracle.rel_tol, max_intervals: 4000 }
    }

    /// Resolved configuration as TOML; parsing it yields an equal config.
    pub fn echo(&self) -> String {
        let mut root = Table::new();
        root.insert("seed".into(), Value::Integer(self.seed as i64));

        let mut model = Table::new();
        model.insert("function".into(), self.model.function.clone().into());
        let params: Table = self.model.params.iter().map(|(k, v)| (k.clone(), Value::Float(*v))).collect();
        model.insert("params".into(), Value::Table(params));
        model.insert("sigma2".into(), self.model.sigma2.into());
        root.insert("model".into(), Value::Table(model));

        let mut prior = Table::new();
        let mut dim = Table::new();
        let kind = match self.prior.kind {
            DimensionKind::GeometricDecay => "geometric-decay",
            DimensionKind::BinomialBeta => "binomial-beta",
        };
        dim.insert("kind".into(), kind.into());
        dim.insert("u".into(), self.prior.u.into());
        dim.insert("A".into(), self.prior.a.into());
        prior.insert("dimension".into(), Value::Table(dim));
        let mut slab = Table::new();
        slab.insert(
            "lambda".into(),
            match self.prior.lambda {
                LambdaChoice::Auto => "auto".into(),
                LambdaChoice::Fixed(l) => l.into(),
            },
        );
        prior.insert("slab".into(), Value::Table(slab));
        let mut iw = Table::new();
        if let Some(d) = self.prior.iw_dof {
            iw.insert("dof".into(), d.into());
        }
        if let Some(s) = &self.prior.iw_scale {
            iw.insert("scale".into(), floats(s));
        }
        prior.insert("iw".into(), Value::Table(iw));
        root.insert("prior".into(), Value::Table(prior));

        let s = &self.sampler;
        let mut sampler = Table::new();
        sampler.insert("iterations".into(), int(s.iterations));
        sampler.insert("burn_in".into(), int(s.burn_in));
        sampler.insert("thin".into(), int(s.thin));
        let mut moves = Table::new();
        moves.insert("add".into(), s.moves.add.into());
        moves.insert("delete".into(), s.moves.delete.into());
        moves.insert("swap".into(), s.moves.swap.into());
        moves.insert("within".into(), s.moves.within.into());
        moves.insert("gamma".into(), s.moves.gamma.into());
        sampler.insert("moves".into(), Value::Table(moves));
        sampler.insert("rw_scale".into(), s.rw_scale.into());
        sampler.insert("adapt".into(), s.adapt.into());
        sampler.insert("gamma_dof".into(), s.gamma_dof.into());
        sampler.insert("update_gamma".into(), s.update_gamma.into());
        if let Some(m) = s.max_support {
            sampler.insert("max_support".into(), int(m));
        }
        sampler.insert("chains".into(), int(s.chains));
        root.insert("sampler".into(), Value::Table(sampler));

        let e = &self.experiment;
        let mut exp = Table::new();
        exp.insert("n".into(), ints(&e.n));
        exp.insert("p".into(), ints(&e.p));
        exp.insert("s0".into(), ints(&e.s0));
        exp.insert("replicates".into(), int(e.replicates));
        exp.insert("beta_magnitude".into(), e.beta_magnitude.into());
        exp.insert("gamma0_scale".into(), e.gamma0_scale.into());
        exp.insert("r".into(), int(e.r));
        exp.insert("m".into(), int(e.m));
        exp.insert("t_max".into(), e.t_max.into());
        let cov = match e.covariates {
            CovariateScaling::SqrtN => "sqrt-n",
            CovariateScaling::UnitNorm => "unit-norm",
            CovariateScaling::Raw => "raw",
        };
        exp.insert("covariates".into(), cov.into());
        exp.insert("size_multipliers".into(), floats(&e.size_multipliers));
        exp.insert("compat_c1".into(), e.compat_c1.map_or(Value::Boolean(false), Value::Float));
        exp.insert("compat_budget".into(), Value::Integer(e.compat_budget as i64));
        exp.insert("compat_samples".into(), int(e.compat_samples));
        exp.insert("compat_starts".into(), int(e.compat_starts));
        exp.insert("plot_data".into(), e.plot_data.into());
        root.insert("experiment".into(), Value::Table(exp));

        let mut sim = Table::new();
        sim.insert("n".into(), int(self.simulate.n));
        sim.insert("p".into(), int(self.simulate.p));
        sim.insert("s0".into(), int(self.simulate.s0));
        root.insert("simulate".into(), Value::Table(sim));

        let mut oracle = Table::new();
        oracle.insert("max_support".into(), int(self.oracle.max_support));
        oracle.insert("rel_tol".into(), self.oracle.rel_tol.into());
        if let Some(g) = &self.oracle.gamma_grid {
            oracle.insert("gamma_grid".into(), floats(g));
        }
        root.insert("oracle".into(), Value::Table(oracle));

        let c = &self.constants;
        let mut cons = Table::new();
        cons.insert("A".into(), floats(&c.a));
        cons.insert("L".into(), floats(&c.l));
        cons.insert("gamma_bounds".into(), floats(&[c.gamma_bounds.0, c.gamma_bounds.1]));
        cons.insert("beta_inf_factor".into(), c.beta_inf_factor.into());
        cons.insert("sparsity_fraction".into(), c.sparsity_fraction.into());
        cons.insert("m_ge_r_fraction".into(), c.m_ge_r_fraction.into());
        cons.insert("rho_z_floor".into(), c.rho_z_floor.into());
        cons.insert("rho_z_ceiling".into(), c.rho_z_ceiling.into());
        cons.insert("m_obs".into(), int(c.m_obs));
        cons.insert("stability".into(), c.stability.into());
        cons.insert("stability_deltas".into(), floats(&c.stability_deltas));
        cons.insert("stability_samples".into(), int(c.stability_samples));
        if let Some(b) = c.stability_box {
            cons.insert("stability_box".into(), b.into());
        }
        cons.insert("stability_r2".into(), c.stability_r2.into());
        root.insert("constants".into(), Value::Table(cons));

        let mut io = Table::new();
        for (k, v) in [
            ("data", &self.io.data),
            ("covariates", &self.io.covariates),
            ("truth", &self.io.truth),
            ("params", &self.io.params),
            ("init", &self.io.init),
            ("out", &self.io.out),
        ] {
            if let Some(p) = v {
                io.insert(k.into(), p.to_string_lossy().into_owned().into());
            }
        }
        root.insert("io".into(), Value::Table(io));
        toml::to_string(&root).expect("TOML tables always serialize")
    }
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn ints(v: &[usize]) -> Value {
    Value::Array(v.iter().map(|x| int(*x)).collect())
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}
