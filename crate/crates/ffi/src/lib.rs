//! C ABI over `sparse_nlme`.
//!
//! Objects cross the boundary as opaque handles created by `sn_*_new` or
//! `sn_*_read` and released with the matching `sn_*_free`. Every fallible call
//! returns an [`SnStatus`]; on failure the message is available from
//! [`sn_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::size_t;
use sparse_nlme::divergences::divergence_report;
use sparse_nlme::experiments::{build_priors, LambdaChoice, PriorSpec};
use sparse_nlme::io::{read_dataset, read_params};
use sparse_nlme::likelihood;
use sparse_nlme::model::FunctionParams;
use sparse_nlme::sampler::{run_chain, SamplerConfig};
use sparse_nlme::{CovarianceParam, Dataset, Error, FunctionRegistry, SharedFunction, SparseCoefficients};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Config = 3,
    Data = 4,
    Dimension = 5,
    NotSpd = 6,
    Parameter = 7,
    Budget = 8,
    Quadrature = 9,
    NonFinite = 10,
    Insufficient = 11,
    Io = 12,
    Panic = 13,
}

impl From<&Error> for SnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => SnStatus::Dimension,
            Error::NotSpd(_) | Error::Cholesky(_) => SnStatus::NotSpd,
            Error::InvalidParameter(_) => SnStatus::Parameter,
            Error::Budget(_) => SnStatus::Budget,
            Error::Quadrature(_) => SnStatus::Quadrature,
            Error::Config(_) => SnStatus::Config,
            Error::Data(_) | Error::Csv(_) => SnStatus::Data,
            Error::NonFinite(_) => SnStatus::NonFinite,
            Error::Insufficient(_) => SnStatus::Insufficient,
            Error::Io(_) => SnStatus::Io,
        }
    }
}

/// Observations, designs and covariates of all individuals.
pub struct SnDataset {
    inner: Dataset,
}

/// Regression function `f(phi, t)`.
pub struct SnFunction {
    inner: SharedFunction,
}

/// A parameter pair `(beta, Gamma)`.
pub struct SnParams {
    beta: SparseCoefficients,
    gamma: CovarianceParam,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SnDivergence {
    pub kl_sum: f64,
    pub variation_sum: f64,
    pub renyi_avg: f64,
    pub dn: f64,
    pub pn: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnFitOptions {
    pub iterations: size_t,
    pub burn_in: size_t,
    pub thin: size_t,
    /// Slab rate; a value `<= 0` selects the upper end of the admissible bracket.
    pub lambda: f64,
    pub update_gamma: bool,
    /// `0` keeps the default cap `min(qp, n)`.
    pub max_support: size_t,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), (SnStatus, String)>>(f: F) -> SnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SnStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SnStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SnStatus, String) {
    (SnStatus::from(&e), format!("{}: {e}", e.class()))
}

fn null(what: &str) -> (SnStatus, String) {
    (SnStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, (SnStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (SnStatus::InvalidString, format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: size_t, what: &str) -> Result<&'a [T], (SnStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (SnStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failing call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn sn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a built-in regression function (`logistic`, `logistic3`, `linear`)
/// from `count` named parameters.
///
/// # Safety
/// `name` must be a NUL-terminated string, `keys` and `values` must point to
/// `count` entries each and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sn_function_new(
    name: *const c_char,
    keys: *const *const c_char,
    values: *const f64,
    count: size_t,
    out: *mut *mut SnFunction,
) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = string(name, "name")?;
        let keys = slice(keys, count, "keys")?;
        let values = slice(values, count, "values")?;
        let mut params = FunctionParams::new();
        for (k, v) in keys.iter().zip(values) {
            params.insert(string(*k, "keys[i]")?, *v);
        }
        let inner = FunctionRegistry::with_builtins().build(&name, &params).map_err(lib)?;
        put(out, SnFunction { inner });
        Ok(())
    })
}

/// # Safety
/// `f` must be null or a handle from [`sn_function_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sn_function_free(f: *mut SnFunction) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Reads a dataset from the long-format data CSV and the covariate CSV.
///
/// # Safety
/// Paths must be NUL-terminated strings, `f` a live function handle and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sn_dataset_read(
    data_path: *const c_char,
    covariates_path: *const c_char,
    f: *const SnFunction,
    sigma2: f64,
    out: *mut *mut SnDataset,
) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = PathBuf::from(string(data_path, "data_path")?);
        let cov = PathBuf::from(string(covariates_path, "covariates_path")?);
        let f = handle(f, "f")?;
        let inner = read_dataset(&data, &cov, f.inner.q(), sigma2).map_err(lib)?;
        put(out, SnDataset { inner });
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`sn_dataset_read`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sn_dataset_free(ds: *mut SnDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Writes `n`, `p`, `q` and `r` of the dataset; null outputs are skipped.
///
/// # Safety
/// `ds` must be a live dataset handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sn_dataset_shape(
    ds: *const SnDataset,
    n: *mut size_t,
    p: *mut size_t,
    q: *mut size_t,
    r: *mut size_t,
) -> SnStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.inner;
        for (dst, v) in [(n, ds.n()), (p, ds.p), (q, ds.q), (r, ds.r)] {
            if !dst.is_null() {
                *dst = v;
            }
        }
        Ok(())
    })
}

/// Builds `(beta, Gamma)` from a 0-based support with its values and the
/// row-major lower triangle of `Gamma` (`r (r + 1) / 2` entries).
///
/// # Safety
/// Array pointers must reference the stated number of elements and `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn sn_params_new(
    dim: size_t,
    support: *const size_t,
    values: *const f64,
    size: size_t,
    gamma_lt: *const f64,
    r: size_t,
    out: *mut *mut SnParams,
) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let support = slice(support, size, "support")?.to_vec();
        let values = slice(values, size, "values")?.to_vec();
        let lt = slice(gamma_lt, r * (r + 1) / 2, "gamma_lt")?;
        let beta = SparseCoefficients::new(dim, support, values).map_err(lib)?;
        let gamma = CovarianceParam::from_lower_triangle(r, lt).map_err(lib)?;
        put(out, SnParams { beta, gamma });
        Ok(())
    })
}

/// Reads a TOML parameter file (`beta0_support` 1-based, `beta0_values`,
/// `gamma0`) sized for the dataset.
///
/// # Safety
/// `path` must be NUL-terminated, `ds` a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sn_params_read(path: *const c_char, ds: *const SnDataset, out: *mut *mut SnParams) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(string(path, "path")?);
        let ds = &handle(ds, "ds")?.inner;
        let (beta, gamma) = read_params(&path).and_then(|p| p.to_params(ds.dim(), ds.r)).map_err(lib)?;
        put(out, SnParams { beta, gamma });
        Ok(())
    })
}

/// # Safety
/// `params` must be null or a live parameter handle.
#[no_mangle]
pub unsafe extern "C" fn sn_params_free(params: *mut SnParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Marginal log-likelihood of `params` on the dataset.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sn_loglik(
    ds: *const SnDataset,
    f: *const SnFunction,
    params: *const SnParams,
    out: *mut f64,
) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = &handle(ds, "ds")?.inner;
        let f = handle(f, "f")?;
        let p = handle(params, "params")?;
        *out = likelihood::loglik(ds, f.inner.as_ref(), &p.beta, &p.gamma).map_err(lib)?;
        Ok(())
    })
}

/// Aggregate divergences between `params` and the truth `truth`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sn_divergence(
    ds: *const SnDataset,
    f: *const SnFunction,
    params: *const SnParams,
    truth: *const SnParams,
    out: *mut SnDivergence,
) -> SnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = &handle(ds, "ds")?.inner;
        let f = handle(f, "f")?;
        let p = handle(params, "params")?;
        let p0 = handle(truth, "truth")?;
        let rep = divergence_report(ds, f.inner.as_ref(), (&p.beta, &p.gamma), (&p0.beta, &p0.gamma)).map_err(lib)?;
        *out = SnDivergence {
            kl_sum: rep.kl_sum,
            variation_sum: rep.variation_sum,
            renyi_avg: rep.renyi_avg,
            dn: rep.dn,
            pn: rep.pn,
        };
        Ok(())
    })
}

/// Default options for [`sn_fit`].
#[no_mangle]
pub extern "C" fn sn_fit_options_default() -> SnFitOptions {
    let d = SamplerConfig::default();
    SnFitOptions {
        iterations: d.iterations,
        burn_in: d.burn_in,
        thin: d.thin,
        lambda: 0.0,
        update_gamma: d.update_gamma,
        max_support: 0,
        seed: d.seed,
    }
}

/// Runs one sampler chain with default priors and writes the posterior
/// inclusion probability of each of the `dim = qp` coordinates.
///
/// # Safety
/// Handles must be live, `opts` readable and `inclusion` must have room for
/// `dim` values.
#[no_mangle]
pub unsafe extern "C" fn sn_fit(
    ds: *const SnDataset,
    f: *const SnFunction,
    opts: *const SnFitOptions,
    inclusion: *mut f64,
    dim: size_t,
) -> SnStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.inner;
        let f = handle(f, "f")?;
        let o = *handle(opts, "opts")?;
        if inclusion.is_null() {
            return Err(null("inclusion"));
        }
        if dim != ds.dim() {
            return Err((SnStatus::Dimension, format!("inclusion has room for {dim} values, dataset needs {}", ds.dim())));
        }
        let spec = PriorSpec {
            lambda: if o.lambda > 0.0 { LambdaChoice::Fixed(o.lambda) } else { LambdaChoice::Auto },
            ..PriorSpec::default()
        };
        let priors = build_priors(&spec, ds, f.inner.as_ref(), [1.0; 3]).map_err(lib)?;
        let config = SamplerConfig {
            iterations: o.iterations,
            burn_in: o.burn_in,
            thin: o.thin,
            update_gamma: o.update_gamma,
            max_support: (o.max_support > 0).then_some(o.max_support),
            seed: o.seed,
            ..SamplerConfig::default()
        };
        config.validate(ds.r).map_err(lib)?;
        let chain = run_chain(ds, f.inner.as_ref(), &priors, &config).map_err(lib)?;
        let out = std::slice::from_raw_parts_mut(inclusion, dim);
        out.fill(0.0);
        for rec in &chain.records {
            for &j in &rec.support {
                out[j] += 1.0;
            }
        }
        let total = chain.records.len().max(1) as f64;
        out.iter_mut().for_each(|x| *x /= total);
        Ok(())
    })
}

/// Runs the command-line interface with `argc` arguments (the first is the
/// program name) and returns its exit code.
///
/// # Safety
/// `argv` must point to `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sn_cli_run(argc: c_int, argv: *const *const c_char) -> c_int {
    let args = match slice(argv, argc.max(0) as size_t, "argv") {
        Ok(a) => a,
        Err((_, msg)) => {
            set_error(msg);
            return 2;
        }
    };
    let mut owned = Vec::with_capacity(args.len());
    for a in args {
        match string(*a, "argv[i]") {
            Ok(s) => owned.push(s),
            Err((_, msg)) => {
                set_error(msg);
                return 2;
            }
        }
    }
    catch_unwind(|| sparse_nlme::cli::run_from_args(owned)).unwrap_or(101)
}
