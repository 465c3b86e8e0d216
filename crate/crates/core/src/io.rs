//! CSV and TOML file formats: long-format datasets, covariates, parameter
//! files and chain output. Floats are written with Rust's shortest
//! round-trip representation so a write-read cycle is bit-exact.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovarianceParam, Dataset, Individual, SparseCoefficients};
use crate::sampler::PosteriorChain;

/// Round-trip-exact float text: plain decimals in a moderate range, exponent
/// form otherwise.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 {
        // no "-0" in output files
        "0".to_string()
    } else if !a.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

/// 1-based `;`-joined indices.
pub fn join_support(support: &[usize]) -> String {
    support.iter().map(|j| (j + 1).to_string()).collect::<Vec<_>>().join(";")
}

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serializes rows under a header into CSV bytes.
pub fn csv_bytes<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|s| s.as_ref()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    atomic_write(path, &csv_bytes(header, rows)?)
}

fn parse_num(field: &str, what: impl FnOnce() -> String) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Data(format!("{}: non-numeric value `{field}`", what())))
}

fn prefixed_columns(header: &csv::StringRecord, prefix: &str, file: &Path) -> Result<usize> {
    let mut count = 0;
    for (k, name) in header.iter().skip(1).enumerate() {
        if name.trim() != format!("{prefix}{}", k + 1) {
            return Err(Error::Data(format!(
                "{}: column {} is `{name}`, expected `{prefix}{}`",
                file.display(),
                k + 2,
                k + 1
            )));
        }
        count += 1;
    }
    Ok(count)
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| with_path(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file))
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Reads the long-format data file (`individual_id,time,y,z_1..z_r`) and the
/// covariate file (`individual_id,v_1..v_p`). Individuals keep the order of
/// first appearance in the data file and times are sorted per individual.
pub fn read_dataset(data: &Path, covariates: &Path, q: usize, sigma2: f64) -> Result<Dataset> {
    let mut rdr = reader(data)?;
    let header = rdr.headers()?.clone();
    let fixed = ["individual_id", "time", "y"];
    if header.len() < 4 || header.iter().take(3).map(str::trim).ne(fixed) {
        return Err(Error::Data(format!(
            "{}: header must start with individual_id,time,y followed by z_1..z_r",
            data.display()
        )));
    }
    let zh: csv::StringRecord = header.iter().skip(2).collect();
    let r = prefixed_columns(&zh, "z_", data)?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64, Vec<f64>)>> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let at = || format!("{} line {}", data.display(), line + 2);
        if rec.len() != header.len() {
            return Err(Error::Data(format!("{}: expected {} fields, found {}", at(), header.len(), rec.len())));
        }
        let id = rec[0].trim().to_string();
        let t = parse_num(&rec[1], at)?;
        let y = parse_num(&rec[2], at)?;
        let z = rec.iter().skip(3).map(|f| parse_num(f, at)).collect::<Result<Vec<_>>>()?;
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((t, y, z));
    }

    let mut rdr = reader(covariates)?;
    let header = rdr.headers()?.clone();
    if header.is_empty() || header[0].trim() != "individual_id" {
        return Err(Error::Data(format!("{}: first column must be individual_id", covariates.display())));
    }
    let p = prefixed_columns(&header, "v_", covariates)?;
    let mut cov: HashMap<String, Vec<f64>> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let at = || format!("{} line {}", covariates.display(), line + 2);
        if rec.len() != header.len() {
            return Err(Error::Data(format!("{}: expected {} fields, found {}", at(), header.len(), rec.len())));
        }
        let id = rec[0].trim().to_string();
        let v = rec.iter().skip(1).map(|f| parse_num(f, at)).collect::<Result<Vec<_>>>()?;
        if cov.insert(id.clone(), v).is_some() {
            return Err(Error::Data(format!("{}: duplicate individual `{id}`", at())));
        }
    }
    if let Some(id) = cov.keys().filter(|id| !rows.contains_key(*id)).min() {
        return Err(Error::Data(format!("individual `{id}` has covariates but no observations in {}", data.display())));
    }

    let mut individuals = Vec::with_capacity(order.len());
    for id in order {
        let v = cov
            .remove(&id)
            .ok_or_else(|| Error::Data(format!("individual `{id}` missing from {}", covariates.display())))?;
        let mut obs = rows.remove(&id).unwrap_or_default();
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let m = obs.len();
        let z = DMatrix::from_fn(m, r, |i, k| obs[i].2[k]);
        individuals.push(Individual {
            id,
            times: obs.iter().map(|o| o.0).collect(),
            y: obs.iter().map(|o| o.1).collect(),
            z,
            v,
        });
    }
    Dataset::new(individuals, p, q, r, sigma2)
}

pub fn dataset_bytes(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut header = vec!["individual_id".to_string(), "time".into(), "y".into()];
    header.extend((1..=dataset.r).map(|k| format!("z_{k}")));
    let mut rows = Vec::with_capacity(dataset.total_obs());
    for ind in &dataset.individuals {
        for i in 0..ind.m() {
            let mut row = vec![ind.id.clone(), fmt_f64(ind.times[i]), fmt_f64(ind.y[i])];
            row.extend((0..dataset.r).map(|k| fmt_f64(ind.z[(i, k)])));
            rows.push(row);
        }
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let data = csv_bytes(&h, &rows)?;

    let mut header = vec!["individual_id".to_string()];
    header.extend((1..=dataset.p).map(|j| format!("v_{j}")));
    let rows: Vec<Vec<String>> = dataset
        .individuals
        .iter()
        .map(|ind| std::iter::once(ind.id.clone()).chain(ind.v.iter().map(|x| fmt_f64(*x))).collect())
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    Ok((data, csv_bytes(&h, &rows)?))
}

pub fn write_dataset(dataset: &Dataset, data: &Path, covariates: &Path) -> Result<()> {
    let (d, c) = dataset_bytes(dataset)?;
    atomic_write(data, &d)?;
    atomic_write(covariates, &c)
}

/// Parameter file (`beta0_support` is 1-based, `gamma0` a row-major lower
/// triangle). Used for the simulation truth and for any fixed `(beta, Gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub beta0_support: Vec<usize>,
    pub beta0_values: Vec<f64>,
    pub gamma0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
}

impl ParamFile {
    pub fn from_params(beta: &SparseCoefficients, gamma: &CovarianceParam, sigma2: Option<f64>) -> Self {
        Self {
            beta0_support: beta.support().iter().map(|j| j + 1).collect(),
            beta0_values: beta.values().to_vec(),
            gamma0: gamma.lower_triangle(),
            sigma2,
        }
    }

    pub fn to_params(&self, dim: usize, r: usize) -> Result<(SparseCoefficients, CovarianceParam)> {
        if self.beta0_support.contains(&0) {
            return Err(Error::Data("beta0_support indices are 1-based".into()));
        }
        let support: Vec<usize> = self.beta0_support.iter().map(|j| j - 1).collect();
        let beta = SparseCoefficients::new(dim, support, self.beta0_values.clone())?;
        if self.gamma0.len() != r * (r + 1) / 2 {
            return Err(Error::Dimension(format!(
                "gamma0 has {} entries, expected {} for r = {r}",
                self.gamma0.len(),
                r * (r + 1) / 2
            )));
        }
        let gamma = CovarianceParam::from_lower_triangle(r, &self.gamma0)?;
        Ok((beta, gamma))
    }
}

pub fn read_params(path: &Path) -> Result<ParamFile> {
    let text = std::fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {}", path.display(), e.message())))
}

pub fn write_params(path: &Path, params: &ParamFile) -> Result<()> {
    let text = toml::to_string(params).map_err(|e| Error::Data(e.to_string()))?;
    atomic_write(path, text.as_bytes())
}

pub const CHAIN_HEADER: [&str; 6] = ["iter", "logpost", "s", "support", "beta_values", "gamma_lt"];

pub fn chain_bytes(chain: &PosteriorChain) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = chain
        .records
        .iter()
        .map(|rec| {
            vec![
                rec.iter.to_string(),
                fmt_f64(rec.logpost),
                rec.support.len().to_string(),
                join_support(&rec.support),
                join_f64(&rec.values),
                join_f64(&rec.gamma_lt),
            ]
        })
        .collect();
    csv_bytes(&CHAIN_HEADER, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{generate, Cell, TruthRules};
    use crate::model::FunctionRegistry;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn float_text_round_trips() {
        for x in [0.0, 1.0, 0.1, 1e-300, -7.32e-73, 123456.789, 1e17, f64::MIN_POSITIVE, 5e-324, 2.0f64.sqrt()] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(-0.0), "0");
        assert_eq!(fmt_f64(1e-73), "1e-73");
        assert_eq!(fmt_f64(0.25), "0.25");
    }

    #[test]
    fn small_dataset_groups_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(
            dir.path(),
            "d.csv",
            "individual_id,time,y,z_1\na,1.0,0.5,1\nb,0,1,1\na,0.0,0.25,1\nb,2,3,1\na,2,0.75,1\nb,1,2,1\n",
        );
        let c = write(dir.path(), "c.csv", "individual_id,v_1,v_2\nb,3,4\na,1,2\n");
        let ds = read_dataset(&d, &c, 1, 0.1).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!((ds.p, ds.r), (2, 1));
        assert_eq!(ds.individuals[0].id, "a");
        assert_eq!(ds.individuals[0].times, vec![0.0, 1.0, 2.0]);
        assert_eq!(ds.individuals[0].y, vec![0.25, 0.5, 0.75]);
        assert_eq!(ds.individuals[1].v, vec![3.0, 4.0]);
        assert!(ds.individuals.iter().all(|i| i.m() == 3));
    }

    #[test]
    fn missing_covariate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(dir.path(), "d.csv", "individual_id,time,y,z_1\na,0,1,1\nzed,0,1,1\n");
        let c = write(dir.path(), "c.csv", "individual_id,v_1\na,1\n");
        let err = read_dataset(&d, &c, 1, 0.1).unwrap_err().to_string();
        assert!(err.contains("zed"), "{err}");
    }

    #[test]
    fn ragged_and_non_numeric_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "c.csv", "individual_id,v_1\na,1\n");
        let d = write(dir.path(), "d.csv", "individual_id,time,y,z_1\na,0,1\n");
        assert!(matches!(read_dataset(&d, &c, 1, 0.1), Err(Error::Data(_))));
        let d = write(dir.path(), "d2.csv", "individual_id,time,y,z_1\na,0,abc,1\n");
        let err = read_dataset(&d, &c, 1, 0.1).unwrap_err().to_string();
        assert!(err.contains("abc"), "{err}");
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let rf = FunctionRegistry::with_builtins().build("logistic", &Default::default()).unwrap();
        let rep = generate(Cell { n: 12, p: 7, s0: 2 }, 1, &TruthRules { r: 2, ..Default::default() }, rf.as_ref(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (d, c) = (dir.path().join("d.csv"), dir.path().join("c.csv"));
        write_dataset(&rep.dataset, &d, &c).unwrap();
        let back = read_dataset(&d, &c, 1, rep.dataset.sigma2).unwrap();
        assert_eq!(back, rep.dataset);

        let pf = ParamFile::from_params(&rep.beta0, &rep.gamma0, Some(0.05));
        let path = dir.path().join("truth.toml");
        write_params(&path, &pf).unwrap();
        let read = read_params(&path).unwrap();
        assert_eq!(read, pf);
        let (b, g) = read.to_params(7, 2).unwrap();
        assert_eq!(b, rep.beta0);
        assert_eq!(g.lower_triangle(), rep.gamma0.lower_triangle());
    }

    #[test]
    fn param_file_rejects_unknown_keys_and_zero_index() {
        let bad: std::result::Result<ParamFile, _> =
            toml::from_str("beta0_support=[1]\nbeta0_values=[1.0]\ngamma0=[1.0]\nextra=1\n");
        assert!(bad.is_err());
        let pf = ParamFile { beta0_support: vec![0], beta0_values: vec![1.0], gamma0: vec![1.0], sigma2: None };
        assert!(pf.to_params(3, 1).is_err());
    }
}
