//! CSV ingestion and artifact writers.
//!
//! Numbers are written with 17 significant digits so that every value
//! survives a write/read round trip exactly. Files are written to a
//! temporary sibling and renamed into place.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::Value;

use crate::design::{Design, OptimalDesign};
use crate::error::{Error, Result};
use crate::estimator::{OdiwiResult, SecondStageData};
use crate::glm::FamilyKind;
use crate::sim::{MetricsRow, SummaryRow, TraceRow};
use crate::stage1::FirstStageData;

/// Formats `v` with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Row counts and column names of a loaded file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadReport {
    pub path: PathBuf,
    pub rows: usize,
    pub columns: Vec<String>,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} rows, columns [{}]",
            self.path.display(),
            self.rows,
            self.columns.join(", ")
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Id,
    Exposure,
    Outcome,
    Personal,
    Geo,
}

fn role_of(name: &str, second_stage: bool) -> Option<Role> {
    let numbered = |prefix: char| {
        name.strip_prefix(prefix)
            .is_some_and(|rest| rest.is_empty() || rest.chars().all(|c| c.is_ascii_digit()))
    };
    match name {
        "id" => Some(Role::Id),
        "y" if second_stage => Some(Role::Outcome),
        _ if !second_stage && numbered('x') => Some(Role::Exposure),
        _ if second_stage && numbered('z') => Some(Role::Personal),
        _ if numbered('r') => Some(Role::Geo),
        _ => None,
    }
}

struct Table {
    ids: Vec<String>,
    columns: Vec<(Role, String, Vec<f64>)>,
    report: LoadReport,
}

impl Table {
    fn matrix(&self, role: Role) -> DMatrix<f64> {
        let cols: Vec<&Vec<f64>> = self.columns.iter().filter(|c| c.0 == role).map(|c| &c.2).collect();
        DMatrix::from_fn(self.ids.len(), cols.len(), |i, j| cols[j][i])
    }

    fn count(&self, role: Role) -> usize {
        self.columns.iter().filter(|c| c.0 == role).count()
    }
}

fn csv_error(e: csv::Error, row: usize) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::Schema {
            row,
            column: String::new(),
            message: e.to_string(),
        },
    }
}

fn read_table(path: &Path, second_stage: bool) -> Result<Table> {
    let file = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(e, 0))?
        .iter()
        .map(String::from)
        .collect();
    let mut roles = Vec::with_capacity(header.len());
    for name in &header {
        let role = role_of(name, second_stage).ok_or_else(|| Error::Schema {
            row: 0,
            column: name.clone(),
            message: "unrecognized column".into(),
        })?;
        if role != Role::Geo && role != Role::Personal && role != Role::Exposure && roles.contains(&role) {
            return Err(Error::Schema {
                row: 0,
                column: name.clone(),
                message: "duplicate column".into(),
            });
        }
        roles.push(role);
    }
    let mut ids = Vec::new();
    let mut columns: Vec<(Role, String, Vec<f64>)> = header
        .iter()
        .zip(&roles)
        .filter(|(_, r)| **r != Role::Id)
        .map(|(h, r)| (*r, h.clone(), Vec::new()))
        .collect();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(e, row))?;
        let mut c = 0;
        for (field, (name, role)) in record.iter().zip(header.iter().zip(&roles)) {
            if field.is_empty() || field.eq_ignore_ascii_case("na") {
                return Err(Error::MissingValue {
                    row,
                    column: name.clone(),
                });
            }
            if *role == Role::Id {
                ids.push(field.to_string());
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Schema {
                row,
                column: name.clone(),
                message: format!("{field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Schema {
                    row,
                    column: name.clone(),
                    message: format!("{field:?} is not finite"),
                });
            }
            columns[c].2.push(v);
            c += 1;
        }
        if !roles.contains(&Role::Id) {
            ids.push(i.to_string());
        }
    }
    let report = LoadReport {
        path: path.to_path_buf(),
        rows: ids.len(),
        columns: header,
    };
    Ok(Table { ids, columns, report })
}

/// Reads a first-stage file with header `id,x,r1,...,rd`.
///
/// Several exposure columns may be given as `x1,x2`. The `id` column is optional.
pub fn load_first_stage(path: &Path) -> Result<(FirstStageData, LoadReport)> {
    let t = read_table(path, false)?;
    if t.count(Role::Exposure) == 0 {
        return Err(Error::Schema {
            row: 0,
            column: "x".into(),
            message: "first-stage file needs an exposure column".into(),
        });
    }
    let data = FirstStageData::new(t.ids.clone(), t.matrix(Role::Exposure), t.matrix(Role::Geo))?;
    Ok((data, t.report))
}

/// Reads a second-stage file with header `id,y,z1,...,zq,r1,...,rd`.
///
/// When `family` is given, outcomes outside its support are a schema error
/// at the first offending row.
pub fn load_second_stage(path: &Path, family: Option<FamilyKind>) -> Result<(SecondStageData, LoadReport)> {
    let t = read_table(path, true)?;
    let y = t
        .columns
        .iter()
        .find(|c| c.0 == Role::Outcome)
        .ok_or_else(|| Error::Schema {
            row: 0,
            column: "y".into(),
            message: "second-stage file needs an outcome column".into(),
        })?;
    let outcomes = DVector::from_column_slice(&y.2);
    let data = SecondStageData::new(t.ids.clone(), outcomes, t.matrix(Role::Personal), t.matrix(Role::Geo))?;
    if let Some(f) = family {
        data.check_family(f)?;
    }
    Ok((data, t.report))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Self-describing block attached to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
}

impl Metadata {
    pub fn new(command: &str, seed: Option<u64>, config: Value) -> Self {
        Metadata {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config,
        }
    }
}

/// `<path>.meta.json`, the metadata companion of a CSV artifact.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// `dir/<stem><suffix>` for the artifact at `path`, e.g. `metrics_summary.csv`.
pub fn companion_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_sidecar(path: &Path, meta: &Metadata) -> Result<()> {
    write_json_value(&sidecar_path(path), &serde_json::to_value(meta).map_err(json_err)?)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(e.to_string())
}

fn write_json_value(path: &Path, v: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(json_err)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Serializes `value` as a JSON object and adds a `metadata` key.
pub fn write_json_with_metadata<T: Serialize>(path: &Path, value: &T, meta: &Metadata) -> Result<()> {
    let mut v = serde_json::to_value(value).map_err(json_err)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::InvalidArgument("artifact must serialize to a JSON object".into()))?;
    obj.insert("metadata".into(), serde_json::to_value(meta).map_err(json_err)?);
    write_json_value(path, &v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignArtifact<'a> {
    pub support: &'a [Vec<f64>],
    pub weights: &'a [f64],
    pub criterion: String,
    pub certificate: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl<'a> DesignArtifact<'a> {
    /// The solver result with its support replaced by `design` (e.g. after pruning).
    pub fn new(opt: &'a OptimalDesign, design: &'a Design) -> Self {
        DesignArtifact {
            support: &design.support,
            weights: &design.weights,
            criterion: opt.criterion.to_string(),
            certificate: opt.certificate,
            value: opt.value,
            iterations: opt.iterations,
            converged: opt.converged,
        }
    }
}

/// Reads the `support` and `weights` of a design JSON file.
pub fn read_design(path: &Path) -> Result<Design> {
    #[derive(serde::Deserialize)]
    struct Raw {
        support: Vec<Vec<f64>>,
        weights: Vec<f64>,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let raw: Raw = serde_json::from_str(&text).map_err(|e| Error::Schema {
        row: e.line(),
        column: String::new(),
        message: e.to_string(),
    })?;
    Design::normalized(raw.support, raw.weights)
}

pub fn write_first_stage(path: &Path, data: &FirstStageData) -> Result<()> {
    let p = data.exposure_dim();
    let mut header = vec!["id".to_string()];
    header.extend((1..=p).map(|j| if p == 1 { "x".to_string() } else { format!("x{j}") }));
    header.extend((1..=data.covariate_dim()).map(|j| format!("r{j}")));
    let rows = (0..data.len()).map(|i| {
        let mut r = vec![data.ids[i].clone()];
        r.extend(data.exposures.row(i).iter().map(|&v| fmt_f64(v)));
        r.extend(data.covariates.row(i).iter().map(|&v| fmt_f64(v)));
        r
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

pub fn write_second_stage(path: &Path, data: &SecondStageData) -> Result<()> {
    let mut header = vec!["id".to_string(), "y".to_string()];
    header.extend((1..=data.covariates.ncols()).map(|j| format!("z{j}")));
    header.extend((1..=data.geo.ncols()).map(|j| format!("r{j}")));
    let rows = (0..data.len()).map(|i| {
        let mut r = vec![data.ids[i].clone(), fmt_f64(data.outcomes[i])];
        r.extend(data.covariates.row(i).iter().map(|&v| fmt_f64(v)));
        r.extend(data.geo.row(i).iter().map(|&v| fmt_f64(v)));
        r
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Long-format `iteration,init_id,coefficient,value` table of `beta_hat`.
pub fn write_trajectory(path: &Path, result: &OdiwiResult, meta: &Metadata) -> Result<()> {
    let mut rows = Vec::new();
    for chain in &result.chains {
        for e in &chain.entries {
            for (name, v) in result.coefficient_names.iter().zip(&e.beta_hat) {
                rows.push(vec![
                    e.iteration.to_string(),
                    chain.label.clone(),
                    name.clone(),
                    fmt_f64(*v),
                ]);
            }
        }
    }
    write_csv(path, &["iteration", "init_id", "coefficient", "value"], rows)?;
    write_sidecar(path, meta)
}

pub fn write_weights(path: &Path, ids: &[String], weights: &[f64], meta: &Metadata) -> Result<()> {
    let rows = ids.iter().zip(weights).map(|(id, w)| vec![id.clone(), fmt_f64(*w)]);
    write_csv(path, &["id", "weight"], rows)?;
    write_sidecar(path, meta)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow], meta: &Metadata) -> Result<()> {
    let out = rows.iter().map(|r| {
        vec![
            r.estimator.clone(),
            fmt_f64(r.beta_x_true),
            r.rep.to_string(),
            fmt_f64(r.beta_hat),
            fmt_f64(r.error),
            fmt_f64(r.stage1_rmse),
            r.flags.clone(),
        ]
    });
    write_csv(
        path,
        &[
            "estimator",
            "beta_x_true",
            "rep",
            "beta_hat",
            "error",
            "stage1_rmse",
            "flags",
        ],
        out,
    )?;
    write_sidecar(path, meta)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow], meta: &Metadata) -> Result<()> {
    let out = rows.iter().map(|r| {
        vec![
            r.estimator.clone(),
            fmt_f64(r.beta_x_true),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
            fmt_f64(r.mean_error),
            fmt_f64(r.sd_error),
            fmt_f64(r.q025),
            fmt_f64(r.q975),
            fmt_f64(r.mean_abs_error),
            fmt_f64(r.mean_stage1_rmse),
        ]
    });
    write_csv(
        path,
        &[
            "estimator",
            "beta_x_true",
            "n_ok",
            "n_failed",
            "mean_error",
            "sd_error",
            "q025",
            "q975",
            "mean_abs_error",
            "mean_stage1_rmse",
        ],
        out,
    )?;
    write_sidecar(path, meta)
}

pub fn write_traces(path: &Path, rows: &[TraceRow], meta: &Metadata) -> Result<()> {
    let out = rows.iter().map(|r| {
        vec![
            fmt_f64(r.beta_x_true),
            r.rep.to_string(),
            r.iteration.to_string(),
            fmt_f64(r.beta_hat),
        ]
    });
    write_csv(path, &["beta_x_true", "rep", "iteration", "beta_hat"], out)?;
    write_sidecar(path, meta)
}

pub fn write_replicates(path: &Path, replicates: &[f64], meta: &Metadata) -> Result<()> {
    let out = replicates
        .iter()
        .enumerate()
        .map(|(b, v)| vec![b.to_string(), fmt_f64(*v)]);
    write_csv(path, &["replicate", "beta_x"], out)?;
    write_sidecar(path, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("odiwi-io-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn loads_first_stage() {
        let d = tmpdir("first");
        let p = d.join("a.csv");
        fs::write(
            &p,
            "id,x,r1,r2,r3\na,1,0,0,1\nb,2,1,0,0\nc,3,0,1,0\nd,4,1,1,1\ne,5,2,0,1\n",
        )
        .unwrap();
        let (data, report) = load_first_stage(&p).unwrap();
        assert_eq!(data.len(), 5);
        assert_eq!(data.covariate_dim(), 3);
        assert_eq!(report.columns, ["id", "x", "r1", "r2", "r3"]);
        assert_eq!(data.ids[4], "e");
    }

    #[test]
    fn missing_cell_is_located() {
        let d = tmpdir("missing");
        let p = d.join("a.csv");
        fs::write(
            &p,
            "id,x,r1,r2,r3\na,1,0,0,1\nb,2,1,0,0\nc,3,0,,0\nd,4,1,1,1\ne,5,2,0,1\n",
        )
        .unwrap();
        assert_eq!(
            load_first_stage(&p).unwrap_err(),
            Error::MissingValue {
                row: 3,
                column: "r2".into()
            }
        );
    }

    #[test]
    fn outcome_outside_support() {
        let d = tmpdir("second");
        let p = d.join("b.csv");
        fs::write(&p, "id,y,z1,r1\na,0,1,0.5\nb,1,0,0.2\nc,2,1,0.1\nd,3,1,0.1\n").unwrap();
        let err = load_second_stage(&p, Some(FamilyKind::BernoulliLogit)).unwrap_err();
        assert!(
            matches!(err, Error::Schema { row: 3, ref column, .. } if column == "y"),
            "{err:?}"
        );
        let (data, _) = load_second_stage(&p, Some(FamilyKind::GaussianIdentity)).unwrap();
        assert_eq!(data.covariates.ncols(), 1);
    }

    #[test]
    fn unknown_column_and_bad_number() {
        let d = tmpdir("schema");
        let p = d.join("a.csv");
        fs::write(&p, "id,x,w\na,1,0\n").unwrap();
        assert!(matches!(load_first_stage(&p), Err(Error::Schema { row: 0, .. })));
        fs::write(&p, "id,x,r1\na,1,0\nb,abc,1\n").unwrap();
        assert!(matches!(load_first_stage(&p), Err(Error::Schema { row: 2, .. })));
    }

    #[test]
    fn numbers_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123_456_789.123_456_79, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let d = tmpdir("atomic");
        let p = d.join("out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        let leftovers = fs::read_dir(&d)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() != "out.txt")
            .count();
        assert_eq!(leftovers, 0);
    }
}
