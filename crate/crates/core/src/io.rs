//! File formats: measurement and grid CSV, run configuration (TOML) and
//! model artifacts (JSON with a schema tag).
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! file reads back to the exact same `f64` values.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::em::EmConfig;
use crate::error::{FrkError, Result};
use crate::geometry::{Location, Measurement};
use crate::model::FittedModel;
use crate::moments::EmptyBinPolicy;
use crate::multicell::{AntennaSpec, CellDomain, CellModel, CellSpec, DEFAULT_A_M, DEFAULT_HALF_ANGLE, DEFAULT_PSI_3DB};

pub const MODEL_SCHEMA: &str = "frk-model/v1";
pub const MULTICELL_SCHEMA: &str = "frk-multicell/v1";

fn parse_err(line: usize, message: impl Into<String>) -> FrkError {
    FrkError::Parse { line, message: message.into() }
}

fn parse_finite(field: &str, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("{name} = {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{name} = {field:?} is not finite")));
    }
    Ok(v)
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn record_line(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map_or(fallback, |p| p.line() as usize)
}

fn read_header<R: Read>(records: &mut csv::StringRecordsIter<'_, R>, accepted: &[&[&str]]) -> Result<usize> {
    let header = match records.next() {
        None => return Err(parse_err(1, "missing header")),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let names: Vec<String> = header.iter().map(|h| h.trim_start_matches('\u{feff}').to_ascii_lowercase()).collect();
    accepted
        .iter()
        .find(|a| a.len() == names.len() && a.iter().zip(&names).all(|(x, y)| x == y))
        .map(|a| a.len())
        .ok_or_else(|| parse_err(1, format!("expected header {}", accepted.iter().map(|a| a.join(",")).collect::<Vec<_>>().join(" or "))))
}

/// Reads `x,y,rsrp[,cid]` rows in file order. Line numbers in errors are
/// 1-based and count the header.
pub fn parse_measurements<R: Read>(input: R) -> Result<Vec<Measurement>> {
    let mut reader = csv_reader(input);
    let mut records = reader.records();
    let width = read_header(&mut records, &[&["x", "y", "rsrp"], &["x", "y", "rsrp", "cid"]])?;
    let mut out = Vec::new();
    for (k, rec) in records.enumerate() {
        let rec = rec.map_err(|e| parse_err(k + 2, e.to_string()))?;
        let line = record_line(&rec, k + 2);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let mut m = Measurement::new(
            parse_finite(&rec[0], "x", line)?,
            parse_finite(&rec[1], "y", line)?,
            parse_finite(&rec[2], "rsrp", line)?,
        );
        if width == 4 {
            if rec[3].is_empty() {
                return Err(parse_err(line, "empty cid"));
            }
            m.cid = Some(rec[3].to_string());
        }
        out.push(m);
    }
    Ok(out)
}

pub fn read_measurements(path: &Path) -> Result<Vec<Measurement>> {
    let obs = parse_measurements(std::fs::File::open(path)?)?;
    log::info!("read {} measurements from {}", obs.len(), path.display());
    Ok(obs)
}

fn check_cid_field(cid: &str) -> Result<()> {
    if cid.is_empty() || cid.contains([',', '"', '\n', '\r']) || cid.trim() != cid {
        return Err(FrkError::Format(format!("cid {cid:?} cannot be written unquoted")));
    }
    Ok(())
}

pub fn write_measurements<W: Write>(mut out: W, obs: &[Measurement]) -> Result<()> {
    let with_cid = obs.iter().any(|m| m.cid.is_some());
    if with_cid && obs.iter().any(|m| m.cid.is_none()) {
        return Err(FrkError::Format("cid present on some measurements only".into()));
    }
    let mut buf = String::from(if with_cid { "x,y,rsrp,cid\n" } else { "x,y,rsrp\n" });
    for m in obs {
        write!(buf, "{},{},{}", m.loc.x, m.loc.y, m.value).expect("string write");
        if let Some(c) = &m.cid {
            check_cid_field(c)?;
            write!(buf, ",{c}").expect("string write");
        }
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

/// One output grid point. `z_hat` and `var` are NaN where no cell covers the
/// location, and `cid_hat` is then empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    pub z_hat: f64,
    pub var: f64,
    pub cid_hat: Option<String>,
}

pub fn write_grid<W: Write>(mut out: W, rows: &[GridRow], with_cid: bool) -> Result<()> {
    if rows.is_empty() {
        return Err(FrkError::Format("grid is empty".into()));
    }
    let mut buf = String::from(if with_cid { "x,y,z_hat,var,cid_hat\n" } else { "x,y,z_hat,var\n" });
    for r in rows {
        write!(buf, "{},{},{},{}", r.x, r.y, r.z_hat, r.var).expect("string write");
        if with_cid {
            let c = r.cid_hat.as_deref().unwrap_or("");
            if !c.is_empty() {
                check_cid_field(c)?;
            }
            write!(buf, ",{c}").expect("string write");
        }
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

fn parse_number(field: &str, name: &str, line: usize) -> Result<f64> {
    let f = field.trim();
    if f == "NaN" {
        return Ok(f64::NAN);
    }
    parse_finite(f, name, line)
}

pub fn parse_grid<R: Read>(input: R) -> Result<Vec<GridRow>> {
    let mut reader = csv_reader(input);
    let mut records = reader.records();
    let width = read_header(&mut records, &[&["x", "y", "z_hat", "var"], &["x", "y", "z_hat", "var", "cid_hat"]])?;
    let mut out = Vec::new();
    for (k, rec) in records.enumerate() {
        let rec = rec.map_err(|e| parse_err(k + 2, e.to_string()))?;
        let line = record_line(&rec, k + 2);
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        out.push(GridRow {
            x: parse_finite(&rec[0], "x", line)?,
            y: parse_finite(&rec[1], "y", line)?,
            z_hat: parse_number(&rec[2], "z_hat", line)?,
            var: parse_number(&rec[3], "var", line)?,
            cid_hat: if width == 5 && !rec[4].is_empty() { Some(rec[4].to_string()) } else { None },
        });
    }
    Ok(out)
}

/// Parses `X,Y` into a location.
pub fn parse_point(s: &str) -> Result<Location> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(FrkError::Format(format!("expected X,Y, got {s:?}")));
    }
    Ok(Location::new(parse_finite(parts[0], "x", 1)?, parse_finite(parts[1], "y", 1)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntennaConfig {
    pub cid: String,
    pub x: f64,
    pub y: f64,
    pub azimuth: f64,
    #[serde(default = "default_psi")]
    pub psi_3db: f64,
    #[serde(default = "default_a_m")]
    pub a_m: f64,
    #[serde(default = "default_wedge")]
    pub wedge: f64,
    #[serde(default)]
    pub max_radius: Option<f64>,
}

fn default_psi() -> f64 {
    DEFAULT_PSI_3DB
}
fn default_a_m() -> f64 {
    DEFAULT_A_M
}
fn default_wedge() -> f64 {
    DEFAULT_HALF_ANGLE
}

impl AntennaConfig {
    pub fn from_spec(cid: &str, a: &AntennaSpec, d: &CellDomain) -> Self {
        Self {
            cid: cid.to_string(),
            x: a.site.x,
            y: a.site.y,
            azimuth: a.azimuth,
            psi_3db: a.psi_3db,
            a_m: a.a_m,
            wedge: d.half_angle,
            max_radius: d.max_radius,
        }
    }

    /// Cell description; `use_domain = false` makes the cell eligible
    /// everywhere.
    pub fn to_cell_spec(&self, use_domain: bool) -> Result<CellSpec> {
        let antenna = AntennaSpec {
            site: Location::new(self.x, self.y),
            azimuth: self.azimuth,
            psi_3db: self.psi_3db,
            a_m: self.a_m,
        };
        antenna.validate()?;
        let domain = CellDomain { half_angle: self.wedge, max_radius: self.max_radius };
        domain.validate()?;
        Ok(CellSpec {
            cid: self.cid.clone(),
            antenna,
            domain: use_domain.then_some(domain),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MomentsSection {
    pub bins: Option<usize>,
    pub empty_bins: Option<EmptyBinPolicy>,
    pub repair: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub model: Option<String>,
    pub trace: Option<String>,
    pub grid: Option<String>,
    pub report: Option<String>,
}

/// Run configuration. Every key is optional; command-line flags override it.
/// Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tau: Option<f64>,
    pub min_dist: Option<f64>,
    pub k_folds: Option<usize>,
    pub seed: Option<u64>,
    pub resolution: Option<f64>,
    /// Transmitter position `[x, y]` for single-cell commands.
    pub tx: Option<[f64; 2]>,
    pub em: Option<EmConfig>,
    pub moments: Option<MomentsSection>,
    #[serde(default)]
    pub antennas: Vec<AntennaConfig>,
    pub output: Option<OutputPaths>,
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| FrkError::Format(format!("config: {e}")))?;
    if let Some(em) = &cfg.em {
        em.validate()?;
    }
    Ok(cfg)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}

pub fn run_config_to_string(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| FrkError::Format(format!("config: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub schema: String,
    pub model: FittedModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MulticellArtifact {
    pub schema: String,
    pub cells: Vec<CellModel>,
}

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(FrkError::Format(format!("unsupported schema {found:?}, expected {expected:?}")));
    }
    Ok(())
}

fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| FrkError::Parse { line: e.line(), message: e.to_string() })
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| FrkError::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn check_model(model: &FittedModel) -> Result<()> {
    model.params.validate()?;
    model.trend.validate()?;
    crate::basis::BasisSet::new(model.basis.centers.clone(), model.basis.tau)?;
    let r = model.basis.len();
    if model.params.alpha.len() != model.trend.p() {
        return Err(FrkError::LengthMismatch { left: model.params.alpha.len(), right: model.trend.p() });
    }
    if model.eta_mean.len() != r || model.eta_cov.shape() != (r, r) {
        return Err(FrkError::Format(format!("posterior caches do not match r = {r}")));
    }
    if model.eta_mean.iter().chain(model.eta_cov.iter()).any(|v| !v.is_finite()) {
        return Err(FrkError::Format("posterior caches contain non-finite values".into()));
    }
    Ok(())
}

pub fn model_to_json(model: &FittedModel) -> Result<String> {
    to_json(&ModelArtifact { schema: MODEL_SCHEMA.into(), model: model.clone() })
}

pub fn parse_model_artifact(text: &str) -> Result<FittedModel> {
    let art: ModelArtifact = from_json(text)?;
    check_schema(&art.schema, MODEL_SCHEMA)?;
    check_model(&art.model)?;
    Ok(art.model)
}

pub fn multicell_to_json(cells: &[CellModel]) -> Result<String> {
    to_json(&MulticellArtifact { schema: MULTICELL_SCHEMA.into(), cells: cells.to_vec() })
}

pub fn parse_multicell_artifact(text: &str) -> Result<Vec<CellModel>> {
    let art: MulticellArtifact = from_json(text)?;
    check_schema(&art.schema, MULTICELL_SCHEMA)?;
    for c in &art.cells {
        c.antenna.validate()?;
        if let Some(d) = &c.domain {
            d.validate()?;
        }
        check_model(&c.fitted)?;
    }
    Ok(art.cells)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
