//! The `frk` command-line driver.
//!
//! Exit codes: 0 success, 2 usage error, 3 unreadable or malformed input,
//! 4 missing model artifact, 5 fitting or numerical failure, 1 anything else.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::basis::{build_basis_set, candidate_grid};
use crate::em::{fit_em, EmConfig};
use crate::error::FrkError;
use crate::evaluation::{cross_validate, CvConfig, CvMethod};
use crate::geometry::{BoundingBox, Location, Measurement};
use crate::io::{self, AntennaConfig, GridRow, RunConfig};
use crate::model::{build_design_matrices, observation_vector, SufficientStats, MAX_DESIGN_CONDITION};
use crate::moments::{estimate_moments, MomentsConfig, MomentsDiagnostics};
use crate::multicell::{cid_error_report, fit_cells, predict_cid_and_power, CellDomain, MulticellFitConfig, TrendKind};
use crate::prediction::{predict_grid, predict_variance, GridSpec, DEFAULT_GRID_CAP};
use crate::synthetic::{self, Sampling, ScenarioSpec};
use crate::trend::{TrendSpec, DEFAULT_MIN_DIST};

#[derive(Debug, Parser)]
#[command(name = "frk", version, about = "Radio coverage maps by fixed rank kriging")]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioKind {
    Lognormal,
    Frk,
    Multicell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Lognormal,
    Frk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrendArg {
    Omni,
    Directional,
}

#[derive(Debug, clap::Args)]
pub struct SingleCellArgs {
    /// Measurement CSV with header x,y,rsrp.
    #[arg(long)]
    pub input: PathBuf,
    /// Transmitter position as X,Y in meters.
    #[arg(long)]
    pub tx: Option<String>,
    /// Bi-square radius in meters.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub min_dist: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic measurement file.
    Simulate {
        #[arg(long, value_enum, default_value = "frk")]
        scenario: ScenarioKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of uniformly drawn points (ignored with --grid-step).
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        grid_step: Option<f64>,
        #[arg(long, default_value_t = 1000.0)]
        width: f64,
        #[arg(long, default_value_t = 1000.0)]
        height: f64,
        #[arg(long, default_value = "500,500")]
        tx: String,
        #[arg(long, default_value_t = -49.55)]
        p_t: f64,
        #[arg(long, default_value_t = 2.73)]
        kappa: f64,
        /// White-noise variance in dB^2.
        #[arg(long, default_value_t = 3.0)]
        noise_var: f64,
        /// Radius of the basis carrying the simulated field.
        #[arg(long, default_value_t = 50.0)]
        tau_truth: f64,
        /// Variance scale 1/beta of the basis coefficients.
        #[arg(long, default_value_t = 12.5)]
        inv_beta: f64,
        #[arg(long, default_value_t = 3.63)]
        phi: f64,
        /// For the multicell scenario: where to write the antenna layout.
        #[arg(long)]
        layout_out: Option<PathBuf>,
    },
    /// Fit the model by EM and save it.
    Fit {
        #[command(flatten)]
        data: SingleCellArgs,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Method-of-moments estimate with its degeneracy diagnostics.
    FitMoments {
        #[command(flatten)]
        data: SingleCellArgs,
        #[arg(long)]
        bins: Option<usize>,
        /// Lift small eigenvalues of the estimate when it is not PD.
        #[arg(long)]
        repair: bool,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Predict a grid from a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        resolution: Option<f64>,
        /// MINX,MINY,MAXX,MAXY; defaults to the basis centers' extent.
        #[arg(long)]
        bbox: Option<String>,
        /// Add the noise variance to report intervals for new measurements.
        #[arg(long)]
        with_noise: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        data: SingleCellArgs,
        #[arg(long, value_enum, default_value = "frk")]
        method: MethodArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Fit one model per cell.
    MulticellFit {
        /// Measurement CSV with header x,y,rsrp,cid.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum, default_value = "directional")]
        trend: TrendArg,
        /// Let every cell compete everywhere.
        #[arg(long)]
        no_domains: bool,
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Serving cell and power over a grid, optionally scored on test data.
    MulticellPredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        resolution: Option<f64>,
        #[arg(long)]
        bbox: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test CSV with reported cids; writes the error report.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Summaries of a measurement file and its design.
    Diagnose {
        #[command(flatten)]
        data: SingleCellArgs,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
}

/// Error category, mapped to the exit code.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    MissingModel(String),
    Fit(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Input(_) => 3,
            CliError::MissingModel(_) => 4,
            CliError::Fit(_) => 5,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Input(m) => format!("input error: {m}"),
            CliError::MissingModel(m) => format!("missing model: {m}"),
            CliError::Fit(m) => format!("fit error: {m}"),
            CliError::Other(m) => format!("error: {m}"),
        }
    }
}

impl From<FrkError> for CliError {
    fn from(e: FrkError) -> Self {
        match e {
            FrkError::Parse { .. } | FrkError::Format(_) | FrkError::Io(_) => CliError::Input(e.to_string()),
            FrkError::InvalidParameter(_) | FrkError::LengthMismatch { .. } | FrkError::GridTooLarge { .. } => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Fit(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let start = Instant::now();
    match execute(&cli) {
        Ok(()) => {
            log::info!("done in {:.3} s", start.elapsed().as_secs_f64());
            0
        }
        Err(e) => {
            eprintln!("{}", e.message());
            e.exit_code()
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> CliResult<RunConfig> {
    match path {
        Some(p) => Ok(io::read_run_config(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn required<T>(value: Option<T>, what: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Input(format!("{what} is required (flag or config)")))
}

fn output_path(flag: &Option<PathBuf>, cfg: Option<&String>, what: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| cfg.map(PathBuf::from))
        .ok_or_else(|| CliError::Input(format!("no output path for the {what}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    io::write_text(path, &io::to_json(value)?)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn parse_bbox(s: &str) -> CliResult<BoundingBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Input(format!("bad bbox {s:?}")))?;
    if v.len() != 4 {
        return Err(CliError::Input(format!("bbox needs 4 numbers, got {s:?}")));
    }
    Ok(BoundingBox::new(v[0], v[1], v[2], v[3])?)
}

struct SingleCell {
    obs: Vec<Measurement>,
    trend: TrendSpec,
    tau: f64,
    area: BoundingBox,
}

fn single_cell(args: &SingleCellArgs, cfg: &RunConfig) -> CliResult<SingleCell> {
    let obs = io::read_measurements(&args.input)?;
    let tx = match (&args.tx, cfg.tx) {
        (Some(s), _) => io::parse_point(s)?,
        (None, Some([x, y])) => Location::new(x, y),
        (None, None) => return Err(CliError::Input("transmitter position is required (--tx X,Y)".into())),
    };
    let mut trend = TrendSpec::omni(tx);
    trend.min_dist = args.min_dist.or(cfg.min_dist).unwrap_or(DEFAULT_MIN_DIST);
    trend.validate()?;
    let tau = required(args.tau.or(cfg.tau), "--tau")?;
    let area = BoundingBox::of_measurements(&obs).ok_or_else(|| CliError::Input("no measurements".into()))?;
    Ok(SingleCell { obs, trend, tau, area })
}

fn em_config(cfg: &RunConfig) -> EmConfig {
    cfg.em.clone().unwrap_or_default()
}

fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(&cli.config)?;
    let outputs = cfg.output.clone().unwrap_or_default();
    match &cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
            n,
            grid_step,
            width,
            height,
            tx,
            p_t,
            kappa,
            noise_var,
            tau_truth,
            inv_beta,
            phi,
            layout_out,
        } => {
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let sampling = match grid_step {
                Some(step) => Sampling::Grid { step: *step },
                None => Sampling::Uniform { n: *n },
            };
            let obs = match scenario {
                ScenarioKind::Multicell => {
                    let mut sc = synthetic::default_multicell_scenario(seed);
                    sc.noise_var = *noise_var;
                    if let Some(step) = grid_step {
                        sc.sampling = Sampling::Grid { step: *step };
                    }
                    if let Some(path) = layout_out {
                        let layout = RunConfig {
                            antennas: sc
                                .cells
                                .iter()
                                .map(|c| AntennaConfig::from_spec(&c.cid, &c.antenna, &CellDomain::default()))
                                .collect(),
                            ..RunConfig::default()
                        };
                        io::write_text(path, &io::run_config_to_string(&layout)?)?;
                    }
                    synthetic::gen_multicell(&sc)?.obs
                }
                _ => {
                    let spec = ScenarioSpec {
                        bbox: BoundingBox::new(0.0, 0.0, *width, *height)?,
                        sampling,
                        trend: TrendSpec::omni(io::parse_point(tx)?),
                        alpha: vec![*p_t, *kappa],
                        noise_var: *noise_var,
                        seed,
                    };
                    if *scenario == ScenarioKind::Lognormal {
                        synthetic::gen_lognormal(&spec)?
                    } else {
                        let basis = synthetic::truth_basis(&spec.bbox, *tau_truth)?;
                        synthetic::gen_frk(&spec, &basis, 1.0 / inv_beta, *phi)?.0
                    }
                }
            };
            let mut buf = Vec::new();
            io::write_measurements(&mut buf, &obs)?;
            io::write_text(out, std::str::from_utf8(&buf).expect("ascii csv"))?;
            log::info!("wrote {} measurements to {}", obs.len(), out.display());
            Ok(())
        }
        Command::Fit { data, model_out, trace_out } => {
            let sc = single_cell(data, &cfg)?;
            let locs: Vec<Location> = sc.obs.iter().map(|m| m.loc).collect();
            let basis = build_basis_set(&sc.area, sc.tau, &locs)?;
            log::info!("N = {}, r = {}", sc.obs.len(), basis.len());
            let start = Instant::now();
            let (model, trace) = fit_em(&sc.obs, &basis, &sc.trend, &em_config(&cfg))?;
            eprintln!(
                "fit: r = {}, {} iterations, converged = {}, {:.3} s",
                basis.len(),
                trace.iterations(),
                trace.converged,
                start.elapsed().as_secs_f64()
            );
            io::write_text(&output_path(model_out, outputs.model.as_ref(), "model")?, &io::model_to_json(&model)?)?;
            if let Some(p) = trace_out.clone().or_else(|| outputs.trace.as_ref().map(PathBuf::from)) {
                write_json(&p, &trace)?;
            }
            Ok(())
        }
        Command::FitMoments { data, bins, repair, report_out } => {
            let sc = single_cell(data, &cfg)?;
            let locs: Vec<Location> = sc.obs.iter().map(|m| m.loc).collect();
            let basis = build_basis_set(&sc.area, sc.tau, &locs)?;
            let dm = build_design_matrices(&sc.obs, &basis, &sc.trend)?;
            let section = cfg.moments.clone().unwrap_or_default();
            let mc = MomentsConfig {
                bins: bins.or(section.bins),
                empty_bins: section.empty_bins.unwrap_or_default(),
                repair: *repair || section.repair.unwrap_or(false),
            };
            let (binned, res) = estimate_moments(&sc.obs, &dm, &mc)?;
            if !res.diagnostics.k_hat_pd {
                eprintln!("moments: K_hat is not positive definite (margin {:e})", res.diagnostics.k_hat_pd_margin);
            }
            let report = MomentsReport {
                n: sc.obs.len(),
                r: basis.len(),
                m: binned.binning.m(),
                sigma2_hat: res.sigma2_hat,
                k_hat_trace: res.k_hat.trace(),
                repaired: res.repaired,
                diagnostics: res.diagnostics,
            };
            write_json(&output_path(report_out, outputs.report.as_ref(), "report")?, &report)
        }
        Command::Predict { model, resolution, bbox, with_noise, out } => {
            let text = std::fs::read_to_string(model)
                .map_err(|e| CliError::MissingModel(format!("{}: {e}", model.display())))?;
            let fitted = io::parse_model_artifact(&text)?;
            let res = required(resolution.or(cfg.resolution), "--resolution")?;
            let area = match bbox {
                Some(s) => parse_bbox(s)?,
                None => BoundingBox::enclosing(fitted.basis.centers.iter()).expect("non-empty basis"),
            };
            let grid = predict_grid(&area, res, &fitted, DEFAULT_GRID_CAP)?;
            let rows: Vec<GridRow> = grid
                .values
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let loc = grid.spec.point(k);
                    let p = if *with_noise { p.with_noise(fitted.params.sigma2) } else { *p };
                    GridRow { x: loc.x, y: loc.y, z_hat: p.z_hat, var: p.var, cid_hat: None }
                })
                .collect();
            let path = output_path(out, outputs.grid.as_ref(), "grid")?;
            let mut buf = Vec::new();
            io::write_grid(&mut buf, &rows, false)?;
            io::write_text(&path, std::str::from_utf8(&buf).expect("ascii csv"))?;
            Ok(())
        }
        Command::Crossval { data, method, k, seed, report_out } => {
            let sc = single_cell(data, &cfg)?;
            let method = match method {
                MethodArg::Lognormal => CvMethod::Lognormal,
                MethodArg::Frk => CvMethod::Frk { tau: sc.tau },
            };
            let cv = CvConfig {
                method,
                k: k.or(cfg.k_folds).unwrap_or(5),
                seed: seed.or(cfg.seed).unwrap_or(0),
                trend: sc.trend.clone(),
                em: em_config(&cfg),
                area: Some(sc.area),
            };
            let report = cross_validate(&sc.obs, &cv)?;
            eprintln!(
                "crossval: mean RMSE {:.4} dB (std {:.4}), {} failed folds, {:.3} s",
                report.mean_rmse,
                report.std_rmse,
                report.failed_folds,
                report.total_time.as_secs_f64()
            );
            write_json(&output_path(report_out, outputs.report.as_ref(), "report")?, &report)
        }
        Command::MulticellFit { input, tau, trend, no_domains, model_out } => {
            let obs = io::read_measurements(input)?;
            if obs.iter().any(|m| m.cid.is_none()) {
                return Err(CliError::Input("multicell input needs a cid column".into()));
            }
            if cfg.antennas.is_empty() {
                return Err(CliError::Input("the config file must list the antennas".into()));
            }
            let cells = cfg
                .antennas
                .iter()
                .map(|a| a.to_cell_spec(!no_domains))
                .collect::<crate::Result<Vec<_>>>()?;
            let area = BoundingBox::of_measurements(&obs).ok_or_else(|| CliError::Input("no measurements".into()))?;
            let kind = match trend {
                TrendArg::Omni => TrendKind::Omni,
                TrendArg::Directional => TrendKind::Directional,
            };
            let mut fit_cfg = MulticellFitConfig::new(required(tau.or(cfg.tau), "--tau")?, kind);
            fit_cfg.em = em_config(&cfg);
            fit_cfg.min_dist = cfg.min_dist.unwrap_or(DEFAULT_MIN_DIST);
            let models = fit_cells(&obs, &cells, &area, &fit_cfg)?;
            if models.is_empty() {
                return Err(CliError::Fit("no cell had enough measurements".into()));
            }
            io::write_text(&output_path(model_out, outputs.model.as_ref(), "model")?, &io::multicell_to_json(&models)?)?;
            Ok(())
        }
        Command::MulticellPredict { model, resolution, bbox, out, eval, report_out } => {
            let text = std::fs::read_to_string(model)
                .map_err(|e| CliError::MissingModel(format!("{}: {e}", model.display())))?;
            let cells = io::parse_multicell_artifact(&text)?;
            if cells.is_empty() {
                return Err(CliError::Input("model has no cells".into()));
            }
            if let Some(grid_path) = out.clone().or_else(|| outputs.grid.as_ref().map(PathBuf::from)) {
                let res = required(resolution.or(cfg.resolution), "--resolution")?;
                let area = match bbox {
                    Some(s) => parse_bbox(s)?,
                    None => BoundingBox::enclosing(cells.iter().flat_map(|c| c.fitted.basis.centers.iter()))
                        .expect("non-empty basis"),
                };
                let spec = GridSpec::covering(&area, res)?;
                if spec.len() > DEFAULT_GRID_CAP {
                    return Err(FrkError::GridTooLarge { requested: spec.len(), cap: DEFAULT_GRID_CAP }.into());
                }
                let rows = spec
                    .points()
                    .iter()
                    .map(|loc| {
                        let pred = predict_cid_and_power(loc, &cells);
                        let (z_hat, var) = match pred.cid() {
                            Some(cid) => {
                                let cell = cells.iter().find(|c| c.cid == cid).expect("predicted cid exists");
                                (pred.z_hat().expect("covered"), predict_variance(loc, &cell.fitted)?)
                            }
                            None => (f64::NAN, f64::NAN),
                        };
                        Ok(GridRow { x: loc.x, y: loc.y, z_hat, var, cid_hat: pred.cid().map(str::to_string) })
                    })
                    .collect::<crate::Result<Vec<_>>>()?;
                let mut buf = Vec::new();
                io::write_grid(&mut buf, &rows, true)?;
                io::write_text(&grid_path, std::str::from_utf8(&buf).expect("ascii csv"))?;
            }
            if let Some(test_path) = eval {
                let test = io::read_measurements(test_path)?;
                let report = cid_error_report(&test, &cells)?;
                eprintln!("multicell: CID error rate {:.4} ({} uncovered)", report.error_rate, report.uncovered);
                write_json(&output_path(report_out, outputs.report.as_ref(), "report")?, &report)?;
            }
            Ok(())
        }
        Command::Diagnose { data, report_out } => {
            let sc = single_cell(data, &cfg)?;
            let locs: Vec<Location> = sc.obs.iter().map(|m| m.loc).collect();
            let r_max = candidate_grid(&sc.area, sc.tau)?.len();
            let basis = build_basis_set(&sc.area, sc.tau, &locs)?;
            let dm = build_design_matrices(&sc.obs, &basis, &sc.trend)?;
            let stats = SufficientStats::new(&observation_vector(&sc.obs), &dm)?;
            let mut cid_counts = std::collections::BTreeMap::new();
            for m in &sc.obs {
                if let Some(c) = &m.cid {
                    *cid_counts.entry(c.clone()).or_insert(0usize) += 1;
                }
            }
            let report = DataReport {
                n: sc.obs.len(),
                bbox: sc.area,
                tau: sc.tau,
                r_max,
                r: basis.len(),
                basis_nnz: dm.s.nnz(),
                design_condition: crate::linalg::condition_number(&stats.t_t),
                design_condition_limit: MAX_DESIGN_CONDITION,
                ols_alpha: stats.alpha_ref.as_slice().to_vec(),
                ols_residual_variance: stats.e0_sq / sc.obs.len() as f64,
                cid_counts,
            };
            write_json(&output_path(report_out, outputs.report.as_ref(), "report")?, &report)
        }
    }
}

#[derive(Debug, Serialize)]
struct MomentsReport {
    n: usize,
    r: usize,
    m: usize,
    sigma2_hat: f64,
    k_hat_trace: f64,
    repaired: bool,
    diagnostics: MomentsDiagnostics,
}

#[derive(Debug, Serialize)]
struct DataReport {
    n: usize,
    bbox: BoundingBox,
    tau: f64,
    r_max: usize,
    r: usize,
    basis_nnz: usize,
    design_condition: f64,
    design_condition_limit: f64,
    ols_alpha: Vec<f64>,
    ols_residual_variance: f64,
    cid_counts: std::collections::BTreeMap<String, usize>,
}
