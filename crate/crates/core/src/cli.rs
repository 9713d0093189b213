//! Config-driven experiment runner behind the `blinddeconv` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{estimate_adaptive, LepskiConfig};
use crate::charfn::{estimate_cf, grid_l2_distance, ClassParams, HConstraint};
use crate::error::{Error, Result};
use crate::fixtures::{make_fixture, rng_from_seed, tv_two_points, NoiseSpec, SignalSpec, TvConfig};
use crate::geometry::{check_slices, genericity_trials, GenericityConfig, SliceCheckConfig};
use crate::kernel::RadialKernel;
use crate::metrics::{median, quantile, DiscreteMeasure, GridSpec, PointSet, Window};
use crate::quad::TensorRule;
use crate::support::{
    data_diameter, default_eval_grid, estimate_support, measure_cf, sandwich, schedule, GhatEngine, Mode,
    PipelineConfig, PracticalSchedule, SupportParams,
};
use crate::wasserstein::{build_phat, w2_upper_bound_check, wasserstein_p_budget, DistributionConfig};

/// Pipelines the runner can execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    EstimateCf,
    EstimateSupport,
    Adapt,
    EstimateDistribution,
    LowerBoundCheck,
    Genericity,
    KernelDiagnostics,
}

impl Command {
    fn needs_replicates(self) -> bool {
        matches!(self, Command::EstimateCf | Command::EstimateSupport | Command::Adapt | Command::EstimateDistribution)
    }

    fn name(self) -> &'static str {
        match self {
            Command::EstimateCf => "estimate-cf",
            Command::EstimateSupport => "estimate-support",
            Command::Adapt => "adapt",
            Command::EstimateDistribution => "estimate-distribution",
            Command::LowerBoundCheck => "lower-bound-check",
            Command::Genericity => "genericity",
            Command::KernelDiagnostics => "kernel-diagnostics",
        }
    }
}

/// Command-line arguments.
#[derive(Debug, Parser)]
#[command(name = "blinddeconv", version, about = "Deconvolution with unknown noise: support and distribution estimation")]
pub struct Cli {
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, env = "BLINDDECONV_THREADS")]
    pub threads: Option<usize>,
    /// Overrides `master_seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Signal, noise and block split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureConfig {
    pub signal: SignalSpec,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default = "default_d1")]
    pub d1: usize,
}

fn default_noise() -> NoiseSpec {
    NoiseSpec::None
}
fn default_d1() -> usize {
    1
}

/// Kernel shape and table accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Optional cache file for the tabulated kernel.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn default_a() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    crate::kernel::DEFAULT_TOL
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { a: default_a(), tol: default_tol(), cache: None }
    }
}

/// Search class for the CF estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default)]
    pub h_constraint: HConstraint,
}

fn default_rho() -> f64 {
    1.0
}
fn default_s() -> f64 {
    4.0
}

impl Default for ClassConfig {
    fn default() -> Self {
        Self { rho: default_rho(), s: default_s(), h_constraint: HConstraint::default() }
    }
}

/// Support-estimator parameters other than the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportConfig {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_c_h")]
    pub c_h: f64,
    #[serde(default = "default_ell")]
    pub ell: f64,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_a_std")]
    pub a_std: f64,
    #[serde(default = "default_mode")]
    pub schedule: Mode,
    /// Offset radius of the sandwich event.
    #[serde(default = "default_sandwich_c")]
    pub sandwich_c: f64,
}

fn default_kappa() -> f64 {
    1.0
}
fn default_c_h() -> f64 {
    1.0
}
fn default_ell() -> f64 {
    0.5
}
fn default_d() -> usize {
    1
}
fn default_a_std() -> f64 {
    1.0
}
fn default_mode() -> Mode {
    Mode::Practical(PracticalSchedule::default())
}
fn default_sandwich_c() -> f64 {
    0.25
}

impl Default for SupportConfig {
    fn default() -> Self {
        Self {
            kappa: default_kappa(),
            c_h: default_c_h(),
            ell: default_ell(),
            d: default_d(),
            a_std: default_a_std(),
            schedule: default_mode(),
            sandwich_c: default_sandwich_c(),
        }
    }
}

/// Two-point total-variation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerBoundConfig {
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub tv: TvConfig,
}

fn default_gammas() -> Vec<f64> {
    vec![0.4, 0.2, 0.1, 0.05]
}

impl Default for LowerBoundConfig {
    fn default() -> Self {
        Self { gammas: default_gammas(), tv: TvConfig::default() }
    }
}

/// Point cloud used by the genericity command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CloudSpec {
    /// The fixture's support discretization.
    Fixture,
    /// Equispaced points on the boundary of the square `[-half_side, half_side]^2`.
    SquareBoundary { points: usize, half_side: f64 },
}

/// Genericity experiment and optional slice check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericitySection {
    #[serde(default = "default_cloud")]
    pub cloud: CloudSpec,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_tile")]
    pub delta: f64,
    #[serde(default = "default_tol_unique")]
    pub tol_unique: f64,
    #[serde(default)]
    pub slices: Option<SliceCheckConfig>,
}

fn default_cloud() -> CloudSpec {
    CloudSpec::Fixture
}
fn default_trials() -> usize {
    200
}
fn default_r() -> f64 {
    0.05
}
fn default_tile() -> f64 {
    1.0
}
fn default_tol_unique() -> f64 {
    1e-9
}

impl Default for GenericitySection {
    fn default() -> Self {
        Self {
            cloud: default_cloud(),
            trials: default_trials(),
            r: default_r(),
            delta: default_tile(),
            tol_unique: default_tol_unique(),
            slices: None,
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub master_seed: u64,
    pub fixture: FixtureConfig,
    #[serde(default)]
    pub n: Vec<usize>,
    /// Replicate indices.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Points per axis of the support evaluation grid.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Loss window; defaults to the evaluation grid's box.
    #[serde(default)]
    pub window: Option<Window>,
    /// Atoms in the discretization of the true signal law.
    #[serde(default = "default_truth_atoms")]
    pub truth_atoms: usize,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub class: ClassConfig,
    #[serde(default)]
    pub support: SupportConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub lepski: LepskiConfig,
    #[serde(default)]
    pub distribution: DistributionConfig,
    #[serde(default)]
    pub lower_bound: LowerBoundConfig,
    #[serde(default)]
    pub genericity: GenericitySection,
}

fn default_grid_points() -> usize {
    101
}
fn default_truth_atoms() -> usize {
    2000
}

impl RunConfig {
    /// Parses TOML, rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    pub fn dim(&self) -> usize {
        self.fixture.signal.dim()
    }

    /// Re-runs every upstream validation that does not need data.
    pub fn validate(&self, command: Command) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        self.fixture.signal.validate()?;
        self.fixture.noise.validate()?;
        let dim = self.dim();
        if self.fixture.d1 == 0 || self.fixture.d1 >= dim {
            return bad("fixture.d1 must lie in [1, D - 1]");
        }
        if !(self.kernel.a > 0.0 && self.kernel.tol > 0.0) {
            return bad("kernel.a and kernel.tol must be positive");
        }
        if command.needs_replicates() {
            if self.seeds.is_empty() {
                return bad("seeds list is empty");
            }
            if self.n.is_empty() {
                return bad("n list is empty");
            }
            if self.n.iter().any(|&n| n < 16) {
                return Err(Error::NTooSmall);
            }
            if self.grid_points < 2 || self.truth_atoms == 0 {
                return bad("grid_points must be >= 2 and truth_atoms >= 1");
            }
            self.class_params(1.0)?;
            let grid = GridSpec::cube(dim, -1.0, 1.0, 2)?;
            self.support_params(grid).validate(dim)?;
            if !(self.support.sandwich_c > 0.0) {
                return bad("support.sandwich_c must be positive");
            }
        }
        if command == Command::Adapt || self.distribution.use_adaptive_kappa {
            self.lepski.validate()?;
        }
        if command == Command::EstimateDistribution {
            let d = &self.distribution;
            if !(d.eta_rel > 0.0 && d.r_rel > 0.0) || d.grid_points < 2 || d.atom_budget == 0 {
                return bad("distribution settings must be positive");
            }
        }
        if command == Command::LowerBoundCheck {
            if self.lower_bound.gammas.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
                return bad("gammas must lie in (0, 1]");
            }
        }
        if command == Command::Genericity {
            let g = &self.genericity;
            crate::geometry::PerturbedTiling::new(dim, g.delta, g.r, 0)?;
            if g.trials == 0 {
                return bad("genericity.trials must be at least 1");
            }
            if let Some(s) = &g.slices {
                s.validate(dim)?;
            }
        }
        Ok(())
    }

    fn class_params(&self, nu: f64) -> Result<ClassParams> {
        let mut c = ClassParams::new(self.class.rho, self.class.s, nu)?;
        c.h_constraint = self.class.h_constraint.clone();
        c.validate()?;
        Ok(c)
    }

    fn support_params(&self, grid: GridSpec) -> SupportParams {
        SupportParams {
            kappa: self.support.kappa,
            a: self.kernel.a,
            c_h: self.support.c_h,
            ell: self.support.ell,
            d: self.support.d,
            a_std: self.support.a_std,
            eval_grid: grid,
            mode: self.support.schedule.clone(),
        }
    }
}

/// Seed of one replicate, a hash of the master seed, fixture id, `n` and replicate index.
pub fn replicate_seed(master: u64, fixture_id: &str, n: usize, replicate: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(fixture_id.as_bytes());
    h.update((n as u64).to_le_bytes());
    h.update(replicate.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Header plus rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> Result<String> {
        let io = |e: csv::Error| Error::Numerical(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Numerical(e.to_string()))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// `x = group value, y = median, y_lo / y_hi = quartiles` over rows with status `ok`.
pub fn plotdata(table: &Table, x_col: &str, y_col: &str) -> Table {
    let mut out = Table::new(&["x", "y", "y_lo", "y_hi"]);
    let (Some(xc), Some(yc), Some(sc)) = (table.column(x_col), table.column(y_col), table.column("status")) else {
        return out;
    };
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for r in table.rows.iter().filter(|r| r[sc] == "ok") {
        let Ok(y) = r[yc].parse::<f64>() else { continue };
        match groups.iter_mut().find(|g| g.0 == r[xc]) {
            Some(g) => g.1.push(y),
            None => groups.push((r[xc].clone(), vec![y])),
        }
    }
    for (x, ys) in groups {
        out.rows.push(vec![x, fmt(median(&ys)), fmt(quantile(&ys, 0.25)), fmt(quantile(&ys, 0.75))]);
    }
    out
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn status(e: &Error) -> String {
    format!("error: {e}")
}

/// Artifacts of a run, before they are written.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub tables: Vec<(String, Table)>,
    pub plots: Vec<(String, Table)>,
    pub replicates: Vec<(usize, u64, u64)>,
}

struct Replicate {
    n: usize,
    replicate: u64,
    seed: u64,
}

fn replicates(cfg: &RunConfig) -> Vec<Replicate> {
    let id = cfg.fixture.signal.id();
    let mut out = Vec::new();
    for &n in &cfg.n {
        for &r in &cfg.seeds {
            out.push(Replicate { n, replicate: r, seed: replicate_seed(cfg.master_seed, &id, n, r) });
        }
    }
    out
}

fn load_kernel(cfg: &RunConfig) -> Result<RadialKernel> {
    RadialKernel::build_cached(cfg.kernel.a, cfg.dim(), cfg.kernel.tol, cfg.kernel.cache.as_deref())
}

fn window_for(cfg: &RunConfig, grid: &GridSpec) -> Window {
    cfg.window.clone().unwrap_or_else(|| Window::from_grid(grid))
}

fn truth_measure(cfg: &RunConfig, seed: u64) -> Result<DiscreteMeasure> {
    let mut rng = rng_from_seed(seed ^ 0x9e37_79b9_7f4a_7c15);
    cfg.fixture.signal.truth_measure(cfg.truth_atoms, &mut rng)
}

fn prefix(cfg: &RunConfig, r: &Replicate) -> Vec<String> {
    vec![cfg.fixture.signal.id(), r.n.to_string(), r.replicate.to_string(), r.seed.to_string()]
}

/// Executes `command` and returns its tables without touching the file system.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<Outputs> {
    cfg.validate(command)?;
    let reps = replicates(cfg);
    let mut out = Outputs {
        replicates: if command.needs_replicates() { reps.iter().map(|r| (r.n, r.replicate, r.seed)).collect() } else { Vec::new() },
        ..Default::default()
    };
    match command {
        Command::EstimateCf => run_cf(cfg, &reps, &mut out)?,
        Command::EstimateSupport => run_support(cfg, &reps, &mut out)?,
        Command::Adapt => run_adapt(cfg, &reps, &mut out)?,
        Command::EstimateDistribution => run_distribution(cfg, &reps, &mut out)?,
        Command::LowerBoundCheck => run_lower_bound(cfg, &mut out)?,
        Command::Genericity => run_genericity(cfg, &mut out)?,
        Command::KernelDiagnostics => run_kernel(cfg, &mut out)?,
    }
    Ok(out)
}

fn run_cf(cfg: &RunConfig, reps: &[Replicate], out: &mut Outputs) -> Result<()> {
    let kernel = load_kernel(cfg)?;
    let mut table = Table::new(&[
        "fixture", "n", "replicate", "seed", "status", "m", "nu", "contrast", "iterations", "start_index",
        "boundary_fraction", "cf_rms_error",
    ]);
    let rows: Vec<Vec<String>> = reps
        .par_iter()
        .map(|r| {
            let res = (|| -> Result<Vec<String>> {
                let fx = make_fixture(&cfg.fixture.signal, &cfg.fixture.noise, r.n, cfg.fixture.d1, r.seed)?;
                let grid = default_eval_grid(&fx.sample, cfg.grid_points)?;
                let params = cfg.support_params(grid);
                let sched = schedule(r.n, &params, cfg.class.s, &kernel, Some(data_diameter(&fx.sample)))?;
                let nu = cfg.pipeline.nu_for(sched.h);
                let class = cfg.class_params(nu)?;
                let fit = estimate_cf(&fx.sample, &class, sched.m, &cfg.pipeline.optimizer)?;
                let g = truth_measure(cfg, r.seed)?;
                let rule = TensorRule::cube(cfg.dim(), nu, cfg.pipeline.optimizer.quad_order);
                let volume = (2.0 * nu).powi(cfg.dim() as i32);
                let err = grid_l2_distance(|t| fit.phi.eval(t), |t| measure_cf(&g, t), &rule) / volume.sqrt();
                Ok(vec![
                    "ok".into(),
                    sched.m.to_string(),
                    fmt(nu),
                    fmt(fit.contrast),
                    fit.iterations.to_string(),
                    fit.start_index.to_string(),
                    fmt(fit.boundary_fraction),
                    fmt(err),
                ])
            })();
            let mut row = prefix(cfg, r);
            match res {
                Ok(v) => row.extend(v),
                Err(e) => {
                    row.push(status(&e));
                    row.extend(std::iter::repeat_n(String::new(), 7));
                }
            }
            row
        })
        .collect();
    table.rows = rows;
    out.plots.push(("cf_rms_error".into(), plotdata(&table, "n", "cf_rms_error")));
    out.tables.push(("cf".into(), table));
    Ok(())
}

fn run_support(cfg: &RunConfig, reps: &[Replicate], out: &mut Outputs) -> Result<()> {
    let kernel = load_kernel(cfg)?;
    let mut table = Table::new(&[
        "fixture", "n", "replicate", "seed", "status", "m", "h", "threshold", "cells", "risk", "sandwich", "warning",
    ]);
    table.rows = reps
        .par_iter()
        .map(|r| {
            let res = (|| -> Result<Vec<String>> {
                let fx = make_fixture(&cfg.fixture.signal, &cfg.fixture.noise, r.n, cfg.fixture.d1, r.seed)?;
                let grid = default_eval_grid(&fx.sample, cfg.grid_points)?;
                let k = window_for(cfg, &grid);
                let params = cfg.support_params(grid);
                let class = cfg.class_params(1.0)?;
                let run = estimate_support(&fx.sample, &params, &class, &kernel, &cfg.pipeline)?;
                let est = &run.estimate;
                let sw = sandwich(est, &fx.truth, cfg.support.sandwich_c, &k);
                Ok(vec![
                    "ok".into(),
                    est.m.to_string(),
                    fmt(est.h),
                    fmt(est.threshold),
                    est.cells.len().to_string(),
                    fmt(est.risk(&fx.truth, &k)),
                    sw.holds().to_string(),
                    est.warning.clone().unwrap_or_default(),
                ])
            })();
            let mut row = prefix(cfg, r);
            match res {
                Ok(v) => row.extend(v),
                Err(e) => {
                    row.push(status(&e));
                    row.extend(std::iter::repeat_n(String::new(), 7));
                }
            }
            row
        })
        .collect();
    out.plots.push(("support_risk".into(), plotdata(&table, "n", "risk")));
    out.tables.push(("support_risk".into(), table));
    Ok(())
}

fn run_adapt(cfg: &RunConfig, reps: &[Replicate], out: &mut Outputs) -> Result<()> {
    let kernel = load_kernel(cfg)?;
    let mut per_kappa = Table::new(&[
        "fixture", "n", "replicate", "seed", "status", "kappa", "m", "h", "sigma", "bias", "total", "selected", "risk",
    ]);
    let mut selected = Table::new(&["fixture", "n", "replicate", "seed", "status", "kappa_hat", "risk"]);
    let results: Vec<(Vec<Vec<String>>, Vec<String>)> = reps
        .par_iter()
        .map(|r| {
            let res = (|| -> Result<(Vec<Vec<String>>, Vec<String>)> {
                let fx = make_fixture(&cfg.fixture.signal, &cfg.fixture.noise, r.n, cfg.fixture.d1, r.seed)?;
                let grid = default_eval_grid(&fx.sample, cfg.grid_points)?;
                let k = window_for(cfg, &grid);
                let params = cfg.support_params(grid);
                let class = cfg.class_params(1.0)?;
                let run = estimate_adaptive(&fx.sample, &params, &class, &kernel, &cfg.pipeline, &cfg.lepski, &k)?;
                let mut rows = Vec::new();
                for row in &run.selection.rows {
                    let est = run.estimates.iter().find(|e| e.kappa == row.kappa).expect("grid estimate");
                    let mut v = prefix(cfg, r);
                    v.extend([
                        "ok".to_string(),
                        fmt(row.kappa),
                        est.m.to_string(),
                        fmt(est.h),
                        fmt(row.sigma),
                        fmt(row.bias),
                        fmt(row.total),
                        (row.kappa == run.selection.kappa_hat).to_string(),
                        fmt(est.risk(&fx.truth, &k)),
                    ]);
                    rows.push(v);
                }
                let mut sel = prefix(cfg, r);
                sel.extend(["ok".to_string(), fmt(run.selection.kappa_hat), fmt(run.selected().risk(&fx.truth, &k))]);
                Ok((rows, sel))
            })();
            match res {
                Ok(v) => v,
                Err(e) => {
                    let mut sel = prefix(cfg, r);
                    sel.extend([status(&e), String::new(), String::new()]);
                    (Vec::new(), sel)
                }
            }
        })
        .collect();
    for (rows, sel) in results {
        per_kappa.rows.extend(rows);
        selected.rows.push(sel);
    }
    out.plots.push(("adaptive_risk".into(), plotdata(&selected, "n", "risk")));
    out.tables.push(("lepski".into(), per_kappa));
    out.tables.push(("adaptive_risk".into(), selected));
    Ok(())
}

fn run_distribution(cfg: &RunConfig, reps: &[Replicate], out: &mut Outputs) -> Result<()> {
    let kernel = load_kernel(cfg)?;
    let d = &cfg.distribution;
    let mut table = Table::new(&[
        "fixture", "n", "replicate", "seed", "status", "W2_risk", "bias_term", "mask_mass", "c_n", "variance_term",
        "villani_bound", "truth_discretization",
    ]);
    table.rows = reps
        .par_iter()
        .map(|r| {
            let res = (|| -> Result<Vec<String>> {
                let fx = make_fixture(&cfg.fixture.signal, &cfg.fixture.noise, r.n, cfg.fixture.d1, r.seed)?;
                let grid = default_eval_grid(&fx.sample, cfg.grid_points)?;
                let k = window_for(cfg, &grid);
                let params = cfg.support_params(grid);
                let class = cfg.class_params(1.0)?;
                let (estimate, phi, h) = if d.use_adaptive_kappa {
                    let run =
                        estimate_adaptive(&fx.sample, &params, &class, &kernel, &cfg.pipeline, &cfg.lepski, &k)?;
                    let est = run.selected().clone();
                    let phi = run.fit.phi.truncate(est.m);
                    let h = est.h;
                    (est, phi, h)
                } else {
                    let run = estimate_support(&fx.sample, &params, &class, &kernel, &cfg.pipeline)?;
                    let phi = run.fit.phi.truncate(run.schedule.m);
                    (run.estimate, phi, run.schedule.h)
                };
                let diam = data_diameter(&fx.sample);
                let w_grid = default_eval_grid(&fx.sample, d.grid_points)?;
                let ghat = GhatEngine::new(&phi, &kernel, h, cfg.pipeline.ghat_order).eval_grid(&w_grid);
                let phat = build_phat(&estimate, &w_grid, &ghat, d.eta_rel * diam, d.r_rel * diam)?;
                let g = truth_measure(cfg, r.seed)?;
                let rep = w2_upper_bound_check(&g, &phat, &kernel, &w_grid, d.atom_budget)?;
                let g2 = truth_measure(cfg, r.seed.wrapping_add(1))?;
                let disc = wasserstein_p_budget(&g, &g2, 2.0, d.atom_budget)?;
                Ok(vec![
                    "ok".into(),
                    fmt(rep.risk),
                    fmt(rep.bias),
                    fmt(phat.mask_mass),
                    fmt(phat.c_n),
                    fmt(rep.variance),
                    fmt(rep.villani),
                    fmt(disc),
                ])
            })();
            let mut row = prefix(cfg, r);
            match res {
                Ok(v) => row.extend(v),
                Err(e) => {
                    row.push(status(&e));
                    row.extend(std::iter::repeat_n(String::new(), 7));
                }
            }
            row
        })
        .collect();
    out.plots.push(("w2_risk".into(), plotdata(&table, "n", "W2_risk")));
    out.tables.push(("w2_risk".into(), table));
    Ok(())
}

fn run_lower_bound(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let lb = &cfg.lower_bound;
    let mut table = Table::new(&["gamma", "status", "tv"]);
    table.rows = lb
        .gammas
        .par_iter()
        .map(|&g| match tv_two_points(g, &lb.tv) {
            Ok(tv) => vec![fmt(g), "ok".into(), fmt(tv)],
            Err(e) => vec![fmt(g), status(&e), String::new()],
        })
        .collect();
    out.plots.push(("tv".into(), plotdata(&table, "gamma", "tv")));
    out.tables.push(("tv".into(), table));
    Ok(())
}

/// Equispaced points on the boundary of `[-s, s]^2`.
pub fn square_boundary(points: usize, s: f64) -> Result<PointSet> {
    let per = 8.0 * s / points as f64;
    let pts: Vec<Vec<f64>> = (0..points)
        .map(|k| {
            let a = k as f64 * per;
            let side = 2.0 * s;
            if a < side {
                vec![-s + a, -s]
            } else if a < 2.0 * side {
                vec![s, -s + (a - side)]
            } else if a < 3.0 * side {
                vec![s - (a - 2.0 * side), s]
            } else {
                vec![-s, s - (a - 3.0 * side)]
            }
        })
        .collect();
    PointSet::from_points(&pts)
}

fn run_genericity(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let g = &cfg.genericity;
    let cloud = match &g.cloud {
        CloudSpec::Fixture => cfg.fixture.signal.truth_set(),
        CloudSpec::SquareBoundary { points, half_side } => {
            if cfg.dim() != 2 {
                return Err(Error::Invalid("square boundary cloud needs D = 2".into()));
            }
            square_boundary(*points, *half_side)?
        }
    };
    let gc = GenericityConfig { trials: g.trials, r: g.r, d1: cfg.fixture.d1, delta: g.delta, tol_unique: g.tol_unique };
    let trials = genericity_trials(&cloud, &gc, cfg.master_seed)?;
    let bound = g.r * (cfg.dim() as f64).sqrt();
    let mut table = Table::new(&["trial", "status", "b1", "b2", "max_displacement", "displacement_ok"]);
    for t in &trials {
        table.rows.push(vec![
            t.trial.to_string(),
            "ok".into(),
            t.b1.to_string(),
            t.b2.to_string(),
            fmt(t.max_displacement),
            (t.max_displacement <= bound * (1.0 + 1e-12)).to_string(),
        ]);
    }
    let frac = trials.iter().filter(|t| t.b1 && t.b2).count() as f64 / trials.len() as f64;
    let mut summary = Table::new(&["r", "trials", "fraction", "displacement_bound"]);
    summary.rows.push(vec![fmt(g.r), g.trials.to_string(), fmt(frac), fmt(bound)]);
    out.tables.push(("genericity".into(), table));
    out.tables.push(("genericity_summary".into(), summary));
    if let Some(sc) = &g.slices {
        let mut st = Table::new(&["delta", "direction", "found", "anchor", "epsilon", "best_diameter"]);
        for rep in check_slices(&cloud, sc)? {
            let (anchor, eps) = rep.witness.map(|(i, e)| (i.to_string(), fmt(e))).unwrap_or_default();
            st.rows.push(vec![
                fmt(rep.delta),
                rep.direction.to_string(),
                rep.found.to_string(),
                anchor,
                eps,
                fmt(rep.best_diameter),
            ]);
        }
        out.tables.push(("slices".into(), st));
    }
    Ok(())
}

fn run_kernel(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let k = load_kernel(cfg)?;
    let d = &k.diagnostics;
    let mut table = Table::new(&["quantity", "value"]);
    for (name, v) in [
        ("dim", k.dim as f64),
        ("a", k.a),
        ("normalization", k.normalization),
        ("r_cut", k.r_cut),
        ("c_a", d.c_a),
        ("d_a", d.d_a),
        ("beta", d.beta),
        ("log_envelope_const", d.log_envelope_const),
        ("out_of_ball_rel", d.out_of_ball_rel),
        ("fourier_min", d.fourier_min),
        ("second_moment", d.second_moment),
        ("uu_l2", d.uu_l2),
        ("uu_zero", d.uu_zero),
    ] {
        table.rows.push(vec![name.into(), fmt(v)]);
    }
    out.tables.push(("kernel".into(), table));
    Ok(())
}

/// Writes tables, plot data and the manifest under `dir`.
pub fn write_outputs(dir: &Path, command: Command, cfg: &RunConfig, outputs: &Outputs) -> Result<()> {
    let io = |e: std::io::Error| Error::Numerical(format!("io: {e}"));
    fs::create_dir_all(dir.join("plotdata")).map_err(io)?;
    let mut files = Vec::new();
    for (name, t) in &outputs.tables {
        let f = format!("{name}.csv");
        fs::write(dir.join(&f), t.to_csv()?).map_err(io)?;
        files.push(f);
    }
    for (name, t) in &outputs.plots {
        let f = format!("plotdata/{name}.csv");
        fs::write(dir.join(&f), t.to_csv()?).map_err(io)?;
        files.push(f);
    }
    let replicates: Vec<serde_json::Value> = outputs
        .replicates
        .iter()
        .map(|&(n, r, s)| serde_json::json!({ "n": n, "replicate": r, "seed": s }))
        .collect();
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = serde_json::json!({
        "command": command.name(),
        "config": serde_json::to_value(cfg).map_err(|e| Error::Numerical(e.to_string()))?,
        "created_unix": created,
        "files": files,
        "replicates": replicates,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Numerical(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n").map_err(io)?;
    Ok(())
}

/// Exit code for an error: 2 for validation, 3 for numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

fn write_error(dir: &Path, command: Command, e: &Error) {
    let report = serde_json::json!({
        "command": command.name(),
        "error": e.to_string(),
        "exit_code": exit_code(e),
        "kind": if e.is_validation() { "validation" } else { "numerical" },
    });
    if fs::create_dir_all(dir).is_ok() {
        let _ = fs::write(dir.join("error.json"), serde_json::to_string_pretty(&report).unwrap_or_default() + "\n");
    }
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    if let Some(t) = cli.threads {
        // a global pool that already exists (e.g. in tests) is reused
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let result = fs::read_to_string(&cli.config)
        .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", cli.config.display())))
        .and_then(|text| RunConfig::from_toml(&text))
        .map(|mut cfg| {
            if let Some(s) = cli.seed {
                cfg.master_seed = s;
            }
            cfg
        })
        .and_then(|cfg| {
            let out = execute(cli.command, &cfg)?;
            write_outputs(&cli.out, cli.command, &cfg, &out)
        });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            write_error(&cli.out, cli.command, &e);
            exit_code(&e)
        }
    }
}
