//! Goldenshluger-Lepski selection of the smoothing index `kappa`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charfn::{estimate_cf, project_to_class, CfFit, ClassParams};
use crate::error::{invalid, Error, Result};
use crate::kernel::RadialKernel;
use crate::metrics::{truncated_hausdorff, Sample, Window};
use crate::support::{data_diameter, schedule, GhatEngine, PipelineConfig, SupportEstimate, SupportParams};

/// Grid of smoothing indices and the variance-proxy constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LepskiConfig {
    #[serde(default = "default_kappa0")]
    pub kappa0: f64,
    #[serde(default = "default_grid")]
    pub kappa_grid: Vec<f64>,
    #[serde(default = "default_c_sigma")]
    pub c_sigma: f64,
    /// Kernel shape, entering the exponent `(A + 1) / A`.
    #[serde(default = "default_a")]
    pub a: f64,
}

fn default_kappa0() -> f64 {
    0.6
}
fn default_grid() -> Vec<f64> {
    vec![0.6, 0.7, 0.8, 0.9, 1.0]
}
fn default_c_sigma() -> f64 {
    1.0
}
fn default_a() -> f64 {
    1.0
}

impl Default for LepskiConfig {
    fn default() -> Self {
        Self { kappa0: default_kappa0(), kappa_grid: default_grid(), c_sigma: default_c_sigma(), a: default_a() }
    }
}

impl LepskiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa0 > 0.5 && self.kappa0 <= 1.0) {
            return invalid("kappa0 must lie in (1/2, 1]");
        }
        if self.kappa_grid.is_empty() {
            return invalid("kappa grid is empty");
        }
        if self.kappa_grid.iter().any(|&k| !(k >= self.kappa0 && k <= 1.0)) {
            return invalid("kappa grid must lie in [kappa0, 1]");
        }
        if !(self.c_sigma > 0.0) {
            return invalid("c_sigma must be positive");
        }
        if !(self.a > 0.0) {
            return invalid("kernel shape A must be positive");
        }
        Ok(())
    }

    /// Grid sorted increasingly with duplicates removed.
    pub fn sorted_grid(&self) -> Vec<f64> {
        let mut g = self.kappa_grid.clone();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }
}

/// `c_sigma (log log n)^{kappa + (A+1)/A} / (log n)^kappa`.
pub fn sigma_n(n: usize, kappa: f64, cfg: &LepskiConfig) -> Result<f64> {
    if n < 16 {
        return Err(Error::NTooSmall);
    }
    let ln = (n as f64).ln();
    Ok(cfg.c_sigma * ln.ln().powf(kappa + (cfg.a + 1.0) / cfg.a) / ln.powf(kappa))
}

/// `c_sigma` that makes `sigma_n(n, 1)` equal to a measured pilot risk.
pub fn calibrate_c_sigma(pilot_risk: f64, n: usize, cfg: &LepskiConfig) -> Result<f64> {
    let unit = LepskiConfig { c_sigma: 1.0, ..cfg.clone() };
    Ok(pilot_risk / sigma_n(n, 1.0, &unit)?)
}

/// `H_K` between two estimates; zero when both are empty in `K`, the window scale when one is.
pub fn hk_between(a: &SupportEstimate, b: &SupportEstimate, k: &Window) -> f64 {
    match truncated_hausdorff(&a.cells, &b.cells, k) {
        Ok(v) => v,
        Err(_) => {
            let ea = a.cells.restrict(k).is_empty();
            let eb = b.cells.restrict(k).is_empty();
            if ea && eb {
                0.0
            } else {
                match k {
                    Window::All => Window::from_grid(&a.grid).diameter(),
                    _ => k.diameter(),
                }
            }
        }
    }
}

fn find(estimates: &[SupportEstimate], kappa: f64) -> Result<&SupportEstimate> {
    estimates
        .iter()
        .find(|e| e.kappa == kappa)
        .ok_or_else(|| Error::Invalid(format!("missing estimate for kappa = {kappa}")))
}

/// `0 ∨ sup_{kappa' in grid, kappa' <= kappa} (H_K(M_kappa, M_kappa') - sigma(kappa'))`.
pub fn bias_proxy_with(
    estimates: &[SupportEstimate],
    kappa: f64,
    grid: &[f64],
    sigma: impl Fn(f64) -> f64,
    k: &Window,
) -> Result<f64> {
    let top = find(estimates, kappa)?;
    let mut b = 0.0_f64;
    for &kp in grid.iter().filter(|&&kp| kp <= kappa) {
        let other = find(estimates, kp)?;
        b = b.max(hk_between(top, other, k) - sigma(kp));
    }
    Ok(b)
}

/// [`bias_proxy_with`] using `sigma_n` and the configured grid.
pub fn bias_proxy(
    estimates: &[SupportEstimate],
    kappa: f64,
    n: usize,
    cfg: &LepskiConfig,
    k: &Window,
) -> Result<f64> {
    let grid = cfg.sorted_grid();
    sigma_n(n, kappa, cfg)?;
    bias_proxy_with(estimates, kappa, &grid, |kp| sigma_n(n, kp, cfg).unwrap_or(f64::INFINITY), k)
}

/// One row of the selection table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LepskiRow {
    pub kappa: f64,
    pub sigma: f64,
    pub bias: f64,
    pub total: f64,
}

/// Selected index and the table behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub kappa_hat: f64,
    pub rows: Vec<LepskiRow>,
}

/// Grid argmin of `B_n + sigma_n`, ties going to the larger `kappa`.
pub fn select_kappa(estimates: &[SupportEstimate], n: usize, cfg: &LepskiConfig, k: &Window) -> Result<Selection> {
    cfg.validate()?;
    let grid = cfg.sorted_grid();
    let mut rows = Vec::with_capacity(grid.len());
    for &kappa in &grid {
        let sigma = sigma_n(n, kappa, cfg)?;
        let bias = bias_proxy(estimates, kappa, n, cfg, k)?;
        rows.push(LepskiRow { kappa, sigma, bias, total: bias + sigma });
    }
    let mut best = rows[0];
    for r in &rows[1..] {
        if r.total <= best.total {
            best = *r;
        }
    }
    Ok(Selection { kappa_hat: best.kappa, rows })
}

/// Per-index estimates built from one contrast fit, plus the selection.
#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    pub estimates: Vec<SupportEstimate>,
    pub selection: Selection,
    pub fit: CfFit,
}

impl AdaptiveRun {
    pub fn selected(&self) -> &SupportEstimate {
        self.estimates
            .iter()
            .find(|e| e.kappa == self.selection.kappa_hat)
            .expect("selected index comes from the grid")
    }
}

/// Fits the CF once at the largest degree over the grid (in the class of `kappa0`),
/// then for each `kappa` projects onto the class `rho = 1/kappa`, truncates at
/// `m_kappa`, thresholds `g_hat` at bandwidth `h_kappa` and finally selects `kappa`.
pub fn estimate_adaptive(
    sample: &Sample,
    params: &SupportParams,
    class: &ClassParams,
    kernel: &RadialKernel,
    cfg: &PipelineConfig,
    lepski: &LepskiConfig,
    k: &Window,
) -> Result<AdaptiveRun> {
    lepski.validate()?;
    let grid = lepski.sorted_grid();
    let diam = data_diameter(sample);
    let scheds = grid
        .iter()
        .map(|&kappa| {
            let p = SupportParams { kappa, ..params.clone() };
            p.validate(sample.dim())?;
            schedule(sample.n(), &p, class.s, kernel, Some(diam))
        })
        .collect::<Result<Vec<_>>>()?;
    let m_max = scheds.iter().map(|s| s.m).max().expect("non-empty grid");
    let h_min = scheds.iter().map(|s| s.h).fold(f64::INFINITY, f64::min);
    let fit_class = ClassParams { rho: 1.0 / lepski.kappa0, nu_est: cfg.nu_for(h_min), ..class.clone() };
    fit_class.validate()?;
    let fit = estimate_cf(sample, &fit_class, m_max, &cfg.optimizer)?;

    let estimates = grid
        .par_iter()
        .zip(scheds.par_iter())
        .map(|(&kappa, sched)| {
            let cls = ClassParams { rho: 1.0 / kappa, ..fit_class.clone() };
            let phi = project_to_class(&fit.phi.truncate(sched.m), &cls);
            let engine = GhatEngine::new(&phi, kernel, sched.h, cfg.ghat_order);
            let values = engine.eval_grid(&params.eval_grid);
            SupportEstimate::from_grid(&values, &params.eval_grid, kappa, sched)
        })
        .collect::<Result<Vec<_>>>()?;
    let selection = select_kappa(&estimates, sample.n(), lepski, k)?;
    Ok(AdaptiveRun { estimates, selection, fit })
}
