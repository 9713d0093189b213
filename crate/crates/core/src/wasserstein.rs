//! Renormalized distribution estimate on a grid and exact discrete Wasserstein distances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::RadialKernel;
use crate::metrics::{dist2, norm, DiscreteMeasure, GridSpec, PointSet};
use crate::ot::transport;
use crate::support::{gbar_grid, SupportEstimate};

/// Default limit on the number of atoms per measure handed to the exact solver.
pub const DEFAULT_ATOM_BUDGET: usize = 3000;

/// Settings for the distribution estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    /// Mask offset as a fraction of the data diameter.
    #[serde(default = "default_eta_rel")]
    pub eta_rel: f64,
    /// Mask ball radius as a multiple of the data diameter.
    #[serde(default = "default_r_rel")]
    pub r_rel: f64,
    /// Points per axis of the grid carrying the estimate.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_budget")]
    pub atom_budget: usize,
    /// Use the Lepski-selected smoothing index instead of `kappa = 1`.
    #[serde(default)]
    pub use_adaptive_kappa: bool,
}

fn default_eta_rel() -> f64 {
    0.1
}
fn default_r_rel() -> f64 {
    2.0
}
fn default_grid_points() -> usize {
    51
}
fn default_budget() -> usize {
    DEFAULT_ATOM_BUDGET
}

impl Default for DistributionConfig {
    fn default() -> Self {
        Self {
            eta_rel: default_eta_rel(),
            r_rel: default_r_rel(),
            grid_points: default_grid_points(),
            atom_budget: default_budget(),
            use_adaptive_kappa: false,
        }
    }
}

/// `P_hat`: positive part of `g_hat` on masked grid cells, renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEstimate {
    pub measure: DiscreteMeasure,
    /// Grid cells kept by the mask.
    pub mask: PointSet,
    /// Positive mass of `g_hat` retained by the mask, before renormalization.
    pub mask_mass: f64,
    /// `1 / mask_mass`.
    pub c_n: f64,
    pub h: f64,
    pub m: u32,
}

/// Builds `P_hat` from `g_hat` values on `grid`, keeping cells within `eta` of
/// the estimated support intersected with the closed ball of radius `r_n`.
pub fn build_phat(
    estimate: &SupportEstimate,
    grid: &GridSpec,
    ghat: &[f64],
    eta: f64,
    r_n: f64,
) -> Result<DistributionEstimate> {
    if ghat.len() != grid.len() {
        return invalid("g_hat values do not match the grid");
    }
    if !(eta > 0.0) || !(r_n > 0.0) {
        return invalid("eta and R_n must be positive");
    }
    let core = estimate.cells.filter(|x| norm(x) <= r_n);
    if core.is_empty() {
        return Err(Error::DegenerateEstimate);
    }
    let e2 = eta * eta;
    let vol = grid.cell_volume();
    let kept: Vec<(usize, f64)> = (0..grid.len())
        .into_par_iter()
        .filter_map(|i| {
            let x = grid.point(i);
            core.iter().any(|p| dist2(p, &x) <= e2).then(|| (i, ghat[i].max(0.0) * vol))
        })
        .collect();
    let mask_mass: f64 = kept.iter().map(|&(_, w)| w).sum();
    if !(mask_mass > 0.0) {
        return Err(Error::DegenerateEstimate);
    }
    let mut mask = Vec::with_capacity(kept.len() * grid.dim());
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for &(i, w) in &kept {
        let x = grid.point(i);
        mask.extend_from_slice(&x);
        if w > 0.0 {
            atoms.extend(x);
            weights.push(w);
        }
    }
    let measure = DiscreteMeasure::new(PointSet::from_flat(atoms, grid.dim())?, weights)?;
    Ok(DistributionEstimate {
        measure,
        mask: PointSet::from_flat(mask, grid.dim())?,
        mask_mass,
        c_n: 1.0 / mask_mass,
        h: estimate.h,
        m: estimate.m,
    })
}

/// Exact `W_p` between two normalized discrete measures (cost `||x - y||^p`).
pub fn wasserstein_p(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> Result<f64> {
    wasserstein_p_budget(mu, nu, p, DEFAULT_ATOM_BUDGET)
}

/// [`wasserstein_p`] with an explicit atom budget.
pub fn wasserstein_p_budget(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64, budget: usize) -> Result<f64> {
    if !(p >= 1.0) {
        return invalid("W_p needs p >= 1");
    }
    if mu.dim() != nu.dim() {
        return invalid("measures live in different dimensions");
    }
    let a = mu.pruned();
    let b = nu.pruned();
    for m in [&a, &b] {
        if m.is_empty() {
            return Err(Error::EmptySet);
        }
        if m.len() > budget {
            return Err(Error::OtBudget { atoms: m.len(), budget });
        }
    }
    let xs = a.support();
    let ys = b.support();
    let cost: Vec<Vec<f64>> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let x = xs.get(i);
            (0..ys.len()).map(|j| dist2(x, ys.get(j)).sqrt().powf(p)).collect()
        })
        .collect();
    let plan = transport(a.weights(), b.weights(), |i, j| cost[i][j])?;
    Ok(plan.cost.max(0.0).powf(1.0 / p))
}

/// Merges atoms of `mu` into the cells of a regular grid (weights summed, atoms at
/// the weighted centroid of each occupied cell).
pub fn coarsen(mu: &DiscreteMeasure, grid: &GridSpec) -> Result<DiscreteMeasure> {
    let dim = mu.dim();
    if grid.dim() != dim {
        return invalid("grid dimension differs from the measure");
    }
    let spacing = grid.spacing();
    let mut cells: std::collections::BTreeMap<usize, (f64, Vec<f64>)> = Default::default();
    for (x, &w) in mu.support().iter().zip(mu.weights()) {
        let mut idx = 0usize;
        for a in 0..dim {
            let k = ((x[a] - grid.lower[a]) / spacing[a]).round().clamp(0.0, (grid.counts[a] - 1) as f64) as usize;
            idx = idx * grid.counts[a] + k;
        }
        let e = cells.entry(idx).or_insert_with(|| (0.0, vec![0.0; dim]));
        e.0 += w;
        for a in 0..dim {
            e.1[a] += w * x[a];
        }
    }
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for (_, (w, s)) in cells {
        if w > 0.0 {
            atoms.extend(s.iter().map(|v| v / w));
            weights.push(w);
        }
    }
    DiscreteMeasure::new(PointSet::from_flat(atoms, dim)?, weights)
}

/// Risk report for a distribution estimate against a known `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2Report {
    /// `W_2(G, P_hat)`.
    pub risk: f64,
    /// `W_2(G, P_psi)` with `P_psi = psi_{A,h} * G` discretized on the grid.
    pub bias: f64,
    /// `W_2(P_psi, P_hat)`.
    pub variance: f64,
    /// `2 min_a sum ||x - a||^2 |p_psi - p_hat|`, an upper bound on `variance^2`.
    pub villani: f64,
}

impl W2Report {
    pub fn holds(&self, tol: f64) -> bool {
        self.variance <= self.villani.sqrt() * (1.0 + tol) + 1e-12
    }
}

/// Computes risk, bias and the moment bound of the estimate-vs-smoothed-truth term.
pub fn w2_upper_bound_check(
    g: &DiscreteMeasure,
    phat: &DistributionEstimate,
    kernel: &RadialKernel,
    grid: &GridSpec,
    budget: usize,
) -> Result<W2Report> {
    let risk = wasserstein_p_budget(g, &phat.measure, 2.0, budget)?;
    let smooth = gbar_grid(g, kernel, phat.h, grid);
    let atoms = grid.points();
    let psi = DiscreteMeasure::new(atoms.clone(), smooth.iter().map(|v| v.max(0.0)).collect())?;
    let bias = wasserstein_p_budget(g, &psi, 2.0, budget)?;
    let variance = wasserstein_p_budget(&psi, &phat.measure, 2.0, budget)?;

    // both densities on the same atoms: P_hat is supported on a subset of the grid
    let mut p_hat = vec![0.0; grid.len()];
    let index = |x: &[f64]| {
        let sp = grid.spacing();
        let mut idx = 0usize;
        for a in 0..grid.dim() {
            let k = ((x[a] - grid.lower[a]) / sp[a]).round() as usize;
            idx = idx * grid.counts[a] + k;
        }
        idx
    };
    for (x, &w) in phat.measure.support().iter().zip(phat.measure.weights()) {
        p_hat[index(x)] += w;
    }
    let diff: Vec<f64> = psi.weights().iter().zip(&p_hat).map(|(a, b)| (a - b).abs()).collect();
    let total: f64 = diff.iter().sum();
    let villani = if total > 0.0 {
        let dim = grid.dim();
        let mut center = vec![0.0; dim];
        for (x, &w) in atoms.iter().zip(&diff) {
            for a in 0..dim {
                center[a] += w * x[a] / total;
            }
        }
        2.0 * atoms.iter().zip(&diff).map(|(x, &w)| w * dist2(x, &center)).sum::<f64>()
    } else {
        0.0
    };
    Ok(W2Report { risk, bias, variance, villani })
}
