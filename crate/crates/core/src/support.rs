//! Smoothed density `g_hat`, the oracle `g_bar = psi_{A,h} * G`, the level-set
//! support estimator and its bandwidth/degree/threshold schedule.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charfn::{estimate_cf, ClassParams, CfFit, OptimizerConfig, TruncatedAnalytic};
use crate::error::{invalid, Error, Result};
use crate::kernel::RadialKernel;
use crate::metrics::{
    dist2, offset_contains, truncated_hausdorff, DiscreteMeasure, GridSpec, PointSet, Sample, Window,
};
use crate::quad::{gauss_legendre, Rule1d};

/// How the degree, bandwidth and threshold are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mode {
    /// The exact schedule with the theoretical constants.
    Paper,
    /// The same functional forms with free constants, plus optional explicit overrides.
    Practical(PracticalSchedule),
}

/// Constants of the practical schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PracticalSchedule {
    /// `m = floor(c_m / (4 kappa) log n / log log n)`.
    #[serde(default = "default_c_m")]
    pub c_m: f64,
    /// Product `c_h S` in `h = c_h S m^{-kappa}`.
    #[serde(default = "default_c_hs")]
    pub c_hs: f64,
    /// Threshold as a fraction of `max g_hat` on the grid.
    #[serde(default = "default_lambda_rel")]
    pub lambda_rel: f64,
    /// Explicit overrides.
    #[serde(default)]
    pub m: Option<u32>,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
}

fn default_c_m() -> f64 {
    18.7
}
fn default_c_hs() -> f64 {
    0.95
}
fn default_lambda_rel() -> f64 {
    0.8
}

impl Default for PracticalSchedule {
    fn default() -> Self {
        Self {
            c_m: default_c_m(),
            c_hs: default_c_hs(),
            lambda_rel: default_lambda_rel(),
            m: None,
            h: None,
            lambda: None,
        }
    }
}

/// Parameters of the support estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportParams {
    pub kappa: f64,
    /// Kernel shape `A`.
    pub a: f64,
    pub c_h: f64,
    pub ell: f64,
    /// Declared intrinsic dimension bound.
    pub d: usize,
    /// Standardness constant, used when `d = D`.
    pub a_std: f64,
    pub eval_grid: GridSpec,
    pub mode: Mode,
}

impl SupportParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return invalid("kappa must lie in (1/2, 1]");
        }
        if !(self.ell > 0.0 && self.ell < 1.0) {
            return invalid("ell must lie in (0, 1)");
        }
        if self.d < 1 || self.d > dim {
            return invalid("intrinsic dimension d must lie in [1, D]");
        }
        if self.eval_grid.dim() != dim {
            return invalid("evaluation grid dimension differs from D");
        }
        if matches!(self.mode, Mode::Paper) && self.c_h < (2.0 * dim as f64 + 2.0).exp() {
            return invalid("paper mode needs c_h >= exp(2D + 2)");
        }
        if self.d == dim && !(self.a_std > 0.0) {
            return invalid("d = D needs a positive standardness constant");
        }
        Ok(())
    }
}

/// How the threshold is obtained once `g_hat` is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    RelativeToMax(f64),
}

/// Output of [`schedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub m: u32,
    pub h: f64,
    pub threshold: Threshold,
    /// Set when the bandwidth exceeds the data scale.
    pub warning: Option<String>,
}

/// `floor(c / (4 kappa) log n / log log n)`.
pub fn degree_formula(n: usize, kappa: f64, c: f64) -> Result<u32> {
    if n < 16 {
        return Err(Error::NTooSmall);
    }
    let ln = (n as f64).ln();
    let m = (c / (4.0 * kappa) * ln / ln.ln()).floor();
    if m < 1.0 {
        return Err(Error::NTooSmall);
    }
    Ok(m as u32)
}

/// Degree, bandwidth and threshold for sample size `n`. `kernel` supplies `(c_A, d_A)`
/// for the `d = D` threshold; `data_diameter` triggers the oversized-bandwidth warning.
pub fn schedule(
    n: usize,
    p: &SupportParams,
    s: f64,
    kernel: &RadialKernel,
    data_diameter: Option<f64>,
) -> Result<Schedule> {
    let dim = kernel.dim;
    let (m, h, threshold) = match &p.mode {
        Mode::Paper => {
            let m = degree_formula(n, p.kappa, 1.0)?;
            let h = p.c_h * s * (m as f64).powf(-p.kappa);
            let lambda = if p.d < dim {
                (1.0 / h).powf(p.ell)
            } else {
                0.25 * p.a_std * kernel.diagnostics.c_a.powi(dim as i32) * kernel.diagnostics.d_a
            };
            (m, h, Threshold::Absolute(lambda))
        }
        Mode::Practical(ps) => {
            let m = match ps.m {
                Some(m) => m,
                None => degree_formula(n, p.kappa, ps.c_m)?,
            };
            let h = ps.h.unwrap_or(ps.c_hs * (m as f64).powf(-p.kappa));
            let threshold = match ps.lambda {
                Some(l) => Threshold::Absolute(l),
                None => Threshold::RelativeToMax(ps.lambda_rel),
            };
            (m, h, threshold)
        }
    };
    if !(h > 0.0 && h.is_finite()) {
        return invalid("bandwidth must be positive");
    }
    let warning = data_diameter
        .filter(|&diam| h > diam)
        .map(|diam| format!("bandwidth h = {h} exceeds the data diameter {diam}"));
    Ok(Schedule { m, h, threshold, warning })
}

/// Fourier-side evaluator of `g_hat(y) = (2 pi)^{-D} int e^{-i t.y} F[psi_A](h t) phi(t) dt`
/// on a tensor Gauss-Legendre grid over `[-(1+margin)/h, (1+margin)/h]^D`.
#[derive(Debug, Clone)]
pub struct GhatEngine {
    dim: usize,
    axis: Rule1d,
    /// `w(t) F[psi](h t) phi(t) (2 pi)^{-D}` at every tensor node (last axis fastest).
    weighted: Vec<Complex64>,
}

impl GhatEngine {
    /// Builds the engine from any function of the frequency (e.g. a fitted polynomial or a true CF).
    pub fn from_fn(
        kernel: &RadialKernel,
        h: f64,
        order: usize,
        phi: impl Fn(&[f64]) -> Complex64 + Sync,
    ) -> Self {
        let dim = kernel.dim;
        let half = (1.0 + kernel.margin) / h;
        let axis = gauss_legendre(order, -half, half);
        let q = axis.len();
        let total = q.pow(dim as u32);
        let norm = (2.0 * PI).powi(-(dim as i32));
        let weighted = (0..total)
            .into_par_iter()
            .map(|mut idx| {
                let mut t = vec![0.0; dim];
                let mut w = norm;
                for a in (0..dim).rev() {
                    let k = idx % q;
                    idx /= q;
                    t[a] = axis.nodes[k];
                    w *= axis.weights[k];
                }
                let f = kernel.eval_fourier_psi(&t.iter().map(|v| v * h).collect::<Vec<_>>());
                if f == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    phi(&t) * (w * f)
                }
            })
            .collect();
        Self { dim, axis, weighted }
    }

    /// Engine for a truncated polynomial estimate.
    pub fn new(phi: &TruncatedAnalytic, kernel: &RadialKernel, h: f64, order: usize) -> Self {
        Self::from_fn(kernel, h, order, |t| phi.eval(t))
    }

    /// Value at one point (real part; the imaginary residual is returned second).
    pub fn eval_complex(&self, y: &[f64]) -> Complex64 {
        let q = self.axis.len();
        let phases: Vec<Vec<Complex64>> = y
            .iter()
            .map(|&ya| self.axis.nodes.iter().map(|&t| Complex64::from_polar(1.0, -t * ya)).collect())
            .collect();
        self.weighted
            .iter()
            .enumerate()
            .map(|(mut idx, &v)| {
                let mut e = Complex64::new(1.0, 0.0);
                for a in (0..self.dim).rev() {
                    e *= phases[a][idx % q];
                    idx /= q;
                }
                v * e
            })
            .sum()
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.eval_complex(y).re
    }

    /// Values on every grid point (flat order of [`GridSpec::point`]) via separable axis contractions.
    pub fn eval_grid_complex(&self, grid: &GridSpec) -> Vec<Complex64> {
        let q = self.axis.len();
        let mut dims: Vec<usize> = vec![q; self.dim];
        let mut tensor = self.weighted.clone();
        for a in 0..self.dim {
            let ys = grid.axis(a);
            let e: Vec<Complex64> = ys
                .iter()
                .flat_map(|&y| self.axis.nodes.iter().map(move |&t| Complex64::from_polar(1.0, -t * y)))
                .collect();
            tensor = mode_product(&tensor, &dims, a, &e, ys.len());
            dims[a] = ys.len();
        }
        tensor
    }

    pub fn eval_grid(&self, grid: &GridSpec) -> Vec<f64> {
        self.eval_grid_complex(grid).into_iter().map(|v| v.re).collect()
    }
}

/// Contracts axis `axis` of a row-major tensor with a `rows x dims[axis]` matrix.
fn mode_product(tensor: &[Complex64], dims: &[usize], axis: usize, mat: &[Complex64], rows: usize) -> Vec<Complex64> {
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let k = dims[axis];
    let mut out = vec![Complex64::new(0.0, 0.0); outer * rows * inner];
    out.par_chunks_mut(rows * inner).enumerate().for_each(|(o, block)| {
        for r in 0..rows {
            let row = &mat[r * k..(r + 1) * k];
            let dst = &mut block[r * inner..(r + 1) * inner];
            for (j, &m) in row.iter().enumerate() {
                let src = &tensor[(o * k + j) * inner..(o * k + j + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += m * s;
                }
            }
        }
    });
    out
}

/// `g_hat` at one point.
pub fn ghat(phi: &TruncatedAnalytic, kernel: &RadialKernel, h: f64, m: u32, y: &[f64], order: usize) -> f64 {
    GhatEngine::new(&phi.truncate(m), kernel, h, order).eval(y)
}

/// `g_bar(y) = sum_j w_j psi_{A,h}(y - x_j)`.
pub fn gbar_oracle(g: &DiscreteMeasure, kernel: &RadialKernel, h: f64, y: &[f64]) -> f64 {
    let mut diff = vec![0.0; y.len()];
    g.support()
        .iter()
        .zip(g.weights())
        .map(|(x, w)| {
            for (d, (a, b)) in diff.iter_mut().zip(y.iter().zip(x)) {
                *d = a - b;
            }
            w * kernel.eval_psi(h, &diff)
        })
        .sum()
}

/// `g_bar` on every grid point.
pub fn gbar_grid(g: &DiscreteMeasure, kernel: &RadialKernel, h: f64, grid: &GridSpec) -> Vec<f64> {
    (0..grid.len()).into_par_iter().map(|i| gbar_oracle(g, kernel, h, &grid.point(i))).collect()
}

/// Characteristic function of a discrete measure.
pub fn measure_cf(g: &DiscreteMeasure, t: &[f64]) -> Complex64 {
    g.support()
        .iter()
        .zip(g.weights())
        .map(|(x, w)| {
            let p: f64 = x.iter().zip(t).map(|(a, b)| a * b).sum();
            Complex64::from_polar(*w, p)
        })
        .sum()
}

/// Level-set estimate of the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEstimate {
    pub cells: PointSet,
    pub kappa: f64,
    pub h: f64,
    pub m: u32,
    pub threshold: f64,
    pub ghat_max: f64,
    pub grid: GridSpec,
    pub warning: Option<String>,
}

impl SupportEstimate {
    /// Thresholds grid values of `g_hat`.
    pub fn from_grid(values: &[f64], grid: &GridSpec, kappa: f64, sched: &Schedule) -> Result<Self> {
        let ghat_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = match sched.threshold {
            Threshold::Absolute(l) => l,
            Threshold::RelativeToMax(r) => r * ghat_max,
        };
        if !(threshold > 0.0) {
            return Err(Error::Numerical("threshold is not positive (g_hat has no positive mass)".into()));
        }
        let mut data = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if v > threshold {
                data.extend(grid.point(i));
            }
        }
        let cells = PointSet::from_flat(data, grid.dim())?.with_grid(grid.clone());
        let mut warning = sched.warning.clone();
        if cells.is_empty() {
            warning = Some("empty level set".into());
        }
        Ok(Self { cells, kappa, h: sched.h, m: sched.m, threshold, ghat_max, grid: grid.clone(), warning })
    }

    /// `H_K` risk against a truth discretization; `diam(K)` when the estimate is empty in `K`.
    pub fn risk(&self, truth: &PointSet, k: &Window) -> f64 {
        match truncated_hausdorff(&self.cells, truth, k) {
            Ok(v) => v,
            Err(_) => match k {
                Window::All => crate::metrics::diameter(&self.grid.points()).unwrap_or(f64::INFINITY),
                _ => k.diameter(),
            },
        }
    }

    /// CSV with one row per cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = (0..self.grid.dim()).map(|a| format!("x{a}")).collect();
        w.write_record(&header).map_err(|e| Error::Numerical(e.to_string()))?;
        for p in self.cells.iter() {
            w.write_record(p.iter().map(|v| format!("{v}"))).map_err(|e| Error::Numerical(e.to_string()))?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?)
            .map_err(|e| Error::Numerical(e.to_string()))
    }
}

/// Result of the sandwich test `M_G ⊂ M_hat_snap` and `M_hat ⊂ (M_G)_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    pub truth_covered: bool,
    pub estimate_near_truth: bool,
}

impl Sandwich {
    pub fn holds(&self) -> bool {
        self.truth_covered && self.estimate_near_truth
    }
}

/// Checks both inclusions inside `k`; truth points are matched to cells up to
/// the half-diagonal of a grid cell.
pub fn sandwich(estimate: &SupportEstimate, truth: &PointSet, c: f64, k: &Window) -> Sandwich {
    if estimate.cells.is_empty() {
        return Sandwich { truth_covered: false, estimate_near_truth: false };
    }
    let snap = 0.5 * estimate.grid.spacing().iter().map(|s| s * s).sum::<f64>().sqrt() * (1.0 + 1e-9);
    let tr = truth.restrict(k);
    let truth_covered = tr.iter().all(|x| offset_contains(&estimate.cells, snap, x).unwrap_or(false));
    let est = estimate.cells.restrict(k);
    let estimate_near_truth = est.iter().all(|x| offset_contains(truth, c, x).unwrap_or(false));
    Sandwich { truth_covered, estimate_near_truth }
}

/// Numerical settings of the support pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Gauss-Legendre order per axis for `g_hat`.
    #[serde(default = "default_ghat_order")]
    pub ghat_order: usize,
    /// Contrast box half-width as a multiple of `1/h` (used when `nu_est` is not set).
    #[serde(default = "default_nu_rel")]
    pub nu_rel: f64,
    /// Explicit contrast box half-width.
    #[serde(default)]
    pub nu_est: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_ghat_order() -> usize {
    64
}
fn default_nu_rel() -> f64 {
    1.0
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { ghat_order: default_ghat_order(), nu_rel: default_nu_rel(), nu_est: None, optimizer: OptimizerConfig::default() }
    }
}

impl PipelineConfig {
    pub fn nu_for(&self, h: f64) -> f64 {
        self.nu_est.unwrap_or(self.nu_rel / h)
    }
}

/// Full support-estimation output.
#[derive(Debug, Clone)]
pub struct SupportRun {
    pub estimate: SupportEstimate,
    pub ghat: Vec<f64>,
    pub fit: CfFit,
    pub schedule: Schedule,
}

/// `M_hat_kappa`: fits the CF, truncates at `m_kappa`, evaluates `g_hat` on the grid and thresholds.
pub fn estimate_support(
    sample: &Sample,
    params: &SupportParams,
    class: &ClassParams,
    kernel: &RadialKernel,
    cfg: &PipelineConfig,
) -> Result<SupportRun> {
    params.validate(sample.dim())?;
    if kernel.dim != sample.dim() {
        return invalid("kernel dimension differs from the sample");
    }
    let diam = data_diameter(sample);
    let sched = schedule(sample.n(), params, class.s, kernel, Some(diam))?;
    let mut class = class.clone();
    class.nu_est = cfg.nu_for(sched.h);
    let fit = estimate_cf(sample, &class, sched.m, &cfg.optimizer)?;
    let engine = GhatEngine::new(&fit.phi, kernel, sched.h, cfg.ghat_order);
    let values = engine.eval_grid(&params.eval_grid);
    let estimate = SupportEstimate::from_grid(&values, &params.eval_grid, params.kappa, &sched)?;
    Ok(SupportRun { estimate, ghat: values, fit, schedule: sched })
}

/// Diameter of the sample: exact pairwise maximum over the points that are extreme
/// along a fixed set of directions (the coordinate axes plus 180 further directions).
pub fn data_diameter(sample: &Sample) -> f64 {
    let dim = sample.dim();
    let mut dirs: Vec<Vec<f64>> = (0..dim)
        .map(|a| (0..dim).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
        .collect();
    if dim == 2 {
        dirs.extend((0..180).map(|k| {
            let a = PI * k as f64 / 180.0;
            vec![a.cos(), a.sin()]
        }));
    } else if dim > 2 {
        use rand::Rng;
        let mut rng = crate::fixtures::rng_from_seed(0);
        for _ in 0..180 {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                dirs.push(v.into_iter().map(|x| x / n).collect());
            }
        }
    }
    let mut extreme = std::collections::BTreeSet::new();
    for d in &dirs {
        let (mut lo, mut hi) = ((f64::INFINITY, 0), (f64::NEG_INFINITY, 0));
        for (i, y) in sample.rows().enumerate() {
            let p: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
            if p < lo.0 {
                lo = (p, i);
            }
            if p > hi.0 {
                hi = (p, i);
            }
        }
        extreme.insert(lo.1);
        extreme.insert(hi.1);
    }
    let idx: Vec<usize> = extreme.into_iter().collect();
    let mut best = 0.0_f64;
    for (k, &i) in idx.iter().enumerate() {
        for &j in &idx[k + 1..] {
            best = best.max(dist2(sample.row(i), sample.row(j)));
        }
    }
    best.sqrt()
}

/// Default evaluation grid: data bounding box inflated by 10% per side, `count` points per axis.
pub fn default_eval_grid(sample: &Sample, count: usize) -> Result<GridSpec> {
    GridSpec::around(&sample.to_point_set(), 0.1, count)
}

/// Both sides of the sup-norm bound on `|g_hat - g_bar|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    /// `(2 pi)^{-D} ||F[psi_A](h .)||_2 ||T_m phi_hat - Phi_X||_2`, both norms over the
    /// frequency support of the kernel (`||F[psi_A](h .)||_2 = h^{-D/2} ||F[psi_A]||_2`).
    pub bound: f64,
    /// `max` over the grid of `|g_hat - g_bar|`, where `g_bar` uses the true CF on the same nodes.
    pub measured: f64,
    pub cf_l2_gap: f64,
}

impl GammaReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.measured <= self.bound * (1.0 + tol) + 1e-14
    }
}

/// Compares the estimated and oracle smoothed densities on `grid`.
pub fn gamma_bound(
    phi_hat: &TruncatedAnalytic,
    true_cf: impl Fn(&[f64]) -> Complex64 + Sync,
    kernel: &RadialKernel,
    h: f64,
    m: u32,
    grid: &GridSpec,
    order: usize,
) -> GammaReport {
    let phi = phi_hat.truncate(m);
    let diff = |t: &[f64]| phi.eval(t) - true_cf(t);
    let engine = GhatEngine::from_fn(kernel, h, order, diff);
    let measured = engine.eval_grid(grid).into_iter().map(f64::abs).fold(0.0, f64::max);

    // discrete norms on the engine's own nodes, so the Cauchy-Schwarz bound is exact
    let dim = kernel.dim;
    let half = (1.0 + kernel.margin) / h;
    let axis = gauss_legendre(order, -half, half);
    let q = axis.len();
    let mut gap2 = 0.0;
    let mut f2 = 0.0;
    for mut idx in 0..q.pow(dim as u32) {
        let mut t = vec![0.0; dim];
        let mut w = 1.0;
        for a in (0..dim).rev() {
            let k = idx % q;
            idx /= q;
            t[a] = axis.nodes[k];
            w *= axis.weights[k];
        }
        let f = kernel.eval_fourier_psi(&t.iter().map(|v| v * h).collect::<Vec<_>>());
        if f != 0.0 {
            gap2 += w * diff(&t).norm_sqr();
            f2 += w * f * f;
        }
    }
    let cf_l2_gap = gap2.sqrt();
    let bound = (2.0 * PI).powi(-(dim as i32)) * f2.sqrt() * cf_l2_gap;
    GammaReport { bound, measured, cf_l2_gap }
}

/// `||F[psi_A]||_2` over the table (radial quadrature).
pub fn fourier_l2(kernel: &RadialKernel) -> f64 {
    let area = match kernel.dim {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 4.0 * PI,
    };
    let k_max = 1.0 + kernel.margin;
    crate::quad::composite(0.0, k_max, 256, 8)
        .integrate(|k| kernel.fourier_at(k).powi(2) * area * k.powi(kernel.dim as i32 - 1))
        .sqrt()
}
