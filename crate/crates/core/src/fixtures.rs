//! Ground-truth signals, noise models and the two-point construction used for
//! lower-bound experiments.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernel::self_convolve_at;
use crate::metrics::{DiscreteMeasure, PointSet, Sample};
use crate::quad::composite;

/// Deterministic RNG stream for a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Signal families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    /// Uniform on a circle in the plane.
    Circle { radius: f64 },
    /// Uniform on a sphere in `R^3`.
    Sphere { radius: f64 },
    /// `X_i = A_alpha (U, (-1)^i gamma cos(U / gamma), 0, ...)` with `U ~ f_1`.
    Wiggly {
        i: u8,
        gamma: f64,
        alpha: f64,
        #[serde(default = "default_dim2")]
        dim: usize,
        #[serde(default = "default_f1_delta")]
        delta: f64,
    },
    /// Uniform on a `d`-dimensional ball of `R^dim`, embedded in the first `d` coordinates.
    UniformBall { d: usize, radius: f64, #[serde(default = "default_dim2")] dim: usize },
    /// Dirac mass at the origin.
    PointMass { #[serde(default = "default_dim2")] dim: usize },
}

fn default_dim2() -> usize {
    2
}
fn default_f1_delta() -> f64 {
    0.5
}

/// Draws of `X` together with a dense discretization of the support.
#[derive(Debug, Clone)]
pub struct SignalDraw {
    pub x: Vec<Vec<f64>>,
    pub truth: PointSet,
}

impl SignalSpec {
    pub fn dim(&self) -> usize {
        match self {
            SignalSpec::Circle { .. } => 2,
            SignalSpec::Sphere { .. } => 3,
            SignalSpec::Wiggly { dim, .. } | SignalSpec::UniformBall { dim, .. } | SignalSpec::PointMass { dim } => {
                *dim
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SignalSpec::Circle { radius } | SignalSpec::Sphere { radius } if !(radius > 0.0) => {
                invalid("radius must be positive")
            }
            SignalSpec::Wiggly { i, gamma, alpha, dim, delta } => {
                if i > 1 {
                    return invalid("wiggly index must be 0 or 1");
                }
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return invalid("gamma must lie in (0, 1]");
                }
                if !(alpha > 0.0) {
                    return invalid("alpha must be positive");
                }
                if dim < 2 {
                    return invalid("wiggly curves need dim >= 2");
                }
                if !(delta > 0.0 && delta < 1.0) {
                    return invalid("f1 delta must lie in (0, 1)");
                }
                Ok(())
            }
            SignalSpec::UniformBall { d, radius, dim } => {
                if d < 1 || d > dim || !(radius > 0.0) {
                    return invalid("uniform ball needs 1 <= d <= dim and radius > 0");
                }
                Ok(())
            }
            SignalSpec::PointMass { dim } if dim < 1 => invalid("dimension must be positive"),
            _ => Ok(()),
        }
    }

    /// Short identifier used in seeds and CSV rows.
    pub fn id(&self) -> String {
        match self {
            SignalSpec::Circle { radius } => format!("circle_r{radius}"),
            SignalSpec::Sphere { radius } => format!("sphere_r{radius}"),
            SignalSpec::Wiggly { i, gamma, alpha, dim, .. } => format!("wiggly{i}_g{gamma}_a{alpha}_d{dim}"),
            SignalSpec::UniformBall { d, radius, dim } => format!("ball{d}_r{radius}_d{dim}"),
            SignalSpec::PointMass { dim } => format!("point_d{dim}"),
        }
    }

    /// One draw of `X`.
    pub fn draw_one(&self, rng: &mut ChaCha8Rng, f1: Option<&F1>) -> Vec<f64> {
        match *self {
            SignalSpec::Circle { radius } => {
                let th = rng.random::<f64>() * 2.0 * PI;
                vec![radius * th.cos(), radius * th.sin()]
            }
            SignalSpec::Sphere { radius } => {
                let v = unit_vector(rng, 3);
                v.into_iter().map(|c| radius * c).collect()
            }
            SignalSpec::Wiggly { i, gamma, alpha, dim, .. } => {
                let u = f1.expect("wiggly draws need f1").sample(rng);
                wiggly_point(u, i, gamma, alpha, dim)
            }
            SignalSpec::UniformBall { d, radius, dim } => {
                let dir = unit_vector(rng, d);
                let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                let mut x = vec![0.0; dim];
                for a in 0..d {
                    x[a] = r * dir[a];
                }
                x
            }
            SignalSpec::PointMass { dim } => vec![0.0; dim],
        }
    }

    /// `n` i.i.d. draws plus the dense support discretization.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<SignalDraw> {
        self.validate()?;
        let f1 = match self {
            SignalSpec::Wiggly { delta, .. } => Some(F1::new(*delta)?),
            _ => None,
        };
        let x = (0..n).map(|_| self.draw_one(rng, f1.as_ref())).collect();
        Ok(SignalDraw { x, truth: self.truth_set() })
    }

    /// Dense discretization of the support (at least 2000 points, except for a point mass).
    pub fn truth_set(&self) -> PointSet {
        let pts: Vec<Vec<f64>> = match *self {
            SignalSpec::Circle { radius } => (0..2048)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / 2048.0;
                    vec![radius * th.cos(), radius * th.sin()]
                })
                .collect(),
            SignalSpec::Sphere { radius } => {
                let n = 4000;
                let golden = PI * (3.0 - 5f64.sqrt());
                (0..n)
                    .map(|k| {
                        let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                        let r = (1.0 - z * z).sqrt();
                        let th = golden * k as f64;
                        vec![radius * r * th.cos(), radius * r * th.sin(), radius * z]
                    })
                    .collect()
            }
            SignalSpec::Wiggly { i, gamma, alpha, dim, .. } => (0..=4000)
                .map(|k| wiggly_point(-1.0 + 2.0 * k as f64 / 4000.0, i, gamma, alpha, dim))
                .collect(),
            SignalSpec::UniformBall { d, radius, dim } => {
                let per_axis = match d {
                    1 => 2001,
                    2 => 51,
                    _ => 17,
                };
                let mut out = Vec::new();
                let total = (per_axis as usize).pow(d as u32);
                for mut idx in 0..total {
                    let mut p = vec![0.0; dim];
                    for a in 0..d {
                        let k = idx % per_axis;
                        idx /= per_axis;
                        p[a] = -radius + 2.0 * radius * k as f64 / (per_axis - 1) as f64;
                    }
                    if p.iter().map(|v| v * v).sum::<f64>() <= radius * radius * (1.0 + 1e-12) {
                        out.push(p);
                    }
                }
                out
            }
            SignalSpec::PointMass { dim } => vec![vec![0.0; dim]],
        };
        PointSet::from_points(&pts).expect("finite truth points")
    }

    /// Truth measure `G` discretized by `atoms` i.i.d. draws.
    pub fn truth_measure(&self, atoms: usize, rng: &mut ChaCha8Rng) -> Result<DiscreteMeasure> {
        let draw = self.sample(atoms, rng)?;
        DiscreteMeasure::uniform(PointSet::from_points(&draw.x)?)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `A_alpha S_i` for `S_i = (u, (-1)^i gamma cos(u / gamma), 0, ..., 0)`.
pub fn wiggly_point(u: f64, i: u8, gamma: f64, alpha: f64, dim: usize) -> Vec<f64> {
    let sign = if i == 0 { 1.0 } else { -1.0 };
    let s2 = sign * gamma * (u / gamma).cos();
    let mut x = vec![0.0; dim];
    x[0] = alpha * u;
    x[1] = alpha * u + 0.5 * alpha * s2;
    x
}

/// Density `f_1 = c (u_a * u_a)` with `a = 1/(1 - delta)`, supported on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct F1 {
    pub delta: f64,
    grid: Vec<f64>,
    density: Vec<f64>,
    cdf: Vec<f64>,
    max: f64,
}

impl F1 {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return invalid("delta must lie in (0, 1)");
        }
        let a = 1.0 / (1.0 - delta);
        let n = 4001;
        let grid: Vec<f64> = (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64).collect();
        let raw: Vec<f64> = grid.iter().map(|&t| self_convolve_at(a, t)).collect();
        let dx = 2.0 / (n - 1) as f64;
        let mut cdf = vec![0.0; n];
        for k in 1..n {
            cdf[k] = cdf[k - 1] + 0.5 * dx * (raw[k] + raw[k - 1]);
        }
        let total = cdf[n - 1];
        let density: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let cdf: Vec<f64> = cdf.iter().map(|v| v / total).collect();
        let max = density.iter().copied().fold(0.0, f64::max);
        Ok(Self { delta, grid, density, cdf, max })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !(x > -1.0 && x < 1.0) {
            return 0.0;
        }
        let pos = (x + 1.0) / 2.0 * (self.grid.len() - 1) as f64;
        let k = (pos.floor() as usize).min(self.grid.len() - 2);
        let f = pos - k as f64;
        self.density[k] * (1.0 - f) + self.density[k + 1] * f
    }

    /// Quadrature CDF (trapezoid on the table, interpolated).
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= -1.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let pos = (x + 1.0) / 2.0 * (self.grid.len() - 1) as f64;
        let k = (pos.floor() as usize).min(self.grid.len() - 2);
        let f = pos - k as f64;
        self.cdf[k] * (1.0 - f) + self.cdf[k + 1] * f
    }

    /// Rejection sampling against the uniform envelope on `[-1, 1]`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let x = -1.0 + 2.0 * rng.random::<f64>();
            if rng.random::<f64>() * self.max * 1.000001 <= self.pdf(x) {
                return x;
            }
        }
    }
}

/// One draw of `f_1` with parameter `delta`.
pub fn sample_f1(delta: f64, seed: u64) -> Result<f64> {
    Ok(F1::new(delta)?.sample(&mut rng_from_seed(seed)))
}

/// Band-limited noise density `q(x) = 2 pi c (1 + cos(cx)) / (pi^2 - (cx)^2)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QNoise {
    pub c: f64,
}

/// Density of `V = cX` for `X ~ q`, written in a form that is stable at `|v| = pi`.
fn q_standard(v: f64) -> f64 {
    let e = v.abs() - PI;
    let half = 0.5 * e;
    let sinc = if half.abs() < 1e-8 { 1.0 - half * half / 6.0 } else { half.sin() / half };
    PI * sinc * sinc / (2.0 * PI + e).powi(2)
}

const Q_CORE: f64 = 2.0 * PI;
const Q_TAIL: f64 = 22.4;

impl QNoise {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return invalid("q-noise scale c must be positive");
        }
        Ok(Self { c })
    }

    /// Normalizing constant `c_q = 2 pi c`.
    pub fn c_q(&self) -> f64 {
        2.0 * PI * self.c
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.c * q_standard(self.c * x)
    }

    /// `F[q](t) = (1 - |t/c|) cos(pi t / c) + sin(pi |t/c|) / pi` for `|t| <= c`, else 0.
    pub fn cf(&self, t: f64) -> f64 {
        let s = (t / self.c).abs();
        if s >= 1.0 {
            return 0.0;
        }
        (1.0 - s) * (PI * s).cos() + (PI * s).sin() / PI
    }

    /// `E[X^2]` by quadrature of the density.
    pub fn second_moment(&self) -> f64 {
        // beyond L, v^2 q(v) = 2 pi (1 + cos v) / v^2 + O(v^-4): the oscillating part
        // integrates to O(L^-2), the rest to 2 pi / L
        let l = 4000.0;
        let core = composite(0.0, l, 8000, 8).integrate(|v| v * v * q_standard(v));
        let tail = 2.0 * PI / l;
        2.0 * (core + tail) / (self.c * self.c)
    }

    /// Rejection sampling: uniform core on `|v| <= 2 pi`, `v^{-4}` Pareto tails beyond.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let core_height = 0.13;
        let core_mass = 2.0 * Q_CORE * core_height;
        let tail_mass = 2.0 * Q_TAIL / (3.0 * Q_CORE.powi(3));
        loop {
            let pick = rng.random::<f64>() * (core_mass + tail_mass);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (v, env) = if pick < core_mass {
                let v = Q_CORE * (2.0 * rng.random::<f64>() - 1.0);
                (v, core_height)
            } else {
                let u: f64 = 1.0 - rng.random::<f64>();
                let v = sign * Q_CORE * u.powf(-1.0 / 3.0);
                (v, Q_TAIL / v.powi(4))
            };
            if rng.random::<f64>() * env <= q_standard(v) {
                return v / self.c;
            }
        }
    }
}

/// Draws one value of q-noise with scale `c`.
pub fn sample_q(c: f64, seed: u64) -> Result<f64> {
    Ok(QNoise::new(c)?.sample(&mut rng_from_seed(seed)))
}

/// Noise families, applied i.i.d. to every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian { sigma: f64 },
    Laplace { b: f64 },
    UniformBox { half_width: f64 },
    QDensity { c: f64 },
    None,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSpec::Gaussian { sigma } => sigma > 0.0,
            NoiseSpec::Laplace { b } => b > 0.0,
            NoiseSpec::UniformBox { half_width } => half_width > 0.0,
            NoiseSpec::QDensity { c } => c > 0.0,
            NoiseSpec::None => true,
        };
        if ok {
            Ok(())
        } else {
            invalid("noise scale must be positive")
        }
    }

    pub fn id(&self) -> String {
        match self {
            NoiseSpec::Gaussian { sigma } => format!("gauss{sigma}"),
            NoiseSpec::Laplace { b } => format!("laplace{b}"),
            NoiseSpec::UniformBox { half_width } => format!("box{half_width}"),
            NoiseSpec::QDensity { c } => format!("q{c}"),
            NoiseSpec::None => "none".into(),
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            NoiseSpec::Gaussian { sigma } => Normal::new(0.0, sigma).expect("sigma > 0").sample(rng),
            NoiseSpec::Laplace { b } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            }
            NoiseSpec::UniformBox { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
            NoiseSpec::QDensity { c } => QNoise { c }.sample(rng),
            NoiseSpec::None => 0.0,
        }
    }

    /// One-coordinate characteristic function.
    pub fn cf_1d(&self, t: f64) -> f64 {
        match *self {
            NoiseSpec::Gaussian { sigma } => (-0.5 * sigma * sigma * t * t).exp(),
            NoiseSpec::Laplace { b } => 1.0 / (1.0 + b * b * t * t),
            NoiseSpec::UniformBox { half_width } => {
                let x = half_width * t;
                if x.abs() < 1e-8 {
                    1.0
                } else {
                    x.sin() / x
                }
            }
            NoiseSpec::QDensity { c } => QNoise { c }.cf(t),
            NoiseSpec::None => 1.0,
        }
    }

    /// Characteristic function of a block of i.i.d. coordinates.
    pub fn cf(&self, t: &[f64]) -> Complex64 {
        Complex64::new(t.iter().map(|&v| self.cf_1d(v)).product(), 0.0)
    }
}

/// Noisy sample `Y = X + e` together with the clean draws and the support discretization.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub sample: Sample,
    pub x: Vec<Vec<f64>>,
    pub truth: PointSet,
}

/// Generates `n` observations of `signal` corrupted by `noise`, split as `(d1, D - d1)`.
pub fn make_fixture(signal: &SignalSpec, noise: &NoiseSpec, n: usize, d1: usize, seed: u64) -> Result<Fixture> {
    noise.validate()?;
    let dim = signal.dim();
    if d1 == 0 || d1 >= dim {
        return invalid("d1 must lie in [1, D - 1]");
    }
    let mut rng = rng_from_seed(seed);
    let draw = signal.sample(n, &mut rng)?;
    let mut data = Vec::with_capacity(n * dim);
    for x in &draw.x {
        for &v in x {
            data.push(v + noise.draw(&mut rng));
        }
    }
    Ok(Fixture { sample: Sample::new(data, d1, dim - d1)?, x: draw.x, truth: draw.truth })
}

/// Settings of the two-point total-variation computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvConfig {
    /// Noise scale `c` of `q`.
    #[serde(default = "default_tv_c")]
    pub c: f64,
    #[serde(default = "default_tv_alpha")]
    pub alpha: f64,
    #[serde(default = "default_f1_delta")]
    pub delta: f64,
    /// Grid points per axis of the observation grid.
    #[serde(default = "default_tv_grid")]
    pub grid_points: usize,
    /// Half-width of the observation grid, in units of `1/c`.
    #[serde(default = "default_tv_half")]
    pub half_width: f64,
    /// Quadrature panels (8 nodes each) over `u in [-1, 1]`.
    #[serde(default = "default_tv_panels")]
    pub u_panels: usize,
}

fn default_tv_c() -> f64 {
    1.0
}
fn default_tv_alpha() -> f64 {
    1.0
}
fn default_tv_grid() -> usize {
    481
}
fn default_tv_half() -> f64 {
    24.0
}
fn default_tv_panels() -> usize {
    400
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            c: default_tv_c(),
            alpha: default_tv_alpha(),
            delta: default_f1_delta(),
            grid_points: default_tv_grid(),
            half_width: default_tv_half(),
            u_panels: default_tv_panels(),
        }
    }
}

/// Density of `A_alpha S + e` on the grid for the curve with second-coordinate
/// offset `offset(u)`, by quadrature over `u`.
fn convolved_density(
    cfg: &TvConfig,
    f1: &F1,
    q: &QNoise,
    ys: &[f64],
    offset: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let rule = composite(-1.0, 1.0, cfg.u_panels, 8);
    let m = ys.len();
    let k = rule.len();
    let a = DMatrix::from_fn(m, k, |j, l| {
        let u = rule.nodes[l];
        rule.weights[l] * f1.pdf(u) * q.pdf(ys[j] - cfg.alpha * u)
    });
    let b = DMatrix::from_fn(m, k, |j, l| {
        let u = rule.nodes[l];
        q.pdf(ys[j] - cfg.alpha * u - offset(u))
    });
    a * b.transpose()
}

/// Total variation between `G_0 * Q` and `G_1 * Q` in `R^2` at curve scale `gamma`.
pub fn tv_two_points(gamma: f64, cfg: &TvConfig) -> Result<f64> {
    tv_two_points_signs(gamma, cfg, 1.0, -1.0)
}

/// Same with explicit curve signs (equal signs give the forced-equal case).
pub fn tv_two_points_signs(gamma: f64, cfg: &TvConfig, sign0: f64, sign1: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return invalid("gamma must lie in (0, 1]");
    }
    let f1 = F1::new(cfg.delta)?;
    let q = QNoise::new(cfg.c)?;
    let half = cfg.half_width / cfg.c + cfg.alpha * 2.0;
    let ys: Vec<f64> =
        (0..cfg.grid_points).map(|k| -half + 2.0 * half * k as f64 / (cfg.grid_points - 1) as f64).collect();
    let dy = 2.0 * half / (cfg.grid_points - 1) as f64;
    let amp = 0.5 * cfg.alpha * gamma;
    let p0 = convolved_density(cfg, &f1, &q, &ys, |u| sign0 * amp * (u / gamma).cos());
    let p1 = convolved_density(cfg, &f1, &q, &ys, |u| sign1 * amp * (u / gamma).cos());
    Ok(0.5 * (p0 - p1).iter().map(|v| v.abs()).sum::<f64>() * dy * dy)
}
