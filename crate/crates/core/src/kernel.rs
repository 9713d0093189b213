//! The band-limited radial kernel `psi_A`: bump `u_A`, its self-convolution,
//! the tabulated radial profile, and the tabulated D-dimensional Fourier transform.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{norm, GridSpec};
use crate::quad::{composite, Rule1d};

const CACHE_MAGIC: &[u8; 4] = b"PSIK";
const CACHE_VERSION: u8 = 1;

/// Number of radius nodes in the profile and Fourier tables.
pub const TABLE_NODES: usize = 4096;
/// Fourier table extends to `1 + FOURIER_MARGIN`.
pub const FOURIER_MARGIN: f64 = 0.05;
/// Default shape parameter.
pub const DEFAULT_A: f64 = 1.0;
/// Default relative tail tolerance for choosing `R_cut`.
pub const DEFAULT_TOL: f64 = 1e-8;

/// `u_A(y) = exp(-1/(1-2y)^A - 1/(1+2y)^A)` on `(-1/2, 1/2)`, zero elsewhere.
pub fn bump_u(a: f64, y: f64) -> f64 {
    if !(y.abs() < 0.5) {
        return 0.0;
    }
    let p = 1.0 - 2.0 * y;
    let q = 1.0 + 2.0 * y;
    (-(p.powf(-a)) - q.powf(-a)).exp()
}

/// Tabulated self-convolution `(u_A * u_A)` on a 1-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl Tabulated {
    /// Piecewise-linear interpolation; zero outside the grid.
    pub fn eval(&self, t: f64) -> f64 {
        let lo = self.grid.lower[0];
        let hi = self.grid.upper[0];
        if t < lo || t > hi {
            return 0.0;
        }
        interp(&self.values, lo, hi, t)
    }
}

/// Four-point Lagrange (cubic) interpolation on an equispaced table.
fn interp(values: &[f64], lo: f64, hi: f64, x: f64) -> f64 {
    let n = values.len();
    let pos = (x - lo) / (hi - lo) * (n - 1) as f64;
    if n < 4 {
        let k = (pos.floor() as usize).min(n - 2);
        let f = pos - k as f64;
        return values[k] * (1.0 - f) + values[k + 1] * f;
    }
    let k = (pos.floor() as usize).clamp(1, n - 3);
    let f = pos - k as f64;
    let (y0, y1, y2, y3) = (values[k - 1], values[k], values[k + 1], values[k + 2]);
    let w0 = -f * (f - 1.0) * (f - 2.0) / 6.0;
    let w1 = (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0;
    let w2 = -(f + 1.0) * f * (f - 2.0) / 2.0;
    let w3 = (f + 1.0) * f * (f - 1.0) / 6.0;
    w0 * y0 + w1 * y1 + w2 * y2 + w3 * y3
}

/// Single value of `(u_A * u_A)(t)` by composite Gauss-Legendre quadrature.
pub fn self_convolve_at(a: f64, t: f64) -> f64 {
    if !(t.abs() < 1.0) {
        return 0.0;
    }
    let lo = (-0.5f64).max(t - 0.5);
    let hi = 0.5f64.min(t + 0.5);
    composite(lo, hi, 64, 16).integrate(|s| bump_u(a, s) * bump_u(a, t - s))
}

/// `(u_A * u_A)` on every point of a 1-D `grid` covering `[-1, 1]`.
pub fn self_convolve_u(a: f64, grid: &GridSpec) -> Result<Tabulated> {
    if !(a > 0.0) {
        return invalid("A must be positive");
    }
    if grid.dim() != 1 || grid.lower[0] > -1.0 || grid.upper[0] < 1.0 {
        return invalid("self-convolution grid must be one-dimensional and cover [-1, 1]");
    }
    let values = grid.axis(0).into_iter().map(|t| self_convolve_at(a, t)).collect();
    Ok(Tabulated { grid: grid.clone(), values })
}

/// Derived diagnostics of the kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDiagnostics {
    /// Radius of the ball on which `psi_A >= d_a`.
    pub c_a: f64,
    /// Lower bound of `psi_A` on the ball of radius `c_a`.
    pub d_a: f64,
    /// Fitted exponent of the envelope `psi_A(r) <= C exp(-beta r^{A/(A+1)})`.
    pub beta: f64,
    /// `max_r log psi_A(r) + beta r^{A/(A+1)}` over the table.
    pub log_envelope_const: f64,
    /// `max |F[psi_A]|` over radii in `[1 + margin, 2]`, relative to `F[psi_A](0)`.
    pub out_of_ball_rel: f64,
    /// Minimum of the Fourier table.
    pub fourier_min: f64,
    /// `int ||x||^2 psi_A(x) dx`.
    pub second_moment: f64,
    /// `||u_A * u_A||_2` in one dimension.
    pub uu_l2: f64,
    /// `(u_A * u_A)(0)`.
    pub uu_zero: f64,
}

/// Tabulated isotropic kernel `psi_A` in dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialKernel {
    pub a: f64,
    pub dim: usize,
    pub tol: f64,
    /// Normalization constant `I(A)` (depends on `dim`).
    pub normalization: f64,
    pub r_cut: f64,
    pub margin: f64,
    /// `psi_A(r)` on `TABLE_NODES` equispaced radii in `[0, r_cut]`.
    pub profile: Vec<f64>,
    /// `F[psi_A](k)` on `TABLE_NODES` equispaced radii in `[0, 1 + margin]`.
    pub fourier: Vec<f64>,
    pub diagnostics: KernelDiagnostics,
}

/// Inverse Fourier transform of the bump, `(1/pi) int_0^{1/2} cos(t r) u_A(t) dt`.
struct BumpTransform {
    rule: Rule1d,
    u: Vec<f64>,
}

impl BumpTransform {
    fn new(a: f64, r_max: f64) -> Self {
        // roughly six nodes per oscillation of cos(t r) over t in [0, 1/2]
        let panels = ((r_max / (2.0 * PI)).ceil() as usize).max(32);
        let rule = composite(0.0, 0.5, panels, 16);
        let u = rule.nodes.iter().map(|&t| bump_u(a, t)).collect();
        Self { rule, u }
    }

    fn eval(&self, r: f64) -> f64 {
        let s: f64 = self
            .rule
            .nodes
            .iter()
            .zip(&self.rule.weights)
            .zip(&self.u)
            .map(|((&t, &w), &u)| w * u * (t * r).cos())
            .sum();
        s / PI
    }

    /// Unnormalized profile `2 pi v(r)^2`, which equals `F^{-1}[u*u](r)`.
    fn profile(&self, r: f64) -> f64 {
        let v = self.eval(r);
        2.0 * PI * v * v
    }
}

fn sphere_area(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!("dimension validated"),
    }
}

/// Radial integral kernel for the D-dimensional Fourier transform of a radial function.
fn fourier_weight(dim: usize, k: f64, r: f64) -> f64 {
    match dim {
        1 => 2.0 * (k * r).cos(),
        2 => 2.0 * PI * r * libm::j0(k * r),
        3 => {
            let x = k * r;
            let sinc = if x.abs() < 1e-8 { 1.0 - x * x / 6.0 } else { x.sin() / x };
            4.0 * PI * r * r * sinc
        }
        _ => unreachable!("dimension validated"),
    }
}

impl RadialKernel {
    /// Builds and tabulates `psi_A` in dimension `dim` (1, 2 or 3) with relative tail tolerance `tol`.
    pub fn build(a: f64, dim: usize, tol: f64) -> Result<Self> {
        if !(a > 0.0) {
            return invalid("A must be positive");
        }
        if !(1..=3).contains(&dim) {
            return invalid("kernel dimension must be 1, 2 or 3");
        }
        if !(tol > 0.0 && tol < 1.0) {
            return invalid("kernel tolerance must lie in (0, 1)");
        }
        let (r_cut, bt) = find_r_cut(a, tol)?;

        // radial quadrature on [0, r_cut]; panels of width about 1/2
        let panels = ((2.0 * r_cut).ceil() as usize).max(64);
        let rule = composite(0.0, r_cut, panels, 8);
        let raw: Vec<f64> = rule.nodes.iter().map(|&r| bt.profile(r)).collect();
        let area = sphere_area(dim);
        let mass: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .zip(&raw)
            .map(|((&r, &w), &p)| w * p * area * r.powi(dim as i32 - 1))
            .sum();
        let normalization = 1.0 / mass;

        let profile: Vec<f64> = (0..TABLE_NODES)
            .map(|k| normalization * bt.profile(r_cut * k as f64 / (TABLE_NODES - 1) as f64))
            .collect();

        let margin = FOURIER_MARGIN;
        let k_max = 1.0 + margin;
        let transform = |k: f64| -> f64 {
            rule.nodes
                .iter()
                .zip(&rule.weights)
                .zip(&raw)
                .map(|((&r, &w), &p)| w * p * fourier_weight(dim, k, r))
                .sum::<f64>()
                * normalization
        };
        let fourier: Vec<f64> =
            (0..TABLE_NODES).map(|j| transform(k_max * j as f64 / (TABLE_NODES - 1) as f64)).collect();

        let peak = fourier[0];
        let out_of_ball_rel = (0..=200)
            .map(|j| transform(k_max + (2.0 - k_max) * j as f64 / 200.0).abs())
            .fold(0.0, f64::max)
            / peak;
        let fourier_min = fourier.iter().copied().fold(f64::INFINITY, f64::min);
        let second_moment: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .zip(&raw)
            .map(|((&r, &w), &p)| w * p * area * r.powi(dim as i32 + 1))
            .sum::<f64>()
            * normalization;

        let uu_rule = composite(-1.0, 1.0, 64, 16);
        let uu_l2 = uu_rule.integrate(|t| self_convolve_at(a, t).powi(2)).sqrt();
        let uu_zero = self_convolve_at(a, 0.0);

        let (c_a, d_a) = ball_lower_bound(&profile, r_cut);
        let (beta, log_envelope_const) = fit_decay(&profile, r_cut, a);

        Ok(Self {
            a,
            dim,
            tol,
            normalization,
            r_cut,
            margin,
            profile,
            fourier,
            diagnostics: KernelDiagnostics {
                c_a,
                d_a,
                beta,
                log_envelope_const,
                out_of_ball_rel,
                fourier_min,
                second_moment,
                uu_l2,
                uu_zero,
            },
        })
    }

    /// `psi_A(r)` at radius `r` (bandwidth one).
    pub fn profile_at(&self, r: f64) -> f64 {
        if r > self.r_cut {
            return 0.0;
        }
        interp(&self.profile, 0.0, self.r_cut, r).max(0.0)
    }

    /// `psi_{A,h}(x) = h^{-D} psi_A(||x|| / h)`.
    pub fn eval_psi(&self, h: f64, x: &[f64]) -> f64 {
        self.profile_at(norm(x) / h) / h.powi(self.dim as i32)
    }

    /// `F[psi_A]` at radius `k`; zero beyond `1 + margin`.
    pub fn fourier_at(&self, k: f64) -> f64 {
        let k_max = 1.0 + self.margin;
        if k >= k_max {
            return 0.0;
        }
        interp(&self.fourier, 0.0, k_max, k)
    }

    /// `F[psi_A](t)` for a frequency vector `t`.
    pub fn eval_fourier_psi(&self, t: &[f64]) -> f64 {
        self.fourier_at(norm(t))
    }

    /// `||psi_{A,h}||_2 = ||psi_A||_2 h^{-D/2}`, with the norm taken by radial quadrature of the table.
    pub fn l2_norm(&self, h: f64) -> f64 {
        let rule = composite(0.0, self.r_cut, 512, 8);
        let area = sphere_area(self.dim);
        let s = rule.integrate(|r| self.profile_at(r).powi(2) * area * r.powi(self.dim as i32 - 1));
        s.sqrt() / h.powf(self.dim as f64 / 2.0)
    }

    /// Writes the tables to a binary cache file.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.push(CACHE_VERSION);
        for v in [self.a, self.tol, self.normalization, self.r_cut, self.margin] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let diag = serde_json::to_vec(&self.diagnostics).expect("diagnostics serialize");
        buf.extend_from_slice(&(diag.len() as u32).to_le_bytes());
        buf.extend_from_slice(&diag);
        for table in [&self.profile, &self.fourier] {
            buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
            for v in table.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)
    }

    /// Reads a cache file; returns `None` unless it matches `(a, dim, tol)` and the current version.
    pub fn load(path: &Path, a: f64, dim: usize, tol: f64) -> Option<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path).ok()?.read_to_end(&mut buf).ok()?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != CACHE_MAGIC || cur.take(1)?[0] != CACHE_VERSION {
            return None;
        }
        let ka = cur.f64()?;
        let ktol = cur.f64()?;
        let normalization = cur.f64()?;
        let r_cut = cur.f64()?;
        let margin = cur.f64()?;
        let kdim = cur.u32()? as usize;
        if ka != a || ktol != tol || kdim != dim {
            return None;
        }
        let dlen = cur.u32()? as usize;
        let diagnostics = serde_json::from_slice(cur.take(dlen)?).ok()?;
        let mut tables = Vec::new();
        for _ in 0..2 {
            let len = cur.u32()? as usize;
            let mut t = Vec::with_capacity(len);
            for _ in 0..len {
                t.push(cur.f64()?);
            }
            tables.push(t);
        }
        let fourier = tables.pop()?;
        let profile = tables.pop()?;
        Some(Self { a, dim, tol, normalization, r_cut, margin, profile, fourier, diagnostics })
    }

    /// Loads from `path` when it holds a matching cache, otherwise builds and stores it.
    pub fn build_cached(a: f64, dim: usize, tol: f64, path: Option<&Path>) -> Result<Self> {
        if let Some(p) = path {
            if let Some(k) = Self::load(p, a, dim, tol) {
                return Ok(k);
            }
        }
        let k = Self::build(a, dim, tol)?;
        if let Some(p) = path {
            // the cache is a pure speedup, so a failed write is ignored
            let _ = k.save(p);
        }
        Ok(k)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
}

/// Smallest radius beyond which the profile stays below `tol` times its peak,
/// confirmed over a window at least as long as the radius itself.
fn find_r_cut(a: f64, tol: f64) -> Result<(f64, BumpTransform)> {
    let mut r_max = 256.0;
    while r_max <= 16384.0 {
        let bt = BumpTransform::new(a, r_max);
        let step = 0.05;
        let count = (r_max / step) as usize + 1;
        let values: Vec<f64> = (0..count).map(|k| bt.profile(k as f64 * step)).collect();
        let peak = values[0];
        let mut tail_max = 0.0_f64;
        let mut cut = None;
        for k in (0..count).rev() {
            tail_max = tail_max.max(values[k]);
            if tail_max >= tol * peak {
                cut = Some((k + 1).min(count - 1));
                break;
            }
        }
        if let Some(k) = cut {
            let r = k as f64 * step;
            if r <= 0.5 * r_max {
                return Ok((r, bt));
            }
        }
        r_max *= 2.0;
    }
    Err(Error::KernelTailTruncation)
}

/// Half-maximum radius `c_A` and the minimum of the profile on `[0, c_A]`.
fn ball_lower_bound(profile: &[f64], r_cut: f64) -> (f64, f64) {
    let peak = profile[0];
    let dr = r_cut / (profile.len() - 1) as f64;
    let k = profile.iter().position(|&p| p < 0.5 * peak).unwrap_or(profile.len() - 1);
    let k = k.saturating_sub(1);
    let d = profile[..=k].iter().copied().fold(f64::INFINITY, f64::min);
    (k as f64 * dr, d)
}

/// Least-squares fit of `log psi = c - beta r^{A/(A+1)}` over the local maxima of the
/// profile beyond its first local minimum.
fn fit_decay(profile: &[f64], r_cut: f64, a: f64) -> (f64, f64) {
    let dr = r_cut / (profile.len() - 1) as f64;
    let e = a / (a + 1.0);
    let first_min = (1..profile.len() - 1)
        .find(|&k| profile[k] <= profile[k - 1] && profile[k] <= profile[k + 1])
        .unwrap_or(1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in first_min.max(1)..profile.len() - 1 {
        if profile[k] > 0.0 && profile[k] >= profile[k - 1] && profile[k] >= profile[k + 1] {
            xs.push((k as f64 * dr).powf(e));
            ys.push(profile[k].ln());
        }
    }
    let beta = if xs.len() >= 2 {
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        -sxy / sxx
    } else {
        0.0
    };
    let bound = profile
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(k, &p)| p.ln() + beta * (k as f64 * dr).powf(e))
        .fold(f64::NEG_INFINITY, f64::max);
    (beta, bound)
}
