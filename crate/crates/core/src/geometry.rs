//! Slice-based identifiability checks, empirical standardness and the random
//! piecewise-affine perturbation of a mirrored Kuhn tiling.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::metrics::{dist2, PointSet, Window};

/// Search grids for the slice conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceCheckConfig {
    pub delta_grid: Vec<f64>,
    pub epsilon_grid: Vec<f64>,
    pub d1: usize,
    pub d2: usize,
    /// A slice with fewer points (capped at the cloud size) is ignored.
    #[serde(default = "default_min_slice")]
    pub min_slice_count: usize,
}

fn default_min_slice() -> usize {
    2
}

impl SliceCheckConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.delta_grid.is_empty() || self.epsilon_grid.is_empty() {
            return invalid("slice grids must be non-empty");
        }
        if self.delta_grid.iter().chain(&self.epsilon_grid).any(|&v| !(v > 0.0)) {
            return invalid("slice grid values must be positive");
        }
        if self.d1 == 0 || self.d2 == 0 || self.d1 + self.d2 != dim {
            return invalid("block split does not match the dimension");
        }
        Ok(())
    }
}

/// Outcome for one `Delta` and one direction (1: slice in block 1, measured in block 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub delta: f64,
    pub direction: u8,
    pub found: bool,
    /// Index of the anchor point and the slice half-width.
    pub witness: Option<(usize, f64)>,
    /// Smallest slice diameter seen over anchors and widths.
    pub best_diameter: f64,
}

fn block_diameter(pts: &[&[f64]]) -> f64 {
    if pts.len() < 2 {
        return 0.0;
    }
    if pts[0].len() == 1 {
        let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
        return hi - lo;
    }
    let mut best = 0.0_f64;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.max(dist2(pts[i], pts[j]));
        }
    }
    best.sqrt()
}

/// Smallest projected-slice diameter over anchors for each width, with its anchor.
fn best_slices(points: &PointSet, cfg: &SliceCheckConfig, direction: u8) -> Vec<(f64, usize, f64)> {
    let (a, b) = if direction == 1 { (0..cfg.d1, cfg.d1..cfg.d1 + cfg.d2) } else { (cfg.d1..cfg.d1 + cfg.d2, 0..cfg.d1) };
    let min_count = cfg.min_slice_count.min(points.len()).max(1);
    let mut eps = cfg.epsilon_grid.clone();
    eps.sort_by(f64::total_cmp);
    eps.iter()
        .map(|&e| {
            let e2 = e * e;
            let per_anchor: Vec<(f64, usize)> = (0..points.len())
                .into_par_iter()
                .filter_map(|i| {
                    let x = &points.get(i)[a.clone()];
                    let slice: Vec<&[f64]> = points
                        .iter()
                        .filter(|p| dist2(&p[a.clone()], x) <= e2)
                        .map(|p| &p[b.clone()])
                        .collect();
                    (slice.len() >= min_count).then(|| (block_diameter(&slice), i))
                })
                .collect();
            let (d, i) = per_anchor
                .into_iter()
                .fold((f64::INFINITY, usize::MAX), |acc, v| if v.0 < acc.0 { v } else { acc });
            (d, i, e)
        })
        .collect()
}

/// For every `Delta` and both directions, looks for an anchor and width whose slice,
/// projected on the other block, has diameter below `Delta`.
pub fn check_slices(points: &PointSet, cfg: &SliceCheckConfig) -> Result<Vec<SliceReport>> {
    cfg.validate(points.dim())?;
    let mut out = Vec::new();
    for direction in [1u8, 2] {
        let best = if points.is_empty() { Vec::new() } else { best_slices(points, cfg, direction) };
        let overall = best.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
        for &delta in &cfg.delta_grid {
            let witness = best.iter().find(|b| b.0 < delta).map(|b| (b.1, b.2));
            out.push(SliceReport { delta, direction, found: witness.is_some(), witness, best_diameter: overall });
        }
    }
    Ok(out)
}

/// Fitted `(a, d)` with `G(B(x, r)) >= a r^d` on the tested anchors and radii.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardness {
    pub a_hat: f64,
    pub d_hat: f64,
}

/// Regresses `log min_x G(B(x, r))` on `log r` over `r_grid`, anchors being the points inside `k`.
pub fn check_standardness(points: &PointSet, weights: &[f64], r_grid: &[f64], k: &Window) -> Result<Standardness> {
    if points.is_empty() {
        return Err(Error::EmptySet);
    }
    if weights.len() != points.len() {
        return invalid("weights and points differ in length");
    }
    if r_grid.len() < 2 || r_grid.iter().any(|&r| !(r > 0.0)) {
        return invalid("need at least two positive radii");
    }
    let total: f64 = weights.iter().sum();
    let anchors: Vec<usize> = (0..points.len()).filter(|&i| k.contains(points.get(i))).collect();
    if anchors.is_empty() {
        return Err(Error::EmptyRestriction);
    }
    let min_mass: Vec<f64> = r_grid
        .iter()
        .map(|&r| {
            let r2 = r * r;
            anchors
                .par_iter()
                .map(|&i| {
                    let x = points.get(i);
                    points.iter().zip(weights).filter(|(p, _)| dist2(p, x) <= r2).map(|(_, w)| w).sum::<f64>() / total
                })
                .reduce(|| f64::INFINITY, f64::min)
        })
        .collect();
    let xs: Vec<f64> = r_grid.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = min_mass.iter().map(|m| m.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let d_hat = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a_hat = r_grid.iter().zip(&min_mass).map(|(r, m)| m / r.powf(d_hat)).fold(f64::INFINITY, f64::min);
    Ok(Standardness { a_hat, d_hat })
}

/// Randomly displaced mirrored Kuhn tiling of side `delta`. Vertex displacements are
/// uniform on `[-r, r]^D` and generated on demand from `(seed, lattice coordinates)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedTiling {
    pub dim: usize,
    pub delta: f64,
    pub r: f64,
    pub seed: u64,
}

/// Kuhn simplex containing `z`: lattice vertices and barycentric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Located {
    pub vertices: Vec<Vec<i64>>,
    pub weights: Vec<f64>,
}

/// Non-degeneracy radius for the unit Kuhn tiling in dimension `dim`, already halved.
pub fn r0(dim: usize) -> f64 {
    static CACHE: [OnceLock<f64>; 4] = [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];
    match CACHE.get(dim) {
        Some(cell) => *cell.get_or_init(|| compute_r0(dim)),
        None => compute_r0(dim),
    }
}

fn compute_r0(dim: usize) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    // volume of a displaced simplex is affine in each vertex coordinate, so its
    // minimum over the displacement box sits at a corner
    let ok = |r: f64| kuhn_permutations(dim).iter().all(|perm| min_corner_volume(dim, perm, r) > 0.0);
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * lo
}

fn kuhn_permutations(dim: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..dim).collect();
    fn rec(k: usize, perm: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == perm.len() {
            out.push(perm.clone());
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            rec(k + 1, perm, out);
            perm.swap(k, i);
        }
    }
    rec(0, &mut perm, &mut out);
    out
}

fn kuhn_vertices(perm: &[usize]) -> Vec<Vec<f64>> {
    let dim = perm.len();
    let mut v = vec![0.0; dim];
    let mut out = vec![v.clone()];
    for &a in perm {
        v[a] = 1.0;
        out.push(v.clone());
    }
    out
}

fn signed_volume(vs: &[Vec<f64>]) -> f64 {
    let dim = vs.len() - 1;
    let m = DMatrix::from_fn(dim, dim, |i, j| vs[j + 1][i] - vs[0][i]);
    m.determinant()
}

fn min_corner_volume(dim: usize, perm: &[usize], r: f64) -> f64 {
    let base = kuhn_vertices(perm);
    let sign = signed_volume(&base).signum();
    let bits = dim * (dim + 1);
    let mut best = f64::INFINITY;
    for mask in 0u64..(1u64 << bits) {
        let vs: Vec<Vec<f64>> = base
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.iter()
                    .enumerate()
                    .map(|(a, &x)| x + if mask >> (j * dim + a) & 1 == 1 { r } else { -r })
                    .collect()
            })
            .collect();
        best = best.min(sign * signed_volume(&vs));
    }
    best
}

impl PerturbedTiling {
    /// Checks `r <= r0(D) * delta`.
    pub fn new(dim: usize, delta: f64, r: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        if !(delta > 0.0) {
            return invalid("tile side must be positive");
        }
        if !(r >= 0.0) {
            return invalid("perturbation radius must be non-negative");
        }
        if dim * (dim + 1) > 20 {
            return invalid("non-degeneracy radius is only validated up to D = 3");
        }
        if r > r0(dim) * delta {
            return Err(Error::PerturbationRadius);
        }
        Ok(Self { dim, delta, r, seed })
    }

    /// Displacement of lattice vertex `v`.
    pub fn displacement(&self, v: &[i64]) -> Vec<f64> {
        if self.r == 0.0 {
            return vec![0.0; self.dim];
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for c in v {
            h.update(c.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        (0..self.dim).map(|_| rng.random_range(-self.r..=self.r)).collect()
    }

    /// Simplex of the mirrored tiling containing `z`, with barycentric weights.
    pub fn locate(&self, z: &[f64]) -> Located {
        let dim = self.dim;
        let mut cell = vec![0i64; dim];
        let mut y = vec![0.0; dim];
        let mut mirrored = vec![false; dim];
        for a in 0..dim {
            let s = z[a] / self.delta;
            let k = s.floor();
            cell[a] = k as i64;
            mirrored[a] = cell[a].rem_euclid(2) == 1;
            let t = s - k;
            y[a] = if mirrored[a] { 1.0 - t } else { t };
        }
        // coordinates sorted decreasingly; ties keep axis order so the choice is deterministic
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.sort_by(|&i, &j| y[j].total_cmp(&y[i]).then(i.cmp(&j)));
        let mut weights = Vec::with_capacity(dim + 1);
        weights.push(1.0 - y[perm[0]]);
        for j in 0..dim - 1 {
            weights.push(y[perm[j]] - y[perm[j + 1]]);
        }
        weights.push(y[perm[dim - 1]]);
        let to_lattice = |local: &[i64]| -> Vec<i64> {
            (0..dim).map(|a| cell[a] + if mirrored[a] { 1 - local[a] } else { local[a] }).collect()
        };
        let mut local = vec![0i64; dim];
        let mut vertices = vec![to_lattice(&local)];
        for &a in &perm {
            local[a] = 1;
            vertices.push(to_lattice(&local));
        }
        Located { vertices, weights }
    }

    /// `f(z) = sum_i alpha_i (x_i + eps_i)` over the vertices of the simplex containing `z`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        if self.r == 0.0 {
            return z.to_vec();
        }
        let loc = self.locate(z);
        let mut out = z.to_vec();
        for (v, &w) in loc.vertices.iter().zip(&loc.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, e) in out.iter_mut().zip(self.displacement(v)) {
                *o += w * e;
            }
        }
        out
    }

    /// Affine map `z -> A z + b` of the simplex containing `z`.
    fn local_affine(&self, z: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let dim = self.dim;
        let loc = self.locate(z);
        let x: Vec<DVector<f64>> =
            loc.vertices.iter().map(|v| DVector::from_iterator(dim, v.iter().map(|&c| c as f64 * self.delta))).collect();
        let fx: Vec<DVector<f64>> = loc
            .vertices
            .iter()
            .zip(&x)
            .map(|(v, xv)| xv + DVector::from_vec(self.displacement(v)))
            .collect();
        let dx = DMatrix::from_fn(dim, dim, |i, j| x[j + 1][i] - x[0][i]);
        let df = DMatrix::from_fn(dim, dim, |i, j| fx[j + 1][i] - fx[0][i]);
        let inv = dx.try_inverse().ok_or_else(|| Error::Numerical("singular simplex".into()))?;
        let a = df * inv;
        let b = &fx[0] - &a * &x[0];
        Ok((a, b))
    }

    /// Solves `f(z) = w` by Newton steps on the piecewise-affine map, starting at `w`.
    pub fn invert(&self, w: &[f64]) -> Result<Vec<f64>> {
        let target = DVector::from_column_slice(w);
        let mut z = target.clone();
        for _ in 0..100 {
            let (a, b) = self.local_affine(z.as_slice())?;
            let next = a
                .lu()
                .solve(&(&target - &b))
                .ok_or_else(|| Error::Numerical("singular simplex".into()))?;
            let fz = DVector::from_vec(self.apply(next.as_slice()));
            z = next;
            if (&fz - &target).norm() <= 1e-12 * (1.0 + target.norm()) {
                return Ok(z.as_slice().to_vec());
            }
        }
        Err(Error::Numerical("perturbation inverse did not converge".into()))
    }

    /// Barycentric residual `|sum alpha_i x_i - z|` at `z`.
    pub fn barycentric_residual(&self, z: &[f64]) -> f64 {
        let loc = self.locate(z);
        let mut acc = vec![0.0; self.dim];
        for (v, &w) in loc.vertices.iter().zip(&loc.weights) {
            for a in 0..self.dim {
                acc[a] += w * v[a] as f64 * self.delta;
            }
        }
        dist2(&acc, z).sqrt()
    }
}

/// Per-trial outcome of the genericity experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenericityTrial {
    pub trial: usize,
    pub b1: bool,
    pub b2: bool,
    /// Largest displacement over the cloud.
    pub max_displacement: f64,
}

/// Settings for [`genericity_mc`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericityConfig {
    pub trials: usize,
    pub r: f64,
    pub d1: usize,
    /// Tile side of the tiling.
    #[serde(default = "default_tile")]
    pub delta: f64,
    #[serde(default = "default_tol_unique")]
    pub tol_unique: f64,
}

fn default_tile() -> f64 {
    1.0
}
fn default_tol_unique() -> f64 {
    1e-9
}

/// Seed of trial `t` derived from the master seed.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"genericity");
    h.update(seed.to_le_bytes());
    h.update((t as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn unique_max(points: &[Vec<f64>], axis: usize, tol: f64) -> bool {
    let top = points.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
    points.iter().filter(|p| p[axis] >= top - tol).count() == 1
}

/// Perturbs the cloud `trials` times and records whether the maximizers of the first
/// coordinate of each block are unique.
pub fn genericity_trials(points: &PointSet, cfg: &GenericityConfig, seed: u64) -> Result<Vec<GenericityTrial>> {
    if points.is_empty() {
        return Err(Error::EmptySet);
    }
    if cfg.trials == 0 {
        return invalid("trials must be at least 1");
    }
    if cfg.d1 == 0 || cfg.d1 >= points.dim() {
        return invalid("block split does not match the dimension");
    }
    let dim = points.dim();
    PerturbedTiling::new(dim, cfg.delta, cfg.r, seed)?;
    (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let tiling = PerturbedTiling::new(dim, cfg.delta, cfg.r, trial_seed(seed, t))?;
            let moved: Vec<Vec<f64>> = points.iter().map(|z| tiling.apply(z)).collect();
            let max_displacement =
                points.iter().zip(&moved).map(|(z, f)| dist2(z, f).sqrt()).fold(0.0, f64::max);
            Ok(GenericityTrial {
                trial: t,
                b1: unique_max(&moved, 0, cfg.tol_unique),
                b2: unique_max(&moved, cfg.d1, cfg.tol_unique),
                max_displacement,
            })
        })
        .collect()
}

/// Fraction of trials in which both maximizers are unique.
pub fn genericity_mc(points: &PointSet, cfg: &GenericityConfig, seed: u64) -> Result<f64> {
    let trials = genericity_trials(points, cfg, seed)?;
    Ok(trials.iter().filter(|t| t.b1 && t.b2).count() as f64 / trials.len() as f64)
}
