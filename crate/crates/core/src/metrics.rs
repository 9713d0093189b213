//! Shared domain types and set metrics on finite point clouds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Multi-index `i = (i_1, ..., i_D)` with cached total degree `|i|_1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex {
    entries: Vec<u32>,
    total_degree: u32,
}

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Self {
        let total_degree = entries.iter().sum();
        Self { entries, total_degree }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![0; dim])
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn total_degree(&self) -> u32 {
        self.total_degree
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    /// Product of `i_a!` over all axes.
    pub fn factorial(&self) -> f64 {
        self.entries
            .iter()
            .map(|&k| (1..=k).map(f64::from).product::<f64>())
            .product()
    }
}

/// All multi-indices of dimension `dim` with total degree at most `max_degree`,
/// ordered by total degree and then lexicographically (first axis largest first).
pub fn multi_indices(dim: usize, max_degree: u32) -> Vec<MultiIndex> {
    fn fill(dim: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
        if prefix.len() + 1 == dim {
            prefix.push(remaining);
            out.push(MultiIndex::new(prefix.clone()));
            prefix.pop();
            return;
        }
        for k in (0..=remaining).rev() {
            prefix.push(k);
            fill(dim, remaining - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for deg in 0..=max_degree {
        let mut prefix = Vec::with_capacity(dim);
        fill(dim, deg, &mut prefix, &mut out);
    }
    out
}

/// Observations `Y_1, ..., Y_n` in `R^D` with the block split `D = d1 + d2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    data: Vec<f64>,
    n: usize,
    d1: usize,
    d2: usize,
}

impl Sample {
    /// `data` holds `n` rows of length `d1 + d2` in row-major order.
    pub fn new(data: Vec<f64>, d1: usize, d2: usize) -> Result<Self> {
        if d1 == 0 || d2 == 0 {
            return invalid("sample blocks need d1 >= 1 and d2 >= 1");
        }
        let dim = d1 + d2;
        if data.is_empty() || data.len() % dim != 0 {
            return invalid("sample needs n >= 1 rows of length d1 + d2");
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("sample contains non-finite values");
        }
        Ok(Self { n: data.len() / dim, data, d1, d2 })
    }

    pub fn from_rows(rows: &[Vec<f64>], d1: usize, d2: usize) -> Result<Self> {
        if rows.iter().any(|r| r.len() != d1 + d2) {
            return invalid("row length differs from d1 + d2");
        }
        Self::new(rows.concat(), d1, d2)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d1(&self) -> usize {
        self.d1
    }
    pub fn d2(&self) -> usize {
        self.d2
    }
    pub fn dim(&self) -> usize {
        self.d1 + self.d2
    }
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim())
    }
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_point_set(&self) -> PointSet {
        PointSet::from_flat(self.data.clone(), self.dim()).expect("sample rows are valid points")
    }

    /// Translates every observation by `shift`.
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.dim()) {
            for (v, s) in row.iter_mut().zip(shift) {
                *v += s;
            }
        }
        Self { data, ..*self }
    }
}

/// Regular lattice: per-axis bounds and point counts, endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != counts.len() || lower.is_empty() {
            return invalid("grid axes disagree in length");
        }
        for a in 0..lower.len() {
            if !(upper[a] > lower[a]) || !lower[a].is_finite() || !upper[a].is_finite() {
                return invalid(format!("grid axis {a} needs upper > lower"));
            }
            if counts[a] < 2 {
                return invalid(format!("grid axis {a} needs at least 2 points"));
            }
        }
        Ok(Self { lower, upper, counts })
    }

    /// Same bounds and count on every axis.
    pub fn cube(dim: usize, lower: f64, upper: f64, count: usize) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim], vec![count; dim])
    }

    /// Bounding box of `points`, inflated by `inflate` times its extent on each side
    /// (a degenerate axis gets a unit extent).
    pub fn around(points: &PointSet, inflate: f64, count: usize) -> Result<Self> {
        let dim = points.dim();
        let mut lower = vec![f64::INFINITY; dim];
        let mut upper = vec![f64::NEG_INFINITY; dim];
        for p in points.iter() {
            for a in 0..dim {
                lower[a] = lower[a].min(p[a]);
                upper[a] = upper[a].max(p[a]);
            }
        }
        for a in 0..dim {
            let ext = (upper[a] - lower[a]).max(1e-12);
            let ext = if ext < 1e-9 { 1.0 } else { ext };
            lower[a] -= inflate * ext;
            upper[a] += inflate * ext;
        }
        Self::new(lower, upper, vec![count; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
    pub fn spacing(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|a| (self.upper[a] - self.lower[a]) / (self.counts[a] - 1) as f64)
            .collect()
    }
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }
    pub fn axis(&self, a: usize) -> Vec<f64> {
        let h = (self.upper[a] - self.lower[a]) / (self.counts[a] - 1) as f64;
        (0..self.counts[a]).map(|k| self.lower[a] + k as f64 * h).collect()
    }
    /// Point with flat index `idx` (last axis varies fastest).
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; dim];
        for a in (0..dim).rev() {
            let k = idx % self.counts[a];
            idx /= self.counts[a];
            let h = (self.upper[a] - self.lower[a]) / (self.counts[a] - 1) as f64;
            out[a] = self.lower[a] + k as f64 * h;
        }
        out
    }
    pub fn points(&self) -> PointSet {
        let dim = self.dim();
        let mut flat = Vec::with_capacity(self.len() * dim);
        for i in 0..self.len() {
            flat.extend(self.point(i));
        }
        PointSet::from_flat(flat, dim).expect("grid points are finite")
    }
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(a, &v)| v >= self.lower[a] - 1e-12 && v <= self.upper[a] + 1e-12)
    }
}

/// Finite point cloud in `R^D`, optionally tagged with the grid it was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

impl PointSet {
    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return invalid("point data length is not a multiple of the dimension");
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("point set contains non-finite coordinates");
        }
        Ok(Self { dim, data, grid: None })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(1);
        if points.iter().any(|p| p.len() != dim) {
            return invalid("points disagree in dimension");
        }
        Self::from_flat(points.concat(), dim)
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new(), grid: None }
    }

    pub fn with_grid(mut self, grid: GridSpec) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.iter().map(|p| p.to_vec()).collect()
    }

    /// Subset of points satisfying `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&[f64]) -> bool) -> Self {
        let mut data = Vec::new();
        for p in self.iter() {
            if keep(p) {
                data.extend_from_slice(p);
            }
        }
        Self { dim: self.dim, data, grid: self.grid.clone() }
    }

    pub fn restrict(&self, k: &Window) -> Self {
        self.filter(|p| k.contains(p))
    }

    pub fn map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.iter() {
            data.extend(f(p));
        }
        Self { dim: self.dim, data, grid: None }
    }
}

/// Truncation window `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Window {
    All,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Window {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Window::All => true,
            Window::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi),
            Window::Ball { center, radius } => dist2(x, center) <= radius * radius,
        }
    }

    /// Largest distance between two points of the window (infinite for `All`).
    pub fn diameter(&self) -> f64 {
        match self {
            Window::All => f64::INFINITY,
            Window::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt()
            }
            Window::Ball { radius, .. } => 2.0 * radius,
        }
    }

    pub fn from_grid(grid: &GridSpec) -> Self {
        Window::Box { lower: grid.lower.clone(), upper: grid.upper.clone() }
    }
}

/// Probability measure with finitely many atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    support: PointSet,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Normalizes non-negative `weights` to sum to one.
    pub fn new(support: PointSet, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptySet);
        }
        if weights.len() != support.len() {
            return invalid("weights and support differ in length");
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("weights must be finite and non-negative");
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return invalid("weights sum to zero");
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { support, weights })
    }

    pub fn uniform(support: PointSet) -> Result<Self> {
        let n = support.len();
        Self::new(support, vec![1.0; n])
    }

    pub fn dirac(x: &[f64]) -> Self {
        Self::new(PointSet::from_flat(x.to_vec(), x.len()).expect("finite point"), vec![1.0])
            .expect("single atom")
    }

    pub fn support(&self) -> &PointSet {
        &self.support
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    /// Drops atoms with zero weight.
    pub fn pruned(&self) -> Self {
        let mut data = Vec::new();
        let mut w = Vec::new();
        for (p, &wi) in self.support.iter().zip(&self.weights) {
            if wi > 0.0 {
                data.extend_from_slice(p);
                w.push(wi);
            }
        }
        Self::new(PointSet::from_flat(data, self.dim()).expect("subset"), w).expect("non-empty")
    }
}

#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

/// Distance from `x` to the nearest point of `a` (infinite if `a` is empty).
pub fn dist_to_set(a: &PointSet, x: &[f64]) -> f64 {
    a.iter().map(|p| dist2(p, x)).fold(f64::INFINITY, f64::min).sqrt()
}

/// Largest distance from a point of `a` to the set `b`, with an early exit once
/// a point of `b` is closer than the running maximum.
fn directed_hausdorff(a: &PointSet, b: &PointSet) -> f64 {
    let chunk = 256;
    let maxima: Vec<f64> = a
        .as_flat()
        .par_chunks(chunk * a.dim())
        .map(|block| {
            let mut best = 0.0_f64;
            for p in block.chunks_exact(a.dim()) {
                let mut nearest = f64::INFINITY;
                for q in b.iter() {
                    let d = dist2(p, q);
                    if d < nearest {
                        nearest = d;
                        if nearest <= best {
                            break;
                        }
                    }
                }
                best = best.max(nearest);
            }
            best
        })
        .collect();
    maxima.into_iter().fold(0.0, f64::max).sqrt()
}

/// Hausdorff distance between two finite point sets.
pub fn hausdorff(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(directed_hausdorff(a, b).max(directed_hausdorff(b, a)))
}

/// Hausdorff distance between the parts of `a` and `b` lying in `k`.
pub fn truncated_hausdorff(a: &PointSet, b: &PointSet, k: &Window) -> Result<f64> {
    let ra = a.restrict(k);
    let rb = b.restrict(k);
    if ra.is_empty() || rb.is_empty() {
        return Err(Error::EmptyRestriction);
    }
    hausdorff(&ra, &rb)
}

/// Whether `x` lies in the closed `eta`-offset of `a`.
pub fn offset_contains(a: &PointSet, eta: f64, x: &[f64]) -> Result<bool> {
    if a.is_empty() {
        return Err(Error::EmptySet);
    }
    if !(eta >= 0.0) {
        return invalid("offset radius must be non-negative");
    }
    let e2 = eta * eta;
    Ok(a.iter().any(|p| dist2(p, x) <= e2))
}

/// Largest pairwise distance.
pub fn diameter(a: &PointSet) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = a.len();
    let best = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = a.get(i);
            (i + 1..n).map(|j| dist2(p, a.get(j))).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    Ok(best.sqrt())
}

/// Euclidean norm.
#[inline]
pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Median of a slice (mean of the two central values for even length).
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile (type 7).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}
