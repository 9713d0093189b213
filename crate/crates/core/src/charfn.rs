//! Characteristic-function estimation: the empirical CF, truncated analytic
//! functions, the contrast `M_n`, the coefficient class, and the constrained
//! contrast minimizer.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{multi_indices, DiscreteMeasure, MultiIndex, Sample};
use crate::quad::TensorRule;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// `i^k` for integer `k >= 0`.
pub fn i_pow(k: u32) -> Complex64 {
    match k % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => I,
        2 => Complex64::new(-1.0, 0.0),
        _ => -I,
    }
}

/// Empirical characteristic function `(1/n) sum_l exp(i t . Y_l)`.
pub fn empirical_cf(sample: &Sample, t: &[f64]) -> Complex64 {
    if t.iter().all(|&v| v == 0.0) {
        return Complex64::new(1.0, 0.0);
    }
    let mut s = Complex64::new(0.0, 0.0);
    for y in sample.rows() {
        let phase: f64 = t.iter().zip(y).map(|(a, b)| a * b).sum();
        s += Complex64::new(phase.cos(), phase.sin());
    }
    s / sample.n() as f64
}

/// Empirical CF at many frequencies, evaluated in parallel.
pub fn empirical_cf_many(sample: &Sample, ts: &[Vec<f64>]) -> Vec<Complex64> {
    ts.par_iter().map(|t| empirical_cf(sample, t)).collect()
}

/// Polynomial `sum_i c_i t^i` with `c_i = i^{|i|} a_i`, `a_i` real and `a_0 = 1`.
///
/// Storing the real numbers `a_i` makes `conj(phi(t)) = phi(-t)` hold for every real `t`.
/// For a characteristic function, `a_i = E[X^i] / i!`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedAnalytic {
    dim: usize,
    degree: u32,
    indices: Vec<MultiIndex>,
    params: Vec<f64>,
}

impl TruncatedAnalytic {
    /// The constant function 1 of the given degree (all other coefficients zero).
    pub fn one(dim: usize, degree: u32) -> Self {
        let indices = multi_indices(dim, degree);
        let mut params = vec![0.0; indices.len()];
        params[0] = 1.0;
        Self { dim, degree, indices, params }
    }

    /// From real parameters `a_i` in the order of [`multi_indices`]; `a_0` is forced to 1.
    pub fn from_params(dim: usize, degree: u32, mut params: Vec<f64>) -> Result<Self> {
        let indices = multi_indices(dim, degree);
        if params.len() != indices.len() {
            return invalid(format!(
                "expected {} coefficients for dimension {dim} and degree {degree}",
                indices.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return invalid("non-finite coefficient");
        }
        params[0] = 1.0;
        Ok(Self { dim, degree, indices, params })
    }

    /// From complex coefficients `c_i`; each must be `i^{|i|}` times a real number.
    pub fn from_coeffs(dim: usize, degree: u32, coeffs: &[(Vec<u32>, Complex64)]) -> Result<Self> {
        let mut phi = Self::one(dim, degree);
        for (entries, c) in coeffs {
            let idx = MultiIndex::new(entries.clone());
            if idx.dim() != dim || idx.total_degree() > degree {
                return invalid("coefficient index outside the degree range");
            }
            let a = c * i_pow(idx.total_degree()).conj();
            if a.im.abs() > 1e-12 * a.norm().max(1.0) {
                return invalid("coefficient breaks conjugate symmetry");
            }
            let pos = phi.position(&idx).expect("index enumerated");
            if pos == 0 && (a.re - 1.0).abs() > 1e-12 {
                return invalid("constant coefficient must be 1");
            }
            phi.params[pos] = a.re;
        }
        Ok(phi)
    }

    /// Truncated Taylor expansion of the CF of a discrete measure: `a_i = sum_j w_j x_j^i / i!`.
    pub fn from_measure(measure: &DiscreteMeasure, degree: u32) -> Self {
        let dim = measure.dim();
        let indices = multi_indices(dim, degree);
        let params = indices
            .iter()
            .map(|idx| {
                let m: f64 = measure
                    .support()
                    .iter()
                    .zip(measure.weights())
                    .map(|(x, w)| {
                        w * x
                            .iter()
                            .zip(idx.entries())
                            .map(|(v, &e)| v.powi(e as i32))
                            .product::<f64>()
                    })
                    .sum();
                m / idx.factorial()
            })
            .collect();
        Self { dim, degree, indices, params }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn degree(&self) -> u32 {
        self.degree
    }
    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn position(&self, idx: &MultiIndex) -> Option<usize> {
        self.indices.iter().position(|j| j == idx)
    }

    /// Complex coefficient `c_i`.
    pub fn coeff(&self, k: usize) -> Complex64 {
        i_pow(self.indices[k].total_degree()) * self.params[k]
    }

    pub fn coeffs(&self) -> Vec<Complex64> {
        (0..self.params.len()).map(|k| self.coeff(k)).collect()
    }

    /// `sum_i c_i prod_a t_a^{i_a}` at a complex argument.
    pub fn eval_complex(&self, t: &[Complex64]) -> Complex64 {
        let pows = axis_powers(t, self.degree);
        self.indices
            .iter()
            .enumerate()
            .map(|(k, idx)| {
                let mono: Complex64 =
                    idx.entries().iter().enumerate().map(|(a, &e)| pows[a][e as usize]).product();
                self.coeff(k) * mono
            })
            .sum()
    }

    /// Evaluation at a real frequency.
    pub fn eval(&self, t: &[f64]) -> Complex64 {
        let tc: Vec<Complex64> = t.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.eval_complex(&tc)
    }

    /// Drops every coefficient of total degree above `m`.
    pub fn truncate(&self, m: u32) -> Self {
        let m = m.min(self.degree);
        let indices = multi_indices(self.dim, m);
        let params = self.params[..indices.len()].to_vec();
        Self { dim: self.dim, degree: m, indices, params }
    }

    /// Same function written with a larger degree (new coefficients zero).
    pub fn extend(&self, m: u32) -> Self {
        if m <= self.degree {
            return self.clone();
        }
        let indices = multi_indices(self.dim, m);
        let mut params = vec![0.0; indices.len()];
        params[..self.params.len()].copy_from_slice(&self.params);
        Self { dim: self.dim, degree: m, indices, params }
    }

    /// Multiplies the function by `exp(i t . a)` up to degree `self.degree`
    /// (coefficients of the Cauchy product, truncated).
    pub fn modulate(&self, shift: &[f64]) -> Self {
        let shift_fn = Self::from_measure(&DiscreteMeasure::dirac(shift), self.degree);
        self.product(&shift_fn)
    }

    /// Truncated product of two functions of the same dimension.
    pub fn product(&self, other: &Self) -> Self {
        let degree = self.degree.min(other.degree);
        let indices = multi_indices(self.dim, degree);
        let mut params = vec![0.0; indices.len()];
        for (j, ij) in self.indices.iter().enumerate() {
            if ij.total_degree() > degree {
                continue;
            }
            for (k, ik) in other.indices.iter().enumerate() {
                if ij.total_degree() + ik.total_degree() > degree {
                    continue;
                }
                let sum: Vec<u32> = ij.entries().iter().zip(ik.entries()).map(|(a, b)| a + b).collect();
                let pos = indices.iter().position(|x| x.entries() == sum.as_slice()).expect("in range");
                params[pos] += self.params[j] * other.params[k];
            }
        }
        Self { dim: self.dim, degree, indices, params }
    }

    /// Convex combination `alpha * self + (1 - alpha) * other` (same degree).
    pub fn mix(&self, other: &Self, alpha: f64) -> Self {
        let mut out = self.clone();
        for (p, q) in out.params.iter_mut().zip(&other.params) {
            *p = alpha * *p + (1.0 - alpha) * q;
        }
        out
    }
}

fn axis_powers(t: &[Complex64], degree: u32) -> Vec<Vec<Complex64>> {
    t.iter()
        .map(|&v| {
            let mut p = Vec::with_capacity(degree as usize + 1);
            let mut cur = Complex64::new(1.0, 0.0);
            for _ in 0..=degree {
                p.push(cur);
                cur *= v;
            }
            p
        })
        .collect()
}

/// The closed class `H` intersected with the coefficient class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HConstraint {
    /// No constraint beyond the coefficient bounds.
    #[default]
    All,
    /// Slice conditions checked post hoc on a fitted measure when one is available.
    Slice,
}

/// Parameters of the coefficient class and of the contrast domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub rho: f64,
    pub s: f64,
    pub nu_est: f64,
    #[serde(default)]
    pub h_constraint: HConstraint,
}

impl ClassParams {
    pub fn new(rho: f64, s: f64, nu_est: f64) -> Result<Self> {
        let p = Self { rho, s, nu_est, h_constraint: HConstraint::All };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 1.0 && self.rho < 2.0) {
            return invalid("rho must lie in [1, 2)");
        }
        if !(self.s > 0.0) {
            return invalid("S must be positive");
        }
        if !(self.nu_est > 0.0) {
            return invalid("nu_est must be positive");
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        1.0 / self.rho
    }

    /// Bound `S^k / k^{k / rho}` on `|c_i|` for `|i|_1 = k >= 1`.
    pub fn bound(&self, k: u32) -> f64 {
        if k == 0 {
            return 1.0;
        }
        let k = k as f64;
        (k * self.s.ln() - k / self.rho * k.ln()).exp()
    }
}

/// Projection onto the coefficient class: `c_0 = 1` and each other coefficient
/// clipped radially onto its bound.
pub fn project_to_class(phi: &TruncatedAnalytic, params: &ClassParams) -> TruncatedAnalytic {
    let mut out = phi.clone();
    out.params[0] = 1.0;
    for (k, idx) in phi.indices.iter().enumerate().skip(1) {
        let b = params.bound(idx.total_degree());
        out.params[k] = out.params[k].clamp(-b, b);
    }
    out
}

/// Whether every coefficient satisfies the class bounds (relative slack `tol`).
pub fn in_class(phi: &TruncatedAnalytic, params: &ClassParams, tol: f64) -> bool {
    (phi.params[0] - 1.0).abs() <= tol
        && phi
            .indices
            .iter()
            .enumerate()
            .skip(1)
            .all(|(k, idx)| phi.params[k].abs() <= params.bound(idx.total_degree()) * (1.0 + tol))
}

/// Fraction of non-constant coefficients sitting on the class bound.
pub fn boundary_fraction(phi: &TruncatedAnalytic, params: &ClassParams) -> f64 {
    let total = phi.params.len().saturating_sub(1).max(1);
    let on = phi
        .indices
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(k, idx)| {
            let b = params.bound(idx.total_degree());
            (phi.params[*k].abs() - b).abs() <= 1e-9 * b
        })
        .count();
    on as f64 / total as f64
}

/// Empirical CF tabulated on a tensor rule over `[-nu, nu]^D`, plus the block marginals.
#[derive(Debug, Clone)]
pub struct ContrastData {
    pub nu: f64,
    pub d1: usize,
    pub d2: usize,
    pub rule: TensorRule,
    /// Nodes kept by the block-ball indicator, with their weights.
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Flat indices into the block-1 and block-2 marginal tables.
    pub j1: Vec<usize>,
    pub j2: Vec<usize>,
    /// Empirical CF at the kept nodes and at `(t1, 0)`, `(0, t2)` marginal nodes.
    pub ecf: Vec<Complex64>,
    pub ecf1: Vec<Complex64>,
    pub ecf2: Vec<Complex64>,
    pub marg1: Vec<Vec<f64>>,
    pub marg2: Vec<Vec<f64>>,
}

fn tensor_nodes(axis: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let q = axis.len();
    let total = q.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut out = vec![0.0; dim];
            for a in (0..dim).rev() {
                out[a] = axis[idx % q];
                idx /= q;
            }
            out
        })
        .collect()
}

impl ContrastData {
    /// Tabulates the empirical CF of `sample` on `rule`, which must cover `[-nu, nu]^D`.
    pub fn new(sample: &Sample, nu: f64, rule: &TensorRule) -> Result<Self> {
        let dim = sample.dim();
        if rule.dim != dim {
            return Err(Error::QuadratureCoverage("rule dimension differs from the sample".into()));
        }
        if (rule.half_width() - nu).abs() > 1e-9 * nu.max(1.0) {
            return Err(Error::QuadratureCoverage(format!(
                "rule spans [-{:.6}, {:.6}] but the contrast box is [-{nu}, {nu}]",
                rule.half_width(),
                rule.half_width()
            )));
        }
        let (d1, d2) = (sample.d1(), sample.d2());
        let q = rule.axis.len();
        let marg1 = tensor_nodes(&rule.axis.nodes, d1);
        let marg2 = tensor_nodes(&rule.axis.nodes, d2);
        let nu2 = nu * nu * (1.0 + 1e-12);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut j1 = Vec::new();
        let mut j2 = Vec::new();
        for idx in 0..rule.len() {
            let t = rule.node(idx);
            let n1: f64 = t[..d1].iter().map(|v| v * v).sum();
            let n2: f64 = t[d1..].iter().map(|v| v * v).sum();
            if n1 > nu2 || n2 > nu2 {
                continue;
            }
            let multi = rule.multi(idx);
            let a = multi[..d1].iter().fold(0, |acc, &k| acc * q + k);
            let b = multi[d1..].iter().fold(0, |acc, &k| acc * q + k);
            weights.push(rule.weight(idx));
            nodes.push(t);
            j1.push(a);
            j2.push(b);
        }
        let ecf = empirical_cf_many(sample, &nodes);
        let pad1: Vec<Vec<f64>> = marg1
            .iter()
            .map(|t| t.iter().copied().chain(std::iter::repeat(0.0).take(d2)).collect())
            .collect();
        let pad2: Vec<Vec<f64>> = marg2
            .iter()
            .map(|t| std::iter::repeat(0.0).take(d1).chain(t.iter().copied()).collect())
            .collect();
        let ecf1 = empirical_cf_many(sample, &pad1);
        let ecf2 = empirical_cf_many(sample, &pad2);
        Ok(Self { nu, d1, d2, rule: rule.clone(), nodes, weights, j1, j2, ecf, ecf1, ecf2, marg1, marg2 })
    }

    fn padded1(&self, j: usize) -> Vec<f64> {
        self.marg1[j].iter().copied().chain(std::iter::repeat(0.0).take(self.d2)).collect()
    }
    fn padded2(&self, j: usize) -> Vec<f64> {
        std::iter::repeat(0.0).take(self.d1).chain(self.marg2[j].iter().copied()).collect()
    }

    /// Contrast of a function given by its values on the kept nodes and the marginal nodes.
    pub fn contrast_values(&self, phi: &[Complex64], phi1: &[Complex64], phi2: &[Complex64]) -> f64 {
        (0..self.nodes.len())
            .map(|q| {
                let (a, b) = (self.j1[q], self.j2[q]);
                let r = phi[q] * self.ecf1[a] * self.ecf2[b] - self.ecf[q] * phi1[a] * phi2[b];
                self.weights[q] * r.norm_sqr()
            })
            .sum()
    }

    /// Contrast of `phi`.
    pub fn contrast(&self, phi: &TruncatedAnalytic) -> f64 {
        let v: Vec<Complex64> = self.nodes.iter().map(|t| phi.eval(t)).collect();
        let v1: Vec<Complex64> = (0..self.marg1.len()).map(|j| phi.eval(&self.padded1(j))).collect();
        let v2: Vec<Complex64> = (0..self.marg2.len()).map(|j| phi.eval(&self.padded2(j))).collect();
        self.contrast_values(&v, &v1, &v2)
    }
}

/// Contrast `M_n(phi)` on the tensor rule `rule`, which must span `[-nu_est, nu_est]^D`.
pub fn contrast_mn(phi: &TruncatedAnalytic, sample: &Sample, nu_est: f64, rule: &TensorRule) -> Result<f64> {
    Ok(ContrastData::new(sample, nu_est, rule)?.contrast(phi))
}

/// Settings of the multi-start Levenberg-Marquardt contrast minimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Gauss-Legendre nodes per axis on the contrast box.
    #[serde(default = "default_quad_order")]
    pub quad_order: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Number of starts: least-squares fit, constant 1, then perturbed fits.
    #[serde(default = "default_starts")]
    pub starts: usize,
    /// Stop when an accepted step improves the contrast by less than this (default `1/n`).
    #[serde(default)]
    pub min_improvement: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_quad_order() -> usize {
    33
}
fn default_max_iter() -> usize {
    500
}
fn default_starts() -> usize {
    3
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            quad_order: default_quad_order(),
            max_iter: default_max_iter(),
            starts: default_starts(),
            min_improvement: None,
            seed: 0,
        }
    }
}

/// Fitted estimate together with optimizer diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfFit {
    pub phi: TruncatedAnalytic,
    pub contrast: f64,
    pub start_index: usize,
    pub iterations: usize,
    pub start_contrasts: Vec<f64>,
    pub boundary_fraction: f64,
}

/// Linear model of the CF candidates in the scaled variable `x = t / nu`:
/// `phi = sum_i b_i B_i` with `B_i(x) = i^{|i|} x^i` and `b_i = a_i nu^{|i|}`.
struct Basis {
    indices: Vec<MultiIndex>,
    full: DMatrix<Complex64>,
    m1: DMatrix<Complex64>,
    m2: DMatrix<Complex64>,
}

fn basis_rows(points: &[Vec<f64>], indices: &[MultiIndex], nu: f64, degree: u32) -> DMatrix<Complex64> {
    let mut m = DMatrix::from_element(points.len(), indices.len(), Complex64::new(0.0, 0.0));
    for (r, t) in points.iter().enumerate() {
        let x: Vec<Complex64> = t.iter().map(|&v| Complex64::new(0.0, v / nu)).collect();
        let pows = axis_powers(&x, degree);
        for (c, idx) in indices.iter().enumerate() {
            m[(r, c)] = idx.entries().iter().enumerate().map(|(a, &e)| pows[a][e as usize]).product();
        }
    }
    m
}

impl Basis {
    fn new(data: &ContrastData, dim: usize, degree: u32) -> Self {
        let indices = multi_indices(dim, degree);
        let nu = data.nu;
        let p1: Vec<Vec<f64>> = (0..data.marg1.len()).map(|j| data.padded1(j)).collect();
        let p2: Vec<Vec<f64>> = (0..data.marg2.len()).map(|j| data.padded2(j)).collect();
        Self {
            full: basis_rows(&data.nodes, &indices, nu, degree),
            m1: basis_rows(&p1, &indices, nu, degree),
            m2: basis_rows(&p2, &indices, nu, degree),
            indices,
        }
    }

    fn values(&self, b: &DVector<f64>) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
        let bc: DVector<Complex64> = b.map(|v| Complex64::new(v, 0.0));
        let f = &self.full * &bc;
        let f1 = &self.m1 * &bc;
        let f2 = &self.m2 * &bc;
        (f.as_slice().to_vec(), f1.as_slice().to_vec(), f2.as_slice().to_vec())
    }
}

/// Damped least squares `min ||A d - y||^2 + mu ||d||^2` through QR of the stacked system.
fn damped_lstsq(a: &DMatrix<f64>, y: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    let (rows, cols) = a.shape();
    let mut stacked = DMatrix::zeros(rows + cols, cols);
    stacked.view_mut((0, 0), (rows, cols)).copy_from(a);
    let s = mu.sqrt();
    for k in 0..cols {
        stacked[(rows + k, k)] = s;
    }
    let mut rhs = DVector::zeros(rows + cols);
    rhs.rows_mut(0, rows).copy_from(y);
    let qr = stacked.qr();
    qr.q_tr_mul(&mut rhs);
    let r = qr.r();
    let top = rhs.rows(0, cols).into_owned();
    let d = r.solve_upper_triangular(&top)?;
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Reduces a triangular system problem to a small one: returns `(R, Q^T y)` of `A`.
fn reduce(a: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let cols = a.ncols();
    let qr = a.clone().qr();
    let mut rhs = y.clone();
    qr.q_tr_mul(&mut rhs);
    (qr.r(), rhs.rows(0, cols).into_owned())
}

/// Splits a complex vector with per-row weights into a stacked real vector.
fn stack_complex(v: &[Complex64], sw: &[f64]) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |r, _| if r < n { v[r].re * sw[r] } else { v[r - n].im * sw[r - n] })
}

struct Problem<'a> {
    data: &'a ContrastData,
    basis: Basis,
    /// Per-parameter bounds in the scaled variable.
    bounds: Vec<f64>,
    sw: Vec<f64>,
}

impl Problem<'_> {
    fn project(&self, b: &mut DVector<f64>) {
        b[0] = 1.0;
        for k in 1..b.len() {
            b[k] = b[k].clamp(-self.bounds[k], self.bounds[k]);
        }
    }

    fn contrast(&self, b: &DVector<f64>) -> f64 {
        let (f, f1, f2) = self.basis.values(b);
        self.data.contrast_values(&f, &f1, &f2)
    }

    fn residual(&self, b: &DVector<f64>) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
        let (f, f1, f2) = self.basis.values(b);
        let d = self.data;
        let r = (0..d.nodes.len())
            .map(|q| {
                let (a, c) = (d.j1[q], d.j2[q]);
                f[q] * d.ecf1[a] * d.ecf2[c] - d.ecf[q] * f1[a] * f2[c]
            })
            .collect();
        (r, f, f1, f2)
    }

    /// Real Jacobian of the weighted stacked residual with respect to `b_1, ..., b_{P-1}`.
    fn jacobian(&self, f1: &[Complex64], f2: &[Complex64]) -> DMatrix<f64> {
        let d = self.data;
        let nq = d.nodes.len();
        let p = self.basis.indices.len();
        let mut j = DMatrix::zeros(2 * nq, p - 1);
        for q in 0..nq {
            let (a, c) = (d.j1[q], d.j2[q]);
            let y12 = d.ecf1[a] * d.ecf2[c];
            for k in 1..p {
                let g = self.basis.full[(q, k)] * y12
                    - d.ecf[q] * (self.basis.m1[(a, k)] * f2[c] + f1[a] * self.basis.m2[(c, k)]);
                j[(q, k - 1)] = g.re * self.sw[q];
                j[(nq + q, k - 1)] = g.im * self.sw[q];
            }
        }
        j
    }

    /// Weighted least-squares polynomial fit of the empirical CF on the nodes.
    fn ls_init(&self) -> DVector<f64> {
        let nq = self.data.nodes.len();
        let p = self.basis.indices.len();
        let mut a = DMatrix::zeros(2 * nq, p - 1);
        let mut y = DVector::zeros(2 * nq);
        for q in 0..nq {
            let target = self.data.ecf[q] - self.basis.full[(q, 0)];
            y[q] = target.re * self.sw[q];
            y[nq + q] = target.im * self.sw[q];
            for k in 1..p {
                let v = self.basis.full[(q, k)];
                a[(q, k - 1)] = v.re * self.sw[q];
                a[(nq + q, k - 1)] = v.im * self.sw[q];
            }
        }
        let scale = column_scale(&mut a);
        let (r, qty) = reduce(&a, &y);
        let mut b = DVector::zeros(p);
        b[0] = 1.0;
        if let Some(d) = damped_lstsq(&r, &qty, 1e-12) {
            for k in 1..p {
                b[k] = d[k - 1] * scale[k - 1];
            }
        }
        self.project(&mut b);
        b
    }

    /// Levenberg-Marquardt with projection and monotone acceptance.
    fn descend(&self, mut b: DVector<f64>, max_iter: usize, min_improvement: f64) -> (DVector<f64>, f64, usize) {
        let mut value = self.contrast(&b);
        let mut mu = 1e-3;
        let mut iterations = 0;
        for _ in 0..max_iter {
            iterations += 1;
            let (r, _, f1, f2) = self.residual(&b);
            let rv = stack_complex(&r, &self.sw);
            let mut j = self.jacobian(&f1, &f2);
            let scale = column_scale(&mut j);
            let (rm, qty) = reduce(&j, &(-rv));
            let mut accepted = None;
            while mu < 1e12 {
                let Some(d) = damped_lstsq(&rm, &qty, mu) else {
                    mu *= 4.0;
                    continue;
                };
                let mut cand = b.clone();
                for k in 1..cand.len() {
                    cand[k] += d[k - 1] * scale[k - 1];
                }
                self.project(&mut cand);
                let cv = self.contrast(&cand);
                if cv <= value {
                    accepted = Some((cand, cv));
                    mu = (mu / 3.0).max(1e-12);
                    break;
                }
                mu *= 4.0;
            }
            let Some((cand, cv)) = accepted else { break };
            let gain = value - cv;
            b = cand;
            value = cv;
            if gain < min_improvement {
                break;
            }
        }
        (b, value, iterations)
    }
}

/// Scales every column to unit Euclidean norm; returns the factors to undo it.
fn column_scale(a: &mut DMatrix<f64>) -> Vec<f64> {
    (0..a.ncols())
        .map(|k| {
            let n = a.column(k).norm();
            let s = if n > 0.0 { 1.0 / n } else { 1.0 };
            a.column_mut(k).scale_mut(s);
            s
        })
        .collect()
}

/// Contrast minimizer over the class, truncated at degree `m`.
pub fn estimate_cf(sample: &Sample, params: &ClassParams, m: u32, opt: &OptimizerConfig) -> Result<CfFit> {
    params.validate()?;
    if m < 1 {
        return invalid("degree m must be at least 1");
    }
    if sample.n() < 2 {
        return invalid("estimate_cf needs n >= 2");
    }
    let rule = TensorRule::cube(sample.dim(), params.nu_est, opt.quad_order);
    let data = ContrastData::new(sample, params.nu_est, &rule)?;
    estimate_cf_with(&data, sample.dim(), params, m, opt, sample.n())
}

/// Same as [`estimate_cf`] on a pre-tabulated empirical CF.
pub fn estimate_cf_with(
    data: &ContrastData,
    dim: usize,
    params: &ClassParams,
    m: u32,
    opt: &OptimizerConfig,
    n: usize,
) -> Result<CfFit> {
    let basis = Basis::new(data, dim, m);
    let nu = data.nu;
    let bounds = basis
        .indices
        .iter()
        .map(|idx| {
            let k = idx.total_degree();
            params.bound(k) * nu.powi(k as i32)
        })
        .collect();
    let sw = data.weights.iter().map(|w| w.sqrt()).collect();
    let problem = Problem { data, basis, bounds, sw };
    let min_improvement = opt.min_improvement.unwrap_or(1.0 / n as f64);

    let init = problem.ls_init();
    let p = init.len();
    let starts: Vec<DVector<f64>> = (0..opt.starts.max(1))
        .map(|s| match s {
            0 => init.clone(),
            1 => {
                let mut b = DVector::zeros(p);
                b[0] = 1.0;
                b
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut b = init.clone();
                for k in 1..p {
                    let z: f64 = rng.sample(StandardNormal);
                    b[k] += 0.1 * z * (b[k].abs() + 1e-3 * problem.bounds[k].min(1.0));
                }
                problem.project(&mut b);
                b
            }
        })
        .collect();

    let results: Vec<(DVector<f64>, f64, usize)> = starts
        .into_par_iter()
        .map(|b0| problem.descend(b0, opt.max_iter, min_improvement))
        .collect();
    let start_contrasts: Vec<f64> = results.iter().map(|r| r.1).collect();
    let (best, _) = results
        .iter()
        .enumerate()
        .min_by(|(i, x), (j, y)| x.1.total_cmp(&y.1).then(i.cmp(j)))
        .ok_or_else(|| Error::Numerical("no optimizer start".into()))?;
    let (b, value, iterations) = results[best].clone();
    let a: Vec<f64> = b
        .iter()
        .zip(&problem.basis.indices)
        .map(|(v, idx)| v / nu.powi(idx.total_degree() as i32))
        .collect();
    let phi = project_to_class(&TruncatedAnalytic::from_params(dim, m, a)?, params);
    let boundary_fraction = boundary_fraction(&phi, params);
    Ok(CfFit { phi, contrast: value, start_index: best, iterations, start_contrasts, boundary_fraction })
}

/// `min` over a grid of `|Phi_{e1}|` on `[-nu, nu]^{d1}` and `|Phi_{e2}|` on `[-nu, nu]^{d2}`.
/// `cf1` and `cf2` are the block characteristic functions.
pub fn c_nu(
    cf1: impl Fn(&[f64]) -> Complex64,
    cf2: impl Fn(&[f64]) -> Complex64,
    d1: usize,
    d2: usize,
    nu: f64,
    points_per_axis: usize,
) -> f64 {
    let axis: Vec<f64> = (0..points_per_axis)
        .map(|k| -nu + 2.0 * nu * k as f64 / (points_per_axis - 1) as f64)
        .collect();
    let m1 = tensor_nodes(&axis, d1).iter().map(|t| cf1(t).norm()).fold(f64::INFINITY, f64::min);
    let m2 = tensor_nodes(&axis, d2).iter().map(|t| cf2(t).norm()).fold(f64::INFINITY, f64::min);
    m1.min(m2)
}

/// Discrete `L2` distance between two functions on the tensor rule of the contrast box.
pub fn grid_l2_distance(
    f: impl Fn(&[f64]) -> Complex64,
    g: impl Fn(&[f64]) -> Complex64,
    rule: &TensorRule,
) -> f64 {
    (0..rule.len())
        .map(|i| {
            let t = rule.node(i);
            rule.weight(i) * (f(&t) - g(&t)).norm_sqr()
        })
        .sum::<f64>()
        .sqrt()
}
