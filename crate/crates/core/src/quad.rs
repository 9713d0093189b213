//! Gauss-Legendre rules, composite panels and tensor-product grids.

use gauss_quad::GaussLegendre;
use std::num::NonZeroUsize;

/// One-dimensional rule: nodes and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1d {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// `order`-point Gauss-Legendre rule mapped to `[a, b]`, nodes in increasing order.
pub fn gauss_legendre(order: usize, a: f64, b: f64) -> Rule1d {
    let order = NonZeroUsize::new(order.max(1)).expect("order >= 1");
    let rule = GaussLegendre::new(order);
    let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    Rule1d {
        nodes: pairs.iter().map(|(x, _)| mid + half * x).collect(),
        weights: pairs.iter().map(|(_, w)| half * w).collect(),
    }
}

/// Composite rule: `panels` equal panels on `[a, b]`, each with an `order`-point rule.
pub fn composite(a: f64, b: f64, panels: usize, order: usize) -> Rule1d {
    let base = gauss_legendre(order, -1.0, 1.0);
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * order);
    let mut weights = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let lo = a + p as f64 * width;
        for (x, w) in base.nodes.iter().zip(&base.weights) {
            nodes.push(lo + 0.5 * width * (x + 1.0));
            weights.push(0.5 * width * w);
        }
    }
    Rule1d { nodes, weights }
}

/// Tensor-product rule on the cube `[-half, half]^dim` using one axis rule.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    pub axis: Rule1d,
    pub dim: usize,
}

impl TensorRule {
    pub fn cube(dim: usize, half: f64, order: usize) -> Self {
        Self { axis: gauss_legendre(order, -half, half), dim }
    }

    /// Composite version for highly oscillatory integrands.
    pub fn cube_composite(dim: usize, half: f64, panels: usize, order: usize) -> Self {
        Self { axis: composite(-half, half, panels, order), dim }
    }

    pub fn len(&self) -> usize {
        self.axis.len().pow(self.dim as u32)
    }
    pub fn is_empty(&self) -> bool {
        self.axis.is_empty()
    }

    /// Axis indices of the flat node `idx` (last axis fastest).
    pub fn multi(&self, mut idx: usize) -> Vec<usize> {
        let q = self.axis.len();
        let mut out = vec![0; self.dim];
        for a in (0..self.dim).rev() {
            out[a] = idx % q;
            idx /= q;
        }
        out
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.multi(idx).into_iter().map(|k| self.axis.nodes[k]).collect()
    }

    pub fn weight(&self, idx: usize) -> f64 {
        self.multi(idx).into_iter().map(|k| self.axis.weights[k]).product()
    }

    /// Half-width of the covered cube.
    pub fn half_width(&self) -> f64 {
        0.5 * self.axis.weights.iter().sum::<f64>()
    }
}
