//! Exact discrete optimal transport by the network simplex method on the
//! bipartite transportation graph.

use crate::error::{Error, Result};

/// Optimal plan as a list of `(source, sink, mass)` triples plus its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub flows: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

/// Minimizes `sum c[i][j] x_ij` subject to row sums `supply` and column sums `demand`.
///
/// `cost(i, j)` must be finite. Totals of `supply` and `demand` must agree up to rounding;
/// the final demand absorbs the difference.
pub fn transport(supply: &[f64], demand: &[f64], cost: impl Fn(usize, usize) -> f64) -> Result<TransportPlan> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return Err(Error::EmptySet);
    }
    let c: Vec<f64> = (0..m * n).map(|k| cost(k / n, k % n)).collect();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite transport cost".into()));
    }
    let mut solver = Simplex::new(supply, demand, c, m, n);
    solver.run()?;
    Ok(solver.plan())
}

/// Basic cell of the transportation tableau.
#[derive(Debug, Clone, Copy)]
struct Cell {
    i: usize,
    j: usize,
    flow: f64,
}

struct Simplex {
    m: usize,
    n: usize,
    cost: Vec<f64>,
    cells: Vec<Cell>,
    /// Adjacency of the tree on `m + n` nodes (sources first): (neighbor, cell index).
    adj: Vec<Vec<(usize, usize)>>,
    parent: Vec<usize>,
    parent_cell: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
    scan_pos: usize,
    mark: Vec<u64>,
    stamp: u64,
    stack: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl Simplex {
    fn new(supply: &[f64], demand: &[f64], cost: Vec<f64>, m: usize, n: usize) -> Self {
        // north-west corner start: m + n - 1 cells forming a spanning tree
        let mut ra = supply.to_vec();
        let mut rb = demand.to_vec();
        let mut cells = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            if i == m - 1 && j == n - 1 {
                cells.push(Cell { i, j, flow: ra[i].max(0.0) });
                break;
            }
            if j == n - 1 || (i < m - 1 && ra[i] < rb[j]) {
                let x = ra[i].max(0.0);
                cells.push(Cell { i, j, flow: x });
                rb[j] -= x;
                i += 1;
            } else {
                let x = rb[j].max(0.0).min(ra[i].max(0.0));
                cells.push(Cell { i, j, flow: x });
                ra[i] -= x;
                j += 1;
            }
        }
        let nodes = m + n;
        let mut s = Self {
            m,
            n,
            cost,
            cells,
            adj: vec![Vec::new(); nodes],
            parent: vec![NONE; nodes],
            parent_cell: vec![NONE; nodes],
            depth: vec![0; nodes],
            potential: vec![0.0; nodes],
            scan_pos: 0,
            mark: vec![0; nodes],
            stamp: 0,
            stack: Vec::new(),
        };
        for (k, c) in s.cells.iter().enumerate() {
            s.adj[c.i].push((m + c.j, k));
            s.adj[m + c.j].push((c.i, k));
        }
        s.rebuild_tree();
        s
    }

    fn c(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n + j]
    }

    /// Recomputes parents, depths and dual potentials by traversal from source 0.
    fn rebuild_tree(&mut self) {
        let nodes = self.m + self.n;
        self.parent.iter_mut().for_each(|p| *p = NONE);
        let mut stack = vec![0usize];
        let mut seen = vec![false; nodes];
        seen[0] = true;
        self.depth[0] = 0;
        self.potential[0] = 0.0;
        while let Some(u) = stack.pop() {
            for &(v, k) in &self.adj[u] {
                if seen[v] {
                    continue;
                }
                seen[v] = true;
                self.parent[v] = u;
                self.parent_cell[v] = k;
                self.depth[v] = self.depth[u] + 1;
                let cell = self.cells[k];
                let cij = self.c(cell.i, cell.j);
                // u_i + v_j = c_ij on basic cells
                self.potential[v] = cij - self.potential[u];
                stack.push(v);
            }
        }
    }

    fn in_subtree(&self, mut v: usize, root: usize) -> bool {
        while self.depth[v] > self.depth[root] {
            v = self.parent[v];
        }
        v == root
    }

    /// Re-attaches the component containing `inner` below `outer` through cell `k`,
    /// refreshing parents, depths and potentials on that component only.
    fn rehang(&mut self, inner: usize, outer: usize, k: usize) {
        self.stamp += 1;
        let stamp = self.stamp;
        self.mark[outer] = stamp;
        self.mark[inner] = stamp;
        self.parent[inner] = outer;
        self.parent_cell[inner] = k;
        self.depth[inner] = self.depth[outer] + 1;
        let cell = self.cells[k];
        self.potential[inner] = self.c(cell.i, cell.j) - self.potential[outer];
        let mut stack = std::mem::take(&mut self.stack);
        stack.clear();
        stack.push(inner);
        while let Some(u) = stack.pop() {
            for idx in 0..self.adj[u].len() {
                let (v, kk) = self.adj[u][idx];
                if self.mark[v] == stamp {
                    continue;
                }
                self.mark[v] = stamp;
                self.parent[v] = u;
                self.parent_cell[v] = kk;
                self.depth[v] = self.depth[u] + 1;
                let cell = self.cells[kk];
                self.potential[v] = self.c(cell.i, cell.j) - self.potential[u];
                stack.push(v);
            }
        }
        self.stack = stack;
    }

    fn reduced(&self, i: usize, j: usize) -> f64 {
        self.c(i, j) - self.potential[i] - self.potential[self.m + j]
    }

    /// Block pricing: most negative reduced cost within the first block that has one.
    fn entering(&mut self, eps: f64) -> Option<(usize, usize)> {
        let total = self.m * self.n;
        let block = ((total as f64).sqrt() as usize).max(64).min(total);
        let mut best: Option<(usize, f64)> = None;
        let mut scanned = 0;
        let mut pos = self.scan_pos;
        while scanned < total {
            let end = (scanned + block).min(total);
            while scanned < end {
                let k = pos;
                pos += 1;
                if pos == total {
                    pos = 0;
                }
                scanned += 1;
                let r = self.reduced(k / self.n, k % self.n);
                if r < -eps && best.is_none_or(|(_, b)| r < b) {
                    best = Some((k, r));
                }
            }
            if best.is_some() {
                break;
            }
        }
        self.scan_pos = pos;
        best.map(|(k, _)| (k / self.n, k % self.n))
    }

    /// Tree path from sink `j` back to source `i` as cell indices. Together with the
    /// entering cell it closes a cycle whose even positions lose flow.
    fn cycle(&self, i: usize, j: usize) -> Vec<usize> {
        let mut a = i;
        let mut b = self.m + j;
        let mut from_a = Vec::new();
        let mut from_b = Vec::new();
        while self.depth[a] > self.depth[b] {
            from_a.push(self.parent_cell[a]);
            a = self.parent[a];
        }
        while self.depth[b] > self.depth[a] {
            from_b.push(self.parent_cell[b]);
            b = self.parent[b];
        }
        while a != b {
            from_a.push(self.parent_cell[a]);
            a = self.parent[a];
            from_b.push(self.parent_cell[b]);
            b = self.parent[b];
        }
        // path sink j -> ... -> source i
        from_b.into_iter().chain(from_a.into_iter().rev()).collect()
    }

    fn run(&mut self) -> Result<()> {
        let scale = self.cost.iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1e-300);
        let eps = 1e-12 * scale;
        let cap = 200 * (self.m + self.n) * ((self.m + self.n) as f64).log2().ceil().max(1.0) as usize + 10_000;
        for _ in 0..cap {
            let Some((i, j)) = self.entering(eps) else {
                return Ok(());
            };
            // entering cell (i, j) gains theta; along the path j -> i cells alternate -, +, -, ...
            let path = self.cycle(i, j);
            let mut theta = f64::INFINITY;
            let mut leave = NONE;
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 == 0 && self.cells[k].flow < theta {
                    theta = self.cells[k].flow;
                    leave = k;
                }
            }
            if leave == NONE {
                return Err(Error::Numerical("unbounded transport pivot".into()));
            }
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    self.cells[k].flow -= theta;
                } else {
                    self.cells[k].flow += theta;
                }
            }
            let old = self.cells[leave];
            let (a, b) = (old.i, self.m + old.j);
            // endpoint of the leaving cell that hangs below the other one
            let child = if self.parent[a] == b && self.parent_cell[a] == leave { a } else { b };
            self.adj[a].retain(|&(_, k)| k != leave);
            self.adj[b].retain(|&(_, k)| k != leave);
            self.cells[leave] = Cell { i, j, flow: theta };
            self.adj[i].push((self.m + j, leave));
            self.adj[self.m + j].push((i, leave));
            let (inner, outer) = if self.in_subtree(i, child) { (i, self.m + j) } else { (self.m + j, i) };
            self.rehang(inner, outer, leave);
        }
        Err(Error::Numerical("network simplex exceeded its pivot budget".into()))
    }

    fn plan(&self) -> TransportPlan {
        let flows: Vec<(usize, usize, f64)> =
            self.cells.iter().filter(|c| c.flow > 0.0).map(|c| (c.i, c.j, c.flow)).collect();
        let cost = flows.iter().map(|&(i, j, x)| x * self.c(i, j)).sum();
        TransportPlan { flows, cost }
    }
}
