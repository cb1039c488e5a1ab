//! Exact Wasserstein-1 distance between discrete measures.
//!
//! The transportation problem with cost `|x_i - y_j|` is solved exactly by a
//! primal network simplex on the complete bipartite graph. The spanning tree
//! is kept strongly feasible (leaving arc chosen as the last blocking arc of
//! the pivot cycle), which rules out cycling under degeneracy. Only the value
//! is contract-stable; among several optimal plans the one returned depends
//! on pivoting order.

use serde::Serialize;
use thiserror::Error;

use crate::measures::{dist, momentum, DiscreteMeasure};

/// Maximum atom count accepted by [`w1_oracle_uniform`].
pub const ORACLE_MAX_ATOMS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate input: measure without atoms")]
    Degenerate,
    #[error("oracle needs uniform weights")]
    NotUniform,
    #[error("oracle needs equal atom counts, got {0} and {1}")]
    SizeMismatch(usize, usize),
    #[error("oracle limited to {ORACLE_MAX_ATOMS} atoms, got {0}")]
    TooLarge(usize),
    #[error("network simplex did not converge after {0} pivots")]
    NoConvergence(usize),
    #[error("network simplex left {0:e} mass on artificial arcs")]
    Infeasible(f64),
}

/// Coupling between two discrete measures, stored sparsely.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPlan {
    /// `(i, j, m_ij)` with `m_ij > 0`.
    pub entries: Vec<(usize, usize, f64)>,
    pub source_atoms: usize,
    pub target_atoms: usize,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.source_atoms];
        for &(i, _, m) in &self.entries {
            r[i] += m;
        }
        r
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.target_atoms];
        for &(_, j, m) in &self.entries {
            c[j] += m;
        }
        c
    }

    /// Largest marginal violation against `mu` (rows) and `nu` (columns).
    pub fn marginal_error(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        let rows = self.row_sums();
        let cols = self.column_sums();
        rows.iter()
            .zip(mu.weights())
            .chain(cols.iter().zip(nu.weights()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `Σ m_ij |x_i - y_j|`.
    pub fn cost(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, m)| m * dist(mu.point(i), nu.point(j)))
            .sum()
    }
}

/// Exact `W1(mu, nu)` and an optimal plan.
pub fn w1(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<(f64, TransportPlan), TransportError> {
    if mu.dim() != nu.dim() {
        return Err(TransportError::DimensionMismatch(mu.dim(), nu.dim()));
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(TransportError::Degenerate);
    }
    let n = mu.len();
    let m = nu.len();
    let mut cost = Vec::with_capacity(n * m);
    for x in mu.points() {
        for y in nu.points() {
            cost.push(dist(x, y));
        }
    }
    let flows = NetworkSimplex::new(mu.weights(), nu.weights(), cost.clone()).run()?;
    let mut entries = Vec::new();
    let mut value = 0.0;
    for (e, &f) in flows.iter().enumerate() {
        if f > 0.0 {
            entries.push((e / m, e % m, f));
            value += f * cost[e];
        }
    }
    Ok((
        value,
        TransportPlan {
            entries,
            source_atoms: n,
            target_atoms: m,
        },
    ))
}

/// Convenience wrapper returning only the distance.
pub fn w1_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64, TransportError> {
    w1(mu, nu).map(|(v, _)| v)
}

/// Brute-force W1 for uniform measures of equal size: the minimum over all
/// permutations of the mean matched distance. Exact because the extreme
/// points of the uniform transport polytope are permutation matrices.
pub fn w1_oracle_uniform(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64, TransportError> {
    if mu.dim() != nu.dim() {
        return Err(TransportError::DimensionMismatch(mu.dim(), nu.dim()));
    }
    if !mu.is_uniform() || !nu.is_uniform() {
        return Err(TransportError::NotUniform);
    }
    let n = mu.len();
    if nu.len() != n {
        return Err(TransportError::SizeMismatch(n, nu.len()));
    }
    if n > ORACLE_MAX_ATOMS {
        return Err(TransportError::TooLarge(n));
    }
    let d: Vec<Vec<f64>> = mu
        .points()
        .map(|x| nu.points().map(|y| dist(x, y)).collect())
        .collect();
    let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| d[i][j]).sum::<f64>();

    // Heap's algorithm
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = score(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

/// One row of a [`metrizes_narrow_probe`] report.
#[derive(Debug, Clone, Serialize)]
pub struct NarrowProbeRow {
    pub index: usize,
    pub w1: f64,
    /// `|∫φ dμ_N - ∫φ dμ|` per test function.
    pub test_gaps: Vec<f64>,
    /// `|M1(μ_N) - M1(μ)|`.
    pub momentum_gap: f64,
}

/// Tabulates W1, test-function gaps and momentum gaps along a sequence, to
/// exhibit that W1 convergence matches narrow convergence plus convergence of
/// the first moment.
pub fn metrizes_narrow_probe(
    seq: &[DiscreteMeasure],
    limit: &DiscreteMeasure,
    testfns: &[&dyn Fn(&[f64]) -> f64],
) -> Result<Vec<NarrowProbeRow>, TransportError> {
    let integrate = |mu: &DiscreteMeasure, f: &dyn Fn(&[f64]) -> f64| -> f64 {
        mu.atoms().map(|(w, x)| w * f(x)).sum()
    };
    let m_limit = momentum(limit);
    seq.iter()
        .enumerate()
        .map(|(index, mu)| {
            Ok(NarrowProbeRow {
                index,
                w1: w1_distance(mu, limit)?,
                test_gaps: testfns
                    .iter()
                    .map(|f| (integrate(mu, *f) - integrate(limit, *f)).abs())
                    .collect(),
                momentum_gap: (momentum(mu) - m_limit).abs(),
            })
        })
        .collect()
}

/// Primal network simplex for the balanced uncapacitated transportation
/// problem. Nodes `0..n` are sources, `n..n+m` sinks, `n+m` an artificial
/// root joined to every node by a big-M arc.
struct NetworkSimplex {
    n: usize,
    m: usize,
    cost: Vec<f64>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    supply: Vec<f64>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    /// Tree arc `pred[u]` points from `u` to `parent[u]`.
    pred_up: Vec<bool>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    tree_adj: Vec<Vec<usize>>,
    eps: f64,
}

const NONE: usize = usize::MAX;

impl NetworkSimplex {
    fn new(a: &[f64], b: &[f64], cost: Vec<f64>) -> Self {
        let n = a.len();
        let m = b.len();
        let nodes = n + m + 1;
        let real = n * m;
        let max_cost = cost.iter().cloned().fold(0.0, f64::max);
        let art_cost = (max_cost + 1.0) * (n + m) as f64;
        let mut all_cost = cost;
        all_cost.resize(real + n + m, art_cost);
        let mut supply: Vec<f64> = a.to_vec();
        supply.extend(b.iter().map(|w| -w));
        let mut s = NetworkSimplex {
            n,
            m,
            cost: all_cost,
            flow: vec![0.0; real + n + m],
            in_tree: vec![false; real + n + m],
            supply,
            parent: vec![NONE; nodes],
            pred: vec![NONE; nodes],
            pred_up: vec![false; nodes],
            depth: vec![0; nodes],
            pi: vec![0.0; nodes],
            tree_adj: vec![Vec::new(); nodes],
            eps: 1e-12 * (max_cost + 1.0),
        };
        let root = n + m;
        for u in 0..n + m {
            let e = real + u;
            s.in_tree[e] = true;
            s.tree_adj[u].push(e);
            s.tree_adj[root].push(e);
            if s.supply[u] >= 0.0 {
                // u -> root, zero cost
                s.cost[e] = 0.0;
                s.flow[e] = s.supply[u];
            } else {
                s.flow[e] = -s.supply[u];
            }
        }
        s.rebuild_tree();
        s
    }

    fn root(&self) -> usize {
        self.n + self.m
    }

    fn real_arcs(&self) -> usize {
        self.n * self.m
    }

    fn endpoints(&self, e: usize) -> (usize, usize) {
        let real = self.real_arcs();
        if e < real {
            (e / self.m, self.n + e % self.m)
        } else {
            let u = e - real;
            if self.supply[u] >= 0.0 {
                (u, self.root())
            } else {
                (self.root(), u)
            }
        }
    }

    fn reduced_cost(&self, e: usize) -> f64 {
        let (s, t) = self.endpoints(e);
        self.cost[e] + self.pi[s] - self.pi[t]
    }

    /// Recomputes parent pointers, depths and potentials from the tree arcs.
    fn rebuild_tree(&mut self) {
        let root = self.root();
        self.parent[root] = NONE;
        self.pred[root] = NONE;
        self.depth[root] = 0;
        self.pi[root] = 0.0;
        let mut stack = vec![root];
        while let Some(u) = stack.pop() {
            for k in 0..self.tree_adj[u].len() {
                let e = self.tree_adj[u][k];
                if e == self.pred[u] {
                    continue;
                }
                let (s, t) = self.endpoints(e);
                let (v, up) = if s == u { (t, false) } else { (s, true) };
                self.parent[v] = u;
                self.pred[v] = e;
                self.pred_up[v] = up;
                self.depth[v] = self.depth[u] + 1;
                self.pi[v] = if up {
                    self.pi[u] - self.cost[e]
                } else {
                    self.pi[u] + self.cost[e]
                };
                stack.push(v);
            }
        }
    }

    fn run(mut self) -> Result<Vec<f64>, TransportError> {
        let arcs = self.real_arcs();
        let block = ((arcs as f64).sqrt().ceil() as usize).max(10).min(arcs);
        let max_pivots = 50 * (arcs + self.n + self.m) + 1000;
        let mut next = 0usize;
        let mut pivots = 0usize;
        loop {
            // block search pricing
            let mut best = -self.eps;
            let mut entering = NONE;
            let mut scanned = 0usize;
            let mut in_block = 0usize;
            let mut e = next;
            while scanned < arcs {
                if !self.in_tree[e] {
                    let rc = self.reduced_cost(e);
                    if rc < best {
                        best = rc;
                        entering = e;
                    }
                }
                scanned += 1;
                in_block += 1;
                e += 1;
                if e == arcs {
                    e = 0;
                }
                if in_block == block {
                    if entering != NONE {
                        break;
                    }
                    in_block = 0;
                }
            }
            if entering == NONE {
                break;
            }
            next = e;
            self.pivot(entering);
            pivots += 1;
            if pivots > max_pivots {
                return Err(TransportError::NoConvergence(pivots));
            }
        }
        let leftover: f64 = self.flow[arcs..].iter().sum();
        if leftover > 1e-9 {
            return Err(TransportError::Infeasible(leftover));
        }
        self.flow.truncate(arcs);
        Ok(self.flow)
    }

    fn pivot(&mut self, entering: usize) {
        let (first, second) = self.endpoints(entering);

        let mut a = first;
        let mut b = second;
        while a != b {
            if self.depth[a] >= self.depth[b] {
                a = self.parent[a];
            } else {
                b = self.parent[b];
            }
        }
        let join = a;

        // Leaving arc: last blocking arc met when walking the cycle from the
        // join node, down to `first`, across the entering arc, then up from
        // `second`. Ties on the second leg win.
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut u = first;
        while u != join {
            if self.pred_up[u] {
                let d = self.flow[self.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            if !self.pred_up[u] {
                let d = self.flow[self.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                }
            }
            u = self.parent[u];
        }
        debug_assert!(u_out != NONE, "uncapacitated cycle must be blocked");

        if delta > 0.0 {
            self.flow[entering] += delta;
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                if self.pred_up[u] {
                    self.flow[e] -= delta;
                } else {
                    self.flow[e] += delta;
                }
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = self.pred[u];
                if self.pred_up[u] {
                    self.flow[e] += delta;
                } else {
                    self.flow[e] -= delta;
                }
                u = self.parent[u];
            }
        }

        let leaving = self.pred[u_out];
        self.flow[leaving] = 0.0;
        self.in_tree[leaving] = false;
        self.in_tree[entering] = true;
        let (ls, lt) = self.endpoints(leaving);
        for node in [ls, lt] {
            let adj = &mut self.tree_adj[node];
            let k = adj.iter().position(|&x| x == leaving).expect("tree arc");
            adj.swap_remove(k);
        }
        self.tree_adj[first].push(entering);
        self.tree_adj[second].push(entering);
        self.rebuild_tree();
    }
}
