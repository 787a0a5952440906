//! Spectral partitioning by recursive Fiedler-vector bisection.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvio::{self, field, Table};
use crate::error::{Error, Result};

/// Fiedler values below this are treated as a disconnected graph.
pub const CONNECTIVITY_TOLERANCE: f64 = 1e-10;
/// Largest graph solved by a dense eigendecomposition.
pub const DENSE_LIMIT: usize = 64;
/// Fiedler components closer to zero than this count as non-positive.
pub const SIGN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityGraph {
    pub n: usize,
    /// Sorted `(a, b)` pairs with `a < b`.
    pub edges: Vec<(usize, usize)>,
    pub coords: Option<Vec<(f64, f64)>>,
}

impl ConnectivityGraph {
    /// Rejects self-loops and out-of-range endpoints; collapses duplicates.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Domain(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(Error::Domain(format!("self-loop at node {a}")));
            }
            out.push((a.min(b), a.max(b)));
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self {
            n,
            edges: out,
            coords: None,
        })
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Connected components, each sorted, ordered by smallest node.
    pub fn components(&self) -> Vec<Vec<usize>> {
        components_within(&self.adjacency(), &(0..self.n).collect::<Vec<_>>())
    }

    /// Reads a `from,to` edge list. Without `n` the node count is one past
    /// the largest index.
    pub fn load_csv(path: &Path, n: Option<usize>) -> Result<Self> {
        let mut table = Table::open(path)?;
        let from = table.column("from")?;
        let to = table.column("to")?;
        let name = table.path.clone();
        let mut edges = Vec::new();
        for row in table.rows() {
            let (line, rec) = row?;
            let a: usize = field(&name, line, &rec, from, "node index")?;
            let b: usize = field(&name, line, &rec, to, "node index")?;
            edges.push((a, b));
        }
        let n = n.unwrap_or_else(|| edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0));
        Self::new(n, edges)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csvio::writer(path)?;
        csvio::write_row(&mut w, path, ["from", "to"])?;
        for &(a, b) in &self.edges {
            csvio::write_row(&mut w, path, [a.to_string(), b.to_string()])?;
        }
        csvio::finish(w)
    }
}

fn components_within(adj: &[Vec<usize>], nodes: &[usize]) -> Vec<Vec<usize>> {
    let mut inside = vec![false; adj.len()];
    for &v in nodes {
        inside[v] = true;
    }
    let mut seen = vec![false; adj.len()];
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    for &start in &sorted {
        if seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if inside[w] && !seen[w] {
                    seen[w] = true;
                    comp.push(w);
                    queue.push_back(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// `L = D − A`.
pub fn laplacian(graph: &ConnectivityGraph) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(graph.n, graph.n);
    for &(a, b) in &graph.edges {
        l[(a, b)] -= 1.0;
        l[(b, a)] -= 1.0;
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
    }
    l
}

fn laplacian_connected(l: &DMatrix<f64>) -> bool {
    let n = l.nrows();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for w in 0..n {
            if w != u && l[(u, w)] != 0.0 && !seen[w] {
                seen[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == n
}

fn center_and_normalize(v: &mut DVector<f64>) {
    let mean = v.mean();
    v.add_scalar_mut(-mean);
    let norm = v.norm();
    if norm > 0.0 {
        *v /= norm;
    }
}

fn dense_fiedler(l: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(l.clone());
    let mut order: Vec<usize> = (0..l.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let k = order[1];
    let mut v = eig.eigenvectors.column(k).clone_owned();
    center_and_normalize(&mut v);
    (eig.eigenvalues[k], v)
}

/// Inverse iteration on `L + 11ᵀ`, which moves the constant eigenvector
/// out of the way and leaves `λ₂` as the smallest eigenvalue.
fn iterative_fiedler(l: &DMatrix<f64>) -> Option<(f64, DVector<f64>)> {
    let n = l.nrows();
    let shifted = l.add_scalar(1.0);
    let chol = shifted.cholesky()?;
    let mut v = DVector::from_fn(n, |i, _| {
        ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5
    });
    center_and_normalize(&mut v);
    let scale = l.amax().max(1.0);
    for _ in 0..10 * n {
        let mut next = chol.solve(&v);
        center_and_normalize(&mut next);
        let lambda = next.dot(&(l * &next));
        let resid = (l * &next - &next * lambda).norm();
        v = next;
        if resid < 1e-10 * scale {
            return Some((lambda, v));
        }
    }
    None
}

/// Second-smallest eigenpair of a graph Laplacian, with `‖v‖ = 1` and
/// `v ⊥ 1`.
pub fn fiedler_vector(l: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = l.nrows();
    if n < 2 || l.ncols() != n {
        return Err(Error::Domain(format!(
            "fiedler vector needs a square laplacian with n >= 2, got {}x{}",
            n,
            l.ncols()
        )));
    }
    if !laplacian_connected(l) {
        return Err(Error::Connectivity { lambda2: 0.0 });
    }
    let (lambda, v) = if n <= DENSE_LIMIT {
        dense_fiedler(l)
    } else {
        iterative_fiedler(l).unwrap_or_else(|| dense_fiedler(l))
    };
    if lambda < CONNECTIVITY_TOLERANCE {
        return Err(Error::Connectivity { lambda2: lambda });
    }
    Ok((lambda, v))
}

fn induced_laplacian(adj: &[Vec<usize>], nodes: &[usize]) -> DMatrix<f64> {
    let mut local = BTreeMap::new();
    for (i, &v) in nodes.iter().enumerate() {
        local.insert(v, i);
    }
    let k = nodes.len();
    let mut l = DMatrix::zeros(k, k);
    for (i, &v) in nodes.iter().enumerate() {
        for w in &adj[v] {
            if let Some(&j) = local.get(w) {
                l[(i, j)] = -1.0;
                l[(i, i)] += 1.0;
            }
        }
    }
    l
}

/// Splits sorted `nodes` by the Fiedler sign of their induced subgraph.
fn bisect_nodes(adj: &[Vec<usize>], nodes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let l = induced_laplacian(adj, nodes);
    let (_, mut v) = fiedler_vector(&l)?;
    // first decisive component positive, so the lowest node lands in A whenever it is not a tie
    if let Some(first) = v.iter().find(|x| x.abs() >= SIGN_TOLERANCE) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, &node) in nodes.iter().enumerate() {
        if v[i] >= SIGN_TOLERANCE {
            a.push(node);
        } else {
            b.push(node);
        }
    }
    if a.is_empty() || b.is_empty() {
        // only reachable through round-off; fall back to the median split
        let mut idx: Vec<usize> = (0..nodes.len()).collect();
        idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
        let half = nodes.len() / 2;
        a = idx[..half].iter().map(|&i| nodes[i]).collect();
        b = idx[half..].iter().map(|&i| nodes[i]).collect();
        a.sort_unstable();
        b.sort_unstable();
    }
    Ok((a, b))
}

/// Fiedler-sign bisection of a connected graph.
pub fn bisect(graph: &ConnectivityGraph) -> Result<(Vec<usize>, Vec<usize>)> {
    let nodes: Vec<usize> = (0..graph.n).collect();
    bisect_nodes(&graph.adjacency(), &nodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub assignment: Vec<usize>,
    pub sections: Vec<Vec<usize>>,
    /// `(a, b, crossing edges)` with `a < b`, sorted.
    pub section_adjacency: Vec<(usize, usize, usize)>,
}

impl PartitionResult {
    /// Builds sections and adjacency from a node→section map. Section ids
    /// must be `0..k` with every id used.
    pub fn from_assignment(graph: &ConnectivityGraph, assignment: Vec<usize>) -> Result<Self> {
        if assignment.len() != graph.n {
            return Err(Error::dim("section assignment", graph.n, assignment.len()));
        }
        let k = assignment.iter().map(|&s| s + 1).max().unwrap_or(0);
        let mut sections = vec![Vec::new(); k];
        for (node, &s) in assignment.iter().enumerate() {
            sections[s].push(node);
        }
        if let Some(empty) = sections.iter().position(Vec::is_empty) {
            return Err(Error::Domain(format!("section {empty} has no nodes")));
        }
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for &(a, b) in &graph.edges {
            let (sa, sb) = (assignment[a], assignment[b]);
            if sa != sb {
                *counts.entry((sa.min(sb), sa.max(sb))).or_default() += 1;
            }
        }
        Ok(Self {
            assignment,
            sections,
            section_adjacency: counts.into_iter().map(|((a, b), c)| (a, b, c)).collect(),
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csvio::writer(path)?;
        csvio::write_row(&mut w, path, ["node", "section"])?;
        for (node, s) in self.assignment.iter().enumerate() {
            csvio::write_row(&mut w, path, [node.to_string(), s.to_string()])?;
        }
        csvio::finish(w)
    }

    pub fn save_adjacency_csv(&self, path: &Path) -> Result<()> {
        let mut w = csvio::writer(path)?;
        csvio::write_row(&mut w, path, ["section_a", "section_b", "edges"])?;
        for &(a, b, c) in &self.section_adjacency {
            csvio::write_row(&mut w, path, [a.to_string(), b.to_string(), c.to_string()])?;
        }
        csvio::finish(w)
    }

    /// Reads a `node,section` file and rebuilds adjacency from `graph`.
    pub fn load_csv(path: &Path, graph: &ConnectivityGraph) -> Result<Self> {
        let mut table = Table::open(path)?;
        let node_col = table.column("node")?;
        let section_col = table.column("section")?;
        let name = table.path.clone();
        let mut assignment = vec![usize::MAX; graph.n];
        for row in table.rows() {
            let (line, rec) = row?;
            let node: usize = field(&name, line, &rec, node_col, "node index")?;
            let s: usize = field(&name, line, &rec, section_col, "section id")?;
            if node >= graph.n {
                return Err(Error::Parse {
                    path: name.clone(),
                    line,
                    message: format!("node {node} out of range for {} nodes", graph.n),
                });
            }
            assignment[node] = s;
        }
        if let Some(missing) = assignment.iter().position(|&s| s == usize::MAX) {
            return Err(Error::Domain(format!(
                "{name}: node {missing} has no section"
            )));
        }
        Self::from_assignment(graph, assignment)
    }
}

/// Recursively bisects every connected component for `depth` rounds.
/// Sets with fewer than `max(min_size, 2)` nodes are not split; sides that
/// come out disconnected are emitted as separate sections.
pub fn partition(
    graph: &ConnectivityGraph,
    depth: usize,
    min_size: usize,
) -> Result<PartitionResult> {
    let adj = graph.adjacency();
    let floor = min_size.max(2);
    let mut sets = graph.components();
    for _ in 0..depth {
        let split: Vec<Vec<Vec<usize>>> = sets
            .par_iter()
            .map(|set| -> Result<Vec<Vec<usize>>> {
                if set.len() < floor {
                    return Ok(vec![set.clone()]);
                }
                let (a, b) = bisect_nodes(&adj, set)?;
                let mut out = components_within(&adj, &a);
                out.extend(components_within(&adj, &b));
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let next: Vec<Vec<usize>> = split.into_iter().flatten().collect();
        if next.len() == sets.len() {
            sets = next;
            break;
        }
        sets = next;
    }
    sets.sort_by_key(|s| s[0]);
    let mut assignment = vec![0; graph.n];
    for (k, set) in sets.iter().enumerate() {
        for &v in set {
            assignment[v] = k;
        }
    }
    PartitionResult::from_assignment(graph, assignment)
}
