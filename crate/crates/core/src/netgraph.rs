//! Directed leader/follower communication topology.
//!
//! The leader is node 0; followers are 1..=N. Adjacency is 0/1 (unweighted
//! directed edges). JSON schema:
//! `{"followers": N, "edges": [[j, i], ...], "leader_links": [i, ...]}`
//! where an edge `[j, i]` means follower `i` receives from follower `j`, and
//! `leader_links` lists the followers that receive from the leader.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::lambda_min_symmetric;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Topology {
    pub followers: usize,
    pub edges: Vec<[usize; 2]>,
    pub leader_links: Vec<usize>,
}

impl Topology {
    pub fn new(followers: usize, edges: Vec<[usize; 2]>, leader_links: Vec<usize>) -> Result<Self> {
        let topo = Topology { followers, edges, leader_links };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.followers == 0 {
            return Err(Error::Config("topology needs at least one follower".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &[from, to] in &self.edges {
            if from == 0 || to == 0 {
                return Err(Error::Config(
                    "edges are follower-to-follower; use leader_links for node 0".into(),
                ));
            }
            if from > self.followers || to > self.followers {
                return Err(Error::Config(format!(
                    "edge [{from}, {to}] references a follower beyond {}",
                    self.followers
                )));
            }
            if from == to {
                return Err(Error::Config(format!("self-loop on follower {from}")));
            }
            if !seen.insert([from, to]) {
                return Err(Error::Config(format!("duplicate edge [{from}, {to}]")));
            }
        }
        let mut seen_links = std::collections::BTreeSet::new();
        for &i in &self.leader_links {
            if i == 0 || i > self.followers {
                return Err(Error::Config(format!("leader link to invalid follower {i}")));
            }
            if !seen_links.insert(i) {
                return Err(Error::Config(format!("duplicate leader link to follower {i}")));
            }
        }
        Ok(())
    }

    /// Follower-to-follower adjacency a_{ij} (0-based, a_{ij} = 1 iff i
    /// receives from j).
    pub fn adjacency(&self) -> DMatrix<f64> {
        let n = self.followers;
        let mut adj = DMatrix::zeros(n, n);
        for &[from, to] in &self.edges {
            adj[(to - 1, from - 1)] = 1.0;
        }
        adj
    }

    /// Leader links a_{i0} as a vector (0-based follower index).
    pub fn leader_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.followers);
        for &i in &self.leader_links {
            v[i - 1] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct LaplacianParts {
    /// Full (N+1)x(N+1) Laplacian with the leader as node 0 (leader row zero).
    pub full: DMatrix<f64>,
    /// Follower block L1.
    pub l1: DMatrix<f64>,
    /// Leader column L2 (so that L1·1 + L2 = 0 row-wise for the graph rows).
    pub l2: DVector<f64>,
}

/// Partitioned graph Laplacian: l_{ii} = Σ_j a_{ij}, l_{ij} = −a_{ij}.
pub fn build_laplacian(topo: &Topology) -> Result<LaplacianParts> {
    topo.validate()?;
    let n = topo.followers;
    let adj = topo.adjacency();
    let a0 = topo.leader_vector();
    let mut full = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        let degree = adj.row(i).sum() + a0[i];
        full[(i + 1, i + 1)] = degree;
        full[(i + 1, 0)] = -a0[i];
        for j in 0..n {
            if i != j {
                full[(i + 1, j + 1)] = -adj[(i, j)];
            }
        }
    }
    let l1 = full.view((1, 1), (n, n)).into_owned();
    let l2 = full.view((1, 0), (n, 1)).column(0).into_owned();
    Ok(LaplacianParts { full, l1, l2 })
}

/// True iff every follower is reachable from the leader along directed edges.
pub fn has_spanning_tree(topo: &Topology) -> bool {
    if topo.validate().is_err() {
        return false;
    }
    let n = topo.followers;
    let adj = topo.adjacency();
    let mut reached = vec![false; n];
    let mut queue: Vec<usize> = Vec::new();
    for &i in &topo.leader_links {
        if !reached[i - 1] {
            reached[i - 1] = true;
            queue.push(i - 1);
        }
    }
    while let Some(j) = queue.pop() {
        for i in 0..n {
            // i receives from j
            if adj[(i, j)] != 0.0 && !reached[i] {
                reached[i] = true;
                queue.push(i);
            }
        }
    }
    reached.iter().all(|&r| r)
}

/// The positive diagonal weights used by the stability analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainWeights {
    /// g = (L1ᵀ)⁻¹·1, entrywise positive for a nonsingular M-matrix L1.
    pub g: Vec<f64>,
    /// λ_min(G·L1 + L1ᵀ·G) with G = diag(g); positive under the same condition.
    pub lambda0: f64,
}

impl GainWeights {
    pub fn g_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.g)
    }
    pub fn g_min(&self) -> f64 {
        self.g.iter().cloned().fold(f64::INFINITY, f64::min)
    }
    pub fn g_max(&self) -> f64 {
        self.g.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// g = (L1ᵀ)⁻¹·1 and λ0 = λ_min(GL1 + L1ᵀG).
///
/// Fails when L1 is singular, some g_i ≤ 0, or λ0 ≤ 0 — all symptoms of a
/// topology without a leader-rooted spanning tree.
pub fn compute_weights(l1: &DMatrix<f64>) -> Result<GainWeights> {
    if l1.nrows() != l1.ncols() {
        return Err(Error::Dimension("L1 must be square".into()));
    }
    let n = l1.nrows();
    let ones = DVector::from_element(n, 1.0);
    let g = l1
        .transpose()
        .lu()
        .solve(&ones)
        .ok_or_else(|| Error::Assumption("L1 is singular; no M-matrix weight vector exists".into()))?;
    if g.iter().any(|&gi| gi <= 0.0) {
        return Err(Error::Assumption(
            "weight vector (L1^T)^{-1} 1 has non-positive entries; L1 is not a nonsingular M-matrix"
                .into(),
        ));
    }
    let g_diag = DMatrix::from_diagonal(&g);
    let m = &g_diag * l1 + l1.transpose() * &g_diag;
    let lambda0 = lambda_min_symmetric(&m)?;
    if lambda0 <= 0.0 {
        return Err(Error::Assumption(format!(
            "G L1 + L1^T G is not positive definite (lambda_min = {lambda0:.3e})"
        )));
    }
    Ok(GainWeights { g: g.iter().copied().collect(), lambda0 })
}

/// The topology used by the bundled scenarios: four followers, leader feeds
/// 1 and 2, with edges 1→3, 2→4, 3→2.
pub fn default_topology() -> Topology {
    Topology {
        followers: 4,
        edges: vec![[1, 3], [2, 4], [3, 2]],
        leader_links: vec![1, 2],
    }
}
