//! Communication graphs and the weights devices apply to their neighbours.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, tag};

/// Resampling budget for random graph families.
pub const MAX_GRAPH_RETRIES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("a communication graph needs at least 2 devices, got {0}")]
    TooFewDevices(usize),
    #[error("a grid needs a composite device count (rows, cols >= 2), got {0}")]
    NotAGrid(usize),
    #[error("edge probability {0} must lie in (0, 1]")]
    BadProbability(f64),
    #[error("no connected graph after {0} attempts")]
    Disconnected(usize),
    #[error("size vector has {found} entries for {expected} devices")]
    SizeMismatch { expected: usize, found: usize },
    #[error("device {0} has an empty shard")]
    EmptyShard(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphKind {
    Complete,
    Ring,
    /// `rows x cols` lattice with 4-neighbourhoods; `rows` is the largest
    /// divisor of K not above `sqrt(K)` and must be at least 2.
    Grid,
    /// Each edge present independently with probability `p`, resampled until
    /// connected.
    ErdosRenyi { p: f64 },
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphKind::Complete => write!(f, "complete"),
            GraphKind::Ring => write!(f, "ring"),
            GraphKind::Grid => write!(f, "grid"),
            GraphKind::ErdosRenyi { p } => write!(f, "erdos_renyi({p})"),
        }
    }
}

/// Undirected simple graph over devices `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Vec<Vec<bool>>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list. Self-loops are ignored and duplicate
    /// edges collapse.
    pub fn from_edges(k: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![vec![false; k]; k];
        for &(a, b) in edges {
            if a != b {
                adjacency[a][b] = true;
                adjacency[b][a] = true;
            }
        }
        let neighbors = adjacency
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, &e)| e).map(|(j, _)| j).collect())
            .collect();
        Self { adjacency, neighbors }
    }

    pub fn num_devices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a][b]
    }

    /// Neighbours of `k` in increasing order.
    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbors[k].len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }

    pub fn is_connected(&self) -> bool {
        let k = self.num_devices();
        let mut parent: Vec<usize> = (0..k).collect();
        fn root(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = k;
        for (a, b) in self.edges() {
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                components -= 1;
            }
        }
        components <= 1
    }

    /// One `a b` line per undirected edge with `a < b`.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (a, b) in self.edges() {
            writeln!(out, "{a} {b}")?;
        }
        Ok(())
    }
}

fn grid_dims(k: usize) -> Option<(usize, usize)> {
    let rows = (2..=k).take_while(|r| r * r <= k).filter(|&r| k.is_multiple_of(r)).last()?;
    Some((rows, k / rows))
}

pub fn build_graph(kind: GraphKind, k: usize, seed: u64) -> Result<Graph, TopologyError> {
    if k < 2 {
        return Err(TopologyError::TooFewDevices(k));
    }
    let graph = match kind {
        GraphKind::Complete => {
            let edges: Vec<_> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
            Graph::from_edges(k, &edges)
        }
        GraphKind::Ring => {
            let edges: Vec<_> = (0..k).map(|a| (a, (a + 1) % k)).collect();
            Graph::from_edges(k, &edges)
        }
        GraphKind::Grid => {
            let (rows, cols) = grid_dims(k).ok_or(TopologyError::NotAGrid(k))?;
            let mut edges = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    let v = r * cols + c;
                    if c + 1 < cols {
                        edges.push((v, v + 1));
                    }
                    if r + 1 < rows {
                        edges.push((v, v + cols));
                    }
                }
            }
            Graph::from_edges(k, &edges)
        }
        GraphKind::ErdosRenyi { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(TopologyError::BadProbability(p));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, tag::GRAPH]));
            let mut found = None;
            for _ in 0..MAX_GRAPH_RETRIES {
                let mut edges = Vec::new();
                for a in 0..k {
                    for b in a + 1..k {
                        if rng.gen_bool(p) {
                            edges.push((a, b));
                        }
                    }
                }
                let g = Graph::from_edges(k, &edges);
                if g.is_connected() {
                    found = Some(g);
                    break;
                }
            }
            found.ok_or(TopologyError::Disconnected(MAX_GRAPH_RETRIES))?
        }
    };
    if !graph.is_connected() {
        return Err(TopologyError::Disconnected(1));
    }
    Ok(graph)
}

fn check_sizes(g: &Graph, n: &[usize]) -> Result<(), TopologyError> {
    if n.len() != g.num_devices() {
        return Err(TopologyError::SizeMismatch {
            expected: g.num_devices(),
            found: n.len(),
        });
    }
    match n.iter().position(|&x| x == 0) {
        Some(k) => Err(TopologyError::EmptyShard(k)),
        None => Ok(()),
    }
}

/// Row-stochastic consensus weights; `alpha[[k, j]]` is what device `k`
/// applies to device `j`'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub alpha: Array2<f64>,
}

/// Neighbour-only weights used for the affinity bias; rows sum to one and the
/// diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub beta: Array2<f64>,
}

/// Data-size weighted mixing: `alpha_kj = n_j / (n_k + sum_{i in N(k)} n_i)`
/// for `j` in `N(k)` and for `j = k`.
pub fn mixing_weights(g: &Graph, n: &[usize]) -> Result<MixingMatrix, TopologyError> {
    check_sizes(g, n)?;
    let k = g.num_devices();
    let mut alpha = Array2::zeros((k, k));
    for d in 0..k {
        let denom = (n[d] + g.neighbors(d).iter().map(|&i| n[i]).sum::<usize>()) as f64;
        alpha[[d, d]] = n[d] as f64 / denom;
        for &j in g.neighbors(d) {
            alpha[[d, j]] = n[j] as f64 / denom;
        }
    }
    Ok(MixingMatrix { alpha })
}

/// `beta_kj = n_j / sum_{i in N(k)} n_i` for neighbours `j`, zero elsewhere.
pub fn affinity_weights(g: &Graph, n: &[usize]) -> Result<AffinityMatrix, TopologyError> {
    check_sizes(g, n)?;
    let k = g.num_devices();
    let mut beta = Array2::zeros((k, k));
    for d in 0..k {
        let denom = g.neighbors(d).iter().map(|&i| n[i]).sum::<usize>() as f64;
        for &j in g.neighbors(d) {
            beta[[d, j]] = n[j] as f64 / denom;
        }
    }
    Ok(AffinityMatrix { beta })
}
