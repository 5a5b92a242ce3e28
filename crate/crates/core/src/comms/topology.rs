use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::CommsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    FullyConnected,
    Ring,
    Star,
    /// User-supplied adjacency.
    Mesh,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullyConnected => "fully_connected",
            Self::Ring => "ring",
            Self::Star => "star",
            Self::Mesh => "mesh",
        })
    }
}

impl FromStr for TopologyKind {
    type Err = CommsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fully_connected" | "full" | "complete" => Ok(Self::FullyConnected),
            "ring" => Ok(Self::Ring),
            "star" => Ok(Self::Star),
            "mesh" | "custom" => Ok(Self::Mesh),
            other => Err(CommsError::UnknownTopology(other.to_string())),
        }
    }
}

/// Undirected communication graph without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: usize,
    kind: TopologyKind,
    adjacency: Vec<Vec<bool>>,
    neighbours: Vec<Vec<usize>>,
    diameter: usize,
}

impl Topology {
    pub fn fully_connected(n: usize) -> Result<Self, CommsError> {
        Self::from_edges(n, TopologyKind::FullyConnected, |i, j| i != j)
    }

    pub fn ring(n: usize) -> Result<Self, CommsError> {
        Self::from_edges(n, TopologyKind::Ring, |i, j| i != j && ((i + 1) % n == j || (j + 1) % n == i))
    }

    pub fn star(n: usize, hub: usize) -> Result<Self, CommsError> {
        if n > 0 && hub >= n {
            return Err(CommsError::InvalidHub { hub, n });
        }
        Self::from_edges(n, TopologyKind::Star, |i, j| i != j && (i == hub || j == hub))
    }

    /// Custom graph; must be square, symmetric, loop-free and connected.
    pub fn mesh(adjacency: Vec<Vec<bool>>) -> Result<Self, CommsError> {
        let n = adjacency.len();
        if adjacency.iter().any(|row| row.len() != n) {
            return Err(CommsError::InvalidAdjacency("matrix is not square".into()));
        }
        for i in 0..n {
            if adjacency[i][i] {
                return Err(CommsError::InvalidAdjacency(format!("self-loop at agent {}", i + 1)));
            }
            for j in 0..n {
                if adjacency[i][j] != adjacency[j][i] {
                    return Err(CommsError::InvalidAdjacency(format!(
                        "asymmetric entry between agents {} and {}",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Self::from_edges(n, TopologyKind::Mesh, |i, j| adjacency[i][j])
    }

    fn from_edges(n: usize, kind: TopologyKind, edge: impl Fn(usize, usize) -> bool) -> Result<Self, CommsError> {
        if n == 0 {
            return Err(CommsError::EmptyFleet);
        }
        let adjacency: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| edge(i, j)).collect()).collect();
        let neighbours: Vec<Vec<usize>> = adjacency
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j).collect())
            .collect();
        let mut diameter = 0;
        for src in 0..n {
            let dist = bfs(&neighbours, src);
            for d in dist {
                match d {
                    Some(d) => diameter = diameter.max(d),
                    None => return Err(CommsError::Disconnected),
                }
            }
        }
        Ok(Self { n, kind, adjacency, neighbours, diameter })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbours[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbours.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }
}

fn bfs(neighbours: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; neighbours.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(v) = queue.pop_front() {
        let d = dist[v].unwrap_or(0);
        for &w in &neighbours[v] {
            if dist[w].is_none() {
                dist[w] = Some(d + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Builds a standard topology. Stars use agent 0 as hub unless `hub` says
/// otherwise; meshes need [`Topology::mesh`].
pub fn build_topology(kind: TopologyKind, n: usize, hub: Option<usize>) -> Result<Topology, CommsError> {
    match kind {
        TopologyKind::FullyConnected => Topology::fully_connected(n),
        TopologyKind::Ring => Topology::ring(n),
        TopologyKind::Star => Topology::star(n, hub.unwrap_or(0)),
        TopologyKind::Mesh => Err(CommsError::InvalidAdjacency("mesh topology needs an explicit adjacency".into())),
    }
}

/// Doubly stochastic consensus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(pub DMatrix<f64>);

impl WeightMatrix {
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

/// Metropolis-Hastings weights `1 / (1 + max(deg_i, deg_j))` on edges, with
/// the diagonal taking the remainder.
pub fn metropolis_weights(topology: &Topology) -> WeightMatrix {
    let n = topology.n();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut off = 0.0;
        for &j in topology.neighbours(i) {
            let wij = 1.0 / (1.0 + topology.degree(i).max(topology.degree(j)) as f64);
            w[(i, j)] = wij;
            off += wij;
        }
        w[(i, i)] = 1.0 - off;
    }
    WeightMatrix(w)
}
