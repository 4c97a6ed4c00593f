//! Undirected coupling graph over agents `0..M`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references an agent outside 0..{2}")]
    UnknownAgent(usize, usize, usize),
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) listed more than once")]
    DuplicateEdge(usize, usize),
    #[error("graph with {0} agents is not connected")]
    Disconnected(usize),
    #[error("graph must contain at least one agent")]
    Empty,
}

/// Neighbor lists are sorted ascending, so "neighbor slot k" of an agent is
/// a stable index used by problem specs and message routing alike.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGraph {
    neighbors: Vec<Vec<usize>>,
}

impl CouplingGraph {
    /// Builds a graph from an edge list. An edge may appear only once, in
    /// either orientation.
    pub fn new(agents: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if agents == 0 {
            return Err(GraphError::Empty);
        }
        let mut neighbors = vec![Vec::new(); agents];
        for &(a, b) in edges {
            if a >= agents || b >= agents {
                return Err(GraphError::UnknownAgent(a, b, agents));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if neighbors[a].contains(&b) {
                return Err(GraphError::DuplicateEdge(a, b));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        let graph = Self { neighbors };
        if !graph.is_connected() {
            return Err(GraphError::Disconnected(agents));
        }
        Ok(graph)
    }

    pub fn single() -> Self {
        Self { neighbors: vec![Vec::new()] }
    }

    /// Path graph `0 - 1 - ... - (M-1)`.
    pub fn path(agents: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..agents).map(|i| (i - 1, i)).collect();
        Self::new(agents, &edges)
    }

    pub fn agent_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        self.neighbors
            .get(a)
            .is_some_and(|n| n.binary_search(&b).is_ok())
    }

    /// Position of `neighbor` within the sorted neighbor list of `agent`.
    pub fn slot(&self, agent: usize, neighbor: usize) -> Option<usize> {
        self.neighbors.get(agent)?.binary_search(&neighbor).ok()
    }

    /// Undirected edges with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, n) in self.neighbors.iter().enumerate() {
            out.extend(n.iter().filter(|&&b| a < b).map(|&b| (a, b)));
        }
        out
    }

    /// Both orientations of every edge, sorted by `(from, to)`.
    pub fn directed_channels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, n) in self.neighbors.iter().enumerate() {
            out.extend(n.iter().map(|&b| (a, b)));
        }
        out
    }

    fn is_connected(&self) -> bool {
        let m = self.neighbors.len();
        let mut seen = vec![false; m];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for &b in &self.neighbors[a] {
                if !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}
