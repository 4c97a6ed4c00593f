//! All agents of a graph merged into one neighborless OCP, the central
//! problem the distributed scheme decomposes.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use super::{AgentOcp, AgentTrajectorySet};
use crate::graph::CouplingGraph;
use crate::grid::{TimeGrid, Trajectory};
use crate::problem::Block;

pub struct StackedOcp<'a, A: AgentOcp> {
    agents: &'a [A],
    graph: CouplingGraph,
    x_off: Vec<usize>,
    u_off: Vec<usize>,
}

fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut off = vec![0];
    for d in dims {
        off.push(off.last().unwrap() + d);
    }
    off
}

impl<'a, A: AgentOcp> StackedOcp<'a, A> {
    pub fn new(graph: &CouplingGraph, agents: &'a [A]) -> Self {
        assert_eq!(graph.agent_count(), agents.len());
        Self {
            agents,
            graph: graph.clone(),
            x_off: offsets(agents.iter().map(|a| a.state_dim())),
            u_off: offsets(agents.iter().map(|a| a.control_dim())),
        }
    }

    fn xs<'v>(&self, x: &'v [f64]) -> Vec<&'v [f64]> {
        self.x_off.windows(2).map(|w| &x[w[0]..w[1]]).collect()
    }

    fn nbs<'v>(&self, i: usize, parts: &[&'v [f64]]) -> Vec<&'v [f64]> {
        self.graph.neighbors(i).iter().map(|&j| parts[j]).collect()
    }

    fn concat(&self, parts: impl Iterator<Item = DVector<f64>>) -> DVector<f64> {
        let v: Vec<f64> = parts.flat_map(|p| p.as_slice().to_vec()).collect();
        DVector::from_vec(v)
    }

    pub fn state_offsets(&self) -> &[usize] {
        &self.x_off
    }

    pub fn control_offsets(&self) -> &[usize] {
        &self.u_off
    }

    /// Stacks per-agent trajectories into one.
    pub fn stack(&self, parts: &[&Trajectory]) -> Trajectory {
        let grid = *parts[0].grid();
        let dim = parts.iter().map(|t| t.dim()).sum();
        Trajectory::from_fn(grid, dim, |k, _| parts.iter().flat_map(|t| t.node(k).to_vec()).collect())
    }

    pub fn stack_sets(&self, sets: &[AgentTrajectorySet]) -> AgentTrajectorySet {
        AgentTrajectorySet {
            x: self.stack(&sets.iter().map(|s| &s.x).collect::<Vec<_>>()),
            lambda: self.stack(&sets.iter().map(|s| &s.lambda).collect::<Vec<_>>()),
            u: self.stack(&sets.iter().map(|s| &s.u).collect::<Vec<_>>()),
        }
    }

    /// Splits stacked series back into per-agent sets.
    pub fn split(&self, t: &AgentTrajectorySet) -> Vec<AgentTrajectorySet> {
        let grid: TimeGrid = *t.grid();
        let cut = |tr: &Trajectory, off: &[usize], i: usize| {
            Trajectory::from_fn(grid, off[i + 1] - off[i], |k, _| tr.node(k)[off[i]..off[i + 1]].to_vec())
        };
        (0..self.agents.len())
            .map(|i| AgentTrajectorySet {
                x: cut(&t.x, &self.x_off, i),
                lambda: cut(&t.lambda, &self.x_off, i),
                u: cut(&t.u, &self.u_off, i),
            })
            .collect()
    }
}

impl<A: AgentOcp> AgentOcp for StackedOcp<'_, A> {
    fn state_dim(&self) -> usize {
        *self.x_off.last().unwrap()
    }
    fn control_dim(&self) -> usize {
        *self.u_off.last().unwrap()
    }
    fn neighbor_dims(&self) -> Vec<usize> {
        Vec::new()
    }

    fn drift(&self, x: &[f64], _: &[&[f64]]) -> DVector<f64> {
        let parts = self.xs(x);
        self.concat(self.agents.iter().enumerate().map(|(i, a)| a.drift(parts[i], &self.nbs(i, &parts))))
    }

    fn drift_jacobian(&self, x: &[f64], _: &[&[f64]], _: Block) -> DMatrix<f64> {
        let parts = self.xs(x);
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, n);
        for (i, a) in self.agents.iter().enumerate() {
            let nb = self.nbs(i, &parts);
            let (r0, rn) = (self.x_off[i], a.state_dim());
            jac.view_mut((r0, r0), (rn, rn)).copy_from(&a.drift_jacobian(parts[i], &nb, Block::Own));
            for (slot, &j) in self.graph.neighbors(i).iter().enumerate() {
                let b = a.drift_jacobian(parts[i], &nb, Block::Neighbor(slot));
                jac.view_mut((r0, self.x_off[j]), (rn, b.ncols())).copy_from(&b);
            }
        }
        jac
    }

    fn input_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let parts = self.xs(x);
        let mut b = DMatrix::zeros(self.state_dim(), self.control_dim());
        for (i, a) in self.agents.iter().enumerate() {
            let bi = a.input_matrix(parts[i]);
            b.view_mut((self.x_off[i], self.u_off[i]), bi.shape()).copy_from(&bi);
        }
        b
    }

    fn input_gradient(&self, x: &[f64], u: &[f64], lambda: &[f64]) -> DVector<f64> {
        let parts = self.xs(x);
        let lam = self.xs(lambda);
        self.concat(self.agents.iter().enumerate().map(|(i, a)| {
            a.input_gradient(parts[i], &u[self.u_off[i]..self.u_off[i + 1]], lam[i])
        }))
    }

    fn stage_cost(&self, x: &[f64], _: &[&[f64]]) -> f64 {
        let parts = self.xs(x);
        self.agents.iter().enumerate().map(|(i, a)| a.stage_cost(parts[i], &self.nbs(i, &parts))).sum()
    }

    fn stage_cost_gradient(&self, x: &[f64], _: &[&[f64]], _: Block) -> DVector<f64> {
        let parts = self.xs(x);
        let mut g = DVector::zeros(self.state_dim());
        for (i, a) in self.agents.iter().enumerate() {
            let nb = self.nbs(i, &parts);
            let own = a.stage_cost_gradient(parts[i], &nb, Block::Own);
            g.rows_mut(self.x_off[i], own.len()).add_assign(&own);
            for (slot, &j) in self.graph.neighbors(i).iter().enumerate() {
                let gj = a.stage_cost_gradient(parts[i], &nb, Block::Neighbor(slot));
                g.rows_mut(self.x_off[j], gj.len()).add_assign(&gj);
            }
        }
        g
    }

    fn control_weight(&self) -> DVector<f64> {
        self.concat(self.agents.iter().map(|a| a.control_weight()))
    }
    fn u_ref(&self) -> DVector<f64> {
        self.concat(self.agents.iter().map(|a| a.u_ref()))
    }
    fn u_min(&self) -> DVector<f64> {
        self.concat(self.agents.iter().map(|a| a.u_min()))
    }
    fn u_max(&self) -> DVector<f64> {
        self.concat(self.agents.iter().map(|a| a.u_max()))
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        let parts = self.xs(x);
        self.agents.iter().enumerate().map(|(i, a)| a.terminal_cost(parts[i])).sum()
    }

    fn terminal_gradient(&self, x: &[f64]) -> DVector<f64> {
        let parts = self.xs(x);
        self.concat(self.agents.iter().enumerate().map(|(i, a)| a.terminal_gradient(parts[i])))
    }
}
