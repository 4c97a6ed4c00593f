//! All agents of a graph as one neighborless NLP over the stacked vector.

use nalgebra::{DMatrix, DVector};

use crate::graph::CouplingGraph;
use crate::problem::{AgentNlp, Block, PrimalDualPoint};

pub struct JointNlp<'a, A: AgentNlp> {
    graph: CouplingGraph,
    agents: &'a [A],
    x_off: Vec<usize>,
    eq_off: Vec<usize>,
    ineq_off: Vec<usize>,
}

fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut off = vec![0];
    for d in dims {
        off.push(off.last().unwrap() + d);
    }
    off
}

impl<'a, A: AgentNlp> JointNlp<'a, A> {
    pub fn new(graph: &CouplingGraph, agents: &'a [A]) -> Self {
        assert_eq!(graph.agent_count(), agents.len());
        Self {
            graph: graph.clone(),
            agents,
            x_off: offsets(agents.iter().map(|a| a.dim())),
            eq_off: offsets(agents.iter().map(|a| a.n_eq())),
            ineq_off: offsets(agents.iter().map(|a| a.n_ineq())),
        }
    }

    fn part<'v>(&self, x: &'v [f64], i: usize) -> &'v [f64] {
        &x[self.x_off[i]..self.x_off[i + 1]]
    }

    fn nb<'v>(&self, x: &'v [f64], i: usize) -> Vec<&'v [f64]> {
        self.graph.neighbors(i).iter().map(|&j| self.part(x, j)).collect()
    }

    fn stack_rows(&self, off: &[usize], x: &[f64], f: impl Fn(&A, &[f64], &[&[f64]]) -> DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(*off.last().unwrap());
        for (i, a) in self.agents.iter().enumerate() {
            out.rows_mut(off[i], off[i + 1] - off[i]).copy_from(&f(a, self.part(x, i), &self.nb(x, i)));
        }
        out
    }

    fn stack_jacobian(&self, off: &[usize], x: &[f64], f: impl Fn(&A, &[f64], &[&[f64]], Block) -> DMatrix<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(*off.last().unwrap(), self.dim());
        for (i, a) in self.agents.iter().enumerate() {
            let rows = off[i + 1] - off[i];
            if rows == 0 {
                continue;
            }
            let (xi, nb) = (self.part(x, i), self.nb(x, i));
            jac.view_mut((off[i], self.x_off[i]), (rows, a.dim())).copy_from(&f(a, xi, &nb, Block::Own));
            for (slot, &j) in self.graph.neighbors(i).iter().enumerate() {
                let b = f(a, xi, &nb, Block::Neighbor(slot));
                jac.view_mut((off[i], self.x_off[j]), (rows, b.ncols())).copy_from(&b);
            }
        }
        jac
    }

    /// Joint primal-dual vector of per-agent points.
    pub fn join(&self, points: &[PrimalDualPoint]) -> PrimalDualPoint {
        let cat = |f: &dyn Fn(&PrimalDualPoint) -> &DVector<f64>| {
            DVector::from_vec(points.iter().flat_map(|p| f(p).iter().copied()).collect())
        };
        PrimalDualPoint { x: cat(&|p| &p.x), lambda: cat(&|p| &p.lambda), mu: cat(&|p| &p.mu) }
    }

    /// Per-agent points of a joint primal-dual vector.
    pub fn split(&self, p: &PrimalDualPoint) -> Vec<PrimalDualPoint> {
        (0..self.agents.len())
            .map(|i| {
                let cut = |v: &DVector<f64>, off: &[usize]| v.rows(off[i], off[i + 1] - off[i]).into_owned();
                PrimalDualPoint { x: cut(&p.x, &self.x_off), lambda: cut(&p.lambda, &self.eq_off), mu: cut(&p.mu, &self.ineq_off) }
            })
            .collect()
    }
}

impl<A: AgentNlp> AgentNlp for JointNlp<'_, A> {
    fn dim(&self) -> usize {
        *self.x_off.last().unwrap()
    }
    fn neighbor_dims(&self) -> Vec<usize> {
        Vec::new()
    }
    fn n_eq(&self) -> usize {
        *self.eq_off.last().unwrap()
    }
    fn n_ineq(&self) -> usize {
        *self.ineq_off.last().unwrap()
    }

    fn cost(&self, x: &[f64], _: &[&[f64]]) -> f64 {
        self.agents.iter().enumerate().map(|(i, a)| a.cost(self.part(x, i), &self.nb(x, i))).sum()
    }

    fn eq(&self, x: &[f64], _: &[&[f64]]) -> DVector<f64> {
        self.stack_rows(&self.eq_off, x, |a, x, nb| a.eq(x, nb))
    }

    fn ineq(&self, x: &[f64], _: &[&[f64]]) -> DVector<f64> {
        self.stack_rows(&self.ineq_off, x, |a, x, nb| a.ineq(x, nb))
    }

    fn cost_gradient(&self, x: &[f64], _: &[&[f64]], _: Block) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for (i, a) in self.agents.iter().enumerate() {
            let (xi, nb) = (self.part(x, i), self.nb(x, i));
            let own = a.cost_gradient(xi, &nb, Block::Own);
            g.rows_mut(self.x_off[i], own.len()).iter_mut().zip(own.iter()).for_each(|(g, v)| *g += v);
            for (slot, &j) in self.graph.neighbors(i).iter().enumerate() {
                let gj = a.cost_gradient(xi, &nb, Block::Neighbor(slot));
                g.rows_mut(self.x_off[j], gj.len()).iter_mut().zip(gj.iter()).for_each(|(g, v)| *g += v);
            }
        }
        g
    }

    fn eq_jacobian(&self, x: &[f64], _: &[&[f64]], _: Block) -> DMatrix<f64> {
        self.stack_jacobian(&self.eq_off, x, |a, x, nb, wrt| a.eq_jacobian(x, nb, wrt))
    }

    fn ineq_jacobian(&self, x: &[f64], _: &[&[f64]], _: Block) -> DMatrix<f64> {
        self.stack_jacobian(&self.ineq_off, x, |a, x, nb, wrt| a.ineq_jacobian(x, nb, wrt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{check_agent_derivatives, QuadraticAgent};

    #[test]
    fn joint_gradients_match_finite_differences() {
        let graph = CouplingGraph::path(2).unwrap();
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a0 = QuadraticAgent::new(1, vec![1], h.clone(), DVector::from_vec(vec![1.0, 0.0]))
            .with_inequalities(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), DVector::from_element(1, 1.0));
        let a1 = QuadraticAgent::new(1, vec![1], h, DVector::from_vec(vec![-1.0, 0.3]))
            .with_equalities(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), DVector::from_element(1, 0.2));
        let agents = vec![a0, a1];
        let joint = JointNlp::new(&graph, &agents);
        assert_eq!((joint.dim(), joint.n_eq(), joint.n_ineq()), (2, 1, 1));
        let report = check_agent_derivatives(&joint, &[(vec![0.3, -0.7], vec![])]);
        assert!(report.passed(1e-7), "{report:?}");
        let p = PrimalDualPoint { x: DVector::from_vec(vec![1.0, 2.0]), lambda: DVector::from_element(1, 3.0), mu: DVector::from_element(1, 4.0) };
        let parts = joint.split(&p);
        assert_eq!(parts[1].lambda[0], 3.0);
        assert_eq!(parts[0].mu[0], 4.0);
        assert_eq!(joint.join(&parts), p);
    }
}
