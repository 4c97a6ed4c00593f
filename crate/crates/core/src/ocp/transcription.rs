//! Dense transcription of a local OCP into an [`AgentNlp`].
//!
//! Decision vector `[x_1, ..., x_N, u_0, ..., u_N]`; `x_0` is fixed data.
//! Every Heun step is an equality `x_{k+1} - x_k - h/2 (F_k + F(x̃)) = 0`,
//! the control box gives `2 (N+1) n_u` inequalities. The running cost is
//! integrated with the same two Heun stages as the states,
//! `h/2 (l⁰(x_k) + l⁰(x̃_k))`, the control cost by the trapezoid rule; with
//! `l⁰` at `x_{k+1}` instead the end-node controls of the transcription drift
//! from the continuous optimality conditions by O(h). A neighbor's block is its
//! own transcribed vector, so the static scheme can run on these agents
//! directly.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use super::{AgentOcp, AgentTrajectorySet};
use crate::grid::{TimeGrid, Trajectory};
use crate::problem::{AgentNlp, Block};

pub struct TranscribedOcp<'a, A: AgentOcp + ?Sized> {
    agent: &'a A,
    grid: TimeGrid,
    x0: DVector<f64>,
    neighbor_x0: Vec<DVector<f64>>,
    neighbor_controls: Vec<usize>,
}

/// Length of a transcribed decision vector.
pub fn transcribed_dim(grid: &TimeGrid, n_x: usize, n_u: usize) -> usize {
    grid.intervals() * n_x + grid.nodes() * n_u
}

impl<'a, A: AgentOcp + ?Sized> TranscribedOcp<'a, A> {
    /// `neighbor_x0[k]` and `neighbor_controls[k]` describe neighbor slot `k`.
    pub fn new(
        agent: &'a A,
        grid: TimeGrid,
        x0: DVector<f64>,
        neighbor_x0: Vec<DVector<f64>>,
        neighbor_controls: Vec<usize>,
    ) -> Self {
        assert_eq!(x0.len(), agent.state_dim());
        assert_eq!(neighbor_x0.len(), agent.neighbor_dims().len());
        assert_eq!(neighbor_controls.len(), neighbor_x0.len());
        Self { agent, grid, x0, neighbor_x0, neighbor_controls }
    }

    fn nx(&self) -> usize {
        self.agent.state_dim()
    }

    fn nu(&self) -> usize {
        self.agent.control_dim()
    }

    fn state<'v>(v: &'v [f64], x0: &'v [f64], n: usize, k: usize) -> &'v [f64] {
        if k == 0 {
            x0
        } else {
            &v[(k - 1) * n..k * n]
        }
    }

    fn own_state<'v>(&'v self, v: &'v [f64], k: usize) -> &'v [f64] {
        Self::state(v, self.x0.as_slice(), self.nx(), k)
    }

    fn own_control<'v>(&self, v: &'v [f64], k: usize) -> &'v [f64] {
        let base = self.grid.intervals() * self.nx() + k * self.nu();
        &v[base..base + self.nu()]
    }

    fn neighbor_states<'v>(&'v self, nb: &[&'v [f64]], k: usize) -> Vec<&'v [f64]> {
        let dims = self.agent.neighbor_dims();
        nb.iter()
            .zip(&self.neighbor_x0)
            .zip(&dims)
            .map(|((v, x0), &d)| Self::state(v, x0.as_slice(), d, k))
            .collect()
    }

    fn rhs(&self, x: &[f64], u: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        self.agent.drift(x, nb) + self.agent.input_matrix(x) * DVector::from_column_slice(u)
    }

    /// `∂F/∂x` including the state dependence of `B(x) u`.
    fn rhs_jacobian(&self, x: &[f64], u: &[f64], nb: &[&[f64]]) -> DMatrix<f64> {
        let n = self.nx();
        let mut a = self.agent.drift_jacobian(x, nb, Block::Own);
        for r in 0..n {
            let mut e = vec![0.0; n];
            e[r] = 1.0;
            let row = self.agent.input_gradient(x, u, &e);
            for c in 0..n {
                a[(r, c)] += row[c];
            }
        }
        a
    }

    /// Heun predictor `x̃ = x_k + h F(x_k, u_k, x_N,k)`.
    fn predictor(&self, v: &[f64], nb: &[&[f64]], k: usize) -> DVector<f64> {
        let x = self.own_state(v, k);
        let f1 = self.rhs(x, self.own_control(v, k), &self.neighbor_states(nb, k));
        DVector::from_column_slice(x) + f1 * self.grid.step()
    }

    /// Own decision vector of a trajectory set (node 0 of `x` is dropped).
    pub fn pack(&self, t: &AgentTrajectorySet) -> Vec<f64> {
        let mut v = t.x.without_initial().to_vec();
        v.extend_from_slice(t.u.as_slice());
        v
    }

    /// Trajectories of a decision vector. The adjoint is read off the Heun
    /// multipliers as `λ(τ_{k+1}) ≈ -ν_k`, with `λ(τ_0)` copied from node 1.
    pub fn unpack(&self, v: &[f64], nu: &[f64]) -> AgentTrajectorySet {
        let n = self.nx();
        let x = Trajectory::from_fn(self.grid, n, |k, _| self.own_state(v, k).to_vec());
        let u = Trajectory::from_fn(self.grid, self.nu(), |k, _| self.own_control(v, k).to_vec());
        let lambda = Trajectory::from_fn(self.grid, n, |k, _| {
            let j = k.max(1) - 1;
            nu[j * n..(j + 1) * n].iter().map(|v| -v).collect()
        });
        AgentTrajectorySet { x, lambda, u }
    }
}

impl<A: AgentOcp + ?Sized> AgentNlp for TranscribedOcp<'_, A> {
    fn dim(&self) -> usize {
        transcribed_dim(&self.grid, self.nx(), self.nu())
    }

    fn neighbor_dims(&self) -> Vec<usize> {
        self.agent
            .neighbor_dims()
            .iter()
            .zip(&self.neighbor_controls)
            .map(|(&n, &m)| transcribed_dim(&self.grid, n, m))
            .collect()
    }

    fn n_eq(&self) -> usize {
        self.grid.intervals() * self.nx()
    }

    fn n_ineq(&self) -> usize {
        2 * self.grid.nodes() * self.nu()
    }

    fn cost(&self, v: &[f64], nb: &[&[f64]]) -> f64 {
        let r = self.agent.control_weight();
        let ur = self.agent.u_ref();
        let h = self.grid.step();
        let quad: Vec<f64> = (0..self.grid.nodes())
            .map(|k| {
                let u = self.own_control(v, k);
                (0..u.len()).map(|c| 0.5 * r[c] * (u[c] - ur[c]).powi(2)).sum()
            })
            .collect();
        let running: f64 = (0..self.grid.intervals())
            .map(|k| {
                let pred = self.predictor(v, nb, k);
                self.agent.stage_cost(self.own_state(v, k), &self.neighbor_states(nb, k))
                    + self.agent.stage_cost(pred.as_slice(), &self.neighbor_states(nb, k + 1))
            })
            .sum();
        0.5 * h * running + self.grid.integrate(&quad) + self.agent.terminal_cost(self.own_state(v, self.grid.intervals()))
    }

    fn eq(&self, v: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        let n = self.nx();
        let h = self.grid.step();
        let mut c = DVector::zeros(self.n_eq());
        for k in 0..self.grid.intervals() {
            let nbk = self.neighbor_states(nb, k);
            let nbk1 = self.neighbor_states(nb, k + 1);
            let xk = self.own_state(v, k);
            let f1 = self.rhs(xk, self.own_control(v, k), &nbk);
            let pred = DVector::from_column_slice(xk) + &f1 * h;
            let f2 = self.rhs(pred.as_slice(), self.own_control(v, k + 1), &nbk1);
            let step = DVector::from_column_slice(self.own_state(v, k + 1))
                - DVector::from_column_slice(xk)
                - (f1 + f2) * (0.5 * h);
            c.rows_mut(k * n, n).copy_from(&step);
        }
        c
    }

    fn ineq(&self, v: &[f64], _: &[&[f64]]) -> DVector<f64> {
        let m = self.nu();
        let (lo, hi) = (self.agent.u_min(), self.agent.u_max());
        let mut c = DVector::zeros(self.n_ineq());
        for k in 0..self.grid.nodes() {
            let u = self.own_control(v, k);
            for j in 0..m {
                c[2 * (k * m + j)] = lo[j] - u[j];
                c[2 * (k * m + j) + 1] = u[j] - hi[j];
            }
        }
        c
    }

    fn cost_gradient(&self, v: &[f64], nb: &[&[f64]], wrt: Block) -> DVector<f64> {
        let n = self.nx();
        let h = self.grid.step();
        let last = self.grid.intervals();
        match wrt {
            Block::Own => {
                let m = self.nu();
                let r = self.agent.control_weight();
                let ur = self.agent.u_ref();
                let mut g = DVector::zeros(self.dim());
                for k in 0..last {
                    let (xk, uk) = (self.own_state(v, k), self.own_control(v, k));
                    let nbk = self.neighbor_states(nb, k);
                    let pred = self.predictor(v, nb, k);
                    let l2 = self.agent.stage_cost_gradient(pred.as_slice(), &self.neighbor_states(nb, k + 1), Block::Own);
                    let du = self.agent.input_matrix(xk).transpose() * &l2 * (0.5 * h * h);
                    g.rows_mut(last * n + k * m, m).add_assign(&du);
                    if k > 0 {
                        let a1 = self.rhs_jacobian(xk, uk, &nbk);
                        let gk = (self.agent.stage_cost_gradient(xk, &nbk, Block::Own) + &l2 + a1.transpose() * &l2 * h)
                            * (0.5 * h);
                        g.rows_mut((k - 1) * n, n).add_assign(&gk);
                    }
                }
                let vt = self.agent.terminal_gradient(self.own_state(v, last));
                g.rows_mut((last - 1) * n, n).add_assign(&vt);
                for k in 0..self.grid.nodes() {
                    let u = self.own_control(v, k);
                    for j in 0..m {
                        g[last * n + k * m + j] += self.grid.weight(k) * r[j] * (u[j] - ur[j]);
                    }
                }
                g
            }
            Block::Neighbor(s) => {
                let d = self.agent.neighbor_dims()[s];
                let mut g = DVector::zeros(self.neighbor_dims()[s]);
                for k in 0..last {
                    let xk = self.own_state(v, k);
                    let nbk = self.neighbor_states(nb, k);
                    let nbk1 = self.neighbor_states(nb, k + 1);
                    let pred = self.predictor(v, nb, k);
                    let l2 = self.agent.stage_cost_gradient(pred.as_slice(), &nbk1, Block::Own);
                    let direct = self.agent.stage_cost_gradient(pred.as_slice(), &nbk1, Block::Neighbor(s)) * (0.5 * h);
                    g.rows_mut(k * d, d).add_assign(&direct);
                    if k > 0 {
                        let n1 = self.agent.drift_jacobian(xk, &nbk, Block::Neighbor(s));
                        let gk = (self.agent.stage_cost_gradient(xk, &nbk, Block::Neighbor(s)) + n1.transpose() * &l2 * h)
                            * (0.5 * h);
                        g.rows_mut((k - 1) * d, d).add_assign(&gk);
                    }
                }
                g
            }
        }
    }

    fn eq_jacobian(&self, v: &[f64], nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        let n = self.nx();
        let h = self.grid.step();
        let last = self.grid.intervals();
        let id = DMatrix::<f64>::identity(n, n);
        let cols = match wrt {
            Block::Own => self.dim(),
            Block::Neighbor(s) => self.neighbor_dims()[s],
        };
        let mut jac = DMatrix::zeros(self.n_eq(), cols);
        for k in 0..last {
            let nbk = self.neighbor_states(nb, k);
            let nbk1 = self.neighbor_states(nb, k + 1);
            let xk = self.own_state(v, k);
            let uk = self.own_control(v, k);
            let uk1 = self.own_control(v, k + 1);
            let pred = self.predictor(v, nb, k);
            let a2 = self.rhs_jacobian(pred.as_slice(), uk1, &nbk1);
            let prop = &id + &a2 * h;
            let row = k * n;
            match wrt {
                Block::Own => {
                    let m = self.nu();
                    if k > 0 {
                        let a1 = self.rhs_jacobian(xk, uk, &nbk);
                        let dxk = -&id - (&a1 + &a2 * (&id + &a1 * h)) * (0.5 * h);
                        jac.view_mut((row, (k - 1) * n), (n, n)).copy_from(&dxk);
                    }
                    jac.view_mut((row, k * n), (n, n)).copy_from(&id);
                    let b1 = self.agent.input_matrix(xk);
                    let b2 = self.agent.input_matrix(pred.as_slice());
                    let du_k = -(&prop * b1) * (0.5 * h);
                    let du_k1 = -b2 * (0.5 * h);
                    jac.view_mut((row, last * n + k * m), (n, m)).add_assign(&du_k);
                    jac.view_mut((row, last * n + (k + 1) * m), (n, m)).add_assign(&du_k1);
                }
                Block::Neighbor(s) => {
                    let d = self.agent.neighbor_dims()[s];
                    if k > 0 {
                        let n1 = self.agent.drift_jacobian(xk, &nbk, Block::Neighbor(s));
                        jac.view_mut((row, (k - 1) * d), (n, d)).copy_from(&(-(&prop * n1) * (0.5 * h)));
                    }
                    let n2 = self.agent.drift_jacobian(pred.as_slice(), &nbk1, Block::Neighbor(s));
                    jac.view_mut((row, k * d), (n, d)).add_assign(&(-n2 * (0.5 * h)));
                }
            }
        }
        jac
    }

    fn ineq_jacobian(&self, _: &[f64], _: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        match wrt {
            Block::Own => {
                let n = self.nx();
                let m = self.nu();
                let base = self.grid.intervals() * n;
                let mut jac = DMatrix::zeros(self.n_ineq(), self.dim());
                for k in 0..self.grid.nodes() {
                    for j in 0..m {
                        jac[(2 * (k * m + j), base + k * m + j)] = -1.0;
                        jac[(2 * (k * m + j) + 1, base + k * m + j)] = 1.0;
                    }
                }
                jac
            }
            Block::Neighbor(s) => DMatrix::zeros(self.n_ineq(), self.neighbor_dims()[s]),
        }
    }
}
