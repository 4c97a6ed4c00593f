//! Agent-level NLP descriptions for the static scheme.
//!
//! Agent `i` owns `x_i` and sees its neighbors' vectors in graph slot order.
//! Constraint conventions are `g_i(x_i, x_N) = 0` and `h_i(x_i, x_N) <= 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derivative::{self, DerivativeReport};

/// Which variable block a partial derivative is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Own,
    /// Neighbor slot, i.e. position in the sorted neighbor list.
    Neighbor(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },
    #[error("{what} returned a non-finite value")]
    NonFinite { what: String },
}

/// Local NLP of one agent. Only `dim`, `neighbor_dims` and `cost` are
/// required; derivatives fall back to central differences.
pub trait AgentNlp: Send + Sync {
    fn dim(&self) -> usize;
    fn neighbor_dims(&self) -> Vec<usize>;
    fn n_eq(&self) -> usize {
        0
    }
    fn n_ineq(&self) -> usize {
        0
    }

    fn cost(&self, x: &[f64], nb: &[&[f64]]) -> f64;

    fn eq(&self, _x: &[f64], _nb: &[&[f64]]) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn ineq(&self, _x: &[f64], _nb: &[&[f64]]) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn cost_gradient(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DVector<f64> {
        fd_block_gradient(x, nb, wrt, |x, nb| self.cost(x, nb))
    }

    fn eq_jacobian(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        fd_block_jacobian(x, nb, wrt, self.n_eq(), |x, nb| self.eq(x, nb))
    }

    fn ineq_jacobian(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        fd_block_jacobian(x, nb, wrt, self.n_ineq(), |x, nb| self.ineq(x, nb))
    }

    /// `∇²_{x_i x_i}` of `f_i + λᵀg_i + μᵀh_i`.
    fn lagrangian_hessian(
        &self,
        x: &[f64],
        nb: &[&[f64]],
        lambda: &[f64],
        mu: &[f64],
    ) -> DMatrix<f64> {
        derivative::hessian_from_gradient(
            |x| lagrangian_gradient(self, x, nb, lambda, mu, Block::Own),
            x,
        )
    }
}

/// `∇_{wrt}` of `f_i + λᵀg_i + μᵀh_i`.
pub fn lagrangian_gradient<A: AgentNlp + ?Sized>(
    agent: &A,
    x: &[f64],
    nb: &[&[f64]],
    lambda: &[f64],
    mu: &[f64],
    wrt: Block,
) -> DVector<f64> {
    let mut g = agent.cost_gradient(x, nb, wrt);
    if !lambda.is_empty() {
        g += agent.eq_jacobian(x, nb, wrt).transpose() * DVector::from_column_slice(lambda);
    }
    if !mu.is_empty() {
        g += agent.ineq_jacobian(x, nb, wrt).transpose() * DVector::from_column_slice(mu);
    }
    g
}

fn block_len(x: &[f64], nb: &[&[f64]], wrt: Block) -> usize {
    match wrt {
        Block::Own => x.len(),
        Block::Neighbor(k) => nb[k].len(),
    }
}

fn with_block<R>(
    x: &[f64],
    nb: &[&[f64]],
    wrt: Block,
    probe: &[f64],
    f: &impl Fn(&[f64], &[&[f64]]) -> R,
) -> R {
    match wrt {
        Block::Own => f(probe, nb),
        Block::Neighbor(k) => {
            let mut swapped: Vec<&[f64]> = nb.to_vec();
            swapped[k] = probe;
            f(x, &swapped)
        }
    }
}

fn block_point(x: &[f64], nb: &[&[f64]], wrt: Block) -> Vec<f64> {
    match wrt {
        Block::Own => x.to_vec(),
        Block::Neighbor(k) => nb[k].to_vec(),
    }
}

pub fn fd_block_gradient(
    x: &[f64],
    nb: &[&[f64]],
    wrt: Block,
    f: impl Fn(&[f64], &[&[f64]]) -> f64,
) -> DVector<f64> {
    let at = block_point(x, nb, wrt);
    derivative::gradient(|p| with_block(x, nb, wrt, p, &f), &at)
}

pub fn fd_block_jacobian(
    x: &[f64],
    nb: &[&[f64]],
    wrt: Block,
    rows: usize,
    f: impl Fn(&[f64], &[&[f64]]) -> DVector<f64>,
) -> DMatrix<f64> {
    if rows == 0 {
        return DMatrix::zeros(0, block_len(x, nb, wrt));
    }
    let at = block_point(x, nb, wrt);
    derivative::jacobian(|p| with_block(x, nb, wrt, p, &f), &at, rows)
}

/// Checks that every callback returns vectors of the declared size.
pub fn validate_agent<A: AgentNlp + ?Sized>(
    agent: &A,
    x: &[f64],
    nb: &[&[f64]],
) -> Result<(), SpecError> {
    let check = |what: &str, expected: usize, got: usize| {
        if expected == got {
            Ok(())
        } else {
            Err(SpecError::Dimension { what: what.into(), expected, got })
        }
    };
    check("own vector", agent.dim(), x.len())?;
    let dims = agent.neighbor_dims();
    check("neighbor count", dims.len(), nb.len())?;
    for (d, v) in dims.iter().zip(nb) {
        check("neighbor vector", *d, v.len())?;
    }
    check("equality constraints", agent.n_eq(), agent.eq(x, nb).len())?;
    check("inequality constraints", agent.n_ineq(), agent.ineq(x, nb).len())?;
    if !agent.cost(x, nb).is_finite() {
        return Err(SpecError::NonFinite { what: "cost".into() });
    }
    Ok(())
}

/// Compares supplied derivatives with central differences at each probe point.
pub fn check_agent_derivatives<A: AgentNlp + ?Sized>(
    agent: &A,
    probes: &[(Vec<f64>, Vec<Vec<f64>>)],
) -> DerivativeReport {
    let mut report = DerivativeReport::default();
    for (x, nb) in probes {
        let nb: Vec<&[f64]> = nb.iter().map(Vec::as_slice).collect();
        let blocks =
            std::iter::once(Block::Own).chain((0..nb.len()).map(Block::Neighbor));
        for wrt in blocks {
            let tag = match wrt {
                Block::Own => "own".to_string(),
                Block::Neighbor(k) => format!("neighbor {k}"),
            };
            let supplied = agent.cost_gradient(x, &nb, wrt);
            let fd = fd_block_gradient(x, &nb, wrt, |x, nb| agent.cost(x, nb));
            report.record(
                format!("cost gradient ({tag})"),
                derivative::relative_error_vec(&supplied, &fd),
            );
            if agent.n_eq() > 0 {
                let supplied = agent.eq_jacobian(x, &nb, wrt);
                let fd = fd_block_jacobian(x, &nb, wrt, agent.n_eq(), |x, nb| agent.eq(x, nb));
                report.record(
                    format!("equality jacobian ({tag})"),
                    derivative::relative_error(&supplied, &fd),
                );
            }
            if agent.n_ineq() > 0 {
                let supplied = agent.ineq_jacobian(x, &nb, wrt);
                let fd =
                    fd_block_jacobian(x, &nb, wrt, agent.n_ineq(), |x, nb| agent.ineq(x, nb));
                report.record(
                    format!("inequality jacobian ({tag})"),
                    derivative::relative_error(&supplied, &fd),
                );
            }
        }
    }
    report
}

/// Primal-dual iterate `p_i = (x_i, λ_i, μ_i)` of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualPoint {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
}

impl PrimalDualPoint {
    pub fn zeros(n: usize, n_eq: usize, n_ineq: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            lambda: DVector::zeros(n_eq),
            mu: DVector::zeros(n_ineq),
        }
    }

    pub fn for_agent<A: AgentNlp + ?Sized>(agent: &A) -> Self {
        Self::zeros(agent.dim(), agent.n_eq(), agent.n_ineq())
    }

    /// Stacked `[x; λ; μ]`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.x.len() + self.lambda.len() + self.mu.len());
        out.extend(self.x.iter());
        out.extend(self.lambda.iter());
        out.extend(self.mu.iter());
        DVector::from_vec(out)
    }

    pub fn inf_norm(&self) -> f64 {
        self.x.amax().max(self.lambda.amax()).max(self.mu.amax())
    }

    pub fn inf_distance(&self, other: &Self) -> f64 {
        (&self.x - &other.x)
            .amax()
            .max((&self.lambda - &other.lambda).amax())
            .max((&self.mu - &other.mu).amax())
    }
}

/// Quadratic agent over `z = [x_i; x_N(slot 0); x_N(slot 1); ...]`:
/// cost `½ zᵀHz + cᵀz + offset`, equalities `A_e z - b_e = 0`,
/// inequalities `A_i z - b_i <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticAgent {
    pub own_dim: usize,
    pub neighbor_dims: Vec<usize>,
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub offset: f64,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QuadraticAgent {
    /// Unconstrained quadratic; add constraints with the builder methods.
    pub fn new(own_dim: usize, neighbor_dims: Vec<usize>, hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let total = own_dim + neighbor_dims.iter().sum::<usize>();
        assert_eq!(hessian.shape(), (total, total), "hessian must be square over the stacked vector");
        assert_eq!(linear.len(), total);
        Self {
            own_dim,
            neighbor_dims,
            hessian,
            linear,
            offset: 0.0,
            eq_matrix: DMatrix::zeros(0, total),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, total),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.ncols(), self.total_dim());
        assert_eq!(a.nrows(), b.len());
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.ncols(), self.total_dim());
        assert_eq!(a.nrows(), b.len());
        self.ineq_matrix = a;
        self.ineq_rhs = b;
        self
    }

    pub fn total_dim(&self) -> usize {
        self.own_dim + self.neighbor_dims.iter().sum::<usize>()
    }

    fn stack(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        let mut z = Vec::with_capacity(self.total_dim());
        z.extend_from_slice(x);
        for v in nb {
            z.extend_from_slice(v);
        }
        DVector::from_vec(z)
    }

    fn block_range(&self, wrt: Block) -> std::ops::Range<usize> {
        match wrt {
            Block::Own => 0..self.own_dim,
            Block::Neighbor(k) => {
                let start = self.own_dim + self.neighbor_dims[..k].iter().sum::<usize>();
                start..start + self.neighbor_dims[k]
            }
        }
    }
}

impl AgentNlp for QuadraticAgent {
    fn dim(&self) -> usize {
        self.own_dim
    }

    fn neighbor_dims(&self) -> Vec<usize> {
        self.neighbor_dims.clone()
    }

    fn n_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    fn n_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    fn cost(&self, x: &[f64], nb: &[&[f64]]) -> f64 {
        let z = self.stack(x, nb);
        0.5 * z.dot(&(&self.hessian * &z)) + self.linear.dot(&z) + self.offset
    }

    fn eq(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        &self.eq_matrix * self.stack(x, nb) - &self.eq_rhs
    }

    fn ineq(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        &self.ineq_matrix * self.stack(x, nb) - &self.ineq_rhs
    }

    fn cost_gradient(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DVector<f64> {
        let full = &self.hessian * self.stack(x, nb) + &self.linear;
        let r = self.block_range(wrt);
        full.rows(r.start, r.len()).into_owned()
    }

    fn eq_jacobian(&self, _x: &[f64], _nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        let r = self.block_range(wrt);
        self.eq_matrix.columns(r.start, r.len()).into_owned()
    }

    fn ineq_jacobian(&self, _x: &[f64], _nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        let r = self.block_range(wrt);
        self.ineq_matrix.columns(r.start, r.len()).into_owned()
    }

    fn lagrangian_hessian(&self, _x: &[f64], _nb: &[&[f64]], _l: &[f64], _m: &[f64]) -> DMatrix<f64> {
        let r = self.block_range(Block::Own);
        self.hessian.view((r.start, r.start), (r.len(), r.len())).into_owned()
    }
}
