#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbdp::graph::CouplingGraph;
use sbdp::ocp::AgentOcp;
use sbdp::problem::{PrimalDualPoint, QuadraticAgent};

pub struct QpInstance {
    pub graph: CouplingGraph,
    pub agents: Vec<QuadraticAgent>,
}

/// Global QP `min ½zᵀHz + cᵀz  s.t. Ae z = be, Ai z <= bi` with the row
/// ranges of every agent.
pub struct CentralQp {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub ae: DMatrix<f64>,
    pub be: DVector<f64>,
    pub ai: DMatrix<f64>,
    pub bi: DVector<f64>,
    pub offsets: Vec<usize>,
    pub eq_rows: Vec<usize>,
    pub ineq_rows: Vec<usize>,
}

pub fn assemble(graph: &CouplingGraph, agents: &[QuadraticAgent]) -> CentralQp {
    let mut offsets = vec![0];
    for a in agents {
        offsets.push(offsets.last().unwrap() + a.own_dim);
    }
    let n = *offsets.last().unwrap();
    let ne: usize = agents.iter().map(|a| a.eq_rhs.len()).sum();
    let ni: usize = agents.iter().map(|a| a.ineq_rhs.len()).sum();
    let mut qp = CentralQp {
        h: DMatrix::zeros(n, n),
        c: DVector::zeros(n),
        ae: DMatrix::zeros(ne, n),
        be: DVector::zeros(ne),
        ai: DMatrix::zeros(ni, n),
        bi: DVector::zeros(ni),
        offsets: offsets.clone(),
        eq_rows: vec![0],
        ineq_rows: vec![0],
    };
    let (mut re, mut ri) = (0, 0);
    for (i, a) in agents.iter().enumerate() {
        let mut idx: Vec<usize> = (offsets[i]..offsets[i + 1]).collect();
        for &j in graph.neighbors(i) {
            idx.extend(offsets[j]..offsets[j + 1]);
        }
        for (r, &gr) in idx.iter().enumerate() {
            qp.c[gr] += a.linear[r];
            for (s, &gs) in idx.iter().enumerate() {
                qp.h[(gr, gs)] += a.hessian[(r, s)];
            }
        }
        for k in 0..a.eq_rhs.len() {
            for (r, &g) in idx.iter().enumerate() {
                qp.ae[(re + k, g)] = a.eq_matrix[(k, r)];
            }
            qp.be[re + k] = a.eq_rhs[k];
        }
        for k in 0..a.ineq_rhs.len() {
            for (r, &g) in idx.iter().enumerate() {
                qp.ai[(ri + k, g)] = a.ineq_matrix[(k, r)];
            }
            qp.bi[ri + k] = a.ineq_rhs[k];
        }
        re += a.eq_rhs.len();
        ri += a.ineq_rhs.len();
        qp.eq_rows.push(re);
        qp.ineq_rows.push(ri);
    }
    qp
}

/// Brute-force active-set enumeration. Returns `(z, λ, μ)` of the first
/// working set whose KKT solution is primal and dual feasible.
pub fn enumerate_qp(qp: &CentralQp) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = qp.c.len();
    let ne = qp.be.len();
    let ni = qp.bi.len();
    assert!(ni <= 16, "enumeration oracle is exponential in the inequality count");
    for mask in 0u32..(1 << ni) {
        let act: Vec<usize> = (0..ni).filter(|k| mask & (1 << k) != 0).collect();
        let m = n + ne + act.len();
        let mut k = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        k.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        rhs.rows_mut(0, n).copy_from(&(-&qp.c));
        for r in 0..ne {
            for col in 0..n {
                k[(n + r, col)] = qp.ae[(r, col)];
                k[(col, n + r)] = qp.ae[(r, col)];
            }
            rhs[n + r] = qp.be[r];
        }
        for (t, &r) in act.iter().enumerate() {
            for col in 0..n {
                k[(n + ne + t, col)] = qp.ai[(r, col)];
                k[(col, n + ne + t)] = qp.ai[(r, col)];
            }
            rhs[n + ne + t] = qp.bi[r];
        }
        let Some(sol) = k.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let z = sol.rows(0, n).into_owned();
        let slack = &qp.ai * &z - &qp.bi;
        if slack.iter().any(|s| *s > 1e-9) {
            continue;
        }
        let mut mu = DVector::zeros(ni);
        for (t, &r) in act.iter().enumerate() {
            mu[r] = sol[n + ne + t];
        }
        if mu.iter().any(|v| *v < -1e-9) {
            continue;
        }
        return Some((z, sol.rows(n, ne).into_owned(), mu));
    }
    None
}

/// Central KKT point split back into per-agent primal-dual points.
pub fn central_points(graph: &CouplingGraph, agents: &[QuadraticAgent]) -> Vec<PrimalDualPoint> {
    let qp = assemble(graph, agents);
    let (z, l, m) = enumerate_qp(&qp).expect("central QP has a KKT point");
    (0..agents.len())
        .map(|i| PrimalDualPoint {
            x: z.rows(qp.offsets[i], qp.offsets[i + 1] - qp.offsets[i]).into_owned(),
            lambda: l.rows(qp.eq_rows[i], qp.eq_rows[i + 1] - qp.eq_rows[i]).into_owned(),
            mu: m.rows(qp.ineq_rows[i], qp.ineq_rows[i + 1] - qp.ineq_rows[i]).into_owned(),
        })
        .collect()
}

pub fn stacked_distance(a: &[PrimalDualPoint], b: &[PrimalDualPoint]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.inf_distance(q)).fold(0.0, f64::max)
}

/// Block-Jacobi spectral radius of the central Hessian, i.e. the newton-rule
/// contraction factor when no constraint couples agents.
pub fn jacobi_radius(qp: &CentralQp) -> f64 {
    let n = qp.c.len();
    let mut d = DMatrix::zeros(n, n);
    for w in qp.offsets.windows(2) {
        let len = w[1] - w[0];
        d.view_mut((w[0], w[0]), (len, len)).copy_from(&qp.h.view((w[0], w[0]), (len, len)));
    }
    let off = &qp.h - &d;
    let it = d.try_inverse().expect("diagonal blocks invertible") * off;
    it.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// Random weakly coupled convex QP on 2 to 4 agents with local bounds and
/// equalities.
pub fn random_weakly_coupled(seed: u64) -> QpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(2..=4);
    let dims: Vec<usize> = (0..m).map(|_| rng.gen_range(1..=3)).collect();
    let mut order: Vec<usize> = (0..m).collect();
    for k in (1..m).rev() {
        order.swap(k, rng.gen_range(0..=k));
    }
    let mut edges: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0], w[1])).collect();
    for i in 0..m {
        for j in i + 1..m {
            if !edges.contains(&(i, j)) && !edges.contains(&(j, i)) && rng.gen_bool(0.3) {
                edges.push((i, j));
            }
        }
    }
    let graph = CouplingGraph::new(m, &edges).unwrap();

    let agents = (0..m)
        .map(|i| {
            let nbrs = graph.neighbors(i);
            let nd: Vec<usize> = nbrs.iter().map(|&j| dims[j]).collect();
            let n = dims[i];
            let total = n + nd.iter().sum::<usize>();
            let mut h = DMatrix::zeros(total, total);
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            h.view_mut((0, 0), (n, n)).copy_from(&(&b * b.transpose() + DMatrix::identity(n, n)));
            let scale = 0.15 / nbrs.len() as f64;
            let mut col = n;
            for &d in &nd {
                let c = DMatrix::from_fn(n, d, |_, _| scale * rng.gen_range(-1.0..1.0));
                h.view_mut((0, col), (n, d)).copy_from(&c);
                h.view_mut((col, 0), (d, n)).copy_from(&c.transpose());
                col += d;
            }
            let mut lin = DVector::zeros(total);
            for k in 0..n {
                lin[k] = rng.gen_range(-2.0..2.0);
            }
            let mut agent = QuadraticAgent::new(n, nd, h, lin);
            let with_eq = n >= 2 && rng.gen_bool(0.3);
            if with_eq {
                let mut a = DMatrix::zeros(1, total);
                for k in 0..n {
                    a[(0, k)] = rng.gen_range(0.5..1.5);
                }
                agent = agent.with_equalities(a, DVector::from_element(1, rng.gen_range(-1.0..1.0)));
            }
            let max_bounds = if with_eq { n - 1 } else { n };
            let bounded: Vec<usize> = (0..max_bounds).filter(|_| rng.gen_bool(0.5)).collect();
            if !bounded.is_empty() {
                let mut a = DMatrix::zeros(bounded.len(), total);
                let mut rhs = DVector::zeros(bounded.len());
                for (r, &k) in bounded.iter().enumerate() {
                    a[(r, k)] = 1.0;
                    rhs[r] = rng.gen_range(-0.5..1.0);
                }
                agent = agent.with_inequalities(a, rhs);
            }
            agent
        })
        .collect();
    QpInstance { graph, agents }
}

/// Two agents, strongly coupled cost and a coupled inequality owned by agent 0:
/// `f_0 = ½(x_0-2)²`, `f_1 = ½(x_1-2)² + (3/2)(x_1-x_0)²`, `x_0 + 2x_1 <= 1`.
/// KKT point `x = (7/16, 9/32)`, `μ = 35/32`.
pub fn coupled_inequality() -> QpInstance {
    let a0 = QuadraticAgent::new(1, vec![1], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), DVector::from_vec(vec![-2.0, 0.0]))
        .with_offset(2.0)
        .with_inequalities(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), DVector::from_vec(vec![1.0]));
    let w = 3.0;
    let a1 = QuadraticAgent::new(1, vec![1], DMatrix::from_row_slice(2, 2, &[1.0 + w, -w, -w, w]), DVector::from_vec(vec![-2.0, 0.0]))
        .with_offset(2.0);
    QpInstance { graph: CouplingGraph::path(2).unwrap(), agents: vec![a0, a1] }
}

/// Unconstrained `f_0 = ½(x_0-1)²`, `f_1 = ½x_1² + (3/2)(x_1-x_0)²`.
pub fn strongly_coupled() -> QpInstance {
    let a0 = QuadraticAgent::new(1, vec![1], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), DVector::from_vec(vec![-1.0, 0.0]))
        .with_offset(0.5);
    let w = 3.0;
    let a1 = QuadraticAgent::new(1, vec![1], DMatrix::from_row_slice(2, 2, &[1.0 + w, -w, -w, w]), DVector::zeros(2));
    QpInstance { graph: CouplingGraph::path(2).unwrap(), agents: vec![a0, a1] }
}

/// Spectral radius of a map from its finite-difference Jacobian at `p`.
pub fn map_radius(f: impl Fn(&DVector<f64>) -> DVector<f64>, p: &DVector<f64>) -> f64 {
    let n = p.len();
    let mut j = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = 1e-6 * p[k].abs().max(1.0);
        let mut up = p.clone();
        up[k] += h;
        let mut dn = p.clone();
        dn[k] -= h;
        j.set_column(k, &((f(&up) - f(&dn)) / (2.0 * h)));
    }
    j.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// `ẋ = a x + c x_j + b u`, `l⁰ = ½ q x² + ½ w (x - x_j)²`, `V = ½ p x²`.
#[derive(Clone)]
pub struct Lq {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub q: f64,
    pub w: f64,
    pub p: f64,
    pub r: f64,
    pub lo: f64,
    pub hi: f64,
    pub coupled: bool,
}

impl Lq {
    fn nb(&self, nb: &[&[f64]]) -> f64 {
        if self.coupled { nb[0][0] } else { 0.0 }
    }
}

impl AgentOcp for Lq {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn neighbor_dims(&self) -> Vec<usize> {
        if self.coupled { vec![1] } else { vec![] }
    }
    fn drift(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        DVector::from_element(1, self.a * x[0] + self.c * self.nb(nb))
    }
    fn input_matrix(&self, _: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.b)
    }
    fn stage_cost(&self, x: &[f64], nb: &[&[f64]]) -> f64 {
        let d = x[0] - self.nb(nb);
        0.5 * self.q * x[0] * x[0] + if self.coupled { 0.5 * self.w * d * d } else { 0.0 }
    }
    fn control_weight(&self) -> DVector<f64> {
        DVector::from_element(1, self.r)
    }
    fn u_ref(&self) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn u_min(&self) -> DVector<f64> {
        DVector::from_element(1, self.lo)
    }
    fn u_max(&self) -> DVector<f64> {
        DVector::from_element(1, self.hi)
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        0.5 * self.p * x[0] * x[0]
    }
}

pub fn lq_pair() -> Vec<Lq> {
    let base = Lq { a: -0.5, b: 1.0, c: 0.2, q: 1.0, w: 0.3, p: 1.0, r: 1.0, lo: -0.4, hi: 2.0, coupled: true };
    vec![base.clone(), Lq { a: -0.8, c: 0.3, w: 0.2, p: 0.5, lo: -2.0, hi: 2.0, ..base }]
}
