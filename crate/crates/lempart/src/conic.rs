//! Thin convex-conic layer over the interior-point solver: diagonal
//! quadratic objective, affine equalities/inequalities and second-order
//! cones, with per-row dual extraction and Lagrangian pairings.
//!
//! Problems are staged as affine expressions and lowered to the solver's
//! `min 1/2 x'Px + q'x  s.t.  Ax + s = b, s in K` form at solve time. For a
//! row staged as the expression `e(x)`:
//!   equality    `e(x) = 0`   -> zero cone, pairing `z * e(x*)`
//!   inequality  `e(x) <= 0`  -> nonnegative cone, dual `z >= 0`
//!   cone `(e0; e1..ek) in SOC` -> `e0 >= ||(e1..ek)||_2`, pairing `-z.e`

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("problem is primal infeasible")]
    Infeasible,
    #[error("problem is unbounded (dual infeasible)")]
    Unbounded,
    #[error("solver failed: {0}")]
    Failure(String),
}

/// Affine expression `sum(coeff * var) + constant`.
#[derive(Debug, Clone, Default)]
pub struct Expr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Expr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Expr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: usize) -> Self {
        Expr {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn add(mut self, v: usize, coeff: f64) -> Self {
        self.terms.push((v, coeff));
        self
    }

    pub fn offset(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>() + self.constant
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EqId(usize);
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeqId(usize);
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SocId(usize);

#[derive(Debug, Default)]
pub struct ProblemBuilder {
    n_vars: usize,
    p_diag: Vec<f64>,
    q: Vec<f64>,
    obj_constant: f64,
    eqs: Vec<Expr>,
    leqs: Vec<Expr>,
    socs: Vec<Vec<Expr>>,
}

impl ProblemBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self) -> usize {
        self.n_vars += 1;
        self.p_diag.push(0.0);
        self.q.push(0.0);
        self.n_vars - 1
    }

    /// Adds `coeff * x^2` to the objective.
    pub fn add_quad_cost(&mut self, var: usize, coeff: f64) {
        self.p_diag[var] += 2.0 * coeff;
    }

    pub fn add_lin_cost(&mut self, var: usize, coeff: f64) {
        self.q[var] += coeff;
    }

    pub fn add_const_cost(&mut self, c: f64) {
        self.obj_constant += c;
    }

    /// Constrains `e(x) = 0`.
    pub fn eq(&mut self, e: Expr) -> EqId {
        self.eqs.push(e);
        EqId(self.eqs.len() - 1)
    }

    /// Constrains `e(x) <= 0`.
    pub fn leq(&mut self, e: Expr) -> LeqId {
        self.leqs.push(e);
        LeqId(self.leqs.len() - 1)
    }

    /// Constrains `(e0; e1..ek)` to the second-order cone.
    pub fn soc(&mut self, exprs: Vec<Expr>) -> SocId {
        assert!(exprs.len() >= 2);
        self.socs.push(exprs);
        SocId(self.socs.len() - 1)
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn solve(self, tol: f64) -> Result<Solved, SolveError> {
        let n = self.n_vars;
        let m_eq = self.eqs.len();
        let m_leq = self.leqs.len();
        let m_soc: usize = self.socs.iter().map(|s| s.len()).sum();
        let m = m_eq + m_leq + m_soc;

        // Assemble b and row-major triplets in cone order: Zero, Nonneg, SOCs.
        let mut b = vec![0.0; m];
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut row = 0usize;
        for e in &self.eqs {
            // e(x) = 0  ->  A x = -constant with A = coeffs.
            for &(v, c) in &e.terms {
                triplets.push((row, v, c));
            }
            b[row] = -e.constant;
            row += 1;
        }
        for e in &self.leqs {
            // e(x) <= 0  ->  A x + s = -constant, s >= 0.
            for &(v, c) in &e.terms {
                triplets.push((row, v, c));
            }
            b[row] = -e.constant;
            row += 1;
        }
        for cone in &self.socs {
            for e in cone {
                // s_i = e_i(x)  ->  A = -coeffs, b = constant.
                for &(v, c) in &e.terms {
                    triplets.push((row, v, -c));
                }
                b[row] = e.constant;
                row += 1;
            }
        }

        let a = csc_from_triplets(m, n, &mut triplets);
        let p = csc_diag(&self.p_diag);

        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if m_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(m_eq));
        }
        if m_leq > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(m_leq));
        }
        for cone in &self.socs {
            cones.push(SupportedConeT::SecondOrderConeT(cone.len()));
        }

        // Numerically fragile instances (many cones at the origin) can stall
        // at the tightest tolerance; retry on a small ladder before failing.
        let attempts: [(f64, bool); 3] = [(tol, true), (tol * 100.0, true), (tol * 100.0, false)];
        let mut sol = None;
        let mut last_failure = String::new();
        for (atol, equil) in attempts {
            let settings = DefaultSettingsBuilder::default()
                .verbose(false)
                .max_iter(200)
                .tol_gap_abs(atol)
                .tol_gap_rel(atol)
                .tol_feas(atol)
                .equilibrate_enable(equil)
                .build()
                .map_err(|e| SolveError::Failure(e.to_string()))?;
            let mut solver = DefaultSolver::new(&p, &self.q, &a, &b, &cones, settings);
            solver.solve();
            let s = solver.solution;
            match s.status {
                SolverStatus::Solved | SolverStatus::AlmostSolved => {
                    sol = Some(s);
                    break;
                }
                SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                    return Err(SolveError::Infeasible)
                }
                SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                    return Err(SolveError::Unbounded)
                }
                other => last_failure = format!("{other:?}"),
            }
        }
        let sol = sol.ok_or(SolveError::Failure(last_failure))?;

        let obj_val = sol.obj_val + self.obj_constant;
        let obj_val_dual = sol.obj_val_dual + self.obj_constant;
        Ok(Solved {
            x: sol.x,
            z: sol.z,
            m_eq,
            soc_offsets: {
                let mut offs = Vec::with_capacity(self.socs.len());
                let mut acc = m_eq + m_leq;
                for cone in &self.socs {
                    offs.push((acc, cone.len()));
                    acc += cone.len();
                }
                offs
            },
            eqs: self.eqs,
            leqs: self.leqs,
            socs: self.socs,
            obj_val,
            obj_val_dual,
            reduced_accuracy: sol.status == SolverStatus::AlmostSolved,
        })
    }
}

fn csc_from_triplets(m: usize, n: usize, triplets: &mut [(usize, usize, f64)]) -> CscMatrix<f64> {
    triplets.sort_by_key(|&(r, c, _)| (c, r));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    let mut i = 0;
    while i < triplets.len() {
        let (r, c, mut v) = triplets[i];
        let mut j = i + 1;
        while j < triplets.len() && triplets[j].0 == r && triplets[j].1 == c {
            v += triplets[j].2;
            j += 1;
        }
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
        i = j;
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

fn csc_diag(diag: &[f64]) -> CscMatrix<f64> {
    let n = diag.len();
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    for (i, &d) in diag.iter().enumerate() {
        if d != 0.0 {
            rowval.push(i);
            nzval.push(d);
        }
        colptr[i + 1] = rowval.len();
    }
    CscMatrix::new(n, n, colptr, rowval, nzval)
}

/// Solved problem with primal/dual values and the staged expressions kept
/// for pairing evaluation.
#[derive(Debug)]
pub struct Solved {
    pub x: Vec<f64>,
    z: Vec<f64>,
    m_eq: usize,
    soc_offsets: Vec<(usize, usize)>,
    eqs: Vec<Expr>,
    leqs: Vec<Expr>,
    socs: Vec<Vec<Expr>>,
    pub obj_val: f64,
    pub obj_val_dual: f64,
    pub reduced_accuracy: bool,
}

impl Solved {
    pub fn value(&self, var: usize) -> f64 {
        self.x[var]
    }

    /// Multiplier of an equality row; the Lagrangian carries `z * e(x)`.
    pub fn dual_eq(&self, id: EqId) -> f64 {
        self.z[id.0]
    }

    /// Multiplier of an inequality row (nonnegative).
    pub fn dual_leq(&self, id: LeqId) -> f64 {
        self.z[self.m_eq + id.0]
    }

    pub fn dual_soc(&self, id: SocId) -> &[f64] {
        let (off, len) = self.soc_offsets[id.0];
        &self.z[off..off + len]
    }

    /// Lagrangian pairing `z * e(x*)` of an equality row.
    pub fn pairing_eq(&self, id: EqId) -> f64 {
        self.dual_eq(id) * self.eqs[id.0].eval(&self.x)
    }

    /// Lagrangian pairing of an inequality row (complementarity residual).
    pub fn pairing_leq(&self, id: LeqId) -> f64 {
        self.dual_leq(id) * self.leqs[id.0].eval(&self.x)
    }

    /// Lagrangian pairing `-z . e(x*)` of a second-order cone.
    pub fn pairing_soc(&self, id: SocId) -> f64 {
        let z = self.dual_soc(id);
        -self.socs[id.0]
            .iter()
            .zip(z)
            .map(|(e, &zi)| zi * e.eval(&self.x))
            .sum::<f64>()
    }

    /// Pairing of an equality dual against a sub-expression of the row;
    /// used to split a shared row's Lagrangian term across nodes.
    pub fn pairing_eq_part(&self, id: EqId, part: &Expr) -> f64 {
        self.dual_eq(id) * part.eval(&self.x)
    }

    pub fn duality_gap(&self) -> f64 {
        (self.obj_val - self.obj_val_dual).abs() / f64::max(1.0, self.obj_val.abs())
    }

    /// Largest complementary-slackness residual over all inequality rows
    /// and cones.
    pub fn comp_slack(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.leqs.len() {
            worst = worst.max(self.pairing_leq(LeqId(i)).abs());
        }
        for i in 0..self.socs.len() {
            worst = worst.max(self.pairing_soc(SocId(i)).abs());
        }
        worst
    }
}
