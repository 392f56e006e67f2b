//! Ex-ante optimal power flow over the feasible flexibility set, with dual
//! extraction, plus the decoupled per-coalition variant used by the
//! strict-self-consumption cost model.
//!
//! The partition-aware problem minimises flexibility costs minus export
//! revenue plus the boundary-exchange tax, subject to the DistFlow
//! constraints under forecasts. In strict mode every block's boundary
//! exchange is pinned to zero (the hard-constraint form of the tax limit
//! `kappa -> inf`) and the tax and export terms drop out.

use std::collections::BTreeMap;

use num_complex::Complex64;
use thiserror::Error;

use crate::conic::{EqId, Expr, LeqId, ProblemBuilder, SocId, SolveError, Solved};
use crate::grid::{Coalition, Grid, NodeId, Partition};
use crate::params::{CostParams, ParamError};
use crate::powerflow::FlowState;
use crate::timeseries::Series;

/// Relative weight of the minimum-norm tie-break regulariser.
pub const DEFAULT_TIEBREAK_EPS_REL: f64 = 1e-6;
/// Interior-point tolerance for every ex-ante solve.
pub const SOLVER_TOL: f64 = 1e-9;
/// Limits at or above this are treated as absent.
const LIMIT_SKIP: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("ex-ante problem infeasible (empty feasible flexibility set)")]
    Infeasible,
    #[error("ex-ante problem unbounded")]
    Unbounded,
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("missing forecast series for prosumer {0}")]
    MissingSeries(NodeId),
    #[error("forecast horizon mismatch")]
    HorizonMismatch,
    #[error(transparent)]
    Param(#[from] ParamError),
}

impl From<SolveError> for DispatchError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Infeasible => DispatchError::Infeasible,
            SolveError::Unbounded => DispatchError::Unbounded,
            SolveError::Failure(msg) => DispatchError::SolverFailure(msg),
        }
    }
}

/// Dual variables of the ex-ante problem, keyed by external node id.
#[derive(Debug, Clone, Default)]
pub struct DualBundle {
    /// Nodal power-balance duals (the distribution LMPs), per node and step.
    pub lambda: BTreeMap<NodeId, Vec<Complex64>>,
    /// Voltage-recursion duals.
    pub beta: BTreeMap<NodeId, Vec<f64>>,
    /// Reference-voltage dual at the PCC.
    pub beta_pcc: Vec<f64>,
    /// Line-limit duals in quadratic form (nonnegative).
    pub mu: BTreeMap<NodeId, Vec<f64>>,
    /// Voltage-limit duals (nonnegative, both sides combined).
    pub eta: BTreeMap<NodeId, Vec<f64>>,
    /// Flexibility magnitude-box duals (nonnegative).
    pub theta_box: BTreeMap<NodeId, Vec<f64>>,
    /// Storage energy-neutrality duals.
    pub theta_storage: BTreeMap<NodeId, f64>,
    /// Zero-exchange duals per strict block, in price convention: the
    /// marginal cost of one extra unit exported at the block PCC.
    pub lambda_exchange: Vec<Vec<Complex64>>,
}

impl DualBundle {
    /// DLMP at a node: the power-balance dual, or the export price at the
    /// grid PCC where no balance constraint exists.
    pub fn dlmp(&self, grid: &Grid, params: &CostParams, node: usize, t: usize) -> Complex64 {
        if node == grid.pcc() {
            params.export_at(t)
        } else {
            self.lambda
                .get(&grid.node_id(node))
                .map_or(Complex64::default(), |s| s[t])
        }
    }
}

/// Ex-ante dispatch with its dual bundle and solve diagnostics.
#[derive(Debug, Clone)]
pub struct DispatchSolution {
    /// Flexibility dispatch per prosumer id.
    pub u: BTreeMap<NodeId, Series>,
    /// Flows and voltage deviations under forecasts.
    pub flows: FlowState,
    /// Ex-ante objective: flexibility cost plus tax minus export revenue
    /// (flexibility cost only in strict mode). Excludes the regulariser.
    pub objective: f64,
    pub flex_cost: f64,
    pub duals: DualBundle,
    pub duality_gap: f64,
    pub comp_slack: f64,
    /// Regulariser weight actually applied.
    pub regularizer: f64,
    pub strict: bool,
}

struct NodeVars {
    s_re: Vec<usize>,
    s_im: Vec<usize>,
    dv: Vec<usize>,
}

struct ProsumerVars {
    u_re: Vec<usize>,
    u_im: Vec<usize>,
    w: Option<Vec<usize>>,
    pwl_cost: Option<Vec<usize>>,
}

struct NodeRows {
    flow_re: Vec<EqId>,
    flow_im: Vec<EqId>,
    volt: Vec<EqId>,
    line: Option<Vec<SocId>>,
    vlim_up: Option<Vec<LeqId>>,
    vlim_dn: Option<Vec<LeqId>>,
}

struct ProsumerRows {
    boxes: Option<Vec<SocId>>,
    storage: Option<EqId>,
}

/// A posed ex-ante problem; regularise and solve.
pub struct ExAnteProblem<'a> {
    grid: &'a Grid,
    blocks: Vec<Coalition>,
    forecasts: BTreeMap<NodeId, Series>,
    params: &'a CostParams,
    strict: bool,
    horizon: usize,
    epsilon: f64,
}

/// Poses the partition-aware ex-ante OPF. `strict` replaces the tax terms
/// with hard zero-exchange constraints per block, which requires every
/// block to have a single boundary node.
pub fn pose_exante<'a>(
    grid: &'a Grid,
    partition: &Partition,
    forecasts: &BTreeMap<NodeId, Series>,
    params: &'a CostParams,
    strict: bool,
) -> Result<ExAnteProblem<'a>, DispatchError> {
    let prosumer_ids: Vec<NodeId> = grid.prosumers().iter().map(|&p| grid.node_id(p)).collect();
    params.validate(&prosumer_ids)?;
    let mut horizon = None;
    let mut fc = BTreeMap::new();
    for &id in &prosumer_ids {
        let s = forecasts
            .get(&id)
            .ok_or(DispatchError::MissingSeries(id))?;
        match horizon {
            None => horizon = Some(s.len()),
            Some(h) if h != s.len() => return Err(DispatchError::HorizonMismatch),
            _ => {}
        }
        fc.insert(id, s.clone());
    }
    if strict {
        for b in &partition.blocks {
            if !b.single_boundary() {
                return Err(DispatchError::AssumptionViolated(format!(
                    "block {:?} has {} boundary nodes, expected one",
                    b.member_ids(grid),
                    b.boundary.len()
                )));
            }
        }
    }
    Ok(ExAnteProblem {
        grid,
        blocks: partition.blocks.clone(),
        forecasts: fc,
        params,
        strict,
        horizon: horizon.unwrap_or(0),
        epsilon: 0.0,
    })
}

impl<'a> ExAnteProblem<'a> {
    /// Adds `eps * sum ||u||^2` to select the minimum-norm optimizer among
    /// ties; `eps` is relative to the dominant linear cost rate. Zero leaves
    /// the problem unchanged.
    pub fn tiebreak_regularize(mut self, eps_rel: f64) -> Self {
        if eps_rel <= 0.0 {
            self.epsilon = 0.0;
            return self;
        }
        let mut scale = 1.0f64;
        for spec in self.params.flex.values() {
            scale = scale.max(spec.cost.linear_rate());
            if let Some(segs) = spec.cost.segments() {
                for (slope, _) in segs {
                    scale = scale.max(slope);
                }
            }
        }
        self.epsilon = eps_rel * scale;
        self
    }

    pub fn solve(self) -> Result<DispatchSolution, DispatchError> {
        let out = solve_opf(
            self.grid,
            &self.blocks,
            &self.forecasts,
            self.params,
            self.strict,
            self.horizon,
            self.epsilon,
        )?;
        Ok(out.solution)
    }
}

/// Partition-aware ex-ante solve with the default tie-break regulariser.
pub fn solve_exante(
    grid: &Grid,
    partition: &Partition,
    forecasts: &BTreeMap<NodeId, Series>,
    params: &CostParams,
) -> Result<DispatchSolution, DispatchError> {
    pose_exante(grid, partition, forecasts, params, false)?
        .tiebreak_regularize(DEFAULT_TIEBREAK_EPS_REL)
        .solve()
}

/// Strict-self-consumption variant: zero boundary exchange per block.
pub fn solve_exante_strict(
    grid: &Grid,
    partition: &Partition,
    forecasts: &BTreeMap<NodeId, Series>,
    params: &CostParams,
) -> Result<DispatchSolution, DispatchError> {
    pose_exante(grid, partition, forecasts, params, true)?
        .tiebreak_regularize(DEFAULT_TIEBREAK_EPS_REL)
        .solve()
}

/// Decoupled per-coalition dispatch on the coalition subgrid: minimise the
/// members' flexibility costs subject to local DistFlow and zero exchange
/// at the coalition PCC.
pub struct DecoupledSolve {
    pub subgrid: Grid,
    pub solution: DispatchSolution,
}

pub fn solve_exante_decoupled(
    grid: &Grid,
    coalition: &Coalition,
    forecasts: &BTreeMap<NodeId, Series>,
    params: &CostParams,
) -> Result<DecoupledSolve, DispatchError> {
    let (out, subgrid) = solve_decoupled_full(grid, coalition, forecasts, params)?;
    Ok(DecoupledSolve {
        subgrid,
        solution: out.solution,
    })
}

pub(crate) fn solve_decoupled_full(
    grid: &Grid,
    coalition: &Coalition,
    forecasts: &BTreeMap<NodeId, Series>,
    params: &CostParams,
) -> Result<(OpfOutput, Grid), DispatchError> {
    if !coalition.single_boundary() {
        return Err(DispatchError::AssumptionViolated(format!(
            "coalition {:?} has {} boundary nodes, expected one",
            coalition.member_ids(grid),
            coalition.boundary.len()
        )));
    }
    let subgrid = grid.subgrid(coalition);
    let member_ids: Vec<NodeId> = coalition.member_ids(grid);
    let mut fc = BTreeMap::new();
    let mut horizon = 0;
    for &id in &member_ids {
        let s = forecasts
            .get(&id)
            .ok_or(DispatchError::MissingSeries(id))?;
        horizon = s.len();
        fc.insert(id, s.clone());
    }
    let gc = subgrid.grand_coalition().map_err(|e| {
        DispatchError::SolverFailure(format!("subgrid grand coalition: {e}"))
    })?;
    let blocks = vec![gc];
    let out = solve_opf(&subgrid, &blocks, &fc, params, true, horizon, {
        // Same relative regularisation as the partition solve.
        let mut scale = 1.0f64;
        for &id in &member_ids {
            if let Some(spec) = params.flex_spec(id) {
                scale = scale.max(spec.cost.linear_rate());
                if let Some(segs) = spec.cost.segments() {
                    for (slope, _) in segs {
                        scale = scale.max(slope);
                    }
                }
            }
        }
        DEFAULT_TIEBREAK_EPS_REL * scale
    })?;
    Ok((out, subgrid))
}

/// Solved problem plus the variable/row bookkeeping needed to evaluate the
/// per-node Lagrangian decomposition.
pub(crate) struct OpfOutput {
    pub solution: DispatchSolution,
    pub artifacts: OpfArtifacts,
}

pub(crate) struct OpfArtifacts {
    pub solved: Solved,
    pub horizon: usize,
    node_vars: Vec<NodeVars>,
    prosumer_vars: BTreeMap<usize, ProsumerVars>,
    node_rows: Vec<Option<NodeRows>>,
    prosumer_rows: BTreeMap<usize, ProsumerRows>,
    exchange_rows: Vec<(usize, Vec<(EqId, EqId)>)>,
}

fn solve_opf(
    grid: &Grid,
    blocks: &[Coalition],
    forecasts: &BTreeMap<NodeId, Series>,
    params: &CostParams,
    strict: bool,
    horizon: usize,
    epsilon: f64,
) -> Result<OpfOutput, DispatchError> {
    let n = grid.n_nodes();
    let t_steps = horizon;
    let h = params.step_hours;
    let mut pb = ProblemBuilder::new();

    // Variables.
    let mut node_vars = Vec::with_capacity(n);
    for node in 0..n {
        let mut s_re = Vec::new();
        let mut s_im = Vec::new();
        if node != grid.pcc() {
            for _ in 0..t_steps {
                s_re.push(pb.add_var());
                s_im.push(pb.add_var());
            }
        }
        let dv = (0..t_steps).map(|_| pb.add_var()).collect();
        node_vars.push(NodeVars { s_re, s_im, dv });
    }
    let mut prosumer_vars: BTreeMap<usize, ProsumerVars> = BTreeMap::new();
    for &m in grid.prosumers() {
        let id = grid.node_id(m);
        let spec = params
            .flex_spec(id)
            .ok_or(ParamError::MissingFlexSpec(id))?;
        let u_re: Vec<usize> = (0..t_steps).map(|_| pb.add_var()).collect();
        let u_im: Vec<usize> = (0..t_steps).map(|_| pb.add_var()).collect();
        let needs_abs = spec.cost.linear_rate() > 0.0 || spec.cost.segments().is_some();
        let w = needs_abs.then(|| (0..t_steps).map(|_| pb.add_var()).collect::<Vec<_>>());
        let pwl_cost = spec
            .cost
            .segments()
            .map(|_| (0..t_steps).map(|_| pb.add_var()).collect::<Vec<_>>());
        // Objective: flexibility cost on per-step energy |u| * h.
        for t in 0..t_steps {
            let quad = spec.cost.quad_rate();
            if quad > 0.0 {
                pb.add_quad_cost(u_re[t], quad * h * h);
                pb.add_quad_cost(u_im[t], quad * h * h);
            }
            if epsilon > 0.0 {
                pb.add_quad_cost(u_re[t], epsilon);
                pb.add_quad_cost(u_im[t], epsilon);
            }
            if let Some(w) = &w {
                if spec.cost.segments().is_none() {
                    pb.add_lin_cost(w[t], spec.cost.linear_rate() * h);
                }
            }
            if let Some(c) = &pwl_cost {
                pb.add_lin_cost(c[t], 1.0);
            }
            if !strict {
                let price = params.export_at(t);
                pb.add_lin_cost(u_re[t], -price.re * h);
                pb.add_lin_cost(u_im[t], -price.im * h);
                let fx = forecasts[&id][t];
                pb.add_const_cost(-(price.re * fx.re + price.im * fx.im) * h);
            }
        }
        prosumer_vars.insert(
            m,
            ProsumerVars {
                u_re,
                u_im,
                w,
                pwl_cost,
            },
        );
    }

    // DistFlow constraints.
    let mut node_rows: Vec<Option<NodeRows>> = (0..n).map(|_| None).collect();
    for node in grid.edge_nodes() {
        let nv = &node_vars[node];
        let mut flow_re = Vec::with_capacity(t_steps);
        let mut flow_im = Vec::with_capacity(t_steps);
        let mut volt = Vec::with_capacity(t_steps);
        let parent = grid.parent(node).expect("non-PCC node has a parent");
        let z = grid.impedance(node);
        for t in 0..t_steps {
            let mut ere = Expr::var(nv.s_re[t]);
            let mut eim = Expr::var(nv.s_im[t]);
            for &c in grid.children(node) {
                ere = ere.add(node_vars[c].s_re[t], -1.0);
                eim = eim.add(node_vars[c].s_im[t], -1.0);
            }
            if let Some(pv) = prosumer_vars.get(&node) {
                let fx = forecasts[&grid.node_id(node)][t];
                ere = ere.add(pv.u_re[t], -1.0).offset(-fx.re);
                eim = eim.add(pv.u_im[t], -1.0).offset(-fx.im);
            }
            flow_re.push(pb.eq(ere));
            flow_im.push(pb.eq(eim));
            // dv(parent) - dv(node) + 2 Re(z* S) = 0.
            let ev = Expr::var(node_vars[parent].dv[t])
                .add(nv.dv[t], -1.0)
                .add(nv.s_re[t], 2.0 * z.re)
                .add(nv.s_im[t], 2.0 * z.im);
            volt.push(pb.eq(ev));
        }
        let line = (grid.s_limit(node) < LIMIT_SKIP).then(|| {
            (0..t_steps)
                .map(|t| {
                    pb.soc(vec![
                        Expr::constant(grid.s_limit(node)),
                        Expr::var(nv.s_re[t]),
                        Expr::var(nv.s_im[t]),
                    ])
                })
                .collect::<Vec<_>>()
        });
        let dv_lim = grid.dv_limit(node);
        let (vlim_up, vlim_dn) = if dv_lim < LIMIT_SKIP {
            (
                Some(
                    (0..t_steps)
                        .map(|t| pb.leq(Expr::var(nv.dv[t]).offset(-dv_lim)))
                        .collect::<Vec<_>>(),
                ),
                Some(
                    (0..t_steps)
                        .map(|t| pb.leq(Expr::new().add(nv.dv[t], -1.0).offset(-dv_lim)))
                        .collect::<Vec<_>>(),
                ),
            )
        } else {
            (None, None)
        };
        node_rows[node] = Some(NodeRows {
            flow_re,
            flow_im,
            volt,
            line,
            vlim_up,
            vlim_dn,
        });
    }
    // Reference voltage at the PCC.
    for t in 0..t_steps {
        pb.eq(Expr::var(node_vars[grid.pcc()].dv[t]));
    }

    // Flexibility feasible sets and cost epigraphs.
    let mut prosumer_rows: BTreeMap<usize, ProsumerRows> = BTreeMap::new();
    for &m in grid.prosumers() {
        let id = grid.node_id(m);
        let spec = &params.flex[&id];
        let pv = &prosumer_vars[&m];
        let boxes = spec.u_max.filter(|umax| *umax < LIMIT_SKIP).map(|umax| {
            (0..t_steps)
                .map(|t| {
                    pb.soc(vec![
                        Expr::constant(umax),
                        Expr::var(pv.u_re[t]),
                        Expr::var(pv.u_im[t]),
                    ])
                })
                .collect::<Vec<_>>()
        });
        let storage = spec.storage_neutral.then(|| {
            let mut e = Expr::new();
            for t in 0..t_steps {
                e = e.add(pv.u_re[t], 1.0);
            }
            pb.eq(e)
        });
        if let Some(w) = &pv.w {
            for t in 0..t_steps {
                pb.soc(vec![
                    Expr::var(w[t]),
                    Expr::var(pv.u_re[t]),
                    Expr::var(pv.u_im[t]),
                ]);
            }
            if let (Some(segs), Some(cvars)) = (spec.cost.segments(), &pv.pwl_cost) {
                for t in 0..t_steps {
                    for &(slope, intercept) in &segs {
                        // cost >= slope * (w * h) + intercept.
                        pb.leq(
                            Expr::new()
                                .add(w[t], slope * h)
                                .add(cvars[t], -1.0)
                                .offset(intercept),
                        );
                    }
                }
            }
        }
        prosumer_rows.insert(m, ProsumerRows { boxes, storage });
    }

    // Boundary-exchange terms per block: taxed in the default mode, pinned
    // to zero in strict mode.
    let mut exchange_rows: Vec<(usize, Vec<(EqId, EqId)>)> = Vec::new();
    for block in blocks {
        if strict {
            let nb = block.local_pcc();
            let mut rows = Vec::with_capacity(t_steps);
            for t in 0..t_steps {
                let (ere, eim) = exchange_expr(grid, block, nb, &node_vars, &prosumer_vars, forecasts, t);
                rows.push((pb.eq(ere), pb.eq(eim)));
            }
            exchange_rows.push((nb, rows));
        } else {
            for &nb in &block.boundary {
                for t in 0..t_steps {
                    let kappa = params.kappa.at(t);
                    if kappa == 0.0 {
                        continue;
                    }
                    let (ere, eim) =
                        exchange_expr(grid, block, nb, &node_vars, &prosumer_vars, forecasts, t);
                    let tau = pb.add_var();
                    pb.add_lin_cost(tau, kappa * h);
                    pb.soc(vec![Expr::var(tau), ere, eim]);
                }
            }
        }
    }

    let solved = pb.solve(SOLVER_TOL)?;

    // Extraction.
    let mut u = BTreeMap::new();
    for (&m, pv) in &prosumer_vars {
        let series: Series = (0..t_steps)
            .map(|t| Complex64::new(solved.value(pv.u_re[t]), solved.value(pv.u_im[t])))
            .collect();
        u.insert(grid.node_id(m), series);
    }
    let mut flows = vec![vec![Complex64::default(); t_steps]; n];
    let mut dv = vec![vec![0.0; t_steps]; n];
    for node in 0..n {
        for t in 0..t_steps {
            if node != grid.pcc() {
                flows[node][t] = Complex64::new(
                    solved.value(node_vars[node].s_re[t]),
                    solved.value(node_vars[node].s_im[t]),
                );
            }
            dv[node][t] = solved.value(node_vars[node].dv[t]);
        }
    }
    for &c in grid.children(grid.pcc()) {
        for t in 0..t_steps {
            let f = flows[c][t];
            flows[grid.pcc()][t] += f;
        }
    }
    let flow_state = FlowState {
        flows,
        dv,
        horizon: t_steps,
    };

    let mut duals = DualBundle::default();
    for node in grid.edge_nodes() {
        let rows = node_rows[node].as_ref().unwrap();
        let id = grid.node_id(node);
        duals.lambda.insert(
            id,
            (0..t_steps)
                .map(|t| {
                    Complex64::new(
                        solved.dual_eq(rows.flow_re[t]),
                        solved.dual_eq(rows.flow_im[t]),
                    )
                })
                .collect(),
        );
        duals.beta.insert(
            id,
            (0..t_steps).map(|t| solved.dual_eq(rows.volt[t])).collect(),
        );
        if let Some(line) = &rows.line {
            duals.mu.insert(
                id,
                (0..t_steps)
                    .map(|t| solved.dual_soc(line[t])[0] / (2.0 * grid.s_limit(node)))
                    .collect(),
            );
        }
        if let (Some(up), Some(dn)) = (&rows.vlim_up, &rows.vlim_dn) {
            duals.eta.insert(
                id,
                (0..t_steps)
                    .map(|t| solved.dual_leq(up[t]) + solved.dual_leq(dn[t]))
                    .collect(),
            );
        }
    }
    for (&m, rows) in &prosumer_rows {
        let id = grid.node_id(m);
        if let Some(boxes) = &rows.boxes {
            duals.theta_box.insert(
                id,
                (0..t_steps)
                    .map(|t| solved.dual_soc(boxes[t])[0])
                    .collect(),
            );
        }
        if let Some(st) = rows.storage {
            duals.theta_storage.insert(id, solved.dual_eq(st));
        }
    }
    for (_, rows) in &exchange_rows {
        duals.lambda_exchange.push(
            rows.iter()
                .map(|&(re, im)| {
                    Complex64::new(-solved.dual_eq(re), -solved.dual_eq(im))
                })
                .collect(),
        );
    }

    // True ex-ante objective (regulariser excluded).
    let mut flex_cost = 0.0;
    for (&id, series) in &u {
        flex_cost += params.flex_cost(id, series);
    }
    let mut objective = flex_cost;
    if !strict {
        for block in blocks {
            let exch = crate::powerflow::boundary_exchange(grid, block, &flow_state);
            for series in exch.values() {
                for (t, s) in series.iter().enumerate() {
                    objective += params.kappa.at(t) * h * s.norm();
                }
            }
        }
        for (&id, series) in &u {
            for (t, &uv) in series.iter().enumerate() {
                let total = uv + forecasts[&id][t];
                let price = params.export_at(t);
                objective -= (price.re * total.re + price.im * total.im) * h;
            }
        }
    }

    let solution = DispatchSolution {
        u,
        flows: flow_state,
        objective,
        flex_cost,
        duality_gap: solved.duality_gap(),
        comp_slack: solved.comp_slack(),
        duals,
        regularizer: epsilon,
        strict,
    };
    Ok(OpfOutput {
        solution,
        artifacts: OpfArtifacts {
            solved,
            horizon: t_steps,
            node_vars,
            prosumer_vars,
            node_rows,
            prosumer_rows,
            exchange_rows,
        },
    })
}

fn exchange_expr(
    grid: &Grid,
    block: &Coalition,
    nb: usize,
    node_vars: &[NodeVars],
    prosumer_vars: &BTreeMap<usize, ProsumerVars>,
    forecasts: &BTreeMap<NodeId, Series>,
    t: usize,
) -> (Expr, Expr) {
    let mut ere = Expr::new();
    let mut eim = Expr::new();
    for &c in grid.children(nb) {
        if block.edges.contains(&c) {
            ere = ere.add(node_vars[c].s_re[t], 1.0);
            eim = eim.add(node_vars[c].s_im[t], 1.0);
        }
    }
    if block.members.contains(&nb) {
        let pv = &prosumer_vars[&nb];
        let fx = forecasts[&grid.node_id(nb)][t];
        ere = ere.add(pv.u_re[t], 1.0).offset(fx.re);
        eim = eim.add(pv.u_im[t], 1.0).offset(fx.im);
    }
    (ere, eim)
}

impl OpfArtifacts {
    /// Per-node Lagrangian values of the strict single-block problem,
    /// grouping every constraint pairing with the node that owns the edge
    /// toward its parent. Summing over all non-PCC nodes recovers the
    /// optimal objective (up to complementarity residuals); restricted sums
    /// bound the decoupled cost of any single-boundary sub-coalition.
    pub fn node_lagrangians(
        &self,
        grid: &Grid,
        params: &CostParams,
        forecasts: &BTreeMap<NodeId, Series>,
    ) -> BTreeMap<NodeId, f64> {
        let s = &self.solved;
        let mut out = BTreeMap::new();
        for node in grid.edge_nodes() {
            let id = grid.node_id(node);
            let rows = self.node_rows[node].as_ref().unwrap();
            let nv = &self.node_vars[node];
            let mut total = 0.0;
            for t in 0..self.horizon {
                let s_re = s.value(nv.s_re[t]);
                let s_im = s.value(nv.s_im[t]);
                let dv = s.value(nv.dv[t]);
                // Own flow-definition row, children terms excluded:
                // lambda * (S - u - forecast) at a prosumer, lambda * S else.
                let lam_re = s.dual_eq(rows.flow_re[t]);
                let lam_im = s.dual_eq(rows.flow_im[t]);
                let (mut own_re, mut own_im) = (s_re, s_im);
                if let Some(pv) = self.prosumer_vars.get(&node) {
                    let fx = forecasts[&id][t];
                    own_re -= s.value(pv.u_re[t]) + fx.re;
                    own_im -= s.value(pv.u_im[t]) + fx.im;
                }
                total += lam_re * own_re + lam_im * own_im;
                // Parent flow-definition row contributes -lambda_parent * S.
                let parent = grid.parent(node).unwrap();
                if parent != grid.pcc() {
                    let prow = self.node_rows[parent].as_ref().unwrap();
                    total -= s.dual_eq(prow.flow_re[t]) * s_re;
                    total -= s.dual_eq(prow.flow_im[t]) * s_im;
                }
                // Zero-exchange rows touching this edge.
                for (nb, rws) in &self.exchange_rows {
                    if *nb == parent {
                        let (re_row, im_row) = rws[t];
                        total += s.dual_eq(re_row) * s_re;
                        total += s.dual_eq(im_row) * s_im;
                    }
                }
                // Voltage recursion: own row minus the parent-voltage term,
                // plus the children's parent-voltage terms.
                let z = grid.impedance(node);
                let beta = s.dual_eq(rows.volt[t]);
                total += beta * (-dv + 2.0 * (z.re * s_re + z.im * s_im));
                for &c in grid.children(node) {
                    let crow = self.node_rows[c].as_ref().unwrap();
                    total += s.dual_eq(crow.volt[t]) * dv;
                }
                if let Some(line) = &rows.line {
                    total += s.pairing_soc(line[t]);
                }
                if let (Some(up), Some(dn)) = (&rows.vlim_up, &rows.vlim_dn) {
                    total += s.pairing_leq(up[t]) + s.pairing_leq(dn[t]);
                }
            }
            if let Some(pv) = self.prosumer_vars.get(&node) {
                let series: Series = (0..self.horizon)
                    .map(|t| Complex64::new(s.value(pv.u_re[t]), s.value(pv.u_im[t])))
                    .collect();
                total += params.flex_cost(id, &series);
                let prow = &self.prosumer_rows[&node];
                if let Some(boxes) = &prow.boxes {
                    for t in 0..self.horizon {
                        total += s.pairing_soc(boxes[t]);
                    }
                }
                if let Some(st) = prow.storage {
                    total += s.pairing_eq(st);
                }
            }
            out.insert(id, total);
        }
        out
    }
}
