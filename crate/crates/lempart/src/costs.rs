//! Two-stage cost accounting: ex-post violation and balancing penalties,
//! total partition cost, per-coalition costs under the coupled (DLMP +
//! imbalance tariff) and decoupled (strict self-consumption) models, and
//! deviation costs for the stability analysis.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::dispatch::{self, DispatchError, DispatchSolution};
use crate::grid::{coalition_from_indices, Coalition, Grid, GridError, NodeId, Partition};
use crate::params::CostParams;
use crate::powerflow::{self, FlowState, PowerflowError};
use crate::timeseries::ProsumptionSet;
use crate::timeseries::SeriesError;

const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CostError {
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Powerflow(#[from] PowerflowError),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("deviating coalition is not contained in any partition block")]
    DeviatorNotContained,
}

/// Itemised two-stage cost of one partition evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    /// Sorted member ids per block.
    pub partition: Vec<Vec<NodeId>>,
    pub flex: f64,
    pub imbalance: f64,
    pub overload: f64,
    pub voltage: f64,
    pub tax: f64,
    /// Export revenue (enters the total with a negative sign).
    pub export: f64,
    pub total: f64,
    /// Ex-ante economic term re-evaluated at the realization.
    pub econ_realized: f64,
    /// Balancing cost per step.
    pub balancing_series: Vec<f64>,
    /// Violation cost per step on edges and nodes external to all blocks.
    pub external_violation_series: Vec<f64>,
    /// Violation cost per step inside each block.
    pub block_violation_series: Vec<Vec<f64>>,
    /// Non-PCC nodes shared by two or more blocks (hub sharing).
    pub shared_nodes: Vec<NodeId>,
}

impl CostReport {
    /// Residual of the total-cost decomposition identity.
    pub fn identity_residual(&self) -> f64 {
        let violations: f64 = self.external_violation_series.iter().sum::<f64>()
            + self
                .block_violation_series
                .iter()
                .map(|s| s.iter().sum::<f64>())
                .sum::<f64>();
        let balancing: f64 = self.balancing_series.iter().sum();
        (self.econ_realized + violations + balancing - self.total).abs()
    }

    /// Residual of the itemised-column identity.
    pub fn items_residual(&self) -> f64 {
        (self.flex + self.imbalance + self.overload + self.voltage + self.tax - self.export
            - self.total)
            .abs()
    }
}

/// Per-coalition cost under one of the two pricing models.
#[derive(Debug, Clone, Serialize)]
pub struct CoalitionCost {
    pub members: Vec<NodeId>,
    pub total: f64,
    pub flex: f64,
    pub internal_violations: f64,
    pub detail: CoalitionCostDetail,
}

#[derive(Debug, Clone, Serialize)]
pub enum CoalitionCostDetail {
    /// Coupled model: internal costs plus DLMP settlement and the shared
    /// ex-post recovery charge.
    Externalities {
        phi_int: f64,
        phi_ext: f64,
        tax: f64,
        dlmp_payment: f64,
        imbalance_charge: f64,
        /// Uniform per-block recovery applied where the recovery tariff was
        /// undefined (violations with zero block imbalances).
        uniform_recovery: f64,
        alpha: Vec<f64>,
    },
    /// Decoupled model: self-balancing at the coalition price.
    Decoupled { balancing: f64, balancing_price: f64 },
}

/// Full partition evaluation: dispatch, realized flows and the cost report,
/// plus the ex-post recovery coefficients reused by per-coalition costs.
#[derive(Debug)]
pub struct PartitionEvaluation {
    pub dispatch: DispatchSolution,
    pub realized_flows: FlowState,
    pub report: CostReport,
    /// Imbalance-recovery coefficient per step (CHF/MWh).
    pub alpha: Vec<f64>,
    /// Uniform per-block recovery per step where the coefficient is
    /// undefined.
    pub uniform_recovery: Vec<f64>,
}

fn pos(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Ex-post violation costs at the realized state `(u, U)`: per-block series
/// over internal edges and nodes, and the series on edges/nodes external to
/// every block.
pub fn expost_violation_costs(
    grid: &Grid,
    partition: &Partition,
    realized_flows: &FlowState,
    params: &CostParams,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let horizon = realized_flows.horizon;
    let h = params.step_hours;
    let edge_cost = |node: usize, t: usize| -> f64 {
        let over = pos(realized_flows.flows[node][t].norm() - grid.s_limit(node));
        params.overload_penalty.at(grid.node_id(node)) * over * h
    };
    let node_cost = |node: usize, t: usize| -> f64 {
        let over = pos(realized_flows.dv[node][t].abs() - grid.dv_limit(node));
        params.voltage_penalty.at(grid.node_id(node)) * over
    };

    let mut per_block = Vec::with_capacity(partition.blocks.len());
    let mut internal_edges = std::collections::BTreeSet::new();
    let mut internal_nodes = std::collections::BTreeSet::new();
    for block in &partition.blocks {
        let mut series = vec![0.0; horizon];
        for &e in &block.edges {
            internal_edges.insert(e);
            for (t, v) in series.iter_mut().enumerate() {
                *v += edge_cost(e, t);
            }
        }
        for n in block.internal_nodes() {
            internal_nodes.insert(n);
            for (t, v) in series.iter_mut().enumerate() {
                *v += node_cost(n, t);
            }
        }
        per_block.push(series);
    }
    let mut external = vec![0.0; horizon];
    for node in grid.edge_nodes() {
        if !internal_edges.contains(&node) {
            for (t, v) in external.iter_mut().enumerate() {
                *v += edge_cost(node, t);
            }
        }
    }
    for node in 0..grid.n_nodes() {
        if node != grid.pcc() && !internal_nodes.contains(&node) {
            for (t, v) in external.iter_mut().enumerate() {
                *v += node_cost(node, t);
            }
        }
    }
    (per_block, external)
}

/// Grid balancing cost per step: the imbalance penalty on the magnitude of
/// the aggregate forecast error.
pub fn balancing_cost(set: &ProsumptionSet, params: &CostParams) -> Vec<f64> {
    let horizon = set.horizon();
    let mut series = vec![0.0; horizon];
    for (t, v) in series.iter_mut().enumerate() {
        let mut total = Complex64::default();
        for id in set.prosumer_ids() {
            total += set.realized(id).unwrap()[t] - set.forecast(id).unwrap()[t];
        }
        *v = params.imbalance_penalty * total.norm() * params.step_hours;
    }
    series
}

/// Aggregate imbalance magnitude of a block per step (MW).
fn block_imbalance(set: &ProsumptionSet, grid: &Grid, block: &Coalition) -> Vec<f64> {
    let mut out = vec![0.0; set.horizon()];
    for (t, v) in out.iter_mut().enumerate() {
        let mut total = Complex64::default();
        for &m in &block.members {
            let id = grid.node_id(m);
            total += set.realized(id).unwrap()[t] - set.forecast(id).unwrap()[t];
        }
        *v = total.norm();
    }
    out
}

/// Evaluates the full two-stage cost of a partition: ex-ante dispatch under
/// forecasts, then the economic term re-evaluated at the realization plus
/// violation and balancing penalties.
pub fn evaluate_partition(
    grid: &Grid,
    partition: &Partition,
    set: &ProsumptionSet,
    params: &CostParams,
) -> Result<PartitionEvaluation, CostError> {
    let dispatch = dispatch::solve_exante(grid, partition, set.forecasts(), params)?;
    evaluate_partition_with(grid, partition, set, params, dispatch)
}

pub fn evaluate_partition_with(
    grid: &Grid,
    partition: &Partition,
    set: &ProsumptionSet,
    params: &CostParams,
    dispatch: DispatchSolution,
) -> Result<PartitionEvaluation, CostError> {
    let h = params.step_hours;
    let horizon = set.horizon();
    let inj = powerflow::net_injections(grid, set.realizations(), Some(&dispatch.u))?;
    let realized_flows = powerflow::branch_flows(grid, &inj)?;

    // Economic term at the realization: flexibility cost of the fixed
    // dispatch, tax on realized boundary exchanges, export revenue at the
    // realized net injections.
    let flex = dispatch.flex_cost;
    let mut tax = 0.0;
    for block in &partition.blocks {
        let exch = powerflow::boundary_exchange(grid, block, &realized_flows);
        for series in exch.values() {
            for (t, s) in series.iter().enumerate() {
                tax += params.kappa.at(t) * s.norm() * h;
            }
        }
    }
    let mut export = 0.0;
    for id in set.prosumer_ids() {
        let u = &dispatch.u[&id];
        let real = set.realized(id).unwrap();
        for t in 0..horizon {
            let total = real[t] + u[t];
            let price = params.export_at(t);
            export += (price.re * total.re + price.im * total.im) * h;
        }
    }
    let econ_realized = flex + tax - export;

    let (block_violation_series, external_violation_series) =
        expost_violation_costs(grid, partition, &realized_flows, params);
    let balancing_series = balancing_cost(set, params);

    // Overload/voltage itemisation across all edges and nodes.
    let mut overload = 0.0;
    let mut voltage = 0.0;
    for node in grid.edge_nodes() {
        for t in 0..horizon {
            overload += params.overload_penalty.at(grid.node_id(node))
                * pos(realized_flows.flows[node][t].norm() - grid.s_limit(node))
                * h;
        }
    }
    for node in 0..grid.n_nodes() {
        if node == grid.pcc() {
            continue;
        }
        for t in 0..horizon {
            voltage += params.voltage_penalty.at(grid.node_id(node))
                * pos(realized_flows.dv[node][t].abs() - grid.dv_limit(node));
        }
    }

    let violations_total: f64 = external_violation_series.iter().sum::<f64>()
        + block_violation_series
            .iter()
            .map(|s| s.iter().sum::<f64>())
            .sum::<f64>();
    let imbalance: f64 = balancing_series.iter().sum();
    let total = econ_realized + violations_total + imbalance;

    // Recovery tariff per step; undefined denominators fall back to a
    // uniform per-block charge, flagged in the evaluation.
    let n_blocks = partition.blocks.len().max(1);
    let mut alpha = vec![0.0; horizon];
    let mut uniform_recovery = vec![0.0; horizon];
    let imbalances: Vec<Vec<f64>> = partition
        .blocks
        .iter()
        .map(|b| block_imbalance(set, grid, b))
        .collect();
    for t in 0..horizon {
        let numer = external_violation_series[t] + balancing_series[t];
        let denom: f64 = imbalances.iter().map(|s| s[t] * h).sum();
        if denom > ZERO_TOL {
            alpha[t] = numer / denom;
        } else if numer > ZERO_TOL {
            uniform_recovery[t] = numer / n_blocks as f64;
        }
    }

    // Non-PCC nodes shared by multiple blocks.
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for block in &partition.blocks {
        for &n in &block.nodes {
            *seen.entry(n).or_insert(0) += 1;
        }
    }
    let shared_nodes: Vec<NodeId> = seen
        .iter()
        .filter(|&(&n, &c)| c > 1 && n != grid.pcc())
        .map(|(&n, _)| grid.node_id(n))
        .collect();

    let report = CostReport {
        partition: partition.blocks.iter().map(|b| b.member_ids(grid)).collect(),
        flex,
        imbalance,
        overload,
        voltage,
        tax,
        export,
        total,
        econ_realized,
        balancing_series,
        external_violation_series,
        block_violation_series,
        shared_nodes,
    };
    Ok(PartitionEvaluation {
        dispatch,
        realized_flows,
        report,
        alpha,
        uniform_recovery,
    })
}

/// Total partition cost (the DSO objective).
pub fn partition_total_cost(
    grid: &Grid,
    partition: &Partition,
    set: &ProsumptionSet,
    params: &CostParams,
) -> Result<CostReport, CostError> {
    Ok(evaluate_partition(grid, partition, set, params)?.report)
}

/// Coalition cost in the coupled model: internal costs (flexibility,
/// internal violations, exchange tax) plus external settlement (DLMP
/// payments and the imbalance-recovery charge).
pub fn coalition_cost_externalities(
    grid: &Grid,
    partition: &Partition,
    block_index: usize,
    eval: &PartitionEvaluation,
    set: &ProsumptionSet,
    params: &CostParams,
) -> CoalitionCost {
    let h = params.step_hours;
    let block = &partition.blocks[block_index];
    let horizon = set.horizon();

    let mut flex = 0.0;
    for &m in &block.members {
        let id = grid.node_id(m);
        flex += params.flex_cost(id, &eval.dispatch.u[&id]);
    }
    let internal_violations: f64 = eval.report.block_violation_series[block_index].iter().sum();
    let exch = powerflow::boundary_exchange(grid, block, &eval.realized_flows);
    let mut tax = 0.0;
    for series in exch.values() {
        for (t, s) in series.iter().enumerate() {
            tax += params.kappa.at(t) * s.norm() * h;
        }
    }
    let phi_int = flex + internal_violations + tax;

    let mut dlmp_payment = 0.0;
    for (&nb, series) in &exch {
        for (t, s) in series.iter().enumerate() {
            let price = eval.dispatch.duals.dlmp(grid, params, nb, t);
            dlmp_payment -= (price.re * s.re + price.im * s.im) * h;
        }
    }
    let imbalance = block_imbalance(set, grid, block);
    let mut imbalance_charge = 0.0;
    let mut uniform_recovery = 0.0;
    for t in 0..horizon {
        imbalance_charge += eval.alpha[t] * imbalance[t] * h;
        uniform_recovery += eval.uniform_recovery[t];
    }
    let phi_ext = dlmp_payment + imbalance_charge + uniform_recovery;

    CoalitionCost {
        members: block.member_ids(grid),
        total: phi_int + phi_ext,
        flex,
        internal_violations,
        detail: CoalitionCostDetail::Externalities {
            phi_int,
            phi_ext,
            tax,
            dlmp_payment,
            imbalance_charge,
            uniform_recovery,
            alpha: eval.alpha.clone(),
        },
    }
}

/// Coalition cost in the decoupled model: flexibility from the zero-exchange
/// dispatch, self-balancing at the coalition price, and violations on the
/// coalition-local realized flows.
pub fn coalition_cost_decoupled(
    grid: &Grid,
    coalition: &Coalition,
    set: &ProsumptionSet,
    params: &CostParams,
) -> Result<CoalitionCost, CostError> {
    let out = dispatch::solve_exante_decoupled(grid, coalition, set.forecasts(), params)?;
    coalition_cost_decoupled_with(grid, coalition, set, params, &out)
}

pub fn coalition_cost_decoupled_with(
    grid: &Grid,
    coalition: &Coalition,
    set: &ProsumptionSet,
    params: &CostParams,
    solve: &dispatch::DecoupledSolve,
) -> Result<CoalitionCost, CostError> {
    let h = params.step_hours;
    let sub = &solve.subgrid;
    let members = coalition.member_ids(grid);
    let flex = solve.solution.flex_cost;

    // Coalition-local realized flows.
    let restricted = set.restrict(&members)?;
    let inj = powerflow::net_injections(sub, restricted.realizations(), Some(&solve.solution.u))?;
    let flows = powerflow::branch_flows(sub, &inj)?;
    let mut internal_violations = 0.0;
    for node in sub.edge_nodes() {
        for t in 0..flows.horizon {
            internal_violations += params.overload_penalty.at(sub.node_id(node))
                * pos(flows.flows[node][t].norm() - sub.s_limit(node))
                * h;
        }
    }
    for node in 0..sub.n_nodes() {
        if node == sub.pcc() {
            continue;
        }
        for t in 0..flows.horizon {
            internal_violations += params.voltage_penalty.at(sub.node_id(node))
                * pos(flows.dv[node][t].abs() - sub.dv_limit(node));
        }
    }

    let balancing_price = params.balancing_price(&members);
    let imbalance = block_imbalance(set, grid, coalition);
    let balancing: f64 = imbalance.iter().map(|m| balancing_price * m * h).sum();

    Ok(CoalitionCost {
        members,
        total: flex + internal_violations + balancing,
        flex,
        internal_violations,
        detail: CoalitionCostDetail::Decoupled {
            balancing,
            balancing_price,
        },
    })
}

/// Coupled-model block cost evaluated on a strict-self-consumption
/// dispatch. Every block zeroes its boundary exchange ex ante and buys its
/// own ex-post balancing, so the realized boundary flow equals the block
/// imbalance: the exchange charge prices that imbalance at the tax rate,
/// while DLMP settlement and the shared recovery term vanish.
pub fn coalition_cost_externalities_strict(
    grid: &Grid,
    partition: &Partition,
    block_index: usize,
    dispatch: &DispatchSolution,
    set: &ProsumptionSet,
    params: &CostParams,
) -> Result<CoalitionCost, CostError> {
    let h = params.step_hours;
    let block = &partition.blocks[block_index];
    let inj = powerflow::net_injections(grid, set.realizations(), Some(&dispatch.u))?;
    let realized_flows = powerflow::branch_flows(grid, &inj)?;

    let mut flex = 0.0;
    for &m in &block.members {
        let id = grid.node_id(m);
        flex += params.flex_cost(id, &dispatch.u[&id]);
    }
    let (per_block, _) = expost_violation_costs(grid, partition, &realized_flows, params);
    let internal_violations: f64 = per_block[block_index].iter().sum();
    let exch = powerflow::boundary_exchange(grid, block, &realized_flows);
    let mut tax = 0.0;
    for series in exch.values() {
        for (t, s) in series.iter().enumerate() {
            tax += params.kappa.at(t) * s.norm() * h;
        }
    }
    let phi_int = flex + internal_violations + tax;
    Ok(CoalitionCost {
        members: block.member_ids(grid),
        total: phi_int,
        flex,
        internal_violations,
        detail: CoalitionCostDetail::Externalities {
            phi_int,
            phi_ext: 0.0,
            tax,
            dlmp_payment: 0.0,
            imbalance_charge: 0.0,
            uniform_recovery: 0.0,
            alpha: vec![0.0; set.horizon()],
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DeviationMode {
    NoExternalities,
    Externalities,
}

/// Cost a deviating coalition anticipates. Without externalities it is the
/// decoupled cost; with externalities the remainder of the host block splits
/// into connected components, the new partition is re-dispatched, and the
/// deviator pays its coupled-model cost there.
pub fn deviation_cost(
    grid: &Grid,
    partition: &Partition,
    deviating: &Coalition,
    mode: DeviationMode,
    set: &ProsumptionSet,
    params: &CostParams,
) -> Result<f64, CostError> {
    match mode {
        DeviationMode::NoExternalities => {
            Ok(coalition_cost_decoupled(grid, deviating, set, params)?.total)
        }
        DeviationMode::Externalities => {
            let prime = deviation_partition(grid, partition, deviating)?;
            let eval = evaluate_partition(grid, &prime, set, params)?;
            let idx = prime
                .blocks
                .iter()
                .position(|b| b.members == deviating.members)
                .expect("deviating block present in the deviation partition");
            Ok(coalition_cost_externalities(grid, &prime, idx, &eval, set, params).total)
        }
    }
}

/// The partition that results when `deviating` splits off: remaining blocks
/// stay, and the residual of the host block splits into the connected
/// components left after removing the deviator's subtree.
pub fn deviation_partition(
    grid: &Grid,
    partition: &Partition,
    deviating: &Coalition,
) -> Result<Partition, CostError> {
    let host = partition
        .blocks
        .iter()
        .position(|b| {
            deviating.members.iter().all(|m| b.members.contains(m))
                && deviating.edges.is_subset(&b.edges)
        })
        .ok_or(CostError::DeviatorNotContained)?;
    let host_block = &partition.blocks[host];
    let mut blocks: Vec<Coalition> = partition
        .blocks
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != host)
        .map(|(_, b)| b.clone())
        .collect();
    blocks.push(deviating.clone());

    let residual_members: Vec<usize> = host_block
        .members
        .iter()
        .copied()
        .filter(|m| !deviating.members.contains(m))
        .collect();
    if !residual_members.is_empty() {
        // Group residual members by connected component of the host's
        // subtree minus the deviator's edges.
        let mut comp: BTreeMap<usize, usize> = BTreeMap::new();
        for &n in &host_block.nodes {
            comp.insert(n, n);
        }
        fn find(comp: &mut BTreeMap<usize, usize>, mut n: usize) -> usize {
            while comp[&n] != n {
                let up = comp[&comp[&n]];
                comp.insert(n, up);
                n = up;
            }
            n
        }
        for &e in &host_block.edges {
            if deviating.edges.contains(&e) {
                continue;
            }
            let parent = grid.parent(e).unwrap();
            let (a, b) = (find(&mut comp, e), find(&mut comp, parent));
            if a != b {
                comp.insert(a, b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &m in &residual_members {
            groups.entry(find(&mut comp, m)).or_default().push(m);
        }
        for group in groups.values() {
            blocks.push(coalition_from_indices(grid, group));
        }
    }
    blocks.sort_by_key(|b| {
        (
            std::cmp::Reverse(b.members.len()),
            b.member_ids(grid),
        )
    });
    Ok(Partition { blocks })
}

/// Partition cost and per-block costs under the decoupled model: the sum of
/// block costs, which is the strict-self-consumption reading of the total.
pub fn partition_cost_decoupled(
    grid: &Grid,
    partition: &Partition,
    set: &ProsumptionSet,
    params: &CostParams,
) -> Result<(f64, Vec<CoalitionCost>), CostError> {
    let mut blocks = Vec::with_capacity(partition.blocks.len());
    let mut total = 0.0;
    for block in &partition.blocks {
        let cost = coalition_cost_decoupled(grid, block, set, params)?;
        total += cost.total;
        blocks.push(cost);
    }
    Ok((total, blocks))
}

/// Restriction of a prosumption set to a coalition's members, exposed for
/// oracle-style tests.
pub fn restrict_set(
    grid: &Grid,
    set: &ProsumptionSet,
    coalition: &Coalition,
) -> Result<ProsumptionSet, SeriesError> {
    set.restrict(&coalition.member_ids(grid))
}
