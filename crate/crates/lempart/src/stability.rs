//! Core nonemptiness, stable-partition checks, optimal and optimal stable
//! partition search, and the constructive dual-based core allocation for
//! the grand coalition under perfect forecasts.
//!
//! The core of a block is probed with a linear program over edge-indexed
//! allocations: maximise the allocated total subject to every connected
//! sub-coalition paying at most its deviation cost. The block's own
//! constraint bounds the objective by its cost, so the core is nonempty
//! exactly when the optimum attains the block cost.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::conic::{Expr, ProblemBuilder, SolveError};
use crate::costs::{
    self, coalition_cost_externalities, evaluate_partition, CoalitionCost, CostError,
    DeviationMode, PartitionEvaluation,
};
use crate::dispatch::DispatchError;
use crate::grid::{
    enumerate_connected_subcoalitions, enumerate_partitions, Coalition, Grid, GridError, NodeId,
    Partition,
};
use crate::params::CostParams;
use crate::timeseries::ProsumptionSet;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("core LP failed: {0}")]
    LpFailure(String),
    #[error("{count} deviating coalitions exceed the cap of {cap}")]
    ExponentialBlowup { count: usize, cap: usize },
    #[error("the dual-based allocation requires perfect forecasts")]
    RequiresPerfectForecasts,
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

#[derive(Debug, Clone)]
pub struct StabilityOptions {
    pub mode: DeviationMode,
    /// Prosumer-count cap for partition enumeration.
    pub partition_cap: usize,
    /// Cap on the deviating-coalition lattice per block.
    pub subcoalition_cap: usize,
    /// Absolute tolerance (CHF) on core inequalities.
    pub tol: f64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            mode: DeviationMode::Externalities,
            partition_cap: 10,
            subcoalition_cap: 1 << 12,
            tol: 1e-6,
        }
    }
}

/// Outcome of one block's core LP.
#[derive(Debug, Clone, Serialize)]
pub struct CoreResult {
    pub members: Vec<NodeId>,
    pub feasible: bool,
    /// LP optimum: the largest total allocation no sub-coalition rejects.
    pub objective: f64,
    /// The block cost the allocation must cover.
    pub budget: f64,
    /// Allocation per internal edge (keyed by the edge's child node), or
    /// per member for blocks without internal edges.
    pub allocation: Option<Vec<(NodeId, f64)>>,
    pub member_indexed: bool,
    /// Deviating coalitions whose constraints bind at the LP optimum.
    pub binding: Vec<Vec<NodeId>>,
}

/// Memoising deviation-cost oracle shared across a stability run.
pub struct DeviationOracle<'a> {
    grid: &'a Grid,
    set: &'a ProsumptionSet,
    params: &'a CostParams,
    mode: DeviationMode,
    decoupled: BTreeMap<Vec<NodeId>, Result<f64, String>>,
    evals: BTreeMap<String, PartitionEvaluation>,
}

impl<'a> DeviationOracle<'a> {
    pub fn new(
        grid: &'a Grid,
        set: &'a ProsumptionSet,
        params: &'a CostParams,
        mode: DeviationMode,
    ) -> Self {
        Self {
            grid,
            set,
            params,
            mode,
            decoupled: BTreeMap::new(),
            evals: BTreeMap::new(),
        }
    }

    /// Pre-computes decoupled costs for a batch of coalitions in parallel.
    fn warm_decoupled(&mut self, coalitions: &BTreeSet<Vec<NodeId>>) {
        let todo: Vec<Vec<NodeId>> = coalitions
            .iter()
            .filter(|k| !self.decoupled.contains_key(*k))
            .cloned()
            .collect();
        let results: Vec<(Vec<NodeId>, Result<f64, String>)> = todo
            .par_iter()
            .map(|members| {
                let r = crate::grid::coalition_from_prosumers(self.grid, members)
                    .map_err(|e| e.to_string())
                    .and_then(|c| {
                        costs::coalition_cost_decoupled(self.grid, &c, self.set, self.params)
                            .map(|c| c.total)
                            .map_err(|e| e.to_string())
                    });
                (members.clone(), r)
            })
            .collect();
        self.decoupled.extend(results);
    }

    fn decoupled_cost(&mut self, coalition: &Coalition) -> Result<f64, StabilityError> {
        let key = coalition.member_ids(self.grid);
        if !self.decoupled.contains_key(&key) {
            let r = costs::coalition_cost_decoupled(self.grid, coalition, self.set, self.params)
                .map(|c| c.total)
                .map_err(|e| e.to_string());
            self.decoupled.insert(key.clone(), r);
        }
        self.decoupled[&key]
            .clone()
            .map_err(StabilityError::LpFailure)
    }

    fn eval_for(&mut self, partition: &Partition) -> Result<&PartitionEvaluation, CostError> {
        let key = partition.label(self.grid);
        if !self.evals.contains_key(&key) {
            let eval = evaluate_partition(self.grid, partition, self.set, self.params)?;
            self.evals.insert(key.clone(), eval);
        }
        Ok(&self.evals[&key])
    }

    /// Deviation cost of `coalition` out of `partition` under the oracle's
    /// mode.
    pub fn phi_hat(
        &mut self,
        partition: &Partition,
        coalition: &Coalition,
    ) -> Result<f64, StabilityError> {
        match self.mode {
            DeviationMode::NoExternalities => self.decoupled_cost(coalition),
            DeviationMode::Externalities => {
                let prime = costs::deviation_partition(self.grid, partition, coalition)?;
                let idx = prime
                    .blocks
                    .iter()
                    .position(|b| b.members == coalition.members)
                    .expect("deviator present");
                let grid = self.grid;
                let set = self.set;
                let params = self.params;
                let eval = self.eval_for(&prime)?;
                Ok(coalition_cost_externalities(grid, &prime, idx, eval, set, params).total)
            }
        }
    }

    /// Cost carried by a block inside its own partition.
    pub fn block_cost(
        &mut self,
        partition: &Partition,
        block_index: usize,
    ) -> Result<CoalitionCost, StabilityError> {
        match self.mode {
            DeviationMode::NoExternalities => {
                let block = partition.blocks[block_index].clone();
                let _ = self.decoupled_cost(&block)?;
                Ok(costs::coalition_cost_decoupled(
                    self.grid, &block, self.set, self.params,
                )?)
            }
            DeviationMode::Externalities => {
                let grid = self.grid;
                let set = self.set;
                let params = self.params;
                let eval = self.eval_for(partition)?;
                Ok(coalition_cost_externalities(
                    grid,
                    partition,
                    block_index,
                    eval,
                    set,
                    params,
                ))
            }
        }
    }

    /// Total partition cost under the oracle's mode: the two-stage total in
    /// the coupled model, the sum of block costs in the decoupled one.
    pub fn partition_cost(&mut self, partition: &Partition) -> Result<f64, StabilityError> {
        match self.mode {
            DeviationMode::NoExternalities => {
                let mut total = 0.0;
                for block in &partition.blocks {
                    total += self.decoupled_cost(block)?;
                }
                Ok(total)
            }
            DeviationMode::Externalities => Ok(self.eval_for(partition)?.report.total),
        }
    }
}

/// Deviating-coalition lattice of a block, capped, and filtered to
/// single-boundary coalitions in the decoupled mode where only those may
/// form.
fn deviation_lattice(
    grid: &Grid,
    block: &Coalition,
    opts: &StabilityOptions,
) -> Result<Vec<Coalition>, StabilityError> {
    let count = (1usize << block.members.len()) - 1;
    if count > opts.subcoalition_cap {
        return Err(StabilityError::ExponentialBlowup {
            count,
            cap: opts.subcoalition_cap,
        });
    }
    let mut subs = enumerate_connected_subcoalitions(grid, block);
    if opts.mode == DeviationMode::NoExternalities {
        subs.retain(|c| c.single_boundary());
    }
    Ok(subs)
}

/// Core LP for one block of a partition.
pub fn core_check(
    grid: &Grid,
    partition: &Partition,
    block_index: usize,
    set: &ProsumptionSet,
    params: &CostParams,
    opts: &StabilityOptions,
) -> Result<CoreResult, StabilityError> {
    let mut oracle = DeviationOracle::new(grid, set, params, opts.mode);
    core_check_with(grid, partition, block_index, opts, &mut oracle)
}

pub fn core_check_with(
    grid: &Grid,
    partition: &Partition,
    block_index: usize,
    opts: &StabilityOptions,
    oracle: &mut DeviationOracle,
) -> Result<CoreResult, StabilityError> {
    let block = &partition.blocks[block_index];
    let budget = oracle.block_cost(partition, block_index)?.total;
    let members = block.member_ids(grid);

    if block.edges.is_empty() {
        // Degenerate edge set: allocations attach to the member prosumers
        // and the only constraint is the block's own deviation cost.
        let phi_hat = oracle.phi_hat(partition, block)?;
        let feasible = budget <= phi_hat + opts.tol;
        return Ok(CoreResult {
            members: members.clone(),
            feasible,
            objective: phi_hat,
            budget,
            allocation: feasible.then(|| vec![(members[0], budget)]),
            member_indexed: true,
            binding: vec![members],
        });
    }

    let subs = deviation_lattice(grid, block, opts)?;
    let mut costs_hat = Vec::with_capacity(subs.len());
    for sub in &subs {
        costs_hat.push(oracle.phi_hat(partition, sub)?);
    }

    // Edge-indexed LP: maximise the total allocation subject to each
    // sub-coalition's edge share staying within its deviation cost.
    let edge_ids: Vec<usize> = block.edges.iter().copied().collect();
    let mut pb = ProblemBuilder::new();
    let gamma: BTreeMap<usize, usize> = edge_ids.iter().map(|&e| (e, pb.add_var())).collect();
    let scale = costs_hat
        .iter()
        .fold(1.0f64, |acc, c| acc.max(c.abs()))
        .max(budget.abs());
    for &e in &edge_ids {
        pb.add_lin_cost(gamma[&e], -1.0);
        // Tiny curvature keeps the optimal face single-valued without
        // moving the optimum beyond the core tolerance.
        pb.add_quad_cost(gamma[&e], 1e-12 * scale.max(1.0));
    }
    let mut rows = Vec::with_capacity(subs.len());
    for (sub, &phi_hat) in subs.iter().zip(&costs_hat) {
        if sub.edges.is_empty() {
            // Empty edge share: the constraint reads 0 <= phi_hat.
            if phi_hat < -opts.tol {
                return Ok(CoreResult {
                    members,
                    feasible: false,
                    objective: f64::NEG_INFINITY,
                    budget,
                    allocation: None,
                    member_indexed: false,
                    binding: vec![sub.member_ids(grid)],
                });
            }
            rows.push(None);
            continue;
        }
        let mut expr = Expr::new().offset(-phi_hat);
        for &e in &sub.edges {
            expr = expr.add(gamma[&e], 1.0);
        }
        rows.push(Some(pb.leq(expr)));
    }
    let solved = pb
        .solve(1e-9)
        .map_err(|e: SolveError| StabilityError::LpFailure(e.to_string()))?;
    let objective: f64 = edge_ids.iter().map(|&e| solved.value(gamma[&e])).sum();
    let feasible = objective >= budget - opts.tol;

    let mut binding = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if let Some(r) = row {
            if solved.dual_leq(*r) > opts.tol {
                binding.push(subs[i].member_ids(grid));
            }
        }
    }

    let allocation = feasible.then(|| {
        // Budget-exact allocation: spread any surplus uniformly.
        let surplus = (objective - budget) / edge_ids.len() as f64;
        edge_ids
            .iter()
            .map(|&e| (grid.node_id(e), solved.value(gamma[&e]) - surplus))
            .collect()
    });

    Ok(CoreResult {
        members,
        feasible,
        objective,
        budget,
        allocation,
        member_indexed: false,
        binding,
    })
}

/// Stability verdict with per-block diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityVerdict {
    pub stable: bool,
    /// First blocking coalition found, if any.
    pub blocker: Option<Vec<NodeId>>,
    pub cores: Vec<CoreResult>,
}

pub fn is_stable_partition(
    grid: &Grid,
    partition: &Partition,
    set: &ProsumptionSet,
    params: &CostParams,
    opts: &StabilityOptions,
) -> Result<StabilityVerdict, StabilityError> {
    let mut oracle = DeviationOracle::new(grid, set, params, opts.mode);
    is_stable_partition_with(grid, partition, opts, &mut oracle)
}

pub fn is_stable_partition_with(
    grid: &Grid,
    partition: &Partition,
    opts: &StabilityOptions,
    oracle: &mut DeviationOracle,
) -> Result<StabilityVerdict, StabilityError> {
    let mut cores = Vec::with_capacity(partition.blocks.len());
    let mut blocker = None;
    for i in 0..partition.blocks.len() {
        let core = core_check_with(grid, partition, i, opts, oracle)?;
        if !core.feasible && blocker.is_none() {
            blocker = core
                .binding
                .iter()
                .find(|m| m.len() < core.members.len())
                .cloned()
                .or_else(|| core.binding.first().cloned());
        }
        cores.push(core);
    }
    Ok(StabilityVerdict {
        stable: cores.iter().all(|c| c.feasible),
        blocker,
        cores,
    })
}

/// Exhaustive minimiser of the two-stage total cost over all partitions
/// (the grid operator's problem). Ties resolve toward the enumeration
/// order: fewest blocks first, then lexicographic.
pub fn optimal_partition(
    grid: &Grid,
    set: &ProsumptionSet,
    params: &CostParams,
    cap: usize,
) -> Result<(Partition, f64), StabilityError> {
    let partitions = enumerate_partitions(grid, cap)?;
    let evals: Vec<Result<f64, String>> = partitions
        .par_iter()
        .map(|p| {
            costs::partition_total_cost(grid, p, set, params)
                .map(|r| r.total)
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in evals.iter().enumerate() {
        let phi = r.clone().map_err(StabilityError::LpFailure)?;
        let tie = 1e-7 * phi.abs().max(1.0);
        match best {
            None => best = Some((i, phi)),
            Some((_, cur)) if phi < cur - tie => best = Some((i, phi)),
            _ => {}
        }
    }
    let (idx, phi) = best.expect("at least one partition");
    Ok((partitions[idx].clone(), phi))
}

/// One row of the stable-partition report.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionSummary {
    pub blocks: Vec<Vec<NodeId>>,
    pub label: String,
    pub cost: Option<f64>,
    pub stable: Option<bool>,
    pub blocker: Option<Vec<NodeId>>,
    pub cores: Vec<CoreResult>,
    /// Set when the partition could not be evaluated under the mode's
    /// assumptions (e.g. a block without a single boundary node).
    pub skipped: Option<String>,
}

/// Full stable-partition search result.
#[derive(Debug, Serialize)]
pub struct StablePartitionResult {
    pub mode: DeviationMode,
    pub partitions: Vec<PartitionSummary>,
    /// Index of the optimal stable partition, if any partition is stable.
    pub optimal_index: Option<usize>,
    /// Minimum cost among stable partitions.
    pub optimal_cost: Option<f64>,
}

impl StablePartitionResult {
    pub fn optimal(&self) -> Option<&PartitionSummary> {
        self.optimal_index.map(|i| &self.partitions[i])
    }
}

/// Iterates every partition, prices it, checks every block's core, and
/// returns the cheapest stable partition. An empty stable set is a valid
/// outcome, reported with `optimal_index = None`.
pub fn optimal_stable_partition(
    grid: &Grid,
    set: &ProsumptionSet,
    params: &CostParams,
    opts: &StabilityOptions,
) -> Result<StablePartitionResult, StabilityError> {
    let partitions = enumerate_partitions(grid, opts.partition_cap)?;
    let mut oracle = DeviationOracle::new(grid, set, params, opts.mode);

    if opts.mode == DeviationMode::NoExternalities {
        // Batch every decoupled solve the run can need.
        let mut needed: BTreeSet<Vec<NodeId>> = BTreeSet::new();
        for p in &partitions {
            for block in &p.blocks {
                if !block.single_boundary() {
                    continue;
                }
                for sub in enumerate_connected_subcoalitions(grid, block) {
                    if sub.single_boundary() {
                        needed.insert(sub.member_ids(grid));
                    }
                }
            }
        }
        oracle.warm_decoupled(&needed);
    }

    let mut summaries = Vec::with_capacity(partitions.len());
    for p in &partitions {
        let label = p.label(grid);
        let blocks = p.blocks.iter().map(|b| b.member_ids(grid)).collect();
        if opts.mode == DeviationMode::NoExternalities
            && !p.blocks.iter().all(|b| b.single_boundary())
        {
            summaries.push(PartitionSummary {
                blocks,
                label,
                cost: None,
                stable: None,
                blocker: None,
                cores: Vec::new(),
                skipped: Some("a block has more than one boundary node".into()),
            });
            continue;
        }
        let cost = match oracle.partition_cost(p) {
            Ok(c) => c,
            Err(StabilityError::Cost(CostError::Dispatch(DispatchError::Infeasible)))
            | Err(StabilityError::LpFailure(_)) => {
                summaries.push(PartitionSummary {
                    blocks,
                    label,
                    cost: None,
                    stable: None,
                    blocker: None,
                    cores: Vec::new(),
                    skipped: Some("dispatch infeasible under the mode's constraints".into()),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let verdict = is_stable_partition_with(grid, p, opts, &mut oracle)?;
        summaries.push(PartitionSummary {
            blocks,
            label,
            cost: Some(cost),
            stable: Some(verdict.stable),
            blocker: verdict.blocker,
            cores: verdict.cores,
            skipped: None,
        });
    }

    let mut optimal_index = None;
    let mut optimal_cost = None;
    for (i, s) in summaries.iter().enumerate() {
        if s.stable == Some(true) {
            let c = s.cost.expect("stable partitions carry costs");
            let tie = 1e-7 * c.abs().max(1.0);
            if optimal_cost.map_or(true, |cur| c < cur - tie) {
                optimal_index = Some(i);
                optimal_cost = Some(c);
            }
        }
    }
    Ok(StablePartitionResult {
        mode: opts.mode,
        partitions: summaries,
        optimal_index,
        optimal_cost,
    })
}

/// Edge-indexed core allocation for the grand coalition.
#[derive(Debug, Clone, Serialize)]
pub struct CoreAllocation {
    /// Allocation per internal edge, keyed by the edge's child node.
    pub edges: Vec<(NodeId, f64)>,
    pub total: f64,
    /// Cost of the grand coalition the allocation covers.
    pub grand_cost: f64,
}

/// Builds the cost allocation from the primal/dual pair of the grand
/// coalition's zero-exchange dispatch: each edge carries the Lagrangian
/// share of its child node. The allocation is budget-balanced and, under
/// perfect forecasts, no single-boundary sub-coalition can undercut its
/// share with its own decoupled cost.
pub fn lagrangian_core_allocation(
    grid: &Grid,
    set: &ProsumptionSet,
    params: &CostParams,
) -> Result<CoreAllocation, StabilityError> {
    for id in set.prosumer_ids() {
        let f = set.forecast(id).unwrap();
        let r = set.realized(id).unwrap();
        if f.iter().zip(r).any(|(a, b)| (a - b).norm() > 1e-9) {
            return Err(StabilityError::RequiresPerfectForecasts);
        }
    }
    let gc = grid.grand_coalition()?;
    let (out, subgrid) =
        crate::dispatch::solve_decoupled_full(grid, &gc, set.forecasts(), params)?;
    let member_ids = gc.member_ids(grid);
    let restricted: BTreeMap<NodeId, crate::timeseries::Series> = member_ids
        .iter()
        .map(|&id| (id, set.forecast(id).unwrap().clone()))
        .collect();
    let lagr = out
        .artifacts
        .node_lagrangians(&subgrid, params, &restricted);
    let edges: Vec<(NodeId, f64)> = gc
        .edges
        .iter()
        .map(|&e| {
            let id = grid.node_id(e);
            (id, lagr[&id])
        })
        .collect();
    let total = edges.iter().map(|(_, v)| v).sum();
    Ok(CoreAllocation {
        edges,
        total,
        grand_cost: out.solution.flex_cost,
    })
}
