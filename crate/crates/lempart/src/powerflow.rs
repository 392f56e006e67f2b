//! Linear DistFlow evaluation: deterministic linear maps from nodal
//! injections to branch flows and squared-voltage deviations, plus
//! boundary-exchange aggregation for coalitions.
//!
//! The model is lossless. Flows are oriented child-to-parent; the flow
//! stored at the PCC index is the aggregate grid export. Voltage values are
//! squared-magnitude deviations from the reference, zero at the PCC.

use std::collections::BTreeMap;

use num_complex::Complex64;
use thiserror::Error;

use crate::grid::{Coalition, Grid, NodeId};
use crate::timeseries::Series;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerflowError {
    #[error("missing injection series for prosumer {0}")]
    MissingProsumerSeries(NodeId),
    #[error("injection series lengths disagree")]
    HorizonMismatch,
}

/// Branch flows and squared-voltage deviations over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// `flows[n][t]`: complex flow on the parent edge of node `n`; at the
    /// PCC index this is the total export into the transmission grid.
    pub flows: Vec<Vec<Complex64>>,
    /// `dv[n][t]`: squared-voltage deviation (per-unit squared).
    pub dv: Vec<Vec<f64>>,
    pub horizon: usize,
}

impl FlowState {
    pub fn flow(&self, node: usize) -> &[Complex64] {
        &self.flows[node]
    }

    pub fn voltage_deviation(&self, node: usize) -> &[f64] {
        &self.dv[node]
    }
}

/// Net injections per node index. Prosumer nodes must all be present.
pub type Injections = BTreeMap<usize, Series>;

/// Builds net injections `U + u` from per-id series, mapping ids to node
/// indices. `dispatch` may cover a subset of prosumers; missing entries
/// contribute zero flexibility.
pub fn net_injections(
    grid: &Grid,
    prosumption: &BTreeMap<NodeId, Series>,
    dispatch: Option<&BTreeMap<NodeId, Series>>,
) -> Result<Injections, PowerflowError> {
    let mut inj = Injections::new();
    for &p in grid.prosumers() {
        let id = grid.node_id(p);
        let base = prosumption
            .get(&id)
            .ok_or(PowerflowError::MissingProsumerSeries(id))?;
        let mut series = base.clone();
        if let Some(d) = dispatch.and_then(|d| d.get(&id)) {
            if d.len() != series.len() {
                return Err(PowerflowError::HorizonMismatch);
            }
            for (s, u) in series.iter_mut().zip(d) {
                *s += u;
            }
        }
        inj.insert(p, series);
    }
    Ok(inj)
}

/// Bottom-up tree pass: the flow on each edge is the sum of injections in
/// the subtree under its child endpoint.
pub fn branch_flows(grid: &Grid, injections: &Injections) -> Result<FlowState, PowerflowError> {
    let horizon = injections.values().next().map_or(0, |s| s.len());
    for s in injections.values() {
        if s.len() != horizon {
            return Err(PowerflowError::HorizonMismatch);
        }
    }
    for &p in grid.prosumers() {
        if !injections.contains_key(&p) {
            return Err(PowerflowError::MissingProsumerSeries(grid.node_id(p)));
        }
    }
    let n = grid.n_nodes();
    let mut flows = vec![vec![Complex64::default(); horizon]; n];
    for &node in grid.topo_order() {
        let mut acc = vec![Complex64::default(); horizon];
        if let Some(series) = injections.get(&node) {
            acc.copy_from_slice(series);
        }
        for &c in grid.children(node) {
            for t in 0..horizon {
                acc[t] += flows[c][t];
            }
        }
        flows[node] = acc;
    }
    let dv = vec![vec![0.0; horizon]; n];
    let mut state = FlowState { flows, dv, horizon };
    state.dv = voltage_deviations(grid, &state);
    Ok(state)
}

/// Top-down pass from the PCC: `dv(n) = dv(parent) + 2 Re(z* S)` on each
/// edge, with `dv(PCC) = 0`.
pub fn voltage_deviations(grid: &Grid, flows: &FlowState) -> Vec<Vec<f64>> {
    let n = grid.n_nodes();
    let horizon = flows.horizon;
    let mut dv = vec![vec![0.0; horizon]; n];
    for &node in grid.topo_order().iter().rev() {
        if let Some(parent) = grid.parent(node) {
            let z = grid.impedance(node);
            for t in 0..horizon {
                let s = flows.flows[node][t];
                dv[node][t] = dv[parent][t] + 2.0 * (z.re * s.re + z.im * s.im);
            }
        }
    }
    dv
}

/// Power exchanged by a coalition at each of its boundary nodes: the sum of
/// flows entering the boundary node over coalition-internal edges, plus the
/// boundary node's own injection when it hosts a member prosumer (the
/// singleton-coalition case).
pub fn boundary_exchange(
    grid: &Grid,
    coalition: &Coalition,
    flows: &FlowState,
) -> BTreeMap<usize, Series> {
    let mut out = BTreeMap::new();
    for &nb in &coalition.boundary {
        let mut series = vec![Complex64::default(); flows.horizon];
        for &c in grid.children(nb) {
            if coalition.edges.contains(&c) {
                for t in 0..flows.horizon {
                    series[t] += flows.flows[c][t];
                }
            }
        }
        if coalition.members.contains(&nb) {
            for t in 0..flows.horizon {
                series[t] += flows.flows[nb][t];
            }
        }
        out.insert(nb, series);
    }
    out
}

/// Converts an active-power curtailment price (CHF/MWh) into per-node
/// squared-voltage penalty rates via the local DistFlow sensitivity: one MW
/// curtailed at a node moves its own squared voltage by twice the path
/// resistance to the PCC, so the penalty per unit of deviation is the
/// curtailment cost of undoing it.
pub fn voltage_penalty_from_curtailment(grid: &Grid, curtailment_price: f64) -> crate::params::RateMap {
    let mut rates = crate::params::RateMap::flat(0.0);
    for node in grid.edge_nodes() {
        let path_resistance: f64 = grid
            .path_to_pcc(node)
            .iter()
            .filter(|&&n| n != grid.pcc())
            .map(|&n| 2.0 * grid.impedance(n).re)
            .sum();
        if path_resistance > 0.0 {
            rates
                .overrides
                .insert(grid.node_id(node), curtailment_price / path_resistance);
        }
    }
    rates
}
