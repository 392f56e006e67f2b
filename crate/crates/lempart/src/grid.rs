//! Radial distribution-grid topology, coalition subgraphs, and enumeration
//! of connected coalitions and valid grid partitions.
//!
//! A grid is a tree of buses rooted at the point of common coupling (PCC).
//! Prosumers sit at leaf nodes. A coalition is the minimal spanning subtree
//! of a set of prosumers; a partition is a set of pairwise edge-disjoint
//! coalitions covering every prosumer. Nodes may be shared between blocks
//! (e.g. a common hub); only edges must be disjoint.

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// External (file-level) node identifier.
pub type NodeId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("edge set contains a cycle (edge {from}-{to} closes a loop)")]
    CycleDetected { from: NodeId, to: NodeId },
    #[error("graph is disconnected: {unreached} node(s) unreachable from the PCC")]
    DisconnectedGraph { unreached: usize },
    #[error("prosumer at node {0} is not a leaf node")]
    ProsumerNotLeaf(NodeId),
    #[error("non-positive limit {value} for {what} at {id}")]
    NonPositiveLimit {
        what: &'static str,
        id: NodeId,
        value: f64,
    },
    #[error("negative resistance {value} on edge at node {id}")]
    NegativeResistance { id: NodeId, value: f64 },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("node id {0} declared more than once")]
    DuplicateNode(NodeId),
    #[error("unknown prosumer id {0}")]
    UnknownProsumer(NodeId),
    #[error("coalition member set is empty")]
    EmptyMemberSet,
    #[error("prosumer {0} appears in more than one partition block")]
    OverlappingBlocks(NodeId),
    #[error("partition does not cover prosumer {0}")]
    UncoveredProsumer(NodeId),
    #[error("blocks of a partition must be pairwise edge-disjoint (shared edge at node {0})")]
    EdgeOverlap(NodeId),
    #[error("{count} prosumers exceed the enumeration cap of {cap}")]
    TooManyProsumers { count: usize, cap: usize },
}

/// Node description as ingested from a grid file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Squared-voltage deviation limit (per-unit squared).
    pub dv_limit: f64,
    #[serde(default)]
    pub is_prosumer: bool,
}

/// Edge description as ingested from a grid file. Orientation is arbitrary;
/// edges are re-rooted toward the PCC during construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: NodeId,
    pub to: NodeId,
    /// Resistance (per-unit).
    pub r: f64,
    /// Reactance (per-unit).
    pub x: f64,
    /// Apparent-power limit (MVA).
    pub s_limit: f64,
}

/// Radial distribution grid rooted at its PCC.
///
/// Every non-PCC node `n` has exactly one parent `A(n)`; the edge `n -> A(n)`
/// carries the impedance `z(n)` and the flow limit `s_limit(n)`. Edges are
/// keyed by their child node throughout the crate.
#[derive(Debug, Clone)]
pub struct Grid {
    ids: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    pcc: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    z: Vec<Complex64>,
    s_limit: Vec<f64>,
    dv_limit: Vec<f64>,
    v_ref: f64,
    prosumer_at: Vec<bool>,
    prosumers: Vec<usize>,
    /// Nodes ordered children-before-parents (PCC last).
    topo: Vec<usize>,
}

impl Grid {
    pub fn n_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn pcc(&self) -> usize {
        self.pcc
    }

    pub fn v_ref(&self) -> f64 {
        self.v_ref
    }

    pub fn node_id(&self, idx: usize) -> NodeId {
        self.ids[idx]
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn parent(&self, idx: usize) -> Option<usize> {
        self.parent[idx]
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn depth(&self, idx: usize) -> usize {
        self.depth[idx]
    }

    /// Impedance of the parent edge of `idx` (undefined for the PCC).
    pub fn impedance(&self, idx: usize) -> Complex64 {
        self.z[idx]
    }

    pub fn s_limit(&self, idx: usize) -> f64 {
        self.s_limit[idx]
    }

    pub fn dv_limit(&self, idx: usize) -> f64 {
        self.dv_limit[idx]
    }

    pub fn is_prosumer(&self, idx: usize) -> bool {
        self.prosumer_at[idx]
    }

    pub fn is_leaf(&self, idx: usize) -> bool {
        self.children[idx].is_empty()
    }

    /// Prosumer node indices, sorted by external id.
    pub fn prosumers(&self) -> &[usize] {
        &self.prosumers
    }

    /// Node indices ordered children-before-parents; the PCC comes last.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Non-PCC node indices: one per edge, keyed by the child endpoint.
    pub fn edge_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_nodes()).filter(move |&n| n != self.pcc)
    }

    /// Walks from `idx` to the PCC, inclusive of both endpoints.
    pub fn path_to_pcc(&self, idx: usize) -> Vec<usize> {
        let mut path = vec![idx];
        let mut cur = idx;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Restricts the grid to a coalition's subtree, re-rooted at the
    /// coalition's PCC. External ids, impedances and limits are inherited.
    /// The relaxed constructor permits a prosumer at the local PCC so that
    /// singleton coalitions remain representable.
    pub fn subgrid(&self, coalition: &Coalition) -> Grid {
        let mut nodes: Vec<usize> = coalition.nodes.iter().copied().collect();
        nodes.sort_by_key(|&n| self.ids[n]);
        let index: BTreeMap<NodeId, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (self.ids[n], i))
            .collect();
        let remap = |old: usize| index[&self.ids[old]];
        let pcc = remap(coalition.apex);
        let n = nodes.len();
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut z = vec![Complex64::default(); n];
        let mut s_limit = vec![f64::INFINITY; n];
        for &old in &nodes {
            // Parent edges of coalition members are internal iff the child
            // node is in the coalition edge set.
            if coalition.edges.contains(&old) {
                let p = self.parent[old].expect("internal edge has a parent");
                let (ni, pi) = (remap(old), remap(p));
                parent[ni] = Some(pi);
                children[pi].push(ni);
                z[ni] = self.z[old];
                s_limit[ni] = self.s_limit[old];
            }
        }
        for ch in children.iter_mut() {
            ch.sort_by_key(|&c| nodes[c]);
        }
        let dv_limit = nodes.iter().map(|&o| self.dv_limit[o]).collect();
        let prosumer_at: Vec<bool> = nodes
            .iter()
            .map(|&o| coalition.members.contains(&o))
            .collect();
        let prosumers = (0..n).filter(|&i| prosumer_at[i]).collect();
        let ids: Vec<NodeId> = nodes.iter().map(|&o| self.ids[o]).collect();
        let (depth, topo) = orderings(&parent, &children, pcc);
        Grid {
            ids,
            index,
            pcc,
            parent,
            children,
            depth,
            z,
            s_limit,
            dv_limit,
            v_ref: self.v_ref,
            prosumer_at,
            prosumers,
            topo,
        }
    }

    /// The grand coalition: every prosumer in one block.
    pub fn grand_coalition(&self) -> Result<Coalition, GridError> {
        let members: Vec<NodeId> = self.prosumers.iter().map(|&p| self.ids[p]).collect();
        coalition_from_prosumers(self, &members)
    }
}

fn orderings(
    parent: &[Option<usize>],
    children: &[Vec<usize>],
    pcc: usize,
) -> (Vec<usize>, Vec<usize>) {
    let n = parent.len();
    let mut depth = vec![0usize; n];
    let mut topo = Vec::with_capacity(n);
    // Iterative DFS from the root; children are visited in id order.
    let mut stack = vec![(pcc, false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            topo.push(node);
            continue;
        }
        stack.push((node, true));
        for &c in children[node].iter().rev() {
            depth[c] = depth[node] + 1;
            stack.push((c, false));
        }
    }
    (depth, topo)
}

/// Validates and roots a radial grid at the given PCC.
pub fn build_grid(
    nodes: &[NodeSpec],
    edges: &[EdgeSpec],
    pcc: NodeId,
    v_ref: f64,
) -> Result<Grid, GridError> {
    let mut index = BTreeMap::new();
    let mut specs: Vec<&NodeSpec> = nodes.iter().collect();
    specs.sort_by_key(|s| s.id);
    for (i, spec) in specs.iter().enumerate() {
        if index.insert(spec.id, i).is_some() {
            return Err(GridError::DuplicateNode(spec.id));
        }
        if spec.dv_limit <= 0.0 {
            return Err(GridError::NonPositiveLimit {
                what: "squared-voltage deviation",
                id: spec.id,
                value: spec.dv_limit,
            });
        }
    }
    let n = specs.len();
    let pcc_idx = *index.get(&pcc).ok_or(GridError::UnknownNode(pcc))?;

    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbor, edge index)
    for (e, spec) in edges.iter().enumerate() {
        let a = *index.get(&spec.from).ok_or(GridError::UnknownNode(spec.from))?;
        let b = *index.get(&spec.to).ok_or(GridError::UnknownNode(spec.to))?;
        if a == b {
            return Err(GridError::CycleDetected {
                from: spec.from,
                to: spec.to,
            });
        }
        if spec.s_limit <= 0.0 {
            return Err(GridError::NonPositiveLimit {
                what: "apparent-power",
                id: spec.to,
                value: spec.s_limit,
            });
        }
        if spec.r < 0.0 {
            return Err(GridError::NegativeResistance {
                id: spec.to,
                value: spec.r,
            });
        }
        adj[a].push((b, e));
        adj[b].push((a, e));
    }

    // Root the tree at the PCC with a BFS; a revisited node means a cycle.
    let mut parent = vec![None; n];
    let mut parent_edge = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    seen[pcc_idx] = true;
    let mut queue = std::collections::VecDeque::from([pcc_idx]);
    let mut reached = 1usize;
    while let Some(node) = queue.pop_front() {
        for &(nb, e) in &adj[node] {
            if parent[node] == Some(nb) && parent_edge[node] == e {
                continue;
            }
            if seen[nb] {
                return Err(GridError::CycleDetected {
                    from: edges[e].from,
                    to: edges[e].to,
                });
            }
            seen[nb] = true;
            reached += 1;
            parent[nb] = Some(node);
            parent_edge[nb] = e;
            queue.push_back(nb);
        }
    }
    if reached != n {
        return Err(GridError::DisconnectedGraph {
            unreached: n - reached,
        });
    }

    let mut children = vec![Vec::new(); n];
    for i in 0..n {
        if let Some(p) = parent[i] {
            children[p].push(i);
        }
    }
    for ch in children.iter_mut() {
        ch.sort_by_key(|&c| specs[c].id);
    }

    let mut z = vec![Complex64::default(); n];
    let mut s_limit = vec![f64::INFINITY; n];
    for i in 0..n {
        if parent[i].is_some() {
            let e = &edges[parent_edge[i]];
            z[i] = Complex64::new(e.r, e.x);
            s_limit[i] = e.s_limit;
        }
    }

    let mut prosumer_at = vec![false; n];
    let mut prosumers = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        if spec.is_prosumer {
            if !children[i].is_empty() || i == pcc_idx {
                return Err(GridError::ProsumerNotLeaf(spec.id));
            }
            prosumer_at[i] = true;
            prosumers.push(i);
        }
    }

    let (depth, topo) = orderings(&parent, &children, pcc_idx);
    Ok(Grid {
        ids: specs.iter().map(|s| s.id).collect(),
        index,
        pcc: pcc_idx,
        parent,
        children,
        depth,
        z,
        s_limit,
        dv_limit: specs.iter().map(|s| s.dv_limit).collect(),
        v_ref,
        prosumer_at,
        prosumers,
        topo,
    })
}

/// A local energy market coalition: the minimal spanning subtree of its
/// member prosumers, with boundary-node bookkeeping.
///
/// Boundary nodes are the coalition nodes incident to an edge outside the
/// coalition. The grid PCC additionally counts as a boundary node whenever
/// it belongs to the coalition: the transmission interface behaves like an
/// external edge, which is what lets the grand coalition meter its exports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coalition {
    /// Member prosumer node indices, sorted by external id.
    pub members: Vec<usize>,
    pub nodes: BTreeSet<usize>,
    /// Internal edges, keyed by child node index.
    pub edges: BTreeSet<usize>,
    pub boundary: BTreeSet<usize>,
    /// Top node of the subtree (the LCA of the members).
    pub apex: usize,
}

impl Coalition {
    /// Internal nodes: coalition nodes that are not boundary nodes.
    pub fn internal_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().copied().filter(move |n| !self.boundary.contains(n))
    }

    /// The coalition PCC under the single-boundary-node assumption.
    pub fn local_pcc(&self) -> usize {
        self.apex
    }

    /// True when the coalition has exactly one boundary node, i.e. it trades
    /// through a single metering point.
    pub fn single_boundary(&self) -> bool {
        self.boundary.len() == 1 && self.boundary.contains(&self.apex)
    }

    pub fn member_ids(&self, grid: &Grid) -> Vec<NodeId> {
        self.members.iter().map(|&m| grid.node_id(m)).collect()
    }
}

/// Builds the coalition induced by a prosumer set: node set is the union of
/// tree paths between all member pairs (the minimal spanning subtree).
pub fn coalition_from_prosumers(grid: &Grid, members: &[NodeId]) -> Result<Coalition, GridError> {
    if members.is_empty() {
        return Err(GridError::EmptyMemberSet);
    }
    let mut idxs: Vec<usize> = Vec::with_capacity(members.len());
    for &id in members {
        let idx = grid.node_index(id).ok_or(GridError::UnknownProsumer(id))?;
        if !grid.is_prosumer(idx) {
            return Err(GridError::UnknownProsumer(id));
        }
        idxs.push(idx);
    }
    idxs.sort_by_key(|&i| grid.node_id(i));
    idxs.dedup();
    Ok(coalition_from_indices(grid, &idxs))
}

pub(crate) fn coalition_from_indices(grid: &Grid, member_idxs: &[usize]) -> Coalition {
    // LCA of all members: walk the deeper node up until the paths merge.
    let mut apex = member_idxs[0];
    for &m in &member_idxs[1..] {
        let (mut a, mut b) = (apex, m);
        while grid.depth(a) > grid.depth(b) {
            a = grid.parent(a).unwrap();
        }
        while grid.depth(b) > grid.depth(a) {
            b = grid.parent(b).unwrap();
        }
        while a != b {
            a = grid.parent(a).unwrap();
            b = grid.parent(b).unwrap();
        }
        apex = a;
    }
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeSet::new();
    nodes.insert(apex);
    for &m in member_idxs {
        let mut cur = m;
        while cur != apex && !nodes.contains(&cur) {
            nodes.insert(cur);
            edges.insert(cur);
            cur = grid.parent(cur).unwrap();
        }
        if cur != apex {
            // Remaining ancestors were already inserted via another member.
            continue;
        }
    }
    let mut boundary = BTreeSet::new();
    for &n in &nodes {
        let external_parent = n != grid.pcc() && !edges.contains(&n);
        let external_child = grid.children(n).iter().any(|c| !edges.contains(c));
        if external_parent || external_child || n == grid.pcc() {
            boundary.insert(n);
        }
    }
    Coalition {
        members: member_idxs.to_vec(),
        nodes,
        edges,
        boundary,
        apex,
    }
}

/// An ordered collection of edge-disjoint coalitions covering every prosumer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub blocks: Vec<Coalition>,
}

impl Partition {
    /// Canonical text form, e.g. `{1,2|3}`.
    pub fn label(&self, grid: &Grid) -> String {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| {
                b.member_ids(grid)
                    .iter()
                    .map(|id| id.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        format!("{{{}}}", blocks.join("|"))
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Sorted member-id lists per block; the canonical comparison key.
    pub fn key(&self, grid: &Grid) -> Vec<Vec<NodeId>> {
        self.blocks.iter().map(|b| b.member_ids(grid)).collect()
    }
}

/// Builds a partition from explicit prosumer-id groups and validates the
/// partition conditions: edge-disjoint blocks and full prosumer cover.
pub fn partition_from_groups(grid: &Grid, groups: &[Vec<NodeId>]) -> Result<Partition, GridError> {
    let mut blocks = Vec::with_capacity(groups.len());
    let mut seen_members: BTreeSet<usize> = BTreeSet::new();
    for group in groups {
        let block = coalition_from_prosumers(grid, group)?;
        for &m in &block.members {
            if !seen_members.insert(m) {
                return Err(GridError::OverlappingBlocks(grid.node_id(m)));
            }
        }
        blocks.push(block);
    }
    for &p in grid.prosumers() {
        if !seen_members.contains(&p) {
            return Err(GridError::UncoveredProsumer(grid.node_id(p)));
        }
    }
    let mut edges_seen: BTreeSet<usize> = BTreeSet::new();
    for block in &blocks {
        for &e in &block.edges {
            if !edges_seen.insert(e) {
                return Err(GridError::EdgeOverlap(grid.node_id(e)));
            }
        }
    }
    sort_blocks(grid, &mut blocks);
    Ok(Partition { blocks })
}

fn sort_blocks(grid: &Grid, blocks: &mut [Coalition]) {
    blocks.sort_by_key(|b| (std::cmp::Reverse(b.members.len()), b.member_ids(grid)));
}

/// Enumerates every valid grid partition: set-partitions of the prosumer set
/// whose blocks are pairwise edge-disjoint. Deterministic order: fewest
/// blocks first, then lexicographic by sorted member lists.
pub fn enumerate_partitions(grid: &Grid, cap: usize) -> Result<Vec<Partition>, GridError> {
    let prosumers = grid.prosumers();
    let k = prosumers.len();
    if k > cap {
        return Err(GridError::TooManyProsumers { count: k, cap });
    }
    if k == 0 {
        return Ok(vec![Partition { blocks: Vec::new() }]);
    }

    // Restricted-growth-string enumeration of set partitions.
    let mut out = Vec::new();
    let mut rgs = vec![0usize; k];
    loop {
        let n_blocks = rgs.iter().copied().max().unwrap() + 1;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_blocks];
        for (i, &g) in rgs.iter().enumerate() {
            groups[g].push(prosumers[i]);
        }
        let blocks: Vec<Coalition> = groups
            .iter()
            .map(|g| coalition_from_indices(grid, g))
            .collect();
        if edge_disjoint(&blocks) {
            let mut blocks = blocks;
            sort_blocks(grid, &mut blocks);
            out.push(Partition { blocks });
        }
        if !next_rgs(&mut rgs) {
            break;
        }
    }
    out.sort_by(|a, b| {
        (a.n_blocks(), a.key(grid)).cmp(&(b.n_blocks(), b.key(grid)))
    });
    Ok(out)
}

fn edge_disjoint(blocks: &[Coalition]) -> bool {
    let mut seen = BTreeSet::new();
    for b in blocks {
        for &e in &b.edges {
            if !seen.insert(e) {
                return false;
            }
        }
    }
    true
}

/// Advances a restricted growth string; returns false after the last one.
fn next_rgs(rgs: &mut [usize]) -> bool {
    let k = rgs.len();
    for i in (1..k).rev() {
        let max_prefix = rgs[..i].iter().copied().max().unwrap();
        if rgs[i] <= max_prefix {
            rgs[i] += 1;
            for v in rgs[i + 1..].iter_mut() {
                *v = 0;
            }
            return true;
        }
    }
    false
}

/// All coalitions whose prosumer set is a nonempty subset of the parent's
/// members. In a tree the minimal subtree of any member subset stays inside
/// the parent subtree, so every subset qualifies. Returned sorted by member
/// id list; the parent itself is included.
pub fn enumerate_connected_subcoalitions(grid: &Grid, parent: &Coalition) -> Vec<Coalition> {
    let members = &parent.members;
    let k = members.len();
    let mut out = Vec::with_capacity((1usize << k) - 1);
    for mask in 1u64..(1u64 << k) {
        let subset: Vec<usize> = (0..k)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| members[i])
            .collect();
        let sub = coalition_from_indices(grid, &subset);
        debug_assert!(sub.edges.is_subset(&parent.edges));
        out.push(sub);
    }
    out.sort_by_key(|c| c.member_ids(grid));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn star_grid() -> Grid {
        // Example star: PCC 0 with prosumer leaves 1, 2, 3.
        let nodes: Vec<NodeSpec> = (0..4)
            .map(|id| NodeSpec {
                id,
                dv_limit: 1e6,
                is_prosumer: id > 0,
            })
            .collect();
        let edges: Vec<EdgeSpec> = (1..4)
            .map(|id| EdgeSpec {
                from: id,
                to: 0,
                r: 0.01,
                x: 0.01,
                s_limit: 1.0,
            })
            .collect();
        build_grid(&nodes, &edges, 0, 1.0).unwrap()
    }

    fn path_grid() -> Grid {
        // Spine 0-10-20-30-40 with prosumer leaves 1,2,3,4 hanging off.
        let mut nodes = vec![NodeSpec {
            id: 0,
            dv_limit: 1e6,
            is_prosumer: false,
        }];
        let mut edges = Vec::new();
        for i in 1..=4u32 {
            nodes.push(NodeSpec {
                id: i * 10,
                dv_limit: 1e6,
                is_prosumer: false,
            });
            nodes.push(NodeSpec {
                id: i,
                dv_limit: 1e6,
                is_prosumer: true,
            });
            edges.push(EdgeSpec {
                from: (i - 1) * 10,
                to: i * 10,
                r: 0.01,
                x: 0.02,
                s_limit: 5.0,
            });
            edges.push(EdgeSpec {
                from: i * 10,
                to: i,
                r: 0.01,
                x: 0.02,
                s_limit: 5.0,
            });
        }
        build_grid(&nodes, &edges, 0, 1.0).unwrap()
    }

    #[test]
    fn star_parent_map() {
        let g = star_grid();
        for id in 1..4 {
            let idx = g.node_index(id).unwrap();
            assert_eq!(g.parent(idx), Some(g.pcc()));
        }
        assert_eq!(g.prosumers().len(), 3);
    }

    #[test]
    fn empty_grid_is_valid() {
        let nodes = vec![NodeSpec {
            id: 7,
            dv_limit: 1.0,
            is_prosumer: false,
        }];
        let g = build_grid(&nodes, &[], 7, 1.0).unwrap();
        assert_eq!(g.n_nodes(), 1);
        assert!(g.prosumers().is_empty());
    }

    #[test]
    fn duplicate_edge_is_a_cycle() {
        let nodes: Vec<NodeSpec> = (0..2)
            .map(|id| NodeSpec {
                id,
                dv_limit: 1.0,
                is_prosumer: false,
            })
            .collect();
        let edges = vec![
            EdgeSpec {
                from: 1,
                to: 0,
                r: 0.0,
                x: 0.0,
                s_limit: 1.0,
            },
            EdgeSpec {
                from: 0,
                to: 1,
                r: 0.0,
                x: 0.0,
                s_limit: 1.0,
            },
        ];
        assert!(matches!(
            build_grid(&nodes, &edges, 0, 1.0),
            Err(GridError::CycleDetected { .. })
        ));
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let nodes: Vec<NodeSpec> = (0..3)
            .map(|id| NodeSpec {
                id,
                dv_limit: 1.0,
                is_prosumer: false,
            })
            .collect();
        let edges = vec![EdgeSpec {
            from: 0,
            to: 1,
            r: 0.0,
            x: 0.0,
            s_limit: 1.0,
        }];
        assert!(matches!(
            build_grid(&nodes, &edges, 0, 1.0),
            Err(GridError::DisconnectedGraph { unreached: 1 })
        ));
    }

    #[test]
    fn nonpositive_limits_are_rejected() {
        let nodes = vec![
            NodeSpec {
                id: 0,
                dv_limit: 1.0,
                is_prosumer: false,
            },
            NodeSpec {
                id: 1,
                dv_limit: 1.0,
                is_prosumer: false,
            },
        ];
        let edges = vec![EdgeSpec {
            from: 0,
            to: 1,
            r: 0.0,
            x: 0.0,
            s_limit: 0.0,
        }];
        assert!(matches!(
            build_grid(&nodes, &edges, 0, 1.0),
            Err(GridError::NonPositiveLimit { .. })
        ));
    }

    #[test]
    fn prosumer_must_be_leaf() {
        let nodes = vec![
            NodeSpec {
                id: 0,
                dv_limit: 1.0,
                is_prosumer: false,
            },
            NodeSpec {
                id: 1,
                dv_limit: 1.0,
                is_prosumer: true,
            },
            NodeSpec {
                id: 2,
                dv_limit: 1.0,
                is_prosumer: true,
            },
        ];
        let edges = vec![
            EdgeSpec {
                from: 0,
                to: 1,
                r: 0.0,
                x: 0.0,
                s_limit: 1.0,
            },
            EdgeSpec {
                from: 1,
                to: 2,
                r: 0.0,
                x: 0.0,
                s_limit: 1.0,
            },
        ];
        assert!(matches!(
            build_grid(&nodes, &edges, 0, 1.0),
            Err(GridError::ProsumerNotLeaf(1))
        ));
    }

    #[test]
    fn coalition_pair_on_star() {
        let g = star_grid();
        let c = coalition_from_prosumers(&g, &[1, 2]).unwrap();
        let ids: BTreeSet<NodeId> = c.nodes.iter().map(|&n| g.node_id(n)).collect();
        assert_eq!(ids, BTreeSet::from([0, 1, 2]));
        let edge_ids: BTreeSet<NodeId> = c.edges.iter().map(|&n| g.node_id(n)).collect();
        assert_eq!(edge_ids, BTreeSet::from([1, 2]));
        let boundary: BTreeSet<NodeId> = c.boundary.iter().map(|&n| g.node_id(n)).collect();
        assert_eq!(boundary, BTreeSet::from([0]));
        assert!(c.single_boundary());
    }

    #[test]
    fn singleton_coalition() {
        let g = star_grid();
        let c = coalition_from_prosumers(&g, &[3]).unwrap();
        assert_eq!(c.nodes.len(), 1);
        assert!(c.edges.is_empty());
        let boundary: BTreeSet<NodeId> = c.boundary.iter().map(|&n| g.node_id(n)).collect();
        assert_eq!(boundary, BTreeSet::from([3]));
    }

    #[test]
    fn grand_coalition_boundary_is_pcc() {
        let g = star_grid();
        let c = coalition_from_prosumers(&g, &[1, 2, 3]).unwrap();
        assert_eq!(c.edges.len(), 3);
        let boundary: BTreeSet<NodeId> = c.boundary.iter().map(|&n| g.node_id(n)).collect();
        assert_eq!(boundary, BTreeSet::from([0]));
        assert!(c.single_boundary());
    }

    #[test]
    fn coalition_rebuild_is_idempotent() {
        let g = path_grid();
        for members in [vec![1u32, 3], vec![2, 4], vec![1, 2, 3, 4], vec![2]] {
            let c = coalition_from_prosumers(&g, &members).unwrap();
            let rebuilt = coalition_from_prosumers(&g, &c.member_ids(&g)).unwrap();
            assert_eq!(c, rebuilt);
        }
    }

    #[test]
    fn unknown_member_errors() {
        let g = star_grid();
        assert!(matches!(
            coalition_from_prosumers(&g, &[9]),
            Err(GridError::UnknownProsumer(9))
        ));
        assert!(matches!(
            coalition_from_prosumers(&g, &[]),
            Err(GridError::EmptyMemberSet)
        ));
    }

    #[test]
    fn star_has_bell3_partitions() {
        let g = star_grid();
        let parts = enumerate_partitions(&g, 10).unwrap();
        assert_eq!(parts.len(), 5);
        let labels: Vec<String> = parts.iter().map(|p| p.label(&g)).collect();
        assert_eq!(
            labels,
            vec!["{1,2,3}", "{1,2|3}", "{1,3|2}", "{2,3|1}", "{1|2|3}"]
        );
    }

    #[test]
    fn partition_invariants_hold() {
        let g = path_grid();
        let parts = enumerate_partitions(&g, 10).unwrap();
        for p in &parts {
            let mut edges = BTreeSet::new();
            let mut covered = BTreeSet::new();
            for b in &p.blocks {
                for &e in &b.edges {
                    assert!(edges.insert(e), "blocks share an edge in {}", p.label(&g));
                }
                covered.extend(b.members.iter().copied());
            }
            assert_eq!(covered.len(), g.prosumers().len());
            // Every non-PCC boundary node touches an external edge.
            for b in &p.blocks {
                for &nb in &b.boundary {
                    if nb == g.pcc() {
                        continue;
                    }
                    let ext_parent = !b.edges.contains(&nb);
                    let ext_child = g.children(nb).iter().any(|c| !b.edges.contains(c));
                    assert!(ext_parent || ext_child);
                }
            }
        }
    }

    #[test]
    fn single_prosumer_grid_has_one_partition() {
        let nodes = vec![
            NodeSpec {
                id: 0,
                dv_limit: 1.0,
                is_prosumer: false,
            },
            NodeSpec {
                id: 1,
                dv_limit: 1.0,
                is_prosumer: true,
            },
        ];
        let edges = vec![EdgeSpec {
            from: 0,
            to: 1,
            r: 0.0,
            x: 0.0,
            s_limit: 1.0,
        }];
        let g = build_grid(&nodes, &edges, 0, 1.0).unwrap();
        assert_eq!(enumerate_partitions(&g, 10).unwrap().len(), 1);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let g = star_grid();
        assert!(matches!(
            enumerate_partitions(&g, 2),
            Err(GridError::TooManyProsumers { count: 3, cap: 2 })
        ));
    }

    #[test]
    fn subcoalitions_of_star_grand() {
        let g = star_grid();
        let gc = coalition_from_prosumers(&g, &[1, 2, 3]).unwrap();
        let subs = enumerate_connected_subcoalitions(&g, &gc);
        assert_eq!(subs.len(), 7);
        let singleton = coalition_from_prosumers(&g, &[3]).unwrap();
        assert_eq!(enumerate_connected_subcoalitions(&g, &singleton).len(), 1);
    }

    #[test]
    fn path_grid_subcoalition_count_matches_oracle() {
        let g = path_grid();
        let gc = g.grand_coalition().unwrap();
        let subs = enumerate_connected_subcoalitions(&g, &gc);
        // Oracle: brute-force subsets, each verified contained in the parent.
        let mut count = 0;
        for mask in 1u32..16 {
            let members: Vec<NodeId> = (0..4).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).collect();
            let c = coalition_from_prosumers(&g, &members).unwrap();
            assert!(c.edges.is_subset(&gc.edges));
            count += 1;
        }
        assert_eq!(subs.len(), count);
    }

    #[test]
    fn five_leaf_spine_has_34_partitions() {
        // Five prosumers hanging off a five-node spine: the neighbourhood
        // shape whose connected partitions number 34.
        let mut nodes = vec![NodeSpec {
            id: 100,
            dv_limit: 1e6,
            is_prosumer: false,
        }];
        let mut edges = Vec::new();
        for i in 1..=5u32 {
            nodes.push(NodeSpec {
                id: 100 + i,
                dv_limit: 1e6,
                is_prosumer: false,
            });
            nodes.push(NodeSpec {
                id: i,
                dv_limit: 1e6,
                is_prosumer: true,
            });
            edges.push(EdgeSpec {
                from: 100 + i - 1,
                to: 100 + i,
                r: 0.01,
                x: 0.01,
                s_limit: 10.0,
            });
            edges.push(EdgeSpec {
                from: 100 + i,
                to: i,
                r: 0.01,
                x: 0.01,
                s_limit: 10.0,
            });
        }
        let g = build_grid(&nodes, &edges, 100, 1.0).unwrap();
        let parts = enumerate_partitions(&g, 10).unwrap();
        assert_eq!(parts.len(), 34);
    }

    #[test]
    fn subgrid_of_pair_coalition() {
        let g = star_grid();
        let c = coalition_from_prosumers(&g, &[1, 2]).unwrap();
        let sub = g.subgrid(&c);
        assert_eq!(sub.n_nodes(), 3);
        assert_eq!(sub.node_id(sub.pcc()), 0);
        assert_eq!(sub.prosumers().len(), 2);
        let leaf = sub.node_index(1).unwrap();
        assert_eq!(sub.parent(leaf), Some(sub.pcc()));
        assert_eq!(sub.s_limit(leaf), 1.0);
    }
}
