//! File formats: grid JSON, prosumption CSV and the parameter file.
//!
//! Grid files carry `nodes[{id, dv_limit, is_prosumer}]`,
//! `edges[{from, to, r, x, s_limit}]`, `pcc` and `v_ref`. Time series come
//! as one CSV per quantity with a mandatory header of prosumer ids
//! (optionally `<id>_q` columns for reactive parts), one row per step, in
//! MW/MVar. The parameter file holds the cost parameters and an optional
//! noise spec.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use lempart::grid::{build_grid, EdgeSpec, Grid, NodeId, NodeSpec};
use lempart::params::CostParams;
use lempart::timeseries::{NoiseSpec, Series};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFile {
    pub pcc: NodeId,
    pub v_ref: f64,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading grid file {}", path.display()))?;
    let file: GridFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing grid file {}", path.display()))?;
    build_grid(&file.nodes, &file.edges, file.pcc, file.v_ref)
        .with_context(|| format!("validating grid file {}", path.display()))
}

pub fn write_grid(path: &Path, file: &GridFile) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(file)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Reads a per-prosumer complex series CSV. Header columns are prosumer ids
/// for active power; `<id>_q` columns add reactive parts.
pub fn load_series(path: &Path) -> Result<BTreeMap<NodeId, Series>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading series file {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| anyhow!("{}: empty series file (header row mandatory)", path.display()))?;
    #[derive(Clone, Copy)]
    enum Col {
        Active(NodeId),
        Reactive(NodeId),
    }
    let mut columns = Vec::new();
    for (c, name) in header.split(',').enumerate() {
        let name = name.trim();
        let col = if let Some(stripped) = name.strip_suffix("_q") {
            Col::Reactive(stripped.parse().map_err(|_| {
                anyhow!("{}:1: bad reactive column header '{name}' (column {})", path.display(), c + 1)
            })?)
        } else {
            Col::Active(name.parse().map_err(|_| {
                anyhow!("{}:1: bad column header '{name}' (column {})", path.display(), c + 1)
            })?)
        };
        columns.push(col);
    }
    let mut out: BTreeMap<NodeId, Series> = BTreeMap::new();
    let mut steps = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            bail!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                lineno + 1,
                columns.len(),
                fields.len()
            );
        }
        for (c, (field, col)) in fields.iter().zip(&columns).enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                anyhow!(
                    "{}:{}: field {} ('{}') is not a number",
                    path.display(),
                    lineno + 1,
                    c + 1,
                    field.trim()
                )
            })?;
            let id = match col {
                Col::Active(id) | Col::Reactive(id) => *id,
            };
            let series = out.entry(id).or_default();
            if series.len() <= steps {
                series.resize(steps + 1, Complex64::default());
            }
            match col {
                Col::Active(_) => series[steps].re = value,
                Col::Reactive(_) => series[steps].im = value,
            }
        }
        steps += 1;
    }
    for series in out.values_mut() {
        series.resize(steps, Complex64::default());
    }
    Ok(out)
}

pub fn write_series(path: &Path, series: &BTreeMap<NodeId, Series>) -> Result<()> {
    let ids: Vec<NodeId> = series.keys().copied().collect();
    let has_reactive = series
        .values()
        .any(|s| s.iter().any(|v| v.im != 0.0));
    let mut text = String::new();
    let mut header: Vec<String> = ids.iter().map(|id| id.to_string()).collect();
    if has_reactive {
        header.extend(ids.iter().map(|id| format!("{id}_q")));
    }
    text.push_str(&header.join(","));
    text.push('\n');
    let steps = series.values().next().map_or(0, |s| s.len());
    for t in 0..steps {
        let mut row: Vec<String> = ids.iter().map(|id| format!("{}", series[id][t].re)).collect();
        if has_reactive {
            row.extend(ids.iter().map(|id| format!("{}", series[id][t].im)));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub costs: CostParams,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

pub fn load_params(path: &Path) -> Result<ParamsFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading params file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing params file {}", path.display()))
}

pub fn write_params(path: &Path, file: &ParamsFile) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(file)?)
        .with_context(|| format!("writing {}", path.display()))
}


/// Parses a partition spec like `1,2|3` into prosumer-id groups.
pub fn parse_partition_spec(spec: &str) -> Result<Vec<Vec<NodeId>>> {
    let mut groups = Vec::new();
    for group in spec.split('|') {
        let mut members = Vec::new();
        for token in group.split(',') {
            let token = token.trim();
            if token.is_empty() {
                continue;
            }
            members.push(
                token
                    .parse()
                    .map_err(|_| anyhow!("bad prosumer id '{token}' in partition spec"))?,
            );
        }
        if members.is_empty() {
            bail!("empty group in partition spec '{spec}'");
        }
        groups.push(members);
    }
    if groups.is_empty() {
        bail!("empty partition spec");
    }
    Ok(groups)
}
