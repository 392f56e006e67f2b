//! Report emission: itemised cost CSV/JSON, dual dumps, stability reports
//! and the noise-sweep table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use lempart::costs::CostReport;
use lempart::dispatch::DispatchSolution;
use lempart::stability::StablePartitionResult;
use lempart::sweep::SweepResult;

/// Fixed itemised column order shared by the CSV and the docs.
pub const COST_COLUMNS: &str = "Flex,Imb,Over,Volt,Tax,Export,Total";

pub fn cost_report_csv(report: &CostReport) -> String {
    let mut out = String::new();
    out.push_str(COST_COLUMNS);
    out.push('\n');
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{}",
        report.flex,
        report.imbalance,
        report.overload,
        report.voltage,
        report.tax,
        report.export,
        report.total
    );
    out
}

pub fn write_cost_report(dir: &Path, report: &CostReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("cost_report.json"),
        serde_json::to_string_pretty(report)?,
    )
    .context("writing cost_report.json")?;
    fs::write(dir.join("cost_report.csv"), cost_report_csv(report))
        .context("writing cost_report.csv")?;
    Ok(())
}

pub fn duals_csv(solution: &DispatchSolution) -> String {
    let mut out = String::from("kind,node,t,re,im\n");
    let d = &solution.duals;
    for (id, series) in &d.lambda {
        for (t, v) in series.iter().enumerate() {
            let _ = writeln!(out, "lambda,{id},{t},{},{}", v.re, v.im);
        }
    }
    for (id, series) in &d.beta {
        for (t, v) in series.iter().enumerate() {
            let _ = writeln!(out, "beta,{id},{t},{v},0");
        }
    }
    for (id, series) in &d.mu {
        for (t, v) in series.iter().enumerate() {
            let _ = writeln!(out, "mu,{id},{t},{v},0");
        }
    }
    for (id, series) in &d.eta {
        for (t, v) in series.iter().enumerate() {
            let _ = writeln!(out, "eta,{id},{t},{v},0");
        }
    }
    for (id, series) in &d.theta_box {
        for (t, v) in series.iter().enumerate() {
            let _ = writeln!(out, "theta_box,{id},{t},{v},0");
        }
    }
    for (id, v) in &d.theta_storage {
        let _ = writeln!(out, "theta_storage,{id},0,{v},0");
    }
    for (b, series) in d.lambda_exchange.iter().enumerate() {
        for (t, v) in series.iter().enumerate() {
            let _ = writeln!(out, "lambda_exchange,{b},{t},{},{}", v.re, v.im);
        }
    }
    out
}

/// Realized branch flows and voltage deviations, one row per edge/step.
pub fn flows_csv(grid: &lempart::grid::Grid, flows: &lempart::powerflow::FlowState) -> String {
    let mut out = String::from("node,t,flow_re,flow_im,dv\n");
    for node in grid.edge_nodes() {
        let id = grid.node_id(node);
        for t in 0..flows.horizon {
            let s = flows.flows[node][t];
            let _ = writeln!(out, "{id},{t},{},{},{}", s.re, s.im, flows.dv[node][t]);
        }
    }
    out
}

pub fn write_stability(dir: &Path, result: &StablePartitionResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("stability.json"),
        serde_json::to_string_pretty(result)?,
    )
    .context("writing stability.json")?;
    Ok(())
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("partition,blocks");
    for level in &result.levels {
        let _ = write!(out, ",mean_cost_{:.2}", level);
    }
    for level in &result.levels {
        let _ = write!(out, ",optimal_{:.2},optimal_stable_{:.2}", level, level);
    }
    out.push('\n');
    for (i, label) in result.partition_labels.iter().enumerate() {
        let _ = write!(out, "\"{label}\",{}", result.partition_block_counts[i]);
        for l in 0..result.levels.len() {
            let _ = write!(out, ",{}", result.mean_costs[i][l]);
        }
        for l in 0..result.levels.len() {
            let _ = write!(
                out,
                ",{},{}",
                result.optimal_counts[i][l], result.optimal_stable_counts[i][l]
            );
        }
        out.push('\n');
    }
    // Per-level winner rows.
    let winner = |counts: &Vec<Vec<usize>>, l: usize| -> String {
        (0..result.partition_labels.len())
            .max_by_key(|&i| counts[i][l])
            .map(|i| result.partition_labels[i].clone())
            .unwrap_or_default()
    };
    out.push_str("winner_optimal,");
    for l in 0..result.levels.len() {
        let _ = write!(out, ",{}", winner(&result.optimal_counts, l));
    }
    out.push('\n');
    out.push_str("winner_optimal_stable,");
    for l in 0..result.levels.len() {
        let _ = write!(out, ",{}", winner(&result.optimal_stable_counts, l));
    }
    out.push('\n');
    out
}

pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(result)).context("writing sweep.csv")?;
    fs::write(
        dir.join("sweep.json"),
        serde_json::to_string_pretty(result)?,
    )
    .context("writing sweep.json")?;
    Ok(())
}
