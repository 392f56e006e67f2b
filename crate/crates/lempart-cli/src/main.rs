//! Command-line surface for partition evaluation, enumeration, optimal and
//! stable partition search, core checks, noise sweeps and fixture emission.
//!
//! Exit codes: 0 success, 2 input error, 3 resource cap exceeded, 4 solver
//! failure. Errors are printed to stderr as one JSON object.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lempart::costs;
use lempart::dispatch::DispatchError;
use lempart::grid::{partition_from_groups, GridError};
use lempart::stability::{
    core_check, lagrangian_core_allocation, optimal_partition, optimal_stable_partition,
    StabilityError, StabilityOptions,
};
use lempart::sweep::{run_sweep, SweepError, SweepSpec};
use lempart::timeseries::NoiseSpec;

use lempart_cli::{config, fixtures, formats, report};

use config::Overrides;

#[derive(Parser)]
#[command(
    name = "lempart",
    version,
    about = "Two-stage cost evaluation and core-stable partitioning of radial grids into local energy markets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config mode: externalities | no_externalities.
    #[arg(long)]
    mode: Option<String>,
    /// Regenerate forecasts from realizations at this noise level.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prosumer-count cap for partition enumeration.
    #[arg(long)]
    cap: Option<usize>,
    /// Core-inequality tolerance (CHF).
    #[arg(long)]
    tol: Option<f64>,
    /// Output directory (default: `out` beside the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the two-stage cost of one partition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Partition spec, e.g. "1,2|3".
        #[arg(long)]
        partition: String,
        /// Also dump the ex-ante dual bundle to CSV.
        #[arg(long)]
        dump_duals: bool,
        /// Also dump realized flows and voltage deviations to CSV.
        #[arg(long)]
        dump_flows: bool,
    },
    /// List every valid partition of the grid.
    Enumerate {
        #[command(flatten)]
        common: Common,
    },
    /// Find the cost-minimal partition.
    Optimal {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full stable-partition search.
    Stable {
        #[command(flatten)]
        common: Common,
    },
    /// Check the core of one block of a partition.
    CoreCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        partition: String,
        /// The block to check, e.g. "1,2".
        #[arg(long)]
        block: String,
    },
    /// Monte-Carlo noise sweep across forecast-noise levels.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated noise levels, e.g. "0,0.05,0.1,0.2".
        #[arg(long, default_value = "0,0.05,0.1,0.2")]
        levels: String,
        #[arg(long, default_value_t = 100)]
        variants: usize,
    },
    /// Write the bundled example fixtures.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
    /// Compute the dual-based core allocation for the grand coalition
    /// (requires perfect forecasts).
    Allocate {
        #[command(flatten)]
        common: Common,
    },
}

struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
}

impl CliError {
    fn input(message: String) -> Self {
        Self {
            code: 2,
            kind: "input",
            message,
        }
    }
    fn resource(message: String) -> Self {
        Self {
            code: 3,
            kind: "resource",
            message,
        }
    }
    fn solver(message: String) -> Self {
        Self {
            code: 4,
            kind: "solver",
            message,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        // Typed causes keep their classification through anyhow wrapping.
        for cause in e.chain() {
            if let Some(g) = cause.downcast_ref::<GridError>() {
                return g.clone().into();
            }
            if let Some(d) = cause.downcast_ref::<DispatchError>() {
                return d.clone().into();
            }
        }
        CliError::input(format!("{e:#}"))
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::TooManyProsumers { .. } => CliError::resource(e.to_string()),
            _ => CliError::input(e.to_string()),
        }
    }
}

impl From<DispatchError> for CliError {
    fn from(e: DispatchError) -> Self {
        match e {
            DispatchError::Infeasible
            | DispatchError::Unbounded
            | DispatchError::SolverFailure(_) => CliError::solver(e.to_string()),
            other => CliError::input(other.to_string()),
        }
    }
}

impl From<costs::CostError> for CliError {
    fn from(e: costs::CostError) -> Self {
        match e {
            costs::CostError::Dispatch(d) => d.into(),
            costs::CostError::Grid(g) => g.into(),
            other => CliError::input(other.to_string()),
        }
    }
}

impl From<StabilityError> for CliError {
    fn from(e: StabilityError) -> Self {
        match e {
            StabilityError::ExponentialBlowup { .. } => CliError::resource(e.to_string()),
            StabilityError::LpFailure(m) => CliError::solver(m),
            StabilityError::Cost(c) => c.into(),
            StabilityError::Grid(g) => g.into(),
            StabilityError::Dispatch(d) => d.into(),
            StabilityError::RequiresPerfectForecasts => CliError::input(e.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Stability(s) => s.into(),
            other => CliError::input(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind, "message": e.message}));
            ExitCode::from(e.code)
        }
    }
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        common
            .config
            .parent()
            .unwrap_or(std::path::Path::new("."))
            .join("out")
    })
}

fn overrides(common: &Common) -> Overrides {
    Overrides {
        mode: common.mode.clone(),
        sigma: common.sigma,
        seed: common.seed,
        cap: common.cap,
        tol: common.tol,
    }
}

fn stability_options(case: &config::Case) -> StabilityOptions {
    StabilityOptions {
        mode: case.mode,
        partition_cap: case.cap,
        subcoalition_cap: 1 << 12,
        tol: case.tol,
    }
}

fn write_json(path: &std::path::Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::input(e.to_string()))?;
    }
    std::fs::write(
        path,
        serde_json::to_string_pretty(value).map_err(|e| CliError::input(e.to_string()))?,
    )
    .map_err(|e| CliError::input(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Evaluate {
            common,
            partition,
            dump_duals,
            dump_flows,
        } => {
            let case = config::load_case(&common.config, &overrides(&common))?;
            let groups = formats::parse_partition_spec(&partition)?;
            let p = partition_from_groups(&case.grid, &groups)?;
            let eval = costs::evaluate_partition(&case.grid, &p, &case.set, &case.params)?;
            let dir = out_dir(&common);
            report::write_cost_report(&dir, &eval.report)?;
            if dump_duals {
                std::fs::write(dir.join("duals.csv"), report::duals_csv(&eval.dispatch))
                    .map_err(|e| CliError::input(e.to_string()))?;
            }
            if dump_flows {
                std::fs::write(
                    dir.join("flows.csv"),
                    report::flows_csv(&case.grid, &eval.realized_flows),
                )
                .map_err(|e| CliError::input(e.to_string()))?;
            }
            println!("partition {}", p.label(&case.grid));
            println!("{}", report::cost_report_csv(&eval.report).trim_end());
            Ok(())
        }
        Command::Enumerate { common } => {
            let case = config::load_case(&common.config, &overrides(&common))?;
            let parts = lempart::grid::enumerate_partitions(&case.grid, case.cap)?;
            let labels: Vec<String> = parts.iter().map(|p| p.label(&case.grid)).collect();
            for l in &labels {
                println!("{l}");
            }
            write_json(&out_dir(&common).join("partitions.json"), &labels)
        }
        Command::Optimal { common } => {
            let case = config::load_case(&common.config, &overrides(&common))?;
            let (p, phi) = optimal_partition(&case.grid, &case.set, &case.params, case.cap)?;
            println!("optimal partition {} cost {phi:.6}", p.label(&case.grid));
            write_json(
                &out_dir(&common).join("optimal.json"),
                &json!({
                    "partition": p.label(&case.grid),
                    "cost": phi,
                }),
            )
        }
        Command::Stable { common } => {
            let case = config::load_case(&common.config, &overrides(&common))?;
            let opts = stability_options(&case);
            let result = optimal_stable_partition(&case.grid, &case.set, &case.params, &opts)?;
            match result.optimal() {
                Some(s) => println!(
                    "optimal stable partition {} cost {:.6}",
                    s.label,
                    s.cost.unwrap_or(f64::NAN)
                ),
                None => println!("stable set empty"),
            }
            for s in &result.partitions {
                let status = match (&s.skipped, s.stable) {
                    (Some(reason), _) => format!("skipped ({reason})"),
                    (None, Some(true)) => "stable".to_string(),
                    (None, Some(false)) => format!(
                        "unstable (blocker {:?})",
                        s.blocker.clone().unwrap_or_default()
                    ),
                    (None, None) => "unevaluated".to_string(),
                };
                println!(
                    "{}\tcost {}\t{}",
                    s.label,
                    s.cost.map_or("-".into(), |c| format!("{c:.6}")),
                    status
                );
            }
            report::write_stability(&out_dir(&common), &result)?;
            Ok(())
        }
        Command::CoreCheck {
            common,
            partition,
            block,
        } => {
            let case = config::load_case(&common.config, &overrides(&common))?;
            let groups = formats::parse_partition_spec(&partition)?;
            let p = partition_from_groups(&case.grid, &groups)?;
            let mut block_ids = formats::parse_partition_spec(&block)?
                .into_iter()
                .next()
                .unwrap();
            block_ids.sort_unstable();
            let idx = p
                .blocks
                .iter()
                .position(|b| b.member_ids(&case.grid) == block_ids)
                .ok_or_else(|| CliError::input(format!("block {block:?} not in partition")))?;
            let opts = stability_options(&case);
            let core = core_check(&case.grid, &p, idx, &case.set, &case.params, &opts)?;
            println!(
                "core of {:?} in {}: {} (allocatable {:.6} vs cost {:.6})",
                core.members,
                p.label(&case.grid),
                if core.feasible { "non-empty" } else { "empty" },
                core.objective,
                core.budget
            );
            write_json(&out_dir(&common).join("core.json"), &core)
        }
        Command::Sweep {
            common,
            levels,
            variants,
        } => {
            let case = config::load_case(&common.config, &overrides(&common))?;
            let levels: Vec<f64> = levels
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::input(format!("bad noise level '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            let noise = case.noise.clone().unwrap_or(NoiseSpec {
                sigma: 0.0,
                scale_bound: 0.25,
                shift_bound: 1,
                seed: case.seed,
            });
            let noise = NoiseSpec {
                seed: case.seed,
                ..noise
            };
            let spec = SweepSpec {
                levels,
                variants,
                noise,
                opts: stability_options(&case),
            };
            let result = run_sweep(&case.grid, &case.set, &case.params, &spec)?;
            println!(
                "sweep over {} variants x {} levels; zero-noise single-market share {:.3}; monotone fraction {:.3}",
                result.variants,
                result.levels.len(),
                result.grand_coalition_fraction_at_first_level,
                result.monotone_fraction
            );
            report::write_sweep(&out_dir(&common), &result)?;
            Ok(())
        }
        Command::Fixtures { out } => {
            let written = fixtures::emit_all(&out)?;
            for w in written {
                println!("wrote {w}");
            }
            Ok(())
        }
        Command::Allocate { common } => {
            let case = config::load_case(&common.config, &overrides(&common))?;
            let alloc = lagrangian_core_allocation(&case.grid, &case.set, &case.params)?;
            println!(
                "grand-coalition cost {:.6}; allocation over {} edges",
                alloc.grand_cost,
                alloc.edges.len()
            );
            for (edge, value) in &alloc.edges {
                println!("edge->{edge}\t{value:.6}");
            }
            write_json(&out_dir(&common).join("allocation.json"), &alloc)
        }
    }
}
