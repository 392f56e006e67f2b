//! Shared helpers for the acceptance suite: random feasible tree instances
//! and fixture emission.
#![allow(dead_code)] // each test binary uses a different subset

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lempart::grid::{build_grid, EdgeSpec, Grid, NodeId, NodeSpec};
use lempart::params::{CostParams, FlexCost, FlexSpec, PriceProfile, RateMap};
use lempart::timeseries::{apply_forecast_noise, NoiseSpec, ProsumptionSet, Series};

pub struct Instance {
    pub grid: Grid,
    pub set: ProsumptionSet,
    pub params: CostParams,
}

pub struct InstanceSpec {
    pub seed: u64,
    pub prosumers: std::ops::RangeInclusive<usize>,
    pub horizon: usize,
    pub kappa: f64,
    /// Forecast noise level; zero means perfect forecasts.
    pub sigma: f64,
    /// Pure quadratic flexibility costs (smooth duals) when set; otherwise
    /// a linear part may be mixed in.
    pub quad_only: bool,
}

/// Random radial grid whose leaves are all prosumers (so the grand
/// coalition has a single boundary node), with flexibility sized for
/// feasible self-consumption.
pub fn random_instance(spec: &InstanceSpec) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_pros = rng.gen_range(spec.prosumers.clone());
    let n_junctions = rng.gen_range(1..=3usize.min(n_pros));

    let mut nodes = vec![NodeSpec {
        id: 0,
        dv_limit: 1e12,
        is_prosumer: false,
    }];
    let mut edges = Vec::new();
    let mut junction_ids: Vec<NodeId> = Vec::new();
    for j in 0..n_junctions {
        let id = 100 + j as NodeId;
        let parent = if j == 0 {
            0
        } else {
            junction_ids[rng.gen_range(0..junction_ids.len())]
        };
        nodes.push(NodeSpec {
            id,
            dv_limit: 1e12,
            is_prosumer: false,
        });
        edges.push(EdgeSpec {
            from: parent,
            to: id,
            r: rng.gen_range(0.002..0.02),
            x: rng.gen_range(0.002..0.02),
            s_limit: 50.0,
        });
        junction_ids.push(id);
    }
    // One prosumer per junction first (no junction stays a bare leaf),
    // then the rest attach anywhere.
    for m in 1..=n_pros as NodeId {
        let attach = if (m as usize) <= n_junctions {
            junction_ids[m as usize - 1]
        } else {
            junction_ids[rng.gen_range(0..junction_ids.len())]
        };
        nodes.push(NodeSpec {
            id: m,
            dv_limit: 1e12,
            is_prosumer: true,
        });
        edges.push(EdgeSpec {
            from: attach,
            to: m,
            r: rng.gen_range(0.002..0.02),
            x: rng.gen_range(0.002..0.02),
            s_limit: 50.0,
        });
    }
    let grid = build_grid(&nodes, &edges, 0, 1.0).expect("random tree is a valid grid");

    let mut realized: BTreeMap<NodeId, Series> = BTreeMap::new();
    for &p in grid.prosumers() {
        realized.insert(
            grid.node_id(p),
            (0..spec.horizon)
                .map(|_| Complex64::new(rng.gen_range(-1.5..1.5), 0.0))
                .collect(),
        );
    }
    let base = ProsumptionSet::perfect(realized).unwrap();
    let set = if spec.sigma > 0.0 {
        apply_forecast_noise(
            &base,
            &NoiseSpec {
                sigma: spec.sigma,
                scale_bound: 0.0,
                shift_bound: 0,
                seed: spec.seed ^ 0xABCD,
            },
        )
        .unwrap()
    } else {
        base
    };

    let flex: BTreeMap<NodeId, FlexSpec> = grid
        .prosumers()
        .iter()
        .map(|&p| {
            let linear = if spec.quad_only {
                0.0
            } else {
                rng.gen_range(0.0..5.0)
            };
            (
                grid.node_id(p),
                FlexSpec {
                    cost: FlexCost::Quadratic {
                        rate: linear,
                        quad: rng.gen_range(0.5..3.0),
                    },
                    u_max: Some(30.0),
                    storage_neutral: false,
                },
            )
        })
        .collect();
    let params = CostParams {
        step_hours: 1.0,
        flex,
        export_price: PriceProfile::Flat(0.0),
        export_price_reactive: PriceProfile::Flat(0.0),
        kappa: PriceProfile::Flat(spec.kappa),
        overload_penalty: RateMap::flat(200.0),
        voltage_penalty: RateMap::flat(0.0),
        imbalance_penalty: 200.0,
        balancing_default: Some(spec.kappa),
        balancing_overrides: Vec::new(),
    };
    Instance { grid, set, params }
}

/// Emits the bundled fixtures into a fresh temp directory and returns it.
pub fn emitted_fixtures() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().join("fixtures");
    lempart_cli::fixtures::emit_all(&root).expect("fixture emission");
    (dir, root)
}

/// Runs the bundled binary, returning (status code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_lempart"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn config_path(root: &Path, fixture: &str) -> String {
    root.join(fixture).join("config.json").display().to_string()
}

/// Prints one verdict line and asserts it.
pub fn check(criterion: &str, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} - {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}
