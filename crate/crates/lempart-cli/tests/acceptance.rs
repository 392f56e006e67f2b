//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{check, config_path, emitted_fixtures, random_instance, run_cli, InstanceSpec};

use lempart::costs::{
    coalition_cost_decoupled, coalition_cost_externalities_strict, partition_total_cost,
    DeviationMode,
};
use lempart::dispatch::solve_exante_strict;
use lempart::grid::{enumerate_connected_subcoalitions, enumerate_partitions, NodeId};
use lempart::powerflow::{branch_flows, net_injections};
use lempart::stability::{lagrangian_core_allocation, optimal_partition, StabilityOptions};
use lempart::sweep::{run_sweep, SweepSpec};
use lempart::timeseries::{NoiseSpec, ProsumptionSet};

fn parse_cost_csv(stdout: &str) -> BTreeMap<String, f64> {
    let mut lines = stdout.lines();
    while let Some(line) = lines.next() {
        if line.starts_with("Flex,") {
            let headers: Vec<&str> = line.split(',').collect();
            let values: Vec<f64> = lines
                .next()
                .expect("value row")
                .split(',')
                .map(|v| v.parse().expect("numeric cell"))
                .collect();
            return headers
                .iter()
                .zip(values)
                .map(|(h, v)| (h.to_string(), v))
                .collect();
        }
    }
    panic!("no cost CSV in output:\n{stdout}");
}

#[test]
fn criterion_1_example1_itemised_costs() {
    let t0 = Instant::now();
    let (_tmp, root) = emitted_fixtures();
    let config = config_path(&root, "example1");
    let expected: [(&str, [f64; 5]); 3] = [
        ("1,2,3", [0.0, 0.0, 240.0, 0.0, 240.0]),
        ("1,2|3", [76.0, 0.0, 80.0, 80.0, 236.0]),
        ("1|2|3", [114.0, 0.0, 0.0, 120.0, 234.0]),
    ];
    let mut detail = String::new();
    for (spec, cells) in expected {
        let (code, stdout, stderr) =
            run_cli(&["evaluate", "--config", &config, "--partition", spec]);
        assert_eq!(code, 0, "evaluate failed: {stderr}");
        let row = parse_cost_csv(&stdout);
        let got = [row["Flex"], row["Imb"], row["Over"], row["Tax"], row["Total"]];
        for (g, e) in got.iter().zip(cells) {
            assert!(
                (g - e).abs() <= 0.5,
                "partition {spec}: cell {g} vs expected {e}"
            );
        }
        assert!(
            (row["Total"] - cells[4]).abs() <= 1e-3,
            "partition {spec}: total {} vs {}",
            row["Total"],
            cells[4]
        );
        detail.push_str(&format!("{spec} -> total {:.3}; ", row["Total"]));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        "1",
        elapsed < 5.0,
        &format!("table cells reproduced ({detail}) in {elapsed:.2}s < 5s"),
    );
}

#[test]
fn criterion_2_example1_operator_optimum() {
    let (_tmp, root) = emitted_fixtures();
    let config = config_path(&root, "example1");
    let (code, stdout, stderr) = run_cli(&["optimal", "--config", &config]);
    assert_eq!(code, 0, "optimal failed: {stderr}");
    let ok = stdout.contains("optimal partition {1|2|3}");
    check("2", ok, &format!("operator optimum: {}", stdout.trim()));
}

#[test]
fn criterion_3_example2_stability() {
    let t0 = Instant::now();
    let (_tmp, root) = emitted_fixtures();
    let config = config_path(&root, "example2");
    let out = root.join("example2").join("out");
    let (code, stdout, stderr) = run_cli(&[
        "stable",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stable failed: {stderr}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("stability.json")).unwrap())
            .unwrap();
    let parts = report["partitions"].as_array().unwrap();
    let by_label = |label: &str| {
        parts
            .iter()
            .find(|p| p["label"] == label)
            .unwrap_or_else(|| panic!("partition {label} missing"))
    };

    let gc = by_label("{1,2,3}");
    assert_eq!(gc["stable"], false, "grand coalition must be unstable");
    assert_eq!(
        gc["blocker"].as_array().unwrap(),
        &vec![serde_json::json!(1), serde_json::json!(2)],
        "blocker must be {{1,2}}"
    );
    let phi_gc = gc["cost"].as_f64().unwrap();
    assert!((phi_gc - 240.0).abs() < 1e-3, "phi(grand) = {phi_gc}");

    let pair_partition = by_label("{1,2|3}");
    assert_eq!(pair_partition["stable"], true);
    let cores = pair_partition["cores"].as_array().unwrap();
    let pair_cost = cores
        .iter()
        .find(|c| c["members"] == serde_json::json!([1, 2]))
        .unwrap()["budget"]
        .as_f64()
        .unwrap();
    let single_cost = cores
        .iter()
        .find(|c| c["members"] == serde_json::json!([3]))
        .unwrap()["budget"]
        .as_f64()
        .unwrap();
    assert!(
        (pair_cost - 157.0).abs() <= 2.0,
        "decoupled pair cost {pair_cost} vs 157"
    );
    assert!(
        (single_cost - 84.0).abs() <= 2.0,
        "decoupled singleton cost {single_cost} vs 84"
    );
    assert!(stdout.contains("optimal stable partition {1,2|3}"));
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        "3",
        elapsed < 10.0,
        &format!(
            "grand unstable (blocker 1,2; cost {phi_gc:.1}), pair block {pair_cost:.1}, singleton {single_cost:.1}, optimum {{1,2|3}} in {elapsed:.2}s < 10s"
        ),
    );
}

#[test]
fn criterion_4_perfect_forecast_grand_coalition_suite() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let inst = random_instance(&InstanceSpec {
            seed: 1000 + seed,
            prosumers: 3..=5,
            horizon: 3,
            kappa: 20.0 + (seed as f64 % 5.0) * 25.0,
            sigma: 0.0,
            quad_only: seed % 3 != 0,
        });
        // Operator optimum is the single market under perfect forecasts.
        let (p_star, phi_star) =
            optimal_partition(&inst.grid, &inst.set, &inst.params, 10).unwrap();
        if p_star.n_blocks() != 1 {
            failures.push(format!(
                "seed {seed}: optimal partition has {} blocks (cost {phi_star:.4})",
                p_star.n_blocks()
            ));
            continue;
        }
        // Dual-based allocation clears every sub-coalition's own cost.
        let alloc = lagrangian_core_allocation(&inst.grid, &inst.set, &inst.params).unwrap();
        if (alloc.total - alloc.grand_cost).abs() > 1e-6 * alloc.grand_cost.abs().max(1.0) {
            failures.push(format!(
                "seed {seed}: allocation total {} vs grand cost {}",
                alloc.total, alloc.grand_cost
            ));
            continue;
        }
        let shares: BTreeMap<NodeId, f64> = alloc.edges.iter().copied().collect();
        let gc = inst.grid.grand_coalition().unwrap();
        for sub in enumerate_connected_subcoalitions(&inst.grid, &gc) {
            if !sub.single_boundary() {
                continue;
            }
            let share: f64 = sub
                .edges
                .iter()
                .map(|&e| shares[&inst.grid.node_id(e)])
                .sum();
            let phi0 = coalition_cost_decoupled(&inst.grid, &sub, &inst.set, &inst.params)
                .unwrap()
                .total;
            if share > phi0 + 1e-5 {
                failures.push(format!(
                    "seed {seed}: coalition {:?} blocked (share {share:.6} > cost {phi0:.6})",
                    sub.member_ids(&inst.grid)
                ));
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        "4",
        failures.is_empty() && elapsed < 300.0,
        &format!(
            "50 random trees, 0 failures expected, {} found ({:?}) in {elapsed:.1}s < 300s",
            failures.len(),
            failures.first()
        ),
    );
}

#[test]
fn criterion_5_decoupling_equivalence() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut checked = 0;
    for seed in 0..25u64 {
        let inst = random_instance(&InstanceSpec {
            seed: 5000 + seed,
            prosumers: 3..=5,
            horizon: 3,
            kappa: 50.0,
            sigma: 0.15,
            quad_only: true,
        });
        let partitions = enumerate_partitions(&inst.grid, 10).unwrap();
        let feasible: Vec<_> = partitions
            .iter()
            .filter(|p| p.blocks.iter().all(|b| b.single_boundary()))
            .collect();
        let p = feasible[seed as usize % feasible.len()];
        let whole = solve_exante_strict(&inst.grid, p, inst.set.forecasts(), &inst.params)
            .expect("strict dispatch feasible");
        for (i, block) in p.blocks.iter().enumerate() {
            let ext = coalition_cost_externalities_strict(
                &inst.grid,
                p,
                i,
                &whole,
                &inst.set,
                &inst.params,
            )
            .unwrap();
            let dec =
                coalition_cost_decoupled(&inst.grid, block, &inst.set, &inst.params).unwrap();
            let rel = (ext.total - dec.total).abs() / dec.total.abs().max(1.0);
            worst = worst.max(rel);
            checked += 1;
            if rel > 1e-5 {
                failures += 1;
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        "5",
        failures == 0,
        &format!(
            "{checked} block equivalences, worst relative gap {worst:.2e} <= 1e-5, in {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_6_noise_sweep_trend() {
    let t0 = Instant::now();
    let (_tmp, root) = emitted_fixtures();
    let case = lempart_cli::config::load_case(
        &root.join("sweep3").join("config.json"),
        &Default::default(),
    )
    .unwrap();
    let spec = SweepSpec {
        levels: vec![0.0, 0.05, 0.10, 0.20],
        variants: 1000,
        noise: NoiseSpec {
            sigma: 0.0,
            scale_bound: 0.25,
            shift_bound: 1,
            seed: case.seed,
        },
        opts: StabilityOptions {
            mode: DeviationMode::NoExternalities,
            partition_cap: 10,
            subcoalition_cap: 1 << 12,
            tol: 1e-6,
        },
    };
    let result = run_sweep(&case.grid, &case.set, &case.params, &spec).unwrap();
    // Table shape: one row per partition, one mean-cost column per level.
    let csv = lempart_cli::report::sweep_csv(&result);
    let data_rows = csv
        .lines()
        .filter(|l| l.starts_with('"'))
        .count();
    let level_cols = csv
        .lines()
        .next()
        .unwrap()
        .split(',')
        .filter(|h| h.starts_with("mean_cost_"))
        .count();
    assert_eq!(data_rows, 5, "five partition rows");
    assert_eq!(level_cols, 4, "four level columns");
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        "6",
        result.grand_coalition_fraction_at_first_level == 1.0
            && result.monotone_fraction >= 0.8
            && elapsed < 1800.0,
        &format!(
            "1000 variants: zero-noise single-market share {:.3} (need 1.0), monotone block counts {:.3} (need >= 0.8), {elapsed:.0}s < 1800s",
            result.grand_coalition_fraction_at_first_level, result.monotone_fraction
        ),
    );
}

#[test]
fn criterion_7_numerical_suites() {
    use num_complex::Complex64;
    let t0 = Instant::now();

    // Tree pass versus the dense path-incidence oracle, and superposition.
    let mut worst_flow = 0.0f64;
    let mut worst_super = 0.0f64;
    for seed in 0..30u64 {
        let inst = random_instance(&InstanceSpec {
            seed: 7000 + seed,
            prosumers: 3..=5,
            horizon: 4,
            kappa: 10.0,
            sigma: 0.1,
            quad_only: true,
        });
        let grid = &inst.grid;
        let inj = net_injections(grid, inst.set.realizations(), None).unwrap();
        let state = branch_flows(grid, &inj).unwrap();
        for (&src, series) in &inj {
            let _ = (src, series);
        }
        for node in grid.edge_nodes() {
            for t in 0..state.horizon {
                let mut oracle = Complex64::default();
                for (&src, series) in &inj {
                    if grid.path_to_pcc(src).contains(&node) {
                        oracle += series[t];
                    }
                }
                worst_flow = worst_flow.max((state.flows[node][t] - oracle).norm());
            }
        }
        let doubled: BTreeMap<usize, Vec<Complex64>> = inj
            .iter()
            .map(|(&k, v)| (k, v.iter().map(|x| x * 2.0).collect()))
            .collect();
        let state2 = branch_flows(grid, &doubled).unwrap();
        for node in 0..grid.n_nodes() {
            for t in 0..state.horizon {
                worst_super = worst_super
                    .max((state2.flows[node][t] - state.flows[node][t] * 2.0).norm())
                    .max((state2.dv[node][t] - state.dv[node][t] * 2.0).abs());
            }
        }
    }
    assert!(worst_flow <= 1e-9, "flow oracle gap {worst_flow:.2e}");
    assert!(worst_super <= 1e-12, "superposition gap {worst_super:.2e}");

    // Duality gap on every ex-ante solve, and the total-cost identity.
    let mut worst_gap = 0.0f64;
    let mut worst_identity = 0.0f64;
    let mut evaluations = 0;
    for seed in 0..25u64 {
        let inst = random_instance(&InstanceSpec {
            seed: 7100 + seed,
            prosumers: 3..=4,
            horizon: 3,
            kappa: 40.0,
            sigma: 0.2,
            quad_only: seed % 2 == 0,
        });
        let partitions = enumerate_partitions(&inst.grid, 10).unwrap();
        for p in partitions.iter().take(4) {
            let report = partition_total_cost(&inst.grid, p, &inst.set, &inst.params).unwrap();
            worst_identity = worst_identity
                .max(report.identity_residual())
                .max(report.items_residual());
            let dispatch =
                lempart::dispatch::solve_exante(&inst.grid, p, inst.set.forecasts(), &inst.params)
                    .unwrap();
            worst_gap = worst_gap.max(dispatch.duality_gap);
            evaluations += 1;
        }
    }
    assert!(evaluations >= 100, "need at least 100 evaluations");
    assert!(worst_gap <= 1e-6, "duality gap {worst_gap:.2e}");
    assert!(worst_identity <= 1e-9, "identity residual {worst_identity:.2e}");
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        "7",
        true,
        &format!(
            "flow oracle {worst_flow:.1e} <= 1e-9, superposition {worst_super:.1e} <= 1e-12, duality gap {worst_gap:.1e} <= 1e-6, identity {worst_identity:.1e} <= 1e-9 over {evaluations} evaluations in {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_8_feeder_scale() {
    let t0 = Instant::now();
    let (_tmp, root) = emitted_fixtures();
    let config = config_path(&root, "feeder43");
    let case = lempart_cli::config::load_case(config.as_ref(), &Default::default()).unwrap();
    assert_eq!(case.grid.n_nodes(), 43, "43-node feeder");
    assert_eq!(case.grid.prosumers().len(), 5, "five prosumers");
    let partitions = enumerate_partitions(&case.grid, 10).unwrap();
    assert_eq!(partitions.len(), 34, "34 connected partitions");
    let (code, stdout, stderr) = run_cli(&["stable", "--config", &config]);
    assert_eq!(code, 0, "stable failed: {stderr}");
    assert!(stdout.contains("optimal stable partition"));
    let elapsed = t0.elapsed().as_secs_f64();
    check(
        "8",
        elapsed < 600.0,
        &format!("43-node grid, 34 partitions, full coupled-mode stable search in {elapsed:.1}s < 600s"),
    );
}

#[test]
fn prosumption_set_invariants() {
    // Mixed-length series are rejected; prosumer sets must match.
    let mut realized = BTreeMap::new();
    realized.insert(1u32, vec![num_complex::Complex64::new(1.0, 0.0)]);
    realized.insert(2u32, vec![num_complex::Complex64::new(1.0, 0.0); 2]);
    assert!(ProsumptionSet::perfect(realized).is_err());
}
