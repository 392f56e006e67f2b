//! Bundled example grids, profiles and parameter sets:
//!
//! * `example1` - three-prosumer star with linear battery costs and tight
//!   line limits; forecast errors make the singleton partition cheapest.
//! * `example2` - same star with quadratic battery costs and per-coalition
//!   balancing prices; the single market is cheapest but not stable.
//! * `sweep3`   - three heterogeneous feeder branches (night-peaking load
//!   with wind, residential with rooftop PV, flat commercial) for the
//!   noise sweep under strict self-consumption.
//! * `feeder43` - a 43-node low-voltage feeder with a five-prosumer
//!   neighbourhood at its end (34 connected partitions).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use num_complex::Complex64;

use lempart::grid::{EdgeSpec, NodeId, NodeSpec};
use lempart::params::{
    BalancingOverride, CostParams, FlexCost, FlexSpec, PriceProfile, RateMap,
};
use lempart::powerflow::voltage_penalty_from_curtailment;
use lempart::timeseries::{apply_forecast_noise, NoiseSpec, ProsumptionSet, Series};

use crate::config::RunConfig;
use crate::formats::{write_grid, write_params, write_series, GridFile, ParamsFile};

pub fn emit_all(dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    for (name, emit) in [
        ("example1", emit_example1 as fn(&Path) -> Result<()>),
        ("example2", emit_example2),
        ("sweep3", emit_sweep3),
        ("feeder43", emit_feeder43),
    ] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        emit(&sub)?;
        written.push(sub.display().to_string());
    }
    Ok(written)
}

fn write_config(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(config)?,
    )
    .with_context(|| format!("writing {}", dir.join("config.json").display()))
}

fn star_grid_file(s_limit: f64) -> GridFile {
    GridFile {
        pcc: 0,
        v_ref: 1.0,
        nodes: (0..4)
            .map(|id| NodeSpec {
                id,
                dv_limit: 1e12,
                is_prosumer: id > 0,
            })
            .collect(),
        edges: (1..4)
            .map(|id| EdgeSpec {
                from: id,
                to: 0,
                r: 0.01,
                x: 0.01,
                s_limit,
            })
            .collect(),
    }
}

fn series(values: &[&[f64]]) -> BTreeMap<NodeId, Series> {
    values
        .iter()
        .enumerate()
        .map(|(i, vals)| {
            (
                (i + 1) as NodeId,
                vals.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            )
        })
        .collect()
}

fn example_series() -> (BTreeMap<NodeId, Series>, BTreeMap<NodeId, Series>) {
    let forecast = series(&[&[0.0, 1.0, -1.0], &[-1.0, 0.0, 1.0], &[1.0, -1.0, 0.0]]);
    let realized = series(&[
        &[0.0, 1.2, -1.2],
        &[-1.2, 0.0, 1.2],
        &[1.2, -1.2, 0.0],
    ]);
    (forecast, realized)
}

fn example_flex(cost: FlexCost) -> BTreeMap<NodeId, FlexSpec> {
    (1..4)
        .map(|id| {
            (
                id,
                FlexSpec {
                    cost: cost.clone(),
                    u_max: Some(100.0),
                    storage_neutral: true,
                },
            )
        })
        .collect()
}

fn example_params(cost: FlexCost) -> CostParams {
    CostParams {
        step_hours: 1.0,
        flex: example_flex(cost),
        export_price: PriceProfile::Flat(0.0),
        export_price_reactive: PriceProfile::Flat(0.0),
        kappa: PriceProfile::Flat(100.0),
        overload_penalty: RateMap::flat(200.0),
        voltage_penalty: RateMap::flat(0.0),
        imbalance_penalty: 200.0,
        balancing_default: None,
        balancing_overrides: Vec::new(),
    }
}

fn emit_example1(dir: &Path) -> Result<()> {
    write_grid(&dir.join("grid.json"), &star_grid_file(1.0))?;
    let (forecast, realized) = example_series();
    write_series(&dir.join("forecast.csv"), &forecast)?;
    write_series(&dir.join("realized.csv"), &realized)?;
    write_params(
        &dir.join("params.json"),
        &ParamsFile {
            costs: example_params(FlexCost::Linear { rate: 19.0 }),
            noise: None,
        },
    )?;
    write_config(dir, &RunConfig::bundle("externalities", 42))
}

fn emit_example2(dir: &Path) -> Result<()> {
    write_grid(&dir.join("grid.json"), &star_grid_file(1.0))?;
    let (forecast, realized) = example_series();
    write_series(&dir.join("forecast.csv"), &forecast)?;
    write_series(&dir.join("realized.csv"), &realized)?;
    let mut costs = example_params(FlexCost::Quadratic {
        rate: 19.0,
        quad: 2.0,
    });
    // Balancing prices decrease with coalition size: aggregation buys
    // cheaper reserves.
    costs.balancing_overrides = vec![
        BalancingOverride {
            members: vec![1],
            price: 105.0,
        },
        BalancingOverride {
            members: vec![2],
            price: 105.0,
        },
        BalancingOverride {
            members: vec![3],
            price: 105.0,
        },
        BalancingOverride {
            members: vec![1, 2],
            price: 92.5,
        },
        BalancingOverride {
            members: vec![1, 3],
            price: 92.5,
        },
        BalancingOverride {
            members: vec![2, 3],
            price: 92.5,
        },
    ];
    write_params(&dir.join("params.json"), &ParamsFile { costs, noise: None })?;
    write_config(dir, &RunConfig::bundle("no_externalities", 42))
}

/// Base 24-hour net-prosumption archetypes (MW) for the three branches.
pub fn sweep3_profiles() -> BTreeMap<NodeId, Series> {
    let t_of = |t: usize| t as f64;
    let mut out = BTreeMap::new();
    // Branch 1: load peaking at midnight (scaled 1.8x) against wind.
    let b1: Series = (0..24)
        .map(|t| {
            let load = 1.8 * (0.55 + 0.45 * (2.0 * PI * t_of(t) / 24.0).cos());
            let wind = 1.5 * (0.45 + 0.35 * (2.0 * PI * (t_of(t) - 2.0) / 24.0).sin()
                + 0.2 * (4.0 * PI * t_of(t) / 24.0).sin());
            Complex64::new(wind - load, 0.0)
        })
        .collect();
    // Branch 2: residential evening peak (scaled 1.2x) with rooftop PV.
    let b2: Series = (0..24)
        .map(|t| {
            let load = 1.2 * (0.6 + 0.4 * (2.0 * PI * (t_of(t) - 19.0) / 24.0).cos());
            let pv = if (6..=18).contains(&t) {
                1.9 * (PI * (t_of(t) - 6.0) / 12.0).sin()
            } else {
                0.0
            };
            Complex64::new(pv - load, 0.0)
        })
        .collect();
    // Branch 3: flat commercial load on a steady incinerator unit.
    let b3: Series = (0..24)
        .map(|t| {
            let load = 0.9 + 0.1 * (2.0 * PI * (t_of(t) - 12.0) / 24.0).cos();
            Complex64::new(1.0 - load, 0.0)
        })
        .collect();
    out.insert(1, b1);
    out.insert(2, b2);
    out.insert(3, b3);
    out
}

fn emit_sweep3(dir: &Path) -> Result<()> {
    let grid = GridFile {
        pcc: 0,
        v_ref: 1.0,
        nodes: vec![
            NodeSpec {
                id: 0,
                dv_limit: 1e12,
                is_prosumer: false,
            },
            NodeSpec {
                id: 10,
                dv_limit: 0.008,
                is_prosumer: false,
            },
            NodeSpec {
                id: 20,
                dv_limit: 0.008,
                is_prosumer: false,
            },
            NodeSpec {
                id: 30,
                dv_limit: 0.008,
                is_prosumer: false,
            },
            NodeSpec {
                id: 1,
                dv_limit: 0.012,
                is_prosumer: true,
            },
            NodeSpec {
                id: 2,
                dv_limit: 0.012,
                is_prosumer: true,
            },
            NodeSpec {
                id: 3,
                dv_limit: 0.012,
                is_prosumer: true,
            },
        ],
        edges: vec![
            EdgeSpec {
                from: 0,
                to: 10,
                r: 0.02,
                x: 0.04,
                s_limit: 8.0,
            },
            EdgeSpec {
                from: 0,
                to: 20,
                r: 0.02,
                x: 0.04,
                s_limit: 8.0,
            },
            EdgeSpec {
                from: 0,
                to: 30,
                r: 0.02,
                x: 0.04,
                s_limit: 8.0,
            },
            EdgeSpec {
                from: 10,
                to: 1,
                r: 0.01,
                x: 0.02,
                s_limit: 8.0,
            },
            EdgeSpec {
                from: 20,
                to: 2,
                r: 0.01,
                x: 0.02,
                s_limit: 8.0,
            },
            EdgeSpec {
                from: 30,
                to: 3,
                r: 0.01,
                x: 0.02,
                s_limit: 8.0,
            },
        ],
    };
    write_grid(&dir.join("grid.json"), &grid)?;

    let base = sweep3_profiles();
    write_series(&dir.join("realized.csv"), &base)?;
    write_series(&dir.join("forecast.csv"), &base)?;

    let built = lempart::grid::build_grid(&grid.nodes, &grid.edges, grid.pcc, grid.v_ref)?;
    let voltage_penalty = voltage_penalty_from_curtailment(&built, 300.0);
    let rates = [16.0, 24.0, 8.0];
    let flex: BTreeMap<NodeId, FlexSpec> = (1..4)
        .map(|id| {
            (
                id,
                FlexSpec {
                    cost: FlexCost::Linear {
                        rate: rates[(id - 1) as usize],
                    },
                    u_max: Some(4.0),
                    storage_neutral: false,
                },
            )
        })
        .collect();
    let costs = CostParams {
        step_hours: 1.0,
        flex,
        export_price: PriceProfile::Flat(0.0),
        export_price_reactive: PriceProfile::Flat(0.0),
        kappa: PriceProfile::Flat(100.0),
        overload_penalty: RateMap::flat(300.0),
        voltage_penalty,
        imbalance_penalty: 300.0,
        balancing_default: None,
        balancing_overrides: Vec::new(),
    };
    write_params(
        &dir.join("params.json"),
        &ParamsFile {
            costs,
            noise: Some(NoiseSpec {
                sigma: 0.1,
                scale_bound: 0.25,
                shift_bound: 1,
                seed: 2024,
            }),
        },
    )?;
    write_config(dir, &RunConfig::bundle("no_externalities", 2024))
}

fn emit_feeder43(dir: &Path) -> Result<()> {
    let mut nodes = vec![NodeSpec {
        id: 0,
        dv_limit: 0.05,
        is_prosumer: false,
    }];
    let mut edges = Vec::new();
    // Feeder trunk from the PCC to the neighbourhood head.
    let trunk: Vec<NodeId> = (100..108).collect();
    let mut prev = 0;
    for &id in &trunk {
        nodes.push(NodeSpec {
            id,
            dv_limit: 0.05,
            is_prosumer: false,
        });
        edges.push(EdgeSpec {
            from: prev,
            to: id,
            r: 0.004,
            x: 0.006,
            s_limit: 12.0,
        });
        prev = id;
    }
    // Neighbourhood spine with one prosumer leaf per spine node.
    let spine: Vec<NodeId> = (110..115).collect();
    for (i, &id) in spine.iter().enumerate() {
        nodes.push(NodeSpec {
            id,
            dv_limit: 0.04,
            is_prosumer: false,
        });
        edges.push(EdgeSpec {
            from: prev,
            to: id,
            r: 0.005,
            x: 0.008,
            s_limit: 6.0,
        });
        prev = id;
        let leaf = (i + 1) as NodeId;
        nodes.push(NodeSpec {
            id: leaf,
            dv_limit: 0.04,
            is_prosumer: true,
        });
        edges.push(EdgeSpec {
            from: id,
            to: leaf,
            r: 0.006,
            x: 0.01,
            s_limit: 4.0,
        });
    }
    // Passive service drops along the trunk to fill out the feeder.
    let mut filler = 200;
    'outer: for &t in &trunk {
        for _ in 0..3 {
            if nodes.len() == 43 {
                break 'outer;
            }
            nodes.push(NodeSpec {
                id: filler,
                dv_limit: 0.05,
                is_prosumer: false,
            });
            edges.push(EdgeSpec {
                from: t,
                to: filler,
                r: 0.008,
                x: 0.012,
                s_limit: 2.0,
            });
            filler += 1;
        }
    }
    assert_eq!(nodes.len(), 43, "feeder fixture is a 43-node grid");
    let grid_file = GridFile {
        pcc: 0,
        v_ref: 1.0,
        nodes,
        edges,
    };
    write_grid(&dir.join("grid.json"), &grid_file)?;

    // Residential profiles with rooftop PV on three of the five prosumers.
    let mut realized: BTreeMap<NodeId, Series> = BTreeMap::new();
    for m in 1..=5u32 {
        let phase = m as f64;
        let pv_scale = if m % 2 == 1 { 0.9 } else { 0.0 };
        let series: Series = (0..24)
            .map(|t| {
                let tt = t as f64;
                let load = 0.45 + 0.25 * (2.0 * PI * (tt - 18.0 - phase) / 24.0).cos()
                    + 0.05 * (2.0 * PI * (tt * phase) / 24.0).sin();
                let pv = if (6..=18).contains(&t) {
                    pv_scale * (PI * (tt - 6.0) / 12.0).sin()
                } else {
                    0.0
                };
                Complex64::new(pv - load, 0.0)
            })
            .collect();
        realized.insert(m, series);
    }
    let base = ProsumptionSet::perfect(realized)?;
    let noised = apply_forecast_noise(
        &base,
        &NoiseSpec {
            sigma: 0.1,
            scale_bound: 0.0,
            shift_bound: 0,
            seed: 7,
        },
    )?;
    write_series(&dir.join("realized.csv"), noised.realizations())?;
    write_series(&dir.join("forecast.csv"), noised.forecasts())?;

    let built = lempart::grid::build_grid(
        &grid_file.nodes,
        &grid_file.edges,
        grid_file.pcc,
        grid_file.v_ref,
    )?;
    let voltage_penalty = voltage_penalty_from_curtailment(&built, 300.0);
    let flex: BTreeMap<NodeId, FlexSpec> = (1..=5)
        .map(|id| {
            (
                id,
                FlexSpec {
                    cost: FlexCost::Quadratic {
                        rate: 15.0,
                        quad: 5.0,
                    },
                    u_max: Some(2.0),
                    storage_neutral: false,
                },
            )
        })
        .collect();
    let costs = CostParams {
        step_hours: 1.0,
        flex,
        export_price: PriceProfile::Flat(60.0),
        export_price_reactive: PriceProfile::Flat(0.0),
        kappa: PriceProfile::Flat(20.0),
        overload_penalty: RateMap::flat(300.0),
        voltage_penalty,
        imbalance_penalty: 300.0,
        balancing_default: None,
        balancing_overrides: Vec::new(),
    };
    write_params(&dir.join("params.json"), &ParamsFile { costs, noise: None })?;
    write_config(dir, &RunConfig::bundle("externalities", 7))
}
