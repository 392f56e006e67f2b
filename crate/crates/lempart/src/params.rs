//! Tariff, penalty and flexibility parameter sets.
//!
//! Prices are CHF per MWh unless noted; voltage penalties are CHF per
//! per-unit-squared deviation per step. Per-step energy is `MW * step_hours`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("negative rate for {0}: {1}")]
    NegativeRate(&'static str, f64),
    #[error("flexibility cost for prosumer {0} is not convex nondecreasing: {1}")]
    NonConvexCost(NodeId, String),
    #[error("missing flexibility spec for prosumer {0}")]
    MissingFlexSpec(NodeId),
    #[error("non-positive step duration {0}")]
    BadStepHours(f64),
}

/// Supported convex flexibility cost families, as functions of per-step
/// dispatched energy magnitude `e = |u| * step_hours` (MWh).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlexCost {
    /// `rate * e`
    Linear { rate: f64 },
    /// `rate * e + quad * e^2`
    Quadratic { rate: f64, quad: f64 },
    /// Convex piecewise-linear in `e`, given as breakpoints `(e_k, cost_k)`
    /// starting at `(0, 0)`; the last segment extends to infinity.
    PiecewiseLinear { breakpoints: Vec<(f64, f64)> },
}

impl FlexCost {
    /// Cost of one step's dispatched energy magnitude.
    pub fn eval(&self, energy: f64) -> f64 {
        match self {
            FlexCost::Linear { rate } => rate * energy,
            FlexCost::Quadratic { rate, quad } => rate * energy + quad * energy * energy,
            FlexCost::PiecewiseLinear { breakpoints } => {
                let segs = pwl_segments(breakpoints);
                segs.iter()
                    .map(|(a, b)| a * energy + b)
                    .fold(0.0, f64::max)
            }
        }
    }

    /// Max-of-affine representation `(slope, intercept)` for the epigraph.
    pub fn segments(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            FlexCost::PiecewiseLinear { breakpoints } => Some(pwl_segments(breakpoints)),
            _ => None,
        }
    }

    pub fn linear_rate(&self) -> f64 {
        match self {
            FlexCost::Linear { rate } | FlexCost::Quadratic { rate, .. } => *rate,
            FlexCost::PiecewiseLinear { .. } => 0.0,
        }
    }

    pub fn quad_rate(&self) -> f64 {
        match self {
            FlexCost::Quadratic { quad, .. } => *quad,
            _ => 0.0,
        }
    }

    fn validate(&self, id: NodeId) -> Result<(), ParamError> {
        let bad = |msg: String| Err(ParamError::NonConvexCost(id, msg));
        match self {
            FlexCost::Linear { rate } => {
                if *rate < 0.0 {
                    return bad(format!("negative rate {rate}"));
                }
            }
            FlexCost::Quadratic { rate, quad } => {
                if *rate < 0.0 || *quad < 0.0 {
                    return bad(format!("negative coefficients ({rate}, {quad})"));
                }
            }
            FlexCost::PiecewiseLinear { breakpoints } => {
                if breakpoints.len() < 2 {
                    return bad("needs at least two breakpoints".into());
                }
                if breakpoints[0] != (0.0, 0.0) {
                    return bad("first breakpoint must be (0, 0)".into());
                }
                let mut prev_slope = 0.0;
                for w in breakpoints.windows(2) {
                    let (x0, y0) = w[0];
                    let (x1, y1) = w[1];
                    if x1 <= x0 {
                        return bad("breakpoint abscissae must increase".into());
                    }
                    let slope = (y1 - y0) / (x1 - x0);
                    if slope < prev_slope - 1e-12 {
                        return bad("slopes must be nondecreasing".into());
                    }
                    if slope < 0.0 {
                        return bad("cost must be nondecreasing".into());
                    }
                    prev_slope = slope;
                }
            }
        }
        Ok(())
    }
}

fn pwl_segments(breakpoints: &[(f64, f64)]) -> Vec<(f64, f64)> {
    breakpoints
        .windows(2)
        .map(|w| {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            let slope = (y1 - y0) / (x1 - x0);
            (slope, y0 - slope * x0)
        })
        .collect()
}

/// Flexibility resource at one prosumer: cost family plus feasible set
/// (per-step magnitude box, optionally energy-neutral over the horizon).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexSpec {
    pub cost: FlexCost,
    /// Per-step complex-magnitude bound (MW); `None` leaves it unbounded.
    #[serde(default)]
    pub u_max: Option<f64>,
    /// Ideal-storage constraint: active-power dispatch sums to zero.
    #[serde(default)]
    pub storage_neutral: bool,
}

/// A per-step price series; a scalar stands for a flat profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceProfile {
    Flat(f64),
    PerStep(Vec<f64>),
}

impl PriceProfile {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            PriceProfile::Flat(v) => *v,
            PriceProfile::PerStep(v) => v.get(t).copied().unwrap_or(0.0),
        }
    }

    fn min_value(&self) -> f64 {
        match self {
            PriceProfile::Flat(v) => *v,
            PriceProfile::PerStep(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Per-id penalty rates with a shared default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMap {
    pub default: f64,
    #[serde(default)]
    pub overrides: BTreeMap<NodeId, f64>,
}

impl RateMap {
    pub fn flat(default: f64) -> Self {
        Self {
            default,
            overrides: BTreeMap::new(),
        }
    }

    pub fn at(&self, id: NodeId) -> f64 {
        self.overrides.get(&id).copied().unwrap_or(self.default)
    }

    fn min_value(&self) -> f64 {
        self.overrides
            .values()
            .copied()
            .fold(self.default, f64::min)
    }
}

/// Complete tariff/penalty parameter set for two-stage cost evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Duration of one step in hours, so `MW * step_hours = MWh`.
    #[serde(default = "default_step_hours")]
    pub step_hours: f64,
    pub flex: BTreeMap<NodeId, FlexSpec>,
    /// Transmission export price at the grid PCC (active part; CHF/MWh).
    #[serde(default)]
    pub export_price: PriceProfile,
    /// Reactive-power export price (CHF/MVarh); usually zero.
    #[serde(default)]
    pub export_price_reactive: PriceProfile,
    /// LEM boundary-exchange tax rate per step (CHF/MWh).
    pub kappa: PriceProfile,
    /// Line-overload penalty per edge, keyed by the edge's child node.
    pub overload_penalty: RateMap,
    /// Voltage-deviation penalty per node (CHF per pu^2 per step).
    pub voltage_penalty: RateMap,
    /// Grid imbalance penalty (CHF/MWh).
    pub imbalance_penalty: f64,
    /// Per-coalition balancing price for the decoupled model; falls back to
    /// the grid imbalance penalty when absent.
    #[serde(default)]
    pub balancing_default: Option<f64>,
    /// Balancing-price overrides keyed by sorted coalition member ids.
    #[serde(default)]
    pub balancing_overrides: Vec<BalancingOverride>,
}

fn default_step_hours() -> f64 {
    1.0
}

impl Default for PriceProfile {
    fn default() -> Self {
        PriceProfile::Flat(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingOverride {
    pub members: Vec<NodeId>,
    pub price: f64,
}

impl CostParams {
    pub fn validate(&self, prosumers: &[NodeId]) -> Result<(), ParamError> {
        if self.step_hours <= 0.0 {
            return Err(ParamError::BadStepHours(self.step_hours));
        }
        for &id in prosumers {
            let spec = self.flex.get(&id).ok_or(ParamError::MissingFlexSpec(id))?;
            spec.cost.validate(id)?;
        }
        if self.kappa.min_value() < 0.0 {
            return Err(ParamError::NegativeRate("kappa", self.kappa.min_value()));
        }
        for (what, v) in [
            ("overload penalty", self.overload_penalty.min_value()),
            ("voltage penalty", self.voltage_penalty.min_value()),
            ("imbalance penalty", self.imbalance_penalty),
        ] {
            if v < 0.0 {
                return Err(ParamError::NegativeRate(what, v));
            }
        }
        if let Some(b) = self.balancing_default {
            if b < 0.0 {
                return Err(ParamError::NegativeRate("balancing price", b));
            }
        }
        for o in &self.balancing_overrides {
            if o.price < 0.0 {
                return Err(ParamError::NegativeRate("balancing override", o.price));
            }
        }
        Ok(())
    }

    pub fn flex_spec(&self, id: NodeId) -> Option<&FlexSpec> {
        self.flex.get(&id)
    }

    pub fn export_at(&self, t: usize) -> Complex64 {
        Complex64::new(self.export_price.at(t), self.export_price_reactive.at(t))
    }

    /// Balancing price for a coalition identified by its sorted member ids.
    pub fn balancing_price(&self, members: &[NodeId]) -> f64 {
        for o in &self.balancing_overrides {
            let mut sorted = o.members.clone();
            sorted.sort_unstable();
            if sorted == members {
                return o.price;
            }
        }
        self.balancing_default.unwrap_or(self.imbalance_penalty)
    }

    /// Per-step flexibility cost for prosumer `id` dispatching `u` (MW).
    pub fn flex_cost_step(&self, id: NodeId, u: Complex64) -> f64 {
        let spec = &self.flex[&id];
        spec.cost.eval(u.norm() * self.step_hours)
    }

    /// Total flexibility cost of a dispatch series.
    pub fn flex_cost(&self, id: NodeId, u: &[Complex64]) -> f64 {
        u.iter().map(|&v| self.flex_cost_step(id, v)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_cost_evaluates() {
        let c = FlexCost::Quadratic {
            rate: 19.0,
            quad: 2.0,
        };
        assert!((c.eval(1.0) - 21.0).abs() < 1e-12);
        assert!((c.eval(0.5) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn pwl_cost_is_max_of_affines() {
        let c = FlexCost::PiecewiseLinear {
            breakpoints: vec![(0.0, 0.0), (1.0, 10.0), (2.0, 30.0)],
        };
        assert!((c.eval(0.5) - 5.0).abs() < 1e-12);
        assert!((c.eval(1.5) - 20.0).abs() < 1e-12);
        // Last segment extends beyond the final breakpoint.
        assert!((c.eval(3.0) - 50.0).abs() < 1e-12);
        c.validate(1).unwrap();
    }

    #[test]
    fn decreasing_slopes_are_rejected() {
        let c = FlexCost::PiecewiseLinear {
            breakpoints: vec![(0.0, 0.0), (1.0, 10.0), (2.0, 12.0)],
        };
        assert!(c.validate(1).is_err());
    }

    #[test]
    fn balancing_override_lookup() {
        let params = CostParams {
            step_hours: 1.0,
            flex: BTreeMap::new(),
            export_price: PriceProfile::Flat(0.0),
            export_price_reactive: PriceProfile::Flat(0.0),
            kappa: PriceProfile::Flat(100.0),
            overload_penalty: RateMap::flat(200.0),
            voltage_penalty: RateMap::flat(0.0),
            imbalance_penalty: 200.0,
            balancing_default: None,
            balancing_overrides: vec![BalancingOverride {
                members: vec![2, 1],
                price: 92.5,
            }],
        };
        assert_eq!(params.balancing_price(&[1, 2]), 92.5);
        assert_eq!(params.balancing_price(&[1]), 200.0);
    }
}
