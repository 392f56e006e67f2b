//! Prosumption forecasts and realizations, plus the scenario generators
//! used by the noise sweep: multiplicative forecast noise and seeded
//! profile variants (per-step scaling and circular shifts).

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::NodeId;

/// One complex-valued time series (MW + j*MVar per step).
pub type Series = Vec<Complex64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("series for prosumer {0} has length {1}, expected horizon {2}")]
    HorizonMismatch(NodeId, usize, usize),
    #[error("forecast and realization cover different prosumer sets")]
    ProsumerSetMismatch,
    #[error("missing series for prosumer {0}")]
    MissingProsumer(NodeId),
    #[error("noise parameter out of range: {0}")]
    BadNoiseSpec(String),
}

/// Forecast and realization series for every prosumer over a shared horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsumptionSet {
    horizon: usize,
    forecast: BTreeMap<NodeId, Series>,
    realized: BTreeMap<NodeId, Series>,
}

impl ProsumptionSet {
    pub fn new(
        forecast: BTreeMap<NodeId, Series>,
        realized: BTreeMap<NodeId, Series>,
    ) -> Result<Self, SeriesError> {
        let ids: Vec<NodeId> = forecast.keys().copied().collect();
        let ids_r: Vec<NodeId> = realized.keys().copied().collect();
        if ids != ids_r {
            return Err(SeriesError::ProsumerSetMismatch);
        }
        let horizon = forecast.values().next().map_or(0, |s| s.len());
        for (&id, s) in forecast.iter().chain(realized.iter()) {
            if s.len() != horizon {
                return Err(SeriesError::HorizonMismatch(id, s.len(), horizon));
            }
        }
        Ok(Self {
            horizon,
            forecast,
            realized,
        })
    }

    /// Builds a set whose forecasts equal the realizations (perfect foresight).
    pub fn perfect(realized: BTreeMap<NodeId, Series>) -> Result<Self, SeriesError> {
        Self::new(realized.clone(), realized)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prosumer_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.forecast.keys().copied()
    }

    pub fn forecast(&self, id: NodeId) -> Option<&Series> {
        self.forecast.get(&id)
    }

    pub fn realized(&self, id: NodeId) -> Option<&Series> {
        self.realized.get(&id)
    }

    pub fn forecasts(&self) -> &BTreeMap<NodeId, Series> {
        &self.forecast
    }

    pub fn realizations(&self) -> &BTreeMap<NodeId, Series> {
        &self.realized
    }

    /// Realization minus forecast for one prosumer.
    pub fn deviation(&self, id: NodeId) -> Option<Series> {
        let f = self.forecast.get(&id)?;
        let r = self.realized.get(&id)?;
        Some(r.iter().zip(f).map(|(r, f)| r - f).collect())
    }

    /// Restriction to a subset of prosumers.
    pub fn restrict(&self, ids: &[NodeId]) -> Result<ProsumptionSet, SeriesError> {
        let mut forecast = BTreeMap::new();
        let mut realized = BTreeMap::new();
        for &id in ids {
            let f = self
                .forecast
                .get(&id)
                .ok_or(SeriesError::MissingProsumer(id))?;
            let r = self
                .realized
                .get(&id)
                .ok_or(SeriesError::MissingProsumer(id))?;
            forecast.insert(id, f.clone());
            realized.insert(id, r.clone());
        }
        Ok(ProsumptionSet {
            horizon: self.horizon,
            forecast,
            realized,
        })
    }
}

/// Parameters for forecast-noise and profile-variant generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Multiplicative forecast-noise level (fraction).
    pub sigma: f64,
    /// Per-variant per-step scaling bound (fraction).
    #[serde(default = "default_scale_bound")]
    pub scale_bound: f64,
    /// Per-variant circular shift bound (steps).
    #[serde(default = "default_shift_bound")]
    pub shift_bound: usize,
    pub seed: u64,
}

fn default_scale_bound() -> f64 {
    0.25
}

fn default_shift_bound() -> usize {
    1
}

impl NoiseSpec {
    pub fn validate(&self, horizon: usize) -> Result<(), SeriesError> {
        if self.sigma < 0.0 {
            return Err(SeriesError::BadNoiseSpec(format!("sigma {} < 0", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.scale_bound) {
            return Err(SeriesError::BadNoiseSpec(format!(
                "scale bound {} outside [0,1)",
                self.scale_bound
            )));
        }
        if horizon > 0 && self.shift_bound >= horizon {
            return Err(SeriesError::BadNoiseSpec(format!(
                "shift bound {} >= horizon {}",
                self.shift_bound, horizon
            )));
        }
        Ok(())
    }
}

/// Derives forecasts from realizations by multiplicative noise:
/// `forecast = realized * (1 + e)` with `e` uniform in `[-sigma, sigma]`,
/// drawn independently per prosumer and step. Realizations are copied
/// unchanged. Deterministic for a fixed seed.
pub fn apply_forecast_noise(
    real: &ProsumptionSet,
    spec: &NoiseSpec,
) -> Result<ProsumptionSet, SeriesError> {
    spec.validate(real.horizon())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut forecast = BTreeMap::new();
    for (&id, series) in real.realizations() {
        let noisy: Series = series
            .iter()
            .map(|&v| {
                let eps: f64 = if spec.sigma > 0.0 {
                    rng.gen_range(-spec.sigma..=spec.sigma)
                } else {
                    0.0
                };
                v * (1.0 + eps)
            })
            .collect();
        forecast.insert(id, noisy);
    }
    ProsumptionSet::new(forecast, real.realizations().clone())
}

/// Generates seeded profile variants of the base realizations. Each variant
/// applies, per prosumer, an integer circular shift within the shift bound
/// and an independent per-step scaling within the scale bound. Variants are
/// returned with perfect forecasts; noise them separately as needed.
pub fn generate_profile_variants(
    base: &ProsumptionSet,
    spec: &NoiseSpec,
    count: usize,
) -> Result<Vec<ProsumptionSet>, SeriesError> {
    spec.validate(base.horizon())?;
    let t = base.horizon();
    let mut out = Vec::with_capacity(count);
    for v in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(variant_seed(spec.seed, v as u64));
        let mut realized = BTreeMap::new();
        for (&id, series) in base.realizations() {
            let shift: i64 = if spec.shift_bound > 0 {
                rng.gen_range(-(spec.shift_bound as i64)..=(spec.shift_bound as i64))
            } else {
                0
            };
            let mut variant = Series::with_capacity(t);
            for step in 0..t {
                let src = (step as i64 - shift).rem_euclid(t as i64) as usize;
                let scale: f64 = if spec.scale_bound > 0.0 {
                    1.0 + rng.gen_range(-spec.scale_bound..=spec.scale_bound)
                } else {
                    1.0
                };
                variant.push(series[src] * scale);
            }
            realized.insert(id, variant);
        }
        out.push(ProsumptionSet::perfect(realized)?);
    }
    Ok(out)
}

fn variant_seed(seed: u64, variant: u64) -> u64 {
    // SplitMix64 step keyed by the variant index.
    let mut z = seed ^ variant.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ProsumptionSet {
        let mut realized = BTreeMap::new();
        realized.insert(1, vec![Complex64::new(1.0, 0.0), Complex64::new(-2.0, 0.5)]);
        realized.insert(2, vec![Complex64::new(0.5, 0.0), Complex64::new(0.0, 0.0)]);
        ProsumptionSet::perfect(realized).unwrap()
    }

    #[test]
    fn zero_sigma_gives_exact_forecasts() {
        let set = base();
        let spec = NoiseSpec {
            sigma: 0.0,
            scale_bound: 0.0,
            shift_bound: 0,
            seed: 1,
        };
        let noisy = apply_forecast_noise(&set, &spec).unwrap();
        assert_eq!(noisy.forecasts(), set.realizations());
    }

    #[test]
    fn noise_is_bounded_and_deterministic() {
        let set = base();
        let spec = NoiseSpec {
            sigma: 0.2,
            scale_bound: 0.0,
            shift_bound: 0,
            seed: 42,
        };
        let a = apply_forecast_noise(&set, &spec).unwrap();
        let b = apply_forecast_noise(&set, &spec).unwrap();
        assert_eq!(a, b);
        for id in set.prosumer_ids() {
            let f = a.forecast(id).unwrap();
            let r = set.realized(id).unwrap();
            for (fv, rv) in f.iter().zip(r) {
                let denom = rv.norm();
                if denom > 0.0 {
                    assert!((fv - rv).norm() / denom <= 0.2 + 1e-12);
                } else {
                    assert_eq!(fv, rv);
                }
            }
        }
        assert_eq!(a.realizations(), set.realizations());
    }

    #[test]
    fn zero_bounds_reproduce_base() {
        let set = base();
        let spec = NoiseSpec {
            sigma: 0.0,
            scale_bound: 0.0,
            shift_bound: 0,
            seed: 7,
        };
        let variants = generate_profile_variants(&set, &spec, 3).unwrap();
        for v in variants {
            assert_eq!(v.realizations(), set.realizations());
        }
    }

    #[test]
    fn shifted_variant_aligns_under_cross_correlation() {
        // Brute-force alignment oracle: the best circular alignment of a
        // shift-only variant against the base recovers the applied shift.
        let mut realized = BTreeMap::new();
        realized.insert(
            1,
            (0..8)
                .map(|i| Complex64::new((i as f64).sin() + 2.0, 0.0))
                .collect::<Series>(),
        );
        let set = ProsumptionSet::perfect(realized).unwrap();
        let spec = NoiseSpec {
            sigma: 0.0,
            scale_bound: 0.0,
            shift_bound: 1,
            seed: 3,
        };
        for v in generate_profile_variants(&set, &spec, 16).unwrap() {
            let base_s = set.realized(1).unwrap();
            let var_s = v.realized(1).unwrap();
            let mut best = (f64::INFINITY, 0i64);
            for cand in -1i64..=1 {
                let err: f64 = (0..8)
                    .map(|step| {
                        let src = (step as i64 - cand).rem_euclid(8) as usize;
                        (var_s[step] - base_s[src]).norm()
                    })
                    .sum();
                if err < best.0 {
                    best = (err, cand);
                }
            }
            assert!(best.0 < 1e-12, "variant is a pure circular shift");
            assert!(best.1.abs() <= 1);
        }
    }

    #[test]
    fn variants_are_distinct_and_seeded() {
        let set = base();
        let spec = NoiseSpec {
            sigma: 0.0,
            scale_bound: 0.25,
            shift_bound: 1,
            seed: 11,
        };
        let a = generate_profile_variants(&set, &spec, 5).unwrap();
        let b = generate_profile_variants(&set, &spec, 5).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                assert_ne!(a[i], a[j], "seeded variants should differ");
            }
        }
    }

    #[test]
    fn scale_bound_is_respected() {
        let set = base();
        let spec = NoiseSpec {
            sigma: 0.0,
            scale_bound: 0.25,
            shift_bound: 0,
            seed: 5,
        };
        for v in generate_profile_variants(&set, &spec, 20).unwrap() {
            for id in set.prosumer_ids() {
                let b = set.realized(id).unwrap();
                let w = v.realized(id).unwrap();
                for (bv, wv) in b.iter().zip(w) {
                    if bv.norm() > 0.0 {
                        let ratio = wv.norm() / bv.norm();
                        assert!((0.75 - 1e-12..=1.25 + 1e-12).contains(&ratio));
                    }
                }
            }
        }
    }
}
