//! Two-stage operating-cost evaluation of radial distribution-grid
//! partitions into local energy markets, coalition costs, core-based
//! stability, and optimal stable partition search.

pub mod conic;
pub mod costs;
pub mod dispatch;
pub mod grid;
pub mod params;
pub mod powerflow;
pub mod stability;
pub mod sweep;
pub mod timeseries;
