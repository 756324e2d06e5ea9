//! Self-exciting spatio-temporal point-process model of crime.
//!
//! The conditional intensity is
//!
//! ```text
//! λ(x, y, t) = μ(x, y)·ν(c(t)) + Σ_{t_k < t} g(x − x_k, y − y_k, t − t_k)
//! ```
//!
//! where μ is a planar background density, ν a weekly modulation over
//! circular time `c`, and g the triggering kernel. All three are kernel
//! density estimates fitted by stochastic declustering ([`declustering`]).
//! Fitted models are evaluated on a grid of cells per police shift
//! ([`forecast`]) and scored with hit rate, PAI and the Wilcoxon
//! signed-rank test ([`stats`]).
//!
//! Units: meters for space, hours for time.

pub mod declustering;
pub mod error;
pub mod events;
pub mod forecast;
pub mod kde;
pub mod seed;
pub mod simulator;
pub mod stats;
pub mod trigger_matrix;

pub use declustering::{
    background_fraction, decluster, BandwidthMode, Diagnostics, IterationRecord, TrainConfig,
    TrainedModel,
};
pub use error::{Error, Result};
pub use events::{
    inverse_project, parse_catalog, project, CatalogParams, CrimeEvent, EventCatalog, GeoPoint,
    ShiftCalendar,
};
pub use forecast::{
    area_fraction, cell_expected_count, forecast_counts, forecast_slots, hit_rate, pai,
    rank_hotspots, rank_hotspots_in, top_k_per_region, Grid, GridForecast, HitRate,
    IntensityModel, PlainKde, Slot,
};
pub use kde::{BandwidthGrid, Kde1D, Kde2D, Kde3D};
pub use simulator::{branching_ratio, simulate, GroundTruth, SimulatedCatalog};
pub use stats::{compare_models, wilcoxon_signed_rank, Alternative, ComparisonRow, WilcoxonResult};
pub use trigger_matrix::{
    init_matrix, matrix_distance, sample_assignments, update_matrix, Assignments, TriggerDelta,
    TriggerMatrix, Truncation,
};

/// Length of the circular week in hours.
pub const WEEK_HOURS: f64 = 168.0;
