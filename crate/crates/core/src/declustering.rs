//! Stochastic declustering: initialize the parent matrix, then repeat
//! sample → fit → update until consecutive matrices agree.

use serde::{Deserialize, Serialize};

use crate::events::{CrimeEvent, EventCatalog};
use crate::kde::{BandwidthGrid, Kde1D, Kde2D, Kde3D};
use crate::seed;
use crate::trigger_matrix::{
    matrix_distance, sample_assignments, CandidatePairs, TriggerMatrix, Truncation,
};
use crate::{Error, Result};

/// Smallest catalog accepted for training.
pub const MIN_TRAINING_EVENTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    /// Re-select every bandwidth by LOO likelihood at each iteration.
    Variable,
    /// Keep the bandwidths selected at the first iteration.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial temporal decay, per hour.
    pub alpha: f64,
    /// Initial spatial scale, meters.
    pub beta: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub master_seed: u64,
    pub spatial_bandwidths: BandwidthGrid,
    pub temporal_bandwidths: BandwidthGrid,
    pub truncation: Truncation,
    pub bandwidth_mode: BandwidthMode,
    /// Length of the training window; defaults to the catalog's time span.
    pub time_horizon_hours: Option<f64>,
    /// Return the last iteration's model instead of an error when
    /// `max_iterations` pass without convergence.
    #[serde(default)]
    pub allow_nonconvergence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            beta: 100.0,
            epsilon: 0.01,
            max_iterations: 50,
            master_seed: 0,
            spatial_bandwidths: BandwidthGrid::default_spatial(),
            temporal_bandwidths: BandwidthGrid::default_temporal(),
            truncation: Truncation::default(),
            bandwidth_mode: BandwidthMode::Variable,
            time_horizon_hours: None,
            allow_nonconvergence: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("epsilon", self.epsilon),
            ("truncation horizon", self.truncation.horizon_hours),
            ("truncation radius", self.truncation.radius_m),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be positive".into()));
        }
        if let Some(h) = self.time_horizon_hours {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidParameter(format!("time horizon must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Frobenius distance to the previous matrix.
    pub distance: f64,
    /// Mean of the last (up to) three distances.
    pub smoothed_distance: f64,
    /// Mean diagonal of the updated matrix.
    pub background_fraction: f64,
    pub n_background: usize,
    pub n_triggered: usize,
    pub mu_bandwidth: f64,
    pub nu_bandwidth: f64,
    pub g_bandwidth_space: f64,
    pub g_bandwidth_time: f64,
    /// g was set to zero for lack of triggered samples.
    pub g_zero: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: Vec<IterationRecord>,
    /// False when the model comes from the last iteration without meeting
    /// the convergence threshold.
    pub converged: bool,
}

impl Diagnostics {
    pub fn iteration_count(&self) -> usize {
        self.iterations.len()
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.distance)
    }

    pub fn background_fraction(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.background_fraction)
    }

    pub fn distance_trace(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.distance).collect()
    }
}

/// Fitted intensity `λ = μ·ν + Σ g`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub mu: Kde2D,
    pub nu: Kde1D,
    pub g: Kde3D,
    pub history: EventCatalog,
    /// μ integrates to the background count over this many hours.
    pub time_horizon_hours: f64,
    pub truncation: Truncation,
    pub diagnostics: Diagnostics,
}

impl TrainedModel {
    pub fn time_horizon_weeks(&self) -> f64 {
        self.time_horizon_hours / crate::WEEK_HOURS
    }

    /// Background rate μ(x, y)·ν(c), events per m² per hour.
    pub fn background_rate(&self, x: f64, y: f64, c: f64) -> f64 {
        self.mu.density(x, y) / self.time_horizon_hours * self.nu.density(c)
    }

    /// Σ g over `history` events strictly before `t`, within the truncation.
    pub fn triggering_rate(&self, history: &[CrimeEvent], x: f64, y: f64, t: f64) -> f64 {
        if self.g.is_zero() {
            return 0.0;
        }
        let hi = history.partition_point(|e| e.t < t);
        let lo = history[..hi].partition_point(|e| t - e.t > self.truncation.horizon_hours);
        history[lo..hi]
            .iter()
            .filter_map(|e| {
                let (dx, dy, dt) = (x - e.x, y - e.y, t - e.t);
                self.truncation
                    .admits(dx, dy, dt)
                    .then(|| self.g.density(dx, dy, dt))
            })
            .sum()
    }

    /// λ(x, y, t) given an explicit history (sorted by time).
    pub fn intensity_with_history(&self, history: &[CrimeEvent], x: f64, y: f64, t: f64) -> f64 {
        let c = self.history.circular_time(t);
        self.background_rate(x, y, c) + self.triggering_rate(history, x, y, t)
    }

    /// λ(x, y, t) over the training history.
    pub fn intensity_at(&self, x: f64, y: f64, t: f64) -> f64 {
        self.intensity_with_history(self.history.events(), x, y, t)
    }

    /// Total mass of g.
    pub fn branching_ratio(&self) -> f64 {
        self.g.mass()
    }
}

/// Mean of the diagonal: the expected background share.
pub fn background_fraction(p: &TriggerMatrix) -> f64 {
    if p.n() == 0 {
        return 0.0;
    }
    p.diagonal().iter().sum::<f64>() / p.n() as f64
}

struct FrozenBandwidths {
    mu: f64,
    nu: f64,
    g: Option<(f64, f64)>,
}

struct Components {
    mu: Kde2D,
    nu: Kde1D,
    g: Kde3D,
}

fn fit_components(
    background: &[CrimeEvent],
    triggered: &[crate::TriggerDelta],
    n_total: usize,
    config: &TrainConfig,
    frozen: &mut Option<FrozenBandwidths>,
) -> Result<Components> {
    let points: Vec<[f64; 2]> = background.iter().map(|e| [e.x, e.y]).collect();
    let circular: Vec<f64> = background.iter().map(|e| e.c).collect();
    let (mu, nu) = match frozen {
        Some(f) => (
            Kde2D::fit_with_bandwidth(&points, f.mu)?,
            Kde1D::fit_with_bandwidth(&circular, f.nu)?,
        ),
        None => (
            Kde2D::fit(&points, &config.spatial_bandwidths)?,
            Kde1D::fit(&circular, &config.temporal_bandwidths)?,
        ),
    };
    let fixed_g = frozen.as_ref().and_then(|f| f.g);
    let g = if triggered.len() < 2 {
        let (hs, ht) = fixed_g.unwrap_or((f64::NAN, f64::NAN));
        Kde3D::zero(
            if hs.is_nan() { config.spatial_bandwidths.values()[0] } else { hs },
            if ht.is_nan() { config.temporal_bandwidths.values()[0] } else { ht },
        )
    } else {
        match fixed_g {
            Some((hs, ht)) => Kde3D::fit_with_bandwidths(triggered, hs, ht, n_total)?,
            None => Kde3D::fit(
                triggered,
                &config.spatial_bandwidths,
                &config.temporal_bandwidths,
                n_total,
            )?,
        }
    };
    if config.bandwidth_mode == BandwidthMode::Fixed {
        let f = frozen.get_or_insert(FrozenBandwidths {
            mu: mu.bandwidth(),
            nu: nu.bandwidth(),
            g: None,
        });
        if f.g.is_none() && !g.is_zero() {
            f.g = Some((g.bandwidth_space(), g.bandwidth_time()));
        }
    }
    Ok(Components { mu, nu, g })
}

pub fn decluster(catalog: &EventCatalog, config: &TrainConfig) -> Result<TrainedModel> {
    decluster_with_progress(catalog, config, |_| {})
}

/// Runs declustering, reporting each finished iteration to `progress`.
pub fn decluster_with_progress<F>(
    catalog: &EventCatalog,
    config: &TrainConfig,
    mut progress: F,
) -> Result<TrainedModel>
where
    F: FnMut(&IterationRecord),
{
    config.validate()?;
    let events = catalog.events();
    if events.len() < MIN_TRAINING_EVENTS {
        return Err(Error::CatalogTooSmall {
            found: events.len(),
            required: MIN_TRAINING_EVENTS,
        });
    }
    let horizon = match config.time_horizon_hours {
        Some(h) => h,
        None => events[events.len() - 1].t - events[0].t,
    };
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter("training events span no time".into()));
    }

    let pairs = CandidatePairs::new(events, &config.truncation)?;
    let mut previous = pairs.init(config.alpha, config.beta)?;
    let mut frozen = None;
    let mut diagnostics = Diagnostics::default();

    for iteration in 1..=config.max_iterations {
        let with_context = |source: Error| Error::Iteration {
            iteration,
            source: Box::new(source),
        };
        let mut rng = seed::rng(config.master_seed, iteration as u64);
        let draw = sample_assignments(&previous, events, &mut rng).map_err(with_context)?;
        debug_assert_eq!(draw.background.len() + draw.triggered.len(), events.len());
        let fits = fit_components(
            &draw.background,
            &draw.triggered,
            events.len(),
            config,
            &mut frozen,
        )
        .map_err(with_context)?;
        let current = pairs
            .update(events, &fits.mu, &fits.nu, &fits.g, horizon)
            .map_err(with_context)?;
        let distance = matrix_distance(&current, &previous)?;

        let trace = diagnostics.distance_trace();
        let recent: Vec<f64> = trace.iter().rev().take(2).copied().chain([distance]).collect();
        let record = IterationRecord {
            iteration,
            distance,
            smoothed_distance: recent.iter().sum::<f64>() / recent.len() as f64,
            background_fraction: background_fraction(&current),
            n_background: draw.background.len(),
            n_triggered: draw.triggered.len(),
            mu_bandwidth: fits.mu.bandwidth(),
            nu_bandwidth: fits.nu.bandwidth(),
            g_bandwidth_space: fits.g.bandwidth_space(),
            g_bandwidth_time: fits.g.bandwidth_time(),
            g_zero: fits.g.is_zero(),
        };
        progress(&record);
        diagnostics.iterations.push(record);

        let converged = distance < config.epsilon;
        if converged || (iteration == config.max_iterations && config.allow_nonconvergence) {
            diagnostics.converged = converged;
            return Ok(TrainedModel {
                mu: fits.mu,
                nu: fits.nu,
                g: fits.g,
                history: catalog.clone(),
                time_horizon_hours: horizon,
                truncation: config.truncation,
                diagnostics,
            });
        }
        previous = current;
    }

    let last = diagnostics.iterations.last().expect("at least one iteration");
    Err(Error::NonConvergence {
        iterations: config.max_iterations,
        last: last.distance,
        smoothed: last.smoothed_distance,
        trace: diagnostics.distance_trace(),
    })
}
