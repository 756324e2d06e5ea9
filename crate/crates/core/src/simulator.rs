//! Synthetic catalogs with known branching structure.
//!
//! Background events come from an inhomogeneous Poisson process with rate
//! `μ(x, y)·ν(c)`, sampled by thinning in time against the profile maximum;
//! every event then spawns `Poisson(θ)` children with exponential delays and
//! Gaussian displacements.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::declustering::TrainedModel;
use crate::events::{circular_time, CrimeEvent, EventCatalog, GeoPoint};
use crate::{Error, Result, WEEK_HOURS};

/// Planar Gaussian bump of the background rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundComponent {
    /// Events per hour contributed by this component (before clipping).
    pub rate: f64,
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub components: Vec<BackgroundComponent>,
    /// Piecewise-constant weekly modulation, equal-width bins over 168 h.
    pub weekly_profile: Vec<f64>,
    /// Expected direct offspring per event.
    pub branching_ratio: f64,
    pub trigger_sigma: f64,
    /// Mean parent-to-child delay, hours.
    pub trigger_decay: f64,
    /// `[x_min, y_min, x_max, y_max]`, meters.
    pub bbox: [f64; 4],
    pub horizon_hours: f64,
    /// Position of `t = 0` within the shift week.
    pub week_offset: f64,
}

impl Default for GroundTruth {
    /// Five hotspots over a 3 km square, 14 weeks, θ = 0.3; about 2 000
    /// events.
    fn default() -> Self {
        let c = |rate, x, y, sigma| BackgroundComponent { rate, x, y, sigma };
        let weekday = [0.6, 1.0, 1.4];
        let mut profile = Vec::with_capacity(21);
        for day in 0..7 {
            let boost = if day >= 5 { 1.3 } else { 1.0 };
            profile.extend(weekday.iter().map(|v| v * boost));
        }
        Self {
            components: vec![
                c(0.15, 800.0, 900.0, 120.0),
                c(0.12, 2200.0, 700.0, 150.0),
                c(0.10, 1500.0, 2100.0, 100.0),
                c(0.08, 600.0, 2300.0, 180.0),
                c(0.15, 1500.0, 1500.0, 900.0),
            ],
            weekly_profile: profile,
            branching_ratio: 0.3,
            trigger_sigma: 60.0,
            trigger_decay: 24.0,
            bbox: [0.0, 0.0, 3000.0, 3000.0],
            horizon_hours: 14.0 * WEEK_HOURS,
            week_offset: 0.0,
        }
    }
}

impl GroundTruth {
    /// Broad background with tight, short-lived triggering (25 m, 8 h);
    /// about 2 000 events over 14 weeks, θ = 0.3.
    pub fn diffuse() -> Self {
        let c = |rate, x, y, sigma| BackgroundComponent { rate, x, y, sigma };
        Self {
            components: vec![
                c(0.204, 800.0, 900.0, 360.0),
                c(0.163, 2200.0, 700.0, 450.0),
                c(0.136, 1500.0, 2100.0, 300.0),
                c(0.109, 600.0, 2300.0, 540.0),
                c(0.204, 1500.0, 1500.0, 2700.0),
            ],
            trigger_sigma: 25.0,
            trigger_decay: 8.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if !(0.0..1.0).contains(&self.branching_ratio) {
            return bad("branching ratio must lie in [0, 1)");
        }
        if !(self.trigger_sigma > 0.0 && self.trigger_decay > 0.0 && self.horizon_hours > 0.0) {
            return bad("trigger scales and horizon must be positive");
        }
        if self.components.is_empty()
            || self
                .components
                .iter()
                .any(|c| !(c.rate >= 0.0 && c.sigma > 0.0 && c.x.is_finite() && c.y.is_finite()))
        {
            return bad("background needs components with nonnegative rate and positive sigma");
        }
        if self.weekly_profile.is_empty()
            || self.weekly_profile.iter().any(|v| !(*v >= 0.0 && v.is_finite()))
            || self.weekly_profile.iter().sum::<f64>() <= 0.0
        {
            return bad("weekly profile must be nonnegative and not all zero");
        }
        let [x0, y0, x1, y1] = self.bbox;
        if !(x1 > x0 && y1 > y0) {
            return bad("bbox must have positive extent");
        }
        Ok(())
    }

    /// Weekly modulation at circular time `c`, mean 1.
    pub fn profile_at(&self, c: f64) -> f64 {
        let bins = self.weekly_profile.len();
        let mean = self.weekly_profile.iter().sum::<f64>() / bins as f64;
        let k = ((c.rem_euclid(WEEK_HOURS) / WEEK_HOURS) * bins as f64) as usize;
        self.weekly_profile[k.min(bins - 1)] / mean
    }

    pub fn background_events_per_hour(&self) -> f64 {
        self.components.iter().map(|c| c.rate).sum()
    }

    /// Expected catalog size ignoring boundary losses.
    pub fn expected_count(&self) -> f64 {
        self.background_events_per_hour() * self.horizon_hours / (1.0 - self.branching_ratio)
    }

    fn inside(&self, x: f64, y: f64, t: f64) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        (x0..x1).contains(&x) && (y0..y1).contains(&y) && (0.0..self.horizon_hours).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCatalog {
    /// Sorted by time; ids `e000000`, `e000001`, … in that order.
    pub events: Vec<CrimeEvent>,
    /// Index of the true parent, `None` for background events.
    pub parents: Vec<Option<usize>>,
}

impl SimulatedCatalog {
    pub fn background_fraction(&self) -> f64 {
        let n = self.parents.len().max(1);
        self.parents.iter().filter(|p| p.is_none()).count() as f64 / n as f64
    }

    pub fn into_catalog(
        self,
        epoch: chrono::NaiveDateTime,
        origin: GeoPoint,
        week_offset: f64,
    ) -> Result<EventCatalog> {
        EventCatalog::new(self.events, epoch, origin, week_offset)
    }

    /// `id,parent_id` rows, empty parent for background events.
    pub fn write_parents_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "parent_id"])?;
        for (e, p) in self.events.iter().zip(&self.parents) {
            let parent = p.map(|i| self.events[i].id.clone()).unwrap_or_default();
            w.write_record([e.id.as_str(), parent.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Raw {
    x: f64,
    y: f64,
    t: f64,
    parent: Option<usize>,
}

pub fn simulate<R: Rng + ?Sized>(truth: &GroundTruth, rng: &mut R) -> Result<SimulatedCatalog> {
    truth.validate()?;
    let expected = truth.expected_count();
    if expected > 1e6 {
        return Err(Error::RunawaySimulation(expected));
    }

    let mut raw: Vec<Raw> = Vec::new();
    let total_rate = truth.background_events_per_hour();
    let peak = truth
        .weekly_profile
        .iter()
        .fold(0.0_f64, |m, v| m.max(*v))
        / (truth.weekly_profile.iter().sum::<f64>() / truth.weekly_profile.len() as f64);
    if total_rate > 0.0 {
        let gap = Exp::new(total_rate * peak).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += gap.sample(rng);
            if t >= truth.horizon_hours {
                break;
            }
            let c = circular_time(truth.week_offset, t);
            if rng.random::<f64>() * peak >= truth.profile_at(c) {
                continue;
            }
            let mut pick = rng.random::<f64>() * total_rate;
            let comp = truth
                .components
                .iter()
                .find(|c| {
                    pick -= c.rate;
                    pick < 0.0
                })
                .unwrap_or(&truth.components[truth.components.len() - 1]);
            let normal = Normal::new(0.0, comp.sigma).expect("positive sigma");
            let (x, y) = (comp.x + normal.sample(rng), comp.y + normal.sample(rng));
            if truth.inside(x, y, t) {
                raw.push(Raw { x, y, t, parent: None });
            }
        }
    }

    if truth.branching_ratio > 0.0 {
        let offspring = Poisson::new(truth.branching_ratio).expect("positive mean");
        let delay = Exp::new(1.0 / truth.trigger_decay).expect("positive decay");
        let jitter = Normal::new(0.0, truth.trigger_sigma).expect("positive sigma");
        let mut queue: VecDeque<usize> = (0..raw.len()).collect();
        while let Some(p) = queue.pop_front() {
            let count = offspring.sample(rng) as usize;
            for _ in 0..count {
                let dt = loop {
                    let d: f64 = delay.sample(rng);
                    if d > 0.0 {
                        break d;
                    }
                };
                let (x, y, t) = (
                    raw[p].x + jitter.sample(rng),
                    raw[p].y + jitter.sample(rng),
                    raw[p].t + dt,
                );
                if truth.inside(x, y, t) {
                    raw.push(Raw { x, y, t, parent: Some(p) });
                    queue.push_back(raw.len() - 1);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[a].t.total_cmp(&raw[b].t).then(a.cmp(&b)));
    let mut rank = vec![0; raw.len()];
    for (sorted, &orig) in order.iter().enumerate() {
        rank[orig] = sorted;
    }
    let events = order
        .iter()
        .enumerate()
        .map(|(k, &i)| CrimeEvent {
            id: format!("e{k:06}"),
            x: raw[i].x,
            y: raw[i].y,
            t: raw[i].t,
            c: circular_time(truth.week_offset, raw[i].t),
        })
        .collect();
    let parents = order.iter().map(|&i| raw[i].parent.map(|p| rank[p])).collect();
    Ok(SimulatedCatalog { events, parents })
}

/// Total mass of the fitted triggering kernel.
pub fn branching_ratio(model: &TrainedModel) -> f64 {
    model.branching_ratio()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_offspring_without_branching() {
        let truth = GroundTruth { branching_ratio: 0.0, ..GroundTruth::default() };
        let sim = simulate(&truth, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!sim.events.is_empty());
        assert!(sim.parents.iter().all(Option::is_none));
    }

    #[test]
    fn children_follow_parents() {
        let sim = simulate(&GroundTruth::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(sim.events.windows(2).all(|w| w[0].t <= w[1].t));
        for (j, p) in sim.parents.iter().enumerate() {
            if let Some(i) = p {
                assert!(*i < j);
                assert!(sim.events[j].t - sim.events[*i].t > 0.0);
            }
        }
        let n = sim.events.len() as f64;
        assert!((1700.0..2300.0).contains(&n), "{n}");
    }

    #[test]
    fn diffuse_preset_size() {
        let sim = simulate(&GroundTruth::diffuse(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let n = sim.events.len() as f64;
        assert!((1750.0..2250.0).contains(&n), "{n}");
    }

    #[test]
    fn reproducible_per_seed() {
        let a = simulate(&GroundTruth::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = simulate(&GroundTruth::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn runaway_configuration_rejected() {
        let mut truth = GroundTruth::default();
        truth.horizon_hours = 1e7;
        assert!(matches!(
            simulate(&truth, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::RunawaySimulation(_))
        ));
        truth.horizon_hours = 10.0;
        truth.branching_ratio = 1.0;
        assert!(simulate(&truth, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn profile_has_mean_one() {
        let truth = GroundTruth::default();
        let mean: f64 = (0..1680).map(|k| truth.profile_at(k as f64 * 0.1 + 0.05)).sum::<f64>() / 1680.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }
}
