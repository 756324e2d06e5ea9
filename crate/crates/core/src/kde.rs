//! Gaussian kernel density estimators for the three intensity components.
//!
//! * [`Kde2D`]: background spatial density μ, integrating to the number of
//!   background events.
//! * [`Kde1D`]: weekly modulation ν on the 168 h circle, wrapped kernel,
//!   scaled to mean 1 over the week.
//! * [`Kde3D`]: triggering kernel g over `(Δx, Δy, Δt)`, reflected at
//!   `Δt = 0`, integrating to the branching fraction.
//!
//! Bandwidths are chosen by maximizing the leave-one-out log-likelihood over
//! a log-spaced candidate grid.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::trigger_matrix::TriggerDelta;
use crate::{Error, Result, WEEK_HOURS};

/// `exp(x)` is exactly zero in f64 below this.
const EXP_UNDERFLOW: f64 = 745.2;

/// LOO sums are shifted so their largest term is 1; terms below `e^-40`
/// of it are dropped.
const LOO_CUTOFF: f64 = 40.0;

/// Positive candidate bandwidths, searched in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGrid(Vec<f64>);

impl BandwidthGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::InvalidParameter(
                "bandwidth grid must be nonempty with positive finite values".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn log_spaced(min: f64, max: f64, count: usize) -> Result<Self> {
        if !(min > 0.0 && max >= min && count >= 1) {
            return Err(Error::InvalidParameter(format!(
                "log-spaced grid needs 0 < min <= max and count >= 1 (got {min}, {max}, {count})"
            )));
        }
        if count == 1 {
            return Self::new(vec![min]);
        }
        let step = (max / min).ln() / (count - 1) as f64;
        let mut values: Vec<f64> = (0..count).map(|k| min * (step * k as f64).exp()).collect();
        values[count - 1] = max;
        Self::new(values)
    }

    /// 16 candidates from 10 m to 2 km.
    pub fn default_spatial() -> Self {
        Self::log_spaced(10.0, 2000.0, 16).expect("static grid")
    }

    /// 16 candidates from 0.5 h to 72 h.
    pub fn default_temporal() -> Self {
        Self::log_spaced(0.5, 72.0, 16).expect("static grid")
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|h| h * factor).collect())
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")))
    }
}

/// First index of the maximum; `-inf` never wins over a finite value.
fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Sums per-sample contributions in index order so parallel runs stay
/// bit-identical to sequential ones.
fn ordered_sum(rows: Vec<Vec<f64>>, width: usize) -> Vec<f64> {
    let mut total = vec![0.0; width];
    for row in rows {
        for (acc, v) in total.iter_mut().zip(row) {
            *acc += v;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Planar background density μ

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde2D {
    samples: Vec<[f64; 2]>,
    bandwidth: f64,
    mass: f64,
}

impl Kde2D {
    pub fn new(samples: Vec<[f64; 2]>, bandwidth: f64, mass: f64) -> Result<Self> {
        check_bandwidth(bandwidth)?;
        if samples.is_empty() {
            return Err(Error::TooFewSamples(0));
        }
        if !(mass.is_finite() && mass >= 0.0) {
            return Err(Error::InvalidParameter(format!("mass must be nonnegative, got {mass}")));
        }
        Ok(Self {
            samples,
            bandwidth,
            mass,
        })
    }

    /// Fits with the LOO-ML bandwidth; the estimate integrates to the
    /// number of points.
    pub fn fit(points: &[[f64; 2]], candidates: &BandwidthGrid) -> Result<Self> {
        let profile = loo_profile_2d(points, candidates.values())?;
        let best = argmax(&profile).ok_or(Error::NoFiniteLikelihood)?;
        Self::fit_with_bandwidth(points, candidates.values()[best])
    }

    pub fn fit_with_bandwidth(points: &[[f64; 2]], bandwidth: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::TooFewSamples(points.len()));
        }
        Self::new(points.to_vec(), bandwidth, points.len() as f64)
    }

    pub fn samples(&self) -> &[[f64; 2]] {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Total integral over the plane.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        let k = 0.5 / (self.bandwidth * self.bandwidth);
        let sum: f64 = self
            .samples
            .iter()
            .map(|[sx, sy]| {
                let r2 = (x - sx) * (x - sx) + (y - sy) * (y - sy);
                let e = r2 * k;
                if e > EXP_UNDERFLOW {
                    0.0
                } else {
                    (-e).exp()
                }
            })
            .sum();
        self.mass / self.samples.len() as f64 * sum / (2.0 * PI * self.bandwidth * self.bandwidth)
    }
}

/// Indices of `ks` from smallest to largest, so loops can stop at the first
/// exponent past a cutoff.
fn ascending(ks: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ks.len()).collect();
    order.sort_by(|&a, &b| ks[a].total_cmp(&ks[b]));
    order
}

fn all_identical<T: PartialEq>(items: &[T]) -> bool {
    items.windows(2).all(|w| w[0] == w[1])
}

/// LOO log-likelihood of a planar Gaussian KDE for every candidate bandwidth.
pub fn loo_profile_2d(points: &[[f64; 2]], bandwidths: &[f64]) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if all_identical(points) {
        return Err(Error::DegenerateSamples);
    }
    let ks: Vec<f64> = bandwidths.iter().map(|h| 0.5 / (h * h)).collect();
    let order = ascending(&ks);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let [xi, yi] = points[i];
            let r2 = |j: usize| {
                let [xj, yj] = points[j];
                (xi - xj) * (xi - xj) + (yi - yj) * (yi - yj)
            };
            let nearest = (0..n).filter(|&j| j != i).map(r2).fold(f64::INFINITY, f64::min);
            let mut acc = vec![0.0; ks.len()];
            for j in (0..n).filter(|&j| j != i) {
                let a = r2(j) - nearest;
                for &m in &order {
                    let e = a * ks[m];
                    if e >= LOO_CUTOFF {
                        break;
                    }
                    acc[m] += (-e).exp();
                }
            }
            acc.iter().zip(&ks).map(|(s, k)| s.ln() - nearest * k).collect()
        })
        .collect();
    let total = ordered_sum(rows, bandwidths.len());
    Ok(total
        .iter()
        .zip(bandwidths)
        .map(|(t, h)| t - n as f64 * ((n - 1) as f64 * 2.0 * PI * h * h).ln())
        .collect())
}

pub fn loo_log_likelihood_2d(points: &[[f64; 2]], bandwidth: f64) -> Result<f64> {
    check_bandwidth(bandwidth)?;
    Ok(loo_profile_2d(points, &[bandwidth])?[0])
}

/// LOO log-likelihood of a plain Gaussian KDE on the real line.
pub fn loo_log_likelihood_line(values: &[f64], bandwidth: f64) -> Result<f64> {
    check_bandwidth(bandwidth)?;
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let norm = (n - 1) as f64 * bandwidth * (2.0 * PI).sqrt();
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, vi)| {
            let s: f64 = values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, vj)| (-0.5 * ((vi - vj) / bandwidth).powi(2)).exp())
                .sum();
            (s / norm).ln()
        })
        .sum())
}

// ---------------------------------------------------------------------------
// Weekly modulation ν

/// Number of periodic images on each side so the omitted tail is below 1e-12.
fn image_count(bandwidth: f64, period: f64) -> i32 {
    let needed = (7.5 * bandwidth / period - 0.5).ceil();
    needed.max(1.0) as i32
}

/// Signed distance reduced to `[-period/2, period/2]`.
fn wrap_distance(d: f64, period: f64) -> f64 {
    let r = d.rem_euclid(period);
    if r > period / 2.0 {
        r - period
    } else {
        r
    }
}

#[derive(Serialize, Deserialize)]
struct Kde1DData {
    samples: Vec<f64>,
    bandwidth: f64,
    period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Kde1DData", into = "Kde1DData")]
pub struct Kde1D {
    samples: Vec<f64>,
    bandwidth: f64,
    period: f64,
    sorted: Vec<f64>,
}

impl TryFrom<Kde1DData> for Kde1D {
    type Error = Error;

    fn try_from(d: Kde1DData) -> Result<Self> {
        if d.samples.is_empty() {
            return Ok(Self::flat());
        }
        Self::new(d.samples, d.bandwidth, d.period)
    }
}

impl From<Kde1D> for Kde1DData {
    fn from(k: Kde1D) -> Self {
        Self {
            samples: k.samples,
            bandwidth: k.bandwidth,
            period: k.period,
        }
    }
}

impl Kde1D {
    pub fn new(samples: Vec<f64>, bandwidth: f64, period: f64) -> Result<Self> {
        check_bandwidth(bandwidth)?;
        if samples.is_empty() {
            return Err(Error::TooFewSamples(0));
        }
        if !(period > 0.0) || samples.iter().any(|c| !(0.0..period).contains(c)) {
            return Err(Error::InvalidParameter(
                "circular samples must lie in [0, period)".into(),
            ));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            samples,
            bandwidth,
            period,
            sorted,
        })
    }

    /// Flat modulation: ν ≡ 1.
    pub fn flat() -> Self {
        Self {
            samples: Vec::new(),
            bandwidth: 1.0,
            period: WEEK_HOURS,
            sorted: Vec::new(),
        }
    }

    pub fn fit(values: &[f64], candidates: &BandwidthGrid) -> Result<Self> {
        let profile = loo_profile_circular(values, candidates.values(), WEEK_HOURS)?;
        let best = argmax(&profile).ok_or(Error::NoFiniteLikelihood)?;
        Self::fit_with_bandwidth(values, candidates.values()[best])
    }

    pub fn fit_with_bandwidth(values: &[f64], bandwidth: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::TooFewSamples(values.len()));
        }
        Self::new(values.to_vec(), bandwidth, WEEK_HOURS)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Weekly modulation at circular time `c`; averages to 1 over a period.
    /// Terms beyond [`TERM_CUTOFF`] are skipped.
    pub fn density(&self, c: f64) -> f64 {
        if self.samples.is_empty() {
            return 1.0;
        }
        let h = self.bandwidth;
        let p = self.period;
        let k = 0.5 / (h * h);
        let reach = (2.0 * TERM_CUTOFF).sqrt() * h;
        let mut sum = 0.0;
        if reach < p / 2.0 {
            // Only the nearest image of each sample can contribute.
            let c = c.rem_euclid(p);
            let mut add_range = |lo: f64, hi: f64| {
                let from = self.sorted.partition_point(|s| *s < lo);
                for s in &self.sorted[from..] {
                    if *s > hi {
                        break;
                    }
                    let e = wrap_distance(c - s, p).powi(2) * k;
                    if e <= TERM_CUTOFF {
                        sum += (-e).exp();
                    }
                }
            };
            let (lo, hi) = (c - reach, c + reach);
            add_range(lo.max(0.0), hi.min(p));
            if lo < 0.0 {
                add_range(lo + p, p);
            }
            if hi >= p {
                add_range(0.0, hi - p);
            }
        } else {
            let m = image_count(h, p);
            for s in &self.sorted {
                let d = wrap_distance(c - s, p);
                for i in -m..=m {
                    let e = (d + i as f64 * p).powi(2) * k;
                    if e <= TERM_CUTOFF {
                        sum += (-e).exp();
                    }
                }
            }
        }
        p / self.samples.len() as f64 * sum / (h * (2.0 * PI).sqrt())
    }
}

/// LOO log-likelihood of a wrapped-Gaussian KDE on a circle of `period`.
pub fn loo_profile_circular(values: &[f64], bandwidths: &[f64], period: f64) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if all_identical(values) {
        return Err(Error::DegenerateSamples);
    }
    let ks: Vec<f64> = bandwidths.iter().map(|h| 0.5 / (h * h)).collect();
    let images: Vec<i32> = bandwidths.iter().map(|h| image_count(*h, period)).collect();
    let order = ascending(&ks);
    let widest = images.iter().copied().max().unwrap_or(0);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dist = |j: usize| wrap_distance(values[i] - values[j], period);
            let nearest = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist(j).powi(2))
                .fold(f64::INFINITY, f64::min);
            let mut acc = vec![0.0; ks.len()];
            for j in (0..n).filter(|&j| j != i) {
                let d = dist(j);
                for img in -widest..=widest {
                    let a = (d + img as f64 * period).powi(2) - nearest;
                    for &m in &order {
                        let e = a * ks[m];
                        if e >= LOO_CUTOFF || images[m] < img.abs() {
                            break;
                        }
                        acc[m] += (-e).exp();
                    }
                }
            }
            acc.iter().zip(&ks).map(|(s, k)| s.ln() - nearest * k).collect()
        })
        .collect();
    let total = ordered_sum(rows, bandwidths.len());
    Ok(total
        .iter()
        .zip(bandwidths)
        .map(|(t, h)| t - n as f64 * ((n - 1) as f64 * h * (2.0 * PI).sqrt()).ln())
        .collect())
}

pub fn loo_log_likelihood_circular(values: &[f64], bandwidth: f64, period: f64) -> Result<f64> {
    check_bandwidth(bandwidth)?;
    Ok(loo_profile_circular(values, &[bandwidth], period)?[0])
}

// ---------------------------------------------------------------------------
// Triggering kernel g

/// Kernel terms whose exponent exceeds this are dropped when evaluating g;
/// each is below `e^-25 ≈ 1.4e-11` of the kernel peak.
pub const TERM_CUTOFF: f64 = 25.0;

/// Square buckets over sample positions, side equal to the cutoff radius,
/// so every sample that can contribute lies in the 3×3 block around a query.
#[derive(Debug, Clone, Default, PartialEq)]
struct BucketIndex {
    x0: f64,
    y0: f64,
    side: f64,
    nx: usize,
    ny: usize,
    start: Vec<u32>,
    items: Vec<u32>,
    dts: Vec<f64>,
}

impl BucketIndex {
    fn build(samples: &[TriggerDelta], side: f64) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in samples {
            x0 = x0.min(s.dx);
            y0 = y0.min(s.dy);
            x1 = x1.max(s.dx);
            y1 = y1.max(s.dy);
        }
        let nx = ((x1 - x0) / side).floor() as usize + 1;
        let ny = ((y1 - y0) / side).floor() as usize + 1;
        let cell = |s: &TriggerDelta| {
            let cx = (((s.dx - x0) / side) as usize).min(nx - 1);
            let cy = (((s.dy - y0) / side) as usize).min(ny - 1);
            cy * nx + cx
        };
        let mut start = vec![0u32; nx * ny + 1];
        for s in samples {
            start[cell(s) + 1] += 1;
        }
        for k in 0..nx * ny {
            start[k + 1] += start[k];
        }
        let mut fill = start.clone();
        let mut items = vec![0u32; samples.len()];
        for (i, s) in samples.iter().enumerate() {
            let c = cell(s);
            items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        for k in 0..nx * ny {
            items[start[k] as usize..start[k + 1] as usize]
                .sort_by(|&a, &b| samples[a as usize].dt.total_cmp(&samples[b as usize].dt));
        }
        let dts = items.iter().map(|&i| samples[i as usize].dt).collect();
        Self { x0, y0, side, nx, ny, start, items, dts }
    }

    /// Whether any sample in buckets meeting the box `[x_lo, x_hi] × [y_lo,
    /// y_hi]` (widened by one bucket) has a lag in `[t_lo, t_hi]`.
    fn any_in_box(&self, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64, t_lo: f64, t_hi: f64) -> bool {
        if self.items.is_empty() {
            return false;
        }
        let clamp = |v: f64, n: usize| v.clamp(-1.0, n as f64) as i64;
        let bx0 = clamp(((x_lo - self.x0) / self.side).floor() - 1.0, self.nx).max(0);
        let bx1 = clamp(((x_hi - self.x0) / self.side).floor() + 1.0, self.nx).min(self.nx as i64 - 1);
        let by0 = clamp(((y_lo - self.y0) / self.side).floor() - 1.0, self.ny).max(0);
        let by1 = clamp(((y_hi - self.y0) / self.side).floor() + 1.0, self.ny).min(self.ny as i64 - 1);
        for by in by0..=by1 {
            for bx in bx0..=bx1 {
                let b = by as usize * self.nx + bx as usize;
                let (from, to) = (self.start[b] as usize, self.start[b + 1] as usize);
                let first = from + self.dts[from..to].partition_point(|dt| *dt < t_lo);
                if first < to && self.dts[first] <= t_hi {
                    return true;
                }
            }
        }
        false
    }

    /// Calls `visit` with every sample index in buckets adjacent to `(x, y)`
    /// whose lag lies in `[t_lo, t_hi]`.
    fn for_each_near(&self, x: f64, y: f64, t_lo: f64, t_hi: f64, mut visit: impl FnMut(usize)) {
        if self.items.is_empty() {
            return;
        }
        let fx = ((x - self.x0) / self.side).floor();
        let fy = ((y - self.y0) / self.side).floor();
        if fx < -1.0 || fy < -1.0 || fx > self.nx as f64 || fy > self.ny as f64 {
            return;
        }
        let (cx, cy) = (fx as i64, fy as i64);
        for by in (cy - 1).max(0)..=(cy + 1).min(self.ny as i64 - 1) {
            let row = by as usize * self.nx;
            let lo = row + (cx - 1).max(0) as usize;
            let hi = row + (cx + 1).min(self.nx as i64 - 1) as usize;
            if lo > hi {
                continue;
            }
            for b in lo..=hi {
                let (from, to) = (self.start[b] as usize, self.start[b + 1] as usize);
                let first = from + self.dts[from..to].partition_point(|dt| *dt < t_lo);
                for k in first..to {
                    if self.dts[k] > t_hi {
                        break;
                    }
                    visit(self.items[k] as usize);
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Kde3DData {
    samples: Vec<TriggerDelta>,
    bandwidth_space: f64,
    bandwidth_time: f64,
    mass: f64,
}

/// Product kernel: isotropic Gaussian in space times a Gaussian in time
/// reflected at zero, so all mass lies at `Δt > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Kde3DData", into = "Kde3DData")]
pub struct Kde3D {
    samples: Vec<TriggerDelta>,
    bandwidth_space: f64,
    bandwidth_time: f64,
    mass: f64,
    index: BucketIndex,
}

impl TryFrom<Kde3DData> for Kde3D {
    type Error = Error;

    fn try_from(d: Kde3DData) -> Result<Self> {
        Self::new(d.samples, d.bandwidth_space, d.bandwidth_time, d.mass)
    }
}

impl From<Kde3D> for Kde3DData {
    fn from(k: Kde3D) -> Self {
        Self {
            samples: k.samples,
            bandwidth_space: k.bandwidth_space,
            bandwidth_time: k.bandwidth_time,
            mass: k.mass,
        }
    }
}

impl Kde3D {
    pub fn new(
        samples: Vec<TriggerDelta>,
        bandwidth_space: f64,
        bandwidth_time: f64,
        mass: f64,
    ) -> Result<Self> {
        check_bandwidth(bandwidth_space)?;
        check_bandwidth(bandwidth_time)?;
        if samples.iter().any(|d| !(d.dt > 0.0)) {
            return Err(Error::InvalidParameter("triggering deltas need dt > 0".into()));
        }
        if !(mass.is_finite() && mass >= 0.0) {
            return Err(Error::InvalidParameter(format!("mass must be nonnegative, got {mass}")));
        }
        let mass = if samples.is_empty() { 0.0 } else { mass };
        let index = BucketIndex::build(&samples, (2.0 * TERM_CUTOFF).sqrt() * bandwidth_space);
        Ok(Self {
            samples,
            bandwidth_space,
            bandwidth_time,
            mass,
            index,
        })
    }

    /// The zero function, carrying bandwidths for bookkeeping only.
    pub fn zero(bandwidth_space: f64, bandwidth_time: f64) -> Self {
        Self {
            samples: Vec::new(),
            bandwidth_space,
            bandwidth_time,
            mass: 0.0,
            index: BucketIndex::default(),
        }
    }

    /// Fits with LOO-ML bandwidths chosen jointly over both grids; total
    /// mass is `deltas.len() / total_events`.
    pub fn fit(
        deltas: &[TriggerDelta],
        space: &BandwidthGrid,
        time: &BandwidthGrid,
        total_events: usize,
    ) -> Result<Self> {
        let profile = loo_profile_triggering(deltas, space.values(), time.values())?;
        let nt = time.values().len();
        let best = argmax(&profile).ok_or(Error::NoFiniteLikelihood)?;
        Self::fit_with_bandwidths(
            deltas,
            space.values()[best / nt],
            time.values()[best % nt],
            total_events,
        )
    }

    pub fn fit_with_bandwidths(
        deltas: &[TriggerDelta],
        bandwidth_space: f64,
        bandwidth_time: f64,
        total_events: usize,
    ) -> Result<Self> {
        if deltas.len() < 2 {
            return Err(Error::TooFewSamples(deltas.len()));
        }
        if total_events < deltas.len() {
            return Err(Error::InvalidParameter(
                "total event count below the number of triggered samples".into(),
            ));
        }
        Self::new(
            deltas.to_vec(),
            bandwidth_space,
            bandwidth_time,
            deltas.len() as f64 / total_events as f64,
        )
    }

    pub fn samples(&self) -> &[TriggerDelta] {
        &self.samples
    }

    pub fn bandwidth_space(&self) -> f64 {
        self.bandwidth_space
    }

    pub fn bandwidth_time(&self) -> f64 {
        self.bandwidth_time
    }

    /// Total integral over `Δt > 0`: the branching fraction.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn is_zero(&self) -> bool {
        self.samples.is_empty()
    }

    /// False only if [`Kde3D::density`] is zero for every lag in the box.
    pub fn may_be_positive(&self, dx: [f64; 2], dy: [f64; 2], dt: [f64; 2]) -> bool {
        let reach = (2.0 * TERM_CUTOFF).sqrt() * self.bandwidth_time;
        dt[1] > 0.0 && self.index.any_in_box(dx[0], dx[1], dy[0], dy[1], dt[0] - reach, dt[1] + reach)
    }

    /// g at a lag; terms beyond [`TERM_CUTOFF`] are skipped.
    pub fn density(&self, dx: f64, dy: f64, dt: f64) -> f64 {
        if dt <= 0.0 || self.samples.is_empty() {
            return 0.0;
        }
        let ks = 0.5 / (self.bandwidth_space * self.bandwidth_space);
        let kt = 0.5 / (self.bandwidth_time * self.bandwidth_time);
        let reach = (2.0 * TERM_CUTOFF).sqrt() * self.bandwidth_time;
        let mut sum = 0.0;
        self.index.for_each_near(dx, dy, dt - reach, dt + reach, |i| {
            let s = &self.samples[i];
            let es = ((dx - s.dx).powi(2) + (dy - s.dy).powi(2)) * ks;
            if es > TERM_CUTOFF {
                return;
            }
            let near = es + (dt - s.dt).powi(2) * kt;
            if near <= TERM_CUTOFF {
                sum += (-near).exp();
            }
            let far = es + (dt + s.dt).powi(2) * kt;
            if far <= TERM_CUTOFF {
                sum += (-far).exp();
            }
        });
        self.norm() * sum
    }

    /// Plain sum over every sample, no cutoff.
    pub fn density_exact(&self, dx: f64, dy: f64, dt: f64) -> f64 {
        if dt <= 0.0 || self.samples.is_empty() {
            return 0.0;
        }
        let ks = 0.5 / (self.bandwidth_space * self.bandwidth_space);
        let kt = 0.5 / (self.bandwidth_time * self.bandwidth_time);
        let sum: f64 = self
            .samples
            .iter()
            .map(|s| {
                let es = ((dx - s.dx).powi(2) + (dy - s.dy).powi(2)) * ks;
                let near = es + (dt - s.dt).powi(2) * kt;
                let far = es + (dt + s.dt).powi(2) * kt;
                (-near).exp() + (-far).exp()
            })
            .sum();
        self.norm() * sum
    }

    fn norm(&self) -> f64 {
        let hs = self.bandwidth_space;
        let ht = self.bandwidth_time;
        self.mass / self.samples.len() as f64 / (2.0 * PI * hs * hs * ht * (2.0 * PI).sqrt())
    }
}

/// LOO log-likelihood over the joint grid, row-major `[space][time]`.
pub fn loo_profile_triggering(
    deltas: &[TriggerDelta],
    space: &[f64],
    time: &[f64],
) -> Result<Vec<f64>> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if deltas.iter().any(|d| !(d.dt > 0.0)) {
        return Err(Error::InvalidParameter("triggering deltas need dt > 0".into()));
    }
    if all_identical(deltas) {
        return Err(Error::DegenerateSamples);
    }
    let ks: Vec<f64> = space.iter().map(|h| 0.5 / (h * h)).collect();
    let kt: Vec<f64> = time.iter().map(|h| 0.5 / (h * h)).collect();
    let order = ascending(&ks);
    let (ns, nt) = (space.len(), time.len());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let di = &deltas[i];
            let r2 = |d: &TriggerDelta| (di.dx - d.dx).powi(2) + (di.dy - d.dy).powi(2);
            let mut near_r2 = f64::INFINITY;
            let mut near_t2 = f64::INFINITY;
            for (j, dj) in deltas.iter().enumerate() {
                if j != i {
                    near_r2 = near_r2.min(r2(dj));
                    near_t2 = near_t2.min((di.dt - dj.dt).powi(2));
                }
            }
            let mut acc = vec![0.0; ns * nt];
            let mut sv = vec![0.0; ns];
            let mut tv = vec![0.0; nt];
            for (j, dj) in deltas.iter().enumerate() {
                if j == i {
                    continue;
                }
                let a = r2(dj) - near_r2;
                sv.fill(0.0);
                let mut any = false;
                for &m in &order {
                    let e = a * ks[m];
                    if e >= EXP_UNDERFLOW {
                        break;
                    }
                    sv[m] = (-e).exp();
                    any |= sv[m] > 0.0;
                }
                if !any {
                    continue;
                }
                let minus = (di.dt - dj.dt).powi(2) - near_t2;
                let plus = (di.dt + dj.dt).powi(2) - near_t2;
                for (v, k) in tv.iter_mut().zip(&kt) {
                    let (e1, e2) = (minus * k, plus * k);
                    *v = if e1 < EXP_UNDERFLOW { (-e1).exp() } else { 0.0 }
                        + if e2 < EXP_UNDERFLOW { (-e2).exp() } else { 0.0 };
                }
                for (a, s) in sv.iter().enumerate() {
                    if *s == 0.0 {
                        continue;
                    }
                    let row = &mut acc[a * nt..(a + 1) * nt];
                    for (cell, t) in row.iter_mut().zip(&tv) {
                        *cell += s * t;
                    }
                }
            }
            let mut out = vec![0.0; ns * nt];
            for a in 0..ns {
                for b in 0..nt {
                    out[a * nt + b] = acc[a * nt + b].ln() - near_r2 * ks[a] - near_t2 * kt[b];
                }
            }
            out
        })
        .collect();
    let total = ordered_sum(rows, ns * nt);
    let mut profile = vec![0.0; ns * nt];
    for a in 0..ns {
        for b in 0..nt {
            let norm = (n - 1) as f64 * 2.0 * PI * space[a] * space[a] * time[b] * (2.0 * PI).sqrt();
            profile[a * nt + b] = total[a * nt + b] - n as f64 * norm.ln();
        }
    }
    Ok(profile)
}

pub fn loo_log_likelihood_triggering(
    deltas: &[TriggerDelta],
    bandwidth_space: f64,
    bandwidth_time: f64,
) -> Result<f64> {
    check_bandwidth(bandwidth_space)?;
    check_bandwidth(bandwidth_time)?;
    Ok(loo_profile_triggering(deltas, &[bandwidth_space], &[bandwidth_time])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn delta(dx: f64, dy: f64, dt: f64) -> TriggerDelta {
        TriggerDelta { dx, dy, dt }
    }

    #[test]
    fn log_spaced_grid_endpoints() {
        let g = BandwidthGrid::default_spatial();
        assert_eq!(g.values().len(), 16);
        assert_eq!(g.values()[0], 10.0);
        assert_eq!(g.values()[15], 2000.0);
        assert!(g.values().windows(2).all(|w| w[0] < w[1]));
        assert!(BandwidthGrid::new(vec![]).is_err());
        assert!(BandwidthGrid::new(vec![1.0, -2.0]).is_err());
    }

    #[test]
    fn two_point_spatial_fit_is_symmetric() {
        let pts = [[0.0, 0.0], [100.0, 0.0]];
        let grid = BandwidthGrid::new(vec![50.0, 100.0, 200.0]).unwrap();
        let kde = Kde2D::fit(&pts, &grid).unwrap();
        assert!(grid.values().contains(&kde.bandwidth()));
        assert_eq!(kde.density(0.0, 0.0), kde.density(100.0, 0.0));
    }

    #[test]
    fn single_sample_peak_value() {
        let kde = Kde2D::new(vec![[3.0, 4.0]], 25.0, 7.0).unwrap();
        let oracle = 7.0 / (2.0 * PI * 25.0 * 25.0);
        assert!((kde.density(3.0, 4.0) - oracle).abs() < 1e-15);
    }

    #[test]
    fn fit_errors() {
        let grid = BandwidthGrid::default_spatial();
        assert!(matches!(Kde2D::fit(&[[1.0, 1.0]], &grid), Err(Error::TooFewSamples(1))));
        assert!(matches!(
            Kde2D::fit(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]], &grid),
            Err(Error::DegenerateSamples)
        ));
        assert!(matches!(Kde1D::fit(&[5.0], &grid), Err(Error::TooFewSamples(1))));
        assert!(matches!(
            Kde3D::fit(&[delta(1.0, 1.0, 2.0), delta(1.0, 1.0, 2.0)], &grid, &grid, 10),
            Err(Error::DegenerateSamples)
        ));
    }

    #[test]
    fn outlier_gives_finite_positive_bandwidth() {
        let mut pts: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 0.5, (i % 3) as f64]).collect();
        pts.push([5000.0, 5000.0]);
        let kde = Kde2D::fit(&pts, &BandwidthGrid::default_spatial()).unwrap();
        assert!(kde.bandwidth().is_finite() && kde.bandwidth() > 0.0);
    }

    #[test]
    fn loo_two_points_closed_form() {
        let (d, h) = (3.0, 2.0);
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        let oracle = 2.0 * (phi(d / h) / h).ln();
        let got = loo_log_likelihood_line(&[1.0, 1.0 + d], h).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn loo_two_points_planar_closed_form() {
        let (d, h) = (30.0_f64, 20.0_f64);
        let oracle = 2.0 * ((-d * d / (2.0 * h * h)).exp() / (2.0 * PI * h * h)).ln();
        let got = loo_log_likelihood_2d(&[[0.0, 0.0], [d, 0.0]], h).unwrap();
        assert!((got - oracle).abs() < 1e-10);
    }

    #[test]
    fn loo_diverges_for_vanishing_bandwidth() {
        let pts = [0.0, 1.0, 2.5, 4.0];
        let values: Vec<f64> = [1.0, 0.3, 0.1, 0.03, 0.01]
            .iter()
            .map(|h| loo_log_likelihood_line(&pts, *h).unwrap())
            .collect();
        assert!(values.windows(2).skip(1).all(|w| w[1] < w[0] || w[1] == f64::NEG_INFINITY), "{values:?}");
        assert_eq!(values[4], f64::NEG_INFINITY);
    }

    #[test]
    fn loo_with_duplicates_stays_finite() {
        let pts = [[0.0, 0.0], [0.0, 0.0], [500.0, 0.0], [500.0, 0.0]];
        let v = loo_log_likelihood_2d(&pts, 1e-3).unwrap();
        assert!(v.is_finite() && v > 0.0);
        // Planar LOO with shifting stays finite where a naive sum underflows.
        let far = [[0.0, 0.0], [0.0, 3.0], [1e4, 0.0], [1e4, 3.0]];
        assert!(loo_log_likelihood_2d(&far, 1.0).unwrap().is_finite());
    }

    #[test]
    fn circular_density_is_periodic_and_wraps() {
        let kde = Kde1D::new(vec![1.0, 167.0], 3.0, WEEK_HOURS).unwrap();
        assert!((kde.density(0.0) - kde.density(168.0 - 1e-9)).abs() < 1e-9);
        assert!((kde.density(5.0) - kde.density(173.0)).abs() < 1e-12);
        assert!(kde.density(0.0) > kde.density(84.0));
        assert!(kde.density(0.0) > kde.density(5.0));
    }

    #[test]
    fn circular_mean_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for h in [0.7, 6.0, 72.0] {
            let values: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..168.0)).collect();
            let kde = Kde1D::new(values, h, WEEK_HOURS).unwrap();
            let nodes = 10_000;
            let step = WEEK_HOURS / nodes as f64;
            let trapezoid: f64 = (0..nodes)
                .map(|i| 0.5 * (kde.density(i as f64 * step) + kde.density((i + 1) as f64 * step)) * step)
                .sum();
            assert!((trapezoid / WEEK_HOURS - 1.0).abs() < 1e-3, "h = {h}");
        }
    }

    #[test]
    fn uniform_circular_values_give_flat_modulation() {
        let values: Vec<f64> = (0..336).map(|i| i as f64 * 0.5).collect();
        let kde = Kde1D::fit(&values, &BandwidthGrid::default_temporal()).unwrap();
        let worst = (0..168)
            .map(|c| (kde.density(c as f64) - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn triggering_vanishes_for_nonpositive_lag() {
        let g = Kde3D::new(vec![delta(0.0, 0.0, 1.0), delta(5.0, 5.0, 3.0)], 10.0, 2.0, 0.3).unwrap();
        assert_eq!(g.density(0.0, 0.0, 0.0), 0.0);
        assert_eq!(g.density(0.0, 0.0, -5.0), 0.0);
        assert!(g.density(0.0, 0.0, 1e-6) > 0.0);
        assert_eq!(Kde3D::zero(1.0, 1.0).density(0.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn triggering_loo_two_points_closed_form() {
        let (a, b) = (delta(0.0, 0.0, 2.0), delta(30.0, 40.0, 5.0));
        let (hs, ht) = (40.0_f64, 3.0_f64);
        let space = (-2500.0 / (2.0 * hs * hs)).exp() / (2.0 * PI * hs * hs);
        let phi = |z: f64| (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * ht);
        let time = phi(3.0 / ht) + phi(7.0 / ht);
        let oracle = 2.0 * (space * time).ln();
        let got = loo_log_likelihood_triggering(&[a, b], hs, ht).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn triggering_profile_matches_single_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let deltas: Vec<_> = (0..40)
            .map(|_| delta(rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0), rng.random_range(0.1..50.0)))
            .collect();
        let space = [20.0, 80.0, 300.0];
        let time = [1.0, 10.0];
        let profile = loo_profile_triggering(&deltas, &space, &time).unwrap();
        for (a, hs) in space.iter().enumerate() {
            for (b, ht) in time.iter().enumerate() {
                let single = loo_log_likelihood_triggering(&deltas, *hs, *ht).unwrap();
                assert!((profile[a * 2 + b] - single).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn argmax_prefers_first_finite_maximum() {
        assert_eq!(argmax(&[f64::NEG_INFINITY, 1.0, 3.0, 3.0]), Some(2));
        assert_eq!(argmax(&[f64::NEG_INFINITY, f64::NAN]), None);
    }

    #[test]
    fn indexed_triggering_matches_exact_sum() {
        let samples: Vec<TriggerDelta> = (0..300)
            .map(|k| {
                let a = k as f64 * 0.7;
                delta(a.sin() * (k % 37) as f64 * 20.0, a.cos() * (k % 23) as f64 * 35.0, 0.5 + (k % 41) as f64 * 3.0)
            })
            .collect();
        for (hs, ht) in [(10.0, 0.5), (41.0, 19.0), (400.0, 72.0)] {
            let g = Kde3D::new(samples.clone(), hs, ht, 0.3).unwrap();
            // Every sample may drop two terms, each at most e^-cutoff of one kernel's peak.
            let peak = Kde3D::new(vec![delta(0.0, 0.0, 1e-9)], hs, ht, 0.3 / 300.0).unwrap().density_exact(0.0, 0.0, 1e-9);
            let bound = 2.0 * 300.0 * (-TERM_CUTOFF).exp() * peak;
            for q in 0..400 {
                let b = q as f64 * 1.3;
                let (x, y, t) = (b.cos() * (q % 29) as f64 * 30.0, b.sin() * (q % 31) as f64 * 30.0, 0.1 + (q % 53) as f64 * 2.5);
                let (fast, exact) = (g.density(x, y, t), g.density_exact(x, y, t));
                assert!((fast - exact).abs() <= bound + 1e-12 * exact);
            }
        }
    }

    #[test]
    fn triggering_kernel_serde_rebuilds_index() {
        let g = Kde3D::new(vec![delta(0.0, 0.0, 1.0), delta(50.0, -20.0, 3.0)], 10.0, 2.0, 0.3).unwrap();
        let back: Kde3D = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
