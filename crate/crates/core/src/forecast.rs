//! Grid forecasts: Monte Carlo cell integrals of λ over a shift, hotspot
//! ranking, hit rate and PAI.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::declustering::TrainedModel;
use crate::events::{inverse_project, CrimeEvent, EventCatalog, GeoPoint};
use crate::kde::{BandwidthGrid, Kde2D};
use crate::seed;
use crate::{Error, Result};

/// Anything that yields a conditional intensity in events/(m²·h).
///
/// The intensity is split into a part that depends only on position, which
/// forecasts cache per Monte Carlo point, and the rest.
pub trait IntensityModel: Sync {
    /// Time-invariant factor at `(x, y)`.
    fn static_part(&self, x: f64, y: f64) -> f64;

    /// λ at `(x, y, t)` given `static_part(x, y)`; only `history` events
    /// strictly before `t` count.
    fn intensity_from(&self, static_part: f64, history: &[CrimeEvent], x: f64, y: f64, t: f64) -> f64;

    fn intensity(&self, history: &[CrimeEvent], x: f64, y: f64, t: f64) -> f64 {
        self.intensity_from(self.static_part(x, y), history, x, y, t)
    }

    /// Whether `event` can raise λ anywhere in `rect × slot`; the default
    /// keeps every event.
    fn may_affect(&self, event: &CrimeEvent, rect: [f64; 4], slot: Slot) -> bool {
        let _ = (event, rect, slot);
        true
    }
}

impl IntensityModel for TrainedModel {
    fn static_part(&self, x: f64, y: f64) -> f64 {
        self.mu.density(x, y) / self.time_horizon_hours
    }

    fn intensity_from(&self, static_part: f64, history: &[CrimeEvent], x: f64, y: f64, t: f64) -> f64 {
        let c = self.history.circular_time(t);
        static_part * self.nu.density(c) + self.triggering_rate(history, x, y, t)
    }

    fn may_affect(&self, e: &CrimeEvent, rect: [f64; 4], slot: Slot) -> bool {
        let [x0, y0, x1, y1] = rect;
        !self.g.is_zero()
            && slot.start - e.t <= self.truncation.horizon_hours
            && rect_distance(rect, e.x, e.y) <= self.truncation.radius_m
            && self
                .g
                .may_be_positive([x0 - e.x, x1 - e.x], [y0 - e.y, y1 - e.y], [slot.start - e.t, slot.end - e.t])
    }
}

/// Time-invariant baseline: a spatial KDE of every training event, no
/// declustering, no weekly modulation and no triggering.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainKde {
    pub kde: Kde2D,
    pub time_horizon_hours: f64,
}

impl PlainKde {
    pub fn fit(catalog: &EventCatalog, candidates: &BandwidthGrid, time_horizon_hours: Option<f64>) -> Result<Self> {
        let events = catalog.events();
        let points: Vec<[f64; 2]> = events.iter().map(|e| [e.x, e.y]).collect();
        let kde = Kde2D::fit(&points, candidates)?;
        let horizon = match time_horizon_hours {
            Some(h) => h,
            None => events[events.len() - 1].t - events[0].t,
        };
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter("training events span no time".into()));
        }
        Ok(Self {
            kde,
            time_horizon_hours: horizon,
        })
    }

    pub fn rate(&self, x: f64, y: f64) -> f64 {
        self.kde.density(x, y) / self.time_horizon_hours
    }
}

impl IntensityModel for PlainKde {
    fn static_part(&self, x: f64, y: f64) -> f64 {
        self.rate(x, y)
    }

    fn intensity_from(&self, static_part: f64, _: &[CrimeEvent], _: f64, _: f64, _: f64) -> f64 {
        static_part
    }

    fn may_affect(&self, _: &CrimeEvent, _: [f64; 4], _: Slot) -> bool {
        false
    }
}

/// Forecast window `[start, end)` in linear hours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub start: f64,
    pub end: f64,
}

impl Slot {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(end > start) {
            return Err(Error::InvalidParameter(format!("empty slot [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        (self.start..self.end).contains(&t)
    }
}

/// Uniform square cells; row 0 at `y_min`, column 0 at `x_min`. Cells are
/// half-open `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    x_min: f64,
    y_min: f64,
    cell_size: f64,
    n_cols: usize,
    n_rows: usize,
    regions: Option<Vec<Option<u32>>>,
    active: Vec<bool>,
}

impl Grid {
    /// Covers `[x_min, x_max) × [y_min, y_max)`, rounding the extent up to
    /// whole cells.
    pub fn new(bbox: [f64; 4], cell_size: f64) -> Result<Self> {
        let [x0, y0, x1, y1] = bbox;
        if !(cell_size > 0.0 && x1 > x0 && y1 > y0) || bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid needs positive cell size and extent (bbox {bbox:?}, cell {cell_size})"
            )));
        }
        let n_cols = ((x1 - x0) / cell_size - 1e-9).ceil().max(1.0) as usize;
        let n_rows = ((y1 - y0) / cell_size - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            x_min: x0,
            y_min: y0,
            cell_size,
            n_cols,
            n_rows,
            regions: None,
            active: vec![true; n_cols * n_rows],
        })
    }

    /// Labels cells by region from `(row, col, region)` triples.
    pub fn with_regions(mut self, labels: &[(usize, usize, u32)]) -> Result<Self> {
        let mut regions = vec![None; self.n_cells()];
        for &(row, col, region) in labels {
            let idx = self.index(row, col)?;
            if regions[idx].is_some_and(|r| r != region) {
                return Err(Error::InvalidParameter(format!(
                    "cell ({row}, {col}) assigned to two regions"
                )));
            }
            regions[idx] = Some(region);
        }
        self.regions = Some(regions);
        Ok(self)
    }

    /// Restricts the study area to the listed `(row, col)` cells.
    pub fn with_mask(mut self, cells: &[(usize, usize)]) -> Result<Self> {
        let mut active = vec![false; self.n_cells()];
        for &(row, col) in cells {
            active[self.index(row, col)?] = true;
        }
        if !active.iter().any(|a| *a) {
            return Err(Error::InvalidParameter("mask selects no cells".into()));
        }
        self.active = active;
        Ok(self)
    }

    pub fn index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.n_rows || col >= self.n_cols {
            return Err(Error::InvalidParameter(format!("cell ({row}, {col}) outside grid")));
        }
        Ok(row * self.n_cols + col)
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.n_cols, index % self.n_cols)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cols * self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn bbox(&self) -> [f64; 4] {
        [
            self.x_min,
            self.y_min,
            self.x_min + self.n_cols as f64 * self.cell_size,
            self.y_min + self.n_rows as f64 * self.cell_size,
        ]
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.active[index]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn region(&self, index: usize) -> Option<u32> {
        self.regions.as_ref().and_then(|r| r[index])
    }

    pub fn has_regions(&self) -> bool {
        self.regions.is_some()
    }

    /// `[x0, y0, x1, y1]` of a cell.
    pub fn cell_rect(&self, index: usize) -> [f64; 4] {
        let (row, col) = self.row_col(index);
        let x0 = self.x_min + col as f64 * self.cell_size;
        let y0 = self.y_min + row as f64 * self.cell_size;
        [x0, y0, x0 + self.cell_size, y0 + self.cell_size]
    }

    pub fn cell_center(&self, index: usize) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.cell_rect(index);
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }

    /// Active cell containing `(x, y)`, if any.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let col = ((x - self.x_min) / self.cell_size).floor();
        let row = ((y - self.y_min) / self.cell_size).floor();
        if col < 0.0 || row < 0.0 || col >= self.n_cols as f64 || row >= self.n_rows as f64 {
            return None;
        }
        let idx = row as usize * self.n_cols + col as usize;
        self.active[idx].then_some(idx)
    }
}

/// Monte Carlo integral of λ over `rect × slot`: the expected event count.
/// Point `k` uses draws `3k..3k+3` of `rng` for x, y and t.
pub fn cell_expected_count<M: IntensityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    history: &[CrimeEvent],
    rect: [f64; 4],
    slot: Slot,
    n_mc: usize,
    rng: &mut R,
) -> f64 {
    let n_mc = n_mc.max(1);
    let [x0, y0, x1, y1] = rect;
    let sum: f64 = (0..n_mc)
        .map(|_| {
            let x = x0 + rng.random::<f64>() * (x1 - x0);
            let y = y0 + rng.random::<f64>() * (y1 - y0);
            let t = slot.start + rng.random::<f64>() * slot.len();
            model.intensity(history, x, y, t)
        })
        .sum();
    sum / n_mc as f64 * (x1 - x0) * (y1 - y0) * slot.len()
}

fn rect_distance(rect: [f64; 4], x: f64, y: f64) -> f64 {
    let dx = (rect[0] - x).max(x - rect[2]).max(0.0);
    let dy = (rect[1] - y).max(y - rect[3]).max(0.0);
    dx.hypot(dy)
}

/// Expected counts per slot and cell (inactive cells get 0), using history
/// strictly before each slot's start. Cell `k` draws its points from
/// `seed::rng(master_seed, k)`; the same unit points serve every slot, so
/// each entry equals [`cell_expected_count`] with that generator.
pub fn forecast_slots<M: IntensityModel + ?Sized>(
    model: &M,
    history: &[CrimeEvent],
    grid: &Grid,
    slots: &[Slot],
    n_mc: usize,
    master_seed: u64,
) -> Vec<Vec<f64>> {
    let n_mc = n_mc.max(1);
    let per_cell: Vec<Vec<f64>> = (0..grid.n_cells())
        .into_par_iter()
        .map(|k| {
            if !grid.is_active(k) {
                return vec![0.0; slots.len()];
            }
            let rect = grid.cell_rect(k);
            let [x0, y0, x1, y1] = rect;
            let mut rng = seed::rng(master_seed, k as u64);
            let points: Vec<(f64, f64, f64, f64)> = (0..n_mc)
                .map(|_| {
                    let x = x0 + rng.random::<f64>() * (x1 - x0);
                    let y = y0 + rng.random::<f64>() * (y1 - y0);
                    let u = rng.random::<f64>();
                    (x, y, u, model.static_part(x, y))
                })
                .collect();
            let mut local: Vec<CrimeEvent> = Vec::new();
            slots
                .iter()
                .map(|slot| {
                    let before = &history[..history.partition_point(|e| e.t < slot.start)];
                    local.clear();
                    local.extend(before.iter().filter(|e| model.may_affect(e, rect, *slot)).cloned());
                    let sum: f64 = points
                        .iter()
                        .map(|&(x, y, u, sp)| {
                            let t = slot.start + u * slot.len();
                            model.intensity_from(sp, &local, x, y, t)
                        })
                        .sum();
                    sum / n_mc as f64 * (x1 - x0) * (y1 - y0) * slot.len()
                })
                .collect()
        })
        .collect();
    (0..slots.len())
        .map(|s| per_cell.iter().map(|cell| cell[s]).collect())
        .collect()
}

/// Expected counts for one slot; see [`forecast_slots`].
pub fn forecast_counts<M: IntensityModel + ?Sized>(
    model: &M,
    history: &[CrimeEvent],
    grid: &Grid,
    slot: Slot,
    n_mc: usize,
    master_seed: u64,
) -> Vec<f64> {
    forecast_slots(model, history, grid, &[slot], n_mc, master_seed).remove(0)
}

fn flag_top(counts: &[f64], eligible: &[usize], k: usize, flags: &mut [bool]) {
    let mut order = eligible.to_vec();
    // Highest count first; equal counts in index (row, col) order.
    order.sort_by(|&a, &b| counts[b].total_cmp(&counts[a]).then(a.cmp(&b)));
    for &i in order.iter().take(k) {
        flags[i] = true;
    }
}

/// Number of cells flagged at `coverage` out of `n`.
pub fn hotspot_count(coverage: f64, n: usize) -> usize {
    ((coverage * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_coverage(coverage: f64) -> Result<()> {
    if coverage > 0.0 && coverage <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("coverage must lie in (0, 1], got {coverage}")))
    }
}

/// Flags the `⌈coverage·n⌉` highest cells.
pub fn rank_hotspots(counts: &[f64], coverage: f64) -> Result<Vec<bool>> {
    check_coverage(coverage)?;
    let mut flags = vec![false; counts.len()];
    let all: Vec<usize> = (0..counts.len()).collect();
    flag_top(counts, &all, hotspot_count(coverage, counts.len()), &mut flags);
    Ok(flags)
}

/// Like [`rank_hotspots`] but only among the grid's active cells.
pub fn rank_hotspots_in(counts: &[f64], grid: &Grid, coverage: f64) -> Result<Vec<bool>> {
    check_coverage(coverage)?;
    let active: Vec<usize> = (0..grid.n_cells()).filter(|&k| grid.is_active(k)).collect();
    let mut flags = vec![false; counts.len()];
    flag_top(counts, &active, hotspot_count(coverage, active.len()), &mut flags);
    Ok(flags)
}

/// Flags the `k` highest active cells of every region.
pub fn top_k_per_region(counts: &[f64], grid: &Grid, k: usize) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if !grid.has_regions() {
        return Err(Error::NoRegions);
    }
    let mut by_region: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for i in 0..grid.n_cells() {
        if let (Some(r), true) = (grid.region(i), grid.is_active(i)) {
            by_region.entry(r).or_default().push(i);
        }
    }
    let mut flags = vec![false; counts.len()];
    for cells in by_region.values() {
        flag_top(counts, cells, k, &mut flags);
    }
    Ok(flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub rate: f64,
    pub hits: usize,
    pub in_scope: usize,
    /// Realized events outside the grid or the slot.
    pub excluded: usize,
}

pub fn hit_rate(flags: &[bool], grid: &Grid, realized: &[CrimeEvent], slot: Slot) -> Result<HitRate> {
    let mut hits = 0;
    let mut in_scope = 0;
    for e in realized {
        if !slot.contains(e.t) {
            continue;
        }
        if let Some(k) = grid.cell_of(e.x, e.y) {
            in_scope += 1;
            hits += usize::from(flags[k]);
        }
    }
    if in_scope == 0 {
        return Err(Error::NoEventsInScope);
    }
    Ok(HitRate {
        rate: hits as f64 / in_scope as f64,
        hits,
        in_scope,
        excluded: realized.len() - in_scope,
    })
}

/// Flagged area over total (active) area.
pub fn area_fraction(flags: &[bool], grid: &Grid) -> f64 {
    let flagged = (0..grid.n_cells()).filter(|&k| flags[k] && grid.is_active(k)).count();
    flagged as f64 / grid.active_count() as f64
}

/// Predictive accuracy index: hit rate per unit of flagged area fraction.
pub fn pai(hit_rate: f64, area_fraction: f64) -> Result<f64> {
    if !(area_fraction > 0.0 && area_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "area fraction must lie in (0, 1], got {area_fraction}"
        )));
    }
    Ok(hit_rate / area_fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridForecast {
    pub grid: Grid,
    pub slot: Slot,
    pub expected_counts: Vec<f64>,
    pub hotspot_flags: Vec<bool>,
}

impl GridForecast {
    pub fn compute<M: IntensityModel + ?Sized>(
        model: &M,
        history: &[CrimeEvent],
        grid: Grid,
        slot: Slot,
        n_mc: usize,
        master_seed: u64,
    ) -> Self {
        let expected_counts = forecast_counts(model, history, &grid, slot, n_mc, master_seed);
        let n = grid.n_cells();
        Self {
            grid,
            slot,
            expected_counts,
            hotspot_flags: vec![false; n],
        }
    }

    pub fn flag_by_coverage(&mut self, coverage: f64) -> Result<()> {
        self.hotspot_flags = rank_hotspots_in(&self.expected_counts, &self.grid, coverage)?;
        Ok(())
    }

    pub fn flag_top_k_per_region(&mut self, k: usize) -> Result<()> {
        self.hotspot_flags = top_k_per_region(&self.expected_counts, &self.grid, k)?;
        Ok(())
    }

    pub fn hit_rate(&self, realized: &[CrimeEvent]) -> Result<HitRate> {
        hit_rate(&self.hotspot_flags, &self.grid, realized, self.slot)
    }

    pub fn area_fraction(&self) -> f64 {
        area_fraction(&self.hotspot_flags, &self.grid)
    }

    /// One polygon per active cell in lon/lat; `extra` is attached as a
    /// top-level `config` member when given.
    pub fn to_geojson(&self, origin: GeoPoint, extra: Option<Value>) -> Value {
        let features: Vec<Value> = (0..self.grid.n_cells())
            .filter(|&k| self.grid.is_active(k))
            .map(|k| {
                let [x0, y0, x1, y1] = self.grid.cell_rect(k);
                let ring: Vec<Value> = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
                    .iter()
                    .map(|&(x, y)| {
                        let (lon, lat) = inverse_project(x, y, origin);
                        json!([lon, lat])
                    })
                    .collect();
                let (row, col) = self.grid.row_col(k);
                json!({
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [ring]},
                    "properties": {
                        "row": row,
                        "col": col,
                        "expected_count": self.expected_counts[k],
                        "hotspot": self.hotspot_flags[k],
                        "region_id": self.grid.region(k),
                        "slot_start": self.slot.start,
                        "slot_end": self.slot.end,
                    }
                })
            })
            .collect();
        let mut collection = json!({"type": "FeatureCollection", "features": features});
        if let Some(extra) = extra {
            collection["config"] = extra;
        }
        collection
    }

    /// CSV `row,col,x_center,y_center,expected_count,hotspot` over active cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row", "col", "x_center", "y_center", "expected_count", "hotspot"])?;
        for k in (0..self.grid.n_cells()).filter(|&k| self.grid.is_active(k)) {
            let (row, col) = self.grid.row_col(k);
            let (xc, yc) = self.grid.cell_center(k);
            w.write_record([
                row.to_string(),
                col.to_string(),
                xc.to_string(),
                yc.to_string(),
                self.expected_counts[k].to_string(),
                self.hotspot_flags[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
