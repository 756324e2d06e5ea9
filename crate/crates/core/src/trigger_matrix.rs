//! The parent-probability matrix of stochastic declustering.
//!
//! Rows are candidate parents, columns are children: entry `(i, j)` is the
//! probability that event `j` was triggered by event `i`, and the diagonal
//! `(j, j)` is the probability that `j` is a background event. Columns sum
//! to one and only earlier events can be parents, so the matrix is upper
//! triangular.
//!
//! Storage is sparse by column. Pairs further apart than the [`Truncation`]
//! horizon or radius are structurally zero and take no part in
//! normalization.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::events::CrimeEvent;
use crate::kde::{Kde1D, Kde2D, Kde3D};
use crate::{Error, Result};

/// Spatio-temporal offset from a parent to its child.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerDelta {
    pub dx: f64,
    pub dy: f64,
    /// Strictly positive.
    pub dt: f64,
}

/// Parent candidates are limited to `0 < Δt <= horizon_hours` and
/// spatial gap `<= radius_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub horizon_hours: f64,
    pub radius_m: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            horizon_hours: 30.0 * 24.0,
            radius_m: 3000.0,
        }
    }
}

impl Truncation {
    pub fn unbounded() -> Self {
        Self {
            horizon_hours: f64::INFINITY,
            radius_m: f64::INFINITY,
        }
    }

    pub fn admits(&self, dx: f64, dy: f64, dt: f64) -> bool {
        dt > 0.0 && dt <= self.horizon_hours && dx * dx + dy * dy <= self.radius_m * self.radius_m
    }
}

fn check_sorted(events: &[CrimeEvent]) -> Result<()> {
    if events.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    match events.windows(2).position(|w| w[1].t < w[0].t) {
        Some(k) => Err(Error::Unsorted(k + 1)),
        None => Ok(()),
    }
}

/// Sparsity pattern shared by every matrix over one catalog.
#[derive(Debug, Clone)]
pub struct CandidatePairs {
    col_start: Vec<usize>,
    parent: Vec<u32>,
    delta: Vec<TriggerDelta>,
}

impl CandidatePairs {
    pub fn new(events: &[CrimeEvent], truncation: &Truncation) -> Result<Self> {
        check_sorted(events)?;
        let mut col_start = Vec::with_capacity(events.len() + 1);
        let mut parent = Vec::new();
        let mut delta = Vec::new();
        col_start.push(0);
        let mut first = 0;
        for (j, child) in events.iter().enumerate() {
            while child.t - events[first].t > truncation.horizon_hours {
                first += 1;
            }
            for (i, p) in events[first..j].iter().enumerate() {
                let (dx, dy, dt) = (child.x - p.x, child.y - p.y, child.t - p.t);
                if truncation.admits(dx, dy, dt) {
                    parent.push((first + i) as u32);
                    delta.push(TriggerDelta { dx, dy, dt });
                }
            }
            col_start.push(parent.len());
        }
        Ok(Self {
            col_start,
            parent,
            delta,
        })
    }

    pub fn n(&self) -> usize {
        self.col_start.len() - 1
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    fn range(&self, j: usize) -> std::ops::Range<usize> {
        self.col_start[j]..self.col_start[j + 1]
    }

    /// Builds a matrix from per-column weights: `f(j)` returns the raw
    /// background weight and fills raw parent weights aligned with the
    /// column's candidates.
    fn normalize_columns<F>(&self, weights: F) -> Result<TriggerMatrix>
    where
        F: Fn(usize, &[TriggerDelta], &mut Vec<f64>) -> Result<f64> + Sync,
    {
        let columns: Vec<(f64, Vec<f64>)> = (0..self.n())
            .into_par_iter()
            .map(|j| {
                let mut raw = Vec::with_capacity(self.range(j).len());
                let bg = weights(j, &self.delta[self.range(j)], &mut raw)?;
                let total = bg + raw.iter().sum::<f64>();
                if !(total > 0.0 && total.is_finite()) {
                    return Err(Error::ZeroIntensity {
                        index: j,
                        id: String::new(),
                    });
                }
                raw.iter_mut().for_each(|w| *w /= total);
                Ok((bg / total, raw))
            })
            .collect::<Result<_>>()?;
        // Weights that underflowed to zero are not stored.
        let mut background = Vec::with_capacity(self.n());
        let mut col_start = Vec::with_capacity(self.n() + 1);
        let mut parent = Vec::with_capacity(self.len());
        let mut prob = Vec::with_capacity(self.len());
        col_start.push(0);
        for (j, (bg, raw)) in columns.into_iter().enumerate() {
            background.push(bg);
            for (&i, w) in self.parent[self.range(j)].iter().zip(raw) {
                if w > 0.0 {
                    parent.push(i);
                    prob.push(w);
                }
            }
            col_start.push(prob.len());
        }
        Ok(TriggerMatrix {
            background,
            col_start,
            parent,
            prob,
        })
    }

    /// Initial matrix: exponential decay in time, Gaussian in space.
    pub fn init(&self, alpha: f64, beta: f64) -> Result<TriggerMatrix> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha and beta must be positive (got {alpha}, {beta})"
            )));
        }
        let k = 0.5 / (beta * beta);
        let p = self.normalize_columns(|_, deltas, raw| {
            raw.extend(
                deltas
                    .iter()
                    .map(|d| (-alpha * d.dt - (d.dx * d.dx + d.dy * d.dy) * k).exp()),
            );
            Ok(1.0)
        })?;
        debug_assert!(p.check().is_ok());
        Ok(p)
    }

    /// Matrix implied by fitted components.
    ///
    /// `time_horizon_hours` converts μ's event mass into a rate.
    pub fn update(
        &self,
        events: &[CrimeEvent],
        mu: &Kde2D,
        nu: &Kde1D,
        g: &Kde3D,
        time_horizon_hours: f64,
    ) -> Result<TriggerMatrix> {
        if events.len() != self.n() {
            return Err(Error::DimensionMismatch(events.len(), self.n()));
        }
        let p = self
            .normalize_columns(|j, deltas, raw| {
                let e = &events[j];
                raw.extend(deltas.iter().map(|d| g.density(d.dx, d.dy, d.dt)));
                Ok(mu.density(e.x, e.y) / time_horizon_hours * nu.density(e.c))
            })
            .map_err(|err| match err {
                Error::ZeroIntensity { index, .. } => Error::ZeroIntensity {
                    index,
                    id: events[index].id.clone(),
                },
                other => other,
            })?;
        debug_assert!(p.check().is_ok());
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerMatrix {
    background: Vec<f64>,
    col_start: Vec<usize>,
    parent: Vec<u32>,
    prob: Vec<f64>,
}

impl TriggerMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            background: vec![1.0; n],
            col_start: vec![0; n + 1],
            parent: Vec::new(),
            prob: Vec::new(),
        }
    }

    /// From a dense row-major matrix; zero entries are dropped.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(bad.len(), n));
        }
        let mut m = Self {
            background: Vec::with_capacity(n),
            col_start: vec![0],
            parent: Vec::new(),
            prob: Vec::new(),
        };
        for j in 0..n {
            for (i, row) in rows.iter().enumerate() {
                let v = row[j];
                if i > j && v != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "entry ({i}, {j}) below the diagonal must be zero"
                    )));
                }
                if i < j && v != 0.0 {
                    m.parent.push(i as u32);
                    m.prob.push(v);
                }
            }
            m.background.push(rows[j][j]);
            m.col_start.push(m.parent.len());
        }
        m.check()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.background.len()
    }

    pub fn background(&self, j: usize) -> f64 {
        self.background[j]
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.background
    }

    /// Nonzero-pattern parents of column `j` with their probabilities.
    pub fn parents(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_start[j]..self.col_start[j + 1];
        self.parent[r.clone()]
            .iter()
            .zip(&self.prob[r])
            .map(|(&i, &p)| (i as usize, p))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.background[j];
        }
        if i > j {
            return 0.0;
        }
        let r = self.col_start[j]..self.col_start[j + 1];
        match self.parent[r.clone()].binary_search(&(i as u32)) {
            Ok(k) => self.prob[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        self.background[j] + self.parents(j).map(|(_, p)| p).sum::<f64>()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut rows = vec![vec![0.0; n]; n];
        for j in 0..n {
            rows[j][j] = self.background[j];
            for (i, p) in self.parents(j) {
                rows[i][j] = p;
            }
        }
        rows
    }

    /// Column sums within 1e-9 and entries in `[0, 1]`.
    pub fn check(&self) -> Result<()> {
        for j in 0..self.n() {
            let sum = self.column_sum(j);
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("column {j} sums to {sum}")));
            }
            let in_range = |p: f64| (0.0..=1.0).contains(&p);
            if !in_range(self.background[j]) || self.parents(j).any(|(_, p)| !in_range(p)) {
                return Err(Error::InvalidParameter(format!("column {j} has entries outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Dense row-major CSV dump.
    pub fn write_dense_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.to_dense() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

pub fn init_matrix(
    events: &[CrimeEvent],
    alpha: f64,
    beta: f64,
    truncation: &Truncation,
) -> Result<TriggerMatrix> {
    CandidatePairs::new(events, truncation)?.init(alpha, beta)
}

pub fn update_matrix(
    events: &[CrimeEvent],
    mu: &Kde2D,
    nu: &Kde1D,
    g: &Kde3D,
    time_horizon_hours: f64,
    truncation: &Truncation,
) -> Result<TriggerMatrix> {
    CandidatePairs::new(events, truncation)?.update(events, mu, nu, g, time_horizon_hours)
}

/// Frobenius norm of `a − b`.
pub fn matrix_distance(a: &TriggerMatrix, b: &TriggerMatrix) -> Result<f64> {
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch(a.n(), b.n()));
    }
    let mut sum = 0.0;
    for j in 0..a.n() {
        sum += (a.background[j] - b.background[j]).powi(2);
        let mut pa = a.parents(j).peekable();
        let mut pb = b.parents(j).peekable();
        loop {
            let d = match (pa.peek(), pb.peek()) {
                (Some(&(ia, va)), Some(&(ib, vb))) => {
                    if ia == ib {
                        pa.next();
                        pb.next();
                        va - vb
                    } else if ia < ib {
                        pa.next();
                        va
                    } else {
                        pb.next();
                        vb
                    }
                }
                (Some(&(_, va)), None) => {
                    pa.next();
                    va
                }
                (None, Some(&(_, vb))) => {
                    pb.next();
                    vb
                }
                (None, None) => break,
            };
            sum += d * d;
        }
    }
    Ok(sum.sqrt())
}

/// One draw of the branching structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignments {
    pub background: Vec<CrimeEvent>,
    pub triggered: Vec<TriggerDelta>,
    /// Drawn parent per event, `None` for background.
    pub parents: Vec<Option<usize>>,
}

/// Draws one parent (or background) per column.
pub fn sample_assignments<R: Rng + ?Sized>(
    p: &TriggerMatrix,
    events: &[CrimeEvent],
    rng: &mut R,
) -> Result<Assignments> {
    if p.n() != events.len() {
        return Err(Error::DimensionMismatch(p.n(), events.len()));
    }
    let mut out = Assignments {
        background: Vec::new(),
        triggered: Vec::new(),
        parents: Vec::with_capacity(events.len()),
    };
    for (j, child) in events.iter().enumerate() {
        let u: f64 = rng.random::<f64>() * p.column_sum(j);
        let mut chosen = None;
        if u >= p.background(j) {
            let mut acc = p.background(j);
            // Rounding can leave u at the very top; the last positive parent
            // is kept in that case.
            for (i, prob) in p.parents(j).filter(|&(_, prob)| prob > 0.0) {
                chosen = Some(i);
                acc += prob;
                if u < acc {
                    break;
                }
            }
        }
        match chosen {
            None => out.background.push(child.clone()),
            Some(i) => {
                let parent = &events[i];
                out.triggered.push(TriggerDelta {
                    dx: child.x - parent.x,
                    dy: child.y - parent.y,
                    dt: child.t - parent.t,
                });
            }
        }
        out.parents.push(chosen);
    }
    Ok(out)
}
