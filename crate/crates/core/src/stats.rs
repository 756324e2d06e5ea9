//! Paired model comparison with the Wilcoxon signed-rank test.
//!
//! Zero differences are dropped and tied magnitudes get average ranks.
//! Ranks are carried doubled so average ranks stay integral, which lets the
//! exact null distribution be counted without rounding. Up to
//! [`EXACT_LIMIT`] nonzero differences the p-value is exact; beyond that a
//! normal approximation with tie and continuity corrections is used.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

pub const EXACT_LIMIT: usize = 20;
pub const MIN_NONZERO: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// Differences tend to be positive (first model better).
    Greater,
    /// Differences tend to be negative.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n_nonzero: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Doubled average ranks of `|d|` and the sign of each nonzero difference.
pub fn signed_doubled_ranks(diffs: &[f64]) -> (Vec<u32>, Vec<bool>) {
    let mut nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    nonzero.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut ranks = vec![0u32; nonzero.len()];
    let mut i = 0;
    while i < nonzero.len() {
        let mut j = i;
        while j + 1 < nonzero.len() && nonzero[j + 1].abs() == nonzero[i].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled.
        let doubled = (i + 1 + j + 1) as u32;
        ranks[i..=j].fill(doubled);
        i = j + 1;
    }
    let positive = nonzero.iter().map(|d| *d > 0.0).collect();
    (ranks, positive)
}

/// Number of sign assignments giving each doubled `W⁺` value.
fn null_counts(ranks: &[u32]) -> Vec<u64> {
    let total: u32 = ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Exact p-value given doubled ranks and the doubled positive rank sum.
pub fn exact_p_value(ranks: &[u32], doubled_w_plus: u32, alternative: Alternative) -> f64 {
    let counts = null_counts(ranks);
    let total_doubled: u32 = ranks.iter().sum();
    let patterns = (1u64 << ranks.len()) as f64;
    let at_most = |w: u32| counts[..=w as usize].iter().sum::<u64>();
    let at_least = |w: u32| counts[w as usize..].iter().sum::<u64>();
    match alternative {
        Alternative::TwoSided => {
            let low = doubled_w_plus.min(total_doubled - doubled_w_plus);
            (2.0 * at_most(low) as f64 / patterns).min(1.0)
        }
        Alternative::Greater => at_least(doubled_w_plus) as f64 / patterns,
        Alternative::Less => at_most(doubled_w_plus) as f64 / patterns,
    }
}

/// Normal approximation with tie and continuity corrections.
pub fn normal_p_value(ranks: &[u32], doubled_w_plus: u32, alternative: Alternative) -> f64 {
    let m = ranks.len() as f64;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < ranks.len() {
        let j = ranks[i..].iter().take_while(|r| **r == ranks[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let mean = m * (m + 1.0) / 4.0;
    let var = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    let w = doubled_w_plus as f64 / 2.0;
    let normal = Normal::standard();
    let p = match alternative {
        Alternative::TwoSided => {
            let z = ((w - mean).abs() - 0.5).max(0.0) / sd;
            2.0 * normal.sf(z)
        }
        Alternative::Greater => normal.sf((w - mean - 0.5) / sd),
        Alternative::Less => normal.cdf((w - mean + 0.5) / sd),
    };
    p.min(1.0)
}

pub fn wilcoxon_signed_rank(diffs: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidParameter("differences must be finite".into()));
    }
    let (ranks, positive) = signed_doubled_ranks(diffs);
    if ranks.is_empty() {
        return Err(Error::AllDifferencesZero);
    }
    if ranks.len() < MIN_NONZERO {
        return Err(Error::TooFewDifferences(ranks.len()));
    }
    let doubled_plus: u32 = ranks.iter().zip(&positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let doubled_total: u32 = ranks.iter().sum();
    let exact = ranks.len() <= EXACT_LIMIT;
    let p_value = if exact {
        exact_p_value(&ranks, doubled_plus, alternative)
    } else {
        normal_p_value(&ranks, doubled_plus, alternative)
    };
    let w_plus = doubled_plus as f64 / 2.0;
    let w_minus = (doubled_total - doubled_plus) as f64 / 2.0;
    Ok(WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n_nonzero: ranks.len(),
        p_value,
        exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_a: String,
    pub model_b: String,
    pub result: WilcoxonResult,
}

/// All pairwise tests, in input order, on differences `a − b`.
pub fn compare_models(
    series: &[(String, Vec<f64>)],
    alternative: Alternative,
) -> Result<Vec<ComparisonRow>> {
    let Some((_, first)) = series.first() else {
        return Ok(Vec::new());
    };
    for (name, values) in series {
        if values.len() != first.len() {
            return Err(Error::PeriodMismatch {
                model: name.clone(),
                found: values.len(),
                expected: first.len(),
            });
        }
    }
    let mut rows = Vec::new();
    for (i, (name_a, a)) in series.iter().enumerate() {
        for (name_b, b) in &series[i + 1..] {
            let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            rows.push(ComparisonRow {
                model_a: name_a.clone(),
                model_b: name_b.clone(),
                result: wilcoxon_signed_rank(&diffs, alternative)?,
            });
        }
    }
    Ok(rows)
}

/// Aligned text table: model pair and p-value to three decimals.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let labels: Vec<String> = rows
        .iter()
        .map(|r| format!("{} vs. {}", r.model_a, r.model_b))
        .collect();
    let width = labels.iter().map(String::len).max().unwrap_or(0).max("Model".len());
    let mut out = format!("{:<width$}  {:>8}  {:>7}\n", "Model", "W", "p-value");
    for (label, row) in labels.iter().zip(rows) {
        out.push_str(&format!(
            "{:<width$}  {:>8.1}  {:>7.3}\n",
            label, row.result.statistic, row.result.p_value
        ));
    }
    out
}

/// CSV with columns `model_a,model_b,W,p_value`.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model_a", "model_b", "W", "p_value"])?;
    for r in rows {
        w.write_record([
            r.model_a.clone(),
            r.model_b.clone(),
            r.result.statistic.to_string(),
            r.result.p_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_five() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], Alternative::TwoSided).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.p_value, 0.0625);
        assert!(r.exact);
    }

    #[test]
    fn antisymmetric_differences_are_maximal() {
        let r = wilcoxon_signed_rank(&[-1.0, 1.0, -2.0, 2.0, -3.0, 3.0], Alternative::TwoSided).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn zero_differences_are_dropped() {
        let base = [0.3, -0.1, 0.5, 0.2, 0.7, 0.4];
        let mut padded = base.to_vec();
        padded.extend([0.0, 0.0]);
        let a = wilcoxon_signed_rank(&base, Alternative::TwoSided).unwrap();
        let b = wilcoxon_signed_rank(&padded, Alternative::TwoSided).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn error_cases() {
        assert!(matches!(
            wilcoxon_signed_rank(&[0.0; 6], Alternative::TwoSided),
            Err(Error::AllDifferencesZero)
        ));
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0, 2.0, 0.0, 3.0, -1.5], Alternative::TwoSided),
            Err(Error::TooFewDifferences(4))
        ));
    }

    #[test]
    fn tied_ranks_are_averaged() {
        let (ranks, _) = signed_doubled_ranks(&[1.0, -1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(ranks, vec![3, 3, 6, 10, 10, 10]);
    }

    #[test]
    fn one_sided_dominance() {
        let d = [0.1, 0.2, 0.05, 0.3, 0.15, 0.12, 0.22, 0.08];
        let g = wilcoxon_signed_rank(&d, Alternative::Greater).unwrap();
        assert_eq!(g.p_value, 1.0 / 256.0);
        let l = wilcoxon_signed_rank(&d, Alternative::Less).unwrap();
        assert_eq!(l.p_value, 1.0);
    }

    #[test]
    fn large_samples_use_normal_path() {
        let d: Vec<f64> = (1..=30).map(|k| if k % 3 == 0 { -(k as f64) } else { k as f64 }).collect();
        let r = wilcoxon_signed_rank(&d, Alternative::TwoSided).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
    }

    #[test]
    fn three_models_give_three_rows() {
        let s = vec![
            ("a".to_string(), vec![0.5, 0.6, 0.7, 0.4, 0.55]),
            ("b".to_string(), vec![0.4, 0.3, 0.65, 0.35, 0.5]),
            ("c".to_string(), vec![0.1, 0.2, 0.3, 0.25, 0.15]),
        ];
        let rows = compare_models(&s, Alternative::TwoSided).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[2].model_a.as_str(), rows[2].model_b.as_str()), ("b", "c"));
        let table = format_table(&rows);
        assert!(table.contains("a vs. b"));
        assert!(table.contains("0.062"));
    }

    #[test]
    fn dominant_model_over_eight_periods() {
        let a = vec![0.6, 0.62, 0.58, 0.65, 0.7, 0.61, 0.59, 0.64];
        let b: Vec<f64> = a.iter().enumerate().map(|(k, v)| v - 0.01 * (k + 1) as f64).collect();
        let rows = compare_models(&[("a".into(), a), ("b".into(), b)], Alternative::TwoSided).unwrap();
        assert_eq!(rows[0].result.p_value, 2.0 / 256.0);
        assert!((rows[0].result.p_value - 0.0078).abs() < 1e-4);
    }

    #[test]
    fn identical_series_fail() {
        let a = vec![0.5, 0.6, 0.7, 0.4, 0.55];
        let err = compare_models(&[("a".into(), a.clone()), ("b".into(), a)], Alternative::TwoSided);
        assert!(matches!(err, Err(Error::AllDifferencesZero)));
    }

    #[test]
    fn mismatched_periods_fail() {
        let err = compare_models(
            &[("a".into(), vec![1.0; 6]), ("b".into(), vec![0.0; 5])],
            Alternative::TwoSided,
        );
        assert!(matches!(err, Err(Error::PeriodMismatch { .. })));
    }
}
