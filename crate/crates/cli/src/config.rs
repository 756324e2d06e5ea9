//! Flat `key=value` run configuration.
//!
//! Every key has a default. A config file (`--config path`) overrides the
//! defaults and `--key value` flags override the file.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{NaiveDateTime, Weekday};
use sepp_core::events::parse_timestamp;
use sepp_core::{BandwidthGrid, BandwidthMode, ShiftCalendar, TrainConfig, Truncation};

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const KEYS: &[Key] = &[
    key("model_kind", "variable-bw", "kde | fixed-bw | variable-bw"),
    key("alpha", "0.03", "initial temporal decay of the trigger matrix, 1/h"),
    key("beta", "100", "initial spatial scale of the trigger matrix, m"),
    key("epsilon", "0.01", "convergence threshold on the trigger-matrix distance"),
    key("max_iterations", "50", "declustering iteration cap"),
    key("allow_nonconvergence", "false", "keep the last iteration's model instead of failing"),
    key("seed", "0", "master seed"),
    key("bw_space_min", "10", "smallest spatial bandwidth candidate, m"),
    key("bw_space_max", "2000", "largest spatial bandwidth candidate, m"),
    key("bw_time_min", "0.5", "smallest temporal bandwidth candidate, h"),
    key("bw_time_max", "72", "largest temporal bandwidth candidate, h"),
    key("bw_count", "16", "log-spaced candidates per bandwidth grid"),
    key("truncation_hours", "720", "largest parent-child time gap, h"),
    key("truncation_radius", "3000", "largest parent-child distance, m"),
    key("time_horizon_hours", "auto", "training window length, h (auto: catalog span)"),
    key("epoch", "auto", "timestamp of t = 0 (auto: start of the week holding the first record)"),
    key("origin_lon", "auto", "projection origin longitude (auto: mean of the records)"),
    key("origin_lat", "auto", "projection origin latitude (auto: mean of the records)"),
    key("shift_boundaries", "6,14,22", "clock hours where the three daily shifts start"),
    key("week_start", "mon", "first day of the shift week"),
    key("bbox", "auto", "grid extent x0,y0,x1,y1 in m (auto: training events)"),
    key("cell_size", "150", "grid cell side, m"),
    key("regions", "", "CSV of row,col,region_id labels"),
    key("mask", "", "CSV of row,col cells to keep"),
    key("slot_start", "", "forecast shift start: timestamp or hours since the epoch"),
    key("coverage", "0.1", "fraction of cells flagged as hotspots"),
    key("top_k_per_region", "", "flag the k best cells per region instead of by coverage"),
    key("n_mc", "64", "Monte Carlo points per cell"),
    key("period", "shift", "evaluation period: shift | day | week"),
    key("one_sided", "false", "test whether the first model beats the second"),
    key("sim_preset", "default", "simulation ground truth: default | diffuse"),
    key("sim_theta", "auto", "branching ratio of the simulation (auto: preset)"),
    key("sim_weeks", "14", "simulated weeks"),
    key("threads", "0", "worker threads (0: all cores)"),
];

/// Effective configuration, one string per key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect(),
        }
    }
}

fn known(name: &str) -> Result<(), CliError> {
    if KEYS.iter().any(|k| k.name == name) {
        Ok(())
    } else {
        Err(CliError::usage(format!("unknown config key `{name}`")))
    }
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.parse_text(&text)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), CliError> {
        known(name)?;
        self.values.insert(name.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// `key=value` lines in key order, loadable with `--config`.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> Result<T, CliError> {
        let raw = self.get(name);
        raw.parse()
            .map_err(|_| CliError::usage(format!("invalid value `{raw}` for {name}")))
    }

    pub fn f64(&self, name: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(name)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::usage(format!("{name} must be finite")))
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize, CliError> {
        self.parse(name)
    }

    pub fn u64(&self, name: &str) -> Result<u64, CliError> {
        self.parse(name)
    }

    pub fn bool(&self, name: &str) -> Result<bool, CliError> {
        match self.get(name).to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" | "" => Ok(false),
            other => Err(CliError::usage(format!("invalid value `{other}` for {name}"))),
        }
    }

    /// `None` for `auto` or an empty value.
    pub fn optional_f64(&self, name: &str) -> Result<Option<f64>, CliError> {
        match self.get(name) {
            "" | "auto" => Ok(None),
            _ => self.f64(name).map(Some),
        }
    }

    pub fn optional_usize(&self, name: &str) -> Result<Option<usize>, CliError> {
        match self.get(name) {
            "" | "auto" => Ok(None),
            _ => self.usize(name).map(Some),
        }
    }

    pub fn path(&self, name: &str) -> Option<&Path> {
        match self.get(name) {
            "" => None,
            p => Some(Path::new(p)),
        }
    }

    fn list(&self, name: &str, len: usize) -> Result<Vec<f64>, CliError> {
        let parts: Result<Vec<f64>, _> = self.get(name).split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parts {
            Ok(v) if v.len() == len && v.iter().all(|x| x.is_finite()) => Ok(v),
            _ => Err(CliError::usage(format!(
                "{name} needs {len} comma-separated numbers, got `{}`",
                self.get(name)
            ))),
        }
    }

    pub fn bbox(&self) -> Result<Option<[f64; 4]>, CliError> {
        if self.get("bbox") == "auto" {
            return Ok(None);
        }
        let v = self.list("bbox", 4)?;
        Ok(Some([v[0], v[1], v[2], v[3]]))
    }

    pub fn calendar(&self) -> Result<ShiftCalendar, CliError> {
        let b = self.list("shift_boundaries", 3)?;
        let day: Weekday = self
            .get("week_start")
            .parse()
            .map_err(|_| CliError::usage(format!("invalid week_start `{}`", self.get("week_start"))))?;
        Ok(ShiftCalendar::new([b[0], b[1], b[2]], day)?)
    }

    pub fn epoch(&self) -> Result<Option<NaiveDateTime>, CliError> {
        match self.get("epoch") {
            "auto" | "" => Ok(None),
            s => parse_timestamp(s)
                .map(Some)
                .ok_or_else(|| CliError::usage(format!("invalid epoch `{s}`"))),
        }
    }

    pub fn model_kind(&self) -> Result<ModelKind, CliError> {
        match self.get("model_kind") {
            "kde" => Ok(ModelKind::Kde),
            "fixed-bw" => Ok(ModelKind::FixedBw),
            "variable-bw" => Ok(ModelKind::VariableBw),
            other => Err(CliError::usage(format!(
                "unknown model kind `{other}` (expected kde, fixed-bw or variable-bw)"
            ))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let count = self.usize("bw_count")?;
        let mode = match self.model_kind()? {
            ModelKind::FixedBw => BandwidthMode::Fixed,
            _ => BandwidthMode::Variable,
        };
        let config = TrainConfig {
            alpha: self.f64("alpha")?,
            beta: self.f64("beta")?,
            epsilon: self.f64("epsilon")?,
            max_iterations: self.usize("max_iterations")?,
            master_seed: self.u64("seed")?,
            spatial_bandwidths: BandwidthGrid::log_spaced(self.f64("bw_space_min")?, self.f64("bw_space_max")?, count)?,
            temporal_bandwidths: BandwidthGrid::log_spaced(self.f64("bw_time_min")?, self.f64("bw_time_max")?, count)?,
            truncation: Truncation {
                horizon_hours: self.f64("truncation_hours")?,
                radius_m: self.f64("truncation_radius")?,
            },
            bandwidth_mode: mode,
            time_horizon_hours: self.optional_f64("time_horizon_hours")?,
            allow_nonconvergence: self.bool("allow_nonconvergence")?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Kde,
    FixedBw,
    VariableBw,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Kde => "kde",
            ModelKind::FixedBw => "fixed-bw",
            ModelKind::VariableBw => "variable-bw",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.parse_text("# comment\nalpha = 0.5\n\ncell_size=200 # trailing\n").unwrap();
        assert_eq!(c.f64("alpha").unwrap(), 0.5);
        c.set("alpha", "0.7").unwrap();
        assert_eq!(c.f64("alpha").unwrap(), 0.7);
        assert_eq!(c.f64("cell_size").unwrap(), 200.0);
        assert_eq!(c.f64("beta").unwrap(), 100.0);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("seed", "42").unwrap();
        let mut d = RunConfig::default();
        d.parse_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.parse_text("nonsense=1").is_err());
        assert!(c.parse_text("alpha").is_err());
        c.set("alpha", "fast").unwrap();
        assert!(c.f64("alpha").is_err());
        c.set("model_kind", "neural").unwrap();
        assert!(c.model_kind().is_err());
    }

    #[test]
    fn defaults_match_training_defaults() {
        let c = RunConfig::default();
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(c.calendar().unwrap(), ShiftCalendar::default());
        assert_eq!(c.bbox().unwrap(), None);
    }

    #[test]
    fn fixed_kind_freezes_bandwidths() {
        let mut c = RunConfig::default();
        c.set("model_kind", "fixed-bw").unwrap();
        assert_eq!(c.train_config().unwrap().bandwidth_mode, BandwidthMode::Fixed);
    }
}
