//! Versioned JSON model artifact.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use sepp_core::forecast::Slot;
use sepp_core::{
    CrimeEvent, Diagnostics, EventCatalog, GeoPoint, IntensityModel, Kde1D, Kde2D, Kde3D,
    PlainKde, ShiftCalendar, TrainedModel, Truncation,
};

use crate::config::ModelKind;
use crate::CliError;

pub const FORMAT: &str = "sepp-model";
pub const VERSION: u32 = 1;
const TIMESTAMP: &str = "%Y-%m-%dT%H:%M:%S%.f";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    /// Effective configuration the model was trained with.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub epoch: String,
    pub origin: GeoPoint,
    pub week_offset: f64,
    pub calendar: ShiftCalendar,
    pub time_horizon_hours: f64,
    pub truncation: Truncation,
    pub mu: Kde2D,
    pub nu: Option<Kde1D>,
    pub g: Option<Kde3D>,
    pub history: Vec<CrimeEvent>,
    pub diagnostics: Option<Diagnostics>,
}

/// A loaded model, ready to forecast.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Sepp(TrainedModel),
    Kde { kde: PlainKde, history: EventCatalog },
}

pub struct Provenance<'a> {
    pub config: &'a BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub calendar: ShiftCalendar,
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP).to_string()
}

impl ModelFile {
    pub fn from_trained(model: &TrainedModel, kind: ModelKind, prov: Provenance<'_>) -> Self {
        let h = &model.history;
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            config: prov.config.clone(),
            inputs: prov.inputs,
            epoch: format_timestamp(h.epoch()),
            origin: h.origin(),
            week_offset: h.week_offset(),
            calendar: prov.calendar,
            time_horizon_hours: model.time_horizon_hours,
            truncation: model.truncation,
            mu: model.mu.clone(),
            nu: Some(model.nu.clone()),
            g: Some(model.g.clone()),
            history: h.events().to_vec(),
            diagnostics: Some(model.diagnostics.clone()),
        }
    }

    pub fn from_plain(kde: &PlainKde, history: &EventCatalog, truncation: Truncation, prov: Provenance<'_>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: ModelKind::Kde,
            config: prov.config.clone(),
            inputs: prov.inputs,
            epoch: format_timestamp(history.epoch()),
            origin: history.origin(),
            week_offset: history.week_offset(),
            calendar: prov.calendar,
            time_horizon_hours: kde.time_horizon_hours,
            truncation,
            mu: kde.kde.clone(),
            nu: None,
            g: None,
            history: history.events().to_vec(),
            diagnostics: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: not a model file: {e}", path.display())))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(CliError::usage(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        Ok(file)
    }

    pub fn epoch(&self) -> Result<NaiveDateTime, CliError> {
        NaiveDateTime::parse_from_str(&self.epoch, TIMESTAMP)
            .map_err(|_| CliError::usage(format!("invalid model epoch `{}`", self.epoch)))
    }

    pub fn history(&self) -> Result<EventCatalog, CliError> {
        Ok(EventCatalog::new(self.history.clone(), self.epoch()?, self.origin, self.week_offset)?)
    }

    pub fn model(&self) -> Result<Model, CliError> {
        let history = self.history()?;
        match (self.kind, &self.nu, &self.g) {
            (ModelKind::Kde, _, _) => Ok(Model::Kde {
                kde: PlainKde { kde: self.mu.clone(), time_horizon_hours: self.time_horizon_hours },
                history,
            }),
            (_, Some(nu), Some(g)) => Ok(Model::Sepp(TrainedModel {
                mu: self.mu.clone(),
                nu: nu.clone(),
                g: g.clone(),
                history,
                time_horizon_hours: self.time_horizon_hours,
                truncation: self.truncation,
                diagnostics: self.diagnostics.clone().unwrap_or_default(),
            })),
            _ => Err(CliError::usage("model file lacks the temporal or triggering component".into())),
        }
    }
}

impl Model {
    pub fn history(&self) -> &EventCatalog {
        match self {
            Model::Sepp(m) => &m.history,
            Model::Kde { history, .. } => history,
        }
    }
}

impl IntensityModel for Model {
    fn static_part(&self, x: f64, y: f64) -> f64 {
        match self {
            Model::Sepp(m) => m.static_part(x, y),
            Model::Kde { kde, .. } => kde.static_part(x, y),
        }
    }

    fn intensity_from(&self, sp: f64, history: &[CrimeEvent], x: f64, y: f64, t: f64) -> f64 {
        match self {
            Model::Sepp(m) => m.intensity_from(sp, history, x, y, t),
            Model::Kde { kde, .. } => kde.intensity_from(sp, history, x, y, t),
        }
    }

    fn may_affect(&self, event: &CrimeEvent, rect: [f64; 4], slot: Slot) -> bool {
        match self {
            Model::Sepp(m) => m.may_affect(event, rect, slot),
            Model::Kde { kde, .. } => kde.may_affect(event, rect, slot),
        }
    }
}
