//! Event ingestion, local planar projection and the police shift calendar.
//!
//! Events carry two time coordinates: linear time `t` (hours since the
//! catalog epoch) feeds the triggering kernel, circular time `c` (hours
//! since the start of the shift week, in `[0, 168)`) feeds the weekly
//! modulation.

use std::collections::HashSet;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, WEEK_HOURS};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }
}

/// Local equirectangular projection around `origin`, in meters.
pub fn project(lon: f64, lat: f64, origin: GeoPoint) -> (f64, f64) {
    let x = EARTH_RADIUS_M * (lon - origin.lon).to_radians() * origin.lat.to_radians().cos();
    let y = EARTH_RADIUS_M * (lat - origin.lat).to_radians();
    (x, y)
}

/// Inverse of [`project`]: meters back to `(lon, lat)` degrees.
pub fn inverse_project(x: f64, y: f64, origin: GeoPoint) -> (f64, f64) {
    let lat = origin.lat + (y / EARTH_RADIUS_M).to_degrees();
    let lon = origin.lon + (x / (EARTH_RADIUS_M * origin.lat.to_radians().cos())).to_degrees();
    (lon, lat)
}

/// Three daily shifts, 21 weekly shifts.
///
/// A shift belongs to the day on which it starts, so the shift that crosses
/// midnight (22:00–06:00 by default) is the third shift of the earlier day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftCalendar {
    boundaries: [f64; 3],
    #[serde(with = "weekday_index")]
    week_start: Weekday,
}

mod weekday_index {
    use chrono::Weekday;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(day: &Weekday, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(day.num_days_from_monday() as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Weekday, D::Error> {
        let index = u8::deserialize(d)?;
        Weekday::try_from(index).map_err(serde::de::Error::custom)
    }
}

impl Default for ShiftCalendar {
    fn default() -> Self {
        Self {
            boundaries: [6.0, 14.0, 22.0],
            week_start: Weekday::Mon,
        }
    }
}

impl ShiftCalendar {
    pub const SHIFTS_PER_DAY: usize = 3;
    pub const SHIFTS_PER_WEEK: usize = 21;

    pub fn new(boundaries: [f64; 3], week_start: Weekday) -> Result<Self> {
        let in_day = boundaries.iter().all(|b| (0.0..24.0).contains(b));
        let increasing = boundaries[0] < boundaries[1] && boundaries[1] < boundaries[2];
        if !in_day || !increasing {
            return Err(Error::InvalidParameter(format!(
                "shift boundaries must be strictly increasing clock hours in [0, 24), got {boundaries:?}"
            )));
        }
        Ok(Self {
            boundaries,
            week_start,
        })
    }

    pub fn boundaries(&self) -> [f64; 3] {
        self.boundaries
    }

    pub fn week_start(&self) -> Weekday {
        self.week_start
    }

    /// Weekly shift index in `[0, 21)` for circular time `c`.
    pub fn shift_index(&self, c: f64) -> usize {
        let c = c.rem_euclid(WEEK_HOURS);
        let day = (c / 24.0).floor() as usize % 7;
        let hour = c - 24.0 * day as f64;
        let [b0, b1, b2] = self.boundaries;
        let (day, shift) = if hour < b0 {
            ((day + 6) % 7, 2)
        } else if hour < b1 {
            (day, 0)
        } else if hour < b2 {
            (day, 1)
        } else {
            (day, 2)
        };
        day * Self::SHIFTS_PER_DAY + shift
    }

    pub fn shift_index_of(&self, event: &CrimeEvent) -> usize {
        self.shift_index(event.c)
    }

    /// Circular start times of the 21 shifts, ascending.
    fn circular_starts(&self) -> [f64; 21] {
        let mut starts = [0.0; 21];
        for day in 0..7 {
            for (k, b) in self.boundaries.iter().enumerate() {
                starts[day * 3 + k] = 24.0 * day as f64 + b;
            }
        }
        starts
    }

    /// Linear `(start, end)` of the shift containing linear time `t`.
    pub fn shift_bounds(&self, t: f64, week_offset: f64) -> (f64, f64) {
        let c = (week_offset + t).rem_euclid(WEEK_HOURS);
        let starts = self.circular_starts();
        // Last start at or before c, wrapping to the previous week.
        let (start_c, next_c) = match starts.iter().rposition(|&s| s <= c) {
            Some(i) if i + 1 < starts.len() => (starts[i], starts[i + 1]),
            Some(i) => (starts[i], starts[0] + WEEK_HOURS),
            None => (starts[20] - WEEK_HOURS, starts[0]),
        };
        let start = t - (c - start_c);
        (start, start + (next_c - start_c))
    }

    /// Whether linear time `t` is a shift boundary (within 1e-6 h).
    pub fn is_shift_start(&self, t: f64, week_offset: f64) -> bool {
        let (start, end) = self.shift_bounds(t, week_offset);
        (t - start).abs() < 1e-6 || (end - t).abs() < 1e-6
    }

    /// All complete shifts with start in `[from, to)`, as linear `(start, end)`.
    pub fn shifts_between(&self, from: f64, to: f64, week_offset: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let (mut start, mut end) = self.shift_bounds(from, week_offset);
        if start < from - 1e-9 {
            start = end;
            end = self.shift_bounds(start + 1e-9, week_offset).1;
        }
        while start < to - 1e-9 {
            out.push((start, end));
            let next = self.shift_bounds(end + 1e-9, week_offset);
            start = end;
            end = next.1;
        }
        out
    }

    /// Hours from the most recent week start (00:00) to `epoch`.
    pub fn week_offset(&self, epoch: NaiveDateTime) -> f64 {
        let days = (epoch.weekday().num_days_from_monday() + 7
            - self.week_start.num_days_from_monday())
            % 7;
        let time = epoch.time();
        days as f64 * 24.0
            + time.hour() as f64
            + time.minute() as f64 / 60.0
            + (time.second() as f64 + time.nanosecond() as f64 * 1e-9) / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrimeEvent {
    pub id: String,
    /// Meters east of the origin.
    pub x: f64,
    /// Meters north of the origin.
    pub y: f64,
    /// Hours since the catalog epoch.
    pub t: f64,
    /// Hours since the start of the shift week, in `[0, 168)`.
    pub c: f64,
}

/// Events sorted by `(t, id)` with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EventCatalog {
    events: Vec<CrimeEvent>,
    epoch: NaiveDateTime,
    origin: GeoPoint,
    week_offset: f64,
}

impl EventCatalog {
    /// Builds a catalog, sorting events and rejecting duplicate ids.
    ///
    /// `week_offset` is the epoch's position within the shift week; each
    /// event's `c` is recomputed from it.
    pub fn new(
        mut events: Vec<CrimeEvent>,
        epoch: NaiveDateTime,
        origin: GeoPoint,
        week_offset: f64,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(events.len());
        for e in &events {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if !(e.x.is_finite() && e.y.is_finite() && e.t.is_finite()) || e.t < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "event `{}` has invalid coordinates",
                    e.id
                )));
            }
        }
        drop(seen);
        for e in &mut events {
            e.c = circular_time(week_offset, e.t);
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.id.cmp(&b.id)));
        Ok(Self {
            events,
            epoch,
            origin,
            week_offset,
        })
    }

    pub fn empty(epoch: NaiveDateTime, origin: GeoPoint, week_offset: f64) -> Self {
        Self {
            events: Vec::new(),
            epoch,
            origin,
            week_offset,
        }
    }

    pub fn events(&self) -> &[CrimeEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn epoch(&self) -> NaiveDateTime {
        self.epoch
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn week_offset(&self) -> f64 {
        self.week_offset
    }

    pub fn circular_time(&self, t: f64) -> f64 {
        circular_time(self.week_offset, t)
    }

    /// Events with `t` in `[from, to)`.
    pub fn window(&self, from: f64, to: f64) -> &[CrimeEvent] {
        let lo = self.events.partition_point(|e| e.t < from);
        let hi = self.events.partition_point(|e| e.t < to);
        &self.events[lo..hi]
    }

    /// Splits into events before `t` and events at or after it.
    pub fn split_at_time(&self, t: f64) -> (EventCatalog, EventCatalog) {
        let k = self.events.partition_point(|e| e.t < t);
        let part = |events: &[CrimeEvent]| EventCatalog {
            events: events.to_vec(),
            ..self.clone_meta()
        };
        (part(&self.events[..k]), part(&self.events[k..]))
    }

    fn clone_meta(&self) -> EventCatalog {
        EventCatalog::empty(self.epoch, self.origin, self.week_offset)
    }

    /// Writes `id,x,y,t,c` with 6 decimals.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "x", "y", "t", "c"])?;
        for e in &self.events {
            w.write_record([
                e.id.clone(),
                format!("{:.6}", e.x),
                format!("{:.6}", e.y),
                format!("{:.6}", e.t),
                format!("{:.6}", e.c),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn circular_time(week_offset: f64, t: f64) -> f64 {
    let c = (week_offset + t).rem_euclid(WEEK_HOURS);
    // rem_euclid can round up to the period itself
    if c >= WEEK_HOURS {
        0.0
    } else {
        c
    }
}

/// Where linear time zero sits and how the week is laid out.
#[derive(Debug, Clone, Copy)]
pub struct CatalogParams {
    pub epoch: NaiveDateTime,
    pub origin: GeoPoint,
    pub calendar: ShiftCalendar,
}

impl CatalogParams {
    pub fn week_offset(&self) -> f64 {
        self.calendar.week_offset(self.epoch)
    }
}

/// Parses ISO-8601 local timestamps (`T` or space separator, optional
/// seconds and fraction; an explicit UTC offset is accepted and dropped).
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            chrono::DateTime::parse_from_rfc3339(s)
                .ok()
                .map(|d| d.naive_local())
        })
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

pub fn hours_between(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    let delta = to - from;
    match delta.num_microseconds() {
        Some(us) => us as f64 / 3.6e9,
        None => delta.num_seconds() as f64 / 3600.0,
    }
}

/// Reads a catalog CSV.
///
/// Two layouts are accepted: raw records `id,lon,lat,timestamp` (projected
/// around `params.origin`, timed against `params.epoch`) and pre-projected
/// `id,x,y,t,c` in meters/hours, whose `c` column is recomputed from `t`.
pub fn parse_catalog<R: Read>(reader: R, params: &CatalogParams) -> Result<EventCatalog> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let raw = header == ["id", "lon", "lat", "timestamp"];
    let projected = header == ["id", "x", "y", "t", "c"];
    if !raw && !projected {
        return Err(Error::UnknownHeader(header.join(",")));
    }
    let week_offset = params.week_offset();
    let mut events = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let row = k as u64 + 1;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize, name: &str| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedRow {
                    row,
                    message: format!("invalid {name} `{}`", field(i)),
                })
        };
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty id".into(),
            });
        }
        let event = if raw {
            let lon = number(1, "lon")?;
            let lat = number(2, "lat")?;
            if lat.abs() >= 89.0 {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("latitude {lat} out of range"),
                });
            }
            let stamp = parse_timestamp(field(3)).ok_or_else(|| Error::MalformedRow {
                row,
                message: format!("invalid timestamp `{}`", field(3)),
            })?;
            if stamp < params.epoch {
                return Err(Error::BeforeEpoch {
                    row,
                    timestamp: field(3).to_string(),
                });
            }
            let (x, y) = project(lon, lat, params.origin);
            let t = hours_between(params.epoch, stamp);
            CrimeEvent { id, x, y, t, c: circular_time(week_offset, t) }
        } else {
            let x = number(1, "x")?;
            let y = number(2, "y")?;
            let t = number(3, "t")?;
            if t < 0.0 {
                return Err(Error::BeforeEpoch {
                    row,
                    timestamp: field(3).to_string(),
                });
            }
            let c = circular_time(week_offset, t);
            let stated = number(4, "c")?;
            let gap = (stated - c).rem_euclid(WEEK_HOURS);
            if gap.min(WEEK_HOURS - gap) > 1e-3 {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("circular time {stated} inconsistent with t = {t} (expected {c:.6})"),
                });
            }
            CrimeEvent { id, x, y, t, c }
        };
        events.push(event);
    }
    EventCatalog::new(events, params.epoch, params.origin, week_offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monday() -> NaiveDateTime {
        parse_timestamp("2017-06-19T00:00:00").unwrap()
    }

    fn params() -> CatalogParams {
        CatalogParams {
            epoch: monday(),
            origin: GeoPoint::new(-74.07, 4.6),
            calendar: ShiftCalendar::default(),
        }
    }

    fn parse(body: &str) -> Result<EventCatalog> {
        parse_catalog(body.as_bytes(), &params())
    }

    #[test]
    fn header_only_gives_empty_catalog() {
        let cat = parse("id,lon,lat,timestamp\n").unwrap();
        assert!(cat.is_empty());
    }

    #[test]
    fn event_at_epoch_and_origin() {
        let cat = parse("id,lon,lat,timestamp\na,-74.07,4.6,2017-06-19T00:00:00\n").unwrap();
        let e = &cat.events()[0];
        assert_eq!((e.x, e.y, e.t), (0.0, 0.0, 0.0));
    }

    #[test]
    fn circular_time_on_week_aligned_epoch() {
        let cat = parse("id,lon,lat,timestamp\na,-74.07,4.6,2017-06-21T13:30:00\n").unwrap();
        let e = &cat.events()[0];
        assert!((e.t - 61.5).abs() < 1e-12);
        assert!((e.c - 61.5).abs() < 1e-12);
    }

    #[test]
    fn circular_time_with_offset_epoch() {
        // Thursday noon epoch: offset = 3 days + 12 h.
        let mut p = params();
        p.epoch = parse_timestamp("2017-06-22 12:00").unwrap();
        assert_eq!(p.week_offset(), 84.0);
        let cat = parse_catalog(
            "id,lon,lat,timestamp\na,-74.07,4.6,2017-06-26T01:00:00\n".as_bytes(),
            &p,
        )
        .unwrap();
        let e = &cat.events()[0];
        assert!((e.t - 85.0).abs() < 1e-12);
        assert!((e.c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn errors_name_the_row() {
        let err = parse("id,lon,lat,timestamp\na,1,2,2017-06-19T00:00:00\nb,x,2,2017-06-19T00:00:00\n")
            .unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }), "{err}");
        let err = parse("id,lon,lat,timestamp\na,1,2,not-a-date\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = parse(
            "id,lon,lat,timestamp\na,-74.07,4.6,2017-06-19T00:00:00\na,-74.07,4.6,2017-06-19T01:00:00\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "a"));
    }

    #[test]
    fn timestamp_before_epoch_rejected() {
        let err = parse("id,lon,lat,timestamp\na,-74.07,4.6,2017-06-18T23:00:00\n").unwrap_err();
        assert!(matches!(err, Error::BeforeEpoch { row: 1, .. }));
    }

    #[test]
    fn sorted_by_time_then_id() {
        let cat = parse(
            "id,lon,lat,timestamp\nb,-74.07,4.6,2017-06-19T02:00:00\nz,-74.07,4.6,2017-06-19T01:00:00\na,-74.07,4.6,2017-06-19T02:00:00\n",
        )
        .unwrap();
        let ids: Vec<_> = cat.events().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["z", "a", "b"]);
    }

    #[test]
    fn projection_examples() {
        let origin = GeoPoint::new(-74.07, 4.6);
        assert_eq!(project(origin.lon, origin.lat, origin), (0.0, 0.0));

        let (x, y) = project(-74.07, 4.601, origin);
        let oracle = EARTH_RADIUS_M * std::f64::consts::PI / 180.0 * 0.001;
        assert!(x.abs() < 1e-9);
        assert!((y - oracle).abs() < 1e-6 && (y - 111.19).abs() < 0.01);

        let (x, y) = project(-74.069, 4.6, origin);
        let oracle = EARTH_RADIUS_M * std::f64::consts::PI / 180.0 * 0.001 * 4.6f64.to_radians().cos();
        assert!((x - oracle).abs() < 1e-6 && (x - 110.84).abs() < 0.01);
        assert!(y.abs() < 1e-9);
    }

    #[test]
    fn shift_index_examples() {
        let cal = ShiftCalendar::default();
        assert_eq!(cal.shift_index(0.0), 20);
        assert_eq!(cal.shift_index(7.0), 0);
        assert_eq!(cal.shift_index(167.0), 20);
        assert_eq!(cal.shift_index(22.0), 2);
        assert_eq!(cal.shift_index(29.0), 2);
        assert_eq!(cal.shift_index(30.0), 3);
    }

    #[test]
    fn shift_index_matches_hour_table() {
        // Direct table: hour h of day d maps by clock hour alone.
        let cal = ShiftCalendar::default();
        for hour in 0..168 {
            let day = hour / 24;
            let clock = hour % 24;
            let expected = match clock {
                6..=13 => day * 3,
                14..=21 => day * 3 + 1,
                22..=23 => day * 3 + 2,
                _ => ((day + 6) % 7) * 3 + 2,
            };
            assert_eq!(cal.shift_index(hour as f64 + 0.5), expected, "hour {hour}");
        }
    }

    #[test]
    fn calendar_validation() {
        assert!(ShiftCalendar::new([6.0, 6.0, 22.0], Weekday::Mon).is_err());
        assert!(ShiftCalendar::new([22.0, 6.0, 14.0], Weekday::Mon).is_err());
        assert!(ShiftCalendar::new([0.0, 8.0, 16.0], Weekday::Sun).is_ok());
    }

    #[test]
    fn shift_bounds_and_enumeration() {
        let cal = ShiftCalendar::default();
        assert_eq!(cal.shift_bounds(7.0, 0.0), (6.0, 14.0));
        assert_eq!(cal.shift_bounds(1.0, 0.0), (-2.0, 6.0));
        assert_eq!(cal.shift_bounds(167.0, 0.0), (166.0, 174.0));
        assert!(cal.is_shift_start(14.0, 0.0));
        assert!(!cal.is_shift_start(15.0, 0.0));
        let shifts = cal.shifts_between(0.0, 168.0, 0.0);
        assert_eq!(shifts.len(), 21);
        assert_eq!(shifts[0], (6.0, 14.0));
        assert!(shifts.iter().all(|(s, e)| e - s == 8.0));
    }

    #[test]
    fn week_offset_respects_week_start() {
        let cal = ShiftCalendar::new([6.0, 14.0, 22.0], Weekday::Sun).unwrap();
        assert_eq!(cal.week_offset(monday()), 24.0);
    }

    #[test]
    fn projected_layout_recomputes_circular_time() {
        let cat = parse("id,x,y,t,c\nq,10.5,-3,170,2\n").unwrap();
        assert_eq!(cat.events()[0].c, 2.0);
        assert!(parse("id,x,y,t,c\nq,10.5,-3,170,5\n").is_err());
    }

    #[test]
    fn unknown_header_rejected() {
        assert!(matches!(parse("a,b\n1,2\n"), Err(Error::UnknownHeader(_))));
    }
}
