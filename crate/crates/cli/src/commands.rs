use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime};
use serde_json::json;
use sepp_core::declustering::{decluster_with_progress, MIN_TRAINING_EVENTS};
use sepp_core::events::parse_timestamp;
use sepp_core::stats::{format_table, write_comparison_csv};
use sepp_core::{
    area_fraction, compare_models, forecast_slots, hit_rate, parse_catalog, rank_hotspots_in,
    simulate as draw_catalog, top_k_per_region, Alternative, CatalogParams,
    CrimeEvent, Error, EventCatalog, GeoPoint, Grid, GridForecast, GroundTruth, PlainKde,
    ShiftCalendar, Slot, WEEK_HOURS,
};

use crate::config::{ModelKind, RunConfig};
use crate::model_file::{format_timestamp, Model, ModelFile, Provenance};
use crate::CliError;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn display(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

/// Writes `<path>.provenance`: the effective config as a loadable
/// `key=value` file.
fn write_provenance(path: &Path, command: &str, config: &RunConfig, inputs: &[String]) -> Result<(), CliError> {
    let mut target = path.as_os_str().to_owned();
    target.push(".provenance");
    let target = PathBuf::from(target);
    let mut text = format!("# sepp {command}\n");
    if !inputs.is_empty() {
        text.push_str(&format!("# inputs: {}\n", inputs.join(" ")));
    }
    text.push_str(&config.to_text());
    std::fs::write(&target, text).map_err(|e| CliError::io(&target, e))
}

/// Latest `week_start` midnight at or before `t`.
fn week_floor(t: NaiveDateTime, calendar: &ShiftCalendar) -> NaiveDateTime {
    let back = (t.weekday().num_days_from_monday() + 7 - calendar.week_start().num_days_from_monday()) % 7;
    (t.date() - Duration::days(back as i64)).and_hms_opt(0, 0, 0).expect("midnight")
}

fn default_epoch(calendar: &ShiftCalendar) -> NaiveDateTime {
    let monday = NaiveDate::from_ymd_opt(2024, 1, 1).expect("date").and_hms_opt(0, 0, 0).expect("midnight");
    week_floor(monday, calendar)
}

/// Resolves `epoch` and `origin_*`; `auto` values come from a scan of raw
/// `id,lon,lat,timestamp` records.
fn catalog_params(config: &RunConfig, path: &Path) -> Result<CatalogParams, CliError> {
    let calendar = config.calendar()?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let (mut first, mut lon_sum, mut lat_sum, mut n) = (None::<NaiveDateTime>, 0.0, 0.0, 0usize);
    if header == ["id", "lon", "lat", "timestamp"] {
        for record in rdr.records().flatten() {
            let (Some(lon), Some(lat), Some(ts)) = (
                record.get(1).and_then(|s| s.parse::<f64>().ok()),
                record.get(2).and_then(|s| s.parse::<f64>().ok()),
                record.get(3).and_then(parse_timestamp),
            ) else {
                continue;
            };
            first = Some(first.map_or(ts, |f| f.min(ts)));
            lon_sum += lon;
            lat_sum += lat;
            n += 1;
        }
    }
    let epoch = match config.epoch()? {
        Some(e) => e,
        None => first.map_or_else(|| default_epoch(&calendar), |f| week_floor(f, &calendar)),
    };
    let auto = |name: &str, sum: f64| -> Result<f64, CliError> {
        Ok(config.optional_f64(name)?.unwrap_or(if n > 0 { sum / n as f64 } else { 0.0 }))
    };
    let origin = GeoPoint::new(auto("origin_lon", lon_sum)?, auto("origin_lat", lat_sum)?);
    Ok(CatalogParams { epoch, origin, calendar })
}

fn read_catalog(path: &Path, params: &CatalogParams) -> Result<EventCatalog, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_catalog(std::io::BufReader::new(file), params)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn train(config: &RunConfig, catalog_path: &Path, output: &Path) -> Result<(), CliError> {
    let kind = config.model_kind()?;
    let train_config = config.train_config()?;
    let params = catalog_params(config, catalog_path)?;
    let catalog = read_catalog(catalog_path, &params)?;
    if catalog.len() < MIN_TRAINING_EVENTS {
        return Err(Error::CatalogTooSmall { found: catalog.len(), required: MIN_TRAINING_EVENTS }.into());
    }
    let prov = Provenance {
        config: config.map(),
        inputs: display(&[catalog_path]),
        calendar: params.calendar,
    };
    let file = match kind {
        ModelKind::Kde => {
            let kde = PlainKde::fit(&catalog, &train_config.spatial_bandwidths, train_config.time_horizon_hours)?;
            println!("plain KDE: {} events, bandwidth {:.1} m", catalog.len(), kde.kde.bandwidth());
            ModelFile::from_plain(&kde, &catalog, train_config.truncation, prov)
        }
        ModelKind::FixedBw | ModelKind::VariableBw => {
            let model = decluster_with_progress(&catalog, &train_config, |r| {
                eprintln!(
                    "iteration {:>3}  distance {:>10.5}  background {:.3}  bw mu {:.1} m nu {:.2} h g {:.1} m / {:.2} h",
                    r.iteration, r.distance, r.background_fraction, r.mu_bandwidth, r.nu_bandwidth,
                    r.g_bandwidth_space, r.g_bandwidth_time
                );
            })?;
            let d = &model.diagnostics;
            println!(
                "{}: {} events, {} iterations ({}), background fraction {:.3}, branching ratio {:.3}",
                kind.label(),
                catalog.len(),
                d.iteration_count(),
                if d.converged { "converged" } else { "not converged" },
                d.background_fraction().unwrap_or(f64::NAN),
                model.branching_ratio()
            );
            ModelFile::from_trained(&model, kind, prov)
        }
    };
    file.save(output)
}

fn events_bbox(events: &[CrimeEvent]) -> Result<[f64; 4], CliError> {
    if events.is_empty() {
        return Err(CliError::usage("bbox=auto needs a model with training events".into()));
    }
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for e in events {
        b = [b[0].min(e.x), b[1].min(e.y), b[2].max(e.x), b[3].max(e.y)];
    }
    // Events on the top or right edge still need a cell.
    Ok([b[0], b[1], b[2] + 1e-6, b[3] + 1e-6])
}

fn read_cells(path: &Path, with_region: bool) -> Result<Vec<(usize, usize, u32)>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut cells = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let field = |i: usize| record.get(i).unwrap_or("").parse::<u64>().ok();
        let bad = || CliError::usage(format!("{}: row {}: expected row,col{}", path.display(), k + 1, if with_region { ",region_id" } else { "" }));
        let (row, col) = (field(0).ok_or_else(bad)?, field(1).ok_or_else(bad)?);
        let region = if with_region { field(2).and_then(|r| u32::try_from(r).ok()).ok_or_else(bad)? } else { 0 };
        cells.push((row as usize, col as usize, region));
    }
    Ok(cells)
}

fn build_grid(config: &RunConfig, history: &[CrimeEvent]) -> Result<Grid, CliError> {
    let bbox = match config.bbox()? {
        Some(b) => b,
        None => events_bbox(history)?,
    };
    let mut grid = Grid::new(bbox, config.f64("cell_size")?)?;
    if let Some(path) = config.path("regions") {
        grid = grid.with_regions(&read_cells(path, true)?)?;
    }
    if let Some(path) = config.path("mask") {
        let cells: Vec<(usize, usize)> = read_cells(path, false)?.into_iter().map(|(r, c, _)| (r, c)).collect();
        grid = grid.with_mask(&cells)?;
    }
    Ok(grid)
}

fn flags_for(config: &RunConfig, counts: &[f64], grid: &Grid) -> Result<Vec<bool>, CliError> {
    Ok(match config.optional_usize("top_k_per_region")? {
        Some(k) => top_k_per_region(counts, grid, k)?,
        None => rank_hotspots_in(counts, grid, config.f64("coverage")?)?,
    })
}

/// Slot start from a timestamp or from hours since the epoch.
fn slot_start(config: &RunConfig, epoch: NaiveDateTime) -> Result<f64, CliError> {
    let raw = config.get("slot_start");
    if raw.is_empty() {
        return Err(CliError::usage("predict needs --slot-start".into()));
    }
    if let Some(ts) = parse_timestamp(raw) {
        return Ok(sepp_core::events::hours_between(epoch, ts));
    }
    config.f64("slot_start")
}

fn json_config(config: &RunConfig, inputs: &[String]) -> serde_json::Value {
    json!({"settings": config.map(), "inputs": inputs})
}

fn strip_extension(output: &Path) -> PathBuf {
    match output.extension().and_then(|e| e.to_str()) {
        Some("geojson" | "csv") => output.with_extension(""),
        _ => output.to_path_buf(),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn predict(config: &RunConfig, model_path: &Path, output: &Path) -> Result<(), CliError> {
    let file = ModelFile::load(model_path)?;
    let model = file.model()?;
    let epoch = file.epoch()?;
    let start = slot_start(config, epoch)?;
    if !file.calendar.is_shift_start(start, file.week_offset) {
        return Err(CliError::usage(format!(
            "slot start {start} h is not a shift boundary of the model's calendar"
        )));
    }
    let (_, end) = file.calendar.shift_bounds(start + 1e-6, file.week_offset);
    let slot = Slot::new(start, end)?;
    let history = model.history().events();
    let grid = build_grid(config, history)?;
    let mut forecast = GridForecast::compute(&model, history, grid, slot, config.usize("n_mc")?, config.u64("seed")?);
    forecast.hotspot_flags = flags_for(config, &forecast.expected_counts, &forecast.grid)?;

    let inputs = display(&[model_path]);
    let prefix = strip_extension(output);
    let geojson_path = with_suffix(&prefix, ".geojson");
    let csv_path = with_suffix(&prefix, ".csv");
    let geojson = forecast.to_geojson(file.origin, Some(json_config(config, &inputs)));
    let mut text = serde_json::to_string_pretty(&geojson).expect("geojson serializes");
    text.push('\n');
    std::fs::write(&geojson_path, text).map_err(|e| CliError::io(&geojson_path, e))?;
    forecast.write_csv(create(&csv_path)?)?;
    write_provenance(&csv_path, "predict", config, &inputs)?;
    let flagged = forecast.hotspot_flags.iter().filter(|f| **f).count();
    let total: f64 = forecast.expected_counts.iter().sum();
    println!(
        "{} .. {}: {} cells, {flagged} flagged, expected total {total:.3}",
        format_timestamp(epoch + Duration::milliseconds((slot.start * 3.6e6).round() as i64)),
        format_timestamp(epoch + Duration::milliseconds((slot.end * 3.6e6).round() as i64)),
        forecast.grid.active_count()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Period {
    Shift,
    Day,
    Week,
}

impl Period {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "shift" => Ok(Period::Shift),
            "day" => Ok(Period::Day),
            "week" => Ok(Period::Week),
            other => Err(CliError::usage(format!("unknown period `{other}` (shift, day or week)"))),
        }
    }
}

/// Period start in linear hours for a slot starting at `start`.
fn period_start(period: Period, start: f64, week_offset: f64) -> f64 {
    let len = match period {
        Period::Shift => return start,
        Period::Day => 24.0,
        Period::Week => WEEK_HOURS,
    };
    ((start + week_offset) / len).floor() * len - week_offset
}

fn model_names(files: &[ModelFile], paths: &[PathBuf]) -> Vec<String> {
    let kinds: Vec<&str> = files.iter().map(|f| f.kind.label()).collect();
    let unique = (0..kinds.len()).all(|i| !kinds[..i].contains(&kinds[i]));
    if unique {
        kinds.iter().map(|k| k.to_string()).collect()
    } else {
        paths
            .iter()
            .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
            .collect()
    }
}

pub fn evaluate(config: &RunConfig, model_paths: &[PathBuf], test_path: &Path, output: &Path) -> Result<(), CliError> {
    let files = model_paths.iter().map(|p| ModelFile::load(p)).collect::<Result<Vec<_>, _>>()?;
    let reference = &files[0];
    for (f, p) in files.iter().zip(model_paths) {
        if (&f.epoch, f.origin, f.week_offset, f.calendar)
            != (&reference.epoch, reference.origin, reference.week_offset, reference.calendar)
        {
            return Err(CliError::usage(format!(
                "{} uses a different epoch, origin or calendar than {}",
                p.display(),
                model_paths[0].display()
            )));
        }
    }
    let epoch = reference.epoch()?;
    let params = CatalogParams { epoch, origin: reference.origin, calendar: reference.calendar };
    let test = read_catalog(test_path, &params)?;
    let test_events = test.events();
    if test_events.is_empty() {
        return Err(Error::NoEventsInScope.into());
    }
    let models = files.iter().map(ModelFile::model).collect::<Result<Vec<Model>, _>>()?;
    for (m, p) in models.iter().zip(model_paths) {
        if let Some(last) = m.history().events().last() {
            if test_events[0].t <= last.t {
                return Err(CliError::usage(format!(
                    "test catalog overlaps the training history of {}",
                    p.display()
                )));
            }
        }
    }
    let period = Period::parse(config.get("period"))?;
    let week_offset = reference.week_offset;
    let calendar = reference.calendar;
    let (first_start, _) = calendar.shift_bounds(test_events[0].t, week_offset);
    let last = test_events[test_events.len() - 1].t;
    let slots: Vec<Slot> = calendar
        .shifts_between(first_start, last + 1e-6, week_offset)
        .into_iter()
        .map(|(s, e)| Slot::new(s, e))
        .collect::<sepp_core::Result<_>>()?;
    let grid = build_grid(config, models[0].history().events())?;
    let (n_mc, seed) = (config.usize("n_mc")?, config.u64("seed")?);
    let names = model_names(&files, model_paths);

    let inputs: Vec<String> = display(&[test_path])
        .into_iter()
        .chain(model_paths.iter().map(|p| p.display().to_string()))
        .collect();
    let mut w = csv::Writer::from_writer(create(output)?);
    w.write_record(["model", "period_start", "hit_rate", "pai"]).map_err(Error::from)?;
    for (name, model) in names.iter().zip(&models) {
        let mut history = model.history().events().to_vec();
        history.extend_from_slice(test_events);
        let counts = forecast_slots(model, &history, &grid, &slots, n_mc, seed);
        // period start -> (hits, in scope, summed area fraction, slots)
        let mut periods: BTreeMap<i64, (usize, usize, f64, usize)> = BTreeMap::new();
        for (slot, c) in slots.iter().zip(&counts) {
            let flags = flags_for(config, c, &grid)?;
            let h = match hit_rate(&flags, &grid, test_events, *slot) {
                Ok(h) => h,
                Err(Error::NoEventsInScope) => continue,
                Err(e) => return Err(e.into()),
            };
            let key = (period_start(period, slot.start, week_offset) * 3600.0).round() as i64;
            let entry = periods.entry(key).or_default();
            entry.0 += h.hits;
            entry.1 += h.in_scope;
            entry.2 += area_fraction(&flags, &grid);
            entry.3 += 1;
        }
        if periods.is_empty() {
            return Err(Error::NoEventsInScope.into());
        }
        let mut rates = Vec::new();
        for (seconds, (hits, in_scope, area, n)) in periods {
            let rate = hits as f64 / in_scope as f64;
            let pai = sepp_core::pai(rate, area / n as f64)?;
            rates.push(rate);
            w.write_record([
                name.clone(),
                format_timestamp(epoch + Duration::seconds(seconds)),
                rate.to_string(),
                pai.to_string(),
            ])
            .map_err(Error::from)?;
        }
        println!(
            "{name}: {} periods, mean hit rate {:.4}",
            rates.len(),
            rates.iter().sum::<f64>() / rates.len() as f64
        );
    }
    w.flush().map_err(|e| CliError::io(output, e))?;
    write_provenance(output, "evaluate", config, &inputs)
}

/// Per-model hit-rate series keyed by period, in order of first appearance.
fn read_metrics(paths: &[PathBuf]) -> Result<Vec<(String, Vec<(String, f64)>)>, CliError> {
    let mut series: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    for path in paths {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let header = rdr.headers().map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if header.iter().collect::<Vec<_>>() != ["model", "period_start", "hit_rate", "pai"] {
            return Err(CliError::usage(format!("{}: not a metrics CSV", path.display())));
        }
        for (k, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let rate: f64 = record[2]
                .parse()
                .map_err(|_| CliError::usage(format!("{}: row {}: invalid hit rate", path.display(), k + 1)))?;
            let (model, period) = (record[0].to_string(), record[1].to_string());
            match series.iter_mut().find(|(m, _)| *m == model) {
                Some((_, rows)) => rows.push((period, rate)),
                None => series.push((model, vec![(period, rate)])),
            }
        }
    }
    Ok(series)
}

pub fn compare(config: &RunConfig, metrics: &[PathBuf], output: Option<&Path>) -> Result<(), CliError> {
    let series = read_metrics(metrics)?;
    if series.len() < 2 {
        return Err(CliError::usage("compare needs at least two models".into()));
    }
    let periods: Vec<&String> = series[0].1.iter().map(|(p, _)| p).collect();
    for (model, rows) in &series[1..] {
        if rows.iter().map(|(p, _)| p).collect::<Vec<_>>() != periods {
            return Err(CliError::usage(format!(
                "model `{model}` does not share the periods of `{}`",
                series[0].0
            )));
        }
    }
    let alternative = if config.bool("one_sided")? { Alternative::Greater } else { Alternative::TwoSided };
    let input: Vec<(String, Vec<f64>)> = series
        .into_iter()
        .map(|(m, rows)| (m, rows.into_iter().map(|(_, r)| r).collect()))
        .collect();
    let rows = compare_models(&input, alternative)?;
    print!("{}", format_table(&rows));
    if let Some(path) = output {
        write_comparison_csv(&rows, create(path)?)?;
        let inputs: Vec<String> = metrics.iter().map(|p| p.display().to_string()).collect();
        write_provenance(path, "compare", config, &inputs)?;
    }
    Ok(())
}

pub fn ground_truth(config: &RunConfig) -> Result<GroundTruth, CliError> {
    let mut truth = match config.get("sim_preset") {
        "default" => GroundTruth::default(),
        "diffuse" => GroundTruth::diffuse(),
        other => return Err(CliError::usage(format!("unknown sim_preset `{other}` (default or diffuse)"))),
    };
    if let Some(theta) = config.optional_f64("sim_theta")? {
        truth.branching_ratio = theta;
    }
    truth.horizon_hours = config.f64("sim_weeks")? * WEEK_HOURS;
    Ok(truth)
}

pub fn simulate(config: &RunConfig, output: &Path, parents: Option<&Path>) -> Result<(), CliError> {
    let calendar = config.calendar()?;
    let epoch = config.epoch()?.unwrap_or_else(|| default_epoch(&calendar));
    let origin = GeoPoint::new(
        config.optional_f64("origin_lon")?.unwrap_or(0.0),
        config.optional_f64("origin_lat")?.unwrap_or(0.0),
    );
    let mut truth = ground_truth(config)?;
    truth.week_offset = calendar.week_offset(epoch);
    let mut rng = sepp_core::seed::rng(config.u64("seed")?, 0);
    let sim = draw_catalog(&truth, &mut rng)?;
    let parents_path = match parents {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            output.with_file_name(format!("{stem}_parents.csv"))
        }
    };
    sim.write_parents_csv(create(&parents_path)?)?;
    let background = sim.background_fraction();
    let catalog = sim.into_catalog(epoch, origin, truth.week_offset)?;
    catalog.write_csv(create(output)?)?;
    write_provenance(output, "simulate", config, &[])?;
    write_provenance(&parents_path, "simulate", config, &[])?;
    println!(
        "{} events over {} weeks, background fraction {:.3}",
        catalog.len(),
        config.get("sim_weeks"),
        background
    );
    Ok(())
}
