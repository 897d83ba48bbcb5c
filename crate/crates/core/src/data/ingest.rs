//! CSV ingestion and export for load, weather and station metadata.
//!
//! Load rows: `timestamp,station_id,energy_kwh` (an empty energy field marks
//! the cell missing). Weather rows: `timestamp,station_id,temperature_c,
//! precipitation_mm,humidity_pct,wind_speed_ms`. Stations (optional):
//! `station_id,name,latitude,longitude`. Timestamps are ISO-8601 hours.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDateTime, TimeDelta, Timelike};

use super::interp::interpolate_missing;
use super::{Station, TimeSeriesPanel, WEATHER_VARIABLES, WEATHER_VARS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const LOAD_HEADER: [&str; 3] = ["timestamp", "station_id", "energy_kwh"];
const STATION_HEADER: [&str; 4] = ["station_id", "name", "latitude", "longitude"];

/// Valid physical range for each weather variable.
const WEATHER_RANGES: [(f64, f64); WEATHER_VARS] = [
    (-90.0, 60.0),
    (0.0, 500.0),
    (0.0, 100.0),
    (0.0, 120.0),
];

/// Pivoted load table before weather alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadTable {
    pub timestamps: Vec<NaiveDateTime>,
    pub station_ids: Vec<String>,
    /// `T × n`; 0.0 where missing.
    pub load: Tensor,
    pub observed: Vec<bool>,
    pub rows: usize,
}

impl LoadTable {
    pub fn gaps(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeatherTable {
    /// `T × n × 4`, aligned to the load timestamps, gaps interpolated.
    pub nwp: Tensor,
    pub rows: usize,
    pub gaps: usize,
    pub filled: usize,
}

/// Plain-text summary of an ingestion run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub stations: usize,
    pub timestamps: usize,
    pub load_rows: usize,
    pub load_gaps: usize,
    pub weather_rows: usize,
    pub weather_gaps: usize,
    pub weather_filled: usize,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stations: {}", self.stations)?;
        writeln!(f, "hours: {}", self.timestamps)?;
        writeln!(f, "load rows: {}", self.load_rows)?;
        writeln!(f, "load gaps (kept missing): {}", self.load_gaps)?;
        writeln!(f, "weather rows: {}", self.weather_rows)?;
        writeln!(f, "weather gaps: {}", self.weather_gaps)?;
        writeln!(f, "weather cells filled by interpolation: {}", self.weather_filled)
    }
}

pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let s = s.trim();
    let ts = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("unparseable timestamp `{s}`"))?;
    if ts.minute() != 0 || ts.second() != 0 {
        return Err(format!("timestamp `{s}` is not on the hour"));
    }
    Ok(ts)
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

fn parse_f64(field: &str, name: &str) -> std::result::Result<f64, String> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format!("unparseable {name} `{field}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite {name} `{field}`"))
    }
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers()?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {expected:?}, found {got:?}"),
        });
    }
    Ok(())
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

pub fn read_load_csv<R: Read>(r: R) -> Result<LoadTable> {
    let mut reader = csv_reader(r);
    check_header(&mut reader, &LOAD_HEADER)?;
    let mut cells: BTreeMap<(NaiveDateTime, String), Option<f64>> = BTreeMap::new();
    let mut stations = BTreeSet::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        let perr = |message: String| Error::Parse { line, message };
        if record.len() != 3 {
            return Err(perr(format!("expected 3 fields, found {}", record.len())));
        }
        let ts = parse_timestamp(&record[0]).map_err(perr)?;
        let station = record[1].to_string();
        if station.is_empty() {
            return Err(perr("empty station_id".into()));
        }
        let energy = if record[2].is_empty() {
            None
        } else {
            let v = parse_f64(&record[2], "energy_kwh").map_err(perr)?;
            if v < 0.0 {
                return Err(perr(format!("negative energy_kwh {v}")));
            }
            Some(v)
        };
        if cells.insert((ts, station.clone()), energy).is_some() {
            return Err(perr(format!("duplicate row for ({}, {station})", format_timestamp(&ts))));
        }
        stations.insert(station);
        rows += 1;
    }
    let (Some(first), Some(last)) = (
        cells.keys().map(|k| k.0).min(),
        cells.keys().map(|k| k.0).max(),
    ) else {
        return Err(Error::Data("load CSV holds no rows".into()));
    };
    let hours = (last - first).num_hours() as usize + 1;
    let timestamps: Vec<NaiveDateTime> = (0..hours)
        .map(|h| first + TimeDelta::hours(h as i64))
        .collect();
    let station_ids: Vec<String> = stations.into_iter().collect();
    let col: HashMap<&str, usize> = station_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let n = station_ids.len();
    let mut load = Tensor::zeros(vec![hours, n]);
    let mut observed = vec![false; hours * n];
    for ((ts, station), value) in &cells {
        if let Some(v) = value {
            let t = (*ts - first).num_hours() as usize;
            let s = col[station.as_str()];
            load.set(t, s, *v);
            observed[t * n + s] = true;
        }
    }
    Ok(LoadTable {
        timestamps,
        station_ids,
        load,
        observed,
        rows,
    })
}

/// Reads weather rows and aligns them with `load`. Every weather timestamp
/// and station must exist in the load table; absent cells are filled by
/// linear interpolation over time.
pub fn read_weather_csv<R: Read>(r: R, load: &LoadTable) -> Result<WeatherTable> {
    let mut reader = csv_reader(r);
    let mut header = vec!["timestamp", "station_id"];
    header.extend(WEATHER_VARIABLES);
    check_header(&mut reader, &header)?;

    let n = load.station_ids.len();
    let t_len = load.timestamps.len();
    let first = load.timestamps[0];
    let col: HashMap<&str, usize> = load
        .station_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut values: Vec<Option<[f64; WEATHER_VARS]>> = vec![None; t_len * n];
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        let perr = |message: String| Error::Parse { line, message };
        if record.len() != 2 + WEATHER_VARS {
            return Err(perr(format!(
                "expected {} fields, found {}",
                2 + WEATHER_VARS,
                record.len()
            )));
        }
        let ts = parse_timestamp(&record[0]).map_err(perr)?;
        let offset = (ts - first).num_hours();
        if ts < first || offset as usize >= t_len {
            return Err(Error::Alignment(format!(
                "line {line}: weather timestamp {} is not present in the load panel",
                format_timestamp(&ts)
            )));
        }
        let Some(&s) = col.get(&record[1]) else {
            return Err(Error::Alignment(format!(
                "line {line}: weather station `{}` is not present in the load panel",
                &record[1]
            )));
        };
        let mut row = [0.0; WEATHER_VARS];
        for (v, slot) in row.iter_mut().enumerate() {
            let x = parse_f64(&record[2 + v], WEATHER_VARIABLES[v]).map_err(perr)?;
            let (lo, hi) = WEATHER_RANGES[v];
            if x < lo || x > hi {
                return Err(Error::Data(format!(
                    "line {line}: {} = {x} outside valid range [{lo}, {hi}]",
                    WEATHER_VARIABLES[v]
                )));
            }
            *slot = x;
        }
        let idx = offset as usize * n + s;
        if values[idx].replace(row).is_some() {
            return Err(perr(format!(
                "duplicate weather row for ({}, {})",
                format_timestamp(&ts),
                &record[1]
            )));
        }
        rows += 1;
    }
    let gaps = values.iter().filter(|v| v.is_none()).count();
    let mut nwp = Tensor::zeros(vec![t_len, n, WEATHER_VARS]);
    for s in 0..n {
        for v in 0..WEATHER_VARS {
            let series: Vec<Option<f64>> =
                (0..t_len).map(|t| values[t * n + s].map(|r| r[v])).collect();
            let filled = interpolate_missing(&series).map_err(|_| {
                Error::Data(format!(
                    "station {} has no weather observations",
                    load.station_ids[s]
                ))
            })?;
            for (t, x) in filled.into_iter().enumerate() {
                nwp.data_mut()[(t * n + s) * WEATHER_VARS + v] = x;
            }
        }
    }
    Ok(WeatherTable {
        nwp,
        rows,
        gaps,
        filled: gaps,
    })
}

pub fn read_stations_csv<R: Read>(r: R) -> Result<Vec<Station>> {
    let mut reader = csv_reader(r);
    check_header(&mut reader, &STATION_HEADER)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        let perr = |message: String| Error::Parse { line, message };
        if record.len() != 4 {
            return Err(perr(format!("expected 4 fields, found {}", record.len())));
        }
        out.push(Station {
            id: record[0].to_string(),
            name: record[1].to_string(),
            latitude: parse_f64(&record[2], "latitude").map_err(perr)?,
            longitude: parse_f64(&record[3], "longitude").map_err(perr)?,
        });
    }
    Ok(out)
}

/// Joins load, weather and optional station metadata into a panel.
pub fn assemble_panel(
    load: LoadTable,
    weather: WeatherTable,
    stations: Option<Vec<Station>>,
) -> Result<(TimeSeriesPanel, IngestReport)> {
    let meta: HashMap<String, Station> = stations
        .unwrap_or_default()
        .into_iter()
        .map(|s| (s.id.clone(), s))
        .collect();
    let stations: Vec<Station> = load
        .station_ids
        .iter()
        .map(|id| meta.get(id).cloned().unwrap_or_else(|| Station::anonymous(id)))
        .collect();
    let report = IngestReport {
        stations: stations.len(),
        timestamps: load.timestamps.len(),
        load_rows: load.rows,
        load_gaps: load.gaps(),
        weather_rows: weather.rows,
        weather_gaps: weather.gaps,
        weather_filled: weather.filled,
    };
    let panel = TimeSeriesPanel::new(
        load.timestamps,
        load.load,
        load.observed,
        weather.nwp,
        stations,
    )?;
    Ok((panel, report))
}

pub fn ingest_load_csv(path: impl AsRef<Path>) -> Result<LoadTable> {
    read_load_csv(File::open(path)?)
}

pub fn ingest_weather_csv(path: impl AsRef<Path>, load: &LoadTable) -> Result<WeatherTable> {
    read_weather_csv(File::open(path)?, load)
}

/// Reads load, weather and (when given) station files into a panel.
pub fn ingest(
    load_path: impl AsRef<Path>,
    weather_path: impl AsRef<Path>,
    stations_path: Option<&Path>,
) -> Result<(TimeSeriesPanel, IngestReport)> {
    let load = ingest_load_csv(load_path)?;
    let weather = ingest_weather_csv(weather_path, &load)?;
    let stations = stations_path
        .map(|p| read_stations_csv(File::open(p)?))
        .transpose()?;
    assemble_panel(load, weather, stations)
}

pub fn write_load_csv<W: Write>(panel: &TimeSeriesPanel, w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(LOAD_HEADER)?;
    for (t, ts) in panel.timestamps().iter().enumerate() {
        let stamp = format_timestamp(ts);
        for (s, station) in panel.stations().iter().enumerate() {
            let energy = panel.load_at(t, s).map(|v| v.to_string()).unwrap_or_default();
            writer.write_record([stamp.as_str(), station.id.as_str(), energy.as_str()])?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_weather_csv<W: Write>(panel: &TimeSeriesPanel, w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    let mut header = vec!["timestamp", "station_id"];
    header.extend(WEATHER_VARIABLES);
    writer.write_record(&header)?;
    for (t, ts) in panel.timestamps().iter().enumerate() {
        let stamp = format_timestamp(ts);
        for (s, station) in panel.stations().iter().enumerate() {
            let mut record = vec![stamp.clone(), station.id.clone()];
            record.extend((0..WEATHER_VARS).map(|v| panel.weather_at(t, s, v).to_string()));
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_stations_csv<W: Write>(stations: &[Station], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(STATION_HEADER)?;
    for s in stations {
        writer.write_record([
            s.id.clone(),
            s.name.clone(),
            s.latitude.to_string(),
            s.longitude.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
