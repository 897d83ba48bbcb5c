//! Seeded synthetic charging panels.
//!
//! Hourly load per station is
//!
//! ```text
//! load = peak · (base + a · w(day) · g(hour - δ) · rain · temp + κ_l · u + κ_n · ε),  clamped at 0
//! ```
//!
//! where `g` is a morning/afternoon double peak, `δ` is a per-station shift
//! of that peak in hours, `w` damps weekends, `u`
//! mixes a regional AR(1) factor shared by all stations with a station AR(1)
//! factor through the coupling coefficient, and `ε` is white noise. Weather
//! is regional (seasonal and diurnal temperature, Markov rain days) with
//! small per-station perturbations.

use chrono::{Datelike, NaiveDate, NaiveDateTime, TimeDelta, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Station, TimeSeriesPanel, WEATHER_VARS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const NAMES: [&str; 10] = [
    "bryant", "hamilton", "webster", "cambridge", "rinconada", "sherman", "mitchell", "cowper",
    "channing", "waverley",
];

/// Weekend multiplier on the daily profile.
pub const WEEKEND_FACTOR: f64 = 0.45;
const BASE_LEVEL: f64 = 1.2;
const PROFILE_SCALE: f64 = 2.0;
const LATENT_SCALE: f64 = 1.0;
const NOISE_SCALE: f64 = 0.25;
const REGIONAL_PERSISTENCE: f64 = 0.99;
const STATION_PERSISTENCE: f64 = 0.9;
/// Station peak times are shifted uniformly within this many hours.
const SHIFT_SPREAD: f64 = 12.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub stations: usize,
    pub days: usize,
    pub seed: u64,
    /// Weight of the shared regional factor, in `[0, 1]`.
    pub coupling: f64,
    pub start: NaiveDateTime,
}

impl SynthConfig {
    pub fn new(stations: usize, days: usize, seed: u64, coupling: f64) -> Self {
        Self {
            stations,
            days,
            seed,
            coupling,
            start: NaiveDate::from_ymd_opt(2020, 1, 1)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .expect("valid start date"),
        }
    }
}

/// Morning and afternoon charging peaks with a midday dip.
pub fn daily_profile(hour: f64) -> f64 {
    let bump = |centre: f64, width: f64| {
        let d = (hour - centre).rem_euclid(24.0);
        let d = d.min(24.0 - d);
        (-d * d / (2.0 * width * width)).exp()
    };
    bump(8.5, 1.8) + 0.85 * bump(14.5, 2.2)
}

pub fn is_weekend(day: Weekday) -> bool {
    matches!(day, Weekday::Sat | Weekday::Sun)
}

/// Unit-variance AR(1) step.
fn ar1(prev: f64, phi: f64, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    phi * prev + (1.0 - phi * phi).sqrt() * normal.sample(rng)
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<TimeSeriesPanel> {
    if cfg.stations == 0 {
        return Err(Error::Config("synthetic panel needs at least one station".into()));
    }
    if cfg.days < 14 {
        return Err(Error::Config(format!(
            "synthetic panel needs at least 14 days, got {}",
            cfg.days
        )));
    }
    if !(0.0..=1.0).contains(&cfg.coupling) {
        return Err(Error::Config(format!(
            "coupling must lie in [0, 1], got {}",
            cfg.coupling
        )));
    }
    let n = cfg.stations;
    let hours = cfg.days * 24;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let stations: Vec<Station> = (0..n)
        .map(|i| Station {
            id: format!("S{:02}", i + 1),
            name: NAMES
                .get(i)
                .map_or_else(|| format!("site {}", i + 1), |s| s.to_string()),
            latitude: round_to(37.40 + 0.01 * i as f64 + rng.random_range(0.0..0.01), 4),
            longitude: round_to(-122.17 + 0.01 * i as f64 + rng.random_range(0.0..0.01), 4),
        })
        .collect();
    let peaks: Vec<f64> = (0..n).map(|_| rng.random_range(6.0..12.0)).collect();
    let temp_offsets: Vec<f64> = (0..n).map(|_| 0.5 * normal.sample(&mut rng)).collect();
    let shifts: Vec<f64> = (0..n).map(|_| rng.random_range(-SHIFT_SPREAD..SHIFT_SPREAD)).collect();

    let timestamps: Vec<NaiveDateTime> = (0..hours)
        .map(|h| cfg.start + TimeDelta::hours(h as i64))
        .collect();

    // regional weather
    let mut rain_day = false;
    let mut temp_noise = 0.0;
    let mut regional = Vec::with_capacity(hours);
    for (h, ts) in timestamps.iter().enumerate() {
        let hour = (h % 24) as f64;
        let doy = ts.ordinal0() as f64;
        if h % 24 == 0 {
            let winter = (2.0 * std::f64::consts::PI * (doy + 10.0) / 365.25).cos().max(0.0);
            let p = if rain_day { 0.55 } else { 0.06 + 0.14 * winter };
            rain_day = rng.random::<f64>() < p;
        }
        temp_noise = ar1(temp_noise, 0.97, &mut rng, &normal);
        let temperature = 14.0
            + 6.0 * (2.0 * std::f64::consts::PI * (doy - 105.0) / 365.25).sin()
            + 5.0 * (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin()
            + 1.5 * temp_noise;
        let precipitation = if rain_day && rng.random::<f64>() < 0.6 {
            1.5 * -(1.0 - rng.random::<f64>()).ln()
        } else {
            0.0
        };
        let humidity = 55.0 + if rain_day { 25.0 } else { 0.0 }
            - 10.0 * (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin()
            + 4.0 * normal.sample(&mut rng);
        let wind = (3.0 + 1.5 * normal.sample(&mut rng)).abs() + if rain_day { 2.0 } else { 0.0 };
        regional.push([temperature, precipitation, humidity, wind]);
    }

    let mut nwp = Tensor::zeros(vec![hours, n, WEATHER_VARS]);
    for (t, reg) in regional.iter().enumerate() {
        for s in 0..n {
            let base = (t * n + s) * WEATHER_VARS;
            let d = nwp.data_mut();
            d[base] = round_to(reg[0] + temp_offsets[s] + 0.3 * normal.sample(&mut rng), 2);
            d[base + 1] = round_to(reg[1] * rng.random_range(0.8..1.2), 2);
            d[base + 2] = round_to((reg[2] + 2.0 * normal.sample(&mut rng)).clamp(5.0, 100.0), 2);
            d[base + 3] = round_to((reg[3] * rng.random_range(0.9..1.1)).max(0.0), 2);
        }
    }

    // load
    let mix = (1.0 - cfg.coupling * cfg.coupling).sqrt();
    let mut regional_factor = normal.sample(&mut rng);
    let mut station_factor: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let mut load = Tensor::zeros(vec![hours, n]);
    for (t, ts) in timestamps.iter().enumerate() {
        regional_factor = ar1(regional_factor, REGIONAL_PERSISTENCE, &mut rng, &normal);
        let weekday = if is_weekend(ts.weekday()) { WEEKEND_FACTOR } else { 1.0 };
        let hour = (t % 24) as f64;
        for s in 0..n {
            station_factor[s] = ar1(station_factor[s], STATION_PERSISTENCE, &mut rng, &normal);
            let temperature = nwp.data()[(t * n + s) * WEATHER_VARS];
            let precipitation = nwp.data()[(t * n + s) * WEATHER_VARS + 1];
            let rain = if precipitation > 0.1 { 0.8 } else { 1.0 };
            let thermal = 1.0 + 0.015 * (temperature - 18.0).abs();
            let latent = cfg.coupling * regional_factor + mix * station_factor[s];
            let value = peaks[s]
                * (BASE_LEVEL
                    + PROFILE_SCALE * weekday * daily_profile(hour - shifts[s]) * rain * thermal
                    + LATENT_SCALE * latent
                    + NOISE_SCALE * normal.sample(&mut rng));
            load.set(t, s, round_to(value.max(0.0), 3));
        }
    }
    TimeSeriesPanel::new(timestamps, load, vec![true; hours * n], nwp, stations)
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Mean off-diagonal Pearson correlation of the station load columns.
pub fn mean_cross_correlation(panel: &TimeSeriesPanel, absolute: bool) -> f64 {
    let n = panel.n_stations();
    let cols: Vec<Vec<f64>> = (0..n).map(|s| panel.station_column(s)).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            let r = pearson(&cols[i], &cols[j]);
            total += if absolute { r.abs() } else { r };
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
