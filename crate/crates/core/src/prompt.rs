//! Natural-language prompt prefix: window statistics, a fixed three-paragraph
//! template, a word-level tokenizer over a 1024-entry vocabulary and the
//! lookup into the frozen embedding table.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use chrono::Weekday;
use serde::{Deserialize, Serialize};

use crate::data::synth::pearson;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const NEG: &str = "<neg>";
pub const NUM_BUCKETS: [&str; 4] = ["<num_0_1>", "<num_1_10>", "<num_10_100>", "<num_100_up>"];

/// Maximum prompt length in tokens; the prefix is padded to exactly this.
pub const PROMPT_TOKENS: usize = 128;

const BUILTIN_VOCAB: &str = include_str!("../assets/vocab_v1.txt");

const TREND_DEAD_BAND: f64 = 0.05;
const LAG_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    Rising,
    Falling,
    Flat,
}

impl Trend {
    pub fn as_str(self) -> &'static str {
        match self {
            Trend::Rising => "rising",
            Trend::Falling => "falling",
            Trend::Flat => "flat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub trend: Trend,
    /// Hours; 0 when no lag in `1..=M/2` has autocorrelation above 0.2.
    pub top_lag: usize,
}

fn least_squares_line(x: &[f64]) -> (f64, f64) {
    let m = x.len() as f64;
    let t_mean = (m - 1.0) / 2.0;
    let x_mean = x.iter().sum::<f64>() / m;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (v - x_mean);
        den += dt * dt;
    }
    let slope = num / den;
    (slope, x_mean - slope * t_mean)
}

/// Summary statistics of one window.
///
/// The lag is found on the linearly detrended window, scoring each lag by the
/// Pearson correlation of the window against its shifted self; the smallest
/// lag within 1e-9 of the best score wins.
pub fn compute_statistics(window: &[f64]) -> Result<WindowStats> {
    let m = window.len();
    if m < 4 {
        return Err(Error::Config(format!("window statistics need at least 4 values, got {m}")));
    }
    let min = window.iter().copied().fold(f64::INFINITY, f64::min);
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = window.iter().sum::<f64>() / m as f64;
    let mut sorted = window.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let median = median.clamp(min, max);

    let (slope, intercept) = least_squares_line(window);
    let trend = if slope == 0.0 || (slope * m as f64).abs() < TREND_DEAD_BAND * (max - min) {
        Trend::Flat
    } else if slope > 0.0 {
        Trend::Rising
    } else {
        Trend::Falling
    };

    let residual: Vec<f64> = window
        .iter()
        .enumerate()
        .map(|(t, v)| v - (intercept + slope * t as f64))
        .collect();
    let mut top_lag = 0;
    let mut best = 0.0;
    for lag in 1..=m / 2 {
        let r = pearson(&residual[..m - lag], &residual[lag..]);
        if r > LAG_THRESHOLD && (top_lag == 0 || r > best + 1e-9) {
            best = r;
            top_lag = lag;
        }
    }
    Ok(WindowStats {
        min,
        max,
        mean,
        median,
        trend,
        top_lag,
    })
}

/// Station facts placed in the first paragraph.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptContext {
    pub station_name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub n_stations: usize,
}

/// Forecast task description placed in the last paragraph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub history: usize,
    pub horizon: usize,
    pub start_weekday: Weekday,
    pub start_hour: u32,
}

fn weekday_word(d: Weekday) -> &'static str {
    match d {
        Weekday::Mon => "monday",
        Weekday::Tue => "tuesday",
        Weekday::Wed => "wednesday",
        Weekday::Thu => "thursday",
        Weekday::Fri => "friday",
        Weekday::Sat => "saturday",
        Weekday::Sun => "sunday",
    }
}

fn part_of_day(hour: u32) -> &'static str {
    match hour {
        0..=5 => "night",
        6..=11 => "morning",
        12..=17 => "afternoon",
        _ => "evening",
    }
}

/// Two decimals, never `-0.00`.
fn fmt2(x: f64) -> String {
    let r = (x * 100.0).round() / 100.0;
    format!("{:.2}", if r == 0.0 { 0.0 } else { r })
}

pub fn render_prompt(ctx: &PromptContext, stats: &WindowStats, task: &TaskSpec) -> String {
    format!(
        "Dataset context: This dataset consists of historical hourly charging records of the \
         electric vehicle charging station {name}, located at latitude {lat} and longitude {lon}. \
         It is one of {n} stations in the network.\n\n\
         Statistics: Over the input window of {m} hours the normalized load has a minimum of {min}, \
         a maximum of {max}, a mean of {mean} and a median of {median}. The overall trend is \
         {trend}. The strongest periodic lag is {lag} hours. The forecast starts on a {day} {part}.\n\n\
         Task: Please predict the changes in EV charging load over the next {h} hours given the \
         previous {m} hours of load and weather forecasts.",
        name = ctx.station_name,
        lat = fmt2(ctx.latitude),
        lon = fmt2(ctx.longitude),
        n = ctx.n_stations,
        m = task.history,
        min = fmt2(stats.min),
        max = fmt2(stats.max),
        mean = fmt2(stats.mean),
        median = fmt2(stats.median),
        trend = stats.trend.as_str(),
        lag = stats.top_lag,
        day = weekday_word(task.start_weekday),
        part = part_of_day(task.start_hour),
        h = task.horizon,
    )
}

/// Word-level vocabulary; a token's id is its zero-based line number.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn builtin() -> Self {
        Self::from_text(BUILTIN_VOCAB).expect("builtin vocabulary is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty vocabulary entry".into(),
                });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate vocabulary entry `{t}`"),
                });
            }
        }
        for special in [PAD, UNK, NEG].iter().chain(NUM_BUCKETS.iter()) {
            if !index.contains_key(*special) {
                return Err(Error::Config(format!("vocabulary lacks `{special}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 of the newline-joined token list.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.tokens.join("\n").as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        self.index[PAD]
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }

    fn special(&self, s: &str) -> usize {
        self.index[s]
    }
}

fn bucket(magnitude: f64) -> &'static str {
    if magnitude < 1.0 {
        NUM_BUCKETS[0]
    } else if magnitude < 10.0 {
        NUM_BUCKETS[1]
    } else if magnitude < 100.0 {
        NUM_BUCKETS[2]
    } else {
        NUM_BUCKETS[3]
    }
}

/// Lowercases, splits on whitespace and punctuation, maps numeric literals
/// to magnitude buckets (preceded by `<neg>` when negative) and unknown words
/// to `<unk>`. Bracketed special tokens are recognised verbatim.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let chars: Vec<char> = text.chars().collect();
    let mut ids = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let prev_joins = i > 0 && (chars[i - 1].is_alphanumeric() || chars[i - 1] == '.');
        if c == '<' {
            if let Some(len) = chars[i..].iter().position(|&ch| ch == '>') {
                let candidate: String = chars[i..=i + len].iter().collect::<String>().to_lowercase();
                if let Some(id) = vocab.id(&candidate) {
                    ids.push(id);
                    i += len + 1;
                    continue;
                }
            }
            i += 1;
        } else if c.is_ascii_digit()
            || (c == '-' && !prev_joins && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let negative = c == '-';
            let start = if negative { i + 1 } else { i };
            let mut end = start;
            while end < chars.len() && chars[end].is_ascii_digit() {
                end += 1;
            }
            if end + 1 < chars.len() && chars[end] == '.' && chars[end + 1].is_ascii_digit() {
                end += 1;
                while end < chars.len() && chars[end].is_ascii_digit() {
                    end += 1;
                }
            }
            let literal: String = chars[start..end].iter().collect();
            let value: f64 = literal.parse().unwrap_or(0.0);
            if negative && value != 0.0 {
                ids.push(vocab.special(NEG));
            }
            ids.push(vocab.special(bucket(value)));
            i = end;
        } else if c.is_alphabetic() {
            let mut end = i;
            while end < chars.len() && (chars[end].is_alphanumeric() || chars[end] == '_') {
                end += 1;
            }
            let word: String = chars[i..end].iter().collect::<String>().to_lowercase();
            ids.push(vocab.id(&word).unwrap_or_else(|| vocab.unk_id()));
            i = end;
        } else {
            i += 1;
        }
    }
    ids
}

/// Space-joined token strings; ids outside the vocabulary render as `<unk>`.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Rows of the frozen table `e` for each id.
pub fn embed_tokens(ids: &[usize], e: &Tensor) -> Result<Tensor> {
    let (vocab, d) = (e.rows(), e.cols());
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::Config(format!(
                "token id {id} outside embedding table of {vocab} rows"
            )));
        }
        data.extend_from_slice(e.row(id));
    }
    Tensor::new(vec![ids.len(), d], data)
}

/// A rendered prompt with its ids left-padded with `<pad>` to a fixed
/// length, so the prompt text sits directly before the series tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPrefix {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub embeddings: Tensor,
}

impl fmt::Display for PromptPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Fixed-length ids for `text`: truncated to the last `len` tokens or
/// left-padded with `<pad>`.
pub fn padded_ids(text: &str, vocab: &Vocabulary, len: usize) -> Vec<usize> {
    let mut ids = tokenize(text, vocab);
    if ids.len() > len {
        ids.drain(..ids.len() - len);
    }
    let mut out = vec![vocab.pad_id(); len - ids.len()];
    out.extend(ids);
    out
}

pub fn build_prefix(text: String, vocab: &Vocabulary, e: &Tensor, len: usize) -> Result<PromptPrefix> {
    let token_ids = padded_ids(&text, vocab, len);
    let embeddings = embed_tokens(&token_ids, e)?;
    Ok(PromptPrefix {
        text,
        token_ids,
        embeddings,
    })
}
