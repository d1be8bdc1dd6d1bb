//! Benchmark CSV ingestion, chronological splits, standardization, calendar
//! marks and sliding supervised windows.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Sampling interval of a series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freq {
    Hourly,
    QuarterHourly,
    TenMinutely,
}

impl Freq {
    pub fn seconds(self) -> i64 {
        match self {
            Freq::Hourly => 3600,
            Freq::QuarterHourly => 900,
            Freq::TenMinutely => 600,
        }
    }

    pub fn from_seconds(s: i64) -> Option<Self> {
        [Freq::Hourly, Freq::QuarterHourly, Freq::TenMinutely]
            .into_iter()
            .find(|f| f.seconds() == s)
    }

    pub fn rows_per_hour(self) -> usize {
        (3600 / self.seconds()) as usize
    }

    /// Minutes per minute-bucket, if this frequency has a minute mark.
    pub fn minute_bucket(self) -> Option<u32> {
        match self {
            Freq::Hourly => None,
            Freq::QuarterHourly => Some(15),
            Freq::TenMinutely => Some(10),
        }
    }

    /// Table sizes for each calendar mark: month, day, weekday, hour[, minute bucket].
    pub fn mark_cardinalities(self) -> Vec<usize> {
        let mut c = vec![13, 32, 7, 24];
        if let Some(b) = self.minute_bucket() {
            c.push((60 / b) as usize);
        }
        c
    }

    pub fn mark_count(self) -> usize {
        self.mark_cardinalities().len()
    }
}

impl fmt::Display for Freq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Freq::Hourly => "hourly",
            Freq::QuarterHourly => "quarter_hourly",
            Freq::TenMinutely => "ten_minutely",
        })
    }
}

impl FromStr for Freq {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hourly" | "h" => Ok(Freq::Hourly),
            "quarter_hourly" | "15min" => Ok(Freq::QuarterHourly),
            "ten_minutely" | "10min" => Ok(Freq::TenMinutely),
            other => Err(Error::Config(format!("unknown frequency `{other}`"))),
        }
    }
}

/// Calendar marks `(month, day, weekday, hour[, minute bucket])`, Monday = 0.
pub fn time_features(ts: &NaiveDateTime, freq: Freq) -> Vec<usize> {
    let mut marks = vec![
        ts.month() as usize,
        ts.day() as usize,
        ts.weekday().num_days_from_monday() as usize,
        ts.hour() as usize,
    ];
    if let Some(b) = freq.minute_bucket() {
        marks.push((ts.minute() / b) as usize);
    }
    marks
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M"))
        .ok()
}

/// Multivariate series on a fixed time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    /// Row-major `T x M`.
    pub values: Vec<f64>,
    pub column_names: Vec<String>,
    pub freq: Freq,
}

impl RawSeries {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        column_names: Vec<String>,
        freq: Freq,
    ) -> Result<Self> {
        if values.len() != timestamps.len() * column_names.len() {
            return Err(Error::shape(
                "series",
                &[timestamps.len(), column_names.len()],
                &[values.len()],
            ));
        }
        Ok(Self {
            timestamps,
            values,
            column_names,
            freq,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.column_names.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.channels();
        &self.values[t * m..(t + 1) * m]
    }

    /// Writes the benchmark CSV layout read by [`load_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write!(buf, "date")?;
        for c in &self.column_names {
            write!(buf, ",{c}")?;
        }
        writeln!(buf)?;
        for t in 0..self.len() {
            write!(buf, "{}", self.timestamps[t].format(TIMESTAMP_FORMAT))?;
            for v in self.row(t) {
                write!(buf, ",{v}")?;
            }
            writeln!(buf)?;
        }
        crate::io::write_atomic(path, &buf)
    }
}

/// Reads a benchmark CSV: header row, first column `date`, numeric features.
/// The sampling frequency is taken from the first interval and every
/// subsequent interval must match it.
pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<RawSeries> {
    let load_err = |row: usize, msg: String| Error::Load {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| load_err(1, e.to_string()))?.clone();
    if header.get(0) != Some("date") {
        return Err(load_err(1, "first column must be named `date`".into()));
    }
    let column_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if column_names.is_empty() {
        return Err(load_err(1, "no feature columns".into()));
    }

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| load_err(line, e.to_string()))?;
        if rec.len() != column_names.len() + 1 {
            return Err(load_err(line, format!("expected {} fields, found {}", column_names.len() + 1, rec.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| load_err(line, format!("unparseable timestamp `{}`", &rec[0])))?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(load_err(line, format!("timestamps not strictly increasing ({ts} after {prev})")));
            }
        }
        timestamps.push(ts);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| load_err(line, format!("column `{}`: unparseable value `{cell}`", column_names[j])))?;
            if !v.is_finite() {
                return Err(load_err(line, format!("column `{}`: missing or non-finite value", column_names[j])));
            }
            values.push(v);
        }
    }
    if timestamps.len() < 2 {
        return Err(load_err(timestamps.len() + 1, "need at least two rows to infer frequency".into()));
    }
    let step = (timestamps[1] - timestamps[0]).num_seconds();
    let freq = Freq::from_seconds(step)
        .ok_or_else(|| load_err(3, format!("unsupported sampling interval of {step} s")))?;
    for (i, w) in timestamps.windows(2).enumerate() {
        let d = (w[1] - w[0]).num_seconds();
        if d != step {
            return Err(load_err(i + 3, format!("interval {d} s breaks the {freq} grid")));
        }
    }
    RawSeries::new(timestamps, values, column_names, freq)
}

/// How rows are divided into train / validation / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    Ratio { train: f64, val: f64, test: f64 },
    /// Calendar months of 30 days each.
    EttMonths { train: usize, val: usize, test: usize },
}

impl SplitScheme {
    pub const RATIO: SplitScheme = SplitScheme::Ratio {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };
    pub const ETT: SplitScheme = SplitScheme::EttMonths {
        train: 12,
        val: 4,
        test: 4,
    };

    /// ETT-named datasets use the month split, everything else ratios.
    pub fn default_for(dataset_name: &str) -> Self {
        if dataset_name.to_ascii_uppercase().starts_with("ETT") {
            Self::ETT
        } else {
            Self::RATIO
        }
    }
}

/// Row ranges of each partition. Validation and test ranges start `lookback`
/// rows early so their first window has full context; the targets of each
/// partition never overlap another partition's targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split(total: usize, freq: Freq, scheme: SplitScheme, lookback: usize, horizon: usize) -> Result<Split> {
    let (n_train, n_val, n_test) = match scheme {
        SplitScheme::Ratio { train, val, test } => {
            if train <= 0.0 || val < 0.0 || test <= 0.0 || (train + val + test - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("split ratios must be positive and sum to 1: {train}/{val}/{test}")));
            }
            let n_train = (total as f64 * train) as usize;
            let n_test = (total as f64 * test) as usize;
            (n_train, total - n_train - n_test, n_test)
        }
        SplitScheme::EttMonths { train, val, test } => {
            let month = 30 * 24 * freq.rows_per_hour();
            let need = (train + val + test) * month;
            if need > total {
                return Err(Error::Config(format!("month split needs {need} rows, series has {total}")));
            }
            (train * month, val * month, test * month)
        }
    };
    let train = 0..n_train;
    let val = n_train.saturating_sub(lookback)..n_train + n_val;
    let test = (n_train + n_val).saturating_sub(lookback)..n_train + n_val + n_test;
    for (name, r) in [("train", &train), ("val", &val), ("test", &test)] {
        if r.len() < lookback + horizon {
            return Err(Error::Config(format!(
                "{name} partition has {} rows, fewer than lookback + horizon = {}",
                r.len(),
                lookback + horizon
            )));
        }
    }
    Ok(Split { train, val, test })
}

/// Per-channel z-score fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardScaler {
    pub const STD_FLOOR: f64 = 1e-8;

    /// Fits on row-major `rows x channels` values.
    pub fn fit(values: &[f64], channels: usize) -> Result<Self> {
        if channels == 0 || values.is_empty() || !values.len().is_multiple_of(channels) {
            return Err(Error::Contract("scaler needs a non-empty rows x channels matrix".into()));
        }
        let rows = values.len() / channels;
        let mut mean = vec![0.0; channels];
        for row in values.chunks(channels) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; channels];
        for row in values.chunks(channels) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / rows as f64).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let m = self.channels();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % m]) / self.std[i % m])
            .collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        let m = self.channels();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % m] + self.mean[i % m])
            .collect()
    }
}

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample<T> {
    /// `[L, M]`
    pub x_enc: Tensor<T>,
    /// `[label_len + H, M]`, final `H` rows zero.
    pub x_dec: Tensor<T>,
    /// `L` rows of calendar marks.
    pub marks_enc: Vec<Vec<usize>>,
    /// `label_len + H` rows of calendar marks.
    pub marks_dec: Vec<Vec<usize>>,
    /// `[H, M]`
    pub y: Tensor<T>,
    /// Series row of the first target step.
    pub target_start: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub lookback: usize,
    pub label_len: usize,
    pub horizon: usize,
}

impl WindowShape {
    pub fn decoder_len(&self) -> usize {
        self.label_len + self.horizon
    }

    pub fn check(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        if self.label_len > self.lookback {
            return Err(Error::Config(format!(
                "label_len {} exceeds lookback {}",
                self.label_len, self.lookback
            )));
        }
        Ok(())
    }

    /// `rows - L - H + 1`, or zero when the partition is too short.
    pub fn count(&self, rows: usize) -> usize {
        (rows + 1).saturating_sub(self.lookback + self.horizon)
    }
}

/// A standardized series with precomputed calendar marks, ready for windowing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub name: String,
    pub column_names: Vec<String>,
    pub freq: Freq,
    pub timestamps: Vec<NaiveDateTime>,
    /// Standardized, row-major `T x M`.
    pub values: Vec<f64>,
    pub marks: Vec<Vec<usize>>,
    pub scaler: StandardScaler,
    pub split: Split,
}

impl Prepared {
    /// Splits the series, fits the scaler on training rows only, and
    /// standardizes everything with it.
    pub fn new(name: &str, series: &RawSeries, scheme: SplitScheme, shape: WindowShape) -> Result<Self> {
        shape.check()?;
        let split = split(series.len(), series.freq, scheme, shape.lookback, shape.horizon)?;
        let m = series.channels();
        let scaler = StandardScaler::fit(&series.values[split.train.start * m..split.train.end * m], m)?;
        let values = scaler.apply(&series.values);
        let marks = series
            .timestamps
            .iter()
            .map(|ts| time_features(ts, series.freq))
            .collect();
        Ok(Self {
            name: name.to_string(),
            column_names: series.column_names.clone(),
            freq: series.freq,
            timestamps: series.timestamps.clone(),
            values,
            marks,
            scaler,
            split,
        })
    }

    pub fn channels(&self) -> usize {
        self.column_names.len()
    }

    pub fn windows(&self, range: Range<usize>, shape: WindowShape) -> WindowSet<'_> {
        WindowSet {
            data: self,
            range,
            shape,
        }
    }
}

/// Lazily materialized stride-1 windows over a row range of a [`Prepared`] series.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    data: &'a Prepared,
    range: Range<usize>,
    shape: WindowShape,
}

impl<'a> WindowSet<'a> {
    pub fn len(&self) -> usize {
        self.shape.count(self.range.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> WindowShape {
        self.shape
    }

    pub fn data(&self) -> &'a Prepared {
        self.data
    }

    pub fn get<T: Real>(&self, i: usize) -> WindowSample<T> {
        assert!(i < self.len(), "window {i} out of {}", self.len());
        build_window(&self.data.values, &self.data.marks, self.data.channels(), self.range.start + i, self.shape)
    }
}

fn build_window<T: Real>(
    values: &[f64],
    marks: &[Vec<usize>],
    m: usize,
    start: usize,
    shape: WindowShape,
) -> WindowSample<T> {
    let WindowShape {
        lookback: l,
        label_len,
        horizon: h,
    } = shape;
    let rows = |a: usize, b: usize| -> Vec<T> { values[a * m..b * m].iter().map(|&v| T::of(v)).collect() };
    let target = start + l;
    let x_enc = Tensor::new([l, m], rows(start, target)).expect("window shape");
    let mut dec = rows(target - label_len, target);
    dec.resize((label_len + h) * m, T::zero());
    let x_dec = Tensor::new([label_len + h, m], dec).expect("window shape");
    let y = Tensor::new([h, m], rows(target, target + h)).expect("window shape");
    WindowSample {
        x_enc,
        x_dec,
        marks_enc: marks[start..target].to_vec(),
        marks_dec: marks[target - label_len..target + h].to_vec(),
        y,
        target_start: target,
    }
}

/// All stride-1 windows of a standalone partition (`T x M` values plus
/// per-row marks).
pub fn make_windows<T: Real>(
    values: &[f64],
    marks: &[Vec<usize>],
    channels: usize,
    shape: WindowShape,
) -> Result<Vec<WindowSample<T>>> {
    shape.check()?;
    let rows = marks.len();
    if values.len() != rows * channels {
        return Err(Error::shape("make_windows", &[rows, channels], &[values.len()]));
    }
    if rows < shape.lookback + shape.horizon {
        return Err(Error::Config(format!(
            "partition has {rows} rows, fewer than lookback + horizon = {}",
            shape.lookback + shape.horizon
        )));
    }
    Ok((0..shape.count(rows))
        .map(|s| build_window(values, marks, channels, s, shape))
        .collect())
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;
    use proptest::prelude::*;

    use super::*;

    fn ts(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, mo, d).unwrap().and_hms_opt(h, mi, 0).unwrap()
    }

    fn csv_text(rows: usize, m: usize, step_min: i64) -> String {
        let mut s = String::from("date");
        for c in 0..m {
            s.push_str(&format!(",c{c}"));
        }
        s.push('\n');
        let t0 = ts(2016, 7, 1, 0, 0);
        for r in 0..rows {
            let t = t0 + chrono::Duration::minutes(step_min * r as i64);
            s.push_str(&t.format("%Y-%m-%d %H:%M:%S").to_string());
            for c in 0..m {
                s.push_str(&format!(",{}", (r * m + c) as f64 * 0.5));
            }
            s.push('\n');
        }
        s
    }

    #[test]
    fn calendar_marks() {
        assert_eq!(time_features(&ts(2016, 7, 1, 2, 0), Freq::Hourly), vec![7, 1, 4, 2]);
        assert_eq!(time_features(&ts(2016, 7, 1, 2, 30), Freq::TenMinutely)[4], 3);
        assert_eq!(time_features(&ts(2016, 7, 1, 2, 30), Freq::QuarterHourly)[4], 2);
        let jan = time_features(&ts(2017, 1, 1, 0, 0), Freq::Hourly);
        assert_eq!((jan[0], jan[1], jan[3]), (1, 1, 0));
    }

    #[test]
    fn loads_hourly_and_ten_minute_files() {
        let p = Path::new("mem.csv");
        let s = parse_csv(&csv_text(30, 7, 60), p).unwrap();
        assert_eq!((s.channels(), s.freq, s.len()), (7, Freq::Hourly, 30));
        let w = parse_csv(&csv_text(30, 21, 10), p).unwrap();
        assert_eq!((w.channels(), w.freq), (21, Freq::TenMinutely));
        let short = parse_csv("date,a\n2016-07-01 00:00,1\n2016-07-01 01:00,2\n", p).unwrap();
        assert_eq!(short.values, vec![1.0, 2.0]);
    }

    #[test]
    fn load_errors_name_the_row() {
        let p = Path::new("mem.csv");
        let mut lines: Vec<&str> = Vec::new();
        let text = csv_text(5, 2, 60);
        lines.extend(text.lines());
        lines.swap(2, 3);
        let shuffled = lines.join("\n");
        match parse_csv(&shuffled, p) {
            Err(Error::Load { row, msg, .. }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("increasing"));
            }
            other => panic!("{other:?}"),
        }
        let bad_cell = "date,a\n2016-07-01 00:00,1\n2016-07-01 01:00,x\n";
        assert!(matches!(parse_csv(bad_cell, p), Err(Error::Load { row: 3, .. })));
        let gap = "date,a\n2016-07-01 00:00,1\n2016-07-01 01:00,2\n2016-07-01 03:00,2\n";
        assert!(matches!(parse_csv(gap, p), Err(Error::Load { row: 4, .. })));
        let missing = "date,a\n2016-07-01 00:00,1\n2016-07-01 01:00,\n";
        assert!(parse_csv(missing, p).is_err());
        assert!(parse_csv("time,a\n2016-07-01 00:00,1\n", p).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = parse_csv(&csv_text(12, 3, 15), Path::new("x")).unwrap();
        s.write_csv(&p).unwrap();
        assert_eq!(load_csv(&p).unwrap(), s);
    }

    #[test]
    fn ratio_split_arithmetic() {
        let s = split(100, Freq::Hourly, SplitScheme::RATIO, 4, 2).unwrap();
        assert_eq!(s.train, 0..70);
        assert_eq!(s.val, 66..80);
        assert_eq!(s.test, 76..100);
        assert_eq!((s.val.len() - 4, s.test.len() - 4), (10, 20));
        assert!(split(100, Freq::Hourly, SplitScheme::RATIO, 10, 11).is_err());
    }

    #[test]
    fn ett_month_split() {
        let s = split(17420, Freq::Hourly, SplitScheme::ETT, 336, 96).unwrap();
        assert_eq!(s.train, 0..8640);
        assert_eq!(s.val, 8640 - 336..11520);
        assert_eq!(s.test, 11520 - 336..14400);
        assert!(split(1000, Freq::Hourly, SplitScheme::ETT, 336, 96).is_err());
        assert_eq!(SplitScheme::default_for("ETTh1"), SplitScheme::ETT);
        assert_eq!(SplitScheme::default_for("weather"), SplitScheme::RATIO);
    }

    fn marks_for(rows: usize) -> Vec<Vec<usize>> {
        (0..rows).map(|r| vec![1, 1, 0, r % 24]).collect()
    }

    #[test]
    fn window_counts_and_layout() {
        let shape = WindowShape {
            lookback: 3,
            label_len: 2,
            horizon: 2,
        };
        let values: Vec<f64> = (0..10).map(f64::from).collect();
        let w = make_windows::<f64>(&values, &marks_for(10), 1, shape).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w[0].y.data(), &[3.0, 4.0]);
        assert_eq!(w[0].target_start, 3);
        assert_eq!(w[0].x_dec.data(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(w[1].x_enc.data(), &[1.0, 2.0, 3.0]);

        let exact = make_windows::<f64>(&values[..5], &marks_for(5), 1, shape).unwrap();
        assert_eq!(exact.len(), 1);
        assert!(make_windows::<f64>(&values[..4], &marks_for(4), 1, shape).is_err());
    }

    #[test]
    fn scaler_examples() {
        // channel with mean 5, population std 2
        let vals = [3.0, 7.0, 3.0, 7.0];
        let s = StandardScaler::fit(&vals, 1).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (5.0, 2.0));
        assert_eq!(s.apply(&[9.0]), vec![2.0]);

        let constant = StandardScaler::fit(&[4.0, 4.0, 4.0], 1).unwrap();
        assert_eq!(constant.apply(&[4.0, 4.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn scaler_ignores_non_training_rows() {
        let series = parse_csv(&csv_text(200, 2, 60), Path::new("x")).unwrap();
        let shape = WindowShape {
            lookback: 8,
            label_len: 4,
            horizon: 4,
        };
        let p = Prepared::new("syn", &series, SplitScheme::RATIO, shape).unwrap();
        let mut altered = series.clone();
        for v in &mut altered.values[140 * 2..] {
            *v = 1e6;
        }
        let q = Prepared::new("syn", &altered, SplitScheme::RATIO, shape).unwrap();
        assert_eq!(p.scaler, q.scaler);
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(t in 1usize..80, l in 1usize..20, h in 1usize..20) {
            let shape = WindowShape { lookback: l, label_len: l / 2, horizon: h };
            let enumerated = (0..t).filter(|&s| s + l + h <= t).count();
            prop_assert_eq!(shape.count(t), enumerated);
        }

        #[test]
        fn scaler_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 6..60)) {
            let n = vals.len() / 3 * 3;
            let s = StandardScaler::fit(&vals[..n], 3).unwrap();
            let back = s.invert(&s.apply(&vals[..n]));
            for (a, b) in back.iter().zip(&vals[..n]) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn consecutive_windows_shift_by_one_row(t in 12usize..40) {
            let shape = WindowShape { lookback: 5, label_len: 2, horizon: 3 };
            let values: Vec<f64> = (0..t * 2).map(|v| v as f64).collect();
            let w = make_windows::<f64>(&values, &marks_for(t), 2, shape).unwrap();
            for pair in w.windows(2) {
                prop_assert_eq!(&pair[0].x_enc.data()[2..], &pair[1].x_enc.data()[..8]);
                let dec_label = &pair[0].x_dec.data()[..4];
                prop_assert_eq!(dec_label, &pair[0].x_enc.data()[6..]);
            }
        }
    }
}
