//! Per-iteration metrics records and their CSV / JSONL encodings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub wall_time_s: f64,
    pub steps_sampled: u64,
    pub steps_trained: u64,
    pub learner_version: u64,
    pub mean_episode_reward: Option<f64>,
    pub throughput_steps_per_s: f64,
    pub extras: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extras.get(key).copied()
    }

    pub fn set_extra(&mut self, key: impl Into<String>, value: f64) {
        self.extras.insert(key.into(), value);
    }
}

pub const CSV_COLUMNS: [&str; 7] = [
    "iter",
    "wall_time_s",
    "steps_sampled",
    "steps_trained",
    "learner_version",
    "mean_episode_reward",
    "throughput_steps_per_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "jsonl" => Ok(OutputFormat::Jsonl),
            other => Err(format!("unknown format {other:?} (expected csv or jsonl)")),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Jsonl => "jsonl",
        })
    }
}

/// `printf("%.9g")`-style rendering.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes records to `out`. CSV columns are the fixed fields followed by
/// `extra.<key>` for the sorted union of extras keys; a missing value is an
/// empty cell. JSONL keeps full float precision so it parses back exactly.
pub fn write_metrics<W: Write>(records: &[MetricsRecord], out: &mut W, format: OutputFormat) -> io::Result<()> {
    match format {
        OutputFormat::Csv => write_csv(records, out),
        OutputFormat::Jsonl => {
            for r in records {
                serde_json::to_writer(&mut *out, r)?;
                out.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn write_csv<W: Write>(records: &[MetricsRecord], out: &mut W) -> io::Result<()> {
    let extra_keys: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.extras.keys().map(String::as_str))
        .collect();
    let mut header: Vec<String> = CSV_COLUMNS.iter().map(|c| c.to_string()).collect();
    header.extend(extra_keys.iter().map(|k| format!("extra.{k}")));
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let mut row = vec![
            r.iter.to_string(),
            format_float(r.wall_time_s),
            r.steps_sampled.to_string(),
            r.steps_trained.to_string(),
            r.learner_version.to_string(),
            r.mean_episode_reward.map(format_float).unwrap_or_default(),
            format_float(r.throughput_steps_per_s),
        ];
        row.extend(
            extra_keys
                .iter()
                .map(|k| r.extras.get(*k).copied().map(format_float).unwrap_or_default()),
        );
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_metrics_file(records: &[MetricsRecord], path: &Path, format: OutputFormat) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_metrics(records, &mut w, format)?;
    w.flush()
}

pub fn read_jsonl<R: BufRead>(input: R) -> io::Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

/// Wall clock that reads zero where no monotonic clock is available.
#[derive(Debug, Clone, Copy)]
pub struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub fn elapsed_secs(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(0.1 + 0.2), "0.3");
        assert_eq!(format_float(123456.7891234), "123456.789");
        assert_eq!(format_float(1234567891.0), "1.23456789e+09");
        assert_eq!(format_float(0.00001234), "1.234e-05");
        assert_eq!(format_float(-2.5), "-2.5");
        assert_eq!(format_float(999999999.6), "1e+09");
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut out = Vec::new();
        write_metrics(&[], &mut out, OutputFormat::Csv).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{}\n", CSV_COLUMNS.join(",")));
    }

    #[test]
    fn null_reward_is_empty_cell_and_json_null() {
        let r = MetricsRecord {
            iter: 1,
            ..Default::default()
        };
        let mut csv = Vec::new();
        write_metrics(std::slice::from_ref(&r), &mut csv, OutputFormat::Csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "1,0,0,0,0,,0");
        let mut js = Vec::new();
        write_metrics(&[r], &mut js, OutputFormat::Jsonl).unwrap();
        assert!(String::from_utf8(js).unwrap().contains("\"mean_episode_reward\":null"));
    }

    #[test]
    fn extras_become_sorted_columns() {
        let mut a = MetricsRecord::default();
        a.set_extra("zeta", 1.0);
        let mut b = MetricsRecord::default();
        b.set_extra("alpha", 2.0);
        let mut out = Vec::new();
        write_metrics(&[a, b], &mut out, OutputFormat::Csv).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert!(lines[0].ends_with("extra.alpha,extra.zeta"));
        assert!(lines[1].ends_with(",,1"));
        assert!(lines[2].ends_with(",2,"));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let mut r = MetricsRecord {
            iter: 3,
            wall_time_s: 0.1 + 0.2,
            steps_sampled: 10,
            steps_trained: 7,
            learner_version: 2,
            mean_episode_reward: Some(1.0 / 3.0),
            throughput_steps_per_s: 12345.678901234567,
            extras: BTreeMap::new(),
        };
        r.set_extra("x", std::f64::consts::PI);
        let mut out = Vec::new();
        write_metrics(std::slice::from_ref(&r), &mut out, OutputFormat::Jsonl).unwrap();
        assert_eq!(read_jsonl(&out[..]).unwrap(), vec![r]);
    }
}
