//! Flow-record ingestion: parsing, protocol filtering and sliding-window slicing.
//!
//! Two on-disk layouts are understood. The canonical CSV is
//!
//! ```text
//! ts_start,duration,proto,src_ip,src_port,dst_ip,dst_port,src_bytes,dst_bytes[,label]
//! ```
//!
//! with an optional header line, lowercase protocol names and labels in
//! `{bot, legit}` (anything else, or a missing column, is `UNKNOWN`). The
//! second layout is the Argus `binetflow` export used by CTU-13.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Proto {
    Tcp,
    Udp,
    Other,
}

impl Proto {
    fn parse(s: &str) -> Proto {
        match s.trim().to_ascii_lowercase().as_str() {
            "tcp" => Proto::Tcp,
            "udp" => Proto::Udp,
            _ => Proto::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
            Proto::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bot,
    Legit,
    #[default]
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bot => "bot",
            Label::Legit => "legit",
            Label::Unknown => "unknown",
        }
    }

    /// `Some(true)` for bots, `Some(false)` for legitimate nodes.
    pub fn as_binary(self) -> Option<bool> {
        match self {
            Label::Bot => Some(true),
            Label::Legit => Some(false),
            Label::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub ts_start: f64,
    pub duration: f64,
    pub proto: Proto,
    pub src_ip: String,
    pub src_port: u16,
    pub dst_ip: String,
    pub dst_port: u16,
    pub src_bytes: u64,
    pub dst_bytes: u64,
    pub label: Label,
}

impl FlowRecord {
    pub fn to_canonical_line(&self) -> String {
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{}",
            self.ts_start,
            self.duration,
            self.proto.as_str(),
            self.src_ip,
            self.src_port,
            self.dst_ip,
            self.dst_port,
            self.src_bytes,
            self.dst_bytes
        );
        match self.label {
            Label::Bot | Label::Legit => {
                line.push(',');
                line.push_str(self.label.as_str());
            }
            Label::Unknown => {}
        }
        line
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowFormat {
    #[default]
    Canonical,
    Binetflow,
}

impl FromStr for FlowFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(FlowFormat::Canonical),
            "binetflow" => Ok(FlowFormat::Binetflow),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for FlowFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowFormat::Canonical => f.write_str("canonical"),
            FlowFormat::Binetflow => f.write_str("binetflow"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseReport {
    pub records: Vec<FlowRecord>,
    /// Non-blank, non-header lines that could not be parsed.
    pub malformed: usize,
}

pub fn parse_flow_file(path: impl AsRef<Path>, format: &str) -> Result<ParseReport> {
    let format = FlowFormat::from_str(format)?;
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    parse_flows(file, format)
}

pub fn parse_flows<R: Read>(reader: R, format: FlowFormat) -> Result<ParseReport> {
    let reader = BufReader::new(reader);
    let mut records = Vec::new();
    let mut malformed = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if i == 0 && is_header(line, format) {
            continue;
        }
        let parsed = match format {
            FlowFormat::Canonical => parse_canonical_line(line),
            FlowFormat::Binetflow => parse_binetflow_line(line),
        };
        match parsed {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyAfterParse { malformed });
    }
    Ok(ParseReport { records, malformed })
}

fn is_header(line: &str, format: FlowFormat) -> bool {
    let first = line.split(',').next().unwrap_or("").trim();
    match format {
        FlowFormat::Canonical => first.eq_ignore_ascii_case("ts_start"),
        FlowFormat::Binetflow => first.eq_ignore_ascii_case("StartTime"),
    }
}

fn non_negative(v: f64) -> Option<f64> {
    (v.is_finite() && v >= 0.0).then_some(v)
}

pub fn parse_canonical_line(line: &str) -> Option<FlowRecord> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if cols.len() != 9 && cols.len() != 10 {
        return None;
    }
    let ts_start: f64 = cols[0].parse().ok()?;
    if !ts_start.is_finite() {
        return None;
    }
    let duration = non_negative(cols[1].parse().ok()?)?;
    let label = match cols.get(9).map(|s| s.to_ascii_lowercase()) {
        Some(ref s) if s == "bot" => Label::Bot,
        Some(ref s) if s == "legit" => Label::Legit,
        _ => Label::Unknown,
    };
    let src_ip = cols[3];
    let dst_ip = cols[5];
    if src_ip.is_empty() || dst_ip.is_empty() {
        return None;
    }
    Some(FlowRecord {
        ts_start,
        duration,
        proto: Proto::parse(cols[2]),
        src_ip: src_ip.to_string(),
        src_port: cols[4].parse().ok()?,
        dst_ip: dst_ip.to_string(),
        dst_port: cols[6].parse().ok()?,
        src_bytes: cols[7].parse().ok()?,
        dst_bytes: cols[8].parse().ok()?,
        label,
    })
}

fn parse_port(s: &str) -> Option<u16> {
    let s = s.trim();
    if s.is_empty() {
        return Some(0);
    }
    if let Some(hex) = s.strip_prefix("0x") {
        return u16::from_str_radix(hex, 16).ok();
    }
    s.parse().ok()
}

fn parse_argus_time(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return Some(v);
    }
    for fmt in ["%Y/%m/%d %H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            let utc = dt.and_utc();
            return Some(utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_micros()) * 1e-6);
        }
    }
    None
}

/// CTU-13 layout:
/// `StartTime,Dur,Proto,SrcAddr,Sport,Dir,DstAddr,Dport,State,sTos,dTos,TotPkts,TotBytes,SrcBytes,Label`.
/// Destination bytes are `TotBytes - SrcBytes`.
pub fn parse_binetflow_line(line: &str) -> Option<FlowRecord> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if cols.len() < 15 {
        return None;
    }
    let ts_start = parse_argus_time(cols[0])?;
    let duration = non_negative(cols[1].parse().ok()?)?;
    let total: u64 = cols[12].parse().ok()?;
    let src_bytes: u64 = cols[13].parse().ok()?;
    let dst_bytes = total.checked_sub(src_bytes)?;
    let raw_label = cols[14..].join(",");
    let label = if raw_label.contains("From-Botnet") {
        Label::Bot
    } else if raw_label.contains("Normal") {
        Label::Legit
    } else {
        Label::Unknown
    };
    if cols[3].is_empty() || cols[6].is_empty() {
        return None;
    }
    Some(FlowRecord {
        ts_start,
        duration,
        proto: Proto::parse(cols[2]),
        src_ip: cols[3].to_string(),
        src_port: parse_port(cols[4])?,
        dst_ip: cols[6].to_string(),
        dst_port: parse_port(cols[7])?,
        src_bytes,
        dst_bytes,
        label,
    })
}

pub fn write_canonical_csv<W: Write>(mut out: W, records: &[FlowRecord]) -> std::io::Result<()> {
    writeln!(
        out,
        "ts_start,duration,proto,src_ip,src_port,dst_ip,dst_port,src_bytes,dst_bytes,label"
    )?;
    for r in records {
        writeln!(out, "{}", r.to_canonical_line())?;
    }
    Ok(())
}

pub fn filter_tcp_udp(records: &[FlowRecord]) -> Vec<FlowRecord> {
    records
        .iter()
        .filter(|r| matches!(r.proto, Proto::Tcp | Proto::Udp))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSlice {
    pub window_start: f64,
    pub window_len: f64,
    pub records: Vec<FlowRecord>,
}

impl WindowSlice {
    pub fn contains(&self, ts: f64) -> bool {
        self.window_start <= ts && ts < self.window_start + self.window_len
    }
}

/// Start time of the `index`-th window. Shared by slicing and its tests so that
/// membership is decided on identical floating-point values.
pub fn window_start(origin: f64, stride: f64, index: u64) -> f64 {
    origin + index as f64 * stride
}

/// Stride-aligned origin at or before the earliest start time.
pub fn window_origin(records: &[FlowRecord], stride: f64) -> Option<f64> {
    let min = records
        .iter()
        .map(|r| r.ts_start)
        .fold(f64::INFINITY, f64::min);
    min.is_finite().then(|| (min / stride).floor() * stride)
}

/// Slice records into windows `[t0 + j*stride, t0 + j*stride + window_len)`.
///
/// Membership is by flow start time; empty windows are omitted and records
/// keep their input order inside each window.
pub fn slice_windows(
    records: &[FlowRecord],
    window_len: f64,
    stride: f64,
) -> Result<Vec<WindowSlice>> {
    if !(window_len.is_finite() && stride.is_finite() && window_len > 0.0 && stride > 0.0)
        || stride > window_len
    {
        return Err(Error::InvalidWindow { window_len, stride });
    }
    let Some(origin) = window_origin(records, stride) else {
        return Ok(Vec::new());
    };
    let mut buckets: BTreeMap<u64, Vec<FlowRecord>> = BTreeMap::new();
    for r in records {
        let offset = r.ts_start - origin;
        // Candidate range padded by one on each side; the exact test below decides.
        let lo = ((offset - window_len) / stride).floor() as i64 - 1;
        let hi = (offset / stride).floor() as i64 + 1;
        for j in lo.max(0)..=hi.max(0) {
            let start = window_start(origin, stride, j as u64);
            if start <= r.ts_start && r.ts_start < start + window_len {
                buckets.entry(j as u64).or_default().push(r.clone());
            }
        }
    }
    Ok(buckets
        .into_iter()
        .map(|(j, records)| WindowSlice {
            window_start: window_start(origin, stride, j),
            window_len,
            records,
        })
        .collect())
}
