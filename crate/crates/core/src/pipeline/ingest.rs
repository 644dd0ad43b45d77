//! Porto-style taxi CSV ingestion and the plain-text trajectory store.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GpsPoint, Trajectory};
use crate::grid::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestOptions {
    pub bbox: BBox,
    /// Seconds between consecutive polyline samples.
    pub interval_s: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            bbox: BBox::PORTO,
            interval_s: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CallType {
    A,
    B,
    C,
}

/// One CSV row after field parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTripRecord {
    pub trip_id: String,
    pub call_type: CallType,
    pub start_timestamp: i64,
    pub missing_data: bool,
    /// `(lon, lat)` pairs as stored in the file.
    pub polyline: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows: usize,
    pub parsed: usize,
    pub skipped_missing: usize,
    pub skipped_empty: usize,
    pub malformed: usize,
    pub points_kept: usize,
    pub points_dropped: usize,
}

impl IngestStats {
    pub fn skipped(&self) -> usize {
        self.skipped_missing + self.skipped_empty
    }

    pub fn is_conserved(&self) -> bool {
        self.parsed + self.skipped() + self.malformed == self.rows
    }

    pub fn to_text(&self) -> String {
        format!(
            "rows={}\nparsed={}\nskipped={}\nskipped_missing={}\nskipped_empty={}\nmalformed={}\npoints_kept={}\npoints_dropped={}\n",
            self.rows,
            self.parsed,
            self.skipped(),
            self.skipped_missing,
            self.skipped_empty,
            self.malformed,
            self.points_kept,
            self.points_dropped
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// 1-based line in the input file.
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub trajectories: Vec<Trajectory>,
    pub stats: IngestStats,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    #[serde(rename = "TRIP_ID")]
    trip_id: String,
    #[serde(rename = "CALL_TYPE")]
    call_type: String,
    #[serde(rename = "TIMESTAMP")]
    timestamp: String,
    #[serde(rename = "MISSING_DATA")]
    missing_data: String,
    #[serde(rename = "POLYLINE")]
    polyline: String,
}

fn parse_row(row: CsvRow) -> std::result::Result<RawTripRecord, String> {
    let trip_id = row.trip_id.trim().to_string();
    if trip_id.is_empty() {
        return Err("empty TRIP_ID".into());
    }
    let call_type = match row.call_type.trim() {
        "A" => CallType::A,
        "B" => CallType::B,
        "C" => CallType::C,
        other => return Err(format!("unknown CALL_TYPE {other:?}")),
    };
    let start_timestamp = row
        .timestamp
        .trim()
        .parse::<i64>()
        .map_err(|_| format!("bad TIMESTAMP {:?}", row.timestamp))?;
    let missing_data = match row.missing_data.trim() {
        "True" | "true" | "TRUE" | "1" => true,
        "False" | "false" | "FALSE" | "0" => false,
        other => return Err(format!("bad MISSING_DATA {other:?}")),
    };
    let pairs: Vec<[f64; 2]> = serde_json::from_str(row.polyline.trim()).map_err(|e| format!("bad POLYLINE: {e}"))?;
    if pairs.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite coordinate in POLYLINE".into());
    }
    Ok(RawTripRecord {
        trip_id,
        call_type,
        start_timestamp,
        missing_data,
        polyline: pairs.into_iter().map(|[lon, lat]| (lon, lat)).collect(),
    })
}

/// Keeps in-box points; each kept point retains the timestamp of its
/// original sample index.
pub fn to_trajectory(rec: &RawTripRecord, opts: &IngestOptions) -> (Option<Trajectory>, usize) {
    let mut points = Vec::with_capacity(rec.polyline.len());
    for (i, &(lon, lat)) in rec.polyline.iter().enumerate() {
        if opts.bbox.contains(lat, lon) {
            points.push(GpsPoint {
                lat,
                lon,
                t: rec.start_timestamp as f64 + opts.interval_s * i as f64,
            });
        }
    }
    let dropped = rec.polyline.len() - points.len();
    if points.is_empty() {
        (None, dropped)
    } else {
        (
            Some(Trajectory {
                id: rec.trip_id.clone(),
                points,
            }),
            dropped,
        )
    }
}

pub fn ingest_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<IngestReport> {
    if !(opts.interval_s > 0.0) {
        return Err(Error::Config("interval_s must be positive".into()));
    }
    opts.bbox.validate()?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["TRIP_ID", "CALL_TYPE", "TIMESTAMP", "MISSING_DATA", "POLYLINE"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Malformed(format!("CSV header lacks {col}")));
        }
    }
    let mut report = IngestReport {
        trajectories: Vec::new(),
        stats: IngestStats::default(),
        diagnostics: Vec::new(),
    };
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                // A broken record still consumed input; count and continue
                // unless the reader cannot advance.
                report.stats.rows += 1;
                report.stats.malformed += 1;
                report.diagnostics.push(Diagnostic {
                    line,
                    message: e.to_string(),
                });
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(e.into());
                }
                continue;
            }
        }
        report.stats.rows += 1;
        let line = record.position().map_or(line, |p| p.line());
        let parsed = record
            .deserialize::<CsvRow>(Some(&headers))
            .map_err(|e| e.to_string())
            .and_then(parse_row);
        let rec = match parsed {
            Ok(r) => r,
            Err(message) => {
                report.stats.malformed += 1;
                report.diagnostics.push(Diagnostic { line, message });
                continue;
            }
        };
        if rec.missing_data {
            report.stats.skipped_missing += 1;
            continue;
        }
        let (traj, dropped) = to_trajectory(&rec, opts);
        report.stats.points_dropped += dropped;
        match traj {
            Some(t) => {
                report.stats.parsed += 1;
                report.stats.points_kept += t.points.len();
                report.trajectories.push(t);
            }
            None => report.stats.skipped_empty += 1,
        }
    }
    Ok(report)
}

pub fn ingest_path(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<IngestReport> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(f), opts)
}

/// Writes trajectories as a Porto-style CSV (one row per trip, 15 s spacing
/// assumed by readers).
pub fn write_porto_csv<W: Write>(trajs: &[Trajectory], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "TRIP_ID",
        "CALL_TYPE",
        "ORIGIN_CALL",
        "ORIGIN_STAND",
        "TAXI_ID",
        "TIMESTAMP",
        "DAY_TYPE",
        "MISSING_DATA",
        "POLYLINE",
    ])?;
    for (i, t) in trajs.iter().enumerate() {
        let start = t.points.first().map_or(0, |p| p.t.round() as i64);
        let poly: Vec<[f64; 2]> = t.points.iter().map(|p| [p.lon, p.lat]).collect();
        w.write_record([
            t.id.as_str(),
            "C",
            "",
            "",
            &(20_000_000 + i % 450).to_string(),
            &start.to_string(),
            "A",
            "False",
            &serde_json::to_string(&poly)?,
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// One trajectory per line: `id<TAB>lat,lon,t;lat,lon,t;...`
pub fn trajectory_line(t: &Trajectory) -> String {
    let pts: Vec<String> = t.points.iter().map(|p| format!("{:?},{:?},{:?}", p.lat, p.lon, p.t)).collect();
    format!("{}\t{}", t.id, pts.join(";"))
}

pub fn parse_trajectory_line(line: &str) -> Result<Trajectory> {
    let bad = || Error::Malformed(format!("trajectory line {line:?}"));
    let (id, rest) = line.split_once('\t').ok_or_else(bad)?;
    let points = rest
        .split(';')
        .map(|p| {
            let v: Vec<f64> = p.split(',').map(|x| x.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
            match v[..] {
                [lat, lon, t] => Ok(GpsPoint { lat, lon, t }),
                _ => Err(bad()),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(id, points)
}

/// Writes a trajectory store; `echo` lines are prefixed with `# `.
pub fn write_trajectories(path: impl AsRef<Path>, trajs: &[Trajectory], echo: &str) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for l in echo.lines() {
        s.push_str("# ");
        s.push_str(l);
        s.push('\n');
    }
    for t in trajs {
        s.push_str(&trajectory_line(t));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(parse_trajectory_line)
        .collect()
}

/// Reads either a Porto CSV (by `.csv` extension) or a trajectory store.
pub fn load_trajectories(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Ok(ingest_path(path, opts)?.trajectories)
    } else {
        read_trajectories(path)
    }
}
