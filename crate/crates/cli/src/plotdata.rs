//! `plotdata`: time-space diagram data from a trajectory CSV.
//!
//! Each vehicle's trajectory is cut into segments wherever it leaves the
//! lane, jumps in time or wraps around a ring, so that every segment is a
//! continuous curve in the (t, x) plane.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::eval::csv_bytes;
use crate::manifest::{build_hash, RunDir, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub time: f64,
    pub vehicle_id: u64,
    pub lane: usize,
    pub position: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentPoint {
    pub vehicle_id: u64,
    pub segment: usize,
    pub time: f64,
    pub position: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneSummary {
    pub lane: usize,
    pub vehicles: usize,
    pub segments: usize,
    pub points: usize,
    /// Propagation speed of the speed pattern in m/s; empty when undefined.
    pub band_slope: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PlotReport {
    pub dir: PathBuf,
    pub circumference: Option<f64>,
    pub lanes: Vec<LaneSummary>,
}

pub fn lane_file(lane: usize) -> String {
    format!("timespace_lane{lane}.csv")
}

/// Read `time,vehicle_id,position,speed` (plus optional `lane`) rows. Errors
/// carry the 1-based line number of the offending record.
pub fn read_trace(path: &Path) -> CliResult<Vec<TracePoint>> {
    let text = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_trace(&text).map_err(|e| match e {
        CliError::Data(msg) => CliError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_trace(bytes: &[u8]) -> CliResult<Vec<TracePoint>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(|e| CliError::Data(format!("line 1: {e}")))?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| {
        column(name).ok_or_else(|| CliError::Data(format!("line 1: missing column {name:?}")))
    };
    let (c_time, c_id, c_pos, c_speed) =
        (required("time")?, required("vehicle_id")?, required("position")?, required("speed")?);
    let c_lane = column("lane");

    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::Data(format!("line {line}: {e}"))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |c: usize, name: &str| -> CliResult<&str> {
            record.get(c).map(str::trim).ok_or_else(|| CliError::Data(format!("line {line}: missing {name}")))
        };
        let num = |c: usize, name: &str| -> CliResult<f64> {
            let raw = field(c, name)?;
            let v: f64 =
                raw.parse().map_err(|_| CliError::Data(format!("line {line}: {name} is not a number: {raw:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(CliError::Data(format!("line {line}: {name} is not finite")))
            }
        };
        let int = |c: usize, name: &str| -> CliResult<u64> {
            let raw = field(c, name)?;
            raw.parse().map_err(|_| CliError::Data(format!("line {line}: {name} is not an integer: {raw:?}")))
        };
        points.push(TracePoint {
            time: num(c_time, "time")?,
            vehicle_id: int(c_id, "vehicle_id")?,
            lane: match c_lane {
                Some(c) => int(c, "lane")? as usize,
                None => 0,
            },
            position: num(c_pos, "position")?,
            speed: num(c_speed, "speed")?,
        });
    }
    if points.is_empty() {
        return Err(CliError::Data("trace has no data rows".into()));
    }
    Ok(points)
}

/// Smallest positive spacing between distinct sample times.
pub fn sample_period(points: &[TracePoint]) -> Option<f64> {
    let mut times: Vec<f64> = points.iter().map(|p| p.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).min_by(f64::total_cmp)
}

fn by_lane_and_vehicle(points: &[TracePoint]) -> BTreeMap<usize, BTreeMap<u64, Vec<TracePoint>>> {
    let mut map: BTreeMap<usize, BTreeMap<u64, Vec<TracePoint>>> = BTreeMap::new();
    for p in points {
        map.entry(p.lane).or_default().entry(p.vehicle_id).or_default().push(*p);
    }
    for vehicles in map.values_mut() {
        for track in vehicles.values_mut() {
            track.sort_by(|a, b| a.time.total_cmp(&b.time));
        }
    }
    map
}

/// Ring circumference implied by wrap-arounds, `x_before + v_after·dt - x_after`,
/// taking the median over all wraps. `None` on an open road.
pub fn infer_circumference(points: &[TracePoint]) -> Option<f64> {
    let dt = sample_period(points)?;
    let mut estimates = Vec::new();
    for vehicles in by_lane_and_vehicle(points).values() {
        for track in vehicles.values() {
            for w in track.windows(2) {
                let consecutive = (w[1].time - w[0].time) < 1.5 * dt;
                if consecutive && w[1].position < w[0].position {
                    estimates.push(w[0].position + w[1].speed * (w[1].time - w[0].time) - w[1].position);
                }
            }
        }
    }
    if estimates.is_empty() {
        return None;
    }
    estimates.sort_by(f64::total_cmp);
    Some(estimates[estimates.len() / 2])
}

/// Split each vehicle track into continuous pieces.
pub fn segments(points: &[TracePoint]) -> BTreeMap<usize, Vec<SegmentPoint>> {
    let dt = sample_period(points).unwrap_or(f64::INFINITY);
    let mut out = BTreeMap::new();
    for (lane, vehicles) in by_lane_and_vehicle(points) {
        let mut rows = Vec::new();
        for (id, track) in vehicles {
            let mut segment = 0;
            for (k, p) in track.iter().enumerate() {
                if k > 0 {
                    let prev = &track[k - 1];
                    if p.time - prev.time > 1.5 * dt || p.position < prev.position {
                        segment += 1;
                    }
                }
                rows.push(SegmentPoint { vehicle_id: id, segment, time: p.time, position: p.position, speed: p.speed });
            }
        }
        out.insert(lane, rows);
    }
    out
}

const GRID_CELLS: usize = 256;
const MAX_SNAPSHOTS: usize = 400;
const LAG_SECONDS: f64 = 4.0;

/// Speed on a periodic grid at one instant, by linear interpolation between
/// neighbouring vehicles, with the instantaneous mean removed.
fn speed_field(mut cars: Vec<(f64, f64)>, length: f64) -> Option<Vec<f64>> {
    if cars.len() < 2 {
        return None;
    }
    cars.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = cars.len();
    let cell = length / GRID_CELLS as f64;
    let mut field = vec![0.0; GRID_CELLS];
    let mut j = 0;
    for (c, slot) in field.iter_mut().enumerate() {
        let x = (c as f64 + 0.5) * cell;
        while j < n && cars[j].0 <= x {
            j += 1;
        }
        let (behind, ahead) = if j == 0 || j == n {
            let b = cars[n - 1];
            let a = cars[0];
            (b, (a.0 + length, a.1))
        } else {
            (cars[j - 1], cars[j])
        };
        let xb = if x < behind.0 { behind.0 - length } else { behind.0 };
        let span = ahead.0 - xb;
        let w = if span > 0.0 { (x - xb) / span } else { 0.0 };
        *slot = behind.1 + w * (ahead.1 - behind.1);
    }
    let mean = field.iter().sum::<f64>() / GRID_CELLS as f64;
    field.iter_mut().for_each(|v| *v -= mean);
    Some(field)
}

/// Propagation speed (m/s) of speed disturbances on a ring lane, from the
/// spatial shift that best aligns the speed field with itself a few seconds
/// later. Negative values mean the pattern travels against the traffic.
pub fn band_slope(points: &[TracePoint], lane: usize, circumference: f64) -> Option<f64> {
    let dt = sample_period(points)?;
    let mut snapshots: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.lane == lane) {
        let tick = (p.time / dt).round() as u64;
        snapshots.entry(tick).or_default().push((p.position.rem_euclid(circumference), p.speed));
    }
    let lag = ((LAG_SECONDS / dt).round() as u64).max(1);
    let ticks: Vec<u64> = snapshots.keys().copied().filter(|t| snapshots.contains_key(&(t + lag))).collect();
    if ticks.is_empty() {
        return None;
    }
    let stride = ticks.len().div_ceil(MAX_SNAPSHOTS);
    let mut score = vec![0.0; GRID_CELLS];
    let mut energy = 0.0;
    for &t in ticks.iter().step_by(stride) {
        let (Some(a), Some(b)) = (
            speed_field(snapshots[&t].clone(), circumference),
            speed_field(snapshots[&(t + lag)].clone(), circumference),
        ) else {
            continue;
        };
        energy += a.iter().map(|v| v * v).sum::<f64>();
        for (shift, s) in score.iter_mut().enumerate() {
            *s += (0..GRID_CELLS).map(|i| a[i] * b[(i + shift) % GRID_CELLS]).sum::<f64>();
        }
    }
    if energy < 1e-9 {
        return None;
    }
    let best = (0..GRID_CELLS).max_by(|&i, &j| score[i].total_cmp(&score[j]))?;
    let signed = if best > GRID_CELLS / 2 { best as f64 - GRID_CELLS as f64 } else { best as f64 };
    Some(signed * circumference / GRID_CELLS as f64 / (lag as f64 * dt))
}

pub fn cmd_plotdata(input: &Path, kind: &str, circumference: Option<f64>, out: &Path) -> CliResult<PlotReport> {
    if kind != "timespace" {
        return Err(CliError::Usage(format!("unknown plot kind {kind:?}; expected \"timespace\"")));
    }
    if let Some(l) = circumference {
        if !(l > 0.0 && l.is_finite()) {
            return Err(CliError::Usage("--circumference must be positive".into()));
        }
    }
    let points = read_trace(input)?;
    let segs = segments(&points);
    let mut outputs: Vec<String> = segs.keys().map(|&l| lane_file(l)).collect();
    outputs.push("summary.csv".into());
    let manifest = RunManifest {
        experiment_id: "plotdata".into(),
        command: "plotdata".into(),
        config_hash: String::new(),
        seeds: Vec::new(),
        build_hash: build_hash(),
        outputs,
    };
    let run = RunDir::begin(out, manifest)?;
    run.guard(|run| {
        let length = circumference.or_else(|| infer_circumference(&points));
        let mut lanes = Vec::new();
        for (lane, rows) in &segs {
            run.write(&lane_file(*lane), &csv_bytes(rows)?)?;
            let vehicles = rows.iter().map(|r| r.vehicle_id).collect::<std::collections::BTreeSet<_>>().len();
            let segments = rows
                .iter()
                .map(|r| (r.vehicle_id, r.segment))
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            lanes.push(LaneSummary {
                lane: *lane,
                vehicles,
                segments,
                points: rows.len(),
                band_slope: length.and_then(|l| band_slope(&points, *lane, l)),
            });
        }
        run.write("summary.csv", &csv_bytes(&lanes)?)?;
        Ok(PlotReport { dir: run.root().to_path_buf(), circumference: length, lanes })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ringflow::ring_env::RingEnvConfig;
    use ringflow::trpo::run_eval_episode;

    fn uniform_trace(length: f64, n: usize, v: f64, steps: usize) -> String {
        let mut s = String::from("time,vehicle_id,kind,position,speed,accel\n");
        for k in 0..steps {
            let t = k as f64 * 0.2;
            for i in 0..n {
                let x = (i as f64 * length / n as f64 + v * t).rem_euclid(length);
                s.push_str(&format!("{t},{i},human,{x},{v},0\n"));
            }
        }
        s
    }

    #[test]
    fn uniform_flow_gives_parallel_lines() {
        let pts = parse_trace(uniform_trace(100.0, 4, 5.0, 200).as_bytes()).unwrap();
        let segs = segments(&pts);
        assert_eq!(segs.len(), 1);
        for w in segs[&0].windows(2) {
            if w[0].vehicle_id == w[1].vehicle_id && w[0].segment == w[1].segment {
                let slope = (w[1].position - w[0].position) / (w[1].time - w[0].time);
                assert!((slope - 5.0).abs() < 1e-9);
            }
        }
        let l = infer_circumference(&pts).unwrap();
        assert!((l - 100.0).abs() < 1e-9, "{l}");
        assert_eq!(band_slope(&pts, 0, 100.0), None);
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = parse_trace(b"time,vehicle_id,position,speed\n0,1,2,3\n0.2,1,oops,3\n").unwrap_err();
        assert_eq!(err.to_string(), "data: line 3: position is not a number: \"oops\"");
        let err = parse_trace(b"time,vehicle_id,position\n0,1,2\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        let err = parse_trace(b"time,vehicle_id,position,speed\n0,1,2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_trace(b"time,vehicle_id,position,speed\n").is_err());
        assert!(parse_trace(b"").is_err());
    }

    #[test]
    fn lane_changes_split_segments() {
        let csv = "time,vehicle_id,kind,position,speed,accel,lane\n\
                   0,7,human,10,1,0,0\n0.4,7,human,10.4,1,0,0\n0.8,7,human,10.8,1,0,1\n1.2,7,human,11.2,1,0,0\n";
        let segs = segments(&parse_trace(csv.as_bytes()).unwrap());
        assert_eq!(segs[&0].iter().map(|r| r.segment).collect::<Vec<_>>(), vec![0, 0, 1]);
        assert_eq!(segs[&1].len(), 1);
    }

    #[test]
    fn human_ring_waves_travel_upstream() {
        let cfg = RingEnvConfig { horizon_steps: 10_000, ..RingEnvConfig::preset(1, 260.0) };
        let (_, trace) = run_eval_episode(None, &cfg, 3, true).unwrap();
        let mut buf = Vec::new();
        trace.unwrap().write_csv(&mut buf).unwrap();
        let pts = parse_trace(&buf).unwrap();
        let late: Vec<TracePoint> = pts.into_iter().filter(|p| p.time >= 1000.0).collect();
        let l = infer_circumference(&late).unwrap();
        assert!((l - 260.0).abs() < 1e-6, "{l}");
        let slope = band_slope(&late, 0, l).unwrap();
        assert!(slope < 0.0, "band slope {slope}");
    }
}
