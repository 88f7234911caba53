//! CSV and binary sidecar formats.
//!
//! Point files use the columns `frame,id,x_m,y_m,conf`; clutter detections
//! carry id −1. Detection features live next to the CSV in
//! `<stem>.features.bin` as little-endian `f32`, one row per CSV row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::association::FrameOutput;
use crate::error::{Result, TrackError};
use crate::geometry::BevPoint;
use crate::metrics::MetricReport;
use crate::simulator::{Detection, DetectionFrame, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub frame: usize,
    pub id: i64,
    pub x_m: f64,
    pub y_m: f64,
    pub conf: f64,
}

pub fn feature_sidecar(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("features.bin")
}

pub fn write_points(path: &Path, records: &[PointRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<PointRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: PointRecord = rec?;
        if !(rec.x_m.is_finite() && rec.y_m.is_finite() && rec.conf.is_finite()) {
            return Err(TrackError::Parse(format!("non-finite value in {}", path.display())));
        }
        out.push(rec);
    }
    Ok(out)
}

fn frame_count(records: &[PointRecord], num_frames: Option<usize>) -> Result<usize> {
    let needed = records.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    match num_frames {
        Some(n) if n < needed => Err(TrackError::FrameMisalignment(format!(
            "file references frame {} but only {n} frames expected",
            needed - 1
        ))),
        Some(n) => Ok(n),
        None => Ok(needed),
    }
}

/// Groups identified rows by frame. Rows with negative ids are rejected.
pub fn group_by_frame(records: &[PointRecord], num_frames: Option<usize>) -> Result<Vec<Vec<(usize, BevPoint)>>> {
    let n = frame_count(records, num_frames)?;
    let mut out = vec![Vec::new(); n];
    for r in records {
        let id = usize::try_from(r.id).map_err(|_| TrackError::Parse(format!("negative id {} in track file", r.id)))?;
        out[r.frame].push((id, BevPoint::new(r.x_m, r.y_m)));
    }
    Ok(out)
}

fn write_f32_rows(path: &Path, rows: &[&[f64]]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        for v in *row {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f32_rows(path: &Path, rows: usize) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if rows == 0 {
        return if bytes.is_empty() {
            Ok(Vec::new())
        } else {
            Err(TrackError::Parse("feature sidecar has data but the CSV has no rows".into()))
        };
    }
    if bytes.len() % (4 * rows) != 0 {
        return Err(TrackError::Parse(format!(
            "feature sidecar of {} bytes does not split into {rows} rows",
            bytes.len()
        )));
    }
    let dim = bytes.len() / 4 / rows;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(values.chunks(dim.max(1)).map(<[f64]>::to_vec).collect())
}

pub fn write_detections(path: &Path, frames: &[DetectionFrame]) -> Result<()> {
    let mut records = Vec::new();
    let mut features: Vec<&[f64]> = Vec::new();
    for f in frames {
        for d in &f.detections {
            records.push(PointRecord {
                frame: f.timestamp,
                id: d.truth_id.map_or(-1, |i| i as i64),
                x_m: d.location.x,
                y_m: d.location.y,
                conf: d.confidence,
            });
            features.push(&d.feature);
        }
    }
    write_points(path, &records)?;
    write_f32_rows(&feature_sidecar(path), &features)
}

pub fn read_detections(path: &Path, num_frames: Option<usize>) -> Result<Vec<DetectionFrame>> {
    let records = read_points(path)?;
    let features = read_f32_rows(&feature_sidecar(path), records.len())?;
    let n = frame_count(&records, num_frames)?;
    let mut frames: Vec<DetectionFrame> = (0..n)
        .map(|t| DetectionFrame {
            timestamp: t,
            detections: Vec::new(),
        })
        .collect();
    for (r, feature) in records.into_iter().zip(features) {
        frames[r.frame].detections.push(Detection {
            location: BevPoint::new(r.x_m, r.y_m),
            confidence: r.conf,
            feature,
            truth_id: usize::try_from(r.id).ok(),
        });
    }
    Ok(frames)
}

/// Ground truth rows with confidence 1; the sidecar holds each row's
/// canonical embedding.
pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut records = Vec::new();
    let mut features: Vec<&[f64]> = Vec::new();
    for (t, frame) in gt.frames.iter().enumerate() {
        for (id, p) in frame {
            records.push(PointRecord {
                frame: t,
                id: *id as i64,
                x_m: p.x,
                y_m: p.y,
                conf: 1.0,
            });
            features.push(&gt.embeddings[*id]);
        }
    }
    write_points(path, &records)?;
    write_f32_rows(&feature_sidecar(path), &features)
}

pub fn read_ground_truth(path: &Path, num_frames: Option<usize>) -> Result<Vec<Vec<(usize, BevPoint)>>> {
    group_by_frame(&read_points(path)?, num_frames)
}

pub fn track_records(outputs: &[FrameOutput]) -> Vec<PointRecord> {
    outputs
        .iter()
        .flat_map(|o| {
            o.tracks.iter().map(|r| PointRecord {
                frame: r.frame,
                id: r.id as i64,
                x_m: r.location.x,
                y_m: r.location.y,
                conf: r.confidence,
            })
        })
        .collect()
}

pub fn write_tracks(path: &Path, outputs: &[FrameOutput]) -> Result<()> {
    write_points(path, &track_records(outputs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub frame: usize,
    pub detection: usize,
    pub trajectory: usize,
    pub tmc: f64,
    pub tac: f64,
    pub combined: f64,
}

/// One row per (detection, trajectory) pair of every recorded frame.
pub fn write_cost_dump(path: &Path, outputs: &[FrameOutput]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in outputs {
        let Some(c) = &o.costs else { continue };
        for (i, &det) in o.cost_rows.iter().enumerate() {
            for (j, &traj) in o.cost_cols.iter().enumerate() {
                w.serialize(CostRecord {
                    frame: o.frame,
                    detection: det,
                    trajectory: traj,
                    tmc: c.tmc[(i, j)],
                    tac: c.tac[(i, j)],
                    combined: c.combined[(i, j)],
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Metric row keyed by run id, seed and configuration hash.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: String,
    pub config_hash: String,
    pub values: Vec<f64>,
}

impl MetricRow {
    pub fn new(run_id: &str, seed: impl ToString, config_hash: &str, report: &MetricReport) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed: seed.to_string(),
            config_hash: config_hash.to_string(),
            values: report.values().to_vec(),
        }
    }
}

pub fn metric_header(keys: &[&str]) -> Vec<String> {
    keys.iter()
        .map(|s| s.to_string())
        .chain(MetricReport::FIELDS.iter().map(|s| s.to_string()))
        .collect()
}

pub fn write_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_metric_rows_to(File::create(path)?, rows)
}

pub fn write_metric_rows_to<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metric_header(&["run_id", "seed", "config_hash"]))?;
    for r in rows {
        let mut rec = vec![r.run_id.clone(), r.seed.clone(), r.config_hash.clone()];
        rec.extend(r.values.iter().map(|v| format_value(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 + MetricReport::FIELDS.len() {
            return Err(TrackError::Parse(format!("metric row with {} fields", rec.len())));
        }
        let values = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|e| TrackError::Parse(format!("{v}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(MetricRow {
            run_id: rec[0].to_string(),
            seed: rec[1].to_string(),
            config_hash: rec[2].to_string(),
            values,
        });
    }
    Ok(out)
}

/// Fixed six-decimal formatting so reports diff cleanly.
pub fn format_value(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_name() {
        assert_eq!(feature_sidecar(Path::new("out/det.csv")), PathBuf::from("out/det.features.bin"));
    }

    #[test]
    fn frame_count_respects_expected_length() {
        let r = PointRecord {
            frame: 4,
            id: 0,
            x_m: 0.0,
            y_m: 0.0,
            conf: 1.0,
        };
        assert_eq!(frame_count(&[r], None).unwrap(), 5);
        assert_eq!(frame_count(&[r], Some(7)).unwrap(), 7);
        assert!(frame_count(&[r], Some(3)).is_err());
    }
}
