use bevtrack::io::*;
use bevtrack::metrics::MetricReport;
use bevtrack::simulator::{generate_scenario, ScenarioConfig};
use std::fs;

fn scenario() -> ScenarioConfig {
    ScenarioConfig {
        num_frames: 12,
        seed: 5,
        ..ScenarioConfig::default()
    }
}

#[test]
fn detections_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("det.csv");
    let (_, frames) = generate_scenario(&scenario()).unwrap();
    write_detections(&path, &frames).unwrap();
    assert!(feature_sidecar(&path).exists());
    let back = read_detections(&path, Some(frames.len())).unwrap();
    assert_eq!(back.len(), frames.len());
    for (a, b) in frames.iter().zip(&back) {
        assert_eq!(a.detections.len(), b.detections.len());
        for (x, y) in a.detections.iter().zip(&b.detections) {
            assert!((x.location.x - y.location.x).abs() < 1e-6);
            assert!((x.location.y - y.location.y).abs() < 1e-6);
            assert!((x.confidence - y.confidence).abs() < 1e-6);
            // Features are stored as f32.
            let err = x.feature.iter().zip(&y.feature).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "feature error {err}");
        }
    }
}

#[test]
fn ground_truth_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.csv");
    let (gt, _) = generate_scenario(&scenario()).unwrap();
    write_ground_truth(&path, &gt).unwrap();
    let back = read_ground_truth(&path, Some(gt.frames.len())).unwrap();
    assert_eq!(back.len(), gt.frames.len());
    for (a, b) in gt.frames.iter().zip(&back) {
        assert_eq!(a.len(), b.len());
        for ((ia, pa), (ib, pb)) in a.iter().zip(b) {
            assert_eq!(ia, ib);
            assert!((pa.x - pb.x).abs() < 1e-6 && (pa.y - pb.y).abs() < 1e-6);
        }
    }
}

#[test]
fn malformed_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "frame,id,x_m,y_m,conf\n0,1,abc,2.0,1.0\n").unwrap();
    assert!(read_points(&path).is_err());
    assert!(read_points(&dir.path().join("missing.csv")).is_err());

    // Feature sidecar shorter than the CSV claims.
    let (_, frames) = generate_scenario(&scenario()).unwrap();
    let det = dir.path().join("det.csv");
    write_detections(&det, &frames).unwrap();
    fs::write(feature_sidecar(&det), [0u8; 12]).unwrap();
    assert!(read_detections(&det, None).is_err());
}

#[test]
fn metric_rows_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let width = MetricReport::FIELDS.len();
    let row = |seed: &str, scale: f64| MetricRow {
        run_id: "a".into(),
        seed: seed.into(),
        config_hash: "abc".into(),
        values: (0..width).map(|i| i as f64 * scale - 1.0).collect(),
    };
    let rows = vec![row("0", 1.5), row("mean", 0.125)];
    write_metric_rows(&path, &rows).unwrap();
    let back = read_metric_rows(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].seed, "mean");
    assert_eq!(back[0].values, rows[0].values);
    let mut buf = Vec::new();
    write_metric_rows_to(&mut buf, &rows).unwrap();
    assert_eq!(buf, fs::read(&path).unwrap());
    // Rows narrower than the report are rejected on read.
    fs::write(&path, "run_id,seed,config_hash,mota\na,0,abc,1.0\n").unwrap();
    assert!(read_metric_rows(&path).is_err());
}
