use std::fs;

use straycal_core::calib::{apply_correction, calibrate, CalibrationDataset, SearchBounds};
use straycal_core::gmm::GmmConfig;
use straycal_core::io::{
    encode_depth_pgm, format_sig9, load_dataset, read_bundle, read_manifest, read_result, save_dataset,
    write_bundle, write_depth_csv, write_manifest, write_result, FormatError, Provenance, ResultFile,
    SINGLE_DISTANCE_WARNING,
};
use straycal_core::pso::PsoConfig;
use straycal_core::signal::{ModulationConfig, StrayParams};
use straycal_core::sim::{make_dataset, CheckerboardSpec, NoiseModel, RadiometryModel};

const TRUTH: StrayParams = StrayParams {
    amplitude: 0.0976,
    phase_rad: 0.3509,
};

fn dataset(distances: &[f64]) -> CalibrationDataset {
    let board = CheckerboardSpec {
        width: 24,
        height: 16,
        ..CheckerboardSpec::default()
    };
    let noise = NoiseModel {
        sample_noise_std: 5e-4,
        seed: 3,
    };
    make_dataset(distances, &board, &TRUTH, &RadiometryModel::default(), &noise, &ModulationConfig::default())
        .unwrap()
}

#[test]
fn bundle_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&[2.3]);
    let path = dir.path().join("b.bin");
    write_bundle(&path, &ds.bundles()[0], &ds.modulation).unwrap();
    let bytes = fs::read(&path).unwrap();
    let (b, m) = read_bundle(&path).unwrap();
    assert_eq!(m, ds.modulation);
    assert_eq!(b.dims(), (24, 16));
    assert_eq!(b.distance_label, 2.3);
    let again = dir.path().join("c.bin");
    write_bundle(&again, &b, &m).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);
}

#[test]
fn dataset_round_trip_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&[1.75, 4.0]);
    let prov = Provenance::Simulator {
        seed: 3,
        stray: TRUTH,
        sample_noise_std: 5e-4,
    };
    let (path, manifest) = save_dataset(dir.path(), &ds, prov).unwrap();
    let (back, loaded) = load_dataset(&path).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded.bundles()[1].distance_label, 4.0);
    let text = fs::read(&path).unwrap();
    write_manifest(&path, &read_manifest(&path).unwrap()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), text);
}

#[test]
fn measured_provenance_serializes_as_a_string() {
    let json = serde_json::to_string(&Provenance::Measured).unwrap();
    assert_eq!(json, "\"measured\"");
}

#[test]
fn manifest_referencing_missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = save_dataset(dir.path(), &dataset(&[2.0, 3.0]), Provenance::Measured).unwrap();
    fs::remove_file(dir.path().join("bundle_01.bin")).unwrap();
    assert!(matches!(load_dataset(&path), Err(FormatError::Io { .. })));
}

#[test]
fn manifest_dimension_disagreement_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (path, mut manifest) = save_dataset(dir.path(), &dataset(&[2.0]), Provenance::Measured).unwrap();
    manifest.width = 25;
    write_manifest(&path, &manifest).unwrap();
    assert!(matches!(load_dataset(&path), Err(FormatError::Manifest(_))));
}

#[test]
fn garbage_json_is_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    fs::write(&path, "{ not json").unwrap();
    assert!(matches!(read_manifest(&path), Err(FormatError::Json(_))));
}

#[test]
fn result_file_round_trip_and_warning() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&[1.75]);
    let gmm = GmmConfig::default();
    let pso = PsoConfig {
        max_iterations: 8,
        seed: 5,
        ..PsoConfig::default()
    };
    let r = calibrate(&ds, &gmm, &pso, SearchBounds::for_dataset(&ds)).unwrap();
    let file = ResultFile::from_result(&r, &gmm, &pso);
    assert_eq!(file.warnings, vec![SINGLE_DISTANCE_WARNING.to_string()]);
    let path = dir.path().join("r.json");
    write_result(&path, &file).unwrap();
    let back = read_result(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.stray().unwrap(), r.stray);
    assert_eq!(back.loss_history_m, r.loss_history);
}

#[test]
fn csv_rows_and_masked_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&[2.3]);
    let mut map = apply_correction(ds.bundles()[0].frame(), &TRUTH, &ds.modulation);
    map.valid.as_mut_slice()[1] = false;
    map.depth.as_mut_slice()[1] = f64::NAN;
    let path = dir.path().join("d.csv");
    write_depth_csv(&path, &map).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 16);
    let first: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(first.len(), 24);
    assert_eq!(first[1], "nan");
    assert_eq!(first[0], format_sig9(map.depth.as_slice()[0]));
    let parsed: f64 = first[0].parse().unwrap();
    assert!((parsed - map.depth.as_slice()[0]).abs() < 1e-8);
}

#[test]
fn pgm_header_and_size() {
    let ds = dataset(&[2.3]);
    let map = apply_correction(ds.bundles()[0].frame(), &TRUTH, &ds.modulation);
    let bytes = encode_depth_pgm(&map, 0.0, ds.modulation.unambiguous_range());
    let text = String::from_utf8_lossy(&bytes[..120]).to_string();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("P5"));
    assert!(lines.next().unwrap().starts_with("# depth_min_m=0 depth_max_m=4.79667933"));
    assert_eq!(lines.next(), Some("24 16"));
    assert_eq!(lines.next(), Some("65535"));
    let header_len = bytes.len() - 2 * 24 * 16;
    assert!(bytes[..header_len].ends_with(b"65535\n"));
}
