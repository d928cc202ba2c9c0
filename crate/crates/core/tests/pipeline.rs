use std::f64::consts::TAU;

use straycal_core::calib::{
    apply_correction, calibrate, calibration_loss, depth_stats, depth_stats_where, evaluate_heldout,
    per_distance_mean_depths, segment_dataset, CalibError, CalibrationDataset, LossModel, SearchBounds,
};
use straycal_core::gmm::{GmmConfig, PixelLabel};
use straycal_core::pso::PsoConfig;
use straycal_core::signal::{correct_samples, raw_amplitude, ModulationConfig, StrayParams};
use straycal_core::sim::{
    make_dataset, multi_object_scene, reflected_amplitude, render_checkerboard, render_scene, CheckerboardSpec,
    NoiseModel, RadiometryModel,
};

const TRUTH: StrayParams = StrayParams {
    amplitude: 0.0976,
    phase_rad: 0.3509,
};
const DISTANCES: [f64; 4] = [1.75, 2.3, 3.0, 4.0];

fn cfg() -> ModulationConfig {
    ModulationConfig::default()
}

fn board(w: usize) -> CheckerboardSpec {
    CheckerboardSpec {
        width: w,
        height: w,
        ..CheckerboardSpec::default()
    }
}

fn dataset(w: usize, stray: &StrayParams, noise_std: f64, seed: u64) -> CalibrationDataset {
    let noise = NoiseModel {
        sample_noise_std: noise_std,
        seed,
    };
    make_dataset(&DISTANCES, &board(w), stray, &RadiometryModel::default(), &noise, &cfg()).unwrap()
}

#[test]
fn truth_is_grid_minimum() {
    let ds = dataset(100, &TRUTH, 0.0, 0);
    let segs = segment_dataset(&ds, &GmmConfig::default(), 0).unwrap();
    let model = LossModel::new(&ds, &segs).unwrap();
    let at_truth = model.loss(&TRUTH).unwrap();
    assert!(at_truth < 1e-9, "{at_truth}");
    let amax = SearchBounds::for_dataset(&ds).amplitude_max;
    for i in 0..100 {
        for j in 0..100 {
            let p = StrayParams {
                amplitude: amax * i as f64 / 99.0,
                phase_rad: TAU * j as f64 / 100.0,
            };
            if let Ok(l) = model.loss(&p) {
                assert!(l >= at_truth, "grid point {p:?} beats truth: {l}");
            }
        }
    }
}

#[test]
fn pre_correction_loss_is_tens_of_centimeters() {
    let ds = dataset(40, &TRUTH, 0.0, 0);
    let segs = segment_dataset(&ds, &GmmConfig::default(), 0).unwrap();
    let l = calibration_loss(&StrayParams::ZERO, &ds, &segs).unwrap();
    assert!(l > 0.1, "{l}");
}

#[test]
fn mean_depths_at_truth_and_without_correction() {
    let ds = dataset(40, &TRUTH, 0.0, 0);
    let segs = segment_dataset(&ds, &GmmConfig::default(), 0).unwrap();
    let b = &ds.bundles()[1];
    let (d1, d2) = per_distance_mean_depths(b, &segs[1], &TRUTH, &cfg()).unwrap();
    assert!((d1 - 2.3).abs() < 1e-9 && (d2 - 2.3).abs() < 1e-9);
    let (r1, r2) = per_distance_mean_depths(b, &segs[1], &StrayParams::ZERO, &cfg()).unwrap();
    // the dark cluster is pulled further toward the stray depth
    let stray_depth = 0.3509 * cfg().depth_per_radian();
    assert!((r1 - stray_depth).abs() < (r2 - stray_depth).abs());
}

#[test]
fn cluster_names_do_not_matter() {
    let ds = dataset(40, &TRUTH, 4e-4, 2);
    let segs = segment_dataset(&ds, &GmmConfig::default(), 0).unwrap();
    let swapped: Vec<_> = segs.iter().map(|s| s.with_swapped_clusters()).collect();
    for p in [StrayParams::ZERO, TRUTH, StrayParams::new(0.2, 4.0).unwrap()] {
        let a = calibration_loss(&p, &ds, &segs).unwrap();
        let b = calibration_loss(&p, &ds, &swapped).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn correction_removes_exactly_the_stray_phasor() {
    let cfg = cfg();
    let b = render_checkerboard(&board(20), &TRUTH, &RadiometryModel::default(), &NoiseModel::noiseless(), &cfg)
        .unwrap();
    let spec = board(20);
    let radio = RadiometryModel::default();
    for v in 0..20 {
        for u in 0..20 {
            let refl = if spec.is_bright(u, v) { 0.9 } else { 0.1 };
            let expected = reflected_amplitude(refl, 2.3, &radio) * cfg.correlation_gain();
            let s = correct_samples(b.frame().get(u, v).unwrap(), &TRUTH, &cfg);
            assert!((raw_amplitude(&s) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn noiseless_corrected_board_is_flat() {
    let cfg = cfg();
    let b = render_checkerboard(&board(50), &TRUTH, &RadiometryModel::default(), &NoiseModel::noiseless(), &cfg)
        .unwrap();
    let s = depth_stats(&apply_correction(b.frame(), &TRUTH, &cfg)).unwrap();
    assert!(s.std_dev < 1e-9);
    let raw = apply_correction(b.frame(), &StrayParams::ZERO, &cfg);
    assert!(depth_stats(&raw).unwrap().std_dev > 0.1);
}

#[test]
fn true_params_beat_raw_on_every_noisy_bundle() {
    let ds = dataset(60, &TRUTH, 5.5e-4, 9);
    for b in ds.bundles() {
        let raw = depth_stats(&apply_correction(b.frame(), &StrayParams::ZERO, &ds.modulation)).unwrap();
        let cor = depth_stats(&apply_correction(b.frame(), &TRUTH, &ds.modulation)).unwrap();
        assert!(cor.std_dev < raw.std_dev);
        assert!(cor.std_dev < 0.1 * raw.std_dev);
    }
}

#[test]
fn zero_params_give_raw_depth() {
    let cfg = cfg();
    let b = render_checkerboard(&board(20), &TRUTH, &RadiometryModel::default(), &NoiseModel::noiseless(), &cfg)
        .unwrap();
    let a = apply_correction(b.frame(), &StrayParams::ZERO, &cfg);
    for (d, s) in a.depth.iter().zip(b.frame().iter()) {
        assert_eq!(*d, straycal_core::signal::depth_from_corrected(s, &cfg).unwrap());
    }
}

#[test]
fn object_means_match_scene_with_true_params() {
    let cfg = cfg();
    let scene = multi_object_scene(120, 90).unwrap();
    let noise = NoiseModel {
        sample_noise_std: 5.5e-4,
        seed: 4,
    };
    let b = render_scene(&scene.spec, &TRUTH, &RadiometryModel::default(), &noise, &cfg).unwrap();
    let map = apply_correction(b.frame(), &TRUTH, &cfg);
    for id in 0..=scene.object_count() as u8 {
        let members = scene.members(id);
        let truth = members.iter().map(|&i| scene.spec.depth.as_slice()[i]).sum::<f64>() / members.len() as f64;
        let labels = scene.labels.as_slice();
        let s = depth_stats_where(&map, |i| labels[i] == id).unwrap();
        assert!((s.mean - truth).abs() < 5e-3, "object {id}: {} vs {truth}", s.mean);
    }
}

#[test]
fn calibrating_twice_is_identical() {
    let ds = dataset(30, &TRUTH, 5e-4, 1);
    let pso = PsoConfig {
        max_iterations: 15,
        seed: 8,
        ..PsoConfig::default()
    };
    let gmm = GmmConfig::default();
    let a = calibrate(&ds, &gmm, &pso, SearchBounds::for_dataset(&ds)).unwrap();
    let b = calibrate(&ds, &gmm, &pso, SearchBounds::for_dataset(&ds)).unwrap();
    assert_eq!(a, b);
    assert!((a.final_loss - a.per_distance_residuals.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    assert!(a.loss_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn single_distance_fits_but_does_not_transfer() {
    let ds = dataset(40, &TRUTH, 0.0, 0);
    let gmm = GmmConfig::default();
    let train = ds.select(&[0]).unwrap();
    let r = calibrate(&train, &gmm, &PsoConfig::default(), SearchBounds::for_dataset(&train)).unwrap();
    assert!(r.overfitting_risk());
    assert!(r.final_loss < 1e-6, "{}", r.final_loss);
    let held = evaluate_heldout(&r, &ds.select(&[2]).unwrap(), &gmm).unwrap();
    assert!(held > 100.0 * r.final_loss.max(1e-9), "held-out {held}, train {}", r.final_loss);
}

#[test]
fn heldout_on_training_bundle_equals_residual() {
    let ds = dataset(30, &TRUTH, 5e-4, 3);
    let gmm = GmmConfig::default();
    let pso = PsoConfig {
        max_iterations: 10,
        ..PsoConfig::default()
    };
    let r = calibrate(&ds, &gmm, &pso, SearchBounds::for_dataset(&ds)).unwrap();
    let h = evaluate_heldout(&r, &ds.select(&[1]).unwrap(), &gmm).unwrap();
    assert!((h - r.per_distance_residuals[1]).abs() < 1e-15);
}

#[test]
fn stray_free_dataset_calibrates_to_zero_amplitude() {
    let ds = dataset(40, &StrayParams::ZERO, 0.0, 0);
    let r = calibrate(&ds, &GmmConfig::default(), &PsoConfig::default(), SearchBounds::for_dataset(&ds)).unwrap();
    assert!(r.final_loss < 1e-6, "{}", r.final_loss);
    assert!(r.stray.amplitude < 1e-3, "{:?}", r.stray);
}

#[test]
fn uniform_board_fails_segmentation_naming_bundle() {
    let flat = CheckerboardSpec {
        dark_reflectivity: 0.5,
        bright_reflectivity: 0.5,
        ..board(20)
    };
    let ds = make_dataset(&[2.0, 3.0], &flat, &TRUTH, &RadiometryModel::default(), &NoiseModel::noiseless(), &cfg())
        .unwrap();
    match calibrate(&ds, &GmmConfig::default(), &PsoConfig::default(), SearchBounds::for_dataset(&ds)) {
        Err(CalibError::Segmentation { bundle: 0, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn segmentation_matches_board_pattern() {
    let ds = dataset(40, &TRUTH, 5.5e-4, 6);
    let segs = segment_dataset(&ds, &GmmConfig::default(), 0).unwrap();
    let spec = board(40);
    for seg in &segs {
        for v in 0..40 {
            for u in 0..40 {
                let want = if spec.is_bright(u, v) { PixelLabel::R2 } else { PixelLabel::R1 };
                assert_eq!(seg.labels().get(u, v), Some(&want));
            }
        }
    }
}
