//! Internal stray-light calibration for coaxial AMCW LiDAR.
//!
//! A coaxial sensor sees part of its own emission reflected inside the
//! housing. That stray light adds a fixed phasor to every pixel's four
//! correlation samples and biases depth by an amount that depends on the
//! target's return strength. This crate estimates the stray phasor from a
//! few checkerboard captures and removes it.
//!
//! - [`signal`]: correlation model, phase/depth conversion, correction.
//! - [`gmm`]: two-component 1-D mixture for bright/dark segmentation.
//! - [`pso`]: 2-D particle swarm.
//! - [`calib`]: loss, calibration driver, correction of depth maps.
//! - [`sim`]: synthetic scene renderer.
//! - [`io`]: bundle, manifest, result and depth-map files.

pub mod calib;
pub mod gmm;
pub mod grid;
pub mod io;
pub mod pso;
pub mod signal;
pub mod sim;

pub use calib::{
    apply_correction, calibrate, CalibError, CalibrationDataset, CalibrationResult, CaptureBundle,
    DepthMap, SearchBounds,
};
pub use gmm::{fit_gmm_1d, segment_amplitude_map, GmmConfig, PixelLabel, Segmentation};
pub use grid::Grid;
pub use pso::{pso_minimize, PsoConfig};
pub use signal::{CorrelationSamples, ModulationConfig, StrayParams};
