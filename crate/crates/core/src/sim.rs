//! Synthetic captures with known ground truth.
//!
//! Each pixel's reflected amplitude follows
//! `reference_amplitude · reflectivity · (reference_distance / depth)^falloff`,
//! its phase follows the depth, the stray samples are added on top, and
//! i.i.d. Gaussian noise perturbs each of the four correlation samples.
//! Noise for pixel `i` comes from its own ChaCha stream, so rendering order
//! never changes the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{CalibError, CalibrationDataset, CaptureBundle};
use crate::grid::Grid;
use crate::signal::{
    depth_to_phase, stray_samples, CorrelationSamples, ModulationConfig, SignalComponent,
    SignalError, StrayParams,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dataset(#[from] CalibError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiometryModel {
    /// Signal amplitude (V) of a unit-reflectivity target at `reference_distance`.
    pub reference_amplitude: f64,
    pub reference_distance: f64,
    pub falloff_exponent: f64,
}

impl Default for RadiometryModel {
    fn default() -> Self {
        Self {
            reference_amplitude: 2.0,
            reference_distance: 1.0,
            falloff_exponent: 2.0,
        }
    }
}

impl RadiometryModel {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.reference_amplitude > 0.0 && self.reference_distance > 0.0) {
            return Err(SimError::InvalidScene(
                "radiometry reference amplitude and distance must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn reflected_amplitude(reflectivity: f64, distance: f64, model: &RadiometryModel) -> f64 {
    model.reference_amplitude
        * reflectivity
        * (model.reference_distance / distance).powf(model.falloff_exponent)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation (V) added to every correlation sample.
    pub sample_noise_std: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub depth: Grid<f64>,
    pub reflectivity: Grid<f64>,
}

impl SceneSpec {
    pub fn validate(&self, cfg: &ModulationConfig) -> Result<(), SimError> {
        if self.depth.dims() != self.reflectivity.dims() {
            return Err(SimError::InvalidScene("depth and reflectivity maps differ in size".into()));
        }
        let max = cfg.unambiguous_range();
        if let Some(d) = self.depth.iter().find(|d| !(**d > 0.0 && **d < max)) {
            return Err(SimError::InvalidScene(format!(
                "depth {d} m outside (0, {max}) m"
            )));
        }
        if let Some(r) = self.reflectivity.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(SimError::InvalidScene(format!("reflectivity {r} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardSpec {
    pub width: usize,
    pub height: usize,
    pub squares_x: usize,
    pub squares_y: usize,
    pub dark_reflectivity: f64,
    pub bright_reflectivity: f64,
    pub plane_distance: f64,
}

impl Default for CheckerboardSpec {
    fn default() -> Self {
        Self {
            width: 100,
            height: 100,
            squares_x: 8,
            squares_y: 8,
            dark_reflectivity: 0.1,
            bright_reflectivity: 0.9,
            plane_distance: 2.3,
        }
    }
}

impl CheckerboardSpec {
    /// Whether pixel `(u, v)` lies on a bright square. The top-left square is dark.
    pub fn is_bright(&self, u: usize, v: usize) -> bool {
        let sx = u * self.squares_x / self.width;
        let sy = v * self.squares_y / self.height;
        (sx + sy) % 2 == 1
    }

    pub fn at_distance(&self, plane_distance: f64) -> Self {
        Self {
            plane_distance,
            ..*self
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.squares_x < 2 || self.squares_y < 2 {
            return Err(SimError::InvalidScene("board needs at least 2x2 squares".into()));
        }
        if self.width < self.squares_x || self.height < self.squares_y {
            return Err(SimError::InvalidScene("fewer pixels than squares".into()));
        }
        let (d, b) = (self.dark_reflectivity, self.bright_reflectivity);
        if !(0.0 <= d && d <= b && b <= 1.0) {
            return Err(SimError::InvalidScene(format!(
                "need 0 <= dark ({d}) <= bright ({b}) <= 1"
            )));
        }
        Ok(())
    }

    pub fn scene(&self) -> Result<SceneSpec, SimError> {
        self.validate()?;
        let (w, h) = (self.width, self.height);
        Ok(SceneSpec {
            depth: Grid::from_fn(w, h, |_, _| self.plane_distance),
            reflectivity: Grid::from_fn(w, h, |u, v| {
                if self.is_bright(u, v) {
                    self.bright_reflectivity
                } else {
                    self.dark_reflectivity
                }
            }),
        })
    }
}

fn noise_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

/// Independent seed for item `k` of a batch (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forward model for an arbitrary scene. The bundle's distance label is the
/// scene's mean depth.
pub fn render_scene(
    spec: &SceneSpec,
    stray: &StrayParams,
    radio: &RadiometryModel,
    noise: &NoiseModel,
    cfg: &ModulationConfig,
) -> Result<CaptureBundle, SimError> {
    cfg.validate()?;
    radio.validate()?;
    spec.validate(cfg)?;
    if !(noise.sample_noise_std >= 0.0) {
        return Err(SimError::InvalidScene("noise std must be non-negative".into()));
    }
    let stray_part = stray_samples(stray, cfg);
    let depths = spec.depth.as_slice();
    let refl = spec.reflectivity.as_slice();
    let samples = (0..depths.len())
        .into_par_iter()
        .map(|i| {
            let comp = SignalComponent::new(
                reflected_amplitude(refl[i], depths[i], radio),
                depth_to_phase(depths[i], cfg)?,
                0.0,
            )?;
            let mut s = CorrelationSamples::synthesize(&comp, cfg) + stray_part;
            if noise.sample_noise_std > 0.0 {
                let mut rng = noise_rng(noise.seed, i);
                for c in s.0.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *c += noise.sample_noise_std * z;
                }
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let (w, h) = spec.dims();
    let label = depths.iter().sum::<f64>() / depths.len() as f64;
    let frame = Grid::from_vec(w, h, samples).expect("scene grid is non-empty");
    Ok(CaptureBundle::from_frame(label, frame))
}

pub fn render_checkerboard(
    spec: &CheckerboardSpec,
    stray: &StrayParams,
    radio: &RadiometryModel,
    noise: &NoiseModel,
    cfg: &ModulationConfig,
) -> Result<CaptureBundle, SimError> {
    let mut bundle = render_scene(&spec.scene()?, stray, radio, noise, cfg)?;
    bundle.distance_label = spec.plane_distance;
    Ok(bundle)
}

/// One checkerboard capture per distance; bundle `k` draws its noise from
/// `derive_seed(noise.seed, k)`.
pub fn make_dataset(
    distances: &[f64],
    board: &CheckerboardSpec,
    stray: &StrayParams,
    radio: &RadiometryModel,
    noise: &NoiseModel,
    cfg: &ModulationConfig,
) -> Result<CalibrationDataset, SimError> {
    if distances.is_empty() {
        return Err(SimError::InvalidScene("at least one distance is required".into()));
    }
    let bundles = distances
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let noise_k = NoiseModel {
                seed: derive_seed(noise.seed, k as u64),
                ..*noise
            };
            render_checkerboard(&board.at_distance(d), stray, radio, &noise_k, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CalibrationDataset::new(bundles, *cfg)?)
}

/// A synthetic scene with labeled objects.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectScene {
    pub spec: SceneSpec,
    /// 0 is the background wall; objects are numbered from 1.
    pub labels: Grid<u8>,
    pub names: Vec<&'static str>,
}

impl ObjectScene {
    pub fn object_count(&self) -> usize {
        self.names.len()
    }

    /// Pixel indices belonging to object `id`.
    pub fn members(&self, id: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| (*l == id).then_some(i))
            .collect()
    }
}

/// A wall with a bust-like sphere, a box and a tilted slab in front of it,
/// each with its own reflectivity.
pub fn multi_object_scene(width: usize, height: usize) -> Result<ObjectScene, SimError> {
    if width < 16 || height < 16 {
        return Err(SimError::InvalidScene("object scene needs at least 16x16 pixels".into()));
    }
    let (wf, hf) = (width as f64, height as f64);
    let sphere_c = (0.30 * wf, 0.45 * hf);
    let sphere_r = 0.22 * wf.min(hf);
    let mut depth = Vec::with_capacity(width * height);
    let mut refl = Vec::with_capacity(width * height);
    let mut labels = Vec::with_capacity(width * height);
    for v in 0..height {
        for u in 0..width {
            let (x, y) = (u as f64 + 0.5, v as f64 + 0.5);
            let ds = ((x - sphere_c.0).powi(2) + (y - sphere_c.1).powi(2)).sqrt() / sphere_r;
            let (d, r, l) = if ds < 1.0 {
                // sphere of radius 0.35 m whose front is at 2.0 m
                (2.35 - 0.35 * (1.0 - ds * ds).sqrt(), 0.35, 1)
            } else if x > 0.62 * wf && x < 0.88 * wf && y > 0.20 * hf && y < 0.55 * hf {
                (2.8, 0.15, 2)
            } else if x > 0.55 * wf && y > 0.68 * hf && y < 0.92 * hf {
                (1.6 + 0.6 * (x / wf - 0.55), 0.8, 3)
            } else {
                (3.9, 0.5, 0)
            };
            depth.push(d);
            refl.push(r);
            labels.push(l);
        }
    }
    Ok(ObjectScene {
        spec: SceneSpec {
            depth: Grid::from_vec(width, height, depth).expect("sized"),
            reflectivity: Grid::from_vec(width, height, refl).expect("sized"),
        },
        labels: Grid::from_vec(width, height, labels).expect("sized"),
        names: vec!["sphere", "box", "slab"],
    })
}
