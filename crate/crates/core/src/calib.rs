//! End-to-end stray-light calibration.
//!
//! Every capture's raw amplitude map is segmented once into a dark and a
//! bright pixel cluster. For a candidate `(A_s, φ_s)` the loss is the mean
//! over captures of `|d̄(R1) − d̄(R2)|`, the absolute gap between the two
//! clusters' mean corrected depths. A flat board has zero gap at the true
//! stray light, and the swarm searches for that point.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{segment_amplitude_map, GmmConfig, GmmError, PixelLabel, Segmentation};
use crate::grid::{Grid, GridShapeError};
use crate::pso::{pso_minimize, Bound, Bounds, PsoConfig, PsoError, Termination};
use crate::signal::{
    depth_from_corrected, raw_amplitude, stray_samples, CorrelationSamples, ModulationConfig,
    SignalError, StrayParams,
};

/// Maximum share of a cluster that may be degenerate before the mean is rejected.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error(transparent)]
    Shape(#[from] GridShapeError),
    #[error("amplitude map disagrees with samples at pixel {pixel}: {stored} vs {computed}")]
    AmplitudeMismatch {
        pixel: usize,
        stored: f64,
        computed: f64,
    },
    #[error("dataset is invalid: {0}")]
    InvalidDataset(String),
    #[error("segmentation of bundle {bundle} ({distance} m) failed: {source}")]
    Segmentation {
        bundle: usize,
        distance: f64,
        #[source]
        source: GmmError,
    },
    #[error("cluster {0:?} has no pixels")]
    EmptyCluster(PixelLabel),
    #[error("{degenerate} of {total} pixels in cluster {label:?} have a degenerate phasor")]
    DataQuality {
        label: PixelLabel,
        degenerate: usize,
        total: usize,
    },
    #[error("optimization failed: {0}")]
    Optimization(#[from] PsoError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("too few valid pixels for statistics: {0}")]
    TooFewPixels(usize),
}

/// One capture: four correlation maps plus the raw amplitude map.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBundle {
    /// Nominal target distance (m).
    pub distance_label: f64,
    frame: Grid<CorrelationSamples>,
    amplitude: Grid<f64>,
}

impl CaptureBundle {
    pub fn from_frame(distance_label: f64, frame: Grid<CorrelationSamples>) -> Self {
        let amplitude = frame.map(raw_amplitude);
        Self {
            distance_label,
            frame,
            amplitude,
        }
    }

    /// Accepts a stored amplitude map, checking each pixel against the
    /// samples within `tolerance(computed_amplitude, samples)`.
    pub fn from_parts(
        distance_label: f64,
        frame: Grid<CorrelationSamples>,
        amplitude: Grid<f64>,
        tolerance: impl Fn(f64, &CorrelationSamples) -> f64,
    ) -> Result<Self, CalibError> {
        if frame.dims() != amplitude.dims() {
            return Err(CalibError::InvalidDataset(format!(
                "amplitude map {:?} does not match frame {:?}",
                amplitude.dims(),
                frame.dims()
            )));
        }
        for (pixel, (s, &stored)) in frame.iter().zip(amplitude.iter()).enumerate() {
            let computed = raw_amplitude(s);
            if !((stored - computed).abs() <= tolerance(computed, s)) {
                return Err(CalibError::AmplitudeMismatch {
                    pixel,
                    stored,
                    computed,
                });
            }
        }
        Ok(Self {
            distance_label,
            frame,
            amplitude,
        })
    }

    pub fn frame(&self) -> &Grid<CorrelationSamples> {
        &self.frame
    }

    pub fn amplitude_map(&self) -> &Grid<f64> {
        &self.amplitude
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frame.dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    bundles: Vec<CaptureBundle>,
    pub modulation: ModulationConfig,
}

impl CalibrationDataset {
    pub fn new(bundles: Vec<CaptureBundle>, modulation: ModulationConfig) -> Result<Self, CalibError> {
        modulation.validate()?;
        let first = bundles
            .first()
            .ok_or_else(|| CalibError::InvalidDataset("dataset has no bundles".into()))?;
        if let Some(b) = bundles.iter().find(|b| b.dims() != first.dims()) {
            return Err(CalibError::InvalidDataset(format!(
                "bundle at {} m is {:?}, expected {:?}",
                b.distance_label,
                b.dims(),
                first.dims()
            )));
        }
        Ok(Self {
            bundles,
            modulation,
        })
    }

    pub fn bundles(&self) -> &[CaptureBundle] {
        &self.bundles
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Subset by bundle index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, CalibError> {
        let bundles = indices
            .iter()
            .map(|&i| {
                self.bundles
                    .get(i)
                    .cloned()
                    .ok_or_else(|| CalibError::InvalidDataset(format!("no bundle {i}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(bundles, self.modulation)
    }
}

/// Search box for the stray amplitude; the phase always spans `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    pub amplitude_max: f64,
}

impl SearchBounds {
    /// Stray light cannot exceed the strongest observed signal:
    /// `max raw amplitude × 2/m`.
    pub fn for_dataset(dataset: &CalibrationDataset) -> Self {
        let max_amp = dataset
            .bundles()
            .iter()
            .flat_map(|b| b.amplitude_map().iter().copied())
            .fold(0.0, f64::max);
        Self {
            amplitude_max: max_amp / dataset.modulation.correlation_gain(),
        }
    }

    pub fn to_pso_bounds(self) -> Bounds {
        [Bound::clamp(0.0, self.amplitude_max), Bound::wrap(0.0, TAU)]
    }
}

fn cluster_mean_depth(
    samples: &[CorrelationSamples],
    stray: &CorrelationSamples,
    cfg: &ModulationConfig,
    label: PixelLabel,
) -> Result<f64, CalibError> {
    if samples.is_empty() {
        return Err(CalibError::EmptyCluster(label));
    }
    let mut sum = 0.0;
    let mut degenerate = 0;
    for s in samples {
        match depth_from_corrected(&(*s - *stray), cfg) {
            Ok(d) => sum += d,
            Err(_) => degenerate += 1,
        }
    }
    if degenerate as f64 >= MAX_DEGENERATE_FRACTION * samples.len() as f64 && degenerate > 0 {
        return Err(CalibError::DataQuality {
            label,
            degenerate,
            total: samples.len(),
        });
    }
    Ok(sum / (samples.len() - degenerate) as f64)
}

fn gather(bundle: &CaptureBundle, seg: &Segmentation, label: PixelLabel) -> Vec<CorrelationSamples> {
    let frame = bundle.frame().as_slice();
    seg.members(label).into_iter().map(|i| frame[i]).collect()
}

/// Mean corrected depths `(d̄(R1), d̄(R2))` of one capture.
pub fn per_distance_mean_depths(
    bundle: &CaptureBundle,
    seg: &Segmentation,
    p: &StrayParams,
    cfg: &ModulationConfig,
) -> Result<(f64, f64), CalibError> {
    if seg.dims() != bundle.dims() {
        return Err(CalibError::InvalidDataset(
            "segmentation and bundle dimensions differ".into(),
        ));
    }
    let stray = stray_samples(p, cfg);
    let r1 = cluster_mean_depth(&gather(bundle, seg, PixelLabel::R1), &stray, cfg, PixelLabel::R1)?;
    let r2 = cluster_mean_depth(&gather(bundle, seg, PixelLabel::R2), &stray, cfg, PixelLabel::R2)?;
    Ok((r1, r2))
}

/// Cluster members gathered once so that repeated loss evaluations only
/// touch the pixels that matter.
#[derive(Debug, Clone)]
pub struct LossModel {
    clusters: Vec<[Vec<CorrelationSamples>; 2]>,
    modulation: ModulationConfig,
}

impl LossModel {
    pub fn new(dataset: &CalibrationDataset, segs: &[Segmentation]) -> Result<Self, CalibError> {
        if segs.len() != dataset.len() {
            return Err(CalibError::InvalidDataset(format!(
                "{} segmentations for {} bundles",
                segs.len(),
                dataset.len()
            )));
        }
        let mut clusters = Vec::with_capacity(segs.len());
        for (bundle, seg) in dataset.bundles().iter().zip(segs) {
            if seg.dims() != bundle.dims() {
                return Err(CalibError::InvalidDataset(
                    "segmentation and bundle dimensions differ".into(),
                ));
            }
            clusters.push([
                gather(bundle, seg, PixelLabel::R1),
                gather(bundle, seg, PixelLabel::R2),
            ]);
        }
        Ok(Self {
            clusters,
            modulation: dataset.modulation,
        })
    }

    /// `|d̄(R1) − d̄(R2)|` for every capture.
    pub fn residuals(&self, p: &StrayParams) -> Result<Vec<f64>, CalibError> {
        let stray = stray_samples(p, &self.modulation);
        self.clusters
            .iter()
            .map(|[r1, r2]| {
                let d1 = cluster_mean_depth(r1, &stray, &self.modulation, PixelLabel::R1)?;
                let d2 = cluster_mean_depth(r2, &stray, &self.modulation, PixelLabel::R2)?;
                Ok((d1 - d2).abs())
            })
            .collect()
    }

    /// Mean of [`LossModel::residuals`].
    pub fn loss(&self, p: &StrayParams) -> Result<f64, CalibError> {
        let r = self.residuals(p)?;
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    }
}

/// Averaged L1 loss of `p` over all captures.
pub fn calibration_loss(
    p: &StrayParams,
    dataset: &CalibrationDataset,
    segs: &[Segmentation],
) -> Result<f64, CalibError> {
    LossModel::new(dataset, segs)?.loss(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub stray: StrayParams,
    /// Loss at `stray` (m).
    pub final_loss: f64,
    /// Best loss after each swarm iteration (m).
    pub loss_history: Vec<f64>,
    /// Per-capture `|d̄(R1) − d̄(R2)|` at `stray` (m).
    pub per_distance_residuals: Vec<f64>,
    pub distance_labels: Vec<f64>,
    pub segmentations: Vec<Segmentation>,
    pub termination: Termination,
    pub bounds: SearchBounds,
    /// Seed used for segmentation and the swarm.
    pub seed: u64,
}

impl CalibrationResult {
    /// A single capture can be fitted exactly by a whole curve of stray
    /// parameters, so the estimate may not transfer to other distances.
    pub fn overfitting_risk(&self) -> bool {
        self.per_distance_residuals.len() < 2
    }
}

/// Segments every bundle, failing on the first one that does not split
/// into two clusters.
pub fn segment_dataset(
    dataset: &CalibrationDataset,
    gmm_cfg: &GmmConfig,
    seed: u64,
) -> Result<Vec<Segmentation>, CalibError> {
    dataset
        .bundles()
        .par_iter()
        .enumerate()
        .map(|(bundle, b)| {
            segment_amplitude_map(b.amplitude_map(), gmm_cfg, seed).map_err(|source| {
                CalibError::Segmentation {
                    bundle,
                    distance: b.distance_label,
                    source,
                }
            })
        })
        .collect()
}

/// Full calibration: segment each amplitude map once, then minimize the
/// averaged L1 loss over `(A_s, φ_s)`.
pub fn calibrate(
    dataset: &CalibrationDataset,
    gmm_cfg: &GmmConfig,
    pso_cfg: &PsoConfig,
    bounds: SearchBounds,
) -> Result<CalibrationResult, CalibError> {
    let segs = segment_dataset(dataset, gmm_cfg, pso_cfg.seed)?;
    calibrate_with_segmentations(dataset, segs, pso_cfg, bounds)
}

/// Swarm search over fixed, caller-supplied segmentations.
pub fn calibrate_with_segmentations(
    dataset: &CalibrationDataset,
    segs: Vec<Segmentation>,
    pso_cfg: &PsoConfig,
    bounds: SearchBounds,
) -> Result<CalibrationResult, CalibError> {
    if !(bounds.amplitude_max > 0.0) {
        return Err(CalibError::InvalidDataset(format!(
            "amplitude bound must be positive, got {}",
            bounds.amplitude_max
        )));
    }
    let model = LossModel::new(dataset, &segs)?;
    let outcome = pso_minimize(
        |x| {
            let p = StrayParams {
                amplitude: x[0],
                phase_rad: x[1],
            };
            // a rejected evaluation surfaces as a non-finite loss
            model.loss(&p).unwrap_or(f64::NAN)
        },
        &bounds.to_pso_bounds(),
        pso_cfg,
    )?;
    let stray = StrayParams {
        amplitude: outcome.best_position[0],
        phase_rad: outcome.best_position[1],
    };
    let per_distance_residuals = model.residuals(&stray)?;
    let final_loss = per_distance_residuals.iter().sum::<f64>() / per_distance_residuals.len() as f64;
    Ok(CalibrationResult {
        stray,
        final_loss,
        loss_history: outcome.loss_history,
        per_distance_residuals,
        distance_labels: dataset.bundles().iter().map(|b| b.distance_label).collect(),
        segmentations: segs,
        termination: outcome.termination,
        bounds,
        seed: pso_cfg.seed,
    })
}

/// Loss of a calibrated `stray` on captures that were not used to fit it.
pub fn evaluate_heldout(
    result: &CalibrationResult,
    heldout: &CalibrationDataset,
    gmm_cfg: &GmmConfig,
) -> Result<f64, CalibError> {
    evaluate_params(&result.stray, heldout, gmm_cfg, result.seed)
}

/// Held-out loss for bare stray parameters.
pub fn evaluate_params(
    stray: &StrayParams,
    heldout: &CalibrationDataset,
    gmm_cfg: &GmmConfig,
    seed: u64,
) -> Result<f64, CalibError> {
    let segs = segment_dataset(heldout, gmm_cfg, seed)?;
    calibration_loss(stray, heldout, &segs)
}

/// Per-pixel depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Grid<f64>,
    pub valid: Grid<bool>,
}

impl DepthMap {
    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// Corrected depth of every pixel; degenerate pixels are masked and carry NaN.
pub fn apply_correction(
    frame: &Grid<CorrelationSamples>,
    p: &StrayParams,
    cfg: &ModulationConfig,
) -> DepthMap {
    let stray = stray_samples(p, cfg);
    let depths: Vec<Option<f64>> = frame
        .as_slice()
        .par_iter()
        .map(|s| depth_from_corrected(&(*s - stray), cfg).ok())
        .collect();
    let (w, h) = frame.dims();
    DepthMap {
        depth: Grid::from_fn(w, h, |u, v| depths[v * w + u].unwrap_or(f64::NAN)),
        valid: Grid::from_fn(w, h, |u, v| depths[v * w + u].is_some()),
    }
}

/// Mean and sample (n − 1) standard deviation over valid pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub mean: f64,
    pub std_dev: f64,
    pub count: usize,
}

pub fn depth_stats(map: &DepthMap) -> Result<DepthStats, CalibError> {
    let values: Vec<f64> = map
        .depth
        .iter()
        .zip(map.valid.iter())
        .filter_map(|(&d, &ok)| ok.then_some(d))
        .collect();
    stats_of(&values)
}

/// Same statistics restricted to pixels where `select` holds.
pub fn depth_stats_where(
    map: &DepthMap,
    select: impl Fn(usize) -> bool,
) -> Result<DepthStats, CalibError> {
    let values: Vec<f64> = map
        .depth
        .iter()
        .zip(map.valid.iter())
        .enumerate()
        .filter_map(|(i, (&d, &ok))| (ok && select(i)).then_some(d))
        .collect();
    stats_of(&values)
}

fn stats_of(values: &[f64]) -> Result<DepthStats, CalibError> {
    if values.len() < 2 {
        return Err(CalibError::TooFewPixels(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(DepthStats {
        mean,
        std_dev: var.sqrt(),
        count: values.len(),
    })
}
