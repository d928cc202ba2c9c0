//! Two-component 1D Gaussian mixture fitted by expectation-maximization,
//! used to split a raw amplitude map into dark-pattern and bright-pattern
//! pixel clusters.
//!
//! Convention: component 0 (`R1`) always has the smaller mean. Each
//! component stores its standard deviation, not its variance. A pixel is
//! labeled only when its larger responsibility reaches the configured
//! confidence margin; everything else is excluded from both clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

/// Lower bound on a component's standard deviation (volts).
pub const STD_DEV_FLOOR: f64 = 1e-9;

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("invalid GMM config: {0}")]
    InvalidConfig(String),
    #[error("invalid GMM parameters: {0}")]
    InvalidParams(String),
    #[error("need at least 4 values to fit two components, got {0}")]
    InsufficientData(usize),
    #[error("value at index {index} is not a finite non-negative amplitude: {value}")]
    InvalidValue { index: usize, value: f64 },
    #[error("all values are identical; no second cluster to separate")]
    DegenerateData,
    #[error("mixture component collapsed to zero weight")]
    CollapsedComponent,
    #[error("segmentation left cluster {0:?} empty")]
    EmptyCluster(PixelLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_em_iterations: usize,
    /// Absolute change in mean per-sample log-likelihood that ends EM.
    pub loglik_tolerance: f64,
    /// Minimum posterior probability needed to label a pixel.
    pub confidence_margin: f64,
    /// Extra randomly initialized EM runs (seeded); the best likelihood wins.
    #[serde(default)]
    pub restarts: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_em_iterations: 1000,
            loglik_tolerance: 1e-6,
            confidence_margin: 0.9,
            restarts: 0,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<(), GmmError> {
        if self.max_em_iterations < 1 {
            return Err(GmmError::InvalidConfig("max_em_iterations must be >= 1".into()));
        }
        if !(self.loglik_tolerance > 0.0) {
            return Err(GmmError::InvalidConfig("loglik_tolerance must be > 0".into()));
        }
        if !(self.confidence_margin > 0.5 && self.confidence_margin <= 1.0) {
            return Err(GmmError::InvalidConfig(
                "confidence_margin must lie in (0.5, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub std_dev: f64,
}

impl GaussianComponent {
    fn log_weighted_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std_dev;
        self.weight.ln() - self.std_dev.ln() - HALF_LN_TAU - 0.5 * z * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub components: [GaussianComponent; 2],
}

/// Posterior cluster probabilities for one value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Responsibility {
    pub gamma: [f64; 2],
    /// Both weighted densities underflowed; `gamma` is a nearest-mean assignment.
    pub low_confidence: bool,
}

impl Responsibility {
    /// Index and value of the larger responsibility (ties go to cluster 0).
    pub fn best(&self) -> (usize, f64) {
        if self.gamma[1] > self.gamma[0] {
            (1, self.gamma[1])
        } else {
            (0, self.gamma[0])
        }
    }
}

impl GmmParams {
    pub fn new(dark: GaussianComponent, bright: GaussianComponent) -> Result<Self, GmmError> {
        let p = Self {
            components: [dark, bright],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GmmError> {
        let [a, b] = &self.components;
        for c in [a, b] {
            if !(c.weight > 0.0 && c.weight < 1.0) {
                return Err(GmmError::InvalidParams(format!(
                    "weight {} outside (0, 1)",
                    c.weight
                )));
            }
            if !(c.std_dev >= STD_DEV_FLOOR) || !c.mean.is_finite() {
                return Err(GmmError::InvalidParams(format!(
                    "component ({}, {}) invalid",
                    c.mean, c.std_dev
                )));
            }
        }
        if (a.weight + b.weight - 1.0).abs() > 1e-12 {
            return Err(GmmError::InvalidParams("weights must sum to 1".into()));
        }
        if a.mean > b.mean {
            return Err(GmmError::InvalidParams(
                "component 0 must have the smaller mean".into(),
            ));
        }
        Ok(())
    }

    pub fn dark(&self) -> &GaussianComponent {
        &self.components[0]
    }

    pub fn bright(&self) -> &GaussianComponent {
        &self.components[1]
    }

    pub fn responsibilities(&self, value: f64) -> Responsibility {
        let lp = self.components.map(|c| c.log_weighted_density(value));
        let underflow = f64::MIN_POSITIVE.ln();
        if lp[0] < underflow && lp[1] < underflow {
            let d0 = (value - self.components[0].mean).abs();
            let d1 = (value - self.components[1].mean).abs();
            let gamma = if d1 < d0 { [0.0, 1.0] } else { [1.0, 0.0] };
            return Responsibility {
                gamma,
                low_confidence: true,
            };
        }
        // softmax over two entries: gamma_1 = 1 / (1 + exp(lp0 - lp1))
        let g1 = 1.0 / (1.0 + (lp[0] - lp[1]).exp());
        Responsibility {
            gamma: [1.0 - g1, g1],
            low_confidence: false,
        }
    }

    /// Mean per-sample log-likelihood of `values`.
    pub fn mean_log_likelihood(&self, values: &[f64]) -> f64 {
        let total: f64 = values
            .iter()
            .map(|&x| {
                let [a, b] = self.components.map(|c| c.log_weighted_density(x));
                log_add_exp(a, b)
            })
            .sum();
        total / values.len() as f64
    }
}

/// Responsibilities of `value` under `params` (free-function form).
pub fn responsibilities(params: &GmmParams, value: f64) -> Responsibility {
    params.responsibilities(value)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Outcome of an EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Mean per-sample log-likelihood before each M-step; the last entry
    /// belongs to `params`.
    pub loglik_history: Vec<f64>,
    pub converged: bool,
}

impl GmmFit {
    pub fn iterations(&self) -> usize {
        self.loglik_history.len()
    }

    pub fn log_likelihood(&self) -> f64 {
        *self.loglik_history.last().expect("EM records at least one value")
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Fits two Gaussians to `values` by EM.
///
/// The primary run starts from the 25th/75th percentiles with half the
/// sample standard deviation each and equal weights, which is fully
/// deterministic. `cfg.restarts` adds runs seeded from `seed`.
pub fn fit_gmm_1d(values: &[f64], cfg: &GmmConfig, seed: u64) -> Result<GmmFit, GmmError> {
    cfg.validate()?;
    if values.len() < 4 {
        return Err(GmmError::InsufficientData(values.len()));
    }
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(GmmError::InvalidValue { index, value });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == max {
        return Err(GmmError::DegenerateData);
    }

    let spread = (sample_std(values) / 2.0).max(STD_DEV_FLOOR);
    let (mut lo, mut hi) = (percentile(&sorted, 0.25), percentile(&sorted, 0.75));
    if lo >= hi {
        // heavily unbalanced data can put both quartiles on one spike
        (lo, hi) = (min, max);
    }
    let init = |m0: f64, m1: f64| {
        [
            GaussianComponent {
                weight: 0.5,
                mean: m0,
                std_dev: spread,
            },
            GaussianComponent {
                weight: 0.5,
                mean: m1,
                std_dev: spread,
            },
        ]
    };

    let mut best = run_em(values, init(lo, hi), cfg)?;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64 + 1);
        let a = values[rng.random_range(0..values.len())];
        let b = values[rng.random_range(0..values.len())];
        if a == b {
            continue;
        }
        // a restart that collapses is simply discarded
        if let Ok(fit) = run_em(values, init(a.min(b), a.max(b)), cfg) {
            if fit.log_likelihood() > best.log_likelihood() {
                best = fit;
            }
        }
    }
    Ok(best)
}

fn run_em(
    values: &[f64],
    mut comps: [GaussianComponent; 2],
    cfg: &GmmConfig,
) -> Result<GmmFit, GmmError> {
    let n = values.len() as f64;
    let mut gamma1 = vec![0.0; values.len()];
    let mut history = Vec::new();
    let mut converged = false;

    loop {
        // E-step
        let mut total = 0.0;
        for (g, &x) in gamma1.iter_mut().zip(values) {
            let [a, b] = comps.map(|c| c.log_weighted_density(x));
            total += log_add_exp(a, b);
            *g = 1.0 / (1.0 + (a - b).exp());
        }
        let ll = total / n;
        if let Some(&prev) = history.last() {
            history.push(ll);
            if (ll - prev).abs() < cfg.loglik_tolerance {
                converged = true;
                break;
            }
        } else {
            history.push(ll);
        }
        if history.len() > cfg.max_em_iterations {
            break;
        }

        // M-step
        let n1: f64 = gamma1.iter().sum();
        let n0 = n - n1;
        if !(n0 > 1e-12 * n && n1 > 1e-12 * n) {
            return Err(GmmError::CollapsedComponent);
        }
        let (mut s0, mut s1) = (0.0, 0.0);
        for (&g, &x) in gamma1.iter().zip(values) {
            s0 += (1.0 - g) * x;
            s1 += g * x;
        }
        let (m0, m1) = (s0 / n0, s1 / n1);
        let (mut v0, mut v1) = (0.0, 0.0);
        for (&g, &x) in gamma1.iter().zip(values) {
            v0 += (1.0 - g) * (x - m0).powi(2);
            v1 += g * (x - m1).powi(2);
        }
        comps = [
            GaussianComponent {
                weight: n0 / n,
                mean: m0,
                std_dev: (v0 / n0).sqrt().max(STD_DEV_FLOOR),
            },
            GaussianComponent {
                weight: 1.0 - n0 / n,
                mean: m1,
                std_dev: (v1 / n1).sqrt().max(STD_DEV_FLOOR),
            },
        ];
    }

    if comps[0].mean > comps[1].mean {
        comps.swap(0, 1);
    }
    if comps[0].mean == comps[1].mean && comps[0].std_dev == comps[1].std_dev {
        return Err(GmmError::DegenerateData);
    }
    let params = GmmParams { components: comps };
    params.validate().map_err(|_| GmmError::CollapsedComponent)?;
    Ok(GmmFit {
        params,
        loglik_history: history,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PixelLabel {
    /// Lower-amplitude cluster.
    R1,
    /// Higher-amplitude cluster.
    R2,
    Excluded,
}

/// Per-pixel cluster labels of one amplitude map.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    labels: Grid<PixelLabel>,
    pub params: GmmParams,
    /// Labeled pixels whose densities both underflowed (nearest-mean rule).
    pub low_confidence: usize,
}

impl Segmentation {
    pub fn from_labels(labels: Grid<PixelLabel>, params: GmmParams) -> Self {
        Self {
            labels,
            params,
            low_confidence: 0,
        }
    }

    pub fn labels(&self) -> &Grid<PixelLabel> {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    /// Row-major pixel indices carrying `label`.
    pub fn members(&self, label: PixelLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| (*l == label).then_some(i))
            .collect()
    }

    pub fn count(&self, label: PixelLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    pub fn labeled_fraction(&self) -> f64 {
        1.0 - self.count(PixelLabel::Excluded) as f64 / self.labels.len() as f64
    }

    /// Same partition with `R1` and `R2` exchanged.
    pub fn with_swapped_clusters(&self) -> Self {
        Self {
            labels: self.labels.map(|l| match l {
                PixelLabel::R1 => PixelLabel::R2,
                PixelLabel::R2 => PixelLabel::R1,
                PixelLabel::Excluded => PixelLabel::Excluded,
            }),
            params: self.params,
            low_confidence: self.low_confidence,
        }
    }
}

/// Fits the mixture to every pixel amplitude and labels pixels whose
/// larger responsibility reaches `cfg.confidence_margin`.
pub fn segment_amplitude_map(
    amp_map: &Grid<f64>,
    cfg: &GmmConfig,
    seed: u64,
) -> Result<Segmentation, GmmError> {
    let fit = fit_gmm_1d(amp_map.as_slice(), cfg, seed)?;
    let params = fit.params;
    let mut low_confidence = 0;
    let labels = amp_map.map(|&x| {
        let r = params.responsibilities(x);
        let (idx, gamma) = r.best();
        if gamma < cfg.confidence_margin {
            PixelLabel::Excluded
        } else {
            if r.low_confidence {
                low_confidence += 1;
            }
            if idx == 0 {
                PixelLabel::R1
            } else {
                PixelLabel::R2
            }
        }
    });
    let seg = Segmentation {
        labels,
        params,
        low_confidence,
    };
    for label in [PixelLabel::R1, PixelLabel::R2] {
        if seg.count(label) == 0 {
            return Err(GmmError::EmptyCluster(label));
        }
    }
    Ok(seg)
}
