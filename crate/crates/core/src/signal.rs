//! Homodyne AMCW signal model.
//!
//! A received signal `A·sin(2πft − φ) + B` is correlated against four
//! demodulation references `m·sin(2πft + nπ/2)`. Over a whole number of
//! modulation periods the offset `B` drops out and each sample reduces to
//! `(A·m/2)·cos(φ + nπ/2)`. Reflected light and internal stray light add
//! linearly in this domain, so the stray contribution can be synthesized
//! from its amplitude and phase and subtracted sample by sample.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Minimum quadrature resolution accepted by [`correlation_sample_numeric`].
pub const MIN_STEPS_PER_PERIOD: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("phase-step index {0} is outside 0..=3")]
    InvalidPhaseStep(usize),
    #[error("invalid modulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid signal parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate phasor: zero amplitude, phase undefined")]
    DegeneratePhasor,
    #[error("depth {depth} m is outside the unambiguous range [0, {max}) m")]
    DepthOutOfRange { depth: f64, max: f64 },
    #[error("quadrature needs at least {min} steps per period, got {got:.1}")]
    TooFewSteps { min: usize, got: f64 },
}

/// Modulation frequency, demodulation amplitude and integration time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationConfig {
    pub frequency_hz: f64,
    /// Demodulation amplitude `m` (volts).
    pub demod_amplitude: f64,
    pub integration_time_s: f64,
}

impl Default for ModulationConfig {
    /// 31.25 MHz, m = 0.4785 V, 16 µs (exactly 500 periods).
    fn default() -> Self {
        Self {
            frequency_hz: 31.25e6,
            demod_amplitude: 0.4785,
            integration_time_s: 16e-6,
        }
    }
}

impl ModulationConfig {
    pub fn new(
        frequency_hz: f64,
        demod_amplitude: f64,
        integration_time_s: f64,
    ) -> Result<Self, SignalError> {
        let cfg = Self {
            frequency_hz,
            demod_amplitude,
            integration_time_s,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.frequency_hz.is_finite() && self.frequency_hz > 0.0) {
            return Err(SignalError::InvalidConfig(format!(
                "frequency_hz must be positive, got {}",
                self.frequency_hz
            )));
        }
        if !(self.demod_amplitude.is_finite() && self.demod_amplitude > 0.0) {
            return Err(SignalError::InvalidConfig(format!(
                "demod_amplitude must be positive, got {}",
                self.demod_amplitude
            )));
        }
        if !(self.integration_time_s.is_finite() && self.integration_time_s > 0.0) {
            return Err(SignalError::InvalidConfig(format!(
                "integration_time_s must be positive, got {}",
                self.integration_time_s
            )));
        }
        let periods = self.periods();
        if periods.round() < 1.0 || (periods - periods.round()).abs() > 1e-9 {
            return Err(SignalError::InvalidConfig(format!(
                "integration time must span a whole number of periods, got {periods}"
            )));
        }
        Ok(())
    }

    /// Number of modulation periods inside the integration window.
    pub fn periods(&self) -> f64 {
        self.integration_time_s * self.frequency_hz
    }

    /// `c / (2f)`: the depth at which the phase wraps.
    pub fn unambiguous_range(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.frequency_hz)
    }

    /// Meters of depth per radian of phase, `c / (4πf)`.
    pub fn depth_per_radian(&self) -> f64 {
        SPEED_OF_LIGHT / (4.0 * PI * self.frequency_hz)
    }

    /// Correlation-domain amplitude of a signal with time-domain amplitude `a`.
    pub fn correlation_gain(&self) -> f64 {
        self.demod_amplitude / 2.0
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(phase: f64) -> f64 {
    let w = phase.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// One sinusoidal light signal: amplitude, phase delay and DC offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalComponent {
    pub amplitude: f64,
    pub phase_rad: f64,
    pub offset: f64,
}

impl SignalComponent {
    pub fn new(amplitude: f64, phase_rad: f64, offset: f64) -> Result<Self, SignalError> {
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(SignalError::InvalidParameter(format!(
                "amplitude must be finite and non-negative, got {amplitude}"
            )));
        }
        if !(0.0..TAU).contains(&phase_rad) {
            return Err(SignalError::InvalidParameter(format!(
                "phase must lie in [0, 2π), got {phase_rad}"
            )));
        }
        if !offset.is_finite() {
            return Err(SignalError::InvalidParameter("offset must be finite".into()));
        }
        Ok(Self {
            amplitude,
            phase_rad,
            offset,
        })
    }
}

/// Amplitude and phase delay of the net internal stray light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrayParams {
    /// Signal-domain amplitude `A_s` (volts).
    pub amplitude: f64,
    pub phase_rad: f64,
}

impl StrayParams {
    pub const ZERO: StrayParams = StrayParams {
        amplitude: 0.0,
        phase_rad: 0.0,
    };

    pub fn new(amplitude: f64, phase_rad: f64) -> Result<Self, SignalError> {
        let c = SignalComponent::new(amplitude, phase_rad, 0.0)?;
        Ok(Self {
            amplitude: c.amplitude,
            phase_rad: c.phase_rad,
        })
    }

    pub fn as_component(&self) -> SignalComponent {
        SignalComponent {
            amplitude: self.amplitude,
            phase_rad: self.phase_rad,
            offset: 0.0,
        }
    }
}

/// Index `n` of the demodulation phase shift `nπ/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseStep(u8);

impl PhaseStep {
    pub const ALL: [PhaseStep; 4] = [PhaseStep(0), PhaseStep(1), PhaseStep(2), PhaseStep(3)];

    pub fn new(n: usize) -> Result<Self, SignalError> {
        if n < 4 {
            Ok(PhaseStep(n as u8))
        } else {
            Err(SignalError::InvalidPhaseStep(n))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn shift_rad(self) -> f64 {
        self.0 as f64 * PI / 2.0
    }

    /// `cos(φ + nπ/2)` via quarter-turn identities, so that e.g. `n = 1, φ = 0`
    /// yields an exact zero.
    fn cos_shifted(self, phase: f64) -> f64 {
        match self.0 {
            0 => phase.cos(),
            1 => -phase.sin(),
            2 => -phase.cos(),
            _ => phase.sin(),
        }
    }
}

/// The four raw cross-correlation samples `Ĉ(nπ/2)`, n = 0..3, in volts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrelationSamples(pub [f64; 4]);

impl CorrelationSamples {
    /// Closed-form samples of a single component.
    pub fn synthesize(comp: &SignalComponent, cfg: &ModulationConfig) -> Self {
        Self(PhaseStep::ALL.map(|n| correlation_sample(comp, n, cfg)))
    }

    pub fn get(&self, n: PhaseStep) -> f64 {
        self.0[n.index()]
    }

    /// `Ĉ(φ0) − Ĉ(φ2)`, the real part of the phasor (times two).
    pub fn in_phase(&self) -> f64 {
        self.0[0] - self.0[2]
    }

    /// `Ĉ(φ3) − Ĉ(φ1)`, the imaginary part of the phasor (times two).
    pub fn quadrature(&self) -> f64 {
        self.0[3] - self.0[1]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

impl Add for CorrelationSamples {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self(std::array::from_fn(|n| self.0[n] + rhs.0[n]))
    }
}

impl Sub for CorrelationSamples {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self(std::array::from_fn(|n| self.0[n] - rhs.0[n]))
    }
}

/// Closed-form correlation sample `(A·m/2)·cos(φ + nπ/2)`.
pub fn correlation_sample(comp: &SignalComponent, n: PhaseStep, cfg: &ModulationConfig) -> f64 {
    comp.amplitude * cfg.correlation_gain() * n.cos_shifted(comp.phase_rad)
}

/// Midpoint-rule quadrature of `(1/T)∫ (A sin(2πft − φ) + B)·m sin(2πft + φn) dt`
/// over `[0, T_int]` with `steps` total samples. Serves as an oracle for
/// [`correlation_sample`]; unlike the closed form it keeps the offset term.
pub fn correlation_sample_numeric(
    comp: &SignalComponent,
    n: PhaseStep,
    cfg: &ModulationConfig,
    steps: usize,
) -> Result<f64, SignalError> {
    let per_period = steps as f64 / cfg.periods();
    if per_period < MIN_STEPS_PER_PERIOD as f64 {
        return Err(SignalError::TooFewSteps {
            min: MIN_STEPS_PER_PERIOD,
            got: per_period,
        });
    }
    let omega = TAU * cfg.frequency_hz;
    let dt = cfg.integration_time_s / steps as f64;
    let shift = n.shift_rad();
    // Neumaier compensated sum
    let mut sum = 0.0_f64;
    let mut comp_err = 0.0_f64;
    for k in 0..steps {
        let t = (k as f64 + 0.5) * dt;
        let received = comp.amplitude * (omega * t - comp.phase_rad).sin() + comp.offset;
        let term = received * cfg.demod_amplitude * (omega * t + shift).sin();
        let next = sum + term;
        if sum.abs() >= term.abs() {
            comp_err += (sum - next) + term;
        } else {
            comp_err += (term - next) + sum;
        }
        sum = next;
    }
    Ok((sum + comp_err) / steps as f64)
}

/// Raw correlation amplitude `√((Ĉ3−Ĉ1)² + (Ĉ2−Ĉ0)²) / 2`.
pub fn raw_amplitude(s: &CorrelationSamples) -> f64 {
    s.quadrature().hypot(s.in_phase()) / 2.0
}

/// Four-quadrant phase of the phasor `(Ĉ0−Ĉ2, Ĉ3−Ĉ1)`, wrapped to `[0, 2π)`.
pub fn raw_phase(s: &CorrelationSamples) -> Result<f64, SignalError> {
    let (re, im) = (s.in_phase(), s.quadrature());
    if (re == 0.0 && im == 0.0) || !re.is_finite() || !im.is_finite() {
        return Err(SignalError::DegeneratePhasor);
    }
    Ok(wrap_phase(im.atan2(re)))
}

pub fn phase_to_depth(phase: f64, cfg: &ModulationConfig) -> f64 {
    cfg.depth_per_radian() * phase
}

pub fn depth_to_phase(depth: f64, cfg: &ModulationConfig) -> Result<f64, SignalError> {
    let max = cfg.unambiguous_range();
    if !(0.0..max).contains(&depth) {
        return Err(SignalError::DepthOutOfRange { depth, max });
    }
    Ok(depth / cfg.depth_per_radian())
}

/// Correlation sample produced by the stray light alone.
pub fn stray_correlation(p: &StrayParams, n: PhaseStep, cfg: &ModulationConfig) -> f64 {
    correlation_sample(&p.as_component(), n, cfg)
}

/// All four stray samples at once.
pub fn stray_samples(p: &StrayParams, cfg: &ModulationConfig) -> CorrelationSamples {
    CorrelationSamples::synthesize(&p.as_component(), cfg)
}

/// Subtracts the stray contribution from each raw sample.
pub fn correct_samples(
    raw: &CorrelationSamples,
    p: &StrayParams,
    cfg: &ModulationConfig,
) -> CorrelationSamples {
    *raw - stray_samples(p, cfg)
}

/// Depth after removing the stray phasor.
pub fn corrected_depth(
    raw: &CorrelationSamples,
    p: &StrayParams,
    cfg: &ModulationConfig,
) -> Result<f64, SignalError> {
    depth_from_corrected(&correct_samples(raw, p, cfg), cfg)
}

/// Depth of already-corrected samples. Shared by the per-pixel loss loop,
/// which precomputes the stray samples once per candidate.
#[inline]
pub fn depth_from_corrected(
    corrected: &CorrelationSamples,
    cfg: &ModulationConfig,
) -> Result<f64, SignalError> {
    raw_phase(corrected).map(|phase| phase_to_depth(phase, cfg))
}
