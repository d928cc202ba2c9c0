//! On-disk formats.
//!
//! # Bundle file
//!
//! Little-endian throughout:
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0  | 9 | magic `STRAYCAL1` |
//! | 9  | 4 | width (u32) |
//! | 13 | 4 | height (u32) |
//! | 17 | 8 | distance label, m (f64) |
//! | 25 | 8 | modulation frequency, Hz (f64) |
//! | 33 | 8 | demodulation amplitude, V (f64) |
//! | 41 | 8 | integration time, s (f64) |
//! | 49 | 5·4·w·h | planes c0, c1, c2, c3, amplitude as f32, row-major |
//!
//! The amplitude plane is redundant; reading recomputes it from the four
//! sample planes and rejects the file if they disagree beyond f32 rounding.
//!
//! Manifests and calibration results are JSON. Depth maps are exported as
//! CSV grids and 16-bit binary PGM previews.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{CalibError, CalibrationDataset, CalibrationResult, CaptureBundle, DepthMap, DepthStats, SearchBounds};
use crate::gmm::GmmConfig;
use crate::grid::Grid;
use crate::pso::{PsoConfig, Termination};
use crate::signal::{CorrelationSamples, ModulationConfig, SignalError, StrayParams};

pub const BUNDLE_MAGIC: &[u8; 9] = b"STRAYCAL1";
pub const BUNDLE_HEADER_LEN: usize = 49;
const PLANES: usize = 5;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a bundle file (bad magic)")]
    BadMagic,
    #[error("bundle truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("bundle dimensions invalid: {0}")]
    Dimensions(String),
    #[error("amplitude plane inconsistent at pixel {pixel}: stored {stored}, samples give {computed}")]
    AmplitudeInconsistent {
        pixel: usize,
        stored: f64,
        computed: f64,
    },
    #[error("bundle modulation invalid: {0}")]
    Modulation(#[from] SignalError),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

impl FormatError {
    fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Reads `n` little-endian f32 values.
fn f32_plane(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
}

pub fn encode_bundle(bundle: &CaptureBundle, modulation: &ModulationConfig) -> Vec<u8> {
    let (w, h) = bundle.dims();
    let mut out = Vec::with_capacity(BUNDLE_HEADER_LEN + PLANES * 4 * w * h);
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for v in [
        bundle.distance_label,
        modulation.frequency_hz,
        modulation.demod_amplitude,
        modulation.integration_time_s,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for n in 0..4 {
        for s in bundle.frame().iter() {
            out.extend_from_slice(&(s.0[n] as f32).to_le_bytes());
        }
    }
    for a in bundle.amplitude_map().iter() {
        out.extend_from_slice(&(*a as f32).to_le_bytes());
    }
    out
}

/// Allowed gap between a stored f32 amplitude and the one recomputed from
/// f32 samples.
fn amplitude_tolerance(computed: f64, s: &CorrelationSamples) -> f64 {
    let eps = f32::EPSILON as f64;
    let scale = s.0.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    2.0 * eps * scale + eps * computed.abs()
}

pub fn decode_bundle(bytes: &[u8]) -> Result<(CaptureBundle, ModulationConfig), FormatError> {
    if bytes.len() < BUNDLE_MAGIC.len() || &bytes[..BUNDLE_MAGIC.len()] != BUNDLE_MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < BUNDLE_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: BUNDLE_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (w, h) = (u32_at(9), u32_at(13));
    if w == 0 || h == 0 {
        return Err(FormatError::Dimensions(format!("{w}x{h} has no pixels")));
    }
    let modulation = ModulationConfig::new(f64_at(25), f64_at(33), f64_at(41))?;
    let distance_label = f64_at(17);
    let plane = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Dimensions(format!("{w}x{h} overflows")))?;
    let expected = BUNDLE_HEADER_LEN + PLANES * plane;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::Dimensions(format!(
            "{} trailing bytes after {w}x{h} planes",
            bytes.len() - expected
        )));
    }
    let body = &bytes[BUNDLE_HEADER_LEN..];
    let planes: Vec<Vec<f64>> = (0..PLANES)
        .map(|k| f32_plane(&body[k * plane..(k + 1) * plane]).collect())
        .collect();
    let samples: Vec<CorrelationSamples> = (0..w * h)
        .map(|i| CorrelationSamples([planes[0][i], planes[1][i], planes[2][i], planes[3][i]]))
        .collect();
    let frame = Grid::from_vec(w, h, samples).expect("sized");
    let amplitude = Grid::from_vec(w, h, planes[4].clone()).expect("sized");
    let bundle = CaptureBundle::from_parts(distance_label, frame, amplitude, amplitude_tolerance)
        .map_err(|e| match e {
            CalibError::AmplitudeMismatch {
                pixel,
                stored,
                computed,
            } => FormatError::AmplitudeInconsistent {
                pixel,
                stored,
                computed,
            },
            other => FormatError::Dimensions(other.to_string()),
        })?;
    Ok((bundle, modulation))
}

pub fn write_bundle(
    path: &Path,
    bundle: &CaptureBundle,
    modulation: &ModulationConfig,
) -> Result<(), FormatError> {
    fs::write(path, encode_bundle(bundle, modulation)).map_err(|e| FormatError::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<(CaptureBundle, ModulationConfig), FormatError> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_bundle(&bytes)
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Measured,
    Simulator {
        seed: u64,
        stray: StrayParams,
        sample_noise_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub distance_label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub modulation: ModulationConfig,
    pub provenance: Provenance,
    pub bundles: Vec<ManifestEntry>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), FormatError> {
    write_json(path, manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, FormatError> {
    read_json(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every bundle a manifest lists and checks they agree with it.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, CalibrationDataset), FormatError> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut bundles = Vec::with_capacity(manifest.bundles.len());
    for entry in &manifest.bundles {
        let path = base.join(&entry.path);
        let (bundle, modulation) = read_bundle(&path)?;
        if bundle.dims() != (manifest.width, manifest.height) {
            return Err(FormatError::Manifest(format!(
                "{} is {:?}, manifest says {}x{}",
                path.display(),
                bundle.dims(),
                manifest.width,
                manifest.height
            )));
        }
        if modulation != manifest.modulation {
            return Err(FormatError::Manifest(format!(
                "{} was captured with a different modulation",
                path.display()
            )));
        }
        bundles.push(bundle);
    }
    let dataset = CalibrationDataset::new(bundles, manifest.modulation)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    Ok((manifest, dataset))
}

/// Writes each bundle as `<stem>_NN.bin` next to a `manifest.json` in `dir`.
pub fn save_dataset(
    dir: &Path,
    dataset: &CalibrationDataset,
    provenance: Provenance,
) -> Result<(PathBuf, Manifest), FormatError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let mut entries = Vec::new();
    for (k, b) in dataset.bundles().iter().enumerate() {
        let name = PathBuf::from(format!("bundle_{k:02}.bin"));
        write_bundle(&dir.join(&name), b, &dataset.modulation)?;
        entries.push(ManifestEntry {
            path: name,
            distance_label: b.distance_label,
        });
    }
    let (width, height) = dataset.bundles()[0].dims();
    let manifest = Manifest {
        width,
        height,
        modulation: dataset.modulation,
        provenance,
        bundles: entries,
    };
    let path = dir.join("manifest.json");
    write_manifest(&path, &manifest)?;
    Ok((path, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub distance_label: f64,
    pub residual_m: f64,
}

/// Calibration output, also the input of `correct` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub stray_amplitude: f64,
    pub stray_phase_rad: f64,
    pub final_loss_m: f64,
    pub loss_history_m: Vec<f64>,
    pub residuals: Vec<ResidualEntry>,
    pub termination: Termination,
    pub amplitude_bound: f64,
    pub gmm: GmmConfig,
    pub pso: PsoConfig,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub const SINGLE_DISTANCE_WARNING: &str = "single-distance: overfitting risk";

impl ResultFile {
    pub fn from_result(result: &CalibrationResult, gmm: &GmmConfig, pso: &PsoConfig) -> Self {
        let mut warnings = Vec::new();
        if result.overfitting_risk() {
            warnings.push(SINGLE_DISTANCE_WARNING.to_string());
        }
        Self {
            stray_amplitude: result.stray.amplitude,
            stray_phase_rad: result.stray.phase_rad,
            final_loss_m: result.final_loss,
            loss_history_m: result.loss_history.clone(),
            residuals: result
                .distance_labels
                .iter()
                .zip(&result.per_distance_residuals)
                .map(|(&distance_label, &residual_m)| ResidualEntry {
                    distance_label,
                    residual_m,
                })
                .collect(),
            termination: result.termination,
            amplitude_bound: result.bounds.amplitude_max,
            gmm: *gmm,
            pso: *pso,
            seed: result.seed,
            warnings,
        }
    }

    pub fn stray(&self) -> Result<StrayParams, SignalError> {
        StrayParams::new(self.stray_amplitude, self.stray_phase_rad)
    }

    pub fn bounds(&self) -> SearchBounds {
        SearchBounds {
            amplitude_max: self.amplitude_bound,
        }
    }
}

pub fn write_result(path: &Path, result: &ResultFile) -> Result<(), FormatError> {
    write_json(path, result)
}

pub fn read_result(path: &Path) -> Result<ResultFile, FormatError> {
    read_json(path)
}

/// `%.9g`-style formatting: nine significant digits, no exponent for
/// ordinary depths.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return "nan".to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..9).contains(&exp) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// One CSV row per image row, meters; masked pixels are written as `nan`.
pub fn write_depth_csv(path: &Path, map: &DepthMap) -> Result<(), FormatError> {
    let file = fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let w = map.depth.width();
    let rows = map.depth.as_slice().chunks(w).zip(map.valid.as_slice().chunks(w));
    (|| -> io::Result<()> {
        for (depths, valid) in rows {
            let line: Vec<String> = depths
                .iter()
                .zip(valid)
                .map(|(&d, &ok)| if ok { format_sig9(d) } else { "nan".into() })
                .collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()
    })()
    .map_err(|e| FormatError::io(path, e))
}

/// 16-bit binary PGM. Valid pixels map linearly from `[min, max]` onto
/// `1..=65535` (clamped); masked pixels are 0. The range is recorded in a
/// comment line.
pub fn encode_depth_pgm(map: &DepthMap, min: f64, max: f64) -> Vec<u8> {
    let (w, h) = map.depth.dims();
    let mut out = format!(
        "P5\n# depth_min_m={} depth_max_m={} masked=0\n{w} {h}\n65535\n",
        format_sig9(min),
        format_sig9(max)
    )
    .into_bytes();
    let span = max - min;
    for (&d, &ok) in map.depth.iter().zip(map.valid.iter()) {
        let level: u16 = if !ok {
            0
        } else {
            let t = if span > 0.0 { ((d - min) / span).clamp(0.0, 1.0) } else { 0.0 };
            1 + (t * 65534.0).round() as u16
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn write_depth_pgm(path: &Path, map: &DepthMap, min: f64, max: f64) -> Result<(), FormatError> {
    fs::write(path, encode_depth_pgm(map, min, max)).map_err(|e| FormatError::io(path, e))
}

/// `mean=<m> std=<s> valid=<n> masked=<k>` with the sample (n − 1) std.
pub fn stats_line(stats: &DepthStats, masked: usize) -> String {
    format!(
        "mean={} std={} valid={} masked={masked}",
        format_sig9(stats.mean),
        format_sig9(stats.std_dev),
        stats.count
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::raw_amplitude;

    fn bundle() -> CaptureBundle {
        let frame = Grid::from_fn(3, 2, |u, v| {
            CorrelationSamples([0.01 * u as f64, -0.02 * v as f64, 0.003, 0.04 + 0.001 * u as f64])
        });
        CaptureBundle::from_frame(1.75, frame)
    }

    #[test]
    fn header_layout() {
        let bytes = encode_bundle(&bundle(), &ModulationConfig::default());
        assert_eq!(&bytes[..9], b"STRAYCAL1");
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[17..25].try_into().unwrap()), 1.75);
        assert_eq!(bytes.len(), BUNDLE_HEADER_LEN + 5 * 4 * 6);
    }

    #[test]
    fn decode_then_encode_is_byte_exact() {
        let cfg = ModulationConfig::default();
        let bytes = encode_bundle(&bundle(), &cfg);
        let (decoded, m) = decode_bundle(&bytes).unwrap();
        assert_eq!(m, cfg);
        assert_eq!(encode_bundle(&decoded, &m), bytes);
        for (a, b) in decoded.frame().iter().zip(bundle().frame().iter()) {
            for n in 0..4 {
                assert_eq!(a.0[n], b.0[n] as f32 as f64);
            }
        }
    }

    #[test]
    fn corrupt_files_are_classified() {
        let cfg = ModulationConfig::default();
        let bytes = encode_bundle(&bundle(), &cfg);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bundle(&bad), Err(FormatError::BadMagic)));

        assert!(matches!(
            decode_bundle(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(
            decode_bundle(&bytes[..20]),
            Err(FormatError::Truncated { .. })
        ));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_bundle(&long), Err(FormatError::Dimensions(_))));

        let mut wide = bytes.clone();
        wide[9..13].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode_bundle(&wide), Err(FormatError::Truncated { .. })));

        // bump the last amplitude value by 1e-3
        let mut amp = bytes.clone();
        let o = amp.len() - 4;
        let v = f32::from_le_bytes(amp[o..].try_into().unwrap()) + 1e-3;
        amp[o..].copy_from_slice(&v.to_le_bytes());
        assert!(matches!(
            decode_bundle(&amp),
            Err(FormatError::AmplitudeInconsistent { pixel: 5, .. })
        ));
    }

    #[test]
    fn amplitude_tolerance_is_tight() {
        let s = CorrelationSamples([0.03, -0.01, -0.02, 0.015]);
        let a = raw_amplitude(&s);
        assert!(amplitude_tolerance(a, &s) < 1e-7);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(2.3), "2.3");
        assert_eq!(format_sig9(2.398339664123), "2.39833966");
        assert_eq!(format_sig9(0.0123456789012), "0.0123456789");
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(f64::NAN), "nan");
        assert_eq!(format_sig9(123456789.4), "123456789");
    }

    #[test]
    fn pgm_levels() {
        let map = DepthMap {
            depth: Grid::from_vec(3, 1, vec![1.0, 2.0, f64::NAN]).unwrap(),
            valid: Grid::from_vec(3, 1, vec![true, true, false]).unwrap(),
        };
        let bytes = encode_depth_pgm(&map, 1.0, 2.0);
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("P5\n# depth_min_m=1 depth_max_m=2"));
        let data = &bytes[bytes.len() - 6..];
        assert_eq!(data, &[0, 1, 0xff, 0xff, 0, 0]);
    }
}
