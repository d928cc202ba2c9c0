use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use straycal_core::calib::{
    apply_correction, calibrate, depth_stats, evaluate_params, CalibError, CalibrationDataset, CaptureBundle,
    SearchBounds,
};
use straycal_core::gmm::GmmConfig;
use straycal_core::io::{
    load_dataset, read_bundle, read_result, save_dataset, stats_line, write_depth_csv, write_depth_pgm,
    write_result, FormatError, Provenance, ResultFile,
};
use straycal_core::pso::PsoConfig;
use straycal_core::signal::{ModulationConfig, SignalError, StrayParams};
use straycal_core::sim::{
    make_dataset, multi_object_scene, render_scene, CheckerboardSpec, NoiseModel, RadiometryModel, SimError,
};

#[derive(Parser)]
#[command(name = "straycal", version, about = "Stray-light calibration for coaxial AMCW LiDAR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (bundles + manifest.json).
    Simulate(SimulateArgs),
    /// Estimate stray-light parameters from a manifest.
    Calibrate(CalibrateArgs),
    /// Write raw and corrected depth maps.
    Correct(CorrectArgs),
    /// Held-out L1 loss of a calibration result.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Checkerboard,
    Objects,
}

#[derive(Args)]
struct SimulateArgs {
    /// Board distances in meters.
    #[arg(long, value_delimiter = ',', default_values_t = [1.75, 2.3, 3.0, 4.0])]
    distances: Vec<f64>,
    /// Checker squares as COLSxROWS.
    #[arg(long, default_value = "8x8", value_parser = parse_board)]
    board: (usize, usize),
    #[arg(long, default_value_t = 100)]
    width: usize,
    #[arg(long, default_value_t = 100)]
    height: usize,
    #[arg(long, default_value_t = 0.1)]
    dark: f64,
    #[arg(long, default_value_t = 0.9)]
    bright: f64,
    /// Volts returned by reflectivity 1 at 1 m.
    #[arg(long, default_value_t = 2.0)]
    reference_amplitude: f64,
    #[arg(long, default_value_t = 0.0976)]
    stray_amp: f64,
    #[arg(long, default_value_t = 0.3509)]
    stray_phase: f64,
    /// Gaussian noise per correlation sample, volts.
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SceneKind::Checkerboard)]
    scene: SceneKind,
    #[command(flatten)]
    modulation: ModulationArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModulationArgs {
    #[arg(long, default_value_t = 31.25e6)]
    frequency: f64,
    #[arg(long, default_value_t = 0.4785)]
    demod_amplitude: f64,
    #[arg(long, default_value_t = 16e-6)]
    integration_time: f64,
}

#[derive(Args)]
struct GmmArgs {
    #[arg(long, default_value_t = 1000)]
    gmm_max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    gmm_tol: f64,
    /// Posterior confidence required to label a pixel.
    #[arg(long, default_value_t = 0.9)]
    gmm_margin: f64,
    #[arg(long, default_value_t = 0)]
    gmm_restarts: usize,
}

impl GmmArgs {
    fn config(&self) -> GmmConfig {
        GmmConfig {
            max_em_iterations: self.gmm_max_iter,
            loglik_tolerance: self.gmm_tol,
            confidence_margin: self.gmm_margin,
            restarts: self.gmm_restarts,
        }
    }
}

#[derive(Args)]
struct PsoArgs {
    #[arg(long, default_value_t = 20)]
    pso_particles: usize,
    #[arg(long, default_value_t = 100)]
    pso_max_iter: usize,
    #[arg(long, default_value_t = 1.49)]
    pso_c1: f64,
    #[arg(long, default_value_t = 1.49)]
    pso_c2: f64,
    #[arg(long, default_value_t = 0.1)]
    pso_w_min: f64,
    #[arg(long, default_value_t = 1.1)]
    pso_w_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    pso_tol: f64,
    #[arg(long, default_value_t = 20)]
    pso_stall: usize,
    /// Evaluate particles on one thread.
    #[arg(long)]
    serial: bool,
}

impl PsoArgs {
    fn config(&self, seed: u64) -> PsoConfig {
        PsoConfig {
            particle_count: self.pso_particles,
            max_iterations: self.pso_max_iter,
            c1: self.pso_c1,
            c2: self.pso_c2,
            inertia_min: self.pso_w_min,
            inertia_max: self.pso_w_max,
            loss_tolerance: self.pso_tol,
            stall_iterations: self.pso_stall,
            seed,
            parallel: !self.serial,
            ..PsoConfig::default()
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    gmm: GmmArgs,
    #[command(flatten)]
    pso: PsoArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper amplitude bound in volts (default: from the data).
    #[arg(long)]
    amp_max: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long, conflicts_with = "bundle", required_unless_present = "bundle")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    params: PathBuf,
    /// Output files are `<prefix>_<k>_{raw,corrected}.{csv,pgm}`.
    #[arg(long)]
    out_prefix: PathBuf,
    /// PGM scale in meters as MIN,MAX (default: 0 to the unambiguous range).
    #[arg(long, value_parser = parse_range)]
    pgm_range: Option<(f64, f64)>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    heldout_manifest: PathBuf,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected MIN,MAX, got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    let (lo, hi) = (parse(a)?, parse(b)?);
    if lo.is_finite() && hi.is_finite() && lo < hi {
        Ok((lo, hi))
    } else {
        Err(format!("need finite MIN < MAX, got {s:?}"))
    }
}

fn parse_board(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected COLSxROWS, got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

enum Failure {
    Usage(String),
    Io(String),
    Segmentation(String),
    Optimization(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Segmentation(_) => 4,
            Failure::Optimization(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::Io(m)
            | Failure::Segmentation(m)
            | Failure::Optimization(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<CalibError> for Failure {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::Segmentation { .. } | CalibError::EmptyCluster(..) | CalibError::DataQuality { .. } => {
                Failure::Segmentation(e.to_string())
            }
            CalibError::Optimization(_) => Failure::Optimization(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<SignalError> for Failure {
    fn from(e: SignalError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let cfg = ModulationConfig::new(
        args.modulation.frequency,
        args.modulation.demod_amplitude,
        args.modulation.integration_time,
    )?;
    let stray = StrayParams::new(args.stray_amp, args.stray_phase)?;
    let radio = RadiometryModel {
        reference_amplitude: args.reference_amplitude,
        ..RadiometryModel::default()
    };
    let noise = NoiseModel {
        sample_noise_std: args.noise_std,
        seed: args.seed,
    };
    let dataset = match args.scene {
        SceneKind::Checkerboard => {
            let board = CheckerboardSpec {
                width: args.width,
                height: args.height,
                squares_x: args.board.0,
                squares_y: args.board.1,
                dark_reflectivity: args.dark,
                bright_reflectivity: args.bright,
                ..CheckerboardSpec::default()
            };
            make_dataset(&args.distances, &board, &stray, &radio, &noise, &cfg)?
        }
        SceneKind::Objects => {
            let scene = multi_object_scene(args.width, args.height)?;
            let bundle = render_scene(&scene.spec, &stray, &radio, &noise, &cfg)?;
            CalibrationDataset::new(vec![bundle], cfg)?
        }
    };
    let provenance = Provenance::Simulator {
        seed: args.seed,
        stray,
        sample_noise_std: args.noise_std,
    };
    let (path, manifest) = save_dataset(&args.out, &dataset, provenance)?;
    println!("wrote {} bundles and {}", manifest.bundles.len(), path.display());
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<(), Failure> {
    let (_, dataset) = load_dataset(&args.manifest)?;
    let gmm = args.gmm.config();
    let pso = args.pso.config(args.seed);
    let bounds = match args.amp_max {
        Some(a) if a > 0.0 && a.is_finite() => SearchBounds { amplitude_max: a },
        Some(a) => return Err(Failure::Usage(format!("--amp-max must be positive, got {a}"))),
        None => SearchBounds::for_dataset(&dataset),
    };
    let result = calibrate(&dataset, &gmm, &pso, bounds)?;
    let file = ResultFile::from_result(&result, &gmm, &pso);
    write_result(&args.out, &file)?;
    println!(
        "A_s={} V phi_s={} rad loss={:e} m iterations={} termination={:?}",
        result.stray.amplitude,
        result.stray.phase_rad,
        result.final_loss,
        result.loss_history.len(),
        result.termination
    );
    for (d, r) in result.distance_labels.iter().zip(&result.per_distance_residuals) {
        println!("  residual at {d} m: {r:e} m");
    }
    for w in &file.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn correct_cmd(args: CorrectArgs) -> Result<(), Failure> {
    let params = read_result(&args.params)?;
    let stray = params.stray()?;
    let (bundles, cfg): (Vec<CaptureBundle>, ModulationConfig) = match (&args.manifest, &args.bundle) {
        (Some(m), _) => {
            let (_, ds) = load_dataset(m)?;
            (ds.bundles().to_vec(), ds.modulation)
        }
        (None, Some(b)) => {
            let (bundle, cfg) = read_bundle(b)?;
            (vec![bundle], cfg)
        }
        (None, None) => return Err(Failure::Usage("one of --manifest or --bundle is required".into())),
    };
    let (lo, hi) = args.pgm_range.unwrap_or((0.0, cfg.unambiguous_range()));
    for (k, bundle) in bundles.iter().enumerate() {
        for (tag, p) in [("raw", StrayParams::ZERO), ("corrected", stray)] {
            let map = apply_correction(bundle.frame(), &p, &cfg);
            write_depth_csv(&output_path(&args.out_prefix, k, tag, "csv"), &map)?;
            write_depth_pgm(&output_path(&args.out_prefix, k, tag, "pgm"), &map, lo, hi)?;
            let line = match depth_stats(&map) {
                Ok(s) => stats_line(&s, map.invalid_count()),
                Err(_) => format!("no valid pixels masked={}", map.invalid_count()),
            };
            println!("bundle {k} ({} m) {tag}: {line}", bundle.distance_label);
        }
    }
    Ok(())
}

fn output_path(prefix: &Path, k: usize, tag: &str, ext: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!("_{k}_{tag}.{ext}"));
    prefix.with_file_name(name)
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<(), Failure> {
    let params = read_result(&args.params)?;
    let (_, heldout) = load_dataset(&args.heldout_manifest)?;
    let loss = evaluate_params(&params.stray()?, &heldout, &params.gmm, params.seed)?;
    println!("heldout_loss={loss:e} m");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Correct(a) => correct_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
