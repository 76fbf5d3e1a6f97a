//! `ttrally`: batch front end for synthesis, calibration, reconstruction,
//! conformal calibration, robot simulation and corpus statistics.
//!
//! Exit codes: 0 success, 2 bad input (missing files, parse errors, bad
//! arguments), 3 numerical or geometric failure.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use ttrally::anticipate::{
    calibration_residuals, coverage_table, exchange_samples, format_calibration, parse_calibration, parse_split_spec,
    physics_baseline_ensemble, AnticipateError, ExchangeSample, PhysicsParams, Split, SplitSpec,
};
use ttrally::ball::ReconParams;
use ttrally::camera::{calibrate_from_keypoints, Camera, CameraError};
use ttrally::control::{format_results, run_experiment, ControlError, Corpus, ExperimentConfig, Strategy};
use ttrally::model::{dataset_stats, ModelError, Point, TableGeometry};
use ttrally::pipeline::{
    filter_points, inject_corruption, load_track, median_table, read_reconstruction, reconstruct_all,
    write_reconstruction, write_track, FilterPolicy, PipelineError, ReconstructionFile, StoredPoint,
};
use ttrally::rng::{self, domain};
use ttrally::synth::{emit_synthetic_track, generate_rally, CameraSampler, RallyParams};

#[derive(Debug)]
enum CliError {
    Input(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numeric(e.to_string())
        }
    }
}

impl From<CameraError> for CliError {
    fn from(e: CameraError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<AnticipateError> for CliError {
    fn from(e: AnticipateError) -> Self {
        use AnticipateError as A;
        match e {
            A::Parse { .. } | A::Version(_) | A::InvalidSplit(_) | A::SplitLeakage(_) | A::InputMismatch { .. } => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Anticipate(a) => a.into(),
            ControlError::Config { .. } | ControlError::MissingCalibration | ControlError::InvalidParameter(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ttrally", version, about = "Table-tennis rally reconstruction, anticipation and robot simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the camera of one track from its table detections.
    Calibrate(CalibrateArgs),
    /// Reconstruct 3D points from 2D tracks.
    Reconstruct(ReconstructArgs),
    /// Fit the physics ensemble, calibrate conformal quantiles and report coverage.
    Conformal(ConformalArgs),
    /// Run the pre-positioning experiment.
    Simulate(SimulateArgs),
    /// Generate synthetic tracks with ground truth.
    Synth(SynthArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    track: PathBuf,
    /// Camera file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Track files or directories of `track_*.txt`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Largest accepted mean squared parabola residual (px^2).
    #[arg(long, default_value_t = 9.0)]
    mse_threshold: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConformalArgs {
    /// Reconstruction files or directories of `*.recon`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Point-id partition, e.g. `train:0..500;cal:500..750;test:750..1000`.
    #[arg(long)]
    split: String,
    #[arg(long, default_value_t = 0.15)]
    alpha: f64,
    /// Levels of the coverage table.
    #[arg(long, value_delimiter = ',', default_values_t = [0.10, 0.15, 0.20])]
    alphas: Vec<f64>,
    /// Anticipation lead before the opponent's hit (s).
    #[arg(long = "t-h", default_value_t = 0.2)]
    t_h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ensemble size.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Largest forecast horizon (s).
    #[arg(long, default_value_t = 0.7)]
    max_horizon: f64,
    #[arg(long, default_value_t = 24)]
    history: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Conformal calibration file; required for the anticipatory strategy.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// `key=value` experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Point-id partition; defaults to the one stored with the calibration.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long = "t-h", value_delimiter = ',')]
    t_h: Option<Vec<f64>>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated strategies: baseline, anticipatory, oracle.
    #[arg(long)]
    strategies: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Results file (tab-separated, one row per episode).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "noise-px", default_value_t = 0.0)]
    noise_px: f64,
    /// First point id.
    #[arg(long, default_value_t = 0)]
    first_id: u64,
    /// Fraction of tracks with one detection blanked out.
    #[arg(long, default_value_t = 0.0)]
    corrupt: f64,
    /// `key=value` overrides: n, seed, noise_px, fps, mean_speed, first_id.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Expands directories into their files accepted by `keep`, sorted by name.
fn expand(inputs: &[PathBuf], keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let rd = std::fs::read_dir(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            let mut files: Vec<PathBuf> = rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.file_name().and_then(|n| n.to_str()).is_some_and(&keep))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Input("no input files".into()));
    }
    Ok(out)
}

fn key_value_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("line {}: expected key=value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn format_camera(cam: &Camera, rms: f64) -> String {
    let k = &cam.intrinsics;
    let r = cam.extrinsics.rotation.matrix();
    let t = &cam.extrinsics.translation;
    let mut s = String::from("ttrally-camera v1\n");
    let _ = writeln!(s, "K {} 0 {} 0 {} {} 0 0 1", k.fx, k.cx, k.fy, k.cy);
    let _ = writeln!(
        s,
        "R {} {} {} {} {} {} {} {} {}",
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)]
    );
    let _ = writeln!(s, "t {} {} {}", t.x, t.y, t.z);
    let _ = writeln!(s, "rms_px {rms}");
    s
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let track = load_track(&a.track)?;
    let table = TableGeometry::ittf();
    let (kp, base) = median_table(&track.frames).ok_or_else(|| CliError::Input("track has no table detections".into()))?;
    let cal = calibrate_from_keypoints(&table, &kp, base)?;
    let text = format_camera(&cal.camera, cal.rms);
    print!("{}", text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let files = expand(&a.inputs, |n| n.starts_with("track") && n.ends_with(".txt"))?;
    let tracks = files.iter().map(|f| load_track(f)).collect::<std::result::Result<Vec<_>, _>>()?;
    let table = TableGeometry::ittf();
    let fps = tracks[0].header.fps;
    let attempts = reconstruct_all(&tracks, &table, &ReconParams::for_fps(fps));
    let (kept, report) = filter_points(attempts, &FilterPolicy { mse_threshold: a.mse_threshold });
    let mut meta = BTreeMap::new();
    if let Some(seed) = a.seed.or(tracks[0].header.seed) {
        meta.insert("seed".to_string(), seed.to_string());
    }
    if let Some(n) = tracks[0].header.noise_px {
        meta.insert("noise_px".to_string(), n.to_string());
    }
    let file = ReconstructionFile {
        table,
        meta,
        points: kept
            .into_iter()
            .map(|r| StoredPoint {
                point: r.point,
                camera: Some(r.camera),
                calibration_rms: Some(r.calibration_rms),
                complete: true,
            })
            .collect(),
    };
    write_reconstruction(&file, &a.out)?;
    println!("points\t{}\naccepted\t{}\nrejected\t{}", report.total, report.kept, report.rejected());
    for (reason, n) in &report.counts {
        println!("reject.{}\t{n}", reason.name());
    }
    Ok(())
}

fn load_points(inputs: &[PathBuf]) -> Result<(Vec<Point>, TableGeometry)> {
    let files = expand(inputs, |n| n.ends_with(".recon"))?;
    let mut points = Vec::new();
    let mut table = None;
    for f in &files {
        let r = read_reconstruction(f)?;
        table.get_or_insert(r.table);
        points.extend(r.points.into_iter().map(|p| p.point));
    }
    points.sort_by_key(|p| p.id);
    if let Some(w) = points.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(AnticipateError::SplitLeakage(format!("point id {} appears twice", w[0].id)).into());
    }
    Ok((points, table.unwrap_or_default()))
}

fn partition<'a>(points: &'a [Point], split: &SplitSpec, which: Split) -> Vec<&'a Point> {
    points.iter().filter(|p| split.assign(p.id) == Some(which)).collect()
}

fn samples(points: &[&Point], table: &TableGeometry, lead: usize, history: usize, max_h: usize) -> Result<Vec<ExchangeSample>> {
    let mut out = Vec::new();
    for p in points {
        out.extend(exchange_samples(p, table, lead, history, max_h)?);
    }
    Ok(out)
}

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::Input(format!("alpha {alpha} outside (0, 1)")))
    }
}

fn cmd_conformal(a: &ConformalArgs) -> Result<()> {
    let split = parse_split_spec(&a.split)?;
    check_level(a.alpha)?;
    a.alphas.iter().try_for_each(|x| check_level(*x))?;
    let (points, table) = load_points(&a.inputs)?;
    let fps = points.first().ok_or_else(|| CliError::Input("no points".into()))?.fps;
    let lead = ((a.t_h * fps).round() as usize).max(1);
    let max_h = (a.max_horizon * fps).round() as usize;
    let horizons: Vec<usize> = (1..=max_h).collect();
    let part = |w| samples(&partition(&points, &split, w), &table, lead, a.history, max_h);
    let (train, cal, test) = (part(Split::Train)?, part(Split::Cal)?, part(Split::Test)?);
    let members = physics_baseline_ensemble(a.seed, a.k, &PhysicsParams::default(), &train, &table)?;
    let residuals = calibration_residuals(&members, &cal, &horizons)?;
    let mut levels = vec![a.alpha];
    levels.extend(a.alphas.iter().filter(|x| (**x - a.alpha).abs() > 1e-12));
    let calibs = levels.iter().map(|&x| residuals.calibrate(x)).collect::<std::result::Result<Vec<_>, _>>()?;
    let meta: BTreeMap<String, String> = [
        ("seed", a.seed.to_string()),
        ("k", a.k.to_string()),
        ("split", a.split.replace(' ', "")),
        ("history", a.history.to_string()),
        ("max_horizon", a.max_horizon.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_text(&a.out, &format_calibration(&calibs, &meta))?;
    println!("exchanges\ttrain={}\tcal={}\ttest={}", train.len(), cal.len(), test.len());
    println!("alpha\tx\ty\tz\tjoint\tn");
    for row in coverage_table(&members, &residuals, &test, &a.alphas)? {
        let c = &row.coverage;
        println!(
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}",
            row.alpha, c.per_axis[0], c.per_axis[1], c.per_axis[2], c.joint, c.n
        );
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::parse(&read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(CliError::Input);
    let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    if let Some(l) = &a.lambda {
        set("lambda", join(l))?;
    }
    if let Some(t) = &a.t_h {
        set("T_h", join(t))?;
    }
    if let Some(x) = a.alpha {
        set("alpha", x.to_string())?;
    }
    if let Some(s) = &a.strategies {
        set("strategy", s.clone())?;
    }
    if let Some(n) = a.episodes {
        set("episodes", n.to_string())?;
    }
    let (calibs, meta) = match &a.calib {
        Some(p) => parse_calibration(&read_text(p)?)?,
        None if cfg.strategies.contains(&Strategy::Anticipatory) => {
            return Err(CliError::Input("the anticipatory strategy needs --calib".into()))
        }
        None => (Vec::new(), BTreeMap::new()),
    };
    // The ensemble is refitted exactly as it was calibrated.
    let meta_num = |k: &str| meta.get(k).and_then(|v| v.parse::<f64>().ok());
    if let Some(k) = meta_num("k") {
        cfg.k_members = k as usize;
    }
    if let Some(h) = meta_num("history") {
        cfg.history = h as usize;
    }
    if let Some(m) = meta_num("max_horizon") {
        cfg.max_horizon_s = m;
    }
    cfg.seed = a.seed.or(meta.get("seed").and_then(|s| s.parse().ok())).unwrap_or(cfg.seed);
    let split_text = a
        .split
        .clone()
        .or_else(|| meta.get("split").cloned())
        .ok_or_else(|| CliError::Input("no --split given and none stored with the calibration".into()))?;
    let split = parse_split_spec(&split_text)?;
    let (points, table) = load_points(&a.inputs)?;
    let owned = |w| partition(&points, &split, w).into_iter().cloned().collect::<Vec<Point>>();
    let (train, cal, test) = (owned(Split::Train), owned(Split::Cal), owned(Split::Test));
    let corpus = Corpus {
        train: &train,
        cal: &cal,
        test: &test,
    };
    let cells = run_experiment(&corpus, &cfg, &table, &calibs)?;
    write_text(&a.out, &format_results(&cells, cfg.seed))?;
    println!("strategy\tlambda\tt_h\tcentral\tepisodes\treturn_rate\treturn_accuracy_m\tposition_error_m\torientation_error_deg\tfallbacks");
    for c in &cells {
        let m = &c.summary;
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{}",
            c.strategy.name(),
            c.lambda,
            c.t_h,
            c.central.name(),
            m.episodes,
            m.return_rate,
            m.return_accuracy,
            m.position_error,
            m.orientation_error_deg,
            m.fallbacks
        );
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let (mut n, mut seed, mut noise, mut first_id) = (a.n, a.seed, a.noise_px, a.first_id);
    let mut params = RallyParams::default();
    if let Some(p) = &a.config {
        for (k, v) in key_value_lines(&read_text(p)?)? {
            let bad = || CliError::Input(format!("bad value `{v}` for `{k}`"));
            let num = || v.parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0).ok_or_else(bad);
            match k.as_str() {
                "n" => n = v.parse().map_err(|_| bad())?,
                "seed" => seed = v.parse().map_err(|_| bad())?,
                "first_id" => first_id = v.parse().map_err(|_| bad())?,
                "noise_px" => noise = num()?,
                "fps" => params.fps = num()?,
                "mean_speed" => params.mean_speed = num()?,
                _ => return Err(CliError::Input(format!("unknown key `{k}`"))),
            }
        }
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(CliError::Input(format!("noise {noise} must be non-negative")));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    let table = TableGeometry::ittf();
    let sampler = CameraSampler::default();
    let mut tracks = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for id in first_id..first_id + n as u64 {
        let rally = generate_rally(id, seed, &params, &table);
        let camera = sampler.sample(&mut rng::tagged(seed, domain::CAMERA, id), &table);
        tracks.push(emit_synthetic_track(&rally, &camera, &table, (sampler.width, sampler.height), noise, seed)?);
        truths.push((rally, camera));
    }
    if a.corrupt > 0.0 {
        inject_corruption(&mut tracks, a.corrupt, seed);
    }
    for (track, (rally, camera)) in tracks.iter().zip(truths) {
        let id = rally.point.id;
        write_track(track, &a.out.join(format!("track_{id:05}.txt")))?;
        let meta = [("seed", seed.to_string()), ("noise_px", noise.to_string())]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let truth = ReconstructionFile {
            table,
            meta,
            points: vec![StoredPoint {
                point: rally.point,
                camera: Some(camera),
                calibration_rms: None,
                complete: true,
            }],
        };
        write_reconstruction(&truth, &a.out.join(format!("truth_{id:05}.recon")))?;
    }
    println!("wrote {n} tracks and {n} truth files to {}", a.out.display());
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let (points, table) = load_points(&a.inputs)?;
    let s = dataset_stats(&points, &table)?;
    println!("points\t{}", points.len());
    println!("mean_speed_mps\t{:.3}", s.mean_speed);
    println!("speed_p10_mps\t{:.3}", s.speed_p10);
    println!("speed_p90_mps\t{:.3}", s.speed_p90);
    println!("mean_inter_hit_s\t{:.3}", s.mean_inter_hit_s);
    let h = &s.histogram;
    println!("plane_y_lo\tplane_y_hi\tnear\tfar");
    for i in 0..h.counts[0].len() {
        let lo = h.lo + i as f64 * h.bin_width();
        println!("{:.3}\t{:.3}\t{}\t{}", lo, lo + h.bin_width(), h.counts[0][i], h.counts[1][i]);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Conformal(a) => cmd_conformal(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
