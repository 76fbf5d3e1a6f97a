//! Track ingestion, per-point reconstruction, quality filtering and the
//! reconstruction file format.
//!
//! Both file formats are line-oriented text. Reals are written with Rust's
//! shortest round-trip formatting, so a write/read cycle is lossless.

use crate::ball::{detect_hits, reconstruct_trajectory, refine_hits, BallError, BallTrack2D, ReconParams};
use crate::camera::{calibrate_from_keypoints, position_player, Camera, CameraError, Extrinsics, ImagePoint, Intrinsics};
use crate::model::{joints, BallPiece, BounceEvent, Frame2D, Frame3D, HitEvent, ModelError, Player, Point, TableGeometry, Vec3};
use crate::par;
use crate::rng::{self, domain};
use nalgebra::{Matrix3, Rotation3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const TRACK_VERSION: &str = "v1";
pub const RECON_VERSION: &str = "ttrally-recon v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unsupported version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },
    #[error("frame {frame}: missing {entity}")]
    MissingEntity { frame: usize, entity: &'static str },
    #[error("no frames in the requested range")]
    EmptyRange,
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Ball(#[from] BallError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl PipelineError {
    /// Input problems (as opposed to numerical or geometric failures).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PipelineError::Io { .. } | PipelineError::Parse { .. } | PipelineError::Schema(_) | PipelineError::Version { .. }
        )
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackHeader {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    /// Point id; 0 when not given.
    pub id: u64,
    pub noise_px: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackFile {
    pub header: TrackHeader,
    pub frames: Vec<Frame2D>,
}

impl TrackFile {
    pub fn completeness(&self) -> Vec<bool> {
        self.frames.iter().map(Frame2D::is_complete).collect()
    }
}

fn fmt_px(out: &mut String, q: &ImagePoint) {
    let _ = write!(out, "{},{}", q.u, q.v);
}

fn fmt_vec(out: &mut String, v: &Vec3) {
    let _ = write!(out, "{},{},{}", v.x, v.y, v.z);
}

fn fmt_list<T>(out: &mut String, items: &[T], f: impl Fn(&mut String, &T)) {
    for (i, x) in items.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        f(out, x);
    }
}

pub fn format_track(track: &TrackFile) -> String {
    let h = &track.header;
    let mut out = format!("{TRACK_VERSION} fps={} w={} h={} id={}", h.fps, h.width, h.height, h.id);
    if let Some(n) = h.noise_px {
        let _ = write!(out, " noise={n}");
    }
    if let Some(s) = h.seed {
        let _ = write!(out, " seed={s}");
    }
    out.push('\n');
    for fr in &track.frames {
        let _ = write!(out, "frame={} ball=", fr.frame_index);
        opt(&mut out, fr.ball_px.as_ref(), fmt_px);
        for i in 0..6 {
            let _ = write!(out, " kp{}=", i + 1);
            opt(&mut out, fr.table_keypoints.as_ref().map(|k| &k[i]), fmt_px);
        }
        out.push_str(" base_h=");
        opt(&mut out, fr.base_height_px.as_ref(), |o, v| {
            let _ = write!(o, "{v}");
        });
        for p in 0..2 {
            let _ = write!(out, " rk{p}=");
            opt(&mut out, fr.racket_centroids[p].as_ref(), fmt_px);
        }
        for p in 0..2 {
            let _ = write!(out, " joints{p}=");
            opt(&mut out, fr.player_joints_cam[p].as_ref(), |o, j| fmt_list(o, j, fmt_vec));
        }
        for p in 0..2 {
            let _ = write!(out, " ankles{p}=");
            opt(&mut out, fr.player_ankles_px[p].as_ref(), |o, a| fmt_list(o, a, fmt_px));
        }
        out.push('\n');
    }
    out
}

fn opt<T>(out: &mut String, v: Option<&T>, f: impl Fn(&mut String, &T)) {
    match v {
        Some(x) => f(out, x),
        None => out.push('-'),
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("bad number {s:?}"))
}

fn parse_px(s: &str) -> Result<ImagePoint, String> {
    let mut it = s.split(',');
    match (it.next(), it.next(), it.next()) {
        (Some(u), Some(v), None) => Ok(ImagePoint::new(parse_f64(u)?, parse_f64(v)?)),
        _ => Err(format!("bad image point {s:?}")),
    }
}

fn parse_vec(s: &str) -> Result<Vec3, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("bad 3-vector {s:?}"));
    }
    Ok(Vec3::new(parse_f64(parts[0])?, parse_f64(parts[1])?, parse_f64(parts[2])?))
}

fn parse_opt<T>(s: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, String> {
    if s == "-" {
        Ok(None)
    } else {
        f(s).map(Some)
    }
}

fn key_values(line: &str) -> Result<BTreeMap<&str, &str>, String> {
    let mut map = BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
        if map.insert(k, v).is_some() {
            return Err(format!("duplicate field {k:?}"));
        }
    }
    Ok(map)
}

const FRAME_FIELDS: [&str; 15] = [
    "frame", "ball", "kp1", "kp2", "kp3", "kp4", "kp5", "kp6", "base_h", "rk0", "rk1", "joints0", "joints1", "ankles0",
    "ankles1",
];

fn parse_frame(line: &str) -> Result<Frame2D, String> {
    let kv = key_values(line)?;
    for k in kv.keys() {
        if !FRAME_FIELDS.contains(k) {
            return Err(format!("unknown field {k:?}"));
        }
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| format!("missing field {k:?}"));
    let frame_index = get("frame")?.parse::<usize>().map_err(|_| "bad frame index".to_string())?;
    let mut fr = Frame2D::empty(frame_index);
    fr.ball_px = parse_opt(get("ball")?, parse_px)?;
    let mut kps = Vec::with_capacity(6);
    for i in 1..=6 {
        kps.push(parse_opt(get(&format!("kp{i}"))?, parse_px)?);
    }
    if kps.iter().all(Option::is_some) {
        let v: Vec<ImagePoint> = kps.into_iter().flatten().collect();
        fr.table_keypoints = Some([v[0], v[1], v[2], v[3], v[4], v[5]]);
    }
    fr.base_height_px = parse_opt(get("base_h")?, parse_f64)?;
    for p in 0..2 {
        fr.racket_centroids[p] = parse_opt(get(&format!("rk{p}"))?, parse_px)?;
        fr.player_joints_cam[p] = parse_opt(get(&format!("joints{p}"))?, |s| {
            let j = s.split(';').map(parse_vec).collect::<Result<Vec<_>, _>>()?;
            if j.len() != joints::COUNT {
                return Err(format!("expected {} joints, got {}", joints::COUNT, j.len()));
            }
            Ok(j)
        })?;
        fr.player_ankles_px[p] = parse_opt(get(&format!("ankles{p}"))?, |s| {
            let a = s.split(';').map(parse_px).collect::<Result<Vec<_>, _>>()?;
            match a.as_slice() {
                [l, r] => Ok([*l, *r]),
                _ => Err("expected two ankle points".to_string()),
            }
        })?;
    }
    Ok(fr)
}

pub fn parse_track(text: &str) -> Result<TrackFile, PipelineError> {
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| PipelineError::Schema("empty track file".into()))?;
    let mut toks = head.split_whitespace();
    let version = toks.next().unwrap_or("");
    if version != TRACK_VERSION {
        return Err(PipelineError::Version {
            found: version.to_string(),
            expected: TRACK_VERSION.to_string(),
        });
    }
    let rest = toks.collect::<Vec<_>>().join(" ");
    let kv = key_values(&rest).map_err(|m| PipelineError::Parse { line: 1, message: m })?;
    let schema = |m: String| PipelineError::Schema(m);
    let fps = parse_f64(kv.get("fps").ok_or_else(|| schema("header lacks fps".into()))?).map_err(schema)?;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(schema(format!("fps must be positive, got {fps}")));
    }
    let dim = |k: &str| -> Result<u32, PipelineError> {
        kv.get(k)
            .ok_or_else(|| schema(format!("header lacks {k}")))?
            .parse::<u32>()
            .map_err(|_| schema(format!("bad {k}")))
    };
    let header = TrackHeader {
        fps,
        width: dim("w")?,
        height: dim("h")?,
        id: kv.get("id").map_or(Ok(0), |s| s.parse::<u64>()).map_err(|_| schema("bad id".into()))?,
        noise_px: kv.get("noise").map(|s| parse_f64(s)).transpose().map_err(schema)?,
        seed: kv.get("seed").map(|s| s.parse::<u64>()).transpose().map_err(|_| schema("bad seed".into()))?,
    };
    let mut frames: Vec<Frame2D> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fr = parse_frame(line).map_err(|m| PipelineError::Parse { line: i + 1, message: m })?;
        if let Some(prev) = frames.last() {
            if fr.frame_index <= prev.frame_index {
                return Err(PipelineError::Parse {
                    line: i + 1,
                    message: format!("frame index {} not increasing", fr.frame_index),
                });
            }
        }
        frames.push(fr);
    }
    Ok(TrackFile { header, frames })
}

pub fn load_track(path: &Path) -> Result<TrackFile, PipelineError> {
    parse_track(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
}

pub fn write_track(track: &TrackFile, path: &Path) -> Result<(), PipelineError> {
    std::fs::write(path, format_track(track)).map_err(|e| io_err(path, e))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-coordinate median of the table detections over `frames`.
pub fn median_table(frames: &[Frame2D]) -> Option<([ImagePoint; 6], f64)> {
    let kps: Vec<&[ImagePoint; 6]> = frames.iter().filter_map(|f| f.table_keypoints.as_ref()).collect();
    let bases: Vec<f64> = frames.iter().filter_map(|f| f.base_height_px).collect();
    if kps.is_empty() || bases.is_empty() {
        return None;
    }
    let mut out = [ImagePoint::default(); 6];
    for (i, o) in out.iter_mut().enumerate() {
        o.u = median(kps.iter().map(|k| k[i].u).collect());
        o.v = median(kps.iter().map(|k| k[i].v).collect());
    }
    Some((out, median(bases)))
}

/// A reconstructed point with the camera it was reconstructed with.
#[derive(Debug, Clone, PartialEq)]
pub struct PointReconstruction {
    pub point: Point,
    pub camera: Camera,
    pub calibration_rms: f64,
    /// Largest per-hit-pair mean squared parabola residual (px^2).
    pub max_split_mse: f64,
}

fn check_complete(frames: &[Frame2D]) -> Result<(), PipelineError> {
    for f in frames {
        let missing = |entity| PipelineError::MissingEntity { frame: f.frame_index, entity };
        if f.ball_px.is_none() {
            return Err(missing("ball"));
        }
        if f.table_keypoints.is_none() || f.base_height_px.is_none() {
            return Err(missing("table"));
        }
        if f.player_joints_cam.iter().any(Option::is_none) || f.player_ankles_px.iter().any(Option::is_none) {
            return Err(missing("player"));
        }
    }
    Ok(())
}

/// Racket hand at a hit: whichever wrist images closest to the racket
/// centroid, falling back to the right wrist without a racket detection.
fn racket_hand(camera: &Camera, world: &[Vec3], racket: Option<ImagePoint>) -> Vec3 {
    let wrists = [world[joints::LEFT_WRIST], world[joints::RIGHT_WRIST]];
    let Some(r) = racket else { return wrists[1] };
    let d = |p: &Vec3| camera.project(p).map_or(f64::INFINITY, |q| q.dist(&r));
    if d(&wrists[0]) < d(&wrists[1]) {
        wrists[0]
    } else {
        wrists[1]
    }
}

/// Reconstructs the frames of `track` in `range` as one point: calibration
/// on the median table detections, hit detection, player placement and
/// ball trajectory fitting.
pub fn reconstruct_point(
    track: &TrackFile,
    range: std::ops::RangeInclusive<usize>,
    table: &TableGeometry,
    params: &ReconParams,
) -> Result<PointReconstruction, PipelineError> {
    let frames: Vec<Frame2D> = track
        .frames
        .iter()
        .filter(|f| range.contains(&f.frame_index))
        .cloned()
        .collect();
    if frames.is_empty() {
        return Err(PipelineError::EmptyRange);
    }
    check_complete(&frames)?;
    let fps = track.header.fps;
    let (kp, base) = median_table(&frames).ok_or(PipelineError::EmptyRange)?;
    let cal = calibrate_from_keypoints(table, &kp, base)?;
    let camera = cal.camera;
    let ball = BallTrack2D::new(frames.iter().filter_map(|f| Some((f.frame_index, f.ball_px?))).collect())?;
    let rackets: Vec<(usize, [Option<ImagePoint>; 2])> = frames.iter().map(|f| (f.frame_index, f.racket_centroids)).collect();
    let mut hits = detect_hits(&ball, &rackets, &params.detection);
    if hits.len() < 2 {
        return Err(BallError::NotEnoughHits(hits.len()).into());
    }
    let first = frames[0].frame_index;
    let world: Vec<[Vec<Vec3>; 2]> = frames
        .iter()
        .map(|f| -> Result<[Vec<Vec3>; 2], PipelineError> {
            let place = |p: usize| -> Result<Vec<Vec3>, PipelineError> {
                let ankles = f.player_ankles_px[p].as_ref().expect("checked complete");
                let j = f.player_joints_cam[p].as_ref().expect("checked complete");
                Ok(position_player(&camera, ankles, j)?)
            };
            Ok([place(0)?, place(1)?])
        })
        .collect::<Result<_, _>>()?;
    let at = |frame: usize| frame - first;
    for h in hits.iter_mut() {
        let fr = &frames[at(h.frame)];
        h.hand_world = Some(racket_hand(&camera, &world[at(h.frame)][h.player.index()], fr.racket_centroids[h.player.index()]));
    }
    let hand_at = |f: usize, p: Player| -> Option<Vec3> {
        let i = f.checked_sub(first).filter(|&i| i < frames.len())?;
        Some(racket_hand(&camera, &world[i][p.index()], frames[i].racket_centroids[p.index()]))
    };
    let hits = refine_hits(&ball, &hits, hand_at, &camera, table, fps, params);
    let traj = reconstruct_trajectory(&ball, &hits, &camera, table, fps, params)?;
    let (h_first, h_last) = (hits[0].frame, hits[hits.len() - 1].frame);
    let frames3d: Vec<Frame3D> = (h_first..=h_last)
        .filter(|f| range.contains(f) && *f >= first && at(*f) < frames.len() && frames[at(*f)].frame_index == *f)
        .map(|f| Frame3D {
            frame_index: f,
            ball: traj.position(f).expect("frame between first and last hit"),
            joints: world[at(f)].clone(),
        })
        .collect();
    if frames3d.len() != h_last - h_first + 1 {
        return Err(PipelineError::Schema("track frames are not contiguous between hits".into()));
    }
    let pieces = traj
        .segments()
        .map(|s| BallPiece {
            start_frame: s.start_frame,
            end_frame: s.end_frame,
            k: s.segment.k,
            mse: s.drag.mse(),
        })
        .collect();
    let max_split_mse = traj.pairs.iter().map(|p| p.split_mse).fold(0.0, f64::max);
    Ok(PointReconstruction {
        point: Point {
            id: track.header.id,
            fps,
            frames: frames3d,
            hits,
            bounces: traj.bounces(),
            pieces,
        },
        camera,
        calibration_rms: cal.rms,
        max_split_mse,
    })
}

/// Reconstructs every frame of a track as one point.
pub fn reconstruct_track(track: &TrackFile, table: &TableGeometry, params: &ReconParams) -> Result<PointReconstruction, PipelineError> {
    let lo = track.frames.first().map_or(0, |f| f.frame_index);
    let hi = track.frames.last().map_or(0, |f| f.frame_index);
    reconstruct_point(track, lo..=hi, table, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    /// Some frame lacks the ball, the table or a player.
    MissingEntity,
    /// Parabola fit error above the threshold.
    FitError,
    /// Calibration failed or was degenerate.
    Calibration,
    /// Too few hits or no admissible bounce.
    Events,
    /// Any other failure.
    Other,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            RejectReason::MissingEntity => "missing_entity",
            RejectReason::FitError => "fit_error",
            RejectReason::Calibration => "calibration",
            RejectReason::Events => "events",
            RejectReason::Other => "other",
        }
    }

    pub fn classify(e: &PipelineError) -> Self {
        match e {
            PipelineError::MissingEntity { .. } => RejectReason::MissingEntity,
            PipelineError::Ball(BallError::SegmentRejected { .. }) => RejectReason::FitError,
            PipelineError::Ball(BallError::NoBounceFound(..) | BallError::NotEnoughHits(_)) => RejectReason::Events,
            PipelineError::Camera(_) | PipelineError::Ball(BallError::Camera(_)) => RejectReason::Calibration,
            _ => RejectReason::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterPolicy {
    /// Largest accepted per-hit-pair mean squared parabola residual (px^2).
    pub mse_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RejectionReport {
    pub total: usize,
    pub kept: usize,
    pub counts: BTreeMap<RejectReason, usize>,
}

impl RejectionReport {
    pub fn rejected(&self) -> usize {
        self.total - self.kept
    }

    pub fn rejection_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.rejected() as f64 / self.total as f64
        }
    }
}

/// Keeps successful reconstructions under the fit threshold; counts the
/// rest by reason. Kept points are passed through untouched.
pub fn filter_points(
    attempts: Vec<Result<PointReconstruction, PipelineError>>,
    policy: &FilterPolicy,
) -> (Vec<PointReconstruction>, RejectionReport) {
    let mut report = RejectionReport { total: attempts.len(), ..Default::default() };
    let mut kept = Vec::new();
    for a in attempts {
        let reason = match &a {
            Ok(r) if r.max_split_mse <= policy.mse_threshold => None,
            Ok(_) => Some(RejectReason::FitError),
            Err(e) => Some(RejectReason::classify(e)),
        };
        match reason {
            None => kept.push(a.expect("accepted")),
            Some(r) => *report.counts.entry(r).or_default() += 1,
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// Reconstructs many tracks; results keep input order.
pub fn reconstruct_all(
    tracks: &[TrackFile],
    table: &TableGeometry,
    params: &ReconParams,
) -> Vec<Result<PointReconstruction, PipelineError>> {
    par::map(tracks, |t| reconstruct_track(t, table, params))
}

/// Blanks one entity on one frame of exactly `round(rate * n)` tracks,
/// chosen by `seed`. Returns the indices of corrupted tracks.
pub fn inject_corruption(tracks: &mut [TrackFile], rate: f64, seed: u64) -> Vec<usize> {
    let mut rng = rng::tagged(seed, domain::CORRUPT, 0);
    let n = ((rate.clamp(0.0, 1.0) * tracks.len() as f64).round() as usize).min(tracks.len());
    let mut idx: Vec<usize> = (0..tracks.len()).collect();
    idx.shuffle(&mut rng);
    let mut chosen: Vec<usize> = idx[..n].to_vec();
    chosen.sort_unstable();
    for &i in &chosen {
        let t = &mut tracks[i];
        if t.frames.is_empty() {
            continue;
        }
        let f = rng.random_range(0..t.frames.len());
        let fr = &mut t.frames[f];
        match rng.random_range(0..3) {
            0 => fr.ball_px = None,
            1 => fr.table_keypoints = None,
            _ => {
                let p = rng.random_range(0..2);
                fr.player_joints_cam[p] = None;
            }
        }
    }
    chosen
}

/// One stored point plus what it was reconstructed with.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPoint {
    pub point: Point,
    pub camera: Option<Camera>,
    pub calibration_rms: Option<f64>,
    /// False when the point's final segment is known to be missing.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionFile {
    pub table: TableGeometry,
    /// Free-form `key=value` provenance (seed, noise, ...).
    pub meta: BTreeMap<String, String>,
    pub points: Vec<StoredPoint>,
}

fn fmt_joints(out: &mut String, j: &[Vec3]) {
    fmt_list(out, j, fmt_vec);
}

pub fn format_reconstruction(file: &ReconstructionFile) -> String {
    let mut out = String::new();
    out.push_str(RECON_VERSION);
    for (k, v) in &file.meta {
        let _ = write!(out, " {k}={v}");
    }
    out.push('\n');
    let t = &file.table;
    let _ = writeln!(out, "table length={} width={} height={}", t.length, t.width, t.height);
    for sp in &file.points {
        let p = &sp.point;
        let _ = writeln!(
            out,
            "point id={} fps={} complete={} frames={}",
            p.id,
            p.fps,
            u8::from(sp.complete),
            p.frames.len()
        );
        if let Some(c) = &sp.camera {
            let k = &c.intrinsics;
            let r = c.extrinsics.rotation.matrix();
            let _ = write!(out, "camera fx={} fy={} cx={} cy={} r=", k.fx, k.fy, k.cx, k.cy);
            for i in 0..3 {
                for j in 0..3 {
                    let sep = if i + j == 0 { "" } else { "," };
                    let _ = write!(out, "{sep}{}", r[(i, j)]);
                }
            }
            out.push_str(" t=");
            fmt_vec(&mut out, &c.extrinsics.translation);
            if let Some(rms) = sp.calibration_rms {
                let _ = write!(out, " rms={rms}");
            }
            out.push('\n');
        }
        out.push_str("hits");
        for h in &p.hits {
            let _ = write!(out, " {}:{}:", h.frame, h.player.index());
            opt(&mut out, h.hand_world.as_ref(), fmt_vec);
        }
        out.push_str("\nbounces");
        for b in &p.bounces {
            let _ = write!(out, " {}:", b.frame);
            fmt_vec(&mut out, &b.position);
        }
        out.push_str("\npieces");
        for s in &p.pieces {
            let _ = write!(out, " {}:{}:{}:{}", s.start_frame, s.end_frame, s.k, s.mse);
        }
        out.push('\n');
        for f in &p.frames {
            let _ = write!(out, "f {} ", f.frame_index);
            fmt_vec(&mut out, &f.ball);
            for j in &f.joints {
                out.push(' ');
                fmt_joints(&mut out, j);
            }
            out.push('\n');
        }
        out.push_str("end\n");
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<&'a str> {
        for (i, l) in self.inner.by_ref() {
            self.line = i + 1;
            if !l.trim().is_empty() {
                return Some(l);
            }
        }
        None
    }

    fn err(&self, m: impl Into<String>) -> PipelineError {
        PipelineError::Parse { line: self.line, message: m.into() }
    }

    fn expect(&mut self, tag: &str) -> Result<&'a str, PipelineError> {
        let l = self.next().ok_or_else(|| self.err(format!("unexpected end of file, expected {tag:?}")))?;
        match l.strip_prefix(tag) {
            Some(rest) if rest.is_empty() || rest.starts_with(' ') => Ok(rest.trim_start()),
            _ => Err(self.err(format!("expected {tag:?}"))),
        }
    }
}

fn parse_point_block(ls: &mut Lines<'_>, head: &str) -> Result<StoredPoint, PipelineError> {
    let kv = key_values(head).map_err(|m| ls.err(m))?;
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| ls.err(format!("missing {k:?}")));
    let id = get("id")?.parse::<u64>().map_err(|_| ls.err("bad id"))?;
    let fps = parse_f64(get("fps")?).map_err(|m| ls.err(m))?;
    let complete = get("complete")? == "1";
    let n_frames = get("frames")?.parse::<usize>().map_err(|_| ls.err("bad frame count"))?;
    let mut line = ls.next().ok_or_else(|| ls.err("unexpected end of file"))?;
    let (mut camera, mut calibration_rms) = (None, None);
    if let Some(rest) = line.strip_prefix("camera ") {
        let kv = key_values(rest).map_err(|m| ls.err(m))?;
        let num = |k: &str| -> Result<f64, PipelineError> {
            parse_f64(kv.get(k).ok_or_else(|| ls.err(format!("missing {k:?}")))?).map_err(|m| ls.err(m))
        };
        let r: Vec<f64> = kv
            .get("r")
            .ok_or_else(|| ls.err("missing rotation"))?
            .split(',')
            .map(parse_f64)
            .collect::<Result<_, _>>()
            .map_err(|m| ls.err(m))?;
        if r.len() != 9 {
            return Err(ls.err("rotation needs 9 entries"));
        }
        let t = parse_vec(kv.get("t").ok_or_else(|| ls.err("missing translation"))?).map_err(|m| ls.err(m))?;
        camera = Some(Camera {
            intrinsics: Intrinsics { fx: num("fx")?, fy: num("fy")?, cx: num("cx")?, cy: num("cy")? },
            extrinsics: Extrinsics {
                rotation: Rotation3::from_matrix_unchecked(Matrix3::from_row_slice(&r)),
                translation: t,
            },
        });
        calibration_rms = kv.get("rms").map(|s| parse_f64(s)).transpose().map_err(|m| ls.err(m))?;
        line = ls.next().ok_or_else(|| ls.err("unexpected end of file"))?;
    }
    let hits_s = line.strip_prefix("hits").ok_or_else(|| ls.err("expected \"hits\""))?;
    let mut hits = Vec::new();
    for tok in hits_s.split_whitespace() {
        let parts: Vec<&str> = tok.splitn(3, ':').collect();
        if parts.len() != 3 {
            return Err(ls.err(format!("bad hit {tok:?}")));
        }
        let frame = parts[0].parse::<usize>().map_err(|_| ls.err("bad hit frame"))?;
        let player = match parts[1] {
            "0" => Player::Near,
            "1" => Player::Far,
            _ => return Err(ls.err("bad hit player")),
        };
        let hand_world = parse_opt(parts[2], parse_vec).map_err(|m| ls.err(m))?;
        hits.push(HitEvent { frame, player, hand_world });
    }
    let mut bounces = Vec::new();
    for tok in ls.expect("bounces")?.split_whitespace() {
        let (f, p) = tok.split_once(':').ok_or_else(|| ls.err(format!("bad bounce {tok:?}")))?;
        bounces.push(BounceEvent {
            frame: f.parse().map_err(|_| ls.err("bad bounce frame"))?,
            position: parse_vec(p).map_err(|m| ls.err(m))?,
        });
    }
    let mut pieces = Vec::new();
    for tok in ls.expect("pieces")?.split_whitespace() {
        let parts: Vec<&str> = tok.split(':').collect();
        if parts.len() != 4 {
            return Err(ls.err(format!("bad piece {tok:?}")));
        }
        pieces.push(BallPiece {
            start_frame: parts[0].parse().map_err(|_| ls.err("bad piece start"))?,
            end_frame: parts[1].parse().map_err(|_| ls.err("bad piece end"))?,
            k: parse_f64(parts[2]).map_err(|m| ls.err(m))?,
            mse: parse_f64(parts[3]).map_err(|m| ls.err(m))?,
        });
    }
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let rest = ls.expect("f")?;
        let toks: Vec<&str> = rest.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(ls.err("frame record needs index, ball and two skeletons"));
        }
        let joints_of = |s: &str| -> Result<Vec<Vec3>, PipelineError> {
            s.split(';').map(parse_vec).collect::<Result<_, _>>().map_err(|m| ls.err(m))
        };
        frames.push(Frame3D {
            frame_index: toks[0].parse().map_err(|_| ls.err("bad frame index"))?,
            ball: parse_vec(toks[1]).map_err(|m| ls.err(m))?,
            joints: [joints_of(toks[2])?, joints_of(toks[3])?],
        });
    }
    ls.expect("end")?;
    Ok(StoredPoint {
        point: Point { id, fps, frames, hits, bounces, pieces },
        camera,
        calibration_rms,
        complete,
    })
}

pub fn parse_reconstruction(text: &str) -> Result<ReconstructionFile, PipelineError> {
    let mut ls = Lines { inner: text.lines().enumerate(), line: 0 };
    let head = ls.next().ok_or_else(|| PipelineError::Schema("empty reconstruction file".into()))?;
    let rest = head.strip_prefix(RECON_VERSION).filter(|r| r.is_empty() || r.starts_with(' '));
    let Some(rest) = rest else {
        return Err(PipelineError::Version {
            found: head.split_whitespace().take(2).collect::<Vec<_>>().join(" "),
            expected: RECON_VERSION.to_string(),
        });
    };
    let meta = key_values(rest)
        .map_err(|m| ls.err(m))?
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let tkv = key_values(ls.expect("table")?).map_err(|m| ls.err(m))?;
    let dim = |k: &str| -> Result<f64, PipelineError> {
        parse_f64(tkv.get(k).ok_or_else(|| ls.err(format!("missing {k:?}")))?).map_err(|m| ls.err(m))
    };
    let table = TableGeometry::new(dim("length")?, dim("width")?, dim("height")?)?;
    let mut points = Vec::new();
    while let Some(line) = ls.next() {
        let head = line.strip_prefix("point ").ok_or_else(|| ls.err("expected \"point\""))?;
        points.push(parse_point_block(&mut ls, head)?);
    }
    Ok(ReconstructionFile { table, meta, points })
}

pub fn write_reconstruction(file: &ReconstructionFile, path: &Path) -> Result<(), PipelineError> {
    std::fs::write(path, format_reconstruction(file)).map_err(|e| io_err(path, e))
}

pub fn read_reconstruction(path: &Path) -> Result<ReconstructionFile, PipelineError> {
    parse_reconstruction(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_track() -> TrackFile {
        let mut f0 = Frame2D::empty(0);
        f0.ball_px = Some(ImagePoint::new(1.5, 2.25));
        f0.table_keypoints = Some([ImagePoint::new(0.1, 0.2); 6]);
        f0.base_height_px = Some(300.0);
        f0.racket_centroids = [Some(ImagePoint::new(3.0, 4.0)), None];
        f0.player_joints_cam = [Some(vec![Vec3::new(0.1, 0.2, 5.0); joints::COUNT]), None];
        f0.player_ankles_px = [Some([ImagePoint::new(1.0, 2.0), ImagePoint::new(3.0, 4.0)]), None];
        let f1 = Frame2D::empty(1);
        TrackFile {
            header: TrackHeader { fps: 30.0, width: 640, height: 360, id: 7, noise_px: Some(0.5), seed: Some(3) },
            frames: vec![f0, f1],
        }
    }

    #[test]
    fn track_round_trip() {
        let t = sample_track();
        let parsed = parse_track(&format_track(&t)).unwrap();
        assert_eq!(parsed, t);
        assert_eq!(parsed.completeness(), vec![false, false]);
        assert!(parsed.frames[1].ball_px.is_none());
    }

    #[test]
    fn track_errors() {
        let text = format_track(&sample_track());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace("ball=-", "ball=abc");
        assert!(matches!(parse_track(&lines.join("\n")), Err(PipelineError::Parse { line: 3, .. })));
        let no_fps = text.replacen("fps=30 ", "", 1);
        assert!(matches!(parse_track(&no_fps), Err(PipelineError::Schema(_))));
        let v2 = text.replacen("v1", "v2", 1);
        assert!(matches!(parse_track(&v2), Err(PipelineError::Version { .. })));
    }

    #[test]
    fn filter_counts_reasons() {
        let err = |e: PipelineError| Err(e);
        let (kept, report) = filter_points(
            vec![
                err(PipelineError::MissingEntity { frame: 3, entity: "player" }),
                err(PipelineError::Ball(BallError::NoBounceFound(1, 2))),
                err(PipelineError::MissingEntity { frame: 9, entity: "ball" }),
            ],
            &FilterPolicy { mse_threshold: 1.0 },
        );
        assert!(kept.is_empty());
        assert_eq!(report.total, 3);
        assert_eq!(report.counts[&RejectReason::MissingEntity], 2);
        assert_eq!(report.counts[&RejectReason::Events], 1);
    }

    #[test]
    fn recon_version_mismatch() {
        let text = "ttrally-recon v9\ntable length=2.74 width=1.525 height=0.76\n";
        assert!(matches!(parse_reconstruction(text), Err(PipelineError::Version { .. })));
    }
}
