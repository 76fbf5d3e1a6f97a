//! Anticipatory pre-positioning for a blocking robot: reachable-set target
//! selection, contact models, the blocking pose solver, and the
//! three-strategy return-rate experiment.
//!
//! Everything runs in the canonical exchange frame of
//! [`crate::anticipate`]: the robot is the ego at `x < 0` and blocks on the
//! plane `x = -L/2`.

use crate::anticipate::{
    calibration_residuals, exchange_samples, forecast_regions, physics_baseline_ensemble, ConfidenceRegion,
    ConformalCalibration, ExchangeSample, PhysicsParams, Predictor,
};
use crate::ball::{Flight, GRAVITY};
use crate::model::{Player, Point, TableGeometry, Vec3};
use crate::optimize::nelder_mead;
use crate::par;
use nalgebra::UnitQuaternion;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Racket face normal in the racket's own frame.
pub const REFERENCE_NORMAL: Vec3 = Vec3::new(1.0, 0.0, 0.0);
/// Sanity cap on ball speed (m/s).
pub const MAX_BALL_SPEED: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("no horizon has its confidence region inside the reachable set")]
    NoFeasibleTime,
    #[error("ball is not moving into the racket face (v.n = {0})")]
    NoContact(f64),
    #[error("recording has no segment after this bounce")]
    EndOfRecording,
    #[error("table bounce needs a descending ball (v_z = {0})")]
    NotDescending(f64),
    #[error("no racket orientation sends the ball to the table")]
    Infeasible,
    #[error("invalid ball state: {0}")]
    InvalidState(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("anticipatory strategy needs a calibrated predictor")]
    MissingCalibration,
    #[error("episode has no incoming trajectory: {0}")]
    NoTrajectory(String),
    #[error("line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Anticipate(#[from] crate::anticipate::AnticipateError),
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeBox {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl SafeBox {
    pub fn new(lo: Vec3, hi: Vec3) -> Result<Self, ControlError> {
        if (0..3).any(|a| !(lo[a] <= hi[a])) {
            return Err(ControlError::InvalidParameter(format!("box {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// Volume the robot may sweep in front of the near table end.
    pub fn default_for(table: &TableGeometry) -> Self {
        let hl = table.half_length();
        Self {
            lo: Vec3::new(-hl - 1.0, -1.4, 0.3),
            hi: Vec3::new(-hl + 0.47, 1.4, 2.0),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::from_fn(|a, _| p[a].clamp(self.lo[a], self.hi[a]))
    }
}

/// Closed ball of radius `v_max·t` around `p0`, intersected with `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachableSetModel {
    pub p0: Vec3,
    pub v_max: f64,
    pub b: SafeBox,
}

impl ReachableSetModel {
    pub fn new(p0: Vec3, v_max: f64, b: SafeBox) -> Result<Self, ControlError> {
        if !(v_max > 0.0) {
            return Err(ControlError::InvalidParameter(format!("v_max {v_max}")));
        }
        if !b.contains(&p0) {
            return Err(ControlError::InvalidParameter(format!("p0 {p0:?} outside the safe box")));
        }
        Ok(Self { p0, v_max, b })
    }
}

/// Whether the whole region lies in the reachable set after `t` seconds.
pub fn reachable_contains(model: &ReachableSetModel, region: &ConfidenceRegion, t: f64) -> bool {
    if !region.is_bounded() || t < 0.0 {
        return false;
    }
    let inside_box = (0..3).all(|a| model.b.lo[a] <= region.lo[a] && region.hi[a] <= model.b.hi[a]);
    let far = Vec3::from_fn(|a, _| (region.lo[a] - model.p0[a]).abs().max((region.hi[a] - model.p0[a]).abs()));
    inside_box && far.norm() <= model.v_max * t
}

/// Index of the earliest region (horizons ascending) that fits in the set
/// reachable between the end of the context and its horizon. `lead` is the
/// number of frames from the end of the context to the hit.
pub fn select_target_time(
    model: &ReachableSetModel,
    regions: &[ConfidenceRegion],
    lead: usize,
    fps: f64,
) -> Result<usize, ControlError> {
    regions
        .iter()
        .position(|r| reachable_contains(model, r, (r.horizon + lead) as f64 / fps))
        .ok_or(ControlError::NoFeasibleTime)
}

/// Part of a region on the blocking plane `x = plane`, or `None` when the
/// region's `x` interval misses the plane.
pub fn plane_slice(region: &ConfidenceRegion, plane: f64) -> Option<ConfidenceRegion> {
    if !(region.lo.x <= plane && plane <= region.hi.x) {
        return None;
    }
    let mut r = *region;
    r.lo.x = plane;
    r.hi.x = plane;
    Some(r)
}

/// Blend of the fixed position `c` and the region centroid, projected into
/// the region.
pub fn select_preposition(region: &ConfidenceRegion, c: &Vec3, lambda: f64) -> Vec3 {
    let p = lambda * c + (1.0 - lambda) * region.centroid();
    Vec3::from_fn(|a, _| p[a].clamp(region.lo[a], region.hi[a]))
}

/// Racket position and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RacketPose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl RacketPose {
    /// Pose whose face normal is `normal`, reached by the shortest rotation
    /// from the reference normal.
    pub fn facing(position: Vec3, normal: &Vec3) -> Self {
        let n = normal.normalize();
        let orientation = UnitQuaternion::rotation_between(&REFERENCE_NORMAL, &n)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::z_axis(), std::f64::consts::PI));
        Self { position, orientation }
    }

    pub fn normal(&self) -> Vec3 {
        self.orientation * REFERENCE_NORMAL
    }

    /// Position distance and geodesic orientation angle (degrees).
    pub fn error_to(&self, other: &RacketPose) -> (f64, f64) {
        (
            (self.position - other.position).norm(),
            self.orientation.angle_to(&other.orientation).to_degrees(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallState {
    pub position: Vec3,
    pub velocity: Vec3,
}

impl BallState {
    pub fn new(position: Vec3, velocity: Vec3) -> Result<Self, ControlError> {
        if !position.iter().chain(velocity.iter()).all(|v| v.is_finite()) {
            return Err(ControlError::InvalidState("non-finite component".into()));
        }
        if velocity.norm() > MAX_BALL_SPEED {
            return Err(ControlError::InvalidState(format!("speed {:.1} m/s", velocity.norm())));
        }
        Ok(Self { position, velocity })
    }
}

/// Lossless reflection off a static racket with unit normal `n`.
pub fn racket_reflect(v_before: &Vec3, n: &Vec3) -> Result<Vec3, ControlError> {
    let d = v_before.dot(n);
    if d >= 0.0 {
        return Err(ControlError::NoContact(d));
    }
    Ok(v_before - 2.0 * d * n)
}

/// Table contact rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BounceMode {
    /// Continue with the velocity fitted for the next recorded piece.
    Replay { next_velocity: Option<Vec3> },
    /// Coefficients of restitution, vertical and horizontal.
    Synthetic { e_z: f64, e_h: f64 },
}

pub fn table_bounce(state: &BallState, mode: BounceMode) -> Result<BallState, ControlError> {
    let v = state.velocity;
    if v.z >= 0.0 {
        return Err(ControlError::NotDescending(v.z));
    }
    let velocity = match mode {
        BounceMode::Replay { next_velocity } => next_velocity.ok_or(ControlError::EndOfRecording)?,
        BounceMode::Synthetic { e_z, e_h } => Vec3::new(e_h * v.x, e_h * v.y, -e_z * v.z),
    };
    BallState::new(state.position, velocity)
}

/// Drag-free landing of a ball leaving `b_hit` with velocity `v`: the point
/// where it comes down to height `z_table`, and the fall time.
pub fn ballistic_landing(b_hit: &Vec3, v: &Vec3, z_table: f64) -> Option<(Vec3, f64)> {
    let disc = v.z * v.z + 2.0 * GRAVITY * (b_hit.z - z_table);
    if disc < 0.0 {
        return None;
    }
    let t = (v.z + disc.sqrt()) / GRAVITY;
    if !(t > 0.0) {
        return None;
    }
    Some((Vec3::new(b_hit.x + v.x * t, b_hit.y + v.y * t, z_table), t))
}

/// Blocking pose and the landing error it predicts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPose {
    pub pose: RacketPose,
    /// Predicted landing distance from the target (m).
    pub deviation: f64,
    pub landing: Vec3,
}

/// Racket normal limits: yaw and pitch away from facing the opponent.
const MAX_TILT: f64 = 70.0 * std::f64::consts::PI / 180.0;
const GRID: usize = 32;

fn normal_from_angles(yaw: f64, pitch: f64) -> Vec3 {
    Vec3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin())
}

/// Racket orientation at `b_hit` that reflects a ball arriving with
/// `v_before` so its drag-free landing is nearest `b_target`. Normals are
/// searched within 70 degrees of yaw and pitch of facing the opponent: a
/// 32 by 32 grid, then Nelder-Mead from the three best cells.
pub fn solve_target_pose(
    v_before: &Vec3,
    b_hit: &Vec3,
    b_target: &Vec3,
    z_table: f64,
) -> Result<TargetPose, ControlError> {
    let landing = |yaw: f64, pitch: f64| -> Option<Vec3> {
        let n = normal_from_angles(yaw, pitch);
        let v = racket_reflect(v_before, &n).ok()?;
        ballistic_landing(b_hit, &v, z_table).map(|l| l.0)
    };
    let cost = |yaw: f64, pitch: f64| -> f64 {
        match landing(yaw, pitch) {
            Some(p) => (b_target.xy() - p.xy()).norm_squared(),
            None => f64::INFINITY,
        }
    };
    let step = 2.0 * MAX_TILT / (GRID - 1) as f64;
    let mut cells: Vec<(f64, f64, f64)> = Vec::with_capacity(GRID * GRID);
    for i in 0..GRID {
        for j in 0..GRID {
            let (yaw, pitch) = (-MAX_TILT + step * i as f64, -MAX_TILT + step * j as f64);
            let c = cost(yaw, pitch);
            if c.is_finite() {
                cells.push((c, yaw, pitch));
            }
        }
    }
    if cells.is_empty() {
        return Err(ControlError::Infeasible);
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let bounded = |p: &[f64]| -> f64 {
        if p[0].abs() > MAX_TILT || p[1].abs() > MAX_TILT {
            return f64::INFINITY;
        }
        cost(p[0], p[1])
    };
    let mut best = (cells[0].0, cells[0].1, cells[0].2);
    for &(_, yaw, pitch) in cells.iter().take(3) {
        let r = nelder_mead(bounded, &[yaw, pitch], &[step / 2.0, step / 2.0], 400, 1e-14);
        if r.f < best.0 {
            best = (r.f, r.x[0], r.x[1]);
        }
    }
    let n = normal_from_angles(best.1, best.2);
    let landing = landing(best.1, best.2).expect("finite cost implies a landing");
    Ok(TargetPose {
        pose: RacketPose::facing(*b_hit, &n),
        deviation: best.0.sqrt(),
        landing,
    })
}

/// One kinematic step towards `target`: translation capped at `v_max·dt`
/// and kept inside `b`, rotation capped at `omega_max·dt` (rad) along the
/// shortest arc.
pub fn step_robot(pose: &RacketPose, target: &RacketPose, dt: f64, v_max: f64, omega_max: f64, b: &SafeBox) -> RacketPose {
    let d = target.position - pose.position;
    let dist = d.norm();
    let reach = v_max * dt;
    let moved = if dist <= reach { target.position } else { pose.position + d * (reach / dist) };
    let angle = pose.orientation.angle_to(&target.orientation);
    let turn = omega_max * dt;
    let orientation = if angle <= turn {
        target.orientation
    } else {
        pose.orientation
            .try_slerp(&target.orientation, turn / angle, 1e-12)
            .unwrap_or(target.orientation)
    };
    RacketPose {
        position: b.clamp(&moved),
        orientation,
    }
}

/// Ball after the opponent's hit, replayed along the recorded pieces and
/// extended by free flight once the recording ends. Time zero is the hit.
#[derive(Debug, Clone, PartialEq)]
pub struct IncomingBall {
    /// Start time of each piece and its flight from that time.
    pieces: Vec<(f64, Flight)>,
}

impl IncomingBall {
    /// Canonical incoming ball for the opponent hit of `sample`.
    pub fn from_point(point: &Point, sample: &ExchangeSample) -> Result<Self, ControlError> {
        let hit = sample.context.hit_frame as f64;
        let turn = |p: Vec3| match sample.ego {
            Player::Near => p,
            Player::Far => Vec3::new(-p.x, -p.y, p.z),
        };
        let mut pieces = Vec::new();
        for (i, piece) in point.pieces.iter().enumerate() {
            if (piece.end_frame as f64) <= hit {
                continue;
            }
            let seg = point
                .flight(i)
                .ok_or_else(|| ControlError::NoTrajectory(format!("piece {i} of point {}", point.id)))?;
            let t0 = (piece.start_frame as f64 - hit) / point.fps;
            // Re-express the boundary-value piece as a flight from its start.
            let flight = Flight::new(turn(seg.b0), turn(seg.velocity(0.0)), seg.k);
            pieces.push((t0, flight));
        }
        if pieces.is_empty() {
            return Err(ControlError::NoTrajectory(format!("point {} ends at the hit", point.id)));
        }
        Ok(Self { pieces })
    }

    pub fn from_flights(pieces: Vec<(f64, Flight)>) -> Self {
        Self { pieces }
    }

    pub fn state(&self, t: f64) -> (Vec3, Vec3) {
        let i = self.pieces.partition_point(|p| p.0 <= t).max(1) - 1;
        let (t0, f) = &self.pieces[i];
        (f.position(t - t0), f.velocity(t - t0))
    }

    pub fn drag(&self) -> f64 {
        self.pieces[0].1.k
    }

    /// First time after the hit at which the ball reaches `x <= plane`.
    pub fn crossing(&self, plane: f64, t_max: f64) -> Option<f64> {
        let dt = 1.0 / 240.0;
        let mut t = 0.0;
        while t < t_max {
            let t1 = t + dt;
            if self.state(t1).0.x <= plane {
                let (mut a, mut b) = (t, t1);
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if self.state(m).0.x <= plane {
                        b = m;
                    } else {
                        a = m;
                    }
                }
                return Some(b);
            }
            t = t1;
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    Baseline,
    Anticipatory,
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Baseline, Strategy::Anticipatory, Strategy::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Anticipatory => "anticipatory",
            Strategy::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Robot and contact parameters of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlParams {
    pub v_max: f64,
    /// Orientation rate limit (deg/s).
    pub omega_max_deg: f64,
    pub dt: f64,
    pub racket_radius: f64,
    pub safe_box: SafeBox,
    pub lambda: f64,
    /// Anticipation lead before the opponent's hit (s).
    pub t_h: f64,
    pub e_z: f64,
    pub e_h: f64,
    /// Resting pose position.
    pub central: Vec3,
}

impl ControlParams {
    pub fn for_table(table: &TableGeometry) -> Self {
        Self {
            v_max: 2.0,
            omega_max_deg: 720.0,
            dt: 0.01,
            racket_radius: 0.085,
            safe_box: SafeBox::default_for(table),
            lambda: 0.1,
            t_h: 0.2,
            e_z: 0.87,
            e_h: 0.75,
            central: table_centre_pose(table),
        }
    }
}

/// Resting position facing the middle of the table on the blocking plane.
pub fn table_centre_pose(table: &TableGeometry) -> Vec3 {
    Vec3::new(-table.half_length(), 0.0, table.height + 0.3)
}

/// Centre of the opponent's half, where returns are aimed.
pub fn return_target(table: &TableGeometry) -> Vec3 {
    Vec3::new(0.5 * table.half_length(), 0.0, table.height)
}

/// Calibrated ensemble used by the anticipatory strategy.
pub struct Anticipation<'a, P: Predictor> {
    pub members: &'a [P],
    pub calib: &'a ConformalCalibration,
    /// Horizons (frames after the hit) searched for the target time.
    pub horizons: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub point_id: u64,
    pub exchange: usize,
    pub strategy: Strategy,
    pub returned: bool,
    pub contact: bool,
    /// Return landing distance from the target, when the ball landed on the
    /// table.
    pub deviation: Option<f64>,
    pub position_error: f64,
    pub orientation_error_deg: f64,
    /// Anticipation found no feasible horizon and stayed at rest.
    pub fallback: bool,
    pub lambda: f64,
    pub t_h: f64,
    pub alpha: f64,
}

/// Where a returned ball first comes down: table (`Some`) or floor.
fn return_landing(contact: &Vec3, v: &Vec3, k: f64, table: &TableGeometry) -> Option<Vec3> {
    let flight = Flight::new(*contact, *v, k);
    let height = |p: &Vec3| {
        let over = p.x.abs() <= table.half_length() && p.y.abs() <= table.half_width();
        if over && p.z >= table.height - 0.05 { p.z - table.height } else { p.z }
    };
    if height(contact) <= 0.0 {
        return None;
    }
    let t = flight.first_crossing(height, 1.0 / 480.0, 4.0)?;
    let p = flight.position(t);
    let over = p.x.abs() <= table.half_length() + 1e-9 && p.y.abs() <= table.half_width() + 1e-9;
    over.then_some(p)
}

/// Simulates one exchange from `t_h` before the opponent's hit until the
/// ball meets or passes the racket.
pub fn run_episode<P: Predictor>(
    sample: &ExchangeSample,
    incoming: &IncomingBall,
    strategy: Strategy,
    params: &ControlParams,
    anticipation: Option<&Anticipation<P>>,
    table: &TableGeometry,
) -> Result<EpisodeResult, ControlError> {
    let plane = -table.half_length();
    let t_cross = incoming
        .crossing(plane, 3.0)
        .ok_or_else(|| ControlError::NoTrajectory("ball never reaches the blocking plane".into()))?;
    let (b_hit, v_before) = incoming.state(t_cross);
    let target = return_target(table);
    let goal = match solve_target_pose(&v_before, &b_hit, &target, table.height) {
        Ok(g) => g.pose,
        Err(_) => RacketPose::facing(b_hit, &REFERENCE_NORMAL),
    };
    let rest = RacketPose::facing(params.central, &REFERENCE_NORMAL);
    let mut fallback = false;
    let before_hit = match strategy {
        Strategy::Baseline => rest,
        Strategy::Oracle => goal,
        Strategy::Anticipatory => {
            let a = anticipation.ok_or(ControlError::MissingCalibration)?;
            let ctx = &sample.context;
            // Only the crossing of the blocking plane can be intercepted.
            let regions: Vec<ConfidenceRegion> = forecast_regions(a.members, a.calib, ctx, a.horizons)?
                .iter()
                .filter_map(|r| plane_slice(r, plane))
                .collect();
            let model = ReachableSetModel::new(params.safe_box.clamp(&params.central), params.v_max, params.safe_box)?;
            match select_target_time(&model, &regions, ctx.lead, ctx.fps) {
                Ok(i) => RacketPose {
                    position: select_preposition(&regions[i], &params.central, params.lambda),
                    orientation: rest.orientation,
                },
                Err(ControlError::NoFeasibleTime) => {
                    fallback = true;
                    rest
                }
                Err(e) => return Err(e),
            }
        }
    };
    let omega = params.omega_max_deg.to_radians();
    let mut pose = RacketPose {
        position: params.safe_box.clamp(&rest.position),
        orientation: rest.orientation,
    };
    let steps_before = (params.t_h / params.dt).round() as i64;
    let mut step = -steps_before;
    let t_end = t_cross + 0.5;
    // returned, landing deviation, (position, orientation) error, contact
    type Outcome = (bool, Option<f64>, (f64, f64), bool);
    let mut outcome: Option<Outcome> = None;
    while outcome.is_none() {
        let t = step as f64 * params.dt;
        if t > t_end {
            break;
        }
        let aim = if t < 0.0 { before_hit } else { goal };
        pose = step_robot(&pose, &aim, params.dt, params.v_max, omega, &params.safe_box);
        if t < 0.0 {
            step += 1;
            continue;
        }
        let n = pose.normal();
        let t1 = t + params.dt;
        let side = |s: f64| (incoming.state(s).0 - pose.position).dot(&n);
        if side(t) > 0.0 && side(t1) <= 0.0 {
            let (mut a, mut b) = (t, t1);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if side(m) > 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            let (p, v) = incoming.state(b);
            let err = pose.error_to(&goal);
            if (p - pose.position).norm() <= params.racket_radius {
                let landing = racket_reflect(&v, &n)
                    .ok()
                    .and_then(|w| return_landing(&p, &w, incoming.drag(), table));
                let returned = landing.is_some_and(|l| l.x > 0.0);
                let deviation = landing.map(|l| (l.xy() - target.xy()).norm());
                outcome = Some((returned, deviation, err, true));
            } else {
                outcome = Some((false, None, err, false));
            }
        } else if t1 >= t_cross && incoming.state(t1).0.x < pose.position.x.min(plane) - 0.3 {
            outcome = Some((false, None, pose.error_to(&goal), false));
        }
        step += 1;
    }
    let (returned, deviation, (position_error, orientation_error_deg), contact) =
        outcome.unwrap_or((false, None, pose.error_to(&goal), false));
    Ok(EpisodeResult {
        point_id: sample.point_id,
        exchange: sample.exchange,
        strategy,
        returned,
        contact,
        deviation,
        position_error,
        orientation_error_deg,
        fallback,
        lambda: params.lambda,
        t_h: params.t_h,
        alpha: anticipation.map_or(f64::NAN, |a| a.calib.alpha),
    })
}

/// Aggregate of a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub episodes: usize,
    pub returned: usize,
    pub return_rate: f64,
    /// Mean landing distance from the target over returned balls.
    pub return_accuracy: f64,
    pub position_error: f64,
    pub orientation_error_deg: f64,
    pub fallbacks: usize,
}

pub fn summarize(results: &[EpisodeResult]) -> Summary {
    let n = results.len();
    let returned: Vec<&EpisodeResult> = results.iter().filter(|r| r.returned).collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>, count: usize| if count == 0 { f64::NAN } else { xs.sum::<f64>() / count as f64 };
    Summary {
        episodes: n,
        returned: returned.len(),
        return_rate: if n == 0 { 0.0 } else { returned.len() as f64 / n as f64 },
        return_accuracy: mean(&mut returned.iter().filter_map(|r| r.deviation), returned.len()),
        position_error: mean(&mut results.iter().map(|r| r.position_error), n),
        orientation_error_deg: mean(&mut results.iter().map(|r| r.orientation_error_deg), n),
        fallbacks: results.iter().filter(|r| r.fallback).count(),
    }
}

/// Resting pose choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CentralChoice {
    TableCentre,
    /// Mean blocking-plane crossing over the training exchanges.
    MeanHit,
}

impl CentralChoice {
    pub fn name(self) -> &'static str {
        match self {
            CentralChoice::TableCentre => "centre",
            CentralChoice::MeanHit => "mean-hit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "centre" | "center" => Some(CentralChoice::TableCentre),
            "mean-hit" | "mean" => Some(CentralChoice::MeanHit),
            _ => None,
        }
    }
}

/// Experiment settings, readable from a `key=value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub v_max: f64,
    pub omega_max_deg: f64,
    pub dt: f64,
    pub racket_radius: f64,
    pub lambdas: Vec<f64>,
    pub t_hs: Vec<f64>,
    pub centrals: Vec<CentralChoice>,
    pub strategies: Vec<Strategy>,
    pub alpha: f64,
    pub e_z: f64,
    pub e_h: f64,
    pub seed: u64,
    /// Cap on test episodes per cell; zero uses every test exchange.
    pub episodes: usize,
    pub k_members: usize,
    /// Largest forecast horizon (s).
    pub max_horizon_s: f64,
    pub history: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            v_max: 2.0,
            omega_max_deg: 720.0,
            dt: 0.01,
            racket_radius: 0.085,
            lambdas: vec![0.1],
            t_hs: vec![0.2],
            centrals: vec![CentralChoice::TableCentre],
            strategies: Strategy::ALL.to_vec(),
            alpha: 0.15,
            e_z: 0.87,
            e_h: 0.75,
            seed: 0,
            episodes: 0,
            k_members: 5,
            max_horizon_s: 0.7,
            history: 24,
        }
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    let out: Option<Vec<T>> = v.split(',').map(|s| f(s.trim())).collect();
    out.filter(|o| !o.is_empty())
}

impl ExperimentConfig {
    /// Sets one key. Sweepable keys take comma-separated lists.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let num = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite());
        let bad = || format!("bad value `{value}` for `{key}`");
        match key {
            "v_max" => self.v_max = num(value).filter(|v| *v > 0.0).ok_or_else(bad)?,
            "omega_max" => self.omega_max_deg = num(value).filter(|v| *v > 0.0).ok_or_else(bad)?,
            "dt" => self.dt = num(value).filter(|v| *v > 0.0).ok_or_else(bad)?,
            "racket_radius" => self.racket_radius = num(value).filter(|v| *v > 0.0).ok_or_else(bad)?,
            "lambda" => self.lambdas = list(value, |s| num(s).filter(|v| (0.0..=1.0).contains(v))).ok_or_else(bad)?,
            "T_h" | "t_h" => self.t_hs = list(value, |s| num(s).filter(|v| *v > 0.0)).ok_or_else(bad)?,
            "central" => self.centrals = list(value, CentralChoice::parse).ok_or_else(bad)?,
            "strategy" | "strategies" => self.strategies = list(value, Strategy::parse).ok_or_else(bad)?,
            "alpha" => self.alpha = num(value).filter(|v| *v > 0.0 && *v < 1.0).ok_or_else(bad)?,
            "e_z" => self.e_z = num(value).filter(|v| (0.0..=1.0).contains(v)).ok_or_else(bad)?,
            "e_h" => self.e_h = num(value).filter(|v| (0.0..=1.0).contains(v)).ok_or_else(bad)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "episodes" => self.episodes = value.parse().map_err(|_| bad())?,
            "k_members" => self.k_members = value.parse().ok().filter(|k| *k >= 2).ok_or_else(bad)?,
            "max_horizon" => self.max_horizon_s = num(value).filter(|v| *v > 0.0).ok_or_else(bad)?,
            "history" => self.history = value.parse().ok().filter(|h| *h >= 2).ok_or_else(bad)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ControlError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ControlError::Config { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn control_params(&self, table: &TableGeometry, lambda: f64, t_h: f64, central: Vec3) -> ControlParams {
        ControlParams {
            v_max: self.v_max,
            omega_max_deg: self.omega_max_deg,
            dt: self.dt,
            racket_radius: self.racket_radius,
            safe_box: SafeBox::default_for(table),
            lambda,
            t_h,
            e_z: self.e_z,
            e_h: self.e_h,
            central,
        }
    }
}

/// Points of the three partitions.
pub struct Corpus<'a> {
    pub train: &'a [Point],
    pub cal: &'a [Point],
    pub test: &'a [Point],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentCell {
    pub strategy: Strategy,
    pub lambda: f64,
    pub t_h: f64,
    pub central: CentralChoice,
    pub summary: Summary,
    pub results: Vec<EpisodeResult>,
}

fn samples_for(points: &[Point], table: &TableGeometry, lead: usize, history: usize, max_h: usize) -> Result<Vec<ExchangeSample>, ControlError> {
    let per: Vec<Result<Vec<ExchangeSample>, _>> = par::map(points, |p| exchange_samples(p, table, lead, history, max_h));
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean blocking-plane crossing of the training exchanges, or the table
/// centre pose when none cross.
pub fn mean_hit_position(samples: &[ExchangeSample], table: &TableGeometry) -> Vec3 {
    let hits: Vec<Vec3> = samples.iter().filter_map(|s| s.crossing.map(|c| c.1)).collect();
    if hits.is_empty() {
        return table_centre_pose(table);
    }
    let mut m = hits.iter().sum::<Vec3>() / hits.len() as f64;
    m.x = -table.half_length();
    m
}

/// Runs every strategy over the grid of leads, shrinkage weights and resting
/// poses. For each lead the ensemble is fitted on the training points and
/// calibrated on the calibration points, unless `provided` holds a
/// calibration for that lead and level; episodes are the test exchanges.
pub fn run_experiment(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    table: &TableGeometry,
    provided: &[ConformalCalibration],
) -> Result<Vec<ExperimentCell>, ControlError> {
    let fps = corpus
        .test
        .first()
        .map(|p| p.fps)
        .ok_or_else(|| ControlError::InvalidParameter("empty test corpus".into()))?;
    let max_h = (cfg.max_horizon_s * fps).round() as usize;
    let horizons: Vec<usize> = (1..=max_h).collect();
    let physics = PhysicsParams {
        restitution_z: cfg.e_z,
        restitution_h: cfg.e_h,
        ..PhysicsParams::default()
    };
    let mut cells = Vec::new();
    for &t_h in &cfg.t_hs {
        let lead = ((t_h * fps).round() as usize).max(1);
        let train = samples_for(corpus.train, table, lead, cfg.history, max_h)?;
        let cal = samples_for(corpus.cal, table, lead, cfg.history, max_h)?;
        let mut test = samples_for(corpus.test, table, lead, cfg.history, max_h)?;
        test.retain(|s| s.crossing.is_some());
        if cfg.episodes > 0 {
            test.truncate(cfg.episodes);
        }
        let members = physics_baseline_ensemble(cfg.seed, cfg.k_members, &physics, &train, table)?;
        let stored = provided
            .iter()
            .find(|c| c.lead == lead && c.fps == fps && (c.alpha - cfg.alpha).abs() < 1e-12);
        let calib = match stored {
            Some(c) => c.clone(),
            None => calibration_residuals(&members, &cal, &horizons)?.calibrate(cfg.alpha)?,
        };
        let anticipation = Anticipation {
            members: &members,
            calib: &calib,
            horizons: &calib.horizons,
        };
        let by_id: BTreeMap<u64, &Point> = corpus.test.iter().map(|p| (p.id, p)).collect();
        let incoming: Vec<IncomingBall> = test
            .iter()
            .map(|s| IncomingBall::from_point(by_id[&s.point_id], s))
            .collect::<Result<_, _>>()?;
        for &central in &cfg.centrals {
            let c = match central {
                CentralChoice::TableCentre => table_centre_pose(table),
                CentralChoice::MeanHit => mean_hit_position(&train, table),
            };
            for &lambda in &cfg.lambdas {
                let params = cfg.control_params(table, lambda, t_h, c);
                for &strategy in &cfg.strategies {
                    let results: Vec<EpisodeResult> = par::map_range(test.len(), |i| {
                        run_episode(&test[i], &incoming[i], strategy, &params, Some(&anticipation), table)
                    })
                    .into_iter()
                    .collect::<Result<_, _>>()?;
                    cells.push(ExperimentCell {
                        strategy,
                        lambda,
                        t_h,
                        central,
                        summary: summarize(&results),
                        results,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Episode rows (tab-separated) followed by one `#` footer line per cell.
pub fn format_results(cells: &[ExperimentCell], seed: u64) -> String {
    let mut s = format!("# ttrally-results v1 seed={seed}\n");
    s.push_str("point\texchange\tstrategy\tlambda\tt_h\tcentral\talpha\treturned\tcontact\tdeviation\tposition_error\torientation_error_deg\tfallback\n");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for c in cells {
        for r in &c.results {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                r.point_id,
                r.exchange,
                r.strategy.name(),
                r.lambda,
                r.t_h,
                c.central.name(),
                r.alpha,
                r.returned as u8,
                r.contact as u8,
                opt(r.deviation),
                r.position_error,
                r.orientation_error_deg,
                r.fallback as u8
            );
        }
    }
    for c in cells {
        let m = &c.summary;
        let _ = writeln!(
            s,
            "# summary strategy={} lambda={} t_h={} central={} episodes={} returned={} return_rate={:.4} return_accuracy={:.4} position_error={:.4} orientation_error_deg={:.3} fallbacks={}",
            c.strategy.name(),
            c.lambda,
            c.t_h,
            c.central.name(),
            m.episodes,
            m.returned,
            m.return_rate,
            m.return_accuracy,
            m.position_error,
            m.orientation_error_deg,
            m.fallbacks
        );
    }
    s
}

/// One-sided lower confidence bound on the mean paired difference
/// `a - b` of two success indicators over the same episodes, normal
/// approximation with quantile `z`.
pub fn paired_difference_lower_bound(a: &[bool], b: &[bool], z: f64) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return f64::NEG_INFINITY;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| *x as u8 as f64 - *y as u8 as f64).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    mean - z * (var / n as f64).sqrt()
}
