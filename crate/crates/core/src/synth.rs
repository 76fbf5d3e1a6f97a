//! Synthetic rallies with exact ground truth, random capture cameras, and
//! projection of a rally into a noisy 2D track.
//!
//! Every ball piece between anchors (hit or bounce, all on integer frames)
//! is a Stokes-drag trajectory with the rally's drag coefficient, so the
//! reconstruction model is exact on noiseless data. Shots after a bounce
//! are integrated forward from the restituted bounce velocity until the
//! ball reaches the receiver's contact plane.

use crate::ball::{Flight, StokesSegment};
use crate::camera::{check_assumptions, Camera, CameraError, ImagePoint, Intrinsics};
use crate::model::{joints, BallPiece, BounceEvent, Frame2D, Frame3D, HitEvent, Player, Point, TableGeometry, Vec3};
use crate::pipeline::{TrackFile, TrackHeader};
use crate::rng::{self, domain, Rng};
use crate::par;
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

/// Opponent intent: where a player aims and how their stance gives it away.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntentModel {
    /// Probability of aiming to the hitter's right.
    pub right_weight: f64,
    /// Mean lateral target magnitude (m) of each mode.
    pub mode: f64,
    pub spread: f64,
    /// Targets are clipped to `[-limit, limit]`.
    pub limit: f64,
    /// Root offset from the contact point per metre of lateral target.
    pub cue_gain: f64,
    pub cue_noise: f64,
    /// Seconds before a hit over which the stance shift happens.
    pub cue_lead_s: f64,
}

impl Default for IntentModel {
    fn default() -> Self {
        Self {
            right_weight: 0.6,
            mode: 0.45,
            spread: 0.15,
            limit: 0.72,
            cue_gain: 0.5,
            cue_noise: 0.05,
            cue_lead_s: 0.5,
        }
    }
}

impl IntentModel {
    /// Lateral target in the hitter's frame; positive is the hitter's right.
    pub fn sample_relative(&self, rng: &mut Rng) -> f64 {
        let sign = if rng.random_bool(self.right_weight) { 1.0 } else { -1.0 };
        let n = Normal::new(sign * self.mode, self.spread).expect("valid spread");
        n.sample(rng).clamp(-self.limit, self.limit)
    }
}

/// World `y` of a target that is `rel` metres to the hitter's right. The far
/// player faces `-x`, so their right is `+y`; the near player's is `-y`.
pub fn relative_to_world_y(hitter: Player, rel: f64) -> f64 {
    hitter.side_sign() * rel
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RallyParams {
    pub fps: f64,
    /// Mean nominal shot speed (m/s) of rally shots.
    pub mean_speed: f64,
    /// Log-space standard deviation of the shot speed.
    pub speed_log_sigma: f64,
    /// Shot speeds are log-normal truncated to this range (m/s). At 60 fps
    /// much faster shots cannot keep consecutive hits `min_exchange_s`
    /// apart.
    pub speed_range: (f64, f64),
    pub k_range: (f64, f64),
    pub restitution_z: f64,
    pub restitution_h: f64,
    /// Inclusive range of hits per point.
    pub hits: (usize, usize),
    /// Distance behind the table end at which the receiver makes contact.
    pub receive_depth: (f64, f64),
    pub intent: IntentModel,
    /// Frames of serve toss before the first hit.
    pub pre_roll: usize,
    /// Frames of flight kept after the last hit.
    pub post_roll: usize,
    /// Shortest time between consecutive hits (s).
    pub min_exchange_s: f64,
}

impl Default for RallyParams {
    fn default() -> Self {
        Self {
            fps: 60.0,
            mean_speed: 11.25,
            speed_log_sigma: 0.4785,
            speed_range: (2.0, 20.0),
            k_range: (0.05, 0.5),
            restitution_z: 0.87,
            restitution_h: 0.75,
            hits: (3, 8),
            receive_depth: (0.1, 0.6),
            intent: IntentModel::default(),
            pre_roll: 12,
            post_roll: 8,
            min_exchange_s: 0.2,
        }
    }
}

/// Mean of a log-normal with log-space parameters `(mu, sigma)` truncated
/// to `[lo, hi]`.
pub fn truncated_lognormal_mean(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let phi = StdNormal::standard();
    let mass = |shift: f64| phi.cdf((hi.ln() - mu - shift) / sigma) - phi.cdf((lo.ln() - mu - shift) / sigma);
    (mu + 0.5 * sigma * sigma).exp() * mass(sigma * sigma) / mass(0.0)
}

/// Log-space location whose truncation to `[lo, hi]` has mean `mean`.
pub fn truncated_lognormal_location(mean: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    // The truncated mean increases with mu and stays inside (lo, hi).
    let (mut a, mut b) = (lo.ln() - 10.0 * sigma, hi.ln() + 10.0 * sigma);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if truncated_lognormal_mean(m, sigma, lo, hi) < mean {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// One shot of the generated rally.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub hitter: Player,
    pub hit_frame: usize,
    pub bounce_frames: Vec<usize>,
    /// Frame at which the receiver makes contact.
    pub next_hit_frame: usize,
    /// Lateral target in the hitter's frame; `None` for serves.
    pub intent_relative: Option<f64>,
    /// Nominal speed (m/s) used to time the shot; `None` for serves.
    pub speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRally {
    /// Ground truth between the first and last hit.
    pub point: Point,
    /// Ground truth for every tracked frame, including toss and follow-through.
    pub frames: Vec<Frame3D>,
    pub shots: Vec<Shot>,
    pub k: f64,
}

#[derive(Clone, Copy)]
enum Motion {
    Boundary(StokesSegment),
    Free(Flight),
}

impl Motion {
    fn eval(&self, t: f64) -> Vec3 {
        match self {
            Motion::Boundary(s) => s.eval(t.min(s.duration)),
            Motion::Free(f) => f.position(t),
        }
    }
}

struct Piece {
    start: usize,
    end: usize,
    motion: Motion,
}

struct Builder<'a> {
    params: &'a RallyParams,
    table: &'a TableGeometry,
    k: f64,
    pieces: Vec<Piece>,
    shots: Vec<Shot>,
    bounces: Vec<usize>,
    /// (frame, root xy, hand) keys per player.
    keys: [Vec<(usize, [f64; 2], Vec3)>; 2],
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Outcome of flying a bounced ball to the receiver.
struct Landing {
    flight: Flight,
    frames: usize,
}

impl Builder<'_> {
    fn restitute(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.params.restitution_h * v.x,
            self.params.restitution_h * v.y,
            -self.params.restitution_z * v.z,
        )
    }

    /// Flies the ball from a bounce to the receiver's contact plane. `None`
    /// if it never gets there plausibly.
    fn fly_to_receiver(&self, bounce: Vec3, v_in: Vec3, receiver: Player, depth: f64) -> Option<Landing> {
        let flight = Flight::new(bounce, self.restitute(v_in), self.k);
        let fps = self.params.fps;
        let plane = receiver.side_sign() * (self.table.half_length() + depth);
        let beyond = |p: &Vec3| (plane - p.x) * receiver.side_sign();
        for n in 1..(2.0 * fps) as usize {
            let p = flight.position(n as f64 / fps);
            let over_table = p.x.abs() <= self.table.half_length() && p.y.abs() <= self.table.half_width();
            if over_table && p.z < self.table.height {
                return None;
            }
            if p.z > 2.6 || p.z < 0.2 {
                return None;
            }
            if beyond(&p) <= 0.0 {
                if n < 4 || p.z < 0.7 || p.z > 2.2 || p.y.abs() > 1.5 {
                    return None;
                }
                return Some(Landing { flight, frames: n });
            }
        }
        None
    }

    fn ball_at_frame(&self, f: usize) -> Vec3 {
        let piece = self
            .pieces
            .iter()
            .find(|p| (p.start..=p.end).contains(&f))
            .expect("frame covered by a piece");
        piece.motion.eval((f - piece.start) as f64 / self.params.fps)
    }

    fn push_key(&mut self, player: Player, frame: usize, hand: Vec3, target_y: f64, rng: &mut Rng) {
        let cue = self.params.intent.cue_gain * target_y + self.params.intent.cue_noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let root = [hand.x + player.side_sign() * 0.35, hand.y + cue];
        self.keys[player.index()].push((frame, root, hand));
    }
}

/// Generates one rally. Deterministic in `(seed, id)`.
pub fn generate_rally(id: u64, seed: u64, params: &RallyParams, table: &TableGeometry) -> SyntheticRally {
    let mut rng = rng::tagged(seed, domain::RALLY, id);
    let fps = params.fps;
    let k = rng.random_range(params.k_range.0..=params.k_range.1);
    let server = if rng.random_bool(0.5) { Player::Near } else { Player::Far };
    let n_hits = rng.random_range(params.hits.0..=params.hits.1).max(2);
    let mut b = Builder {
        params,
        table,
        k,
        pieces: Vec::new(),
        shots: Vec::new(),
        bounces: Vec::new(),
        keys: [Vec::new(), Vec::new()],
    };
    let hl = table.half_length();
    let h = table.height;

    // Serve: toss onto the hand, bounce on each half, then free flight.
    let receiver = server.other();
    let s_side = server.side_sign();
    let r_side = receiver.side_sign();
    let (p0, serve_bounces, landing) = loop {
        let p0 = Vec3::new(
            s_side * (hl + rng.random_range(0.2..0.5)),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.85..1.05),
        );
        let b1 = Vec3::new(s_side * rng.random_range(0.4..1.0), rng.random_range(-0.5..0.5), h);
        let b2 = Vec3::new(r_side * rng.random_range(0.5..1.1), rng.random_range(-0.55..0.55), h);
        let ta = (rng.random_range(0.18..0.3) * fps).round() as usize;
        let tb = (rng.random_range(0.3..0.45) * fps).round() as usize;
        let sa = StokesSegment::new(p0, b1, ta as f64 / fps, k).expect("valid serve");
        let sb = StokesSegment::new(b1, b2, tb as f64 / fps, k).expect("valid serve");
        let depth = rng.random_range(params.receive_depth.0..params.receive_depth.1);
        if let Some(l) = b.fly_to_receiver(b2, sb.velocity(sb.duration), receiver, depth) {
            break (p0, [(ta, sa), (tb, sb)], l);
        }
    };
    let h0 = params.pre_roll;
    let apex = 0.35;
    let toss = Flight::new(p0 + Vec3::new(0.0, 0.0, 0.5 * crate::ball::GRAVITY * apex * apex), Vec3::zeros(), 1e-9);
    b.pieces.push(Piece {
        start: 0,
        end: h0,
        motion: Motion::Boundary(
            StokesSegment::new(toss.position(apex - h0 as f64 / fps), p0, h0 as f64 / fps, 1e-9).expect("valid toss"),
        ),
    });
    let mut f = h0;
    let mut bounce_frames = Vec::new();
    for (frames, seg) in serve_bounces {
        b.pieces.push(Piece { start: f, end: f + frames, motion: Motion::Boundary(seg) });
        f += frames;
        bounce_frames.push(f);
    }
    b.bounces.extend(&bounce_frames);
    b.pieces.push(Piece { start: f, end: f + landing.frames, motion: Motion::Free(landing.flight) });
    let mut next_hit = f + landing.frames;
    b.keys[server.index()].push((0, [p0.x + s_side * 0.35, p0.y], p0));
    b.push_key(server, h0, p0, 0.0, &mut rng);
    b.shots.push(Shot {
        hitter: server,
        hit_frame: h0,
        bounce_frames,
        next_hit_frame: next_hit,
        intent_relative: None,
        speed: None,
    });
    // Receiver's ready stance.
    let ready = Vec3::new(r_side * (hl + 0.6), rng.random_range(-0.3..0.3), 0.0);
    b.keys[receiver.index()].push((0, [ready.x, ready.y], ready + Vec3::new(-r_side * 0.3, r_side * 0.25, 1.0)));

    // Rally shots. The shot after the last hit only supplies follow-through.
    let (lo, hi) = params.speed_range;
    let mu = truncated_lognormal_location(params.mean_speed, params.speed_log_sigma, lo, hi);
    let speed_dist = LogNormal::new(mu, params.speed_log_sigma).expect("valid speed distribution");
    let draw_speed = |rng: &mut Rng| loop {
        let v = speed_dist.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    };
    let mut hitter = receiver;
    for _ in 1..n_hits {
        let hit = next_hit;
        let p_h = b.ball_at_frame(hit);
        let recv = hitter.other();
        let rel = params.intent.sample_relative(&mut rng);
        let y_b = relative_to_world_y(hitter, rel);
        // The speed is kept across geometry retries so that rejections do
        // not skew the speed distribution; it is redrawn only when no
        // bounce point works for it.
        let mut attempts = 0;
        let mut speed = draw_speed(&mut rng);
        let (t1, seg, land, speed) = loop {
            attempts += 1;
            if attempts % 200 == 0 {
                speed = draw_speed(&mut rng);
            }
            let x_b = recv.side_sign() * rng.random_range(0.3..1.25);
            let bounce = Vec3::new(x_b, y_b, h);
            let t1 = (((bounce - p_h).norm() / speed) * fps).round().max(4.0) as usize;
            let seg = StokesSegment::new(p_h, bounce, t1 as f64 / fps, k).expect("valid shot");
            let depth = rng.random_range(params.receive_depth.0..params.receive_depth.1);
            if let Some(l) = b.fly_to_receiver(bounce, seg.velocity(seg.duration), recv, depth) {
                if (t1 + l.frames) as f64 >= params.min_exchange_s * fps {
                    break (t1, seg, l, speed);
                }
            }
            assert!(attempts < 10_000, "synthetic shot generation stalled");
        };
        b.push_key(hitter, hit, p_h, y_b, &mut rng);
        b.pieces.push(Piece { start: hit, end: hit + t1, motion: Motion::Boundary(seg) });
        b.bounces.push(hit + t1);
        b.pieces.push(Piece { start: hit + t1, end: hit + t1 + land.frames, motion: Motion::Free(land.flight) });
        next_hit = hit + t1 + land.frames;
        b.shots.push(Shot {
            hitter,
            hit_frame: hit,
            bounce_frames: vec![hit + t1],
            next_hit_frame: next_hit,
            intent_relative: Some(rel),
            speed: Some(speed),
        });
        hitter = recv;
    }
    let last_hit = b.shots.last().map(|s| s.hit_frame).unwrap_or(h0);
    let end = (last_hit + params.post_roll).min(b.pieces.last().map_or(last_hit, |p| p.end));

    let frames: Vec<Frame3D> = (0..=end)
        .map(|f| Frame3D {
            frame_index: f,
            ball: b.ball_at_frame(f),
            joints: [skeleton(&b.keys[0], f, Player::Near, params), skeleton(&b.keys[1], f, Player::Far, params)],
        })
        .collect();

    let hits: Vec<HitEvent> = b
        .shots
        .iter()
        .map(|s| HitEvent {
            frame: s.hit_frame,
            player: s.hitter,
            hand_world: Some(frames[s.hit_frame].ball),
        })
        .collect();
    let bounces: Vec<BounceEvent> = b
        .bounces
        .iter()
        .copied()
        .filter(|&bf| bf <= last_hit)
        .map(|bf| BounceEvent { frame: bf, position: frames[bf].ball })
        .collect();
    let pieces: Vec<BallPiece> = b
        .pieces
        .iter()
        .filter(|p| p.start >= h0 && p.end <= last_hit)
        .map(|p| BallPiece { start_frame: p.start, end_frame: p.end, k, mse: 0.0 })
        .collect();
    let point = Point {
        id,
        fps,
        frames: frames[h0..=last_hit].to_vec(),
        hits,
        bounces,
        pieces,
    };
    SyntheticRally { point, frames, shots: b.shots, k }
}

fn skeleton(keys: &[(usize, [f64; 2], Vec3)], f: usize, player: Player, params: &RallyParams) -> Vec<Vec3> {
    let (root, hand) = pose_at(keys, f, params);
    let side = player.side_sign();
    let mut j = vec![Vec3::zeros(); joints::COUNT];
    j[joints::LEFT_ANKLE] = root + Vec3::new(0.0, -side * 0.15, 0.0);
    j[joints::RIGHT_ANKLE] = root + Vec3::new(0.0, side * 0.15, 0.0);
    j[joints::PELVIS] = root + Vec3::new(0.0, 0.0, 0.95);
    j[joints::NECK] = root + Vec3::new(-side * 0.05, 0.0, 1.45);
    j[joints::HEAD] = root + Vec3::new(-side * 0.05, 0.0, 1.65);
    j[joints::LEFT_WRIST] = root + Vec3::new(-side * 0.2, -side * 0.3, 1.0);
    j[joints::RIGHT_WRIST] = hand;
    j
}

/// Root (on the floor) and racket hand of a player at frame `f`.
///
/// Between keys the root holds, then shifts over the last `cue_lead_s`
/// before the next key; the hand offset from the root blends over the whole
/// interval so the hand meets the ball exactly at each hit.
fn pose_at(keys: &[(usize, [f64; 2], Vec3)], f: usize, params: &RallyParams) -> (Vec3, Vec3) {
    let to_root = |r: [f64; 2]| Vec3::new(r[0], r[1], 0.0);
    let i = keys.partition_point(|k| k.0 <= f);
    if i == 0 {
        let k = &keys[0];
        return (to_root(k.1), k.2);
    }
    let a = &keys[i - 1];
    let Some(b) = keys.get(i) else {
        return (to_root(a.1), a.2);
    };
    let span = (b.0 - a.0) as f64;
    let lead = (params.intent.cue_lead_s * params.fps).min(span).max(1.0);
    let s_root = smoothstep((f as f64 - (b.0 as f64 - lead)) / lead);
    let (ra, rb) = (to_root(a.1), to_root(b.1));
    let root = ra + (rb - ra) * s_root;
    let s_hand = smoothstep((f - a.0) as f64 / span);
    let (oa, ob) = (a.2 - ra, b.2 - rb);
    (root, root + oa + (ob - oa) * s_hand)
}

/// Generates `n` rallies with ids `first_id..first_id + n`, in parallel when
/// enabled. Output order and content do not depend on threading.
pub fn generate_corpus(first_id: u64, n: usize, seed: u64, params: &RallyParams, table: &TableGeometry) -> Vec<SyntheticRally> {
    par::map_range(n, |i| generate_rally(first_id + i as u64, seed, params, table))
}

/// Random capture cameras behind the near end of the table, translated
/// sideways and upwards, pitched down by at most `pitch_deg.1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSampler {
    pub width: u32,
    pub height: u32,
    pub focal: (f64, f64),
    /// Distance of the optical centre from the table centre along `x`.
    pub distance: (f64, f64),
    pub elevation: (f64, f64),
    pub lateral: (f64, f64),
    pub pitch_deg: (f64, f64),
}

impl Default for CameraSampler {
    fn default() -> Self {
        Self {
            width: 640,
            height: 360,
            focal: (420.0, 560.0),
            distance: (5.5, 8.0),
            elevation: (1.5, 2.2),
            lateral: (-0.4, 0.4),
            pitch_deg: (0.0, 0.0),
        }
    }
}

impl CameraSampler {
    pub fn sample(&self, rng: &mut Rng, table: &TableGeometry) -> Camera {
        let draw = |rng: &mut Rng, r: (f64, f64)| if r.0 < r.1 { rng.random_range(r.0..=r.1) } else { r.0 };
        let f = draw(rng, self.focal);
        let d = draw(rng, self.distance);
        let zc = draw(rng, self.elevation);
        let yc = draw(rng, self.lateral);
        let pitch = draw(rng, self.pitch_deg).to_radians();
        // Put the table centre at mid-width, a little above mid-height.
        let cx = 0.5 * self.width as f64 - f * yc / d;
        let cy = 0.45 * self.height as f64 - f * (zc - table.height) / d;
        Camera::looking_along_x(Intrinsics { fx: f, fy: f, cx, cy }, Vec3::new(-d, yc, zc), pitch)
            .expect("positive focal length")
    }
}

/// Tolerance on imaged leg verticality when validating synthetic cameras.
pub const LEG_TOLERANCE_PX: f64 = 0.1;

/// Projects a rally into a per-frame track with isotropic Gaussian pixel
/// noise of standard deviation `noise_px` on every image measurement.
/// Joints are emitted in camera coordinates without noise.
pub fn emit_synthetic_track(
    rally: &SyntheticRally,
    camera: &Camera,
    table: &TableGeometry,
    image: (u32, u32),
    noise_px: f64,
    seed: u64,
) -> Result<TrackFile, CameraError> {
    check_assumptions(camera, table, LEG_TOLERANCE_PX)?;
    let mut rng = rng::tagged(seed, domain::NOISE, rally.point.id);
    let normal = Normal::new(0.0, noise_px.max(0.0)).expect("finite noise");
    let jitter = |q: ImagePoint, rng: &mut Rng| -> ImagePoint {
        if noise_px > 0.0 {
            ImagePoint::new(q.u + normal.sample(rng), q.v + normal.sample(rng))
        } else {
            q
        }
    };
    let surface = table.surface_keypoints();
    let kp_true = surface.map(|p| camera.project(&p));
    let base_true = camera.project(&table.ground_corners()[0])?.v;
    let mut frames = Vec::with_capacity(rally.frames.len());
    for fr in &rally.frames {
        let mut out = Frame2D::empty(fr.frame_index);
        out.ball_px = Some(jitter(camera.project(&fr.ball)?, &mut rng));
        let mut kp = [ImagePoint::default(); 6];
        for (o, q) in kp.iter_mut().zip(&kp_true) {
            *o = jitter(q.clone()?, &mut rng);
        }
        out.table_keypoints = Some(kp);
        out.base_height_px = Some(jitter(ImagePoint::new(0.0, base_true), &mut rng).v);
        for p in [Player::Near, Player::Far] {
            let j = &fr.joints[p.index()];
            out.racket_centroids[p.index()] = Some(jitter(camera.project(&j[joints::RIGHT_WRIST])?, &mut rng));
            out.player_joints_cam[p.index()] = Some(j.iter().map(|x| camera.to_camera(x)).collect());
            out.player_ankles_px[p.index()] = Some([
                jitter(camera.project(&j[joints::LEFT_ANKLE])?, &mut rng),
                jitter(camera.project(&j[joints::RIGHT_ANKLE])?, &mut rng),
            ]);
        }
        frames.push(out);
    }
    Ok(TrackFile {
        header: TrackHeader {
            fps: rally.point.fps,
            width: image.0,
            height: image.1,
            id: rally.point.id,
            noise_px: Some(noise_px),
            seed: Some(seed),
        },
        frames,
    })
}

/// Rotates world data by 180 degrees about the vertical axis, swapping the
/// two ends of the table.
pub fn rotate_half_turn(p: &Vec3) -> Vec3 {
    Vec3::new(-p.x, -p.y, p.z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_id() {
        let t = TableGeometry::ittf();
        let p = RallyParams::default();
        assert_eq!(generate_rally(4, 9, &p, &t), generate_rally(4, 9, &p, &t));
        assert_ne!(generate_rally(4, 9, &p, &t), generate_rally(5, 9, &p, &t));
    }

    #[test]
    fn truncated_lognormal_reduces_to_the_plain_mean() {
        let (mu, sigma) = (2.3f64, 0.48);
        let plain = (mu + 0.5 * sigma * sigma).exp();
        assert!((truncated_lognormal_mean(mu, sigma, 1e-6, 1e6) - plain).abs() < 1e-9);
        assert!(truncated_lognormal_mean(mu, sigma, 2.0, 20.0) < plain);
        let loc = truncated_lognormal_location(11.25, sigma, 2.0, 20.0);
        assert!((truncated_lognormal_mean(loc, sigma, 2.0, 20.0) - 11.25).abs() < 1e-9);
    }

    #[test]
    fn rally_structure() {
        let t = TableGeometry::ittf();
        let p = RallyParams::default();
        for id in 0..40 {
            let r = generate_rally(id, 1, &p, &t);
            let pt = &r.point;
            assert!(pt.hits.len() >= p.hits.0 && pt.hits.len() <= p.hits.1);
            for w in pt.hits.windows(2) {
                assert_ne!(w[0].player, w[1].player);
                assert!(w[1].frame > w[0].frame);
            }
            for h in &pt.hits {
                let hand = r.frames[h.frame].joints[h.player.index()][joints::RIGHT_WRIST];
                assert!((hand - r.frames[h.frame].ball).norm() < 1e-12);
            }
            for bnc in &pt.bounces {
                assert!((bnc.position.z - t.height).abs() < 1e-12);
                assert!(bnc.position.x.abs() <= t.half_length() && bnc.position.y.abs() <= t.half_width());
            }
            // Pieces chain from first to last hit.
            assert_eq!(pt.pieces.first().unwrap().start_frame, pt.hits[0].frame);
            assert_eq!(pt.pieces.last().unwrap().end_frame, pt.hits.last().unwrap().frame);
            for w in pt.pieces.windows(2) {
                assert_eq!(w[0].end_frame, w[1].start_frame);
            }
            for f in &pt.frames {
                assert!(f.ball.z > 0.0);
            }
        }
    }

    #[test]
    fn pieces_replay_truth() {
        let t = TableGeometry::ittf();
        let r = generate_rally(3, 2, &RallyParams::default(), &t);
        for f in &r.point.frames {
            let (p, _) = r.point.ball_state(f.frame_index as f64).unwrap();
            assert!((p - f.ball).norm() < 1e-9, "frame {}", f.frame_index);
        }
    }

    #[test]
    fn sampled_cameras_pass_assumptions_and_see_table() {
        let t = TableGeometry::ittf();
        let s = CameraSampler::default();
        let mut rng = rng::stream(1, 2);
        for _ in 0..50 {
            let c = s.sample(&mut rng, &t);
            check_assumptions(&c, &t, LEG_TOLERANCE_PX).unwrap();
            for p in t.surface_keypoints() {
                let q = c.project(&p).unwrap();
                assert!(q.u > 0.0 && q.u < s.width as f64 && q.v > 0.0 && q.v < s.height as f64);
            }
        }
    }
}
