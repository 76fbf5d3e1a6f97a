//! Hit and bounce detection on the 2D ball track and 3D trajectory
//! reconstruction with a Stokes-drag projectile model.

use crate::camera::{AxisPlane, Camera, CameraError, ImagePoint};
use crate::model::{BounceEvent, HitEvent, Player, TableGeometry, Vec3};
use crate::optimize::bracketed_minimize;
use crate::par;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const GRAVITY: f64 = 9.81;
pub const K_MIN: f64 = 1e-3;
pub const K_MAX: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BallError {
    #[error("ball track frames must be strictly increasing (at sample {0})")]
    NotIncreasing(usize),
    #[error("parabola fit is rank-deficient ({0} samples, {1} distinct times)")]
    FitFailed(usize, usize),
    #[error("no admissible bounce candidate between hits at frames {0} and {1}")]
    NoBounceFound(usize, usize),
    #[error("time {t} outside segment [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("hit pair at frames {h1}-{h2} rejected: mean squared fit error {mse:.3} px^2 exceeds {threshold}")]
    SegmentRejected { h1: usize, h2: usize, mse: f64, threshold: f64 },
    #[error("hit at frame {0} has no racket-hand position")]
    MissingHand(usize),
    #[error("need at least two hits, got {0}")]
    NotEnoughHits(usize),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// Observed ball pixels, one sample per frame with the ball detected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BallTrack2D {
    samples: Vec<(usize, ImagePoint)>,
}

impl BallTrack2D {
    pub fn new(samples: Vec<(usize, ImagePoint)>) -> Result<Self, BallError> {
        if let Some(i) = samples.windows(2).position(|w| w[0].0 >= w[1].0) {
            return Err(BallError::NotIncreasing(i + 1));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(usize, ImagePoint)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, frame: usize) -> Option<ImagePoint> {
        self.samples
            .binary_search_by_key(&frame, |s| s.0)
            .ok()
            .map(|i| self.samples[i].1)
    }

    /// Samples with frame in `lo..=hi`.
    pub fn between(&self, lo: usize, hi: usize) -> &[(usize, ImagePoint)] {
        let a = self.samples.partition_point(|s| s.0 < lo);
        let b = self.samples.partition_point(|s| s.0 <= hi);
        &self.samples[a..b.max(a)]
    }
}

/// Boundary-value Stokes-drag trajectory through `b0` at `t = 0` and `bt` at
/// `t = duration`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StokesSegment {
    pub b0: Vec3,
    pub bt: Vec3,
    pub duration: f64,
    pub k: f64,
    pub g: f64,
}

impl StokesSegment {
    pub fn new(b0: Vec3, bt: Vec3, duration: f64, k: f64) -> Result<Self, BallError> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(BallError::InvalidSegment(format!("duration {duration}")));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(BallError::InvalidSegment(format!("drag coefficient {k}")));
        }
        Ok(Self { b0, bt, duration, k, g: GRAVITY })
    }

    fn fraction(&self, t: f64) -> f64 {
        (-self.k * t).exp_m1() / (-self.k * self.duration).exp_m1()
    }

    /// Position at `t` without range checking.
    pub fn eval(&self, t: f64) -> Vec3 {
        if t == self.duration {
            return self.bt;
        }
        let f = self.fraction(t);
        let gk = self.g / self.k;
        let d = self.bt - self.b0;
        Vec3::new(
            self.b0.x + d.x * f,
            self.b0.y + d.y * f,
            self.b0.z + (d.z + gk * self.duration) * f - gk * t,
        )
    }

    pub fn position(&self, t: f64) -> Result<Vec3, BallError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(BallError::OutOfRange { t, duration: self.duration });
        }
        Ok(self.eval(t))
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        let df = self.k * (-self.k * t).exp() / -(-self.k * self.duration).exp_m1();
        let gk = self.g / self.k;
        let d = self.bt - self.b0;
        Vec3::new(d.x * df, d.y * df, (d.z + gk * self.duration) * df - gk)
    }
}

pub fn stokes_position(seg: &StokesSegment, t: f64) -> Result<Vec3, BallError> {
    seg.position(t)
}

/// Initial-value Stokes-drag flight from `p0` with velocity `v0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flight {
    pub p0: Vec3,
    pub v0: Vec3,
    pub k: f64,
    pub g: f64,
}

impl Flight {
    pub fn new(p0: Vec3, v0: Vec3, k: f64) -> Self {
        Self { p0, v0, k, g: GRAVITY }
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let a = -(-self.k * t).exp_m1() / self.k;
        let mut p = self.p0 + self.v0 * a;
        p.z -= self.g / self.k * (t - a);
        p
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        let e = (-self.k * t).exp();
        let mut v = self.v0 * e;
        v.z -= self.g / self.k * (1.0 - e);
        v
    }

    /// First time in `(0, t_max]` at which `h(position) <= 0`, located by
    /// stepping `dt` and bisecting. `h` must be positive at `t = 0`.
    pub fn first_crossing<F: Fn(&Vec3) -> f64>(&self, h: F, dt: f64, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0;
        while t0 < t_max {
            let t1 = (t0 + dt).min(t_max);
            if h(&self.position(t1)) <= 0.0 {
                let (mut a, mut b) = (t0, t1);
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if h(&self.position(m)) <= 0.0 {
                        b = m;
                    } else {
                        a = m;
                    }
                }
                return Some(b);
            }
            t0 = t1;
        }
        None
    }
}

/// Least-squares quadratic `v = c0 + c1 t + c2 t^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parabola {
    pub coeffs: [f64; 3],
    /// Sum of squared residuals.
    pub sse: f64,
    /// Mean squared residual.
    pub mse: f64,
}

impl Parabola {
    pub fn eval(&self, t: f64) -> f64 {
        self.coeffs[0] + t * (self.coeffs[1] + t * self.coeffs[2])
    }
}

pub fn fit_parabola(samples: &[(f64, f64)]) -> Result<Parabola, BallError> {
    let n = samples.len();
    let mut ts: Vec<f64> = samples.iter().map(|s| s.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    if n < 3 || ts.len() < 3 {
        return Err(BallError::FitFailed(n, ts.len()));
    }
    // Solve in a centred, scaled time variable for conditioning, then map the
    // coefficients back.
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n as f64;
    let scale = samples.iter().map(|s| (s.0 - mean).abs()).fold(0.0, f64::max).max(1e-300);
    let mut a = DMatrix::zeros(n, 3);
    let mut b = DVector::zeros(n);
    for (i, &(t, v)) in samples.iter().enumerate() {
        let s = (t - mean) / scale;
        a[(i, 0)] = 1.0;
        a[(i, 1)] = s;
        a[(i, 2)] = s * s;
        b[i] = v;
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax {
        return Err(BallError::FitFailed(n, ts.len()));
    }
    let c = svd
        .solve(&b, 1e-14 * smax)
        .map_err(|_| BallError::FitFailed(n, ts.len()))?;
    let (d0, d1, d2) = (c[0], c[1] / scale, c[2] / (scale * scale));
    let coeffs = [d0 - d1 * mean + d2 * mean * mean, d1 - 2.0 * d2 * mean, d2];
    let sse = (a * c - b).norm_squared();
    Ok(Parabola { coeffs, sse, mse: sse / n as f64 })
}

/// Vertical pixel samples of `ball` in `lo..=hi`, times relative to `origin`.
fn vertical_samples(ball: &BallTrack2D, lo: usize, hi: usize, origin: usize) -> Vec<(f64, f64)> {
    ball.between(lo, hi)
        .iter()
        .map(|(f, p)| (*f as f64 - origin as f64, p.v))
        .collect()
}

/// Sum of squared residuals of piecewise parabolas over `[h1, c1], [c1, c2],
/// ..., [cn, h2]`, each interval inclusive of both ends.
pub fn piecewise_sse(ball: &BallTrack2D, h1: usize, cuts: &[usize], h2: usize) -> Result<f64, BallError> {
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(h1);
    bounds.extend_from_slice(cuts);
    bounds.push(h2);
    let mut total = 0.0;
    for w in bounds.windows(2) {
        total += fit_parabola(&vertical_samples(ball, w[0], w[1], h1))?.sse;
    }
    Ok(total)
}

fn admissible(ball: &BallTrack2D, lo: usize, c: usize, hi: usize) -> bool {
    lo < c && c < hi && ball.between(lo, c).len() >= 3 && ball.between(c, hi).len() >= 3
}

/// Chooses the candidate minimising the two-parabola error. Candidates
/// without three samples on each side are skipped. Ties go to the earliest
/// frame.
pub fn select_bounce(
    ball: &BallTrack2D,
    h1: usize,
    h2: usize,
    candidates: &[usize],
) -> Result<(usize, f64), BallError> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64)> = None;
    for &c in &sorted {
        if !admissible(ball, h1, c, h2) {
            continue;
        }
        let Ok(e) = piecewise_sse(ball, h1, &[c], h2) else { continue };
        if best.is_none_or(|b| e < b.1) {
            best = Some((c, e));
        }
    }
    best.ok_or(BallError::NoBounceFound(h1, h2))
}

/// Serve variant: the ordered candidate pair minimising the three-parabola
/// error. Ties go to the lexicographically earliest pair.
pub fn select_serve_bounces(
    ball: &BallTrack2D,
    h1: usize,
    h2: usize,
    candidates: &[usize],
) -> Result<((usize, usize), f64), BallError> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<((usize, usize), f64)> = None;
    for (i, &a) in sorted.iter().enumerate() {
        if !admissible(ball, h1, a, h2) {
            continue;
        }
        for &b in &sorted[i + 1..] {
            if !admissible(ball, a, b, h2) {
                continue;
            }
            let Ok(e) = piecewise_sse(ball, h1, &[a, b], h2) else { continue };
            if best.is_none_or(|x| e < x.1) {
                best = Some(((a, b), e));
            }
        }
    }
    best.ok_or(BallError::NoBounceFound(h1, h2))
}

fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let r = window / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(xs.len());
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionParams {
    /// Largest smoothed ball-racket distance still counted as a hit (px).
    pub hit_threshold_px: f64,
    /// Largest raw distance at the refined minimum (px).
    pub contact_threshold_px: f64,
    /// Minimum separation between consecutive hits (frames).
    pub min_gap_frames: usize,
    pub hit_smoothing: usize,
    pub bounce_smoothing: usize,
    /// Half-width of the frame neighbourhood added around each detected
    /// bounce feature.
    pub bounce_neighbourhood: usize,
    /// Number of strongest curvature peaks used as bounce features.
    pub bounce_peaks: usize,
}

impl DetectionParams {
    /// Defaults with the hit gap expressed in seconds.
    pub fn for_fps(fps: f64) -> Self {
        Self {
            hit_threshold_px: 30.0,
            contact_threshold_px: 10.0,
            min_gap_frames: (0.2 * fps).round().max(1.0) as usize,
            hit_smoothing: 3,
            bounce_smoothing: 5,
            bounce_neighbourhood: 2,
            bounce_peaks: 3,
        }
    }
}

/// Racket centroids per frame for both players.
pub type RacketTrack = [(usize, [Option<ImagePoint>; 2])];

/// Hits are local minima of the smoothed ball-to-racket pixel distance,
/// per player, below the threshold, whose raw minimum within one sample is
/// below the contact threshold. Minima closer than `min_gap_frames` keep the deepest, and consecutive
/// hits by the same player keep the deeper one.
pub fn detect_hits(ball: &BallTrack2D, rackets: &RacketTrack, params: &DetectionParams) -> Vec<HitEvent> {
    let mut cands: Vec<(usize, Player, f64)> = Vec::new();
    for p in [Player::Near, Player::Far] {
        let series: Vec<(usize, f64)> = rackets
            .iter()
            .filter_map(|(f, r)| Some((*f, ball.get(*f)?.dist(&r[p.index()]?))))
            .collect();
        let raw: Vec<f64> = series.iter().map(|s| s.1).collect();
        let smooth = moving_average(&raw, params.hit_smoothing.max(1));
        for i in 1..smooth.len().saturating_sub(1) {
            if !(smooth[i] <= smooth[i - 1] && smooth[i] < smooth[i + 1]) {
                continue;
            }
            if smooth[i] >= params.hit_threshold_px {
                continue;
            }
            let j = (i - 1..=i + 1)
                .min_by(|&a, &b| raw[a].total_cmp(&raw[b]))
                .unwrap_or(i);
            if raw[j] >= params.contact_threshold_px {
                continue;
            }
            cands.push((series[j].0, p, raw[j]));
        }
    }
    // Deepest first; drop anything within the gap of an accepted hit.
    cands.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, Player, f64)> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| k.0.abs_diff(c.0) >= params.min_gap_frames.max(1)) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|k| k.0);
    let mut out: Vec<(usize, Player, f64)> = Vec::with_capacity(kept.len());
    for c in kept {
        match out.last_mut() {
            Some(last) if last.1 == c.1 => {
                if c.2 < last.2 {
                    *last = c;
                }
            }
            _ => out.push(c),
        }
    }
    out.into_iter()
        .map(|(frame, player, _)| HitEvent { frame, player, hand_world: None })
        .collect()
}

/// Candidate bounce frames strictly between `h1` and `h2`: neighbourhoods of
/// the lowest image points (local maxima of the smoothed `v`, which grows
/// downwards) and of the sharpest changes in vertical image velocity.
pub fn bounce_candidates(ball: &BallTrack2D, h1: usize, h2: usize, params: &DetectionParams) -> Vec<usize> {
    let s = ball.between(h1, h2);
    if s.len() < 5 {
        return Vec::new();
    }
    let v: Vec<f64> = s.iter().map(|x| x.1.v).collect();
    let sm = moving_average(&v, params.bounce_smoothing.max(1));
    let mut features = Vec::new();
    for i in 1..sm.len() - 1 {
        if sm[i] >= sm[i - 1] && sm[i] > sm[i + 1] {
            features.push(i);
        }
    }
    let curv: Vec<f64> = (0..v.len())
        .map(|i| {
            if i == 0 || i + 1 == v.len() {
                0.0
            } else {
                let dt0 = (s[i].0 - s[i - 1].0) as f64;
                let dt1 = (s[i + 1].0 - s[i].0) as f64;
                ((v[i + 1] - v[i]) / dt1 - (v[i] - v[i - 1]) / dt0).abs()
            }
        })
        .collect();
    let curv = moving_average(&curv, 3);
    let mut peaks: Vec<usize> = (1..curv.len() - 1)
        .filter(|&i| curv[i] >= curv[i - 1] && curv[i] > curv[i + 1])
        .collect();
    peaks.sort_by(|&a, &b| curv[b].total_cmp(&curv[a]));
    features.extend(peaks.into_iter().take(params.bounce_peaks));
    let r = params.bounce_neighbourhood as isize;
    let mut out: Vec<usize> = features
        .into_iter()
        .flat_map(|i| (-r..=r).map(move |d| i as isize + d))
        .filter(|&i| i >= 0 && (i as usize) < s.len())
        .map(|i| s[i as usize].0)
        .filter(|&f| admissible(ball, h1, f, h2))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DragWarning {
    /// No observations strictly inside the segment; `k` is the lower bound.
    Uninformative,
    /// The minimiser sits on a search bound.
    AtBound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragFit {
    pub k: f64,
    /// Sum of squared reprojection distances (px^2).
    pub sse: f64,
    /// Observations used.
    pub samples: usize,
    pub warning: Option<DragWarning>,
}

impl DragFit {
    pub fn mse(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.sse / self.samples as f64
        }
    }
}

/// Reprojection error of a segment with drag `k` against the observations.
pub fn drag_objective(
    b0: &Vec3,
    bt: &Vec3,
    duration: f64,
    k: f64,
    obs: &[(f64, ImagePoint)],
    camera: &Camera,
) -> f64 {
    let Ok(seg) = StokesSegment::new(*b0, *bt, duration, k) else {
        return f64::INFINITY;
    };
    obs.iter()
        .map(|(t, q)| match camera.project(&seg.eval(t.clamp(0.0, duration))) {
            Ok(p) => (p.u - q.u).powi(2) + (p.v - q.v).powi(2),
            Err(_) => 1e12,
        })
        .sum()
}

/// Fits the drag coefficient of a segment with fixed endpoints by
/// minimising reprojection error over `[K_MIN, K_MAX]`. `obs` carries
/// segment-relative times.
pub fn fit_drag(b0: &Vec3, bt: &Vec3, duration: f64, obs: &[(f64, ImagePoint)], camera: &Camera) -> DragFit {
    let interior = obs.iter().filter(|(t, _)| *t > 0.0 && *t < duration).count();
    if interior == 0 {
        return DragFit {
            k: K_MIN,
            sse: drag_objective(b0, bt, duration, K_MIN, obs, camera),
            samples: obs.len(),
            warning: Some(DragWarning::Uninformative),
        };
    }
    let r = bracketed_minimize(|k| drag_objective(b0, bt, duration, k, obs, camera), K_MIN, K_MAX, 51, 1e-6);
    DragFit {
        k: r.x,
        sse: r.f,
        samples: obs.len(),
        warning: r.at_bound.then_some(DragWarning::AtBound),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconParams {
    pub detection: DetectionParams,
    /// Largest accepted mean squared parabola residual per hit pair (px^2).
    pub mse_threshold: f64,
    /// Treat the first hit pair as a serve (two bounces).
    pub first_is_serve: bool,
    /// Frames each selected bounce may shift to lower the drag-fit
    /// reprojection error. Zero keeps the parabola-split choice.
    pub refine_radius: usize,
    /// Frames each detected hit may shift to lower the reprojection error
    /// of its two neighbouring pairs. Zero keeps the detected frames.
    pub hit_refine_radius: usize,
}

impl ReconParams {
    pub fn for_fps(fps: f64) -> Self {
        Self {
            detection: DetectionParams::for_fps(fps),
            mse_threshold: 9.0,
            first_is_serve: true,
            refine_radius: 2,
            hit_refine_radius: 3,
        }
    }
}

/// One fitted flight piece between two anchor frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub segment: StokesSegment,
    pub drag: DragFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairReconstruction {
    pub h1: usize,
    pub h2: usize,
    pub bounces: Vec<BounceEvent>,
    pub segments: Vec<FittedSegment>,
    /// Parabola error of the chosen split (sum of squares, px^2).
    pub split_sse: f64,
    /// `split_sse` divided by the number of terms in the sum.
    pub split_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub fps: f64,
    pub pairs: Vec<PairReconstruction>,
}

impl Trajectory {
    pub fn first_frame(&self) -> Option<usize> {
        self.pairs.first().map(|p| p.h1)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.pairs.last().map(|p| p.h2)
    }

    pub fn bounces(&self) -> Vec<BounceEvent> {
        self.pairs.iter().flat_map(|p| p.bounces.iter().copied()).collect()
    }

    pub fn segments(&self) -> impl Iterator<Item = &FittedSegment> {
        self.pairs.iter().flat_map(|p| p.segments.iter())
    }

    /// Reconstructed ball position at `frame`, if covered.
    pub fn position(&self, frame: usize) -> Option<Vec3> {
        let s = self
            .segments()
            .find(|s| (s.start_frame..=s.end_frame).contains(&frame))?;
        let t = (frame - s.start_frame) as f64 / self.fps;
        Some(s.segment.eval(t.min(s.segment.duration)))
    }
}

fn fit_piece(
    ball: &BallTrack2D,
    camera: &Camera,
    fps: f64,
    (f0, p0): (usize, Vec3),
    (f1, p1): (usize, Vec3),
) -> Result<FittedSegment, BallError> {
    let duration = (f1 - f0) as f64 / fps;
    let obs: Vec<(f64, ImagePoint)> = ball
        .between(f0, f1)
        .iter()
        .map(|(f, q)| ((f - f0) as f64 / fps, *q))
        .collect();
    let drag = fit_drag(&p0, &p1, duration, &obs, camera);
    Ok(FittedSegment {
        start_frame: f0,
        end_frame: f1,
        segment: StokesSegment::new(p0, p1, duration, drag.k)?,
        drag,
    })
}

/// Reconstructs one hit pair: bounce selection, anchors, drag fits.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_pair(
    ball: &BallTrack2D,
    h1: &HitEvent,
    h2: &HitEvent,
    serve: bool,
    camera: &Camera,
    table: &TableGeometry,
    fps: f64,
    params: &ReconParams,
) -> Result<PairReconstruction, BallError> {
    let a = h1.hand_world.ok_or(BallError::MissingHand(h1.frame))?;
    let b = h2.hand_world.ok_or(BallError::MissingHand(h2.frame))?;
    let cands = bounce_candidates(ball, h1.frame, h2.frame, &params.detection);
    let (cuts, sse) = if serve {
        let ((x, y), e) = select_serve_bounces(ball, h1.frame, h2.frame, &cands)?;
        (vec![x, y], e)
    } else {
        let (x, e) = select_bounce(ball, h1.frame, h2.frame, &cands)?;
        (vec![x], e)
    };
    // Terms in the split error: each interval counts its shared endpoints.
    let terms = ball.between(h1.frame, h2.frame).len() + cuts.len();
    let mse = sse / terms as f64;
    if mse > params.mse_threshold {
        return Err(BallError::SegmentRejected {
            h1: h1.frame,
            h2: h2.frame,
            mse,
            threshold: params.mse_threshold,
        });
    }
    let plane = AxisPlane::table(table);
    let build = |cuts: &[usize]| -> Result<(Vec<BounceEvent>, Vec<FittedSegment>, f64), BallError> {
        let mut bounces = Vec::with_capacity(cuts.len());
        for &c in cuts {
            let q = ball.get(c).ok_or(BallError::NoBounceFound(h1.frame, h2.frame))?;
            bounces.push(BounceEvent {
                frame: c,
                position: camera.inverse_project_to_plane(&q, plane)?,
            });
        }
        let mut anchors = vec![(h1.frame, a)];
        anchors.extend(bounces.iter().map(|e| (e.frame, e.position)));
        anchors.push((h2.frame, b));
        let segments = anchors
            .windows(2)
            .map(|w| fit_piece(ball, camera, fps, w[0], w[1]))
            .collect::<Result<Vec<_>, _>>()?;
        let cost = segments.iter().map(|s| s.drag.sse).sum();
        Ok((bounces, segments, cost))
    };
    let mut cuts = cuts;
    let mut best = build(&cuts)?;
    let r = params.refine_radius as isize;
    let mut changed = r > 0;
    while changed {
        changed = false;
        for i in 0..cuts.len() {
            let lo = if i == 0 { h1.frame } else { cuts[i - 1] };
            let hi = if i + 1 == cuts.len() { h2.frame } else { cuts[i + 1] };
            for d in -r..=r {
                let c = cuts[i] as isize + d;
                if d == 0 || c <= lo as isize + 1 || c + 1 >= hi as isize {
                    continue;
                }
                let mut trial = cuts.clone();
                trial[i] = c as usize;
                if let Ok(cand) = build(&trial) {
                    if cand.2 < best.2 {
                        best = cand;
                        cuts = trial;
                        changed = true;
                    }
                }
            }
        }
    }
    let (bounces, segments, _) = best;
    Ok(PairReconstruction {
        h1: h1.frame,
        h2: h2.frame,
        bounces,
        segments,
        split_sse: sse,
        split_mse: mse,
    })
}

/// Shifts each hit by up to `hit_refine_radius` frames to minimise the
/// drag-fit reprojection error of the pairs it bounds. `hand_at` supplies
/// the racket hand of a player at a frame. Hits keep their order and
/// players.
#[allow(clippy::too_many_arguments)]
pub fn refine_hits<H>(
    ball: &BallTrack2D,
    hits: &[HitEvent],
    hand_at: H,
    camera: &Camera,
    table: &TableGeometry,
    fps: f64,
    params: &ReconParams,
) -> Vec<HitEvent>
where
    H: Fn(usize, Player) -> Option<Vec3>,
{
    let mut hits = hits.to_vec();
    let r = params.hit_refine_radius as isize;
    if r == 0 || hits.len() < 2 {
        return hits;
    }
    let loose = ReconParams {
        mse_threshold: f64::INFINITY,
        ..*params
    };
    let pair_cost = |hits: &[HitEvent], i: usize| -> f64 {
        match reconstruct_pair(ball, &hits[i], &hits[i + 1], i == 0 && params.first_is_serve, camera, table, fps, &loose) {
            Ok(p) => p.segments.iter().map(|s| s.drag.sse).sum(),
            Err(_) => f64::INFINITY,
        }
    };
    let local = |hits: &[HitEvent], i: usize| -> f64 {
        let mut c = 0.0;
        if i > 0 {
            c += pair_cost(hits, i - 1);
        }
        if i + 1 < hits.len() {
            c += pair_cost(hits, i);
        }
        c
    };
    let min_sep = params.detection.min_gap_frames.max(1);
    for _ in 0..3 {
        let mut changed = false;
        for i in 0..hits.len() {
            let mut best = local(&hits, i);
            let original = hits[i];
            let mut chosen = original;
            for d in -r..=r {
                let f = original.frame as isize + d;
                if d == 0 || f < 0 {
                    continue;
                }
                let f = f as usize;
                if (i > 0 && f < hits[i - 1].frame + min_sep) || (i + 1 < hits.len() && f + min_sep > hits[i + 1].frame) {
                    continue;
                }
                let Some(hand) = hand_at(f, original.player) else { continue };
                hits[i] = HitEvent { frame: f, player: original.player, hand_world: Some(hand) };
                let c = local(&hits, i);
                if c < best {
                    best = c;
                    chosen = hits[i];
                }
            }
            hits[i] = chosen;
            changed |= chosen != original;
        }
        if !changed {
            break;
        }
    }
    hits
}

/// Reconstructs every consecutive hit pair. Pairs are independent and run
/// through [`par::map_range`].
pub fn reconstruct_trajectory(
    ball: &BallTrack2D,
    hits: &[HitEvent],
    camera: &Camera,
    table: &TableGeometry,
    fps: f64,
    params: &ReconParams,
) -> Result<Trajectory, BallError> {
    if hits.len() < 2 {
        return Err(BallError::NotEnoughHits(hits.len()));
    }
    let pairs = par::map_range(hits.len() - 1, |i| {
        reconstruct_pair(
            ball,
            &hits[i],
            &hits[i + 1],
            i == 0 && params.first_is_serve,
            camera,
            table,
            fps,
            params,
        )
    });
    Ok(Trajectory {
        fps,
        pairs: pairs.into_iter().collect::<Result<_, _>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn track_from(f: impl Fn(usize) -> f64, frames: std::ops::RangeInclusive<usize>) -> BallTrack2D {
        BallTrack2D::new(frames.map(|i| (i, ImagePoint::new(i as f64, f(i)))).collect()).unwrap()
    }

    fn camera() -> Camera {
        Camera::looking_along_x(
            Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 60.0 },
            Vec3::new(-7.0, 0.1, 1.9),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn track_rejects_unsorted() {
        let p = ImagePoint::default();
        assert_eq!(BallTrack2D::new(vec![(3, p), (3, p)]), Err(BallError::NotIncreasing(1)));
    }

    #[test]
    fn stokes_endpoints_and_midpoint() {
        let seg = StokesSegment::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 2.0, 0.76), 0.4, 2.0 * 2f64.ln() / 0.4)
            .unwrap();
        assert_eq!(seg.position(0.0).unwrap(), seg.b0);
        assert_eq!(seg.position(0.4).unwrap(), seg.bt);
        assert_abs_diff_eq!(seg.position(0.2).unwrap().x, 2.0 / 3.0, epsilon = 1e-12);
        assert!(matches!(seg.position(0.41), Err(BallError::OutOfRange { .. })));
        assert!(matches!(seg.position(-1e-9), Err(BallError::OutOfRange { .. })));
    }

    #[test]
    fn stokes_small_drag_limit() {
        let (b0, bt, t_total) = (Vec3::new(-1.3, 0.2, 1.0), Vec3::new(0.9, -0.3, 0.76), 0.5);
        let seg = StokesSegment::new(b0, bt, t_total, 1e-8).unwrap();
        for i in 0..=10 {
            let t = t_total * i as f64 / 10.0;
            let z = b0.z + (bt.z - b0.z) * t / t_total + 0.5 * GRAVITY * t * (t_total - t);
            assert_abs_diff_eq!(seg.eval(t).z, z, epsilon = 1e-6);
        }
    }

    #[test]
    fn stokes_velocity_is_derivative() {
        let seg = StokesSegment::new(Vec3::new(-1.3, 0.2, 1.0), Vec3::new(0.9, -0.3, 0.76), 0.5, 0.7).unwrap();
        let h = 1e-6;
        for t in [0.05, 0.25, 0.45] {
            let fd = (seg.eval(t + h) - seg.eval(t - h)) / (2.0 * h);
            assert!((fd - seg.velocity(t)).norm() < 1e-6);
        }
    }

    #[test]
    fn flight_matches_segment() {
        let seg = StokesSegment::new(Vec3::new(-1.3, 0.2, 1.0), Vec3::new(0.9, -0.3, 0.76), 0.5, 0.7).unwrap();
        let fl = Flight::new(seg.b0, seg.velocity(0.0), seg.k);
        for t in [0.0, 0.1, 0.3, 0.5] {
            assert!((fl.position(t) - seg.eval(t)).norm() < 1e-12);
            assert!((fl.velocity(t) - seg.velocity(t)).norm() < 1e-12);
        }
        let t = fl.first_crossing(|p| p.z - 0.76, 0.01, 2.0).unwrap();
        assert_abs_diff_eq!(fl.position(t).z, 0.76, epsilon = 1e-9);
    }

    #[test]
    fn parabola_exact_and_rank_deficient() {
        let s: Vec<_> = (0..10).map(|i| (i as f64, (i * i) as f64)).collect();
        let p = fit_parabola(&s).unwrap();
        assert!(p.mse <= 1e-18, "{}", p.mse);
        assert!(matches!(fit_parabola(&s[..2]), Err(BallError::FitFailed(2, 2))));
        let dup = [(1.0, 0.0), (1.0, 1.0), (2.0, 3.0), (2.0, 0.0)];
        assert!(matches!(fit_parabola(&dup), Err(BallError::FitFailed(4, 2))));
    }

    #[test]
    fn parabola_matches_normal_equations() {
        let mut rng = crate::rng::stream(17, 0);
        for _ in 0..50 {
            let n = rng.random_range(3..30);
            let s: Vec<(f64, f64)> = (0..n)
                .map(|i| (i as f64 + rng.random_range(0.0..0.5), rng.random_range(-50.0..50.0)))
                .collect();
            let p = fit_parabola(&s).unwrap();
            let mut ata = nalgebra::Matrix3::<f64>::zeros();
            let mut atb = nalgebra::Vector3::<f64>::zeros();
            for (t, v) in &s {
                let r = nalgebra::Vector3::new(1.0, *t, t * t);
                ata += r * r.transpose();
                atb += r * *v;
            }
            let c = ata.lu().solve(&atb).unwrap();
            for i in 0..3 {
                assert!((p.coeffs[i] - c[i]).abs() <= 1e-10 * (1.0 + c[i].abs()), "{:?} {:?}", p.coeffs, c);
            }
        }
    }

    fn two_piece(bounce: usize) -> BallTrack2D {
        track_from(
            |i| {
                if i <= bounce {
                    300.0 - 0.2 * (i as f64 - 15.0).powi(2)
                } else {
                    let t = (i - bounce) as f64;
                    300.0 - 0.2 * (bounce as f64 - 15.0).powi(2) - 4.0 * t + 0.12 * t * t
                }
            },
            0..=70,
        )
    }

    #[test]
    fn select_bounce_finds_true_split() {
        let ball = two_piece(40);
        assert_eq!(select_bounce(&ball, 0, 70, &[38, 40, 43]).unwrap().0, 40);
        assert_eq!(select_bounce(&ball, 0, 70, &[43]).unwrap().0, 43);
        assert_eq!(select_bounce(&ball, 0, 70, &[]), Err(BallError::NoBounceFound(0, 70)));
        // Candidates too close to an end are skipped.
        assert_eq!(select_bounce(&ball, 0, 70, &[1, 69]), Err(BallError::NoBounceFound(0, 70)));
    }

    #[test]
    fn select_bounce_ties_break_early() {
        let ball = track_from(|i| 2.0 * i as f64, 0..=30);
        assert_eq!(select_bounce(&ball, 0, 30, &[20, 10, 15]).unwrap().0, 10);
    }

    #[test]
    fn serve_pair_selection() {
        let ball = track_from(
            |i| {
                let t = i as f64;
                if i <= 25 {
                    100.0 + 0.1 * t * t
                } else if i <= 50 {
                    let u = t - 25.0;
                    162.5 - 3.0 * u + 0.1 * u * u
                } else {
                    let u = t - 50.0;
                    150.0 - 2.0 * u + 0.05 * u * u
                }
            },
            0..=80,
        );
        assert_eq!(select_serve_bounces(&ball, 0, 80, &[20, 25, 33, 50, 60]).unwrap().0, (25, 50));
        assert_eq!(select_serve_bounces(&ball, 0, 80, &[33, 60]).unwrap().0, (33, 60));
        assert_eq!(select_serve_bounces(&ball, 0, 80, &[25]), Err(BallError::NoBounceFound(0, 80)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn restricted_argmin_matches_exhaustive(bounce in 10usize..50, seed in 0u64..1000) {
            let clean = two_piece(bounce);
            let mut rng = crate::rng::stream(seed, 5);
            let noisy = BallTrack2D::new(clean.samples().iter()
                .map(|(f, p)| (*f, ImagePoint::new(p.u, p.v + rng.random_range(-0.5..0.5))))
                .collect()).unwrap();
            let all: Vec<usize> = (1..70).collect();
            let brute = all.iter()
                .filter(|&&c| admissible(&noisy, 0, c, 70))
                .map(|&c| (c, piecewise_sse(&noisy, 0, &[c], 70).unwrap()))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            let got = select_bounce(&noisy, 0, 70, &all).unwrap();
            prop_assert_eq!(got.0, brute.0);
            let restricted: Vec<usize> = all.iter().copied().filter(|&c| c.abs_diff(brute.0) <= 3).collect();
            prop_assert_eq!(select_bounce(&noisy, 0, 70, &restricted).unwrap().0, brute.0);
        }

        #[test]
        fn stokes_endpoint_identity(
            k in 1e-6f64..10.0, dur in 0.01f64..3.0,
            x0 in -3.0f64..3.0, z0 in 0.0f64..3.0, xt in -3.0f64..3.0, zt in 0.0f64..3.0,
        ) {
            let seg = StokesSegment::new(Vec3::new(x0, 0.1, z0), Vec3::new(xt, -0.2, zt), dur, k).unwrap();
            prop_assert!((seg.eval(0.0) - seg.b0).norm() <= 1e-12);
            prop_assert!((seg.eval(dur) - seg.bt).norm() <= 1e-12);
        }

        #[test]
        fn stokes_horizontal_monotone(k in 1e-4f64..10.0, dur in 0.05f64..2.0) {
            let seg = StokesSegment::new(Vec3::new(-1.0, 0.5, 1.0), Vec3::new(1.0, -0.5, 0.76), dur, k).unwrap();
            let mut prev = seg.eval(0.0);
            for i in 1..=50 {
                let p = seg.eval(dur * i as f64 / 50.0);
                prop_assert!(p.x > prev.x && p.y < prev.y);
                prev = p;
            }
        }
    }

    #[test]
    fn hits_from_distance_minima() {
        let ball = track_from(|_| 100.0, 0..=100);
        let mk = |f: usize, near: f64, far: f64| {
            (f, [Some(ImagePoint::new(f as f64 + near, 100.0)), Some(ImagePoint::new(f as f64 + far, 100.0))])
        };
        let rackets: Vec<_> = (0..=100)
            .map(|f| {
                let near = (f as f64 - 20.0).abs() * 3.0;
                let far = (f as f64 - 60.0).abs() * 3.0;
                mk(f, near, far)
            })
            .collect();
        let p = DetectionParams { min_gap_frames: 5, ..DetectionParams::for_fps(30.0) };
        let hits = detect_hits(&ball, &rackets, &p);
        let got: Vec<_> = hits.iter().map(|h| (h.frame, h.player)).collect();
        assert_eq!(got, vec![(20, Player::Near), (60, Player::Far)]);

        let far_away: Vec<_> = (0..=100).map(|f| mk(f, 500.0, 500.0)).collect();
        assert!(detect_hits(&ball, &far_away, &p).is_empty());
    }

    #[test]
    fn close_minima_keep_deeper() {
        let ball = track_from(|_| 0.0, 0..=40);
        let dist = |f: usize| -> f64 {
            match f {
                19 => 8.0,
                20 => 5.0,
                21 => 8.0,
                22 => 6.0,
                23 => 2.0,
                24 => 6.0,
                _ => 25.0,
            }
        };
        let rackets: Vec<_> = (0..=40)
            .map(|f| (f, [Some(ImagePoint::new(f as f64, dist(f))), None]))
            .collect();
        let p = DetectionParams {
            hit_smoothing: 1,
            min_gap_frames: 5,
            ..DetectionParams::for_fps(30.0)
        };
        let hits = detect_hits(&ball, &rackets, &p);
        assert_eq!(hits.iter().map(|h| h.frame).collect::<Vec<_>>(), vec![23]);
    }

    fn segment_obs(seg: &StokesSegment, cam: &Camera, fps: f64) -> Vec<(f64, ImagePoint)> {
        let n = (seg.duration * fps).round() as usize;
        (0..=n)
            .map(|i| {
                let t = i as f64 / fps;
                (t, cam.project(&seg.eval(t)).unwrap())
            })
            .collect()
    }

    #[test]
    fn drag_recovered_from_noiseless_projection() {
        let cam = camera();
        let seg = StokesSegment::new(Vec3::new(-1.6, 0.3, 1.0), Vec3::new(0.8, -0.4, 0.76), 0.5, 0.25).unwrap();
        let fit = fit_drag(&seg.b0, &seg.bt, seg.duration, &segment_obs(&seg, &cam, 60.0), &cam);
        assert!((fit.k - 0.25).abs() < 1e-3, "{fit:?}");
        assert!(fit.warning.is_none());
    }

    #[test]
    fn drag_without_interior_samples() {
        let cam = camera();
        let seg = StokesSegment::new(Vec3::new(-1.6, 0.3, 1.0), Vec3::new(0.8, -0.4, 0.76), 0.5, 0.25).unwrap();
        let obs: Vec<_> = segment_obs(&seg, &cam, 60.0).into_iter().filter(|(t, _)| *t == 0.0 || *t == 0.5).collect();
        let fit = fit_drag(&seg.b0, &seg.bt, seg.duration, &obs, &cam);
        assert_eq!(fit.k, K_MIN);
        assert_eq!(fit.warning, Some(DragWarning::Uninformative));
    }

    #[test]
    fn drag_fit_beats_grid() {
        let cam = camera();
        let mut rng = crate::rng::stream(23, 0);
        let seg = StokesSegment::new(Vec3::new(-1.6, 0.3, 1.0), Vec3::new(0.8, -0.4, 0.76), 0.45, 1.7).unwrap();
        let obs: Vec<_> = segment_obs(&seg, &cam, 60.0)
            .into_iter()
            .map(|(t, q)| (t, ImagePoint::new(q.u + rng.random_range(-1.0..1.0), q.v + rng.random_range(-1.0..1.0))))
            .collect();
        let fit = fit_drag(&seg.b0, &seg.bt, seg.duration, &obs, &cam);
        let mut k = K_MIN;
        while k <= K_MAX {
            let f = drag_objective(&seg.b0, &seg.bt, seg.duration, k, &obs, &cam);
            assert!(fit.sse <= f + 1e-9, "k={k}: {f} < {}", fit.sse);
            k += 1e-4;
        }
    }

    #[test]
    fn missing_candidates_reject_pair() {
        let cam = camera();
        let table = TableGeometry::ittf();
        let ball = track_from(|_| 100.0, 0..=4);
        let hits = [
            HitEvent { frame: 0, player: Player::Near, hand_world: Some(Vec3::new(-1.5, 0.0, 1.0)) },
            HitEvent { frame: 4, player: Player::Far, hand_world: Some(Vec3::new(1.5, 0.0, 1.0)) },
        ];
        let params = ReconParams { first_is_serve: false, ..ReconParams::for_fps(60.0) };
        assert_eq!(
            reconstruct_trajectory(&ball, &hits, &cam, &table, 60.0, &params),
            Err(BallError::NoBounceFound(0, 4))
        );
        let no_hand = [hits[0], HitEvent { hand_world: None, ..hits[1] }];
        assert_eq!(
            reconstruct_trajectory(&ball, &no_hand, &cam, &table, 60.0, &params),
            Err(BallError::MissingHand(4))
        );
    }
}
