//! Ensemble forecasts of the ball after an opponent's hit, conformal
//! confidence regions around them, and the coverage, width and extreme-hit
//! analyses run on those regions.
//!
//! Every exchange is put in a canonical frame where the ego (the player who
//! is about to receive) is the near player, so the ego's hitting plane is at
//! `x = -L/2` and the opponent stands at `x > 0`.

use crate::ball::{Flight, StokesSegment};
use crate::model::{extract_exchanges, Frame3D, ModelError, Player, Point, TableGeometry, Vec3};
use crate::par;
use crate::rng::{self, domain};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use thiserror::Error;

/// Lower bound applied to ensemble spreads so residuals stay finite.
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const AXES: [char; 3] = ['x', 'y', 'z'];
const FILE_MAGIC: &str = "ttrally-conformal";
const FILE_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnticipateError {
    #[error("ensemble needs at least two members, got {0}")]
    EnsembleTooSmall(usize),
    #[error("no calibration: {0}")]
    NoCalibration(String),
    #[error("{regions} regions but {truths} ground-truth positions")]
    InputMismatch { regions: usize, truths: usize },
    #[error("split leakage: {0}")]
    SplitLeakage(String),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("invalid context: {0}")]
    InvalidContext(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported calibration file version {0}")]
    Version(String),
    #[error("intent prior fit failed: {0}")]
    PriorFit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `frame` seen from `ego`: positions turned half a revolution about the
/// vertical axis when the ego is the far player, and joint sets swapped so
/// index 0 is always the ego.
pub fn canonical_frame(frame: &Frame3D, ego: Player) -> Frame3D {
    let turn = |p: &Vec3| match ego {
        Player::Near => *p,
        Player::Far => Vec3::new(-p.x, -p.y, p.z),
    };
    let ego_j = frame.joints[ego.index()].iter().map(turn).collect();
    let opp_j = frame.joints[ego.other().index()].iter().map(turn).collect();
    Frame3D {
        frame_index: frame.frame_index,
        ball: turn(&frame.ball),
        joints: [ego_j, opp_j],
    }
}

/// Observed history ending `lead` frames before the opponent's hit, in the
/// canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub frames: Vec<Frame3D>,
    /// Frame of the opponent's hit.
    pub hit_frame: usize,
    pub lead: usize,
    pub fps: f64,
}

impl ContextWindow {
    pub fn new(frames: Vec<Frame3D>, hit_frame: usize, lead: usize, fps: f64) -> Result<Self, AnticipateError> {
        let last = frames
            .last()
            .ok_or_else(|| AnticipateError::InvalidContext("empty context".into()))?;
        if lead == 0 || last.frame_index + lead != hit_frame {
            return Err(AnticipateError::InvalidContext(format!(
                "context ends at frame {} but the hit is at {hit_frame} with lead {lead}",
                last.frame_index
            )));
        }
        if frames.windows(2).any(|w| w[1].frame_index != w[0].frame_index + 1) {
            return Err(AnticipateError::InvalidContext("frames are not contiguous".into()));
        }
        if !(fps > 0.0) {
            return Err(AnticipateError::InvalidContext(format!("fps {fps}")));
        }
        Ok(Self { frames, hit_frame, lead, fps })
    }

    pub fn last(&self) -> &Frame3D {
        self.frames.last().expect("non-empty by construction")
    }

    /// Frame `back` steps before the last one, or the earliest available.
    pub fn back(&self, back: usize) -> &Frame3D {
        &self.frames[self.frames.len().saturating_sub(back + 1)]
    }
}

/// One opponent hit with its context and ground truth, canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeSample {
    pub point_id: u64,
    /// Index of the exchange within its point.
    pub exchange: usize,
    /// The ego in the original world frame.
    pub ego: Player,
    pub context: ContextWindow,
    /// Horizons (frames after the hit) with known ball positions.
    pub horizons: Vec<usize>,
    pub truths: Vec<Vec3>,
    /// Ball at the hit.
    pub hit_position: Vec3,
    /// First bounce after the hit: frames after the hit and position.
    pub bounce: Option<(usize, Vec3)>,
    /// First frame at or past the ego's hitting plane, as a horizon, with
    /// the ball position there.
    pub crossing: Option<(usize, Vec3)>,
}

impl ExchangeSample {
    pub fn truth_at(&self, horizon: usize) -> Option<Vec3> {
        let i = self.horizons.binary_search(&horizon).ok()?;
        Some(self.truths[i])
    }
}

/// Builds one sample per exchange of `point` whose context (ending `lead`
/// frames before the opponent's hit) starts after the ego's own hit.
/// Contexts keep at most `history` frames; horizons run up to
/// `max_horizon` but stop at the ego's next hit.
pub fn exchange_samples(
    point: &Point,
    table: &TableGeometry,
    lead: usize,
    history: usize,
    max_horizon: usize,
) -> Result<Vec<ExchangeSample>, AnticipateError> {
    let segments = point.segments()?;
    let mut out = Vec::new();
    for (i, ex) in extract_exchanges(&segments).into_iter().enumerate() {
        let hit = ex.opponent_hit();
        let Some(end) = hit.checked_sub(lead) else { continue };
        if end <= ex.start() {
            continue;
        }
        let start = end.saturating_sub(history.max(2) - 1).max(ex.start());
        let ego = ex.ego;
        let frames: Vec<Frame3D> = (start..=end)
            .map(|f| point.frame(f).map(|fr| canonical_frame(fr, ego)))
            .collect::<Option<_>>()
            .ok_or_else(|| AnticipateError::InvalidContext(format!("point {} lacks frames {start}..={end}", point.id)))?;
        let context = ContextWindow::new(frames, hit, lead, point.fps)?;
        let ball = |f: usize| point.frame(f).map(|fr| canonical_frame(fr, ego).ball);
        let mut horizons = Vec::new();
        let mut truths = Vec::new();
        for h in 1..=max_horizon {
            if hit + h > ex.end() {
                break;
            }
            let Some(b) = ball(hit + h) else { break };
            horizons.push(h);
            truths.push(b);
        }
        let plane = -table.half_length();
        let crossing = (hit + 1..=ex.end())
            .find_map(|f| ball(f).filter(|b| b.x <= plane).map(|b| (f - hit, b)));
        let bounce = point
            .bounces
            .iter()
            .find(|b| b.frame > hit && b.frame < ex.end())
            .and_then(|b| Some((b.frame - hit, ball(b.frame)?)));
        out.push(ExchangeSample {
            point_id: point.id,
            exchange: i,
            ego,
            context,
            horizons,
            truths,
            hit_position: ball(hit).expect("hit frame inside the point"),
            bounce,
            crossing,
        });
    }
    Ok(out)
}

/// Forecast of the canonical ball position some frames after the opponent's
/// hit. Implementations must be deterministic for fixed inputs; any
/// randomness is fixed when the predictor is built from a seed.
pub trait Predictor: Send + Sync {
    /// One position per entry of `horizons` (frames after the hit).
    fn predict(&self, ctx: &ContextWindow, horizons: &[usize]) -> Vec<Vec3>;
}

/// Per-axis ensemble mean and floored population spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOutput {
    pub mean: Vec3,
    pub sigma: Vec3,
}

pub fn ensemble_aggregate(predictions: &[Vec3]) -> Result<EnsembleOutput, AnticipateError> {
    let k = predictions.len();
    if k < 2 {
        return Err(AnticipateError::EnsembleTooSmall(k));
    }
    let mean = predictions.iter().sum::<Vec3>() / k as f64;
    let var = predictions
        .iter()
        .map(|p| (p - mean).component_mul(&(p - mean)))
        .sum::<Vec3>()
        / k as f64;
    Ok(EnsembleOutput {
        mean,
        sigma: var.map(|v| v.sqrt().max(SIGMA_FLOOR)),
    })
}

/// Aggregated output of `members` at each horizon.
pub fn ensemble_forecast<P: Predictor>(
    members: &[P],
    ctx: &ContextWindow,
    horizons: &[usize],
) -> Result<Vec<EnsembleOutput>, AnticipateError> {
    if members.len() < 2 {
        return Err(AnticipateError::EnsembleTooSmall(members.len()));
    }
    let per_member: Vec<Vec<Vec3>> = members.iter().map(|m| m.predict(ctx, horizons)).collect();
    (0..horizons.len())
        .map(|i| {
            let preds: Vec<Vec3> = per_member.iter().map(|m| m[i]).collect();
            ensemble_aggregate(&preds)
        })
        .collect()
}

/// Normalised absolute error of `y` along `axis`.
pub fn residual(y: f64, out: &EnsembleOutput, axis: usize) -> f64 {
    (y - out.mean[axis]).abs() / out.sigma[axis]
}

/// Rank `ceil((n + 1)(1 - alpha))` of `n` calibration residuals. Values
/// within `1e-9` of an integer count as that integer, so binary rounding of
/// `alpha` cannot push the rank up by one.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Conformal quantile of `residuals` at level `alpha`; `+inf` when the
/// calibration set is too small for the requested level.
pub fn conformal_quantile(residuals: &[f64], alpha: f64) -> Result<f64, AnticipateError> {
    let n = residuals.len();
    if n == 0 {
        return Err(AnticipateError::NoCalibration("empty residual set".into()));
    }
    let rank = conformal_rank(n, alpha);
    if rank > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = residuals.to_vec();
    let (_, q, _) = sorted.select_nth_unstable_by(rank.max(1) - 1, f64::total_cmp);
    Ok(*q)
}

/// Calibration residuals per horizon and axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub lead: usize,
    pub fps: f64,
    pub horizons: Vec<usize>,
    pub residuals: Vec<[Vec<f64>; 3]>,
}

impl ResidualSet {
    pub fn calibrate(&self, alpha: f64) -> Result<ConformalCalibration, AnticipateError> {
        let mut quantiles = Vec::with_capacity(self.horizons.len());
        let mut counts = Vec::with_capacity(self.horizons.len());
        for (h, r) in self.horizons.iter().zip(&self.residuals) {
            let q = [0, 1, 2].map(|a| conformal_quantile(&r[a], alpha));
            let q = match q {
                [Ok(x), Ok(y), Ok(z)] => [x, y, z],
                _ => return Err(AnticipateError::NoCalibration(format!("no residuals at horizon {h}"))),
            };
            quantiles.push(q);
            counts.push(r[0].len());
        }
        Ok(ConformalCalibration {
            alpha,
            lead: self.lead,
            fps: self.fps,
            horizons: self.horizons.clone(),
            quantiles,
            counts,
        })
    }
}

/// Residuals of `members` on the calibration samples at each horizon of
/// `horizons` the sample has ground truth for. Horizons without any sample
/// are dropped.
pub fn calibration_residuals<P: Predictor>(
    members: &[P],
    samples: &[ExchangeSample],
    horizons: &[usize],
) -> Result<ResidualSet, AnticipateError> {
    if members.len() < 2 {
        return Err(AnticipateError::EnsembleTooSmall(members.len()));
    }
    let first = samples
        .first()
        .ok_or_else(|| AnticipateError::NoCalibration("no calibration samples".into()))?;
    let per_sample: Vec<Vec<(usize, [f64; 3])>> = par::map(samples, |s| {
        let hs: Vec<usize> = horizons.iter().copied().filter(|h| s.truth_at(*h).is_some()).collect();
        let outs = ensemble_forecast(members, &s.context, &hs).expect("ensemble size checked");
        hs.iter()
            .zip(outs)
            .map(|(&h, o)| {
                let y = s.truth_at(h).expect("filtered");
                (h, [0, 1, 2].map(|a| residual(y[a], &o, a)))
            })
            .collect()
    });
    let mut by_h: BTreeMap<usize, [Vec<f64>; 3]> = BTreeMap::new();
    for rows in per_sample {
        for (h, r) in rows {
            let e = by_h.entry(h).or_default();
            for a in 0..3 {
                e[a].push(r[a]);
            }
        }
    }
    Ok(ResidualSet {
        lead: first.context.lead,
        fps: first.context.fps,
        horizons: by_h.keys().copied().collect(),
        residuals: by_h.into_values().collect(),
    })
}

/// Conformal quantiles per horizon and axis at one level `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalCalibration {
    pub alpha: f64,
    pub lead: usize,
    pub fps: f64,
    pub horizons: Vec<usize>,
    pub quantiles: Vec<[f64; 3]>,
    /// Calibration residuals behind each horizon's quantiles.
    pub counts: Vec<usize>,
}

impl ConformalCalibration {
    pub fn quantile(&self, horizon: usize) -> Option<[f64; 3]> {
        let i = self.horizons.binary_search(&horizon).ok()?;
        Some(self.quantiles[i])
    }
}

/// Axis-aligned box of per-axis conformal intervals at one horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceRegion {
    pub horizon: usize,
    pub lo: Vec3,
    pub hi: Vec3,
}

impl ConfidenceRegion {
    pub fn contains_axis(&self, p: &Vec3) -> [bool; 3] {
        [0, 1, 2].map(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.contains_axis(p).iter().all(|&b| b)
    }

    pub fn centroid(&self) -> Vec3 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> Vec3 {
        self.hi - self.lo
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(self.hi.iter()).all(|v| v.is_finite())
    }
}

/// Intervals `mean ± q·sigma` per axis.
pub fn build_region(
    out: &EnsembleOutput,
    calib: &ConformalCalibration,
    horizon: usize,
) -> Result<ConfidenceRegion, AnticipateError> {
    let q = calib
        .quantile(horizon)
        .ok_or_else(|| AnticipateError::NoCalibration(format!("horizon {horizon} not calibrated")))?;
    let half = Vec3::from_fn(|a, _| if q[a].is_infinite() { f64::INFINITY } else { q[a] * out.sigma[a] });
    Ok(ConfidenceRegion {
        horizon,
        lo: out.mean - half,
        hi: out.mean + half,
    })
}

/// Regions for `ctx` at every calibrated horizon in `horizons`.
pub fn forecast_regions<P: Predictor>(
    members: &[P],
    calib: &ConformalCalibration,
    ctx: &ContextWindow,
    horizons: &[usize],
) -> Result<Vec<ConfidenceRegion>, AnticipateError> {
    let outs = ensemble_forecast(members, ctx, horizons)?;
    horizons
        .iter()
        .zip(&outs)
        .map(|(&h, o)| build_region(o, calib, h))
        .collect()
}

/// Fraction of truths inside each axis interval and inside the whole box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub per_axis: [f64; 3],
    pub joint: f64,
    pub n: usize,
}

pub fn evaluate_coverage(regions: &[ConfidenceRegion], truths: &[Vec3]) -> Result<Coverage, AnticipateError> {
    if regions.len() != truths.len() {
        return Err(AnticipateError::InputMismatch {
            regions: regions.len(),
            truths: truths.len(),
        });
    }
    let n = regions.len();
    let mut axis = [0usize; 3];
    let mut joint = 0;
    for (r, y) in regions.iter().zip(truths) {
        let inside = r.contains_axis(y);
        for a in 0..3 {
            axis[a] += inside[a] as usize;
        }
        joint += inside.iter().all(|&b| b) as usize;
    }
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(Coverage {
        per_axis: axis.map(frac),
        joint: frac(joint),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageRow {
    pub alpha: f64,
    pub coverage: Coverage,
}

/// Coverage on `test` samples pooled over all calibrated horizons each
/// sample has ground truth for, one row per level.
pub fn coverage_table<P: Predictor>(
    members: &[P],
    residuals: &ResidualSet,
    test: &[ExchangeSample],
    alphas: &[f64],
) -> Result<Vec<CoverageRow>, AnticipateError> {
    let forecasts: Vec<(Vec<usize>, Vec<EnsembleOutput>)> = par::map(test, |s| {
        let hs: Vec<usize> = residuals
            .horizons
            .iter()
            .copied()
            .filter(|h| s.truth_at(*h).is_some())
            .collect();
        let outs = ensemble_forecast(members, &s.context, &hs).expect("ensemble size checked");
        (hs, outs)
    });
    alphas
        .iter()
        .map(|&alpha| {
            let calib = residuals.calibrate(alpha)?;
            let mut regions = Vec::new();
            let mut truths = Vec::new();
            for (s, (hs, outs)) in test.iter().zip(&forecasts) {
                for (&h, o) in hs.iter().zip(outs) {
                    regions.push(build_region(o, &calib, h)?);
                    truths.push(s.truth_at(h).expect("filtered"));
                }
            }
            Ok(CoverageRow {
                alpha,
                coverage: evaluate_coverage(&regions, &truths)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WidthRow {
    pub horizon: usize,
    pub mean_width: [f64; 3],
    pub count: usize,
}

/// Mean interval width `2·q·sigma` per axis at each horizon, over the given
/// ensemble outputs. Horizons without calibration are skipped.
pub fn width_vs_horizon(calib: &ConformalCalibration, outputs: &[(usize, EnsembleOutput)]) -> Vec<WidthRow> {
    let mut acc: BTreeMap<usize, ([f64; 3], usize)> = BTreeMap::new();
    for (h, o) in outputs {
        let Some(q) = calib.quantile(*h) else { continue };
        let e = acc.entry(*h).or_insert(([0.0; 3], 0));
        for (acc_a, (qa, sa)) in e.0.iter_mut().zip(q.iter().zip(o.sigma.iter())) {
            *acc_a += 2.0 * qa * sa;
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(horizon, (sum, count))| WidthRow {
            horizon,
            mean_width: sum.map(|s| s / count as f64),
            count,
        })
        .collect()
}

/// How a region sits across the table at the ego's hitting plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BiasClass {
    OverCovered,
    BiasedRight,
    BiasedLeft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Right,
    Left,
}

fn excluded(lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    let covered = (hi.min(b) - lo.max(a)).max(0.0);
    (b - a) - covered
}

/// Classifies the lateral interval `[lo, hi]`, in ego coordinates where
/// positive is the ego's right, on a table of half width `half_width`.
/// A region is biased right when it leaves out at least a third of the left
/// half, and biased left symmetrically; when both hold the larger exclusion
/// decides and a tie counts as over-covered.
pub fn classify_lateral(lo: f64, hi: f64, half_width: f64) -> BiasClass {
    let third = half_width / 3.0;
    let left_out = excluded(lo, hi, -half_width, 0.0);
    let right_out = excluded(lo, hi, 0.0, half_width);
    match (left_out >= third, right_out >= third) {
        (true, false) => BiasClass::BiasedRight,
        (false, true) => BiasClass::BiasedLeft,
        (true, true) if left_out > right_out => BiasClass::BiasedRight,
        (true, true) if right_out > left_out => BiasClass::BiasedLeft,
        _ => BiasClass::OverCovered,
    }
}

/// Counts of region class against the side the ball actually took.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BiasTable {
    pub counts: BTreeMap<(BiasClass, Side), usize>,
}

impl BiasTable {
    pub fn count(&self, class: BiasClass, side: Side) -> usize {
        self.counts.get(&(class, side)).copied().unwrap_or(0)
    }

    pub fn total(&self, side: Side) -> usize {
        [BiasClass::OverCovered, BiasClass::BiasedRight, BiasClass::BiasedLeft]
            .iter()
            .map(|&c| self.count(c, side))
            .sum()
    }

    /// Share of `side`'s extreme hits falling in `class`.
    pub fn proportion(&self, class: BiasClass, side: Side) -> f64 {
        let t = self.total(side);
        if t == 0 { 0.0 } else { self.count(class, side) as f64 / t as f64 }
    }

    /// Biased regions pointing at the true side, and all biased regions.
    pub fn correct_of_biased(&self) -> (usize, usize) {
        let correct = self.count(BiasClass::BiasedRight, Side::Right) + self.count(BiasClass::BiasedLeft, Side::Left);
        let wrong = self.count(BiasClass::BiasedRight, Side::Left) + self.count(BiasClass::BiasedLeft, Side::Right);
        (correct, correct + wrong)
    }
}

/// Tabulates regions at the ego's hitting plane for extreme hits, those
/// crossing with `|y| > threshold`. Inputs are canonical, where the ego's
/// right is `-y`.
pub fn extreme_hit_bias(cases: &[(ConfidenceRegion, Vec3)], table: &TableGeometry, threshold: f64) -> BiasTable {
    let mut t = BiasTable::default();
    for (r, y) in cases {
        if y.y.abs() <= threshold {
            continue;
        }
        let side = if y.y < 0.0 { Side::Right } else { Side::Left };
        let class = classify_lateral(-r.hi.y, -r.lo.y, table.half_width());
        *t.counts.entry((class, side)).or_insert(0) += 1;
    }
    t
}

/// Wilson score lower bound for `k` successes in `n` trials at normal
/// quantile `z`.
pub fn wilson_lower_bound(k: usize, n: usize, z: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * n);
    let margin = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    (centre - margin) / (1.0 + z2 / n)
}

/// Member perturbations of the physics baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsParams {
    /// Nominal drag coefficient (1/s).
    pub k_nominal: f64,
    pub restitution_z: f64,
    pub restitution_h: f64,
    /// Global scale on every member-specific deviation; zero makes all
    /// members identical.
    pub perturbation: f64,
    /// Log-space spread of member drag.
    pub k_log_sigma: f64,
    pub restitution_sigma: f64,
    /// Frames between the two opponent stance samples used as features.
    pub stance_gap: usize,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            k_nominal: 0.275,
            restitution_z: 0.87,
            restitution_h: 0.75,
            perturbation: 1.0,
            k_log_sigma: 0.3,
            restitution_sigma: 0.03,
            stance_gap: 6,
        }
    }
}

const N_FEATURES: usize = 7;

/// Linear map from context features to where and when the opponent's shot
/// first lands on the ego's half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntentPrior {
    pub bounce_x: [f64; N_FEATURES],
    pub bounce_y: [f64; N_FEATURES],
    pub flight_time: [f64; N_FEATURES],
}

fn dot(c: &[f64; N_FEATURES], f: &[f64; N_FEATURES]) -> f64 {
    c.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// Incoming ball state at the end of the context, from the last two frames
/// under Stokes drag `k`.
fn incoming_state(ctx: &ContextWindow, k: f64) -> (Vec3, Vec3) {
    let b1 = ctx.last().ball;
    let b0 = ctx.back(1).ball;
    let dt = 1.0 / ctx.fps;
    match StokesSegment::new(b0, b1, dt, k) {
        Ok(seg) if ctx.frames.len() >= 2 => (b1, seg.velocity(dt)),
        _ => (b1, Vec3::zeros()),
    }
}

/// Free flight for `duration` seconds with table bounces.
fn fly(p: Vec3, v: Vec3, k: f64, duration: f64, table: &TableGeometry, e: (f64, f64)) -> (Vec3, Vec3) {
    let (mut p, mut v, mut left) = (p, v, duration);
    for _ in 0..4 {
        let flight = Flight::new(p, v, k);
        let above = |q: &Vec3| {
            let over = q.x.abs() <= table.half_length() && q.y.abs() <= table.half_width();
            if over { q.z - table.height } else { 1.0 }
        };
        let hit = if above(&p) > 0.0 {
            flight.first_crossing(above, 1.0 / 240.0, left)
        } else {
            None
        };
        match hit {
            Some(t) if t < left => {
                let q = flight.position(t);
                let w = flight.velocity(t);
                p = Vec3::new(q.x, q.y, table.height);
                v = Vec3::new(e.1 * w.x, e.1 * w.y, -e.0 * w.z);
                left -= t;
            }
            _ => return (flight.position(left), flight.velocity(left)),
        }
    }
    (p, v)
}

/// Predicted ball at the opponent's hit and the regression features.
fn features(ctx: &ContextWindow, k: f64, table: &TableGeometry, e: (f64, f64), gap: usize) -> (Vec3, [f64; N_FEATURES]) {
    let (p, v) = incoming_state(ctx, k);
    let (hit, _) = fly(p, v, k, ctx.lead as f64 / ctx.fps, table, e);
    let opp = Player::Far;
    let root_now = ctx.last().root(opp);
    let root_before = ctx.back(gap).root(opp);
    (
        hit,
        [1.0, root_now.y, root_before.y, hit.y, hit.x, hit.z, root_now.x],
    )
}

fn least_squares(rows: &[[f64; N_FEATURES]], targets: &[f64]) -> Result<[f64; N_FEATURES], AnticipateError> {
    if rows.len() < N_FEATURES {
        return Err(AnticipateError::PriorFit(format!("{} samples for {N_FEATURES} features", rows.len())));
    }
    let a = DMatrix::from_fn(rows.len(), N_FEATURES, |i, j| rows[i][j]);
    let b = DVector::from_column_slice(targets);
    // A tiny ridge keeps collinear stance features solvable.
    let ata = a.transpose() * &a + DMatrix::identity(N_FEATURES, N_FEATURES) * 1e-9;
    let atb = a.transpose() * b;
    let x = ata
        .cholesky()
        .ok_or_else(|| AnticipateError::PriorFit("normal equations not positive definite".into()))?
        .solve(&atb);
    let mut out = [0.0; N_FEATURES];
    out.copy_from_slice(x.as_slice());
    Ok(out)
}

/// Fits the intent prior on training samples with a known first bounce.
pub fn fit_intent_prior(
    samples: &[ExchangeSample],
    table: &TableGeometry,
    params: &PhysicsParams,
) -> Result<IntentPrior, AnticipateError> {
    let e = (params.restitution_z, params.restitution_h);
    let mut rows = Vec::new();
    let (mut bx, mut by, mut bt) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        let Some((frames, pos)) = s.bounce else { continue };
        let (_, f) = features(&s.context, params.k_nominal, table, e, params.stance_gap);
        rows.push(f);
        bx.push(pos.x);
        by.push(pos.y);
        bt.push(frames as f64 / s.context.fps);
    }
    Ok(IntentPrior {
        bounce_x: least_squares(&rows, &bx)?,
        bounce_y: least_squares(&rows, &by)?,
        flight_time: least_squares(&rows, &bt)?,
    })
}

/// One ensemble member: propagates the incoming ball to the opponent's hit,
/// aims the return with its intent prior and flies it with its own drag and
/// restitution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsMember {
    pub prior: IntentPrior,
    pub k: f64,
    pub restitution_z: f64,
    pub restitution_h: f64,
    pub stance_gap: usize,
    pub table: TableGeometry,
}

impl Predictor for PhysicsMember {
    fn predict(&self, ctx: &ContextWindow, horizons: &[usize]) -> Vec<Vec3> {
        let e = (self.restitution_z, self.restitution_h);
        let (hit, f) = features(ctx, self.k, &self.table, e, self.stance_gap);
        let bounce = Vec3::new(dot(&self.prior.bounce_x, &f), dot(&self.prior.bounce_y, &f), self.table.height);
        let duration = dot(&self.prior.flight_time, &f).clamp(4.0 / ctx.fps, 1.5);
        let Ok(seg) = StokesSegment::new(hit, bounce, duration, self.k) else {
            return vec![hit; horizons.len()];
        };
        let w = seg.velocity(duration);
        let after = Flight::new(bounce, Vec3::new(e.1 * w.x, e.1 * w.y, -e.0 * w.z), self.k);
        horizons
            .iter()
            .map(|&h| {
                let t = h as f64 / ctx.fps;
                if t <= duration { seg.eval(t) } else { after.position(t - duration) }
            })
            .collect()
    }
}

/// Builds `k_members` physics members. Member `j` fits its intent prior on
/// the training samples whose point id is `j` modulo `k_members`, pulled
/// towards the pooled fit by `1 - perturbation`, and draws its drag and
/// restitution from a seeded stream.
pub fn physics_baseline_ensemble(
    seed: u64,
    k_members: usize,
    params: &PhysicsParams,
    train: &[ExchangeSample],
    table: &TableGeometry,
) -> Result<Vec<PhysicsMember>, AnticipateError> {
    if k_members < 2 {
        return Err(AnticipateError::EnsembleTooSmall(k_members));
    }
    let pooled = fit_intent_prior(train, table, params)?;
    let s = params.perturbation;
    let blend = |a: &[f64; N_FEATURES], b: &[f64; N_FEATURES]| -> [f64; N_FEATURES] {
        std::array::from_fn(|i| a[i] + s * (b[i] - a[i]))
    };
    (0..k_members)
        .map(|j| {
            let subset: Vec<ExchangeSample> = train
                .iter()
                .filter(|x| x.point_id % k_members as u64 == j as u64)
                .cloned()
                .collect();
            let own = if s == 0.0 { pooled } else { fit_intent_prior(&subset, table, params)? };
            let mut rng = rng::tagged(seed, domain::ENSEMBLE, j as u64);
            let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
            let (zk, zr, zh) = (z(), z(), z());
            Ok(PhysicsMember {
                prior: IntentPrior {
                    bounce_x: blend(&pooled.bounce_x, &own.bounce_x),
                    bounce_y: blend(&pooled.bounce_y, &own.bounce_y),
                    flight_time: blend(&pooled.flight_time, &own.flight_time),
                },
                k: params.k_nominal * (s * params.k_log_sigma * zk).exp(),
                restitution_z: (params.restitution_z + s * params.restitution_sigma * zr).clamp(0.1, 1.0),
                restitution_h: (params.restitution_h + s * params.restitution_sigma * zh).clamp(0.1, 1.0),
                stance_gap: params.stance_gap,
                table: *table,
            })
        })
        .collect()
}

/// Dataset partition a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Cal,
    Test,
}

/// Point-id ranges of the three partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<u64>,
    pub cal: Range<u64>,
    pub test: Range<u64>,
}

impl SplitSpec {
    pub fn assign(&self, id: u64) -> Option<Split> {
        if self.train.contains(&id) {
            Some(Split::Train)
        } else if self.cal.contains(&id) {
            Some(Split::Cal)
        } else if self.test.contains(&id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "train:{}..{};cal:{}..{};test:{}..{}",
            self.train.start, self.train.end, self.cal.start, self.cal.end, self.test.start, self.test.end
        )
    }
}

/// Parses `train:a..b;cal:c..d;test:e..f`. Ranges are half-open point-id
/// intervals and must not overlap.
pub fn parse_split_spec(spec: &str) -> Result<SplitSpec, AnticipateError> {
    let mut parts: BTreeMap<&str, Range<u64>> = BTreeMap::new();
    for item in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, range) = item
            .split_once(':')
            .ok_or_else(|| AnticipateError::InvalidSplit(format!("`{item}` lacks a name")))?;
        let (a, b) = range
            .split_once("..")
            .ok_or_else(|| AnticipateError::InvalidSplit(format!("`{range}` is not a range")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| AnticipateError::InvalidSplit(format!("`{s}`: {e}")))
        };
        let r = parse(a)?..parse(b)?;
        if r.is_empty() {
            return Err(AnticipateError::InvalidSplit(format!("{name} range is empty")));
        }
        if !matches!(name.trim(), "train" | "cal" | "test") {
            return Err(AnticipateError::InvalidSplit(format!("unknown partition `{name}`")));
        }
        if parts.insert(name.trim(), r).is_some() {
            return Err(AnticipateError::InvalidSplit(format!("{name} given twice")));
        }
    }
    let take = |n: &str, parts: &BTreeMap<&str, Range<u64>>| {
        parts
            .get(n)
            .cloned()
            .ok_or_else(|| AnticipateError::InvalidSplit(format!("missing {n} range")))
    };
    let spec = SplitSpec {
        train: take("train", &parts)?,
        cal: take("cal", &parts)?,
        test: take("test", &parts)?,
    };
    let named = [("train", &spec.train), ("cal", &spec.cal), ("test", &spec.test)];
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (named[i].1, named[j].1);
            if a.start < b.end && b.start < a.end {
                return Err(AnticipateError::SplitLeakage(format!(
                    "{} and {} share point ids {}..{}",
                    named[i].0,
                    named[j].0,
                    a.start.max(b.start),
                    a.end.min(b.end)
                )));
            }
        }
    }
    Ok(spec)
}

/// Writes calibrations (one per level) as text: a header line, then one
/// `alpha axis horizon qhat n` row per entry. Infinite quantiles are `inf`.
pub fn format_calibration(calibs: &[ConformalCalibration], meta: &BTreeMap<String, String>) -> String {
    let mut s = format!("{FILE_MAGIC} {FILE_VERSION}");
    if let Some(c) = calibs.first() {
        let _ = write!(s, " lead={} fps={}", c.lead, c.fps);
    }
    for (k, v) in meta {
        let _ = write!(s, " {k}={v}");
    }
    s.push('\n');
    s.push_str("alpha\taxis\thorizon\tqhat\tn\n");
    for c in calibs {
        for (i, h) in c.horizons.iter().enumerate() {
            for (a, axis) in AXES.iter().enumerate() {
                let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", c.alpha, axis, h, c.quantiles[i][a], c.counts[i]);
            }
        }
    }
    s
}

/// Parses [`format_calibration`] output; returns the calibrations in order
/// of first appearance and the header metadata.
pub fn parse_calibration(
    text: &str,
) -> Result<(Vec<ConformalCalibration>, BTreeMap<String, String>), AnticipateError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(AnticipateError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(FILE_MAGIC) {
        return Err(AnticipateError::Parse {
            line: 1,
            message: "not a conformal calibration file".into(),
        });
    }
    match toks.next() {
        Some(FILE_VERSION) => {}
        other => return Err(AnticipateError::Version(other.unwrap_or("").into())),
    }
    let mut meta = BTreeMap::new();
    for t in toks {
        let (k, v) = t.split_once('=').ok_or(AnticipateError::Parse {
            line: 1,
            message: format!("bad header field `{t}`"),
        })?;
        meta.insert(k.to_string(), v.to_string());
    }
    let num = |key: &str| -> Result<f64, AnticipateError> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or(AnticipateError::Parse {
                line: 1,
                message: format!("missing or bad `{key}`"),
            })
    };
    let lead = num("lead")? as usize;
    let fps = num("fps")?;
    let mut order: Vec<u64> = Vec::new();
    let mut rows: BTreeMap<u64, BTreeMap<usize, ([f64; 3], usize)>> = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with("alpha") {
            continue;
        }
        let err = |m: &str| AnticipateError::Parse {
            line: line_no,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err("expected 5 tab-separated fields"));
        }
        let alpha: f64 = f[0].parse().map_err(|_| err("bad alpha"))?;
        let axis = AXES
            .iter()
            .position(|c| f[1] == c.to_string())
            .ok_or_else(|| err("bad axis"))?;
        let h: usize = f[2].parse().map_err(|_| err("bad horizon"))?;
        let q: f64 = f[3].parse().map_err(|_| err("bad quantile"))?;
        let n: usize = f[4].parse().map_err(|_| err("bad count"))?;
        if !(q >= 0.0) {
            return Err(err("negative quantile"));
        }
        let key = alpha.to_bits();
        if !order.contains(&key) {
            order.push(key);
        }
        let e = rows.entry(key).or_default().entry(h).or_insert(([f64::NAN; 3], n));
        e.0[axis] = q;
        e.1 = n;
    }
    let mut out = Vec::new();
    for key in order {
        let per_h = &rows[&key];
        if per_h.values().any(|(q, _)| q.iter().any(|v| v.is_nan())) {
            return Err(AnticipateError::Parse {
                line: 0,
                message: format!("incomplete axes for alpha {}", f64::from_bits(key)),
            });
        }
        out.push(ConformalCalibration {
            alpha: f64::from_bits(key),
            lead,
            fps,
            horizons: per_h.keys().copied().collect(),
            quantiles: per_h.values().map(|v| v.0).collect(),
            counts: per_h.values().map(|v| v.1).collect(),
        });
    }
    Ok((out, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, RallyParams};
    use proptest::prelude::*;

    fn v(x: f64) -> Vec3 {
        Vec3::new(x, 0.0, 0.0)
    }

    fn corpus_samples(n: usize, lead: usize) -> Vec<ExchangeSample> {
        let table = TableGeometry::ittf();
        generate_corpus(0, n, 11, &RallyParams::default(), &table)
            .iter()
            .flat_map(|r| exchange_samples(&r.point, &table, lead, 24, 40).unwrap())
            .collect()
    }

    #[test]
    fn aggregate_two_points() {
        let out = ensemble_aggregate(&[v(1.0), v(3.0)]).unwrap();
        assert_eq!(out.mean.x, 2.0);
        assert_eq!(out.sigma.x, 1.0);
        assert_eq!(out.sigma.y, SIGMA_FLOOR);
    }

    #[test]
    fn aggregate_identical_hits_floor() {
        let out = ensemble_aggregate(&[Vec3::new(1.0, 2.0, 3.0); 4]).unwrap();
        assert_eq!(out.sigma, Vec3::repeat(SIGMA_FLOOR));
    }

    #[test]
    fn aggregate_needs_two() {
        assert_eq!(ensemble_aggregate(&[v(1.0)]), Err(AnticipateError::EnsembleTooSmall(1)));
    }

    proptest! {
        #[test]
        fn aggregate_matches_direct_formula(xs in prop::collection::vec(-5.0f64..5.0, 15)) {
            let preds: Vec<Vec3> = xs.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            let out = ensemble_aggregate(&preds).unwrap();
            for a in 0..3 {
                let vals: Vec<f64> = preds.iter().map(|p| p[a]).collect();
                let m = vals.iter().sum::<f64>() / 5.0;
                let s = (vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0).sqrt().max(SIGMA_FLOOR);
                prop_assert!((out.mean[a] - m).abs() < 1e-12);
                prop_assert!((out.sigma[a] - s).abs() < 1e-12);
            }
        }

        #[test]
        fn quantile_matches_sort_oracle(
            res in prop::collection::vec(0.0f64..10.0, 1..200),
            pct in 5u32..=50,
        ) {
            let alpha = pct as f64 / 100.0;
            let n = res.len();
            // Integer form of ceil((n + 1)(1 - alpha)).
            let num = (n as u64 + 1) * (100 - pct as u64);
            let rank = num.div_ceil(100) as usize;
            let mut sorted = res.clone();
            sorted.sort_by(f64::total_cmp);
            let expected = if rank > n { f64::INFINITY } else { sorted[rank - 1] };
            prop_assert_eq!(conformal_quantile(&res, alpha).unwrap(), expected);
        }

        #[test]
        fn quantile_monotone_in_alpha(res in prop::collection::vec(0.0f64..10.0, 1..100)) {
            let qs: Vec<f64> = (1..10).map(|i| conformal_quantile(&res, i as f64 * 0.05).unwrap()).collect();
            prop_assert!(qs.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn region_scales_with_sigma(s in 0.01f64..3.0, q in 0.0f64..4.0, m in -2.0f64..2.0) {
            let calib = ConformalCalibration {
                alpha: 0.1, lead: 1, fps: 60.0, horizons: vec![3], quantiles: vec![[q; 3]], counts: vec![10],
            };
            let r1 = build_region(&EnsembleOutput { mean: Vec3::repeat(m), sigma: Vec3::repeat(s) }, &calib, 3).unwrap();
            let r2 = build_region(&EnsembleOutput { mean: Vec3::repeat(m), sigma: Vec3::repeat(2.0 * s) }, &calib, 3).unwrap();
            prop_assert!((r2.width().x - 2.0 * r1.width().x).abs() < 1e-9);
            prop_assert!(r1.contains(&Vec3::repeat(m)));
        }
    }

    #[test]
    fn residual_examples() {
        let out = EnsembleOutput { mean: Vec3::new(1.0, 2.0, 3.0), sigma: Vec3::new(0.5, 2.0, 1.0) };
        assert_eq!(residual(1.0, &out, 0), 0.0);
        assert_eq!(residual(4.0, &out, 1), 1.0);
        assert_eq!(residual(1.5, &out, 2), 1.5);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(conformal_quantile(&[1.0, 2.0, 3.0, 4.0], 0.2).unwrap(), 4.0);
        assert_eq!(conformal_quantile(&[4.0, 3.0, 1.0, 2.0], 0.5).unwrap(), 3.0);
        assert_eq!(conformal_quantile(&[0.3], 0.1).unwrap(), f64::INFINITY);
        assert!(matches!(conformal_quantile(&[], 0.1), Err(AnticipateError::NoCalibration(_))));
    }

    fn calib_with(q: f64) -> ConformalCalibration {
        ConformalCalibration { alpha: 0.1, lead: 1, fps: 60.0, horizons: vec![5], quantiles: vec![[q; 3]], counts: vec![3] }
    }

    #[test]
    fn region_examples() {
        let out = EnsembleOutput { mean: Vec3::zeros(), sigma: Vec3::repeat(1.0) };
        let r = build_region(&out, &calib_with(2.0), 5).unwrap();
        assert_eq!((r.lo.x, r.hi.x), (-2.0, 2.0));
        let r = build_region(&out, &calib_with(f64::INFINITY), 5).unwrap();
        assert_eq!((r.lo.y, r.hi.y), (f64::NEG_INFINITY, f64::INFINITY));
        assert!(!r.is_bounded());
        assert!(matches!(build_region(&out, &calib_with(1.0), 6), Err(AnticipateError::NoCalibration(_))));
    }

    #[test]
    fn coverage_counting() {
        let r = ConfidenceRegion { horizon: 1, lo: Vec3::repeat(-1.0), hi: Vec3::repeat(1.0) };
        let inside = vec![Vec3::zeros(); 10];
        assert_eq!(evaluate_coverage(&vec![r; 10], &inside).unwrap().joint, 1.0);
        let mut truths = vec![Vec3::zeros(); 7];
        truths.extend([Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, -3.0, 0.0), Vec3::new(0.0, 0.0, 1.5)]);
        let c = evaluate_coverage(&vec![r; 10], &truths).unwrap();
        assert!((c.joint - 0.7).abs() < 1e-12);
        assert!((c.per_axis[0] - 0.9).abs() < 1e-12);
        assert_eq!(
            evaluate_coverage(&[r], &truths),
            Err(AnticipateError::InputMismatch { regions: 1, truths: 10 })
        );
    }

    #[test]
    fn widths_follow_definition() {
        let calib = ConformalCalibration {
            alpha: 0.1, lead: 1, fps: 60.0, horizons: vec![2], quantiles: vec![[1.5, 2.0, 0.5]], counts: vec![9],
        };
        let o1 = EnsembleOutput { mean: Vec3::zeros(), sigma: Vec3::new(1.0, 1.0, 2.0) };
        let o2 = EnsembleOutput { mean: Vec3::zeros(), sigma: Vec3::new(3.0, 2.0, 2.0) };
        let rows = width_vs_horizon(&calib, &[(2, o1), (2, o2), (7, o1)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].count, 2);
        assert_eq!(rows[0].mean_width, [6.0, 6.0, 2.0]);
    }

    #[test]
    fn lateral_classes() {
        let hw = 0.7625;
        assert_eq!(classify_lateral(-1.0, 1.0, hw), BiasClass::OverCovered);
        assert_eq!(classify_lateral(0.3, 0.9, hw), BiasClass::BiasedRight);
        assert_eq!(classify_lateral(-0.9, -0.3, hw), BiasClass::BiasedLeft);
        // Leaves out 0.2 of the right half only, under a third.
        assert_eq!(classify_lateral(-0.8, 0.5625, hw), BiasClass::OverCovered);
        // Symmetric narrow interval: both exclusions equal.
        assert_eq!(classify_lateral(-0.1, 0.1, hw), BiasClass::OverCovered);
    }

    #[test]
    fn bias_table_uses_ego_right() {
        let table = TableGeometry::ittf();
        // Canonical y < 0 is the ego's right.
        let r = ConfidenceRegion { horizon: 1, lo: Vec3::new(-2.0, -0.9, 0.0), hi: Vec3::new(-1.0, -0.3, 2.0) };
        let t = extreme_hit_bias(&[(r, Vec3::new(-1.4, -0.8, 1.0)), (r, Vec3::new(-1.4, 0.5, 1.0))], &table, 0.75);
        assert_eq!(t.count(BiasClass::BiasedRight, Side::Right), 1);
        assert_eq!(t.total(Side::Left), 0);
        assert_eq!(t.correct_of_biased(), (1, 1));
    }

    #[test]
    fn wilson_reference_value() {
        assert!((wilson_lower_bound(8, 10, 1.96) - 0.49016).abs() < 1e-4);
        assert_eq!(wilson_lower_bound(0, 0, 1.96), 0.0);
    }

    #[test]
    fn split_spec_parsing() {
        let s = parse_split_spec("train:0..500;cal:500..750;test:750..1000").unwrap();
        assert_eq!(s.assign(499), Some(Split::Train));
        assert_eq!(s.assign(500), Some(Split::Cal));
        assert_eq!(s.assign(1000), None);
        assert_eq!(parse_split_spec(&s.to_string()).unwrap(), s);
        assert!(matches!(
            parse_split_spec("train:0..500;cal:400..750;test:750..1000"),
            Err(AnticipateError::SplitLeakage(_))
        ));
        assert!(matches!(parse_split_spec("train:0..5;cal:5..7"), Err(AnticipateError::InvalidSplit(_))));
        assert!(matches!(parse_split_spec("train:0..x;cal:5..7;test:7..9"), Err(AnticipateError::InvalidSplit(_))));
    }

    #[test]
    fn calibration_file_round_trip() {
        let c1 = ConformalCalibration {
            alpha: 0.15,
            lead: 12,
            fps: 60.0,
            horizons: vec![1, 2],
            quantiles: vec![[1.25, 0.5, f64::INFINITY], [2.0, 1.0, 0.75]],
            counts: vec![100, 98],
        };
        let c2 = ConformalCalibration { alpha: 0.1, ..c1.clone() };
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "7".to_string());
        let text = format_calibration(&[c1.clone(), c2.clone()], &meta);
        let (back, m) = parse_calibration(&text).unwrap();
        assert_eq!(back, vec![c1, c2]);
        assert_eq!(m["seed"], "7");
        let bad = text.replacen("v1", "v9", 1);
        assert_eq!(parse_calibration(&bad).unwrap_err(), AnticipateError::Version("v9".into()));
    }

    #[test]
    fn canonical_frame_is_an_involution() {
        let f = Frame3D {
            frame_index: 3,
            ball: Vec3::new(1.0, -0.5, 1.2),
            joints: [vec![Vec3::new(-2.0, 0.1, 0.0)], vec![Vec3::new(2.0, 0.4, 0.0)]],
        };
        assert_eq!(canonical_frame(&f, Player::Near), f);
        let c = canonical_frame(&f, Player::Far);
        assert_eq!(c.ball, Vec3::new(-1.0, 0.5, 1.2));
        assert_eq!(c.joints[0][0], Vec3::new(-2.0, -0.4, 0.0));
        assert_eq!(canonical_frame(&c, Player::Far), Frame3D { joints: [f.joints[0].clone(), f.joints[1].clone()], ..f.clone() });
    }

    #[test]
    fn samples_respect_context_contract() {
        let samples = corpus_samples(30, 12);
        assert!(!samples.is_empty());
        for s in &samples {
            assert_eq!(s.context.last().frame_index + 12, s.context.hit_frame);
            // The incoming ball is on its way to the opponent, who stands at x > 0.
            assert!(s.context.last().root(Player::Far).x > 0.0);
            assert!(s.context.last().root(Player::Near).x < 0.0);
            assert!(s.hit_position.x > 0.0);
            if let Some((_, b)) = s.bounce {
                assert!(b.x < 0.0);
            }
        }
    }

    #[test]
    fn ensemble_spread_tracks_perturbation() {
        let table = TableGeometry::ittf();
        let samples = corpus_samples(120, 12);
        let (train, test) = samples.split_at(samples.len() * 3 / 4);
        let horizons: Vec<usize> = (1..=30).collect();
        let mean_sigma = |scale: f64| -> f64 {
            let p = PhysicsParams { perturbation: scale, ..Default::default() };
            let m = physics_baseline_ensemble(5, 5, &p, train, &table).unwrap();
            let mut acc = 0.0;
            let mut n = 0;
            for s in test {
                for o in ensemble_forecast(&m, &s.context, &horizons).unwrap() {
                    acc += o.sigma.sum();
                    n += 3;
                }
            }
            acc / n as f64
        };
        assert!((mean_sigma(0.0) - SIGMA_FLOOR).abs() < 1e-15);
        let (a, b, c) = (mean_sigma(0.25), mean_sigma(0.5), mean_sigma(1.0));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn ensemble_is_reproducible() {
        let table = TableGeometry::ittf();
        let samples = corpus_samples(40, 12);
        let p = PhysicsParams::default();
        let a = physics_baseline_ensemble(9, 5, &p, &samples, &table).unwrap();
        let b = physics_baseline_ensemble(9, 5, &p, &samples, &table).unwrap();
        let hs = [1, 10, 30];
        for (x, y) in a.iter().zip(&b) {
            let px = x.predict(&samples[0].context, &hs);
            let py = y.predict(&samples[0].context, &hs);
            assert!(px.iter().zip(&py).all(|(u, w)| u.iter().zip(w.iter()).all(|(s, t)| s.to_bits() == t.to_bits())));
        }
        assert!(matches!(physics_baseline_ensemble(9, 1, &p, &samples, &table), Err(AnticipateError::EnsembleTooSmall(1))));
    }
}
