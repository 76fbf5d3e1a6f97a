//! World-frame data model and rally vocabulary.
//!
//! World frame: origin on the floor below the table centre, `x` along the
//! table length, `y` across its width, `z` up. The table surface is the plane
//! `z = height`. Player [`Player::Near`] defends the `x < 0` half and
//! [`Player::Far`] the `x > 0` half; their hitting planes are the yz-planes
//! through the table edges, `x = -length/2` and `x = +length/2`.

use crate::ball::StokesSegment;
use crate::camera::ImagePoint;
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("a point needs at least two hits, got {0}")]
    NotEnoughHits(usize),
    #[error("hit frames must be strictly increasing (at index {0})")]
    HitsNotIncreasing(usize),
    #[error("hit frame {0} outside the frame range {1}..={2}")]
    HitOutOfRange(usize, usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid table geometry: {0}")]
    InvalidTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Player {
    Near,
    Far,
}

impl Player {
    pub fn index(self) -> usize {
        match self {
            Player::Near => 0,
            Player::Far => 1,
        }
    }

    pub fn from_index(i: usize) -> Player {
        if i == 0 {
            Player::Near
        } else {
            Player::Far
        }
    }

    pub fn other(self) -> Player {
        match self {
            Player::Near => Player::Far,
            Player::Far => Player::Near,
        }
    }

    /// `-1` for the near player, `+1` for the far one.
    pub fn side_sign(self) -> f64 {
        match self {
            Player::Near => -1.0,
            Player::Far => 1.0,
        }
    }
}

/// Table dimensions in metres. Defaults are the ITTF standard table
/// (2.74 m x 1.525 m, playing surface 0.76 m above the floor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableGeometry {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for TableGeometry {
    fn default() -> Self {
        Self::ittf()
    }
}

impl TableGeometry {
    pub const fn ittf() -> Self {
        Self {
            length: 2.74,
            width: 1.525,
            height: 0.76,
        }
    }

    pub fn new(length: f64, width: f64, height: f64) -> Result<Self, ModelError> {
        let t = Self {
            length,
            width,
            height,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("length", self.length),
            ("width", self.width),
            ("height", self.height),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidTable(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn half_length(&self) -> f64 {
        0.5 * self.length
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.width
    }

    /// x-offset of the hitting plane defended by `player`.
    pub fn hitting_plane_x(&self, player: Player) -> f64 {
        player.side_sign() * self.half_length()
    }

    /// The six surface keypoints in detector order: near corners
    /// (`-y`, `+y`), far corners (`-y`, `+y`), then the net midpoints on the
    /// `-y` and `+y` edges.
    pub fn surface_keypoints(&self) -> [Vec3; 6] {
        let (hl, hw, h) = (self.half_length(), self.half_width(), self.height);
        [
            Vec3::new(-hl, -hw, h),
            Vec3::new(-hl, hw, h),
            Vec3::new(hl, -hw, h),
            Vec3::new(hl, hw, h),
            Vec3::new(0.0, -hw, h),
            Vec3::new(0.0, hw, h),
        ]
    }

    /// Floor points directly below the four corners, same order as the
    /// corners in [`Self::surface_keypoints`].
    pub fn ground_corners(&self) -> [Vec3; 4] {
        let k = self.surface_keypoints();
        [0, 1, 2, 3].map(|i| Vec3::new(k[i].x, k[i].y, 0.0))
    }

    /// Centre of the half defended by `player`, on the playing surface.
    pub fn half_center(&self, player: Player) -> Vec3 {
        Vec3::new(
            player.side_sign() * 0.5 * self.half_length(),
            0.0,
            self.height,
        )
    }

    /// True when `(x, y)` lies on the half defended by `player`.
    pub fn on_half(&self, player: Player, x: f64, y: f64) -> bool {
        let sx = player.side_sign() * x;
        (0.0..=self.half_length()).contains(&sx) && y.abs() <= self.half_width()
    }
}

/// Joint layout used for player skeletons throughout the crate.
pub mod joints {
    pub const LEFT_ANKLE: usize = 0;
    pub const RIGHT_ANKLE: usize = 1;
    pub const PELVIS: usize = 2;
    pub const NECK: usize = 3;
    pub const HEAD: usize = 4;
    pub const LEFT_WRIST: usize = 5;
    pub const RIGHT_WRIST: usize = 6;
    pub const COUNT: usize = 7;
}

/// Per-frame 2D detections for one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame2D {
    pub frame_index: usize,
    pub ball_px: Option<ImagePoint>,
    /// p1..p6, see [`TableGeometry::surface_keypoints`] for the order.
    pub table_keypoints: Option<[ImagePoint; 6]>,
    /// Image row of the table base's floor line.
    pub base_height_px: Option<f64>,
    pub racket_centroids: [Option<ImagePoint>; 2],
    /// Joint positions in camera coordinates (m), [`joints`] layout.
    pub player_joints_cam: [Option<Vec<Vec3>>; 2],
    pub player_ankles_px: [Option<[ImagePoint; 2]>; 2],
}

impl Frame2D {
    pub fn empty(frame_index: usize) -> Self {
        Self {
            frame_index,
            ball_px: None,
            table_keypoints: None,
            base_height_px: None,
            racket_centroids: [None, None],
            player_joints_cam: [None, None],
            player_ankles_px: [None, None],
        }
    }

    /// Ball, table and both players present. Rackets are not required.
    pub fn is_complete(&self) -> bool {
        self.ball_px.is_some()
            && self.table_keypoints.is_some()
            && self.base_height_px.is_some()
            && self.player_joints_cam.iter().all(Option::is_some)
            && self.player_ankles_px.iter().all(Option::is_some)
    }
}

/// Reconstructed world-frame state for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame3D {
    pub frame_index: usize,
    pub ball: Vec3,
    /// World joints of both players, indexed by [`Player::index`].
    pub joints: [Vec<Vec3>; 2],
}

impl Frame3D {
    /// Ankle midpoint of `player`.
    pub fn root(&self, player: Player) -> Vec3 {
        let j = &self.joints[player.index()];
        0.5 * (j[joints::LEFT_ANKLE] + j[joints::RIGHT_ANKLE])
    }

    pub fn opponent_joints(&self, ego: Player) -> &[Vec3] {
        &self.joints[ego.other().index()]
    }

    pub fn ego_root(&self, ego: Player) -> Vec3 {
        self.root(ego)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitEvent {
    pub frame: usize,
    pub player: Player,
    /// Racket-hand position at the hit, once known.
    pub hand_world: Option<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BounceEvent {
    pub frame: usize,
    pub position: Vec3,
}

/// Half-open frame interval `[start, end)` between two consecutive hits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub hitter: Player,
}

impl Segment {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Two consecutive segments; starts and ends with a hit by `ego`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exchange {
    pub first: Segment,
    pub second: Segment,
    pub ego: Player,
}

impl Exchange {
    pub fn start(&self) -> usize {
        self.first.start
    }

    /// Frame of the opponent's hit.
    pub fn opponent_hit(&self) -> usize {
        self.second.start
    }

    pub fn end(&self) -> usize {
        self.second.end
    }
}

/// One drag-model flight piece between consecutive anchors (hit or bounce).
/// The anchor positions are the ball positions of the point's frames at
/// `start_frame` and `end_frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallPiece {
    pub start_frame: usize,
    pub end_frame: usize,
    pub k: f64,
    /// Mean squared reprojection error of the fit (px^2); zero for ground truth.
    pub mse: f64,
}

/// A reconstructed rally: world frames between the first and last hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub id: u64,
    pub fps: f64,
    pub frames: Vec<Frame3D>,
    pub hits: Vec<HitEvent>,
    pub bounces: Vec<BounceEvent>,
    pub pieces: Vec<BallPiece>,
}

impl Point {
    pub fn frame(&self, index: usize) -> Option<&Frame3D> {
        let first = self.frames.first()?.frame_index;
        let f = self.frames.get(index.checked_sub(first)?)?;
        (f.frame_index == index).then_some(f)
    }

    /// Drag-model segment of piece `i`, rebuilt from the anchor frames.
    pub fn flight(&self, i: usize) -> Option<StokesSegment> {
        let piece = self.pieces.get(i)?;
        let a = self.frame(piece.start_frame)?.ball;
        let b = self.frame(piece.end_frame)?.ball;
        let duration = (piece.end_frame - piece.start_frame) as f64 / self.fps;
        StokesSegment::new(a, b, duration, piece.k).ok()
    }

    /// Index of the piece covering frame-time `f` (fractional frames), the
    /// earliest one when `f` sits on a shared anchor.
    pub fn piece_at(&self, f: f64) -> Option<usize> {
        self.pieces
            .iter()
            .position(|p| f >= p.start_frame as f64 && f <= p.end_frame as f64)
    }

    /// Ball position and velocity at frame-time `f` from the fitted pieces.
    pub fn ball_state(&self, f: f64) -> Option<(Vec3, Vec3)> {
        let i = self.piece_at(f)?;
        let seg = self.flight(i)?;
        let t = ((f - self.pieces[i].start_frame as f64) / self.fps).clamp(0.0, seg.duration);
        Some((seg.eval(t), seg.velocity(t)))
    }

    pub fn segments(&self) -> Result<Vec<Segment>, ModelError> {
        let frames: Vec<usize> = self.hits.iter().map(|h| h.frame).collect();
        let first = self.hits.first().map_or(Player::Near, |h| h.player);
        let range = match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => a.frame_index..=b.frame_index,
            _ => return Err(ModelError::NotEnoughHits(frames.len())),
        };
        partition_point(range, &frames, first)
    }
}

/// Splits a point into the disjoint intervals between consecutive hits.
/// Hitters alternate starting from `first_hitter`.
pub fn partition_point(
    frames: std::ops::RangeInclusive<usize>,
    hits: &[usize],
    first_hitter: Player,
) -> Result<Vec<Segment>, ModelError> {
    if hits.len() < 2 {
        return Err(ModelError::NotEnoughHits(hits.len()));
    }
    for (i, &h) in hits.iter().enumerate() {
        if !frames.contains(&h) {
            return Err(ModelError::HitOutOfRange(h, *frames.start(), *frames.end()));
        }
        if i > 0 && hits[i - 1] >= h {
            return Err(ModelError::HitsNotIncreasing(i));
        }
    }
    let mut hitter = first_hitter;
    Ok(hits
        .windows(2)
        .map(|w| {
            let seg = Segment {
                start: w[0],
                end: w[1],
                hitter,
            };
            hitter = hitter.other();
            seg
        })
        .collect())
}

/// Pairs consecutive segments into exchanges; `len - 1` of them.
pub fn extract_exchanges(segments: &[Segment]) -> Vec<Exchange> {
    segments
        .windows(2)
        .map(|w| Exchange {
            first: w[0],
            second: w[1],
            ego: w[0].hitter,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub mean_speed: f64,
    pub speed_p10: f64,
    pub speed_p90: f64,
    pub mean_inter_hit_s: f64,
    /// Ball `y` where the trajectory crosses each player's hitting plane,
    /// indexed by [`Player::index`].
    pub plane_crossings_y: [Vec<f64>; 2],
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// Counts per bin for each player's hitting plane.
    pub counts: [Vec<usize>; 2],
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts[0].len() as f64
    }
}

/// Nearest-rank percentile of an ascending-sorted slice, `p` in `(0, 100]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

const HIST_LO: f64 = -3.0;
const HIST_HI: f64 = 3.0;
const HIST_BINS: usize = 24;

/// Speed, timing and hitting-plane statistics over reconstructed points.
///
/// Speeds are finite differences between consecutive frames. Plane crossings
/// interpolate linearly between the two frames straddling `x = +-length/2`.
pub fn dataset_stats(points: &[Point], table: &TableGeometry) -> Result<DatasetStats, ModelError> {
    let mut speeds = Vec::new();
    let mut gaps = Vec::new();
    let mut crossings: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for p in points {
        for w in p.frames.windows(2) {
            let step = w[1].frame_index - w[0].frame_index;
            if step == 1 {
                speeds.push((w[1].ball - w[0].ball).norm() * p.fps);
            }
            for player in [Player::Near, Player::Far] {
                let px = table.hitting_plane_x(player);
                let (a, b) = (w[0].ball, w[1].ball);
                let (da, db) = (a.x - px, b.x - px);
                if (da < 0.0) != (db < 0.0) {
                    let s = da / (da - db);
                    crossings[player.index()].push(a.y + s * (b.y - a.y));
                }
            }
        }
        for w in p.hits.windows(2) {
            gaps.push((w[1].frame - w[0].frame) as f64 / p.fps);
        }
    }
    if speeds.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mean_speed = speeds.iter().sum::<f64>() / speeds.len() as f64;
    speeds.sort_by(f64::total_cmp);
    let mean_inter_hit_s = if gaps.is_empty() {
        f64::NAN
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    };
    let mut counts = [vec![0; HIST_BINS], vec![0; HIST_BINS]];
    let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
    for (side, ys) in crossings.iter().enumerate() {
        for &y in ys {
            let bin = ((y - HIST_LO) / width).floor();
            if bin >= 0.0 && (bin as usize) < HIST_BINS {
                counts[side][bin as usize] += 1;
            }
        }
    }
    Ok(DatasetStats {
        mean_speed,
        speed_p10: nearest_rank(&speeds, 10.0),
        speed_p90: nearest_rank(&speeds, 90.0),
        mean_inter_hit_s,
        plane_crossings_y: crossings,
        histogram: Histogram {
            lo: HIST_LO,
            hi: HIST_HI,
            counts,
        },
    })
}
