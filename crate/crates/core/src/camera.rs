//! Pinhole camera, inverse projection onto axis planes, vanishing-point
//! ground projection of the table corners, and ten-point calibration.
//!
//! Camera coordinates follow the usual image convention: `x` to the right of
//! the image, `y` down the image, `z` along the optical axis. A world point
//! `p` maps to camera coordinates as `R p + t`. There is no lens distortion
//! and skew is fixed at zero.

use crate::model::{joints, TableGeometry, Vec3};
use crate::optimize::levenberg_marquardt;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Rotation3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("viewing ray does not meet the plane in front of the camera")]
    NoIntersection,
    #[error("lines are parallel; no vanishing point")]
    NoVanishingPoint,
    #[error("degenerate calibration geometry: {0}")]
    CalibrationDegenerate(String),
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("camera violates the capture assumptions: {0}")]
    AssumptionViolation(String),
    #[error("invalid camera: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn dist(&self, o: &ImagePoint) -> f64 {
        (self.u - o.u).hypot(self.v - o.v)
    }

    pub fn midpoint(&self, o: &ImagePoint) -> ImagePoint {
        ImagePoint::new(0.5 * (self.u + o.u), 0.5 * (self.v + o.v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// The plane `p[axis] = offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisPlane {
    pub axis: Axis,
    pub offset: f64,
}

impl AxisPlane {
    pub fn ground() -> Self {
        Self { axis: Axis::Z, offset: 0.0 }
    }

    pub fn table(table: &TableGeometry) -> Self {
        Self { axis: Axis::Z, offset: table.height }
    }
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Rotation3<f64>, translation: Vec3) -> Result<Self, CameraError> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(CameraError::Invalid(format!(
                "focal lengths must be positive, got ({}, {})",
                intrinsics.fx, intrinsics.fy
            )));
        }
        Ok(Self {
            intrinsics,
            extrinsics: Extrinsics { rotation, translation },
        })
    }

    /// Camera at `position` looking along world `+x`, pitched down by
    /// `pitch` radians about the table-width axis. Image right is world `-y`.
    pub fn looking_along_x(intrinsics: Intrinsics, position: Vec3, pitch: f64) -> Result<Self, CameraError> {
        let (s, c) = pitch.sin_cos();
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = Vector3::new(-s, 0.0, -c);
        let forward = Vector3::new(c, 0.0, -s);
        let m = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = Rotation3::from_matrix_unchecked(m);
        let translation = -(rotation * position);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.extrinsics.rotation
    }

    /// Optical centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.extrinsics.rotation.inverse() * self.extrinsics.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.extrinsics.rotation * p + self.extrinsics.translation
    }

    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.extrinsics.rotation.matrix());
        rt.set_column(3, &self.extrinsics.translation);
        self.intrinsics.matrix() * rt
    }

    pub fn project(&self, p: &Vec3) -> Result<ImagePoint, CameraError> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return Err(CameraError::BehindCamera(c.z));
        }
        let k = &self.intrinsics;
        Ok(ImagePoint::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    }

    /// World-frame direction of the viewing ray through `q` (not normalised).
    pub fn ray(&self, q: &ImagePoint) -> Vec3 {
        let k = &self.intrinsics;
        let d = Vector3::new((q.u - k.cx) / k.fx, (q.v - k.cy) / k.fy, 1.0);
        self.extrinsics.rotation.inverse() * d
    }

    /// Intersects the viewing ray through `q` with an axis-aligned plane.
    pub fn inverse_project_to_plane(&self, q: &ImagePoint, plane: AxisPlane) -> Result<Vec3, CameraError> {
        let o = self.center();
        let d = self.ray(q);
        let a = plane.axis.index();
        if d[a].abs() < 1e-12 * d.norm() {
            return Err(CameraError::NoIntersection);
        }
        let s = (plane.offset - o[a]) / d[a];
        if !(s > 0.0) || !s.is_finite() {
            return Err(CameraError::NoIntersection);
        }
        let mut p = o + s * d;
        p[a] = plane.offset;
        Ok(p)
    }
}

/// Image line `a u + b v + c = 0` with `(a, b)` of unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Line {
    pub fn through(p: &ImagePoint, q: &ImagePoint) -> Result<Line, CameraError> {
        let (a, b) = (q.v - p.v, p.u - q.u);
        let n = a.hypot(b);
        if n == 0.0 {
            return Err(CameraError::CalibrationDegenerate("coincident line points".into()));
        }
        Ok(Line { a: a / n, b: b / n, c: -(a * p.u + b * p.v) / n })
    }

    /// Total-least-squares line through two or more points.
    pub fn fit_tls(points: &[ImagePoint]) -> Result<Line, CameraError> {
        if points.len() < 2 {
            return Err(CameraError::CalibrationDegenerate("line fit needs two points".into()));
        }
        let n = points.len() as f64;
        let mu = points.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.u, acc.1 + p.v));
        let (mu_u, mu_v) = (mu.0 / n, mu.1 / n);
        let (mut suu, mut suv, mut svv) = (0.0, 0.0, 0.0);
        for p in points {
            let (du, dv) = (p.u - mu_u, p.v - mu_v);
            suu += du * du;
            suv += du * dv;
            svv += dv * dv;
        }
        if suu + svv == 0.0 {
            return Err(CameraError::CalibrationDegenerate("coincident line points".into()));
        }
        // Normal is the eigenvector of the scatter matrix with the smaller
        // eigenvalue; the direction angle is the principal axis angle.
        let theta = 0.5 * (2.0 * suv).atan2(suu - svv);
        let (a, b) = (-theta.sin(), theta.cos());
        Ok(Line { a, b, c: -(a * mu_u + b * mu_v) })
    }

    /// Signed distance of `p` from the line.
    pub fn distance(&self, p: &ImagePoint) -> f64 {
        self.a * p.u + self.b * p.v + self.c
    }

    pub fn intersect(&self, o: &Line) -> Option<ImagePoint> {
        let det = self.a * o.b - self.b * o.a;
        if det.abs() < 1e-12 {
            return None;
        }
        Some(ImagePoint::new(
            (self.b * o.c - self.c * o.b) / det,
            (self.c * o.a - self.a * o.c) / det,
        ))
    }

    /// Point of the line at image column `u`.
    pub fn at_u(&self, u: f64) -> Option<ImagePoint> {
        if self.b.abs() < 1e-12 {
            return None;
        }
        Some(ImagePoint::new(u, -(self.a * u + self.c) / self.b))
    }
}

pub fn vanishing_point(l1: &Line, l2: &Line) -> Result<ImagePoint, CameraError> {
    l1.intersect(l2).ok_or(CameraError::NoVanishingPoint)
}

/// Floor projections `g1..g4` of the four table corners.
///
/// Near corners drop vertically to the base row `h_base`. The far corners
/// drop vertically until they meet the lines from `g1`/`g2` towards the
/// vanishing point of the table's long edges, each edge fitted through its
/// near corner, net midpoint and far corner.
pub fn ground_projections(kp: &[ImagePoint; 6], h_base: f64) -> Result<[ImagePoint; 4], CameraError> {
    let degenerate = |why: &str| CameraError::CalibrationDegenerate(why.to_string());
    let edge_a = Line::fit_tls(&[kp[0], kp[4], kp[2]])?;
    let edge_b = Line::fit_tls(&[kp[1], kp[5], kp[3]])?;
    // Near-parallel edges put the vanishing point numerically at infinity.
    let cross = edge_a.a * edge_b.b - edge_a.b * edge_b.a;
    if cross.abs() < 1e-6 {
        return Err(degenerate("long table edges are parallel in the image"));
    }
    let v = vanishing_point(&edge_a, &edge_b).map_err(|_| degenerate("no vanishing point"))?;
    let g1 = ImagePoint::new(kp[0].u, h_base);
    let g2 = ImagePoint::new(kp[1].u, h_base);
    let far = |g: &ImagePoint, p: &ImagePoint| -> Result<ImagePoint, CameraError> {
        Line::through(g, &v)?
            .at_u(p.u)
            .ok_or_else(|| degenerate("floor edge is vertical in the image"))
    };
    let g3 = far(&g1, &kp[2])?;
    let g4 = far(&g2, &kp[3])?;
    Ok([g1, g2, g3, g4])
}

/// The ten 3D-2D pairs: six surface keypoints and four floor corners.
pub fn calibration_correspondences(
    table: &TableGeometry,
    keypoints: &[ImagePoint; 6],
    ground: &[ImagePoint; 4],
) -> Vec<(Vec3, ImagePoint)> {
    let surface = table.surface_keypoints();
    let floor = table.ground_corners();
    surface
        .iter()
        .copied()
        .zip(keypoints.iter().copied())
        .chain(floor.iter().copied().zip(ground.iter().copied()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub camera: Camera,
    /// Root-mean-square reprojection distance over the correspondences (px).
    pub rms: f64,
}

fn hartley_2d(pts: &[ImagePoint]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mu, mv) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.u / n, a.1 + p.v / n));
    let mean_d = pts.iter().map(|p| (p.u - mu).hypot(p.v - mv)).sum::<f64>() / n;
    let s = std::f64::consts::SQRT_2 / mean_d.max(1e-12);
    Matrix3::new(s, 0.0, -s * mu, 0.0, s, -s * mv, 0.0, 0.0, 1.0)
}

fn hartley_3d(pts: &[Vec3]) -> nalgebra::Matrix4<f64> {
    let n = pts.len() as f64;
    let mu = pts.iter().fold(Vec3::zeros(), |a, p| a + p / n);
    let mean_d = pts.iter().map(|p| (p - mu).norm()).sum::<f64>() / n;
    let s = 3f64.sqrt() / mean_d.max(1e-12);
    let mut t = nalgebra::Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t[(0, 3)] = -s * mu.x;
    t[(1, 3)] = -s * mu.y;
    t[(2, 3)] = -s * mu.z;
    t
}

/// Normalised direct linear transform for the 3x4 projection matrix.
fn dlt(corr: &[(Vec3, ImagePoint)]) -> Result<Matrix3x4<f64>, CameraError> {
    let world: Vec<Vec3> = corr.iter().map(|c| c.0).collect();
    let image: Vec<ImagePoint> = corr.iter().map(|c| c.1).collect();
    let tw = hartley_3d(&world);
    let ti = hartley_2d(&image);
    let n = corr.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (w, q)) in world.iter().zip(&image).enumerate() {
        let x = tw * nalgebra::Vector4::new(w.x, w.y, w.z, 1.0);
        let y = ti * Vector3::new(q.u, q.v, 1.0);
        let (u, v) = (y.x / y.z, y.y / y.z);
        for j in 0..4 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 8 + j)] = -u * x[j];
            a[(2 * i + 1, 4 + j)] = x[j];
            a[(2 * i + 1, 8 + j)] = -v * x[j];
        }
    }
    // Null vector via the symmetric eigenproblem of AtA (12x12).
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let largest = eig.eigenvalues[order[11]].max(1e-300);
    let second = eig.eigenvalues[order[1]].max(0.0);
    if (second / largest).sqrt() < 1e-7 {
        return Err(CameraError::CalibrationFailed(
            "rank-deficient correspondence system (coplanar points?)".into(),
        ));
    }
    let h = eig.eigenvectors.column(order[0]);
    let pn = Matrix3x4::from_row_slice(h.as_slice());
    let ti_inv = ti
        .try_inverse()
        .ok_or_else(|| CameraError::CalibrationFailed("singular image normalisation".into()))?;
    Ok(ti_inv * pn * tw)
}

/// RQ decomposition of a 3x3 matrix with positive-diagonal upper-triangular
/// factor: `m = k * r`.
fn rq3(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let mut k = flip * r.transpose() * flip;
    let mut rot = flip * q.transpose();
    for i in 0..3 {
        if k[(i, i)] < 0.0 {
            for row in 0..3 {
                k[(row, i)] = -k[(row, i)];
            }
            for col in 0..3 {
                rot[(i, col)] = -rot[(i, col)];
            }
        }
    }
    (k, rot)
}

fn camera_from_params(p: &DVector<f64>) -> Camera {
    let rotation = Rotation3::from_scaled_axis(Vector3::new(p[4], p[5], p[6]));
    Camera {
        intrinsics: Intrinsics { fx: p[0], fy: p[1], cx: p[2], cy: p[3] },
        extrinsics: Extrinsics {
            rotation,
            translation: Vector3::new(p[7], p[8], p[9]),
        },
    }
}

fn reprojection_residuals(cam: &Camera, corr: &[(Vec3, ImagePoint)]) -> DVector<f64> {
    let k = &cam.intrinsics;
    DVector::from_iterator(
        2 * corr.len(),
        corr.iter().flat_map(|(w, q)| {
            let c = cam.to_camera(w);
            // Points behind the camera get a large residual instead of an error
            // so the optimiser steers away.
            let z = if c.z > 1e-9 { c.z } else { 1e-9 };
            [k.fx * c.x / z + k.cx - q.u, k.fy * c.y / z + k.cy - q.v]
        }),
    )
}

pub fn reprojection_rms(cam: &Camera, corr: &[(Vec3, ImagePoint)]) -> f64 {
    let r = reprojection_residuals(cam, corr);
    (r.norm_squared() / corr.len() as f64).sqrt()
}

/// Estimates `K` (zero skew) and `(R, t)` from 3D-2D correspondences.
///
/// A normalised DLT seeds the projection matrix, which is split into `K`,
/// `R`, `t`; Levenberg-Marquardt then refines focal lengths, principal
/// point, an axis-angle rotation and the translation on the reprojection
/// error.
pub fn calibrate(corr: &[(Vec3, ImagePoint)]) -> Result<Calibration, CameraError> {
    if corr.len() < 6 {
        return Err(CameraError::CalibrationFailed(format!(
            "need at least 6 correspondences, got {}",
            corr.len()
        )));
    }
    let mut p = dlt(corr)?;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let (k, r) = rq3(&m);
    let k_inv = k
        .try_inverse()
        .ok_or_else(|| CameraError::CalibrationFailed("singular intrinsics".into()))?;
    let t = k_inv * p.column(3);
    let k = k / k[(2, 2)];
    // Project the decomposed rotation onto SO(3) before switching to
    // axis-angle.
    let rotation = Rotation3::from_matrix(&r);
    let axis = rotation.scaled_axis();
    let start = DVector::from_vec(vec![
        k[(0, 0)],
        k[(1, 1)],
        k[(0, 2)],
        k[(1, 2)],
        axis.x,
        axis.y,
        axis.z,
        t.x,
        t.y,
        t.z,
    ]);
    let fit = levenberg_marquardt(
        |params| reprojection_residuals(&camera_from_params(params), corr),
        start,
        200,
    );
    let camera = camera_from_params(&fit.params);
    if !(camera.intrinsics.fx > 0.0 && camera.intrinsics.fy > 0.0) {
        return Err(CameraError::CalibrationFailed("non-positive focal length".into()));
    }
    if corr.iter().any(|(w, _)| camera.to_camera(w).z <= 0.0) {
        return Err(CameraError::CalibrationFailed("points behind recovered camera".into()));
    }
    Ok(Calibration {
        rms: reprojection_rms(&camera, corr),
        camera,
    })
}

/// Full calibration from one frame's detections.
pub fn calibrate_from_keypoints(
    table: &TableGeometry,
    keypoints: &[ImagePoint; 6],
    h_base: f64,
) -> Result<Calibration, CameraError> {
    let g = ground_projections(keypoints, h_base)?;
    calibrate(&calibration_correspondences(table, keypoints, &g))
}

/// Places a player's camera-frame joints in the world.
///
/// The root is the ankle-midpoint pixel inverse-projected onto the floor.
/// Joints are rotated into the world with the calibrated rotation and
/// translated so the camera-frame ankle midpoint lands on that root.
pub fn position_player(
    camera: &Camera,
    ankles_px: &[ImagePoint; 2],
    joints_cam: &[Vec3],
) -> Result<Vec<Vec3>, CameraError> {
    let root = camera.inverse_project_to_plane(&ankles_px[0].midpoint(&ankles_px[1]), AxisPlane::ground())?;
    if joints_cam.len() <= joints::RIGHT_ANKLE {
        return Err(CameraError::Invalid("skeleton lacks ankle joints".into()));
    }
    let anchor = 0.5 * (joints_cam[joints::LEFT_ANKLE] + joints_cam[joints::RIGHT_ANKLE]);
    let r_inv = camera.rotation().inverse();
    Ok(joints_cam.iter().map(|j| r_inv * (j - anchor) + root).collect())
}

/// Checks the capture assumptions the ground-projection construction relies
/// on: no yaw or roll (pitch about the table-width axis only), camera behind
/// the near end of the table, and table legs imaging as vertical lines to
/// within `leg_tol_px`.
pub fn check_assumptions(camera: &Camera, table: &TableGeometry, leg_tol_px: f64) -> Result<(), CameraError> {
    let r = camera.rotation().matrix();
    let right = r.row(0);
    if (right[0]).abs() > 1e-9 || (right[2]).abs() > 1e-9 || (right[1] + 1.0).abs() > 1e-9 {
        return Err(CameraError::AssumptionViolation(
            "camera rotates about an axis other than the table width".into(),
        ));
    }
    let c = camera.center();
    if c.x >= -table.half_length() {
        return Err(CameraError::AssumptionViolation("camera is not behind the near table end".into()));
    }
    let top = table.surface_keypoints();
    let floor = table.ground_corners();
    for i in 0..4 {
        let a = camera.project(&top[i])?;
        let b = camera.project(&floor[i])?;
        if (a.u - b.u).abs() > leg_tol_px {
            return Err(CameraError::AssumptionViolation(format!(
                "table leg {} images {:.3} px off vertical",
                i + 1,
                (a.u - b.u).abs()
            )));
        }
    }
    Ok(())
}
