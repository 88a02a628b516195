//! Cameras, poses, plane homographies, inter-plane distance maps, and
//! disparity sampling/encoding.
//!
//! Conventions used throughout the crate:
//! - integer pixel (x, y) is the pixel center at coordinate (x, y) exactly;
//! - a pose (R, t) maps source-frame points to target-frame points as
//!   X_tgt = R·X_src + t;
//! - planes are fronto-parallel in the source frame, normal n = [0, 0, 1];
//! - disparity d = 1/z, and plane stacks are ordered by decreasing d
//!   (increasing depth, near to far).

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::ScalarMap;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    BadFocalLength { fx: f64, fy: f64 },
    #[error("image size must be at least 1x1 (got {width}x{height})")]
    BadImageSize { width: usize, height: usize },
    #[error("R is not a rotation (deviation {deviation:.3e} from orthonormality)")]
    NotARotation { deviation: f64 },
    #[error("depth must be positive (z={z})")]
    NonPositiveDepth { z: f64 },
    #[error("point behind camera (z={z})")]
    BehindCamera { z: f64 },
    #[error("plane z={z} is degenerate for this pose (|det|={det:.3e}); it passes through the target camera center")]
    DegeneratePlane { z: f64, det: f64 },
    #[error("warped point at infinity (|w|={w:.3e})")]
    PointAtInfinity { w: f64 },
    #[error("disparity set must be nonempty")]
    EmptyDisparitySet,
    #[error("disparities must be positive, finite, and strictly decreasing")]
    UnorderedDisparities,
    #[error("depth range requires 0 < z_near < z_far (got z_near={z_near}, z_far={z_far})")]
    BadDepthRange { z_near: f64, z_far: f64 },
}

/// Pinhole camera, units of pixels. Serialized form matches the on-disk
/// camera file: `{fx, fy, cx, cy, width, height}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Camera { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Re-checks invariants; needed after deserializing from JSON.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::BadFocalLength { fx: self.fx, fy: self.fy });
        }
        if self.width < 1 || self.height < 1 {
            return Err(GeometryError::BadImageSize { width: self.width, height: self.height });
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// K⁻¹ in closed form; avoids the roundoff of a numerical inverse.
    pub fn inv_intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// ‖K⁻¹·[x, y, 1]ᵀ‖₂: length per unit depth of the ray through (x, y).
    #[inline]
    pub fn ray_scale(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.cx) / self.fx;
        let v = (y - self.cy) / self.fy;
        (u * u + v * v + 1.0).sqrt()
    }
}

/// Rigid transform taking source-frame points to target-frame points:
/// X_tgt = R·X_src + t.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Pose {
    /// Validates RᵀR = I and det R = 1, both within 1e-9.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev_orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        let dev_det = (r.determinant() - 1.0).abs();
        let deviation = dev_orth.max(dev_det);
        if !(deviation <= 1e-9) {
            return Err(GeometryError::NotARotation { deviation });
        }
        Ok(Pose { r, t })
    }

    pub fn identity() -> Self {
        Pose { r: Matrix3::identity(), t: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    /// Same rotation, rescaled translation; used for scale calibration.
    pub fn with_translation(&self, t: Vector3<f64>) -> Self {
        Pose { r: self.r, t }
    }

    /// The inverse transform (Rᵀ, −Rᵀt).
    pub fn inverse(&self) -> Self {
        let rt = self.r.transpose();
        Pose { r: rt, t: -(rt * self.t) }
    }

    /// Camera center of the target camera, expressed in the source frame.
    pub fn target_center_in_source(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    pub fn is_identity(&self) -> bool {
        self.r == Matrix3::identity() && self.t == Vector3::zeros()
    }

    /// Re-expresses this transform relative to `base`: if both map a common
    /// frame into their own cameras, the result maps base's camera into
    /// this one (self ∘ base⁻¹). `pose.relative_to(pose)` is the identity.
    pub fn relative_to(&self, base: &Pose) -> Result<Pose, GeometryError> {
        let r = self.r * base.r.transpose();
        let t = self.t - r * base.t;
        Pose::new(r, t)
    }
}

/// Serialization record for a [`Pose`]. Matches the on-disk pose file:
/// `{"R": [9 entries, row-major], "t": [3 entries]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
}

impl PoseFile {
    pub fn from_pose(pose: &Pose) -> Self {
        let r = pose.rotation();
        let mut rotation = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                rotation[row * 3 + col] = r[(row, col)];
            }
        }
        let t = pose.translation();
        PoseFile { rotation, t: [t.x, t.y, t.z] }
    }

    /// Rebuilds the pose, re-checking the rotation invariants.
    pub fn to_pose(&self) -> Result<Pose, GeometryError> {
        Pose::new(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::new(self.t[0], self.t[1], self.t[2]),
        )
    }
}

/// Depth interval of interest, z_near < z_far, with the equivalent
/// disparity interval d_near = 1/z_near > d_far = 1/z_far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRange {
    pub z_near: f64,
    pub z_far: f64,
}

impl DepthRange {
    pub fn new(z_near: f64, z_far: f64) -> Result<Self, GeometryError> {
        let range = DepthRange { z_near, z_far };
        range.validate()?;
        Ok(range)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.z_near > 0.0 && self.z_near < self.z_far && self.z_far.is_finite()) {
            return Err(GeometryError::BadDepthRange { z_near: self.z_near, z_far: self.z_far });
        }
        Ok(())
    }

    pub fn from_disparities(d_near: f64, d_far: f64) -> Result<Self, GeometryError> {
        if !(d_near > d_far && d_far > 0.0 && d_near.is_finite()) {
            return Err(GeometryError::BadDepthRange { z_near: 1.0 / d_near, z_far: 1.0 / d_far });
        }
        DepthRange::new(1.0 / d_near, 1.0 / d_far)
    }

    #[inline]
    pub fn d_near(&self) -> f64 {
        1.0 / self.z_near
    }

    #[inline]
    pub fn d_far(&self) -> f64 {
        1.0 / self.z_far
    }
}

/// Strictly decreasing disparities d_1 > … > d_N; equivalently depths
/// z_i = 1/d_i increasing near to far. The stack order everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparitySet {
    d: Vec<f64>,
}

impl DisparitySet {
    pub fn new(d: Vec<f64>) -> Result<Self, GeometryError> {
        if d.is_empty() {
            return Err(GeometryError::EmptyDisparitySet);
        }
        let positive = d.iter().all(|&v| v > 0.0 && v.is_finite());
        let decreasing = d.windows(2).all(|w| w[0] > w[1]);
        if !positive || !decreasing {
            return Err(GeometryError::UnorderedDisparities);
        }
        Ok(DisparitySet { d })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        false // nonempty by construction
    }

    pub fn disparities(&self) -> &[f64] {
        &self.d
    }

    #[inline]
    pub fn disparity(&self, i: usize) -> f64 {
        self.d[i]
    }

    #[inline]
    pub fn depth(&self, i: usize) -> f64 {
        1.0 / self.d[i]
    }

    pub fn depths(&self) -> Vec<f64> {
        self.d.iter().map(|d| 1.0 / d).collect()
    }
}

/// Lifts pixel (x, y) at depth z to Cartesian camera coordinates:
/// K⁻¹·[x, y, 1]ᵀ·z. The third component is exactly z.
pub fn unproject(cam: &Camera, x: f64, y: f64, z: f64) -> Result<Vector3<f64>, GeometryError> {
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth { z });
    }
    Ok(unproject_unchecked(cam, x, y, z))
}

#[inline]
pub(crate) fn unproject_unchecked(cam: &Camera, x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new((x - cam.cx) / cam.fx * z, (y - cam.cy) / cam.fy * z, z)
}

/// Projects a camera-frame point back to (pixel x, pixel y, depth z).
pub fn project(cam: &Camera, p: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    Ok((cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy, p.z))
}

/// Homography taking target-image pixels to source-image pixels for the
/// source-frame plane z = z_i (homogeneous 3×3).
///
/// Built as the exact matrix inverse of the forward map
/// K·(R + t·nᵀ/z_i)·K⁻¹ with n = [0, 0, 1]ᵀ, so warped correspondences are
/// exact for any pose, not just small ones. The plane is degenerate when it
/// passes through the target camera center, i.e. det(R + t·nᵀ/z_i) = 0.
pub fn plane_homography(
    cam: &Camera,
    pose: &Pose,
    z_i: f64,
) -> Result<Matrix3<f64>, GeometryError> {
    if !(z_i > 0.0) {
        return Err(GeometryError::NonPositiveDepth { z: z_i });
    }
    // M = R + t·nᵀ/z adds t/z to the third column only.
    let mut m = *pose.rotation();
    let t = pose.translation();
    m[(0, 2)] += t.x / z_i;
    m[(1, 2)] += t.y / z_i;
    m[(2, 2)] += t.z / z_i;
    let det = m.determinant();
    if det.abs() < 1e-12 {
        return Err(GeometryError::DegeneratePlane { z: z_i, det });
    }
    let m_inv = m.try_inverse().ok_or(GeometryError::DegeneratePlane { z: z_i, det })?;
    Ok(cam.intrinsics() * m_inv * cam.inv_intrinsics())
}

/// Applies a homography to a pixel and dehomogenizes. The result may lie
/// outside the source image; callers handle padding.
pub fn warp_coords(h: &Matrix3<f64>, x_t: f64, y_t: f64) -> Result<(f64, f64), GeometryError> {
    let v = h * Vector3::new(x_t, y_t, 1.0);
    if v.z.abs() < 1e-12 {
        return Err(GeometryError::PointAtInfinity { w: v.z.abs() });
    }
    Ok((v.x / v.z, v.y / v.z))
}

/// Gap between consecutive plane depths, with the terminal rule applied:
/// gap_N = gap_{N-1}, and a single-plane stack uses the camera-to-plane
/// distance z_1 as its gap.
fn depth_gaps(ds: &DisparitySet) -> Vec<f64> {
    let n = ds.len();
    let mut gaps = Vec::with_capacity(n);
    for i in 0..n.saturating_sub(1) {
        gaps.push(ds.depth(i + 1) - ds.depth(i));
    }
    match n {
        1 => gaps.push(ds.depth(0)),
        _ => gaps.push(gaps[n - 2]),
    }
    gaps
}

/// Per-plane distance maps over the source image:
/// δ_{z_i}(x, y) = (z_{i+1} − z_i)·‖K⁻¹[x, y, 1]ᵀ‖₂, the Euclidean length
/// of the pixel ray between plane i and plane i+1. The last map replicates
/// the previous one (terminal rule).
pub fn delta_source(cam: &Camera, ds: &DisparitySet) -> Vec<ScalarMap> {
    let gaps = depth_gaps(ds);
    // The per-pixel factor g(x, y) = ‖K⁻¹[x,y,1]ᵀ‖ is shared by every plane;
    // each map is the gap times g.
    let mut g = ScalarMap::zeros(cam.width, cam.height);
    for (x, y) in g.coords().collect::<Vec<_>>() {
        g.set(x, y, cam.ray_scale(x as f64, y as f64));
    }
    gaps.iter().map(|&gap| g.map(|v| gap * v)).collect()
}

/// Per-plane distance maps over the target image: the length of the target
/// pixel ray between its intersections with planes i and i+1, computed from
/// the warped source coordinates. Reduces to [`delta_source`] under the
/// identity pose. The last map replicates the previous one.
pub fn delta_target(
    cam: &Camera,
    pose: &Pose,
    ds: &DisparitySet,
) -> Result<Vec<ScalarMap>, GeometryError> {
    let n = ds.len();
    let (w, h) = (cam.width, cam.height);
    // Intersection of each target pixel ray with each plane, in source frame.
    let mut points: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(n);
    for i in 0..n {
        let z = ds.depth(i);
        let hom = plane_homography(cam, pose, z)?;
        let mut plane_points = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (xs, ys) = warp_coords(&hom, x as f64, y as f64)?;
                plane_points.push(unproject_unchecked(cam, xs, ys, z));
            }
        }
        points.push(plane_points);
    }
    let mut maps = Vec::with_capacity(n);
    for i in 0..n.saturating_sub(1) {
        let mut map = ScalarMap::zeros(w, h);
        for idx in 0..w * h {
            map.data_mut()[idx] = (points[i + 1][idx] - points[i][idx]).norm();
        }
        maps.push(map);
    }
    match n {
        // Single plane: distance from the source camera to the intersection
        // point, matching the delta_source single-plane rule at identity.
        1 => {
            let mut map = ScalarMap::zeros(w, h);
            for idx in 0..w * h {
                map.data_mut()[idx] = points[0][idx].norm();
            }
            maps.push(map);
        }
        _ => maps.push(maps[n - 2].clone()),
    }
    Ok(maps)
}

/// One uniform draw per disparity bin: bin i covers
/// [d_n + (i/N)(d_f − d_n), d_n + ((i−1)/N)(d_f − d_n)], i = 1..N.
/// Output sorted by decreasing disparity; deterministic given the rng state.
pub fn sample_disparities<R: Rng>(
    n: usize,
    range: &DepthRange,
    rng: &mut R,
) -> Result<DisparitySet, GeometryError> {
    sample_disparities_between(n, range.d_near(), range.d_far(), rng)
}

/// [`sample_disparities`] over an explicit disparity interval
/// d_far < d ≤ d_near; used to stratify exactly over a grid's slice span.
pub fn sample_disparities_between<R: Rng>(
    n: usize,
    d_near: f64,
    d_far: f64,
    rng: &mut R,
) -> Result<DisparitySet, GeometryError> {
    if n == 0 {
        return Err(GeometryError::EmptyDisparitySet);
    }
    if !(d_near > d_far && d_far > 0.0 && d_near.is_finite()) {
        return Err(GeometryError::BadDepthRange { z_near: 1.0 / d_near, z_far: 1.0 / d_far });
    }
    let span = d_far - d_near; // negative
    let mut d = Vec::with_capacity(n);
    for i in 1..=n {
        let lo = d_near + (i as f64 / n as f64) * span;
        let hi = d_near + ((i - 1) as f64 / n as f64) * span;
        d.push(rng.random_range(lo..hi));
    }
    DisparitySet::new(d)
}

/// The upper bin edges d_i = d_n + ((i−1)/N)·(d_f − d_n), i = 1..N:
/// the fixed-plane (MPI) placement. d_1 always equals d_near.
pub fn bin_edge_disparities(n: usize, range: &DepthRange) -> Result<DisparitySet, GeometryError> {
    if n == 0 {
        return Err(GeometryError::EmptyDisparitySet);
    }
    let d_n = range.d_near();
    let span = range.d_far() - d_n;
    let d = (1..=n).map(|i| d_n + ((i - 1) as f64 / n as f64) * span).collect();
    DisparitySet::new(d)
}

/// Sinusoidal encoding of a disparity:
/// [sin(2⁰πd), cos(2⁰πd), …, sin(2^{L−1}πd), cos(2^{L−1}πd)], length 2L.
pub fn encode_disparity(d: f64, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * l);
    let mut freq = std::f64::consts::PI;
    for _ in 0..l {
        let arg = freq * d;
        out.push(arg.sin());
        out.push(arg.cos());
        freq *= 2.0;
    }
    out
}
