//! Forward rendering and its hand-derived reverse-mode adjoint.
//!
//! A render composites an ordered near-to-far stack of RGB-density planes
//! front to back: per pixel, plane i absorbs alpha_i = 1 − exp(−sigma_i·delta_i)
//! of the remaining transmittance T_i and contributes weight w_i = T_i·alpha_i
//! to the output color and depth. Novel views first warp each plane into the
//! target camera with its plane homography (bilinear sub-pixel sampling) and
//! use target-ray plane distances for delta.
//!
//! There is no background term: pixels whose weights sum below 1 keep
//! unallocated transmittance, and the weight-sum map is exported so callers
//! can mask. The backward pass is an adjoint of this exact computation
//! (not a general tape) and is pinned by the finite-difference checker.

use nalgebra::Matrix3;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::hash::{DefaultHasher, Hasher};
use thiserror::Error;

use crate::field::{
    AlphaPlane, FieldError, FrustumGrid, GridGradient, Plane, QueryTrace, backprop_query,
    query_plane,
};
use crate::geometry::{
    Camera, DepthRange, DisparitySet, GeometryError, Pose, bin_edge_disparities, delta_source,
    delta_target, plane_homography, sample_disparities, warp_coords,
};
use crate::raster::{ColorMap, Raster, ScalarMap};

/// Source pixel coordinates per target pixel; non-finite entries mark
/// points with no source preimage (sent to infinity by the homography).
pub type CoordMap = Raster<[f64; 2]>;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("plane stack is empty")]
    EmptyStack,
    #[error("planes out of order at index {index}: depth {z} after {prev_z}")]
    UnsortedPlanes { index: usize, prev_z: f64, z: f64 },
    #[error("plane/delta count mismatch: {planes} planes, {deltas} deltas")]
    CountMismatch { planes: usize, deltas: usize },
    #[error("raster shape mismatch at plane {index}")]
    ShapeMismatch { index: usize },
    #[error("gradient raster shape does not match the render")]
    GradShapeMismatch,
    #[error("opacity {value} outside [0, 1] at pixel ({x}, {y})")]
    AlphaOutOfRange { x: usize, y: usize, value: f64 },
    #[error("composite trace was modified after the forward pass (checksum mismatch)")]
    StaleTrace,
    #[error("grid raster {grid_w}x{grid_h} does not match camera raster {cam_w}x{cam_h}")]
    GridCameraMismatch { grid_w: usize, grid_h: usize, cam_w: usize, cam_h: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Out-of-frustum policy for warp sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Samples outside the source raster read as transparent (rgb 0, sigma 0).
    Zero,
    /// Samples outside the source raster replicate the border pixel.
    Edge,
}

/// Bilinear sample record for one warped plane.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpTrace {
    pub coords: CoordMap,
    pub pad: PadMode,
}

/// Backward linkage for one composited plane: the unwarped source plane,
/// its slice-interpolation record, and the warp record when the plane was
/// resampled into a different view.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneLinkage {
    pub source: Plane,
    pub query: QueryTrace,
    pub warp: Option<WarpTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceLinkage {
    pub grid_slices: usize,
    pub planes: Vec<PlaneLinkage>,
}

/// Everything the backward pass needs from a forward composite, plus
/// per-plane byproducts useful for diagnostics. T_1 is identically 1,
/// weights lie in [0, 1], and they sum to at most 1 per pixel.
#[derive(Clone, Debug)]
pub struct CompositeTrace {
    pub planes: Vec<Plane>,
    pub deltas: Vec<ScalarMap>,
    pub alpha: Vec<ScalarMap>,
    pub trans: Vec<ScalarMap>,
    pub weights: Vec<ScalarMap>,
    pub weight_sum: ScalarMap,
    pub linkage: Option<TraceLinkage>,
    checksum: u64,
}

/// A rendered view: color, raw expected depth, and per-pixel weight sum
/// (how much transmittance the plane stack absorbed).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: ColorMap,
    pub depth: ScalarMap,
    pub weight_sum: ScalarMap,
}

/// Gradients produced by [`backward`]: per composited plane, and pulled all
/// the way to grid parameters when the trace carries linkage.
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub plane_rgb: Vec<ColorMap>,
    pub plane_sigma: Vec<ScalarMap>,
    pub grid: Option<GridGradient>,
}

fn hash_scalar(h: &mut DefaultHasher, m: &ScalarMap) {
    h.write_usize(m.width());
    h.write_usize(m.height());
    for &v in m.data() {
        h.write_u64(v.to_bits());
    }
}

fn hash_color(h: &mut DefaultHasher, m: &ColorMap) {
    h.write_usize(m.width());
    h.write_usize(m.height());
    for px in m.data() {
        for c in px {
            h.write_u64(c.to_bits());
        }
    }
}

fn hash_plane(h: &mut DefaultHasher, p: &Plane) {
    h.write_u64(p.z.to_bits());
    hash_color(h, &p.rgb);
    hash_scalar(h, &p.sigma);
}

impl CompositeTrace {
    fn compute_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        h.write_usize(self.planes.len());
        for p in &self.planes {
            hash_plane(&mut h, p);
        }
        for m in &self.deltas {
            hash_scalar(&mut h, m);
        }
        for m in &self.alpha {
            hash_scalar(&mut h, m);
        }
        for m in &self.trans {
            hash_scalar(&mut h, m);
        }
        for m in &self.weights {
            hash_scalar(&mut h, m);
        }
        hash_scalar(&mut h, &self.weight_sum);
        if let Some(link) = &self.linkage {
            h.write_usize(link.grid_slices);
            for pl in &link.planes {
                hash_plane(&mut h, &pl.source);
                h.write_u64(pl.query.d.to_bits());
                h.write_usize(pl.query.lo);
                h.write_usize(pl.query.hi);
                h.write_u64(pl.query.w_lo.to_bits());
                h.write_u64(pl.query.w_hi.to_bits());
                hash_scalar(&mut h, &pl.query.sigma_sign);
                if let Some(wt) = &pl.warp {
                    h.write_u8(match wt.pad {
                        PadMode::Zero => 0,
                        PadMode::Edge => 1,
                    });
                    h.write_usize(wt.coords.width());
                    h.write_usize(wt.coords.height());
                    for c in wt.coords.data() {
                        h.write_u64(c[0].to_bits());
                        h.write_u64(c[1].to_bits());
                    }
                }
            }
        }
        h.finish()
    }
}

fn check_stack(planes: &[Plane], deltas: &[ScalarMap]) -> Result<(usize, usize), RenderError> {
    let first = planes.first().ok_or(RenderError::EmptyStack)?;
    if planes.len() != deltas.len() {
        return Err(RenderError::CountMismatch { planes: planes.len(), deltas: deltas.len() });
    }
    let (w, h) = (first.rgb.width(), first.rgb.height());
    for (i, p) in planes.iter().enumerate() {
        if i > 0 && p.z < planes[i - 1].z {
            return Err(RenderError::UnsortedPlanes {
                index: i,
                prev_z: planes[i - 1].z,
                z: p.z,
            });
        }
        let ok = p.rgb.width() == w
            && p.rgb.height() == h
            && p.sigma.width() == w
            && p.sigma.height() == h
            && deltas[i].width() == w
            && deltas[i].height() == h;
        if !ok {
            return Err(RenderError::ShapeMismatch { index: i });
        }
    }
    Ok((w, h))
}

fn composite_with_linkage(
    planes: Vec<Plane>,
    deltas: Vec<ScalarMap>,
    linkage: Option<TraceLinkage>,
) -> Result<(ColorMap, CompositeTrace), RenderError> {
    let (w, h) = check_stack(&planes, &deltas)?;
    let n = planes.len();
    let mut rgb = ColorMap::black(w, h);
    let mut alpha = vec![ScalarMap::zeros(w, h); n];
    let mut trans = vec![ScalarMap::zeros(w, h); n];
    let mut weights = vec![ScalarMap::zeros(w, h); n];
    let mut weight_sum = ScalarMap::zeros(w, h);

    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0f64;
            let mut acc = [0.0f64; 3];
            let mut wsum = 0.0f64;
            for i in 0..n {
                let a = planes[i].sigma.at(x, y) * deltas[i].at(x, y);
                // alpha via expm1 keeps precision for small optical depth;
                // transmittance then decays by the same 1 − alpha factor the
                // MPI path uses, so the two composites agree exactly.
                let al = -(-a).exp_m1();
                let wi = t * al;
                let c = planes[i].rgb.at(x, y);
                for ch in 0..3 {
                    acc[ch] += wi * c[ch];
                }
                wsum += wi;
                alpha[i].set(x, y, al);
                trans[i].set(x, y, t);
                weights[i].set(x, y, wi);
                t *= 1.0 - al;
            }
            rgb.set(x, y, acc);
            weight_sum.set(x, y, wsum);
        }
    }

    let mut trace = CompositeTrace {
        planes,
        deltas,
        alpha,
        trans,
        weights,
        weight_sum,
        linkage,
        checksum: 0,
    };
    trace.checksum = trace.compute_checksum();
    Ok((rgb, trace))
}

/// Front-to-back volume compositing of a near-to-far plane stack.
/// Returns the color image and the trace consumed by [`render_depth`] and
/// [`backward`].
pub fn composite(
    planes: Vec<Plane>,
    deltas: Vec<ScalarMap>,
) -> Result<(ColorMap, CompositeTrace), RenderError> {
    composite_with_linkage(planes, deltas, None)
}

/// Expected depth Ẑ = Σ w_i·z_i, raw: transparent pixels read near 0.
pub fn render_depth(trace: &CompositeTrace, ds: &DisparitySet) -> ScalarMap {
    debug_assert_eq!(trace.planes.len(), ds.len());
    debug_assert!(
        trace
            .planes
            .iter()
            .zip(0..ds.len())
            .all(|(p, i)| (p.z - ds.depth(i)).abs() <= 1e-12 * p.z)
    );
    let mut depth = ScalarMap::zeros(trace.weight_sum.width(), trace.weight_sum.height());
    for i in 0..trace.planes.len() {
        let z = ds.depth(i);
        for (idx, v) in depth.data_mut().iter_mut().enumerate() {
            *v += trace.weights[i].data()[idx] * z;
        }
    }
    depth
}

/// Depth divided by weight sum where the stack absorbed more than
/// `WEIGHT_SUM_EPS`; elsewhere (near-transparent pixels) masked to 0.
pub const WEIGHT_SUM_EPS: f64 = 1e-4;

pub fn render_depth_normalized(trace: &CompositeTrace, ds: &DisparitySet) -> ScalarMap {
    let raw = render_depth(trace, ds);
    let mut out = ScalarMap::zeros(raw.width(), raw.height());
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ws = trace.weight_sum.data()[i];
        *v = if ws > WEIGHT_SUM_EPS { raw.data()[i] / ws } else { 0.0 };
    }
    out
}

/// Visits the up-to-four integer taps of a bilinear sample at (x, y),
/// yielding (ix, iy, weight). Zero padding skips taps outside the raster;
/// edge padding clamps them to the border. Non-finite coordinates yield
/// nothing under either policy.
fn bilinear_taps(
    w: usize,
    h: usize,
    x: f64,
    y: f64,
    pad: PadMode,
    mut visit: impl FnMut(usize, usize, f64),
) {
    if !(x.is_finite() && y.is_finite()) {
        return;
    }
    // Clamp before the float-to-int cast; far outside either everything is
    // skipped (zero) or everything lands on the border (edge) regardless.
    let xc = x.clamp(-1e12, 1e12);
    let yc = y.clamp(-1e12, 1e12);
    let x0 = xc.floor() as i64;
    let y0 = yc.floor() as i64;
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (ix, iy) = (x0 + dx, y0 + dy);
            let weight = wx * wy;
            match pad {
                PadMode::Zero => {
                    if ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h {
                        visit(ix as usize, iy as usize, weight);
                    }
                }
                PadMode::Edge => {
                    let ix = ix.clamp(0, w as i64 - 1) as usize;
                    let iy = iy.clamp(0, h as i64 - 1) as usize;
                    visit(ix, iy, weight);
                }
            }
        }
    }
}

/// Resamples a plane through a target-to-source homography onto a target
/// raster of the given size: rgb and sigma are bilinearly interpolated at
/// the warped coordinates. Returns the warped plane and the sample record
/// needed to push gradients back.
pub fn warp_sample(
    plane: &Plane,
    hom: &Matrix3<f64>,
    width: usize,
    height: usize,
    pad: PadMode,
) -> (Plane, WarpTrace) {
    let (sw, sh) = (plane.rgb.width(), plane.rgb.height());
    let mut rgb = ColorMap::black(width, height);
    let mut sigma = ScalarMap::zeros(width, height);
    let mut coords = CoordMap::filled(width, height, [f64::INFINITY; 2]);
    for y in 0..height {
        for x in 0..width {
            let Ok((xs, ys)) = warp_coords(hom, x as f64, y as f64) else {
                continue; // no preimage: stays transparent
            };
            coords.set(x, y, [xs, ys]);
            let mut c = [0.0f64; 3];
            let mut s = 0.0f64;
            bilinear_taps(sw, sh, xs, ys, pad, |ix, iy, wgt| {
                let src = plane.rgb.at(ix, iy);
                for ch in 0..3 {
                    c[ch] += wgt * src[ch];
                }
                s += wgt * plane.sigma.at(ix, iy);
            });
            rgb.set(x, y, c);
            sigma.set(x, y, s);
        }
    }
    (Plane { z: plane.z, rgb, sigma }, WarpTrace { coords, pad })
}

/// Renders the source view itself: queries one plane per disparity and
/// composites with source-ray distances, no warping. The grid raster must
/// match the camera raster.
pub fn render_source(
    grid: &FrustumGrid,
    cam: &Camera,
    ds: &DisparitySet,
) -> Result<(RenderOutput, CompositeTrace), RenderError> {
    if grid.width() != cam.width || grid.height() != cam.height {
        return Err(RenderError::GridCameraMismatch {
            grid_w: grid.width(),
            grid_h: grid.height(),
            cam_w: cam.width,
            cam_h: cam.height,
        });
    }
    let mut planes = Vec::with_capacity(ds.len());
    let mut links = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (plane, query) = query_plane(grid, ds.disparity(i))?;
        links.push(PlaneLinkage { source: plane.clone(), query, warp: None });
        planes.push(plane);
    }
    let deltas = delta_source(cam, ds);
    let linkage = TraceLinkage { grid_slices: grid.num_slices(), planes: links };
    let (rgb, trace) = composite_with_linkage(planes, deltas, Some(linkage))?;
    let depth = render_depth(&trace, ds);
    let weight_sum = trace.weight_sum.clone();
    Ok((RenderOutput { rgb, depth, weight_sum }, trace))
}

/// Renders a novel view: per disparity, query a plane, warp it into the
/// target camera with its plane homography, then composite with target-ray
/// plane distances. With the identity pose this reduces to the source
/// render within floating-point noise.
pub fn render_novel(
    grid: &FrustumGrid,
    cam: &Camera,
    pose: &Pose,
    ds: &DisparitySet,
    pad: PadMode,
) -> Result<(RenderOutput, CompositeTrace), RenderError> {
    let mut planes = Vec::with_capacity(ds.len());
    let mut links = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (plane, query) = query_plane(grid, ds.disparity(i))?;
        let hom = plane_homography(cam, pose, plane.z)?;
        let (warped, warp) = warp_sample(&plane, &hom, cam.width, cam.height, pad);
        links.push(PlaneLinkage { source: plane, query, warp: Some(warp) });
        planes.push(warped);
    }
    let deltas = delta_target(cam, pose, ds)?;
    let linkage = TraceLinkage { grid_slices: grid.num_slices(), planes: links };
    let (rgb, trace) = composite_with_linkage(planes, deltas, Some(linkage))?;
    let depth = render_depth(&trace, ds);
    let weight_sum = trace.weight_sum.clone();
    Ok((RenderOutput { rgb, depth, weight_sum }, trace))
}

/// Classical over-compositing of opacity planes, front to back:
/// rgb = Σ T_i·α_i·c_i with T_i = Π_{j<i}(1 − α_j). Equals [`composite`]
/// when the alphas come from [`to_alpha`] on the same stack. Opacities must
/// lie in [0, 1]; exactly 1.0 occurs only via exponential underflow.
pub fn mpi_composite(alpha_planes: &[AlphaPlane]) -> Result<ColorMap, RenderError> {
    let first = alpha_planes.first().ok_or(RenderError::EmptyStack)?;
    let (w, h) = (first.rgb.width(), first.rgb.height());
    for (i, p) in alpha_planes.iter().enumerate() {
        if i > 0 && p.z < alpha_planes[i - 1].z {
            return Err(RenderError::UnsortedPlanes {
                index: i,
                prev_z: alpha_planes[i - 1].z,
                z: p.z,
            });
        }
        if p.rgb.width() != w || p.rgb.height() != h || !p.alpha.same_shape(&p.rgb) {
            return Err(RenderError::ShapeMismatch { index: i });
        }
        for (x, y) in p.alpha.coords() {
            let a = p.alpha.at(x, y);
            if !(0.0..=1.0).contains(&a) {
                return Err(RenderError::AlphaOutOfRange { x, y, value: a });
            }
        }
    }
    let mut rgb = ColorMap::black(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0f64;
            let mut acc = [0.0f64; 3];
            for p in alpha_planes {
                let al = p.alpha.at(x, y);
                let wi = t * al;
                let c = p.rgb.at(x, y);
                for ch in 0..3 {
                    acc[ch] += wi * c[ch];
                }
                t *= 1.0 - al;
            }
            rgb.set(x, y, acc);
        }
    }
    Ok(rgb)
}

/// Reverse-mode pass for one composite. `grad_rgb` is the loss gradient at
/// the output color; `grad_depth` (optional) at the raw expected depth.
/// Returns per-plane gradients at the composited rgb/sigma rasters, and
/// grid-parameter gradients when the trace has query linkage (pulling back
/// through bilinear warp taps, activations, and slice interpolation).
///
/// Per pixel, with a_i = sigma_i·delta_i and G_i = Σ_ch g_rgb·c_i + g_z·z_i:
/// dL/da_i = G_i·T_i·(1 − alpha_i) − Σ_{k>i} G_k·w_k, evaluated with suffix
/// sums; then dL/dsigma_i = dL/da_i·delta_i and dL/dc_i = g_rgb·w_i.
pub fn backward(
    trace: &CompositeTrace,
    grad_rgb: &ColorMap,
    grad_depth: Option<&ScalarMap>,
) -> Result<BackwardOutput, RenderError> {
    if trace.compute_checksum() != trace.checksum {
        return Err(RenderError::StaleTrace);
    }
    let (w, h) = (trace.weight_sum.width(), trace.weight_sum.height());
    if grad_rgb.width() != w || grad_rgb.height() != h {
        return Err(RenderError::GradShapeMismatch);
    }
    if let Some(gd) = grad_depth {
        if gd.width() != w || gd.height() != h {
            return Err(RenderError::GradShapeMismatch);
        }
    }
    let n = trace.planes.len();
    let mut plane_rgb = vec![ColorMap::black(w, h); n];
    let mut plane_sigma = vec![ScalarMap::zeros(w, h); n];

    // Reverse plane order so Σ_{k>i} G_k·w_k is a running suffix sum.
    let mut suffix = ScalarMap::zeros(w, h);
    for i in (0..n).rev() {
        let z = trace.planes[i].z;
        for y in 0..h {
            for x in 0..w {
                let g = grad_rgb.at(x, y);
                let c = trace.planes[i].rgb.at(x, y);
                let gz = grad_depth.map_or(0.0, |m| m.at(x, y));
                let big_g = g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + gz * z;
                let wi = trace.weights[i].at(x, y);
                let da = big_g * trace.trans[i].at(x, y) * (1.0 - trace.alpha[i].at(x, y))
                    - suffix.at(x, y);
                plane_sigma[i].set(x, y, da * trace.deltas[i].at(x, y));
                plane_rgb[i].set(x, y, [g[0] * wi, g[1] * wi, g[2] * wi]);
                suffix.set(x, y, suffix.at(x, y) + big_g * wi);
            }
        }
    }

    let grid = match &trace.linkage {
        None => None,
        Some(link) => {
            let mut grad = GridGradient::zeros(
                link.grid_slices,
                link.planes[0].source.rgb.height(),
                link.planes[0].source.rgb.width(),
            );
            for (i, pl) in link.planes.iter().enumerate() {
                let (g_src_rgb, g_src_sigma) = match &pl.warp {
                    None => (plane_rgb[i].clone(), plane_sigma[i].clone()),
                    Some(wt) => {
                        let (sw, sh) = (pl.source.rgb.width(), pl.source.rgb.height());
                        let mut gr = ColorMap::black(sw, sh);
                        let mut gs = ScalarMap::zeros(sw, sh);
                        for (x, y) in wt.coords.coords() {
                            let [xs, ys] = wt.coords.at(x, y);
                            let gc = plane_rgb[i].at(x, y);
                            let gsig = plane_sigma[i].at(x, y);
                            bilinear_taps(sw, sh, xs, ys, wt.pad, |ix, iy, wgt| {
                                let acc = gr.get_mut(ix, iy);
                                for ch in 0..3 {
                                    acc[ch] += wgt * gc[ch];
                                }
                                *gs.get_mut(ix, iy) += wgt * gsig;
                            });
                        }
                        (gr, gs)
                    }
                };
                backprop_query(&pl.query, &pl.source, &g_src_rgb, &g_src_sigma, &mut grad);
            }
            Some(grad)
        }
    };

    Ok(BackwardOutput { plane_rgb, plane_sigma, grid })
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub n_planes: usize,
    pub grid_slices: usize,
    pub width: usize,
    pub height: usize,
    /// Nominal finite-difference step; the quotient uses the achieved
    /// parameter delta after f32 rounding.
    pub step: f64,
    pub threshold: f64,
    /// Density values this close to the activation kink are skipped.
    pub kink_margin: f64,
    /// Relative error denominator floor, guarding near-zero gradients.
    pub rel_floor: f64,
    /// Check at most this many randomly chosen parameters (0 = all).
    pub max_params: usize,
    /// Negative control: perturb one analytic gradient entry so the check
    /// must fail.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            n_planes: 4,
            grid_slices: 4,
            width: 8,
            height: 8,
            step: 1e-5,
            threshold: 1e-4,
            kink_margin: 1e-6,
            rel_floor: 1e-4,
            max_params: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub skipped_kink: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub pass: bool,
}

/// Compares the analytic grid-parameter gradient of a random novel-view
/// render against central finite differences, deterministically from the
/// seed. The scalar probe is a fixed random linear functional of the
/// output color and raw depth. Density pre-activations are drawn in
/// [0.3, 0.7], clear of the kink, so every difference quotient is valid;
/// the kink margin still guards interpolated values.
pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport, RenderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.width, config.height);
    let cam = Camera::new(w as f64, h as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
        .expect("valid gradcheck camera");
    let range = DepthRange::new(1.0, 8.0).expect("valid gradcheck range");
    let slice_ds = bin_edge_disparities(config.grid_slices, &range)?.disparities().to_vec();
    let n_params = config.grid_slices * h * w * 4;
    let params: Vec<f32> = (0..n_params)
        .map(|i| {
            if i % 4 == 3 {
                rng.random_range(0.3..0.7) as f32
            } else {
                rng.random_range(-2.0..2.0) as f32
            }
        })
        .collect();
    let mut grid = FrustumGrid::new(w, h, slice_ds, params)?;

    let pose = random_small_pose(&mut rng);
    let span = grid.disparity_span();
    let sample_range = DepthRange::from_disparities(span.1, span.0)?;
    let ds = sample_disparities(config.n_planes, &sample_range, &mut rng)?;

    let mut g_rgb = ColorMap::black(w, h);
    let mut g_depth = ScalarMap::zeros(w, h);
    for (x, y) in g_rgb.coords().collect::<Vec<_>>() {
        g_rgb.set(x, y, [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        g_depth.set(x, y, rng.random_range(-1.0..1.0));
    }

    let probe = |grid: &FrustumGrid| -> Result<f64, RenderError> {
        let (out, _) = render_novel(grid, &cam, &pose, &ds, PadMode::Zero)?;
        let mut loss = 0.0;
        for (x, y) in out.rgb.coords() {
            let c = out.rgb.at(x, y);
            let g = g_rgb.at(x, y);
            loss += g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
            loss += g_depth.at(x, y) * out.depth.at(x, y);
        }
        Ok(loss)
    };

    let (_, trace) = render_novel(&grid, &cam, &pose, &ds, PadMode::Zero)?;
    let back = backward(&trace, &g_rgb, Some(&g_depth))?;
    let mut analytic = back.grid.expect("render_novel trace carries linkage");

    let mut indices: Vec<usize> = (0..n_params).collect();
    if config.max_params > 0 && config.max_params < n_params {
        // Partial Fisher-Yates: the first max_params entries become a
        // uniform sample without replacement.
        for i in 0..config.max_params {
            let j = rng.random_range(i..n_params);
            indices.swap(i, j);
        }
        indices.truncate(config.max_params);
    }
    if config.corrupt {
        analytic.data_mut()[indices[0]] += 1.0;
    }

    let mut report = GradcheckReport {
        checked: 0,
        skipped_kink: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_param: 0,
        pass: true,
    };
    for &idx in &indices {
        let p0 = grid.params()[idx];
        if idx % 4 == 3 && (p0 as f64).abs() < config.kink_margin {
            report.skipped_kink += 1;
            continue;
        }
        let p_plus = (p0 as f64 + config.step) as f32;
        let p_minus = (p0 as f64 - config.step) as f32;
        let achieved = p_plus as f64 - p_minus as f64;
        if achieved == 0.0 {
            report.skipped_kink += 1;
            continue;
        }
        grid.params_mut()[idx] = p_plus;
        let l_plus = probe(&grid)?;
        grid.params_mut()[idx] = p_minus;
        let l_minus = probe(&grid)?;
        grid.params_mut()[idx] = p0;
        let fd = (l_plus - l_minus) / achieved;
        let an = analytic.data()[idx];
        let abs_err = (an - fd).abs();
        let rel_err = abs_err / an.abs().max(fd.abs()).max(config.rel_floor);
        if abs_err > report.max_abs_err {
            report.max_abs_err = abs_err;
        }
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst_param = idx;
        }
        report.checked += 1;
    }
    report.pass = report.max_rel_err < config.threshold;
    Ok(report)
}

fn random_small_pose<R: Rng>(rng: &mut R) -> Pose {
    let (sx, cx) = (rng.random_range(-5.0f64..5.0)).to_radians().sin_cos();
    let (sy, cy) = (rng.random_range(-5.0f64..5.0)).to_radians().sin_cos();
    let (sz, cz) = (rng.random_range(-5.0f64..5.0)).to_radians().sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    let t = nalgebra::Vector3::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    );
    Pose::new(rx * ry * rz, t).expect("rotation product is a rotation")
}
