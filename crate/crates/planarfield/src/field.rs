//! The optimizable scene: a frustum-shaped parameter grid that yields an
//! RGB-density plane at any disparity inside its slice range.
//!
//! Parameters are stored pre-activation as 32-bit floats, bit-identical with
//! the on-disk format; interpolation and activation math runs in f64. A query
//! linearly interpolates the two slices bracketing the requested disparity,
//! then activates: logistic for RGB, absolute value for density. Interpolating
//! before activation keeps outputs in range for every parameter value and
//! confines the density kink to pre-activation zero.

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

use crate::geometry::{DepthRange, bin_edge_disparities};
use crate::raster::{ColorMap, ScalarMap};

pub const GRID_MAGIC: &[u8; 9] = b"MINEGRID\0";
pub const GRID_FILE_VERSION: u32 = 1;
/// Default density value for freshly initialized grids.
pub const DEFAULT_SIGMA0: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid needs at least 2 slices (got {d})")]
    TooFewSlices { d: usize },
    #[error("grid slices must be at least 1x1 (got {width}x{height})")]
    EmptySlice { width: usize, height: usize },
    #[error("slice disparities must be positive, finite, and strictly decreasing")]
    BadSliceDisparities,
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite parameter at flat index {index}")]
    NonFiniteParam { index: usize },
    #[error("query disparity {d} outside slice range [{d_min}, {d_max}]")]
    QueryOutOfRange { d: f64, d_min: f64, d_max: f64 },
    #[error("raster shape mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    ShapeMismatch { expected_w: usize, expected_h: usize, got_w: usize, got_h: usize },
    #[error("negative plane distance {value} at pixel ({x}, {y})")]
    NegativeDelta { x: usize, y: usize, value: f64 },
    #[error("grid file damaged at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported grid file version {found} (this build reads version 1)")]
    UnsupportedVersion { found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One fronto-parallel RGB-density plane at depth z. rgb values lie in
/// [0, 1], sigma is nonnegative (1/scene-units).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub z: f64,
    pub rgb: ColorMap,
    pub sigma: ScalarMap,
}

impl Plane {
    pub fn new(z: f64, rgb: ColorMap, sigma: ScalarMap) -> Result<Self, FieldError> {
        if rgb.width() != sigma.width() || rgb.height() != sigma.height() {
            return Err(FieldError::ShapeMismatch {
                expected_w: rgb.width(),
                expected_h: rgb.height(),
                got_w: sigma.width(),
                got_h: sigma.height(),
            });
        }
        assert!(z > 0.0, "plane depth must be positive");
        debug_assert!(rgb.data().iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        debug_assert!(sigma.data().iter().all(|&s| s >= 0.0));
        Ok(Plane { z, rgb, sigma })
    }
}

/// A plane with density already folded into per-pixel opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaPlane {
    pub z: f64,
    pub rgb: ColorMap,
    pub alpha: ScalarMap,
}

/// D slices of H×W×4 pre-activation parameters at fixed, strictly decreasing
/// slice disparities. Channel order is [r, g, b, sigma]; storage is row-major
/// (slice, row, col, channel), matching the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumGrid {
    num_slices: usize,
    width: usize,
    height: usize,
    slice_disparities: Vec<f64>,
    params: Vec<f32>,
}

impl FrustumGrid {
    pub fn new(
        width: usize,
        height: usize,
        slice_disparities: Vec<f64>,
        params: Vec<f32>,
    ) -> Result<Self, FieldError> {
        let d = slice_disparities.len();
        if d < 2 {
            return Err(FieldError::TooFewSlices { d });
        }
        if width == 0 || height == 0 {
            return Err(FieldError::EmptySlice { width, height });
        }
        let positive = slice_disparities.iter().all(|&v| v > 0.0 && v.is_finite());
        let decreasing = slice_disparities.windows(2).all(|w| w[0] > w[1]);
        if !positive || !decreasing {
            return Err(FieldError::BadSliceDisparities);
        }
        let expected = d * height * width * 4;
        if params.len() != expected {
            return Err(FieldError::ParamCount { expected, got: params.len() });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(FieldError::NonFiniteParam { index });
        }
        Ok(FrustumGrid { num_slices: d, width, height, slice_disparities, params })
    }

    #[inline]
    pub fn num_slices(&self) -> usize {
        self.num_slices
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn slice_disparities(&self) -> &[f64] {
        &self.slice_disparities
    }

    /// Queryable disparity interval (d_min, d_max) = (d̄_D, d̄_1).
    pub fn disparity_span(&self) -> (f64, f64) {
        (self.slice_disparities[self.num_slices - 1], self.slice_disparities[0])
    }

    #[inline]
    pub fn param_index(&self, slice: usize, y: usize, x: usize, ch: usize) -> usize {
        debug_assert!(slice < self.num_slices && y < self.height && x < self.width && ch < 4);
        ((slice * self.height + y) * self.width + x) * 4 + ch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    /// Mutable parameter access for optimizer updates. Callers must keep
    /// values finite; queries assume it.
    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }
}

/// Gradient accumulator shaped like a grid's parameter block, in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGradient {
    num_slices: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GridGradient {
    pub fn zeros(num_slices: usize, height: usize, width: usize) -> Self {
        GridGradient { num_slices, width, height, data: vec![0.0; num_slices * height * width * 4] }
    }

    pub fn zeros_like(grid: &FrustumGrid) -> Self {
        GridGradient::zeros(grid.num_slices, grid.height, grid.width)
    }

    #[inline]
    pub fn index(&self, slice: usize, y: usize, x: usize, ch: usize) -> usize {
        debug_assert!(slice < self.num_slices && y < self.height && x < self.width && ch < 4);
        ((slice * self.height + y) * self.width + x) * 4 + ch
    }

    #[inline]
    pub fn accumulate(&mut self, slice: usize, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.index(slice, y, x, ch);
        self.data[i] += v;
    }

    #[inline]
    pub fn at(&self, slice: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.index(slice, y, x, ch)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Interpolation record tying one queried plane back to its two source
/// slices; consumed by the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTrace {
    pub d: f64,
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
    /// sign(pre-activation density) per pixel, 0 at the kink.
    pub sigma_sign: ScalarMap,
}

/// Numerically stable logistic; output always in (0, 1).
#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) }
}

/// Produces the plane at disparity d by linear interpolation of the two
/// bracketing slices' pre-activations, then activation. An exact slice hit
/// returns that slice's activation with a degenerate (1, 0) weight pair.
/// No extrapolation: d must lie inside the slice span.
pub fn query_plane(grid: &FrustumGrid, d: f64) -> Result<(Plane, QueryTrace), FieldError> {
    let ds = grid.slice_disparities();
    let (d_min, d_max) = grid.disparity_span();
    if !(d >= d_min && d <= d_max) {
        return Err(FieldError::QueryOutOfRange { d, d_min, d_max });
    }
    // Largest lo with d̄_lo ≥ d; loop invariant ds[lo] ≥ d holds from ds[0] = d_max.
    let mut lo = 0;
    while lo + 1 < ds.len() && ds[lo + 1] >= d {
        lo += 1;
    }
    let (hi, u) = if lo == ds.len() - 1 {
        (lo, 0.0) // d == d_min exactly
    } else {
        (lo + 1, (ds[lo] - d) / (ds[lo] - ds[lo + 1]))
    };
    let (w_lo, w_hi) = (1.0 - u, u);

    let (w, h) = (grid.width, grid.height);
    let mut rgb = ColorMap::black(w, h);
    let mut sigma = ScalarMap::zeros(w, h);
    let mut sigma_sign = ScalarMap::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i_lo = grid.param_index(lo, y, x, 0);
            let i_hi = grid.param_index(hi, y, x, 0);
            let mut pre = [0.0f64; 4];
            for (ch, v) in pre.iter_mut().enumerate() {
                *v = w_lo * grid.params[i_lo + ch] as f64 + w_hi * grid.params[i_hi + ch] as f64;
            }
            rgb.set(x, y, [logistic(pre[0]), logistic(pre[1]), logistic(pre[2])]);
            sigma.set(x, y, pre[3].abs());
            sigma_sign.set(x, y, if pre[3] == 0.0 { 0.0 } else { pre[3].signum() });
        }
    }
    let plane = Plane { z: 1.0 / d, rgb, sigma };
    Ok((plane, QueryTrace { d, lo, hi, w_lo, w_hi, sigma_sign }))
}

/// Pulls gradients at a queried plane's activated values back to the grid
/// parameters: logistic' = rgb·(1 − rgb) from the stored activation, |·|' =
/// recorded sign, then the interpolation weights scatter into both slices.
pub fn backprop_query(
    trace: &QueryTrace,
    plane: &Plane,
    g_rgb: &ColorMap,
    g_sigma: &ScalarMap,
    grad: &mut GridGradient,
) {
    assert!(plane.rgb.same_shape(g_rgb) && plane.sigma.same_shape(g_sigma));
    assert_eq!((grad.width, grad.height), (plane.rgb.width(), plane.rgb.height()));
    for (x, y) in plane.rgb.coords() {
        let rgb = plane.rgb.at(x, y);
        let g = g_rgb.at(x, y);
        for ch in 0..3 {
            let g_pre = g[ch] * rgb[ch] * (1.0 - rgb[ch]);
            grad.accumulate(trace.lo, y, x, ch, trace.w_lo * g_pre);
            grad.accumulate(trace.hi, y, x, ch, trace.w_hi * g_pre);
        }
        let g_pre = g_sigma.at(x, y) * trace.sigma_sign.at(x, y);
        grad.accumulate(trace.lo, y, x, 3, trace.w_lo * g_pre);
        grad.accumulate(trace.hi, y, x, 3, trace.w_hi * g_pre);
    }
}

/// Folds density into opacity: alpha = 1 − exp(−sigma·delta). Opacity
/// reaches 1.0 only when sigma·delta overflows the exponential (≈ 745).
pub fn to_alpha(plane: &Plane, delta: &ScalarMap) -> Result<AlphaPlane, FieldError> {
    if !plane.sigma.same_shape(delta) {
        return Err(FieldError::ShapeMismatch {
            expected_w: plane.sigma.width(),
            expected_h: plane.sigma.height(),
            got_w: delta.width(),
            got_h: delta.height(),
        });
    }
    for (x, y) in delta.coords() {
        let v = delta.at(x, y);
        if !(v >= 0.0) {
            return Err(FieldError::NegativeDelta { x, y, value: v });
        }
    }
    let mut alpha = ScalarMap::zeros(delta.width(), delta.height());
    for (x, y) in alpha.coords().collect::<Vec<_>>() {
        alpha.set(x, y, -(-plane.sigma.at(x, y) * delta.at(x, y)).exp_m1());
    }
    Ok(AlphaPlane { z: plane.z, rgb: plane.rgb.clone(), alpha })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    /// rgb pre-activations 0 (activates to 0.5), density pre-activation σ₀.
    Constant,
    /// Constant baseline plus uniform noise in ±1e-2 on every parameter.
    SeededNoise { seed: u64 },
}

/// Builds a fresh grid with slices at the upper disparity bin edges of the
/// range, D ≥ 2 slices.
pub fn init_grid(
    d: usize,
    width: usize,
    height: usize,
    range: &DepthRange,
    mode: InitMode,
    sigma0: f64,
) -> Result<FrustumGrid, FieldError> {
    if d < 2 {
        return Err(FieldError::TooFewSlices { d });
    }
    let slice_disparities = bin_edge_disparities(d, range)
        .map_err(|_| FieldError::BadSliceDisparities)?
        .disparities()
        .to_vec();
    let n = d * height * width * 4;
    let mut params = vec![0.0f32; n];
    for i in (3..n).step_by(4) {
        params[i] = sigma0 as f32;
    }
    if let InitMode::SeededNoise { seed } = mode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut params {
            *p = (*p as f64 + rng.random_range(-1e-2..1e-2)) as f32;
        }
    }
    FrustumGrid::new(width, height, slice_disparities, params)
}

pub fn save_grid(grid: &FrustumGrid, path: &Path) -> Result<(), FieldError> {
    let mut buf = Vec::with_capacity(9 + 4 * 4 + 8 * grid.num_slices + 4 * grid.params.len());
    buf.extend_from_slice(GRID_MAGIC);
    buf.write_u32::<LittleEndian>(GRID_FILE_VERSION)?;
    buf.write_u32::<LittleEndian>(grid.num_slices as u32)?;
    buf.write_u32::<LittleEndian>(grid.height as u32)?;
    buf.write_u32::<LittleEndian>(grid.width as u32)?;
    for &d in &grid.slice_disparities {
        buf.write_f64::<LittleEndian>(d)?;
    }
    for &p in &grid.params {
        buf.write_f32::<LittleEndian>(p)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct GridReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> GridReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FieldError> {
        match self.buf.get(self.pos..).and_then(|rest| rest.get(..n)) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => Err(FieldError::Malformed {
                offset: self.buf.len(),
                reason: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, FieldError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, FieldError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_grid(path: &Path) -> Result<FrustumGrid, FieldError> {
    let bytes = std::fs::read(path)?;
    let mut r = GridReader { buf: &bytes, pos: 0 };

    let magic = r.take(GRID_MAGIC.len(), "magic")?;
    if magic != GRID_MAGIC {
        return Err(FieldError::Malformed { offset: 0, reason: "bad magic".into() });
    }
    let version = r.u32("version")?;
    if version != GRID_FILE_VERSION {
        return Err(FieldError::UnsupportedVersion { found: version });
    }
    let d = r.u32("slice count")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    if d < 2 {
        return Err(FieldError::Malformed {
            offset: 13,
            reason: format!("slice count {d} below minimum 2"),
        });
    }
    if width == 0 || height == 0 {
        return Err(FieldError::Malformed {
            offset: 17,
            reason: format!("empty slice shape {width}x{height}"),
        });
    }
    let n_params = d
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(4))
        .filter(|&v| v.checked_mul(4).is_some())
        .ok_or_else(|| FieldError::Malformed {
            offset: 13,
            reason: "implausible grid dimensions".into(),
        })?;

    let disparity_offset = r.pos;
    let mut slice_disparities = Vec::with_capacity(d);
    for _ in 0..d {
        slice_disparities.push(r.f64("slice disparities")?);
    }
    let positive = slice_disparities.iter().all(|&v| v > 0.0 && v.is_finite());
    let decreasing = slice_disparities.windows(2).all(|w| w[0] > w[1]);
    if !positive || !decreasing {
        return Err(FieldError::Malformed {
            offset: disparity_offset,
            reason: "slice disparities not positive and strictly decreasing".into(),
        });
    }

    let mut params = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let at = r.pos;
        let p = r.f32("parameters")?;
        if !p.is_finite() {
            return Err(FieldError::Malformed {
                offset: at,
                reason: format!("non-finite parameter at flat index {i}"),
            });
        }
        params.push(p);
    }
    if r.pos != bytes.len() {
        return Err(FieldError::Malformed {
            offset: r.pos,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    FrustumGrid::new(width, height, slice_disparities, params)
}
