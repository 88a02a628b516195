//! Training losses with hand-derived gradients, plus image quality metrics
//! (PSNR, SSIM) and forward-pass cost formulas for renderer comparisons.
//!
//! Every loss returns its scalar value together with the gradient with
//! respect to the optimized input, and each gradient is covered by a
//! central finite-difference test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ColorMap, ScalarMap};

pub const SSIM_C1: f64 = 1e-4; // 0.01²
pub const SSIM_C2: f64 = 9e-4; // 0.03²
pub const PSNR_CAP_DB: f64 = 99.0;
pub const DEFAULT_SSIM_WINDOW: usize = 3;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {w_a}x{h_a} vs {w_b}x{h_b}")]
    ShapeMismatch { w_a: usize, h_a: usize, w_b: usize, h_b: usize },
    #[error("ssim window must be odd and positive, got {window}")]
    BadWindow { window: usize },
    #[error("ssim window {window} exceeds image {width}x{height}")]
    WindowTooLarge { window: usize, width: usize, height: usize },
    #[error("disparity map has nonpositive mean; cannot normalize")]
    DegenerateDisparity,
    #[error("scale must be positive and finite, got {s}")]
    BadScale { s: f64 },
    #[error("{set} point {index} at ({x}, {y}) is outside the image")]
    PointOutOfBounds { set: &'static str, index: usize, x: f64, y: f64 },
    #[error("{set} point {index}: disparity {value} at its pixel is not positive")]
    NonPositiveDisparity { set: &'static str, index: usize, value: f64 },
    #[error("{set} point {index}: depth {z} must be positive and finite")]
    BadPointDepth { set: &'static str, index: usize, z: f64 },
    #[error("loss part {part} is NaN; refusing to combine")]
    PoisonedLoss { part: &'static str },
    #[error("crop fraction {crop_frac} must lie in [0, 0.5)")]
    BadCropFraction { crop_frac: f64 },
    #[error("crop fraction {crop_frac} leaves no pixels on {width}x{height}")]
    CropTooLarge { crop_frac: f64, width: usize, height: usize },
    #[error("loss weights must be nonnegative and finite")]
    BadWeights,
}

fn check_shape<T: Copy, U: Copy>(
    a: &crate::raster::Raster<T>,
    b: &crate::raster::Raster<U>,
) -> Result<(), LossError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(LossError::ShapeMismatch {
            w_a: a.width(),
            h_a: a.height(),
            w_b: b.width(),
            h_b: b.height(),
        });
    }
    Ok(())
}

/// Weights of the combined fitting loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub smooth: f64,
    pub sparse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, ssim: 1.0, smooth: 0.01, sparse: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = [self.l1, self.ssim, self.smooth, self.sparse]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite());
        if ok { Ok(()) } else { Err(LossError::BadWeights) }
    }
}

/// Sparse depth observations: [pixel x, pixel y, depth z] triplets, the
/// on-disk points file format. Pixels may be fractional; lookups round to
/// the nearest pixel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparsePointSet(pub Vec<[f64; 3]>);

impl SparsePointSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Nearest-pixel coordinates with bounds and depth checks.
    fn resolve(
        &self,
        set: &'static str,
        width: usize,
        height: usize,
    ) -> Result<Vec<(usize, usize, f64)>, LossError> {
        self.0
            .iter()
            .enumerate()
            .map(|(index, &[x, y, z])| {
                if !(z > 0.0 && z.is_finite()) {
                    return Err(LossError::BadPointDepth { set, index, z });
                }
                let px = x.round();
                let py = y.round();
                let in_bounds = px >= 0.0 && py >= 0.0 && (px as usize) < width && (py as usize) < height;
                if !(px.is_finite() && py.is_finite() && in_bounds) {
                    return Err(LossError::PointOutOfBounds { set, index, x, y });
                }
                Ok((px as usize, py as usize, z))
            })
            .collect()
    }
}

/// Mean absolute difference over all 3HW entries, with its gradient with
/// respect to `pred`.
pub fn l1_loss(pred: &ColorMap, gt: &ColorMap) -> Result<(f64, ColorMap), LossError> {
    check_shape(pred, gt)?;
    let n = (3 * pred.width() * pred.height()) as f64;
    let mut total = 0.0;
    let mut grad = ColorMap::black(pred.width(), pred.height());
    for (x, y) in pred.coords() {
        let p = pred.at(x, y);
        let t = gt.at(x, y);
        let mut g = [0.0; 3];
        for ch in 0..3 {
            let d = p[ch] - t[ch];
            total += d.abs();
            g[ch] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
        grad.set(x, y, g);
    }
    Ok((total / n, grad))
}

/// Uniform k×k mean over fully-contained windows; output is (W−k+1)×(H−k+1)
/// indexed by window corner.
fn box_mean_valid(src: &ScalarMap, k: usize) -> ScalarMap {
    let (w, h) = (src.width(), src.height());
    let inv = 1.0 / (k * k) as f64;
    let mut out = ScalarMap::zeros(w - k + 1, h - k + 1);
    for (wx, wy) in out.coords() {
        let mut acc = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                acc += src.at(wx + dx, wy + dy);
            }
        }
        out.set(wx, wy, acc * inv);
    }
    out
}

/// Transpose of [`box_mean_valid`] without the 1/k² factor: adds each
/// window's value onto the k×k pixels it covers.
fn box_scatter(windows: &ScalarMap, k: usize, width: usize, height: usize) -> ScalarMap {
    debug_assert_eq!(windows.width(), width - k + 1);
    debug_assert_eq!(windows.height(), height - k + 1);
    let mut out = ScalarMap::zeros(width, height);
    for (wx, wy) in windows.coords() {
        let v = windows.at(wx, wy);
        for dy in 0..k {
            for dx in 0..k {
                *out.get_mut(wx + dx, wy + dy) += v;
            }
        }
    }
    out
}

fn channel(img: &ColorMap, ch: usize) -> ScalarMap {
    img.map(|px| px[ch])
}

struct SsimChannel {
    s: ScalarMap,
    m1x: ScalarMap,
    m1y: ScalarMap,
    sxy: ScalarMap,
    var_x: ScalarMap,
    var_y: ScalarMap,
}

/// Per-window SSIM for one channel, with the moments kept for backprop.
/// Biased (divide-by-k²) second moments.
fn ssim_channel(x: &ScalarMap, y: &ScalarMap, k: usize) -> SsimChannel {
    let m1x = box_mean_valid(x, k);
    let m1y = box_mean_valid(y, k);
    let m2x = box_mean_valid(&x.map(|v| v * v), k);
    let m2y = box_mean_valid(&y.map(|v| v * v), k);
    let mut xy = x.clone();
    for (px, py) in xy.coords() {
        *xy.get_mut(px, py) *= y.at(px, py);
    }
    let mxy = box_mean_valid(&xy, k);

    let mut s = ScalarMap::zeros(m1x.width(), m1x.height());
    let mut sxy = s.clone();
    let mut var_x = s.clone();
    let mut var_y = s.clone();
    for (wx, wy) in s.coords() {
        let (ux, uy) = (m1x.at(wx, wy), m1y.at(wx, wy));
        let vx = m2x.at(wx, wy) - ux * ux;
        let vy = m2y.at(wx, wy) - uy * uy;
        let cov = mxy.at(wx, wy) - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        s.set(wx, wy, (a1 * a2) / (b1 * b2));
        sxy.set(wx, wy, cov);
        var_x.set(wx, wy, vx);
        var_y.set(wx, wy, vy);
    }
    SsimChannel { s, m1x, m1y, sxy, var_x, var_y }
}

#[derive(Clone, Debug)]
pub struct SsimOutput {
    /// Channel-averaged SSIM per valid window, indexed by window corner.
    pub map: ScalarMap,
    pub mean: f64,
}

pub fn ssim(pred: &ColorMap, gt: &ColorMap) -> Result<SsimOutput, LossError> {
    ssim_with_window(pred, gt, DEFAULT_SSIM_WINDOW)
}

pub fn ssim_with_window(
    pred: &ColorMap,
    gt: &ColorMap,
    window: usize,
) -> Result<SsimOutput, LossError> {
    check_shape(pred, gt)?;
    check_window(window, pred.width(), pred.height())?;
    let mut map = ScalarMap::zeros(pred.width() - window + 1, pred.height() - window + 1);
    for ch in 0..3 {
        let part = ssim_channel(&channel(pred, ch), &channel(gt, ch), window);
        for (wx, wy) in map.coords() {
            *map.get_mut(wx, wy) += part.s.at(wx, wy) / 3.0;
        }
    }
    let mean = map.data().iter().sum::<f64>() / map.data().len() as f64;
    Ok(SsimOutput { map, mean })
}

fn check_window(window: usize, width: usize, height: usize) -> Result<(), LossError> {
    if window == 0 || window % 2 == 0 {
        return Err(LossError::BadWindow { window });
    }
    if window > width || window > height {
        return Err(LossError::WindowTooLarge { window, width, height });
    }
    Ok(())
}

/// 1 − mean SSIM, with the gradient with respect to `pred`.
pub fn ssim_loss(pred: &ColorMap, gt: &ColorMap) -> Result<(f64, ColorMap), LossError> {
    ssim_loss_with_window(pred, gt, DEFAULT_SSIM_WINDOW)
}

pub fn ssim_loss_with_window(
    pred: &ColorMap,
    gt: &ColorMap,
    window: usize,
) -> Result<(f64, ColorMap), LossError> {
    check_shape(pred, gt)?;
    check_window(window, pred.width(), pred.height())?;
    let k = window;
    let (w, h) = (pred.width(), pred.height());
    let n_windows = (w - k + 1) * (h - k + 1);
    // d(loss)/dS per window and channel; loss = 1 − mean over 3·n S values.
    let dl_ds = -1.0 / (3 * n_windows) as f64;

    let mut mean_s = 0.0;
    let mut grad = ColorMap::black(w, h);
    for ch in 0..3 {
        let x = channel(pred, ch);
        let y = channel(gt, ch);
        let part = ssim_channel(&x, &y, k);
        // Partials of the per-window loss with respect to the three
        // pred-side moments: mean, raw second moment, cross moment.
        let mut p_m1 = ScalarMap::zeros(part.s.width(), part.s.height());
        let mut p_m2 = p_m1.clone();
        let mut p_mxy = p_m1.clone();
        for (wx, wy) in part.s.coords() {
            let s = part.s.at(wx, wy);
            mean_s += s;
            let (ux, uy) = (part.m1x.at(wx, wy), part.m1y.at(wx, wy));
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * part.sxy.at(wx, wy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = part.var_x.at(wx, wy) + part.var_y.at(wx, wy) + SSIM_C2;
            // dS/d(moment); the m1x partial gathers the A1, A2 (through
            // covariance), B1, and B2 (through variance) dependencies.
            let ds_m2 = -s / b2;
            let ds_mxy = 2.0 * a1 / (b1 * b2);
            let ds_m1 = 2.0 * uy * (a2 - a1) / (b1 * b2) - 2.0 * ux * s / b1
                + 2.0 * ux * s / b2;
            p_m1.set(wx, wy, dl_ds * ds_m1);
            p_m2.set(wx, wy, dl_ds * ds_m2);
            p_mxy.set(wx, wy, dl_ds * ds_mxy);
        }
        // Chain through the box means: each moment spreads 1/k² per pixel.
        let back_m1 = box_scatter(&p_m1, k, w, h);
        let back_m2 = box_scatter(&p_m2, k, w, h);
        let back_mxy = box_scatter(&p_mxy, k, w, h);
        let inv_kk = 1.0 / (k * k) as f64;
        for (px, py) in grad.coords() {
            grad.get_mut(px, py)[ch] = inv_kk
                * (back_m1.at(px, py)
                    + 2.0 * x.at(px, py) * back_m2.at(px, py)
                    + y.at(px, py) * back_mxy.at(px, py));
        }
    }
    let loss = 1.0 - mean_s / (3 * n_windows) as f64;
    Ok((loss, grad))
}

/// Edge-aware disparity smoothness: mean over valid forward-difference
/// terms of |∂D̂*| · e^(−channel-mean |∂I|), where D̂* is the disparity map
/// divided by its mean over all pixels. A term is valid when both of its
/// endpoint disparities are positive. Returns the gradient with respect to
/// the raw disparity map, including the mean-normalization coupling.
pub fn smoothness_loss(
    disparity: &ScalarMap,
    image: &ColorMap,
) -> Result<(f64, ScalarMap), LossError> {
    check_shape(disparity, image)?;
    let (w, h) = (disparity.width(), disparity.height());
    let mean = disparity.data().iter().sum::<f64>() / (w * h) as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(LossError::DegenerateDisparity);
    }

    let edge_weight = |a: [f64; 3], b: [f64; 3]| {
        let mag = (0..3).map(|ch| (b[ch] - a[ch]).abs()).sum::<f64>() / 3.0;
        (-mag).exp()
    };

    let mut total = 0.0;
    let mut terms = 0usize;
    // Σ over terms of w_t · sign_t scattered to the two endpoints.
    let mut scatter = ScalarMap::zeros(w, h);
    let mut visit = |xa: usize, ya: usize, xb: usize, yb: usize| {
        let da = disparity.at(xa, ya);
        let db = disparity.at(xb, yb);
        if !(da > 0.0 && db > 0.0) {
            return;
        }
        let weight = edge_weight(image.at(xa, ya), image.at(xb, yb));
        let diff = db / mean - da / mean;
        total += diff.abs() * weight;
        terms += 1;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *scatter.get_mut(xb, yb) += weight * sign;
        *scatter.get_mut(xa, ya) -= weight * sign;
    };
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                visit(x, y, x + 1, y);
            }
            if y + 1 < h {
                visit(x, y, x, y + 1);
            }
        }
    }

    if terms == 0 {
        return Ok((0.0, ScalarMap::zeros(w, h)));
    }
    let loss = total / terms as f64;
    // L = (1/n) Σ |D_b − D_a|·w / m with m the all-pixel mean, so each
    // pixel also feels −L/(m·HW) through m; Σ grad·D telescopes to 0.
    let mean_coupling = -loss / (mean * (w * h) as f64);
    let mut grad = ScalarMap::zeros(w, h);
    for (x, y) in grad.coords() {
        grad.set(x, y, scatter.at(x, y) / (terms as f64 * mean) + mean_coupling);
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct SparseLoss {
    pub value: f64,
    pub grad_src: ScalarMap,
    pub grad_tgt: ScalarMap,
    /// Set when the corresponding point set was empty; that half
    /// contributed 0.
    pub src_empty: bool,
    pub tgt_empty: bool,
}

/// Squared log-disparity residuals against sparse depth points,
/// r = ln(D̂/s) − ln(1/z), averaged per set and combined half/half.
pub fn sparse_disparity_loss(
    disp_src: &ScalarMap,
    disp_tgt: &ScalarMap,
    pts_src: &SparsePointSet,
    pts_tgt: &SparsePointSet,
    s: f64,
) -> Result<SparseLoss, LossError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(LossError::BadScale { s });
    }
    let half = |disp: &ScalarMap,
                pts: &SparsePointSet,
                set: &'static str|
     -> Result<(f64, ScalarMap, bool), LossError> {
        let mut grad = ScalarMap::zeros(disp.width(), disp.height());
        if pts.is_empty() {
            return Ok((0.0, grad, true));
        }
        let resolved = pts.resolve(set, disp.width(), disp.height())?;
        let n = resolved.len() as f64;
        let mut acc = 0.0;
        for (index, (px, py, z)) in resolved.into_iter().enumerate() {
            let d = disp.at(px, py);
            if !(d > 0.0) {
                return Err(LossError::NonPositiveDisparity { set, index, value: d });
            }
            let r = (d / s).ln() + z.ln();
            acc += r * r;
            // Half weight folded in: d(0.5·mean r²)/dD = r/(n·D).
            *grad.get_mut(px, py) += r / (n * d);
        }
        Ok((acc / n, grad, false))
    };
    let (v_src, grad_src, src_empty) = half(disp_src, pts_src, "source")?;
    let (v_tgt, grad_tgt, tgt_empty) = half(disp_tgt, pts_tgt, "target")?;
    Ok(SparseLoss {
        value: 0.5 * v_src + 0.5 * v_tgt,
        grad_src,
        grad_tgt,
        src_empty,
        tgt_empty,
    })
}

/// Scalar values of the four loss parts, pre-weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub ssim: f64,
    pub smooth: f64,
    pub sparse: f64,
}

/// Weighted sum of the parts. Gradients combine with the same weights;
/// callers scale and add the per-part gradients themselves.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64, LossError> {
    weights.validate()?;
    for (value, part) in [
        (parts.l1, "l1"),
        (parts.ssim, "ssim"),
        (parts.smooth, "smooth"),
        (parts.sparse, "sparse"),
    ] {
        if value.is_nan() {
            return Err(LossError::PoisonedLoss { part });
        }
    }
    Ok(weights.l1 * parts.l1
        + weights.ssim * parts.ssim
        + weights.smooth * parts.smooth
        + weights.sparse * parts.sparse)
}

/// Peak signal-to-noise ratio in dB over a centrally cropped region,
/// capped at [`PSNR_CAP_DB`]. `crop_frac` is removed from each side.
pub fn psnr(pred: &ColorMap, gt: &ColorMap, crop_frac: f64) -> Result<f64, LossError> {
    check_shape(pred, gt)?;
    if !(0.0..0.5).contains(&crop_frac) {
        return Err(LossError::BadCropFraction { crop_frac });
    }
    let (w, h) = (pred.width(), pred.height());
    let cx = (crop_frac * w as f64).round() as usize;
    let cy = (crop_frac * h as f64).round() as usize;
    if 2 * cx >= w || 2 * cy >= h {
        return Err(LossError::CropTooLarge { crop_frac, width: w, height: h });
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in cy..h - cy {
        for x in cx..w - cx {
            for ch in 0..3 {
                let d = pred.at(x, y)[ch] - gt.at(x, y)[ch];
                acc += d * d;
                n += 1;
            }
        }
    }
    let mse = acc / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Forward-pass counts for rendering one scene under different
/// architectures, used for cost comparisons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardPassModel {
    /// One encoder pass plus one decoder pass per plane; view count free.
    PlaneStack { n_planes: u64 },
    /// One encoder pass, then a query per sampled point per target pixel.
    PointQuerySingleView { n_targets: u64, n_points: u64, height: u64, width: u64 },
    /// One encoder pass per source view, then per-point queries.
    PointQueryMultiView { n_views: u64, n_targets: u64, n_points: u64, height: u64, width: u64 },
}

pub fn count_forward_passes(model: &ForwardPassModel) -> u64 {
    match *model {
        ForwardPassModel::PlaneStack { n_planes } => 1 + n_planes,
        ForwardPassModel::PointQuerySingleView { n_targets, n_points, height, width } => {
            1 + n_targets * n_points * height * width
        }
        ForwardPassModel::PointQueryMultiView { n_views, n_targets, n_points, height, width } => {
            n_views + n_targets * n_points * height * width
        }
    }
}
