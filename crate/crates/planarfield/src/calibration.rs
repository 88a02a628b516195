//! Metric scale recovery. Rendered depth is only defined up to a global
//! scale, so sparse depth points pin it down: the estimate is the
//! geometric mean of rendered-over-true depth ratios at the point pixels.
//! The estimate is treated as a detached constant by the optimizer; no
//! gradient flows through it.

use thiserror::Error;

use nalgebra::Vector3;

use crate::losses::SparsePointSet;
use crate::raster::ScalarMap;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("cannot estimate scale from an empty point set")]
    EmptyPointSet,
    #[error("all {skipped} points had nonpositive rendered depth")]
    AllPointsSkipped { skipped: usize },
    #[error("point {index} at ({x}, {y}) is outside the depth map")]
    PointOutOfBounds { index: usize, x: f64, y: f64 },
    #[error("point {index}: depth {z} must be positive and finite")]
    BadPointDepth { index: usize, z: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleEstimate {
    pub scale: f64,
    pub used: usize,
    /// Points whose rendered depth was not positive, excluded from the
    /// mean.
    pub skipped: usize,
}

/// Geometric mean of rendered/true depth ratios at the point pixels,
/// s = exp(mean(ln Ẑ − ln z)). Fractional pixels round to nearest.
pub fn estimate_scale(
    depth: &ScalarMap,
    pts: &SparsePointSet,
) -> Result<ScaleEstimate, CalibrationError> {
    if pts.is_empty() {
        return Err(CalibrationError::EmptyPointSet);
    }
    let mut log_sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (index, &[x, y, z]) in pts.0.iter().enumerate() {
        if !(z > 0.0 && z.is_finite()) {
            return Err(CalibrationError::BadPointDepth { index, z });
        }
        let px = x.round();
        let py = y.round();
        let in_bounds = px >= 0.0
            && py >= 0.0
            && (px as usize) < depth.width()
            && (py as usize) < depth.height();
        if !(px.is_finite() && py.is_finite() && in_bounds) {
            return Err(CalibrationError::PointOutOfBounds { index, x, y });
        }
        let rendered = depth.at(px as usize, py as usize);
        if rendered > 0.0 {
            log_sum += rendered.ln() - z.ln();
            used += 1;
        } else {
            skipped += 1;
        }
    }
    if used == 0 {
        return Err(CalibrationError::AllPointsSkipped { skipped });
    }
    Ok(ScaleEstimate { scale: (log_sum / used as f64).exp(), used, skipped })
}

/// Applies an estimated scale to a camera translation. Passing 1.0 leaves
/// the pose untouched (fixed-scale mode).
pub fn calibrate_translation(t: &Vector3<f64>, scale: f64) -> Vector3<f64> {
    t * scale
}
