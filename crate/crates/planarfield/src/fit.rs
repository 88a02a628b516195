//! Gradient-descent fitting of a frustum grid against a multi-view
//! dataset. Each step draws a fresh disparity set, renders one target
//! view, evaluates the weighted loss, and applies a bias-corrected
//! moment update to the grid pre-activations.
//!
//! View 0 of the dataset is the source view: the grid lives in its
//! frustum and all other views are rendered through poses relative to it.

use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{self, CalibrationError};
use crate::dataset::Dataset;
use crate::field::{
    DEFAULT_SIGMA0, FieldError, FrustumGrid, InitMode, init_grid, save_grid,
};
use crate::geometry::{
    DepthRange, GeometryError, bin_edge_disparities, sample_disparities_between,
};
use crate::losses::{
    LossError, LossParts, LossWeights, l1_loss, psnr, smoothness_loss, sparse_disparity_loss,
    ssim, ssim_loss, total_loss,
};
use crate::raster::{ColorMap, ScalarMap};
use crate::renderer::{
    CompositeTrace, PadMode, RenderError, backward, render_depth_normalized, render_novel,
};

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
/// Raw depths at or below this read as invalid (zero) disparity.
pub const DISPARITY_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fit config: {reason}")]
    BadConfig { reason: &'static str },
    #[error("holdout view {holdout} out of range for {views} views")]
    HoldoutOutOfRange { holdout: usize, views: usize },
    #[error("no views left to train on after holdout/source exclusion")]
    EmptyTrainingPool,
    #[error("grid {grid_w}x{grid_h} must match camera {cam_w}x{cam_h}")]
    GridCameraMismatch { grid_w: usize, grid_h: usize, cam_w: usize, cam_h: usize },
    #[error("adam: params {params}, grads {grads}, moments {moments} must share length")]
    AdamShapeMismatch { params: usize, grads: usize, moments: usize },
    #[error("loss diverged (NaN) at iteration {iteration}; last good checkpoint kept")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// s ≡ 1; dataset translations are trusted as-is.
    Fixed,
    /// Re-estimate from the source depth render every step.
    EstimatedPerStep,
    /// Train with s = 1, estimate once from the converged grid.
    EstimatedOnce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One uniform draw per disparity bin, fresh each step.
    Stratified,
    /// Fixed planes at the bin edges (MPI placement).
    BinEdges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Planes rendered per step (N).
    pub planes_per_step: usize,
    /// Grid slice count (D).
    pub grid_slices: usize,
    pub height: usize,
    pub width: usize,
    pub range: DepthRange,
    pub weights: LossWeights,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub scale_mode: ScaleMode,
    pub sampling_mode: SamplingMode,
    pub pad: PadMode,
    /// Keep the source view in the target pool (probability 1/num_views).
    pub include_source: bool,
    /// View excluded from training, evaluated on the report schedule.
    pub holdout_view: Option<usize>,
    pub eval_stride: usize,
    pub eval_crop_frac: f64,
    /// Density pre-activation at initialization; rgb pre-activations start
    /// at 0 (mid-gray).
    pub sigma0: f64,
    /// Zero out wall-clock in reports so output bytes are reproducible.
    pub deterministic: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            planes_per_step: 8,
            grid_slices: 16,
            height: 64,
            width: 64,
            range: DepthRange { z_near: 1.0, z_far: 16.0 },
            weights: LossWeights::default(),
            iterations: 2000,
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            scale_mode: ScaleMode::Fixed,
            sampling_mode: SamplingMode::Stratified,
            pad: PadMode::Edge,
            include_source: true,
            holdout_view: None,
            eval_stride: 100,
            eval_crop_frac: 0.05,
            sigma0: DEFAULT_SIGMA0,
            deterministic: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |reason| Err(FitError::BadConfig { reason });
        if self.planes_per_step == 0 {
            return bad("planes_per_step must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.eval_stride == 0 {
            return bad("eval_stride must be at least 1");
        }
        if !(0.0..0.5).contains(&self.eval_crop_frac) {
            return bad("eval_crop_frac must lie in [0, 0.5)");
        }
        if !(self.sigma0 > 0.0) {
            return bad("sigma0 must be positive");
        }
        self.range.validate().map_err(FitError::Geometry)?;
        self.weights.validate().map_err(FitError::Loss)?;
        Ok(())
    }
}

/// First/second moment state for [`adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&FitConfig> for AdamHyper {
    fn from(c: &FitConfig) -> Self {
        AdamHyper {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// One bias-corrected moment update, in place. All arithmetic in f64;
/// parameters round to f32 at the end. Deterministic in its inputs.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), FitError> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len()
    {
        return Err(FitError::AdamShapeMismatch {
            params: params.len(),
            grads: grads.len(),
            moments: state.m.len(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let c2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let step = hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        params[i] = (params[i] as f64 - step) as f32;
    }
    Ok(())
}

/// Loss breakdown for one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    pub iteration: usize,
    pub target_view: usize,
    pub l1: f64,
    pub ssim: f64,
    pub smooth: f64,
    pub sparse: f64,
    pub total: f64,
    pub scale: f64,
}

/// One evaluation-stride record of the report stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FitRecord {
    pub iteration: usize,
    pub l1: f64,
    pub ssim: f64,
    pub smooth: f64,
    pub sparse: f64,
    pub total: f64,
    pub scale: f64,
    pub holdout_psnr: Option<f64>,
    pub holdout_ssim: Option<f64>,
    pub holdout_depth_rms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub seed: u64,
    pub iterations: usize,
    pub scale: f64,
    pub holdout_psnr: Option<f64>,
    pub holdout_ssim: Option<f64>,
    pub holdout_depth_rms: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub step_losses: Vec<StepLoss>,
    pub records: Vec<FitRecord>,
    pub summary: FitSummary,
}

/// Checkpoint sidecar: the grid file plus the exact configuration and the
/// iteration it was written at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: FitConfig,
    pub iteration: usize,
}

/// Inverse of the raw expected depth where it is meaningful, else 0.
pub fn depth_to_disparity(depth: &ScalarMap) -> ScalarMap {
    depth.map(|z| if z > DISPARITY_EPS { 1.0 / z } else { 0.0 })
}

fn write_checkpoint(
    dir: &Path,
    grid: &FrustumGrid,
    config: &FitConfig,
    iteration: usize,
) -> Result<(), FitError> {
    std::fs::create_dir_all(dir)?;
    save_grid(grid, &dir.join("checkpoint.minegrid"))?;
    let meta = CheckpointMeta { config: config.clone(), iteration };
    let mut bytes = serde_json::to_vec_pretty(&meta)?;
    bytes.push(b'\n');
    std::fs::write(dir.join("checkpoint.json"), bytes)?;
    Ok(())
}

fn write_report(dir: &Path, report: &FitReport) -> Result<(), FitError> {
    let mut out = Vec::new();
    for record in &report.records {
        out.extend_from_slice(serde_json::to_string(record)?.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(serde_json::to_string(&report.summary)?.as_bytes());
    out.push(b'\n');
    std::fs::write(dir.join("report.jsonl"), out)?;
    Ok(())
}

struct HoldoutEval {
    psnr: f64,
    ssim: f64,
    depth_rms: f64,
}

fn eval_holdout(
    grid: &FrustumGrid,
    dataset: &Dataset,
    holdout: usize,
    scale: f64,
    config: &FitConfig,
) -> Result<HoldoutEval, FitError> {
    let ds = bin_edge_disparities(config.grid_slices, &config.range)?;
    let view = &dataset.views[holdout];
    let pose = view.pose.relative_to(&dataset.views[0].pose)?;
    let pose = pose.with_translation(pose.translation() * scale);
    let (out, trace) = render_novel(grid, &dataset.camera, &pose, &ds, config.pad)?;
    let p = psnr(&out.rgb, &view.rgb, config.eval_crop_frac)?;
    let s = ssim(&out.rgb, &view.rgb)?.mean;

    // Depth error in dataset units over pixels the oracle actually hit.
    let zn = render_depth_normalized(&trace, &ds);
    let mut acc = 0.0;
    let mut n = 0usize;
    for (x, y) in zn.coords() {
        let gt = view.depth.at(x, y);
        if gt > 0.0 {
            let d = zn.at(x, y) / scale - gt;
            acc += d * d;
            n += 1;
        }
    }
    let depth_rms = if n == 0 { 0.0 } else { (acc / n as f64).sqrt() };
    Ok(HoldoutEval { psnr: p, ssim: s, depth_rms })
}

/// Rendered source depth → scale estimate against the source point set.
fn estimate_from_source(
    grid: &FrustumGrid,
    dataset: &Dataset,
    config: &FitConfig,
) -> Result<f64, FitError> {
    let ds = bin_edge_disparities(config.grid_slices, &config.range)?;
    let (out, _) =
        render_novel(grid, &dataset.camera, &crate::geometry::Pose::identity(), &ds, config.pad)?;
    let est = calibration::estimate_scale(&out.depth, &dataset.views[0].points)?;
    Ok(est.scale)
}

/// Runs the optimization. When `out_dir` is given, writes
/// `checkpoint.minegrid`, `checkpoint.json`, and `report.jsonl` there; a
/// NaN loss aborts after writing the last good state.
pub fn fit(
    config: &FitConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(FrustumGrid, FitReport), FitError> {
    config.validate()?;
    let cam = &dataset.camera;
    if config.width != cam.width || config.height != cam.height {
        return Err(FitError::GridCameraMismatch {
            grid_w: config.width,
            grid_h: config.height,
            cam_w: cam.width,
            cam_h: cam.height,
        });
    }
    if let Some(hv) = config.holdout_view {
        if hv >= dataset.num_views() {
            return Err(FitError::HoldoutOutOfRange { holdout: hv, views: dataset.num_views() });
        }
    }
    let pool: Vec<usize> = (0..dataset.num_views())
        .filter(|&k| Some(k) != config.holdout_view)
        .filter(|&k| config.include_source || k != 0)
        .collect();
    if pool.is_empty() {
        return Err(FitError::EmptyTrainingPool);
    }
    let needs_points = config.scale_mode != ScaleMode::Fixed || config.weights.sparse > 0.0;
    if needs_points && dataset.views[0].points.is_empty() {
        return Err(FitError::Calibration(CalibrationError::EmptyPointSet));
    }

    // Relative poses from the source frustum to every view.
    let rel_poses: Vec<_> = dataset
        .views
        .iter()
        .map(|v| v.pose.relative_to(&dataset.views[0].pose))
        .collect::<Result<_, _>>()?;

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grid = init_grid(
        config.grid_slices,
        config.width,
        config.height,
        &config.range,
        InitMode::Constant,
        config.sigma0,
    )?;
    let mut adam = AdamState::new(grid.params().len());
    let hyper = AdamHyper::from(config);
    let mut scale = 1.0f64;

    let mut step_losses = Vec::with_capacity(config.iterations);
    let mut records = Vec::new();
    let use_sparse = config.weights.sparse > 0.0;

    // Stratified draws cover the slice span exactly: queries never
    // extrapolate past the far slice (bin-edge placement leaves the far
    // end of the configured range below the last slice).
    let (slice_d_far, slice_d_near) = grid.disparity_span();

    let mut abort: Option<usize> = None;
    for it in 0..config.iterations {
        let ds = match config.sampling_mode {
            SamplingMode::Stratified => sample_disparities_between(
                config.planes_per_step,
                slice_d_near,
                slice_d_far,
                &mut rng,
            )?,
            SamplingMode::BinEdges => {
                bin_edge_disparities(config.planes_per_step, &config.range)?
            }
        };
        let ti = pool[rng.random_range(0..pool.len())];
        let view = &dataset.views[ti];

        // The source render carries the current depth estimate for scale
        // and the source half of the sparse term.
        let mut source_pass: Option<(ScalarMap, CompositeTrace)> = None;
        if config.scale_mode == ScaleMode::EstimatedPerStep || use_sparse {
            let (out_s, trace_s) = render_novel(
                &grid,
                cam,
                &crate::geometry::Pose::identity(),
                &ds,
                config.pad,
            )?;
            if config.scale_mode == ScaleMode::EstimatedPerStep {
                match calibration::estimate_scale(&out_s.depth, &dataset.views[0].points) {
                    Ok(est) => scale = est.scale,
                    // A fully transparent render has no usable depth yet;
                    // keep the previous estimate.
                    Err(CalibrationError::AllPointsSkipped { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            source_pass = Some((out_s.depth, trace_s));
        }

        let rel = &rel_poses[ti];
        let pose = rel.with_translation(rel.translation() * scale);
        let (out_t, trace_t) = render_novel(&grid, cam, &pose, &ds, config.pad)?;

        let (l1_v, l1_g) = l1_loss(&out_t.rgb, &view.rgb)?;
        let (ssim_v, ssim_g) = if config.weights.ssim > 0.0 {
            ssim_loss(&out_t.rgb, &view.rgb)?
        } else {
            (0.0, ColorMap::black(cam.width, cam.height))
        };
        let disp_t = depth_to_disparity(&out_t.depth);
        let (smooth_v, smooth_g) = if config.weights.smooth > 0.0 {
            smoothness_loss(&disp_t, &view.rgb)?
        } else {
            (0.0, ScalarMap::zeros(cam.width, cam.height))
        };
        let sparse_out = if use_sparse {
            let (src_depth, _) = source_pass.as_ref().expect("source render present");
            let disp_s = depth_to_disparity(src_depth);
            // The translation scale s is rendered-over-true depth; the
            // disparity residual wants its reciprocal.
            Some(sparse_disparity_loss(
                &disp_s,
                &disp_t,
                &dataset.views[0].points,
                &view.points,
                1.0 / scale,
            )?)
        } else {
            None
        };
        let sparse_v = sparse_out.as_ref().map_or(0.0, |s| s.value);

        let parts = LossParts { l1: l1_v, ssim: ssim_v, smooth: smooth_v, sparse: sparse_v };
        let total = match total_loss(&parts, &config.weights) {
            Ok(v) => v,
            Err(LossError::PoisonedLoss { .. }) => {
                abort = Some(it);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        step_losses.push(StepLoss {
            iteration: it,
            target_view: ti,
            l1: l1_v,
            ssim: ssim_v,
            smooth: smooth_v,
            sparse: sparse_v,
            total,
            scale,
        });

        // Pull every term back to the grid through the target trace, and
        // through the source trace when the sparse term used it.
        let w = &config.weights;
        let mut grad_rgb = ColorMap::black(cam.width, cam.height);
        for (x, y) in grad_rgb.coords() {
            let a = l1_g.at(x, y);
            let b = ssim_g.at(x, y);
            grad_rgb.set(x, y, [
                w.l1 * a[0] + w.ssim * b[0],
                w.l1 * a[1] + w.ssim * b[1],
                w.l1 * a[2] + w.ssim * b[2],
            ]);
        }
        let mut grad_depth_t = ScalarMap::zeros(cam.width, cam.height);
        for (x, y) in grad_depth_t.coords() {
            let mut g_disp = w.smooth * smooth_g.at(x, y);
            if let Some(sp) = &sparse_out {
                g_disp += w.sparse * sp.grad_tgt.at(x, y);
            }
            let z = out_t.depth.at(x, y);
            // dD/dZ = −1/Z² on the valid branch of depth_to_disparity.
            if z > DISPARITY_EPS {
                grad_depth_t.set(x, y, -g_disp / (z * z));
            }
        }
        let back_t = backward(&trace_t, &grad_rgb, Some(&grad_depth_t))?;
        let mut grid_grad = back_t.grid.expect("render_novel traces carry grid linkage");

        if let Some(sp) = &sparse_out {
            let (src_depth, trace_s) = source_pass.as_ref().expect("source render present");
            let mut grad_depth_s = ScalarMap::zeros(cam.width, cam.height);
            for (x, y) in grad_depth_s.coords() {
                let z = src_depth.at(x, y);
                if z > DISPARITY_EPS {
                    grad_depth_s.set(x, y, -w.sparse * sp.grad_src.at(x, y) / (z * z));
                }
            }
            let zero_rgb = ColorMap::black(cam.width, cam.height);
            let back_s = backward(trace_s, &zero_rgb, Some(&grad_depth_s))?;
            let extra = back_s.grid.expect("render_novel traces carry grid linkage");
            for (dst, src) in grid_grad.data_mut().iter_mut().zip(extra.data()) {
                *dst += src;
            }
        }

        if grid_grad.data().iter().any(|g| !g.is_finite()) {
            abort = Some(it);
            break;
        }
        adam_step(grid.params_mut(), grid_grad.data(), &mut adam, &hyper)?;

        let at_stride = it % config.eval_stride == 0 || it + 1 == config.iterations;
        if at_stride {
            let eval = match config.holdout_view {
                Some(hv) => Some(eval_holdout(&grid, dataset, hv, scale, config)?),
                None => None,
            };
            records.push(FitRecord {
                iteration: it,
                l1: l1_v,
                ssim: ssim_v,
                smooth: smooth_v,
                sparse: sparse_v,
                total,
                scale,
                holdout_psnr: eval.as_ref().map(|e| e.psnr),
                holdout_ssim: eval.as_ref().map(|e| e.ssim),
                holdout_depth_rms: eval.as_ref().map(|e| e.depth_rms),
            });
        }
    }

    if config.scale_mode == ScaleMode::EstimatedOnce && abort.is_none() {
        scale = estimate_from_source(&grid, dataset, config)?;
    }

    let final_eval = match (config.holdout_view, abort) {
        (Some(hv), None) => Some(eval_holdout(&grid, dataset, hv, scale, config)?),
        _ => None,
    };
    let wall = if config.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
    let report = FitReport {
        summary: FitSummary {
            seed: config.seed,
            iterations: step_losses.len(),
            scale,
            holdout_psnr: final_eval.as_ref().map(|e| e.psnr),
            holdout_ssim: final_eval.as_ref().map(|e| e.ssim),
            holdout_depth_rms: final_eval.as_ref().map(|e| e.depth_rms),
            wall_clock_seconds: wall,
        },
        step_losses,
        records,
    };

    if let Some(dir) = out_dir {
        let iteration = abort.unwrap_or(config.iterations);
        write_checkpoint(dir, &grid, config, iteration)?;
        write_report(dir, &report)?;
    }
    if let Some(iteration) = abort {
        return Err(FitError::Diverged { iteration });
    }
    Ok((grid, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetView;
    use crate::field::query_plane;
    use crate::geometry::{Camera, Pose};
    use crate::losses::SparsePointSet;
    use crate::oracle::{Opacity, Rectangle, SceneSpec, Texture, TextureAxis, oracle_render};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};

    fn small_camera() -> Camera {
        Camera::new(16.0, 16.0, 7.5, 7.5, 16, 16).unwrap()
    }

    fn small_scene(range: &DepthRange) -> SceneSpec {
        SceneSpec {
            range: range.clone(),
            rects: vec![Rectangle::fronto(
                0.0,
                0.0,
                4.0,
                10.0,
                10.0,
                Texture::Gradient {
                    axis: TextureAxis::U,
                    from: [0.15, 0.3, 0.7],
                    to: [0.85, 0.6, 0.2],
                },
                Opacity::Opaque,
            )],
        }
    }

    /// In-memory dataset: the oracle views plus exact sparse points.
    fn small_dataset(views: &[Pose], points_per_view: usize) -> Dataset {
        let cam = small_camera();
        let range = DepthRange::new(2.0, 8.0).unwrap();
        let scene = small_scene(&range);
        let views = views
            .iter()
            .map(|pose| {
                let out = oracle_render(&scene, &cam, pose, 8).unwrap();
                let mut pts = Vec::new();
                for (x, y) in [(3, 3), (12, 4), (7, 11), (10, 10)] {
                    if pts.len() < points_per_view && out.mask.at(x, y) {
                        pts.push([x as f64, y as f64, out.depth.at(x, y)]);
                    }
                }
                DatasetView {
                    rgb: out.rgb,
                    depth: out.depth,
                    pose: pose.clone(),
                    points: SparsePointSet(pts),
                }
            })
            .collect();
        Dataset { camera: cam, views }
    }

    fn quick_config(iterations: usize) -> FitConfig {
        FitConfig {
            planes_per_step: 4,
            grid_slices: 6,
            height: 16,
            width: 16,
            range: DepthRange::new(2.0, 8.0).unwrap(),
            iterations,
            eval_stride: 50,
            deterministic: true,
            ..FitConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = vec![0.25f32, -1.5, 3.0];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(3);
        let hyper = AdamHyper { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        assert_eq!(params, vec![0.25, -1.5, 3.0]);
        assert_eq!(state.t, 1);
        assert!(state.m.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn adam_constant_gradient_steps_at_learning_rate() {
        // With constant g, bias correction makes m̂ = g and v̂ = g² at every
        // step, so each update is lr·g/(|g| + eps) ≈ lr·sign(g).
        let mut params = vec![0.0f32];
        let mut state = AdamState::new(1);
        let hyper = AdamHyper { learning_rate: 0.05, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut prev = params[0] as f64;
        for _ in 0..10 {
            adam_step(&mut params, &[2.5], &mut state, &hyper).unwrap();
            let delta = prev - params[0] as f64;
            assert_relative_eq!(delta, 0.05, max_relative = 1e-6);
            prev = params[0] as f64;
        }
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let run = || {
            let mut params = vec![0.3f32, -0.7];
            let mut state = AdamState::new(2);
            let hyper =
                AdamHyper { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
            for i in 0..20 {
                let g = [(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()];
                adam_step(&mut params, &g, &mut state, &hyper).unwrap();
            }
            (params[0].to_bits(), params[1].to_bits())
        };
        assert_eq!(run(), run());

        let mut params = vec![0.0f32; 2];
        let mut state = AdamState::new(3);
        let hyper = AdamHyper { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        assert!(matches!(
            adam_step(&mut params, &[0.0; 2], &mut state, &hyper),
            Err(FitError::AdamShapeMismatch { .. })
        ));
    }

    #[test]
    fn config_defaults_fill_missing_json_fields() {
        let cfg: FitConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, FitConfig::default());
        let cfg: FitConfig =
            serde_json::from_str(r#"{"iterations": 5, "scale_mode": "estimated_once"}"#).unwrap();
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.scale_mode, ScaleMode::EstimatedOnce);
        assert_eq!(cfg.learning_rate, DEFAULT_LEARNING_RATE);
        assert!(serde_json::from_str::<FitConfig>(r#"{"unknown_knob": 1}"#).is_err());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        for (mutate, _) in [
            ((|c: &mut FitConfig| c.planes_per_step = 0) as fn(&mut FitConfig), "n"),
            (|c| c.iterations = 0, "it"),
            (|c| c.learning_rate = 0.0, "lr"),
            (|c| c.beta1 = 1.0, "b1"),
            (|c| c.epsilon = 0.0, "eps"),
            (|c| c.eval_stride = 0, "stride"),
            (|c| c.eval_crop_frac = 0.5, "crop"),
        ] {
            let mut c = FitConfig::default();
            mutate(&mut c);
            assert!(matches!(c.validate(), Err(FitError::BadConfig { .. })));
        }
        assert!(FitConfig::default().validate().is_ok());
    }

    #[test]
    fn single_view_l1_fit_is_windowed_monotone() {
        let dataset = small_dataset(&[Pose::identity()], 0);
        let mut config = quick_config(300);
        config.weights = LossWeights { l1: 1.0, ssim: 0.0, smooth: 0.0, sparse: 0.0 };
        // Fixed plane placement and small steps keep this a descent on one
        // deterministic objective; stratified redraws would jitter the
        // loss between windows.
        config.sampling_mode = SamplingMode::BinEdges;
        config.learning_rate = 0.01;
        let (_, report) = fit(&config, &dataset, None).unwrap();
        let window_means: Vec<f64> = report
            .step_losses
            .chunks(50)
            .map(|w| w.iter().map(|s| s.total).sum::<f64>() / w.len() as f64)
            .collect();
        // Slack covers the sign-gradient oscillation floor (observed a few
        // 1e-5 per window once converged), far below any real regression.
        for pair in window_means.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-4,
                "window means must not increase: {window_means:?}"
            );
        }
        // 250 steps cut the initial loss substantially.
        assert!(window_means.last().unwrap() < &(window_means[0] * 0.5));
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let shifted =
            Pose::new(Matrix3::identity(), Vector3::new(0.15, -0.05, 0.0)).unwrap();
        let dataset = small_dataset(&[Pose::identity(), shifted], 4);
        let mut config = quick_config(40);
        config.weights.sparse = 0.0;
        let (grid_a, report_a) = fit(&config, &dataset, None).unwrap();
        let (grid_b, report_b) = fit(&config, &dataset, None).unwrap();
        assert_eq!(
            grid_a.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            grid_b.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
        let bits = |r: &FitReport| {
            r.step_losses.iter().map(|s| s.total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&report_a), bits(&report_b));
    }

    #[test]
    fn gradient_reaches_both_bracketing_slices() {
        let dataset = small_dataset(&[Pose::identity()], 0);
        let mut config = quick_config(1);
        config.weights = LossWeights { l1: 1.0, ssim: 0.0, smooth: 0.0, sparse: 0.0 };
        config.seed = 11;

        let init = init_grid(
            config.grid_slices,
            config.width,
            config.height,
            &config.range,
            InitMode::Constant,
            config.sigma0,
        )
        .unwrap();
        let (fitted, report) = fit(&config, &dataset, None).unwrap();
        assert!(report.step_losses[0].total > 0.0);

        // Replay the step's disparity draw to find the touched slices.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d_far, d_near) = init.disparity_span();
        let ds =
            sample_disparities_between(config.planes_per_step, d_near, d_far, &mut rng)
                .unwrap();
        let (d, h, w) = (config.grid_slices, config.height, config.width);
        let slice_changed: Vec<bool> = (0..d)
            .map(|s| {
                let base = s * h * w * 4;
                (0..h * w * 4).any(|i| fitted.params()[base + i] != init.params()[base + i])
            })
            .collect();
        for i in 0..ds.len() {
            let (_, trace) = query_plane(&init, ds.disparity(i)).unwrap();
            if trace.w_lo > 0.0 {
                assert!(slice_changed[trace.lo], "slice {} untouched", trace.lo);
            }
            if trace.w_hi > 0.0 {
                assert!(slice_changed[trace.hi], "slice {} untouched", trace.hi);
            }
        }
    }

    #[test]
    fn bin_edge_sampling_queries_slices_exactly() {
        let config = quick_config(1);
        let grid = init_grid(
            config.grid_slices,
            config.width,
            config.height,
            &config.range,
            InitMode::Constant,
            config.sigma0,
        )
        .unwrap();
        // N = D bin edges hit each slice with a one-hot weight.
        let ds = bin_edge_disparities(config.grid_slices, &config.range).unwrap();
        for i in 0..ds.len() {
            let (_, trace) = query_plane(&grid, ds.disparity(i)).unwrap();
            assert_eq!(trace.lo, i);
            assert!((trace.w_lo == 1.0 && trace.w_hi == 0.0) || trace.lo == trace.hi);
        }
    }

    #[test]
    fn scale_modes_report_sane_scales() {
        let shifted =
            Pose::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let dataset = small_dataset(&[Pose::identity(), shifted], 4);

        let mut fixed = quick_config(30);
        fixed.weights.sparse = 0.0;
        let (_, report) = fit(&fixed, &dataset, None).unwrap();
        assert_eq!(report.summary.scale, 1.0);

        let mut once = quick_config(30);
        once.weights.sparse = 0.0;
        once.scale_mode = ScaleMode::EstimatedOnce;
        let (_, report) = fit(&once, &dataset, None).unwrap();
        assert!(report.summary.scale.is_finite() && report.summary.scale > 0.0);
        // Training itself ran uncalibrated.
        assert!(report.step_losses.iter().all(|s| s.scale == 1.0));

        let mut per_step = quick_config(30);
        per_step.weights.sparse = 0.1;
        per_step.scale_mode = ScaleMode::EstimatedPerStep;
        let (_, report) = fit(&per_step, &dataset, None).unwrap();
        assert!(report.step_losses.iter().all(|s| s.scale.is_finite() && s.scale > 0.0));
    }

    #[test]
    fn holdout_is_excluded_and_evaluated() {
        let shifted =
            Pose::new(Matrix3::identity(), Vector3::new(0.12, 0.0, 0.0)).unwrap();
        let other =
            Pose::new(Matrix3::identity(), Vector3::new(-0.12, 0.04, 0.0)).unwrap();
        let dataset = small_dataset(&[Pose::identity(), shifted, other], 0);
        let mut config = quick_config(60);
        config.weights = LossWeights { l1: 1.0, ssim: 0.0, smooth: 0.0, sparse: 0.0 };
        config.holdout_view = Some(2);
        config.eval_stride = 20;
        let (_, report) = fit(&config, &dataset, None).unwrap();
        assert!(report.step_losses.iter().all(|s| s.target_view != 2));
        assert!(report.records.iter().all(|r| r.holdout_psnr.is_some()));
        // Fitting the other two views improves the held-out render too.
        let first = report.records.first().unwrap().holdout_psnr.unwrap();
        let last = report.summary.holdout_psnr.unwrap();
        assert!(last > first, "holdout psnr {first} -> {last}");
    }

    #[test]
    fn checkpoint_and_report_files_round_trip() {
        let dataset = small_dataset(&[Pose::identity()], 0);
        let mut config = quick_config(12);
        config.weights = LossWeights { l1: 1.0, ssim: 0.0, smooth: 0.0, sparse: 0.0 };
        config.eval_stride = 5;
        let dir = tempfile::tempdir().unwrap();
        let (grid, report) = fit(&config, &dataset, Some(dir.path())).unwrap();

        let loaded = crate::field::load_grid(&dir.path().join("checkpoint.minegrid")).unwrap();
        assert_eq!(loaded.params(), grid.params());
        let meta: CheckpointMeta = serde_json::from_slice(
            &std::fs::read(dir.path().join("checkpoint.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(meta.config, config);
        assert_eq!(meta.iteration, 12);

        let text = std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
        // Records at iterations 0, 5, 10, 11 plus the summary line.
        assert_eq!(text.lines().count(), report.records.len() + 1);
        assert!(text.lines().last().unwrap().contains("wall_clock_seconds"));
    }

    #[test]
    fn empty_pool_and_bad_holdout_are_rejected() {
        let dataset = small_dataset(&[Pose::identity()], 0);
        let mut config = quick_config(5);
        config.include_source = false;
        assert!(matches!(fit(&config, &dataset, None), Err(FitError::EmptyTrainingPool)));

        let mut config = quick_config(5);
        config.holdout_view = Some(7);
        assert!(matches!(
            fit(&config, &dataset, None),
            Err(FitError::HoldoutOutOfRange { holdout: 7, views: 1 })
        ));

        let mut config = quick_config(5);
        config.scale_mode = ScaleMode::EstimatedOnce;
        // No sparse points in the dataset: scale estimation cannot run.
        assert!(matches!(
            fit(&config, &dataset, None),
            Err(FitError::Calibration(CalibrationError::EmptyPointSet))
        ));
    }
}
