//! Ground-truth renderer: rays cast against textured rectangles in the
//! source frame, with exact plane intersections for opaque surfaces and an
//! event-aligned transmittance march for translucent slabs.
//!
//! Shares no arithmetic with the plane-stack compositor, so agreement
//! between the two is evidence rather than tautology. Also emits complete
//! posed datasets (images, depth maps, poses, sparse depth points) for
//! fitting runs.

use nalgebra::{Matrix3, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::geometry::{Camera, DepthRange, GeometryError, Pose, PoseFile};
use crate::imageio::{self, ImageIoError};
use crate::raster::{ColorMap, Raster, ScalarMap};

/// Per-pixel hit flag; unset pixels saw no primitive at all.
pub type MaskMap = Raster<bool>;

pub const DEFAULT_SAMPLES_PER_RAY: usize = 10_000;
pub const DEFAULT_POINTS_PER_VIEW: usize = 200;

/// Rays start marching this far from the camera center.
const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene has no primitives")]
    EmptyScene,
    #[error("field rects[{index}].center: depth {z} outside range [{z_near}, {z_far}]")]
    DepthOutOfRange { index: usize, z: f64, z_near: f64, z_far: f64 },
    #[error("field rects[{index}].u/v: edge vectors do not span a plane")]
    DegenerateRect { index: usize },
    #[error("field rects[{index}]: non-finite geometry")]
    NonFiniteRect { index: usize },
    #[error(
        "field rects[{index}].opacity: sigma {sigma} and thickness {thickness} must be positive and finite"
    )]
    BadTranslucency { index: usize, sigma: f64, thickness: f64 },
    #[error("field rects[{index}].texture: {reason}")]
    BadTexture { index: usize, reason: String },
    #[error("samples_per_ray must be at least 1")]
    NoSamples,
    #[error("thread count must be at least 1")]
    NoThreads,
    #[error("no views to emit")]
    EmptyViews,
    #[error("view {index} has a different camera than view 0; one shared camera file is written")]
    MixedCameras { index: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Local texture axis over a rectangle: `U` runs along the u edge vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureAxis {
    U,
    V,
}

/// Procedural rectangle textures, parameterized over local coordinates
/// (a, b) ∈ [−1/2, 1/2]² spanning the full extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// `cells` × `cells` alternating blocks of c0 and c1; c0 in the corner
    /// cell at (a, b) = (−1/2, −1/2).
    Checker { cells: u32, c0: [f64; 3], c1: [f64; 3] },
    /// Linear ramp from one edge to the opposite. Linear in world space,
    /// so bilinear resampling reproduces it exactly.
    Gradient { axis: TextureAxis, from: [f64; 3], to: [f64; 3] },
    /// `cells` × `cells` blocks of seeded random colors.
    Noise { cells: u32, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Opacity {
    /// Hard surface: the ray terminates at the rectangle.
    Opaque,
    /// Volumetric slab: the rectangle extruded ±thickness/2 along its unit
    /// normal, uniform density sigma inside. Overlapping slabs add their
    /// densities and mix emission in proportion to them.
    Translucent { sigma: f64, thickness: f64 },
}

/// Textured rectangle in the source frame. Corners are center ± u/2 ± v/2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rectangle {
    pub center: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub texture: Texture,
    pub opacity: Opacity,
}

impl Rectangle {
    /// Fronto-parallel rectangle at depth z: u along +x, v along +y.
    pub fn fronto(
        center_x: f64,
        center_y: f64,
        z: f64,
        width: f64,
        height: f64,
        texture: Texture,
        opacity: Opacity,
    ) -> Self {
        Rectangle {
            center: [center_x, center_y, z],
            u: [width, 0.0, 0.0],
            v: [0.0, height, 0.0],
            texture,
            opacity,
        }
    }
}

/// A full test scene: rectangles whose center depths lie inside `range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub range: DepthRange,
    pub rects: Vec<Rectangle>,
}

fn check_colors(colors: &[[f64; 3]]) -> Result<(), String> {
    for c in colors {
        for v in c {
            if !(*v >= 0.0 && *v <= 1.0) {
                return Err(format!("color channel {v} outside [0, 1]"));
            }
        }
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.range.validate()?;
        if self.rects.is_empty() {
            return Err(SceneError::EmptyScene);
        }
        for (index, rect) in self.rects.iter().enumerate() {
            let finite = rect
                .center
                .iter()
                .chain(&rect.u)
                .chain(&rect.v)
                .all(|v| v.is_finite());
            if !finite {
                return Err(SceneError::NonFiniteRect { index });
            }
            let u = Vector3::from(rect.u);
            let v = Vector3::from(rect.v);
            if u.cross(&v).norm() <= 1e-12 * (1.0 + u.norm() * v.norm()) {
                return Err(SceneError::DegenerateRect { index });
            }
            let z = rect.center[2];
            if !(z >= self.range.z_near && z <= self.range.z_far) {
                return Err(SceneError::DepthOutOfRange {
                    index,
                    z,
                    z_near: self.range.z_near,
                    z_far: self.range.z_far,
                });
            }
            if let Opacity::Translucent { sigma, thickness } = rect.opacity {
                if !(sigma > 0.0 && sigma.is_finite() && thickness > 0.0 && thickness.is_finite())
                {
                    return Err(SceneError::BadTranslucency { index, sigma, thickness });
                }
            }
            let texture_problem = match &rect.texture {
                Texture::Checker { cells, c0, c1 } => {
                    if *cells == 0 {
                        Some("cells must be at least 1".to_string())
                    } else {
                        check_colors(&[*c0, *c1]).err()
                    }
                }
                Texture::Gradient { from, to, .. } => check_colors(&[*from, *to]).err(),
                Texture::Noise { cells, .. } => {
                    (*cells == 0).then(|| "cells must be at least 1".to_string())
                }
            };
            if let Some(reason) = texture_problem {
                return Err(SceneError::BadTexture { index, reason });
            }
        }
        Ok(())
    }
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    ]
}

/// Cell index along one axis for a point at normalized position s ∈ [0, 1].
/// Points nudged just outside by roundoff land in the border cell.
fn cell_of(s: f64, cells: u32) -> i64 {
    ((s * cells as f64).floor() as i64).clamp(0, cells as i64 - 1)
}

/// Colors of a noise texture's cells, row-major over (v-cell, u-cell).
pub fn noise_table(cells: u32, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cells as usize * cells as usize)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect()
}

/// Evaluates a texture at local coordinates (a, b) ∈ [−1/2, 1/2]².
/// For noise textures this rebuilds the cell table; render loops cache it.
pub fn sample_texture(tex: &Texture, a: f64, b: f64) -> [f64; 3] {
    match tex {
        Texture::Checker { cells, c0, c1 } => {
            let i = cell_of(a + 0.5, *cells);
            let j = cell_of(b + 0.5, *cells);
            if (i + j) % 2 == 0 { *c0 } else { *c1 }
        }
        Texture::Gradient { axis, from, to } => {
            let t = match axis {
                TextureAxis::U => a + 0.5,
                TextureAxis::V => b + 0.5,
            };
            lerp3(from, to, t.clamp(0.0, 1.0))
        }
        Texture::Noise { cells, seed } => {
            let table = noise_table(*cells, *seed);
            table[(cell_of(b + 0.5, *cells) * *cells as i64 + cell_of(a + 0.5, *cells)) as usize]
        }
    }
}

/// Rectangle with precomputed frame data for the ray loop.
struct CompiledRect {
    center: Vector3<f64>,
    normal: Vector3<f64>,
    /// Maps p − center to local (a, b, s): a·u + b·v + s·n̂.
    to_local: Matrix3<f64>,
    opacity: Opacity,
    texture: Texture,
    noise_cache: Option<Vec<[f64; 3]>>,
}

impl CompiledRect {
    fn color_at(&self, a: f64, b: f64) -> [f64; 3] {
        match (&self.texture, &self.noise_cache) {
            (Texture::Noise { cells, .. }, Some(table)) => {
                table[(cell_of(b + 0.5, *cells) * *cells as i64 + cell_of(a + 0.5, *cells))
                    as usize]
            }
            (tex, _) => sample_texture(tex, a, b),
        }
    }
}

fn compile_scene(scene: &SceneSpec) -> Vec<CompiledRect> {
    scene
        .rects
        .iter()
        .map(|rect| {
            let u = Vector3::from(rect.u);
            let v = Vector3::from(rect.v);
            let normal = u.cross(&v).normalize();
            let basis = Matrix3::from_columns(&[u, v, normal]);
            // Invertible: validation rejected degenerate edge vectors.
            let to_local = basis.try_inverse().expect("rect basis is invertible");
            let noise_cache = match &rect.texture {
                Texture::Noise { cells, seed } => Some(noise_table(*cells, *seed)),
                _ => None,
            };
            CompiledRect {
                center: Vector3::from(rect.center),
                normal,
                to_local,
                opacity: rect.opacity,
                texture: rect.texture.clone(),
                noise_cache,
            }
        })
        .collect()
}

/// Nearest opaque intersection: ray parameter and local (a, b).
fn hit_opaque(rect: &CompiledRect, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let denom = rect.normal.dot(d);
    if denom.abs() < 1e-15 * d.norm() {
        return None;
    }
    let lam = rect.normal.dot(&(rect.center - o)) / denom;
    if !(lam > RAY_EPS) {
        return None;
    }
    let local = rect.to_local * (o + lam * d - rect.center);
    (local.x.abs() <= 0.5 && local.y.abs() <= 0.5).then_some((lam, local.x, local.y))
}

/// Ray parameter interval inside a translucent slab, or None if missed.
fn slab_interval(
    rect: &CompiledRect,
    thickness: f64,
    o: &Vector3<f64>,
    d: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let l0 = rect.to_local * (o - rect.center);
    let ld = rect.to_local * d;
    let half = [0.5, 0.5, thickness * 0.5];
    let mut lo = RAY_EPS;
    let mut hi = f64::INFINITY;
    for k in 0..3 {
        let (p, v, h) = (l0[k], ld[k], half[k]);
        if v.abs() < 1e-15 {
            if p.abs() > h {
                return None;
            }
        } else {
            let t1 = (-h - p) / v;
            let t2 = (h - p) / v;
            let (near, far) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            lo = lo.max(near);
            hi = hi.min(far);
        }
    }
    (lo < hi).then_some((lo, hi))
}

struct Span {
    enter: f64,
    exit: f64,
    rect: usize,
    sigma: f64,
}

/// Integrates one ray. Returns (rgb, expected source-frame depth, hit flag).
/// Transmittance is exact per constant-density segment; emission varies
/// inside a segment only through the texture, sampled at substep midpoints.
fn trace_pixel(
    rects: &[CompiledRect],
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    samples: usize,
) -> ([f64; 3], f64, bool) {
    let mut nearest: Option<(f64, usize, f64, f64)> = None;
    for (i, rect) in rects.iter().enumerate() {
        if rect.opacity != Opacity::Opaque {
            continue;
        }
        if let Some((lam, a, b)) = hit_opaque(rect, o, d) {
            if nearest.is_none_or(|(best, ..)| lam < best) {
                nearest = Some((lam, i, a, b));
            }
        }
    }
    let horizon = nearest.map_or(f64::INFINITY, |(lam, ..)| lam);

    let mut spans = Vec::new();
    for (i, rect) in rects.iter().enumerate() {
        let Opacity::Translucent { sigma, thickness } = rect.opacity else {
            continue;
        };
        if let Some((enter, exit)) = slab_interval(rect, thickness, o, d) {
            let exit = exit.min(horizon);
            if exit > enter {
                spans.push(Span { enter, exit, rect: i, sigma });
            }
        }
    }

    if nearest.is_none() && spans.is_empty() {
        return ([0.0; 3], 0.0, false);
    }

    let mut events: Vec<f64> = Vec::with_capacity(spans.len() * 2);
    for s in &spans {
        events.push(s.enter);
        events.push(s.exit);
    }
    events.sort_by(f64::total_cmp);
    events.dedup();

    struct Segment {
        lo: f64,
        hi: f64,
        sigma: f64,
        active: Vec<usize>,
    }
    let mut segments = Vec::new();
    for pair in events.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let mid = lo + 0.5 * (hi - lo);
        let active: Vec<usize> = spans
            .iter()
            .enumerate()
            .filter(|(_, s)| s.enter <= mid && mid < s.exit)
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            continue;
        }
        let sigma = active.iter().map(|&i| spans[i].sigma).sum();
        segments.push(Segment { lo, hi, sigma, active });
    }

    let step_per_unit = d.norm();
    let march_total: f64 = segments.iter().map(|s| (s.hi - s.lo) * step_per_unit).sum();

    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    let mut trans = 1.0;
    for seg in &segments {
        let length = (seg.hi - seg.lo) * step_per_unit;
        let n = ((samples as f64 * length / march_total).round() as usize).max(1);
        let h = (seg.hi - seg.lo) / n as f64;
        let tau = seg.sigma * h * step_per_unit;
        let alpha = -(-tau).exp_m1();
        for j in 0..n {
            let lam = seg.lo + (j as f64 + 0.5) * h;
            let p = o + lam * d;
            let mut color = [0.0; 3];
            for &si in &seg.active {
                let rect = &rects[spans[si].rect];
                let local = rect.to_local * (p - rect.center);
                let c = rect.color_at(local.x, local.y);
                let share = spans[si].sigma / seg.sigma;
                for ch in 0..3 {
                    color[ch] += share * c[ch];
                }
            }
            let weight = trans * alpha;
            for ch in 0..3 {
                rgb[ch] += weight * color[ch];
            }
            depth += weight * p.z;
            trans *= 1.0 - alpha;
        }
    }

    if let Some((lam, i, a, b)) = nearest {
        let c = rects[i].color_at(a, b);
        for ch in 0..3 {
            rgb[ch] += trans * c[ch];
        }
        depth += trans * (o.z + lam * d.z);
    }

    (rgb, depth, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutput {
    pub rgb: ColorMap,
    /// Source-frame depth: first hit for opaque, absorption-weighted
    /// expectation for translucent media. Positive wherever `mask` is set.
    pub depth: ScalarMap,
    pub mask: MaskMap,
}

/// Ray-traces the scene from the camera placed by `pose` (which maps
/// source-frame points into that camera's frame). Single threaded.
pub fn oracle_render(
    scene: &SceneSpec,
    cam: &Camera,
    pose: &Pose,
    samples_per_ray: usize,
) -> Result<OracleOutput, SceneError> {
    oracle_render_threads(scene, cam, pose, samples_per_ray, 1)
}

/// As [`oracle_render`], parallelized over row bands. Pixel results do not
/// depend on the band split, so any thread count gives identical bytes.
pub fn oracle_render_threads(
    scene: &SceneSpec,
    cam: &Camera,
    pose: &Pose,
    samples_per_ray: usize,
    threads: usize,
) -> Result<OracleOutput, SceneError> {
    scene.validate()?;
    cam.validate()?;
    if samples_per_ray == 0 {
        return Err(SceneError::NoSamples);
    }
    if threads == 0 {
        return Err(SceneError::NoThreads);
    }
    let rects = compile_scene(scene);
    let origin = pose.target_center_in_source();
    let back_rotate = pose.rotation().transpose() * cam.inv_intrinsics();

    let (w, h) = (cam.width, cam.height);
    let mut rgb = vec![[0.0; 3]; w * h];
    let mut depth = vec![0.0; w * h];
    let mut mask = vec![false; w * h];

    let bands = threads.min(h);
    let rows_per_band = h.div_ceil(bands);
    std::thread::scope(|scope| {
        let rect_ref = &rects;
        let rgb_bands = rgb.chunks_mut(rows_per_band * w);
        let depth_bands = depth.chunks_mut(rows_per_band * w);
        let mask_bands = mask.chunks_mut(rows_per_band * w);
        for (band, ((rgb_b, depth_b), mask_b)) in
            rgb_bands.zip(depth_bands).zip(mask_bands).enumerate()
        {
            scope.spawn(move || {
                let y0 = band * rows_per_band;
                for row in 0..rgb_b.len() / w {
                    let y = y0 + row;
                    for x in 0..w {
                        let dir =
                            back_rotate * Vector3::new(x as f64, y as f64, 1.0);
                        let (c, z, hit) =
                            trace_pixel(rect_ref, &origin, &dir, samples_per_ray);
                        rgb_b[row * w + x] = c;
                        depth_b[row * w + x] = z;
                        mask_b[row * w + x] = hit;
                    }
                }
            });
        }
    });

    Ok(OracleOutput {
        rgb: ColorMap::from_vec(w, h, rgb),
        depth: ScalarMap::from_vec(w, h, depth),
        mask: MaskMap::from_vec(w, h, mask),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitOptions {
    pub points_per_view: usize,
    pub seed: u64,
    /// Standard deviation of multiplicative log-normal noise on sparse
    /// point depths; 0 writes exact depths.
    pub depth_noise_sigma: f64,
    pub samples_per_ray: usize,
    pub threads: usize,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions {
            points_per_view: DEFAULT_POINTS_PER_VIEW,
            seed: 0,
            depth_noise_sigma: 0.0,
            samples_per_ray: DEFAULT_SAMPLES_PER_RAY,
            threads: 1,
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), SceneError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// On-disk scene bundle: geometry plus everything needed to emit a posed
/// dataset from it. All views share the one camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scene: SceneSpec,
    pub camera: Camera,
    pub views: Vec<PoseFile>,
    #[serde(default)]
    pub emit: EmitOptions,
}

/// Emits the bundle's dataset into `dir`, same layout as [`emit_dataset`].
pub fn emit_scene_file(file: &SceneFile, dir: &Path) -> Result<(), SceneError> {
    let views = file
        .views
        .iter()
        .map(|pf| Ok((file.camera, pf.to_pose()?)))
        .collect::<Result<Vec<_>, GeometryError>>()?;
    emit_dataset(&file.scene, &views, dir, &file.emit)
}

/// Renders every view and writes a dataset directory:
/// `view_k.ppm`, `view_k_depth.pfm`, `view_k_pose.json`, `points_k.json`
/// per view plus one shared `camera.json`. Byte-identical across reruns
/// with the same options.
pub fn emit_dataset(
    scene: &SceneSpec,
    views: &[(Camera, Pose)],
    dir: &Path,
    opts: &EmitOptions,
) -> Result<(), SceneError> {
    let Some(((cam0, _), rest)) = views.split_first() else {
        return Err(SceneError::EmptyViews);
    };
    if let Some(i) = rest.iter().position(|(cam, _)| cam != cam0) {
        return Err(SceneError::MixedCameras { index: i + 1 });
    }
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("camera.json"), cam0)?;

    for (k, (cam, pose)) in views.iter().enumerate() {
        let out = oracle_render_threads(scene, cam, pose, opts.samples_per_ray, opts.threads)?;
        imageio::write_ppm(&dir.join(format!("view_{k}.ppm")), &out.rgb)?;
        imageio::write_pfm(&dir.join(format!("view_{k}_depth.pfm")), &out.depth)?;
        write_json(&dir.join(format!("view_{k}_pose.json")), &PoseFile::from_pose(pose))?;

        let points = sparse_points(&out, opts, k);
        write_json(&dir.join(format!("points_{k}.json")), &points)?;
    }
    Ok(())
}

/// Seeded subsample of hit pixels as [pixel x, pixel y, source depth].
/// Pixel selection draws before any noise, so the chosen pixels do not
/// depend on whether noise is enabled.
fn sparse_points(out: &OracleOutput, opts: &EmitOptions, view: usize) -> Vec<[f64; 3]> {
    let mut candidates: Vec<(usize, usize)> =
        out.mask.coords().filter(|&(x, y)| out.mask.at(x, y)).collect();
    let count = opts.points_per_view.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(view as u64));
    for i in 0..count {
        let j = i + rng.random_range(0..candidates.len() - i);
        candidates.swap(i, j);
    }
    candidates
        .into_iter()
        .take(count)
        .map(|(x, y)| {
            let mut z = out.depth.at(x, y);
            if opts.depth_noise_sigma > 0.0 {
                // Box-Muller; one standard normal per point.
                let u1: f64 = rng.random();
                let u2: f64 = rng.random();
                let gauss =
                    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                z *= (opts.depth_noise_sigma * gauss).exp();
            }
            [x as f64, y as f64, z]
        })
        .collect()
}
