//! The plane-stack compositor and the ray-casting oracle agree on scenes
//! both can represent exactly: fronto-parallel opaque rectangles sitting at
//! grid slice depths, with textures baked into the grid through the inverse
//! activation.

use nalgebra::{Matrix3, Vector3};
use planarfield::field::{init_grid, FrustumGrid, InitMode};
use planarfield::geometry::{Camera, DepthRange, DisparitySet, Pose};
use planarfield::oracle::{
    oracle_render, sample_texture, Opacity, Rectangle, SceneSpec, Texture, TextureAxis,
};
use planarfield::renderer::{render_depth, render_novel, render_source, PadMode};

fn logit(c: f64) -> f64 {
    (c / (1.0 - c)).ln()
}

/// Local rect coordinates of the pixel's projection at depth z, if covered.
fn coverage(cam: &Camera, rect: &Rectangle, x: usize, y: usize) -> Option<(f64, f64)> {
    let z = rect.center[2];
    let wx = (x as f64 - cam.cx) / cam.fx * z;
    let wy = (y as f64 - cam.cy) / cam.fy * z;
    let a = (wx - rect.center[0]) / rect.u[0];
    let b = (wy - rect.center[1]) / rect.v[1];
    (a.abs() <= 0.5 && b.abs() <= 0.5).then_some((a, b))
}

/// Writes a rectangle's texture into one grid slice. Sigma 150 makes the
/// covered pixels opaque to beyond f64 roundoff for deltas ≥ 0.28.
fn bake(grid: &mut FrustumGrid, cam: &Camera, slice: usize, rect: &Rectangle) {
    for y in 0..cam.height {
        for x in 0..cam.width {
            let Some((a, b)) = coverage(cam, rect, x, y) else {
                continue;
            };
            let c = sample_texture(&rect.texture, a, b);
            for ch in 0..3 {
                let idx = grid.param_index(slice, y, x, ch);
                grid.params_mut()[idx] = logit(c[ch]) as f32;
            }
            let idx = grid.param_index(slice, y, x, 3);
            grid.params_mut()[idx] = 150.0;
        }
    }
}

fn gradient(axis: TextureAxis, from: [f64; 3], to: [f64; 3]) -> Texture {
    Texture::Gradient { axis, from, to }
}

#[test]
fn composite_matches_oracle_on_slice_aligned_scene() {
    let cam = Camera::new(16.0, 16.0, 7.5, 7.5, 16, 16).unwrap();
    let range = DepthRange::new(2.0, 4.0).unwrap();
    let mut grid = init_grid(4, 16, 16, &range, InitMode::Constant, 0.0).unwrap();
    let zs: Vec<f64> = grid.slice_disparities().iter().map(|d| 1.0 / d).collect();

    // Far backdrop covers the whole view; nearer rects occlude parts of it.
    let layout = [
        (3, Rectangle::fronto(0.0, 0.0, zs[3], 4.0, 4.0,
            gradient(TextureAxis::U, [0.15, 0.25, 0.35], [0.85, 0.75, 0.65]), Opacity::Opaque)),
        (1, Rectangle::fronto(0.37, -0.23, zs[1], 1.3, 1.1,
            gradient(TextureAxis::V, [0.2, 0.6, 0.3], [0.7, 0.2, 0.8]), Opacity::Opaque)),
        (0, Rectangle::fronto(-0.31, 0.22, zs[0], 0.73, 0.61,
            gradient(TextureAxis::U, [0.9, 0.3, 0.2], [0.3, 0.8, 0.9]), Opacity::Opaque)),
    ];
    for (slice, rect) in &layout {
        bake(&mut grid, &cam, *slice, rect);
    }

    let ds = DisparitySet::new(grid.slice_disparities().to_vec()).unwrap();
    let (render, trace) = render_source(&grid, &cam, &ds).unwrap();
    let depth = render_depth(&trace, &ds);

    let scene = SceneSpec {
        range,
        rects: layout.iter().map(|(_, r)| r.clone()).collect(),
    };
    let oracle = oracle_render(&scene, &cam, &Pose::identity(), 1).unwrap();

    // Nearest-first occlusion order for the reference depth.
    let mut by_depth: Vec<&(usize, Rectangle)> = layout.iter().collect();
    by_depth.sort_by(|a, b| a.1.center[2].total_cmp(&b.1.center[2]));

    let mut rgb_err = 0.0;
    for (x, y) in render.rgb.coords() {
        assert!(oracle.mask.at(x, y), "backdrop covers every pixel");
        assert!(render.weight_sum.at(x, y) > 0.99);
        for ch in 0..3 {
            rgb_err += (render.rgb.at(x, y)[ch] - oracle.rgb.at(x, y)[ch]).abs();
        }
        let first_hit = by_depth
            .iter()
            .find(|(_, r)| coverage(&cam, r, x, y).is_some())
            .map(|(_, r)| r.center[2])
            .unwrap();
        assert!((oracle.depth.at(x, y) - first_hit).abs() < 1e-12);
        assert!((depth.at(x, y) - oracle.depth.at(x, y)).abs() < 1e-9);
    }
    let mae = rgb_err / (3 * 16 * 16) as f64;
    assert!(mae < 1e-6, "rgb mean abs error {mae}");
}

#[test]
fn novel_view_matches_oracle_on_covering_plane() {
    let cam = Camera::new(32.0, 32.0, 15.5, 15.5, 32, 32).unwrap();
    // Slice 1 sits at depth exactly 5 (1/0.2 rounds to 5.0).
    let slices = vec![0.25, 0.2, 1.0 / 6.0, 1.0 / 7.0];
    let mut grid = FrustumGrid::new(32, 32, slices, vec![0.0; 4 * 32 * 32 * 4]).unwrap();

    // Sized to cover the source frustum (±2.5 at z = 5) with margin, so no
    // rect boundary falls inside the raster and bilinear taps stay exact.
    // Color varies along v only: warped taps that clamp at the left image
    // edge (the x overflow under this pose) pick up no color error.
    let rect = Rectangle::fronto(0.0, 0.0, 5.0, 8.0, 8.0,
        gradient(TextureAxis::V, [0.12, 0.2, 0.85], [0.88, 0.8, 0.15]), Opacity::Opaque);
    bake(&mut grid, &cam, 1, &rect);

    let (sin2, cos2) = 2.0f64.to_radians().sin_cos();
    let rot_y = Matrix3::new(cos2, 0.0, sin2, 0.0, 1.0, 0.0, -sin2, 0.0, cos2);
    let pose = Pose::new(rot_y, Vector3::new(0.2, 0.1, 0.0)).unwrap();

    let ds = DisparitySet::new(grid.slice_disparities().to_vec()).unwrap();
    let (render, trace) = render_novel(&grid, &cam, &pose, &ds, PadMode::Edge).unwrap();
    let depth = render_depth(&trace, &ds);

    let scene = SceneSpec { range: DepthRange::new(3.5, 8.0).unwrap(), rects: vec![rect] };
    let oracle = oracle_render(&scene, &cam, &pose, 1).unwrap();

    let mut rgb_err = 0.0;
    let mut used = 0usize;
    for (x, y) in render.rgb.coords() {
        if render.weight_sum.at(x, y) <= 0.99 {
            continue;
        }
        used += 1;
        for ch in 0..3 {
            rgb_err += (render.rgb.at(x, y)[ch] - oracle.rgb.at(x, y)[ch]).abs();
        }
        assert!((depth.at(x, y) - 5.0).abs() < 1e-6, "depth at ({x}, {y})");
    }
    assert!(used > 512, "only {used} pixels pass the weight-sum mask");
    let mae = rgb_err / (3 * used) as f64;
    assert!(mae < 1e-3, "rgb mean abs error {mae} over {used} pixels");
}

