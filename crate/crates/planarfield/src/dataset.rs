//! Loader for emitted dataset directories:
//! `camera.json` plus `view_k.ppm`, `view_k_depth.pfm`, `view_k_pose.json`,
//! `points_k.json` for k = 0, 1, … with no gaps. All views share one
//! camera; rasters must match its resolution.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{Camera, GeometryError, Pose, PoseFile};
use crate::imageio::{self, ImageIoError};
use crate::losses::SparsePointSet;
use crate::raster::{ColorMap, ScalarMap};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing {path}")]
    MissingFile { path: PathBuf },
    #[error("dataset directory has no views")]
    NoViews,
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("view {view} {what} is {got_w}x{got_h}, camera says {cam_w}x{cam_h}")]
    ShapeMismatch {
        view: usize,
        what: &'static str,
        got_w: usize,
        got_h: usize,
        cam_w: usize,
        cam_h: usize,
    },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct DatasetView {
    pub rgb: ColorMap,
    pub depth: ScalarMap,
    pub pose: Pose,
    pub points: SparsePointSet,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub camera: Camera,
    pub views: Vec<DatasetView>,
}

impl Dataset {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile { path: path.to_path_buf() });
    }
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let camera: Camera = read_json(&dir.join("camera.json"))?;
    camera.validate()?;

    let mut views = Vec::new();
    for k in 0.. {
        let rgb_path = dir.join(format!("view_{k}.ppm"));
        if !rgb_path.exists() {
            break;
        }
        let rgb = imageio::read_ppm(&rgb_path)?;
        let depth_path = dir.join(format!("view_{k}_depth.pfm"));
        if !depth_path.exists() {
            return Err(DatasetError::MissingFile { path: depth_path });
        }
        let depth = imageio::read_pfm(&depth_path)?;
        let pose_file: PoseFile = read_json(&dir.join(format!("view_{k}_pose.json")))?;
        let pose = pose_file.to_pose()?;
        let points: SparsePointSet = read_json(&dir.join(format!("points_{k}.json")))?;

        for (what, w, h) in [
            ("rgb", rgb.width(), rgb.height()),
            ("depth", depth.width(), depth.height()),
        ] {
            if w != camera.width || h != camera.height {
                return Err(DatasetError::ShapeMismatch {
                    view: k,
                    what,
                    got_w: w,
                    got_h: h,
                    cam_w: camera.width,
                    cam_h: camera.height,
                });
            }
        }
        views.push(DatasetView { rgb, depth, pose, points });
    }
    if views.is_empty() {
        return Err(DatasetError::NoViews);
    }
    Ok(Dataset { camera, views })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DepthRange;
    use crate::oracle::{
        EmitOptions, Opacity, Rectangle, SceneSpec, Texture, TextureAxis, emit_dataset,
    };
    use nalgebra::{Matrix3, Vector3};

    fn tiny_scene() -> SceneSpec {
        SceneSpec {
            range: DepthRange::new(1.0, 10.0).unwrap(),
            rects: vec![Rectangle::fronto(
                0.0,
                0.0,
                4.0,
                8.0,
                8.0,
                Texture::Gradient {
                    axis: TextureAxis::U,
                    from: [0.1, 0.2, 0.3],
                    to: [0.8, 0.7, 0.6],
                },
                Opacity::Opaque,
            )],
        }
    }

    fn two_views() -> Vec<(Camera, Pose)> {
        let cam = Camera::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        let shifted = Pose::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0)).unwrap();
        vec![(cam.clone(), Pose::identity()), (cam, shifted)]
    }

    #[test]
    fn round_trips_an_emitted_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let opts = EmitOptions { points_per_view: 4, samples_per_ray: 4, ..Default::default() };
        emit_dataset(&tiny_scene(), &two_views(), dir.path(), &opts).unwrap();

        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.num_views(), 2);
        assert_eq!((ds.camera.width, ds.camera.height), (8, 8));
        assert!(ds.views[0].pose.is_identity());
        assert_eq!(ds.views[1].pose.translation().x, 0.1);
        assert_eq!(ds.views[0].points.len(), 4);
        // Depth survives the PFM round trip where the plane is visible.
        let d = &ds.views[0].depth;
        assert_eq!(d.at(3, 3), 4.0f32 as f64);
    }

    #[test]
    fn missing_sidecar_is_reported_by_path() {
        let dir = tempfile::tempdir().unwrap();
        let opts = EmitOptions { points_per_view: 2, samples_per_ray: 4, ..Default::default() };
        emit_dataset(&tiny_scene(), &two_views(), dir.path(), &opts).unwrap();
        std::fs::remove_file(dir.path().join("view_1_depth.pfm")).unwrap();
        match load_dataset(dir.path()) {
            Err(DatasetError::MissingFile { path }) => {
                assert!(path.ends_with("view_1_depth.pfm"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_directory_and_bad_json_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::MissingFile { .. })
        ));
        std::fs::write(dir.path().join("camera.json"), b"{not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DatasetError::Json { .. })));
    }

    #[test]
    fn view_numbering_stops_at_first_gap() {
        let dir = tempfile::tempdir().unwrap();
        let opts = EmitOptions { points_per_view: 2, samples_per_ray: 4, ..Default::default() };
        emit_dataset(&tiny_scene(), &two_views(), dir.path(), &opts).unwrap();
        // Renaming view_1 away leaves a clean single-view dataset.
        for name in ["view_1.ppm", "view_1_depth.pfm", "view_1_pose.json", "points_1.json"] {
            std::fs::remove_file(dir.path().join(name)).unwrap();
        }
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.num_views(), 1);
    }
}
