//! Differentiable plane-stack rendering and inverse fitting.
//!
//! The scene representation is a stack of fronto-parallel RGB-density planes
//! placed at continuous depths inside a source camera frustum. Novel views
//! are rendered by warping each plane into the target view with its plane
//! homography and volume-compositing front to back. Every forward operation
//! carries a hand-derived reverse-mode adjoint, so a frustum parameter grid
//! can be fitted to posed images by gradient descent. A brute-force
//! ray-tracing oracle provides independent ground truth for all of it.

pub mod raster;
pub mod geometry;
pub mod field;
pub mod renderer;
pub mod imageio;
pub mod oracle;
pub mod losses;
pub mod calibration;
pub mod dataset;
pub mod fit;
