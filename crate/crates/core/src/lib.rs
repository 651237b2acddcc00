//! Reconstruct a 3D head from surface-normal maps and sparse landmarks.
//!
//! The crate fits a PCA morphable head model to one or more views. Each view
//! supplies a per-pixel normal map and up to 24 landmark detections. The
//! fit minimizes
//!
//! ```text
//! E = λN·EN + λZ·EZ + λP·EP
//! ```
//!
//! with a Levenberg–Marquardt solver over a shape vector shared by all views
//! and a pose plus pinhole intrinsics per view.
//!
//! The pieces:
//!
//! - [`model`]: the morphable model, a seeded procedural generator and the
//!   `.mmhead` file format.
//! - [`geometry`]: one-ring vertex normals, Euler rotations, pinhole projection
//!   with analytic Jacobians.
//! - [`raster`]: a z-buffered rasterizer producing normal and landmark maps
//!   from a posed mesh, plus their `.nmap` / `.lmk.json` files.
//! - [`fit`]: bicubic map sampling, the three energy terms, landmark
//!   pre-alignment and the joint fit.
//! - [`eval`]: anchor alignment, point-to-plane ICP, RMSE and depth-error
//!   statistics.
//! - [`cli`]: the `headfit` command line (`gen-model`, `synth`, `fit`, `eval`,
//!   `export`).
//!
//! Units are millimetres for geometry and pixels for images throughout.

pub mod cli;
pub mod error;
pub mod eval;
pub mod fit;
pub mod geometry;
pub mod mesh_io;
pub mod model;
pub mod raster;

pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, EvalReport, RigidTransform};
pub use fit::{fit, prealign, FitResult, FitWeights, SolverConfig, ViewObservation};
pub use geometry::{project, rotation_from_euler, vertex_normals, CameraPose, Intrinsics};
pub use model::{generate_procedural_model, HeadMesh, ModelConfig, MorphableModel, ShapeParams};
pub use raster::{render_landmark_map, render_normal_map, LandmarkMap, NormalMap};
