//! Landmark-only pose initialization on the mean head.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::energy::energy_landmarks;
use super::lm::{minimize, LeastSquares, LmConfig};
use crate::error::{Error, Result};
use crate::geometry::{rotation_from_euler, CameraPose, Intrinsics, PoseFrame};
use crate::model::{HeadMesh, MorphableModel};
use crate::raster::LandmarkMap;

/// Fewest visible landmarks accepted: 6 pose unknowns against 2 equations
/// per landmark, with slack.
pub const MIN_LANDMARKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrealignConfig {
    pub max_iterations: usize,
    /// Solutions with a larger RMS reprojection error are rejected, px.
    pub max_rms_px: f64,
    /// Yaw angles used as multi-start seeds, radians.
    pub yaw_seeds: Vec<f64>,
}

impl Default for PrealignConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            max_rms_px: 20.0,
            yaw_seeds: vec![0.0, FRAC_PI_2, -FRAC_PI_2, PI],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrealignResult {
    pub pose: CameraPose,
    pub rms_px: f64,
    pub energy: f64,
    pub seed_yaw: f64,
}

struct PoseOnlyProblem<'a> {
    model: &'a MorphableModel,
    mesh: HeadMesh,
    landmarks: &'a LandmarkMap,
    intrinsics: Intrinsics,
}

impl PoseOnlyProblem<'_> {
    fn block(&self, x: &DVector<f64>, jac: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let frame = PoseFrame::from_params(x.as_slice());
        let b = energy_landmarks(self.model, &self.mesh, &frame, &self.intrinsics, self.landmarks, jac)?;
        let ny = self.model.num_components();
        Ok((b.residuals, b.jacobian.map(|j| j.columns(ny, 6).into_owned())))
    }
}

impl LeastSquares for PoseOnlyProblem<'_> {
    fn num_params(&self) -> usize {
        6
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.block(x, false)?.0)
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (r, j) = self.block(x, true)?;
        Ok((r, j.unwrap()))
    }
}

/// Initial translation for a rotation guess: puts the landmark centroid on
/// the ray through the detection centroid at a depth matching the spread.
fn initial_translation(
    model: &MorphableModel,
    landmarks: &LandmarkMap,
    k: &Intrinsics,
    rotation: [f64; 3],
) -> Vector3<f64> {
    let pts: Vec<(Vector3<f64>, Vector2<f64>)> = landmarks
        .visible()
        .map(|d| {
            (
                model.mean_vertices[model.landmark_indices[d.channel]],
                Vector2::new(d.u, d.v),
            )
        })
        .collect();
    let n = pts.len() as f64;
    let c3 = pts.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let c2 = pts.iter().map(|p| p.1).sum::<Vector2<f64>>() / n;
    let s3 = (pts.iter().map(|p| (p.0 - c3).norm_squared()).sum::<f64>() / n).sqrt();
    let s2 = (pts.iter().map(|p| (p.1 - c2).norm_squared()).sum::<f64>() / n).sqrt();
    let depth = if s2 > 1e-9 { k.f * s3 / s2 } else { 10.0 * s3.max(1.0) };
    let center = Vector3::new((c2.x - k.u0) * depth / k.f, (c2.y - k.v0) * depth / k.f, depth);
    rotation_from_euler(rotation).transpose() * center - c3
}

/// Estimates a head pose from landmarks alone with `y = 0` and fixed `K`.
pub fn prealign(
    model: &MorphableModel,
    landmarks: &LandmarkMap,
    k: &Intrinsics,
    config: &PrealignConfig,
) -> Result<PrealignResult> {
    let available = landmarks
        .visible()
        .filter(|d| d.channel < model.landmark_indices.len())
        .count();
    if available < MIN_LANDMARKS {
        return Err(Error::UnderConstrained {
            available,
            required: MIN_LANDMARKS,
        });
    }
    let mut problem = PoseOnlyProblem {
        model,
        mesh: model.mean_mesh(),
        landmarks,
        intrinsics: *k,
    };
    let lm = LmConfig {
        max_iterations: config.max_iterations,
        ..LmConfig::default()
    };

    let mut best: Option<PrealignResult> = None;
    for &yaw in &config.yaw_seeds {
        let r = [0.0, 0.0, yaw];
        let t = initial_translation(model, landmarks, k, r);
        let x0 = DVector::from_vec(vec![r[0], r[1], r[2], t.x, t.y, t.z]);
        let Ok(report) = minimize(&mut problem, x0, &lm) else {
            continue;
        };
        if !report.energy.is_finite() {
            continue;
        }
        let x = report.x;
        let pose = CameraPose::canonical([x[0], x[1], x[2]], [x[3], x[4], x[5]])?;
        let candidate = PrealignResult {
            pose,
            rms_px: (2.0 * report.energy / available as f64).sqrt(),
            energy: report.energy,
            seed_yaw: yaw,
        };
        if best.is_none_or(|b| candidate.energy < b.energy) {
            best = Some(candidate);
        }
    }
    match best {
        Some(b) if b.rms_px <= config.max_rms_px => Ok(b),
        Some(b) => Err(Error::PrealignFailed { rms_px: b.rms_px }),
        None => Err(Error::PrealignFailed { rms_px: f64::INFINITY }),
    }
}
