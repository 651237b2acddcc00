#![allow(dead_code)]

use std::sync::OnceLock;

use headfit::geometry::{CameraPose, Intrinsics};
use headfit::model::{generate_procedural_model, ModelConfig, MorphableModel};
use headfit::raster::render_views;
use headfit::fit::FitProblem;
use headfit::{HeadMesh, LandmarkMap, NormalMap, ShapeParams};
use nalgebra::{DVector, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SIZE: usize = 256;
pub const DEPTH: f64 = 500.0;

/// The N_y = 30 model used across the integration tests.
pub fn model() -> &'static MorphableModel {
    static MODEL: OnceLock<MorphableModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        generate_procedural_model(ModelConfig {
            n_subdiv: 3,
            n_components: 30,
            seed: 7,
        })
        .unwrap()
    })
}

pub fn intrinsics() -> Intrinsics {
    Intrinsics::prior_for_image(SIZE, SIZE)
}

/// Head centered on the optical axis at `DEPTH`, turned by `yaw_deg`.
pub fn pose_yaw(yaw_deg: f64) -> CameraPose {
    CameraPose::looking_at([0.0, 0.0, yaw_deg.to_radians()], Vector3::new(0.0, 0.0, DEPTH)).unwrap()
}

pub fn frontal() -> CameraPose {
    pose_yaw(0.0)
}

pub fn render(mesh: &HeadMesh, pose: &CameraPose) -> (NormalMap, LandmarkMap) {
    render_views(mesh, model(), pose, &intrinsics(), SIZE, SIZE).unwrap()
}

/// Geodesic angle between two rotations, degrees.
pub fn rotation_error_deg(a: &nalgebra::Matrix3<f64>, b: &nalgebra::Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Nearest point by exhaustive scan, smallest index on ties.
pub fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Parameter vector near a rendering's ground truth, randomly perturbed.
pub fn perturbed(problem: &FitProblem, truth: &ShapeParams, poses: &[CameraPose], rng: &mut ChaCha8Rng) -> DVector<f64> {
    let k = intrinsics();
    let views: Vec<_> = poses
        .iter()
        .map(|p| {
            let mut r = p.r;
            r.iter_mut().for_each(|a| *a += rng.random_range(-0.03..0.03));
            let t = [p.t[0] + rng.random_range(-3.0..3.0), p.t[1] + rng.random_range(-3.0..3.0), p.t[2] + rng.random_range(-8.0..8.0)];
            let k = Intrinsics::new(k.f * rng.random_range(0.95..1.05), k.u0 + rng.random_range(-3.0..3.0), k.v0 + rng.random_range(-3.0..3.0)).unwrap();
            (CameraPose::new(r, t).unwrap(), k)
        })
        .collect();
    let y = ShapeParams::new(
        truth.y.iter().zip(&model().singular_values).map(|(v, s)| v + rng.random_range(-0.3..0.3) * s).collect(),
    )
    .unwrap();
    problem.pack(&y, &views)
}

/// Max-norm relative error between the analytic gradient and central
/// differences of the scalar energy, visibility held fixed.
///
/// The mask weight is only C0 across pixel-center lines at the silhouette, so
/// the step is kept small enough that crossing such a line is unlikely.
pub fn gradient_error(problem: &FitProblem, x: &DVector<f64>) -> f64 {
    let g = problem.gradient(x).unwrap();
    let mut fd = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = 1e-7 * x[i].abs().max(1.0);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        fd[i] = (problem.energy(&xp).unwrap() - problem.energy(&xm).unwrap()) / (2.0 * h);
    }
    (&g - &fd).amax() / g.amax().max(fd.amax())
}


/// ε of a reconstruction against ground truth through the full eval
/// protocol (anchor alignment then ICP).
pub fn epsilon(truth: &HeadMesh, recon: &HeadMesh) -> f64 {
    let anchors = headfit::eval::AnchorPairs::shared(&model().eval_anchor_indices);
    headfit::evaluate(truth, recon, Some(&anchors), &headfit::EvalConfig::default())
        .unwrap()
        .rmse
}

