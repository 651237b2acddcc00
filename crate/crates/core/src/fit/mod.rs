//! Morphable model fitting to normal and landmark maps.
//!
//! The energy is `E = λN·EN + λZ·EZ + λP·EP`. The parameter vector is
//! `[y | view₀ | view₁ | …]`, where `y` is the shape shared by all views and
//! each view carries `(roll, pitch, yaw, tx, ty, tz, f, u0, v0)`. Every view
//! is first pre-aligned from its landmarks on the mean head; the joint
//! problem is then solved with Levenberg–Marquardt.
//!
//! Only camera-facing vertices enter `EN`. The visible set is recomputed
//! every `refresh_interval` iterations and held fixed in between.

pub mod energy;
pub mod lm;
pub mod prealign;
pub mod sample;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use energy::{
    camera_facing_vertices, energy_landmarks, energy_normals, energy_prior, ResidualBlock,
    VIEW_PARAMS,
};
pub use lm::{LmConfig, StepRecord, Termination};
pub use prealign::{prealign, PrealignConfig, PrealignResult, MIN_LANDMARKS};
pub use sample::{sample_normal_bicubic, NormalSample};

use crate::error::{Error, Result};
use crate::geometry::{vertex_normals, CameraPose, Intrinsics, PoseFrame};
use crate::model::{HeadMesh, MorphableModel, ShapeParams};
use crate::raster::{LandmarkMap, NormalMap};

/// Maps and intrinsics prior of one input image.
#[derive(Debug, Clone)]
pub struct ViewObservation {
    pub normal_map: NormalMap,
    pub landmarks: LandmarkMap,
    pub intrinsics_prior: Intrinsics,
}

impl ViewObservation {
    /// Uses the default intrinsics prior for the map size.
    pub fn new(normal_map: NormalMap, landmarks: LandmarkMap) -> Result<Self> {
        let k = Intrinsics::prior_for_image(normal_map.width, normal_map.height);
        Self::with_prior(normal_map, landmarks, k)
    }

    pub fn with_prior(normal_map: NormalMap, landmarks: LandmarkMap, k: Intrinsics) -> Result<Self> {
        if normal_map.width == 0 || normal_map.height == 0 {
            return Err(Error::InvalidConfig("empty normal map".into()));
        }
        k.validate_for_image(normal_map.width, normal_map.height)?;
        landmarks.validate(crate::model::NUM_LANDMARKS, normal_map.width, normal_map.height)?;
        Ok(Self {
            normal_map,
            landmarks,
            intrinsics_prior: k,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitWeights {
    pub normals: f64,
    pub landmarks: f64,
    pub prior: f64,
}

impl Default for FitWeights {
    fn default() -> Self {
        Self {
            normals: 1.0,
            landmarks: 0.8,
            prior: 0.4,
        }
    }
}

impl FitWeights {
    pub fn new(normals: f64, landmarks: f64, prior: f64) -> Result<Self> {
        let w = Self {
            normals,
            landmarks,
            prior,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.normals, self.landmarks, self.prior];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("weights must be finite and >= 0".into()));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidConfig("at least one weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    pub function_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Iterations between visibility refreshes.
    pub refresh_interval: usize,
    pub prealign: PrealignConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let lm = LmConfig::default();
        Self {
            max_iterations: lm.max_iterations,
            gradient_tolerance: lm.gradient_tolerance,
            parameter_tolerance: lm.parameter_tolerance,
            function_tolerance: lm.function_tolerance,
            initial_damping: lm.initial_damping,
            damping_increase: lm.damping_increase,
            damping_decrease: lm.damping_decrease,
            refresh_interval: 5,
            prealign: PrealignConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gradient_tolerance,
            self.parameter_tolerance,
            self.function_tolerance,
            self.initial_damping,
            self.damping_increase,
            self.damping_decrease,
        ];
        if self.max_iterations == 0
            || self.refresh_interval == 0
            || positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::InvalidConfig("solver settings must be positive".into()));
        }
        if self.damping_increase <= 1.0 || self.damping_decrease >= 1.0 {
            return Err(Error::InvalidConfig(
                "damping increase must exceed 1 and decrease be below 1".into(),
            ));
        }
        Ok(())
    }

    fn lm(&self) -> LmConfig {
        LmConfig {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            parameter_tolerance: self.parameter_tolerance,
            function_tolerance: self.function_tolerance,
            initial_damping: self.initial_damping,
            damping_increase: self.damping_increase,
            damping_decrease: self.damping_decrease,
            refresh_interval: self.refresh_interval,
            ..LmConfig::default()
        }
    }
}

/// Unweighted terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub normals: f64,
    pub landmarks: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFit {
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub prealign_rms_px: f64,
    pub visible_vertices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub y: Vec<f64>,
    pub views: Vec<ViewFit>,
    pub energy: EnergyBreakdown,
    pub weights: FitWeights,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub history: Vec<StepRecord>,
}

impl FitResult {
    pub fn shape(&self) -> ShapeParams {
        ShapeParams { y: self.y.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// True if every accepted step strictly lowered the energy.
    pub fn accepted_steps_decrease(&self) -> bool {
        self.history
            .iter()
            .filter(|s| s.accepted)
            .all(|s| matches!(s.energy_after, Some(e) if e < s.energy_before))
    }
}

/// The stacked, weighted least-squares problem of a multi-view fit.
pub struct FitProblem<'a> {
    model: &'a MorphableModel,
    views: &'a [ViewObservation],
    weights: FitWeights,
    visibility: Vec<Vec<usize>>,
}

impl<'a> FitProblem<'a> {
    pub fn new(model: &'a MorphableModel, views: &'a [ViewObservation], weights: FitWeights) -> Result<Self> {
        weights.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidConfig("at least one view is required".into()));
        }
        for v in views {
            v.landmarks
                .validate(model.landmark_indices.len(), v.normal_map.width, v.normal_map.height)?;
        }
        Ok(Self {
            model,
            views,
            weights,
            visibility: vec![Vec::new(); views.len()],
        })
    }

    pub fn num_params(&self) -> usize {
        self.model.num_components() + VIEW_PARAMS * self.views.len()
    }

    pub fn pack(&self, y: &ShapeParams, views: &[(CameraPose, Intrinsics)]) -> DVector<f64> {
        let mut x = Vec::with_capacity(self.num_params());
        x.extend_from_slice(&y.y);
        for (pose, k) in views {
            x.extend_from_slice(&pose.as_params());
            x.extend_from_slice(&k.as_params());
        }
        DVector::from_vec(x)
    }

    fn view_params<'x>(&self, x: &'x DVector<f64>, v: usize) -> &'x [f64] {
        let o = self.model.num_components() + VIEW_PARAMS * v;
        &x.as_slice()[o..o + VIEW_PARAMS]
    }

    fn view_frame(&self, x: &DVector<f64>, v: usize) -> (PoseFrame, Intrinsics) {
        let p = self.view_params(x, v);
        (
            PoseFrame::from_params(&p[..6]),
            Intrinsics {
                f: p[6],
                u0: p[7],
                v0: p[8],
            },
        )
    }

    fn mesh(&self, x: &DVector<f64>) -> Result<HeadMesh> {
        let ny = self.model.num_components();
        self.model.instantiate(&ShapeParams {
            y: x.as_slice()[..ny].to_vec(),
        })
    }

    pub fn visibility(&self) -> &[Vec<usize>] {
        &self.visibility
    }

    pub fn set_visibility(&mut self, visibility: Vec<Vec<usize>>) -> Result<()> {
        if visibility.len() != self.views.len() {
            return Err(Error::DimensionMismatch {
                what: "visibility set count",
                expected: self.views.len(),
                actual: visibility.len(),
            });
        }
        self.visibility = visibility;
        Ok(())
    }

    /// Camera-facing vertex sets at `x`.
    pub fn compute_visibility(&self, x: &DVector<f64>) -> Result<Vec<Vec<usize>>> {
        let mesh = self.mesh(x)?;
        let normals = vertex_normals(&mesh)?;
        Ok((0..self.views.len())
            .map(|v| camera_facing_vertices(&mesh, &normals, &self.view_frame(x, v).0))
            .collect())
    }

    /// Weighted blocks of one view, each with its Jacobian in view layout.
    fn view_blocks(
        &self,
        mesh: &HeadMesh,
        x: &DVector<f64>,
        v: usize,
        jac: bool,
    ) -> Result<(Option<ResidualBlock>, Option<ResidualBlock>)> {
        let (frame, k) = self.view_frame(x, v);
        let obs = &self.views[v];
        let normals = if self.weights.normals > 0.0 {
            Some(energy_normals(
                self.model,
                mesh,
                &frame,
                &k,
                &obs.normal_map,
                &self.visibility[v],
                jac,
            )?)
        } else {
            None
        };
        let landmarks = if self.weights.landmarks > 0.0 {
            Some(energy_landmarks(self.model, mesh, &frame, &k, &obs.landmarks, jac)?)
        } else {
            None
        };
        Ok((normals, landmarks))
    }

    /// Stacked residuals `[√λN·r_N | √λZ·r_Z]` per view then `√λP·r_P`, and
    /// optionally the full Jacobian.
    pub fn evaluate(&self, x: &DVector<f64>, with_jacobian: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        if x.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector length",
                expected: self.num_params(),
                actual: x.len(),
            });
        }
        let ny = self.model.num_components();
        let mesh = self.mesh(x)?;
        let blocks: Vec<_> = (0..self.views.len())
            .into_par_iter()
            .map(|v| self.view_blocks(&mesh, x, v, with_jacobian))
            .collect::<Result<_>>()?;
        let prior = (self.weights.prior > 0.0)
            .then(|| energy_prior(&x.as_slice()[..ny], self.model))
            .transpose()?;

        let mut parts: Vec<(f64, Option<usize>, &ResidualBlock)> = Vec::new();
        for (v, (n, z)) in blocks.iter().enumerate() {
            if let Some(b) = n {
                parts.push((self.weights.normals.sqrt(), Some(v), b));
            }
            if let Some(b) = z {
                parts.push((self.weights.landmarks.sqrt(), Some(v), b));
            }
        }
        if let Some(b) = &prior {
            parts.push((self.weights.prior.sqrt(), None, b));
        }

        let rows: usize = parts.iter().map(|p| p.2.len()).sum();
        let mut r = DVector::zeros(rows);
        let mut jac = with_jacobian.then(|| DMatrix::zeros(rows, self.num_params()));
        let mut row = 0;
        for (scale, view, b) in parts {
            let m = b.len();
            r.rows_mut(row, m).copy_from(&(&b.residuals * scale));
            if let (Some(j), Some(bj)) = (jac.as_mut(), b.jacobian.as_ref()) {
                j.view_mut((row, 0), (m, ny)).copy_from(&(bj.columns(0, ny) * scale));
                if let Some(v) = view {
                    let col = ny + VIEW_PARAMS * v;
                    j.view_mut((row, col), (m, VIEW_PARAMS))
                        .copy_from(&(bj.columns(ny, VIEW_PARAMS) * scale));
                }
            }
            row += m;
        }
        Ok((r, jac))
    }

    /// Weighted total energy at `x` with the current visibility.
    pub fn energy(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * self.evaluate(x, false)?.0.norm_squared())
    }

    /// `Jᵀr`, the gradient of the weighted total energy.
    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (r, j) = self.evaluate(x, true)?;
        Ok(j.unwrap().tr_mul(&r))
    }

    pub fn breakdown(&self, x: &DVector<f64>) -> Result<EnergyBreakdown> {
        let ny = self.model.num_components();
        let mesh = self.mesh(x)?;
        let mut out = EnergyBreakdown::default();
        for v in 0..self.views.len() {
            let (n, z) = self.view_blocks(&mesh, x, v, false)?;
            out.normals += n.map_or(0.0, |b| b.energy());
            out.landmarks += z.map_or(0.0, |b| b.energy());
        }
        out.prior = energy_prior(&x.as_slice()[..ny], self.model)?.energy();
        out.total = self.weights.normals * out.normals
            + self.weights.landmarks * out.landmarks
            + self.weights.prior * out.prior;
        Ok(out)
    }
}

impl lm::LeastSquares for FitProblem<'_> {
    fn num_params(&self) -> usize {
        FitProblem::num_params(self)
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(x, false)?.0)
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (r, j) = self.evaluate(x, true)?;
        Ok((r, j.unwrap()))
    }

    fn refresh(&mut self, x: &DVector<f64>) -> Result<bool> {
        let vis = self.compute_visibility(x)?;
        let changed = vis != self.visibility;
        self.visibility = vis;
        Ok(changed)
    }
}

/// Fits shape, poses and intrinsics to one or more views.
///
/// A solver that stops without converging still returns its state, with
/// `converged == false` and the reason in `termination`.
pub fn fit(
    model: &MorphableModel,
    views: &[ViewObservation],
    weights: FitWeights,
    config: &SolverConfig,
) -> Result<FitResult> {
    config.validate()?;
    let mut problem = FitProblem::new(model, views, weights)?;

    let prealigned: Vec<PrealignResult> = views
        .iter()
        .map(|v| prealign(model, &v.landmarks, &v.intrinsics_prior, &config.prealign))
        .collect::<Result<_>>()?;
    let init: Vec<(CameraPose, Intrinsics)> = prealigned
        .iter()
        .zip(views)
        .map(|(p, v)| (p.pose, v.intrinsics_prior))
        .collect();
    let x0 = problem.pack(&ShapeParams::zeros(model.num_components()), &init);
    let visibility = problem.compute_visibility(&x0)?;
    problem.set_visibility(visibility)?;

    let report = lm::minimize(&mut problem, x0, &config.lm())?;
    let x = &report.x;
    let energy = problem.breakdown(x)?;
    let ny = model.num_components();
    let views_out = (0..views.len())
        .map(|v| {
            let p = problem.view_params(x, v);
            Ok(ViewFit {
                pose: CameraPose::canonical([p[0], p[1], p[2]], [p[3], p[4], p[5]])?,
                intrinsics: Intrinsics {
                    f: p[6],
                    u0: p[7],
                    v0: p[8],
                },
                prealign_rms_px: prealigned[v].rms_px,
                visible_vertices: problem.visibility()[v].len(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(FitResult {
        y: x.as_slice()[..ny].to_vec(),
        views: views_out,
        energy,
        weights,
        iterations: report.iterations,
        converged: report.termination.converged(),
        termination: report.termination,
        history: report.history,
    })
}
