//! Residual blocks of the fitting energy.
//!
//! Each block stores residuals `r` with `E = ½‖r‖²` and, on request, the
//! Jacobian with respect to the parameters of one view, laid out as
//! `[y (N_y) | roll pitch yaw tx ty tz | f u0 v0]`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2, Vector2, Vector3};
use rayon::prelude::*;

use super::sample::sample_normal_bicubic;
use crate::error::{Error, Result};
use crate::geometry::{project_with_jacobians, vertex_normal_jacobian, Intrinsics, PoseFrame, Z_MIN};
use crate::model::{HeadMesh, MorphableModel};
use crate::raster::{LandmarkMap, NormalMap};

/// Pose and intrinsics parameters per view.
pub const VIEW_PARAMS: usize = 9;

/// Vertices per parallel work unit; fixed so results do not depend on the
/// worker count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub residuals: DVector<f64>,
    /// Present when requested; `residuals.len()` rows.
    pub jacobian: Option<DMatrix<f64>>,
}

impl ResidualBlock {
    pub fn energy(&self) -> f64 {
        0.5 * self.residuals.norm_squared()
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

/// Vertices whose normal faces the camera: `n_i · (p_i + t) < 0`, and which
/// lie in front of the camera plane.
pub fn camera_facing_vertices(
    mesh: &HeadMesh,
    normals: &[Vector3<f64>],
    frame: &PoseFrame,
) -> Vec<usize> {
    (0..mesh.len())
        .filter(|&i| {
            let p = mesh.vertices[i];
            normals[i].dot(&(p + frame.translation)) < 0.0 && frame.to_camera(&p).z > Z_MIN
        })
        .collect()
}

fn assemble(rows: usize, cols: usize, parts: Vec<(Vec<f64>, Vec<f64>)>, with_jac: bool) -> ResidualBlock {
    let mut residuals = Vec::with_capacity(rows);
    let mut jac = Vec::with_capacity(if with_jac { rows * cols } else { 0 });
    for (r, j) in parts {
        residuals.extend(r);
        jac.extend(j);
    }
    ResidualBlock {
        residuals: DVector::from_vec(residuals),
        jacobian: with_jac.then(|| DMatrix::from_row_slice(rows, cols, &jac)),
    }
}

/// Normal-map term: `r_i = w(a_i)·(N(a_i) − n_i)` for each vertex in
/// `visible`, with `a_i` the projection of vertex `i`.
pub fn energy_normals(
    model: &MorphableModel,
    mesh: &HeadMesh,
    frame: &PoseFrame,
    k: &Intrinsics,
    map: &NormalMap,
    visible: &[usize],
    with_jacobian: bool,
) -> Result<ResidualBlock> {
    if visible.is_empty() {
        return Err(Error::EmptyResidual("no camera-facing vertices"));
    }
    let ny = model.num_components();
    let cols = ny + VIEW_PARAMS;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = visible
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut res = Vec::with_capacity(3 * chunk.len());
            let mut jac = Vec::with_capacity(if with_jacobian { 3 * chunk.len() * cols } else { 0 });
            for &i in chunk {
                let ring = &mesh.topology.rings[i];
                let (n, dn) = vertex_normal_jacobian(&mesh.vertices, i, ring)?;
                let (a, pj) = project_with_jacobians(&mesh.vertices[i], frame, k)?;
                let s = sample_normal_bicubic(map, &a);
                let diff = s.normal - n;
                let r = diff * s.weight;
                res.extend_from_slice(r.as_slice());
                if !with_jacobian {
                    continue;
                }
                // ∂r/∂a = w·∂N/∂a + (N − n)·∂w/∂aᵀ
                let g: Matrix3x2<f64> = s.d_normal * s.weight + diff * s.d_weight.transpose();
                let mut block = DMatrix::<f64>::zeros(3, cols);
                // Shape: Σ_v M_v·W_v over the vertex and its ring.
                let mut dy = DMatrix::<f64>::zeros(3, ny);
                for (v, d) in &dn {
                    let mut m: Matrix3<f64> = -d * s.weight;
                    if *v == i {
                        m += g * pj.point;
                    }
                    dy += m * model.vertex_basis(*v);
                }
                block.columns_mut(0, ny).copy_from(&dy);
                block.fixed_view_mut::<3, 6>(0, ny).copy_from(&(g * pj.pose));
                block.fixed_view_mut::<3, 3>(0, ny + 6).copy_from(&(g * pj.intrinsics));
                for row in 0..3 {
                    jac.extend(block.row(row).iter());
                }
            }
            Ok((res, jac))
        })
        .collect::<Result<_>>()?;
    Ok(assemble(3 * visible.len(), cols, parts, with_jacobian))
}

/// Landmark term: `r_j = z_j − b_j` for every visible detection.
pub fn energy_landmarks(
    model: &MorphableModel,
    mesh: &HeadMesh,
    frame: &PoseFrame,
    k: &Intrinsics,
    landmarks: &LandmarkMap,
    with_jacobian: bool,
) -> Result<ResidualBlock> {
    let ny = model.num_components();
    let cols = ny + VIEW_PARAMS;
    let dets: Vec<_> = landmarks
        .visible()
        .filter(|d| d.channel < model.landmark_indices.len())
        .collect();
    if dets.is_empty() {
        return Err(Error::EmptyResidual("no visible landmarks"));
    }
    let mut res = Vec::with_capacity(2 * dets.len());
    let mut jac = Vec::with_capacity(if with_jacobian { 2 * dets.len() * cols } else { 0 });
    for d in dets.iter() {
        let vi = model.landmark_indices[d.channel];
        let (b, pj) = project_with_jacobians(&mesh.vertices[vi], frame, k)?;
        let r = Vector2::new(d.u, d.v) - b;
        res.extend_from_slice(r.as_slice());
        if with_jacobian {
            let mut block = DMatrix::<f64>::zeros(2, cols);
            block
                .columns_mut(0, ny)
                .copy_from(&(-pj.point * model.vertex_basis(vi)));
            block.fixed_view_mut::<2, 6>(0, ny).copy_from(&(-pj.pose));
            block.fixed_view_mut::<2, 3>(0, ny + 6).copy_from(&(-pj.intrinsics));
            for row in 0..2 {
                jac.extend(block.row(row).iter());
            }
        }
    }
    Ok(assemble(2 * dets.len(), cols, vec![(res, jac)], with_jacobian))
}

/// Shape prior: `r_k = y_k / σ_k`, so `E_P = ½·yᵀ C⁻¹ y` with
/// `C = diag(σ²)`. The Jacobian has `N_y` columns.
pub fn energy_prior(y: &[f64], model: &MorphableModel) -> Result<ResidualBlock> {
    if y.len() != model.num_components() {
        return Err(Error::DimensionMismatch {
            what: "shape parameter count",
            expected: model.num_components(),
            actual: y.len(),
        });
    }
    let inv: Vec<f64> = model.singular_values.iter().map(|s| 1.0 / s).collect();
    Ok(ResidualBlock {
        residuals: DVector::from_iterator(y.len(), y.iter().zip(&inv).map(|(v, i)| v * i)),
        jacobian: Some(DMatrix::from_diagonal(&DVector::from_vec(inv))),
    })
}
