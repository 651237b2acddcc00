//! Vertex normals, Euler rotations and pinhole projection.
//!
//! Camera convention: right-handed, the camera looks down `+z`, image `u`
//! grows to the right and `v` downwards. A model point `p` maps to camera
//! coordinates `R·(p + t)` and then to pixels `(f·x/z + u0, f·y/z + v0)`.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadMesh, Point, Ring};

/// Points closer than this to the camera plane are rejected, mm.
pub const Z_MIN: f64 = 1.0;

/// Threshold on `‖ñ_i‖` below which a one-ring is treated as degenerate.
const DEGENERATE_RING: f64 = 1e-12;

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Rigid head pose: `R(roll, pitch, yaw)` and a model-frame translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// (roll, pitch, yaw) in radians.
    pub r: [f64; 3],
    /// Translation applied before the rotation, mm.
    pub t: [f64; 3],
}

impl CameraPose {
    pub fn new(r: [f64; 3], t: [f64; 3]) -> Result<Self> {
        if r.iter().chain(&t).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite pose component".into()));
        }
        if r.iter().any(|a| a.abs() >= std::f64::consts::PI) {
            return Err(Error::InvalidPose(format!(
                "angles must lie in (-pi, pi), got {r:?}"
            )));
        }
        Ok(Self { r, t })
    }

    /// Builds a pose from unconstrained angles by wrapping them into
    /// `(-π, π)`. Wrapping by full turns leaves the rotation unchanged.
    pub fn wrapped(r: [f64; 3], t: [f64; 3]) -> Result<Self> {
        Self::new(r.map(wrap_angle), t)
    }

    /// Like [`CameraPose::wrapped`], but re-expresses the rotation with yaw in
    /// `[-π/2, π/2]`, the representation closest to the upright frontal pose.
    pub fn canonical(r: [f64; 3], t: [f64; 3]) -> Result<Self> {
        if r.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidPose("non-finite pose component".into()));
        }
        Self::wrapped(euler_from_rotation(&rotation_from_euler(r)), t)
    }

    pub fn identity_at_depth(depth: f64) -> Self {
        Self {
            r: [0.0; 3],
            t: [0.0, 0.0, depth],
        }
    }

    /// Pose with rotation `r` that places the model origin at camera-frame
    /// position `center`.
    pub fn looking_at(r: [f64; 3], center: Vector3<f64>) -> Result<Self> {
        let t = rotation_from_euler(r).transpose() * center;
        Self::new(r, [t.x, t.y, t.z])
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(self.r)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.t)
    }

    /// Model point to camera frame.
    pub fn to_camera(&self, p: &Point) -> Vector3<f64> {
        self.rotation() * (p + self.translation())
    }

    /// Camera center expressed in the model frame.
    pub fn camera_center(&self) -> Point {
        -self.translation()
    }

    pub fn as_params(&self) -> [f64; 6] {
        [self.r[0], self.r[1], self.r[2], self.t[0], self.t[1], self.t[2]]
    }

    /// Rotation, its angle derivatives and the translation, for repeated use.
    pub fn frame(&self) -> PoseFrame {
        PoseFrame::new(self.r, self.translation())
    }
}

/// Wraps an angle into `(-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        // -π and π describe the same rotation; step just inside the open range.
        w = -PI + 4.0 * f64::EPSILON;
    }
    w
}

/// Pinhole intrinsics `K = [[f, 0, u0], [0, f, v0]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub f: f64,
    pub u0: f64,
    pub v0: f64,
}

impl Intrinsics {
    pub fn new(f: f64, u0: f64, v0: f64) -> Result<Self> {
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::InvalidIntrinsics(format!("focal must be > 0, got {f}")));
        }
        if !(u0.is_finite() && v0.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite principal point".into()));
        }
        Ok(Self { f, u0, v0 })
    }

    /// Default prior: `f = 1.2·max(w, h)`, principal point at the image center.
    pub fn prior_for_image(width: usize, height: usize) -> Self {
        Self {
            f: 1.2 * width.max(height) as f64,
            u0: width as f64 / 2.0,
            v0: height as f64 / 2.0,
        }
    }

    /// Checks the sanity bound: principal point within 4× the image extent.
    pub fn validate_for_image(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        if self.u0.abs() > 4.0 * w || self.v0.abs() > 4.0 * h {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside 4x image bounds {width}x{height}",
                self.u0, self.v0
            )));
        }
        Ok(())
    }

    pub fn as_params(&self) -> [f64; 3] {
        [self.f, self.u0, self.v0]
    }
}

/// `R = Rz(roll) · Ry(yaw) · Rx(pitch)`.
pub fn rotation_from_euler(r: [f64; 3]) -> Matrix3<f64> {
    let [roll, pitch, yaw] = r;
    rot_z(roll) * rot_y(yaw) * rot_x(pitch)
}

/// Inverse of [`rotation_from_euler`] away from the `|yaw| = π/2` singularity.
pub fn euler_from_rotation(rot: &Matrix3<f64>) -> [f64; 3] {
    let yaw = (-rot[(2, 0)]).clamp(-1.0, 1.0).asin();
    let pitch = rot[(2, 1)].atan2(rot[(2, 2)]);
    let roll = rot[(1, 0)].atan2(rot[(0, 0)]);
    [roll, pitch, yaw]
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// A pose with its rotation and angle derivatives evaluated once.
#[derive(Debug, Clone, Copy)]
pub struct PoseFrame {
    pub rotation: Matrix3<f64>,
    /// `∂R/∂roll`, `∂R/∂pitch`, `∂R/∂yaw`.
    pub d_rotation: [Matrix3<f64>; 3],
    pub translation: Vector3<f64>,
}

impl PoseFrame {
    pub fn new(r: [f64; 3], translation: Vector3<f64>) -> Self {
        let [roll, pitch, yaw] = r;
        let (z, y, x) = (rot_z(roll), rot_y(yaw), rot_x(pitch));
        Self {
            rotation: z * y * x,
            d_rotation: [
                drot_z(roll) * y * x,
                z * y * drot_x(pitch),
                z * drot_y(yaw) * x,
            ],
            translation,
        }
    }

    pub fn from_params(params: &[f64]) -> Self {
        Self::new(
            [params[0], params[1], params[2]],
            Vector3::new(params[3], params[4], params[5]),
        )
    }

    pub fn to_camera(&self, p: &Point) -> Vector3<f64> {
        self.rotation * (p + self.translation)
    }
}

/// Derivatives of a projected pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionJacobians {
    /// `∂a/∂p`.
    pub point: Matrix2x3<f64>,
    /// `∂a/∂(roll, pitch, yaw, tx, ty, tz)`.
    pub pose: Matrix2x6,
    /// `∂a/∂(f, u0, v0)`.
    pub intrinsics: Matrix2x3<f64>,
}

/// Projects a model point to pixel coordinates.
pub fn project(p: &Point, pose: &CameraPose, k: &Intrinsics) -> Result<Vector2<f64>> {
    project_in_frame(p, &pose.frame(), k)
}

pub fn project_in_frame(p: &Point, frame: &PoseFrame, k: &Intrinsics) -> Result<Vector2<f64>> {
    let c = frame.to_camera(p);
    if c.z <= Z_MIN {
        return Err(Error::BehindCamera { depth: c.z });
    }
    Ok(camera_to_pixel(&c, k))
}

/// Pinhole mapping of a camera-frame point; no depth check.
#[inline]
pub fn camera_to_pixel(c: &Vector3<f64>, k: &Intrinsics) -> Vector2<f64> {
    let iz = 1.0 / c.z;
    Vector2::new(k.f * (c.x * iz) + k.u0, k.f * (c.y * iz) + k.v0)
}

pub fn projection_jacobians(
    p: &Point,
    pose: &CameraPose,
    k: &Intrinsics,
) -> Result<(Vector2<f64>, ProjectionJacobians)> {
    project_with_jacobians(p, &pose.frame(), k)
}

/// Projection and all its analytic Jacobians in one pass.
pub fn project_with_jacobians(
    p: &Point,
    frame: &PoseFrame,
    k: &Intrinsics,
) -> Result<(Vector2<f64>, ProjectionJacobians)> {
    let q = p + frame.translation;
    let c = frame.rotation * q;
    if c.z <= Z_MIN {
        return Err(Error::BehindCamera { depth: c.z });
    }
    let iz = 1.0 / c.z;
    let (xn, yn) = (c.x * iz, c.y * iz);
    let a = camera_to_pixel(&c, k);
    let d_cam = Matrix2x3::new(k.f * iz, 0.0, -k.f * xn * iz, 0.0, k.f * iz, -k.f * yn * iz);

    let point = d_cam * frame.rotation;
    let mut pose = Matrix2x6::zeros();
    for (i, dr) in frame.d_rotation.iter().enumerate() {
        pose.set_column(i, &(d_cam * (dr * q)));
    }
    pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&point);
    let intrinsics = Matrix2x3::new(xn, 1.0, 0.0, yn, 0.0, 1.0);
    Ok((
        a,
        ProjectionJacobians {
            point,
            pose,
            intrinsics,
        },
    ))
}

/// Unit normals of every vertex, accumulated over consecutive one-ring edge
/// pairs and normalized.
pub fn vertex_normals(mesh: &HeadMesh) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::with_capacity(mesh.len());
    let mut bad = Vec::new();
    for (i, ring) in mesh.topology.rings.iter().enumerate() {
        match ring_normal(&mesh.vertices, i, ring) {
            Some(n) => out.push(n),
            None => {
                bad.push(i);
                out.push(Vector3::zeros());
            }
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::DegenerateNormals { vertices: bad })
    }
}

fn ring_pairs(ring: &Ring) -> impl Iterator<Item = (usize, usize)> + '_ {
    let m = ring.neighbors.len();
    let count = if ring.closed { m } else { m.saturating_sub(1) };
    (0..count).map(move |j| {
        (
            ring.neighbors[j] as usize,
            ring.neighbors[(j + 1) % m] as usize,
        )
    })
}

fn ring_normal(vertices: &[Point], i: usize, ring: &Ring) -> Option<Vector3<f64>> {
    let p = vertices[i];
    let mut acc = Vector3::zeros();
    for (a, b) in ring_pairs(ring) {
        let c = (vertices[a] - p).cross(&(vertices[b] - p));
        let norm = c.norm();
        if norm < DEGENERATE_RING {
            return None;
        }
        acc += c / norm;
    }
    let norm = acc.norm();
    (norm >= DEGENERATE_RING).then(|| acc / norm)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `∂(x/‖x‖)/∂x`.
fn normalize_jacobian(x: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let norm = x.norm();
    let u = x / norm;
    (u, (Matrix3::identity() - u * u.transpose()) / norm)
}

/// `(vertex index, ∂n/∂vertex)` pairs.
pub type NormalPartials = Vec<(usize, Matrix3<f64>)>;

/// Normal of vertex `i` and its derivative with respect to each vertex it
/// depends on (the vertex itself first, then its ring neighbors).
pub fn vertex_normal_jacobian(vertices: &[Point], i: usize, ring: &Ring) -> Result<(Vector3<f64>, NormalPartials)> {
    let p = vertices[i];
    let mut acc = Vector3::zeros();
    let mut partials: NormalPartials = Vec::with_capacity(ring.neighbors.len() + 1);
    partials.push((i, Matrix3::zeros()));
    for &j in &ring.neighbors {
        partials.push((j as usize, Matrix3::zeros()));
    }
    let m = ring.neighbors.len();
    let count = if ring.closed { m } else { m.saturating_sub(1) };
    for j in 0..count {
        let (ja, jb) = (j, (j + 1) % m);
        let a = vertices[ring.neighbors[ja] as usize] - p;
        let b = vertices[ring.neighbors[jb] as usize] - p;
        let c = a.cross(&b);
        if c.norm() < DEGENERATE_RING {
            return Err(Error::DegenerateNormals { vertices: vec![i] });
        }
        let (u, du) = normalize_jacobian(&c);
        acc += u;
        let (sa, sb) = (skew(&a), skew(&b));
        // c = a × b:  ∂c/∂a = -[b]×,  ∂c/∂b = [a]×.
        partials[1 + ja].1 -= du * sb;
        partials[1 + jb].1 += du * sa;
        partials[0].1 += du * (sb - sa);
    }
    if acc.norm() < DEGENERATE_RING {
        return Err(Error::DegenerateNormals { vertices: vec![i] });
    }
    let (n, dn) = normalize_jacobian(&acc);
    for (_, d) in partials.iter_mut() {
        *d = dn * *d;
    }
    Ok((n, partials))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};
    use std::sync::Arc;

    use super::*;
    use crate::model::{icosphere, Topology};

    fn unit_sphere(n: u32) -> HeadMesh {
        let (v, f) = icosphere(n);
        let topo = Topology::from_faces(v.len(), f).unwrap();
        HeadMesh::new(v, Arc::new(topo)).unwrap()
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mesh = unit_sphere(3);
        let normals = vertex_normals(&mesh).unwrap();
        for (p, n) in mesh.vertices.iter().zip(&normals) {
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot(&p.normalize()) > 0.999);
        }
    }

    #[test]
    fn collapsed_ring_is_flagged() {
        let mut mesh = unit_sphere(2);
        let ring = mesh.topology.rings[5].clone();
        for &j in &ring.neighbors {
            mesh.vertices[j as usize] = mesh.vertices[5];
        }
        match vertex_normals(&mesh) {
            Err(Error::DegenerateNormals { vertices }) => assert!(vertices.contains(&5)),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn identity_rotation() {
        assert_eq!(rotation_from_euler([0.0; 3]), Matrix3::identity());
    }

    #[test]
    fn roll_quarter_turn_maps_x_to_y() {
        let r = rotation_from_euler([FRAC_PI_2, 0.0, 0.0]);
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn euler_round_trip() {
        let r = [0.3, -1.1, 0.7];
        let back = euler_from_rotation(&rotation_from_euler(r));
        for k in 0..3 {
            assert!((back[k] - r[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_angle_bounds_enforced() {
        assert!(CameraPose::new([PI, 0.0, 0.0], [0.0; 3]).is_err());
        assert!(CameraPose::new([0.0, f64::NAN, 0.0], [0.0; 3]).is_err());
        let p = CameraPose::wrapped([3.0 * PI, 0.0, -PI], [0.0; 3]).unwrap();
        assert!(p.r.iter().all(|a| a.abs() < PI));
        let diff = (p.rotation() - rotation_from_euler([PI, 0.0, PI])).abs().max();
        assert!(diff < 1e-12);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0).is_err());
        let k = Intrinsics::new(500.0, 2000.0, 10.0).unwrap();
        assert!(k.validate_for_image(256, 256).is_err());
        assert!(Intrinsics::prior_for_image(256, 128).validate_for_image(256, 128).is_ok());
        assert_eq!(Intrinsics::prior_for_image(200, 100).f, 240.0);
    }

    #[test]
    fn principal_point_on_axis() {
        let k = Intrinsics::new(400.0, 120.0, 80.0).unwrap();
        let pose = CameraPose::identity_at_depth(0.0);
        let a = project(&Vector3::new(0.0, 0.0, 700.0), &pose, &k).unwrap();
        assert_eq!(a, Vector2::new(120.0, 80.0));
    }

    #[test]
    fn hand_evaluated_projection() {
        let k = Intrinsics::new(500.0, 0.0, 0.0).unwrap();
        let pose = CameraPose::identity_at_depth(0.0);
        let a = project(&Vector3::new(100.0, 0.0, 1000.0), &pose, &k).unwrap();
        assert!((a - Vector2::new(50.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let k = Intrinsics::new(500.0, 0.0, 0.0).unwrap();
        let pose = CameraPose::identity_at_depth(0.0);
        for z in [1.0, 0.0, -20.0] {
            assert!(matches!(
                project(&Vector3::new(0.0, 0.0, z), &pose, &k),
                Err(Error::BehindCamera { .. })
            ));
        }
    }

    #[test]
    fn on_axis_focal_derivative_vanishes() {
        let k = Intrinsics::new(500.0, 10.0, 20.0).unwrap();
        let pose = CameraPose::identity_at_depth(300.0);
        let (_, j) = projection_jacobians(&Vector3::zeros(), &pose, &k).unwrap();
        assert_eq!(j.intrinsics.column(0).into_owned(), Vector2::zeros());
        assert_eq!(j.intrinsics.fixed_view::<2, 2>(0, 1).into_owned(), nalgebra::Matrix2::identity());
    }
}
