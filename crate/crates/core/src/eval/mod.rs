//! Reconstruction accuracy against a reference mesh.
//!
//! The protocol: rough rigid alignment from a handful of anchor vertex pairs,
//! point-to-plane ICP refinement, then the point-to-plane RMSE
//!
//! ```text
//! ε = sqrt( Σ ((p_i − q_i)·n_i)² / N )
//! ```
//!
//! over reference vertices `p_i` with normals `n_i` and nearest
//! reconstructed vertices `q_i`, plus statistics of the absolute depth
//! (`z`) errors over the same pairs.

pub mod kdtree;

use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kdtree::KdTree;

use crate::error::{Error, Result};
use crate::geometry::vertex_normals;
use crate::model::{HeadMesh, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply_mesh(&self, mesh: &HeadMesh) -> HeadMesh {
        mesh.map_vertices(|p| self.apply(p))
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        (((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos().to_degrees()
    }
}

/// Anchor vertex correspondences between reference and reconstruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPairs {
    pub reference: Vec<usize>,
    pub recon: Vec<usize>,
}

impl AnchorPairs {
    /// Same vertex indices on both meshes.
    pub fn shared(indices: &[usize]) -> Self {
        Self {
            reference: indices.to_vec(),
            recon: indices.to_vec(),
        }
    }
}

/// Least-squares rigid transform `(R, t)` minimizing `Σ‖R·q_i + t − p_i‖²`,
/// reflections excluded.
pub fn procrustes(source: &[Point], target: &[Point]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch {
            what: "anchor pair count",
            expected: target.len(),
            actual: source.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 anchor pairs, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let cs = source.iter().sum::<Point>() / n;
    let ct = target.iter().sum::<Point>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (q, p) in source.iter().zip(target) {
        let (dq, dp) = (q - cs, p - ct);
        cov += dq * dp.transpose();
        spread += dq * dq.transpose();
    }
    for m in [&spread, &(target.iter().map(|p| (p - ct) * (p - ct).transpose()).sum::<Matrix3<f64>>())] {
        let mut ev = m.symmetric_eigenvalues();
        ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
            return Err(Error::DegenerateConfiguration("anchors are collinear".into()));
        }
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: ct - rotation * cs,
    })
}

/// Rigid transform taking the reconstruction's anchors onto the reference's.
pub fn coarse_align(reference: &HeadMesh, recon: &HeadMesh, anchors: &AnchorPairs) -> Result<RigidTransform> {
    let pick = |mesh: &HeadMesh, idx: &[usize]| -> Result<Vec<Point>> {
        idx.iter()
            .map(|&i| {
                mesh.vertices.get(i).copied().ok_or(Error::DimensionMismatch {
                    what: "anchor index bound",
                    expected: mesh.len(),
                    actual: i + 1,
                })
            })
            .collect()
    };
    procrustes(&pick(recon, &anchors.recon)?, &pick(reference, &anchors.reference)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the trimmed RMSE improves by less than this, mm.
    pub min_improvement: f64,
    /// Fraction of gated pairs kept per iteration, by distance.
    pub trim_fraction: f64,
    /// Pairs farther apart than this are ignored, mm.
    pub gating_radius: f64,
    /// Final mean nearest distance above which alignment is deemed failed, mm.
    pub failure_mean_distance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            min_improvement: 1e-6,
            trim_fraction: 0.9,
            gating_radius: 50.0,
            failure_mean_distance: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    /// Trimmed point-to-plane RMSE of each accepted transform, starting with
    /// the initial one.
    pub rmse_log: Vec<f64>,
    pub mean_distance: f64,
    pub failed: bool,
}

struct Pairs {
    /// (reference index, transformed recon point, distance)
    kept: Vec<(usize, Point, f64)>,
    rmse: f64,
}

fn nearest_all(tree: &KdTree, queries: &[Point]) -> Vec<(usize, f64)> {
    queries
        .par_iter()
        .map(|q| tree.nearest(q).expect("non-empty tree"))
        .collect()
}

fn correspondences(
    reference: &[Point],
    normals: &[Vector3<f64>],
    tree: &KdTree,
    recon: &[Point],
    transform: &RigidTransform,
    config: &IcpConfig,
) -> Result<Pairs> {
    let inv = transform.inverse();
    let local: Vec<Point> = reference.iter().map(|p| inv.apply(p)).collect();
    let mut gated: Vec<(usize, Point, f64)> = nearest_all(tree, &local)
        .into_iter()
        .enumerate()
        .filter_map(|(i, (j, _))| {
            let q = transform.apply(&recon[j]);
            let d = (q - reference[i]).norm();
            (d <= config.gating_radius).then_some((i, q, d))
        })
        .collect();
    if gated.len() < 6 {
        return Err(Error::AlignmentFailed(format!(
            "{} correspondences within {} mm",
            gated.len(),
            config.gating_radius
        )));
    }
    let mut dists: Vec<f64> = gated.iter().map(|g| g.2).collect();
    dists.sort_by(f64::total_cmp);
    let keep = ((config.trim_fraction * dists.len() as f64).ceil() as usize).clamp(6, dists.len());
    let cutoff = dists[keep - 1];
    gated.retain(|g| g.2 <= cutoff);
    let sse: f64 = gated
        .iter()
        .map(|(i, q, _)| ((q - reference[*i]).dot(&normals[*i])).powi(2))
        .sum();
    Ok(Pairs {
        rmse: (sse / gated.len() as f64).sqrt(),
        kept: gated,
    })
}

/// Point-to-plane ICP refining `init` (which maps recon onto reference).
pub fn icp_refine(
    reference: &HeadMesh,
    recon: &HeadMesh,
    init: &RigidTransform,
    config: &IcpConfig,
) -> Result<IcpResult> {
    if reference.is_empty() || recon.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let normals = vertex_normals(reference)?;
    let tree = KdTree::new(&recon.vertices);
    let mut transform = *init;
    let mut pairs = correspondences(&reference.vertices, &normals, &tree, &recon.vertices, &transform, config)?;
    let mut log = vec![pairs.rmse];
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        let mut ata = Matrix6::<f64>::zeros();
        let mut atb = Vector6::<f64>::zeros();
        for (i, q, _) in &pairs.kept {
            let n = normals[*i];
            let a = Vector6::new(
                q.cross(&n).x,
                q.cross(&n).y,
                q.cross(&n).z,
                n.x,
                n.y,
                n.z,
            );
            let b = -(q - reference.vertices[*i]).dot(&n);
            ata += a * a.transpose();
            atb += a * b;
        }
        let Some(xi) = ata.cholesky().map(|c| c.solve(&atb)) else {
            break;
        };

        // Halve the step until the trimmed RMSE does not increase.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let step = RigidTransform::from_axis_angle(
                Vector3::new(xi[0], xi[1], xi[2]) * scale,
                Vector3::new(xi[3], xi[4], xi[5]) * scale,
            );
            let candidate = step.compose(&transform);
            if let Ok(p) = correspondences(&reference.vertices, &normals, &tree, &recon.vertices, &candidate, config) {
                if p.rmse <= pairs.rmse {
                    accepted = Some((candidate, p));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((candidate, next)) = accepted else {
            break;
        };
        let improvement = pairs.rmse - next.rmse;
        transform = candidate;
        pairs = next;
        log.push(pairs.rmse);
        if improvement < config.min_improvement {
            break;
        }
    }

    let inv = transform.inverse();
    let local: Vec<Point> = reference.vertices.iter().map(|p| inv.apply(p)).collect();
    let mean_distance = nearest_all(&tree, &local)
        .iter()
        .map(|(_, d2)| d2.sqrt())
        .sum::<f64>()
        / reference.len() as f64;
    Ok(IcpResult {
        transform,
        iterations: iterations.max(1),
        rmse_log: log,
        mean_distance,
        failed: mean_distance > config.failure_mean_distance,
    })
}

/// Index of the nearest reconstructed vertex for every reference vertex.
pub fn nearest_vertices(reference: &HeadMesh, recon: &HeadMesh) -> Result<Vec<usize>> {
    if reference.is_empty() || recon.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let tree = KdTree::new(&recon.vertices);
    Ok(nearest_all(&tree, &reference.vertices)
        .into_iter()
        .map(|(j, _)| j)
        .collect())
}

/// ε over all reference vertices, meshes assumed aligned.
pub fn point_to_plane_rmse(reference: &HeadMesh, recon: &HeadMesh) -> Result<f64> {
    let nn = nearest_vertices(reference, recon)?;
    let normals = vertex_normals(reference)?;
    let sse: f64 = nn
        .iter()
        .enumerate()
        .map(|(i, &j)| ((reference.vertices[i] - recon.vertices[j]).dot(&normals[i])).powi(2))
        .sum();
    Ok((sse / reference.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    /// Mean of the largest 10% of errors.
    pub delta90: f64,
}

impl DepthStats {
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        Ok(Self {
            mean,
            std,
            median,
            delta90: upper_tail_mean(&sorted),
        })
    }
}

/// Mean of the largest `ceil(0.1·N)` values of an ascending slice.
fn upper_tail_mean(sorted: &[f64]) -> f64 {
    let k = ((sorted.len() as f64 * 0.1).ceil() as usize).max(1);
    sorted[sorted.len() - k..].iter().sum::<f64>() / k as f64
}

/// Absolute `z` differences between each reference vertex and its nearest
/// reconstructed vertex.
pub fn depth_errors(reference: &HeadMesh, recon: &HeadMesh) -> Result<Vec<f64>> {
    let nn = nearest_vertices(reference, recon)?;
    Ok(nn
        .iter()
        .enumerate()
        .map(|(i, &j)| (reference.vertices[i].z - recon.vertices[j].z).abs())
        .collect())
}

pub fn depth_error_stats(reference: &HeadMesh, recon: &HeadMesh) -> Result<DepthStats> {
    DepthStats::from_errors(&depth_errors(reference, recon)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    pub icp: IcpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub depth: DepthStats,
    pub n_vertices: usize,
    pub icp_iterations: usize,
    pub icp_mean_distance: f64,
    pub coarse_transform: RigidTransform,
    pub transform: RigidTransform,
}

impl EvalReport {
    /// Aligned two-column table: RMSE, μ, σ, median, δ90%.
    pub fn to_table(&self) -> String {
        let rows = [
            ("RMSE", self.rmse),
            ("mu", self.depth.mean),
            ("sigma", self.depth.std),
            ("median", self.depth.median),
            ("delta90%", self.depth.delta90),
        ];
        let mut s = String::new();
        writeln!(s, "{:<10} {:>12}", "metric", "value (mm)").unwrap();
        for (name, v) in rows {
            writeln!(s, "{name:<10} {v:>12.6}").unwrap();
        }
        writeln!(s, "{:<10} {:>12}", "N", self.n_vertices).unwrap();
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Full protocol: optional anchor alignment, ICP, then ε and depth stats.
pub fn evaluate(
    reference: &HeadMesh,
    recon: &HeadMesh,
    anchors: Option<&AnchorPairs>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if reference.is_empty() || recon.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let coarse = match anchors {
        Some(a) => coarse_align(reference, recon, a)?,
        None => RigidTransform::identity(),
    };
    let icp = icp_refine(reference, recon, &coarse, &config.icp)?;
    if icp.failed {
        return Err(Error::AlignmentFailed(format!(
            "mean distance {:.3} mm after ICP exceeds {} mm",
            icp.mean_distance, config.icp.failure_mean_distance
        )));
    }
    let aligned = icp.transform.apply_mesh(recon);
    Ok(EvalReport {
        rmse: point_to_plane_rmse(reference, &aligned)?,
        depth: depth_error_stats(reference, &aligned)?,
        n_vertices: reference.len(),
        icp_iterations: icp.iterations,
        icp_mean_distance: icp.mean_distance,
        coarse_transform: coarse,
        transform: icp.transform,
    })
}
