//! PCA morphable head model.
//!
//! A model is a mean shape `X0`, an orthonormal deformation basis `W` of shape
//! `(3·N_X) × N_y` and the singular values `σ_k` that define the shape prior.
//! A head is instantiated as `X = X0 + W·y`.
//!
//! Coordinates are millimetres in a right-handed frame aligned with the
//! identity camera: `+x` to the image right, `+y` down, `+z` away from the
//! camera. The face looks toward `-z`, so the identity pose shows the head
//! frontal and upright.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Number of landmark vertices carried by every model.
pub const NUM_LANDMARKS: usize = 24;
/// Number of coarse-alignment anchors carried by every model.
pub const NUM_ANCHORS: usize = 6;

/// Semi-axes of the procedural mean head (x, y, z), mm.
pub const HEAD_SEMI_AXES: [f64; 3] = [90.0, 110.0, 130.0];

/// One-ring of a vertex, ordered counter-clockwise as seen from outside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ring {
    pub neighbors: Vec<u32>,
    /// False for boundary vertices of open meshes; the last neighbor then
    /// does not wrap around to the first.
    pub closed: bool,
}

/// Triangle list plus per-vertex one-rings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub faces: Vec<[u32; 3]>,
    pub rings: Vec<Ring>,
}

impl Topology {
    /// Builds the one-rings of a consistently wound triangle mesh.
    pub fn from_faces(num_vertices: usize, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mut next: Vec<Vec<(u32, u32)>> = vec![Vec::new(); num_vertices];
        for (fi, f) in faces.iter().enumerate() {
            for c in 0..3 {
                let v = f[c] as usize;
                if v >= num_vertices {
                    return Err(Error::DimensionMismatch {
                        what: "face index bound",
                        expected: num_vertices,
                        actual: v + 1,
                    });
                }
                let (a, b) = (f[(c + 1) % 3], f[(c + 2) % 3]);
                if a == b || a == f[c] || b == f[c] {
                    return Err(Error::DegenerateConfiguration(format!(
                        "face {fi} repeats a vertex"
                    )));
                }
                next[v].push((a, b));
            }
        }

        let mut rings = Vec::with_capacity(num_vertices);
        for (v, edges) in next.iter().enumerate() {
            rings.push(chain_ring(v, edges)?);
        }
        Ok(Self { faces, rings })
    }

    pub fn num_vertices(&self) -> usize {
        self.rings.len()
    }
}

fn chain_ring(vertex: usize, edges: &[(u32, u32)]) -> Result<Ring> {
    if edges.is_empty() {
        return Ok(Ring {
            neighbors: Vec::new(),
            closed: false,
        });
    }
    let mut succ: HashMap<u32, u32> = HashMap::with_capacity(edges.len());
    let mut has_pred: HashMap<u32, bool> = HashMap::with_capacity(edges.len());
    for &(a, b) in edges {
        if succ.insert(a, b).is_some() {
            return Err(Error::DegenerateConfiguration(format!(
                "non-manifold fan at vertex {vertex}"
            )));
        }
        has_pred.insert(b, true);
        has_pred.entry(a).or_insert(false);
    }
    // Open fans start at the neighbor without a predecessor.
    let mut starts: Vec<u32> = has_pred
        .iter()
        .filter(|(_, &p)| !p)
        .map(|(&k, _)| k)
        .collect();
    starts.sort_unstable();
    let (start, closed) = match starts.len() {
        0 => (*succ.keys().min().unwrap(), true),
        1 => (starts[0], false),
        _ => {
            return Err(Error::DegenerateConfiguration(format!(
                "vertex {vertex} has a disconnected fan"
            )))
        }
    };

    let mut neighbors = vec![start];
    let mut cur = start;
    while let Some(&n) = succ.get(&cur) {
        if n == start {
            break;
        }
        neighbors.push(n);
        cur = n;
        if neighbors.len() > edges.len() + 1 {
            return Err(Error::DegenerateConfiguration(format!(
                "cyclic fan walk at vertex {vertex}"
            )));
        }
    }
    let expected = if closed { edges.len() } else { edges.len() + 1 };
    if neighbors.len() != expected {
        return Err(Error::DegenerateConfiguration(format!(
            "vertex {vertex} has a disconnected fan"
        )));
    }
    Ok(Ring { neighbors, closed })
}

/// PCA coordinates of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub y: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(n: usize) -> Self {
        Self { y: vec![0.0; n] }
    }

    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("shape parameters must be finite".into()));
        }
        Ok(Self { y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Concrete vertex positions over a shared topology.
#[derive(Debug, Clone)]
pub struct HeadMesh {
    pub vertices: Vec<Point>,
    pub topology: Arc<Topology>,
}

impl HeadMesh {
    pub fn new(vertices: Vec<Point>, topology: Arc<Topology>) -> Result<Self> {
        if vertices.len() != topology.num_vertices() {
            return Err(Error::DimensionMismatch {
                what: "mesh vertex count",
                expected: topology.num_vertices(),
                actual: vertices.len(),
            });
        }
        if vertices.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidConfig("mesh coordinates must be finite".into()));
        }
        Ok(Self { vertices, topology })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Same topology, every vertex moved by `offset`.
    pub fn translated(&self, offset: &Point) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| p + offset).collect(),
            topology: Arc::clone(&self.topology),
        }
    }

    /// Same topology, every vertex mapped through `f`.
    pub fn map_vertices(&self, f: impl Fn(&Point) -> Point) -> Self {
        Self {
            vertices: self.vertices.iter().map(f).collect(),
            topology: Arc::clone(&self.topology),
        }
    }
}

/// Parameters of the procedural model generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_subdiv: u32,
    pub n_components: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MorphableModel {
    pub mean_vertices: Vec<Point>,
    /// `(3·N_X) × N_y`, row `3i + c` holds coordinate `c` of vertex `i`.
    pub basis: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub topology: Arc<Topology>,
    pub landmark_indices: Vec<usize>,
    pub eval_anchor_indices: Vec<usize>,
    pub config: ModelConfig,
}

impl MorphableModel {
    pub fn num_vertices(&self) -> usize {
        self.mean_vertices.len()
    }

    pub fn num_components(&self) -> usize {
        self.singular_values.len()
    }

    /// `X = X0 + W·y`.
    pub fn instantiate(&self, y: &ShapeParams) -> Result<HeadMesh> {
        if y.len() != self.num_components() {
            return Err(Error::DimensionMismatch {
                what: "shape parameter count",
                expected: self.num_components(),
                actual: y.len(),
            });
        }
        let offsets = &self.basis * DVector::from_column_slice(&y.y);
        let vertices = self
            .mean_vertices
            .iter()
            .enumerate()
            .map(|(i, m)| m + Vector3::new(offsets[3 * i], offsets[3 * i + 1], offsets[3 * i + 2]))
            .collect();
        Ok(HeadMesh {
            vertices,
            topology: Arc::clone(&self.topology),
        })
    }

    /// Random shape with `y_k ~ N(0, (scale·σ_k)²)`, seeded.
    pub fn sample_shape(&self, seed: u64, scale: f64) -> ShapeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ShapeParams {
            y: self
                .singular_values
                .iter()
                .map(|s| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * scale * s
                })
                .collect(),
        }
    }

    /// `√(Σ (y_k/σ_k)²)`.
    pub fn mahalanobis_norm(&self, y: &ShapeParams) -> f64 {
        y.y.iter()
            .zip(&self.singular_values)
            .map(|(v, s)| (v / s).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn mean_mesh(&self) -> HeadMesh {
        HeadMesh {
            vertices: self.mean_vertices.clone(),
            topology: Arc::clone(&self.topology),
        }
    }

    /// Rows `3i..3i+3` of the basis: the 3 × N_y derivative of vertex `i`.
    pub fn vertex_basis(&self, i: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.basis.rows(3 * i, 3)
    }

    /// Index of the most frontal mean vertex (minimum z).
    pub fn nose_tip_index(&self) -> usize {
        nose_tip(&self.mean_vertices)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vertices();
        if self.topology.num_vertices() != n {
            return Err(Error::DimensionMismatch {
                what: "topology vertex count",
                expected: n,
                actual: self.topology.num_vertices(),
            });
        }
        if self.basis.nrows() != 3 * n || self.basis.ncols() != self.singular_values.len() {
            return Err(Error::DimensionMismatch {
                what: "basis shape",
                expected: 3 * n,
                actual: self.basis.nrows(),
            });
        }
        if self.singular_values.is_empty() {
            return Err(Error::InvalidConfig("model has no components".into()));
        }
        let sv = &self.singular_values;
        if sv.iter().any(|s| !(s.is_finite() && *s > 0.0)) || sv.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig(
                "singular values must be positive and non-increasing".into(),
            ));
        }
        for (name, idx, count) in [
            ("landmark", &self.landmark_indices, NUM_LANDMARKS),
            ("anchor", &self.eval_anchor_indices, NUM_ANCHORS),
        ] {
            if idx.len() != count {
                return Err(Error::DimensionMismatch {
                    what: if name == "landmark" { "landmark count" } else { "anchor count" },
                    expected: count,
                    actual: idx.len(),
                });
            }
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != idx.len() || idx.iter().any(|&i| i >= n) {
                return Err(Error::InvalidConfig(format!(
                    "{name} indices must be distinct and < {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Landmark positions on `mesh`, in landmark order.
pub fn landmark_points(mesh: &HeadMesh, model: &MorphableModel) -> Vec<Point> {
    model.landmark_indices.iter().map(|&i| mesh.vertices[i]).collect()
}

/// Coarse-alignment anchor positions on `mesh`, in anchor order.
pub fn anchor_points(mesh: &HeadMesh, model: &MorphableModel) -> Vec<Point> {
    model.eval_anchor_indices.iter().map(|&i| mesh.vertices[i]).collect()
}

fn nose_tip(vertices: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in vertices.iter().enumerate() {
        if p.z < vertices[best].z {
            best = i;
        }
    }
    best
}

/// Unit icosphere after `n_subdiv` rounds of 4-to-1 subdivision, faces wound
/// counter-clockwise seen from outside.
pub fn icosphere(n_subdiv: u32) -> (Vec<Point>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();

    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for f in faces.iter_mut() {
        orient_outward(&vertices, f);
    }

    for _ in 0..n_subdiv {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let p = (vertices[a as usize] + vertices[b as usize]).normalize();
                    vertices.push(p);
                    (vertices.len() - 1) as u32
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }
    (vertices, faces)
}

fn orient_outward(vertices: &[Point], f: &mut [u32; 3]) {
    let (a, b, c) = (
        vertices[f[0] as usize],
        vertices[f[1] as usize],
        vertices[f[2] as usize],
    );
    if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
        f.swap(1, 2);
    }
}

/// Number of neighbor-averaging rounds applied to each random field.
fn smoothing_rounds(n_subdiv: u32) -> usize {
    1usize << (n_subdiv + 2)
}

/// Builds a seeded procedural morphable model.
///
/// The mean is an icosphere stretched to [`HEAD_SEMI_AXES`]. Each basis
/// column starts as a Gaussian vertex field, is smoothed by repeated one-ring
/// averaging, has its rigid-motion component projected out, and is then
/// orthonormalized against the previous columns. `σ_k = 25·k^-0.8` mm.
pub fn generate_procedural_model(config: ModelConfig) -> Result<MorphableModel> {
    if config.n_subdiv < 2 {
        return Err(Error::InvalidConfig(format!(
            "n_subdiv must be >= 2, got {}",
            config.n_subdiv
        )));
    }
    if config.n_subdiv > 7 {
        return Err(Error::InvalidConfig(format!(
            "n_subdiv must be <= 7, got {}",
            config.n_subdiv
        )));
    }
    if config.n_components < 1 {
        return Err(Error::InvalidConfig("n_components must be >= 1".into()));
    }

    let (unit, faces) = icosphere(config.n_subdiv);
    let n = unit.len();
    if config.n_components + 6 > 3 * n {
        return Err(Error::InvalidConfig(format!(
            "n_components {} too large for {n} vertices",
            config.n_components
        )));
    }
    let [ax, ay, az] = HEAD_SEMI_AXES;
    let mean: Vec<Point> = unit
        .iter()
        .map(|p| Vector3::new(ax * p.x, ay * p.y, az * p.z))
        .collect();
    let topology = Arc::new(Topology::from_faces(n, faces)?);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rigid = rigid_motion_fields(&mean);
    let rounds = smoothing_rounds(config.n_subdiv);
    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(config.n_components);
    while columns.len() < config.n_components {
        let mut field = DVector::from_fn(3 * n, |_, _| StandardNormal.sample(&mut rng));
        for _ in 0..rounds {
            field = smooth_once(&field, &topology);
        }
        // Two passes of modified Gram-Schmidt keep the Gram matrix at machine
        // precision.
        for _ in 0..2 {
            for q in rigid.iter().chain(columns.iter()) {
                let d = q.dot(&field);
                field.axpy(-d, q, 1.0);
            }
        }
        let norm = field.norm();
        if norm < 1e-8 {
            continue;
        }
        columns.push(field / norm);
    }
    let basis = DMatrix::from_columns(&columns);
    let singular_values: Vec<f64> = (1..=config.n_components)
        .map(|k| 25.0 * (k as f64).powf(-0.8))
        .collect();

    let landmark_indices = front_landmarks(&mean, NUM_LANDMARKS)?;
    let eval_anchor_indices = landmark_indices[..NUM_ANCHORS].to_vec();

    let model = MorphableModel {
        mean_vertices: mean,
        basis,
        singular_values,
        topology,
        landmark_indices,
        eval_anchor_indices,
        config,
    };
    model.validate()?;
    Ok(model)
}

fn smooth_once(field: &DVector<f64>, topology: &Topology) -> DVector<f64> {
    let mut out = DVector::zeros(field.len());
    for (i, ring) in topology.rings.iter().enumerate() {
        let w = 1.0 / (ring.neighbors.len() + 1) as f64;
        for c in 0..3 {
            let mut s = field[3 * i + c];
            for &j in &ring.neighbors {
                s += field[3 * j as usize + c];
            }
            out[3 * i + c] = s * w;
        }
    }
    out
}

/// Orthonormal basis of the six rigid-motion displacement fields.
fn rigid_motion_fields(mean: &[Point]) -> Vec<DVector<f64>> {
    let n = mean.len();
    let centroid = mean.iter().sum::<Point>() / n as f64;
    let mut fields: Vec<DVector<f64>> = Vec::with_capacity(6);
    for axis in 0..3 {
        let mut t = DVector::zeros(3 * n);
        let mut r = DVector::zeros(3 * n);
        let mut e = Vector3::zeros();
        e[axis] = 1.0;
        for (i, p) in mean.iter().enumerate() {
            t[3 * i + axis] = 1.0;
            let d = e.cross(&(p - centroid));
            for c in 0..3 {
                r[3 * i + c] = d[c];
            }
        }
        fields.push(t);
        fields.push(r);
    }
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(6);
    for mut f in fields {
        for _ in 0..2 {
            for q in &out {
                let d = q.dot(&f);
                f.axpy(-d, q, 1.0);
            }
        }
        let norm = f.norm();
        out.push(f / norm);
    }
    out
}

/// Farthest-point sampling over the frontal cap `z <= -0.3·c`, seeded at
/// the most frontal vertex. Ties resolve to the lowest vertex index.
fn front_landmarks(mean: &[Point], count: usize) -> Result<Vec<usize>> {
    let cap = -0.3 * HEAD_SEMI_AXES[2];
    let candidates: Vec<usize> = (0..mean.len()).filter(|&i| mean[i].z <= cap).collect();
    if candidates.len() < count {
        return Err(Error::InvalidConfig(format!(
            "only {} frontal vertices, need {count} landmarks",
            candidates.len()
        )));
    }
    let mut chosen = vec![nose_tip(mean)];
    let mut min_dist: Vec<f64> = candidates
        .iter()
        .map(|&i| (mean[i] - mean[chosen[0]]).norm_squared())
        .collect();
    while chosen.len() < count {
        let mut best = 0;
        for k in 1..candidates.len() {
            if min_dist[k] > min_dist[best] {
                best = k;
            }
        }
        let pick = candidates[best];
        chosen.push(pick);
        for (k, &i) in candidates.iter().enumerate() {
            min_dist[k] = min_dist[k].min((mean[i] - mean[pick]).norm_squared());
        }
    }
    Ok(chosen)
}

// ---------------------------------------------------------------------------
// .mmhead file format
//
//   magic "MMHEAD\0\x01" | u64 LE header length | JSON header |
//   f64 mean[3N] | f64 basis[3N·Ny], column-major | f64 sigma[Ny] |
//   u32 faces[3F] | u32 landmarks[24] | u32 anchors[6] |
//   u32 ring_offsets[N+1] | u32 ring_neighbors[R] | u8 ring_closed[N]

const MODEL_MAGIC: &[u8; 8] = b"MMHEAD\0\x01";
const MODEL_FORMAT_VERSION: &str = "1.0.0";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format_version: String,
    units: String,
    n_vertices: usize,
    n_components: usize,
    n_faces: usize,
    n_landmarks: usize,
    n_anchors: usize,
    n_ring_entries: usize,
    n_subdiv: u32,
    seed: u64,
}

impl ModelHeader {
    fn payload_len(&self) -> usize {
        let n = self.n_vertices;
        8 * (3 * n + 3 * n * self.n_components + self.n_components)
            + 4 * (3 * self.n_faces + self.n_landmarks + self.n_anchors + n + 1 + self.n_ring_entries)
            + n
    }
}

/// Serializes a model to bytes; identical models give identical bytes.
pub fn model_to_bytes(model: &MorphableModel) -> Result<Vec<u8>> {
    let n_ring_entries = model.topology.rings.iter().map(|r| r.neighbors.len()).sum();
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION.into(),
        units: "mm".into(),
        n_vertices: model.num_vertices(),
        n_components: model.num_components(),
        n_faces: model.topology.faces.len(),
        n_landmarks: model.landmark_indices.len(),
        n_anchors: model.eval_anchor_indices.len(),
        n_ring_entries,
        n_subdiv: model.config.n_subdiv,
        seed: model.config.seed,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + header.payload_len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for p in &model.mean_vertices {
        for c in p.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for v in model.basis.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &model.singular_values {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let push_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for f in &model.topology.faces {
        for &i in f {
            push_u32(&mut out, i as usize);
        }
    }
    for &i in model.landmark_indices.iter().chain(&model.eval_anchor_indices) {
        push_u32(&mut out, i);
    }
    let mut offset = 0;
    push_u32(&mut out, 0);
    for r in &model.topology.rings {
        offset += r.neighbors.len();
        push_u32(&mut out, offset);
    }
    for r in &model.topology.rings {
        for &j in &r.neighbors {
            push_u32(&mut out, j as usize);
        }
    }
    for r in &model.topology.rings {
        out.push(r.closed as u8);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptModel("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MorphableModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8).map_err(|_| Error::CorruptModel("missing magic".into()))? != MODEL_MAGIC {
        return Err(Error::CorruptModel("magic number mismatch".into()));
    }
    let header_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let header: ModelHeader = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::CorruptModel(format!("bad header: {e}")))?;
    if header.format_version.split('.').next() != Some("1") {
        return Err(Error::CorruptModel(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let remaining = bytes.len() - cur.pos;
    if remaining < header.payload_len() {
        return Err(Error::CorruptModel(format!(
            "truncated file: header declares {} payload bytes, found {remaining}",
            header.payload_len()
        )));
    }
    if remaining != header.payload_len() {
        return Err(Error::CorruptModel(format!(
            "header dimensions inconsistent with payload: expected {} bytes, found {remaining}",
            header.payload_len()
        )));
    }

    let n = header.n_vertices;
    let ny = header.n_components;
    let mean_raw = cur.f64s(3 * n)?;
    let mean_vertices = mean_raw
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    let basis = DMatrix::from_vec(3 * n, ny, cur.f64s(3 * n * ny)?);
    let singular_values = cur.f64s(ny)?;
    let faces: Vec<[u32; 3]> = cur
        .u32s(3 * header.n_faces)?
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let to_usize = |v: Vec<u32>| v.into_iter().map(|i| i as usize).collect::<Vec<_>>();
    let landmark_indices = to_usize(cur.u32s(header.n_landmarks)?);
    let eval_anchor_indices = to_usize(cur.u32s(header.n_anchors)?);
    let offsets = cur.u32s(n + 1)?;
    let flat = cur.u32s(header.n_ring_entries)?;
    let closed = cur.take(n)?;

    let mut rings = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (offsets[i] as usize, offsets[i + 1] as usize);
        if a > b || b > flat.len() {
            return Err(Error::CorruptModel("ring offsets out of range".into()));
        }
        if flat[a..b].iter().any(|&j| j as usize >= n) {
            return Err(Error::CorruptModel("ring neighbor out of range".into()));
        }
        rings.push(Ring {
            neighbors: flat[a..b].to_vec(),
            closed: closed[i] != 0,
        });
    }
    if faces.iter().flatten().any(|&i| i as usize >= n) {
        return Err(Error::CorruptModel("face index out of range".into()));
    }

    let model = MorphableModel {
        mean_vertices,
        basis,
        singular_values,
        topology: Arc::new(Topology { faces, rings }),
        landmark_indices,
        eval_anchor_indices,
        config: ModelConfig {
            n_subdiv: header.n_subdiv,
            n_components: ny,
            seed: header.seed,
        },
    };
    model
        .validate()
        .map_err(|e| Error::CorruptModel(e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &MorphableModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_to_bytes(model)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MorphableModel> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
