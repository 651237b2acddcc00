//! Z-buffered software rendering of normal maps and landmark maps.
//!
//! Pixel `(u, v)` covers `[u, u+1) × [v, v+1)` and is sampled at its center
//! `(u + 0.5, v + 0.5)`. Stored normals are model-frame (world) unit normals,
//! interpolated perspective-correctly from the vertex normals and
//! renormalized. Depth is camera-frame `z` in mm.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_to_pixel, vertex_normals, CameraPose, Intrinsics, Z_MIN};
use crate::model::{HeadMesh, MorphableModel, NUM_LANDMARKS};

/// Landmarks this far behind the z-buffer surface still count as visible, mm.
pub const DEFAULT_OCCLUSION_TOLERANCE: f64 = 2.0;

/// Rows per rasterization band. Fixed, so output never depends on the
/// worker count.
const BAND_ROWS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, zero where the mask is false.
    pub normals: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
    /// Camera depth in mm, `+inf` where the mask is false.
    pub depth: Vec<f64>,
}

impl NormalMap {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            normals: vec![Vector3::zeros(); n],
            mask: vec![false; n],
            depth: vec![f64::INFINITY; n],
        }
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn normal(&self, u: usize, v: usize) -> Vector3<f64> {
        self.normals[self.index(u, v)]
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkDetection {
    pub channel: usize,
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

/// Sparse landmark detections, at most one per channel.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkMap {
    pub detections: Vec<LandmarkDetection>,
}

impl LandmarkMap {
    pub fn visible(&self) -> impl Iterator<Item = &LandmarkDetection> {
        self.detections.iter().filter(|d| d.visible)
    }

    pub fn visible_count(&self) -> usize {
        self.visible().count()
    }

    /// Checks the channel and bounds invariants against an image size.
    pub fn validate(&self, num_channels: usize, width: usize, height: usize) -> Result<()> {
        let mut seen = vec![false; num_channels];
        for d in &self.detections {
            if d.channel >= num_channels {
                return Err(Error::DimensionMismatch {
                    what: "landmark channel bound",
                    expected: num_channels,
                    actual: d.channel + 1,
                });
            }
            if std::mem::replace(&mut seen[d.channel], true) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate detection for landmark channel {}",
                    d.channel
                )));
            }
            if d.visible
                && !(d.u >= 0.0 && d.u < width as f64 && d.v >= 0.0 && d.v < height as f64)
            {
                return Err(Error::InvalidConfig(format!(
                    "visible landmark {} at ({}, {}) outside {width}x{height}",
                    d.channel, d.u, d.v
                )));
            }
        }
        Ok(())
    }

    /// Dense form: one channel per landmark, 1.0 at the pixel containing each
    /// visible detection.
    pub fn to_dense(&self, num_channels: usize, width: usize, height: usize) -> DenseLandmarks {
        let mut dense = DenseLandmarks::zeros(num_channels, width, height);
        for d in self.visible() {
            let (u, v) = (d.u.floor(), d.v.floor());
            if d.channel < num_channels && u >= 0.0 && v >= 0.0 {
                let (u, v) = (u as usize, v as usize);
                if u < width && v < height {
                    dense.set(d.channel, u, v, 1.0);
                }
            }
        }
        dense
    }
}

/// Multi-channel landmark heat image, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLandmarks {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DenseLandmarks {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    #[inline]
    fn offset(&self, c: usize, u: usize, v: usize) -> usize {
        (c * self.height + v) * self.width + u
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[self.offset(c, u, v)]
    }

    pub fn set(&mut self, c: usize, u: usize, v: usize, value: f64) {
        let o = self.offset(c, u, v);
        self.data[o] = value;
    }
}

/// Peak value below which a dense channel counts as absent.
pub const LANDMARK_THRESHOLD: f64 = 0.5;

/// Recovers sub-pixel detections from a dense landmark image.
///
/// Per channel the global maximum is located (ties go to the smallest
/// `(v, u)`); if it reaches [`LANDMARK_THRESHOLD`] the value-weighted centroid
/// of its 8-connected component above threshold is reported at pixel-center
/// coordinates.
// Negated comparisons below also reject NaN.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn extract_landmarks(dense: &DenseLandmarks) -> LandmarkMap {
    let (w, h) = (dense.width, dense.height);
    let mut detections = Vec::with_capacity(dense.channels);
    for c in 0..dense.channels {
        let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
        for v in 0..h {
            for u in 0..w {
                let val = dense.get(c, u, v);
                if val > best.0 {
                    best = (val, u, v);
                }
            }
        }
        if !(best.0 >= LANDMARK_THRESHOLD) {
            detections.push(LandmarkDetection {
                channel: c,
                u: 0.0,
                v: 0.0,
                visible: false,
            });
            continue;
        }
        let mut visited = vec![false; w * h];
        let mut stack = vec![(best.1, best.2)];
        visited[best.2 * w + best.1] = true;
        let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
        while let Some((u, v)) = stack.pop() {
            let val = dense.get(c, u, v);
            sw += val;
            su += val * (u as f64 + 0.5);
            sv += val * (v as f64 + 0.5);
            for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    let (nu, nv) = (u as i64 + du, v as i64 + dv);
                    if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                        continue;
                    }
                    let (nu, nv) = (nu as usize, nv as usize);
                    if !visited[nv * w + nu] && dense.get(c, nu, nv) >= LANDMARK_THRESHOLD {
                        visited[nv * w + nu] = true;
                        stack.push((nu, nv));
                    }
                }
            }
        }
        detections.push(LandmarkDetection {
            channel: c,
            u: su / sw,
            v: sv / sw,
            visible: true,
        });
    }
    LandmarkMap { detections }
}

struct ScreenTriangle {
    verts: [usize; 3],
    screen: [Vector2<f64>; 3],
    inv_z: [f64; 3],
    area: f64,
    rows: (usize, usize),
    cols: (usize, usize),
}

/// Renders the normal map of a posed mesh.
// Negated comparisons below also reject NaN.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn render_normal_map(
    mesh: &HeadMesh,
    pose: &CameraPose,
    k: &Intrinsics,
    width: usize,
    height: usize,
) -> Result<NormalMap> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig("image size must be non-zero".into()));
    }
    let normals = vertex_normals(mesh)?;
    let frame = pose.frame();
    let cam: Vec<Vector3<f64>> = mesh.vertices.iter().map(|p| frame.to_camera(p)).collect();

    let mut tris = Vec::new();
    for f in &mesh.topology.faces {
        let vi = [f[0] as usize, f[1] as usize, f[2] as usize];
        let c = [cam[vi[0]], cam[vi[1]], cam[vi[2]]];
        if c.iter().any(|p| p.z <= Z_MIN) {
            continue;
        }
        let face_normal = (c[1] - c[0]).cross(&(c[2] - c[0]));
        if face_normal.dot(&(c[0] + c[1] + c[2])) >= 0.0 {
            continue;
        }
        let screen = c.map(|p| camera_to_pixel(&p, k));
        let area = edge(&screen[0], &screen[1], &screen[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let (min_u, max_u) = min_max(screen.map(|s| s.x));
        let (min_v, max_v) = min_max(screen.map(|s| s.y));
        // Pixel centers inside [min, max]: ceil(min - 0.5) ..= floor(max - 0.5).
        let (Some(cols), Some(rows)) = (
            pixel_span(min_u, max_u, width),
            pixel_span(min_v, max_v, height),
        ) else {
            continue;
        };
        tris.push(ScreenTriangle {
            verts: vi,
            screen,
            inv_z: c.map(|p| 1.0 / p.z),
            area,
            rows,
            cols,
        });
    }

    let mut map = NormalMap::empty(width, height);
    let band_len = BAND_ROWS * width;
    map.normals
        .par_chunks_mut(band_len)
        .zip(map.mask.par_chunks_mut(band_len))
        .zip(map.depth.par_chunks_mut(band_len))
        .enumerate()
        .for_each(|(band, ((nrm, mask), depth))| {
            let row0 = band * BAND_ROWS;
            let row1 = row0 + nrm.len() / width;
            for t in &tris {
                let (r0, r1) = (t.rows.0.max(row0), (t.rows.1 + 1).min(row1));
                for v in r0..r1 {
                    for u in t.cols.0..=t.cols.1 {
                        let s = Vector2::new(u as f64 + 0.5, v as f64 + 0.5);
                        let l = [
                            edge(&t.screen[1], &t.screen[2], &s) / t.area,
                            edge(&t.screen[2], &t.screen[0], &s) / t.area,
                            edge(&t.screen[0], &t.screen[1], &s) / t.area,
                        ];
                        if l.iter().any(|&x| x < 0.0) {
                            continue;
                        }
                        let inv_z = l[0] * t.inv_z[0] + l[1] * t.inv_z[1] + l[2] * t.inv_z[2];
                        let z = 1.0 / inv_z;
                        let idx = (v - row0) * width + u;
                        if !(z < depth[idx]) {
                            continue;
                        }
                        let mut n = Vector3::zeros();
                        for c in 0..3 {
                            n += normals[t.verts[c]] * (l[c] * t.inv_z[c] * z);
                        }
                        depth[idx] = z;
                        nrm[idx] = n.normalize();
                        mask[idx] = true;
                    }
                }
            }
        });

    if map.coverage() == 0 {
        return Err(Error::EmptyRender);
    }
    Ok(map)
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

fn min_max(v: [f64; 3]) -> (f64, f64) {
    (v[0].min(v[1]).min(v[2]), v[0].max(v[1]).max(v[2]))
}

fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let a = (lo - 0.5).ceil().max(0.0);
    let b = (hi - 0.5).floor().min(n as f64 - 1.0);
    (a <= b).then_some((a as usize, b as usize))
}

/// Projects the model landmarks and tests them against the depth buffer.
pub fn landmarks_from_depth(
    depth_map: &NormalMap,
    mesh: &HeadMesh,
    model: &MorphableModel,
    pose: &CameraPose,
    k: &Intrinsics,
    occlusion_tolerance: f64,
) -> LandmarkMap {
    let frame = pose.frame();
    let (w, h) = (depth_map.width as f64, depth_map.height as f64);
    let detections = model
        .landmark_indices
        .iter()
        .enumerate()
        .map(|(channel, &vi)| {
            let c = frame.to_camera(&mesh.vertices[vi]);
            if c.z <= Z_MIN {
                return LandmarkDetection {
                    channel,
                    u: 0.0,
                    v: 0.0,
                    visible: false,
                };
            }
            let a = camera_to_pixel(&c, k);
            let (u, v) = (a.x, a.y);
            let inside = u >= 0.0 && u < w && v >= 0.0 && v < h;
            let visible = inside && {
                let idx = depth_map.index(u.floor() as usize, v.floor() as usize);
                c.z <= depth_map.depth[idx] + occlusion_tolerance
            };
            LandmarkDetection {
                channel,
                u,
                v,
                visible,
            }
        })
        .collect();
    LandmarkMap { detections }
}

/// Renders the sparse landmark map of a posed head.
pub fn render_landmark_map(
    mesh: &HeadMesh,
    model: &MorphableModel,
    pose: &CameraPose,
    k: &Intrinsics,
    width: usize,
    height: usize,
) -> Result<LandmarkMap> {
    let map = render_normal_map(mesh, pose, k, width, height)?;
    Ok(landmarks_from_depth(
        &map,
        mesh,
        model,
        pose,
        k,
        DEFAULT_OCCLUSION_TOLERANCE,
    ))
}

/// Renders both maps with a single rasterization pass.
pub fn render_views(
    mesh: &HeadMesh,
    model: &MorphableModel,
    pose: &CameraPose,
    k: &Intrinsics,
    width: usize,
    height: usize,
) -> Result<(NormalMap, LandmarkMap)> {
    let map = render_normal_map(mesh, pose, k, width, height)?;
    let lmk = landmarks_from_depth(&map, mesh, model, pose, k, DEFAULT_OCCLUSION_TOLERANCE);
    Ok((map, lmk))
}

// ---------------------------------------------------------------------------
// .nmap: magic "NMAP\0\0\0\x01" | u64 LE header length | JSON header |
//        f32 planes nx, ny, nz, depth (row-major) | u8 mask

const NMAP_MAGIC: &[u8; 8] = b"NMAP\0\0\0\x01";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalMapHeader {
    format_version: String,
    width: usize,
    height: usize,
    normal_frame: String,
    depth_units: String,
    planes: Vec<String>,
}

pub fn normal_map_to_bytes(map: &NormalMap) -> Result<Vec<u8>> {
    let header = NormalMapHeader {
        format_version: "1.0.0".into(),
        width: map.width,
        height: map.height,
        normal_frame: "world".into(),
        depth_units: "mm".into(),
        planes: ["nx", "ny", "nz", "depth"].map(String::from).to_vec(),
    };
    let header = serde_json::to_vec(&header)?;
    let n = map.width * map.height;
    let mut out = Vec::with_capacity(16 + header.len() + 17 * n);
    out.extend_from_slice(NMAP_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for c in 0..3 {
        for nrm in &map.normals {
            out.extend_from_slice(&(nrm[c] as f32).to_le_bytes());
        }
    }
    for d in &map.depth {
        out.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    out.extend(map.mask.iter().map(|&m| m as u8));
    Ok(out)
}

/// Parses a `.nmap`. Masked-in normals are renormalized in f64.
pub fn normal_map_from_bytes(bytes: &[u8]) -> Result<NormalMap> {
    let corrupt = |s: &str| Error::CorruptFile(format!("normal map: {s}"));
    if bytes.len() < 16 || &bytes[..8] != NMAP_MAGIC {
        return Err(corrupt("magic number mismatch"));
    }
    let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hl))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: NormalMapHeader =
        serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.normal_frame != "world" {
        return Err(corrupt("unsupported normal frame"));
    }
    let n = header.width * header.height;
    let payload = &bytes[16 + hl..];
    if payload.len() != 17 * n {
        return Err(corrupt("payload length does not match header dimensions"));
    }
    let plane = |p: usize| -> Vec<f64> {
        payload[4 * n * p..4 * n * (p + 1)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    let (nx, ny, nz, depth) = (plane(0), plane(1), plane(2), plane(3));
    let mask: Vec<bool> = payload[16 * n..].iter().map(|&b| b != 0).collect();
    let mut map = NormalMap::empty(header.width, header.height);
    for i in 0..n {
        if mask[i] {
            let v = Vector3::new(nx[i], ny[i], nz[i]);
            let norm = v.norm();
            if !(norm > 0.5 && depth[i].is_finite()) {
                return Err(corrupt("masked-in pixel without a valid normal"));
            }
            map.normals[i] = v / norm;
            map.depth[i] = depth[i];
            map.mask[i] = true;
        }
    }
    Ok(map)
}

pub fn save_normal_map(map: &NormalMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &normal_map_to_bytes(map)?)
}

pub fn load_normal_map(path: impl AsRef<Path>) -> Result<NormalMap> {
    normal_map_from_bytes(&read_bytes(path.as_ref())?)
}

pub fn save_landmarks(map: &LandmarkMap, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(map)?;
    bytes.push(b'\n');
    write_bytes(path.as_ref(), &bytes)
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkMap> {
    let path = path.as_ref();
    let map: LandmarkMap = serde_json::from_slice(&read_bytes(path)?)?;
    map.validate(NUM_LANDMARKS, usize::MAX, usize::MAX)?;
    Ok(map)
}

/// 8-bit visualization: `c = round(255·(n + 1)/2)`, black outside the mask.
pub fn normal_map_to_rgb(map: &NormalMap) -> image::RgbImage {
    image::RgbImage::from_fn(map.width as u32, map.height as u32, |u, v| {
        let i = map.index(u as usize, v as usize);
        if !map.mask[i] {
            return image::Rgb([0, 0, 0]);
        }
        let n = map.normals[i];
        image::Rgb([0, 1, 2].map(|c| (255.0 * (n[c] + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8))
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}
