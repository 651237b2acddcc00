//! OBJ and binary little-endian PLY mesh files.
//!
//! Writers emit positions, faces and per-vertex normals. Readers keep only
//! positions and faces; normals are recomputed from the one-rings.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::vertex_normals;
use crate::model::{HeadMesh, Point, Topology};
use crate::raster::{read_bytes, write_bytes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => Err(Error::InvalidConfig(format!(
                "unsupported mesh extension: {} (expected .obj or .ply)",
                path.display()
            ))),
        }
    }
}

pub fn mesh_to_obj(mesh: &HeadMesh) -> Result<String> {
    let normals = vertex_normals(mesh)?;
    let mut s = String::with_capacity(mesh.len() * 96);
    s.push_str("# headfit mesh\n");
    for p in &mesh.vertices {
        writeln!(s, "v {} {} {}", p.x, p.y, p.z).unwrap();
    }
    for n in &normals {
        writeln!(s, "vn {} {} {}", n.x, n.y, n.z).unwrap();
    }
    for f in &mesh.topology.faces {
        let [a, b, c] = f.map(|i| i + 1);
        writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}").unwrap();
    }
    Ok(s)
}

pub fn mesh_from_obj(text: &str) -> Result<HeadMesh> {
    let mut vertices: Vec<Point> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let bad = |what: &str| Error::CorruptFile(format!("obj line {}: {what}", lineno + 1));
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("bad vertex"))?;
                if c.len() != 3 {
                    return Err(bad("vertex needs 3 coordinates"));
                }
                vertices.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let raw: i64 = t
                            .split('/')
                            .next()
                            .unwrap_or("")
                            .parse()
                            .map_err(|_| bad("bad face index"))?;
                        let resolved = if raw < 0 {
                            vertices.len() as i64 + raw
                        } else {
                            raw - 1
                        };
                        if resolved < 0 {
                            return Err(bad("face index out of range"));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    build_mesh(vertices, faces)
}

fn build_mesh(vertices: Vec<Point>, faces: Vec<[u32; 3]>) -> Result<HeadMesh> {
    if vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let topology = Topology::from_faces(vertices.len(), faces)?;
    HeadMesh::new(vertices, Arc::new(topology))
}

pub fn mesh_to_ply(mesh: &HeadMesh) -> Result<Vec<u8>> {
    let normals = vertex_normals(mesh)?;
    let header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment headfit mesh, units mm\n\
         element vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property double nx\nproperty double ny\nproperty double nz\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.len(),
        mesh.topology.faces.len()
    );
    let mut out = header.into_bytes();
    for (p, n) in mesh.vertices.iter().zip(&normals) {
        for v in p.iter().chain(n.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for f in &mesh.topology.faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Reads a binary little-endian PLY with `x y z` vertex properties and a
/// `vertex_indices` face list.
pub fn mesh_from_ply(bytes: &[u8]) -> Result<HeadMesh> {
    let bad = |s: &str| Error::CorruptFile(format!("ply: {s}"));
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header not utf-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }

    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<(String, Scalar)> = Vec::new();
    let mut face_list: Option<(Scalar, Scalar)> = None;
    let mut current = "";
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(bad("only binary_little_endian is supported"))
            }
            ["element", "vertex", n] => {
                current = "vertex";
                n_vertices = n.parse().map_err(|_| bad("bad vertex count"))?;
            }
            ["element", "face", n] => {
                current = "face";
                n_faces = n.parse().map_err(|_| bad("bad face count"))?;
            }
            ["element", ..] => current = "other",
            ["property", "list", cnt, idx, _] if current == "face" => {
                face_list = Some((
                    Scalar::parse(cnt).ok_or_else(|| bad("bad list type"))?,
                    Scalar::parse(idx).ok_or_else(|| bad("bad list type"))?,
                ));
            }
            ["property", ty, name] if current == "vertex" => {
                vertex_props.push((
                    name.to_string(),
                    Scalar::parse(ty).ok_or_else(|| bad("bad property type"))?,
                ));
            }
            _ => {}
        }
    }
    let offset_of = |name: &str| -> Result<(usize, Scalar)> {
        let mut off = 0;
        for (n, ty) in &vertex_props {
            if n == name {
                return Ok((off, *ty));
            }
            off += ty.size();
        }
        Err(bad("vertex lacks x/y/z"))
    };
    let stride: usize = vertex_props.iter().map(|(_, t)| t.size()).sum();
    let coords = [offset_of("x")?, offset_of("y")?, offset_of("z")?];
    let (cnt_ty, idx_ty) = face_list.ok_or_else(|| bad("missing face list"))?;

    let mut pos = end + 11;
    let body = |pos: usize, n: usize| bytes.get(pos..pos + n).ok_or_else(|| bad("truncated body"));
    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let rec = body(pos, stride)?;
        let c = coords.map(|(o, t)| t.read(&rec[o..]));
        vertices.push(Vector3::new(c[0], c[1], c[2]));
        pos += stride;
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let count = cnt_ty.read(body(pos, cnt_ty.size())?) as usize;
        pos += cnt_ty.size();
        let mut idx = Vec::with_capacity(count);
        for _ in 0..count {
            let v = idx_ty.read(body(pos, idx_ty.size())?);
            if v < 0.0 {
                return Err(bad("negative face index"));
            }
            idx.push(v as u32);
            pos += idx_ty.size();
        }
        if count < 3 {
            return Err(bad("face with fewer than 3 vertices"));
        }
        for k in 1..count - 1 {
            faces.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    build_mesh(vertices, faces)
}

/// Writes OBJ or PLY according to the file extension.
pub fn save_mesh(mesh: &HeadMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match MeshFormat::from_path(path)? {
        MeshFormat::Obj => mesh_to_obj(mesh)?.into_bytes(),
        MeshFormat::Ply => mesh_to_ply(mesh)?,
    };
    write_bytes(path, &bytes)
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<HeadMesh> {
    let path = path.as_ref();
    let format = MeshFormat::from_path(path)?;
    let bytes = read_bytes(path)?;
    match format {
        MeshFormat::Obj => mesh_from_obj(
            std::str::from_utf8(&bytes)
                .map_err(|_| Error::CorruptFile("obj is not utf-8".into()))?,
        ),
        MeshFormat::Ply => mesh_from_ply(&bytes),
    }
}
