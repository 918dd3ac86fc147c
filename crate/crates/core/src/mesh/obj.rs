use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Mesh;
use crate::error::{Error, Result};

/// Parses `v` and `f` records; polygons are fan-triangulated, other records ignored.
pub fn parse_obj(text: &str, source: &str) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse { path: source.to_string(), line, msg };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let coords: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(lineno, format!("bad vertex coordinate: {e}")))?;
                if coords.len() != 3 {
                    return Err(err(lineno, "vertex needs three coordinates".into()));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = tok
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        match head.parse::<i64>() {
                            Ok(v) if v >= 1 => Ok(v as usize - 1),
                            _ => Err(err(lineno, format!("bad face index `{t}`"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(lineno, "face needs at least three indices".into()));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                    face_lines.push(lineno);
                }
            }
            _ => {}
        }
    }
    for (f, &lineno) in faces.iter().zip(&face_lines) {
        if let Some(&bad) = f.iter().find(|&&i| i >= vertices.len()) {
            return Err(err(
                lineno,
                format!("face index {} out of range for {} vertices", bad + 1, vertices.len()),
            ));
        }
    }
    Mesh::new(vertices, faces)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, &path.display().to_string())
}

pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(mesh.num_vertices() * 40 + mesh.num_faces() * 24);
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_obj(mesh)).map_err(|e| Error::io(path, e))
}
