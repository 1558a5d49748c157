//! Wavefront OBJ meshes: `v x y z` and `f a b c` records, 1-based indices.

use std::fmt::Write as _;
use std::path::Path;

use headsplat_core::Vec3;

use super::{parse_file, write_file};
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

pub fn emit_obj(vertices: &[Vec3], faces: &[[u32; 3]]) -> String {
    let mut s = String::with_capacity(32 * (vertices.len() + faces.len()));
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Reads vertices and faces. Polygons are fan-triangulated, `a/b/c` index
/// forms keep the position index and negative indices count from the end.
/// Other record types are ignored.
pub fn parse_obj(text: &str) -> Result<Mesh, String> {
    let mut mesh = Mesh::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format!("line {}: bad vertex coordinate", n + 1))?;
                if c.len() != 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", n + 1));
                }
                mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in it {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| format!("line {}: bad face index {t:?}", n + 1))?;
                    let nv = mesh.vertices.len() as i64;
                    let i = if i < 0 { nv + i } else { i - 1 };
                    if i < 0 || i >= nv {
                        return Err(format!("line {}: face index {t} out of range", n + 1));
                    }
                    idx.push(i as u32);
                }
                if idx.len() < 3 {
                    return Err(format!("line {}: face needs at least 3 vertices", n + 1));
                }
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if mesh.faces.is_empty() {
        return Err("mesh has no faces".into());
    }
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    parse_file(path, parse_obj)
}

pub fn write_obj(path: &Path, vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<()> {
    write_file(path, emit_obj(vertices, faces).as_bytes())
}
