//! Text container for a [`BlendshapeModel`].
//!
//! ```text
//! HSMODEL 1
//! counts V F K E L
//! pivot x y z
//! V lines: x y z neck_weight
//! F lines: a b c region u0 v0 u1 v1 u2 v2
//! L lines: face b0 b1 b2
//! 3V rows of K shape-basis floats
//! 3V rows of E expression-basis floats
//! ```
//!
//! Whitespace between tokens is free-form and `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use headsplat_core::model::{BlendshapeModel, LandmarkEmbedding};
use headsplat_core::Vec3;
use nalgebra::DMatrix;

use super::{parse_file, write_file, Tokens};
use crate::error::{CliError, Result};

pub const MAGIC: &str = "HSMODEL";
pub const VERSION: u32 = 1;

pub fn parse_model(text: &str) -> Result<BlendshapeModel, String> {
    let mut t = Tokens::new(text);
    t.expect(MAGIC)?;
    let version: u32 = t.next("version")?;
    if version != VERSION {
        return Err(format!("unsupported model version {version} (this build reads {VERSION})"));
    }
    t.expect("counts")?;
    let nv: usize = t.next("vertex count")?;
    let nf: usize = t.next("face count")?;
    let k: usize = t.next("shape dimension")?;
    let e: usize = t.next("expression dimension")?;
    let nl: usize = t.next("landmark count")?;
    t.expect("pivot")?;
    let neck_pivot = Vec3::new(t.next("pivot")?, t.next("pivot")?, t.next("pivot")?);

    let mut base_vertices = Vec::with_capacity(nv);
    let mut neck_weights = Vec::with_capacity(nv);
    for _ in 0..nv {
        base_vertices.push(Vec3::new(t.next("vertex")?, t.next("vertex")?, t.next("vertex")?));
        neck_weights.push(t.next("neck weight")?);
    }
    let mut faces = Vec::with_capacity(nf);
    let mut face_region = Vec::with_capacity(nf);
    let mut uv_coords = Vec::with_capacity(nf);
    for _ in 0..nf {
        faces.push([t.next("face index")?, t.next("face index")?, t.next("face index")?]);
        let region: u8 = t.next("face region flag")?;
        face_region.push(region != 0);
        let mut uv = [[0.0; 2]; 3];
        for c in uv.iter_mut().flatten() {
            *c = t.next("uv coordinate")?;
        }
        uv_coords.push(uv);
    }
    let mut landmarks = Vec::with_capacity(nl);
    for _ in 0..nl {
        landmarks.push(LandmarkEmbedding {
            face: t.next("landmark face")?,
            bary: [t.next("barycentric")?, t.next("barycentric")?, t.next("barycentric")?],
        });
    }
    let mut read_basis = |cols: usize, what: &str| -> Result<DMatrix<f64>, String> {
        let mut m = DMatrix::zeros(3 * nv, cols);
        for r in 0..3 * nv {
            for c in 0..cols {
                m[(r, c)] = t.next(what)?;
            }
        }
        Ok(m)
    };
    let shape_basis = read_basis(k, "shape basis entry")?;
    let expr_basis = read_basis(e, "expression basis entry")?;
    t.finish()?;
    let model = BlendshapeModel {
        base_vertices,
        faces,
        shape_basis,
        expr_basis,
        neck_weights,
        neck_pivot,
        landmarks,
        uv_coords,
        face_region,
    };
    model.validate().map_err(|e| e.to_string())?;
    Ok(model)
}

pub fn emit_model(model: &BlendshapeModel) -> String {
    let mut s = String::new();
    let (nv, nf) = (model.vertex_count(), model.face_count());
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(
        s,
        "counts {nv} {nf} {} {} {}",
        model.shape_dim(),
        model.expr_dim(),
        model.landmarks.len()
    );
    let p = model.neck_pivot;
    let _ = writeln!(s, "pivot {} {} {}", p.x, p.y, p.z);
    let _ = writeln!(s, "# vertices: x y z neck_weight");
    for (v, w) in model.base_vertices.iter().zip(&model.neck_weights) {
        let _ = writeln!(s, "{} {} {} {w}", v.x, v.y, v.z);
    }
    let _ = writeln!(s, "# faces: a b c region u0 v0 u1 v1 u2 v2");
    for ((f, r), uv) in model.faces.iter().zip(&model.face_region).zip(&model.uv_coords) {
        let _ = write!(s, "{} {} {} {}", f[0], f[1], f[2], u8::from(*r));
        for c in uv.iter().flatten() {
            let _ = write!(s, " {c}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "# landmarks: face b0 b1 b2");
    for l in &model.landmarks {
        let _ = writeln!(s, "{} {} {} {}", l.face, l.bary[0], l.bary[1], l.bary[2]);
    }
    for (name, m) in [("shape", &model.shape_basis), ("expression", &model.expr_basis)] {
        let _ = writeln!(s, "# {name} basis");
        for r in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    }
    s
}

pub fn read_model(path: &Path) -> Result<BlendshapeModel> {
    parse_file(path, parse_model)
}

pub fn write_model(path: &Path, model: &BlendshapeModel) -> Result<()> {
    model
        .validate()
        .map_err(|e| CliError::validation(format!("refusing to write invalid model: {e}")))?;
    write_file(path, emit_model(model).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use headsplat_core::model::procedural_head;

    #[test]
    fn round_trip_is_exact() {
        let m = procedural_head();
        let back = parse_model(&emit_model(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_other_versions() {
        let text = emit_model(&procedural_head()).replacen("HSMODEL 1", "HSMODEL 9", 1);
        assert!(parse_model(&text).unwrap_err().contains("version 9"));
    }

    #[test]
    fn truncated_file_is_reported() {
        let text = emit_model(&procedural_head());
        let cut = &text[..text.len() / 2];
        assert!(parse_model(cut).unwrap_err().contains("end of file"));
    }
}
