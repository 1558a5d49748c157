//! Landmark text tables. `#` starts a comment.
//!
//! Image landmarks, one per line: `index x y` in pixels. Indices missing
//! from the file are unobserved.
//!
//! Evaluation pairs, one per line, either `index sx sy sz` (a model
//! landmark and its scan position in millimeters) or `mx my mz sx sy sz`
//! (an explicit mesh point in mesh units and its scan position). All rows
//! of a table use the same form.

use std::fmt::Write as _;
use std::path::Path;

use headsplat_core::eval::LandmarkPair;
use headsplat_core::Vec3;

use super::{parse_file, write_file};
use crate::error::Result;

fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, t)| !t.is_empty())
}

fn num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T, String> {
    tok.parse().map_err(|_| format!("line {line}: {tok:?} is not a number"))
}

pub fn emit_image_landmarks(points: &[Option<[f64; 2]>]) -> String {
    let mut s = String::from("# index x y (pixels)\n");
    for (i, p) in points.iter().enumerate() {
        if let Some([x, y]) = p {
            let _ = writeln!(s, "{i} {x} {y}");
        }
    }
    s
}

/// `count` is the model's landmark count.
pub fn parse_image_landmarks(text: &str, count: usize) -> Result<Vec<Option<[f64; 2]>>, String> {
    let mut out = vec![None; count];
    for (line, t) in rows(text) {
        if t.len() != 3 {
            return Err(format!("line {line}: expected `index x y`, found {} columns", t.len()));
        }
        let i: usize = num(t[0], line)?;
        if i >= count {
            return Err(format!("line {line}: landmark index {i} out of range (model has {count})"));
        }
        if out[i].is_some() {
            return Err(format!("line {line}: landmark {i} listed twice"));
        }
        let p = [num(t[1], line)?, num(t[2], line)?];
        if !p.iter().all(|v: &f64| v.is_finite()) {
            return Err(format!("line {line}: non-finite coordinate"));
        }
        out[i] = Some(p);
    }
    Ok(out)
}

/// One row of an evaluation landmark table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LandmarkRow {
    Indexed { index: usize, scan: Vec3 },
    Explicit(LandmarkPair),
}

pub fn parse_landmark_table(text: &str) -> Result<Vec<LandmarkRow>, String> {
    let mut out = Vec::new();
    let mut width = None;
    for (line, t) in rows(text) {
        if *width.get_or_insert(t.len()) != t.len() {
            return Err(format!("line {line}: mixed 4- and 6-column rows"));
        }
        let f = |k: usize| num::<f64>(t[k], line);
        out.push(match t.len() {
            4 => LandmarkRow::Indexed {
                index: num(t[0], line)?,
                scan: Vec3::new(f(1)?, f(2)?, f(3)?),
            },
            6 => LandmarkRow::Explicit(LandmarkPair {
                mesh: Vec3::new(f(0)?, f(1)?, f(2)?),
                scan: Vec3::new(f(3)?, f(4)?, f(5)?),
            }),
            n => return Err(format!("line {line}: expected 4 or 6 columns, found {n}")),
        });
    }
    if out.is_empty() {
        return Err("landmark table is empty".into());
    }
    Ok(out)
}

pub fn emit_indexed_table(rows: &[(usize, Vec3)]) -> String {
    let mut s = String::from("# index scan_x scan_y scan_z (mm)\n");
    for (i, p) in rows {
        let _ = writeln!(s, "{i} {} {} {}", p.x, p.y, p.z);
    }
    s
}

/// Resolves indexed rows against landmark positions on the mesh.
pub fn resolve_pairs(rows: &[LandmarkRow], mesh_landmarks: Option<&[Vec3]>) -> Result<Vec<LandmarkPair>, String> {
    rows.iter()
        .map(|r| match *r {
            LandmarkRow::Explicit(p) => Ok(p),
            LandmarkRow::Indexed { index, scan } => {
                let lm = mesh_landmarks.ok_or("indexed landmark rows need a model with landmark embeddings")?;
                let mesh = *lm
                    .get(index)
                    .ok_or_else(|| format!("landmark index {index} out of range (model has {})", lm.len()))?;
                Ok(LandmarkPair { mesh, scan })
            }
        })
        .collect()
}

pub fn read_image_landmarks(path: &Path, count: usize) -> Result<Vec<Option<[f64; 2]>>> {
    parse_file(path, |t| parse_image_landmarks(t, count))
}

pub fn write_image_landmarks(path: &Path, points: &[Option<[f64; 2]>]) -> Result<()> {
    write_file(path, emit_image_landmarks(points).as_bytes())
}

pub fn read_landmark_table(path: &Path) -> Result<Vec<LandmarkRow>> {
    parse_file(path, parse_landmark_table)
}
