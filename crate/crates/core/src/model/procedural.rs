//! Built-in head-like test model generated from a latitude/longitude grid.
//!
//! The mesh is an ellipsoid with nose, brow, chin and cheek relief, facing
//! `-z` with `+y` up, about 15 cm wide. Shape modes are smooth global
//! deformations, expression modes are localized around mouth, brows and eyes.
//! A 68-point landmark layout (jaw 17, brows 10, nose 9, eyes 12, mouth 20)
//! is embedded by barycentric coordinates.

use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::DMatrix;

use super::{BlendshapeModel, LandmarkEmbedding};
use crate::math::{acos, atan2, cos, exp, floor, normalize, sin, Vec3};

const SEMI_AXES: [f64; 3] = [0.075, 0.105, 0.095];

/// Grid resolution of the generated head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProceduralHead {
    /// Latitude bands from crown to neck (>= 8).
    pub n_lat: usize,
    /// Longitude segments around the head (>= 12).
    pub n_lon: usize,
}

impl Default for ProceduralHead {
    fn default() -> Self {
        ProceduralHead { n_lat: 20, n_lon: 32 }
    }
}

/// The default built-in model (610 vertices, 1216 faces).
pub fn procedural_head() -> BlendshapeModel {
    ProceduralHead::default().build()
}

fn wrap(phi: f64) -> f64 {
    let mut p = phi % (2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    } else if p < -PI {
        p += 2.0 * PI;
    }
    p
}

fn bump(theta: f64, phi: f64, t0: f64, p0: f64, st: f64, sp: f64) -> f64 {
    let dt = (theta - t0) / st;
    let dp = wrap(phi - p0) / sp;
    exp(-0.5 * (dt * dt + dp * dp))
}

fn direction(theta: f64, phi: f64) -> Vec3 {
    Vec3::new(sin(theta) * sin(phi), cos(theta), -sin(theta) * cos(phi))
}

fn relief(theta: f64, phi: f64) -> f64 {
    0.022 * bump(theta, phi, 0.56 * PI, 0.0, 0.07 * PI, 0.14)
        + 0.006 * bump(theta, phi, 0.40 * PI, 0.0, 0.04 * PI, 0.55)
        + 0.008 * bump(theta, phi, 0.80 * PI, 0.0, 0.05 * PI, 0.35)
        - 0.006 * bump(theta, phi, 0.46 * PI, 0.33, 0.035 * PI, 0.12)
        - 0.006 * bump(theta, phi, 0.46 * PI, -0.33, 0.035 * PI, 0.12)
        + 0.004 * bump(theta, phi, 0.58 * PI, 0.5, 0.07 * PI, 0.25)
        + 0.004 * bump(theta, phi, 0.58 * PI, -0.5, 0.07 * PI, 0.25)
}

fn base_point(theta: f64, phi: f64) -> Vec3 {
    let d = direction(theta, phi);
    Vec3::new(SEMI_AXES[0] * d.x, SEMI_AXES[1] * d.y, SEMI_AXES[2] * d.z) + d * relief(theta, phi)
}

fn shape_mode(k: usize, theta: f64, phi: f64) -> Vec3 {
    let d = direction(theta, phi);
    match k {
        0 => Vec3::new(0.006 * d.x, 0.0, 0.0),
        1 => Vec3::new(0.0, 0.006 * d.y, 0.0),
        2 => Vec3::new(0.0, 0.0, 0.006 * d.z),
        3 => Vec3::new(0.005 * d.x * (-d.y).max(0.0), 0.0, 0.0),
        4 => d * (0.006 * bump(theta, phi, 0.56 * PI, 0.0, 0.08 * PI, 0.18)),
        5 => d * (0.005 * bump(theta, phi, 0.80 * PI, 0.0, 0.06 * PI, 0.4)),
        6 => {
            d * (0.004
                * (bump(theta, phi, 0.58 * PI, 0.5, 0.08 * PI, 0.3)
                    + bump(theta, phi, 0.58 * PI, -0.5, 0.08 * PI, 0.3)))
        }
        7 => d * (0.005 * bump(theta, phi, 0.30 * PI, 0.0, 0.12 * PI, 0.6)),
        8 => Vec3::new(0.0, 0.0, 0.005 * d.z.max(0.0)),
        _ => Vec3::new(0.004 * d.x * d.y, 0.0, 0.0),
    }
}

fn expr_mode(k: usize, theta: f64, phi: f64) -> Vec3 {
    let d = direction(theta, phi);
    let mouth = |p0: f64, sp: f64| bump(theta, phi, 0.68 * PI, p0, 0.05 * PI, sp);
    match k {
        0 => Vec3::new(0.0, -0.008, -0.002) * bump(theta, phi, 0.77 * PI, 0.0, 0.09 * PI, 0.6),
        1 => {
            let l = mouth(0.3, 0.15);
            let r = mouth(-0.3, 0.15);
            Vec3::new(0.004 * (l - r), 0.003 * (l + r), 0.0)
        }
        2 => Vec3::new(0.0, 0.0, -0.005 * mouth(0.0, 0.2)),
        3 => Vec3::new(0.0, 0.004, 0.0) * bump(theta, phi, 0.38 * PI, 0.0, 0.05 * PI, 0.5),
        4 => {
            let l = bump(theta, phi, 0.39 * PI, 0.2, 0.04 * PI, 0.15);
            let r = bump(theta, phi, 0.39 * PI, -0.2, 0.04 * PI, 0.15);
            Vec3::new(-0.003 * (l - r), -0.001 * (l + r), 0.0)
        }
        5 => {
            d * (0.004
                * (bump(theta, phi, 0.60 * PI, 0.45, 0.07 * PI, 0.25)
                    + bump(theta, phi, 0.60 * PI, -0.45, 0.07 * PI, 0.25)))
        }
        6 => Vec3::new(0.0, -0.003, 0.0) * bump(theta, phi, 0.44 * PI, 0.33, 0.03 * PI, 0.12),
        7 => Vec3::new(0.0, -0.003, 0.0) * bump(theta, phi, 0.44 * PI, -0.33, 0.03 * PI, 0.12),
        8 => Vec3::new(-0.004, 0.0, 0.0) * mouth(0.0, 0.35),
        _ => Vec3::new(0.004, 0.0, 0.0) * mouth(0.0, 0.35),
    }
}

const N_SHAPE: usize = 10;
const N_EXPR: usize = 10;

/// Landmark locations as (polar angle from the crown, azimuth from the
/// front) in the iBUG-68 order.
fn landmark_angles() -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(68);
    // jaw, from one ear to the other
    for k in 0..17 {
        let phi = -1.2 + 2.4 * k as f64 / 16.0;
        let r = phi / 1.2;
        out.push((PI * (0.52 + 0.28 * (1.0 - r * r)), phi));
    }
    // brows
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let t = k as f64 / 4.0;
            let phi = if side < 0.0 { -0.6 + 0.45 * t } else { 0.15 + 0.45 * t };
            let arch = 0.015 * (1.0 - (2.0 * t - 1.0) * (2.0 * t - 1.0));
            out.push((PI * (0.385 - arch), phi));
        }
    }
    // nose bridge and base
    for k in 0..4 {
        out.push((PI * (0.43 + 0.04 * k as f64), 0.0));
    }
    for k in 0..5 {
        let phi = -0.12 + 0.06 * k as f64;
        out.push((PI * (0.60 - 0.01 * (1.0 - (phi / 0.12) * (phi / 0.12))), phi));
    }
    // eyes
    for center in [-0.33, 0.33] {
        for k in 0..6 {
            let a = PI * k as f64 / 3.0;
            out.push((PI * (0.455 - 0.012 * sin(a)), center - 0.11 * cos(a)));
        }
    }
    // outer and inner lips
    for k in 0..12 {
        let a = 2.0 * PI * k as f64 / 12.0;
        out.push((PI * (0.68 - 0.03 * sin(a)), -0.28 * cos(a)));
    }
    for k in 0..8 {
        let a = 2.0 * PI * k as f64 / 8.0;
        out.push((PI * (0.68 - 0.012 * sin(a)), -0.18 * cos(a)));
    }
    out
}

impl ProceduralHead {
    pub fn build(&self) -> BlendshapeModel {
        let (n_lat, n_lon) = (self.n_lat.max(8), self.n_lon.max(12));
        // parameter (theta, phi) of each vertex
        let mut params = Vec::new();
        params.push((0.0, 0.0));
        for i in 1..n_lat {
            for j in 0..n_lon {
                params.push((PI * i as f64 / n_lat as f64, 2.0 * PI * j as f64 / n_lon as f64));
            }
        }
        params.push((PI, 0.0));
        let nv = params.len();
        let ring = |i: usize, j: usize| -> u32 {
            if i == 0 {
                0
            } else if i == n_lat {
                (nv - 1) as u32
            } else {
                (1 + (i - 1) * n_lon + j % n_lon) as u32
            }
        };
        let base_vertices: Vec<Vec3> = params.iter().map(|&(t, p)| base_point(t, p)).collect();

        // faces; (face index of lower-left triangle, upper-right triangle) per cell
        let mut faces = Vec::new();
        let mut uv = Vec::new();
        let mut cell_faces = Vec::new();
        let uv_of = |i: usize, j: usize| [j as f64 / n_lon as f64, i as f64 / n_lat as f64];
        for i in 0..n_lat {
            for j in 0..n_lon {
                let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
                let mut pair = [usize::MAX; 2];
                if i != 0 {
                    pair[0] = faces.len();
                    faces.push([a, c, b]);
                    uv.push([uv_of(i, j), uv_of(i + 1, j), uv_of(i, j + 1)]);
                }
                if i != n_lat - 1 {
                    pair[1] = faces.len();
                    faces.push([b, c, d]);
                    uv.push([uv_of(i, j + 1), uv_of(i + 1, j), uv_of(i + 1, j + 1)]);
                }
                cell_faces.push(pair);
            }
        }
        // orient outward
        for (fi, f) in faces.iter_mut().enumerate() {
            let [a, b, c] = f.map(|v| base_vertices[v as usize]);
            let n = (b - a).cross(&(c - a));
            if n.dot(&(a + b + c)) < 0.0 {
                f.swap(1, 2);
                uv[fi].swap(1, 2);
            }
        }

        let face_region = faces
            .iter()
            .map(|f| {
                let c = f.iter().map(|&v| base_vertices[v as usize]).sum::<Vec3>() / 3.0;
                let d = normalize(&Vec3::new(c.x / SEMI_AXES[0], c.y / SEMI_AXES[1], c.z / SEMI_AXES[2]));
                let theta = acos(d.y.clamp(-1.0, 1.0));
                let phi = atan2(d.x, -d.z);
                (0.3 * PI..=0.86 * PI).contains(&theta) && phi.abs() <= 1.25
            })
            .collect();

        let mut shape_basis = DMatrix::zeros(3 * nv, N_SHAPE);
        let mut expr_basis = DMatrix::zeros(3 * nv, N_EXPR);
        for (v, &(t, p)) in params.iter().enumerate() {
            for k in 0..N_SHAPE {
                let o = shape_mode(k, t, p);
                for a in 0..3 {
                    shape_basis[(3 * v + a, k)] = o[a];
                }
            }
            for k in 0..N_EXPR {
                let o = expr_mode(k, t, p);
                for a in 0..3 {
                    expr_basis[(3 * v + a, k)] = o[a];
                }
            }
        }

        let neck_weights = base_vertices
            .iter()
            .map(|v| {
                let s = ((v.y + 0.095) / 0.04).clamp(0.0, 1.0);
                s * s * (3.0 - 2.0 * s)
            })
            .collect();

        let landmarks = landmark_angles()
            .into_iter()
            .map(|(theta, phi)| {
                let s = theta / PI * n_lat as f64;
                let phi = if phi < 0.0 { phi + 2.0 * PI } else { phi };
                let t = phi / (2.0 * PI) * n_lon as f64;
                let i = (floor(s) as usize).clamp(1, n_lat - 2);
                let j = floor(t) as usize % n_lon;
                let fs = s - i as f64;
                let ft = t - floor(t);
                let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
                let cell = cell_faces[i * n_lon + j];
                let (face, weights) = if fs + ft <= 1.0 {
                    (cell[0], [(a, 1.0 - fs - ft), (c, fs), (b, ft)])
                } else {
                    (cell[1], [(b, 1.0 - fs), (c, 1.0 - ft), (d, fs + ft - 1.0)])
                };
                let f = faces[face];
                let bary = f.map(|v| weights.iter().find(|(id, _)| *id == v).map(|x| x.1).unwrap_or(0.0));
                LandmarkEmbedding { face: face as u32, bary }
            })
            .collect();

        BlendshapeModel {
            base_vertices,
            faces,
            shape_basis,
            expr_basis,
            neck_weights,
            neck_pivot: Vec3::new(0.0, -0.09, 0.01),
            landmarks,
            uv_coords: uv,
            face_region,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_valid() {
        let m = procedural_head();
        m.validate().unwrap();
        assert!((500..=2000).contains(&m.vertex_count()));
        assert_eq!(m.landmarks.len(), 68);
        assert!(m.face_region.iter().filter(|f| **f).count() > 50);
    }

    #[test]
    fn faces_point_outward() {
        let m = procedural_head();
        for f in &m.faces {
            let [a, b, c] = f.map(|v| m.base_vertices[v as usize]);
            assert!((b - a).cross(&(c - a)).dot(&(a + b + c)) > 0.0);
        }
    }

    #[test]
    fn landmarks_sit_on_the_front() {
        let m = procedural_head();
        let lm = super::super::landmarks_3d(&m.base_vertices, &m);
        for p in lm {
            assert!(p.z < 0.0, "landmark behind the head: {p:?}");
        }
    }
}
