//! Z-buffer rasterization of the posed mesh and landmark projection.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Result};
use crate::image::Image;
use crate::math::{ceil, floor, normalize, normalize_vjp, Vec3};
use crate::render::Camera;

pub const NO_FACE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct MeshBuffers {
    pub width: usize,
    pub height: usize,
    /// Camera z, `+inf` where empty.
    pub depth: Vec<f64>,
    /// Camera-frame face normal, zero where empty.
    pub normal: Vec<Vec3>,
    pub coverage: Vec<bool>,
    /// 1 where the visible face is flagged as face region.
    pub face_mask: Image,
    /// Index of the visible face or [`NO_FACE`].
    pub face_id: Vec<u32>,
}

impl MeshBuffers {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        MeshBuffers {
            width,
            height,
            depth: vec![f64::INFINITY; n],
            normal: vec![Vec3::zeros(); n],
            coverage: vec![false; n],
            face_mask: Image::new(width, height, 1),
            face_id: vec![NO_FACE; n],
        }
    }

    pub fn covered(&self) -> usize {
        self.coverage.iter().filter(|c| **c).count()
    }

    pub fn depth_image(&self) -> Image {
        let data = self.depth.iter().map(|d| if d.is_finite() { *d } else { 0.0 }).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn normal_image(&self) -> Image {
        let data = self.normal.iter().flat_map(|n| [n.x, n.y, n.z]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

/// Rasterizes triangles with pixel-center sampling. Depth comes from the
/// perspective-correct interpolation of the camera-space triangle, the
/// normal is the geometric normal `(v1 - v0) x (v2 - v0)`. Ties keep the
/// lower face index. Triangles that cross the near plane are ray cast.
pub fn rasterize_mesh(vertices: &[Vec3], faces: &[[u32; 3]], face_region: &[bool], camera: &Camera) -> Result<MeshBuffers> {
    camera.validate()?;
    check_len("face region flags", faces.len(), face_region.len())?;
    let (w, h) = (camera.width, camera.height);
    let mut out = MeshBuffers::empty(w, h);
    let cam: Vec<Vec3> = vertices.iter().map(|v| camera.world_to_camera.apply(v)).collect();
    let f = camera.focal();
    let [cx, cy] = camera.principal_point();
    let rays: Vec<Vec3> = (0..w * h)
        .map(|p| camera.ray_camera((p % w) as f64 + 0.5, (p / w) as f64 + 0.5))
        .collect();

    for (fi, face) in faces.iter().enumerate() {
        let [a, b, c] = face.map(|i| cam[i as usize]);
        let nrm = (b - a).cross(&(c - a));
        if nrm.norm() == 0.0 {
            continue;
        }
        let n_unit = normalize(&nrm);
        let in_front = [a, b, c].map(|p| p.z > camera.near);
        let mut write = |p: usize, z: f64| {
            if z < out.depth[p] && z > camera.near && z < camera.far {
                out.depth[p] = z;
                out.normal[p] = n_unit;
                out.coverage[p] = true;
                out.face_id[p] = fi as u32;
                out.face_mask.data[p] = if face_region[fi] { 1.0 } else { 0.0 };
            }
        };
        if in_front.iter().all(|x| *x) {
            let proj = [a, b, c].map(|p| [cx + f * p.x / p.z, cy - f * p.y / p.z]);
            let area = edge(&proj[0], &proj[1], &proj[2]);
            if area == 0.0 {
                continue;
            }
            let lo_x = proj.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let hi_x = proj.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let lo_y = proj.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let hi_y = proj.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            if hi_x < 0.0 || hi_y < 0.0 || lo_x > w as f64 || lo_y > h as f64 {
                continue;
            }
            let x0 = ceil(lo_x - 0.5).max(0.0) as usize;
            let y0 = ceil(lo_y - 0.5).max(0.0) as usize;
            let x1 = (floor(hi_x - 0.5).min(w as f64 - 1.0)).max(-1.0);
            let y1 = (floor(hi_y - 0.5).min(h as f64 - 1.0)).max(-1.0);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            let (x1, y1) = (x1 as usize, y1 as usize);
            let inv = 1.0 / area;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = [x as f64 + 0.5, y as f64 + 0.5];
                    let b0 = edge(&proj[1], &proj[2], &p) * inv;
                    let b1 = edge(&proj[2], &proj[0], &p) * inv;
                    let b2 = edge(&proj[0], &proj[1], &p) * inv;
                    if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                        continue;
                    }
                    let z = 1.0 / (b0 / a.z + b1 / b.z + b2 / c.z);
                    write(y * w + x, z);
                }
            }
        } else if in_front.iter().any(|x| *x) {
            for (p, d) in rays.iter().enumerate() {
                if let Some(t) = ray_triangle(&Vec3::zeros(), d, &a, &b, &c) {
                    write(p, t * d.z);
                }
            }
        }
    }
    Ok(out)
}

fn edge(a: &[f64; 2], b: &[f64; 2], p: &[f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Möller-Trumbore ray/triangle test, two-sided. Returns the ray parameter.
pub fn ray_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Pixel coordinates of world points; `None` at or behind the near plane.
pub fn project_points(points: &[Vec3], camera: &Camera) -> Vec<Option<[f64; 2]>> {
    points.iter().map(|p| camera.project(p)).collect()
}

/// Gradients on world points given gradients on their pixel coordinates.
pub fn project_points_backward(points: &[Vec3], camera: &Camera, grads: &[Option<[f64; 2]>]) -> Result<Vec<Vec3>> {
    check_len("projection gradients", points.len(), grads.len())?;
    Ok(points
        .iter()
        .zip(grads)
        .map(|(p, g)| match g {
            Some(g) => camera.project_vjp(p, *g),
            None => Vec3::zeros(),
        })
        .collect())
}

/// Gradients on mesh vertices from gradients on the depth and normal
/// buffers, holding the visible face of every pixel fixed.
pub fn mesh_buffers_backward(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    camera: &Camera,
    buffers: &MeshBuffers,
    grad_depth: &[f64],
    grad_normal: &[Vec3],
) -> Result<Vec<Vec3>> {
    let n = buffers.width * buffers.height;
    check_len("mesh depth gradient", n, grad_depth.len())?;
    check_len("mesh normal gradient", n, grad_normal.len())?;
    let r = camera.rotation();
    let rt = r.transpose();
    let mut out = vec![Vec3::zeros(); vertices.len()];
    for p in 0..n {
        let fi = buffers.face_id[p];
        if fi == NO_FACE || (grad_depth[p] == 0.0 && grad_normal[p] == Vec3::zeros()) {
            continue;
        }
        let face = faces[fi as usize];
        let [a, b, c] = face.map(|i| camera.world_to_camera.apply(&vertices[i as usize]));
        let e1 = b - a;
        let e2 = c - a;
        let cr = e1.cross(&e2);
        let d = camera.ray_camera((p % buffers.width) as f64 + 0.5, (p / buffers.width) as f64 + 0.5);
        // z = d.z * (cr . a) / (cr . d)
        let num = cr.dot(&a);
        let den = cr.dot(&d);
        let gz = grad_depth[p];
        let g_num = gz * d.z / den;
        let g_den = -gz * d.z * num / (den * den);
        let mut g_cr = a * g_num + d * g_den;
        let mut g_a = cr * g_num;
        g_cr += normalize_vjp(&cr, &grad_normal[p]);
        let g_e1 = e2.cross(&g_cr);
        let g_e2 = g_cr.cross(&e1);
        g_a -= g_e1 + g_e2;
        let gs = [g_a, g_e1, g_e2];
        for (k, &vi) in face.iter().enumerate() {
            out[vi as usize] += rt * gs[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big_triangle(z: f64) -> Vec<Vec3> {
        // wound so the normal faces the camera
        alloc::vec![Vec3::new(-10.0, -10.0, z), Vec3::new(0.0, 10.0, z), Vec3::new(10.0, -10.0, z)]
    }

    #[test]
    fn flat_triangle_depth_and_normal() {
        let cam = Camera::new(16, 16);
        let out = rasterize_mesh(&big_triangle(2.0), &[[0, 1, 2]], &[true], &cam).unwrap();
        assert_eq!(out.covered(), 256);
        for p in 0..256 {
            assert!((out.depth[p] - 2.0).abs() < 1e-12);
            assert!((out.normal[p] - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
            assert_eq!(out.face_mask.data[p], 1.0);
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let cam = Camera::new(16, 16);
        let mut v = big_triangle(2.0);
        v.extend(big_triangle(1.0));
        let out = rasterize_mesh(&v, &[[0, 1, 2], [3, 4, 5]], &[false, true], &cam).unwrap();
        assert!(out.face_id.iter().all(|f| *f == 1));
        assert!(out.depth.iter().all(|d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn behind_camera_is_empty() {
        let cam = Camera::new(16, 16);
        let out = rasterize_mesh(&big_triangle(-2.0), &[[0, 1, 2]], &[true], &cam).unwrap();
        assert_eq!(out.covered(), 0);
    }

    #[test]
    fn near_crossing_triangle_is_ray_cast() {
        let cam = Camera::new(16, 16);
        let v = alloc::vec![Vec3::new(-10.0, -10.0, -1.0), Vec3::new(0.0, 10.0, 3.0), Vec3::new(10.0, -10.0, 3.0)];
        let out = rasterize_mesh(&v, &[[0, 1, 2]], &[true], &cam).unwrap();
        assert!(out.covered() > 0);
    }

    #[test]
    fn projection_of_axis_and_top_edge() {
        let cam = Camera::new(512, 512);
        let c = project_points(&[Vec3::new(0.0, 0.0, 3.0)], &cam)[0].unwrap();
        assert_eq!(c, [256.0, 256.0]);
        let z = 2.0;
        let top = Vec3::new(0.0, z * (7.15f64).to_radians().tan(), z);
        let p = cam.project(&top).unwrap();
        assert!((p[1] - 0.0).abs() < 1e-9 && (p[0] - 256.0).abs() < 1e-12);
        assert!(cam.project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut cam = Camera::new(64, 48);
        cam.world_to_camera.rotation = crate::math::Quat::from_axis_angle(&Vec3::new(0.2, 1.0, 0.1), 0.3).to_matrix();
        cam.world_to_camera.translation = Vec3::new(0.1, -0.2, 0.5);
        let p = Vec3::new(0.03, 0.05, 1.2);
        let g = [0.7, -1.3];
        let an = cam.project_vjp(&p, g);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let fa = cam.project(&a).unwrap();
            let fb = cam.project(&b).unwrap();
            let fd = (g[0] * (fa[0] - fb[0]) + g[1] * (fa[1] - fb[1])) / (2.0 * h);
            assert!((fd - an[k]).abs() <= 1e-5 * an[k].abs().max(1.0));
        }
    }

    #[test]
    fn mesh_depth_gradient_matches_finite_differences() {
        let cam = Camera::new(16, 16);
        let v = alloc::vec![Vec3::new(-1.0, -1.0, 2.0), Vec3::new(0.1, 1.0, 2.3), Vec3::new(1.0, -0.9, 1.8)];
        let faces = [[0u32, 1, 2]];
        let buf = rasterize_mesh(&v, &faces, &[true], &cam).unwrap();
        let p = 8 * 16 + 8;
        let mut gd = alloc::vec![0.0; 256];
        let mut gn = alloc::vec![Vec3::zeros(); 256];
        gd[p] = 1.0;
        gn[p] = Vec3::new(0.3, -0.5, 0.8);
        let an = mesh_buffers_backward(&v, &faces, &cam, &buf, &gd, &gn).unwrap();
        let f = |v: &[Vec3]| {
            let b = rasterize_mesh(v, &faces, &[true], &cam).unwrap();
            b.depth[p] + b.normal[p].dot(&gn[p])
        };
        let h = 1e-6;
        for i in 0..3 {
            for k in 0..3 {
                let mut a = v.clone();
                let mut b = v.clone();
                a[i][k] += h;
                b[i][k] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - an[i][k]).abs() < 1e-6, "{i} {k} {fd} {}", an[i][k]);
            }
        }
    }
}
