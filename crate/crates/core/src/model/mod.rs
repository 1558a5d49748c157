//! Linear blendshape head model: posing, triangle frames, landmarks and
//! face adjacency.

mod procedural;

pub use procedural::{procedural_head, ProceduralHead};

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::math::{norm, normalize_vjp, Mat3, Quat, Vec3};

/// Triangles with area below this are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkEmbedding {
    pub face: u32,
    pub bary: [f64; 3],
}

/// Parametric head mesh. Bases are `3V x K`; row `3 * v + axis` holds the
/// offset of vertex `v` along `axis`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeModel {
    pub base_vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub shape_basis: DMatrix<f64>,
    pub expr_basis: DMatrix<f64>,
    pub neck_weights: Vec<f64>,
    pub neck_pivot: Vec3,
    pub landmarks: Vec<LandmarkEmbedding>,
    /// Per face corner UV coordinates in `[0, 1]^2`.
    pub uv_coords: Vec<[[f64; 2]; 3]>,
    /// Faces that belong to the facial region (source of the face mask).
    pub face_region: Vec<bool>,
}

impl BlendshapeModel {
    pub fn vertex_count(&self) -> usize {
        self.base_vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_basis.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertex_count();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= nv) {
                return Err(Error::Invalid(format!("face {fi} references a vertex >= {nv}")));
            }
        }
        check_len("shape basis rows", 3 * nv, self.shape_basis.nrows())?;
        check_len("expression basis rows", 3 * nv, self.expr_basis.nrows())?;
        check_len("neck weights", nv, self.neck_weights.len())?;
        check_len("uv coordinates", self.faces.len(), self.uv_coords.len())?;
        check_len("face region flags", self.faces.len(), self.face_region.len())?;
        if let Some(w) = self.neck_weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Invalid(format!("neck weight {w} outside [0, 1]")));
        }
        for (li, l) in self.landmarks.iter().enumerate() {
            if l.face as usize >= self.faces.len() {
                return Err(Error::Invalid(format!("landmark {li} references missing face")));
            }
            let sum: f64 = l.bary.iter().sum();
            if l.bary.iter().any(|b| *b < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("landmark {li} has invalid barycentrics")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pose {
    pub global_rotation: Quat,
    pub global_translation: [f64; 3],
    pub neck_rotation: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            global_rotation: Quat::IDENTITY,
            global_translation: [0.0; 3],
            neck_rotation: Quat::IDENTITY,
        }
    }
}

impl Pose {
    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.global_translation)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGrad {
    pub global_rotation: [f64; 4],
    pub global_translation: Vec3,
    pub neck_rotation: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshParamGrads {
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub pose: PoseGrad,
}

fn check_codes(model: &BlendshapeModel, beta: &[f64], psi: &[f64]) -> Result<()> {
    check_len("shape code", model.shape_dim(), beta.len())?;
    check_len("expression code", model.expr_dim(), psi.len())
}

fn unposed(model: &BlendshapeModel, beta: &[f64], psi: &[f64]) -> Vec<Vec3> {
    let nv = model.vertex_count();
    let mut offsets = DVector::<f64>::zeros(3 * nv);
    if !beta.is_empty() {
        offsets += &model.shape_basis * DVector::from_column_slice(beta);
    }
    if !psi.is_empty() {
        offsets += &model.expr_basis * DVector::from_column_slice(psi);
    }
    model
        .base_vertices
        .iter()
        .enumerate()
        .map(|(i, b)| b + Vec3::new(offsets[3 * i], offsets[3 * i + 1], offsets[3 * i + 2]))
        .collect()
}

/// `v = R_g * LBS_neck(base + B_shape beta + B_expr psi) + t_g`.
pub fn pose_mesh(model: &BlendshapeModel, beta: &[f64], psi: &[f64], pose: &Pose) -> Result<Vec<Vec3>> {
    check_codes(model, beta, psi)?;
    let rg = pose.global_rotation.to_matrix();
    let rn = pose.neck_rotation.to_matrix();
    let tg = pose.translation();
    let c = model.neck_pivot;
    Ok(unposed(model, beta, psi)
        .into_iter()
        .zip(&model.neck_weights)
        .map(|(x, &w)| {
            let y = if w == 0.0 { x } else { x * (1.0 - w) + (rn * (x - c) + c) * w };
            rg * y + tg
        })
        .collect())
}

/// Backpropagates per-vertex gradients to shape, expression and pose.
pub fn pose_mesh_backward(
    model: &BlendshapeModel,
    beta: &[f64],
    psi: &[f64],
    pose: &Pose,
    grad_vertices: &[Vec3],
) -> Result<MeshParamGrads> {
    check_codes(model, beta, psi)?;
    check_len("vertex gradients", model.vertex_count(), grad_vertices.len())?;
    let rg = pose.global_rotation.to_matrix();
    let rn = pose.neck_rotation.to_matrix();
    let c = model.neck_pivot;
    let xs = unposed(model, beta, psi);
    let mut g_tg = Vec3::zeros();
    let mut g_rg = Mat3::zeros();
    let mut g_rn = Mat3::zeros();
    let mut g_x = DVector::<f64>::zeros(3 * xs.len());
    for (i, ((x, &w), gv)) in xs.iter().zip(&model.neck_weights).zip(grad_vertices).enumerate() {
        let y = x * (1.0 - w) + (rn * (x - c) + c) * w;
        g_tg += gv;
        g_rg += gv * y.transpose();
        let gy = rg.transpose() * gv;
        g_rn += gy * (x - c).transpose() * w;
        let gx = gy * (1.0 - w) + rn.transpose() * gy * w;
        g_x[3 * i] = gx.x;
        g_x[3 * i + 1] = gx.y;
        g_x[3 * i + 2] = gx.z;
    }
    let gb = model.shape_basis.tr_mul(&g_x);
    let gp = model.expr_basis.tr_mul(&g_x);
    Ok(MeshParamGrads {
        beta: gb.iter().copied().collect(),
        psi: gp.iter().copied().collect(),
        pose: PoseGrad {
            global_rotation: pose.global_rotation.to_matrix_vjp(&g_rg),
            global_translation: g_tg,
            neck_rotation: pose.neck_rotation.to_matrix_vjp(&g_rn),
        },
    })
}

/// Local frame of a triangle: rotation columns `(t_u, t_v, n)`, anisotropic
/// scale `(s_u, s_v, min(s_u, s_v))` and centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleFrame {
    pub rotation: Mat3,
    pub scale: Vec3,
    pub centroid: Vec3,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TriangleFrameGrad {
    pub rotation: Mat3,
    pub scale: Vec3,
    pub centroid: Vec3,
}

pub fn triangle_frame(v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Option<TriangleFrame> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let c = e1.cross(&e2);
    let cn = norm(&c);
    let l1 = norm(&e1);
    if 0.5 * cn < DEGENERATE_AREA || l1 == 0.0 {
        return None;
    }
    let tu = e1 / l1;
    let n = c / cn;
    let tv = n.cross(&tu);
    let su = l1;
    let sv = cn / l1;
    Some(TriangleFrame {
        rotation: Mat3::from_columns(&[tu, tv, n]),
        scale: Vec3::new(su, sv, su.min(sv)),
        centroid: (v0 + v1 + v2) / 3.0,
    })
}

/// One frame per face; `None` marks a degenerate triangle whose splats are
/// skipped for this pose.
pub fn triangle_frames(vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<Option<TriangleFrame>> {
    faces
        .iter()
        .map(|f| {
            triangle_frame(
                &vertices[f[0] as usize],
                &vertices[f[1] as usize],
                &vertices[f[2] as usize],
            )
        })
        .collect()
}

/// Gradient of one triangle frame with respect to its three corners.
pub fn triangle_frame_vjp(v0: &Vec3, v1: &Vec3, v2: &Vec3, g: &TriangleFrameGrad) -> [Vec3; 3] {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let c = e1.cross(&e2);
    let cn = norm(&c);
    let l1 = norm(&e1);
    let tu = e1 / l1;
    let n = c / cn;
    let g_tu_col: Vec3 = g.rotation.column(0).into();
    let g_tv: Vec3 = g.rotation.column(1).into();
    let g_n_col: Vec3 = g.rotation.column(2).into();
    // t_v = n x t_u
    let g_n = g_n_col + tu.cross(&g_tv);
    let g_tu = g_tu_col + g_tv.cross(&n);
    let su = l1;
    let sv = cn / l1;
    let (mut g_su, mut g_sv) = (g.scale.x, g.scale.y);
    if su <= sv {
        g_su += g.scale.z;
    } else {
        g_sv += g.scale.z;
    }
    let g_c = normalize_vjp(&c, &g_n) + c / cn * (g_sv / l1);
    let g_l1 = g_su - g_sv * cn / (l1 * l1);
    let mut g_e1 = normalize_vjp(&e1, &g_tu) + e1 / l1 * g_l1;
    // c = e1 x e2
    g_e1 += e2.cross(&g_c);
    let g_e2 = g_c.cross(&e1);
    let third = g.centroid / 3.0;
    [-g_e1 - g_e2 + third, g_e1 + third, g_e2 + third]
}

/// Scatters per-face frame gradients onto the vertices.
pub fn triangle_frames_backward(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    grads: &[TriangleFrameGrad],
    out: &mut [Vec3],
) {
    for (f, g) in faces.iter().zip(grads) {
        if *g == TriangleFrameGrad::default() {
            continue;
        }
        let [a, b, c] = f.map(|i| i as usize);
        let gv = triangle_frame_vjp(&vertices[a], &vertices[b], &vertices[c], g);
        out[a] += gv[0];
        out[b] += gv[1];
        out[c] += gv[2];
    }
}

pub fn landmarks_3d(vertices: &[Vec3], model: &BlendshapeModel) -> Vec<Vec3> {
    model
        .landmarks
        .iter()
        .map(|l| {
            let f = model.faces[l.face as usize];
            vertices[f[0] as usize] * l.bary[0]
                + vertices[f[1] as usize] * l.bary[1]
                + vertices[f[2] as usize] * l.bary[2]
        })
        .collect()
}

pub fn landmarks_3d_backward(model: &BlendshapeModel, grads: &[Vec3], out: &mut [Vec3]) {
    for (l, g) in model.landmarks.iter().zip(grads) {
        let f = model.faces[l.face as usize];
        for k in 0..3 {
            out[f[k] as usize] += g * l.bary[k];
        }
    }
}

/// Dense symmetric face adjacency: `A[i][j]` holds iff face `j` is reachable
/// from face `i` in at most `degree` hops, two faces being neighbors when
/// they share a vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaceAdjacency {
    n: usize,
    bits: Vec<bool>,
}

impl FaceAdjacency {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.get(i, j))
    }
}

pub fn face_adjacency(faces: &[[u32; 3]], degree: usize) -> Result<FaceAdjacency> {
    if degree == 0 {
        return Err(Error::Invalid("adjacency degree must be >= 1".into()));
    }
    let n = faces.len();
    let nv = faces.iter().flat_map(|f| f.iter()).map(|&v| v as usize + 1).max().unwrap_or(0);
    let mut vertex_faces: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            vertex_faces[v as usize].push(fi);
        }
    }
    let direct: Vec<Vec<usize>> = faces
        .iter()
        .map(|f| {
            let mut nb: Vec<usize> = f.iter().flat_map(|&v| vertex_faces[v as usize].iter().copied()).collect();
            nb.sort_unstable();
            nb.dedup();
            nb
        })
        .collect();
    let mut bits = vec![false; n * n];
    let mut hops = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for start in 0..n {
        let mut touched = Vec::new();
        hops[start] = 0;
        touched.push(start);
        queue.push_back(start);
        while let Some(f) = queue.pop_front() {
            bits[start * n + f] = true;
            if hops[f] == degree {
                continue;
            }
            for &g in &direct[f] {
                if hops[g] == usize::MAX {
                    hops[g] = hops[f] + 1;
                    touched.push(g);
                    queue.push_back(g);
                }
            }
        }
        for f in touched {
            hops[f] = usize::MAX;
        }
    }
    Ok(FaceAdjacency { n, bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn axis_triangle() -> [Vec3; 3] {
        [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)]
    }

    #[test]
    fn axis_aligned_frame() {
        let [a, b, c] = axis_triangle();
        let f = triangle_frame(&a, &b, &c).unwrap();
        assert_eq!(f.rotation, Mat3::identity());
        assert_eq!(f.scale, Vec3::new(1.0, 1.0, 1.0));
        assert!((f.centroid - Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn scaled_frame() {
        let [a, b, c] = axis_triangle().map(|v| v * 2.0);
        let f = triangle_frame(&a, &b, &c).unwrap();
        assert_eq!(f.rotation, Mat3::identity());
        assert_eq!(f.scale, Vec3::new(2.0, 2.0, 2.0));
        assert!((f.centroid - Vec3::new(2.0 / 3.0, 2.0 / 3.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rotated_frame_matches_recomputation() {
        let q = Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let tri = [Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.2, -0.3, 0.5), Vec3::new(0.4, 0.9, -0.2)];
        let f = triangle_frame(&tri[0], &tri[1], &tri[2]).unwrap();
        let r = tri.map(|v| q * v);
        let g = triangle_frame(&r[0], &r[1], &r[2]).unwrap();
        assert!((g.rotation - q * f.rotation).abs().max() < 1e-12);
        assert!((g.scale - f.scale).abs().max() < 1e-12);
        assert!((g.centroid - q * f.centroid).abs().max() < 1e-12);
    }

    #[test]
    fn degenerate_triangle_is_marked() {
        let v = [Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let frames = triangle_frames(&v, &[[0, 1, 2]]);
        assert!(frames[0].is_none());
    }

    #[test]
    fn frame_vjp_matches_finite_differences() {
        let tri = [Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.2, -0.3, 0.5), Vec3::new(0.4, 0.9, -0.2)];
        let g = TriangleFrameGrad {
            rotation: Mat3::new(0.3, -0.2, 0.5, 0.1, 0.7, -0.4, -0.6, 0.2, 0.9),
            scale: Vec3::new(0.4, -0.8, 1.3),
            centroid: Vec3::new(-0.2, 0.5, 0.3),
        };
        let loss = |t: &[Vec3; 3]| {
            let f = triangle_frame(&t[0], &t[1], &t[2]).unwrap();
            g.rotation.component_mul(&f.rotation).sum() + g.scale.dot(&f.scale) + g.centroid.dot(&f.centroid)
        };
        let an = triangle_frame_vjp(&tri[0], &tri[1], &tri[2], &g);
        let h = 1e-6;
        for v in 0..3 {
            for k in 0..3 {
                let mut p = tri;
                let mut m = tri;
                p[v][k] += h;
                m[v][k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - an[v][k]).abs() < 1e-7, "v{v} k{k}: fd {fd} an {}", an[v][k]);
            }
        }
    }

    #[test]
    fn adjacency_on_edge_pair() {
        let a = face_adjacency(&[[0, 1, 2], [2, 1, 3]], 1).unwrap();
        assert!(a.get(0, 1) && a.get(1, 0) && a.get(0, 0));
    }

    #[test]
    fn adjacency_rejects_zero_degree() {
        assert!(face_adjacency(&[[0, 1, 2]], 0).is_err());
    }

    #[test]
    fn strip_adjacency_by_degree() {
        let faces = alloc::vec![[0u32, 1, 2], [2, 3, 4], [4, 5, 6]];
        let a1 = face_adjacency(&faces, 1).unwrap();
        assert!(!a1.get(0, 2));
        let a2 = face_adjacency(&faces, 2).unwrap();
        assert!(a2.get(0, 2));
    }
}
