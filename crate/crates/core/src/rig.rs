//! Gaussian prototypes bound to mesh triangles, and their densification.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use rand_core::RngCore;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Error, Result};
use crate::math::{exp, ln, logistic, norm, Mat3, Quat, Vec3};
use crate::model::{TriangleFrame, TriangleFrameGrad};

/// Maximum number of splats a face may own.
pub const MAX_PER_FACE: usize = 6;

/// Number of scalar parameters per prototype (parent index excluded).
pub const PROTOTYPE_PARAMS: usize = 13;

/// Canonical (parent-relative) parameters of one Gaussian surfel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianPrototype {
    pub parent_face: u32,
    /// Offset in parent-scale units; world offset is `R_p (s_p * offset)`.
    pub offset: Vec3,
    pub rotation: Quat,
    /// Log of the canonical tangent scales `(s_cu, s_cv)`.
    pub log_scale: [f64; 2],
    pub opacity_logit: f64,
    pub albedo: Vec3,
}

impl GaussianPrototype {
    pub fn opacity(&self) -> f64 {
        logistic(self.opacity_logit)
    }

    /// `[offset(3), quat w x y z (4), log_scale(2), opacity_logit, albedo(3)]`.
    pub fn params(&self) -> [f64; PROTOTYPE_PARAMS] {
        let o = &self.offset;
        let q = &self.rotation.0;
        let a = &self.albedo;
        [
            o.x,
            o.y,
            o.z,
            q[0],
            q[1],
            q[2],
            q[3],
            self.log_scale[0],
            self.log_scale[1],
            self.opacity_logit,
            a.x,
            a.y,
            a.z,
        ]
    }

    pub fn from_params(parent_face: u32, p: &[f64; PROTOTYPE_PARAMS]) -> Self {
        GaussianPrototype {
            parent_face,
            offset: Vec3::new(p[0], p[1], p[2]),
            rotation: Quat([p[3], p[4], p[5], p[6]]),
            log_scale: [p[7], p[8]],
            opacity_logit: p[9],
            albedo: Vec3::new(p[10], p[11], p[12]),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrototypeGrad {
    pub offset: Vec3,
    pub rotation: [f64; 4],
    pub log_scale: [f64; 2],
    pub opacity_logit: f64,
    pub albedo: Vec3,
}

impl PrototypeGrad {
    pub fn params(&self) -> [f64; PROTOTYPE_PARAMS] {
        let o = &self.offset;
        let q = &self.rotation;
        let a = &self.albedo;
        [
            o.x,
            o.y,
            o.z,
            q[0],
            q[1],
            q[2],
            q[3],
            self.log_scale[0],
            self.log_scale[1],
            self.opacity_logit,
            a.x,
            a.y,
            a.z,
        ]
    }
}

/// A surfel in world space. `rotation` columns are `(t_u, t_v, t_w)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldSplat {
    pub center: Vec3,
    pub rotation: Mat3,
    pub scales: [f64; 2],
    pub opacity: f64,
    pub albedo: Vec3,
}

impl WorldSplat {
    pub fn tangent_u(&self) -> Vec3 {
        self.rotation.column(0).into()
    }
    pub fn tangent_v(&self) -> Vec3 {
        self.rotation.column(1).into()
    }
    pub fn normal(&self) -> Vec3 {
        self.rotation.column(2).into()
    }
}

/// Gradient on every field of a [`WorldSplat`]; `rotation` holds the
/// partials of each column independently.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WorldSplatGrad {
    pub center: Vec3,
    pub rotation: Mat3,
    pub scales: [f64; 2],
    pub opacity: f64,
    pub albedo: Vec3,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Binding {
    pub splats: Vec<WorldSplat>,
    /// Prototype index of each world splat.
    pub source: Vec<usize>,
    /// Prototypes skipped because their parent frame is invalid.
    pub skipped: Vec<usize>,
}

pub fn bind_splat(proto: &GaussianPrototype, frame: &TriangleFrame) -> WorldSplat {
    let rc = proto.rotation.to_matrix();
    WorldSplat {
        center: frame.rotation * frame.scale.component_mul(&proto.offset) + frame.centroid,
        rotation: frame.rotation * rc,
        scales: [
            frame.scale.x * exp(proto.log_scale[0]),
            frame.scale.y * exp(proto.log_scale[1]),
        ],
        opacity: proto.opacity(),
        albedo: proto.albedo,
    }
}

/// Places every prototype on its parent triangle:
/// `R = R_p R_c`, `mu = R_p (s_p * mu_c) + mu_p`, `S = S_p S_c`.
pub fn bind_splats(prototypes: &[GaussianPrototype], frames: &[Option<TriangleFrame>]) -> Binding {
    let mut out = Binding::default();
    for (i, p) in prototypes.iter().enumerate() {
        match frames.get(p.parent_face as usize).copied().flatten() {
            Some(frame) => {
                out.splats.push(bind_splat(p, &frame));
                out.source.push(i);
            }
            None => out.skipped.push(i),
        }
    }
    out
}

/// Backpropagates world-splat gradients to prototypes (indexed like
/// `prototypes`) and to the per-face frames.
pub fn bind_splats_backward(
    prototypes: &[GaussianPrototype],
    frames: &[Option<TriangleFrame>],
    binding: &Binding,
    grads: &[WorldSplatGrad],
) -> Result<(Vec<PrototypeGrad>, Vec<TriangleFrameGrad>)> {
    check_len("world splat gradients", binding.splats.len(), grads.len())?;
    let mut gp = vec![PrototypeGrad::default(); prototypes.len()];
    let mut gf = vec![TriangleFrameGrad::default(); frames.len()];
    for (&src, g) in binding.source.iter().zip(grads) {
        let p = &prototypes[src];
        let face = p.parent_face as usize;
        let frame = frames[face].as_ref().ok_or_else(|| Error::Invalid("binding out of date".into()))?;
        let rc = p.rotation.to_matrix();
        let out = &mut gp[src];
        let ff = &mut gf[face];

        // center
        let local = frame.rotation.transpose() * g.center;
        let scaled = frame.scale.component_mul(&p.offset);
        out.offset += frame.scale.component_mul(&local);
        ff.rotation += g.center * scaled.transpose();
        ff.scale += p.offset.component_mul(&local);
        ff.centroid += g.center;

        // rotation
        ff.rotation += g.rotation * rc.transpose();
        let g_rc = frame.rotation.transpose() * g.rotation;
        let gq = p.rotation.to_matrix_vjp(&g_rc);
        for k in 0..4 {
            out.rotation[k] += gq[k];
        }

        // scales
        for k in 0..2 {
            let e = exp(p.log_scale[k]);
            out.log_scale[k] += g.scales[k] * frame.scale[k] * e;
            ff.scale[k] += g.scales[k] * e;
        }

        let s = p.opacity();
        out.opacity_logit += g.opacity * s * (1.0 - s);
        out.albedo += g.albedo;
    }
    Ok((gp, gf))
}

/// Canonical log-scales giving a world radius of half the mean edge of the
/// parent triangle.
pub fn reference_log_scales(vertices: &[Vec3], faces: &[[u32; 3]], frames: &[Option<TriangleFrame>]) -> Vec<[f64; 2]> {
    faces
        .iter()
        .zip(frames)
        .map(|(f, frame)| match frame {
            Some(fr) => {
                let [a, b, c] = f.map(|v| vertices[v as usize]);
                let mean_edge = (norm(&(b - a)) + norm(&(c - b)) + norm(&(a - c))) / 3.0;
                [ln(0.5 * mean_edge / fr.scale.x), ln(0.5 * mean_edge / fr.scale.y)]
            }
            None => [0.0, 0.0],
        })
        .collect()
}

/// One prototype per face at the centroid, aligned with the face, opacity
/// 0.5 and mid-gray albedo.
pub fn init_prototypes(reference: &[[f64; 2]]) -> Vec<GaussianPrototype> {
    reference
        .iter()
        .enumerate()
        .map(|(face, ls)| GaussianPrototype {
            parent_face: face as u32,
            offset: Vec3::zeros(),
            rotation: Quat::IDENTITY,
            log_scale: *ls,
            opacity_logit: 0.0,
            albedo: Vec3::new(0.5, 0.5, 0.5),
        })
        .collect()
}

pub fn face_counts(prototypes: &[GaussianPrototype], n_faces: usize) -> Vec<usize> {
    let mut c = vec![0; n_faces];
    for p in prototypes {
        c[p.parent_face as usize] += 1;
    }
    c
}

/// Sliding-window opacity and positional-gradient history per prototype.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DensifyStats {
    window: usize,
    opacity: Vec<VecDeque<f64>>,
    grad: Vec<VecDeque<f64>>,
}

impl DensifyStats {
    pub fn new(n_prototypes: usize, window: usize) -> Self {
        let window = window.max(1);
        DensifyStats {
            window,
            opacity: vec![VecDeque::with_capacity(window); n_prototypes],
            grad: vec![VecDeque::with_capacity(window); n_prototypes],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Records one iteration; the gradient magnitude is the Euclidean norm
    /// of the loss gradient with respect to the world-space center.
    pub fn update(&mut self, opacities: &[f64], positional_grads: &[Vec3]) -> Result<()> {
        check_len("opacity samples", self.len(), opacities.len())?;
        check_len("positional gradients", self.len(), positional_grads.len())?;
        for i in 0..self.len() {
            push_window(&mut self.opacity[i], opacities[i], self.window);
            push_window(&mut self.grad[i], norm(&positional_grads[i]), self.window);
        }
        Ok(())
    }

    /// Same as [`update`](Self::update) with precomputed magnitudes.
    pub fn update_magnitudes(&mut self, opacities: &[f64], magnitudes: &[f64]) -> Result<()> {
        check_len("opacity samples", self.len(), opacities.len())?;
        check_len("gradient magnitudes", self.len(), magnitudes.len())?;
        for i in 0..self.len() {
            push_window(&mut self.opacity[i], opacities[i], self.window);
            push_window(&mut self.grad[i], magnitudes[i], self.window);
        }
        Ok(())
    }

    pub fn mean_opacity(&self, i: usize) -> Option<f64> {
        mean(&self.opacity[i])
    }

    pub fn mean_grad(&self, i: usize) -> Option<f64> {
        mean(&self.grad[i])
    }

    /// Rebuilds the history after a densify/prune step. Survivors keep their
    /// windows; clones start empty.
    pub fn remap(&self, origin: &[Origin]) -> DensifyStats {
        let mut out = DensifyStats::new(0, self.window);
        for o in origin {
            match *o {
                Origin::Kept(i) => {
                    out.opacity.push(self.opacity[i].clone());
                    out.grad.push(self.grad[i].clone());
                }
                Origin::Clone(_) => {
                    out.opacity.push(VecDeque::with_capacity(self.window));
                    out.grad.push(VecDeque::with_capacity(self.window));
                }
            }
        }
        out
    }
}

fn push_window(q: &mut VecDeque<f64>, x: f64, window: usize) {
    if q.len() == window {
        q.pop_front();
    }
    q.push_back(x);
}

fn mean(q: &VecDeque<f64>) -> Option<f64> {
    if q.is_empty() {
        None
    } else {
        Some(q.iter().sum::<f64>() / q.len() as f64)
    }
}

/// Where a prototype of the updated list came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    Clone(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyOutcome {
    pub prototypes: Vec<GaussianPrototype>,
    pub origin: Vec<Origin>,
    pub pruned: Vec<usize>,
    pub cloned: Vec<usize>,
    /// Requested prunes that were refused to keep every face populated.
    pub prune_deficit: usize,
    /// Requested clones that were refused because their face was full.
    pub densify_deficit: usize,
}

impl DensifyOutcome {
    /// Signed deficit such that the count delta is
    /// `n_densify - n_prune - net_deficit()`.
    pub fn net_deficit(&self) -> i64 {
        self.densify_deficit as i64 - self.prune_deficit as i64
    }
}

/// Deletes the `n_prune` prototypes with the lowest mean opacity and clones
/// the `n_densify` with the largest mean positional gradient, perturbing the
/// clones' offsets and log-scales with Gaussian noise. Faces keep between 1
/// and [`MAX_PER_FACE`] prototypes; requests that would break the bound are
/// reported as deficits.
pub fn densify_and_prune<R: RngCore>(
    prototypes: &[GaussianPrototype],
    stats: &DensifyStats,
    n_faces: usize,
    n_prune: usize,
    n_densify: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<DensifyOutcome> {
    if prototypes.is_empty() {
        return Err(Error::Invalid("cannot densify an empty prototype list".into()));
    }
    check_len("densify statistics", prototypes.len(), stats.len())?;
    let mut counts = face_counts(prototypes, n_faces);

    let opacity = |i: usize| stats.mean_opacity(i).unwrap_or_else(|| prototypes[i].opacity());
    let mut by_opacity: Vec<usize> = (0..prototypes.len()).collect();
    by_opacity.sort_by(|&a, &b| opacity(a).total_cmp(&opacity(b)).then(a.cmp(&b)));
    let mut removed = vec![false; prototypes.len()];
    let mut pruned = Vec::new();
    for &i in &by_opacity {
        if pruned.len() == n_prune {
            break;
        }
        let f = prototypes[i].parent_face as usize;
        if counts[f] > 1 {
            counts[f] -= 1;
            removed[i] = true;
            pruned.push(i);
        }
    }

    let grad = |i: usize| stats.mean_grad(i).unwrap_or(0.0);
    let mut by_grad: Vec<usize> = (0..prototypes.len()).filter(|&i| !removed[i]).collect();
    by_grad.sort_by(|&a, &b| grad(b).total_cmp(&grad(a)).then(a.cmp(&b)));
    let mut cloned = Vec::new();
    for &i in &by_grad {
        if cloned.len() == n_densify {
            break;
        }
        let f = prototypes[i].parent_face as usize;
        if counts[f] < MAX_PER_FACE {
            counts[f] += 1;
            cloned.push(i);
        }
    }

    let noise = Normal::new(0.0, noise_scale.max(0.0)).map_err(|_| Error::Invalid("bad noise scale".into()))?;
    let mut out = Vec::with_capacity(prototypes.len() - pruned.len() + cloned.len());
    let mut origin = Vec::with_capacity(out.capacity());
    for (i, p) in prototypes.iter().enumerate() {
        if !removed[i] {
            out.push(*p);
            origin.push(Origin::Kept(i));
        }
    }
    for &i in &cloned {
        let mut c = prototypes[i];
        if noise_scale > 0.0 {
            for k in 0..3 {
                c.offset[k] += noise.sample(rng);
            }
            for k in 0..2 {
                c.log_scale[k] += noise.sample(rng);
            }
        }
        out.push(c);
        origin.push(Origin::Clone(i));
    }
    Ok(DensifyOutcome {
        prototypes: out,
        origin,
        prune_deficit: n_prune - pruned.len(),
        densify_deficit: n_densify - cloned.len(),
        pruned,
        cloned,
    })
}
