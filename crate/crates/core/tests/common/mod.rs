#![allow(dead_code, clippy::needless_range_loop)]

use headsplat_core::fit::{evaluate_frame, FitTarget, FrameParams, FrameSettings};
use headsplat_core::image::Image;
use headsplat_core::math::{logit, Quat};
use headsplat_core::model::{triangle_frames, BlendshapeModel, LandmarkEmbedding, Pose};
use headsplat_core::objective::{Extractors, LossWeights, ScaleReg};
use headsplat_core::raster::MeshBuffers;
use headsplat_core::render::{Camera, RenderOptions};
use headsplat_core::rig::{reference_log_scales, GaussianPrototype, PROTOTYPE_PARAMS};
use headsplat_core::shading::LightingPrior;
use headsplat_core::fit::CouplingGradient;
use headsplat_core::Vec3;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradScene {
    pub model: BlendshapeModel,
    pub prior: LightingPrior,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub pose: Pose,
    pub lighting: Vec<f64>,
    pub prototypes: Vec<GaussianPrototype>,
    pub reference: Vec<[f64; 2]>,
    pub target: FitTarget,
    pub settings: FrameSettings,
    pub frozen: MeshBuffers,
}

/// A 3x3-vertex patch (8 faces, one surfel each) facing the camera at 1 m.
/// Surfels are large, stacked in depth and share one world orientation so
/// no pixel sits near the weight cutoff or a depth-order swap; targets sit
/// a fixed margin away from the initial renders so no L1 term is at a kink.
pub fn grad_scene(seed: u64, size: usize) -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut verts = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let x = (j as f64 - 1.0) * 0.07 + rng.random_range(-0.005..0.005);
            let y = (1.0 - i as f64) * 0.07 + rng.random_range(-0.005..0.005);
            verts.push(Vec3::new(x, y, rng.random_range(-0.001..0.001)));
        }
    }
    let mut faces = Vec::new();
    for i in 0..2u32 {
        for j in 0..2u32 {
            let a = i * 3 + j;
            let (b, c, d) = (a + 1, a + 3, a + 4);
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }
    let nv = verts.len();
    let kb = 3;
    let kp = 2;
    let shape = DMatrix::from_fn(3 * nv, kb, |_, _| rng.random_range(-0.004..0.004));
    let expr = DMatrix::from_fn(3 * nv, kp, |_, _| rng.random_range(-0.004..0.004));
    let neck_weights: Vec<f64> = (0..nv).map(|i| if i >= 6 { rng.random_range(0.3..1.0) } else { 0.0 }).collect();
    let landmarks = (0..faces.len())
        .step_by(2)
        .map(|f| {
            let a: f64 = rng.random_range(0.1..0.5);
            let b: f64 = rng.random_range(0.1..0.4);
            LandmarkEmbedding {
                face: f as u32,
                bary: [a, b, 1.0 - a - b],
            }
        })
        .collect();
    let model = BlendshapeModel {
        base_vertices: verts,
        uv_coords: vec![[[0.0; 2]; 3]; faces.len()],
        face_region: vec![true; faces.len()],
        faces,
        shape_basis: shape,
        expr_basis: expr,
        neck_weights,
        neck_pivot: Vec3::new(0.0, -0.05, 0.0),
        landmarks,
    };
    model.validate().unwrap();

    let beta: Vec<f64> = (0..kb).map(|_| rng.random_range(-1.0..1.0)).collect();
    let psi: Vec<f64> = (0..kp).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pose = Pose {
        global_rotation: Quat::from_rotation_vector(&Vec3::new(
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        )),
        global_translation: [rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), 1.0],
        neck_rotation: Quat::from_rotation_vector(&Vec3::new(rng.random_range(-0.05..0.05), 0.0, 0.0)),
    };
    let prior = LightingPrior::synthetic();
    let lighting: Vec<f64> = (0..prior.dim).map(|_| rng.random_range(-0.1..0.1)).collect();

    let posed = headsplat_core::model::pose_mesh(&model, &beta, &psi, &pose).unwrap();
    let frames = triangle_frames(&posed, &model.faces);
    let rest = triangle_frames(&model.base_vertices, &model.faces);
    let reference = reference_log_scales(&model.base_vertices, &model.faces, &rest);
    // one shared world orientation, tilted away from the face normal
    let tilt = Quat::from_rotation_vector(&Vec3::new(0.25, -0.2, 0.1)).to_matrix()
        * nalgebra::Matrix3::from_columns(&[Vec3::x(), -Vec3::y(), -Vec3::z()]);
    let prototypes = frames
        .iter()
        .enumerate()
        .map(|(f, fr)| {
            let fr = fr.unwrap();
            let rc = fr.rotation.transpose() * tilt;
            let q = nalgebra::UnitQuaternion::from_matrix(&rc);
            let q = Quat([q.w, q.i, q.j, q.k]);
            // stack along the camera axis: depth ~ 1 - 0.012 (f + 1)
            let world_offset = Vec3::new(0.0, 0.0, -0.012 * (f as f64 + 1.0));
            let local = fr.rotation.transpose() * world_offset;
            GaussianPrototype {
                parent_face: f as u32,
                offset: Vec3::new(local.x / fr.scale.x, local.y / fr.scale.y, local.z / fr.scale.z),
                rotation: q,
                log_scale: [(0.6 / fr.scale.x).ln(), (0.5 / fr.scale.y).ln()],
                opacity_logit: logit(rng.random_range(0.15..0.5)),
                albedo: Vec3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
            }
        })
        .collect::<Vec<_>>();

    let camera = Camera::new(size, size);
    let background = Vec3::new(0.3, 0.6, 0.2);
    let settings = FrameSettings {
        weights: LossWeights {
            l1: 1.0,
            landmarks: 0.5,
            normals: 0.3,
            depth: 0.7,
            offset: 0.01,
            scale: 0.02,
            opacity: 0.05,
            expression: 0.01,
            shape: 0.02,
            ..LossWeights::zero()
        },
        scale_reg: ScaleReg::Deviation,
        coupling_gradient: CouplingGradient::Both,
        render: RenderOptions::default(),
        background,
    };

    // targets a margin away from the initial render
    let mut target = FitTarget {
        image: Image::new(size, size, 3),
        alpha: None,
        mask: None,
        landmarks: vec![None; model.landmarks.len()],
        camera,
    };
    let params = FrameParams {
        beta: &beta,
        psi: &psi,
        pose: &pose,
        lighting: &lighting,
        prototypes: &prototypes,
        reference_log_scales: &reference,
    };
    let ev = evaluate_frame(&model, &prior, &params, &target, &settings, None, &Extractors::default(), false).unwrap();
    for (t, r) in target.image.data.iter_mut().zip(&ev.render.buffers.color.data) {
        *t = r + if rng.random_bool(0.5) { 0.15 } else { -0.15 };
    }
    let lm3 = headsplat_core::model::landmarks_3d(&ev.render.vertices, &model);
    target.landmarks = lm3
        .iter()
        .map(|p| {
            let q = camera.project(p).unwrap();
            Some([q[0] + 2.0, q[1] - 3.0])
        })
        .collect();
    let frozen = ev.render.mesh.clone();
    assert!(frozen.covered() > size * size / 4, "patch must cover the image");

    GradScene {
        model,
        prior,
        beta,
        psi,
        pose,
        lighting,
        prototypes,
        reference,
        target,
        settings,
        frozen,
    }
}

impl GradScene {
    pub fn loss(&self) -> f64 {
        let params = FrameParams {
            beta: &self.beta,
            psi: &self.psi,
            pose: &self.pose,
            lighting: &self.lighting,
            prototypes: &self.prototypes,
            reference_log_scales: &self.reference,
        };
        evaluate_frame(
            &self.model,
            &self.prior,
            &params,
            &self.target,
            &self.settings,
            Some(&self.frozen),
            &Extractors::default(),
            false,
        )
        .unwrap()
        .report
        .total
    }

    /// Analytic gradient flattened as prototypes (13 each), beta, psi,
    /// pose (11), lighting.
    pub fn analytic(&self) -> Vec<f64> {
        let params = FrameParams {
            beta: &self.beta,
            psi: &self.psi,
            pose: &self.pose,
            lighting: &self.lighting,
            prototypes: &self.prototypes,
            reference_log_scales: &self.reference,
        };
        let g = evaluate_frame(
            &self.model,
            &self.prior,
            &params,
            &self.target,
            &self.settings,
            Some(&self.frozen),
            &Extractors::default(),
            true,
        )
        .unwrap()
        .grads
        .unwrap();
        let mut out: Vec<f64> = g.prototypes.iter().flat_map(|p| p.params()).collect();
        out.extend(&g.beta);
        out.extend(&g.psi);
        let pr = g.pose;
        out.extend(pr.global_rotation);
        out.extend([pr.global_translation.x, pr.global_translation.y, pr.global_translation.z]);
        out.extend(pr.neck_rotation);
        out.extend(&g.lighting);
        out
    }

    pub fn param_count(&self) -> usize {
        self.prototypes.len() * PROTOTYPE_PARAMS + self.beta.len() + self.psi.len() + 11 + self.lighting.len()
    }

    fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        let np = self.prototypes.len() * PROTOTYPE_PARAMS;
        if k < np {
            let p = &mut self.prototypes[k / PROTOTYPE_PARAMS];
            return match k % PROTOTYPE_PARAMS {
                i @ 0..=2 => &mut p.offset[i],
                i @ 3..=6 => &mut p.rotation.0[i - 3],
                i @ 7..=8 => &mut p.log_scale[i - 7],
                9 => &mut p.opacity_logit,
                i => &mut p.albedo[i - 10],
            };
        }
        k -= np;
        if k < self.beta.len() {
            return &mut self.beta[k];
        }
        k -= self.beta.len();
        if k < self.psi.len() {
            return &mut self.psi[k];
        }
        k -= self.psi.len();
        if k < 11 {
            return match k {
                i @ 0..=3 => &mut self.pose.global_rotation.0[i],
                i @ 4..=6 => &mut self.pose.global_translation[i - 4],
                i => &mut self.pose.neck_rotation.0[i - 7],
            };
        }
        k -= 11;
        &mut self.lighting[k]
    }

    pub fn finite_difference(&mut self, k: usize, h: f64) -> f64 {
        let x = *self.param_mut(k);
        *self.param_mut(k) = x + h;
        let fp = self.loss();
        *self.param_mut(k) = x - h;
        let fm = self.loss();
        *self.param_mut(k) = x;
        (fp - fm) / (2.0 * h)
    }

    /// Largest component-wise relative error against central differences.
    /// Components are compared relative to `max(|a|, |fd|, 1e-3 * max|g|)`.
    pub fn max_relative_error(&mut self, h: f64) -> (f64, usize) {
        let an = self.analytic();
        let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = (0.0, 0);
        for k in 0..self.param_count() {
            let fd = self.finite_difference(k, h);
            let denom = an[k].abs().max(fd.abs()).max(1e-3 * scale);
            let e = (an[k] - fd).abs() / denom;
            if e > worst.0 {
                worst = (e, k);
            }
        }
        worst
    }
}
