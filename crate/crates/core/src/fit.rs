//! Analysis-by-synthesis fitting loop.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use rand_core::RngCore;

use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::math::{rng_stream, slice_norm_grad, Quat, Vec3};
use crate::model::{
    landmarks_3d, landmarks_3d_backward, pose_mesh, pose_mesh_backward, triangle_frames, triangle_frames_backward,
    BlendshapeModel, Pose, PoseGrad,
};
use crate::objective::{
    coupling_losses_backward, feature_loss_backward, gaussian_reg_backward, landmark_loss_backward,
    photometric_l1_backward, total_loss, Extractors, LossInputs, LossReport, LossTerms, LossWeights, ScaleReg,
};
use crate::optim::{adam_step, AdamConfig};
use crate::raster::{mesh_buffers_backward, project_points, project_points_backward, rasterize_mesh, MeshBuffers};
use crate::render::{render, render_backward_many, Camera, RenderBuffers, RenderOptions};
use crate::rig::{
    bind_splats, bind_splats_backward, densify_and_prune, face_counts, init_prototypes, reference_log_scales,
    DensifyStats, GaussianPrototype, Origin, PrototypeGrad, WorldSplat, PROTOTYPE_PARAMS,
};
use crate::shading::{lighting_coeffs, lighting_coeffs_backward, shade, shade_backward, LightingPrior};

/// Flat pose layout: global quaternion (4), translation (3), neck quaternion (4).
pub const POSE_PARAMS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LearningRates {
    pub splats: f64,
    pub shape: f64,
    pub expression: f64,
    pub pose: f64,
    pub lighting: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            splats: 1e-3,
            shape: 1e-3,
            expression: 1e-3,
            pose: 1e-3,
            lighting: 1e-3,
        }
    }
}

/// Which branch receives the normal/depth coupling gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CouplingGradient {
    /// Surfel prototypes only; the mesh buffers act as fixed targets and
    /// shape, expression and pose see no coupling gradient.
    #[default]
    Gaussian,
    /// Also through the binding and the mesh buffers into shape,
    /// expression and pose.
    Both,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Background {
    Fixed([f64; 3]),
    /// A fresh uniform color per iteration; targets without an alpha
    /// matte fall back to black.
    #[default]
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FitConfig {
    pub iterations: u64,
    pub learning_rates: LearningRates,
    pub adam: AdamConfig,
    pub t_densify: u64,
    pub t_history: usize,
    pub n_prune: usize,
    pub n_densify: usize,
    pub noise_scale: f64,
    pub weights: LossWeights,
    pub scale_reg: ScaleReg,
    pub coupling_gradient: CouplingGradient,
    pub render: RenderOptions,
    pub background: Background,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            learning_rates: LearningRates::default(),
            adam: AdamConfig::default(),
            t_densify: 200,
            t_history: 100,
            n_prune: 16,
            n_densify: 16,
            noise_scale: 0.05,
            weights: LossWeights::default(),
            scale_reg: ScaleReg::Deviation,
            coupling_gradient: CouplingGradient::Gaussian,
            render: RenderOptions::default(),
            background: Background::Random,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let lr = &self.learning_rates;
        for (name, v) in [
            ("splats", lr.splats),
            ("shape", lr.shape),
            ("expression", lr.expression),
            ("pose", lr.pose),
            ("lighting", lr.lighting),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("learning rate {name} = {v} must be finite and >= 0")));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Invalid(format!("noise_scale = {} must be >= 0", self.noise_scale)));
        }
        if self.t_history == 0 {
            return Err(Error::Invalid("t_history must be >= 1".into()));
        }
        if let Background::Fixed(c) = self.background {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid("background color must be finite".into()));
            }
        }
        Ok(())
    }
}

/// One observed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FitTarget {
    /// Straight (non-premultiplied) color, 3 channels.
    pub image: Image,
    /// Foreground matte; with it the target background is replaced by the
    /// render background.
    pub alpha: Option<Image>,
    /// Face-region mask; without it the mask comes from the mesh raster.
    pub mask: Option<Image>,
    /// Pixel landmarks in the model's layout; `None` where unavailable.
    pub landmarks: Vec<Option<[f64; 2]>>,
    pub camera: Camera,
}

impl FitTarget {
    pub fn validate(&self, model: &BlendshapeModel) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        self.image.check_shape("target image", w, h, 3)?;
        if let Some(a) = &self.alpha {
            a.check_shape("target alpha", w, h, 1)?;
        }
        if let Some(m) = &self.mask {
            m.check_shape("target mask", w, h, 1)?;
        }
        check_len("target landmarks", model.landmarks.len(), self.landmarks.len())
    }

    /// Target image composited over `background`.
    pub fn composite(&self, background: Vec3) -> Image {
        match &self.alpha {
            None => self.image.clone(),
            Some(a) => {
                let mut out = self.image.clone();
                for p in 0..out.pixels() {
                    let al = a.data[p];
                    for c in 0..3 {
                        let v = &mut out.data[3 * p + c];
                        *v = al * *v + (1.0 - al) * background[c];
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub splats: Moments,
    pub shape: Moments,
    pub expression: Moments,
    pub pose: Moments,
    pub lighting: Moments,
}

/// Everything the optimizer updates, plus its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub beta: Vec<f64>,
    /// One expression code per frame.
    pub psi: Vec<Vec<f64>>,
    /// One pose per frame.
    pub poses: Vec<Pose>,
    pub lighting: Vec<f64>,
    pub prototypes: Vec<GaussianPrototype>,
    /// Initial log-scales per face, the scale regularizer's anchor.
    pub reference_log_scales: Vec<[f64; 2]>,
    pub adam: AdamState,
    pub iteration: u64,
    pub stats: DensifyStats,
    pub seed: u64,
}

impl FitState {
    /// Zero codes, one prototype per face, every frame at `initial_pose`.
    pub fn new(
        model: &BlendshapeModel,
        prior: &LightingPrior,
        frames: usize,
        initial_pose: Pose,
        config: &FitConfig,
    ) -> Result<Self> {
        model.validate()?;
        if frames == 0 {
            return Err(Error::Invalid("need at least one frame".into()));
        }
        let frames_rest = triangle_frames(&model.base_vertices, &model.faces);
        let reference = reference_log_scales(&model.base_vertices, &model.faces, &frames_rest);
        let prototypes = init_prototypes(&reference);
        let n = prototypes.len();
        Ok(FitState {
            beta: vec![0.0; model.shape_dim()],
            psi: vec![vec![0.0; model.expr_dim()]; frames],
            poses: vec![initial_pose; frames],
            lighting: vec![0.0; prior.dim],
            prototypes,
            reference_log_scales: reference,
            adam: AdamState {
                splats: Moments::zeros(n * PROTOTYPE_PARAMS),
                shape: Moments::zeros(model.shape_dim()),
                expression: Moments::zeros(frames * model.expr_dim()),
                pose: Moments::zeros(frames * POSE_PARAMS),
                lighting: Moments::zeros(prior.dim),
            },
            iteration: 0,
            stats: DensifyStats::new(n, config.t_history),
            seed: config.seed,
        })
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn validate(&self, model: &BlendshapeModel, prior: &LightingPrior) -> Result<()> {
        check_len("shape code", model.shape_dim(), self.beta.len())?;
        check_len("expression codes", self.poses.len(), self.psi.len())?;
        for psi in &self.psi {
            check_len("expression code", model.expr_dim(), psi.len())?;
        }
        check_len("lighting code", prior.dim, self.lighting.len())?;
        check_len("reference scales", model.face_count(), self.reference_log_scales.len())?;
        check_len("densify statistics", self.prototypes.len(), self.stats.len())?;
        let n = self.prototypes.len();
        let a = &self.adam;
        for (what, m, len) in [
            ("splat moments", &a.splats, n * PROTOTYPE_PARAMS),
            ("shape moments", &a.shape, self.beta.len()),
            ("expression moments", &a.expression, self.psi.len() * model.expr_dim()),
            ("pose moments", &a.pose, self.poses.len() * POSE_PARAMS),
            ("lighting moments", &a.lighting, self.lighting.len()),
        ] {
            check_len(what, len, m.m.len())?;
            check_len(what, len, m.v.len())?;
        }
        if let Some(p) = self.prototypes.iter().find(|p| p.parent_face as usize >= model.face_count()) {
            return Err(Error::Invalid(format!("prototype parent face {} out of range", p.parent_face)));
        }
        Ok(())
    }
}

/// Per-frame parameters read by [`evaluate_frame`].
#[derive(Clone, Copy, Debug)]
pub struct FrameParams<'a> {
    pub beta: &'a [f64],
    pub psi: &'a [f64],
    pub pose: &'a Pose,
    pub lighting: &'a [f64],
    pub prototypes: &'a [GaussianPrototype],
    pub reference_log_scales: &'a [[f64; 2]],
}

impl<'a> FrameParams<'a> {
    pub fn of(state: &'a FitState, frame: usize) -> Self {
        FrameParams {
            beta: &state.beta,
            psi: &state.psi[frame],
            pose: &state.poses[frame],
            lighting: &state.lighting,
            prototypes: &state.prototypes,
            reference_log_scales: &state.reference_log_scales,
        }
    }
}

/// Loss settings for one frame evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSettings {
    pub weights: LossWeights,
    pub scale_reg: ScaleReg,
    pub coupling_gradient: CouplingGradient,
    pub render: RenderOptions,
    pub background: Vec3,
}

impl FrameSettings {
    pub fn from_config(config: &FitConfig, background: Vec3) -> Self {
        FrameSettings {
            weights: config.weights,
            scale_reg: config.scale_reg,
            coupling_gradient: config.coupling_gradient,
            render: config.render,
            background,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameGrads {
    pub prototypes: Vec<PrototypeGrad>,
    /// World-center gradient per prototype (zero for skipped ones).
    pub centers: Vec<Vec3>,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub pose: PoseGrad,
    pub lighting: Vec<f64>,
}

/// A posed, shaded and rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRender {
    pub vertices: Vec<Vec3>,
    pub splats: Vec<WorldSplat>,
    pub colors: Vec<Vec3>,
    /// Prototype index of each world splat.
    pub source: Vec<usize>,
    pub skipped: usize,
    pub buffers: RenderBuffers,
    pub mesh: MeshBuffers,
}

/// Poses the mesh, binds and shades the surfels and renders both branches.
pub fn render_frame(
    model: &BlendshapeModel,
    prior: &LightingPrior,
    params: &FrameParams<'_>,
    camera: &Camera,
    background: Vec3,
    opts: &RenderOptions,
) -> Result<FrameRender> {
    let vertices = pose_mesh(model, params.beta, params.psi, params.pose)?;
    let frames = triangle_frames(&vertices, &model.faces);
    let binding = bind_splats(params.prototypes, &frames);
    let w = lighting_coeffs(prior, params.lighting)?;
    let colors: Vec<Vec3> = binding.splats.iter().map(|s| shade(&s.albedo, &s.normal(), &w)).collect();
    let buffers = render(&binding.splats, &colors, camera, background, opts)?;
    let mesh = rasterize_mesh(&vertices, &model.faces, &model.face_region, camera)?;
    Ok(FrameRender {
        vertices,
        splats: binding.splats,
        colors,
        source: binding.source,
        skipped: binding.skipped.len(),
        buffers,
        mesh,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEval {
    pub report: LossReport,
    pub render: FrameRender,
    pub grads: Option<FrameGrads>,
}

/// Loss of one frame and, optionally, its gradient with respect to every
/// parameter. `frozen_mesh` replaces the mesh raster (and the mask derived
/// from it) with fixed buffers.
pub fn evaluate_frame(
    model: &BlendshapeModel,
    prior: &LightingPrior,
    params: &FrameParams<'_>,
    target: &FitTarget,
    settings: &FrameSettings,
    frozen_mesh: Option<&MeshBuffers>,
    extractors: &Extractors<'_>,
    with_grad: bool,
) -> Result<FrameEval> {
    let camera = &target.camera;
    let mut fr = render_frame(model, prior, params, camera, settings.background, &settings.render)?;
    if let Some(m) = frozen_mesh {
        fr.mesh = m.clone();
    }
    let target_image = target.composite(settings.background);
    let mask = target.mask.clone().unwrap_or_else(|| fr.mesh.face_mask.clone());
    let lm3 = landmarks_3d(&fr.vertices, model);
    let lm2 = project_points(&lm3, camera);
    let report = total_loss(
        &LossInputs {
            target: &target_image,
            rendered: &fr.buffers,
            mask: &mask,
            mesh: &fr.mesh,
            predicted_landmarks: &lm2,
            target_landmarks: &target.landmarks,
            prototypes: params.prototypes,
            reference_log_scales: params.reference_log_scales,
            scale_reg: settings.scale_reg,
            beta: params.beta,
            psi: params.psi,
        },
        &settings.weights,
        extractors,
        0,
    )?;
    if !with_grad {
        return Ok(FrameEval {
            report,
            render: fr,
            grads: None,
        });
    }

    let wts = &settings.weights;
    let (width, height) = (camera.width, camera.height);
    let mut up = RenderBuffers::zeros(width, height);
    if wts.l1 != 0.0 {
        up.color = photometric_l1_backward(&target_image, &fr.buffers.color, &mask, wts.l1)?;
    }
    for (ext, wt) in [
        (extractors.perceptual, wts.perceptual),
        (extractors.identity, wts.identity),
        (extractors.emotion, wts.emotion),
    ] {
        if let (Some(e), true) = (ext, wt != 0.0) {
            if let Some(g) = feature_loss_backward(e, &fr.buffers.color, &target_image, wt) {
                g.check_shape("feature gradient", width, height, 3)?;
                for (a, b) in up.color.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
        }
    }
    let coupling = coupling_losses_backward(&fr.buffers, &fr.mesh, &mask, wts.normals, wts.depth)?;
    let mut up_coupling = RenderBuffers::zeros(width, height);
    up_coupling.depth = coupling.gauss_depth;
    up_coupling.normal = coupling.gauss_normal;

    // photometric and coupling gradients are kept apart so the coupling
    // terms can be stopped at the surfels
    let mut rg = render_backward_many(
        &fr.splats,
        &fr.colors,
        camera,
        settings.background,
        &settings.render,
        &[&up, &up_coupling],
    )?;
    let rg_coupling = rg.pop().expect("two groups");
    let rg = rg.pop().expect("two groups");
    let w = lighting_coeffs(prior, params.lighting)?;
    let mut splat_grads = rg.splats;
    let mut g_w = [[0.0; 9]; 3];
    for (k, s) in fr.splats.iter().enumerate() {
        let sg = shade_backward(&s.albedo, &s.normal(), &w, &rg.colors[k]);
        let g = &mut splat_grads[k];
        g.albedo += sg.albedo;
        let col = g.rotation.column(2) + sg.normal;
        g.rotation.set_column(2, &col);
        for j in 0..3 {
            for i in 0..9 {
                g_w[j][i] += sg.coeffs[j][i];
            }
        }
    }
    let g_light = lighting_coeffs_backward(prior, &g_w);

    let frames = triangle_frames(&fr.vertices, &model.faces);
    let binding = crate::rig::Binding {
        splats: fr.splats.clone(),
        source: fr.source.clone(),
        skipped: Vec::new(),
    };
    let (mut g_protos, mut g_frames) = bind_splats_backward(params.prototypes, &frames, &binding, &splat_grads)?;
    let (gc_protos, gc_frames) = bind_splats_backward(params.prototypes, &frames, &binding, &rg_coupling.splats)?;
    for (a, b) in g_protos.iter_mut().zip(&gc_protos) {
        a.offset += b.offset;
        for k in 0..4 {
            a.rotation[k] += b.rotation[k];
        }
        a.log_scale[0] += b.log_scale[0];
        a.log_scale[1] += b.log_scale[1];
        a.opacity_logit += b.opacity_logit;
        a.albedo += b.albedo;
    }
    let both = settings.coupling_gradient == CouplingGradient::Both;
    if both {
        for (a, b) in g_frames.iter_mut().zip(&gc_frames) {
            a.rotation += b.rotation;
            a.scale += b.scale;
            a.centroid += b.centroid;
        }
    }
    let mut centers = vec![Vec3::zeros(); params.prototypes.len()];
    for (k, &src) in fr.source.iter().enumerate() {
        centers[src] = splat_grads[k].center + rg_coupling.splats[k].center;
    }

    let mut g_verts = vec![Vec3::zeros(); fr.vertices.len()];
    triangle_frames_backward(&fr.vertices, &model.faces, &g_frames, &mut g_verts);
    if wts.landmarks != 0.0 {
        let g2 = landmark_loss_backward(&lm2, &target.landmarks, width, height, wts.landmarks)?;
        let g3 = project_points_backward(&lm3, camera, &g2)?;
        landmarks_3d_backward(model, &g3, &mut g_verts);
    }
    if both && frozen_mesh.is_none() {
        let gm = mesh_buffers_backward(
            &fr.vertices,
            &model.faces,
            camera,
            &fr.mesh,
            &coupling.mesh_depth,
            &coupling.mesh_normal,
        )?;
        for (a, b) in g_verts.iter_mut().zip(gm) {
            *a += b;
        }
    }
    let mut mp = pose_mesh_backward(model, params.beta, params.psi, params.pose, &g_verts)?;
    gaussian_reg_backward(
        params.prototypes,
        params.reference_log_scales,
        settings.scale_reg,
        wts,
        &mut g_protos,
    )?;
    slice_norm_grad(params.beta, &mut mp.beta, wts.shape);
    slice_norm_grad(params.psi, &mut mp.psi, wts.expression);

    Ok(FrameEval {
        report,
        render: fr,
        grads: Some(FrameGrads {
            prototypes: g_protos,
            centers,
            beta: mp.beta,
            psi: mp.psi,
            pose: mp.pose,
            lighting: g_light,
        }),
    })
}

/// Record of one densify/prune event.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyEvent {
    /// Number of completed iterations when the event ran.
    pub iteration: u64,
    pub before: usize,
    pub after: usize,
    pub n_prune: usize,
    pub n_densify: usize,
    pub prune_deficit: usize,
    pub densify_deficit: usize,
    pub min_per_face: usize,
    pub max_per_face: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    /// Frame-averaged loss at the parameters before the update.
    pub loss: LossReport,
    pub skipped_splats: usize,
    pub densify: Option<DensifyEvent>,
}

fn background_for(config: &FitConfig, seed: u64, iteration: u64) -> Vec3 {
    match config.background {
        Background::Fixed(c) => Vec3::from(c),
        Background::Random => {
            let mut rng = rng_stream(seed, &format!("background/{iteration}"));
            let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            Vec3::new(u(), u(), u())
        }
    }
}

fn pose_params(p: &Pose) -> [f64; POSE_PARAMS] {
    let g = p.global_rotation.0;
    let t = p.global_translation;
    let n = p.neck_rotation.0;
    [g[0], g[1], g[2], g[3], t[0], t[1], t[2], n[0], n[1], n[2], n[3]]
}

fn pose_from_params(x: &[f64]) -> Pose {
    Pose {
        global_rotation: Quat([x[0], x[1], x[2], x[3]]),
        global_translation: [x[4], x[5], x[6]],
        neck_rotation: Quat([x[7], x[8], x[9], x[10]]),
    }
}

fn pose_grad_params(g: &PoseGrad) -> [f64; POSE_PARAMS] {
    let a = g.global_rotation;
    let t = g.global_translation;
    let n = g.neck_rotation;
    [a[0], a[1], a[2], a[3], t.x, t.y, t.z, n[0], n[1], n[2], n[3]]
}

fn renormalize(q: &mut Quat, before: &Quat) {
    if q != before {
        *q = q.normalized();
    }
}

/// Runs optimizer iterations until `state.iteration == config.iterations`,
/// calling `observer` after each one.
#[allow(clippy::too_many_arguments)]
pub fn fit<F: FnMut(&IterationReport)>(
    model: &BlendshapeModel,
    prior: &LightingPrior,
    targets: &[FitTarget],
    config: &FitConfig,
    state: &mut FitState,
    extractors: &Extractors<'_>,
    mut observer: F,
) -> Result<()> {
    config.validate()?;
    if targets.is_empty() {
        return Err(Error::Invalid("need at least one target frame".into()));
    }
    check_len("target frames", state.frames(), targets.len())?;
    for t in targets {
        t.validate(model)?;
    }
    state.validate(model, prior)?;

    let n_frames = targets.len() as f64;
    while state.iteration < config.iterations {
        let iteration = state.iteration;
        let bg = background_for(config, state.seed, iteration);
        let n_protos = state.prototypes.len();
        let mut terms = LossTerms::default();
        let mut total = 0.0;
        let mut skipped = 0;
        let mut g_protos = vec![[0.0; PROTOTYPE_PARAMS]; n_protos];
        let mut g_centers = vec![Vec3::zeros(); n_protos];
        let mut g_beta = vec![0.0; state.beta.len()];
        let mut g_psi: Vec<Vec<f64>> = Vec::with_capacity(targets.len());
        let mut g_pose: Vec<[f64; POSE_PARAMS]> = Vec::with_capacity(targets.len());
        let mut g_light = vec![0.0; state.lighting.len()];
        for (f, target) in targets.iter().enumerate() {
            let bg = match (config.background, &target.alpha) {
                (Background::Random, None) => Vec3::zeros(),
                _ => bg,
            };
            let settings = FrameSettings::from_config(config, bg);
            let ev = evaluate_frame(
                model,
                prior,
                &FrameParams::of(state, f),
                target,
                &settings,
                None,
                extractors,
                true,
            )?;
            let k = 1.0 / n_frames;
            for ((_, v), slot) in ev.report.terms.named().iter().zip(terms_mut(&mut terms)) {
                *slot += v * k;
            }
            total += ev.report.total * k;
            skipped += ev.render.skipped;
            let g = ev.grads.expect("gradients requested");
            for (acc, gp) in g_protos.iter_mut().zip(&g.prototypes) {
                for (a, b) in acc.iter_mut().zip(gp.params()) {
                    *a += b * k;
                }
            }
            for (a, b) in g_centers.iter_mut().zip(&g.centers) {
                *a += b * k;
            }
            for (a, b) in g_beta.iter_mut().zip(&g.beta) {
                *a += b * k;
            }
            for (a, b) in g_light.iter_mut().zip(&g.lighting) {
                *a += b * k;
            }
            g_psi.push(g.psi.iter().map(|x| x * k).collect());
            g_pose.push(pose_grad_params(&g.pose).map(|x| x * k));
        }
        if let Some(term) = terms.non_finite() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                iteration,
            });
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                term: "total".to_string(),
                iteration,
            });
        }
        let loss = LossReport {
            iteration,
            terms,
            total,
        };

        let t = iteration + 1;
        let lr = &config.learning_rates;
        let adam = &config.adam;
        let opacities: Vec<f64> = state.prototypes.iter().map(|p| p.opacity()).collect();

        if lr.splats > 0.0 {
            let mut params: Vec<f64> = state.prototypes.iter().flat_map(|p| p.params()).collect();
            let grads: Vec<f64> = g_protos.iter().flatten().copied().collect();
            let m = &mut state.adam.splats;
            adam_step(&mut params, &grads, &mut m.m, &mut m.v, lr.splats, adam, t)?;
            for (p, chunk) in state.prototypes.iter_mut().zip(params.chunks_exact(PROTOTYPE_PARAMS)) {
                let before = p.rotation;
                *p = GaussianPrototype::from_params(p.parent_face, chunk.try_into().expect("chunk size"));
                renormalize(&mut p.rotation, &before);
            }
        }
        if lr.shape > 0.0 {
            let m = &mut state.adam.shape;
            adam_step(&mut state.beta, &g_beta, &mut m.m, &mut m.v, lr.shape, adam, t)?;
        }
        if lr.expression > 0.0 && model.expr_dim() > 0 {
            let mut params: Vec<f64> = state.psi.iter().flatten().copied().collect();
            let grads: Vec<f64> = g_psi.iter().flatten().copied().collect();
            let m = &mut state.adam.expression;
            adam_step(&mut params, &grads, &mut m.m, &mut m.v, lr.expression, adam, t)?;
            for (psi, chunk) in state.psi.iter_mut().zip(params.chunks_exact(model.expr_dim())) {
                psi.copy_from_slice(chunk);
            }
        }
        if lr.pose > 0.0 {
            let mut params: Vec<f64> = state.poses.iter().flat_map(pose_params).collect();
            let grads: Vec<f64> = g_pose.iter().flatten().copied().collect();
            let m = &mut state.adam.pose;
            adam_step(&mut params, &grads, &mut m.m, &mut m.v, lr.pose, adam, t)?;
            for (pose, chunk) in state.poses.iter_mut().zip(params.chunks_exact(POSE_PARAMS)) {
                let before = *pose;
                *pose = pose_from_params(chunk);
                renormalize(&mut pose.global_rotation, &before.global_rotation);
                renormalize(&mut pose.neck_rotation, &before.neck_rotation);
            }
        }
        if lr.lighting > 0.0 {
            let m = &mut state.adam.lighting;
            adam_step(&mut state.lighting, &g_light, &mut m.m, &mut m.v, lr.lighting, adam, t)?;
        }

        state.stats.update(&opacities, &g_centers)?;
        state.iteration += 1;

        let mut densify = None;
        if config.t_densify > 0
            && state.iteration.is_multiple_of(config.t_densify)
            && (config.n_prune > 0 || config.n_densify > 0)
        {
            densify = Some(run_densify(model, config, state)?);
        }

        observer(&IterationReport {
            loss,
            skipped_splats: skipped,
            densify,
        });
    }
    Ok(())
}

fn terms_mut(t: &mut LossTerms) -> [&mut f64; 12] {
    [
        &mut t.l1,
        &mut t.landmarks,
        &mut t.normals,
        &mut t.depth,
        &mut t.offset,
        &mut t.scale,
        &mut t.opacity,
        &mut t.expression,
        &mut t.shape,
        &mut t.perceptual,
        &mut t.identity,
        &mut t.emotion,
    ]
}

fn run_densify(model: &BlendshapeModel, config: &FitConfig, state: &mut FitState) -> Result<DensifyEvent> {
    let before = state.prototypes.len();
    let mut rng = rng_stream(state.seed, &format!("densify/{}", state.iteration));
    let out = densify_and_prune(
        &state.prototypes,
        &state.stats,
        model.face_count(),
        config.n_prune,
        config.n_densify,
        config.noise_scale,
        &mut rng,
    )?;
    let old = &state.adam.splats;
    let mut m = Moments::zeros(out.prototypes.len() * PROTOTYPE_PARAMS);
    for (k, o) in out.origin.iter().enumerate() {
        if let Origin::Kept(i) = *o {
            let dst = k * PROTOTYPE_PARAMS..(k + 1) * PROTOTYPE_PARAMS;
            let src = i * PROTOTYPE_PARAMS..(i + 1) * PROTOTYPE_PARAMS;
            m.m[dst.clone()].copy_from_slice(&old.m[src.clone()]);
            m.v[dst].copy_from_slice(&old.v[src]);
        }
    }
    state.adam.splats = m;
    state.stats = state.stats.remap(&out.origin);
    state.prototypes = out.prototypes;
    let counts = face_counts(&state.prototypes, model.face_count());
    Ok(DensifyEvent {
        iteration: state.iteration,
        before,
        after: state.prototypes.len(),
        n_prune: config.n_prune,
        n_densify: config.n_densify,
        prune_deficit: out.prune_deficit,
        densify_deficit: out.densify_deficit,
        min_per_face: counts.iter().copied().min().unwrap_or(0),
        max_per_face: counts.iter().copied().max().unwrap_or(0),
    })
}
