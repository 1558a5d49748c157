//! Synthetic datasets with known parameters.

use std::path::Path;

use headsplat_core::eval::ScanCloud;
use headsplat_core::fit::{render_frame, FitConfig, FitState, FrameParams};
use headsplat_core::image::Image;
use headsplat_core::math::{rng_stream, Quat};
use headsplat_core::model::{landmarks_3d, pose_mesh, procedural_head, BlendshapeModel, Pose};
use headsplat_core::render::{Camera, RenderOptions};
use headsplat_core::shading::LightingPrior;
use headsplat_core::Vec3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::save_checkpoint;
use crate::config::SynthSpec;
use crate::dataset::{frame_dir, Manifest, FORMAT, MANIFEST, MODEL_FILE, PRIOR_FILE, VERSION};
use crate::error::{io_context, CliError, Result};
use crate::formats::image::write_png;
use crate::formats::landmarks::{emit_indexed_table, write_image_landmarks};
use crate::formats::model::{read_model, write_model};
use crate::formats::obj::write_obj;
use crate::formats::ply::{write_ply, PlyEncoding};
use crate::formats::prior::{read_prior, write_prior};
use crate::formats::write_file;

pub const GROUND_TRUTH_DIR: &str = "ground_truth";
pub const GT_NEUTRAL: &str = "gt_neutral.obj";
pub const GT_SCAN: &str = "gt_scan.ply";
pub const GT_LANDMARKS: &str = "gt_landmarks.txt";

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn load_model(path: Option<&Path>) -> Result<BlendshapeModel> {
    match path {
        Some(p) => read_model(p),
        None => Ok(procedural_head()),
    }
}

pub fn load_prior(path: Option<&Path>) -> Result<LightingPrior> {
    match path {
        Some(p) => read_prior(p),
        None => Ok(LightingPrior::synthetic()),
    }
}

/// The mesh at shape `beta`, zero expression and identity pose.
pub fn neutral_mesh(model: &BlendshapeModel, beta: &[f64]) -> Result<Vec<Vec3>> {
    Ok(pose_mesh(model, beta, &vec![0.0; model.expr_dim()], &Pose::default())?)
}

/// Ground-truth state: the default initialization with sampled (or given)
/// codes, poses, lighting and per-splat appearance.
pub fn ground_truth(model: &BlendshapeModel, prior: &LightingPrior, spec: &SynthSpec, seed: u64) -> Result<FitState> {
    let start = Pose {
        global_translation: [0.0, 0.0, spec.distance],
        ..Pose::default()
    };
    let cfg = FitConfig {
        seed,
        ..FitConfig::default()
    };
    let mut gt = FitState::new(model, prior, spec.frames, start, &cfg)?;

    let mut rng = rng_stream(seed, "synth/shape");
    for b in gt.beta.iter_mut() {
        *b = spec.shape_sigma * normal(&mut rng);
    }
    let mut rng = rng_stream(seed, "synth/expression");
    for psi in gt.psi.iter_mut() {
        for p in psi.iter_mut() {
            *p = spec.expression_sigma * normal(&mut rng);
        }
    }
    let mut rng = rng_stream(seed, "synth/pose");
    let n = gt.poses.len();
    for (f, pose) in gt.poses.iter_mut().enumerate() {
        let yaw = if n > 1 {
            spec.yaw_spread * (2.0 * f as f64 / (n - 1) as f64 - 1.0)
        } else {
            0.0
        };
        let j = spec.rotation_jitter;
        let t = spec.translation_jitter;
        let r = Vec3::new(j * normal(&mut rng), yaw + j * normal(&mut rng), j * normal(&mut rng));
        pose.global_rotation = Quat::from_rotation_vector(&r);
        pose.global_translation = [t * normal(&mut rng), t * normal(&mut rng), spec.distance + 2.0 * t * normal(&mut rng)];
        pose.neck_rotation = Quat::from_rotation_vector(&Vec3::new(j * normal(&mut rng), 0.0, 0.0));
    }
    let mut rng = rng_stream(seed, "synth/lighting");
    for l in gt.lighting.iter_mut() {
        *l = spec.lighting_sigma * normal(&mut rng);
    }
    let mut rng = rng_stream(seed, "synth/splats");
    for p in gt.prototypes.iter_mut() {
        let mut tone = |base: f64, amp: f64| base + amp * (0.3 * normal(&mut rng)).tanh().abs();
        p.albedo = Vec3::new(tone(0.3, 0.5), tone(0.3, 0.3), tone(0.25, 0.3));
        p.opacity_logit = spec.opacity_logit;
        let s = spec.splat_perturbation;
        if s > 0.0 {
            for k in 0..3 {
                p.offset[k] += s * normal(&mut rng);
            }
            for k in 0..2 {
                p.log_scale[k] += s * normal(&mut rng);
            }
        }
    }

    if let Some(b) = &spec.beta {
        check_len("synth.beta", model.shape_dim(), b.len())?;
        gt.beta = b.clone();
    }
    if let Some(p) = &spec.psi {
        for row in p {
            check_len("synth.psi row", model.expr_dim(), row.len())?;
        }
        gt.psi = p.clone();
    }
    if let Some(p) = &spec.poses {
        gt.poses = p.clone();
    }
    if let Some(l) = &spec.lighting {
        check_len("synth.lighting", prior.dim, l.len())?;
        gt.lighting = l.clone();
    }
    gt.validate(model, prior)?;
    Ok(gt)
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(CliError::validation(format!("{what} has {actual} entries, the model needs {expected}")))
    }
}

/// Rendered observation of one ground-truth frame.
pub struct SynthFrame {
    /// Straight color.
    pub color: Image,
    pub alpha: Image,
    pub mask: Image,
    pub landmarks: Vec<Option<[f64; 2]>>,
    pub coverage: usize,
}

pub fn render_observation(
    model: &BlendshapeModel,
    prior: &LightingPrior,
    gt: &FitState,
    frame: usize,
    camera: &Camera,
) -> Result<SynthFrame> {
    let r = render_frame(model, prior, &FrameParams::of(gt, frame), camera, Vec3::zeros(), &RenderOptions::default())?;
    let alpha = r.buffers.alpha.clone();
    let mut color = r.buffers.color.clone();
    for p in 0..color.pixels() {
        let a = alpha.data[p];
        for c in 0..3 {
            let v = &mut color.data[3 * p + c];
            *v = if a > 1e-6 { (*v / a).min(1.0) } else { 0.0 };
        }
    }
    let landmarks = landmarks_3d(&r.vertices, model)
        .iter()
        .map(|p| camera.project(p))
        .map(|q| q.filter(|q| q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= camera.width as f64 && q[1] <= camera.height as f64))
        .collect();
    Ok(SynthFrame {
        color,
        alpha,
        mask: r.mesh.face_mask.clone(),
        landmarks,
        coverage: r.mesh.covered(),
    })
}

/// Uniform surface samples of a mesh, scaled to millimeters.
pub fn surface_samples(vertices: &[Vec3], faces: &[[u32; 3]], per_face: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = rng_stream(seed, "synth/scan");
    let mut out = Vec::with_capacity(faces.len() * per_face);
    for f in faces {
        let [a, b, c] = f.map(|i| vertices[i as usize]);
        for _ in 0..per_face {
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                (u, v) = (1.0 - u, 1.0 - v);
            }
            out.push((a + (b - a) * u + (c - a) * v) * 1000.0);
        }
    }
    out
}

/// Summary of a generated dataset.
#[derive(Clone, Debug)]
pub struct SynthReport {
    pub frames: usize,
    pub coverage: Vec<usize>,
    pub scan_points: usize,
}

/// Writes a complete dataset into `out`. Validation failures leave `out`
/// untouched.
pub fn write_dataset(spec: &SynthSpec, camera: &Camera, seed: u64, out: &Path) -> Result<SynthReport> {
    let model = load_model(spec.model.as_deref())?;
    let prior = load_prior(spec.prior.as_deref())?;
    camera
        .validate()
        .map_err(|e| CliError::validation(format!("camera: {e}")))?;
    let gt = ground_truth(&model, &prior, spec, seed)?;
    let frames: Vec<SynthFrame> = (0..spec.frames)
        .map(|f| render_observation(&model, &prior, &gt, f, camera))
        .collect::<Result<_>>()?;

    io_context(std::fs::create_dir_all(out), out)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        frames: spec.frames,
        camera: *camera,
        seed,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::runtime(e.to_string()))?;
    write_file(&out.join(MANIFEST), json.as_bytes())?;
    write_model(&out.join(MODEL_FILE), &model)?;
    write_prior(&out.join(PRIOR_FILE), &prior)?;
    for (f, fr) in frames.iter().enumerate() {
        let dir = frame_dir(out, f);
        io_context(std::fs::create_dir_all(&dir), &dir)?;
        write_png(&dir.join("color.png"), &fr.color)?;
        write_png(&dir.join("alpha.png"), &fr.alpha)?;
        write_png(&dir.join("mask.png"), &fr.mask)?;
        write_image_landmarks(&dir.join("landmarks.txt"), &fr.landmarks)?;
    }
    save_checkpoint(&out.join(GROUND_TRUTH_DIR), &gt)?;

    let neutral = neutral_mesh(&model, &gt.beta)?;
    write_obj(&out.join(GT_NEUTRAL), &neutral, &model.faces)?;
    let scan = surface_samples(&neutral, &model.faces, spec.scan_samples_per_face, seed);
    write_ply(&out.join(GT_SCAN), &ScanCloud::new(scan.clone()), PlyEncoding::BinaryLittleEndian)?;
    let lm: Vec<(usize, Vec3)> = landmarks_3d(&neutral, &model)
        .into_iter()
        .map(|p| p * 1000.0)
        .enumerate()
        .collect();
    write_file(&out.join(GT_LANDMARKS), emit_indexed_table(&lm).as_bytes())?;
    Ok(SynthReport {
        frames: spec.frames,
        coverage: frames.iter().map(|f| f.coverage).collect(),
        scan_points: scan.len(),
    })
}
