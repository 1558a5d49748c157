//! The `synth`, `fit`, `render` and `eval` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use headsplat_core::eval::{evaluate, EvalOptions, EvalReport};
use headsplat_core::fit::{evaluate_frame, fit, render_frame, FitState, FrameParams, FrameRender, FrameSettings};
use headsplat_core::math::Quat;
use headsplat_core::model::{landmarks_3d, Pose};
use headsplat_core::objective::{Extractors, LossReport};
use headsplat_core::render::Camera;
use headsplat_core::Vec3;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{read_assets, read_manifest, Dataset};
use crate::error::{io_context, CliError, Result};
use crate::formats::image::{depth_to_gray, normal_to_rgb, write_png, write_ppm, write_raw};
use crate::formats::landmarks::{read_landmark_table, resolve_pairs};
use crate::formats::obj::{read_obj, write_obj};
use crate::formats::ply::read_ply;
use crate::formats::write_file;
use crate::synth::{load_model, neutral_mesh, write_dataset, SynthReport};

pub const CONFIG_ECHO: &str = "config.toml";
pub const LOSS_LOG: &str = "loss.jsonl";
pub const DENSIFY_LOG: &str = "densify.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const FINAL_NEUTRAL: &str = "final_neutral.obj";

fn create_dir(dir: &Path) -> Result<()> {
    io_context(std::fs::create_dir_all(dir), dir)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::runtime(e.to_string()))
}

/// Writes the effective config, plus the verbatim source text when a file
/// was given.
pub fn echo_config(dir: &Path, config: &RunConfig, source: Option<&str>) -> Result<()> {
    write_file(&dir.join(CONFIG_ECHO), config.to_toml().as_bytes())?;
    if let Some(text) = source {
        write_file(&dir.join("config.source.toml"), text.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_synth(config: &RunConfig, source: Option<&str>) -> Result<SynthReport> {
    config.validate()?;
    let out = &config.synth.output;
    let report = write_dataset(&config.synth, &config.camera.camera(), config.seed, out)?;
    echo_config(out, config, source)?;
    Ok(report)
}

/// Writes color/alpha PNG, depth and normal raw dumps and previews.
pub fn write_render(dir: &Path, r: &FrameRender, ppm: bool) -> Result<()> {
    create_dir(dir)?;
    let b = &r.buffers;
    write_png(&dir.join("color.png"), &b.color)?;
    write_png(&dir.join("alpha.png"), &b.alpha)?;
    if ppm {
        write_ppm(&dir.join("color.ppm"), &b.color)?;
    }
    write_raw(&dir.join("depth.raw"), &b.depth)?;
    write_raw(&dir.join("normal.raw"), &b.normal)?;
    write_png(&dir.join("depth.png"), &depth_to_gray(&b.depth, &b.alpha))?;
    write_png(&dir.join("normal.png"), &normal_to_rgb(&b.normal))?;
    Ok(())
}

#[derive(Serialize)]
struct LossLine<'a> {
    #[serde(flatten)]
    loss: &'a LossReport,
    prototypes: usize,
    skipped_splats: usize,
    wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyRecord {
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iterations: u64,
    pub prototypes: usize,
    /// Masked photometric L1 over all frames, black background, at the
    /// starting and final parameters.
    pub initial_l1: f64,
    pub final_l1: f64,
    pub densify_events: usize,
    pub wall_time: f64,
}

/// Frame-averaged masked L1 against black-composited targets.
fn photometric_l1(ds: &Dataset, state: &FitState, config: &headsplat_core::fit::FitConfig) -> Result<f64> {
    let settings = FrameSettings::from_config(config, Vec3::zeros());
    let mut sum = 0.0;
    for (f, t) in ds.targets.iter().enumerate() {
        let ev = evaluate_frame(
            &ds.model,
            &ds.prior,
            &FrameParams::of(state, f),
            t,
            &settings,
            None,
            &Extractors::default(),
            false,
        )?;
        sum += ev.report.terms.l1;
    }
    Ok(sum / ds.targets.len() as f64)
}

pub fn cmd_fit(config: &RunConfig, source: Option<&str>) -> Result<FitSummary> {
    config.validate()?;
    let fs = &config.fit;
    let settings = fs.effective_settings(config.seed);
    let ds = Dataset::load(&fs.dataset)?;
    let mut state = match &fs.resume {
        Some(dir) => {
            let s = load_checkpoint(dir)?;
            s.validate(&ds.model, &ds.prior)
                .map_err(|e| CliError::validation(format!("checkpoint {} does not fit the dataset: {e}", dir.display())))?;
            s
        }
        None => {
            let pose = Pose {
                global_translation: [0.0, 0.0, fs.initial_distance],
                ..Pose::default()
            };
            FitState::new(&ds.model, &ds.prior, ds.targets.len(), pose, &settings)?
        }
    };
    if state.frames() != ds.targets.len() {
        return Err(CliError::validation(format!(
            "checkpoint has {} frames, dataset has {}",
            state.frames(),
            ds.targets.len()
        )));
    }

    let out = &fs.output;
    create_dir(out)?;
    echo_config(out, config, source)?;
    let append = fs.resume.is_some();
    let open = |name: &str| -> Result<BufWriter<File>> {
        let p = out.join(name);
        let f = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&p);
        Ok(BufWriter::new(io_context(f, &p)?))
    };
    let mut loss_log = open(LOSS_LOG)?;
    let mut densify_log = open(DENSIFY_LOG)?;

    let initial_l1 = photometric_l1(&ds, &state, &settings)?;
    let start = Instant::now();
    let mut io_error: Option<std::io::Error> = None;
    let mut events = 0;
    let total = settings.iterations;
    while state.iteration < total {
        let mut stop = total;
        for every in [fs.checkpoint_every, fs.snapshot_every] {
            if let Some(k) = state.iteration.checked_div(every) {
                stop = stop.min((k + 1) * every);
            }
        }
        let chunk = headsplat_core::fit::FitConfig {
            iterations: stop,
            ..settings
        };
        let n_before = state.prototypes.len();
        let mut protos = n_before;
        fit(&ds.model, &ds.prior, &ds.targets, &chunk, &mut state, &Extractors::default(), |r| {
            let line = LossLine {
                loss: &r.loss,
                prototypes: protos,
                skipped_splats: r.skipped_splats,
                wall_time: start.elapsed().as_secs_f64(),
            };
            let mut res = serde_json::to_writer(&mut loss_log, &line)
                .map_err(std::io::Error::other)
                .and_then(|_| loss_log.write_all(b"\n"));
            if let Some(e) = &r.densify {
                events += 1;
                protos = e.after;
                let rec = DensifyRecord {
                    iteration: e.iteration,
                    before: e.before,
                    after: e.after,
                    n_prune: e.n_prune,
                    n_densify: e.n_densify,
                    prune_deficit: e.prune_deficit,
                    densify_deficit: e.densify_deficit,
                    min_per_face: e.min_per_face,
                    max_per_face: e.max_per_face,
                };
                res = res.and_then(|_| {
                    serde_json::to_writer(&mut densify_log, &rec).map_err(std::io::Error::other)?;
                    densify_log.write_all(b"\n")
                });
            }
            if let Err(e) = res {
                io_error.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_error.take() {
            return Err(CliError::runtime(format!("writing logs in {}: {e}", out.display())));
        }
        if fs.checkpoint_every > 0 && state.iteration % fs.checkpoint_every == 0 && state.iteration < total {
            save_checkpoint(&out.join(CHECKPOINT_DIR), &state)?;
        }
        if fs.snapshot_every > 0 && state.iteration % fs.snapshot_every == 0 {
            let r = render_frame(
                &ds.model,
                &ds.prior,
                &FrameParams::of(&state, 0),
                &ds.manifest.camera,
                Vec3::zeros(),
                &settings.render,
            )?;
            let dir = out.join("snapshots");
            create_dir(&dir)?;
            write_png(&dir.join(format!("iter_{:06}.png", state.iteration)), &r.buffers.color)?;
        }
    }
    loss_log.flush()?;
    densify_log.flush()?;

    save_checkpoint(&out.join(CHECKPOINT_DIR), &state)?;
    for f in 0..state.frames() {
        let r = render_frame(
            &ds.model,
            &ds.prior,
            &FrameParams::of(&state, f),
            &ds.manifest.camera,
            Vec3::zeros(),
            &settings.render,
        )?;
        let dir = out.join(format!("frame_{f:03}"));
        write_render(&dir, &r, false)?;
        write_obj(&dir.join("mesh.obj"), &r.vertices, &ds.model.faces)?;
    }
    write_obj(&out.join(FINAL_NEUTRAL), &neutral_mesh(&ds.model, &state.beta)?, &ds.model.faces)?;
    let summary = FitSummary {
        iterations: state.iteration,
        prototypes: state.prototypes.len(),
        initial_l1,
        final_l1: photometric_l1(&ds, &state, &settings)?,
        densify_events: events,
        wall_time: start.elapsed().as_secs_f64(),
    };
    write_file(&out.join(SUMMARY), to_json(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Output of [`cmd_render`]: the directory written and the pose used.
#[derive(Clone, Debug)]
pub struct RenderOutcome {
    pub output: PathBuf,
    pub pose: Pose,
}

pub fn cmd_render(config: &RunConfig, source: Option<&str>) -> Result<RenderOutcome> {
    config.validate()?;
    let rs = &config.render;
    let manifest = read_manifest(&rs.dataset)?;
    let (model, prior) = read_assets(&rs.dataset)?;
    let state = load_checkpoint(&rs.checkpoint)?;
    state
        .validate(&model, &prior)
        .map_err(|e| CliError::validation(format!("checkpoint {} does not fit the model: {e}", rs.checkpoint.display())))?;
    if rs.frame >= state.frames() {
        return Err(CliError::validation(format!(
            "render.frame = {} but the checkpoint has {} frames",
            rs.frame,
            state.frames()
        )));
    }
    let camera: Camera = match &rs.camera {
        Some(c) => {
            let cam = c.camera();
            cam.validate().map_err(|e| CliError::validation(format!("render.camera: {e}")))?;
            cam
        }
        None => manifest.camera,
    };
    let mut psi = state.psi[rs.frame].clone();
    if let Some(p) = &rs.psi {
        if p.len() != model.expr_dim() {
            return Err(CliError::validation(format!(
                "render.psi has {} entries, the model has {} expression modes",
                p.len(),
                model.expr_dim()
            )));
        }
        psi = p.clone();
    }
    let mut pose = state.poses[rs.frame];
    if let Some(r) = rs.rotate_deg {
        let rv = Vec3::new(r[0], r[1], r[2]) * (std::f64::consts::PI / 180.0);
        pose.global_rotation = Quat::from_rotation_vector(&rv).mul(&pose.global_rotation);
    }
    if let Some(t) = rs.translation {
        pose.global_translation = t;
    }
    let params = FrameParams {
        psi: &psi,
        pose: &pose,
        ..FrameParams::of(&state, rs.frame)
    };
    let r = render_frame(&model, &prior, &params, &camera, Vec3::zeros(), &config.fit.settings.render)?;
    write_render(&rs.output, &r, rs.ppm)?;
    write_obj(&rs.output.join("mesh.obj"), &r.vertices, &model.faces)?;
    echo_config(&rs.output, config, source)?;
    Ok(RenderOutcome {
        output: rs.output.clone(),
        pose,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub median_mm: f64,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub points: usize,
    pub metrical: bool,
    /// Scan-to-mesh similarity.
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub alignment_rms_mm: f64,
}

impl Metrics {
    fn from_report(r: &EvalReport, metrical: bool) -> Self {
        let a = &r.alignment;
        Metrics {
            median_mm: r.stats.median,
            mean_mm: r.stats.mean,
            std_mm: r.stats.std,
            points: r.stats.count,
            metrical,
            scale: a.scale,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| a.rotation[(i, j)])),
            translation: [a.translation.x, a.translation.y, a.translation.z],
            alignment_rms_mm: a.rms,
        }
    }
}

pub fn cmd_eval(config: &RunConfig) -> Result<Metrics> {
    config.validate()?;
    let es = &config.eval;
    let mesh = read_obj(&es.mesh)?;
    let cloud = read_ply(&es.scan)?;
    let rows = read_landmark_table(&es.landmarks)?;
    let needs_model = rows
        .iter()
        .any(|r| matches!(r, crate::formats::landmarks::LandmarkRow::Indexed { .. }));
    let mesh_lm = if needs_model {
        let model = load_model(es.model.as_deref())?;
        if model.vertex_count() != mesh.vertices.len() || model.faces != mesh.faces {
            return Err(CliError::validation(format!(
                "{} does not share the model topology needed by indexed landmarks",
                es.mesh.display()
            )));
        }
        Some(landmarks_3d(&mesh.vertices, &model))
    } else {
        None
    };
    let pairs = resolve_pairs(&rows, mesh_lm.as_deref())
        .map_err(|m| CliError::validation(format!("{}: {m}", es.landmarks.display())))?;
    let opts = EvalOptions {
        with_scale: !es.metrical,
        icp_iterations: es.icp_iterations,
        mesh_to_mm: es.mesh_to_mm,
    };
    let report = evaluate(&cloud, &mesh.vertices, &mesh.faces, &pairs, &opts)?;
    let metrics = Metrics::from_report(&report, es.metrical);
    if let Some(p) = &es.output {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_file(p, to_json(&metrics)?.as_bytes())?;
    }
    Ok(metrics)
}

pub fn metrics_json(m: &Metrics) -> Result<String> {
    to_json(m)
}
