//! Dataset directory layout shared by `synth` (writer) and `fit`/`render`
//! (readers).
//!
//! ```text
//! dataset.json            frame count, camera, seed
//! model.hsmodel           blendshape model
//! prior.txt               lighting prior
//! frame_000/color.png     straight RGB
//! frame_000/alpha.png     foreground matte (optional)
//! frame_000/mask.png      face-region mask (optional)
//! frame_000/landmarks.txt pixel landmarks
//! ```

use std::path::{Path, PathBuf};

use headsplat_core::fit::FitTarget;
use headsplat_core::model::BlendshapeModel;
use headsplat_core::render::Camera;
use headsplat_core::shading::LightingPrior;
use serde::{Deserialize, Serialize};

use crate::error::{malformed, CliError, Result};
use crate::formats::image::{first_channel, read_image};
use crate::formats::landmarks::read_image_landmarks;
use crate::formats::model::read_model;
use crate::formats::prior::read_prior;
use crate::formats::read_text;

pub const FORMAT: &str = "headsplat-dataset";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "dataset.json";
pub const MODEL_FILE: &str = "model.hsmodel";
pub const PRIOR_FILE: &str = "prior.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub camera: Camera,
    pub seed: u64,
}

pub fn frame_dir(root: &Path, frame: usize) -> PathBuf {
    root.join(format!("frame_{frame:03}"))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub model: BlendshapeModel,
    pub prior: LightingPrior,
    pub targets: Vec<FitTarget>,
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(CliError::validation(format!("{} is not a dataset: missing {MANIFEST}", root.display())));
    }
    let m: Manifest = serde_json::from_str(&read_text(&path)?).map_err(|e| malformed(&path, e))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(malformed(
            &path,
            format!("dataset {} v{}, this build reads {FORMAT} v{VERSION}", m.format, m.version),
        ));
    }
    if m.frames == 0 {
        return Err(malformed(&path, "dataset has no frames"));
    }
    Ok(m)
}

/// Model and prior of a dataset.
pub fn read_assets(root: &Path) -> Result<(BlendshapeModel, LightingPrior)> {
    Ok((read_model(&root.join(MODEL_FILE))?, read_prior(&root.join(PRIOR_FILE))?))
}

impl Dataset {
    /// Loads and checks everything before any compute happens.
    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest = read_manifest(root)?;
        let (model, prior) = read_assets(root)?;
        let cam = manifest.camera;
        let mut targets = Vec::with_capacity(manifest.frames);
        for f in 0..manifest.frames {
            let dir = frame_dir(root, f);
            let color_path = dir.join("color.png");
            if !color_path.exists() {
                return Err(CliError::validation(format!("missing target image {}", color_path.display())));
            }
            let color = read_image(&color_path)?;
            let image = match color.channels {
                3 => color,
                4 => {
                    let data = (0..color.pixels()).flat_map(|p| color.pixel(p)[..3].to_vec()).collect();
                    headsplat_core::image::Image::from_data(color.width, color.height, 3, data)?
                }
                c => return Err(malformed(&color_path, format!("expected RGB, found {c} channels"))),
            };
            let optional = |name: &str| -> Result<Option<headsplat_core::image::Image>> {
                let p = dir.join(name);
                if p.exists() {
                    Ok(Some(first_channel(&read_image(&p)?)))
                } else {
                    Ok(None)
                }
            };
            let lm_path = dir.join("landmarks.txt");
            let landmarks = if lm_path.exists() {
                read_image_landmarks(&lm_path, model.landmarks.len())?
            } else {
                vec![None; model.landmarks.len()]
            };
            let target = FitTarget {
                image,
                alpha: optional("alpha.png")?,
                mask: optional("mask.png")?,
                landmarks,
                camera: cam,
            };
            target
                .validate(&model)
                .map_err(|e| CliError::validation(format!("{}: {e}", dir.display())))?;
            targets.push(target);
        }
        Ok(Dataset {
            manifest,
            model,
            prior,
            targets,
        })
    }
}
