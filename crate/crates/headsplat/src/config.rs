//! TOML run configuration. Every section is optional and unknown keys are
//! rejected with the offending key named.
//!
//! ```toml
//! seed = 7
//!
//! [camera]
//! width = 128
//! height = 128
//!
//! [synth]
//! output = "data"
//! frames = 4
//!
//! [fit]
//! dataset = "data"
//! output = "run"
//! freeze = ["shape"]
//!
//! [fit.settings]
//! iterations = 1000
//!
//! [fit.settings.weights]
//! landmarks = 1.0
//! ```

use std::path::{Path, PathBuf};

use headsplat_core::fit::FitConfig;
use headsplat_core::model::Pose;
use headsplat_core::render::Camera;
use serde::{Deserialize, Serialize};

use crate::error::{io_context, CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraConfig,
    pub synth: SynthSpec,
    pub fit: FitSection,
    pub render: RenderSection,
    pub eval: EvalSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        let c = Camera::new(128, 128);
        CameraConfig {
            width: c.width,
            height: c.height,
            fov_y_deg: c.fov_y_deg,
            near: c.near,
            far: c.far,
        }
    }
}

impl CameraConfig {
    pub fn camera(&self) -> Camera {
        Camera {
            fov_y_deg: self.fov_y_deg,
            near: self.near,
            far: self.far,
            ..Camera::new(self.width, self.height)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(CliError::validation(format!(
                "camera.width/camera.height = {}x{} must both be >= 16",
                self.width, self.height
            )));
        }
        self.camera()
            .validate()
            .map_err(|e| CliError::validation(format!("camera: {e}")))
    }
}

/// Ground truth and perturbation levels for a synthetic dataset. Explicit
/// `beta`, `psi`, `poses` or `lighting` replace the sampled values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub output: PathBuf,
    pub frames: usize,
    /// HSMODEL file; the bundled procedural head when absent.
    pub model: Option<PathBuf>,
    /// Lighting prior file; the built-in synthetic prior when absent.
    pub prior: Option<PathBuf>,
    pub shape_sigma: f64,
    pub expression_sigma: f64,
    pub lighting_sigma: f64,
    /// Frames are spread evenly over `[-yaw_spread, yaw_spread]` radians.
    pub yaw_spread: f64,
    /// Standard deviation of the random rotation added per frame, radians.
    pub rotation_jitter: f64,
    /// Standard deviation of the random translation per frame, meters.
    pub translation_jitter: f64,
    /// Head distance from the camera, meters.
    pub distance: f64,
    /// Standard deviation of the noise added to splat offsets and
    /// log-scales.
    pub splat_perturbation: f64,
    pub opacity_logit: f64,
    /// Surface samples per face in the ground-truth scan.
    pub scan_samples_per_face: usize,
    pub beta: Option<Vec<f64>>,
    pub psi: Option<Vec<Vec<f64>>>,
    pub poses: Option<Vec<Pose>>,
    pub lighting: Option<Vec<f64>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            output: PathBuf::from("synth"),
            frames: 4,
            model: None,
            prior: None,
            shape_sigma: 0.8,
            expression_sigma: 0.5,
            lighting_sigma: 0.3,
            yaw_spread: 0.45,
            rotation_jitter: 0.03,
            translation_jitter: 0.005,
            distance: 1.0,
            splat_perturbation: 0.0,
            opacity_logit: 2.0,
            scan_samples_per_face: 2,
            beta: None,
            psi: None,
            poses: None,
            lighting: None,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(CliError::validation("synth.frames must be >= 1"));
        }
        for (name, v) in [
            ("synth.shape_sigma", self.shape_sigma),
            ("synth.expression_sigma", self.expression_sigma),
            ("synth.lighting_sigma", self.lighting_sigma),
            ("synth.rotation_jitter", self.rotation_jitter),
            ("synth.translation_jitter", self.translation_jitter),
            ("synth.splat_perturbation", self.splat_perturbation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::validation(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !self.yaw_spread.is_finite() || !self.opacity_logit.is_finite() {
            return Err(CliError::validation("synth.yaw_spread and synth.opacity_logit must be finite"));
        }
        if !(self.distance > 0.0 && self.distance.is_finite()) {
            return Err(CliError::validation(format!("synth.distance = {} must be > 0", self.distance)));
        }
        if self.scan_samples_per_face == 0 {
            return Err(CliError::validation("synth.scan_samples_per_face must be >= 1"));
        }
        if let Some(p) = &self.psi {
            if p.len() != self.frames {
                return Err(CliError::validation(format!(
                    "synth.psi has {} rows for {} frames",
                    p.len(),
                    self.frames
                )));
            }
        }
        if let Some(p) = &self.poses {
            if p.len() != self.frames {
                return Err(CliError::validation(format!(
                    "synth.poses has {} entries for {} frames",
                    p.len(),
                    self.frames
                )));
            }
        }
        Ok(())
    }
}

/// Parameter groups that `freeze` can pin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Splats,
    Shape,
    Expression,
    Pose,
    Lighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    pub freeze: Vec<Group>,
    /// Write a checkpoint every N iterations (0 = only at the end).
    pub checkpoint_every: u64,
    /// Write a color snapshot of frame 0 every N iterations (0 = never).
    pub snapshot_every: u64,
    /// Distance of the initial head pose from the camera, meters.
    pub initial_distance: f64,
    pub settings: FitConfig,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            dataset: PathBuf::from("synth"),
            output: PathBuf::from("fit"),
            resume: None,
            freeze: Vec::new(),
            checkpoint_every: 0,
            snapshot_every: 0,
            initial_distance: 1.0,
            settings: FitConfig::default(),
        }
    }
}

impl FitSection {
    /// Settings with frozen groups at learning rate 0.
    pub fn effective_settings(&self, seed: u64) -> FitConfig {
        let mut c = self.settings;
        c.seed = seed;
        for g in &self.freeze {
            let lr = &mut c.learning_rates;
            match g {
                Group::Splats => lr.splats = 0.0,
                Group::Shape => lr.shape = 0.0,
                Group::Expression => lr.expression = 0.0,
                Group::Pose => lr.pose = 0.0,
                Group::Lighting => lr.lighting = 0.0,
            }
        }
        c
    }

    fn validate(&self) -> Result<()> {
        self.settings
            .validate()
            .map_err(|e| CliError::validation(format!("fit.settings: {e}")))?;
        if !(self.initial_distance > 0.0 && self.initial_distance.is_finite()) {
            return Err(CliError::validation(format!(
                "fit.initial_distance = {} must be > 0",
                self.initial_distance
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub checkpoint: PathBuf,
    /// Dataset providing model, prior and camera.
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Frame whose expression and pose are the starting point.
    pub frame: usize,
    /// Replacement expression code.
    pub psi: Option<Vec<f64>>,
    /// Rotation vector in degrees applied on top of the frame's global
    /// rotation.
    pub rotate_deg: Option<[f64; 3]>,
    /// Replacement global translation.
    pub translation: Option<[f64; 3]>,
    /// Camera override; the dataset camera when absent.
    pub camera: Option<CameraConfig>,
    pub ppm: bool,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection {
            checkpoint: PathBuf::from("fit/checkpoint"),
            dataset: PathBuf::from("synth"),
            output: PathBuf::from("render"),
            frame: 0,
            psi: None,
            rotate_deg: None,
            translation: None,
            camera: None,
            ppm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mesh: PathBuf,
    pub scan: PathBuf,
    pub landmarks: PathBuf,
    /// Model whose landmark embedding resolves indexed landmark rows; the
    /// bundled head when absent.
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub metrical: bool,
    pub icp_iterations: usize,
    /// Multiplier from mesh units to millimeters.
    pub mesh_to_mm: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mesh: PathBuf::from("fit/final_neutral.obj"),
            scan: PathBuf::from("synth/gt_scan.ply"),
            landmarks: PathBuf::from("synth/gt_landmarks.txt"),
            model: None,
            output: None,
            metrical: false,
            icp_iterations: 30,
            mesh_to_mm: 1000.0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("config: {}", e.message())).context(describe_span(text, e.span())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io_context(std::fs::read_to_string(path), path)?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.synth.validate()?;
        self.fit.validate()?;
        if !(self.eval.mesh_to_mm > 0.0 && self.eval.mesh_to_mm.is_finite()) {
            return Err(CliError::validation(format!(
                "eval.mesh_to_mm = {} must be > 0",
                self.eval.mesh_to_mm
            )));
        }
        Ok(())
    }
}

fn describe_span(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}")
        }
        None => "config".into(),
    }
}
