//! Resumable fit checkpoints: a directory holding `prototypes.bin` (see
//! [`crate::formats::blob`]) and `state.json` with every other field of
//! [`FitState`], Adam moments and densification history included.

use std::path::Path;

use headsplat_core::fit::{AdamState, FitState};
use headsplat_core::model::Pose;
use headsplat_core::rig::DensifyStats;
use serde::{Deserialize, Serialize};

use crate::error::{io_context, malformed, CliError, Result};
use crate::formats::blob::{read_prototypes, write_prototypes};
use crate::formats::{read_text, write_file};

pub const FORMAT: &str = "headsplat-checkpoint";
pub const VERSION: u32 = 1;
pub const PROTOTYPES_FILE: &str = "prototypes.bin";
pub const STATE_FILE: &str = "state.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    format: String,
    version: u32,
    prototype_count: usize,
    iteration: u64,
    seed: u64,
    beta: Vec<f64>,
    psi: Vec<Vec<f64>>,
    poses: Vec<Pose>,
    lighting: Vec<f64>,
    reference_log_scales: Vec<[f64; 2]>,
    adam: AdamState,
    stats: DensifyStats,
}

pub fn save_checkpoint(dir: &Path, state: &FitState) -> Result<()> {
    io_context(std::fs::create_dir_all(dir), dir)?;
    write_prototypes(&dir.join(PROTOTYPES_FILE), &state.prototypes)?;
    let rec = StateRecord {
        format: FORMAT.into(),
        version: VERSION,
        prototype_count: state.prototypes.len(),
        iteration: state.iteration,
        seed: state.seed,
        beta: state.beta.clone(),
        psi: state.psi.clone(),
        poses: state.poses.clone(),
        lighting: state.lighting.clone(),
        reference_log_scales: state.reference_log_scales.clone(),
        adam: state.adam.clone(),
        stats: state.stats.clone(),
    };
    let json = serde_json::to_string_pretty(&rec).map_err(|e| CliError::runtime(e.to_string()))?;
    write_file(&dir.join(STATE_FILE), json.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<FitState> {
    let state_path = dir.join(STATE_FILE);
    let text = read_text(&state_path)?;
    let probe: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(&state_path, e))?;
    let format = probe.get("format").and_then(|v| v.as_str());
    let version = probe.get("version").and_then(|v| v.as_u64());
    if format != Some(FORMAT) {
        return Err(malformed(&state_path, format!("format tag {format:?}, expected {FORMAT:?}")));
    }
    match version {
        Some(v) if v == VERSION as u64 => {}
        Some(v) => {
            return Err(malformed(
                &state_path,
                format!("checkpoint version {v}, this build reads version {VERSION}"),
            ))
        }
        None => return Err(malformed(&state_path, "checkpoint has no version field")),
    }
    let rec: StateRecord = serde_json::from_value(probe).map_err(|e| malformed(&state_path, e))?;
    let proto_path = dir.join(PROTOTYPES_FILE);
    let prototypes = read_prototypes(&proto_path)?;
    if prototypes.len() != rec.prototype_count {
        return Err(malformed(
            &proto_path,
            format!(
                "{} prototypes, state records {}",
                prototypes.len(),
                rec.prototype_count
            ),
        ));
    }
    Ok(FitState {
        beta: rec.beta,
        psi: rec.psi,
        poses: rec.poses,
        lighting: rec.lighting,
        prototypes,
        reference_log_scales: rec.reference_log_scales,
        adam: rec.adam,
        iteration: rec.iteration,
        stats: rec.stats,
        seed: rec.seed,
    })
}
