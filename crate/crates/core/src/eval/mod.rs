//! Geometric evaluation: landmark-seeded similarity alignment, ICP
//! refinement and point-to-surface distance statistics in millimeters.

mod align;
mod bvh;

use alloc::format;
use alloc::vec::Vec;

pub use align::{align, Alignment};
pub use bvh::{closest_point_on_triangle, Bvh, ClosestPoint};

use crate::error::{check_len, Error, Result};
use crate::math::{sqrt, Vec3};
use crate::par::map_indexed;

/// Scan points, optionally with per-point confidence and a keep mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScanCloud {
    /// Millimeters.
    pub points: Vec<Vec3>,
    pub confidence: Option<Vec<f64>>,
    pub keep: Option<Vec<bool>>,
}

impl ScanCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        ScanCloud {
            points,
            confidence: None,
            keep: None,
        }
    }

    /// Points that pass the keep mask.
    pub fn kept(&self) -> Vec<Vec3> {
        match &self.keep {
            Some(k) => self.points.iter().zip(k).filter(|(_, k)| **k).map(|(p, _)| *p).collect(),
            None => self.points.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.confidence {
            check_len("scan confidence", self.points.len(), c.len())?;
        }
        if let Some(k) = &self.keep {
            check_len("scan keep mask", self.points.len(), k.len())?;
        }
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid("scan contains non-finite coordinates".into()));
        }
        Ok(())
    }
}

/// A landmark on the predicted mesh (model units) and its scan position (mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkPair {
    pub mesh: Vec3,
    pub scan: Vec3,
}

/// Distance from `p` to the mesh surface and the closest point.
pub fn point_to_surface(p: &Vec3, bvh: &Bvh) -> ClosestPoint {
    bvh.closest(p)
}

/// Alternates closest-point correspondences and [`align`], mapping `cloud`
/// onto the mesh. Stops after `iterations` rounds or once the RMS changes
/// by less than `1e-7`.
pub fn refine_icp(cloud: &[Vec3], bvh: &Bvh, initial: Alignment, iterations: usize, with_scale: bool) -> Result<Alignment> {
    let mut current = initial;
    if iterations == 0 || cloud.is_empty() {
        return Ok(current);
    }
    current.rms = rms_to_mesh(cloud, bvh, &current);
    for _ in 0..iterations {
        let targets = map_indexed(cloud.len(), |i| bvh.closest(&current.apply(&cloud[i])).point);
        let next = align(cloud, &targets, with_scale)?;
        let rms = rms_to_mesh(cloud, bvh, &next);
        if rms > current.rms {
            break;
        }
        let change = current.rms - rms;
        current = Alignment { rms, ..next };
        if change < 1e-7 {
            break;
        }
    }
    Ok(current)
}

fn rms_to_mesh(cloud: &[Vec3], bvh: &Bvh, a: &Alignment) -> f64 {
    let d = map_indexed(cloud.len(), |i| bvh.closest(&a.apply(&cloud[i])).distance);
    sqrt(d.iter().map(|x| x * x).sum::<f64>() / cloud.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Fit a scale factor (non-metrical evaluation).
    pub with_scale: bool,
    pub icp_iterations: usize,
    /// Multiplier turning mesh coordinates into millimeters.
    pub mesh_to_mm: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            with_scale: true,
            icp_iterations: 30,
            mesh_to_mm: 1000.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistanceStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub count: usize,
}

pub fn distance_stats(d: &[f64]) -> Result<DistanceStats> {
    if d.is_empty() {
        return Err(Error::Invalid("no distances to summarize".into()));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let mut s = d.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    let median = if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) };
    Ok(DistanceStats {
        mean,
        median,
        std: sqrt(var),
        count: d.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub stats: DistanceStats,
    /// Maps scan millimeters onto mesh millimeters.
    pub alignment: Alignment,
    pub distances: Vec<f64>,
}

/// Aligns the scan to the mesh on landmark pairs, refines with ICP and
/// reports point-to-surface distances in millimeters of the mesh frame.
pub fn evaluate(
    cloud: &ScanCloud,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    landmarks: &[LandmarkPair],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    cloud.validate()?;
    let points = cloud.kept();
    if points.is_empty() {
        return Err(Error::Invalid("scan has no points after filtering".into()));
    }
    let mm: Vec<Vec3> = vertices.iter().map(|v| v * opts.mesh_to_mm).collect();
    let bvh = Bvh::build(&mm, faces)?;
    let src: Vec<Vec3> = landmarks.iter().map(|l| l.scan).collect();
    let dst: Vec<Vec3> = landmarks.iter().map(|l| l.mesh * opts.mesh_to_mm).collect();
    let seed = align(&src, &dst, opts.with_scale)?;
    let alignment = refine_icp(&points, &bvh, seed, opts.icp_iterations, opts.with_scale)?;
    let distances = map_indexed(points.len(), |i| bvh.closest(&alignment.apply(&points[i])).distance);
    let stats = distance_stats(&distances)?;
    if !(stats.median <= stats.mean + 3.0 * stats.std + 1e-9) {
        return Err(Error::Invalid(format!(
            "distance statistics inconsistent: median {} > mean {} + 3 std {}",
            stats.median, stats.mean, stats.std
        )));
    }
    Ok(EvalReport {
        stats,
        alignment,
        distances,
    })
}
