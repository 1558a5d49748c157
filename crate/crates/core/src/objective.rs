//! Loss terms and their gradients.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::math::{ln, logistic, sign0, slice_norm, slice_norm_grad, Vec3};
use crate::raster::MeshBuffers;
use crate::render::RenderBuffers;
use crate::rig::{GaussianPrototype, PrototypeGrad};

pub const BETA_CLAMP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub l1: f64,
    pub landmarks: f64,
    pub normals: f64,
    pub depth: f64,
    pub offset: f64,
    pub scale: f64,
    pub opacity: f64,
    pub expression: f64,
    pub shape: f64,
    pub perceptual: f64,
    pub identity: f64,
    pub emotion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            landmarks: 0.005,
            normals: 0.1,
            depth: 0.1,
            offset: 0.01,
            scale: 0.01,
            opacity: 0.001,
            expression: 1e-4,
            shape: 1e-4,
            perceptual: 0.0,
            identity: 0.0,
            emotion: 0.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            l1: 0.0,
            landmarks: 0.0,
            normals: 0.0,
            depth: 0.0,
            offset: 0.0,
            scale: 0.0,
            opacity: 0.0,
            expression: 0.0,
            shape: 0.0,
            perceptual: 0.0,
            identity: 0.0,
            emotion: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Invalid(alloc::format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 12] {
        [
            ("l1", self.l1),
            ("landmarks", self.landmarks),
            ("normals", self.normals),
            ("depth", self.depth),
            ("offset", self.offset),
            ("scale", self.scale),
            ("opacity", self.opacity),
            ("expression", self.expression),
            ("shape", self.shape),
            ("perceptual", self.perceptual),
            ("identity", self.identity),
            ("emotion", self.emotion),
        ]
    }
}

/// Unweighted loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTerms {
    pub l1: f64,
    pub landmarks: f64,
    pub normals: f64,
    pub depth: f64,
    pub offset: f64,
    pub scale: f64,
    pub opacity: f64,
    pub expression: f64,
    pub shape: f64,
    pub perceptual: f64,
    pub identity: f64,
    pub emotion: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 12] {
        [
            ("l1", self.l1),
            ("landmarks", self.landmarks),
            ("normals", self.normals),
            ("depth", self.depth),
            ("offset", self.offset),
            ("scale", self.scale),
            ("opacity", self.opacity),
            ("expression", self.expression),
            ("shape", self.shape),
            ("perceptual", self.perceptual),
            ("identity", self.identity),
            ("emotion", self.emotion),
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.named().iter().zip(w.named()).map(|((_, v), (_, w))| if w == 0.0 { 0.0 } else { v * w }).sum()
    }

    /// First term that is not finite.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub iteration: u64,
    pub terms: LossTerms,
    pub total: f64,
}

impl LossReport {
    pub fn new(iteration: u64, terms: LossTerms, weights: &LossWeights) -> Self {
        LossReport {
            iteration,
            terms,
            total: terms.weighted_total(weights),
        }
    }
}

fn mask_weight(m: f64) -> f64 {
    0.7 * m + 0.3
}

/// Mean over pixels and channels of `|target - rendered| (0.7 M + 0.3)`.
pub fn photometric_l1(target: &Image, rendered: &Image, mask: &Image) -> Result<f64> {
    check_images(target, rendered, mask)?;
    let c = target.channels;
    let mut sum = 0.0;
    for (i, (t, r)) in target.data.iter().zip(&rendered.data).enumerate() {
        sum += (t - r).abs() * mask_weight(mask.data[i / c]);
    }
    Ok(sum / target.data.len().max(1) as f64)
}

/// Gradient of `scale * photometric_l1` with respect to `rendered`.
pub fn photometric_l1_backward(target: &Image, rendered: &Image, mask: &Image, scale: f64) -> Result<Image> {
    check_images(target, rendered, mask)?;
    let c = target.channels;
    let k = scale / target.data.len().max(1) as f64;
    let mut g = Image::new(rendered.width, rendered.height, c);
    for (i, (t, r)) in target.data.iter().zip(&rendered.data).enumerate() {
        g.data[i] = k * sign0(r - t) * mask_weight(mask.data[i / c]);
    }
    Ok(g)
}

fn check_images(target: &Image, rendered: &Image, mask: &Image) -> Result<()> {
    if !target.same_shape(rendered) {
        return Err(Error::Dimension {
            what: "rendered image",
            expected: target.data.len(),
            actual: rendered.data.len(),
        });
    }
    mask.check_shape("face mask", target.width, target.height, 1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LandmarkLoss {
    pub value: f64,
    pub valid: usize,
}

/// Mean L1 between projected and target landmarks with pixel coordinates
/// divided by the image size. Pairs where either side is missing are
/// skipped; with no valid pair the loss is 0.
pub fn landmark_loss(
    predicted: &[Option<[f64; 2]>],
    target: &[Option<[f64; 2]>],
    width: usize,
    height: usize,
) -> Result<LandmarkLoss> {
    check_len("target landmarks", predicted.len(), target.len())?;
    let (w, h) = (width as f64, height as f64);
    let mut sum = 0.0;
    let mut valid = 0;
    for (p, t) in predicted.iter().zip(target) {
        if let (Some(p), Some(t)) = (p, t) {
            sum += ((p[0] - t[0]) / w).abs() + ((p[1] - t[1]) / h).abs();
            valid += 1;
        }
    }
    Ok(LandmarkLoss {
        value: if valid == 0 { 0.0 } else { sum / (2 * valid) as f64 },
        valid,
    })
}

/// Gradient of `scale * landmark_loss` with respect to predicted pixels.
pub fn landmark_loss_backward(
    predicted: &[Option<[f64; 2]>],
    target: &[Option<[f64; 2]>],
    width: usize,
    height: usize,
    scale: f64,
) -> Result<Vec<Option<[f64; 2]>>> {
    check_len("target landmarks", predicted.len(), target.len())?;
    let valid = predicted.iter().zip(target).filter(|(p, t)| p.is_some() && t.is_some()).count();
    let (w, h) = (width as f64, height as f64);
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(p, t)| match (p, t) {
            (Some(p), Some(t)) => {
                let k = scale / (2 * valid) as f64;
                Some([k * sign0(p[0] - t[0]) / w, k * sign0(p[1] - t[1]) / h])
            }
            _ => None,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CouplingLosses {
    pub normals: f64,
    pub depth: f64,
    /// Pixels that are both face region and covered by the mesh.
    pub pixels: usize,
}

fn coupling_pixels<'a>(mesh: &'a MeshBuffers, mask: &'a Image) -> impl Iterator<Item = usize> + 'a {
    (0..mesh.coverage.len()).filter(move |&p| mesh.coverage[p] && mask.data[p] > 0.5)
}

fn check_coupling(gauss: &RenderBuffers, mesh: &MeshBuffers, mask: &Image) -> Result<()> {
    let (w, h) = (gauss.width(), gauss.height());
    if mesh.width != w || mesh.height != h {
        return Err(Error::Dimension {
            what: "mesh buffers",
            expected: w * h,
            actual: mesh.width * mesh.height,
        });
    }
    mask.check_shape("face mask", w, h, 1)
}

/// Masked L1 between surfel and mesh normals (per component) and depths.
pub fn coupling_losses(gauss: &RenderBuffers, mesh: &MeshBuffers, mask: &Image) -> Result<CouplingLosses> {
    check_coupling(gauss, mesh, mask)?;
    let mut n_sum = 0.0;
    let mut d_sum = 0.0;
    let mut count = 0;
    for p in coupling_pixels(mesh, mask) {
        let gn = gauss.normal.pixel(p);
        let mn = mesh.normal[p];
        n_sum += (gn[0] - mn.x).abs() + (gn[1] - mn.y).abs() + (gn[2] - mn.z).abs();
        d_sum += (gauss.depth.data[p] - mesh.depth[p]).abs();
        count += 1;
    }
    if count == 0 {
        return Ok(CouplingLosses::default());
    }
    Ok(CouplingLosses {
        normals: n_sum / (3 * count) as f64,
        depth: d_sum / count as f64,
        pixels: count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingGrads {
    pub gauss_depth: Image,
    pub gauss_normal: Image,
    pub mesh_depth: Vec<f64>,
    pub mesh_normal: Vec<Vec3>,
}

/// Gradients of `w_normals * L_normals + w_depth * L_depth` on both
/// branches; callers pick which branch to propagate.
pub fn coupling_losses_backward(
    gauss: &RenderBuffers,
    mesh: &MeshBuffers,
    mask: &Image,
    w_normals: f64,
    w_depth: f64,
) -> Result<CouplingGrads> {
    check_coupling(gauss, mesh, mask)?;
    let (w, h) = (gauss.width(), gauss.height());
    let mut out = CouplingGrads {
        gauss_depth: Image::new(w, h, 1),
        gauss_normal: Image::new(w, h, 3),
        mesh_depth: vec![0.0; w * h],
        mesh_normal: vec![Vec3::zeros(); w * h],
    };
    let count = coupling_pixels(mesh, mask).count();
    if count == 0 {
        return Ok(out);
    }
    let kn = w_normals / (3 * count) as f64;
    let kd = w_depth / count as f64;
    for p in coupling_pixels(mesh, mask) {
        let gn = gauss.normal.pixel(p);
        let mn = mesh.normal[p];
        for c in 0..3 {
            let s = kn * sign0(gn[c] - mn[c]);
            out.gauss_normal.data[3 * p + c] = s;
            out.mesh_normal[p][c] = -s;
        }
        let s = kd * sign0(gauss.depth.data[p] - mesh.depth[p]);
        out.gauss_depth.data[p] = s;
        out.mesh_depth[p] = -s;
    }
    Ok(out)
}

/// Negative log-likelihood of Beta(0.5, 0.5) at `sigma`, clamped away from
/// 0 and 1.
pub fn beta_nll(sigma: f64) -> f64 {
    let s = sigma.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP);
    ln(PI) + 0.5 * ln(s) + 0.5 * ln(1.0 - s)
}

/// Derivative of [`beta_nll`] with respect to the opacity logit.
pub fn beta_nll_logit_grad(logit: f64) -> f64 {
    let s = logistic(logit);
    if s <= BETA_CLAMP || s >= 1.0 - BETA_CLAMP {
        0.0
    } else {
        0.5 - s
    }
}

/// What the scale regularizer measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScaleReg {
    /// Norm of the log-scale deviation from the face's initial log-scale.
    #[default]
    Deviation,
    /// Norm of the raw log-scales.
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianReg {
    pub offset: f64,
    pub scale: f64,
    pub opacity: f64,
}

fn scale_residual(p: &GaussianPrototype, reference: &[[f64; 2]], mode: ScaleReg) -> [f64; 2] {
    match mode {
        ScaleReg::Raw => p.log_scale,
        ScaleReg::Deviation => {
            let r = reference[p.parent_face as usize];
            [p.log_scale[0] - r[0], p.log_scale[1] - r[1]]
        }
    }
}

/// Sums over prototypes of `|offset|`, `|scale residual|` and the Beta NLL.
pub fn gaussian_reg(prototypes: &[GaussianPrototype], reference: &[[f64; 2]], mode: ScaleReg) -> GaussianReg {
    let mut out = GaussianReg::default();
    for p in prototypes {
        out.offset += p.offset.norm();
        out.scale += slice_norm(&scale_residual(p, reference, mode));
        out.opacity += beta_nll(p.opacity());
    }
    out
}

pub fn gaussian_reg_backward(
    prototypes: &[GaussianPrototype],
    reference: &[[f64; 2]],
    mode: ScaleReg,
    weights: &LossWeights,
    out: &mut [PrototypeGrad],
) -> Result<()> {
    check_len("prototype gradients", prototypes.len(), out.len())?;
    for (p, g) in prototypes.iter().zip(out.iter_mut()) {
        let o = [p.offset.x, p.offset.y, p.offset.z];
        let mut go = [0.0; 3];
        slice_norm_grad(&o, &mut go, weights.offset);
        g.offset += Vec3::from(go);
        slice_norm_grad(&scale_residual(p, reference, mode), &mut g.log_scale, weights.scale);
        g.opacity_logit += weights.opacity * beta_nll_logit_grad(p.opacity_logit);
    }
    Ok(())
}

/// `(|beta|, |psi|)`.
pub fn mmm_reg(beta: &[f64], psi: &[f64]) -> (f64, f64) {
    (slice_norm(beta), slice_norm(psi))
}

/// Image-to-feature map for perceptual-style losses.
pub trait FeatureExtractor: Sync {
    fn features(&self, image: &Image) -> Vec<f64>;

    /// Pullback of a feature-space gradient to the image, when available.
    fn features_vjp(&self, _image: &Image, _grad: &[f64]) -> Option<Image> {
        None
    }
}

/// Optional extractors for the perceptual, identity and emotion terms.
#[derive(Clone, Copy, Default)]
pub struct Extractors<'a> {
    pub perceptual: Option<&'a dyn FeatureExtractor>,
    pub identity: Option<&'a dyn FeatureExtractor>,
    pub emotion: Option<&'a dyn FeatureExtractor>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - cos(f(rendered), f(target))`.
pub fn feature_loss(ext: &dyn FeatureExtractor, rendered: &Image, target: &Image) -> f64 {
    let a = ext.features(rendered);
    let b = ext.features(target);
    let na = slice_norm(&a);
    let nb = slice_norm(&b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(&a, &b) / (na * nb)
}

/// Gradient of `scale * feature_loss` on the rendered image, if the
/// extractor can pull gradients back.
pub fn feature_loss_backward(ext: &dyn FeatureExtractor, rendered: &Image, target: &Image, scale: f64) -> Option<Image> {
    let a = ext.features(rendered);
    let b = ext.features(target);
    let na = slice_norm(&a);
    let nb = slice_norm(&b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let ab = dot(&a, &b);
    let g: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| -scale * (y / (na * nb) - ab * x / (na * na * na * nb)))
        .collect();
    ext.features_vjp(rendered, &g)
}

/// Everything [`total_loss`] reads.
pub struct LossInputs<'a> {
    pub target: &'a Image,
    pub rendered: &'a RenderBuffers,
    pub mask: &'a Image,
    pub mesh: &'a MeshBuffers,
    pub predicted_landmarks: &'a [Option<[f64; 2]>],
    pub target_landmarks: &'a [Option<[f64; 2]>],
    pub prototypes: &'a [GaussianPrototype],
    pub reference_log_scales: &'a [[f64; 2]],
    pub scale_reg: ScaleReg,
    pub beta: &'a [f64],
    pub psi: &'a [f64],
}

/// Evaluates every term. Terms with zero weight are still reported.
pub fn total_loss(
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    extractors: &Extractors<'_>,
    iteration: u64,
) -> Result<LossReport> {
    let (w, h) = (inputs.rendered.width(), inputs.rendered.height());
    let coupling = coupling_losses(inputs.rendered, inputs.mesh, inputs.mask)?;
    let reg = gaussian_reg(inputs.prototypes, inputs.reference_log_scales, inputs.scale_reg);
    let (nb, np) = mmm_reg(inputs.beta, inputs.psi);
    let feat = |e: Option<&dyn FeatureExtractor>| e.map_or(0.0, |e| feature_loss(e, &inputs.rendered.color, inputs.target));
    let terms = LossTerms {
        l1: photometric_l1(inputs.target, &inputs.rendered.color, inputs.mask)?,
        landmarks: landmark_loss(inputs.predicted_landmarks, inputs.target_landmarks, w, h)?.value,
        normals: coupling.normals,
        depth: coupling.depth,
        offset: reg.offset,
        scale: reg.scale,
        opacity: reg.opacity,
        expression: np,
        shape: nb,
        perceptual: feat(extractors.perceptual),
        identity: feat(extractors.identity),
        emotion: feat(extractors.emotion),
    };
    Ok(LossReport::new(iteration, terms, weights))
}
