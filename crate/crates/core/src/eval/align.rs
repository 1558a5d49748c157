use alloc::format;

use crate::error::{check_len, Error, Result};
use crate::math::{sqrt, Mat3, Vec3};

/// Similarity transform `x -> scale * rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Alignment {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
    /// Root-mean-square residual over the fitted pairs.
    pub rms: f64,
}

impl Alignment {
    pub const IDENTITY: Alignment = Alignment {
        rotation: Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vec3::new(0.0, 0.0, 0.0),
        scale: 1.0,
        rms: 0.0,
    };

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity (or rigid, `with_scale = false`) transform
/// taking `source` onto `target`, from the SVD of the cross-covariance with
/// the reflection case excluded.
pub fn align(source: &[Vec3], target: &[Vec3], with_scale: bool) -> Result<Alignment> {
    check_len("alignment targets", source.len(), target.len())?;
    let n = source.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("alignment needs at least 3 pairs, got {n}")));
    }
    let inv = 1.0 / n as f64;
    let ms = source.iter().fold(Vec3::zeros(), |a, p| a + p) * inv;
    let mt = target.iter().fold(Vec3::zeros(), |a, p| a + p) * inv;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - ms;
        cov += (t - mt) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv;
    var_s *= inv;

    let svd = cov.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Degenerate("cross-covariance SVD did not converge".into())),
    };
    let sv = svd.singular_values;
    // collinear sources leave only one informative direction
    let spread = source_spread(source, &ms);
    if var_s <= 0.0 || spread[1] <= 1e-12 * spread[0].max(1e-300) {
        return Err(Error::Degenerate("alignment points are collinear or coincident".into()));
    }
    let d = if u.determinant() * vt.determinant() < 0.0 { -1.0 } else { 1.0 };
    let s_diag = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = u * s_diag * vt;
    let scale = if with_scale {
        (sv[0] + sv[1] + d * sv[2]) / var_s
    } else {
        1.0
    };
    let translation = mt - rotation * ms * scale;
    let mut out = Alignment {
        rotation,
        translation,
        scale,
        rms: 0.0,
    };
    let sq: f64 = source.iter().zip(target).map(|(s, t)| (out.apply(s) - t).norm_squared()).sum();
    out.rms = sqrt(sq * inv);
    Ok(out)
}

/// Sorted eigenvalues (descending) of the source scatter matrix.
fn source_spread(source: &[Vec3], mean: &Vec3) -> [f64; 3] {
    let mut c = Mat3::zeros();
    for s in source {
        let d = s - mean;
        c += d * d.transpose();
    }
    let e = c.symmetric_eigenvalues();
    let mut v = [e[0], e[1], e[2]];
    v.sort_by(|a, b| b.total_cmp(a));
    v
}
