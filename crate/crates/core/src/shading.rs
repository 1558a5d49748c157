//! Second-order spherical-harmonic Lambertian shading with a PCA lighting prior.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{check_len, Error, Result};
use crate::math::{abs, normalize, normalize_vjp, Vec3};

pub const SH_COEFFS: usize = 9;
/// 9 coefficients for each of 3 color channels.
pub const LIGHT_DIM: usize = 27;

pub const Y00: f64 = 0.282_094_791_773_878_14;
pub const Y1: f64 = 0.488_602_511_902_919_9;
pub const Y2_XY: f64 = 1.092_548_430_592_079_2;
pub const Y2_Z: f64 = 0.315_391_565_252_520_05;
pub const Y2_XX_YY: f64 = 0.546_274_215_296_039_6;

static NON_UNIT_NORMALS: AtomicU64 = AtomicU64::new(0);

/// How many non-unit normals [`sh_basis`] has renormalized so far.
pub fn non_unit_normal_count() -> u64 {
    NON_UNIT_NORMALS.load(Ordering::Relaxed)
}

/// Real SH basis `[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]`.
pub fn sh_basis(n: &Vec3) -> [f64; SH_COEFFS] {
    let len = n.norm();
    let n = if abs(len - 1.0) > 1e-4 {
        NON_UNIT_NORMALS.fetch_add(1, Ordering::Relaxed);
        normalize(n)
    } else {
        *n
    };
    sh_eval(&n)
}

fn sh_eval(n: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Y00,
        Y1 * y,
        Y1 * z,
        Y1 * x,
        Y2_XY * x * y,
        Y2_XY * y * z,
        Y2_Z * (3.0 * z * z - 1.0),
        Y2_XY * x * z,
        Y2_XX_YY * (x * x - y * y),
    ]
}

/// Transposed Jacobian of [`sh_eval`] applied to `g`.
fn sh_eval_vjp(n: &Vec3, g: &[f64; SH_COEFFS]) -> Vec3 {
    let (x, y, z) = (n.x, n.y, n.z);
    Vec3::new(
        Y1 * g[3] + Y2_XY * (y * g[4] + z * g[7]) + Y2_XX_YY * 2.0 * x * g[8],
        Y1 * g[1] + Y2_XY * (x * g[4] + z * g[5]) - Y2_XX_YY * 2.0 * y * g[8],
        Y1 * g[2] + Y2_XY * (y * g[5] + x * g[7]) + Y2_Z * 6.0 * z * g[6],
    )
}

/// `w = mean + P l`, with `P` stored 27 x D. Coefficient `k` of channel `j`
/// lives at flat index `j * 9 + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LightingPrior {
    pub mean: [f64; LIGHT_DIM],
    /// Row-major 27 x D.
    pub basis: Vec<f64>,
    pub dim: usize,
}

impl LightingPrior {
    pub fn new(mean: [f64; LIGHT_DIM], basis: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("lighting prior needs at least one component".into()));
        }
        check_len("lighting basis", LIGHT_DIM * dim, basis.len())?;
        Ok(LightingPrior { mean, basis, dim })
    }

    /// Builds the prior from components given as D rows of 27 values.
    pub fn from_components(mean: [f64; LIGHT_DIM], rows: &[[f64; LIGHT_DIM]]) -> Result<Self> {
        let dim = rows.len();
        let mut basis = vec![0.0; LIGHT_DIM * dim];
        for (d, row) in rows.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                basis[i * dim + d] = *v;
            }
        }
        Self::new(mean, basis, dim)
    }

    /// The components as D rows of 27 values.
    pub fn components(&self) -> Vec<[f64; LIGHT_DIM]> {
        (0..self.dim)
            .map(|d| core::array::from_fn(|i| self.basis[i * self.dim + d]))
            .collect()
    }

    /// Identity prior: D = 27, zero mean.
    pub fn identity() -> Self {
        let mut basis = vec![0.0; LIGHT_DIM * LIGHT_DIM];
        for i in 0..LIGHT_DIM {
            basis[i * LIGHT_DIM + i] = 1.0;
        }
        LightingPrior {
            mean: [0.0; LIGHT_DIM],
            basis,
            dim: LIGHT_DIM,
        }
    }

    /// Built-in D = 9 prior: warm ambient light with a weak frontal key,
    /// and one component per SH coefficient shared across channels.
    pub fn synthetic() -> Self {
        let mut mean = [0.0; LIGHT_DIM];
        let warm = [1.0, 0.95, 0.88];
        for (j, w) in warm.iter().enumerate() {
            mean[j * SH_COEFFS] = w / Y00 * 0.85;
            // key light toward -z (from the camera), slightly above
            mean[j * SH_COEFFS + 2] = -0.25 * w;
            mean[j * SH_COEFFS + 1] = 0.1 * w;
        }
        let mut rows = Vec::with_capacity(SH_COEFFS);
        for k in 0..SH_COEFFS {
            let scale = if k == 0 { 0.5 } else if k < 4 { 0.3 } else { 0.15 };
            let mut row = [0.0; LIGHT_DIM];
            for j in 0..3 {
                row[j * SH_COEFFS + k] = scale;
            }
            rows.push(row);
        }
        Self::from_components(mean, &rows).expect("static prior is well formed")
    }
}

pub type ShCoeffs = [[f64; SH_COEFFS]; 3];

pub fn lighting_coeffs(prior: &LightingPrior, code: &[f64]) -> Result<ShCoeffs> {
    check_len("lighting code", prior.dim, code.len())?;
    let mut w = [[0.0; SH_COEFFS]; 3];
    for (i, slot) in w.iter_mut().flatten().enumerate() {
        let row = &prior.basis[i * prior.dim..(i + 1) * prior.dim];
        *slot = prior.mean[i] + row.iter().zip(code).map(|(p, l)| p * l).sum::<f64>();
    }
    Ok(w)
}

/// Gradient on the lighting code given the gradient on the coefficients.
pub fn lighting_coeffs_backward(prior: &LightingPrior, g: &ShCoeffs) -> Vec<f64> {
    let mut out = vec![0.0; prior.dim];
    for (i, gi) in g.iter().flatten().enumerate() {
        let row = &prior.basis[i * prior.dim..(i + 1) * prior.dim];
        for (o, p) in out.iter_mut().zip(row) {
            *o += p * gi;
        }
    }
    out
}

/// `c_j = max(0, a_j * sum_k w_jk SH_k(n))`.
pub fn shade(albedo: &Vec3, normal: &Vec3, w: &ShCoeffs) -> Vec3 {
    let sh = sh_basis(normal);
    Vec3::from_fn(|j, _| {
        let irr: f64 = w[j].iter().zip(&sh).map(|(a, b)| a * b).sum();
        (albedo[j] * irr).max(0.0)
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShadeGrad {
    pub albedo: Vec3,
    pub normal: Vec3,
    pub coeffs: ShCoeffs,
}

/// Backward of [`shade`]. The normal gradient includes the renormalization
/// applied to non-unit inputs.
pub fn shade_backward(albedo: &Vec3, normal: &Vec3, w: &ShCoeffs, g: &Vec3) -> ShadeGrad {
    let n = normalize(normal);
    let sh = sh_eval(&n);
    let mut out = ShadeGrad::default();
    let mut g_sh = [0.0; SH_COEFFS];
    for j in 0..3 {
        let irr: f64 = w[j].iter().zip(&sh).map(|(a, b)| a * b).sum();
        if albedo[j] * irr <= 0.0 {
            continue;
        }
        out.albedo[j] = g[j] * irr;
        let gi = g[j] * albedo[j];
        for k in 0..SH_COEFFS {
            out.coeffs[j][k] = gi * sh[k];
            g_sh[k] += gi * w[j][k];
        }
    }
    out.normal = normalize_vjp(normal, &sh_eval_vjp(&n, &g_sh));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants() {
        let b = sh_basis(&Vec3::new(0.0, 0.0, 1.0));
        assert!((b[0] - 0.2820947918).abs() < 1e-9);
        assert!((b[2] - 0.4886025119).abs() < 1e-9);
        assert_eq!((b[1], b[3]), (0.0, 0.0));
        assert!((b[6] - 0.6307831306).abs() < 1e-9);
    }

    #[test]
    fn dc_light_reproduces_albedo() {
        let mut w = [[0.0; SH_COEFFS]; 3];
        for ch in &mut w {
            ch[0] = 1.0 / Y00;
        }
        let a = Vec3::new(0.2, 0.5, 0.9);
        for n in [Vec3::x(), Vec3::new(0.3, -0.4, 0.5).normalize(), -Vec3::z()] {
            let c = shade(&a, &n, &w);
            assert!((c - a).abs().max() < 1e-15);
        }
    }

    #[test]
    fn identity_prior_places_unit() {
        let p = LightingPrior::identity();
        for k in [0, 5, 13, 26] {
            let mut l = vec![0.0; 27];
            l[k] = 1.0;
            let w = lighting_coeffs(&p, &l).unwrap();
            let flat: Vec<f64> = w.iter().flatten().copied().collect();
            for (i, v) in flat.iter().enumerate() {
                assert_eq!(*v, if i == k { 1.0 } else { 0.0 });
            }
        }
        assert!(lighting_coeffs(&p, &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_code_gives_mean() {
        let p = LightingPrior::synthetic();
        let w = lighting_coeffs(&p, &[0.0; 9]).unwrap();
        let flat: Vec<f64> = w.iter().flatten().copied().collect();
        assert_eq!(flat.as_slice(), &p.mean[..]);
    }

    #[test]
    fn component_rows_roundtrip() {
        let p = LightingPrior::synthetic();
        let q = LightingPrior::from_components(p.mean, &p.components()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn non_unit_normals_are_counted() {
        let before = non_unit_normal_count();
        let b = sh_basis(&Vec3::new(0.0, 0.0, 2.0));
        assert!(non_unit_normal_count() > before);
        assert!((b[2] - Y1).abs() < 1e-15);
    }

    #[test]
    fn shade_backward_matches_finite_differences() {
        let p = LightingPrior::synthetic();
        let w = lighting_coeffs(&p, &[0.1, -0.2, 0.3, 0.05, 0.0, 0.1, -0.1, 0.2, 0.0]).unwrap();
        let a = Vec3::new(0.6, 0.4, 0.3);
        let n = Vec3::new(0.2, 0.3, -0.9).normalize();
        let g = Vec3::new(0.7, -0.3, 1.1);
        let an = shade_backward(&a, &n, &w, &g);
        let f = |a: &Vec3, n: &Vec3, w: &ShCoeffs| shade(a, n, w).dot(&g);
        let h = 1e-6;
        for k in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let fd = (f(&ap, &n, &w) - f(&am, &n, &w)) / (2.0 * h);
            assert!((fd - an.albedo[k]).abs() < 1e-8);
        }
        // tangent-plane steps on the sphere
        let t1 = n.cross(&Vec3::x()).normalize();
        let t2 = n.cross(&t1);
        for t in [t1, t2] {
            let np = (n + t * h).normalize();
            let nm = (n - t * h).normalize();
            let fd = (f(&a, &np, &w) - f(&a, &nm, &w)) / (2.0 * h);
            let an_t = an.normal.dot(&t);
            assert!((fd - an_t).abs() <= 1e-4 * an_t.abs().max(1e-3));
        }
    }
}
