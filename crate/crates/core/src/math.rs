//! Small linear-algebra helpers shared by the forward and backward passes.

use nalgebra::{Matrix3, Vector3};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}
#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}
#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}
#[inline]
pub fn tan(x: f64) -> f64 {
    libm::tan(x)
}
#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}
#[inline]
pub fn acos(x: f64) -> f64 {
    libm::acos(x)
}
#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}
#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}
#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

#[inline]
pub fn logit(p: f64) -> f64 {
    ln(p / (1.0 - p))
}

/// `sign(x)` with `sign(0) = 0`, the subgradient used for every L1 term.
#[inline]
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn norm(v: &Vec3) -> f64 {
    sqrt(v.dot(v))
}

pub fn normalize(v: &Vec3) -> Vec3 {
    v / norm(v)
}

/// Vector-Jacobian product of `x -> x / |x|`.
pub fn normalize_vjp(x: &Vec3, g: &Vec3) -> Vec3 {
    let n = norm(x);
    let y = x / n;
    (g - y * y.dot(g)) / n
}

/// Euclidean norm of a slice with its gradient (zero subgradient at the origin).
pub fn slice_norm(xs: &[f64]) -> f64 {
    sqrt(xs.iter().map(|x| x * x).sum())
}

pub fn slice_norm_grad(xs: &[f64], out: &mut [f64], scale: f64) {
    let n = slice_norm(xs);
    if n > 0.0 {
        for (o, x) in out.iter_mut().zip(xs) {
            *o += scale * x / n;
        }
    }
}

/// Quaternion stored as `[w, x, y, z]`. Rotations are taken from the
/// normalized quaternion so an unnormalized parameter still yields a
/// proper rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Quat(pub [f64; 4]);

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let a = normalize(axis);
        let (s, c) = (sin(angle * 0.5), cos(angle * 0.5));
        Quat([c, a.x * s, a.y * s, a.z * s])
    }

    /// Rotation vector (axis times angle in radians).
    pub fn from_rotation_vector(r: &Vec3) -> Self {
        let angle = norm(r);
        if angle < 1e-300 {
            Self::IDENTITY
        } else {
            Self::from_axis_angle(r, angle)
        }
    }

    pub fn norm(&self) -> f64 {
        slice_norm(&self.0)
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quat([self.0[0] / n, self.0[1] / n, self.0[2] / n, self.0[3] / n])
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = rhs.0;
        Quat([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    pub fn to_matrix(&self) -> Mat3 {
        let [w, x, y, z] = self.normalized().0;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Gradient with respect to the raw (possibly unnormalized) quaternion
    /// given `g = dL/dR` for `R = to_matrix()`.
    pub fn to_matrix_vjp(&self, g: &Mat3) -> [f64; 4] {
        let q = self.normalized();
        let [w, x, y, z] = q.0;
        let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
        let dx = Mat3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        );
        let dy = Mat3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        );
        let dz = Mat3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        );
        let gq = [
            g.component_mul(&dw).sum(),
            g.component_mul(&dx).sum(),
            g.component_mul(&dy).sum(),
            g.component_mul(&dz).sum(),
        ];
        // normalization vjp
        let n = self.norm();
        let dot: f64 = gq.iter().zip(q.0.iter()).map(|(a, b)| a * b).sum();
        let mut out = [0.0; 4];
        for k in 0..4 {
            out[k] = (gq[k] - q.0[k] * dot) / n;
        }
        out
    }
}

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Rigid {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rotation.transpose();
        Rigid {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Deterministic random stream derived from one seed and a stream name.
/// Each consumer owns its own name so adding a consumer never shifts the
/// numbers another one draws.
pub fn rng_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quat_matrix_is_rotation() {
        let q = Quat([0.3, -0.2, 0.9, 0.4]);
        let r = q.to_matrix();
        let err = (r.transpose() * r - Mat3::identity()).abs().max();
        assert!(err < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quat_vjp_matches_finite_differences() {
        let q = Quat([0.7, 0.2, -0.4, 0.3]);
        let g = Mat3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 0.9, 0.4, -0.2);
        let analytic = q.to_matrix_vjp(&g);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp.0[k] += h;
            qm.0[k] -= h;
            let fd = (g.component_mul(&qp.to_matrix()).sum() - g.component_mul(&qm.to_matrix()).sum())
                / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8, "k={k} fd={fd} an={}", analytic[k]);
        }
    }

    #[test]
    fn hamilton_product_composes_rotations() {
        let a = Quat::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.7);
        let b = Quat::from_axis_angle(&Vec3::new(-0.3, 0.2, 1.0), 1.1);
        let lhs = a.mul(&b).to_matrix();
        let rhs = a.to_matrix() * b.to_matrix();
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn named_streams_are_independent() {
        use rand_core::RngCore;
        let mut a = rng_stream(7, "rig");
        let mut b = rng_stream(7, "synth");
        let mut a2 = rng_stream(7, "rig");
        let x = a.next_u64();
        assert_eq!(x, a2.next_u64());
        assert_ne!(x, b.next_u64());
    }
}
