//! Rotation-group and rigid-transform primitives.
//!
//! Rotations are stored as direction-cosine matrices. Every perturbation in
//! this crate is a *right* perturbation, `R <- R * Exp(delta)`, and every
//! translation update is additive in the frame the translation is expressed in.

use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Real};

/// Below this rotation angle `exp` switches to its second-order Taylor form.
pub const EXP_TAYLOR_THRESHOLD: f64 = 1e-8;

/// `log_so3` refuses rotations whose angle is within this margin of pi.
pub const LOG_BRANCH_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    BranchAmbiguity { angle: f64 },
    #[error("matrix is not a proper rotation (orthonormality error {error:e})")]
    NotOrthonormal { error: f64 },
}

/// Skew-symmetric matrix such that `hat(v) * w == v.cross(w)`.
pub fn hat<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`hat`]; reads the off-diagonal entries of a skew matrix.
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Rotation<T: Real> {
    m: Matrix3<T>,
}

impl<T: Real> Default for Rotation<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Wraps a matrix after checking `R^T R = I` and `det R = +1`.
    pub fn from_matrix(m: Matrix3<T>) -> Result<Self, ManifoldError> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(ManifoldError::NonFinite("Rotation::from_matrix"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = (m.determinant() - T::one()).abs();
        let err = crate::scalar::to_f64(ortho.max(det));
        let tol = 1e-9_f64.max(crate::scalar::to_f64(T::default_epsilon()) * 100.0);
        if err > tol {
            return Err(ManifoldError::NotOrthonormal { error: err });
        }
        Ok(Self { m })
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Self { m }
    }

    /// Projects an approximately orthonormal matrix onto SO(3).
    pub fn from_matrix_nearest(m: Matrix3<T>) -> Self {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < T::zero() {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self { m: r }
    }

    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    pub fn about_x(angle: T) -> Self {
        Self::exp(&Vector3::new(angle, T::zero(), T::zero()))
    }

    pub fn about_y(angle: T) -> Self {
        Self::exp(&Vector3::new(T::zero(), angle, T::zero()))
    }

    pub fn about_z(angle: T) -> Self {
        Self::exp(&Vector3::new(T::zero(), T::zero(), angle))
    }

    /// Rodrigues map without input validation.
    pub fn exp(phi: &Vector3<T>) -> Self {
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(phi);
        let m = if theta < lit(EXP_TAYLOR_THRESHOLD) {
            Matrix3::identity() + k + k * k * lit::<T>(0.5)
        } else {
            let half = theta * lit(0.5);
            let s = half.sin();
            let a = theta.sin() / theta;
            let b = lit::<T>(2.0) * s * s / theta2;
            Matrix3::identity() + k * a + k * k * b
        };
        Self { m }
    }

    /// Principal logarithm. Near pi the axis sign follows the antisymmetric part.
    pub fn log(&self) -> Vector3<T> {
        let r = &self.m;
        let one = T::one();
        let c = ((r.trace() - one) * lit(0.5)).clamp(-one, one);
        let w = vee(&(r - r.transpose())) * lit::<T>(0.5);
        let s = w.norm();
        let theta = s.atan2(c);
        if theta < lit(1e-8) {
            return w * (one + s * s / lit(6.0));
        }
        if c > lit(-0.999) {
            return w * (theta / s);
        }
        // Near pi: use the symmetric part (1 - cos) a a^T.
        let b = (r + r.transpose()) * lit::<T>(0.5) - Matrix3::identity() * c;
        let mut best = 0;
        for i in 1..3 {
            if b[(i, i)] > b[(best, best)] {
                best = i;
            }
        }
        let denom = (b[(best, best)] * (one - c)).max(T::zero()).sqrt();
        let mut axis: Vector3<T> = b.column(best).into_owned() / denom;
        axis.normalize_mut();
        if axis.dot(&w) < T::zero() {
            axis = -axis;
        }
        axis * theta
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> T {
        let one = T::one();
        let c = ((self.m.trace() - one) * lit(0.5)).clamp(-one, one);
        let s = (vee(&(self.m - self.m.transpose())) * lit::<T>(0.5)).norm();
        s.atan2(c)
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.m
    }

    pub fn inverse(&self) -> Self {
        Self { m: self.m.transpose() }
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.m * v
    }

    /// `R^T v`
    pub fn inverse_rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.m.tr_mul(v)
    }

    /// `self * Exp(delta)`
    pub fn retract(&self, delta: &Vector3<T>) -> Self {
        Self { m: self.m * Self::exp(delta).m }
    }

    /// `Log(self^T other)`; the right-perturbation difference.
    pub fn local(&self, other: &Self) -> Vector3<T> {
        Self { m: self.m.tr_mul(&other.m) }.log()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Rotation<U> {
        Rotation { m: self.m.map(|x| lit::<U>(crate::scalar::to_f64(x))) }
    }
}

impl<T: Real> Mul for Rotation<T> {
    type Output = Rotation<T>;
    fn mul(self, rhs: Rotation<T>) -> Rotation<T> {
        Rotation { m: self.m * rhs.m }
    }
}

impl<T: Real> Mul<&Rotation<T>> for &Rotation<T> {
    type Output = Rotation<T>;
    fn mul(self, rhs: &Rotation<T>) -> Rotation<T> {
        Rotation { m: self.m * rhs.m }
    }
}

impl<T: Real> Mul<Vector3<T>> for Rotation<T> {
    type Output = Vector3<T>;
    fn mul(self, rhs: Vector3<T>) -> Vector3<T> {
        self.m * rhs
    }
}

impl<T: Real> Mul<&Vector3<T>> for &Rotation<T> {
    type Output = Vector3<T>;
    fn mul(self, rhs: &Vector3<T>) -> Vector3<T> {
        self.m * rhs
    }
}

/// Checked exponential map.
pub fn exp_so3<T: Real>(phi: &Vector3<T>) -> Result<Rotation<T>, ManifoldError> {
    if phi.iter().any(|x| !x.is_finite()) {
        return Err(ManifoldError::NonFinite("exp_so3"));
    }
    Ok(Rotation::exp(phi))
}

/// Checked logarithm restricted to the principal branch away from pi.
pub fn log_so3<T: Real>(r: &Rotation<T>) -> Result<Vector3<T>, ManifoldError> {
    if !r.is_finite() {
        return Err(ManifoldError::NonFinite("log_so3"));
    }
    let angle = r.angle();
    if angle >= T::pi() - lit(LOG_BRANCH_MARGIN) {
        return Err(ManifoldError::BranchAmbiguity { angle: crate::scalar::to_f64(angle) });
    }
    Ok(r.log())
}

/// SO(3) right Jacobian: `Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)`.
pub fn right_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    if theta < lit(1e-4) {
        return Matrix3::identity() - k * lit::<T>(0.5) + k * k / lit::<T>(6.0);
    }
    let s = (theta * lit(0.5)).sin();
    let a = lit::<T>(2.0) * s * s / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() - k * a + k * k * b
}

/// SO(3) left Jacobian, `Jl(phi) = Jr(-phi)`.
pub fn left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    right_jacobian(&-phi)
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    if theta < lit(1e-4) {
        return Matrix3::identity() + k * lit::<T>(0.5) + k * k / lit::<T>(12.0);
    }
    let c = T::one() / theta2 - (T::one() + theta.cos()) / (lit::<T>(2.0) * theta * theta.sin());
    Matrix3::identity() + k * lit::<T>(0.5) + k * k * c
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Pose<T: Real> {
    pub rotation: Rotation<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Rotation<T>, translation: Vector3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self { translation: -(r.rotate(&self.translation)), rotation: r }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.rotate(p) + self.translation
    }

    /// Rotation by `R Exp(dphi)`, translation additive.
    pub fn retract(&self, dphi: &Vector3<T>, dt: &Vector3<T>) -> Self {
        Self { rotation: self.rotation.retract(dphi), translation: self.translation + dt }
    }
}

impl<T: Real> Mul for Pose<T> {
    type Output = Pose<T>;
    fn mul(self, rhs: Pose<T>) -> Pose<T> {
        self.compose(&rhs)
    }
}
