//! Pinhole stereo camera, reprojection residual and the patch-based
//! photometric residual over an abstract intensity field.

use nalgebra::{Matrix2x3, Matrix3, RowVector3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{hat, Pose};
use crate::scalar::{lit, Real};

/// Smallest admissible depth in front of the camera, m.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VisualError {
    #[error("point at depth {z} is behind the camera")]
    BehindCamera { z: f64 },
    #[error("back-projection depth must be positive, got {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("disparity must be positive, got {disparity}")]
    DegenerateTriangulation { disparity: f64 },
    #[error("pixel ({u}, {v}) outside the image")]
    OutOfDomain { u: f64, v: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
    /// Stereo baseline, m.
    pub baseline: T,
}

impl<T: Real> CameraModel<T> {
    pub fn validate(&self) -> Result<(), VisualError> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(VisualError::InvalidCamera("focal lengths must be positive"));
        }
        if !(self.baseline > T::zero()) {
            return Err(VisualError::InvalidCamera("baseline must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(VisualError::InvalidCamera("image must be non-empty"));
        }
        Ok(())
    }

    /// Whether `u` lies in the image domain `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, u: &Vector2<T>) -> bool {
        let w: T = lit(f64::from(self.width) - 1.0);
        let h: T = lit(f64::from(self.height) - 1.0);
        u.x >= T::zero() && u.y >= T::zero() && u.x <= w && u.y <= h
    }

    /// Jacobian of [`project`] at `x`.
    pub fn projection_jacobian(&self, x: &Vector3<T>) -> Matrix2x3<T> {
        let iz = T::one() / x.z;
        Matrix2x3::new(
            self.fx * iz,
            T::zero(),
            -self.fx * x.x * iz * iz,
            T::zero(),
            self.fy * iz,
            -self.fy * x.y * iz * iz,
        )
    }
}

pub fn project<T: Real>(cam: &CameraModel<T>, x: &Vector3<T>) -> Result<Vector2<T>, VisualError> {
    if !(x.z > lit(MIN_DEPTH)) {
        return Err(VisualError::BehindCamera { z: crate::scalar::to_f64(x.z) });
    }
    Ok(Vector2::new(cam.fx * x.x / x.z + cam.cx, cam.fy * x.y / x.z + cam.cy))
}

/// Point at z-depth `depth` along the ray through pixel `u`.
pub fn backproject<T: Real>(cam: &CameraModel<T>, u: &Vector2<T>, depth: T) -> Result<Vector3<T>, VisualError> {
    if !(depth > T::zero()) {
        return Err(VisualError::NonPositiveDepth { depth: crate::scalar::to_f64(depth) });
    }
    Ok(Vector3::new((u.x - cam.cx) / cam.fx * depth, (u.y - cam.cy) / cam.fy * depth, depth))
}

pub fn stereo_depth<T: Real>(cam: &CameraModel<T>, disparity: T) -> Result<T, VisualError> {
    if !(disparity > T::zero()) {
        return Err(VisualError::DegenerateTriangulation { disparity: crate::scalar::to_f64(disparity) });
    }
    Ok(cam.fx * cam.baseline / disparity)
}

/// A feature observation supplied by the data association.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct LandmarkObservation<T: Real> {
    pub frame_id: u64,
    pub landmark_id: u64,
    pub pixel: Vector2<T>,
    /// Left-right disparity, pixels.
    pub disparity: Option<T>,
}

/// `obs - project(T_WC^-1 * landmark)`.
pub fn reprojection_residual<T: Real>(
    cam: &CameraModel<T>,
    t_wc: &Pose<T>,
    landmark: &Vector3<T>,
    obs: &LandmarkObservation<T>,
) -> Result<Vector2<T>, VisualError> {
    let xc = t_wc.rotation.inverse_rotate(&(landmark - t_wc.translation));
    Ok(obs.pixel - project(cam, &xc)?)
}

/// Reprojection Jacobians with respect to the camera pose tangent
/// `[dphi, dp]` (rotation perturbed on the right, translation additive)
/// and the world landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionJacobians<T: Real> {
    pub residual: Vector2<T>,
    pub d_rot: SMatrix<T, 2, 3>,
    pub d_pos: SMatrix<T, 2, 3>,
    pub d_landmark: SMatrix<T, 2, 3>,
}

pub fn reprojection_jacobians<T: Real>(
    cam: &CameraModel<T>,
    t_wc: &Pose<T>,
    landmark: &Vector3<T>,
    obs: &LandmarkObservation<T>,
) -> Result<ReprojectionJacobians<T>, VisualError> {
    let xc = t_wc.rotation.inverse_rotate(&(landmark - t_wc.translation));
    let residual = obs.pixel - project(cam, &xc)?;
    let jp = -cam.projection_jacobian(&xc);
    let rt = t_wc.rotation.matrix().transpose();
    Ok(ReprojectionJacobians {
        residual,
        d_rot: jp * hat(&xc),
        d_pos: -jp * rt,
        d_landmark: jp * rt,
    })
}

/// A scalar image `I: Omega -> R` with a consistent gradient.
pub trait IntensityField<T: Real> {
    /// Intensity at `u`, defined everywhere (callers check [`IntensityField::contains`]).
    fn value(&self, u: &Vector2<T>) -> T;
    fn gradient(&self, u: &Vector2<T>) -> Vector2<T>;
    fn contains(&self, u: &Vector2<T>) -> bool;

    /// Intensity at `u`, rejecting points outside the domain.
    fn sample(&self, u: &Vector2<T>) -> Result<T, VisualError> {
        if !self.contains(u) {
            return Err(VisualError::OutOfDomain { u: crate::scalar::to_f64(u.x), v: crate::scalar::to_f64(u.y) });
        }
        Ok(self.value(u))
    }
}

/// Pixel offsets of a patch and the gradient down-weighting constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct PatchPattern<T: Real> {
    pub offsets: Vec<Vector2<T>>,
    /// `c` in `w = c^2 / (c^2 + |grad I|^2)`; `None` gives unit weights.
    pub weight_c: Option<T>,
}

impl<T: Real> PatchPattern<T> {
    /// The 8-point spread pattern inside a 5x5 neighbourhood, `c = 50`.
    pub fn spread8() -> Self {
        let o = [(0, -2), (-1, -1), (1, -1), (-2, 0), (0, 0), (2, 0), (-1, 1), (0, 2)];
        Self {
            offsets: o.iter().map(|&(u, v)| Vector2::new(lit(f64::from(u)), lit(f64::from(v)))).collect(),
            weight_c: Some(lit(50.0)),
        }
    }

    pub fn weight(&self, grad: &Vector2<T>) -> T {
        match self.weight_c {
            None => T::one(),
            Some(c) => c * c / (c * c + grad.norm_squared()),
        }
    }

    pub fn contains_origin(&self) -> bool {
        self.offsets.iter().any(|o| o.x == T::zero() && o.y == T::zero())
    }
}

impl<T: Real> Default for PatchPattern<T> {
    fn default() -> Self {
        Self::spread8()
    }
}

/// One warped pattern pixel, for chaining Jacobians outside this module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpTerm<T: Real> {
    /// Back-projected point in the host camera frame.
    pub x_host: Vector3<T>,
    /// The same point in the target camera frame.
    pub y_target: Vector3<T>,
    /// Derivative of the residual with respect to `y_target`.
    pub d_e_d_y: RowVector3<T>,
}

/// Weighted patch residual `sum_o w_o (I_j(p'_o) - I_i(p + o))` with every
/// pattern pixel back-projected at the shared depth `depth` and warped by `t_ji`.
pub fn photometric_residual<T: Real>(
    field_i: &dyn IntensityField<T>,
    field_j: &dyn IntensityField<T>,
    cam: &CameraModel<T>,
    t_ji: &Pose<T>,
    p: &Vector2<T>,
    depth: T,
    pattern: &PatchPattern<T>,
) -> Result<T, VisualError> {
    photometric_terms(field_i, field_j, cam, t_ji, p, depth, pattern).map(|(e, _)| e)
}

/// Residual together with per-pixel warp terms.
pub fn photometric_terms<T: Real>(
    field_i: &dyn IntensityField<T>,
    field_j: &dyn IntensityField<T>,
    cam: &CameraModel<T>,
    t_ji: &Pose<T>,
    p: &Vector2<T>,
    depth: T,
    pattern: &PatchPattern<T>,
) -> Result<(T, Vec<WarpTerm<T>>), VisualError> {
    // An exact identity warp maps every pixel onto itself; skipping the
    // projection round trip keeps the self-comparison exactly zero.
    let identity = *t_ji.rotation.matrix() == Matrix3::identity() && t_ji.translation == Vector3::zeros();
    let mut e = T::zero();
    let mut terms = Vec::with_capacity(pattern.offsets.len());
    for o in &pattern.offsets {
        let q = p + o;
        let host = field_i.sample(&q)?;
        let w = pattern.weight(&field_i.gradient(&q));
        let x = backproject(cam, &q, depth)?;
        let y = t_ji.transform_point(&x);
        let q2 = if identity { q } else { project(cam, &y)? };
        e += w * (field_j.sample(&q2)? - host);
        let g = field_j.gradient(&q2);
        let d_e_d_y = (cam.projection_jacobian(&y).transpose() * g).transpose() * w;
        terms.push(WarpTerm { x_host: x, y_target: y, d_e_d_y });
    }
    Ok((e, terms))
}

/// Photometric residual and its gradient with respect to `t_ji`
/// (rotation perturbed on the right, translation additive), ordered `[dphi, dt]`.
pub fn photometric_residual_gradient<T: Real>(
    field_i: &dyn IntensityField<T>,
    field_j: &dyn IntensityField<T>,
    cam: &CameraModel<T>,
    t_ji: &Pose<T>,
    p: &Vector2<T>,
    depth: T,
    pattern: &PatchPattern<T>,
) -> Result<(T, SMatrix<T, 1, 6>), VisualError> {
    let (e, terms) = photometric_terms(field_i, field_j, cam, t_ji, p, depth, pattern)?;
    let r: Matrix3<T> = *t_ji.rotation.matrix();
    let mut g = SMatrix::<T, 1, 6>::zeros();
    for t in &terms {
        let d_phi = t.d_e_d_y * (-(r * hat(&t.x_host)));
        let mut rot = g.fixed_view_mut::<1, 3>(0, 0);
        rot += d_phi;
        let mut trans = g.fixed_view_mut::<1, 3>(0, 3);
        trans += t.d_e_d_y;
    }
    Ok((e, g))
}

/// Gaussian intensity blob with axis-aligned spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub sigma: [f64; 2],
    pub amplitude: f64,
}

/// Analytic image: a constant background plus Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobField {
    pub width: u32,
    pub height: u32,
    pub background: f64,
    pub blobs: Vec<Blob>,
}

/// Blobs further than this many standard deviations contribute nothing; the
/// truncation jump is below 1e-13 of the amplitude.
const BLOB_CUTOFF: f64 = 8.0;

impl BlobField {
    fn eval(&self, u: f64, v: f64) -> (f64, f64, f64) {
        let mut val = self.background;
        let (mut gu, mut gv) = (0.0, 0.0);
        for b in &self.blobs {
            let du = (u - b.center[0]) / b.sigma[0];
            let dv = (v - b.center[1]) / b.sigma[1];
            let r2 = du * du + dv * dv;
            if r2 > BLOB_CUTOFF * BLOB_CUTOFF {
                continue;
            }
            let g = b.amplitude * (-0.5 * r2).exp();
            val += g;
            gu -= g * du / b.sigma[0];
            gv -= g * dv / b.sigma[1];
        }
        (val, gu, gv)
    }
}

impl<T: Real> IntensityField<T> for BlobField {
    fn value(&self, u: &Vector2<T>) -> T {
        lit(self.eval(crate::scalar::to_f64(u.x), crate::scalar::to_f64(u.y)).0)
    }

    fn gradient(&self, u: &Vector2<T>) -> Vector2<T> {
        let (_, gu, gv) = self.eval(crate::scalar::to_f64(u.x), crate::scalar::to_f64(u.y));
        Vector2::new(lit(gu), lit(gv))
    }

    fn contains(&self, u: &Vector2<T>) -> bool {
        let (x, y) = (crate::scalar::to_f64(u.x), crate::scalar::to_f64(u.y));
        x >= 0.0 && y >= 0.0 && x <= f64::from(self.width) - 1.0 && y <= f64::from(self.height) - 1.0
    }
}
