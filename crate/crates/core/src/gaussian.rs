//! Scene primitives: 3D Gaussians, their covariance, cameras and the
//! optimizable cloud.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::linalg::{asymmetry, compose_from_eigen, jacobi_eigen};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix has negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),
    #[error("invalid camera {id}: {reason}")]
    InvalidCamera { id: u32, reason: String },
}

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const EIGEN_CLAMP_TOL: f64 = 1e-9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One splat. Quaternions are stored `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vector3<f64>,
    pub quat: [f64; 4],
    /// Natural log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    pub logit_opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn isotropic(mu: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mu,
            quat: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            logit_opacity: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// `Σ exp(2·log_scale)`, which equals `tr(Σ)` for any rotation.
    pub fn covariance_trace(&self) -> f64 {
        self.log_scale.iter().map(|s| (2.0 * s).exp()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.quat.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.logit_opacity.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }

    pub fn normalize_quat(&mut self) {
        let n = quat_norm(&self.quat);
        if n > 0.0 && n.is_finite() {
            for q in &mut self.quat {
                *q /= n;
            }
        } else {
            self.quat = [1.0, 0.0, 0.0, 0.0];
        }
    }

    /// Rotation of the normalized quaternion.
    pub fn rotation(&self) -> Result<Matrix3<f64>, GaussianError> {
        let n = quat_norm(&self.quat);
        if !(n.is_finite() && n > 0.0) {
            return Err(GaussianError::InvalidParameter(format!(
                "quaternion norm {n} is not usable"
            )));
        }
        let q = self.quat.map(|v| v / n);
        Ok(quat_to_rotation(&q))
    }
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
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

/// Symmetric positive semi-definite 3×3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// `R S Sᵀ Rᵀ` with `R` from the (normalized) quaternion and `S = diag(exp(log_scale))`.
pub fn build_covariance(g: &Gaussian3D) -> Result<Covariance3, GaussianError> {
    if !g.is_finite() {
        return Err(GaussianError::InvalidParameter("non-finite Gaussian field".into()));
    }
    let r = g.rotation()?;
    let m = r * Matrix3::from_diagonal(&g.scales());
    let mut sigma = m * m.transpose();
    // Exact symmetry; the two triangles differ only by rounding.
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
        sigma[(i, j)] = v;
        sigma[(j, i)] = v;
    }
    Ok(Covariance3(sigma))
}

/// Principal square root of a symmetric PSD matrix via cyclic Jacobi.
pub fn sqrt_spd(m: &Covariance3) -> Result<Covariance3, GaussianError> {
    let a = m.0;
    if !a.iter().all(|v| v.is_finite()) {
        return Err(GaussianError::InvalidParameter("non-finite matrix entry".into()));
    }
    let asym = asymmetry(&a);
    if asym > SYMMETRY_TOL {
        return Err(GaussianError::NotSymmetric(asym));
    }
    let eig = jacobi_eigen(&a);
    if eig.values[0] < -EIGEN_CLAMP_TOL {
        return Err(GaussianError::NegativeEigenvalue(eig.values[0]));
    }
    let roots = eig.values.map(|l| l.max(0.0).sqrt());
    Ok(Covariance3(compose_from_eigen(&eig.vectors, &roots)))
}

/// Pinhole camera with a world→camera rigid transform (`x_cam = rot·x + trans`).
/// The camera looks down +z; image y grows downward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;

impl Camera {
    pub fn validate(&self) -> Result<(), GaussianError> {
        let bad = |reason: String| GaussianError::InvalidCamera { id: self.id, reason };
        if !(self.fx.is_finite() && self.fy.is_finite() && self.fx > 0.0 && self.fy > 0.0) {
            return Err(bad(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy)));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(bad("non-finite principal point".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(bad(format!("need 0 < near < far, got near={} far={}", self.near, self.far)));
        }
        if !self.trans.iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite translation".into()));
        }
        let orth = (self.rot.transpose() * self.rot - Matrix3::identity()).abs().max();
        if !(orth <= 1e-8) {
            return Err(bad(format!("rotation is not orthonormal (error {orth:e})")));
        }
        let det = self.rot.determinant();
        if (det - 1.0).abs() > 1e-8 {
            return Err(bad(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(
        id: u32,
        width: u32,
        height: u32,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let trans = -(rot * eye);
        Self {
            id,
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rot,
            trans,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rot.transpose() * self.trans)
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project_camera_point(&self, t: &Vector3<f64>) -> [f64; 2] {
        [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy]
    }

    /// Camera-space direction (z = 1) through a pixel position.
    pub fn unproject_pixel(&self, px: f64, py: f64) -> Vector3<f64> {
        Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0)
    }

    /// Rigid transform taking points in `target`'s camera frame into this
    /// camera's frame: `R = R_s·R_tᵀ`, `T = T_s − R·T_t`.
    pub fn relative_from(&self, target: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rot * target.rot.transpose();
        let t = self.trans - r * target.trans;
        (r, t)
    }
}

/// Ordered Gaussians plus per-Gaussian densification statistics and stable ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    gaussians: Vec<Gaussian3D>,
    /// `[sum of screen-space gradient norms, number of contributing views]`.
    grad_accum: Vec<[f64; 2]>,
    ids: Vec<u64>,
    next_id: u64,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian3D>) -> Self {
        let mut cloud = Self::new();
        for g in gaussians {
            cloud.push(g);
        }
        cloud
    }

    /// Appends and returns the new Gaussian's id.
    pub fn push(&mut self, g: Gaussian3D) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.gaussians.push(g);
        self.grad_accum.push([0.0, 0.0]);
        self.ids.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian3D] {
        &mut self.gaussians
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn grad_accum(&self) -> &[[f64; 2]] {
        &self.grad_accum
    }

    /// Adds one view's screen-space gradient norm for Gaussian `i`.
    pub fn accumulate_grad(&mut self, i: usize, norm: f64) {
        let acc = &mut self.grad_accum[i];
        acc[0] += norm;
        acc[1] += 1.0;
    }

    /// Mean accumulated gradient norm (0 when never visible).
    pub fn mean_grad(&self, i: usize) -> f64 {
        let [sum, count] = self.grad_accum[i];
        if count > 0.0 {
            sum / count
        } else {
            0.0
        }
    }

    pub fn reset_grad_accum(&mut self) {
        self.grad_accum.iter_mut().for_each(|a| *a = [0.0, 0.0]);
    }

    /// Keeps entries for which `keep(index)` is true, preserving order and ids.
    pub fn retain_indices(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let flags: Vec<bool> = (0..self.len()).map(&mut keep).collect();
        let mut it = flags.iter();
        self.gaussians.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.grad_accum.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.ids.retain(|_| *it.next().unwrap());
    }

    pub fn normalize_quats(&mut self) {
        self.gaussians.iter_mut().for_each(Gaussian3D::normalize_quat);
    }

    /// Axis-aligned bounds of the means, `None` when empty.
    pub fn position_bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.gaussians.first()?.mu;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| (lo.inf(&g.mu), hi.sup(&g.mu))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(quat: [f64; 4], log_scale: [f64; 3]) -> Gaussian3D {
        Gaussian3D {
            mu: Vector3::zeros(),
            quat,
            log_scale: Vector3::from(log_scale),
            logit_opacity: 0.0,
            color: Vector3::repeat(0.5),
        }
    }

    #[test]
    fn identity_covariance() {
        let c = build_covariance(&gaussian([1.0, 0.0, 0.0, 0.0], [0.0; 3])).unwrap();
        assert_eq!(c.0, Matrix3::identity());
    }

    #[test]
    fn diagonal_covariance() {
        let g = gaussian([1.0, 0.0, 0.0, 0.0], [1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let c = build_covariance(&g).unwrap();
        assert!((c.0 - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0))).abs().max() < 1e-14);
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = gaussian([1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        g.mu.x = f64::NAN;
        assert!(matches!(build_covariance(&g), Err(GaussianError::InvalidParameter(_))));
        let g = gaussian([0.0; 4], [0.0; 3]);
        assert!(matches!(build_covariance(&g), Err(GaussianError::InvalidParameter(_))));
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let i = sqrt_spd(&Covariance3(Matrix3::identity())).unwrap();
        assert_eq!(i.0, Matrix3::identity());
        let d = sqrt_spd(&Covariance3(Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 16.0)))).unwrap();
        assert_eq!(d.0, Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 4.0)));
    }

    #[test]
    fn sqrt_errors_and_clamp() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-6;
        assert!(matches!(sqrt_spd(&Covariance3(m)), Err(GaussianError::NotSymmetric(_))));
        let neg = Matrix3::from_diagonal(&Vector3::new(1.0, -1e-6, 1.0));
        assert!(matches!(sqrt_spd(&Covariance3(neg)), Err(GaussianError::NegativeEigenvalue(_))));
        let tiny = Matrix3::from_diagonal(&Vector3::new(1.0, -5e-10, 4.0));
        let r = sqrt_spd(&Covariance3(tiny)).unwrap();
        assert_eq!(r.0, Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 2.0)));
    }

    #[test]
    fn look_at_is_proper_rotation() {
        let cam = Camera::look_at(0, 32, 32, 30.0, Vector3::new(2.0, 1.0, -1.5), Vector3::zeros(), Vector3::y());
        cam.validate().unwrap();
        let t = cam.world_to_camera(&Vector3::zeros());
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && t.z > 0.0);
        assert!((cam.center() - Vector3::new(2.0, 1.0, -1.5)).norm() < 1e-12);
        // World up projects above the principal point.
        let up = cam.world_to_camera(&Vector3::new(0.0, 0.1, 0.0));
        assert!(cam.project_camera_point(&up)[1] < cam.cy);
    }

    #[test]
    fn camera_validation() {
        let mut cam = Camera::look_at(3, 8, 8, 10.0, Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), Vector3::y());
        cam.rot[(0, 0)] *= -1.0;
        assert!(matches!(cam.validate(), Err(GaussianError::InvalidCamera { id: 3, .. })));
        let mut cam = Camera::look_at(4, 8, 8, 10.0, Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), Vector3::y());
        cam.near = 2.0;
        cam.far = 1.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn cloud_ids_and_retain() {
        let mut cloud = GaussianCloud::new();
        for i in 0..5 {
            cloud.push(Gaussian3D::isotropic(Vector3::repeat(i as f64), 0.1, 0.5, Vector3::zeros()));
        }
        cloud.accumulate_grad(3, 2.0);
        cloud.accumulate_grad(3, 4.0);
        assert_eq!(cloud.mean_grad(3), 3.0);
        cloud.retain_indices(|i| i % 2 == 1);
        assert_eq!(cloud.ids(), &[1, 3]);
        assert_eq!(cloud.grad_accum().len(), cloud.len());
        assert_eq!(cloud.mean_grad(1), 3.0);
        assert_eq!(cloud.push(Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.5, Vector3::zeros())), 5);
    }
}
