use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{evaluate, projection_jacobian, Frame, Hit, RasterError, ROWS_PER_CHUNK, T_MIN};
use crate::gaussian::{quat_norm, quat_to_rotation, Camera, GaussianCloud};
use crate::image::Image;

/// Gradients of a scalar loss with respect to every Gaussian parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub mu: Vec<Vector3<f64>>,
    pub quat: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub logit_opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// `‖∂L/∂mean2d‖` in pixels.
    pub mean2d_norm: Vec<f64>,
    /// Whether the Gaussian produced a splat in this view.
    pub visible: Vec<bool>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![Vector3::zeros(); n],
            quat: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            logit_opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            mean2d_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Accumulates another view's gradients (visibility is OR-ed).
    pub fn add_assign(&mut self, other: &GaussianGrads) {
        for i in 0..self.len() {
            self.mu[i] += other.mu[i];
            for k in 0..4 {
                self.quat[i][k] += other.quat[i][k];
            }
            self.log_scale[i] += other.log_scale[i];
            self.logit_opacity[i] += other.logit_opacity[i];
            self.color[i] += other.color[i];
            self.mean2d_norm[i] += other.mean2d_norm[i];
            self.visible[i] |= other.visible[i];
        }
    }

    /// Flattened in the order mu, quat, log_scale, logit_opacity, color per Gaussian.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 14);
        for i in 0..self.len() {
            out.extend(self.mu[i].iter());
            out.extend(self.quat[i].iter());
            out.extend(self.log_scale[i].iter());
            out.push(self.logit_opacity[i]);
            out.extend(self.color[i].iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Adjoint quantities in screen space for one splat.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean2d: [f64; 2],
    /// ∂L/∂conic entries 00, 01 (equal to 10) and 11.
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Analytic gradient of `Σ_pixels ⟨grad_image, render⟩` with respect to all
/// Gaussian parameters. Work is split into fixed row chunks and reduced in
/// chunk order, so results do not depend on the thread count.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    grad_image: &Image,
) -> Result<GaussianGrads, RasterError> {
    let frame = Frame::build(cloud, cam)?;
    if grad_image.width != cam.width || grad_image.height != cam.height {
        return Err(RasterError::DimensionMismatch {
            want_w: cam.width,
            want_h: cam.height,
            got_w: grad_image.width,
            got_h: grad_image.height,
        });
    }
    if !grad_image.is_finite() {
        return Err(RasterError::NonFiniteGradient);
    }

    let n_splats = frame.splats.len();
    let chunks: Vec<u32> = (0..frame.height.div_ceil(ROWS_PER_CHUNK)).collect();
    let partials: Vec<Vec<ScreenGrad>> = chunks
        .par_iter()
        .map(|&chunk| {
            let mut acc = vec![ScreenGrad::default(); n_splats];
            let y_end = ((chunk + 1) * ROWS_PER_CHUNK).min(frame.height);
            let mut hits: Vec<(u32, Hit, f64)> = Vec::new();
            for y in chunk * ROWS_PER_CHUNK..y_end {
                for x in 0..frame.width {
                    let g = grad_image.get(x, y);
                    if g == [0.0; 3] {
                        continue;
                    }
                    pixel_backward(&frame, x, y, Vector3::from(g), &mut hits, &mut acc);
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); n_splats];
    for part in &partials {
        for (s, p) in screen.iter_mut().zip(part) {
            s.add(p);
        }
    }

    let mut out = GaussianGrads::zeros(cloud.len());
    for (p, sg) in frame.splats.iter().zip(&screen) {
        let i = p.splat.source_id;
        out.visible[i] = true;
        let g = &cloud.gaussians()[i];

        out.color[i] = Vector3::from(sg.color);
        let sigma = p.splat.opacity;
        out.logit_opacity[i] = sg.opacity * sigma * (1.0 - sigma);
        out.mean2d_norm[i] = Vector2::from(sg.mean2d).norm();

        // conic = cov2d⁻¹  ⇒  ∂L/∂cov2d = −A ∂L/∂A A.
        let a = p.conic;
        let g_conic = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
        let g_cov2d = -(a * g_conic * a);

        let t = p.t;
        let [j0, j1] = projection_jacobian(cam, &t);
        let j = Matrix2x3::new(j0[0], j0[1], j0[2], j1[0], j1[1], j1[2]);
        let w = cam.rot;
        let q = g.quat;
        let qn = quat_norm(&q);
        let qhat = q.map(|v| v / qn);
        let r = quat_to_rotation(&qhat);
        let s = g.scales();
        let m = r * Matrix3::from_diagonal(&s);
        let sigma3 = m * m.transpose();
        let sigma_cam = w * sigma3 * w.transpose();

        // cov2d = J Σc Jᵀ + floor; the floor is constant.
        let g_sigma_cam: Matrix3<f64> = j.transpose() * g_cov2d * j;
        let g_j = 2.0 * g_cov2d * j * sigma_cam;
        let g_sigma3 = w.transpose() * g_sigma_cam * w;
        let g_m = 2.0 * g_sigma3 * m;

        let mut g_ls = Vector3::zeros();
        let mut g_r = Matrix3::zeros();
        for k in 0..3 {
            let mut ds = 0.0;
            for row in 0..3 {
                ds += g_m[(row, k)] * r[(row, k)];
                g_r[(row, k)] = g_m[(row, k)] * s[k];
            }
            g_ls[k] = ds * s[k];
        }
        out.log_scale[i] = g_ls;
        out.quat[i] = quat_backward(&qhat, qn, &g_r);

        // mean2d = (fx·x/z + cx, fy·y/z + cy), plus J's dependence on t.
        let (fx, fy) = (cam.fx, cam.fy);
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let [gu, gv] = sg.mean2d;
        let mut g_t = Vector3::new(gu * fx * iz, gv * fy * iz, -gu * fx * t.x * iz2 - gv * fy * t.y * iz2);
        g_t.z += g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
        g_t.x += g_j[(0, 2)] * (-fx * iz2);
        g_t.y += g_j[(1, 2)] * (-fy * iz2);
        out.mu[i] = w.transpose() * g_t;
    }
    Ok(out)
}

fn pixel_backward(
    frame: &Frame,
    x: u32,
    y: u32,
    grad: Vector3<f64>,
    hits: &mut Vec<(u32, Hit, f64)>,
    acc: &mut [ScreenGrad],
) {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    hits.clear();
    let mut transmittance = 1.0;
    for &k in frame.tile_list(x, y) {
        let p = &frame.splats[k as usize];
        let Some(hit) = evaluate(p, px, py) else { continue };
        hits.push((k, hit, transmittance));
        transmittance *= 1.0 - hit.alpha;
        if transmittance < T_MIN {
            break;
        }
    }

    // Color seen behind splat i, attenuated from just after i.
    let mut behind = Vector3::zeros();
    for &(k, hit, t_before) in hits.iter().rev() {
        let p = &frame.splats[k as usize];
        let c = p.splat.color;
        let sg = &mut acc[k as usize];
        let w = hit.alpha * t_before;
        for ch in 0..3 {
            sg.color[ch] += grad[ch] * w;
        }
        let g_alpha = t_before * grad.dot(&(c - behind));
        behind = c * hit.alpha + behind * (1.0 - hit.alpha);
        if hit.clamped {
            continue;
        }
        sg.opacity += g_alpha * hit.weight;
        let g_m = g_alpha * p.splat.opacity * super::falloff_derivative(hit.m);
        let [dx, dy] = hit.d;
        let a = &p.conic;
        // m = dᵀ A d with d = pixel − mean.
        sg.mean2d[0] -= g_m * 2.0 * (a[(0, 0)] * dx + a[(0, 1)] * dy);
        sg.mean2d[1] -= g_m * 2.0 * (a[(1, 0)] * dx + a[(1, 1)] * dy);
        sg.conic[0] += g_m * dx * dx;
        sg.conic[1] += g_m * dx * dy;
        sg.conic[2] += g_m * dy * dy;
    }
}

/// Pulls ∂L/∂R back through `R(q/‖q‖)`.
fn quat_backward(qhat: &[f64; 4], norm: f64, g_r: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *qhat;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_hat = [dw, dx, dy, dz].map(|d| d.component_mul(g_r).sum());
    let radial: f64 = (0..4).map(|k| g_hat[k] * qhat[k]).sum();
    [0, 1, 2, 3].map(|k| (g_hat[k] - radial * qhat[k]) / norm)
}
