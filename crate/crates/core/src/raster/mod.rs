//! CPU splatting rasterizer: projection, depth-ordered front-to-back
//! blending and its analytic adjoint.
//!
//! A splat's footprint is `exp(-m/2)` in Mahalanobis distance `m`, exact out
//! to two standard deviations and smoothly tapered to zero at three. The
//! taper makes the 3σ bounding box lossless (nothing outside it contributes)
//! while keeping the image differentiable everywhere.

mod backward;

pub use backward::{render_backward, GaussianGrads};

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::{build_covariance, Camera, Gaussian3D, GaussianCloud};
use crate::image::Image;

/// Added to the projected covariance diagonal, in px².
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
/// Blending stops once transmittance drops below this.
pub const T_MIN: f64 = 1e-4;
pub const DET_MIN: f64 = 1e-12;
/// Footprint support radius in standard deviations.
pub const CUTOFF_SIGMAS: f64 = 3.0;
/// Mahalanobis² where the taper starts.
pub const TAPER_START: f64 = 4.0;
pub const CUTOFF_M: f64 = CUTOFF_SIGMAS * CUTOFF_SIGMAS;

const TILE: u32 = 16;
/// Rows per backward work item; fixed so reductions do not depend on the
/// thread count.
pub(crate) const ROWS_PER_CHUNK: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("camera {0} has zero resolution")]
    ZeroResolution(u32),
    #[error("gradient image is {got_w}x{got_h}, camera is {want_w}x{want_h}")]
    DimensionMismatch { want_w: u32, want_h: u32, got_w: u32, got_h: u32 },
    #[error("gradient image contains non-finite values")]
    NonFiniteGradient,
}

/// Footprint weight as a function of Mahalanobis² distance.
pub fn falloff(m: f64) -> f64 {
    if !(m < CUTOFF_M) {
        return 0.0;
    }
    let e = (-0.5 * m).exp();
    if m <= TAPER_START {
        e
    } else {
        e * taper(m).0
    }
}

/// `d falloff / dm`.
pub fn falloff_derivative(m: f64) -> f64 {
    if !(m < CUTOFF_M) {
        return 0.0;
    }
    let e = (-0.5 * m).exp();
    if m <= TAPER_START {
        -0.5 * e
    } else {
        let (s, ds) = taper(m);
        e * (ds - 0.5 * s)
    }
}

/// Quintic smootherstep from 1 at `TAPER_START` to 0 at `CUTOFF_M`, with its derivative.
fn taper(m: f64) -> (f64, f64) {
    let w = CUTOFF_M - TAPER_START;
    let t = (m - TAPER_START) / w;
    let s = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
    let ds = -30.0 * t * t * (1.0 - t) * (1.0 - t) / w;
    (s, ds)
}

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Screen covariance including the low-pass floor.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub source_id: usize,
}

impl Splat2D {
    pub fn det(&self) -> f64 {
        self.cov2d.determinant()
    }

    /// Inverse covariance, or `None` below `DET_MIN`.
    pub fn conic(&self) -> Option<Matrix2<f64>> {
        let det = self.det();
        if !(det >= DET_MIN) {
            return None;
        }
        let c = &self.cov2d;
        Some(Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]) / det)
    }

    /// Inclusive pixel ranges covering the 3σ footprint, clipped to the image.
    pub fn pixel_box(&self, width: u32, height: u32) -> Option<[u32; 4]> {
        let rx = CUTOFF_SIGMAS * self.cov2d[(0, 0)].sqrt();
        let ry = CUTOFF_SIGMAS * self.cov2d[(1, 1)].sqrt();
        // Pixel centers sit at +0.5; one pixel of slack on each side.
        let x0 = (self.mean2d[0] - rx - 0.5).floor() - 1.0;
        let x1 = (self.mean2d[0] + rx - 0.5).ceil() + 1.0;
        let y0 = (self.mean2d[1] - ry - 0.5).floor() - 1.0;
        let y1 = (self.mean2d[1] + ry - 0.5).ceil() + 1.0;
        if !(x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite()) {
            return None;
        }
        if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
            return None;
        }
        Some([
            x0.max(0.0) as u32,
            x1.min((width - 1) as f64) as u32,
            y0.max(0.0) as u32,
            y1.min((height - 1) as f64) as u32,
        ])
    }
}

/// Perspective Jacobian of `t ↦ (fx·x/z, fy·y/z)`, as its two rows.
pub(crate) fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> [[f64; 3]; 2] {
    let iz = 1.0 / t.z;
    [
        [cam.fx * iz, 0.0, -cam.fx * t.x * iz * iz],
        [0.0, cam.fy * iz, -cam.fy * t.y * iz * iz],
    ]
}

/// Screen covariance before the low-pass floor: upper-left 2×2 of `J W Σ Wᵀ Jᵀ`.
pub(crate) fn screen_covariance(cam: &Camera, t: &Vector3<f64>, sigma: &Matrix3<f64>) -> Matrix2<f64> {
    let [j0, j1] = projection_jacobian(cam, t);
    let sc = cam.rot * sigma * cam.rot.transpose();
    let j0 = Vector3::from(j0);
    let j1 = Vector3::from(j1);
    let a = j0.dot(&(sc * j0));
    let b = j0.dot(&(sc * j1));
    let c = j1.dot(&(sc * j1));
    Matrix2::new(a, b, b, c)
}

/// Projects a Gaussian; `None` when its center is outside `(near, far)` or
/// its parameters are unusable.
pub fn project(g: &Gaussian3D, cam: &Camera, source_id: usize) -> Option<Splat2D> {
    let t = cam.world_to_camera(&g.mu);
    if !(t.z > cam.near && t.z < cam.far) {
        return None;
    }
    let sigma = build_covariance(g).ok()?;
    let cov = screen_covariance(cam, &t, sigma.matrix()) + Matrix2::identity() * LOW_PASS;
    Some(Splat2D {
        mean2d: cam.project_camera_point(&t),
        cov2d: cov,
        depth: t.z,
        color: g.color,
        opacity: g.opacity(),
        source_id,
    })
}

/// Front-to-back composite of already depth-ordered `(weight, opacity, color)`
/// triples over a black background.
pub fn blend_pixel(splats: &[(f64, f64, Vector3<f64>)]) -> Vector3<f64> {
    let mut color = Vector3::zeros();
    let mut transmittance = 1.0;
    for &(weight, opacity, c) in splats {
        let alpha = (opacity * weight).min(ALPHA_MAX);
        if alpha <= 0.0 {
            continue;
        }
        color += c * (alpha * transmittance);
        transmittance *= 1.0 - alpha;
        if transmittance < T_MIN {
            break;
        }
    }
    color
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffer {
    pub color: Image,
    pub alpha: Vec<f64>,
    pub contrib_count: Vec<u32>,
    pub stats: RenderStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub culled: usize,
    pub singular: usize,
    pub rasterized: usize,
}

/// Splat ready for rasterization.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Prepared {
    pub splat: Splat2D,
    pub conic: Matrix2<f64>,
    pub bbox: [u32; 4],
    /// World→camera position, kept for the adjoint.
    pub t: Vector3<f64>,
}

pub(crate) struct Frame {
    pub width: u32,
    pub height: u32,
    /// Depth-sorted splats.
    pub splats: Vec<Prepared>,
    /// Per tile, indices into `splats` in depth order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: u32,
    pub stats: RenderStats,
}

impl Frame {
    pub fn build(cloud: &GaussianCloud, cam: &Camera) -> Result<Self, RasterError> {
        if cam.width == 0 || cam.height == 0 {
            return Err(RasterError::ZeroResolution(cam.id));
        }
        let (width, height) = (cam.width, cam.height);
        let mut stats = RenderStats::default();
        let mut splats: Vec<Prepared> = Vec::with_capacity(cloud.len());
        for (i, g) in cloud.gaussians().iter().enumerate() {
            let Some(splat) = project(g, cam, i) else {
                stats.culled += 1;
                continue;
            };
            let Some(conic) = splat.conic() else {
                stats.singular += 1;
                continue;
            };
            let Some(bbox) = splat.pixel_box(width, height) else {
                stats.culled += 1;
                continue;
            };
            splats.push(Prepared { splat, conic, bbox, t: cam.world_to_camera(&g.mu) });
        }
        splats.sort_by(|a, b| {
            a.splat
                .depth
                .total_cmp(&b.splat.depth)
                .then(a.splat.source_id.cmp(&b.splat.source_id))
        });
        stats.rasterized = splats.len();

        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); (tiles_x * tiles_y) as usize];
        for (k, p) in splats.iter().enumerate() {
            let [x0, x1, y0, y1] = p.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tiles[(ty * tiles_x + tx) as usize].push(k as u32);
                }
            }
        }
        Ok(Self { width, height, splats, tiles, tiles_x, stats })
    }

    pub fn tile_list(&self, x: u32, y: u32) -> &[u32] {
        &self.tiles[((y / TILE) * self.tiles_x + x / TILE) as usize]
    }
}

/// One splat's effect at a pixel center.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Hit {
    pub d: [f64; 2],
    pub m: f64,
    pub weight: f64,
    pub alpha: f64,
    pub clamped: bool,
}

#[inline]
pub(crate) fn evaluate(p: &Prepared, px: f64, py: f64) -> Option<Hit> {
    let [x0, x1, y0, y1] = p.bbox;
    let (xi, yi) = ((px - 0.5) as u32, (py - 0.5) as u32);
    if xi < x0 || xi > x1 || yi < y0 || yi > y1 {
        return None;
    }
    let d = [px - p.splat.mean2d[0], py - p.splat.mean2d[1]];
    let c = &p.conic;
    let m = c[(0, 0)] * d[0] * d[0] + (c[(0, 1)] + c[(1, 0)]) * d[0] * d[1] + c[(1, 1)] * d[1] * d[1];
    let weight = falloff(m);
    let raw = p.splat.opacity * weight;
    if !(raw > 0.0) {
        return None;
    }
    let clamped = raw > ALPHA_MAX;
    Some(Hit { d, m, weight, alpha: raw.min(ALPHA_MAX), clamped })
}

/// Renders over a black background. Deterministic for any thread count.
pub fn render(cloud: &GaussianCloud, cam: &Camera) -> Result<RenderBuffer, RasterError> {
    let frame = Frame::build(cloud, cam)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut color = vec![[0.0; 3]; w * h];
    let mut alpha = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];

    color
        .par_chunks_mut(w)
        .zip(alpha.par_chunks_mut(w))
        .zip(count.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((crow, arow), nrow))| {
            let py = y as f64 + 0.5;
            for x in 0..w {
                let px = x as f64 + 0.5;
                let mut c = Vector3::zeros();
                let mut transmittance = 1.0;
                let mut n = 0;
                for &k in frame.tile_list(x as u32, y as u32) {
                    let p = &frame.splats[k as usize];
                    let Some(hit) = evaluate(p, px, py) else { continue };
                    c += p.splat.color * (hit.alpha * transmittance);
                    transmittance *= 1.0 - hit.alpha;
                    n += 1;
                    if transmittance < T_MIN {
                        break;
                    }
                }
                crow[x] = [c.x, c.y, c.z];
                arow[x] = 1.0 - transmittance;
                nrow[x] = n;
            }
        });

    Ok(RenderBuffer {
        color: Image { width: frame.width, height: frame.height, data: color },
        alpha,
        contrib_count: count,
        stats: frame.stats,
    })
}
