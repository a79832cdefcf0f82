//! Photometric objective: per-view mean squared error plus a structural
//! similarity term, with a slot for a perceptual term.

use thiserror::Error;

use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no views given")]
    Empty,
    #[error("{renders} renders but {targets} targets")]
    CountMismatch { renders: usize, targets: usize },
    #[error("view {view}: render is {rw}x{rh}, target is {tw}x{th}")]
    DimensionMismatch { view: usize, rw: u32, rh: u32, tw: u32, th: u32 },
    #[error("image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall { w: u32, h: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of `1 − SSIM`.
    pub lambda1: f64,
    /// Weight of the perceptual term (see [`PerceptualTerm`]).
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.02, lambda2: 0.01 }
    }
}

/// Pluggable perceptual distance. Returns the loss and its gradient with
/// respect to the render.
pub trait PerceptualTerm: Sync {
    fn loss_and_grad(&self, render: &Image, target: &Image) -> (f64, Image);
}

/// Contributes nothing. Stands in for a learned perceptual metric.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPerceptual;

impl PerceptualTerm for NoPerceptual {
    fn loss_and_grad(&self, render: &Image, _target: &Image) -> (f64, Image) {
        (0.0, Image::new(render.width, render.height))
    }
}

fn check_pairs(renders: &[Image], targets: &[Image]) -> Result<(), LossError> {
    if renders.is_empty() {
        return Err(LossError::Empty);
    }
    if renders.len() != targets.len() {
        return Err(LossError::CountMismatch { renders: renders.len(), targets: targets.len() });
    }
    for (view, (r, t)) in renders.iter().zip(targets).enumerate() {
        if !r.same_shape(t) {
            return Err(LossError::DimensionMismatch { view, rw: r.width, rh: r.height, tw: t.width, th: t.height });
        }
    }
    Ok(())
}

/// Mean over views of the per-pixel, per-channel squared error.
pub fn l_rec(renders: &[Image], targets: &[Image]) -> Result<f64, LossError> {
    check_pairs(renders, targets)?;
    let sum: f64 = renders.iter().zip(targets).map(|(r, t)| crate::image::mse(r, t)).sum();
    Ok(sum / renders.len() as f64)
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let x = k as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Single-channel plane.
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { w: self.w, h: self.h, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }
}

/// Valid-mode separable correlation with the window.
fn filter_valid(p: &Plane, k: &[f64; SSIM_WINDOW]) -> Plane {
    let (ow, oh) = (p.w - SSIM_WINDOW + 1, p.h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * p.h];
    for y in 0..p.h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * p.data[y * p.w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, data: out }
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to full size.
fn filter_valid_adjoint(m: &Plane, k: &[f64; SSIM_WINDOW], w: usize, h: usize) -> Plane {
    let mut tmp = vec![0.0; m.w * h];
    for y in 0..m.h {
        for x in 0..m.w {
            let v = m.data[y * m.w + x];
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * m.w + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..m.w {
            let v = tmp[y * m.w + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    Plane { w, h, data: out }
}

fn channel(img: &Image, c: usize) -> Plane {
    Plane { w: img.width as usize, h: img.height as usize, data: img.channel(c) }
}

/// Mean SSIM of one channel and, optionally, its gradient with respect to `x`.
fn ssim_channel(x: &Plane, y: &Plane, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let k = gaussian_window();
    let mu_x = filter_valid(x, &k);
    let mu_y = filter_valid(y, &k);
    let xx = filter_valid(&x.map2(x, |a, _| a * a), &k);
    let yy = filter_valid(&y.map2(y, |a, _| a * a), &k);
    let xy = filter_valid(&x.map2(y, |a, b| a * b), &k);
    let n = mu_x.data.len();

    let mut total = 0.0;
    let (mut g_mu, mut g_var, mut g_cov) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for p in 0..n {
        let (mx, my) = (mu_x.data[p], mu_y.data[p]);
        let vx = xx.data[p] - mx * mx;
        let vy = yy.data[p] - my * my;
        let cxy = xy.data[p] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let ds_dmx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            let ds_dvx = -s / b2;
            let ds_dcxy = 2.0 * a1 / (b1 * b2);
            g_mu[p] = ds_dmx - 2.0 * mx * ds_dvx - my * ds_dcxy;
            g_var[p] = ds_dvx;
            g_cov[p] = ds_dcxy;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return (mean, None);
    }
    let inv_n = 1.0 / n as f64;
    let wrap = |v: Vec<f64>| Plane { w: mu_x.w, h: mu_x.h, data: v.into_iter().map(|g| g * inv_n).collect() };
    let a = filter_valid_adjoint(&wrap(g_mu), &k, x.w, x.h);
    let b = filter_valid_adjoint(&wrap(g_var), &k, x.w, x.h);
    let c = filter_valid_adjoint(&wrap(g_cov), &k, x.w, x.h);
    let grad = (0..x.data.len())
        .map(|q| a.data[q] + 2.0 * x.data[q] * b.data[q] + y.data[q] * c.data[q])
        .collect();
    (mean, Some(grad))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>), LossError> {
    if !a.same_shape(b) {
        return Err(LossError::DimensionMismatch { view: 0, rw: a.width, rh: a.height, tw: b.width, th: b.height });
    }
    if (a.width as usize) < SSIM_WINDOW || (a.height as usize) < SSIM_WINDOW {
        return Err(LossError::TooSmall { w: a.width, h: a.height });
    }
    let mut sum = 0.0;
    let mut grad = want_grad.then(|| Image::new(a.width, a.height));
    for c in 0..3 {
        let (s, g) = ssim_channel(&channel(a, c), &channel(b, c), want_grad);
        sum += s;
        if let (Some(out), Some(g)) = (grad.as_mut(), g) {
            for (px, v) in out.data.iter_mut().zip(g) {
                px[c] = v / 3.0;
            }
        }
    }
    Ok((sum / 3.0, grad))
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, valid positions only),
/// averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, LossError> {
    if a == b {
        // Every local term is exactly 1 when the images coincide.
        ssim_impl(a, b, false)?;
        return Ok(1.0);
    }
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), LossError> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub rec: f64,
    /// Mean SSIM over views (1 when the SSIM term is disabled).
    pub ssim: f64,
    pub perceptual: f64,
    /// `∂total/∂render` per view.
    pub grads: Vec<Image>,
}

/// `L_rec + λ1·(1 − SSIM) + λ2·perceptual` with the no-op perceptual term.
pub fn total_loss(renders: &[Image], targets: &[Image], w: &LossWeights) -> Result<LossOutput, LossError> {
    total_loss_with(renders, targets, w, &NoPerceptual)
}

pub fn total_loss_with(
    renders: &[Image],
    targets: &[Image],
    w: &LossWeights,
    perceptual: &dyn PerceptualTerm,
) -> Result<LossOutput, LossError> {
    check_pairs(renders, targets)?;
    let n = renders.len() as f64;
    let rec = l_rec(renders, targets)?;
    let mut ssim_sum = 0.0;
    let mut perc_sum = 0.0;
    let mut grads = Vec::with_capacity(renders.len());
    for (r, t) in renders.iter().zip(targets) {
        let scale = 2.0 / (3.0 * r.pixel_count() as f64 * n);
        let mut g = Image {
            width: r.width,
            height: r.height,
            data: r.data.iter().zip(&t.data).map(|(a, b)| [0, 1, 2].map(|c| scale * (a[c] - b[c]))).collect(),
        };
        if w.lambda1 != 0.0 {
            let (s, sg) = ssim_with_grad(r, t)?;
            ssim_sum += s;
            for (px, d) in g.data.iter_mut().zip(&sg.data) {
                for c in 0..3 {
                    px[c] -= w.lambda1 / n * d[c];
                }
            }
        } else {
            ssim_sum += 1.0;
        }
        if w.lambda2 != 0.0 {
            let (p, pg) = perceptual.loss_and_grad(r, t);
            perc_sum += p;
            for (px, d) in g.data.iter_mut().zip(&pg.data) {
                for c in 0..3 {
                    px[c] += w.lambda2 / n * d[c];
                }
            }
        }
        grads.push(g);
    }
    let ssim_mean = ssim_sum / n;
    let perceptual = perc_sum / n;
    let total = rec + w.lambda1 * (1.0 - ssim_mean) + w.lambda2 * perceptual;
    Ok(LossOutput { total, rec, ssim: ssim_mean, perceptual, grads })
}
