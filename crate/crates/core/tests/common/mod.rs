#![allow(dead_code)]

pub mod oracles;

use gdsplat::gaussian::{Camera, Gaussian3D, GaussianCloud};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

pub fn random_gaussian(rng: &mut impl Rng, radius: f64, scale: (f64, f64), opacity: (f64, f64)) -> Gaussian3D {
    let mu = Vector3::from_fn(|_, _| rng.random_range(-radius..radius));
    let log_scale = Vector3::from_fn(|_, _| rng.random_range(scale.0.ln()..scale.1.ln()));
    let p: f64 = rng.random_range(opacity.0..opacity.1);
    Gaussian3D {
        mu,
        quat: random_unit_quat(rng),
        log_scale,
        logit_opacity: (p / (1.0 - p)).ln(),
        color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
    }
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, radius: f64, scale: (f64, f64), opacity: (f64, f64)) -> GaussianCloud {
    GaussianCloud::from_gaussians((0..n).map(|_| random_gaussian(rng, radius, scale, opacity)).collect())
}

/// Camera on a sphere of radius `dist` looking at the origin.
pub fn random_camera(rng: &mut impl Rng, size: u32, dist: f64) -> Camera {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let elev: f64 = rng.random_range(-0.6..0.6);
    let eye = Vector3::new(elev.cos() * theta.cos(), elev.sin(), elev.cos() * theta.sin()) * dist;
    let focal = size as f64 * rng.random_range(0.9..1.3);
    let mut cam = Camera::look_at(0, size, size, focal, eye, Vector3::zeros(), Vector3::y());
    cam.cx += rng.random_range(-1.5..1.5);
    cam.cy += rng.random_range(-1.5..1.5);
    cam
}
