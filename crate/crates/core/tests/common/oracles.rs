//! Independent reference implementations shared by the integration tests.

use gdsplat::density::GdsForm;
use gdsplat::epipolar::FeatureMap;
use gdsplat::gaussian::{Camera, Gaussian3D, GaussianCloud};
use gdsplat::image::Image;
use gdsplat::plane::PlaneDecoderWeights;
use gdsplat::raster::{project, Splat2D, ALPHA_MAX, T_MIN};
use nalgebra::DMatrix;
use rand::Rng;

/// Footprint written out independently of the library.
pub fn oracle_falloff(m: f64) -> f64 {
    if m >= 9.0 {
        return 0.0;
    }
    let e = (-0.5 * m).exp();
    if m <= 4.0 {
        return e;
    }
    let t = (m - 4.0) / 5.0;
    e * (1.0 - (10.0 * t.powi(3) - 15.0 * t.powi(4) + 6.0 * t.powi(5)))
}

/// Every pixel against every splat, no bounding boxes or tiles.
pub fn naive_render(cloud: &GaussianCloud, cam: &Camera) -> Image {
    let mut splats: Vec<Splat2D> = cloud
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, cam, i))
        .filter(|s| s.det() >= 1e-12)
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_id.cmp(&b.source_id)));
    Image::from_fn(cam.width, cam.height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut c = [0.0; 3];
        let mut t = 1.0;
        for s in &splats {
            let inv = s.cov2d.try_inverse().unwrap();
            let d = nalgebra::Vector2::new(px - s.mean2d[0], py - s.mean2d[1]);
            let m = (d.transpose() * inv * d)[(0, 0)];
            let a = (s.opacity * oracle_falloff(m)).min(ALPHA_MAX);
            if a <= 0.0 {
                continue;
            }
            for k in 0..3 {
                c[k] += s.color[k] * a * t;
            }
            t *= 1.0 - a;
            if t < T_MIN {
                break;
            }
        }
        c
    })
}

/// Perturbs coordinate `k` (in `GaussianGrads::flatten` order) of Gaussian `i`.
pub fn perturb(cloud: &GaussianCloud, i: usize, k: usize, h: f64) -> GaussianCloud {
    let mut c = cloud.clone();
    let g = &mut c.gaussians_mut()[i];
    match k {
        0..=2 => g.mu[k] += h,
        3..=6 => g.quat[k - 3] += h,
        7..=9 => g.log_scale[k - 7] += h,
        10 => g.logit_opacity += h,
        _ => g.color[k - 11] += h,
    }
    c
}

pub fn dense_cov(g: &Gaussian3D) -> DMatrix<f64> {
    // R·S·Sᵀ·Rᵀ with dense matrices built from the raw quaternion.
    let n = g.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = g.quat.map(|v| v / n);
    let r = DMatrix::from_row_slice(3, 3, &[
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    ]);
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(3, g.log_scale.iter().map(|l| l.exp())));
    let m = &r * &s;
    &m * m.transpose()
}

pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

pub fn gds_oracle(g1: &Gaussian3D, g2: &Gaussian3D, form: GdsForm) -> f64 {
    let (s1, s2) = (dense_cov(g1), dense_cov(g2));
    let inner = match form {
        GdsForm::Wasserstein => {
            let r = psd_sqrt(&s1);
            &r * &s2 * &r
        }
        GdsForm::Literal => {
            let inv = s1.clone().try_inverse().unwrap();
            &inv * &s2 * &inv
        }
    };
    let cross = psd_sqrt(&inner).trace();
    let value = (g1.mu - g2.mu).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    match form {
        GdsForm::Wasserstein => value.max(0.0),
        GdsForm::Literal => value,
    }
}

pub fn brute_nearest(cloud: &GaussianCloud, i: usize) -> usize {
    let g = cloud.gaussians();
    let mut best = (f64::INFINITY, usize::MAX);
    for j in 0..g.len() {
        if j == i {
            continue;
        }
        let d = (g[i].mu - g[j].mu).norm_squared();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

pub fn two_views(rng: &mut impl Rng) -> (Camera, Camera) {
    let (da, db) = (rng.random_range(2.0..4.0), rng.random_range(2.0..4.0));
    let a = super::random_camera(rng, 48, da);
    let mut b = super::random_camera(rng, 64, db);
    b.height = 40;
    b.cy = 20.0 + rng.random_range(-1.0..1.0);
    (a, b)
}

pub fn dense_attention(f_s: &FeatureMap, f_t: &FeatureMap, gate: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = f_s.h * f_s.w;
    let scores = &f_s.data * f_t.data.transpose() / (f_s.d as f64).sqrt();
    let mut p = DMatrix::zeros(n, n);
    for r in 0..n {
        let max = scores.row(r).max();
        let e: Vec<f64> = scores.row(r).iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let gated: Vec<f64> = (0..n).map(|c| e[c] / z * gate[(r, c)]).collect();
        let g: f64 = gated.iter().sum();
        for c in 0..n {
            // Rows with no mass left under the gate keep the plain softmax.
            p[(r, c)] = if g < 1e-12 { e[c] / z } else { gated[c] / g };
        }
    }
    let out = &p * &f_t.data;
    (p, out)
}

/// Step-by-step loops, no matrix products from the library.
pub fn cross_attn_oracle(u: &DMatrix<f64>, h: &DMatrix<f64>, w: &PlaneDecoderWeights) -> DMatrix<f64> {
    let d = w.dim();
    let apply = |m: &DMatrix<f64>, x: &DMatrix<f64>| {
        DMatrix::from_fn(x.nrows(), d, |r, i| (0..d).map(|j| m[(i, j)] * x[(r, j)]).sum())
    };
    let attend = |q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(q.nrows(), d);
        for r in 0..q.nrows() {
            let scores: Vec<f64> =
                (0..k.nrows()).map(|c| (0..d).map(|i| q[(r, i)] * k[(c, i)]).sum::<f64>() / (d as f64).sqrt()).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k.nrows() {
                for i in 0..d {
                    out[(r, i)] += e[c] / z * v[(c, i)];
                }
            }
        }
        out
    };
    let s = attend(&apply(&w.self_wq, u), &apply(&w.self_wk, u), &apply(&w.self_wv, u));
    attend(&apply(&w.wq, &s), &apply(&w.wk, h), &apply(&w.wv, h))
}
