//! Per-scene optimization: render, loss, analytic gradients, AdamW update
//! and gated densification.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::density::{build_index, densify_and_prune, nearest_neighbor, DensifyReport, GdsConfig};
use crate::gaussian::{Camera, Gaussian3D, GaussianCloud};
use crate::image::{psnr_from_mse, Image};
use crate::loss::{total_loss, LossError, LossWeights};
use crate::raster::{render, render_backward, RasterError};
use crate::scene::{camera_extent, Bounds, SceneError};

/// Parameters per Gaussian: mu 3, quat 4, log_scale 3, logit_opacity 1, color 3.
pub const PARAMS: usize = 14;

pub const INIT_OPACITY: f64 = 0.1;
pub const INIT_GRAY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training views")]
    NoViews,
    #[error("view {id}: image is {got_w}x{got_h}, camera expects {want_w}x{want_h}")]
    ViewSize { id: u32, got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
    #[error("camera {id}: {reason}")]
    Camera { id: u32, reason: String },
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize, snapshot: Box<GaussianCloud> },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Step sizes per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl LearningRates {
    pub fn grouped(extent: f64) -> Self {
        Self { position: 1.6e-4 * extent, rotation: 1e-3, scale: 5e-3, opacity: 5e-2, color: 2.5e-3 }
    }

    pub fn uniform(lr: f64) -> Self {
        Self { position: lr, rotation: lr, scale: lr, opacity: lr, color: lr }
    }

    fn per_param(&self, position_factor: f64) -> [f64; PARAMS] {
        let p = self.position * position_factor;
        [
            p, p, p,
            self.rotation, self.rotation, self.rotation, self.rotation,
            self.scale, self.scale, self.scale,
            self.opacity,
            self.color, self.color, self.color,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    /// Per-group rates, position scaled by the camera extent.
    Grouped,
    /// The same rate for every parameter.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: LrPolicy,
    /// Position rate at the last iteration as a fraction of the first;
    /// decays exponentially in between.
    pub position_lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub gds: GdsConfig,
    pub loss: LossWeights,
    pub seed: u64,
    /// Info-log cadence; 0 disables.
    pub log_interval: usize,
    /// Snapshot cadence for [`Trainer::fit`] callers; 0 disables.
    pub checkpoint_interval: usize,
    /// Views rendered per iteration when there are more than this many,
    /// one random view is used instead.
    pub max_full_batch: usize,
    pub init_count: usize,
    /// Initialization box; guessed from the cameras when `None`.
    pub bounds: Option<Bounds>,
    /// Record wall-clock time in the metrics (breaks byte-identical logs).
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            lr: LrPolicy::Grouped,
            position_lr_final: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            weight_decay: 0.0,
            gds: GdsConfig { until: 1500, ..GdsConfig::default() },
            loss: LossWeights::default(),
            seed: 0,
            log_interval: 0,
            checkpoint_interval: 0,
            max_full_batch: 8,
            init_count: 1000,
            bounds: None,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("moment decays must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight decay non-negative".into());
        }
        if !(self.position_lr_final > 0.0) {
            return bad("position_lr_final must be positive".into());
        }
        if let LrPolicy::Uniform(lr) = self.lr {
            if !(lr > 0.0) {
                return bad(format!("learning rate must be positive, got {lr}"));
            }
        }
        if !(self.loss.lambda1 >= 0.0 && self.loss.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.init_count == 0 {
            return bad("init_count must be at least 1".into());
        }
        self.gds.validate().map_err(TrainError::Config)
    }
}

/// Uniform positions, isotropic scale equal to the mean nearest-neighbour
/// spacing, opacity 0.1, mid-gray, identity rotation. A single Gaussian sits
/// at the box center with half the mean box edge as its scale.
pub fn init_cloud(n: usize, bounds: &Bounds, seed: u64) -> Result<GaussianCloud, TrainError> {
    if n == 0 {
        return Err(TrainError::Config("init_cloud needs n >= 1".into()));
    }
    // Revalidate in case the box was built by hand.
    let bounds = Bounds::new(bounds.min, bounds.max)?;
    let gray = Vector3::repeat(INIT_GRAY);
    if n == 1 {
        let scale = bounds.size().mean() / 2.0;
        return Ok(GaussianCloud::from_gaussians(vec![Gaussian3D::isotropic(bounds.center(), scale, INIT_OPACITY, gray)]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = bounds.size();
    let points: Vec<Vector3<f64>> = (0..n)
        .map(|_| bounds.min + Vector3::from_fn(|k, _| rng.random::<f64>() * size[k]))
        .collect();
    let mut cloud = GaussianCloud::from_gaussians(points.iter().map(|&p| Gaussian3D::isotropic(p, 1.0, INIT_OPACITY, gray)).collect());
    let index = build_index(&cloud);
    let mut spacing = 0.0;
    for i in 0..n {
        let j = nearest_neighbor(&cloud, &index, i).expect("n >= 2");
        spacing += (points[i] - points[j]).norm();
    }
    let spacing = (spacing / n as f64).max(1e-6);
    for g in cloud.gaussians_mut() {
        g.log_scale = Vector3::repeat(spacing.ln());
    }
    Ok(cloud)
}

fn params_of(g: &Gaussian3D) -> [f64; PARAMS] {
    [
        g.mu.x, g.mu.y, g.mu.z,
        g.quat[0], g.quat[1], g.quat[2], g.quat[3],
        g.log_scale.x, g.log_scale.y, g.log_scale.z,
        g.logit_opacity,
        g.color.x, g.color.y, g.color.z,
    ]
}

fn set_params(g: &mut Gaussian3D, p: &[f64; PARAMS]) {
    g.mu = Vector3::new(p[0], p[1], p[2]);
    g.quat = [p[3], p[4], p[5], p[6]];
    g.log_scale = Vector3::new(p[7], p[8], p[9]);
    g.logit_opacity = p[10];
    g.color = Vector3::new(p[11], p[12], p[13]);
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterMetrics {
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
    pub n_gauss: usize,
    pub densify: DensifyReport,
    pub ms_elapsed: u64,
}

pub const METRICS_HEADER: &str = "iter,loss,psnr,n_gauss,n_split,n_clone,n_prune,n_gds_blocked,ms_elapsed";

pub fn metrics_csv(rows: &[IterMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let d = &r.densify;
        writeln!(
            out,
            "{},{:.10e},{:.6},{},{},{},{},{},{}",
            r.iter, r.loss, r.psnr, r.n_gauss, d.n_split, d.n_clone, d.n_prune, d.n_gds_blocked, r.ms_elapsed
        )
        .expect("writing to a String");
    }
    out
}

/// Optimizer state that travels with the cloud.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cloud: GaussianCloud,
    pub m: Vec<[f64; PARAMS]>,
    pub v: Vec<[f64; PARAMS]>,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cloud: GaussianCloud, seed: u64) -> Self {
        let n = cloud.len();
        Self {
            cloud,
            m: vec![[0.0; PARAMS]; n],
            v: vec![[0.0; PARAMS]; n],
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }

    /// Re-aligns moments after the cloud changed: survivors keep theirs by
    /// id, new Gaussians start from zero.
    fn remap_moments(&mut self, old_ids: &[u64]) {
        let by_id: HashMap<u64, usize> = old_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let (m, v): (Vec<_>, Vec<_>) = self
            .cloud
            .ids()
            .iter()
            .map(|id| match by_id.get(id) {
                Some(&i) => (self.m[i], self.v[i]),
                None => ([0.0; PARAMS], [0.0; PARAMS]),
            })
            .unzip();
        self.m = m;
        self.v = v;
    }
}

/// Drives optimization over a fixed set of posed images.
pub struct Trainer {
    views: Vec<(Camera, Image)>,
    cfg: TrainConfig,
    state: TrainState,
    extent: f64,
    rates: LearningRates,
    metrics: Vec<IterMetrics>,
    started: Instant,
}

impl Trainer {
    pub fn new(views: Vec<(Camera, Image)>, cloud: GaussianCloud, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if views.is_empty() {
            return Err(TrainError::NoViews);
        }
        for (cam, img) in &views {
            cam.validate().map_err(|e| TrainError::Camera { id: cam.id, reason: e.to_string() })?;
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(TrainError::ViewSize {
                    id: cam.id,
                    got_w: img.width,
                    got_h: img.height,
                    want_w: cam.width,
                    want_h: cam.height,
                });
            }
        }
        let cameras: Vec<Camera> = views.iter().map(|(c, _)| c.clone()).collect();
        let extent = camera_extent(&cameras);
        let rates = match cfg.lr {
            LrPolicy::Grouped => LearningRates::grouped(extent),
            LrPolicy::Uniform(lr) => LearningRates::uniform(lr),
        };
        let state = TrainState::new(cloud, cfg.seed);
        Ok(Self { views, cfg, state, extent, rates, metrics: Vec::new(), started: Instant::now() })
    }

    /// Initializes with [`init_cloud`] inside the configured (or guessed) bounds.
    pub fn with_init(views: Vec<(Camera, Image)>, cfg: TrainConfig) -> Result<Self, TrainError> {
        if views.is_empty() {
            return Err(TrainError::NoViews);
        }
        let bounds = match cfg.bounds {
            Some(b) => b,
            None => Bounds::from_cameras(&views.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>())?,
        };
        let cloud = init_cloud(cfg.init_count, &bounds, cfg.seed)?;
        Self::new(views, cloud, cfg)
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.state.cloud
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn metrics(&self) -> &[IterMetrics] {
        &self.metrics
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn rates(&self) -> LearningRates {
        self.rates
    }

    pub fn into_parts(self) -> (GaussianCloud, Vec<IterMetrics>) {
        (self.state.cloud, self.metrics)
    }

    fn non_finite(&self, what: &'static str) -> TrainError {
        TrainError::NonFinite { what, iteration: self.state.iteration + 1, snapshot: Box::new(self.state.cloud.clone()) }
    }

    /// Runs one iteration and returns its metrics row.
    pub fn step(&mut self) -> Result<IterMetrics, TrainError> {
        let n_views = self.views.len();
        let batch: Vec<usize> = if n_views <= self.cfg.max_full_batch {
            (0..n_views).collect()
        } else {
            vec![self.state.rng.random_range(0..n_views)]
        };

        let mut renders = Vec::with_capacity(batch.len());
        for &k in &batch {
            renders.push(render(&self.state.cloud, &self.views[k].0)?.color);
        }
        let targets: Vec<Image> = batch.iter().map(|&k| self.views[k].1.clone()).collect();
        let loss = total_loss(&renders, &targets, &self.cfg.loss)?;
        if !loss.total.is_finite() {
            return Err(self.non_finite("loss"));
        }

        let n = self.state.cloud.len();
        let mut grads = crate::raster::GaussianGrads::zeros(n);
        for (&k, g_img) in batch.iter().zip(&loss.grads) {
            let cam = &self.views[k].0;
            let g = render_backward(&self.state.cloud, cam, g_img)?;
            // Screen gradients in normalized device units, as the
            // densification threshold expects.
            let to_ndc = 0.5 * cam.width.max(cam.height) as f64;
            for i in 0..n {
                if g.visible[i] {
                    self.state.cloud.accumulate_grad(i, g.mean2d_norm[i] * to_ndc);
                }
            }
            grads.add_assign(&g);
        }
        if !grads.is_finite() {
            return Err(self.non_finite("gradient"));
        }

        self.adam_update(&grads);

        let iter = self.state.iteration + 1;
        let mut report = DensifyReport::default();
        if self.cfg.gds.is_densify_step(iter) && iter < self.cfg.iters {
            let old_ids = self.state.cloud.ids().to_vec();
            report = densify_and_prune(&mut self.state.cloud, &self.cfg.gds, self.extent, &mut self.state.rng);
            self.state.remap_moments(&old_ids);
            log::debug!(
                "iter {iter}: split {} clone {} prune {} blocked {} -> {} Gaussians",
                report.n_split,
                report.n_clone,
                report.n_prune,
                report.n_gds_blocked,
                self.state.cloud.len()
            );
        }
        self.state.iteration = iter;

        let row = IterMetrics {
            iter,
            loss: loss.total,
            psnr: psnr_from_mse(loss.rec),
            n_gauss: self.state.cloud.len(),
            densify: report,
            ms_elapsed: if self.cfg.record_timing { self.started.elapsed().as_millis() as u64 } else { 0 },
        };
        if self.cfg.log_interval > 0 && iter % self.cfg.log_interval == 0 {
            log::info!("iter {iter}: loss {:.6e} psnr {:.2} dB, {} Gaussians", row.loss, row.psnr, row.n_gauss);
        }
        self.metrics.push(row);
        Ok(row)
    }

    fn adam_update(&mut self, grads: &crate::raster::GaussianGrads) {
        let t = (self.state.iteration + 1) as i32;
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let progress = if self.cfg.iters > 1 { self.state.iteration as f64 / (self.cfg.iters - 1) as f64 } else { 0.0 };
        let lr = self.rates.per_param(self.cfg.position_lr_final.powf(progress.min(1.0)));
        let flat = grads.flatten();
        let state = &mut self.state;
        for (i, g) in state.cloud.gaussians_mut().iter_mut().enumerate() {
            let mut p = params_of(g);
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for k in 0..PARAMS {
                let gk = flat[i * PARAMS + k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                p[k] -= lr[k] * (update + wd * p[k]);
            }
            set_params(g, &p);
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
            g.normalize_quat();
        }
    }

    /// Runs the remaining iterations. `on_checkpoint` is called every
    /// `checkpoint_interval` iterations with the current cloud.
    pub fn fit(&mut self, mut on_checkpoint: impl FnMut(usize, &GaussianCloud)) -> Result<(), TrainError> {
        while self.state.iteration < self.cfg.iters {
            self.step()?;
            let it = self.state.iteration;
            if self.cfg.checkpoint_interval > 0 && it % self.cfg.checkpoint_interval == 0 {
                on_checkpoint(it, &self.state.cloud);
            }
        }
        Ok(())
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub cloud: GaussianCloud,
    pub metrics: Vec<IterMetrics>,
}

impl FitOutput {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }
}

/// Initializes a cloud and optimizes it against `views`.
pub fn fit(views: Vec<(Camera, Image)>, cfg: &TrainConfig) -> Result<FitOutput, TrainError> {
    let mut trainer = Trainer::with_init(views, cfg.clone())?;
    trainer.fit(|_, _| {})?;
    let (cloud, metrics) = trainer.into_parts();
    Ok(FitOutput { cloud, metrics })
}

/// Mean PSNR of `cloud` over the views.
pub fn evaluate_psnr(cloud: &GaussianCloud, views: &[(Camera, Image)]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (cam, img) in views {
        let r = render(cloud, cam)?;
        total += psnr_from_mse(crate::image::mse(&r.color, img));
    }
    Ok(total / views.len().max(1) as f64)
}

/// Mean MSE of `cloud` over the views.
pub fn evaluate_mse(cloud: &GaussianCloud, views: &[(Camera, Image)]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (cam, img) in views {
        total += crate::image::mse(&render(cloud, cam)?.color, img);
    }
    Ok(total / views.len().max(1) as f64)
}
