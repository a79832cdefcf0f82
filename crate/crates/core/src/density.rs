//! Adaptive density control gated by Gaussian Divergent Significance (GDS).
//!
//! GDS is a squared distance between two Gaussians: the squared distance of
//! their means plus a covariance term. Densification candidates (large
//! accumulated screen-space gradient) whose nearest neighbour is closer than
//! the GDS threshold are left alone, since they are still moving toward
//! each other and splitting them changes little.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::gaussian::{build_covariance, Gaussian3D, GaussianCloud, GaussianError};
use crate::linalg::jacobi_eigen;
use crate::spatial::SpatialIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GdsError {
    #[error("first covariance is singular (smallest eigenvalue {0:e}); the literal form needs its inverse")]
    SingularCovariance(f64),
    #[error("nearest-neighbour GDS needs at least two Gaussians, cloud has {0}")]
    TooFewGaussians(usize),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Covariance term of GDS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GdsForm {
    /// `tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`, the squared 2-Wasserstein distance.
    #[default]
    Wasserstein,
    /// `tr(Σ₁ + Σ₂ − 2(Σ₁⁻¹ Σ₂ Σ₁⁻¹)^½)`. Not zero for identical Gaussians.
    Literal,
}

impl std::str::FromStr for GdsForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wasserstein" => Ok(Self::Wasserstein),
            "literal" => Ok(Self::Literal),
            other => Err(format!("unknown GDS form `{other}` (expected wasserstein|literal)")),
        }
    }
}

impl std::fmt::Display for GdsForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Wasserstein => "wasserstein",
            Self::Literal => "literal",
        })
    }
}

pub const LITERAL_MIN_EIGENVALUE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdsConfig {
    /// Candidates whose nearest-neighbour GDS is at or below this are not densified.
    /// Zero disables the gate.
    pub threshold: f64,
    pub form: GdsForm,
    /// Mean screen-space positional gradient norm that makes a Gaussian a candidate.
    pub grad_threshold: f64,
    pub densify_interval: usize,
    pub warmup: usize,
    /// Last iteration (inclusive) at which densification runs.
    pub until: usize,
    pub prune_opacity: f64,
    pub split_factor: f64,
    /// Split rather than clone when the largest scale exceeds this fraction
    /// of the scene diagonal.
    pub percent_dense: f64,
}

impl Default for GdsConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            form: GdsForm::Wasserstein,
            grad_threshold: 2e-4,
            densify_interval: 100,
            warmup: 500,
            until: usize::MAX,
            prune_opacity: 0.005,
            split_factor: 1.6,
            percent_dense: 0.01,
        }
    }
}

impl GdsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold >= 0.0) {
            return Err(format!("GDS threshold must be >= 0, got {}", self.threshold));
        }
        if !(self.split_factor > 1.0) {
            return Err(format!("split factor must be > 1, got {}", self.split_factor));
        }
        if self.densify_interval == 0 {
            return Err("densify interval must be positive".into());
        }
        Ok(())
    }

    /// Whether densification is scheduled after `iteration` (1-based).
    pub fn is_densify_step(&self, iteration: usize) -> bool {
        iteration >= self.warmup && iteration <= self.until && iteration % self.densify_interval == 0
    }
}

fn trace_sqrt_psd(m: &Matrix3<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    jacobi_eigen(&sym).values.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// Gaussian Divergent Significance between two Gaussians.
///
/// Both traces use `tr(R S Sᵀ Rᵀ) = Σ exp(2·log_scale)`, and the square root
/// and inverse of `Σ₁` come straight from its factorization (`R S Rᵀ`,
/// `R S⁻² Rᵀ`); only the final matrix square root needs an eigen-solve.
pub fn gds(g1: &Gaussian3D, g2: &Gaussian3D, form: GdsForm) -> Result<f64, GdsError> {
    let d2 = (g1.mu - g2.mu).norm_squared();
    let tr1 = g1.covariance_trace();
    let tr2 = g2.covariance_trace();
    let r1 = g1.rotation()?;
    let s1 = g1.scales();
    let sigma2 = *build_covariance(g2)?.matrix();
    match form {
        GdsForm::Wasserstein => {
            let half = r1 * Matrix3::from_diagonal(&s1) * r1.transpose();
            let cross = trace_sqrt_psd(&(half * sigma2 * half));
            Ok((d2 + tr1 + tr2 - 2.0 * cross).max(0.0))
        }
        GdsForm::Literal => {
            let var = s1.map(|s| s * s);
            let min = var.min();
            if !(min > LITERAL_MIN_EIGENVALUE) {
                return Err(GdsError::SingularCovariance(min));
            }
            let inv = r1 * Matrix3::from_diagonal(&var.map(|v| 1.0 / v)) * r1.transpose();
            let cross = trace_sqrt_psd(&(inv * sigma2 * inv));
            Ok(d2 + tr1 + tr2 - 2.0 * cross)
        }
    }
}

pub fn build_index(cloud: &GaussianCloud) -> SpatialIndex {
    let points: Vec<Vector3<f64>> = cloud.gaussians().iter().map(|g| g.mu).collect();
    SpatialIndex::build(&points, cloud.ids())
}

/// Index of the exact nearest neighbour of Gaussian `i` (ties → smaller id).
pub fn nearest_neighbor(cloud: &GaussianCloud, index: &SpatialIndex, i: usize) -> Result<usize, GdsError> {
    if cloud.len() < 2 {
        return Err(GdsError::TooFewGaussians(cloud.len()));
    }
    let (j, _) = index
        .nearest(&cloud.gaussians()[i].mu, Some(i))
        .ok_or(GdsError::TooFewGaussians(cloud.len()))?;
    Ok(j)
}

/// GDS between Gaussian `i` and its nearest neighbour.
pub fn nearest_gds(cloud: &GaussianCloud, index: &SpatialIndex, i: usize, form: GdsForm) -> Result<f64, GdsError> {
    let j = nearest_neighbor(cloud, index, i)?;
    let gs = cloud.gaussians();
    gds(&gs[i], &gs[j], form)
}

/// Nearest-neighbour GDS for every Gaussian.
pub fn all_nearest_gds(cloud: &GaussianCloud, form: GdsForm) -> Result<Vec<f64>, GdsError> {
    let index = build_index(cloud);
    (0..cloud.len()).map(|i| nearest_gds(cloud, &index, i, form)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub n_split: usize,
    pub n_clone: usize,
    pub n_prune: usize,
    pub n_gds_blocked: usize,
}

impl DensifyReport {
    pub fn densified(&self) -> usize {
        self.n_split + self.n_clone
    }
}

/// What to do with a Gaussian at a densification step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Blocked,
    Clone,
    Split,
}

/// Classifies every Gaussian without mutating the cloud.
pub fn plan_densification(cloud: &GaussianCloud, cfg: &GdsConfig, scene_extent: f64) -> Vec<Decision> {
    let gate = cfg.threshold > 0.0 && cloud.len() >= 2;
    let index = gate.then(|| build_index(cloud));
    let size_limit = cfg.percent_dense * scene_extent;
    (0..cloud.len())
        .map(|i| {
            if !(cloud.mean_grad(i) > cfg.grad_threshold) {
                return Decision::Keep;
            }
            if let Some(index) = &index {
                match nearest_gds(cloud, index, i, cfg.form) {
                    Ok(v) if v <= cfg.threshold => return Decision::Blocked,
                    Ok(_) => {}
                    Err(e) => log::debug!("GDS unavailable for Gaussian {i}: {e}; not gating"),
                }
            }
            let g = &cloud.gaussians()[i];
            if g.scales().max() > size_limit {
                Decision::Split
            } else {
                Decision::Clone
            }
        })
        .collect()
}

/// Splits, clones and prunes in place. New Gaussians are appended with fresh
/// ids; survivors keep theirs. Accumulated gradients are reset.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    cfg: &GdsConfig,
    scene_extent: f64,
    rng: &mut impl Rng,
) -> DensifyReport {
    let plan = plan_densification(cloud, cfg, scene_extent);
    let mut report = DensifyReport::default();
    let original = cloud.len();
    let log_shrink = cfg.split_factor.ln();
    for (i, decision) in plan.iter().enumerate() {
        let g = cloud.gaussians()[i];
        match decision {
            Decision::Keep => {}
            Decision::Blocked => report.n_gds_blocked += 1,
            Decision::Clone => {
                report.n_clone += 1;
                cloud.push(g);
            }
            Decision::Split => {
                report.n_split += 1;
                let rot = g.rotation().unwrap_or_else(|_| Matrix3::identity());
                let scales = g.scales();
                for _ in 0..2 {
                    let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    let mut child = g;
                    child.mu = g.mu + rot * scales.component_mul(&z);
                    child.log_scale = g.log_scale.map(|s| s - log_shrink);
                    cloud.push(child);
                }
            }
        }
    }

    let prune_opacity = cfg.prune_opacity;
    let gaussians = cloud.gaussians().to_vec();
    let mut pruned = 0;
    cloud.retain_indices(|i| {
        if i < original && plan[i] == Decision::Split {
            return false;
        }
        let g = &gaussians[i];
        let keep = g.opacity() >= prune_opacity && g.is_finite();
        if !keep {
            pruned += 1;
        }
        keep
    });
    report.n_prune = pruned;
    cloud.reset_grad_accum();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn iso(x: f64, y: f64, z: f64, scale: f64) -> Gaussian3D {
        Gaussian3D::isotropic(Vector3::new(x, y, z), scale, 0.5, Vector3::repeat(0.5))
    }

    #[test]
    fn identical_gaussians_have_zero_distance() {
        let mut g = iso(0.3, -0.2, 1.0, 0.2);
        g.quat = [0.8, 0.2, -0.4, 0.4];
        g.normalize_quat();
        g.log_scale = Vector3::new(-1.0, -2.0, -1.5);
        assert!(gds(&g, &g, GdsForm::Wasserstein).unwrap().abs() < 1e-8);
        // The literal form does not vanish.
        assert!(gds(&g, &g, GdsForm::Literal).unwrap().abs() > 1.0);
    }

    #[test]
    fn isotropic_offset() {
        let a = iso(0.0, 0.0, 0.0, 1.0);
        let b = iso(1.0, 2.0, 2.0, 1.0);
        assert!((gds(&a, &b, GdsForm::Wasserstein).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_scales_closed_form() {
        // W2² between isotropic Gaussians is ‖Δμ‖² + 3(s₁ − s₂)².
        let a = iso(0.0, 0.0, 0.0, 0.5);
        let b = iso(0.1, 0.0, 0.0, 0.2);
        let v = gds(&a, &b, GdsForm::Wasserstein).unwrap();
        assert!((v - (0.01 + 3.0 * 0.09)).abs() < 1e-12);
    }

    #[test]
    fn literal_singular_rejected() {
        let a = Gaussian3D { log_scale: Vector3::new(-20.0, 0.0, 0.0), ..iso(0.0, 0.0, 0.0, 1.0) };
        let b = iso(1.0, 0.0, 0.0, 1.0);
        assert!(matches!(gds(&a, &b, GdsForm::Literal), Err(GdsError::SingularCovariance(_))));
        assert!(gds(&a, &b, GdsForm::Wasserstein).is_ok());
    }

    #[test]
    fn nearest_on_a_line() {
        let cloud = GaussianCloud::from_gaussians(vec![iso(0.0, 0.0, 0.0, 0.1), iso(1.0, 0.0, 0.0, 0.1), iso(5.0, 0.0, 0.0, 0.1)]);
        let index = build_index(&cloud);
        assert_eq!(nearest_neighbor(&cloud, &index, 2).unwrap(), 1);
        let v = nearest_gds(&cloud, &index, 2, GdsForm::Wasserstein).unwrap();
        assert!((v - 16.0).abs() < 1e-12);
    }

    #[test]
    fn pair_is_symmetric_and_singleton_errors() {
        let cloud = GaussianCloud::from_gaussians(vec![iso(0.0, 0.0, 0.0, 0.1), iso(0.0, 1.0, 0.5, 0.3)]);
        let index = build_index(&cloud);
        let a = nearest_gds(&cloud, &index, 0, GdsForm::Wasserstein).unwrap();
        let b = nearest_gds(&cloud, &index, 1, GdsForm::Wasserstein).unwrap();
        assert!((a - b).abs() < 1e-12);
        let single = GaussianCloud::from_gaussians(vec![iso(0.0, 0.0, 0.0, 0.1)]);
        let index = build_index(&single);
        assert_eq!(nearest_gds(&single, &index, 0, GdsForm::Wasserstein), Err(GdsError::TooFewGaussians(1)));
    }

    fn with_grads(gs: Vec<Gaussian3D>, grads: &[f64]) -> GaussianCloud {
        let mut cloud = GaussianCloud::from_gaussians(gs);
        for (i, &g) in grads.iter().enumerate() {
            cloud.accumulate_grad(i, g);
        }
        cloud
    }

    #[test]
    fn small_gradients_only_prune() {
        let mut faint = iso(3.0, 0.0, 0.0, 0.1);
        faint.logit_opacity = -8.0;
        let mut cloud = with_grads(vec![iso(0.0, 0.0, 0.0, 0.1), iso(1.0, 0.0, 0.0, 0.1), faint], &[1e-5, 0.0, 1e-6]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let r = densify_and_prune(&mut cloud, &GdsConfig::default(), 1.0, &mut rng);
        assert_eq!(r, DensifyReport { n_prune: 1, ..Default::default() });
        assert_eq!(cloud.ids(), &[0, 1]);
        assert!(cloud.grad_accum().iter().all(|a| *a == [0.0, 0.0]));
    }

    #[test]
    fn overlapping_pair_is_blocked() {
        let mut cloud = with_grads(vec![iso(0.0, 0.0, 0.0, 0.05), iso(0.01, 0.0, 0.0, 0.05)], &[1.0, 1.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let r = densify_and_prune(&mut cloud, &GdsConfig::default(), 1.0, &mut rng);
        assert_eq!(r, DensifyReport { n_gds_blocked: 2, ..Default::default() });
        assert_eq!(cloud.len(), 2);
    }

    #[test]
    fn gate_off_never_blocks() {
        let mut cloud = with_grads(vec![iso(0.0, 0.0, 0.0, 0.05), iso(0.0, 0.0, 0.0, 0.05)], &[1.0, 1.0]);
        let cfg = GdsConfig { threshold: 0.0, ..Default::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let r = densify_and_prune(&mut cloud, &cfg, 1.0, &mut rng);
        assert_eq!(r.n_gds_blocked, 0);
        assert_eq!(r.n_split, 2);
        assert_eq!(cloud.len(), 4);
        assert_eq!(cloud.ids(), &[2, 3, 4, 5]);
    }

    #[test]
    fn split_children_shrink() {
        let parent = iso(0.0, 0.0, 0.0, 0.2);
        let mut cloud = with_grads(vec![parent], &[1.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let r = densify_and_prune(&mut cloud, &GdsConfig::default(), 1.0, &mut rng);
        assert_eq!(r.n_split, 1);
        assert_eq!(cloud.len(), 2);
        for child in cloud.gaussians() {
            assert!((child.scales().x - 0.2 / 1.6).abs() < 1e-12);
            assert_eq!(child.color, parent.color);
            assert_eq!(child.logit_opacity, parent.logit_opacity);
            assert!(child.mu != parent.mu);
        }
    }

    #[test]
    fn schedule() {
        let cfg = GdsConfig { until: 1500, ..Default::default() };
        assert!(!cfg.is_densify_step(400));
        assert!(cfg.is_densify_step(500));
        assert!(!cfg.is_densify_step(550));
        assert!(cfg.is_densify_step(1500));
        assert!(!cfg.is_densify_step(1600));
    }
}
