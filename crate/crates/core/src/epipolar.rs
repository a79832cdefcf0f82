//! Epipolar lines between two views, the sigmoid band weights derived from
//! them, and attention gated by those weights.
//!
//! All 2D quantities are in normalized image coordinates (`[0,1]²`, x right,
//! y down), so the band constants are resolution independent.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::attention::attention_probs;
use crate::gaussian::{sigmoid, Camera};

/// Steepness of the band edge.
pub const BAND_SHARPNESS: f64 = 60.0;
/// Distance (normalized units) at which the weight is one half.
pub const BAND_HALF_WIDTH: f64 = 0.06;

const MIN_DEPTH: f64 = 1e-6;
const MIN_DIRECTION: f64 = 1e-9;
const GATED_ROW_MIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpipolarError {
    #[error("degenerate epipolar line (pure rotation or point on the baseline); use uniform weights")]
    Degenerate,
    #[error("ray point or camera origin is behind the source camera (z = {0:e})")]
    BehindCamera(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Pinhole intrinsics with the image size used for normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub width: f64,
    pub height: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn of(cam: &Camera) -> Self {
        Self { width: cam.width as f64, height: cam.height as f64, fx: cam.fx, fy: cam.fy, cx: cam.cx, cy: cam.cy }
    }

    /// Projection to normalized coordinates; fails for points not in front.
    pub fn project(&self, p: &Vector3<f64>) -> Result<[f64; 2], EpipolarError> {
        if !(p.z > MIN_DEPTH) {
            return Err(EpipolarError::BehindCamera(p.z));
        }
        Ok([
            (self.fx * p.x / p.z + self.cx) / self.width,
            (self.fy * p.y / p.z + self.cy) / self.height,
        ])
    }

    /// Same map without the in-front check; the caller guarantees `p.z ≠ 0`.
    fn project_homogeneous(&self, p: &Vector3<f64>) -> [f64; 2] {
        [
            (self.fx * p.x / p.z + self.cx) / self.width,
            (self.fy * p.y / p.z + self.cy) / self.height,
        ]
    }

    /// Camera-frame point at unit depth through a normalized image point.
    pub fn lift(&self, p: [f64; 2]) -> Vector3<f64> {
        Vector3::new(
            (p[0] * self.width - self.cx) / self.fx,
            (p[1] * self.height - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Rigid transform from the target camera frame to the source camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rot_ts: Matrix3<f64>,
    pub trans_ts: Vector3<f64>,
}

impl RelativePose {
    pub fn between(source: &Camera, target: &Camera) -> Self {
        let (rot_ts, trans_ts) = source.relative_from(target);
        Self { rot_ts, trans_ts }
    }

    pub fn identity() -> Self {
        Self { rot_ts: Matrix3::identity(), trans_ts: Vector3::zeros() }
    }
}

/// `origin + c·(through − origin)` for real `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub origin: [f64; 2],
    pub through: [f64; 2],
}

impl EpipolarLine {
    pub fn direction(&self) -> [f64; 2] {
        [self.through[0] - self.origin[0], self.through[1] - self.origin[1]]
    }

    pub fn point_at(&self, c: f64) -> [f64; 2] {
        let d = self.direction();
        [self.origin[0] + c * d[0], self.origin[1] + c * d[1]]
    }
}

/// Epipolar line in the source view of a normalized target-view point.
///
/// The target point is lifted to depth 1 and mapped into the source frame;
/// the target camera center is projected as the line origin. Points behind
/// the source camera still project onto the same image line, so only a
/// vanishing depth is a problem: when the center lies in the source
/// camera's principal plane (epipole at infinity) the next point along the
/// ray takes its place.
pub fn epipolar_line(
    p_t: [f64; 2],
    pose: &RelativePose,
    target: &Intrinsics,
    source: &Intrinsics,
) -> Result<EpipolarLine, EpipolarError> {
    if pose.trans_ts.norm() < MIN_DIRECTION {
        return Err(EpipolarError::Degenerate);
    }
    let ray = pose.rot_ts * target.lift(p_t);
    let mut points = (0..4)
        .map(|k| pose.trans_ts + ray * k as f64)
        .filter(|p| p.z.abs() > MIN_DEPTH)
        .map(|p| source.project_homogeneous(&p));
    let (Some(origin), Some(through)) = (points.next(), points.next()) else {
        return Err(EpipolarError::Degenerate);
    };
    let line = EpipolarLine { origin, through };
    let [dx, dy] = line.direction();
    if (dx * dx + dy * dy).sqrt() < MIN_DIRECTION {
        return Err(EpipolarError::Degenerate);
    }
    Ok(line)
}

/// Distance from `p_s` to the line, `‖(p_s − o) × (q − o)‖ / ‖q − o‖`.
pub fn epipolar_distance(p_s: [f64; 2], line: &EpipolarLine) -> Result<f64, EpipolarError> {
    let [dx, dy] = line.direction();
    let len = (dx * dx + dy * dy).sqrt();
    if !(len >= MIN_DIRECTION) {
        return Err(EpipolarError::Degenerate);
    }
    let (rx, ry) = (p_s[0] - line.origin[0], p_s[1] - line.origin[1]);
    Ok((rx * dy - ry * dx).abs() / len)
}

/// Band weight `1 − sigmoid(60·(d − 0.06))`.
pub fn band_weight(distance: f64) -> f64 {
    1.0 - sigmoid(BAND_SHARPNESS * (distance - BAND_HALF_WIDTH))
}

/// Normalized centers of an `h × w` grid in row-major order.
pub fn grid_centers(h: usize, w: usize) -> Vec<[f64; 2]> {
    (0..h)
        .flat_map(|r| (0..w).map(move |c| [(c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64]))
        .collect()
}

/// Weights of every source grid cell (row-major `h × w`) for one target point.
pub fn weight_map(
    p_t: [f64; 2],
    pose: &RelativePose,
    target: &Intrinsics,
    source: &Intrinsics,
    h: usize,
    w: usize,
) -> Result<Vec<f64>, EpipolarError> {
    let line = epipolar_line(p_t, pose, target, source)?;
    grid_centers(h, w)
        .into_iter()
        .map(|p| epipolar_distance(p, &line).map(band_weight))
        .collect()
}

/// `(h·w) × (h·w)` gate: rows are source positions, columns target positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarWeights {
    pub m: DMatrix<f64>,
    /// Set when the pose was degenerate and uniform weights were substituted.
    pub uniform_fallback: bool,
}

/// Builds the gate by evaluating, for each target cell center, its epipolar
/// line in the source view. Degenerate poses produce all ones; a target cell
/// whose line cannot be formed gets a column of ones.
pub fn epipolar_weight_matrix(
    pose: &RelativePose,
    target: &Intrinsics,
    source: &Intrinsics,
    h: usize,
    w: usize,
) -> EpipolarWeights {
    let n = h * w;
    if pose.trans_ts.norm() < MIN_DIRECTION {
        log::warn!("degenerate relative pose (no translation); using uniform epipolar weights");
        return EpipolarWeights { m: DMatrix::from_element(n, n, 1.0), uniform_fallback: true };
    }
    let centers = grid_centers(h, w);
    let columns: Vec<Vec<f64>> = centers
        .par_iter()
        .map(|&p_t| match epipolar_line(p_t, pose, target, source) {
            Ok(line) => centers
                .iter()
                .map(|&p_s| band_weight(epipolar_distance(p_s, &line).unwrap_or(0.0)))
                .collect(),
            Err(e) => {
                log::debug!("no epipolar line for target cell {p_t:?}: {e}");
                vec![1.0; n]
            }
        })
        .collect();
    let m = DMatrix::from_fn(n, n, |i, j| columns[j][i]);
    EpipolarWeights { m, uniform_fallback: false }
}

/// Grid of `d`-dimensional features, row-major over positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// `(h·w) × d`.
    pub data: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, data: DMatrix<f64>) -> Result<Self, EpipolarError> {
        if data.nrows() != h * w {
            return Err(EpipolarError::Shape(format!("{} rows for a {h}x{w} grid", data.nrows())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(EpipolarError::Shape("non-finite feature entries".into()));
        }
        Ok(Self { h, w, d: data.ncols(), data })
    }
}

/// Cross-view attention from `f_s` onto `f_t`, multiplicatively gated by the
/// epipolar weights and renormalized per row. Rows whose gated mass vanishes
/// fall back to the ungated probabilities.
pub fn epipolar_attention(
    f_s: &FeatureMap,
    f_t: &FeatureMap,
    weights: &EpipolarWeights,
) -> Result<FeatureMap, EpipolarError> {
    let n = f_s.h * f_s.w;
    if f_s.h != f_t.h || f_s.w != f_t.w || f_s.d != f_t.d {
        return Err(EpipolarError::Shape(format!(
            "source {}x{}x{} vs target {}x{}x{}",
            f_s.h, f_s.w, f_s.d, f_t.h, f_t.w, f_t.d
        )));
    }
    if weights.m.nrows() != n || weights.m.ncols() != n {
        return Err(EpipolarError::Shape(format!(
            "weight matrix {}x{} for {n} positions",
            weights.m.nrows(),
            weights.m.ncols()
        )));
    }
    let probs = attention_probs(&f_s.data, &f_t.data);
    Ok(FeatureMap { h: f_s.h, w: f_s.w, d: f_s.d, data: gate_rows(&probs, &weights.m) * &f_t.data })
}

/// `probs ⊙ gate`, each row renormalized.
pub fn gate_rows(probs: &DMatrix<f64>, gate: &DMatrix<f64>) -> DMatrix<f64> {
    let mut gated = probs.component_mul(gate);
    for r in 0..gated.nrows() {
        let sum: f64 = gated.row(r).sum();
        if sum < GATED_ROW_MIN {
            gated.set_row(r, &probs.row(r));
        } else {
            gated.row_mut(r).iter_mut().for_each(|v| *v /= sum);
        }
    }
    gated
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(size: f64, f: f64) -> Intrinsics {
        Intrinsics { width: size, height: size, fx: f, fy: f, cx: size / 2.0, cy: size / 2.0 }
    }

    #[test]
    fn band_constants() {
        assert!((band_weight(0.06) - 0.5).abs() < 1e-15);
        assert!((band_weight(0.0) - (1.0 - sigmoid(-3.6))).abs() < 1e-15);
        assert!((band_weight(0.0) - 0.973403006).abs() < 1e-9);
        assert!((band_weight(0.2) - 2.2486e-4).abs() < 1e-7);
    }

    #[test]
    fn horizontal_distance() {
        let line = EpipolarLine { origin: [0.0, 0.0], through: [1.0, 0.0] };
        assert_eq!(epipolar_distance([0.0, 0.5], &line).unwrap(), 0.5);
        assert_eq!(epipolar_distance([0.3, 0.0], &line).unwrap(), 0.0);
        let flat = EpipolarLine { origin: [0.2, 0.2], through: [0.2, 0.2] };
        assert_eq!(epipolar_distance([0.0, 0.0], &flat), Err(EpipolarError::Degenerate));
    }

    #[test]
    fn rectified_stereo_is_horizontal() {
        let k = square(64.0, 50.0);
        let pose = RelativePose { rot_ts: Matrix3::identity(), trans_ts: Vector3::new(-0.3, 0.0, 0.0) };
        let line = epipolar_line([0.5, 0.5], &pose, &k, &k).unwrap();
        let [_, dy] = line.direction();
        assert!(dy.abs() < 1e-15);
        assert!((line.origin[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pure_rotation_is_degenerate() {
        let k = square(32.0, 30.0);
        let pose = RelativePose { rot_ts: Matrix3::identity(), trans_ts: Vector3::zeros() };
        assert_eq!(epipolar_line([0.3, 0.3], &pose, &k, &k), Err(EpipolarError::Degenerate));
        let w = epipolar_weight_matrix(&pose, &k, &k, 4, 4);
        assert!(w.uniform_fallback);
        assert!(w.m.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_with_identity_gate_copies_target() {
        let f_s = FeatureMap::new(2, 2, DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1)).unwrap();
        let f_t = FeatureMap::new(2, 2, DMatrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.7)).unwrap();
        let gate = EpipolarWeights { m: DMatrix::identity(4, 4), uniform_fallback: false };
        let out = epipolar_attention(&f_s, &f_t, &gate).unwrap();
        assert!((out.data - &f_t.data).abs().max() < 1e-15);
    }

    #[test]
    fn attention_shape_errors() {
        let a = FeatureMap::new(2, 2, DMatrix::zeros(4, 3)).unwrap();
        let b = FeatureMap::new(2, 2, DMatrix::zeros(4, 2)).unwrap();
        let gate = EpipolarWeights { m: DMatrix::identity(4, 4), uniform_fallback: false };
        assert!(epipolar_attention(&a, &b, &gate).is_err());
        let small = EpipolarWeights { m: DMatrix::identity(3, 3), uniform_fallback: false };
        assert!(epipolar_attention(&a, &a, &small).is_err());
        assert!(FeatureMap::new(3, 2, DMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn zero_mass_rows_fall_back() {
        let probs = DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 0.5, 0.5]);
        let gate = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let g = gate_rows(&probs, &gate);
        assert_eq!(g.row(0), probs.row(0));
        assert_eq!(g.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
    }
}
