//! Camera files, scene manifests and the synthetic self-reconstruction
//! fixture.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{logit, Camera, Gaussian3D, GaussianCloud, DEFAULT_FAR, DEFAULT_NEAR};
use crate::image::{load_png, Image, ImageError};
use crate::ply::{read_ply, write_ply};
use crate::raster::{render, RasterError};

/// Rotations closer than this to orthonormal are taken as-is.
pub const ORTHO_EXACT_TOL: f64 = 1e-8;
/// Rotations within this are re-orthonormalized; beyond it they are rejected.
pub const ORTHO_REPAIR_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("camera file is not valid JSON: {0}")]
    Json(String),
    #[error("camera file must be a JSON array of camera objects")]
    NotAnArray,
    #[error("camera #{index}: missing or invalid integer field `id`")]
    MissingId { index: usize },
    #[error("camera {id}: {message}")]
    Field { id: i64, message: String },
    #[error("camera {id}: rotation is not orthonormal (error {error:.3e} exceeds {ORTHO_REPAIR_TOL:e})")]
    NonOrthonormal { id: i64, error: f64 },
    #[error("camera {id}: rotation has determinant {det:.6}, expected +1")]
    Reflection { id: i64, det: f64 },
    #[error("camera {id}: {reason}")]
    InvalidCamera { id: i64, reason: String },
    #[error("duplicate camera id {id}")]
    DuplicateId { id: i64 },
    #[error("no image for camera {id}: expected {path}")]
    MissingImage { id: u32, path: String },
    #[error("image for camera {id} is {got_w}x{got_h}, camera expects {want_w}x{want_h}")]
    ImageSize { id: u32, got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
    #[error("degenerate scene bounds: {0}")]
    Bounds(String),
    #[error("unknown synth preset `{0}` (available: ORBIT)")]
    UnknownPreset(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io { path: path.display().to_string(), source }
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

fn default_far() -> f64 {
    DEFAULT_FAR
}

fn is_default_near(v: &f64) -> bool {
    *v == DEFAULT_NEAR
}

fn is_default_far(v: &f64) -> bool {
    *v == DEFAULT_FAR
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: u32,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rot: [f64; 9],
    trans: [f64; 3],
    #[serde(default = "default_near", skip_serializing_if = "is_default_near")]
    near: f64,
    #[serde(default = "default_far", skip_serializing_if = "is_default_far")]
    far: f64,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rot;
        Self {
            id: c.id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rot: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            trans: [c.trans.x, c.trans.y, c.trans.z],
            near: c.near,
            far: c.far,
        }
    }
}

/// Nearest rotation in the Frobenius sense (`U Vᵀ` from the SVD).
pub fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    u * vt
}

pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).abs().max()
}

/// Parses a camera array from JSON text.
pub fn parse_cameras_str(text: &str) -> Result<Vec<Camera>, SceneError> {
    let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| SceneError::Json(e.to_string()))?;
    let items = doc.as_array().ok_or(SceneError::NotAnArray)?;
    let mut seen = HashSet::new();
    let mut cameras = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let id = item.get("id").and_then(|v| v.as_i64()).ok_or(SceneError::MissingId { index })?;
        let rec: CameraRecord = serde_json::from_value(item.clone())
            .map_err(|e| SceneError::Field { id, message: e.to_string() })?;
        if !seen.insert(rec.id) {
            return Err(SceneError::DuplicateId { id });
        }
        let mut rot = Matrix3::from_row_slice(&rec.rot);
        if !rot.iter().all(|v| v.is_finite()) {
            return Err(SceneError::Field { id, message: "rotation has non-finite entries".into() });
        }
        let det = rot.determinant();
        if det < 0.0 {
            return Err(SceneError::Reflection { id, det });
        }
        let error = orthonormality_error(&rot);
        if error > ORTHO_REPAIR_TOL {
            return Err(SceneError::NonOrthonormal { id, error });
        }
        if error > ORTHO_EXACT_TOL {
            log::warn!("camera {id}: re-orthonormalizing rotation (error {error:.2e})");
            rot = polar_rotation(&rot);
        }
        let cam = Camera {
            id: rec.id,
            width: rec.width,
            height: rec.height,
            fx: rec.fx,
            fy: rec.fy,
            cx: rec.cx,
            cy: rec.cy,
            rot,
            trans: Vector3::from(rec.trans),
            near: rec.near,
            far: rec.far,
        };
        if cam.width == 0 || cam.height == 0 {
            return Err(SceneError::InvalidCamera { id, reason: "zero image size".into() });
        }
        cam.validate().map_err(|e| SceneError::InvalidCamera { id, reason: e.to_string() })?;
        cameras.push(cam);
    }
    Ok(cameras)
}

pub fn parse_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>, SceneError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_cameras_str(&text)
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("camera records always serialize")
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    fs::write(path, cameras_to_json(cameras) + "\n").map_err(io_err(path))
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Bounds {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, SceneError> {
        let finite = min.iter().chain(max.iter()).all(|v| v.is_finite());
        if !finite || (0..3).any(|k| !(max[k] > min[k])) {
            return Err(SceneError::Bounds(format!("min {:?} must be below max {:?} on every axis", min, max)));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self { min: Vector3::repeat(-half), max: Vector3::repeat(half) }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }

    /// Guess from camera poses: a cube around the point closest to every
    /// optical axis, with half-size 0.2 × the mean camera distance to it.
    pub fn from_cameras(cameras: &[Camera]) -> Result<Self, SceneError> {
        if cameras.is_empty() {
            return Err(SceneError::Bounds("no cameras".into()));
        }
        let mut a = Matrix3::zeros();
        let mut b = Vector3::zeros();
        for cam in cameras {
            let d: Vector3<f64> = cam.rot.row(2).transpose();
            let p = Matrix3::identity() - d * d.transpose();
            a += p;
            b += p * cam.center();
        }
        let centroid = cameras.iter().map(Camera::center).sum::<Vector3<f64>>() / cameras.len() as f64;
        let center = match a.try_inverse() {
            Some(inv) if a.determinant().abs() > 1e-6 * cameras.len() as f64 => inv * b,
            _ => {
                let forward = cameras.iter().map(|c| c.rot.row(2).transpose()).sum::<Vector3<f64>>();
                centroid + forward.normalize()
            }
        };
        let dist = cameras.iter().map(|c| (c.center() - center).norm()).sum::<f64>() / cameras.len() as f64;
        let half = 0.2 * dist.max(1e-3);
        Self::new(center.add_scalar(-half), center.add_scalar(half))
    }
}

/// Radius of the camera centers around their mean, × 1.1.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let mean = cameras.iter().map(Camera::center).sum::<Vector3<f64>>() / cameras.len() as f64;
    let r = cameras.iter().map(|c| (c.center() - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

pub fn image_file_name(id: u32) -> String {
    format!("view_{id:03}.png")
}

/// Cameras paired with their image files.
#[derive(Debug, Clone)]
pub struct SceneManifest {
    pub cameras: Vec<Camera>,
    pub image_paths: Vec<PathBuf>,
    pub bounds: Bounds,
}

impl SceneManifest {
    /// Pairs every camera with `<dir>/view_<id>.png`, checking sizes.
    pub fn load(cameras_path: impl AsRef<Path>, image_dir: impl AsRef<Path>, bounds: Option<Bounds>) -> Result<Self, SceneError> {
        let cameras = parse_cameras(cameras_path)?;
        let dir = image_dir.as_ref();
        let mut image_paths = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let path = dir.join(image_file_name(cam.id));
            if !path.is_file() {
                return Err(SceneError::MissingImage { id: cam.id, path: path.display().to_string() });
            }
            let (w, h) = ::image::image_dimensions(&path)
                .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })?;
            if (w, h) != (cam.width, cam.height) {
                return Err(SceneError::ImageSize { id: cam.id, got_w: w, got_h: h, want_w: cam.width, want_h: cam.height });
            }
            image_paths.push(path);
        }
        let bounds = match bounds {
            Some(b) => b,
            None => Bounds::from_cameras(&cameras)?,
        };
        Ok(Self { cameras, image_paths, bounds })
    }

    pub fn load_views(&self) -> Result<Vec<(Camera, Image)>, SceneError> {
        self.cameras
            .iter()
            .zip(&self.image_paths)
            .map(|(cam, path)| Ok((cam.clone(), load_png(path)?)))
            .collect()
    }
}

/// Parameters of the inward-facing orbit fixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitPreset {
    pub n_gaussians: usize,
    pub n_views: usize,
    pub radius: f64,
    pub size: u32,
    pub fov_deg: f64,
    pub seed: u64,
}

impl Default for OrbitPreset {
    fn default() -> Self {
        Self { n_gaussians: 50, n_views: 16, radius: 2.5, size: 64, fov_deg: 50.0, seed: 7 }
    }
}

/// Ground truth plus its renders.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub alphas: Vec<Vec<f64>>,
    pub bounds: Bounds,
}

pub fn synth_preset(name: &str) -> Result<OrbitPreset, SceneError> {
    match name.to_ascii_uppercase().as_str() {
        "ORBIT" => Ok(OrbitPreset::default()),
        _ => Err(SceneError::UnknownPreset(name.to_string())),
    }
}

fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

pub fn orbit_cameras(p: &OrbitPreset) -> Vec<Camera> {
    let focal = p.size as f64 / 2.0 / (p.fov_deg.to_radians() / 2.0).tan();
    const ELEVATIONS: [f64; 4] = [-25.0, -5.0, 15.0, 35.0];
    (0..p.n_views)
        .map(|k| {
            let az = 2.0 * PI * k as f64 / p.n_views as f64;
            let el = ELEVATIONS[k % ELEVATIONS.len()].to_radians();
            let eye = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * p.radius;
            Camera::look_at(k as u32, p.size, p.size, focal, eye, Vector3::zeros(), Vector3::z())
        })
        .collect()
}

/// Builds the ground-truth cloud (rounded to PLY precision, so a saved
/// `gt.ply` renders the fixture images exactly) and renders every view.
pub fn synthesize(p: &OrbitPreset) -> Result<SynthScene, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let bounds = Bounds::cube(0.5);
    let mut cloud = GaussianCloud::new();
    for _ in 0..p.n_gaussians {
        let mu = Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4));
        let log_scale = Vector3::from_fn(|_, _| rng.random_range(0.04f64..0.12).ln());
        cloud.push(Gaussian3D {
            mu,
            quat: random_unit_quat(&mut rng),
            log_scale,
            logit_opacity: logit(rng.random_range(0.5..0.95)),
            color: Vector3::from_fn(|_, _| rng.random_range(0.1..0.9)),
        });
    }
    let mut bytes = Vec::new();
    write_ply(&cloud, &mut bytes).expect("writing to memory");
    let cloud = read_ply(&bytes[..]).expect("freshly written PLY parses");

    let cameras = orbit_cameras(p);
    let mut images = Vec::with_capacity(cameras.len());
    let mut alphas = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let buf = render(&cloud, cam)?;
        images.push(buf.color);
        alphas.push(buf.alpha);
    }
    Ok(SynthScene { cloud, cameras, images, alphas, bounds })
}
