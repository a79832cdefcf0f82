//! Orthogonal-plane feature decomposition: a learnable query embedding is
//! self-attended, then cross-attends over an image latent; the resulting
//! plane features are merged with the image-plane features.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{attention_probs, softmax_rows_backward};

pub const TENSOR_MAGIC: &[u8; 4] = b"FDGT";

#[derive(Debug, Error)]
pub enum PlaneError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad tensor file {path}: {reason}")]
    TensorFormat { path: String, reason: String },
}

/// Dense float32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().map(|&v| v as f32));
        }
        Self { dims: vec![m.nrows() as u32, m.ncols() as u32], data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>, PlaneError> {
        match self.dims[..] {
            [r, c] => Ok(DMatrix::from_row_iterator(r as usize, c as usize, self.data.iter().map(|&v| v as f64))),
            _ => Err(PlaneError::Shape(format!("expected a rank-2 tensor, got dims {:?}", self.dims))),
        }
    }
}

/// Layout: magic `FDGT`, u32 rank, `rank` u32 dims, f32 row-major payload,
/// all little-endian.
pub fn write_tensor<W: Write>(t: &Tensor, mut out: W) -> io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for d in &t.dims {
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_tensor<R: Read>(mut input: R, name: &str) -> Result<Tensor, PlaneError> {
    let bad = |reason: String| PlaneError::TensorFormat { path: name.to_string(), reason };
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(|_| bad("missing magic".into()))?;
    if &word != TENSOR_MAGIC {
        return Err(bad(format!("magic {:?} is not FDGT", word)));
    }
    input.read_exact(&mut word).map_err(|_| bad("missing rank".into()))?;
    let rank = u32::from_le_bytes(word);
    if rank > 8 {
        return Err(bad(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for k in 0..rank {
        input.read_exact(&mut word).map_err(|_| bad(format!("missing dim {k}")))?;
        dims.push(u32::from_le_bytes(word));
    }
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or_else(|| bad("size overflow".into()))?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(bad(format!("payload is {} bytes, expected {}", payload.len(), count * 4)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor { dims, data })
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), PlaneError> {
    let mut bytes = Vec::new();
    write_tensor(t, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, PlaneError> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    read_tensor(io::BufReader::new(file), &path.display().to_string())
}

/// Single-head projections. Projections act on row vectors as `x ↦ W·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneDecoderWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    /// Learnable query embedding, `n_u × d`.
    pub u: DMatrix<f64>,
    pub self_wq: DMatrix<f64>,
    pub self_wk: DMatrix<f64>,
    pub self_wv: DMatrix<f64>,
}

const WEIGHT_FILES: [&str; 7] = ["wq", "wk", "wv", "u", "self_wq", "self_wk", "self_wv"];

impl PlaneDecoderWeights {
    /// Uniform `±1/√d` initialization from a seed.
    pub fn random(d: usize, n_u: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-bound..bound));
        Self {
            wq: mat(d, d),
            wk: mat(d, d),
            wv: mat(d, d),
            u: mat(n_u, d),
            self_wq: mat(d, d),
            self_wk: mat(d, d),
            self_wv: mat(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn validate(&self) -> Result<(), PlaneError> {
        let d = self.dim();
        for (name, m) in self.named() {
            let want_rows = if name == "u" { m.nrows() } else { d };
            if m.nrows() != want_rows || m.ncols() != d {
                return Err(PlaneError::Shape(format!("{name} is {}x{}, latent dim is {d}", m.nrows(), m.ncols())));
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(PlaneError::Shape(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, &DMatrix<f64>); 7] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("u", &self.u),
            ("self_wq", &self.self_wq),
            ("self_wk", &self.self_wk),
            ("self_wv", &self.self_wv),
        ]
    }

    /// Writes one `<name>.fdgt` tensor file per matrix.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), PlaneError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, m) in self.named() {
            save_tensor(&Tensor::from_matrix(m), dir.join(format!("{name}.fdgt")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PlaneError> {
        let dir = dir.as_ref();
        let mut mats = Vec::with_capacity(WEIGHT_FILES.len());
        for name in WEIGHT_FILES {
            mats.push(load_tensor(dir.join(format!("{name}.fdgt")))?.to_matrix()?);
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().unwrap();
        let w = Self {
            wq: next(),
            wk: next(),
            wv: next(),
            u: next(),
            self_wq: next(),
            self_wk: next(),
            self_wv: next(),
        };
        w.validate()?;
        Ok(w)
    }
}

/// Intermediate values of one cross-attention pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnTrace {
    pub self_probs: DMatrix<f64>,
    pub queries: DMatrix<f64>,
    pub probs: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

fn project_rows(x: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    x * w.transpose()
}

/// Single-head scaled dot-product self-attention over the rows of `u`.
pub fn self_attn(u: &DMatrix<f64>, w: &PlaneDecoderWeights) -> (DMatrix<f64>, DMatrix<f64>) {
    let q = project_rows(u, &w.self_wq);
    let k = project_rows(u, &w.self_wk);
    let v = project_rows(u, &w.self_wv);
    let p = attention_probs(&q, &k);
    let out = &p * v;
    (out, p)
}

fn check_dims(u: &DMatrix<f64>, h: &DMatrix<f64>, w: &PlaneDecoderWeights) -> Result<(), PlaneError> {
    w.validate()?;
    let d = w.dim();
    if u.ncols() != d || h.ncols() != d {
        return Err(PlaneError::Shape(format!("u has {} columns, h has {}, weights expect {d}", u.ncols(), h.ncols())));
    }
    if u.nrows() == 0 || h.nrows() == 0 {
        return Err(PlaneError::Shape("empty query or key set".into()));
    }
    Ok(())
}

/// `softmax((W^Q·SelfAttn(u))(W^K·h)ᵀ / √d)·(W^V·h)`.
pub fn cross_attn_trace(u: &DMatrix<f64>, h: &DMatrix<f64>, w: &PlaneDecoderWeights) -> Result<CrossAttnTrace, PlaneError> {
    check_dims(u, h, w)?;
    let (s, self_probs) = self_attn(u, w);
    let queries = project_rows(&s, &w.wq);
    let keys = project_rows(h, &w.wk);
    let values = project_rows(h, &w.wv);
    let probs = attention_probs(&queries, &keys);
    let output = &probs * values;
    Ok(CrossAttnTrace { self_probs, queries, probs, output })
}

pub fn cross_attn(u: &DMatrix<f64>, h: &DMatrix<f64>, w: &PlaneDecoderWeights) -> Result<DMatrix<f64>, PlaneError> {
    Ok(cross_attn_trace(u, h, w)?.output)
}

/// `∂L/∂u` for `L = ⟨grad_out, cross_attn(u, h)⟩`.
pub fn cross_attn_grad_u(
    u: &DMatrix<f64>,
    h: &DMatrix<f64>,
    w: &PlaneDecoderWeights,
    grad_out: &DMatrix<f64>,
) -> Result<DMatrix<f64>, PlaneError> {
    let trace = cross_attn_trace(u, h, w)?;
    if grad_out.shape() != trace.output.shape() {
        return Err(PlaneError::Shape("gradient does not match output shape".into()));
    }
    let scale = 1.0 / (w.dim() as f64).sqrt();
    let keys = project_rows(h, &w.wk);
    let values = project_rows(h, &w.wv);

    let g_probs = grad_out * values.transpose();
    let g_scores = softmax_rows_backward(&trace.probs, &g_probs);
    let g_queries = g_scores * keys * scale;
    let g_s = g_queries * &w.wq;

    let qs = project_rows(u, &w.self_wq);
    let ks = project_rows(u, &w.self_wk);
    let vs = project_rows(u, &w.self_wv);
    let g_self_probs = &g_s * vs.transpose();
    let g_vs = trace.self_probs.transpose() * &g_s;
    let g_self_scores = softmax_rows_backward(&trace.self_probs, &g_self_probs);
    let g_qs = &g_self_scores * ks * scale;
    let g_ks = g_self_scores.transpose() * qs * scale;
    Ok(g_qs * &w.self_wq + g_ks * &w.self_wk + g_vs * &w.self_wv)
}

/// `H × W × C` grid, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl PlaneGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    data.push(f(y, x, k));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn at(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + k]
    }
}

/// Image-plane and orthogonal-plane features of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFeatures {
    pub f_xy: PlaneGrid,
    pub f_yz: PlaneGrid,
    pub f_xz: PlaneGrid,
    /// Image latent the orthogonal planes were decoded from, `n_h × d`.
    pub latent: DMatrix<f64>,
}

impl PlaneFeatures {
    pub fn combined(&self) -> Result<PlaneGrid, PlaneError> {
        combine_planes(&self.f_xy, &self.f_yz, &self.f_xz)
    }
}

/// `concat_channels(f_xy, f_yz + f_xz)`.
pub fn combine_planes(f_xy: &PlaneGrid, f_yz: &PlaneGrid, f_xz: &PlaneGrid) -> Result<PlaneGrid, PlaneError> {
    if (f_xy.h, f_xy.w) != (f_yz.h, f_yz.w) || (f_xy.h, f_xy.w) != (f_xz.h, f_xz.w) {
        return Err(PlaneError::Shape("plane grids have different spatial sizes".into()));
    }
    if f_yz.c != f_xz.c {
        return Err(PlaneError::Shape(format!("yz has {} channels, xz has {}", f_yz.c, f_xz.c)));
    }
    let c = f_xy.c + f_yz.c;
    let mut data = Vec::with_capacity(f_xy.h * f_xy.w * c);
    for p in 0..f_xy.h * f_xy.w {
        data.extend_from_slice(&f_xy.data[p * f_xy.c..(p + 1) * f_xy.c]);
        let yz = &f_yz.data[p * f_yz.c..(p + 1) * f_yz.c];
        let xz = &f_xz.data[p * f_xz.c..(p + 1) * f_xz.c];
        data.extend(yz.iter().zip(xz).map(|(a, b)| a + b));
    }
    Ok(PlaneGrid { h: f_xy.h, w: f_xy.w, c, data })
}
