//! Floating-point RGB images and 8-bit PNG conversion.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("png error for {path}: {source}")]
    Codec { path: String, source: ::image::ImageError },
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    Dimensions { expected_w: u32, expected_h: u32, got_w: u32, got_h: u32 },
}

/// Row-major RGB image with `f64` channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width as usize * height as usize] }
    }

    pub fn filled(width: u32, height: u32, value: [f64; 3]) -> Self {
        Self { width, height, data: vec![value; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }

    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[self.index(x, y)]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Mean squared error per pixel and channel.
pub fn mse(a: &Image, b: &Image) -> f64 {
    let n = (a.data.len() * 3) as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio for unit dynamic range.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit sRGB PNG. With `alpha`, color is un-premultiplied and
/// stored as straight alpha; otherwise the image is written opaque.
pub fn save_png(path: impl AsRef<Path>, img: &Image, alpha: Option<&[f64]>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let codec = |source| ImageError::Codec { path: path.display().to_string(), source };
    match alpha {
        Some(alpha) => {
            let mut buf = ::image::RgbaImage::new(img.width, img.height);
            for (i, px) in buf.pixels_mut().enumerate() {
                let a = alpha[i].clamp(0.0, 1.0);
                let c = img.data[i];
                let straight = |v: f64| if a > 0.0 { v / a } else { 0.0 };
                *px = ::image::Rgba([
                    quantize(straight(c[0])),
                    quantize(straight(c[1])),
                    quantize(straight(c[2])),
                    quantize(a),
                ]);
            }
            buf.save(path).map_err(codec)
        }
        None => {
            let mut buf = ::image::RgbImage::new(img.width, img.height);
            for (i, px) in buf.pixels_mut().enumerate() {
                let c = img.data[i];
                *px = ::image::Rgb([quantize(c[0]), quantize(c[1]), quantize(c[2])]);
            }
            buf.save(path).map_err(codec)
        }
    }
}

/// Writes a single-channel 8-bit PNG.
pub fn save_gray_png(path: impl AsRef<Path>, width: u32, height: u32, values: &[f64]) -> Result<(), ImageError> {
    let path = path.as_ref();
    let buf = ::image::GrayImage::from_fn(width, height, |x, y| {
        ::image::Luma([quantize(values[y as usize * width as usize + x as usize])])
    });
    buf.save(path).map_err(|source| ImageError::Codec { path: path.display().to_string(), source })
}

/// Loads a PNG; straight-alpha images are composited over black.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let dynamic = ::image::open(path)
        .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })?;
    let rgba = dynamic.to_rgba8();
    let (w, h) = rgba.dimensions();
    let data = rgba
        .pixels()
        .map(|p| {
            let a = p[3] as f64 / 255.0;
            [0, 1, 2].map(|c| p[c] as f64 / 255.0 * a)
        })
        .collect();
    Ok(Image { width: w, height: h, data })
}
