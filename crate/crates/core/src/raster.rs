//! RGB images as `[3, H, W]` tensors in `[0, 1]`, plus PNG I/O.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type RgbImage = Tensor<f32>;

/// Checks that `img` is a `[3, H, W]` tensor and returns `(H, W)`.
pub fn dims(img: &RgbImage) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Dimension(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

/// Interleaved 8-bit RGB, rounding to nearest.
pub fn to_rgb8(img: &RgbImage) -> Result<Vec<u8>> {
    let (h, w) = dims(img)?;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<RgbImage> {
    if bytes.len() != 3 * height * width {
        return Err(Error::Dimension(format!(
            "{} bytes cannot hold a {height}x{width} RGB image",
            bytes.len()
        )));
    }
    let hw = height * width;
    let mut data = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[c * hw + p] = f32::from(bytes[3 * p + c]) / 255.0;
        }
    }
    Tensor::new(&[3, height, width], data)
}

#[cfg(feature = "io")]
pub use png::{read_png, write_png};

#[cfg(feature = "io")]
mod png {
    use std::path::Path;

    use super::{from_rgb8, to_rgb8, RgbImage};
    use crate::error::{Error, Result};

    pub fn read_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        from_rgb8(rgb.as_raw(), h as usize, w as usize)
    }

    pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
        let (h, w) = super::dims(img)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image::save_buffer(path, &to_rgb8(img)?, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|e| {
            Error::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })
    }
}
