//! PNG ingestion and emission.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ColorType, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Images of a folder, ordered by file name.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    pub names: Vec<String>,
    /// Each `3×size×size` in `[-1, 1]`.
    pub images: Vec<Tensor>,
}

impl ImageFolder {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Sorted `*.png` paths in `dir`.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| image_err(dir, format!("cannot list folder: {e}")))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e?.path();
        let is_png = p.extension().and_then(|x| x.to_str()).is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Decode one 8-bit RGB PNG, map `[0, 255]` to `[-1, 1]` and resize
/// bilinearly to `size×size` if needed.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| image_err(path, format!("unreadable: {e}")))?;
    if bytes.is_empty() {
        return Err(image_err(path, "empty file"));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| image_err(path, format!("not a decodable PNG: {e}")))?;
    if img.color() != ColorType::Rgb8 {
        return Err(image_err(path, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let mut rgb = img.into_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn load_image_folder(dir: &Path, size: usize) -> Result<ImageFolder> {
    let mut names = Vec::new();
    let mut images = Vec::new();
    for p in png_files(dir)? {
        images.push(load_image(&p, size)?);
        names.push(p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
    }
    Ok(ImageFolder { names, images })
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Write a `3×H×W` tensor in `[-1, 1]` as an 8-bit RGB PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_image", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_byte(d[i]), to_byte(d[h * w + i]), to_byte(d[2 * h * w + i])])
    });
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, format!("cannot write: {e}")))
}

/// Write a label map as a single-channel 8-bit PNG.
pub fn save_labels(labels: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, labels.to_vec())
        .ok_or_else(|| Error::shape("save_labels", &[labels.len()], &[height, width]))?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, format!("cannot write: {e}")))
}

/// Read a single-channel label PNG as `(labels, height, width)`.
pub fn load_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| image_err(path, format!("unreadable: {e}")))?;
    if bytes.is_empty() {
        return Err(image_err(path, "empty file"));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| image_err(path, format!("not a decodable PNG: {e}")))?;
    if img.color() != ColorType::L8 {
        return Err(image_err(path, format!("expected 8-bit single-channel labels, found {:?}", img.color())));
    }
    let g = img.into_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok((g.into_raw(), h, w))
}
