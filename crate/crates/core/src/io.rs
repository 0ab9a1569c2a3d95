//! PNG encoding of images (8-bit, `[-1, 1]` mapped linearly onto `[0, 255]`),
//! masks (`0`/`255`) and label maps (raw `{0, 1, 2}`).

use std::path::Path;

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, SegLabelMap};

/// Nearest 8-bit level of a pixel value.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

pub fn from_u8(q: u8) -> f32 {
    q as f32 / 255.0 * 2.0 - 1.0
}

/// Rounds a value onto the 8-bit grid so PNG round trips are exact.
pub fn quantize(v: f32) -> f32 {
    from_u8(to_u8(v))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    Error::data(path, format!("cannot write PNG: {e}"))
}

/// Writes RGB images as RGB and single-channel images as grayscale.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = img.dims();
    match img.channels() {
        3 => {
            let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    to_u8(img.get(y, x, 0)),
                    to_u8(img.get(y, x, 1)),
                    to_u8(img.get(y, x, 2)),
                ])
            });
            out.save(path).map_err(|e| save_err(path, e))
        }
        1 => {
            let out = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([to_u8(img.get(y as usize, x as usize, 0))])
            });
            out.save(path).map_err(|e| save_err(path, e))
        }
        c => Err(Error::Shape(format!(
            "cannot encode {c}-channel image as PNG"
        ))),
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader
        .decode()
        .map_err(|e| Error::data(path, format!("malformed PNG: {e}")))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::from_fn(h, w, 3, |y, x, c| {
        from_u8(rgb.get_pixel(x as u32, y as u32)[c])
    }))
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = mask.dims();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    out.save(path).map_err(|e| save_err(path, e))
}

/// Accepts `0`/`255` (or `0`/`1`) grayscale.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for p in gray.pixels() {
        data.push(match p[0] {
            0 => 0,
            1 | 255 => 1,
            v => {
                return Err(Error::data(
                    path,
                    format!("mask value {v} is neither 0 nor 255"),
                ))
            }
        });
    }
    BinaryMask::new(h, w, data)
}

pub fn save_labels(path: &Path, labels: &SegLabelMap) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = labels.dims();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([labels.get(y as usize, x as usize)])
    });
    out.save(path).map_err(|e| save_err(path, e))
}

pub fn load_labels(path: &Path) -> Result<SegLabelMap> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    SegLabelMap::new(h, w, gray.into_raw()).map_err(|e| Error::data(path, e.to_string()))
}

/// Renders a label map with a fixed palette for inspection.
pub fn labels_preview(labels: &SegLabelMap) -> Image {
    const PALETTE: [[f32; 3]; 3] = [[-1.0, -1.0, -1.0], [1.0, -0.2, -0.2], [-0.2, -0.2, 1.0]];
    let (h, w) = labels.dims();
    Image::from_fn(h, w, 3, |y, x, c| PALETTE[labels.get(y, x) as usize][c])
}

/// Tiles equally sized images into a grid with `cols` columns.
pub fn tile(images: &[Image], cols: usize, fill: f32) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot tile zero images".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    if images
        .iter()
        .any(|i| i.dims() != (h, w) || i.channels() != c)
    {
        return Err(Error::Shape("tiled images differ in size".into()));
    }
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    Ok(Image::from_fn(rows * h, cols * w, c, |y, x, ch| {
        let idx = (y / h) * cols + x / w;
        images
            .get(idx)
            .map_or(fill, |img| img.get(y % h, x % w, ch))
    }))
}
