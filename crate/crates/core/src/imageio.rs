//! Images as `(channels, height, width)` tensors in `[0, 1]`, and their
//! 8-bit PNG / PGM files.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: [usize; 3],
    values: Vec<f32>,
}

impl ImageTensor {
    /// Values must be finite and inside `[0, 1]`.
    pub fn new(shape: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() || shape.contains(&0) {
            return Err(Error::Shape(format!("{} values for image shape {shape:?}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { shape, values })
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn clamped(shape: [usize; 3], values: Vec<f32>) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(shape, values)
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Values rounded to 8 bits, as they would be written to disk.
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor {
            shape: self.shape,
            values: self.values.iter().map(|&v| f32::from(to_u8(v)) / 255.0).collect(),
        }
    }

    /// Stacks images of equal shape into `[N, C, H, W]`.
    pub fn stack(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
        let shape = images
            .first()
            .map(|i| i.shape)
            .ok_or_else(|| Error::InvalidArgument("no images to stack".into()))?;
        let mut data = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
        for img in images {
            if img.shape != shape {
                return Err(Error::Shape(format!("image {:?} among {:?}", img.shape, shape)));
            }
            data.extend_from_slice(&img.values);
        }
        Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, detail: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") | Some("pnm") | Some("ppm") => Ok(ImageFormat::Pnm),
        other => Err(image_err(path, format!("unsupported image extension {other:?}"))),
    }
}

/// Loads an 8-bit image. Grayscale files give one channel, anything else
/// is converted to RGB.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format_for(path)?).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => {
            ImageTensor::new([1, h, w], g.into_raw().into_iter().map(|p| f32::from(p) / 255.0).collect())
        }
        other => {
            let rgb = other.to_rgb8().into_raw();
            let mut values = vec![0.0; 3 * h * w];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    values[c * h * w + i] = f32::from(px[c]) / 255.0;
                }
            }
            ImageTensor::new([3, h, w], values)
        }
    }
}

/// Encodes an image as PNG or PGM bytes (by `format`).
pub fn encode_image(img: &ImageTensor, format: ImageFormat) -> Result<Vec<u8>> {
    let [c, h, w] = img.shape;
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, img.values.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer matches dimensions"),
        ),
        3 => {
            let mut raw = Vec::with_capacity(3 * h * w);
            for i in 0..h * w {
                raw.extend((0..3).map(|ch| to_u8(img.values[ch * h * w + i])));
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions"))
        }
        _ => return Err(Error::Shape(format!("cannot encode a {c}-channel image"))),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, format)
        .map_err(|e| Error::Image {
            path: Default::default(),
            detail: e.to_string(),
        })?;
    Ok(out.into_inner())
}

/// Writes a PNG or PGM file chosen by extension, creating parent directories.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    if format == ImageFormat::Pnm && img.channels() != 1 {
        return Err(image_err(path, "PGM files hold grayscale images only"));
    }
    let bytes = encode_image(img, format).map_err(|e| match e {
        Error::Image { detail, .. } => image_err(path, detail),
        other => other,
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

/// Tiles rows of equal-shape images onto a white canvas with `pad` pixels
/// between cells. Short rows leave their trailing cells blank.
pub fn image_grid(rows: &[Vec<ImageTensor>], pad: usize) -> Result<ImageTensor> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidArgument("image grid needs at least one image".into()))?;
    let [c, h, w] = first.shape();
    if let Some(bad) = rows.iter().flatten().find(|img| img.shape() != first.shape()) {
        return Err(Error::Shape(format!("grid cell {:?} differs from {:?}", bad.shape(), first.shape())));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * (h + pad) + pad;
    let gw = cols * (w + pad) + pad;
    let mut values = vec![1.0f32; c * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            let (y0, x0) = (pad + r * (h + pad), pad + k * (w + pad));
            for ch in 0..c {
                for y in 0..h {
                    let dst = (ch * gh + y0 + y) * gw + x0;
                    let src = (ch * h + y) * w;
                    values[dst..dst + w].copy_from_slice(&img.values()[src..src + w]);
                }
            }
        }
    }
    ImageTensor::new([c, gh, gw], values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize) -> ImageTensor {
        let n = c * 4 * 5;
        ImageTensor::new([c, 4, 5], (0..n).map(|i| i as f32 / (n - 1) as f32).collect()).unwrap()
    }

    #[test]
    fn png_and_pgm_round_trip_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        for (c, name) in [(1, "a.png"), (1, "a.pgm"), (3, "b.png")] {
            let img = ramp(c);
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back, img.quantized(), "{name}");
        }
    }

    #[test]
    fn grid_places_cells() {
        let a = ImageTensor::filled([1, 2, 2], 0.0).unwrap();
        let b = ImageTensor::filled([1, 2, 2], 0.5).unwrap();
        let g = image_grid(&[vec![a.clone(), b], vec![a]], 1).unwrap();
        assert_eq!(g.shape(), [1, 7, 7]);
        assert_eq!(g.get(0, 1, 1), 0.0);
        assert_eq!(g.get(0, 1, 4), 0.5);
        assert_eq!(g.get(0, 4, 4), 1.0);
        assert_eq!(g.get(0, 0, 0), 1.0);
        assert!(image_grid(&[], 1).is_err());
    }

    #[test]
    fn range_and_format_errors() {
        assert!(ImageTensor::new([1, 1, 2], vec![0.5, 1.5]).is_err());
        assert!(ImageTensor::new([1, 1, 2], vec![0.5]).is_err());
        let c = ImageTensor::clamped([1, 1, 3], vec![-1.0, 2.0, f32::NAN]).unwrap();
        assert_eq!(c.values(), &[0.0, 1.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        assert!(save_image(&ramp(1), &dir.path().join("x.bmp")).is_err());
        assert!(save_image(&ramp(3), &dir.path().join("x.pgm")).is_err());
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(Error::Storage { .. })));
    }
}
