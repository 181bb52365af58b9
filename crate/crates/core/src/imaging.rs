//! Minimal float raster used across the pipeline, with PNG/JPEG I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Interleaved row-major image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    /// Fixture identifier (file stem when loaded from disk).
    pub name: Option<String>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Domain(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape("image buffer length", width * height * channels, data.len()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
            name: None,
        })
    }

    /// Copy snapped to the 8-bit grid a PNG round trip produces.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| Self::quantize(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
            name: None,
        }
    }

    pub fn from_luma(luma: &Array2<f64>) -> Self {
        let (h, w) = luma.dim();
        Image::from_fn(w, h, 1, |x, y, _| luma[[y, x]])
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Sample from channel `c`, replicating gray images across channels.
    #[inline]
    pub fn get_rgb(&self, x: usize, y: usize, c: usize) -> f64 {
        if self.channels == 1 {
            self.get(x, y, 0)
        } else {
            self.get(x, y, c)
        }
    }

    /// Rec. 601 luma as `[height × width]`.
    pub fn luma(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            if self.channels == 1 {
                self.get(x, y, 0)
            } else {
                0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2)
            }
        })
    }

    pub fn to_rgb(&self) -> Image {
        let mut out = Image::from_fn(self.width, self.height, 3, |x, y, c| self.get_rgb(x, y, c));
        out.name = self.name.clone();
        out
    }

    pub fn to_gray(&self) -> Image {
        let mut out = Image::from_luma(&self.luma());
        out.name = self.name.clone();
        out
    }

    /// Population variance over all samples.
    pub fn variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }

    /// Bilinear resample with pixel-center alignment. Halving a dimension
    /// averages 2×2 blocks exactly.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let coord = |o: usize, scale: f64, max: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (max - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(max - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut out = Image::from_fn(width, height, self.channels, |x, y, c| {
            let (x0, x1, fx) = coord(x, sx, self.width);
            let (y0, y1, fy) = coord(y, sy, self.height);
            let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
            let bot = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
            top * (1.0 - fy) + bot * fy
        });
        out.name = self.name.clone();
        out
    }

    /// Mean absolute per-sample difference, comparing gray against color by
    /// channel replication.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                "image dimensions",
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        let channels = self.channels.max(other.channels);
        let mut total = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..channels {
                    total += (self.get_rgb(x, y, c) - other.get_rgb(x, y, c)).abs();
                }
            }
        }
        Ok(total / (self.width * self.height * channels) as f64)
    }

    pub fn load(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let dynimg = image::open(path)?;
        let mut img = Self::from_dynamic(&dynimg);
        img.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        Ok(img)
    }

    pub fn from_dynamic(dynimg: &DynamicImage) -> Image {
        let is_gray = matches!(
            dynimg,
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
        );
        if is_gray {
            let g = dynimg.to_luma8();
            let (w, h) = g.dimensions();
            Image::from_fn(w as usize, h as usize, 1, |x, y, _| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
        } else {
            let rgb = dynimg.to_rgb8();
            let (w, h) = rgb.dimensions();
            Image::from_fn(w as usize, h as usize, 3, |x, y, c| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        }
    }

    fn quantize(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::from_fn(w, h, |x, y| Luma([Self::quantize(self.get(x as usize, y as usize, 0))]));
            DynamicImage::ImageLuma8(buf)
        } else {
            let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                let p = |c| Self::quantize(self.get(x as usize, y as usize, c));
                Rgb([p(0), p(1), p(2)])
            });
            DynamicImage::ImageRgb8(buf)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

/// Tiles equally sized images into a `rows × cols` grid with a white gutter.
pub fn contact_sheet(tiles: &[Image], cols: usize, gutter: usize) -> Result<Image> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Domain("contact sheet needs at least one tile".into()))?;
    let (tw, th) = (first.width(), first.height());
    let cols = cols.max(1);
    let rows = tiles.len().div_ceil(cols);
    let width = cols * tw + (cols + 1) * gutter;
    let height = rows * th + (rows + 1) * gutter;
    let mut data = vec![1.0; width * height * 3];
    for (i, tile) in tiles.iter().enumerate() {
        let tile = if tile.width() != tw || tile.height() != th {
            tile.resize(tw, th)
        } else {
            tile.clone()
        };
        let ox = gutter + (i % cols) * (tw + gutter);
        let oy = gutter + (i / cols) * (th + gutter);
        for y in 0..th {
            for x in 0..tw {
                for c in 0..3 {
                    data[((oy + y) * width + ox + x) * 3 + c] = tile.get_rgb(x, y, c);
                }
            }
        }
    }
    Image::new(width, height, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_averages_blocks() {
        let img = Image::from_fn(4, 2, 1, |x, _, _| x as f64);
        let half = img.resize(2, 1);
        assert!((half.get(0, 0, 0) - 0.5).abs() < 1e-12);
        assert!((half.get(1, 0, 0) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn png_round_trip_preserves_quantized_samples() {
        let img = Image::from_fn(5, 3, 3, |x, y, c| ((x + 2 * y + c) % 4) as f64 / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back.name.as_deref(), Some("a"));
        assert!(img.mean_abs_diff(&back).unwrap() < 1.0 / 255.0);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = Image::load(Path::new("/definitely/not/here.png")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn contact_sheet_layout() {
        let tiles = vec![Image::from_fn(4, 4, 1, |_, _, _| 0.0); 3];
        let sheet = contact_sheet(&tiles, 3, 2).unwrap();
        assert_eq!((sheet.width(), sheet.height()), (3 * 4 + 4 * 2, 4 + 2 * 2));
        assert_eq!(sheet.get(2, 2, 0), 0.0);
        assert_eq!(sheet.get(0, 0, 0), 1.0);
    }
}
