use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Rect;
use crate::tensor::{spt4, Shape4, Tensor4};

/// Planar `C x H x W` image with `f32` samples, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "empty image {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} samples, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear resampling with half-pixel centres and edge clamping; no
    /// antialiasing, so an exact 2x reduction averages pixel pairs.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
            let scale = src as f64 / dst as f64;
            (0..dst)
                .map(|i| {
                    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, (s - i0 as f64) as f32)
                })
                .collect()
        };
        let xs = taps(width, self.width);
        let ys = taps(height, self.height);
        let mut out = Vec::with_capacity(self.channels * width * height);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for &(y0, y1, fy) in &ys {
                let r0 = &plane[y0 * self.width..(y0 + 1) * self.width];
                let r1 = &plane[y1 * self.width..(y1 + 1) * self.width];
                for &(x0, x1, fx) in &xs {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    out.push(top + (bottom - top) * fy);
                }
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data: out,
        }
    }

    pub fn crop(&self, r: Rect) -> Result<Image> {
        if r.size == 0 || r.x + r.size > self.width || r.y + r.size > self.height {
            return Err(Error::Shape(format!(
                "crop {}x{} at ({}, {}) leaves the {}x{} image",
                r.size, r.size, r.x, r.y, self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(self.channels * r.size * r.size);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in r.y..r.y + r.size {
                out.extend_from_slice(&plane[y * self.width + r.x..y * self.width + r.x + r.size]);
            }
        }
        Ok(Image {
            channels: self.channels,
            height: r.size,
            width: r.size,
            data: out,
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            let plane = self.plane(c);
            for row in plane.chunks(self.width).rev() {
                out.extend_from_slice(row);
            }
        }
        Image { data: out, ..*self }
    }

    /// Loads a PNG (converted to 8-bit RGB) or a single-image SPT4 dump.
    pub fn load(path: &Path) -> Result<Image> {
        match extension(path).as_deref() {
            Some("png") => {
                let img = image::open(path).map_err(|e| Error::Image {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
                let rgb = img.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let raw = rgb.into_raw();
                let mut data = vec![0.0f32; 3 * w * h];
                for (i, px) in raw.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        data[c * w * h + i] = px[c] as f32 / 255.0;
                    }
                }
                Image::new(3, h, w, data)
            }
            Some("spt4") => {
                let t: Tensor4<f32> = spt4::load(path)?;
                let s = t.shape();
                if s.n != 1 {
                    return Err(Error::Image {
                        path: path.to_path_buf(),
                        message: format!("expected one image, tensor is {s}"),
                    });
                }
                Image::new(s.c, s.h, s.w, t.into_data())
            }
            _ => Err(Error::Image {
                path: path.to_path_buf(),
                message: "unsupported image format (expected .png or .spt4)".into(),
            }),
        }
    }

    /// Writes an 8-bit PNG; samples are clamped to `[0, 1]`. Only 1- and
    /// 3-channel images are supported.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let p = self.height * self.width;
        let result = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| q(v)).collect())
                .expect("buffer size")
                .save(path),
            3 => {
                let mut raw = Vec::with_capacity(3 * p);
                for i in 0..p {
                    for c in 0..3 {
                        raw.push(q(self.data[c * p + i]));
                    }
                }
                image::RgbImage::from_raw(w, h, raw)
                    .expect("buffer size")
                    .save(path)
            }
            n => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    message: format!("cannot write {n}-channel PNG"),
                })
            }
        };
        result.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_tensor(&self) -> Tensor4<f32> {
        Tensor4::new(
            Shape4::new(1, self.channels, self.height, self.width),
            self.data.clone(),
        )
        .expect("image samples are finite")
    }
}

pub(crate) fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}
