//! Plain RGB images in planar float layout plus the conversions the models need.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// An RGB image stored channel-planar (3 × height × width), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, rgb);
            }
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape {
                expected: format!("{} values", 3 * width * height),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[plane + i] = rgb[1];
        self.data[2 * plane + i] = rgb[2];
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        self
    }

    /// Bilinear sample at continuous coordinates (pixel centers at integer + 0.5).
    pub fn sample_bilinear(&self, fx: f32, fy: f32) -> [f32; 3] {
        let x = (fx - 0.5).clamp(0.0, (self.width - 1) as f32);
        let y = (fy - 0.5).clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = x - x0 as f32;
        let ay = y - y0 as f32;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - ax) + p10[c] * ax;
            let bot = p01[c] * (1.0 - ax) + p11[c] * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    /// Resamples the rectangle `(x, y, w, h)` (in pixels) to `out_w × out_h`.
    pub fn crop_resize(&self, rect: (f32, f32, f32, f32), out_w: usize, out_h: usize) -> Image {
        let (rx, ry, rw, rh) = rect;
        let mut out = Image::new(out_w, out_h);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let fx = rx + (ox as f32 + 0.5) * rw / out_w as f32;
                let fy = ry + (oy as f32 + 0.5) * rh / out_h as f32;
                out.set(ox, oy, self.sample_bilinear(fx, fy));
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.crop_resize(
            (0.0, 0.0, self.width as f32, self.height as f32),
            out_w,
            out_h,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let dynimg = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut img = Image::new(w, h);
        for (x, y, p) in rgb.enumerate_pixels() {
            img.set(
                x as usize,
                y as usize,
                [
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                ],
            );
        }
        Ok(img)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.get(x, y);
                for v in p {
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Quantizes to 8 bits per channel, matching what a save/load cycle yields.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        out
    }

    pub fn luminance(&self, x: usize, y: usize) -> f32 {
        let [r, g, b] = self.get(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }
}

/// Peak signal-to-noise ratio in dB for images with values in [0, 1].
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "psnr on mismatched images");
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 1e-20 {
        return 200.0;
    }
    10.0 * (1.0 / mse).log10()
}

/// Stacks images into a (N, 3, H, W) tensor scaled to [-1, 1].
pub fn images_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape {
        expected: "at least one image".into(),
        got: "0".into(),
    })?;
    let (w, h) = (first.width, first.height);
    let mut buf = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Shape {
                expected: format!("{w}x{h}"),
                got: format!("{}x{}", img.width, img.height),
            });
        }
        buf.extend(img.data.iter().map(|v| v * 2.0 - 1.0));
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, h, w), device)?)
}

/// Inverse of [`images_to_tensor`]; values are clamped back into [0, 1].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape {
            expected: "3 channels".into(),
            got: format!("{c} channels"),
        });
    }
    let flat: Vec<f32> = t
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1()?;
    let per = 3 * h * w;
    (0..n)
        .map(|i| {
            let data = flat[i * per..(i + 1) * per]
                .iter()
                .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
                .collect();
            Image::from_planar(w, h, data)
        })
        .collect()
}
