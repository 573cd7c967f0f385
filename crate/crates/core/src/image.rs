//! RGB float images and their conversion to and from PNG files and tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major `H × W × 3` radiance image.
///
/// Values lie in `[0, 1]` unless `noisy` is set, which marks buffers that
/// carry injected Gaussian noise and may leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
    noisy: bool,
}

impl<T: Scalar> ImageBuffer<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self { height, width, pixels, noisy: false })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels, noisy: false }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self { height, width, pixels, noisy: false }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [T] {
        &mut self.pixels
    }

    pub fn is_noisy(&self) -> bool {
        self.noisy
    }

    pub(crate) fn mark_noisy(mut self) -> Self {
        self.noisy = true;
        self
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "image {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let scale = T::lit(1.0 / 255.0);
        let pixels = rgb.as_raw().iter().map(|&b| T::from_u8(b).expect("u8") * scale).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    /// Quantizes to 8 bits (clamping to `[0, 1]`) and writes a PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidInput(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Ok(Self { height: h, width: w, pixels, noisy: self.noisy })
    }

    /// Bilinear resampling with pixel-centre alignment and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let taps = |o: usize, scale: f64, len: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, T::lit(src - i0 as f64))
        };
        let cols: Vec<_> = (0..out_w).map(|x| taps(x, sx, self.width)).collect();
        let mut pixels = Vec::with_capacity(out_h * out_w * 3);
        for y in 0..out_h {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for &(x0, x1, fx) in &cols {
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (T::one() - fx) + self.get(y0, x1, c) * fx;
                    let bot = self.get(y1, x0, c) * (T::one() - fx) + self.get(y1, x1, c) * fx;
                    pixels.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        Self { height: out_h, width: out_w, pixels, noisy: self.noisy }
    }

    /// Per-pixel mean of R, G and B as an `H × W` row-major map.
    pub fn lightness(&self) -> Vec<T> {
        let third = T::lit(1.0 / 3.0);
        self.pixels.chunks(3).map(|p| (p[0] + p[1] + p[2]) * third).collect()
    }

    pub fn clamped(&self) -> Self {
        let pixels = self.pixels.iter().map(|v| v.max(T::zero()).min(T::one())).collect();
        Self { height: self.height, width: self.width, pixels, noisy: false }
    }

    pub fn cast<U: Scalar>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            noisy: self.noisy,
        }
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.to_f64_lossy();
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Packs equally sized images into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&ImageBuffer<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("no images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        img.ensure_same_dims(first)?;
        for c in 0..3 {
            data.extend(img.pixels.iter().skip(c).step_by(3));
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// Extracts sample `index` of an `[N, 3, H, W]` tensor as an image.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<ImageBuffer<T>> {
    if t.ndim() != 4 || t.shape()[1] != 3 || index >= t.shape()[0] {
        return Err(Error::Shape(format!("cannot take image {index} from tensor {:?}", t.shape())));
    }
    let (_, _, h, w) = t.dims4();
    let plane = h * w;
    let src = &t.data()[index * 3 * plane..(index + 1) * 3 * plane];
    let mut pixels = vec![T::zero(); 3 * plane];
    for c in 0..3 {
        for p in 0..plane {
            pixels[p * 3 + c] = src[c * plane + p];
        }
    }
    ImageBuffer::new(h, w, pixels)
}
