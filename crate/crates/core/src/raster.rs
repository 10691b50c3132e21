//! Planar floating-point rasters and conversions to and from 8-bit images.

use image::{GrayImage, RgbImage, RgbaImage};

/// A planar (channel-major) raster of `f64` samples. Channel `c`, row `y`,
/// column `x` lives at `data[(c * height + y) * width + x]`.
///
/// Colour rasters produced from 8-bit images hold values in `[0, 1]`; an
/// alpha plane uses 1.0 as its maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "raster size mismatch");
        Raster {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn idx(&self, c: usize, x: usize, y: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[self.idx(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let i = self.idx(c, x, y);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut r = Raster::zeros(w, h, 3);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                r.set(c, x as usize, y as usize, p.0[c] as f64 / 255.0);
            }
        }
        r
    }

    pub fn from_rgba(img: &RgbaImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut r = Raster::zeros(w, h, 4);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..4 {
                r.set(c, x as usize, y as usize, p.0[c] as f64 / 255.0);
            }
        }
        r
    }

    /// Quantizes the first three channels to 8-bit RGB (round to nearest,
    /// clamped).
    pub fn to_rgb(&self) -> RgbImage {
        assert!(self.channels >= 3);
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| quantize(self.get(c, x as usize, y as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn to_rgba(&self) -> RgbaImage {
        assert!(self.channels >= 4);
        RgbaImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| quantize(self.get(c, x as usize, y as usize));
            image::Rgba([px(0), px(1), px(2), px(3)])
        })
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Integer label raster (one class id per pixel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "label map size mismatch");
        LabelMap {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        LabelMap {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().clone(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("label map dimensions are consistent")
    }
}
