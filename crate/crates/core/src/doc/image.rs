use std::path::Path;

use super::{BBox, COORD_MAX};
use crate::error::{Error, Result};

/// 8-bit page raster, row-major, interleaved channels (1 or 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PageImage {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl PageImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Image(format!(
                "unsupported image {width}x{height} with {channels} channels"
            )));
        }
        if data.len() != width as usize * height as usize * channels as usize {
            return Err(Error::Image("pixel buffer does not match dimensions".into()));
        }
        Ok(PageImage {
            width,
            height,
            channels,
            data,
        })
    }

    /// A white page.
    pub fn blank(width: u32, height: u32, channels: u8) -> Self {
        PageImage {
            width,
            height,
            channels,
            data: vec![255; width as usize * height as usize * channels as usize],
        }
    }

    /// Loads PNG or PPM/PGM pages. Grayscale stays single-channel, anything
    /// else is converted to RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width(), img.height());
        match img.color().channel_count() {
            1 | 2 => PageImage::new(w, h, 1, img.to_luma8().into_raw()),
            _ => PageImage::new(w, h, 3, img.to_rgb8().into_raw()),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            ::image::ExtendedColorType::L8
        } else {
            ::image::ExtendedColorType::Rgb8
        };
        ::image::save_buffer(path, &self.data, self.width, self.height, color)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn channels(&self) -> u8 {
        self.channels
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32, c: u8) -> u8 {
        self.data[((y * self.width + x) * self.channels as u32 + c as u32) as usize]
    }

    /// Fills the pixels covered by a normalized box with `value` in every
    /// channel. Pixel `p` is covered when its span `[p, p+1)` intersects the
    /// box scaled to the raster.
    pub fn fill_normalized(&mut self, bbox: &BBox, value: u8) {
        let sx = self.width as f64 / COORD_MAX as f64;
        let sy = self.height as f64 / COORD_MAX as f64;
        let px0 = ((bbox.x0() as f64 * sx).floor() as u32).min(self.width);
        let py0 = ((bbox.y0() as f64 * sy).floor() as u32).min(self.height);
        let px1 = ((bbox.x1() as f64 * sx).ceil() as u32).min(self.width);
        let py1 = ((bbox.y1() as f64 * sy).ceil() as u32).min(self.height);
        let ch = self.channels as usize;
        for y in py0..py1 {
            let row = (y * self.width) as usize * ch;
            self.data[row + px0 as usize * ch..row + px1 as usize * ch].fill(value);
        }
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> PageImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let ch = self.channels as usize;
        let mut out = vec![0u8; width as usize * height as usize * ch];
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |dst: u32, scale: f64, len: u32| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as u32).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = axis(x, sx, self.width);
                for c in 0..self.channels {
                    let p = |xx, yy| self.pixel(xx, yy, c) as f64;
                    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    out[(y as usize * width as usize + x as usize) * ch + c as usize] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        PageImage {
            width,
            height,
            channels: self.channels,
            data: out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_and_resize_preserve_constant_regions() {
        let mut img = PageImage::blank(100, 100, 1);
        img.fill_normalized(&BBox::new(0, 0, 500, 1000).unwrap(), 0);
        assert_eq!(img.pixel(49, 10, 0), 0);
        assert_eq!(img.pixel(50, 10, 0), 255);
        let small = img.resize_bilinear(20, 20);
        assert_eq!(small.pixel(2, 5, 0), 0);
        assert_eq!(small.pixel(17, 5, 0), 255);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let mut img = PageImage::blank(30, 20, 3);
        img.fill_normalized(&BBox::new(100, 100, 400, 900).unwrap(), 7);
        img.save_png(&path).unwrap();
        assert_eq!(PageImage::load(&path).unwrap(), img);
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(PageImage::new(2, 2, 1, vec![0; 3]).is_err());
        assert!(PageImage::new(2, 2, 2, vec![0; 8]).is_err());
    }
}
