//! RGB images with channels in `[0, 1]`, and their PPM form.

use std::path::Path;

use place_autograd::{Real, Tensor};

use crate::pnm::{self, PnmError, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    /// Row-major, interleaved RGB.
    data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Self {
        Self { height, width, data: color.iter().copied().cycle().take(height * width * 3).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_raster(&self) -> Raster {
        let pixels = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Raster { width: self.width, height: self.height, channels: 3, pixels }
    }

    pub fn from_raster(r: &Raster) -> Result<Self, PnmError> {
        if r.channels != 3 {
            return Err(PnmError::MalformedHeader("expected an RGB (P6) image".into()));
        }
        Ok(Self { height: r.height, width: r.width, data: r.pixels.iter().map(|&p| p as f64 / 255.0).collect() })
    }

    pub fn load(path: &Path) -> Result<Self, PnmError> {
        Self::from_raster(&pnm::read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PnmError> {
        pnm::write_file(path, &self.to_raster())
    }

    /// Re-reads the image through 8-bit quantization, as it would come back
    /// from disk.
    pub fn quantized(&self) -> Self {
        Self::from_raster(&self.to_raster()).expect("rgb raster")
    }

    /// `[3, H, W]` tensor scaled to `[-1, 1]`.
    pub fn to_signed_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![T::zero(); 3 * h * w];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + p] = T::lit(px[c] * 2.0 - 1.0);
            }
        }
        Tensor::new(&[3, h, w], out).expect("shape")
    }

    /// Inverse of channel-planar layout for a `[3, H, W]` tensor in `[0, 1]`.
    pub fn from_unit_tensor<T: Real>(t: &Tensor<T>) -> Result<Self, String> {
        let &[3, h, w] = t.shape() else {
            return Err(format!("expected [3, H, W], got {:?}", t.shape()));
        };
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for p in 0..h * w {
                data[p * 3 + c] = t.data()[c * h * w + p].to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            }
        }
        Ok(Self { height: h, width: w, data })
    }

    /// Images laid side by side.
    pub fn hstack(images: &[RgbImage]) -> Option<Self> {
        let h = images.first()?.height;
        if images.iter().any(|i| i.height != h) {
            return None;
        }
        let width = images.iter().map(|i| i.width).sum();
        let mut out = Self::filled(h, width, [0.0; 3]);
        let mut x0 = 0;
        for img in images {
            for r in 0..h {
                for c in 0..img.width {
                    out.set_pixel(r, x0 + c, img.pixel(r, c));
                }
            }
            x0 += img.width;
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let mut img = RgbImage::filled(2, 3, [0.0, 0.5, 1.0]);
        img.set_pixel(1, 2, [0.25, 0.75, 0.125]);
        let t = img.to_signed_tensor::<f64>();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[12], 1.0);
        let unit = t.map(|v| (v + 1.0) / 2.0);
        assert_eq!(RgbImage::from_unit_tensor(&unit).unwrap(), img);
    }

    #[test]
    fn ppm_round_trip_is_quantized() {
        let img = RgbImage::filled(4, 4, [0.1, 0.9, 0.5]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        img.save(&p).unwrap();
        let back = RgbImage::load(&p).unwrap();
        assert_eq!(back, img.quantized());
        assert!(back.pixel(0, 0).iter().zip(img.pixel(0, 0)).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn hstack_widths() {
        let a = RgbImage::filled(2, 2, [1.0, 0.0, 0.0]);
        let b = RgbImage::filled(2, 3, [0.0, 1.0, 0.0]);
        let s = RgbImage::hstack(&[a, b]).unwrap();
        assert_eq!(s.width(), 5);
        assert_eq!(s.pixel(1, 4), [0.0, 1.0, 0.0]);
    }
}
