//! 8-bit raster images: PNG I/O, grayscale conversion, cropping and
//! bilinear resizing.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::{Error, Result};

/// Row-major, channel-interleaved 8-bit image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Image(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Builds an image from a per-pixel function returning one value per channel.
    pub fn from_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> u8,
    {
        let mut pixels = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(x, y, c));
                }
            }
        }
        Image::new(width, height, channels, pixels)
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

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Luma on the 0-255 scale using ITU-R BT.601 weights; 1-channel images
    /// are returned as-is.
    pub fn to_gray(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.iter().map(|&p| p as f64).collect();
        }
        self.pixels
            .chunks_exact(3)
            .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
            .collect()
    }

    /// Copies the `w x h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::domain(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let start = (row * self.width + x) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + w * self.channels]);
        }
        Image::new(w, h, self.channels, pixels)
    }

    /// Bilinear resize with pixel-centre alignment and edge clamping. A
    /// same-size resize returns an identical image.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<Image> {
        if out_w == 0 || out_h == 0 {
            return Err(Error::domain("resize target must be non-empty"));
        }
        if out_w == self.width && out_h == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        let sample_axis = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let cols: Vec<_> = (0..out_w).map(|x| sample_axis(x, sx, self.width)).collect();
        let mut pixels = Vec::with_capacity(out_w * out_h * self.channels);
        for y in 0..out_h {
            let (y0, y1, fy) = sample_axis(y, sy, self.height);
            for &(x0, x1, fx) in &cols {
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) as f64 * (1.0 - fx) + self.get(x1, y0, c) as f64 * fx;
                    let bottom = self.get(x0, y1, c) as f64 * (1.0 - fx) + self.get(x1, y1, c) as f64 * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Image::new(out_w, out_h, self.channels, pixels)
    }

    /// Decodes an 8-bit (or palette/16-bit, normalised to 8-bit) PNG.
    /// Alpha channels are discarded.
    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        buf.truncate(info.line_size * info.height as usize);
        let (w, h) = (info.width as usize, info.height as usize);
        let (channels, pixels) = match info.color_type {
            png::ColorType::Grayscale => (1, buf),
            png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
            png::ColorType::Rgb => (3, buf),
            png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
            png::ColorType::Indexed => return Err(Error::Image("palette was not expanded".into())),
        };
        Image::new(w, h, channels, pixels)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_png(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(if self.channels == 1 {
                png::ColorType::Grayscale
            } else {
                png::ColorType::Rgb
            });
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        for channels in [1, 3] {
            let img = Image::from_fn(7, 5, channels, |x, y, c| (x * 31 + y * 7 + c * 50) as u8).unwrap();
            let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
            assert_eq!(back, img);
        }
        assert!(Image::decode_png(b"not a png").is_err());
    }

    #[test]
    fn gray_uses_601_weights() {
        let img = Image::new(1, 1, 3, vec![100, 200, 50]).unwrap();
        assert!((img.to_gray()[0] - (29.9 + 117.4 + 5.7)).abs() < 1e-9);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = Image::from_fn(9, 9, 3, |x, y, c| (x * y + c) as u8).unwrap();
        assert_eq!(img.resize_bilinear(9, 9).unwrap(), img);
    }

    #[test]
    fn halving_a_linear_ramp_averages_neighbours() {
        let img = Image::from_fn(16, 16, 1, |x, _, _| (10 * x) as u8).unwrap();
        let half = img.resize_bilinear(8, 8).unwrap();
        for x in 0..8 {
            // source coordinate 2x + 0.5 on a ramp of slope 10
            let expected = 10.0 * (2.0 * x as f64 + 0.5);
            assert!((half.get(x, 3, 0) as f64 - expected).abs() <= 1.0);
        }
    }

    #[test]
    fn crop_bounds() {
        let img = Image::from_fn(4, 4, 1, |x, y, _| (y * 4 + x) as u8).unwrap();
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[9, 10, 13, 14]);
        assert!(img.crop(3, 3, 2, 1).is_err());
    }
}
