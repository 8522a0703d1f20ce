//! Canny edge detection and the edge metrics used by the style filter.

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::{Error, Result};

/// Smallest image side the detector accepts.
pub const MIN_SIDE: usize = 5;

/// Relative tolerance under which two gradient magnitudes count as equal in
/// non-maximum suppression.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    /// Hysteresis thresholds on the L2 Sobel magnitude (0-255 intensity scale).
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: 1.4,
            low: 50.0,
            high: 150.0,
        }
    }
}

/// What the style filter compares against the edge threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMetric {
    /// Number of 8-connected edge components.
    #[default]
    Components,
    /// Edge pixels divided by total pixels.
    PixelFraction,
}

/// Binary edge map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub edges: Vec<bool>,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    /// Pixel coordinates of each 8-connected component.
    pub fn components(&self) -> Vec<Vec<(usize, usize)>> {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !self.edges[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut pixels = Vec::new();
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                pixels.push((x, y));
                for (nx, ny) in neighbours8(x, y, w, h) {
                    let j = ny * w + nx;
                    if self.edges[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            out.push(pixels);
        }
        out
    }

    pub fn component_count(&self) -> usize {
        self.components().len()
    }
}

fn neighbours8(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x, y) = (x as isize, y as isize);
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (x + dx, y + dy)))
        .filter(move |&(nx, ny)| (nx, ny) != (x, y) && nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize)
        .map(|(nx, ny)| (nx as usize, ny as usize))
}

/// Normalised 1-D Gaussian of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable convolution with edge replication.
fn blur(gray: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, g)| g * gray[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, g)| g * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Full Canny: Gaussian smoothing, 3x3 Sobel, non-maximum suppression and
/// double-threshold hysteresis. The one-pixel frame is never marked.
pub fn canny(gray: &[f64], width: usize, height: usize, params: CannyParams) -> Result<EdgeMap> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::domain(format!(
            "canny needs at least {MIN_SIDE}x{MIN_SIDE} pixels, got {width}x{height}"
        )));
    }
    if gray.len() != width * height {
        return Err(Error::shape("gray buffer does not match image size"));
    }
    if params.sigma.is_nan() || params.sigma <= 0.0 || params.low > params.high {
        return Err(Error::domain("canny needs sigma > 0 and low <= high"));
    }
    let (w, h) = (width, height);
    let smooth = blur(gray, w, h, &gaussian_kernel(params.sigma));
    let at = |x: isize, y: isize| smooth[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];

    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let dy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy);
        }
    }

    // Suppress anything that is not a ridge along the gradient direction.
    // Ties are broken toward the positive direction so plateaus stay one pixel wide.
    let mut thin = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m < params.low {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (ox, oy): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let ahead = mag[(y as isize + oy) as usize * w + (x as isize + ox) as usize];
            let behind = mag[(y as isize - oy) as usize * w + (x as isize - ox) as usize];
            // Magnitudes that agree to ~1e-9 are ties; symmetric edges otherwise
            // break on rounding noise.
            let eps = TIE_EPS * m;
            if m >= behind - eps && m > ahead + eps {
                thin[i] = m;
            }
        }
    }

    let mut edges = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| thin[i] >= params.high).collect();
    for &i in &stack {
        edges[i] = true;
    }
    while let Some(i) = stack.pop() {
        for (nx, ny) in neighbours8(i % w, i / w, w, h) {
            let j = ny * w + nx;
            if !edges[j] && thin[j] >= params.low {
                edges[j] = true;
                stack.push(j);
            }
        }
    }
    Ok(EdgeMap {
        width: w,
        height: h,
        edges,
    })
}

/// Canny on the image's luma, reduced to the chosen metric.
pub fn canny_edge_metric(image: &Image, params: CannyParams, metric: EdgeMetric) -> Result<f64> {
    let map = canny(&image.to_gray(), image.width(), image.height(), params)?;
    Ok(match metric {
        EdgeMetric::Components => map.component_count() as f64,
        EdgeMetric::PixelFraction => map.count() as f64 / (map.width * map.height) as f64,
    })
}

/// How colour variance is aggregated across channels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Mean of per-channel population variances.
    #[default]
    PerChannel,
    /// Population variance of all channel values pooled together.
    Pooled,
}

/// Population variance from exact integer moments.
fn variance_of(values: impl Iterator<Item = u8>) -> f64 {
    let (mut n, mut s, mut s2) = (0u128, 0u128, 0u128);
    for v in values {
        let v = v as u128;
        n += 1;
        s += v;
        s2 += v * v;
    }
    if n == 0 {
        return 0.0;
    }
    // n^2 * var = n * sum(x^2) - sum(x)^2, exact in integers
    (n * s2 - s * s) as f64 / (n * n) as f64
}

/// Colour variance on the 0-255 scale. Single-channel images are rejected.
pub fn color_variance(image: &Image, mode: VarianceMode) -> Result<f64> {
    if image.channels() != 3 {
        return Err(Error::domain("colour variance needs a 3-channel image"));
    }
    let px = image.pixels();
    Ok(match mode {
        VarianceMode::PerChannel => {
            (0..3)
                .map(|c| variance_of(px.iter().skip(c).step_by(3).copied()))
                .sum::<f64>()
                / 3.0
        }
        VarianceMode::Pooled => variance_of(px.iter().copied()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(img: &Image) -> EdgeMap {
        canny(&img.to_gray(), img.width(), img.height(), CannyParams::default()).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Image::from_fn(32, 32, 3, |_, _, _| 120).unwrap();
        assert_eq!(gray(&img).component_count(), 0);
    }

    #[test]
    fn vertical_step_is_one_component_at_the_boundary() {
        let img = Image::from_fn(64, 64, 1, |x, _, _| if x < 32 { 0 } else { 255 }).unwrap();
        let comps = gray(&img).components();
        assert_eq!(comps.len(), 1);
        assert!(comps[0].iter().all(|&(x, _)| (x as isize - 32).abs() <= 1));
        // spans the interior rows
        assert_eq!(comps[0].len(), 62);
    }

    #[test]
    fn tiny_images_are_rejected() {
        let img = Image::from_fn(4, 10, 1, |_, _, _| 0).unwrap();
        assert!(matches!(
            canny_edge_metric(&img, CannyParams::default(), EdgeMetric::Components),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pixel_fraction_metric() {
        let img = Image::from_fn(64, 64, 1, |x, _, _| if x < 32 { 0 } else { 255 }).unwrap();
        let f = canny_edge_metric(&img, CannyParams::default(), EdgeMetric::PixelFraction).unwrap();
        assert!((f - 62.0 / 4096.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_normalised() {
        let k = gaussian_kernel(1.4);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variance_cases() {
        let flat = Image::from_fn(8, 8, 3, |_, _, _| 77).unwrap();
        assert_eq!(color_variance(&flat, VarianceMode::PerChannel).unwrap(), 0.0);
        let half = Image::from_fn(8, 8, 3, |x, _, _| if x < 4 { 0 } else { 255 }).unwrap();
        assert_eq!(color_variance(&half, VarianceMode::PerChannel).unwrap(), 16256.25);
        let g = Image::from_fn(8, 8, 1, |_, _, _| 0).unwrap();
        assert!(matches!(color_variance(&g, VarianceMode::PerChannel), Err(Error::Domain(_))));
        // channels with different means: pooled variance exceeds per-channel mean
        let tinted = Image::from_fn(8, 8, 3, |_, _, c| [0, 100, 200][c]).unwrap();
        assert_eq!(color_variance(&tinted, VarianceMode::PerChannel).unwrap(), 0.0);
        assert!(color_variance(&tinted, VarianceMode::Pooled).unwrap() > 6000.0);
    }
}
