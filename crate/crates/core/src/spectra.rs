//! Average log-magnitude spectra of high-pass filtered images.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::curation::image::Image;
use crate::par::Execution;
use crate::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 3.0;

/// Row-major grayscale float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::shape(format!("{width}x{height} plane with {} values", values.len())));
        }
        Ok(Plane { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Plane::new(width, height, values)
    }

    pub fn from_image(image: &Image) -> Plane {
        Plane {
            width: image.width(),
            height: image.height(),
            values: image.to_gray(),
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Central `side x side` window (offset rounds down).
    pub fn center_crop(&self, side: usize) -> Result<Plane> {
        if side == 0 || side > self.width || side > self.height {
            return Err(Error::domain(format!("cannot crop {side}x{side} from {}x{}", self.width, self.height)));
        }
        let (x0, y0) = ((self.width - side) / 2, (self.height - side) / 2);
        Plane::from_fn(side, side, |x, y| self.at(x0 + x, y0 + y))
    }
}

/// Normalised Gaussian taps for offsets `-r..=r`, `r = ceil(4 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    let r = (4.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

// Periodic 1-D passes. `high` computes x - G*x as a sum of differences so
// constant rows give exactly zero.
fn axis_pass(p: &Plane, taps: &[f64], along_x: bool, high: bool) -> Plane {
    let r = (taps.len() / 2) as i64;
    let (w, h) = (p.width as i64, p.height as i64);
    Plane {
        width: p.width,
        height: p.height,
        values: (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                let centre = p.at(x as usize, y as usize);
                taps.iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let k = i as i64 - r;
                        let v = if along_x {
                            p.at((x - k).rem_euclid(w) as usize, y as usize)
                        } else {
                            p.at(x as usize, (y - k).rem_euclid(h) as usize)
                        };
                        if high { g * (centre - v) } else { g * v }
                    })
                    .sum()
            })
            .collect(),
    }
}

/// Unsharp residual `x - G_sigma * x` with periodic boundaries.
///
/// Evaluated as `H_y(x) + G_y(H_x(x))` where `H = I - G`; algebraically the
/// same residual, but exact zero on flat regions.
pub fn high_pass(plane: &Plane, sigma: f64) -> Result<Plane> {
    let taps = gaussian_taps(sigma)?;
    let hy = axis_pass(plane, &taps, false, true);
    let hx = axis_pass(plane, &taps, true, true);
    let ghx = axis_pass(&hx, &taps, false, false);
    let values = hy.values.iter().zip(&ghx.values).map(|(a, b)| a + b).collect();
    Plane::new(plane.width, plane.height, values)
}

/// Square complex grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub n: usize,
    pub values: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.values[v * self.n + u]
    }
}

fn require_square(p: &Plane) -> Result<usize> {
    if p.width != p.height {
        return Err(Error::domain(format!("DFT needs a square input, got {}x{}", p.width, p.height)));
    }
    Ok(p.width)
}

/// Unnormalised forward 2-D DFT via row then column FFTs.
pub fn dft2(plane: &Plane) -> Result<ComplexGrid> {
    let n = require_square(plane)?;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut data: Vec<Complex64> = plane.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::default(); n];
    for u in 0..n {
        for v in 0..n {
            col[v] = data[v * n + u];
        }
        fft.process(&mut col);
        for v in 0..n {
            data[v * n + u] = col[v];
        }
    }
    Ok(ComplexGrid { n, values: data })
}

/// Direct double-sum DFT, O(N^4). Reference for tests and tiny inputs.
pub fn dft2_naive(plane: &Plane) -> Result<ComplexGrid> {
    let n = require_square(plane)?;
    let mut values = Vec::with_capacity(n * n);
    for v in 0..n {
        for u in 0..n {
            let mut acc = Complex64::default();
            for y in 0..n {
                for x in 0..n {
                    let phase = -2.0 * PI * (((u * x + v * y) % n) as f64) / n as f64;
                    acc += Complex64::from_polar(plane.at(x, y), phase);
                }
            }
            values.push(acc);
        }
    }
    Ok(ComplexGrid { n, values })
}

/// Log-magnitude spectrum with zero frequency at `(n/2, n/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Spectrum {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.n + x]
    }

    /// `log(1 + |F|)` with the quadrants swapped to centre DC.
    pub fn from_dft(grid: &ComplexGrid) -> Spectrum {
        let n = grid.n;
        let h = n / 2;
        let mut values = vec![0.0; n * n];
        for v in 0..n {
            for u in 0..n {
                values[((v + h) % n) * n + (u + h) % n] = grid.at(u, v).norm().ln_1p();
            }
        }
        Spectrum { n, values }
    }

    /// Largest deviation from point symmetry about the centre. Row and
    /// column 0 have no partner for even `n` and are skipped.
    pub fn asymmetry(&self) -> f64 {
        let n = self.n;
        let skip = usize::from(n.is_multiple_of(2));
        let mut worst = 0.0f64;
        for y in skip..n {
            for x in skip..n {
                let (px, py) = (n - 1 - x + skip, n - 1 - y + skip);
                worst = worst.max((self.at(x, y) - self.at(px, py)).abs());
            }
        }
        worst
    }

    /// 8-bit PGM (P5), min-max normalised.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.n, self.n).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        }));
        out
    }

    /// Whitespace-separated grid, one row per line, full precision.
    pub fn to_grid_text(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks_exact(self.n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn parse_grid_text(text: &str) -> Result<Spectrum> {
        let mut values = Vec::new();
        let mut rows = 0;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?);
            }
            rows += 1;
        }
        if rows == 0 || values.len() != rows * rows {
            return Err(Error::shape(format!("grid with {rows} rows and {} values is not square", values.len())));
        }
        Ok(Spectrum { n: rows, values })
    }

    /// Writes `<stem>.pgm` and `<stem>.grid` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pgm = dir.join(format!("{stem}.pgm"));
        fs::write(&pgm, self.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
        let grid = dir.join(format!("{stem}.grid"));
        fs::write(&grid, self.to_grid_text()).map_err(|e| Error::io(&grid, e))
    }
}

pub fn spectrum_of(plane: &Plane, sigma: f64) -> Result<Spectrum> {
    Ok(Spectrum::from_dft(&dft2(&high_pass(plane, sigma)?)?))
}

/// Mean spectrum over planes centre-cropped to their smallest common square.
/// Per-image transforms may run in parallel; the mean accumulates in input order.
pub fn average_spectrum(planes: &[Plane], sigma: f64, exec: Execution) -> Result<Spectrum> {
    let side = planes
        .iter()
        .map(|p| p.width.min(p.height))
        .min()
        .ok_or_else(|| Error::domain("no images to average"))?;
    let spectra = exec.try_map(planes, |p| spectrum_of(&p.center_crop(side)?, sigma))?;
    // Running mean: a list of identical spectra averages to itself bit-exactly.
    let mut values = vec![0.0; side * side];
    for (i, s) in spectra.iter().enumerate() {
        let k = (i + 1) as f64;
        for (acc, v) in values.iter_mut().zip(&s.values) {
            *acc += (v - *acc) / k;
        }
    }
    Ok(Spectrum { n: side, values })
}
