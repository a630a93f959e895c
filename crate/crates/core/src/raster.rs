//! Real-valued grayscale rasters, PGM (P5) I/O and the Gaussian smoothing
//! used by both the renderer and the match-score search.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image. Pixel `(x, y)` is centred on integer
/// coordinates, `x` along a row.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(Error::SizeMismatch {
                expected: format!("{} pixels ({width}x{height})", width * height),
                actual: format!("{} pixels", pixels.len()),
            });
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite grey level at index {i}")));
        }
        Ok(GrayRaster { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayRaster { width, height, pixels: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Bilinear sample at real coordinates, `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if self.width == 0 || self.height == 0 {
            return None;
        }
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y) {
            return None;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as usize, y0 as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Separable Gaussian blur with reflect-at-border handling
    /// (`... c b | a b c | b a ...`). Sigmas at or below zero return a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> GrayRaster {
        if sigma <= 0.0 || self.pixels.is_empty() {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &self.pixels[y * w..(y + 1) * w];
            let out = &mut tmp[y * w..(y + 1) * w];
            convolve_line(row, out, &kernel);
        }
        let mut out = vec![0.0; w * h];
        let mut col = vec![0.0; h];
        let mut col_out = vec![0.0; h];
        for x in 0..w {
            for y in 0..h {
                col[y] = tmp[y * w + x];
            }
            convolve_line(&col, &mut col_out, &kernel);
            for y in 0..h {
                out[y * w + x] = col_out[y];
            }
        }
        GrayRaster { width: w, height: h, pixels: out }
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_pgm_from(BufReader::new(f))
    }

    /// Reads a binary P5 PGM with maxval up to 65535 (16-bit samples are
    /// big-endian).
    pub fn read_pgm_from<R: BufRead>(mut r: R) -> Result<Self> {
        let magic = next_token(&mut r)?;
        if magic != "P5" {
            return Err(Error::Parse(format!("expected P5 PGM, found magic {magic:?}")));
        }
        let width: usize = parse_token(&mut r, "width")?;
        let height: usize = parse_token(&mut r, "height")?;
        let maxval: u32 = parse_token(&mut r, "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Parse(format!("unsupported maxval {maxval}")));
        }
        let bytes_per = if maxval < 256 { 1 } else { 2 };
        let mut buf = vec![0u8; width * height * bytes_per];
        r.read_exact(&mut buf).map_err(|e| Error::Parse(format!("truncated PGM raster: {e}")))?;
        let pixels = if bytes_per == 1 {
            buf.iter().map(|&b| b as f64).collect()
        } else {
            buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
        };
        GrayRaster::new(width, height, pixels)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pgm_to(&mut f, bit_depth)?;
        f.flush()?;
        Ok(())
    }

    /// Writes P5 with grey levels rounded and clamped to `[0, 2^depth - 1]`.
    pub fn write_pgm_to<W: Write>(&self, w: &mut W, bit_depth: u8) -> Result<()> {
        let maxval: u32 = match bit_depth {
            8 => 255,
            16 => 65535,
            d => return Err(Error::InvalidParameter(format!("bit depth must be 8 or 16, got {d}"))),
        };
        write!(w, "P5\n{} {}\n{}\n", self.width, self.height, maxval)?;
        let clamp = |v: f64| v.round().clamp(0.0, maxval as f64) as u32;
        if bit_depth == 8 {
            let data: Vec<u8> = self.pixels.iter().map(|&v| clamp(v) as u8).collect();
            w.write_all(&data)?;
        } else {
            let mut data = Vec::with_capacity(self.pixels.len() * 2);
            for &v in &self.pixels {
                data.extend_from_slice(&(clamp(v) as u16).to_be_bytes());
            }
            w.write_all(&data)?;
        }
        Ok(())
    }
}

/// Normalized kernel truncated at `ceil(3 sigma)` (radius at least 1).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn convolve_line(input: &[f64], output: &mut [f64], kernel: &[f64]) {
    let n = input.len();
    let radius = (kernel.len() / 2) as isize;
    for (i, o) in output.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &kv) in kernel.iter().enumerate() {
            let src = i as isize + j as isize - radius;
            let idx = if src >= 0 && (src as usize) < n { src as usize } else { reflect(src, n) };
            acc += kv * input[idx];
        }
        *o = acc;
    }
}

fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Parse("unexpected end of PGM header".into()));
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            // the single whitespace after maxval is consumed here
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

fn parse_token<R: BufRead, T: std::str::FromStr>(r: &mut R, what: &str) -> Result<T> {
    let tok = next_token(r)?;
    tok.parse().map_err(|_| Error::Parse(format!("bad PGM {what}: {tok:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp(w: usize, h: usize) -> GrayRaster {
        let px = (0..w * h).map(|i| ((i % w) * 3 + (i / w) * 7) as f64).collect();
        GrayRaster::new(w, h, px).unwrap()
    }

    #[test]
    fn size_and_finiteness_checked() {
        assert!(GrayRaster::new(2, 2, vec![0.0; 3]).is_err());
        assert!(GrayRaster::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn bilinear_exact_at_integers_and_linear_between() {
        let r = ramp(5, 4);
        assert_eq!(r.sample_bilinear(2.0, 1.0), Some(r.get(2, 1)));
        assert_abs_diff_eq!(r.sample_bilinear(2.5, 1.5).unwrap(), 2.5 * 3.0 + 1.5 * 7.0, epsilon = 1e-12);
        assert_eq!(r.sample_bilinear(4.0, 3.0), Some(r.get(4, 3)));
        assert!(r.sample_bilinear(-0.1, 0.0).is_none());
        assert!(r.sample_bilinear(0.0, 3.01).is_none());
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let c = GrayRaster::filled(9, 7, 4.25);
        let b = c.gaussian_blur(1.3);
        assert!(b.pixels().iter().all(|v| (v - 4.25).abs() < 1e-12));
        let mut imp = GrayRaster::filled(31, 31, 0.0);
        imp.set(15, 15, 1.0);
        let b = imp.gaussian_blur(1.0);
        assert_abs_diff_eq!(b.pixels().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(b.get(15, 15) < 1.0 && b.get(15, 15) > b.get(16, 15));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn pgm_roundtrip_8_and_16_bit() {
        let r = ramp(6, 3);
        for depth in [8u8, 16] {
            let mut buf = Vec::new();
            r.write_pgm_to(&mut buf, depth).unwrap();
            let back = GrayRaster::read_pgm_from(std::io::Cursor::new(buf)).unwrap();
            assert_eq!(back, r);
        }
        let mut big = GrayRaster::filled(2, 1, 1000.0);
        big.set(1, 0, 70000.0);
        let mut buf = Vec::new();
        big.write_pgm_to(&mut buf, 16).unwrap();
        let back = GrayRaster::read_pgm_from(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.pixels(), &[1000.0, 65535.0]);
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let mut data = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        data.extend_from_slice(&[10, 20]);
        let r = GrayRaster::read_pgm_from(std::io::Cursor::new(data)).unwrap();
        assert_eq!(r.pixels(), &[10.0, 20.0]);
        assert!(GrayRaster::read_pgm_from(std::io::Cursor::new(b"P2\n1 1\n255\n0".to_vec())).is_err());
        assert!(GrayRaster::read_pgm_from(std::io::Cursor::new(b"P5\n2 2\n255\n\x01".to_vec())).is_err());
    }
}
