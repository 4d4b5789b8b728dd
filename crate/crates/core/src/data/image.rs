//! 8-bit RGB images, float images and the binary PNM codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the rectangle `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        RgbImage {
            width: w,
            height: h,
            pixels,
        }
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        self.to_float().resize(width, height).to_rgb()
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let where_ = path.display().to_string();
        let (magic, header, body) = parse_pnm_header(&bytes, &where_)?;
        if magic != *b"P6" {
            return Err(Error::format(&where_, "expected binary PPM (P6)"));
        }
        let [w, h, maxval] = header;
        if maxval != 255 {
            return Err(Error::format(
                &where_,
                format!("only maxval 255 is supported, got {maxval}"),
            ));
        }
        if body.len() < w * h * 3 {
            return Err(Error::format(&where_, "truncated pixel data"));
        }
        RgbImage::new(w, h, body[..w * h * 3].to_vec())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Row-major RGB image with float channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            pixels: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    /// `[H, W, 3]` tensor.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.data.iter().map(|&v| F::c(v as f64)).collect(),
        )
        .expect("image shape")
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> FloatImage {
        self.resize_region(0.0, 0.0, self.width as f64, self.height as f64, width, height)
    }

    /// Resamples the source rectangle `(x0, y0, w, h)` (in pixels) to
    /// `out_w × out_h`.
    pub fn resize_region(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> FloatImage {
        if x0 == 0.0
            && y0 == 0.0
            && w == self.width as f64
            && h == self.height as f64
            && out_w == self.width
            && out_h == self.height
        {
            return self.clone();
        }
        let mut data = Vec::with_capacity(out_w * out_h * 3);
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        let maxx = self.width as f64 - 1.0;
        let maxy = self.height as f64 - 1.0;
        for oy in 0..out_h {
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, maxy);
            let y1 = fy.floor() as usize;
            let y2 = (y1 + 1).min(self.height - 1);
            let ty = (fy - y1 as f64) as f32;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, maxx);
                let x1 = fx.floor() as usize;
                let x2 = (x1 + 1).min(self.width - 1);
                let tx = (fx - x1 as f64) as f32;
                for c in 0..3 {
                    let p = |x: usize, y: usize| self.data[(y * self.width + x) * 3 + c];
                    let top = p(x1, y1) * (1.0 - tx) + p(x2, y1) * tx;
                    let bot = p(x1, y2) * (1.0 - tx) + p(x2, y2) * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        FloatImage {
            width: out_w,
            height: out_h,
            data,
        }
    }
}

/// Integer label map (0 = background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}×{height} label map needs {} entries, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Reads a single-channel binary PGM (P5), 8- or 16-bit (big-endian).
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let where_ = path.display().to_string();
        let (magic, header, body) = parse_pnm_header(&bytes, &where_)?;
        if magic != *b"P5" {
            return Err(Error::format(&where_, "expected binary PGM (P5)"));
        }
        let [w, h, maxval] = header;
        let labels = if maxval < 256 {
            if body.len() < w * h {
                return Err(Error::format(&where_, "truncated label data"));
            }
            body[..w * h].iter().map(|&v| v as u16).collect()
        } else {
            if body.len() < w * h * 2 {
                return Err(Error::format(&where_, "truncated label data"));
            }
            body[..w * h * 2]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        LabelMap::new(w, h, labels)
    }

    /// Writes a 16-bit binary PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &v in &self.labels {
            out.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Splits a PNM file into magic, `[width, height, maxval]` and pixel bytes.
fn parse_pnm_header<'a>(bytes: &'a [u8], path: &str) -> Result<([u8; 2], [usize; 3], &'a [u8])> {
    if bytes.len() < 2 {
        return Err(Error::format(path, "empty file"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header number"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing header terminator"));
    }
    if fields[0] == 0 || fields[1] == 0 || fields[2] == 0 || fields[2] > 65535 {
        return Err(Error::format(path, "degenerate image header"));
    }
    Ok((magic, fields, &bytes[pos + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(3, 2, (0..18).map(|v| (v * 13) as u8).collect()).unwrap();
        let p = dir.path().join("a.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(RgbImage::read_ppm(&p).unwrap(), img);

        let m = LabelMap::new(2, 2, vec![0, 1, 300, 65535]).unwrap();
        let p = dir.path().join("m.pgm");
        m.write_pgm(&p).unwrap();
        assert_eq!(LabelMap::read_pgm(&p).unwrap(), m);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        fs::write(&p, &bytes).unwrap();
        assert_eq!(RgbImage::read_ppm(&p).unwrap().get(0, 0), [1, 2, 3]);
        fs::write(&p, b"P6\n0 4\n255\n").unwrap();
        assert!(RgbImage::read_ppm(&p).is_err());
        fs::write(&p, b"P3\n1 1\n255\n1 2 3").unwrap();
        assert!(RgbImage::read_ppm(&p).is_err());
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = RgbImage::new(2, 2, vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120]).unwrap();
        assert_eq!(img.resize(2, 2), img);
        let f = img.to_float();
        assert_eq!(f.resize(2, 2), f);
        let up = f.resize(4, 4).to_rgb();
        assert_eq!(up.get(0, 0), [10, 20, 30]);
        assert_eq!(up.get(3, 3), [100, 110, 120]);
    }
}
