//! Top principal components of patch tokens by power iteration with
//! deflation, and the 3-component RGB feature map.

use crate::data::image::{FloatImage, RgbImage};
use crate::error::{Error, Result};
use crate::vit::VitEncoder;

pub const PCA_TOL: f64 = 1e-9;
const MAX_POWER_ITERS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// Unit eigenvectors of the token covariance, largest eigenvalue first.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues (variances along each component).
    pub variances: Vec<f64>,
    /// `[n][n_components]` projections of the centered tokens.
    pub projections: Vec<Vec<f64>>,
}

/// PCA of `n` row vectors of length `d` via the covariance matrix
/// (normalized by `n − 1`). Each component's sign makes its largest-magnitude
/// entry positive.
pub fn pca(rows: &[Vec<f64>], n_components: usize, tol: f64) -> Result<PcaResult> {
    let n = rows.len();
    if n < n_components.max(2) {
        return Err(Error::Protocol(format!(
            "PCA needs at least {n_components} tokens, got {n}"
        )));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("token rows differ in length".into()));
    }
    if n_components > d {
        return Err(Error::Param(format!(
            "cannot take {n_components} components of dimension {d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    let mut variances = Vec::with_capacity(n_components);
    for c in 0..n_components {
        // deterministic start, orthogonal to earlier components
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + c * 13) % 11) as f64 / 11.0).collect();
        orthonormalize(&mut v, &components);
        let mut lambda = 0.0;
        for _ in 0..MAX_POWER_ITERS {
            let mut w = matvec(&cov, &v, d);
            orthonormalize(&mut w, &components);
            let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let flipped: f64 = w.iter().zip(&v).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = dot(&v, &matvec(&cov, &v, d));
            if diff.min(flipped) < tol {
                break;
            }
        }
        let big = v
            .iter()
            .cloned()
            .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        // deflate
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        variances.push(lambda.max(0.0));
        components.push(v);
    }
    let projections = rows
        .iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
            components.iter().map(|p| dot(p, &c)).collect()
        })
        .collect();
    Ok(PcaResult {
        mean,
        components,
        variances,
        projections,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], v)).collect()
}

/// Gram-Schmidt against `basis` (twice, for stability), then unit length.
/// Falls back to a coordinate axis if nothing is left.
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let n = dot(v, v).sqrt();
    if n > 1e-300 {
        v.iter_mut().for_each(|x| *x /= n);
        return;
    }
    for axis in 0..v.len() {
        v.fill(0.0);
        v[axis] = 1.0;
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(v, v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

/// Projects the encoder's patch tokens onto their top three components and
/// renders them as RGB (each component min-max scaled to `[0, 255]`), upscaled
/// from the patch grid to the input size by nearest neighbor. Square inputs of
/// another size are resized to the encoder resolution first.
pub fn pca_map(encoder: &VitEncoder<f32>, image: &FloatImage) -> Result<(RgbImage, PcaResult)> {
    let cfg = &encoder.config;
    if image.width != image.height {
        return Err(Error::Shape(format!(
            "PCA map needs a square image, got {}×{}",
            image.width, image.height
        )));
    }
    let tokens = if image.width == cfg.image_size {
        encoder.patch_tokens(&image.to_tensor())?
    } else {
        encoder.patch_tokens(&image.resize(cfg.image_size, cfg.image_size).to_tensor())?
    };
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    if n < 3 {
        return Err(Error::Protocol(format!(
            "PCA map needs at least 3 patch tokens, got {n}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| tokens.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect())
        .collect();
    let res = pca(&rows, 3, PCA_TOL)?;
    let mut scaled = vec![[0u8; 3]; n];
    for c in 0..3 {
        let vals: Vec<f64> = res.projections.iter().map(|p| p[c]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in vals.iter().enumerate() {
            scaled[i][c] = if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            };
        }
    }
    let g = cfg.grid();
    let mut out = RgbImage::filled(image.width, image.height, [0, 0, 0]);
    for y in 0..image.height {
        for x in 0..image.width {
            let (gy, gx) = ((y * g / image.height).min(g - 1), (x * g / image.width).min(g - 1));
            out.put(x, y, scaled[gy * g + gx]);
        }
    }
    Ok((out, res))
}
