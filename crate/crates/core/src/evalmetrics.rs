//! Image-set comparison: random-projection features, Gaussian summaries,
//! Fréchet distance, and a magenta pixel-diff overlay.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result};
use crate::numerics::Tensor;

pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_DIFF_TAU: f64 = 8.0 / 255.0;

/// Fixed Gaussian projection `R^L → R^D`, entries `N(0, 1/L)`.
#[derive(Clone, Debug)]
pub struct FeatureProjector {
    dim: usize,
    input_len: usize,
    matrix: Vec<f64>,
}

impl FeatureProjector {
    pub fn new(input_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (input_len.max(1) as f64).sqrt();
        let matrix = (0..dim * input_len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * s
            })
            .collect();
        Self { dim, input_len, matrix }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn project(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.numel() != self.input_len {
            return Err(shape_err!("projector built for {} values, got {:?}", self.input_len, image.shape()));
        }
        let x = image.data();
        Ok(self
            .matrix
            .chunks(self.input_len.max(1))
            .take(self.dim)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Flatten and project `image` to `DEFAULT_FEATURE_DIM` features.
pub fn feature_projection(image: &Tensor, seed: u64) -> Result<Vec<f64>> {
    FeatureProjector::new(image.numel(), DEFAULT_FEATURE_DIM, seed).project(image)
}

/// Mean, unbiased covariance and count of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `D × D`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| input_err!("no samples to summarize"))?;
        let d = first.len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(input_err!("samples of differing dimension"));
        }
        let n = samples.len();
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        let denom = n.saturating_sub(1).max(1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    /// Pooled summary of the union of both sample sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let d = self.dim();
        if other.dim() != d {
            return Err(input_err!("merging summaries of dimension {d} and {}", other.dim()));
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mean = self.mean.iter().zip(&delta).map(|(a, dl)| a + dl * nb / n).collect();
        let m2a = (na - 1.0).max(0.0);
        let m2b = (nb - 1.0).max(0.0);
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let k = i * d + j;
                let m2 = self.cov[k] * m2a + other.cov[k] * m2b + delta[i] * delta[j] * na * nb / n;
                cov[k] = m2 / (n - 1.0).max(1.0);
            }
        }
        Ok(Self { mean, cov, count: self.count + other.count })
    }
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a^{½} Σ_b Σ_a^{½})^{½})`
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(input_err!("summaries of dimension {d} and {}", b.dim()));
    }
    let ma = DVector::from_column_slice(&a.mean);
    let mb = DVector::from_column_slice(&b.mean);
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let ra = psd_sqrt(sa.clone());
    let cross = psd_sqrt(&ra * &sb * &ra);
    let v = (ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

/// Grayscale copy of `baseline` (`[3, H, W]` in `[0, 1]`) with every pixel
/// whose channel difference to `variant` exceeds `tau` painted magenta.
/// Returns the overlay and the deviating fraction.
pub fn image_diff(baseline: &Tensor, variant: &Tensor, tau: f64) -> Result<(Tensor, f64)> {
    baseline.expect_same_shape(variant)?;
    let s = baseline.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err!("expected [3, H, W] images, got {:?}", s));
    }
    let hw = s[1] * s[2];
    let (a, b) = (baseline.data(), variant.data());
    let mut out = vec![0.0; 3 * hw];
    let mut deviating = 0usize;
    for p in 0..hw {
        let off = (0..3).any(|c| (a[c * hw + p] - b[c * hw + p]).abs() > tau);
        let rgb = if off {
            deviating += 1;
            [1.0, 0.0, 1.0]
        } else {
            let g = 0.299 * a[p] + 0.587 * a[hw + p] + 0.114 * a[2 * hw + p];
            [g, g, g]
        };
        for c in 0..3 {
            out[c * hw + p] = rgb[c];
        }
    }
    Ok((Tensor::new(s.to_vec(), out)?, deviating as f64 / hw.max(1) as f64))
}

/// Write a `[3, H, W]` or `[1, H, W]` tensor in `[0, 1]` as PNG or PPM (by extension).
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || (s[0] != 3 && s[0] != 1) {
        return Err(shape_err!("expected [3|1, H, W] image, got {:?}", s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let d = image.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let ch = |k: usize| {
            let v = d[(if c == 1 { 0 } else { k }) * hw + i];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        *px = image::Rgb([ch(0), ch(1), ch(2)]);
    }
    buf.save(path)?;
    Ok(())
}

/// Read a PNG/PPM file as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    rgb_to_tensor(&img)
}

pub(crate) fn rgb_to_tensor(img: &image::RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = w * h;
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], out)
}
