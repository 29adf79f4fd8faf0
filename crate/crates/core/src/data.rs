//! Labeled training sets: class-parameterized Gabor textures or an image
//! folder with one subdirectory per class, both mapped to 4-channel latents.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result};
use crate::evalmetrics::rgb_to_tensor;
use crate::numerics::Tensor;

/// Fixed RGB → latent map (`[4, 3]`), applied per pixel.
pub const LATENT_MAP: [[f64; 3]; 4] = [
    [0.5, 0.3, 0.2],
    [-0.4, 0.6, -0.2],
    [0.2, -0.3, 0.7],
    [0.3, 0.3, -0.6],
];

fn latent_matrix() -> DMatrix<f64> {
    DMatrix::from_fn(4, 3, |r, c| LATENT_MAP[r][c])
}

/// `[3, H, W]` in `[-1, 1]` → `[4, H, W]`.
pub fn encode_latent(rgb: &Tensor) -> Result<Tensor> {
    apply_per_pixel(rgb, &latent_matrix(), 3)
}

/// Least-squares inverse of [`encode_latent`].
pub fn decode_latent(latent: &Tensor) -> Result<Tensor> {
    let pinv = latent_matrix().pseudo_inverse(1e-12).map_err(|e| input_err!("{e}"))?;
    apply_per_pixel(latent, &pinv, 4)
}

fn apply_per_pixel(x: &Tensor, m: &DMatrix<f64>, cin: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] != cin {
        return Err(shape_err!("expected [{cin}, H, W], got {:?}", s));
    }
    let hw = s[1] * s[2];
    let cout = m.nrows();
    let mut out = vec![0.0; cout * hw];
    for p in 0..hw {
        for o in 0..cout {
            out[o * hw + p] = (0..cin).map(|i| m[(o, i)] * x.data()[i * hw + p]).sum();
        }
    }
    Tensor::new([cout, s[1], s[2]], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// Latent images with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[M, 4, S, S]`
    pub latents: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// One Gabor texture in RGB `[-1, 1]`; class `k` fixes frequency,
/// orientation and colour, `rng` jitters phase and centre.
pub fn gabor_image<R: Rng + ?Sized>(class: usize, classes: usize, size: usize, rng: &mut R) -> Tensor {
    let frac = class as f64 / classes.max(1) as f64;
    let freq = 1.5 + 3.0 * ((class * 7) % classes.max(1)) as f64 / classes.max(1) as f64;
    let theta = PI * frac;
    let hue = 2.0 * PI * ((class * 3) % classes.max(1)) as f64 / classes.max(1) as f64;
    let colour = [hue.cos(), (hue + 2.0 * PI / 3.0).cos(), (hue + 4.0 * PI / 3.0).cos()];
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cx, cy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let hw = size * size;
    let mut out = vec![0.0; 3 * hw];
    for i in 0..size {
        for j in 0..size {
            let y = (i as f64 + 0.5) / size as f64 - 0.5 - cy;
            let x = (j as f64 + 0.5) / size as f64 - 0.5 - cx;
            let u = x * theta.cos() + y * theta.sin();
            let env = (-(x * x + y * y) / (2.0 * 0.3 * 0.3)).exp();
            let wave = (2.0 * PI * freq * u + phase).cos() * env;
            for c in 0..3 {
                out[c * hw + i * size + j] = (0.8 * wave * colour[c]).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new([3, size, size], out).expect("consistent shape")
}

/// The RGB images behind [`Dataset::synthetic`], class-major, with labels.
pub fn synthetic_images(spec: &SyntheticSpec) -> Vec<(Tensor, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for k in 0..spec.classes {
        for _ in 0..spec.per_class {
            out.push((gabor_image(k, spec.classes, spec.size, &mut rng), k));
        }
    }
    out
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        if spec.classes == 0 || spec.per_class == 0 || spec.size == 0 {
            return Err(input_err!("empty synthetic dataset {:?}", spec));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (img, k) in synthetic_images(spec) {
            data.extend(encode_latent(&img)?.into_data());
            labels.push(k);
        }
        let latents = Tensor::new([labels.len(), 4, spec.size, spec.size], data)?;
        Ok(Self { latents, labels, num_classes: spec.classes })
    }

    /// Read `root/<class>/*.{png,ppm}`; classes are subdirectories in name order.
    /// Images are center-cropped to square and resized to `size`.
    pub fn from_folder(root: &Path, size: usize) -> Result<Self> {
        if !root.is_dir() {
            return Err(input_err!("dataset folder {} not found", root.display()));
        }
        let mut classes: Vec<_> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        classes.sort();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (k, dir) in classes.iter().enumerate() {
            let mut files: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
                })
                .collect();
            files.sort();
            for f in files {
                let img = image::open(&f)?.to_rgb8();
                let side = img.width().min(img.height());
                let (x0, y0) = ((img.width() - side) / 2, (img.height() - side) / 2);
                let crop = image::imageops::crop_imm(&img, x0, y0, side, side).to_image();
                let resized =
                    image::imageops::resize(&crop, size as u32, size as u32, image::imageops::FilterType::Triangle);
                let rgb = rgb_to_tensor(&resized)?.map(|v| 2.0 * v - 1.0);
                data.extend(encode_latent(&rgb)?.into_data());
                labels.push(k);
            }
        }
        if labels.is_empty() {
            return Err(input_err!("no PNG/PPM images under {}", root.display()));
        }
        let latents = Tensor::new([labels.len(), 4, size, size], data)?;
        Ok(Self { latents, labels, num_classes: classes.len() })
    }

    /// Stack the examples at `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.latents.shape();
        let per = s[1] * s[2] * s[3];
        let mut out = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(input_err!("example {i} out of {}", self.len()));
            }
            out.extend_from_slice(&self.latents.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new([idx.len(), s[1], s[2], s[3]], out)?, labels))
    }

    /// Uniformly drawn batch (with replacement).
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = gabor_image(3, 10, 8, &mut rng);
        let back = decode_latent(&encode_latent(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-10);
    }

    #[test]
    fn synthetic_is_seeded_and_labeled() {
        let spec = SyntheticSpec { classes: 3, per_class: 2, size: 8, seed: 1 };
        let a = Dataset::synthetic(&spec).unwrap();
        assert_eq!(a, Dataset::synthetic(&spec).unwrap());
        assert_eq!(a.labels, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(a.latents.shape(), &[6, 4, 8, 8]);
        let (x, y) = a.batch(&[5, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 4, 8, 8]);
        assert_eq!(y, vec![2, 0]);
    }

    #[test]
    fn classes_differ_more_than_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mean = |k: usize, rng: &mut ChaCha8Rng| {
            let mut acc = Tensor::zeros([3, 16, 16]);
            for _ in 0..20 {
                acc.accumulate(&gabor_image(k, 8, 16, rng).map(f64::abs)).unwrap();
            }
            acc.scale(1.0 / 20.0)
        };
        let a1 = mean(0, &mut rng);
        let a2 = mean(0, &mut rng);
        let b = mean(4, &mut rng);
        assert!(a1.sub(&b).unwrap().l2_norm() > a1.sub(&a2).unwrap().l2_norm());
    }
}
