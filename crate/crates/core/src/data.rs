//! Synthetic texture datasets, the noise-level distribution and the additive
//! Gaussian corruption model.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndnet::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::seed::rng_for;

/// Ordered clean images in `[0,1]`, each `[C,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub class_names: Option<Vec<String>>,
    /// Sub-class tag per image; for gratings this is the orientation bucket.
    pub variants: Option<Vec<usize>>,
    /// Mean pixel value over the whole dataset.
    pub mean: f64,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Option<Vec<usize>>, class_names: Option<Vec<String>>) -> Result<Self> {
        let Some(first) = images.first() else {
            return invalid("dataset is empty");
        };
        if first.shape().len() != 3 {
            return invalid(format!("images must be [C,H,W], got {:?}", first.shape()));
        }
        if let Some(bad) = images.iter().position(|im| im.shape() != first.shape()) {
            return invalid(format!(
                "image {bad} has shape {:?}, expected {:?}",
                images[bad].shape(),
                first.shape()
            ));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return invalid(format!("{} labels for {} images", l.len(), images.len()));
            }
        }
        let total: f64 = images.iter().map(|im| im.data().iter().map(|&v| v as f64).sum::<f64>()).sum();
        let mean = total / (images.len() * first.len()) as f64;
        Ok(Self {
            images,
            labels,
            class_names,
            variants: None,
            mean,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[C,H,W]` of every image.
    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Stacks the selected images into `[B,C,H,W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Ok(Tensor::stack(&items)?)
    }

    /// Pixelwise mean image.
    pub fn mean_image(&self) -> Tensor {
        let mut acc = vec![0.0f64; self.images[0].len()];
        for im in &self.images {
            for (a, &v) in acc.iter_mut().zip(im.data()) {
                *a += v as f64;
            }
        }
        let n = self.images.len() as f64;
        Tensor::new(self.image_shape().to_vec(), acc.into_iter().map(|a| (a / n) as f32).collect())
            .expect("shape taken from an image")
    }

    /// A new dataset holding the selected images (labels and variants follow).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        let mut out = Self::new(images, labels, self.class_names.clone())?;
        out.variants = self.variants.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect());
        Ok(out)
    }
}

/// Generative families for synthetic textures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextureClass {
    /// Oriented sinusoid; orientation bucket, frequency and phase are random.
    Gratings,
    /// Square checkerboard with random period and offset.
    Checker,
    /// Sum of soft Gaussian bumps with random count, position and radius.
    Blobs,
    /// Constant level plus independent per-pixel speckle.
    Speckle,
}

impl TextureClass {
    pub const ALL: [TextureClass; 4] = [
        TextureClass::Gratings,
        TextureClass::Checker,
        TextureClass::Blobs,
        TextureClass::Speckle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureClass::Gratings => "gratings",
            TextureClass::Checker => "checker",
            TextureClass::Blobs => "blobs",
            TextureClass::Speckle => "speckle",
        }
    }
}

impl fmt::Display for TextureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextureClass {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        TextureClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| LabError::Invalid(format!("unknown texture class '{s}'")))
    }
}

/// Number of grating orientation buckets (0°, 45°, 90°, 135°).
pub const ORIENTATION_BUCKETS: usize = 4;

/// Generates `n` textures of `channels×size×size`, cycling through `classes`.
///
/// Image `i` draws from its own stream derived from `(seed, i)`, so any item
/// can be regenerated alone. For several channels each one gets a random gain
/// around the shared grayscale pattern.
pub fn gen_textures(n: usize, size: usize, channels: usize, classes: &[TextureClass], seed: u64) -> Result<Dataset> {
    if classes.is_empty() {
        return invalid("texture class list is empty");
    }
    if n == 0 || size == 0 || channels == 0 {
        return invalid("texture count, size and channels must be positive");
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut variants = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes.len();
        let mut rng = rng_for(seed, &format!("texture.{i}"));
        let (plane, variant) = render(classes[label], size, &mut rng);
        let mut data = Vec::with_capacity(channels * size * size);
        for c in 0..channels {
            let gain: f64 = if c == 0 && channels == 1 { 1.0 } else { rng.random_range(0.8..1.2) };
            data.extend(plane.iter().map(|&v| (v * gain).clamp(0.0, 1.0) as f32));
        }
        images.push(Tensor::new(vec![channels, size, size], data)?);
        labels.push(label);
        variants.push(variant);
    }
    let names = classes.iter().map(|c| c.name().to_string()).collect();
    let mut ds = Dataset::new(images, Some(labels), Some(names))?;
    ds.variants = Some(variants);
    Ok(ds)
}

fn render(class: TextureClass, size: usize, rng: &mut impl Rng) -> (Vec<f64>, usize) {
    let s = size as f64;
    let mut out = vec![0.0; size * size];
    let variant = match class {
        TextureClass::Gratings => {
            let bucket = rng.random_range(0..ORIENTATION_BUCKETS);
            let theta = bucket as f64 * PI / 4.0 + rng.random_range(-0.15..0.15);
            let freq = rng.random_range(0.1..0.22);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.3..0.45);
            let (c, sn) = (theta.cos(), theta.sin());
            for (i, v) in out.iter_mut().enumerate() {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                *v = 0.5 + amp * (2.0 * PI * freq * (x * c + y * sn) + phase).sin();
            }
            bucket
        }
        TextureClass::Checker => {
            let period = rng.random_range(2..=4usize);
            let (oy, ox) = (rng.random_range(0..2 * period), rng.random_range(0..2 * period));
            let lo = rng.random_range(0.05..0.3);
            let hi = rng.random_range(0.7..0.95);
            for (i, v) in out.iter_mut().enumerate() {
                let (y, x) = (i / size + oy, i % size + ox);
                *v = if (y / period + x / period) % 2 == 0 { lo } else { hi };
            }
            period
        }
        TextureClass::Blobs => {
            let count = rng.random_range(1..=3usize);
            let bg = rng.random_range(0.05..0.2);
            out.fill(bg);
            for _ in 0..count {
                let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
                let r = rng.random_range(0.1..0.25) * s;
                let a = rng.random_range(0.5..0.85);
                for (i, v) in out.iter_mut().enumerate() {
                    let (dy, dx) = ((i / size) as f64 - cy, (i % size) as f64 - cx);
                    *v += a * (-(dy * dy + dx * dx) / (2.0 * r * r)).exp();
                }
            }
            count
        }
        TextureClass::Speckle => {
            let level = rng.random_range(0.3..0.7);
            let spread = rng.random_range(0.1..0.2);
            for v in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = level + spread * z;
            }
            0
        }
    };
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (out, variant)
}

/// Noise-level support `[sigma_min, sigma_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRange {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl SigmaRange {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return invalid(format!("need 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"));
        }
        Ok(Self { sigma_min, sigma_max })
    }

    /// Inverse CDF of the density ∝ σ^(−1/2): `((√σmax − √σmin)·u + √σmin)²`.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        // Squaring the square root is not exact; pin the endpoints.
        if u <= 0.0 {
            return self.sigma_min;
        }
        if u >= 1.0 {
            return self.sigma_max;
        }
        let (a, b) = (self.sigma_min.sqrt(), self.sigma_max.sqrt());
        let r = (b - a) * u + a;
        r * r
    }

    /// `F(σ) = (√σ − √σmin)/(√σmax − √σmin)`, clamped to `[0,1]`.
    pub fn cdf(&self, sigma: f64) -> f64 {
        let (a, b) = (self.sigma_min.sqrt(), self.sigma_max.sqrt());
        ((sigma.max(0.0).sqrt() - a) / (b - a)).clamp(0.0, 1.0)
    }

    /// `E[σ²]` under the sampling density, used for the identity baseline.
    pub fn mean_sigma_sq(&self) -> f64 {
        // With r = √σ uniform on [a,b]: E[r^4] = (b^5 − a^5) / (5(b − a)).
        let (a, b) = (self.sigma_min.sqrt(), self.sigma_max.sqrt());
        (b.powi(5) - a.powi(5)) / (5.0 * (b - a))
    }
}

impl Default for SigmaRange {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 1.0,
        }
    }
}

/// Draws σ with density ∝ σ^(−1/2) on the range.
pub fn sample_sigma(range: &SigmaRange, rng: &mut impl Rng) -> f64 {
    range.inverse_cdf(rng.random::<f64>())
}

/// Single draw from a seed.
pub fn sample_sigma_seeded(range: &SigmaRange, seed: u64) -> f64 {
    sample_sigma(range, &mut rng_for(seed, "sigma"))
}

/// A tensor of i.i.d. standard normals.
pub fn gaussian_like(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// `x + σ·z` with `z` drawn from `rng`. Nothing is clipped.
pub fn corrupt_with(x: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return invalid(format!("noise level {sigma} must be nonnegative"));
    }
    let z = gaussian_like(x.shape(), rng);
    let mut out = x.clone();
    out.axpy(sigma as f32, &z)?;
    Ok(out)
}

/// `x + σ·z` with the noise stream fixed by `seed`.
pub fn corrupt(x: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    corrupt_with(x, sigma, &mut rng_for(seed, "corrupt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_cdf_endpoints_and_median() {
        let r = SigmaRange::new(0.01, 1.0).unwrap();
        assert_eq!(r.inverse_cdf(0.0), 0.01);
        assert_eq!(r.inverse_cdf(1.0), 1.0);
        assert!((r.inverse_cdf(0.5) - 0.3025).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32 / 16.0);
        assert_eq!(corrupt(&x, 0.0, 3).unwrap(), x);
        assert!(corrupt(&x, -1.0, 3).is_err());
    }

    #[test]
    fn bad_ranges_are_rejected() {
        assert!(SigmaRange::new(0.0, 1.0).is_err());
        assert!(SigmaRange::new(0.5, 0.5).is_err());
        assert!(SigmaRange::new(0.1, f64::INFINITY).is_err());
    }
}
