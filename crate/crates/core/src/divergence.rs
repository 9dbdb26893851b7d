//! A distance between the conditional densities `p(x|φ₁)` and `p(x|φ₂)`,
//! computed from conditional scores integrated over noise levels, and the
//! check that it tracks Euclidean distance between the φ's.

use std::cell::RefCell;
use std::collections::HashMap;

use ndnet::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SigmaRange;
use crate::error::{invalid, LabError, Result};
use crate::representation::phi;
use crate::sampler::{guidance_to_target, reconstruct, GuidanceConfig, Schedule};
use crate::seed::{derive_seed, rng_for};
use crate::stats::{quantile, spearman};
use crate::unet::{Denoiser, UNetModel};

/// Pairs with `‖Δφ‖²` below this are left out of the embedding fit.
pub const DEGENERACY_FLOOR: f64 = 1e-12;

pub const DEFAULT_GRID_POINTS: usize = 12;

/// Two conditional densities, each able to produce clean samples and to
/// evaluate its score `∇ log p_σ` at a noisy point.
pub trait ScorePair {
    /// Draws `count` clean samples from side `side ∈ {0, 1}`.
    fn draw(&self, side: usize, count: usize, seed: u64) -> Result<Vec<Tensor>>;

    /// `∇_x log p_{side,σ}(x_σ)`.
    fn score(&self, side: usize, x_sigma: &Tensor, sigma: f64) -> Result<Tensor>;

    /// A key identifying the side's density, so the randomness used for a side
    /// does not depend on whether it is listed first or second.
    fn side_key(&self, side: usize) -> u64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub samples_per_side: usize,
    /// Noise realizations per sample and noise level.
    pub noise_draws: usize,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        Self {
            samples_per_side: 4,
            noise_draws: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    /// Symmetrized `d²`.
    pub value: f64,
    /// `∫ E_{p_i}[‖∇log p₁ − ∇log p₂‖²] σ dσ` for `i = 1, 2`.
    pub one_sided: [f64; 2],
    pub sigma_grid: Vec<f64>,
    /// Per grid point, the symmetrized integrand `σ² E[…]` (weight for `d ln σ`).
    pub contributions: Vec<f64>,
    pub samples_per_side: usize,
    pub noise_draws: usize,
    pub stderr: f64,
}

/// Log-spaced grid of `n` levels spanning `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) || n < 2 {
        return invalid(format!("log grid needs 0 < lo < hi and n >= 2, got [{lo}, {hi}], n = {n}"));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    g[0] = lo;
    g[n - 1] = hi;
    Ok(g)
}

/// The default quadrature grid: 12 log-spaced levels over the training range.
pub fn default_sigma_grid(range: &SigmaRange) -> Vec<f64> {
    log_grid(range.sigma_min, range.sigma_max, DEFAULT_GRID_POINTS).expect("a valid range gives a valid grid")
}

/// Trapezoid rule in `ln σ` of `g(σ)` sampled on `grid`.
fn trapezoid_log(grid: &[f64], g: &[f64]) -> f64 {
    grid.windows(2)
        .zip(g.windows(2))
        .map(|(s, v)| 0.5 * (v[0] + v[1]) * (s[1].ln() - s[0].ln()))
        .sum()
}

/// Monte-Carlo estimate of the symmetrized score distance.
///
/// For each side, samples `x ~ p_i` are corrupted at every grid level with
/// the same noise draws, and `‖s₁(x_σ) − s₂(x_σ)‖²` is integrated against
/// `σ dσ = σ² d ln σ` by the trapezoid rule. Each side's randomness is keyed by
/// [`ScorePair::side_key`], so swapping the sides gives the same value exactly.
pub fn density_distance<S: ScorePair + ?Sized>(
    pair: &S,
    sigma_grid: &[f64],
    mc: &MonteCarlo,
    seed: u64,
) -> Result<DistanceEstimate> {
    if mc.samples_per_side < 2 {
        return invalid(format!(
            "need at least 2 samples per side for an error estimate, got {}",
            mc.samples_per_side
        ));
    }
    if mc.noise_draws == 0 {
        return invalid("need at least one noise draw");
    }
    if sigma_grid.len() < 2 || sigma_grid.iter().any(|s| !(*s > 0.0)) || sigma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("sigma grid must be positive, strictly increasing and have at least two points");
    }
    let mut one_sided = [0.0; 2];
    let mut variance = [0.0; 2];
    let mut integrands = [vec![0.0; sigma_grid.len()], vec![0.0; sigma_grid.len()]];
    let m = mc.samples_per_side as f64;
    for side in 0..2 {
        let side_seed = derive_seed(seed, &format!("side.{:016x}", pair.side_key(side)));
        let samples = pair.draw(side, mc.samples_per_side, derive_seed(side_seed, "draw"))?;
        let mut noise_rng = rng_for(side_seed, "noise");
        let mut per_sample = Vec::with_capacity(samples.len());
        for x in &samples {
            let noises: Vec<Vec<f32>> = (0..mc.noise_draws)
                .map(|_| (0..x.len()).map(|_| noise_rng.sample::<f32, _>(StandardNormal)).collect())
                .collect();
            let mut g = vec![0.0; sigma_grid.len()];
            for (k, &sigma) in sigma_grid.iter().enumerate() {
                for z in &noises {
                    let mut xs = x.clone();
                    xs.axpy(sigma as f32, &Tensor::new(x.shape().to_vec(), z.clone())?)?;
                    let s1 = pair.score(0, &xs, sigma)?;
                    let s2 = pair.score(1, &xs, sigma)?;
                    let diff: f64 = s1
                        .data()
                        .iter()
                        .zip(s2.data())
                        .map(|(a, b)| {
                            let d = *a as f64 - *b as f64;
                            d * d
                        })
                        .sum();
                    g[k] += sigma * sigma * diff / mc.noise_draws as f64;
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(LabError::Numeric(format!("non-finite score difference on side {side}")));
            }
            for (acc, v) in integrands[side].iter_mut().zip(&g) {
                *acc += v / m;
            }
            per_sample.push(trapezoid_log(sigma_grid, &g));
        }
        let mean = per_sample.iter().sum::<f64>() / m;
        let var = per_sample.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / (m - 1.0);
        one_sided[side] = mean;
        variance[side] = var / m;
    }
    let contributions = integrands[0].iter().zip(&integrands[1]).map(|(a, b)| a + b).collect();
    Ok(DistanceEstimate {
        value: one_sided[0] + one_sided[1],
        one_sided,
        sigma_grid: sigma_grid.to_vec(),
        contributions,
        samples_per_side: mc.samples_per_side,
        noise_draws: mc.noise_draws,
        stderr: (variance[0] + variance[1]).sqrt(),
    })
}

/// Two 1-D Gaussians `N(μ_i, v_i)` (as `[1]`-shaped tensors) with their exact
/// noisy scores `−(x − μ_i)/(v_i + σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPair {
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

impl GaussianPair {
    pub fn new(means: [f64; 2], variances: [f64; 2]) -> Result<Self> {
        if variances.iter().any(|v| !(*v > 0.0)) {
            return invalid("variances must be positive");
        }
        Ok(Self { means, variances })
    }

    /// Closed-form `KL(p_side ‖ p_other)` of the clean densities.
    pub fn kl(&self, side: usize) -> f64 {
        let (m0, v0) = (self.means[side], self.variances[side]);
        let (m1, v1) = (self.means[1 - side], self.variances[1 - side]);
        0.5 * ((v1 / v0).ln() + (v0 + (m0 - m1).powi(2)) / v1 - 1.0)
    }
}

impl ScorePair for GaussianPair {
    fn draw(&self, side: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
        let mut rng = rng_for(seed, "gaussian.draw");
        let sd = self.variances[side].sqrt();
        Ok((0..count)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                Tensor::scalar((self.means[side] + sd * z) as f32).reshape(&[1]).expect("one element")
            })
            .collect())
    }

    fn score(&self, side: usize, x_sigma: &Tensor, sigma: f64) -> Result<Tensor> {
        let (m, v) = (self.means[side], self.variances[side]);
        Ok(x_sigma.map(|x| (-(x as f64 - m) / (v + sigma * sigma)) as f32))
    }

    fn side_key(&self, side: usize) -> u64 {
        let mut h = Sha256::new();
        h.update(self.means[side].to_le_bytes());
        h.update(self.variances[side].to_le_bytes());
        digest_u64(h)
    }
}

fn digest_u64(h: Sha256) -> u64 {
    let d = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&d[..8]);
    u64::from_le_bytes(head)
}

/// SHA-256 based key of a tensor's shape and contents.
pub fn tensor_key(t: &Tensor) -> u64 {
    let mut h = Sha256::new();
    for s in t.shape() {
        h.update((*s as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    digest_u64(h)
}

/// `x̂_φ − x_σ`: the denoiser residual after guiding `x_σ` to the target
/// representation. Dividing by `σ²` gives the conditional score estimate.
pub fn conditional_score(
    model: &UNetModel,
    x_sigma: &Tensor,
    phi_target: &[f64],
    sigma: f64,
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return invalid(format!("conditional score needs σ > 0, got {sigma}"));
    }
    let guided = guidance_to_target(model, x_sigma, phi_target, guidance)?;
    let x = guided.x.clone().reshape(&batch_shape(x_sigma))?;
    // (x_g + f(x_g)) − x_σ, summed so that an unmoved x_g gives f(x_σ) exactly.
    let shift = guided.x.sub(x_sigma)?;
    Ok(model.residual(&x)?.reshape(x_sigma.shape())?.add(&shift)?)
}

fn batch_shape(x: &Tensor) -> Vec<usize> {
    if x.shape().len() == 3 {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        s
    } else {
        x.shape().to_vec()
    }
}

/// Settings for distances between the conditionals of two images' φ.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDistanceConfig {
    pub sigma_grid: Vec<f64>,
    pub mc: MonteCarlo,
    /// Schedule for drawing conditional samples.
    pub schedule: Schedule,
    pub guidance: GuidanceConfig,
    /// Noise draws averaged into each per-level target φ.
    pub phi_draws: usize,
}

/// The pair `p(x|φ(x₁))`, `p(x|φ(x₂))` realized with the trained model.
///
/// Samples come from stochastic reconstruction; the score at level σ is the
/// conditional residual toward `φ(x_i, σ)` divided by `σ²`.
pub struct ModelScores<'a> {
    model: &'a UNetModel,
    images: [Tensor; 2],
    config: &'a ModelDistanceConfig,
    seed: u64,
    targets: RefCell<HashMap<(usize, u64), Vec<f64>>>,
}

impl<'a> ModelScores<'a> {
    pub fn new(model: &'a UNetModel, x1: &Tensor, x2: &Tensor, config: &'a ModelDistanceConfig, seed: u64) -> Result<Self> {
        if x1.shape() != x2.shape() {
            return invalid("the two conditioners differ in shape");
        }
        Ok(Self {
            model,
            images: [x1.clone(), x2.clone()],
            config,
            seed,
            targets: RefCell::new(HashMap::new()),
        })
    }

    fn target(&self, side: usize, sigma: f64) -> Result<Vec<f64>> {
        let key = (side, sigma.to_bits());
        if let Some(t) = self.targets.borrow().get(&key) {
            return Ok(t.clone());
        }
        let seed = derive_seed(self.seed, &format!("target.{:016x}", self.side_key(side)));
        let t = phi(self.model, &self.images[side], sigma, self.config.phi_draws, seed)?.values;
        self.targets.borrow_mut().insert(key, t.clone());
        Ok(t)
    }
}

impl ScorePair for ModelScores<'_> {
    fn draw(&self, side: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
        (0..count)
            .map(|j| {
                let run = reconstruct(
                    self.model,
                    &self.images[side],
                    &self.config.schedule,
                    &self.config.guidance,
                    derive_seed(seed, &format!("sample.{j}")),
                )?;
                Ok(run.image.reshape(self.images[side].shape())?)
            })
            .collect()
    }

    fn score(&self, side: usize, x_sigma: &Tensor, sigma: f64) -> Result<Tensor> {
        let target = self.target(side, sigma)?;
        let r = conditional_score(self.model, x_sigma, &target, sigma, &self.config.guidance)?;
        Ok(r.scale((1.0 / (sigma * sigma)) as f32))
    }

    fn side_key(&self, side: usize) -> u64 {
        tensor_key(&self.images[side])
    }
}

/// One image pair in the embedding check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub id: usize,
    pub phi_dist_sq: f64,
    pub d2: f64,
    pub stderr: f64,
    /// `‖Δφ‖²` fell below the degeneracy floor.
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub pairs: Vec<PairRow>,
    /// `min d²/‖Δφ‖²` over included pairs.
    pub a: f64,
    /// `max d²/‖Δφ‖²` over included pairs.
    pub b: f64,
    pub ratio: f64,
    pub a_p05: f64,
    pub b_p95: f64,
    pub robust_ratio: f64,
    /// Spearman correlation of `‖Δφ‖²` and `d²` over included pairs.
    pub spearman: f64,
    pub excluded: usize,
}

pub const MIN_PAIRS: usize = 10;

/// Fits the embedding constants to precomputed `(‖Δφ‖², d², stderr)` rows.
pub fn embedding_report(rows: &[(f64, f64, f64)]) -> Result<EmbeddingReport> {
    if rows.len() < MIN_PAIRS {
        return invalid(format!("embedding check needs at least {MIN_PAIRS} pairs, got {}", rows.len()));
    }
    let pairs: Vec<PairRow> = rows
        .iter()
        .enumerate()
        .map(|(id, &(phi_dist_sq, d2, stderr))| PairRow {
            id,
            phi_dist_sq,
            d2,
            stderr,
            excluded: phi_dist_sq < DEGENERACY_FLOOR,
        })
        .collect();
    let kept: Vec<&PairRow> = pairs.iter().filter(|p| !p.excluded).collect();
    if kept.is_empty() {
        return Err(LabError::Numeric("every pair is below the degeneracy floor".into()));
    }
    let ratios: Vec<f64> = kept.iter().map(|p| p.d2 / p.phi_dist_sq).collect();
    let a = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let b = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a_p05 = quantile(&ratios, 0.05);
    let b_p95 = quantile(&ratios, 0.95);
    let xs: Vec<f64> = kept.iter().map(|p| p.phi_dist_sq).collect();
    let ys: Vec<f64> = kept.iter().map(|p| p.d2).collect();
    let rho = if kept.len() >= 2 { spearman(&xs, &ys).unwrap_or(f64::NAN) } else { f64::NAN };
    Ok(EmbeddingReport {
        excluded: pairs.len() - kept.len(),
        pairs,
        a,
        b,
        ratio: b / a,
        a_p05,
        b_p95,
        robust_ratio: b_p95 / a_p05,
        spearman: rho,
    })
}

/// Settings for [`embedding_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingConfig {
    pub distance: ModelDistanceConfig,
    /// Noise level and draws for the φ compared in `‖Δφ‖²`.
    pub phi_sigma: f64,
    pub phi_draws: usize,
}

/// Computes `‖φ(x₁) − φ(x₂)‖²` and `d²(p₁, p₂)` for every pair.
pub fn embedding_check(
    model: &UNetModel,
    pairs: &[(Tensor, Tensor)],
    config: &EmbeddingConfig,
    seed: u64,
) -> Result<EmbeddingReport> {
    if pairs.len() < MIN_PAIRS {
        return invalid(format!("embedding check needs at least {MIN_PAIRS} pairs, got {}", pairs.len()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (x1, x2) in pairs {
        let p1 = phi(model, x1, config.phi_sigma, config.phi_draws, derive_seed(seed, &format!("phi.{:016x}", tensor_key(x1))))?;
        let p2 = phi(model, x2, config.phi_sigma, config.phi_draws, derive_seed(seed, &format!("phi.{:016x}", tensor_key(x2))))?;
        let dphi: f64 = p1.values.iter().zip(&p2.values).map(|(a, b)| (a - b) * (a - b)).sum();
        if dphi < DEGENERACY_FLOOR {
            rows.push((dphi, 0.0, 0.0));
            continue;
        }
        let scores = ModelScores::new(model, x1, x2, &config.distance, seed)?;
        let est = density_distance(&scores, &config.distance.sigma_grid, &config.distance.mc, seed)?;
        rows.push((dphi, est.value, est.stderr));
    }
    embedding_report(&rows)
}

pub fn embedding_csv(report: &EmbeddingReport) -> String {
    let mut out = String::from("pair,phi_dist_sq,d2,stderr,phi_dist,d,excluded\n");
    for p in &report.pairs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.id,
            p.phi_dist_sq,
            p.d2,
            p.stderr,
            p.phi_dist_sq.sqrt(),
            p.d2.max(0.0).sqrt(),
            p.excluded
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_integrates_log_linear_exactly() {
        let g = log_grid(0.1, 10.0, 7).unwrap();
        let vals: Vec<f64> = g.iter().map(|s| s.ln()).collect();
        let exact = 0.5 * (10f64.ln().powi(2) - 0.1f64.ln().powi(2));
        assert!((trapezoid_log(&g, &vals) - exact).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_closed_form() {
        let p = GaussianPair::new([0.0, 1.0], [1.0, 1.0]).unwrap();
        assert!((p.kl(0) - 0.5).abs() < 1e-15);
        assert!((p.kl(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let rows = vec![(1.0, 1.0, 0.0); 9];
        assert!(embedding_report(&rows).is_err());
    }
}
