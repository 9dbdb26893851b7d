//! Spatially averaged channel activations `ā_j`, the middle-block
//! representation φ, and the sparsity, selectivity and stability statistics
//! built on them.

use ndnet::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_with, Dataset};
use crate::error::{invalid, LabError, Result};
use crate::seed::{derive_seed, rng_for};
use crate::stats::{cosine, median, pca_cumulative_variance};
use crate::unet::{Block, Probe, UNetModel};

/// A vector of per-channel spatial means at one probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprVector {
    pub values: Vec<f64>,
    pub probe: Probe,
    pub sigma: f64,
    pub n_draws: usize,
    pub source: Option<usize>,
}

/// Per-channel means of each `[C,H,W]` slice of a `[B,C,H,W]` map.
pub fn spatial_means(map: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (b, c, h, w) = map.dims4()?;
    let hw = h * w;
    Ok((0..b)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let plane = &map.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64
                })
                .collect()
        })
        .collect())
}

/// `ā` at `probe` for one noisy image (`[C,H,W]` or `[1,C,H,W]`), single realization.
pub fn abar(model: &UNetModel, x_sigma: &Tensor, probe: Probe) -> Result<ReprVector> {
    let batch = to_batch(x_sigma)?;
    if batch.shape()[0] != 1 {
        return invalid("abar takes a single image");
    }
    let map = model.activations(&batch, probe)?;
    Ok(ReprVector {
        values: spatial_means(&map)?.remove(0),
        probe,
        sigma: f64::NAN,
        n_draws: 1,
        source: None,
    })
}

fn to_batch(x: &Tensor) -> Result<Tensor> {
    match x.shape().len() {
        3 => crate::unet::as_batch(x),
        4 => Ok(x.clone()),
        _ => invalid(format!("expected an image [C,H,W] or batch [B,C,H,W], got {:?}", x.shape())),
    }
}

/// The noisy copies `x + σ z_d`, `d < n_draws`, that φ averages over.
pub fn phi_draws(x: &Tensor, sigma: f64, n_draws: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = rng_for(seed, "phi");
    (0..n_draws).map(|_| corrupt_with(x, sigma, &mut rng)).collect()
}

/// Monte-Carlo `E_z[ā(x + σz)]` at each probe, for one clean image `[C,H,W]`.
pub fn expected_abar(
    model: &UNetModel,
    x: &Tensor,
    sigma: f64,
    n_draws: usize,
    seed: u64,
    probes: &[Probe],
) -> Result<Vec<Vec<f64>>> {
    if n_draws == 0 {
        return invalid("n_draws must be at least 1");
    }
    if !(sigma >= 0.0) {
        return invalid(format!("noise level {sigma} must be nonnegative"));
    }
    let draws = phi_draws(x, sigma, n_draws, seed)?;
    let mut acc: Vec<Vec<f64>> = probes.iter().map(|p| vec![0.0; p.channels(model.config())]).collect();
    for chunk in draws.chunks(32) {
        let maps = model.activations_many(&Tensor::stack(chunk)?, probes)?;
        for (a, map) in acc.iter_mut().zip(&maps) {
            for v in spatial_means(map)? {
                for (s, x) in a.iter_mut().zip(v) {
                    *s += x;
                }
            }
        }
    }
    for a in acc.iter_mut() {
        for s in a.iter_mut() {
            *s /= n_draws as f64;
        }
    }
    Ok(acc)
}

/// `φ(x) = E_z[ā_M(x + σz)]` at the middle-block output.
pub fn phi(model: &UNetModel, x: &Tensor, sigma: f64, n_draws: usize, seed: u64) -> Result<ReprVector> {
    let probe = Probe::middle_output();
    let values = expected_abar(model, x, sigma, n_draws, seed, &[probe])?.remove(0);
    Ok(ReprVector {
        values,
        probe,
        sigma,
        n_draws,
        source: None,
    })
}

/// Seed used for dataset image `i`, so `phi_dataset(..)[i] == phi(x_i, image_seed(seed, i))`.
pub fn image_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &format!("image.{i}"))
}

/// φ for every image of a dataset.
pub fn phi_dataset(model: &UNetModel, data: &Dataset, sigma: f64, n_draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    data.images
        .iter()
        .enumerate()
        .map(|(i, x)| Ok(phi(model, x, sigma, n_draws, image_seed(seed, i))?.values))
        .collect()
}

/// `‖v‖₁² / (d·‖v‖₂²)` with `d = v.len()`.
pub fn participation_ratio(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return invalid("participation ratio of an empty vector");
    }
    if v.iter().any(|x| !(*x >= 0.0)) {
        return invalid("participation ratio needs a nonnegative vector");
    }
    let l1: f64 = v.iter().sum();
    let l2: f64 = v.iter().map(|x| x * x).sum();
    if l2 == 0.0 {
        return Err(LabError::Numeric("participation ratio of the zero vector is undefined".into()));
    }
    Ok(l1 * l1 / (v.len() as f64 * l2))
}

/// PR distribution at one probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHistogram {
    pub probe: Probe,
    pub channels: usize,
    pub prs: Vec<f64>,
    pub median: f64,
}

/// PR of `ā` (one noise realization per image) at every multi-channel,
/// nonnegative probe.
pub fn block_sparsity_profile(model: &UNetModel, data: &Dataset, sigma: f64, seed: u64) -> Result<Vec<ProbeHistogram>> {
    let probes: Vec<Probe> = Probe::all(model.config())
        .into_iter()
        .filter(|p| p.is_post_relu() && p.channels(model.config()) > 1)
        .collect();
    let mut prs: Vec<Vec<f64>> = vec![Vec::with_capacity(data.len()); probes.len()];
    let mut rng = rng_for(seed, "sparsity");
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let noisy = chunk
            .iter()
            .map(|&i| corrupt_with(&data.images[i], sigma, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let maps = model.activations_many(&Tensor::stack(&noisy)?, &probes)?;
        for (list, map) in prs.iter_mut().zip(&maps) {
            for v in spatial_means(map)? {
                list.push(participation_ratio(&v)?);
            }
        }
    }
    Ok(probes
        .into_iter()
        .zip(prs)
        .map(|(probe, prs)| ProbeHistogram {
            probe,
            channels: probe.channels(model.config()),
            median: median(&prs),
            prs,
        })
        .collect())
}

/// Channels with dataset-wide PR below this are labelled selective.
pub const SELECTIVE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectivityProfile {
    /// φ per image, `[image][channel]`.
    pub phis: Vec<Vec<f64>>,
    /// PR of `c(i) = (φ(x_1)[i], …, φ(x_n)[i])`; `None` for a channel that is
    /// zero on every image.
    pub pr: Vec<Option<f64>>,
    pub mean_activation: Vec<f64>,
    pub threshold: f64,
}

impl SelectivityProfile {
    pub fn from_phis(phis: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = phis.first() else {
            return invalid("selectivity needs at least one image");
        };
        let d = first.len();
        let n = phis.len() as f64;
        let mut pr = Vec::with_capacity(d);
        let mut mean_activation = Vec::with_capacity(d);
        for ch in 0..d {
            let column: Vec<f64> = phis.iter().map(|p| p[ch]).collect();
            mean_activation.push(column.iter().sum::<f64>() / n);
            pr.push(participation_ratio(&column).ok());
        }
        Ok(Self {
            phis,
            pr,
            mean_activation,
            threshold: SELECTIVE_THRESHOLD,
        })
    }

    pub fn is_selective(&self, channel: usize) -> bool {
        self.pr[channel].is_some_and(|p| p < self.threshold)
    }

    pub fn dead_channels(&self) -> usize {
        self.pr.iter().filter(|p| p.is_none()).count()
    }
}

pub fn channel_selectivity(
    model: &UNetModel,
    data: &Dataset,
    sigma: f64,
    n_draws: usize,
    seed: u64,
) -> Result<SelectivityProfile> {
    SelectivityProfile::from_phis(phi_dataset(model, data, sigma, n_draws, seed)?)
}

/// The `k` images with the largest `φ[channel]`, descending, ties by id.
pub fn top_activating_images(profile: &SelectivityProfile, channel: usize, k: usize) -> Result<Vec<usize>> {
    let n = profile.phis.len();
    if k > n {
        return invalid(format!("k = {k} exceeds the {n} images"));
    }
    if profile.phis.first().is_some_and(|p| channel >= p.len()) {
        return invalid(format!("channel {channel} out of range"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| {
        profile.phis[b][channel]
            .total_cmp(&profile.phis[a][channel])
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    Ok(ids)
}

/// Cosine of `φ_probe(x, σ_ref)` with `φ_probe(x, σ)` for each grid σ and probe
/// (`[probe][grid point]`). Every σ reuses the same noise draws `z_d`.
pub fn stability_curves(
    model: &UNetModel,
    x: &Tensor,
    sigma_ref: f64,
    sigma_grid: &[f64],
    n_draws: usize,
    probes: &[Probe],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let reference = expected_abar(model, x, sigma_ref, n_draws, seed, probes)?;
    let mut out = vec![Vec::with_capacity(sigma_grid.len()); probes.len()];
    for &s in sigma_grid {
        let here = expected_abar(model, x, s, n_draws, seed, probes)?;
        for (p, row) in out.iter_mut().enumerate() {
            row.push(cosine(&reference[p], &here[p]).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

pub fn stability_curve(
    model: &UNetModel,
    x: &Tensor,
    sigma_ref: f64,
    sigma_grid: &[f64],
    n_draws: usize,
    probe: Probe,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(stability_curves(model, x, sigma_ref, sigma_grid, n_draws, &[probe], seed)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStat {
    pub channel: usize,
    /// Counts of `φ[channel]` over the dataset in equal-width bins on `[0, max]`.
    pub histogram: Vec<usize>,
    pub histogram_max: f64,
    /// Mean over images of the PR of the channel's activation map.
    pub spatial_pr: Option<f64>,
    /// Cumulative explained variance of the vectorized maps across images.
    pub pca_cumulative: Option<Vec<f64>>,
}

/// Per-channel marginals, spatial sparsity and PCA at the middle-block output,
/// from one noise realization per image.
pub fn channel_stats(model: &UNetModel, data: &Dataset, sigma: f64, bins: usize, seed: u64) -> Result<Vec<ChannelStat>> {
    if bins == 0 {
        return invalid("histogram needs at least one bin");
    }
    let probe = Probe::output(Block::Middle);
    let d = probe.channels(model.config());
    let mut rng = rng_for(seed, "channel_stats");
    let mut maps: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(data.len()); d];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let noisy = chunk
            .iter()
            .map(|&i| corrupt_with(&data.images[i], sigma, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let act = model.activations(&Tensor::stack(&noisy)?, probe)?;
        let (b, c, h, w) = act.dims4()?;
        let hw = h * w;
        for i in 0..b {
            for (ch, list) in maps.iter_mut().enumerate().take(c) {
                let plane = &act.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                list.push(plane.iter().map(|&v| v as f64).collect());
            }
        }
    }
    let mut out = Vec::with_capacity(d);
    for (ch, list) in maps.iter().enumerate() {
        let means: Vec<f64> = list.iter().map(|m| m.iter().sum::<f64>() / m.len() as f64).collect();
        let max = means.iter().copied().fold(0.0, f64::max);
        let mut histogram = vec![0usize; bins];
        for &m in &means {
            let b = if max > 0.0 {
                ((m / max) * bins as f64).floor() as usize
            } else {
                0
            };
            histogram[b.min(bins - 1)] += 1;
        }
        let spatial: Vec<f64> = list.iter().filter_map(|m| participation_ratio(m).ok()).collect();
        out.push(ChannelStat {
            channel: ch,
            histogram,
            histogram_max: max,
            spatial_pr: (!spatial.is_empty()).then(|| spatial.iter().sum::<f64>() / spatial.len() as f64),
            pca_cumulative: pca_cumulative_variance(list).ok(),
        });
    }
    Ok(out)
}
