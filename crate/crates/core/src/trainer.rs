//! Denoising training with Adam, step learning-rate decay, CSV loss logs and
//! checkpoints.
//!
//! The per-image loss is `‖f(x_σ) + σz‖²` (summed over pixels), which is the
//! squared error between the predicted residual and the true one, `x − x_σ = −σz`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndnet::{Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_with, sample_sigma, Dataset, SigmaRange};
use crate::error::{invalid, LabError, Result};
use crate::seed::rng_for;
use crate::unet::{Denoiser, Depth, UNetConfig, UNetModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, hp: &AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return invalid(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return invalid(format!(
                "adam_step: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv as f64 / c1;
            let vhat = *vv as f64 / c2;
            *pv -= (lr * mhat / (vhat.sqrt() + hp.eps)) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub sigma_range: SigmaRange,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr_init: 1e-3,
            lr_decay_factor: 2.0,
            lr_decay_every: 100,
            sigma_range: SigmaRange::default(),
            seed: 0,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return invalid("epochs, batch size and decay interval must be positive");
        }
        if !(self.lr_init > 0.0) || !(self.lr_decay_factor >= 1.0) {
            return invalid("need lr_init > 0 and lr_decay_factor >= 1");
        }
        SigmaRange::new(self.sigma_range.sigma_min, self.sigma_range.sigma_max)?;
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_init / self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: AdamState,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(model: &UNetModel) -> Self {
        Self {
            epochs_done: 0,
            adam: AdamState::new(model.parameters()),
            log: Vec::new(),
        }
    }
}

/// Fixed corruptions of a held-out set so every epoch is scored on the same noise.
pub struct HeldOut {
    pub noisy: Tensor,
    pub target: Tensor,
    pub sigmas: Vec<f64>,
}

impl HeldOut {
    pub fn new(data: &Dataset, range: &SigmaRange, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "heldout");
        let mut noisy = Vec::with_capacity(data.len());
        let mut target = Vec::with_capacity(data.len());
        let mut sigmas = Vec::with_capacity(data.len());
        for im in &data.images {
            let s = sample_sigma(range, &mut rng);
            let xs = corrupt_with(im, s, &mut rng)?;
            target.push(im.sub(&xs)?);
            noisy.push(xs);
            sigmas.push(s);
        }
        Ok(Self {
            noisy: Tensor::stack(&noisy)?,
            target: Tensor::stack(&target)?,
            sigmas,
        })
    }

    /// Mean per-image `‖f(x_σ) − (x − x_σ)‖²`.
    pub fn loss(&self, model: &impl Denoiser) -> Result<f64> {
        let n = self.sigmas.len();
        let mut total = 0.0;
        for start in (0..n).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
            let xs = select(&self.noisy, &idx)?;
            let tg = select(&self.target, &idx)?;
            let r = model.residual(&xs)?;
            total += r.data().iter().zip(tg.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
        Ok(total / n as f64)
    }

    /// Identity-estimator loss `mean ‖x − x_σ‖²`.
    pub fn identity_loss(&self) -> f64 {
        self.target.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / self.sigmas.len() as f64
    }
}

fn select(batch: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let items = idx.iter().map(|&i| batch.index_axis0(i)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Tensor::stack(&items)?)
}

/// Gradient of the batch-mean loss and the mean loss itself.
pub fn loss_and_grad(model: &UNetModel, noisy: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let batch = noisy.shape()[0];
    let mut tape = Tape::<f32>::new();
    let params = model.bind(&mut tape, true);
    let x = tape.constant(noisy.clone());
    let t = tape.constant(target.clone());
    let trace = model.trace(&mut tape, &params, x, Depth::Full)?;
    let diff = tape.sub(trace.residual.expect("full depth"), t)?;
    let sq = tape.sum_squares(diff);
    let loss = tape.scale(sq, 1.0 / batch as f32);
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    let g = params
        .iter()
        .zip(model.parameters())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, g))
}

/// Trains from `state.epochs_done` up to `config.epochs`.
///
/// Epoch `e` draws its shuffle, noise levels and noise from a stream derived
/// from `(seed, e)`, so a resumed run continues exactly as an uninterrupted one.
pub fn train(
    model: &mut UNetModel,
    data: &Dataset,
    heldout: Option<&HeldOut>,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return invalid("training set is empty");
    }
    let cfg = model.config();
    let want = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if data.image_shape() != want {
        return invalid(format!(
            "dataset images are {:?}, model expects {:?}",
            data.image_shape(),
            want
        ));
    }
    while state.epochs_done < config.epochs {
        let epoch = state.epochs_done;
        let lr = config.lr_at(epoch);
        let mut rng = rng_for(config.seed, &format!("train.epoch.{epoch}"));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut noisy = Vec::with_capacity(chunk.len());
            let mut target = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = sample_sigma(&config.sigma_range, &mut rng);
                let xs = corrupt_with(&data.images[i], s, &mut rng)?;
                target.push(data.images[i].sub(&xs)?);
                noisy.push(xs);
            }
            let (loss, grads) = loss_and_grad(model, &Tensor::stack(&noisy)?, &Tensor::stack(&target)?)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(LabError::Numeric(format!(
                    "non-finite loss or gradient at epoch {}, batch {b} (loss {loss})",
                    epoch + 1
                )));
            }
            total += loss * chunk.len() as f64;
            adam_step(model.parameters_mut(), &grads, &mut state.adam, lr, &config.adam)?;
        }
        let heldout_loss = heldout.map(|h| h.loss(model)).transpose()?;
        state.log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: total / data.len() as f64,
            heldout_loss,
        });
        state.epochs_done += 1;
    }
    Ok(())
}

/// `epoch,lr,train_loss,heldout_loss` with a header row.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,heldout_loss\n");
    for e in log {
        let held = e.heldout_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.train_loss, held));
    }
    out
}

/// Fraction of 10-epoch moving-average windows that rise above their predecessor.
pub fn moving_average_violations(log: &[EpochLog], window: usize) -> f64 {
    if log.len() <= window {
        return 0.0;
    }
    let avgs: Vec<f64> = log
        .windows(window)
        .map(|w| w.iter().map(|e| e.train_loss).sum::<f64>() / window as f64)
        .collect();
    let rises = avgs.windows(2).filter(|p| p[1] > p[0]).count();
    rises as f64 / (avgs.len() - 1) as f64
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNETLAB\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in 4-byte elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: UNetConfig,
    tensors: Vec<TensorEntry>,
    adam_step: u64,
    adam: Option<AdamParams>,
    epochs_done: usize,
    loss_history: Vec<EpochLog>,
    train_config: Option<TrainConfig>,
}

/// A model with the state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UNetModel,
    pub state: TrainState,
    pub train_config: Option<TrainConfig>,
}

/// Layout: 8 magic bytes, a little-endian `u64` header length, the JSON
/// header, then every tensor as little-endian `f32` in header order
/// (parameters, Adam first moments `m.*`, second moments `v.*`).
pub fn encode_checkpoint(model: &UNetModel, state: &TrainState, train_config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<&Tensor> = Vec::new();
    let mut offset = 0;
    let groups: [(&str, &[Tensor]); 3] = [("", model.parameters()), ("m.", &state.adam.m), ("v.", &state.adam.v)];
    for (prefix, list) in groups {
        if list.len() != model.parameters().len() {
            return invalid("optimizer state does not match the model");
        }
        for (name, t) in model.parameter_names().iter().zip(list) {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            payload.push(t);
        }
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        tensors,
        adam_step: state.adam.step,
        adam: train_config.map(|c| c.adam),
        epochs_done: state.epochs_done,
        loss_history: state.log.clone(),
        train_config: train_config.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| LabError::Invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| LabError::format(origin, msg);
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| fail("header truncated".into()))?;
    let version: serde_json::Value = serde_json::from_slice(body).map_err(|e| fail(format!("bad header: {e}")))?;
    let found = version.get("format_version").and_then(|v| v.as_u64());
    if found != Some(CHECKPOINT_VERSION as u64) {
        return Err(fail(format!(
            "format version {found:?} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header: Header = serde_json::from_slice(body).map_err(|e| fail(format!("bad header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * total {
        return Err(fail(format!(
            "payload is {} bytes, header describes {}",
            payload.len(),
            4 * total
        )));
    }
    let mut model = UNetModel::zeroed(header.config.clone())?;
    let n = model.parameters().len();
    if header.tensors.len() != 3 * n {
        return Err(fail(format!("expected {} tensors, found {}", 3 * n, header.tensors.len())));
    }
    let mut tensors = Vec::with_capacity(3 * n);
    for (i, entry) in header.tensors.iter().enumerate() {
        let base = &model.parameter_names()[i % n];
        let prefix = ["", "m.", "v."][i / n];
        if entry.name != format!("{prefix}{base}") {
            return Err(fail(format!("unexpected tensor '{}' at position {i}", entry.name)));
        }
        let len: usize = entry.shape.iter().product();
        let raw = payload
            .get(4 * entry.offset..4 * (entry.offset + len))
            .ok_or_else(|| fail(format!("tensor '{}' lies outside the payload", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data).map_err(|e| fail(e.to_string()))?);
    }
    let v = tensors.split_off(2 * n);
    let m = tensors.split_off(n);
    model.set_parameters(tensors).map_err(|e| fail(e.to_string()))?;
    Ok(Checkpoint {
        model,
        state: TrainState {
            epochs_done: header.epochs_done,
            adam: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            log: header.loss_history,
        },
        train_config: header.train_config,
    })
}

pub fn save_checkpoint(path: &Path, model: &UNetModel, state: &TrainState, train_config: Option<&TrainConfig>) -> Result<()> {
    let bytes = encode_checkpoint(model, state, train_config)?;
    let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
