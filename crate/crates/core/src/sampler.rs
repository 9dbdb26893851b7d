//! Reverse-diffusion sampling with a blind denoiser, and stochastic
//! reconstruction guided by the model's own middle-block representation.

use std::fmt;
use std::str::FromStr;

use ndnet::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_with, gaussian_like, SigmaRange};
use crate::error::{invalid, LabError, Result};
use crate::seed::rng_for;
use crate::unet::{Denoiser, Depth, UNetModel};

/// How the score step moves the sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreStep {
    /// `x ← x + f(x) + σ_{t−1} z`: full denoising move, then fresh noise.
    /// Shrinks the sample variance toward half the prior's as steps get finer.
    Full,
    /// `x ← x + h f(x) + σ_{t−1}√h z` with `h = 1 − σ_{t−1}²/σ_t²`, the
    /// variance-exact ancestral step for a Gaussian prior in the small-step limit.
    #[default]
    Ancestral,
}

impl fmt::Display for ScoreStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreStep::Full => "full",
            ScoreStep::Ancestral => "ancestral",
        })
    }
}

impl FromStr for ScoreStep {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ScoreStep::Full),
            "ancestral" => Ok(ScoreStep::Ancestral),
            _ => invalid(format!("unknown score step '{s}' (expected full or ancestral)")),
        }
    }
}

/// Noise levels `σ_T > … > σ_0 ≥ 0` and the mean of the initial draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    sigmas: Vec<f64>,
    mean: Option<Tensor>,
    step: ScoreStep,
}

impl Schedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return invalid("a schedule needs at least two noise levels");
        }
        if sigmas.iter().any(|s| !s.is_finite()) || sigmas[sigmas.len() - 1] < 0.0 {
            return invalid("schedule noise levels must be finite and nonnegative");
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return invalid("schedule must be strictly decreasing");
        }
        Ok(Self {
            sigmas,
            mean: None,
            step: ScoreStep::Full,
        })
    }

    /// `T` geometric levels from `sigma_max` down to `sigma_min`.
    pub fn geometric(sigma_max: f64, sigma_min: f64, t: usize) -> Result<Self> {
        if !(sigma_max > sigma_min && sigma_min > 0.0 && sigma_max.is_finite()) {
            return invalid(format!("need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}"));
        }
        if t < 2 {
            return invalid("a geometric schedule needs T >= 2");
        }
        let ratio = (sigma_min / sigma_max).powf(1.0 / (t - 1) as f64);
        let mut sigmas: Vec<f64> = (0..t).map(|i| sigma_max * ratio.powi(i as i32)).collect();
        sigmas[t - 1] = sigma_min;
        Self::new(sigmas)
    }

    /// Mean `m` of the initial draw `x_T ~ N(m, σ_T² Id)`; zero when unset.
    pub fn with_mean(mut self, mean: Tensor) -> Self {
        self.mean = Some(mean);
        self
    }

    pub fn with_step(mut self, step: ScoreStep) -> Self {
        self.step = step;
        self
    }

    /// Levels in the order they are visited, largest first.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn mean(&self) -> Option<&Tensor> {
        self.mean.as_ref()
    }

    pub fn score_step(&self) -> ScoreStep {
        self.step
    }

    /// Number of score steps before the final noiseless denoise.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// Errors when `σ_T` lies outside the levels the model was trained on.
    pub fn check_range(&self, range: &SigmaRange) -> Result<()> {
        let top = self.sigmas[0];
        if top > range.sigma_max * (1.0 + 1e-12) || top < range.sigma_min {
            return invalid(format!(
                "schedule starts at {top}, outside the training range [{}, {}]",
                range.sigma_min, range.sigma_max
            ));
        }
        Ok(())
    }
}

/// Geometric schedule `σ_t = σ_max·r^(T−t)`, `r = (σ_min/σ_max)^(1/(T−1))`.
pub fn make_schedule(sigma_max: f64, sigma_min: f64, t: usize) -> Result<Schedule> {
    Schedule::geometric(sigma_max, sigma_min, t)
}

/// Blind noise estimate `‖f(x)‖/√n` for a single image or a batch.
pub fn estimate_sigma<D: Denoiser + ?Sized>(denoiser: &D, x: &Tensor) -> Result<f64> {
    let batch = batched(x)?;
    residual_sigma(&denoiser.residual(&batch)?)
}

fn residual_sigma(residual: &Tensor) -> Result<f64> {
    if residual.is_empty() {
        return invalid("empty residual");
    }
    Ok((residual.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>() / residual.len() as f64).sqrt())
}

fn batched(x: &Tensor) -> Result<Tensor> {
    match x.shape().len() {
        3 => crate::unet::as_batch(x),
        4 => Ok(x.clone()),
        _ => invalid(format!("expected [C,H,W] or [B,C,H,W], got {:?}", x.shape())),
    }
}

/// One row of the per-run trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub sigma: f64,
    /// Guidance loss after matching; `None` when sampling unconditionally.
    pub guidance_loss: Option<f64>,
    pub guidance_iterations: usize,
    /// `‖f(x_t)‖/√n` at the score step.
    pub sigma_hat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun {
    pub image: Tensor,
    pub trajectory: Vec<TrajectoryStep>,
}

pub fn trajectory_csv(log: &[TrajectoryStep]) -> String {
    let mut out = String::from("step,sigma,guidance_loss,guidance_iterations,sigma_hat\n");
    for r in log {
        let loss = r.guidance_loss.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.sigma, loss, r.guidance_iterations, r.sigma_hat
        ));
    }
    out
}

/// Draws one sample (or a batch) with the schedule's score steps.
///
/// `shape` is the denoiser input shape. The initial draw uses the stream
/// `sample.init`, the per-step noise `sample.noise`.
pub fn sample_unconditional<D: Denoiser + ?Sized>(
    denoiser: &D,
    shape: &[usize],
    schedule: &Schedule,
    seed: u64,
) -> Result<SampleRun> {
    run_chain(denoiser, shape, schedule, seed, |_, _, _| Ok(None))
}

fn run_chain<D: Denoiser + ?Sized>(
    denoiser: &D,
    shape: &[usize],
    schedule: &Schedule,
    seed: u64,
    mut guide: impl FnMut(usize, f64, &Tensor) -> Result<Option<GuidanceOutcome>>,
) -> Result<SampleRun> {
    let sig = schedule.sigmas();
    let mut init_rng = rng_for(seed, "sample.init");
    let mut noise_rng = rng_for(seed, "sample.noise");
    let mut x = initial_mean(schedule, shape)?;
    x.axpy(sig[0] as f32, &gaussian_like(shape, &mut init_rng))?;
    let mut trajectory = Vec::with_capacity(sig.len());
    for t in 0..schedule.steps() {
        let (sigma, next) = (sig[t], sig[t + 1]);
        let guided = guide(t, sigma, &x)?;
        let (loss, iters) = match guided {
            Some(g) => {
                x = g.x;
                (Some(g.loss), g.iterations)
            }
            None => (None, 0),
        };
        let f = denoiser.residual(&x)?;
        let z = gaussian_like(shape, &mut noise_rng);
        let h = match schedule.score_step() {
            ScoreStep::Full => 1.0,
            ScoreStep::Ancestral if sigma > 0.0 => 1.0 - (next * next) / (sigma * sigma),
            ScoreStep::Ancestral => 1.0,
        };
        x.axpy(h as f32, &f)?;
        x.axpy((next * h.sqrt()) as f32, &z)?;
        if !x.all_finite() {
            return Err(LabError::Numeric(format!("sampler state became non-finite at step {t} (σ = {sigma})")));
        }
        trajectory.push(TrajectoryStep {
            step: t,
            sigma,
            guidance_loss: loss,
            guidance_iterations: iters,
            sigma_hat: residual_sigma(&f)?,
        });
    }
    let t = schedule.steps();
    let f = denoiser.residual(&x)?;
    x = x.add(&f)?;
    if !x.all_finite() {
        return Err(LabError::Numeric(format!("sampler state became non-finite at the final denoise (step {t})")));
    }
    trajectory.push(TrajectoryStep {
        step: t,
        sigma: sig[t],
        guidance_loss: None,
        guidance_iterations: 0,
        sigma_hat: residual_sigma(&f)?,
    });
    Ok(SampleRun { image: x, trajectory })
}

fn initial_mean(schedule: &Schedule, shape: &[usize]) -> Result<Tensor> {
    let Some(m) = schedule.mean() else {
        return Ok(Tensor::zeros(shape));
    };
    if m.shape() == shape {
        return Ok(m.clone());
    }
    if shape.len() == m.shape().len() + 1 && &shape[1..] == m.shape() {
        return Ok(Tensor::stack(&vec![m.clone(); shape[0]])?);
    }
    invalid(format!("mean shape {:?} does not fit sample shape {shape:?}", m.shape()))
}

/// Inner matching loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lr: f64,
    pub max_iterations: usize,
    /// Stop once `L ≤ tolerance·‖φ(x_t^c)‖²`.
    pub tolerance: f64,
    /// Conditioner noise draws averaged into the target representation.
    pub n_draws: usize,
    /// Reuse one conditioner noise draw (rescaled) at every step instead of a fresh one.
    pub fixed_conditioner_noise: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            max_iterations: 50,
            tolerance: 1e-3,
            n_draws: 1,
            fixed_conditioner_noise: false,
        }
    }
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        Self {
            max_iterations: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("guidance learning rate must be positive, got {}", self.lr));
        }
        if !(self.tolerance > 0.0) {
            return invalid(format!("guidance tolerance must be positive, got {}", self.tolerance));
        }
        if self.n_draws == 0 {
            return invalid("guidance needs at least one conditioner draw");
        }
        Ok(())
    }
}

/// `‖ā_M(x) − target‖²` on `tape`, for a batch of one.
pub fn guidance_loss<T: Scalar>(
    model: &UNetModel,
    tape: &mut Tape<T>,
    params: &[Var],
    x: Var,
    target: &[f64],
) -> Result<Var> {
    let trace = model.trace(tape, params, x, Depth::Middle)?;
    let means = tape.spatial_mean(trace.middle())?;
    let shape = tape.value(means).shape().to_vec();
    if shape != [1, target.len()] {
        return invalid(format!("target has {} channels, representation is {shape:?}", target.len()));
    }
    let t = tape.constant(Tensor::new(shape, target.iter().map(|&v| T::of(v)).collect())?);
    let diff = tape.sub(means, t)?;
    Ok(tape.sum_squares(diff))
}

/// Single-realization representation `ā_M(x)` used inside guidance.
pub fn guidance_representation(model: &UNetModel, x: &Tensor) -> Result<Vec<f64>> {
    let batch = batched(x)?;
    let map = model.activations(&batch, crate::unet::Probe::middle_output())?;
    let mut rows = crate::representation::spatial_means(&map)?;
    if rows.len() != 1 {
        return invalid("guidance works on one image at a time");
    }
    Ok(rows.remove(0))
}

struct Evaluation {
    loss: f64,
    tape: Tape<f32>,
    x: Var,
    out: Var,
}

fn evaluate(model: &UNetModel, x: &Tensor, target: &[f64]) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let out = guidance_loss(model, &mut tape, &params, xv, target)?;
    let loss = tape.value(out).item() as f64;
    Ok(Evaluation { loss, tape, x: xv, out })
}

fn gradient(e: &Evaluation) -> Result<Tensor> {
    let g = e
        .tape
        .backward(e.out)?
        .take(e.x)
        .unwrap_or_else(|| Tensor::zeros(e.tape.value(e.x).shape()));
    if !g.all_finite() {
        return Err(LabError::Numeric("guidance gradient is non-finite".into()));
    }
    Ok(g)
}

/// Loss and input gradient of `‖ā_M(x) − target‖²`.
pub fn guidance_loss_and_grad(model: &UNetModel, x: &Tensor, target: &[f64]) -> Result<(f64, Tensor)> {
    let e = evaluate(model, &batched(x)?, target)?;
    let g = gradient(&e)?.reshape(x.shape())?;
    Ok((e.loss, g))
}

/// One plain gradient step `x − η∇L`; returns the new point and the losses
/// before and after.
pub fn descent_step(model: &UNetModel, x: &Tensor, target: &[f64], lr: f64) -> Result<(Tensor, f64, f64)> {
    let (before, g) = guidance_loss_and_grad(model, x, target)?;
    let mut next = x.clone();
    next.axpy(-lr as f32, &g)?;
    let after = evaluate(model, &batched(&next)?, target)?.loss;
    Ok((next, before, after))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceOutcome {
    pub x: Tensor,
    pub initial_loss: f64,
    pub loss: f64,
    /// Inner iterations spent, accepted or rejected.
    pub iterations: usize,
    pub rejected: usize,
    pub final_lr: f64,
    pub converged: bool,
}

/// Gradient descent of `x_t` toward `φ(x_t^c)`.
pub fn guidance_step(model: &UNetModel, x_t: &Tensor, x_c_t: &Tensor, config: &GuidanceConfig) -> Result<GuidanceOutcome> {
    let target = guidance_representation(model, x_c_t)?;
    guidance_to_target(model, x_t, &target, config)
}

/// Gradient descent on `L(x) = ‖ā_M(x) − target‖²` with step halving on any
/// increase, until `L ≤ ε_rel‖target‖²` or the iteration budget runs out.
pub fn guidance_to_target(model: &UNetModel, x_t: &Tensor, target: &[f64], config: &GuidanceConfig) -> Result<GuidanceOutcome> {
    config.validate()?;
    let shape = x_t.shape().to_vec();
    let mut x = batched(x_t)?;
    let goal = config.tolerance * target.iter().map(|v| v * v).sum::<f64>();
    let mut current = evaluate(model, &x, target)?;
    let initial = current.loss;
    if !initial.is_finite() {
        return Err(LabError::Numeric("guidance loss is non-finite at the start".into()));
    }
    let mut outcome = GuidanceOutcome {
        x: x_t.clone(),
        initial_loss: initial,
        loss: initial,
        iterations: 0,
        rejected: 0,
        final_lr: config.lr,
        converged: initial <= goal,
    };
    if outcome.converged || config.max_iterations == 0 {
        return Ok(outcome);
    }
    let mut lr = config.lr;
    let mut grad = gradient(&current)?;
    for _ in 0..config.max_iterations {
        outcome.iterations += 1;
        let mut candidate = x.clone();
        candidate.axpy(-lr as f32, &grad)?;
        let next = evaluate(model, &candidate, target)?;
        if !next.loss.is_finite() {
            return Err(LabError::Numeric(format!(
                "guidance loss became non-finite after {} iterations",
                outcome.iterations
            )));
        }
        if next.loss > current.loss {
            outcome.rejected += 1;
            lr *= 0.5;
            continue;
        }
        x = candidate;
        current = next;
        if current.loss <= goal {
            outcome.converged = true;
            break;
        }
        grad = gradient(&current)?;
    }
    if current.loss > 10.0 * initial {
        return Err(LabError::Numeric(format!(
            "guidance diverged: loss {} exceeds ten times the initial {initial}",
            current.loss
        )));
    }
    outcome.x = x.reshape(&shape)?;
    outcome.loss = current.loss;
    outcome.final_lr = lr;
    Ok(outcome)
}

/// Stochastic reconstruction: alternates guidance toward the representation of
/// the noisy conditioner with score steps.
///
/// The conditioner noise uses its own stream (`reconstruct.conditioner`), so
/// with guidance disabled the result equals [`sample_unconditional`] for the
/// same seed, bit for bit.
pub fn reconstruct(
    model: &UNetModel,
    conditioner: &Tensor,
    schedule: &Schedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<SampleRun> {
    guidance.validate()?;
    let cond = batched(conditioner)?;
    if cond.shape()[0] != 1 {
        return invalid("reconstruct takes a single conditioner image");
    }
    let shape = cond.shape().to_vec();
    let mut cond_rng = rng_for(seed, "reconstruct.conditioner");
    let fixed: Vec<Tensor> = if guidance.fixed_conditioner_noise {
        (0..guidance.n_draws).map(|_| gaussian_like(&shape, &mut cond_rng)).collect()
    } else {
        Vec::new()
    };
    let mut reference: Option<f64> = None;
    let guide = |t: usize, sigma: f64, x: &Tensor| -> Result<Option<GuidanceOutcome>> {
        if guidance.max_iterations == 0 {
            return Ok(None);
        }
        let mut target = vec![0.0; model.config().middle_channels()];
        for d in 0..guidance.n_draws {
            let noisy = if guidance.fixed_conditioner_noise {
                let mut c = cond.clone();
                c.axpy(sigma as f32, &fixed[d])?;
                c
            } else {
                corrupt_with(&cond, sigma, &mut cond_rng)?
            };
            for (acc, v) in target.iter_mut().zip(guidance_representation(model, &noisy)?) {
                *acc += v / guidance.n_draws as f64;
            }
        }
        let out = guidance_to_target(model, x, &target, guidance)?;
        let first = *reference.get_or_insert(out.initial_loss);
        if out.loss > 10.0 * first.max(f64::MIN_POSITIVE) {
            return Err(LabError::Numeric(format!(
                "guidance diverged at step {t} (σ = {sigma}): loss {} vs initial {first}",
                out.loss
            )));
        }
        Ok(Some(out))
    };
    run_chain(model, &shape, schedule, seed, guide)
}

/// `σ̂` before and after one guidance step at a single noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub sigma_hat_pre: f64,
    pub sigma_hat_post: f64,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub iterations: usize,
}

impl NoiseRow {
    pub fn relative_change(&self) -> f64 {
        (self.sigma_hat_post - self.sigma_hat_pre).abs() / self.sigma_hat_pre
    }
}

/// For each σ, corrupts `start` and `conditioner` independently, matches the
/// former to the latter's representation and re-estimates the noise level.
pub fn verify_noise_preservation(
    model: &UNetModel,
    start: &Tensor,
    conditioner: &Tensor,
    sigmas: &[f64],
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    let mut rng = rng_for(seed, "noise_preservation");
    sigmas
        .iter()
        .map(|&sigma| {
            let x_t = corrupt_with(&batched(start)?, sigma, &mut rng)?;
            let x_c = corrupt_with(&batched(conditioner)?, sigma, &mut rng)?;
            let pre = estimate_sigma(model, &x_t)?;
            let out = guidance_step(model, &x_t, &x_c, guidance)?;
            let post = if out.iterations == 0 { pre } else { estimate_sigma(model, &out.x)? };
            Ok(NoiseRow {
                sigma,
                sigma_hat_pre: pre,
                sigma_hat_post: post,
                loss_initial: out.initial_loss,
                loss_final: out.loss,
                iterations: out.iterations,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_endpoints() {
        let s = make_schedule(1.0, 0.01, 2).unwrap();
        assert_eq!(s.sigmas(), &[1.0, 0.01]);
        assert!(make_schedule(0.01, 1.0, 5).is_err());
        assert!(make_schedule(1.0, 0.01, 1).is_err());
    }

    #[test]
    fn schedule_must_decrease() {
        assert!(Schedule::new(vec![1.0, 1.0]).is_err());
        assert!(Schedule::new(vec![1.0, -0.1]).is_err());
        assert!(Schedule::new(vec![1.0, 0.0]).is_ok());
    }
}
