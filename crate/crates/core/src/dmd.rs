//! Few-step student distillation by distribution matching.
//!
//! The student is the denoiser run for a handful of Euler steps from noise.
//! Its outputs are re-noised to a random `t`; a "real" score (teacher or
//! closed form) and a "fake" score (a second network fitted to the
//! student's own outputs) are evaluated there, and the student follows
//! `−(s_real − s_fake)` back through its sampling chain.
//!
//! Both networks predict velocities. A velocity `v` at `(z, t)` is turned
//! into a score with `s = −(z + (1−t)·v) / t`, which is exact for the
//! optimal velocity of any data distribution under the linear interpolation
//! `z = (1−t)x + tε`. Fitting the fake network with the flow loss is then
//! denoising score matching up to the per-`t` weight `(1−t)²`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use rand_core::RngCore;

use crate::codec::{FrameRole, LatentVideo};
use crate::denoiser::Denoiser;
use crate::error::{bail, Result};
use crate::flow::{self, sample_timestep, FlowBatch, FlowSample, Mode};
use crate::optim::{AdamW, AdamWConfig};
use crate::oracle::OracleWorld;
use crate::params::{Gradients, ParamSet};
use crate::rng::CounterRng;
use crate::sampler::{build_schedule, sample_pair_latent, DenoiserField, SamplerConfig, Solver};
use crate::tensor::Tensor;

/// Prefix under which fake-score parameters are stored next to a student.
pub const FAKE_PREFIX: &str = "fake.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub student_steps: usize,
    /// Fake-score updates per student update.
    pub update_ratio: usize,
    pub lr: f64,
    pub fake_lr: f64,
    /// Student updates.
    pub steps: usize,
    pub batch_size: usize,
    pub shift: f64,
    /// Range the re-noising timestep is clamped to; the score conversion
    /// divides by `t`.
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_steps: 8,
            update_ratio: 5,
            lr: 2e-6,
            fake_lr: 2e-6,
            steps: 1500,
            batch_size: 8,
            shift: 5.0,
            t_min: 0.02,
            t_max: 0.98,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.student_steps == 0 || self.update_ratio == 0 || self.batch_size == 0 {
            bail!(Config, "student steps, update ratio, and batch size must be positive");
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            bail!(Config, "need 0 < t_min < t_max < 1, got {} and {}", self.t_min, self.t_max);
        }
        if !(self.shift >= 1.0) {
            bail!(Config, "shift {} must be >= 1", self.shift);
        }
        Ok(())
    }

    pub fn student_sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { steps: self.student_steps, reason_steps: 0, reason_len: 0, shift: self.shift, solver: Solver::Euler, seed }
    }
}

/// `(1−t)·x + t·ε` with fresh noise.
pub fn forward_noise(x: &Tensor, t: f64, rng: &mut CounterRng) -> Result<Tensor> {
    let eps = rng.normal_tensor(x.shape().to_vec());
    flow::interpolate(x, &eps, t)
}

/// `s = −(z + (1−t)·v) / t`.
pub fn velocity_to_score(z: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0) {
        bail!(Contract, "score conversion needs t > 0, got {t}");
    }
    z.zip_map(v, |zi, vi| -(zi + (1.0 - t) * vi) / t)
}

/// A velocity network read as a score model. Its parameters live under
/// their own names, disjoint from the student's when stored together.
#[derive(Clone, Debug)]
pub struct ScoreModel {
    pub params: ParamSet,
}

impl ScoreModel {
    /// Score of the target frame of `z` (`[2, C, h, w]`, condition first).
    pub fn score(&self, denoiser: &Denoiser, z: &LatentVideo, t: f64, instruction: usize) -> Result<Tensor> {
        let field = DenoiserField { denoiser, params: &self.params, instruction };
        target_score(&field, z, t)
    }

    pub fn stored(&self) -> ParamSet {
        self.params.prefixed(FAKE_PREFIX)
    }
}

fn target_score(field: &DenoiserField, z: &LatentVideo, t: f64) -> Result<Tensor> {
    use crate::sampler::VelocityField;
    let v = field.velocity(z, t)?;
    let last = z.frame_count() - 1;
    let per = z.tensor().numel() / z.frame_count();
    let vt = Tensor::new(z.frame_shape().to_vec(), v.data()[last * per..].to_vec())?;
    velocity_to_score(&z.frame(last)?, &vt, t)
}

/// Where the real score comes from.
pub enum RealScore<'a> {
    /// Closed form for the target frame's data distribution.
    Oracle(&'a OracleWorld),
    Teacher { denoiser: &'a Denoiser, params: &'a ParamSet },
}

impl RealScore<'_> {
    pub fn score(&self, z: &LatentVideo, t: f64, instruction: usize) -> Result<Tensor> {
        match self {
            RealScore::Oracle(world) => world.score(&z.frame(z.frame_count() - 1)?, t),
            RealScore::Teacher { denoiser, params } => target_score(&DenoiserField { denoiser, params, instruction }, z, t),
        }
    }
}

/// Parameter gradient of the surrogate `−Σ sg(s_real − s_fake)·x / batch`
/// through the recorded student output `x`.
pub fn dmd_param_gradient(tape: &Tape, output: Var, s_real: &Tensor, s_fake: &Tensor, params: &ParamSet, batch: usize) -> Result<Gradients> {
    let x = tape.value(output);
    if s_real.shape() != x.shape() || s_fake.shape() != x.shape() {
        bail!(Dimension, "score shapes {:?} / {:?} do not match output {:?}", s_real.shape(), s_fake.shape(), x.shape());
    }
    if batch == 0 {
        bail!(Contract, "batch size must be positive");
    }
    let k = 1.0 / batch as f64;
    let seed = s_real.zip_map(s_fake, |r, f| -(r - f) * k)?;
    tape.vjp(output, &seed, params)
}

/// Records the student's few-step Euler chain from `noise` on `tape` and
/// returns the generated target frame. Matches the pair-only sampler step
/// for step.
pub fn record_student(
    tape: &mut Tape,
    denoiser: &Denoiser,
    params: &ParamSet,
    condition: &Tensor,
    noise: &Tensor,
    instruction: usize,
    config: &DistillConfig,
) -> Result<Var> {
    let schedule = build_schedule(config.student_steps, config.shift)?;
    let shape = condition.shape().to_vec();
    let mut full = vec![2];
    full.extend_from_slice(&shape);
    let z0 = Tensor::concat_outer(&[&condition.reshape(prepend1(&shape))?, &noise.reshape(prepend1(&shape))?])?;
    let per = condition.numel();
    let mask = Tensor::from_fn(full.clone(), |i| if i < per { 0.0 } else { 1.0 });
    let roles = [FrameRole::Condition, FrameRole::Target];
    let m = tape.input(mask);
    let mut z = tape.input(z0);
    for i in 0..config.student_steps {
        let (t, t_next) = (schedule.knots[i], schedule.knots[i + 1]);
        let v = denoiser.forward(tape, params, z, t, instruction, &roles)?;
        let vm = tape.mul(v, m)?;
        // same association as the sampler: z + dt·v
        let dz = tape.scale(vm, t_next - t);
        z = tape.add(z, dz)?;
    }
    let rows = tape.reshape(z, [2, per])?;
    let last = tape.gather(rows, &[1])?;
    tape.reshape(last, shape)
}

fn prepend1(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// A conditioning prompt for the student: clean condition latent and
/// instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub condition: Tensor,
    pub instruction: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleLog {
    pub cycle: usize,
    pub student_loss_proxy: f64,
    pub fake_loss: f64,
    /// Relative moment error of the cycle's student samples against the
    /// oracle world; absent with a teacher.
    pub moment_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: ParamSet,
    pub fake: ScoreModel,
    pub student_updates: usize,
    pub fake_updates: usize,
    pub log: Vec<CycleLog>,
}

fn pair_latent(condition: &Tensor, target: &Tensor) -> Result<LatentVideo> {
    let shape = condition.shape().to_vec();
    let t = Tensor::concat_outer(&[&condition.reshape(prepend1(&shape))?, &target.reshape(prepend1(&shape))?])?;
    LatentVideo::new(t, vec![FrameRole::Condition, FrameRole::Target])
}

fn draw_t(rng: &mut CounterRng, config: &DistillConfig) -> f64 {
    sample_timestep(rng, config.shift).clamp(config.t_min, config.t_max)
}

/// Relative error of sample mean and variance against `(mean, var)`; the
/// mean error is relative to `max(|mean|, sqrt(var))`.
pub fn moment_error(samples: &[f64], mean: f64, var: f64) -> f64 {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let mean_scale = mean.abs().max(var.sqrt());
    ((m - mean).abs() / mean_scale).max((v - var).abs() / var)
}

/// Alternates `update_ratio` fake-score updates with one student update.
/// The student and the fake model both start from `init`.
pub fn distill_loop(
    denoiser: &Denoiser,
    real: &RealScore,
    init: &ParamSet,
    prompts: &[Prompt],
    config: &DistillConfig,
    mut on_cycle: impl FnMut(&CycleLog),
) -> Result<DistillOutcome> {
    config.validate()?;
    if prompts.is_empty() {
        bail!(Contract, "distillation needs at least one prompt");
    }
    let mut student = init.clone();
    let mut fake = ScoreModel { params: init.clone() };
    let mut student_opt = AdamW::new(AdamWConfig { lr: config.lr, ..AdamWConfig::default() });
    let mut fake_opt = AdamW::new(AdamWConfig { lr: config.fake_lr, ..AdamWConfig::default() });
    let root = CounterRng::new(config.seed);
    let (mut student_updates, mut fake_updates) = (0, 0);
    let mut log = Vec::with_capacity(config.steps);

    for cycle in 0..config.steps {
        let mut rng = root.split(cycle as u64);
        let mut fake_loss = 0.0;
        for _ in 0..config.update_ratio {
            let mut batch = FlowBatch { samples: vec![], noise: vec![], t: vec![] };
            for _ in 0..config.batch_size {
                let p = &prompts[rng.below(prompts.len())];
                let field = DenoiserField { denoiser, params: &student, instruction: p.instruction };
                let seed = rng.next_u64();
                let x = sample_pair_latent(&field, &p.condition, &config.student_sampler(seed))?;
                let t = draw_t(&mut rng, config);
                batch.noise.push(rng.normal_tensor(x.tensor().shape().to_vec()));
                batch.t.push(t);
                batch.samples.push(FlowSample::new(x, p.instruction, Mode::Pair)?);
            }
            fake_loss += flow::train_step(denoiser, &mut fake.params, &mut fake_opt, &batch)?.loss;
            fake_updates += 1;
        }
        fake_loss /= config.update_ratio as f64;

        let mut total: Option<Gradients> = None;
        let mut proxy = 0.0;
        let mut outputs = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let p = &prompts[rng.below(prompts.len())];
            let noise = rng.normal_tensor(p.condition.shape().to_vec());
            let mut tape = Tape::new();
            let x = record_student(&mut tape, denoiser, &student, &p.condition, &noise, p.instruction, config)?;
            let xv = tape.value(x).clone();
            let t = draw_t(&mut rng, config);
            let zt = pair_latent(&p.condition, &forward_noise(&xv, t, &mut rng)?)?;
            let s_real = real.score(&zt, t, p.instruction)?;
            let s_fake = fake.score(denoiser, &zt, t, p.instruction)?;
            proxy += s_real.sub(&s_fake)?.data().iter().map(|d| d * d).sum::<f64>() / s_real.numel() as f64;
            let g = dmd_param_gradient(&tape, x, &s_real, &s_fake, &student, config.batch_size)?;
            total = Some(match total {
                None => g,
                Some(acc) => Gradients::sum_ordered(&[acc, g])?,
            });
            outputs.extend_from_slice(xv.data());
        }
        let grads = total.expect("batch is non-empty");
        if !grads.is_finite() || !proxy.is_finite() || !fake_loss.is_finite() {
            bail!(Numeric, "non-finite distillation state at cycle {cycle}");
        }
        student_opt.step(&mut student, &grads)?;
        student_updates += 1;

        let moment = match real {
            RealScore::Oracle(world) => {
                let (m, v) = world.moments();
                Some(moment_error(&outputs, m, v))
            }
            RealScore::Teacher { .. } => None,
        };
        let entry = CycleLog { cycle, student_loss_proxy: proxy / config.batch_size as f64, fake_loss, moment_error: moment };
        on_cycle(&entry);
        log.push(entry);
    }
    Ok(DistillOutcome { student, fake, student_updates, fake_updates, log })
}
