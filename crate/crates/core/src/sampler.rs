//! Two-stage ODE sampling with temporal reasoning frames.
//!
//! Stage 1 denoises `[condition, reasoning × r, target]` jointly for the
//! first `N_r` knots of the schedule. The reasoning frames are then dropped
//! and stage 2 continues `[condition, target]` from the same target buffer
//! over the remaining knots. The condition latent is written back after
//! every solver step so it never drifts.
//!
//! Every frame's starting noise comes from its own named stream, so the
//! target noise is the same whether or not reasoning frames are allocated.

use serde::{Deserialize, Serialize};

use crate::codec::{FrameRole, LatentVideo, PixelVideo, VideoCodec};
use crate::denoiser::{Denoiser, FrameLayout};
use crate::error::{bail, Result};
use crate::flow::shift_timestep;
use crate::oracle::OracleWorld;
use crate::params::ParamSet;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Heun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub reason_steps: usize,
    pub reason_len: usize,
    pub shift: f64,
    pub solver: Solver,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, reason_steps: 10, reason_len: 6, shift: 5.0, solver: Solver::Euler, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            bail!(Contract, "sampler needs at least one step");
        }
        if self.reason_steps > self.steps {
            bail!(Contract, "reasoning steps {} exceed total steps {}", self.reason_steps, self.steps);
        }
        if !(self.shift >= 1.0) {
            bail!(Contract, "schedule shift {} must be >= 1", self.shift);
        }
        Ok(())
    }
}

/// Strictly decreasing knots from 1 to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    pub knots: Vec<f64>,
}

impl TimestepSchedule {
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }
}

/// Uniform grid `1 − i/N` pushed through the timestep shift.
pub fn build_schedule(steps: usize, shift: f64) -> Result<TimestepSchedule> {
    if steps == 0 {
        bail!(Contract, "schedule needs at least one step");
    }
    let knots = (0..=steps).map(|i| shift_timestep(1.0 - i as f64 / steps as f64, shift)).collect();
    Ok(TimestepSchedule { knots })
}

/// `z + (t_next − t)·v`.
pub fn euler_step(v: &Tensor, t: f64, z: &Tensor, t_next: f64) -> Result<Tensor> {
    let dt = t_next - t;
    z.zip_map(v, |zi, vi| zi + dt * vi)
}

/// A velocity prediction for latent videos.
pub trait VelocityField: Sync {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<Tensor>;
}

/// The denoiser with fixed parameters and instruction.
pub struct DenoiserField<'a> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParamSet,
    pub instruction: usize,
}

impl VelocityField for DenoiserField<'_> {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<Tensor> {
        let layout = FrameLayout::from_roles(z.roles(), self.denoiser.config().target_anchor)?;
        self.denoiser.velocity_with_layout(self.params, z.tensor(), t, self.instruction, &layout)
    }
}

/// Closed-form field: every non-condition frame is an independent draw from
/// the world; the condition frame gets zero velocity.
pub struct OracleField<'a> {
    pub world: &'a OracleWorld,
}

impl VelocityField for OracleField<'_> {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<Tensor> {
        let mut frames = Vec::with_capacity(z.frame_count());
        for (i, role) in z.roles().iter().enumerate() {
            let f = z.frame(i)?;
            frames.push(if *role == FrameRole::Condition { Tensor::zeros(f.shape().to_vec()) } else { self.world.velocity(&f, t)? });
        }
        let shape = z.tensor().shape().to_vec();
        let data = frames.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(shape, data)
    }
}

fn pin_condition(z: &mut Tensor, condition: &Tensor) -> Result<()> {
    let n = condition.numel();
    if z.numel() < n {
        bail!(Dimension, "latent smaller than its condition frame");
    }
    let shape = z.shape().to_vec();
    let mut data = std::mem::replace(z, Tensor::scalar(0.0)).into_data();
    data[..n].copy_from_slice(condition.data());
    *z = Tensor::new(shape, data)?;
    Ok(())
}

/// Integrates `z` from knot `from` to knot `to`, pinning frame 0 to
/// `condition` after every step.
fn integrate(
    field: &dyn VelocityField,
    z: LatentVideo,
    condition: &Tensor,
    schedule: &TimestepSchedule,
    from: usize,
    to: usize,
    solver: Solver,
    observer: &mut dyn FnMut(usize, &LatentVideo),
) -> Result<LatentVideo> {
    let mut z = z;
    for i in from..to {
        let (t, t_next) = (schedule.knots[i], schedule.knots[i + 1]);
        if !(t_next < t) {
            bail!(Contract, "schedule is not strictly decreasing at knot {i}");
        }
        let v = field.velocity(&z, t)?;
        let mut next = euler_step(&v, t, z.tensor(), t_next)?;
        if solver == Solver::Heun {
            pin_condition(&mut next, condition)?;
            let v2 = field.velocity(&z.with_tensor(next)?, t_next)?;
            let avg = v.zip_map(&v2, |a, b| 0.5 * (a + b))?;
            next = euler_step(&avg, t, z.tensor(), t_next)?;
        }
        pin_condition(&mut next, condition)?;
        if !next.is_finite() {
            bail!(Numeric, "non-finite latent after solver step {i}");
        }
        z = z.with_tensor(next)?;
        observer(i + 1, &z);
    }
    Ok(z)
}

fn frame_noise(seed: u64, label: &str, shape: &[usize]) -> Tensor {
    CounterRng::new(seed).fork(label).normal_tensor(shape.to_vec())
}

fn stack(frames: &[Tensor], roles: Vec<FrameRole>) -> Result<LatentVideo> {
    let shape = frames[0].shape().to_vec();
    let mut full = vec![frames.len()];
    full.extend_from_slice(&shape);
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    LatentVideo::new(Tensor::new(full, data)?, roles)
}

/// Keeps the clean condition and the last frame of `z_full`, copied as is.
pub fn stage_handoff(z_full: &LatentVideo) -> Result<LatentVideo> {
    let n = z_full.frame_count();
    if n < 2 {
        bail!(Contract, "handoff needs at least two frames, got {n}");
    }
    stack(&[z_full.frame(0)?, z_full.frame(n - 1)?], vec![FrameRole::Condition, FrameRole::Target])
}

/// Intermediate states of one sampling run.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    /// `z_full` after the last stage-1 step, or `None` if stage 1 was empty.
    pub stage1_final: Option<LatentVideo>,
    pub handoff: LatentVideo,
    pub output: LatentVideo,
    pub schedule: TimestepSchedule,
}

/// Algorithm-1 sampling from a clean condition latent (`[C, h, w]`).
pub fn sample_latent_traced(field: &dyn VelocityField, condition: &Tensor, config: &SamplerConfig) -> Result<SampleTrace> {
    config.validate()?;
    let schedule = build_schedule(config.steps, config.shift)?;
    let shape = condition.shape().to_vec();
    let target = frame_noise(config.seed, "target", &shape);
    let r = if config.reason_steps > 0 { config.reason_len } else { 0 };

    let mut frames = vec![condition.clone()];
    let mut roles = vec![FrameRole::Condition];
    for i in 0..r {
        frames.push(frame_noise(config.seed, &format!("reason-{i}"), &shape));
        roles.push(FrameRole::Reasoning);
    }
    frames.push(target);
    roles.push(FrameRole::Target);
    let z_full = stack(&frames, roles)?;

    let (stage1_final, handoff) = if config.reason_steps > 0 {
        let z = integrate(field, z_full, condition, &schedule, 0, config.reason_steps, config.solver, &mut |_, _| {})?;
        let h = stage_handoff(&z)?;
        (Some(z), h)
    } else {
        (None, stage_handoff(&z_full)?)
    };
    let output = integrate(field, handoff.clone(), condition, &schedule, config.reason_steps, config.steps, config.solver, &mut |_, _| {})?;
    Ok(SampleTrace { stage1_final, handoff, output, schedule })
}

pub fn sample_latent(field: &dyn VelocityField, condition: &Tensor, config: &SamplerConfig) -> Result<LatentVideo> {
    Ok(sample_latent_traced(field, condition, config)?.output)
}

/// Standard sampling that never allocates reasoning frames.
pub fn sample_pair_latent(field: &dyn VelocityField, condition: &Tensor, config: &SamplerConfig) -> Result<LatentVideo> {
    config.validate()?;
    let schedule = build_schedule(config.steps, config.shift)?;
    let target = frame_noise(config.seed, "target", condition.shape());
    let z = stack(&[condition.clone(), target], vec![FrameRole::Condition, FrameRole::Target])?;
    integrate(field, z, condition, &schedule, 0, config.steps, config.solver, &mut |_, _| {})
}

/// Keeps all reasoning frames to the end (`N_r = N`) and returns the whole
/// denoised latent sequence.
pub fn sample_trajectory_latent(field: &dyn VelocityField, condition: &Tensor, config: &SamplerConfig) -> Result<LatentVideo> {
    if config.reason_steps != config.steps {
        bail!(Contract, "trajectory mode needs reasoning steps ({}) equal to total steps ({})", config.reason_steps, config.steps);
    }
    config.validate()?;
    let schedule = build_schedule(config.steps, config.shift)?;
    let shape = condition.shape().to_vec();
    let mut frames = vec![condition.clone()];
    let mut roles = vec![FrameRole::Condition];
    for i in 0..config.reason_len {
        frames.push(frame_noise(config.seed, &format!("reason-{i}"), &shape));
        roles.push(FrameRole::Reasoning);
    }
    frames.push(frame_noise(config.seed, "target", &shape));
    roles.push(FrameRole::Target);
    integrate(field, stack(&frames, roles)?, condition, &schedule, 0, config.steps, config.solver, &mut |_, _| {})
}

fn condition_latent(codec: &dyn VideoCodec, frame: &Tensor) -> Result<Tensor> {
    codec.encode_condition(frame)?.frame(0)
}

/// Edits pixel frame `c` with instruction `y` and decodes the target.
pub fn sample(
    denoiser: &Denoiser,
    params: &ParamSet,
    codec: &dyn VideoCodec,
    c: &Tensor,
    y: usize,
    config: &SamplerConfig,
) -> Result<Tensor> {
    let field = DenoiserField { denoiser, params, instruction: y };
    let z = sample_latent(&field, &condition_latent(codec, c)?, config)?;
    codec.decode_edit(&z)
}

/// Full reasoning trajectory as a decoded pixel video.
pub fn sample_trajectory(
    denoiser: &Denoiser,
    params: &ParamSet,
    codec: &dyn VideoCodec,
    c: &Tensor,
    y: usize,
    config: &SamplerConfig,
) -> Result<PixelVideo> {
    let field = DenoiserField { denoiser, params, instruction: y };
    let z = sample_trajectory_latent(&field, &condition_latent(codec, c)?, config)?;
    codec.decode(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{BlockMeanCodec, CodecConfig};
    use crate::denoiser::DenoiserConfig;
    use crate::oracle::GaussianWorld;

    #[test]
    fn schedules() {
        assert_eq!(build_schedule(1, 5.0).unwrap().knots, vec![1.0, 0.0]);
        assert_eq!(build_schedule(4, 1.0).unwrap().knots, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        let k = build_schedule(2, 5.0).unwrap().knots;
        assert_eq!(k[0], 1.0);
        assert!((k[1] - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(k[2], 0.0);
        let k = build_schedule(50, 5.0).unwrap().knots;
        assert!(k.windows(2).all(|w| w[1] < w[0]));
        assert!(build_schedule(0, 5.0).is_err());
    }

    #[test]
    fn euler_basics() {
        let z = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        assert_eq!(euler_step(&Tensor::zeros([2]), 0.7, &z, 0.3).unwrap(), z);
        // point mass at μ: v = (z − μ)/t, one step to 0 lands on μ
        let mu = 0.75;
        let z = Tensor::scalar(2.0);
        let v = z.map(|x| (x - mu) / 1.0);
        assert_eq!(euler_step(&v, 1.0, &z, 0.0).unwrap().item().unwrap(), mu);
    }

    fn oracle() -> OracleWorld {
        OracleWorld::Gaussian(GaussianWorld::standard())
    }

    #[test]
    fn boundary_equivalences_with_oracle() {
        let world = oracle();
        let field = OracleField { world: &world };
        let c = CounterRng::new(1).normal_tensor([1, 2, 2]);
        for seed in 0..5 {
            let base = SamplerConfig { steps: 12, reason_steps: 0, reason_len: 6, seed, ..Default::default() };
            let pair = sample_pair_latent(&field, &c, &base).unwrap();
            assert_eq!(sample_latent(&field, &c, &base).unwrap(), pair);
            let r0 = SamplerConfig { reason_steps: 4, reason_len: 0, ..base.clone() };
            assert_eq!(sample_latent(&field, &c, &r0).unwrap(), pair);
        }
    }

    #[test]
    fn handoff_copies_condition_and_last_frame() {
        let world = oracle();
        let field = OracleField { world: &world };
        let c = CounterRng::new(2).normal_tensor([1, 2, 2]);
        let cfg = SamplerConfig { steps: 20, reason_steps: 10, reason_len: 6, seed: 3, ..Default::default() };
        let trace = sample_latent_traced(&field, &c, &cfg).unwrap();
        let full = trace.stage1_final.unwrap();
        assert_eq!(full.frame_count(), 8);
        assert_eq!(trace.handoff.frame(0).unwrap(), c);
        assert_eq!(trace.handoff.frame(1).unwrap(), full.frame(7).unwrap());
        assert_eq!(trace.handoff.roles(), &[FrameRole::Condition, FrameRole::Target]);
        assert_eq!(trace.output.frame(0).unwrap(), c);
        assert!(stage_handoff(&LatentVideo::new(Tensor::zeros([1, 1, 2, 2]), vec![FrameRole::Condition]).unwrap()).is_err());
    }

    #[test]
    fn condition_is_pinned_every_step() {
        let den = Denoiser::new(DenoiserConfig { embed_dim: 8, layers: 1, heads: 1, patch_size: 2, vocab_size: 3, ..Default::default() }).unwrap();
        let mut ps = den.init(&mut CounterRng::new(0));
        ps.set("head.w", CounterRng::new(1).normal_tensor([8, 12])).unwrap();
        let field = DenoiserField { denoiser: &den, params: &ps, instruction: 1 };
        let c = CounterRng::new(4).normal_tensor([3, 4, 4]);
        let schedule = build_schedule(6, 5.0).unwrap();
        let z = stack(&[c.clone(), CounterRng::new(5).normal_tensor([3, 4, 4])], vec![FrameRole::Condition, FrameRole::Target]).unwrap();
        let mut seen = 0;
        for solver in [Solver::Euler, Solver::Heun] {
            integrate(&field, z.clone(), &c, &schedule, 0, 6, solver, &mut |_, s| {
                assert_eq!(s.frame(0).unwrap(), c);
                seen += 1;
            })
            .unwrap();
        }
        assert_eq!(seen, 12);
    }

    #[test]
    fn trajectory_mode_contract_and_layout() {
        let den = Denoiser::new(DenoiserConfig { embed_dim: 8, layers: 1, heads: 1, patch_size: 2, vocab_size: 3, ..Default::default() }).unwrap();
        let ps = den.init(&mut CounterRng::new(0));
        let codec = BlockMeanCodec::new(CodecConfig::default()).unwrap();
        let c = Tensor::from_fn([3, 4, 4], |i| (i % 7) as f64 / 7.0);
        let bad = SamplerConfig { steps: 4, reason_steps: 2, reason_len: 2, ..Default::default() };
        assert!(matches!(sample_trajectory(&den, &ps, &codec, &c, 0, &bad), Err(crate::Error::Contract(_))));
        let cfg = SamplerConfig { steps: 4, reason_steps: 4, reason_len: 2, seed: 9, ..Default::default() };
        let video = sample_trajectory(&den, &ps, &codec, &c, 0, &cfg).unwrap();
        assert_eq!(video.frame_count(), 1 + 4 * 2 + 4);
        assert_eq!(video.frame(0).unwrap(), c);
        let z = sample_trajectory_latent(&DenoiserField { denoiser: &den, params: &ps, instruction: 0 }, &c, &cfg).unwrap();
        assert_eq!(video.last_frame(), codec.decode_edit(&z).unwrap());
        assert!(sample(&den, &ps, &codec, &c, 0, &SamplerConfig { reason_steps: 51, ..Default::default() }).is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let world = oracle();
        let field = OracleField { world: &world };
        let c = Tensor::zeros([1, 3, 3]);
        let cfg = SamplerConfig { steps: 10, reason_steps: 3, reason_len: 2, seed: 17, solver: Solver::Heun, ..Default::default() };
        assert_eq!(sample_latent(&field, &c, &cfg).unwrap(), sample_latent(&field, &c, &cfg).unwrap());
    }
}
