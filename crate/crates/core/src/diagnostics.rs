//! Sampler checks against closed-form worlds.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::oracle::{GaussianWorld, OracleWorld};
use crate::rng::CounterRng;
use crate::sampler::{sample_latent, sample_pair_latent, OracleField, SamplerConfig, Solver};
use crate::tensor::Tensor;

/// Step counts used for the convergence-order fit.
pub const ORDER_STEPS: [usize; 4] = [5, 10, 20, 40];

fn scalar_condition() -> Tensor {
    Tensor::zeros([1, 1, 1])
}

/// Every coordinate of `count` generated target frames of shape
/// `frame_shape`, sample `i` seeded with `config.seed + i`. The condition
/// frame is all zeros.
pub fn oracle_samples(world: &OracleWorld, config: &SamplerConfig, count: usize, frame_shape: &[usize]) -> Result<Vec<f64>> {
    let field = OracleField { world };
    let c = Tensor::zeros(frame_shape.to_vec());
    let mut out = Vec::with_capacity(count * c.numel());
    for i in 0..count {
        let cfg = SamplerConfig { seed: config.seed.wrapping_add(i as u64), ..config.clone() };
        let z = sample_latent(&field, &c, &cfg)?;
        out.extend_from_slice(z.frame(z.frame_count() - 1)?.data());
    }
    Ok(out)
}

pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

/// Mean absolute endpoint error of the pair sampler on a scalar Gaussian
/// world, against the exact flow map `z₀ = μ + σ·z₁`.
pub fn endpoint_error(world: &GaussianWorld, steps: usize, solver: Solver, shift: f64, count: usize) -> Result<f64> {
    if world.dim() != 1 {
        bail!(Dimension, "endpoint check needs a scalar world");
    }
    let (mu, sd) = (world.mean[0], world.var[0].sqrt());
    let oracle = OracleWorld::Gaussian(world.clone());
    let field = OracleField { world: &oracle };
    let c = scalar_condition();
    let mut total = 0.0;
    for seed in 0..count as u64 {
        let cfg = SamplerConfig { steps, reason_steps: 0, reason_len: 0, shift, solver, seed };
        let z1 = CounterRng::new(seed).fork("target").normal();
        let z0 = sample_pair_latent(&field, &c, &cfg)?.frame(1)?.data()[0];
        total += (z0 - (mu + sd * z1)).abs();
    }
    Ok(total / count as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        bail!(Contract, "slope fit needs at least two matching points");
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        bail!(Numeric, "slope fit needs positive values");
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Fitted order of `solver` over [`ORDER_STEPS`].
pub fn convergence_slope(world: &GaussianWorld, solver: Solver, shift: f64, count: usize) -> Result<f64> {
    let xs: Vec<f64> = ORDER_STEPS.iter().map(|&n| n as f64).collect();
    let ys = ORDER_STEPS.iter().map(|&n| endpoint_error(world, n, solver, shift, count)).collect::<Result<Vec<_>>>()?;
    loglog_slope(&xs, &ys)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub samples: usize,
    pub frame_shape: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
    pub target_mean: f64,
    pub target_variance: f64,
    /// Present for scalar Gaussian worlds only.
    pub euler_slope: Option<f64>,
    pub heun_slope: Option<f64>,
}

/// Moments of [`oracle_samples`] pooled over coordinates, plus fitted
/// solver orders for scalar Gaussian worlds.
pub fn oracle_check(world: &OracleWorld, config: &SamplerConfig, count: usize, frame_shape: &[usize]) -> Result<OracleReport> {
    config.validate()?;
    if count < 2 {
        bail!(Contract, "need at least two samples");
    }
    let (mean, variance) = mean_and_variance(&oracle_samples(world, config, count, frame_shape)?);
    let (target_mean, target_variance) = world.moments();
    let (euler_slope, heun_slope) = match world {
        OracleWorld::Gaussian(g) if g.dim() == 1 => {
            let n = count.min(200);
            (Some(convergence_slope(g, Solver::Euler, config.shift, n)?), Some(convergence_slope(g, Solver::Heun, config.shift, n)?))
        }
        _ => (None, None),
    };
    Ok(OracleReport { samples: count, frame_shape: frame_shape.to_vec(), mean, variance, target_mean, target_variance, euler_slope, heun_slope })
}
