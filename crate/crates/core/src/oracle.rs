//! Closed-form velocity and score fields for Gaussian data.
//!
//! With data `x ~ N(μ, diag Σ)`, noise `ε ~ N(0, I)` and
//! `z = (1−t)x + tε`, every quantity below follows from joint-Gaussian
//! conditioning with marginal variance `V = (1−t)²Σ + t²`:
//!
//! - `E[ε − x | z] = −μ + (t − (1−t)Σ)(z − (1−t)μ) / V`
//! - `∇ log p(z) = −(z − (1−t)μ) / V`
//! - `Var[ε − x | z] = 1 + Σ − (t − (1−t)Σ)² / V`
//!
//! Mixtures of such worlds are handled by weighting the per-component
//! answers with posterior responsibilities.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Marginal variances below this are treated as singular.
pub const VARIANCE_FLOOR: f64 = 1e-18;

/// Diagonal Gaussian data distribution. A one-dimensional world broadcasts
/// over every coordinate of its input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldRepr")]
pub struct GaussianWorld {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianWorld {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            bail!(Dimension, "world mean has {} entries, variance {}", mean.len(), var.len());
        }
        if var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            bail!(Contract, "world variances must be finite and non-negative");
        }
        Ok(Self { mean, var })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean], vec![var])
    }

    pub fn standard() -> Self {
        Self { mean: vec![0.0], var: vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn coord(&self, i: usize, n: usize) -> Result<(f64, f64)> {
        match self.dim() {
            1 => Ok((self.mean[0], self.var[0])),
            d if d == n => Ok((self.mean[i], self.var[i])),
            d => bail!(Dimension, "world of dim {d} applied to {n} coordinates"),
        }
    }

    /// Data samples shaped like `shape`.
    pub fn sample(&self, shape: impl Into<Vec<usize>>, rng: &mut CounterRng) -> Result<Tensor> {
        let shape = shape.into();
        let n = crate::tensor::numel_of(&shape);
        let d = self.dim();
        if n % d != 0 {
            bail!(Dimension, "shape {:?} is not a whole number of world samples", shape);
        }
        let data = (0..n).map(|i| self.mean[i % d] + self.var[i % d].sqrt() * rng.normal()).collect();
        Tensor::new(shape, data)
    }
}

// Deserialization goes through the validating constructors.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldRepr {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl TryFrom<WorldRepr> for GaussianWorld {
    type Error = crate::Error;
    fn try_from(r: WorldRepr) -> Result<Self> {
        Self::new(r.mean, r.var)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureRepr {
    weights: Vec<f64>,
    means: Vec<f64>,
    vars: Vec<f64>,
}

impl TryFrom<MixtureRepr> for GaussianMixture {
    type Error = crate::Error;
    fn try_from(r: MixtureRepr) -> Result<Self> {
        Self::new(r.weights, r.means, r.vars)
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        bail!(Contract, "timestep {t} outside [0, 1]");
    }
    Ok(())
}

fn marginal(t: f64, m: f64, v: f64) -> Result<(f64, f64)> {
    let var = (1.0 - t) * (1.0 - t) * v + t * t;
    if var < VARIANCE_FLOOR {
        bail!(Numeric, "marginal variance {var:e} at t = {t} is singular");
    }
    Ok(((1.0 - t) * m, var))
}

fn velocity_1d(z: f64, t: f64, m: f64, v: f64) -> Result<f64> {
    let (mz, var) = marginal(t, m, v)?;
    Ok(-m + (t - (1.0 - t) * v) * (z - mz) / var)
}

fn score_1d(z: f64, t: f64, m: f64, v: f64) -> Result<f64> {
    let (mz, var) = marginal(t, m, v)?;
    Ok(-(z - mz) / var)
}

fn per_coord(z: &Tensor, world: &GaussianWorld, f: impl Fn(f64, f64, f64) -> Result<f64>) -> Result<Tensor> {
    let n = z.numel();
    let mut out = Vec::with_capacity(n);
    for (i, &zi) in z.data().iter().enumerate() {
        let (m, v) = world.coord(i, n)?;
        out.push(f(zi, m, v)?);
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// `E[ε − z₀ | z_t]`, the minimizer of the flow objective at `t`.
pub fn optimal_velocity(z: &Tensor, t: f64, world: &GaussianWorld) -> Result<Tensor> {
    check_t(t)?;
    per_coord(z, world, |zi, m, v| velocity_1d(zi, t, m, v))
}

/// Gradient of the log marginal density of `z_t`.
pub fn analytic_score(z: &Tensor, t: f64, world: &GaussianWorld) -> Result<Tensor> {
    check_t(t)?;
    per_coord(z, world, |zi, m, v| score_1d(zi, t, m, v))
}

/// Log marginal density of `z_t`, summed over coordinates.
pub fn log_density(z: &Tensor, t: f64, world: &GaussianWorld) -> Result<f64> {
    check_t(t)?;
    let n = z.numel();
    let mut total = 0.0;
    for (i, &zi) in z.data().iter().enumerate() {
        let (m, v) = world.coord(i, n)?;
        let (mz, var) = marginal(t, m, v)?;
        total += -0.5 * ((zi - mz) * (zi - mz) / var + var.ln() + (2.0 * std::f64::consts::PI).ln());
    }
    Ok(total)
}

/// Trace of `Cov[ε − z₀ | z_t]` over the world's coordinates: the smallest
/// achievable summed squared error at `t`.
pub fn irreducible_loss_floor(world: &GaussianWorld, t: f64) -> f64 {
    world
        .var
        .iter()
        .map(|&v| {
            let var = (1.0 - t) * (1.0 - t) * v + t * t;
            if var < VARIANCE_FLOOR {
                // z_t is a constant, so nothing about ε is revealed
                1.0 + v
            } else {
                let c = t - (1.0 - t) * v;
                (1.0 + v - c * c / var).max(0.0)
            }
        })
        .sum()
}

/// Per-coordinate floor, comparable with a mean-reduced flow loss.
pub fn mean_loss_floor(world: &GaussianWorld, t: f64) -> f64 {
    irreducible_loss_floor(world, t) / world.dim() as f64
}

/// One-dimensional Gaussian mixture applied independently per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr")]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, vars: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
            bail!(Dimension, "mixture parameter lists must be non-empty and of equal length");
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-12 {
            bail!(Contract, "mixture weights must be positive and sum to 1");
        }
        if vars.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            bail!(Contract, "mixture variances must be finite and non-negative, means finite");
        }
        Ok(Self { weights, means, vars })
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let second: f64 = (0..self.weights.len()).map(|k| self.weights[k] * (self.vars[k] + self.means[k] * self.means[k])).sum();
        second - m * m
    }

    pub fn sample(&self, shape: impl Into<Vec<usize>>, rng: &mut CounterRng) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            self.means[k] + self.vars[k].sqrt() * rng.normal()
        })
    }

    /// Posterior component probabilities of a noised coordinate.
    fn responsibilities(&self, z: f64, t: f64) -> Result<Vec<f64>> {
        let mut logp = Vec::with_capacity(self.weights.len());
        for k in 0..self.weights.len() {
            let (mz, var) = marginal(t, self.means[k], self.vars[k])?;
            logp.push(self.weights[k].ln() - 0.5 * ((z - mz) * (z - mz) / var + var.ln()));
        }
        let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logp.iter().map(|l| (l - top).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|x| x / s).collect())
    }

    fn combine(&self, z: &Tensor, t: f64, f: impl Fn(f64, f64, f64) -> Result<f64>) -> Result<Tensor> {
        check_t(t)?;
        let mut out = Vec::with_capacity(z.numel());
        for &zi in z.data() {
            let r = self.responsibilities(zi, t)?;
            let mut acc = 0.0;
            for k in 0..r.len() {
                acc += r[k] * f(zi, self.means[k], self.vars[k])?;
            }
            out.push(acc);
        }
        Tensor::new(z.shape().to_vec(), out)
    }

    pub fn optimal_velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.combine(z, t, |zi, m, v| velocity_1d(zi, t, m, v))
    }

    pub fn analytic_score(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.combine(z, t, |zi, m, v| score_1d(zi, t, m, v))
    }
}

/// A data distribution with closed-form velocity and score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleWorld {
    Gaussian(GaussianWorld),
    Mixture(GaussianMixture),
}

impl OracleWorld {
    pub fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            OracleWorld::Gaussian(w) => optimal_velocity(z, t, w),
            OracleWorld::Mixture(m) => m.optimal_velocity(z, t),
        }
    }

    pub fn score(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            OracleWorld::Gaussian(w) => analytic_score(z, t, w),
            OracleWorld::Mixture(m) => m.analytic_score(z, t),
        }
    }

    pub fn sample(&self, shape: impl Into<Vec<usize>>, rng: &mut CounterRng) -> Result<Tensor> {
        match self {
            OracleWorld::Gaussian(w) => w.sample(shape, rng),
            OracleWorld::Mixture(m) => Ok(m.sample(shape, rng)),
        }
    }

    /// Per-coordinate mean and variance of the data; coordinate 0 for
    /// non-scalar Gaussian worlds.
    pub fn moments(&self) -> (f64, f64) {
        match self {
            OracleWorld::Gaussian(w) => (w.mean[0], w.var[0]),
            OracleWorld::Mixture(m) => (m.mean(), m.variance()),
        }
    }
}
