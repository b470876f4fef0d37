//! Velocity-predicting attention network over latent-frame patch tokens.
//!
//! Each latent frame is cut into `patch × patch` patches; all patches of all
//! frames form one token sequence with full self-attention. Tokens carry:
//!
//! - a linear patch embedding,
//! - a learned "is-condition" flag embedding,
//! - a learned instruction embedding shared by every token,
//! - 3D-factorized rotary positions on queries and keys.
//!
//! The timestep goes through a sinusoidal embedding and a two-layer MLP whose
//! output produces a scale and a shift after every normalization.
//!
//! The network body ends in a head plus two time-modulated per-channel skips:
//! one from the noisy input tokens and one from the condition frame's token
//! at the same grid cell. What that sum means is set by [`Prediction`]:
//!
//! - [`Prediction::Velocity`]: the sum is the velocity. Velocities affine in
//!   `z`, the Gaussian-world optimum, are exact.
//! - [`Prediction::Clean`] (default): the sum is the clean frames `x̂₀`,
//!   with the condition skip starting at gain one, and the forward pass
//!   returns `(z - x̂₀) / max(t, T_FLOOR)`. Near `t = 0` the true velocity is
//!   the injected noise divided by `t`. A velocity head has to rebuild that
//!   from a nearly clean input in a range training rarely visits, and the
//!   error lands directly in the output. A clean-frame head only has to say
//!   what the edit changes, which does not depend on `t`.

pub mod rope;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::{FrameRole, LatentVideo};
use crate::error::{bail, Result};
use crate::params::ParamSet;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub use rope::{apply_rope, build_positions, Rope, RopeSplit, TokenPositions};

/// Lower clamp on `t` when a clean-frame prediction becomes a velocity.
pub const T_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    /// Temporal position of the target frame.
    pub target_anchor: usize,
    /// Largest temporal position the model accepts.
    pub max_temporal: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    /// Overrides the default head-dim split across the rotary axes.
    pub rope_split: Option<RopeSplit>,
    pub prediction: Prediction,
}

/// What the network head predicts; the forward pass always returns a
/// velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Velocity,
    #[default]
    Clean,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            patch_size: 4,
            vocab_size: crate::worldgen::VOCAB_SIZE,
            target_anchor: 8,
            max_temporal: 8,
            time_embed_dim: 32,
            mlp_ratio: 4,
            rope_base: 100.0,
            rope_split: None,
            prediction: Prediction::Clean,
        }
    }
}

impl DenoiserConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn token_dim(&self) -> usize {
        self.latent_channels * self.patch_size * self.patch_size
    }

    pub fn rope(&self) -> Result<Rope> {
        let split = self.rope_split.unwrap_or_else(|| RopeSplit::for_head_dim(self.head_dim()));
        Rope::new(self.head_dim(), split, self.rope_base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            bail!(Config, "embed dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads);
        }
        if self.patch_size == 0 || self.latent_channels == 0 || self.vocab_size == 0 {
            bail!(Config, "patch size, channels, and vocabulary must be positive");
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            bail!(Config, "time embedding dim must be even and >= 2");
        }
        if self.target_anchor == 0 || self.target_anchor > self.max_temporal {
            bail!(Config, "target anchor {} must be in 1..={}", self.target_anchor, self.max_temporal);
        }
        self.rope()?;
        Ok(())
    }
}

/// Sinusoidal features of a timestep in `[0, 1]`, scaled by 1000.
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Tensor::new([1, dim], out).expect("sized")
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    rope: Rope,
    pair_swap: Tensor,
}

/// Conditioning for one forward pass.
#[derive(Clone, Debug)]
pub struct FrameLayout {
    /// Temporal position of every latent frame.
    pub temporal: Vec<usize>,
    /// Whether each latent frame is the clean condition frame.
    pub is_condition: Vec<bool>,
}

impl FrameLayout {
    /// Standard layout for a role sequence: condition at 0, reasoning frames
    /// at 1..=r, target at the anchor.
    pub fn from_roles(roles: &[FrameRole], anchor: usize) -> Result<Self> {
        let mut temporal = Vec::with_capacity(roles.len());
        let mut next = 0;
        for (i, role) in roles.iter().enumerate() {
            match role {
                FrameRole::Condition if i == 0 => {
                    temporal.push(0);
                    next = 1;
                }
                FrameRole::Condition => bail!(Contract, "condition frame at index {i}"),
                FrameRole::Reasoning => {
                    temporal.push(next);
                    next += 1;
                }
                FrameRole::Target => temporal.push(anchor),
            }
        }
        if next > anchor {
            bail!(Contract, "{} reasoning frames do not fit below anchor {anchor}", next - 1);
        }
        let is_condition = roles.iter().map(|r| *r == FrameRole::Condition).collect();
        Ok(Self { temporal, is_condition })
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let rope = config.rope()?;
        let pair_swap = rope.pair_swap();
        Ok(Self { config, rope, pair_swap })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Fresh parameters. Output head and input skip start at zero, scales at
    /// one, the condition skip at one for clean-frame prediction and zero
    /// otherwise, every other matrix at `N(0, 1/fan_in)`.
    pub fn init(&self, rng: &mut CounterRng) -> ParamSet {
        let c = &self.config;
        let (d, p, te) = (c.embed_dim, c.token_dim(), c.time_embed_dim);
        let hidden = c.mlp_ratio * d;
        let mut ps = ParamSet::new();
        let dense = |ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut CounterRng| {
            let std = 1.0 / (fan_in as f64).sqrt();
            ps.insert(name, Tensor::from_fn([fan_in, fan_out], |_| std * rng.normal()));
        };
        dense(&mut ps, "patch_embed.w", p, d, rng);
        ps.insert("patch_embed.b", Tensor::zeros([d]));
        ps.insert("cond_flag", Tensor::from_fn([2, d], |_| 0.1 * rng.normal()));
        ps.insert("instr_embed", Tensor::from_fn([c.vocab_size, d], |_| 0.1 * rng.normal()));
        dense(&mut ps, "time_mlp.w1", te, d, rng);
        ps.insert("time_mlp.b1", Tensor::zeros([d]));
        dense(&mut ps, "time_mlp.w2", d, d, rng);
        ps.insert("time_mlp.b2", Tensor::zeros([d]));
        let modulation = |ps: &mut ParamSet, prefix: &str, width: usize, bias: f64| {
            ps.insert(format!("{prefix}.w"), Tensor::zeros([d, width]));
            ps.insert(format!("{prefix}.b"), Tensor::full([width], bias));
        };
        for l in 0..c.layers {
            let b = format!("blocks.{l:02}");
            for (name, fan_in, fan_out) in [
                ("attn.wq", d, d),
                ("attn.wk", d, d),
                ("attn.wv", d, d),
                ("attn.wo", d, d),
                ("mlp.w1", d, hidden),
                ("mlp.w2", hidden, d),
            ] {
                dense(&mut ps, &format!("{b}.{name}"), fan_in, fan_out, rng);
            }
            ps.insert(format!("{b}.attn.bo"), Tensor::zeros([d]));
            ps.insert(format!("{b}.mlp.b1"), Tensor::zeros([hidden]));
            ps.insert(format!("{b}.mlp.b2"), Tensor::zeros([d]));
            modulation(&mut ps, &format!("{b}.mod.scale1"), d, 1.0);
            modulation(&mut ps, &format!("{b}.mod.shift1"), d, 0.0);
            modulation(&mut ps, &format!("{b}.mod.scale2"), d, 1.0);
            modulation(&mut ps, &format!("{b}.mod.shift2"), d, 0.0);
        }
        modulation(&mut ps, "final.scale", d, 1.0);
        modulation(&mut ps, "final.shift", d, 0.0);
        modulation(&mut ps, "skip", p, 0.0);
        let copy = if c.prediction == Prediction::Clean { 1.0 } else { 0.0 };
        modulation(&mut ps, "cond_skip", p, copy);
        ps.insert("head.w", Tensor::zeros([d, p]));
        ps.insert("head.b", Tensor::zeros([p]));
        ps
    }

    /// Grid of patches for a latent frame of `h × w`.
    pub fn patch_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.config.patch_size;
        if h % p != 0 || w % p != 0 {
            bail!(Dimension, "patch size {p} does not divide {h}x{w}");
        }
        Ok((h / p, w / p))
    }

    /// Records the velocity prediction for `z` (`[F', C, h, w]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, z: Var, t: f64, instruction: usize, roles: &[FrameRole]) -> Result<Var> {
        let layout = FrameLayout::from_roles(roles, self.config.target_anchor)?;
        self.forward_with_layout(tape, params, z, t, instruction, &layout)
    }

    pub fn forward_with_layout(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z: Var,
        t: f64,
        instruction: usize,
        layout: &FrameLayout,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 4 || shape[1] != c.latent_channels {
            bail!(Dimension, "denoiser input must be [F', {}, h, w], got {:?}", c.latent_channels, shape);
        }
        let (frames, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if layout.temporal.len() != frames || layout.is_condition.len() != frames {
            bail!(Dimension, "layout describes {} frames, input has {frames}", layout.temporal.len());
        }
        if layout.is_condition.iter().filter(|&&b| b).count() != 1 {
            bail!(Contract, "exactly one frame must be marked as condition");
        }
        if let Some(&tmax) = layout.temporal.iter().max() {
            if tmax > c.max_temporal {
                bail!(Contract, "temporal position {tmax} exceeds maximum {}", c.max_temporal);
            }
        }
        if !(0.0..=1.0).contains(&t) {
            bail!(Contract, "timestep {t} outside [0, 1]");
        }
        if instruction >= c.vocab_size {
            bail!(Contract, "unknown instruction id {instruction} (vocabulary {})", c.vocab_size);
        }
        let p = c.patch_size;
        let (gh, gw) = self.patch_grid(h, w)?;
        let n = frames * gh * gw;
        let (d, heads, dh) = (c.embed_dim, c.heads, c.head_dim());
        let positions = TokenPositions::from_temporal(&layout.temporal, gh, gw);

        // patchify: [F, C, gh, p, gw, p] -> [F, gh, gw, C, p, p] -> [n, C·p·p]
        let x6 = tape.reshape(z, [frames, ch, gh, p, gw, p])?;
        let xp = tape.permute(x6, &[0, 2, 4, 1, 3, 5])?;
        let tokens = tape.reshape(xp, [n, c.token_dim()])?;

        // timestep conditioning
        let tf = tape.input(timestep_features(t, c.time_embed_dim));
        let e = self.dense(tape, params, tf, "time_mlp.w1", "time_mlp.b1")?;
        let e = tape.gelu(e);
        let e = self.dense(tape, params, e, "time_mlp.w2", "time_mlp.b2")?;
        let cond = tape.gelu(e);
        let modulation = |tape: &mut Tape, prefix: &str| -> Result<Var> {
            let m = self.dense(tape, params, cond, &format!("{prefix}.w"), &format!("{prefix}.b"))?;
            let width = tape.value(m).numel();
            tape.reshape(m, [width])
        };

        // token embedding
        let mut x = self.dense(tape, params, tokens, "patch_embed.w", "patch_embed.b")?;
        let flag_table = tape.param(params, "cond_flag")?;
        let flags: Vec<usize> = layout
            .is_condition
            .iter()
            .flat_map(|&b| std::iter::repeat_n(usize::from(b), gh * gw))
            .collect();
        let fe = tape.gather(flag_table, &flags)?;
        x = tape.add(x, fe)?;
        let instr_table = tape.param(params, "instr_embed")?;
        let ie = tape.gather(instr_table, &[instruction])?;
        let ie = tape.reshape(ie, [d])?;
        x = tape.add(x, ie)?;

        let (cos, sin) = self.rope.tables(&positions)?;
        let cos = tape.input(cos);
        let sin = tape.input(sin);
        let swap = tape.input(self.pair_swap.clone());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for l in 0..c.layers {
            let b = format!("blocks.{l:02}");
            let h1 = tape.layer_norm(x)?;
            let s1 = modulation(tape, &format!("{b}.mod.scale1"))?;
            let h1 = tape.mul(h1, s1)?;
            let sh1 = modulation(tape, &format!("{b}.mod.shift1"))?;
            let h1 = tape.add(h1, sh1)?;

            let split_heads = |tape: &mut Tape, v: Var| -> Result<Var> {
                let v = tape.reshape(v, [n, heads, dh])?;
                tape.permute(v, &[1, 0, 2])
            };
            let rotate = |tape: &mut Tape, v: Var| -> Result<Var> {
                let vc = tape.mul(v, cos)?;
                let vs = tape.matmul(v, swap)?;
                let vs = tape.mul(vs, sin)?;
                tape.add(vc, vs)
            };
            let wq = tape.param(params, &format!("{b}.attn.wq"))?;
            let wk = tape.param(params, &format!("{b}.attn.wk"))?;
            let wv = tape.param(params, &format!("{b}.attn.wv"))?;
            let q = tape.matmul(h1, wq)?;
            let q = split_heads(tape, q)?;
            let q = rotate(tape, q)?;
            let k = tape.matmul(h1, wk)?;
            let k = split_heads(tape, k)?;
            let k = rotate(tape, k)?;
            let v = tape.matmul(h1, wv)?;
            let v = split_heads(tape, v)?;
            let kt = tape.transpose_last(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax(scores)?;
            let o = tape.matmul(attn, v)?;
            let o = tape.permute(o, &[1, 0, 2])?;
            let o = tape.reshape(o, [n, d])?;
            let o = self.dense(tape, params, o, &format!("{b}.attn.wo"), &format!("{b}.attn.bo"))?;
            x = tape.add(x, o)?;

            let h2 = tape.layer_norm(x)?;
            let s2 = modulation(tape, &format!("{b}.mod.scale2"))?;
            let h2 = tape.mul(h2, s2)?;
            let sh2 = modulation(tape, &format!("{b}.mod.shift2"))?;
            let h2 = tape.add(h2, sh2)?;
            let m = self.dense(tape, params, h2, &format!("{b}.mlp.w1"), &format!("{b}.mlp.b1"))?;
            let m = tape.gelu(m);
            let m = self.dense(tape, params, m, &format!("{b}.mlp.w2"), &format!("{b}.mlp.b2"))?;
            x = tape.add(x, m)?;
        }

        let hf = tape.layer_norm(x)?;
        let sf = modulation(tape, "final.scale")?;
        let hf = tape.mul(hf, sf)?;
        let shf = modulation(tape, "final.shift")?;
        let hf = tape.add(hf, shf)?;
        let out = self.dense(tape, params, hf, "head.w", "head.b")?;
        let gain = modulation(tape, "skip")?;
        let skip = tape.mul(tokens, gain)?;
        let out = tape.add(out, skip)?;
        // the condition token at the same grid cell, for every frame
        let cf = layout.is_condition.iter().position(|&b| b).expect("checked above");
        let cells = gh * gw;
        let same_cell: Vec<usize> = (0..n).map(|i| cf * cells + i % cells).collect();
        let ctok = tape.gather(tokens, &same_cell)?;
        let cgain = modulation(tape, "cond_skip")?;
        let cskip = tape.mul(ctok, cgain)?;
        let mut out = tape.add(out, cskip)?;
        if c.prediction == Prediction::Clean {
            let resid = tape.sub(tokens, out)?;
            out = tape.scale(resid, 1.0 / t.max(T_FLOOR));
        }

        // unpatchify
        let o6 = tape.reshape(out, [frames, gh, gw, ch, p, p])?;
        let op = tape.permute(o6, &[0, 3, 1, 4, 2, 5])?;
        tape.reshape(op, [frames, ch, h, w])
    }

    fn dense(&self, tape: &mut Tape, params: &ParamSet, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = tape.param(params, w)?;
        let bv = tape.param(params, b)?;
        let y = tape.matmul(x, wv)?;
        tape.add(y, bv)
    }

    /// Velocity for a latent video without keeping the tape.
    pub fn velocity(&self, params: &ParamSet, z: &LatentVideo, t: f64, instruction: usize) -> Result<Tensor> {
        let layout = FrameLayout::from_roles(z.roles(), self.config.target_anchor)?;
        self.velocity_with_layout(params, z.tensor(), t, instruction, &layout)
    }

    pub fn velocity_with_layout(&self, params: &ParamSet, z: &Tensor, t: f64, instruction: usize, layout: &FrameLayout) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.input(z.clone());
        let v = self.forward_with_layout(&mut tape, params, zv, t, instruction, layout)?;
        Ok(tape.value(v).clone())
    }
}
