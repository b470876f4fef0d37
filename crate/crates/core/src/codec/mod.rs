//! Causal block-mean video codec.
//!
//! The first pixel frame is encoded on its own; every following chunk of four
//! frames collapses to its per-pixel mean. A video of `F` frames therefore
//! yields `(F - 1) / 4 + 1` latent frames. Decoding emits one frame for the
//! leading latent and four identical frames for every other latent, so a
//! chunk made of four copies of the same image round-trips bit-exactly. That
//! is what makes the repeat-4 target encoding lossless.
//!
//! Optionally the codec also averages 2×2 pixel blocks (`spatial_factor = 2`)
//! and lifts the pixel channels into a wider latent channel space through a
//! seeded matrix with orthonormal columns.

pub mod ppm;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Pixel frames folded into one latent frame after the first.
pub const TEMPORAL_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameRole {
    Condition,
    Reasoning,
    Target,
}

/// Number of latent frames for a video of `frames` pixel frames.
pub fn latent_frame_count(frames: usize) -> Result<usize> {
    if frames == 0 || (frames - 1) % TEMPORAL_FACTOR != 0 {
        bail!(Contract, "pixel frame count {frames} is not 1 + 4k");
    }
    Ok((frames - 1) / TEMPORAL_FACTOR + 1)
}

/// Pixel frames produced by decoding `latents` latent frames.
pub fn pixel_frame_count(latents: usize) -> usize {
    if latents == 0 {
        0
    } else {
        1 + TEMPORAL_FACTOR * (latents - 1)
    }
}

/// Frames in pixel space, stored as `[F, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelVideo {
    frames: Tensor,
}

impl PixelVideo {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 4 || frames.shape()[0] == 0 {
            bail!(Dimension, "pixel video must be [F>=1, C, H, W], got {:?}", frames.shape());
        }
        Ok(Self { frames })
    }

    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        let Some(first) = frames.first() else {
            bail!(Contract, "a video needs at least one frame");
        };
        if first.rank() != 3 {
            bail!(Dimension, "frames must be [C, H, W], got {:?}", first.shape());
        }
        let mut shape = vec![1];
        shape.extend_from_slice(first.shape());
        let parts: Vec<Tensor> = frames.iter().map(|f| f.reshape(shape.clone())).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Self::new(Tensor::concat_outer(&refs)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Frame `i` as `[C, H, W]`.
    pub fn frame(&self, i: usize) -> Result<Tensor> {
        let f = self.frames.slice_outer(i, i + 1)?;
        f.reshape(self.frames.shape()[1..].to_vec())
    }

    pub fn last_frame(&self) -> Tensor {
        self.frame(self.frame_count() - 1).expect("non-empty video")
    }
}

/// Codec output `[F', C, h, w]` with one role tag per latent frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    tensor: Tensor,
    roles: Vec<FrameRole>,
}

impl LatentVideo {
    /// Validates the role layout: one condition frame at index 0, reasoning
    /// frames in the middle, and at most one target frame at the end.
    pub fn new(tensor: Tensor, roles: Vec<FrameRole>) -> Result<Self> {
        if tensor.rank() != 4 {
            bail!(Dimension, "latent video must be [F', C, h, w], got {:?}", tensor.shape());
        }
        if roles.len() != tensor.shape()[0] {
            bail!(Dimension, "{} roles for {} latent frames", roles.len(), tensor.shape()[0]);
        }
        if roles.first() != Some(&FrameRole::Condition) {
            bail!(Contract, "latent frame 0 must be the condition frame");
        }
        for (i, r) in roles.iter().enumerate().skip(1) {
            match r {
                FrameRole::Condition => bail!(Contract, "second condition frame at index {i}"),
                FrameRole::Target if i + 1 != roles.len() => {
                    bail!(Contract, "target frame at index {i} is not last")
                }
                _ => {}
            }
        }
        Ok(Self { tensor, roles })
    }

    /// Same roles, new payload of identical shape.
    pub fn with_tensor(&self, tensor: Tensor) -> Result<Self> {
        if tensor.shape() != self.tensor.shape() {
            bail!(Dimension, "payload {:?} does not match {:?}", tensor.shape(), self.tensor.shape());
        }
        Ok(Self { tensor, roles: self.roles.clone() })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn roles(&self) -> &[FrameRole] {
        &self.roles
    }

    pub fn frame_count(&self) -> usize {
        self.roles.len()
    }

    /// `[C, h, w]` of one latent frame.
    pub fn frame_shape(&self) -> &[usize] {
        &self.tensor.shape()[1..]
    }

    /// Frame `i` as `[C, h, w]`.
    pub fn frame(&self, i: usize) -> Result<Tensor> {
        self.tensor.slice_outer(i, i + 1)?.reshape(self.frame_shape().to_vec())
    }

    pub fn has_target(&self) -> bool {
        self.roles.last() == Some(&FrameRole::Target)
    }

    /// Number of reasoning frames.
    pub fn reasoning_len(&self) -> usize {
        self.roles.iter().filter(|r| **r == FrameRole::Reasoning).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub pixel_channels: usize,
    pub latent_channels: usize,
    pub spatial_factor: usize,
    pub lift_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { pixel_channels: 3, latent_channels: 3, spatial_factor: 1, lift_seed: 0 }
    }
}

/// Encoder/decoder pair between pixel videos and latent videos.
pub trait VideoCodec {
    fn encode_video(&self, video: &PixelVideo) -> Result<LatentVideo>;
    fn decode(&self, latent: &LatentVideo) -> Result<PixelVideo>;

    /// Encodes an edit pair as the two-latent video `[c, p, p, p, p]`.
    fn encode_pair(&self, condition: &Tensor, target: &Tensor) -> Result<LatentVideo> {
        if condition.shape() != target.shape() {
            bail!(Dimension, "pair frames differ: {:?} vs {:?}", condition.shape(), target.shape());
        }
        let frames = [condition, target, target, target, target].map(Clone::clone);
        self.encode_video(&PixelVideo::from_frames(&frames)?)
    }

    /// Encodes a single frame as a condition-only latent.
    fn encode_condition(&self, condition: &Tensor) -> Result<LatentVideo> {
        self.encode_video(&PixelVideo::from_frames(std::slice::from_ref(condition))?)
    }

    /// The last decoded pixel frame of a latent that carries a target.
    fn decode_edit(&self, latent: &LatentVideo) -> Result<Tensor> {
        if !latent.has_target() {
            bail!(Contract, "latent has no target frame to decode");
        }
        Ok(self.decode(latent)?.last_frame())
    }
}

/// First-frame passthrough plus per-chunk temporal means.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMeanCodec {
    config: CodecConfig,
    /// `[C, Cpix]` with orthonormal columns; `None` when the channel counts
    /// agree and the lift is the identity.
    lift: Option<Tensor>,
}

/// Mean of four values, summed pairwise so four equal inputs return that
/// input exactly.
fn mean4(a: f64, b: f64, c: f64, d: f64) -> f64 {
    ((a + b) + (c + d)) * 0.25
}

impl BlockMeanCodec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        if config.pixel_channels == 0 || config.latent_channels < config.pixel_channels {
            bail!(
                Config,
                "latent channels ({}) must be >= pixel channels ({}) > 0",
                config.latent_channels,
                config.pixel_channels
            );
        }
        if !matches!(config.spatial_factor, 1 | 2) {
            bail!(Config, "spatial factor must be 1 or 2, got {}", config.spatial_factor);
        }
        let lift = if config.latent_channels == config.pixel_channels {
            None
        } else {
            Some(orthonormal_columns(config.latent_channels, config.pixel_channels, config.lift_seed))
        };
        Ok(Self { config, lift })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    /// Latent `[C, h, w]` for a pixel frame of `height × width`.
    pub fn latent_frame_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        let f = self.config.spatial_factor;
        if height % f != 0 || width % f != 0 {
            bail!(Dimension, "{height}x{width} is not divisible by spatial factor {f}");
        }
        Ok([self.config.latent_channels, height / f, width / f])
    }

    pub fn lift_matrix(&self) -> Option<&Tensor> {
        self.lift.as_ref()
    }

    /// Pixel channels `[Cpix, n]` → latent channels `[C, n]`.
    pub fn lift(&self, pixels: &Tensor) -> Result<Tensor> {
        match &self.lift {
            None => Ok(pixels.clone()),
            Some(q) => q.matmul(pixels),
        }
    }

    /// Latent channels `[C, n]` → pixel channels `[Cpix, n]`.
    pub fn project(&self, latent: &Tensor) -> Result<Tensor> {
        match &self.lift {
            None => Ok(latent.clone()),
            Some(q) => q.permute(&[1, 0])?.matmul(latent),
        }
    }

    fn encode_frame(&self, frame: &[f64], c: usize, h: usize, w: usize) -> Result<Tensor> {
        let f = self.config.spatial_factor;
        let (lh, lw) = (h / f, w / f);
        let pooled = if f == 1 {
            frame.to_vec()
        } else {
            let mut out = Vec::with_capacity(c * lh * lw);
            for ch in 0..c {
                for y in 0..lh {
                    for x in 0..lw {
                        let at = |dy: usize, dx: usize| frame[ch * h * w + (2 * y + dy) * w + 2 * x + dx];
                        out.push(mean4(at(0, 0), at(0, 1), at(1, 0), at(1, 1)));
                    }
                }
            }
            out
        };
        let lifted = self.lift(&Tensor::new([c, lh * lw], pooled)?)?;
        lifted.reshape([self.config.latent_channels, lh, lw])
    }

    fn decode_frame(&self, latent: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        let c = self.config.pixel_channels;
        let pix = self.project(&Tensor::new([self.config.latent_channels, h * w], latent.to_vec())?)?;
        let f = self.config.spatial_factor;
        if f == 1 {
            return Ok(pix.into_data());
        }
        let (ph, pw) = (h * f, w * f);
        let src = pix.data();
        let mut out = vec![0.0; c * ph * pw];
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    out[ch * ph * pw + y * pw + x] = src[ch * h * w + (y / f) * w + x / f];
                }
            }
        }
        Ok(out)
    }
}

impl VideoCodec for BlockMeanCodec {
    fn encode_video(&self, video: &PixelVideo) -> Result<LatentVideo> {
        let frames = video.frame_count();
        let latents = latent_frame_count(frames)?;
        let (c, h, w) = (video.channels(), video.height(), video.width());
        if c != self.config.pixel_channels {
            bail!(Dimension, "video has {c} channels, codec expects {}", self.config.pixel_channels);
        }
        let [lc, lh, lw] = self.latent_frame_shape(h, w)?;
        let per = c * h * w;
        let src = video.tensor().data();
        let frame = |i: usize| &src[i * per..(i + 1) * per];
        let mut data = Vec::with_capacity(latents * lc * lh * lw);
        data.extend(self.encode_frame(frame(0), c, h, w)?.into_data());
        for chunk in 0..latents - 1 {
            let base = 1 + TEMPORAL_FACTOR * chunk;
            let (a, b, cc, d) = (frame(base), frame(base + 1), frame(base + 2), frame(base + 3));
            let mean: Vec<f64> = (0..per).map(|i| mean4(a[i], b[i], cc[i], d[i])).collect();
            data.extend(self.encode_frame(&mean, c, h, w)?.into_data());
        }
        let roles = (0..latents)
            .map(|i| match i {
                0 => FrameRole::Condition,
                i if i + 1 == latents => FrameRole::Target,
                _ => FrameRole::Reasoning,
            })
            .collect();
        LatentVideo::new(Tensor::new([latents, lc, lh, lw], data)?, roles)
    }

    fn decode(&self, latent: &LatentVideo) -> Result<PixelVideo> {
        let shape = latent.tensor().shape();
        let (lc, lh, lw) = (shape[1], shape[2], shape[3]);
        if lc != self.config.latent_channels {
            bail!(Dimension, "latent has {lc} channels, codec expects {}", self.config.latent_channels);
        }
        let f = self.config.spatial_factor;
        let per = lc * lh * lw;
        let src = latent.tensor().data();
        let mut data = Vec::new();
        for i in 0..latent.frame_count() {
            let frame = self.decode_frame(&src[i * per..(i + 1) * per], lh, lw)?;
            let copies = if i == 0 { 1 } else { TEMPORAL_FACTOR };
            for _ in 0..copies {
                data.extend_from_slice(&frame);
            }
        }
        let frames = pixel_frame_count(latent.frame_count());
        PixelVideo::new(Tensor::new([frames, self.config.pixel_channels, lh * f, lw * f], data)?)
    }
}

/// `[rows, cols]` matrix with orthonormal columns from Gram-Schmidt on a
/// seeded Gaussian draw.
fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = CounterRng::new(seed).fork("codec-lift");
    loop {
        let mut cols_v: Vec<Vec<f64>> = (0..cols).map(|_| (0..rows).map(|_| rng.normal()).collect()).collect();
        let mut ok = true;
        for j in 0..cols {
            for _ in 0..2 {
                for k in 0..j {
                    let dot: f64 = (0..rows).map(|i| cols_v[j][i] * cols_v[k][i]).sum();
                    for i in 0..rows {
                        cols_v[j][i] -= dot * cols_v[k][i];
                    }
                }
            }
            let norm = cols_v[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            cols_v[j].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return Tensor::from_fn([rows, cols], |idx| cols_v[idx % cols][idx / cols]);
        }
    }
}
