//! Binary PPM (P6) frames and frame-directory videos.
//!
//! A video directory holds `frame_0000.ppm`, `frame_0001.ppm`, ... plus a
//! `video.json` sidecar `{"frames": F, "height": H, "width": W}`. Samples are
//! quantized to 8 bits on write.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PixelVideo;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const SIDECAR_NAME: &str = "video.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSidecar {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Largest accepted frame side, to bound allocations on hostile input.
const MAX_SIDE: usize = 1 << 14;

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.ppm")
}

/// Encodes a `[3, H, W]` frame; values are clamped to `[0, 1]`.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    if frame.rank() != 3 || frame.shape()[0] != 3 {
        bail!(Dimension, "PPM frames must be [3, H, W], got {:?}", frame.shape());
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[c * h * w + y * w + x];
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            bail!(Format, "PPM header: expected {what}");
        }
        if self.pos - start > 9 {
            bail!(Format, "PPM header: {what} is too large");
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(s.parse().expect("at most nine digits"))
    }
}

/// Decodes a binary PPM into a `[3, H, W]` frame in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        bail!(Format, "not a binary PPM (missing P6 magic)");
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        bail!(Format, "PPM size {w}x{h} out of range");
    }
    if maxval == 0 || maxval > 65535 {
        bail!(Format, "PPM maxval {maxval} out of range");
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => bail!(Format, "PPM header must end with one whitespace byte"),
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bps;
    let body = &bytes[cur.pos..];
    if body.len() < need {
        bail!(Format, "PPM payload truncated: {} of {need} bytes", body.len());
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let i = ((y * w + x) * 3 + c) * bps;
                let raw = if bps == 1 { body[i] as usize } else { (body[i] as usize) << 8 | body[i + 1] as usize };
                if raw > maxval {
                    bail!(Format, "PPM sample {raw} exceeds maxval {maxval}");
                }
                data[c * h * w + y * w + x] = raw as f64 / scale;
            }
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn parse_sidecar(bytes: &[u8]) -> Result<VideoSidecar> {
    let s: VideoSidecar = serde_json::from_slice(bytes)?;
    if s.frames == 0 || s.height == 0 || s.width == 0 {
        bail!(Format, "video sidecar has an empty extent: {s:?}");
    }
    Ok(s)
}

pub fn write_video_dir(dir: &Path, video: &PixelVideo) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..video.frame_count() {
        fs::write(dir.join(frame_file_name(i)), encode_ppm(&video.frame(i)?)?)?;
    }
    let sidecar = VideoSidecar { frames: video.frame_count(), height: video.height(), width: video.width() };
    fs::write(dir.join(SIDECAR_NAME), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_video_dir(dir: &Path) -> Result<PixelVideo> {
    let sidecar = parse_sidecar(&fs::read(dir.join(SIDECAR_NAME))?)?;
    let mut frames = Vec::with_capacity(sidecar.frames);
    for i in 0..sidecar.frames {
        let f = decode_ppm(&fs::read(dir.join(frame_file_name(i)))?)?;
        if f.shape() != [3, sidecar.height, sidecar.width] {
            bail!(Format, "frame {i} is {:?}, sidecar says {}x{}", f.shape(), sidecar.height, sidecar.width);
        }
        frames.push(f);
    }
    PixelVideo::from_frames(&frames)
}
