//! Exact metrics for synthetic edits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;
use crate::worldgen::{Episode, TaskKind, BACKGROUND, PALETTE};

/// Largest centroid error, in pixels, accepted as a successful edit.
pub const CENTROID_TOLERANCE: f64 = 1.5;
/// A removal succeeds when at most this fraction of the edit mask still
/// reads as object.
pub const REMOVE_RESIDUE: f64 = 0.1;
/// Per-channel distance within which a pixel counts as a palette color.
pub const PALETTE_TOLERANCE: f64 = 0.1;

/// Class of the nearest reference color: `None` for background, otherwise
/// the palette index.
pub fn classify(rgb: [f64; 3]) -> Option<usize> {
    let d = |c: [f64; 3]| (0..3).map(|i| (rgb[i] - c[i]).powi(2)).sum::<f64>();
    let mut best = (d(BACKGROUND), None);
    for (k, c) in PALETTE.iter().enumerate() {
        let dk = d(*c);
        if dk < best.0 {
            best = (dk, Some(k));
        }
    }
    best.1
}

fn pixel(frame: &Tensor, i: usize) -> [f64; 3] {
    let n = frame.shape()[1] * frame.shape()[2];
    [frame.data()[i], frame.data()[n + i], frame.data()[2 * n + i]]
}

fn check_frame(frame: &Tensor, mask_len: usize) -> Result<()> {
    if frame.rank() != 3 || frame.shape()[0] != 3 || frame.shape()[1] * frame.shape()[2] != mask_len {
        bail!(Dimension, "frame {:?} does not match a mask of {mask_len} pixels", frame.shape());
    }
    Ok(())
}

/// Object pixels (non-background class) inside `mask`, with their classes.
fn object_pixels(frame: &Tensor, mask: &[bool]) -> Vec<(usize, usize)> {
    (0..mask.len()).filter(|&i| mask[i]).filter_map(|i| classify(pixel(frame, i)).map(|k| (i, k))).collect()
}

fn centroid(pixels: &[(usize, usize)], width: usize) -> (f64, f64) {
    let n = pixels.len() as f64;
    let sx: f64 = pixels.iter().map(|(i, _)| (i % width) as f64).sum();
    let sy: f64 = pixels.iter().map(|(i, _)| (i / width) as f64).sum();
    (sx / n, sy / n)
}

fn majority(pixels: &[(usize, usize)]) -> usize {
    let mut counts = [0usize; PALETTE.len()];
    for (_, k) in pixels {
        counts[*k] += 1;
    }
    (0..counts.len()).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).expect("non-empty palette")
}

/// 1 when the object in `output` sits where the ground-truth final frame
/// puts it (centroid within 1.5 px) with the same majority palette color,
/// judged inside the edit mask. For removals, 1 when the mask is (nearly)
/// background again.
pub fn edit_success_with(output: &Tensor, truth: &Tensor, mask: &[bool]) -> Result<bool> {
    check_frame(output, mask.len())?;
    check_frame(truth, mask.len())?;
    let width = output.shape()[2];
    let got = object_pixels(output, mask);
    let want = object_pixels(truth, mask);
    if want.is_empty() {
        let area = mask.iter().filter(|m| **m).count().max(1);
        return Ok((got.len() as f64) <= REMOVE_RESIDUE * area as f64);
    }
    if got.is_empty() {
        return Ok(false);
    }
    let (a, b) = (centroid(&got, width), centroid(&want, width));
    let dist = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    Ok(dist <= CENTROID_TOLERANCE && majority(&got) == majority(&want))
}

pub fn edit_success(output: &Tensor, episode: &Episode) -> Result<bool> {
    edit_success_with(output, &episode.final_frame(), &episode.edit_mask)
}

/// Mean squared error over pixels outside the mask, averaged over channels.
pub fn identity_mse(output: &Tensor, reference: &Tensor, edit_mask: &[bool]) -> Result<f64> {
    check_frame(output, edit_mask.len())?;
    check_frame(reference, edit_mask.len())?;
    let outside: Vec<usize> = (0..edit_mask.len()).filter(|&i| !edit_mask[i]).collect();
    if outside.is_empty() {
        bail!(Contract, "edit mask covers the whole frame");
    }
    let mut total = 0.0;
    for &i in &outside {
        let (a, b) = (pixel(output, i), pixel(reference, i));
        total += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
    }
    Ok(total / (3 * outside.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    /// Inputs are identical.
    Exact,
    Db(f64),
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Exact => None,
            Psnr::Db(v) => Some(*v),
        }
    }
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Psnr> {
    if a.shape() != b.shape() {
        bail!(Dimension, "psnr shapes differ: {:?} vs {:?}", a.shape(), b.shape());
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel().max(1) as f64;
    Ok(if mse == 0.0 { Psnr::Exact } else { Psnr::Db(-10.0 * mse.log10()) })
}

/// Fraction of pixels within [`PALETTE_TOLERANCE`] (per channel) of the
/// background or a palette color. Stands in for visual coherence.
pub fn palette_conformance(frame: &Tensor) -> Result<f64> {
    if frame.rank() != 3 || frame.shape()[0] != 3 {
        bail!(Dimension, "expected a [3, H, W] frame, got {:?}", frame.shape());
    }
    let n = frame.shape()[1] * frame.shape()[2];
    let near = |p: [f64; 3], c: [f64; 3]| (0..3).all(|i| (p[i] - c[i]).abs() <= PALETTE_TOLERANCE);
    let ok = (0..n).filter(|&i| {
        let p = pixel(frame, i);
        near(p, BACKGROUND) || PALETTE.iter().any(|c| near(p, *c))
    });
    Ok(ok.count() as f64 / n as f64)
}

/// Scores of one evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub id: usize,
    pub kind: TaskKind,
    pub success: bool,
    pub identity_mse: f64,
    pub psnr: Psnr,
    pub palette_conformance: f64,
}

pub fn score_episode(id: usize, output: &Tensor, episode: &Episode) -> Result<EpisodeScore> {
    Ok(EpisodeScore {
        id,
        kind: episode.task.kind(),
        success: edit_success(output, episode)?,
        identity_mse: identity_mse(output, &episode.final_frame(), &episode.edit_mask)?,
        psnr: psnr(output, &episode.final_frame())?,
        palette_conformance: palette_conformance(output)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentError {
    pub mean_error: f64,
    pub variance_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub edit_success: f64,
    pub per_task: BTreeMap<TaskKind, Rate>,
    pub identity_mse: f64,
    /// Mean over non-identical outputs; identical ones are counted in
    /// `psnr_exact`.
    pub psnr_db: Option<f64>,
    pub psnr_exact: usize,
    /// Labeled substitute for visual coherence; see [`palette_conformance`].
    pub palette_conformance: f64,
    pub moments: Option<MomentError>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Aggregates in episode-id order, so the input order never matters.
    pub fn from_scores(scores: &[EpisodeScore], config: serde_json::Value) -> Result<Self> {
        if scores.is_empty() {
            bail!(Contract, "no episodes to report");
        }
        let mut sorted: Vec<&EpisodeScore> = scores.iter().collect();
        sorted.sort_by_key(|s| s.id);
        let n = sorted.len() as f64;
        let mut per_task: BTreeMap<TaskKind, Rate> = BTreeMap::new();
        for s in &sorted {
            let r = per_task.entry(s.kind).or_insert(Rate { successes: 0, total: 0, rate: 0.0 });
            r.total += 1;
            r.successes += usize::from(s.success);
        }
        for r in per_task.values_mut() {
            r.rate = r.successes as f64 / r.total as f64;
        }
        let finite: Vec<f64> = sorted.iter().filter_map(|s| s.psnr.db()).collect();
        let report = Self {
            episodes: sorted.len(),
            edit_success: sorted.iter().filter(|s| s.success).count() as f64 / n,
            per_task,
            identity_mse: sorted.iter().map(|s| s.identity_mse).sum::<f64>() / n,
            psnr_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            psnr_exact: sorted.len() - finite.len(),
            palette_conformance: sorted.iter().map(|s| s.palette_conformance).sum::<f64>() / n,
            moments: None,
            config,
        };
        if !report.identity_mse.is_finite() || !report.palette_conformance.is_finite() || report.psnr_db.is_some_and(|p| !p.is_finite()) {
            bail!(Numeric, "evaluation produced a non-finite aggregate");
        }
        Ok(report)
    }
}
