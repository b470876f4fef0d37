//! Procedural edit episodes with exact ground truth.
//!
//! Every episode is a 29-frame clip from a fixed camera: one flat-colored
//! object on a flat background changes linearly over frames 0..=25 and then
//! holds still, so frames 25..=28 are identical. 29 frames encode to exactly
//! 8 latent frames. The instruction is a discrete label derived from the
//! task alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::ppm::write_video_dir;
use crate::codec::PixelVideo;
use crate::error::{bail, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const EPISODE_FRAMES: usize = 29;
/// Frame index at which the transition completes.
pub const TRANSITION_END: usize = 25;
pub const DEFAULT_CANVAS: Canvas = Canvas { height: 32, width: 32 };

pub const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.20, 0.85],
    [0.15, 0.85, 0.90],
];
pub const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.12];

pub const MOVE_DISTANCES: [usize; 3] = [4, 8, 12];
const MOVE_IDS: usize = 4 * MOVE_DISTANCES.len();
const RECOLOR_BASE: usize = MOVE_IDS;
const ADD_BASE: usize = RECOLOR_BASE + PALETTE.len();
const REMOVE_ID: usize = ADD_BASE + PALETTE.len();
/// Size of the closed instruction vocabulary.
pub const VOCAB_SIZE: usize = REMOVE_ID + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    /// Unit step as (dx, dy).
    pub fn step(self) -> (i64, i64) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rect { width: usize, height: usize },
    Disc { radius: usize },
}

impl Shape {
    /// Bounding box (width, height).
    pub fn extent(self) -> (usize, usize) {
        match self {
            Shape::Rect { width, height } => (width, height),
            Shape::Disc { radius } => (2 * radius, 2 * radius),
        }
    }

    fn covers(self, px: usize, py: usize) -> bool {
        match self {
            Shape::Rect { width, height } => px < width && py < height,
            Shape::Disc { radius } => {
                let r = radius as f64;
                let (dx, dy) = (px as f64 + 0.5 - r, py as f64 + 0.5 - r);
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Palette index.
    pub color: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Move,
    Recolor,
    Add,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Edit {
    Move { direction: Direction, distance: usize },
    Recolor { to: usize },
    Add,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTask {
    pub edit: Edit,
    pub object: ObjectSpec,
}

impl EditTask {
    pub fn kind(&self) -> TaskKind {
        match self.edit {
            Edit::Move { .. } => TaskKind::Move,
            Edit::Recolor { .. } => TaskKind::Recolor,
            Edit::Add => TaskKind::Add,
            Edit::Remove => TaskKind::Remove,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.object.color >= PALETTE.len() {
            bail!(Contract, "palette index {} out of range", self.object.color);
        }
        let (w, h) = self.object.shape.extent();
        if w == 0 || h == 0 {
            bail!(Contract, "object has an empty extent");
        }
        match self.edit {
            Edit::Move { distance, .. } if !MOVE_DISTANCES.contains(&distance) => {
                bail!(Contract, "move distance {distance} is not one of {:?}", MOVE_DISTANCES)
            }
            Edit::Recolor { to } if to >= PALETTE.len() || to == self.object.color => {
                bail!(Contract, "recolor target {to} invalid for object color {}", self.object.color)
            }
            _ => Ok(()),
        }
    }

    /// Discrete instruction label; depends only on the edit and, for
    /// additions, the added color.
    pub fn instruction_id(&self) -> usize {
        match self.edit {
            Edit::Move { direction, distance } => {
                let d = Direction::ALL.iter().position(|&x| x == direction).expect("listed");
                let b = MOVE_DISTANCES.iter().position(|&x| x == distance).unwrap_or(0);
                d * MOVE_DISTANCES.len() + b
            }
            Edit::Recolor { to } => RECOLOR_BASE + to,
            Edit::Add => ADD_BASE + self.object.color,
            Edit::Remove => REMOVE_ID,
        }
    }

    /// Random task of the given kind with an object small enough for the
    /// default canvas.
    pub fn sample(kind: TaskKind, rng: &mut CounterRng) -> Self {
        let shape = if rng.below(2) == 0 {
            Shape::Rect { width: 5 + rng.below(5), height: 5 + rng.below(5) }
        } else {
            Shape::Disc { radius: 3 + rng.below(3) }
        };
        let color = rng.below(PALETTE.len());
        let edit = match kind {
            TaskKind::Move => Edit::Move {
                direction: Direction::ALL[rng.below(4)],
                distance: MOVE_DISTANCES[rng.below(MOVE_DISTANCES.len())],
            },
            TaskKind::Recolor => Edit::Recolor { to: (color + 1 + rng.below(PALETTE.len() - 1)) % PALETTE.len() },
            TaskKind::Add => Edit::Add,
            TaskKind::Remove => Edit::Remove,
        };
        Self { edit, object: ObjectSpec { shape, color } }
    }
}

/// One generated clip with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub video: PixelVideo,
    pub task: EditTask,
    pub seed: u64,
    /// Row-major `H × W` mask of pixels the edit may change.
    pub edit_mask: Vec<bool>,
    /// Object top-left corner in the first and the last frame.
    pub start: (usize, usize),
    pub end: (usize, usize),
}

impl Episode {
    pub fn first_frame(&self) -> Tensor {
        self.video.frame(0).expect("non-empty")
    }

    pub fn final_frame(&self) -> Tensor {
        self.video.last_frame()
    }

    pub fn instruction_id(&self) -> usize {
        self.task.instruction_id()
    }
}

/// `(condition, target, instruction)` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSample {
    pub condition: Tensor,
    pub target: Tensor,
    pub instruction: usize,
}

/// Pixels covered by `shape` with top-left at `(x, y)`.
pub fn footprint(shape: Shape, x: usize, y: usize, canvas: Canvas) -> Vec<bool> {
    let (w, h) = shape.extent();
    let mut m = vec![false; canvas.height * canvas.width];
    for py in 0..h {
        for px in 0..w {
            if shape.covers(px, py) && y + py < canvas.height && x + px < canvas.width {
                m[(y + py) * canvas.width + x + px] = true;
            }
        }
    }
    m
}

fn lerp3(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| (1.0 - s) * a[i] + s * b[i])
}

fn render(canvas: Canvas, mask: &[bool], color: [f64; 3], alpha: f64) -> Vec<f64> {
    let n = canvas.height * canvas.width;
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let c = if mask[i] { lerp3(BACKGROUND, color, alpha) } else { BACKGROUND };
        for ch in 0..3 {
            out[ch * n + i] = c[ch];
        }
    }
    out
}

/// Generates the episode for `task`; `seed` places the object.
pub fn gen_episode(task: &EditTask, canvas: Canvas, seed: u64) -> Result<Episode> {
    task.validate()?;
    let (w, h) = task.object.shape.extent();
    let (dx, dy) = match task.edit {
        Edit::Move { direction, distance } => {
            let (sx, sy) = direction.step();
            (sx * distance as i64, sy * distance as i64)
        }
        _ => (0, 0),
    };
    let range = |extent: usize, side: usize, delta: i64| -> Option<(i64, i64)> {
        let lo = 0i64.max(-delta);
        let hi = (side as i64 - extent as i64).min(side as i64 - extent as i64 - delta);
        (lo <= hi).then_some((lo, hi))
    };
    let (Some((x_lo, x_hi)), Some((y_lo, y_hi))) = (range(w, canvas.width, dx), range(h, canvas.height, dy)) else {
        bail!(Contract, "object of {w}x{h} moving by ({dx}, {dy}) does not fit a {}x{} canvas", canvas.width, canvas.height);
    };
    let mut rng = CounterRng::new(seed).fork("episode-placement");
    let x0 = x_lo + rng.below((x_hi - x_lo + 1) as usize) as i64;
    let y0 = y_lo + rng.below((y_hi - y_lo + 1) as usize) as i64;

    let color = PALETTE[task.object.color];
    let mut frames = Vec::with_capacity(EPISODE_FRAMES);
    let pos_at = |k: usize| {
        let s = k.min(TRANSITION_END) as f64 / TRANSITION_END as f64;
        let x = (x0 as f64 + s * dx as f64).round() as usize;
        let y = (y0 as f64 + s * dy as f64).round() as usize;
        (s, x, y)
    };
    for k in 0..EPISODE_FRAMES {
        let (s, x, y) = pos_at(k);
        let mask = footprint(task.object.shape, x, y, canvas);
        let (c, alpha) = match task.edit {
            Edit::Move { .. } => (color, 1.0),
            Edit::Recolor { to } => (lerp3(color, PALETTE[to], s), 1.0),
            Edit::Add => (color, s),
            Edit::Remove => (color, 1.0 - s),
        };
        frames.push(Tensor::new([3, canvas.height, canvas.width], render(canvas, &mask, c, alpha))?);
    }
    let (_, sx, sy) = pos_at(0);
    let (_, ex, ey) = pos_at(EPISODE_FRAMES - 1);
    let first = footprint(task.object.shape, sx, sy, canvas);
    let last = footprint(task.object.shape, ex, ey, canvas);
    let edit_mask = first.iter().zip(&last).map(|(a, b)| *a || *b).collect();
    Ok(Episode {
        video: PixelVideo::from_frames(&frames)?,
        task: *task,
        seed,
        edit_mask,
        start: (sx, sy),
        end: (ex, ey),
    })
}

pub fn gen_pair(task: &EditTask, canvas: Canvas, seed: u64) -> Result<EditSample> {
    let ep = gen_episode(task, canvas, seed)?;
    Ok(EditSample { condition: ep.first_frame(), target: ep.final_frame(), instruction: task.instruction_id() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    pub task: EditTask,
    pub instruction: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub canvas: Canvas,
    pub seed: u64,
    pub episodes: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episode(&self, index: usize) -> Result<Episode> {
        let Some(e) = self.episodes.get(index) else {
            bail!(Contract, "episode {index} out of range ({} episodes)", self.episodes.len());
        };
        gen_episode(&e.task, self.canvas, e.seed)
    }

    pub fn count_by_kind(&self) -> BTreeMap<TaskKind, usize> {
        let mut out = BTreeMap::new();
        for e in &self.episodes {
            *out.entry(e.task.kind()).or_insert(0) += 1;
        }
        out
    }

    /// Episodes `[start, end)` as a new manifest.
    pub fn slice(&self, start: usize, end: usize) -> Manifest {
        let end = end.min(self.episodes.len());
        Manifest { episodes: self.episodes[start.min(end)..end].to_vec(), ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_dir(&self, dir: &Path, with_frames: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_NAME), self.to_json()?)?;
        if with_frames {
            for (i, e) in self.episodes.iter().enumerate() {
                write_video_dir(&dir.join(format!("episode_{:05}", e.id)), &self.episode(i)?.video)?;
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        parse_manifest(&fs::read(dir.join(MANIFEST_NAME))?)
    }
}

/// Parses and validates a manifest document.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(bytes)?;
    if m.version != MANIFEST_VERSION {
        bail!(Format, "unsupported manifest version {}", m.version);
    }
    if m.canvas.height == 0 || m.canvas.width == 0 || m.canvas.height > 4096 || m.canvas.width > 4096 {
        bail!(Format, "manifest canvas {:?} out of range", m.canvas);
    }
    for e in &m.episodes {
        e.task.validate().map_err(|err| crate::Error::Format(format!("episode {}: {err}", e.id)))?;
        if e.instruction != e.task.instruction_id() {
            bail!(Format, "episode {}: instruction {} does not match its task", e.id, e.instruction);
        }
    }
    Ok(m)
}

/// Builds a shuffled manifest with exactly `counts[kind]` episodes per kind.
pub fn build_dataset(counts: &BTreeMap<TaskKind, usize>, canvas: Canvas, seed: u64) -> Manifest {
    let root = CounterRng::new(seed);
    let mut tasks_rng = root.fork("tasks");
    let mut kinds: Vec<TaskKind> = counts.iter().flat_map(|(k, &n)| std::iter::repeat_n(*k, n)).collect();
    let mut shuffle = root.fork("order");
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, shuffle.below(i + 1));
    }
    let episodes = kinds
        .into_iter()
        .enumerate()
        .map(|(id, kind)| {
            let task = EditTask::sample(kind, &mut tasks_rng);
            let seed = root.split(id as u64).fork("episode").next_seed();
            ManifestEntry { id, seed, task, instruction: task.instruction_id() }
        })
        .collect();
    Manifest { version: MANIFEST_VERSION, canvas, seed, episodes }
}

impl CounterRng {
    fn next_seed(&mut self) -> u64 {
        rand_core::RngCore::next_u64(self)
    }
}
