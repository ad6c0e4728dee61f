//! Synthetic stereo event-camera scenes with exact depth ground truth.
//!
//! A scene is a textured background plane plus a few fronto-parallel
//! textured rectangles. The camera translates parallel to the image plane,
//! so every surface drifts with an image velocity proportional to its
//! inverse depth, and the right view sees each surface shifted left by
//! `baseline / depth` pixels. Events are produced by the usual DVS model:
//! each pixel keeps a reference log-luminance and fires an ON or OFF event
//! whenever the rendered log-luminance moves a full threshold away from it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalx::{read_depth_raster, write_depth_raster};
use crate::events::{make_chunk, read_evt, write_evt, Event, EventStream, InputChunk, Polarity};
use crate::model::DepthMap;

/// Smooth random texture: bilinear interpolation of a value grid in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    cell: f64,
    cols: usize,
    rows: usize,
    values: Vec<f64>,
}

impl Texture {
    pub fn random(rng: &mut impl Rng, width: f64, height: f64, cell: f64) -> Self {
        let cols = (width / cell).ceil() as usize + 2;
        let rows = (height / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { cell, cols, rows, values }
    }

    pub fn flat() -> Self {
        Self { cell: 1.0, cols: 1, rows: 1, values: vec![0.0] }
    }

    /// Texture value at local coordinates; clamps outside the grid.
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let gx = (u / self.cell).clamp(0.0, (self.cols - 1) as f64);
        let gy = (v / self.cell).clamp(0.0, (self.rows - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.cols - 1), (y0 + 1).min(self.rows - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let at = |x: usize, y: usize| self.values[y * self.cols + x];
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// A textured axis-aligned rectangle at constant depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RectObject {
    /// Top-left corner in left-view pixels at `t = 0`.
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Meters.
    pub depth: f64,
    /// Image velocity in pixels per second.
    pub velocity: (f64, f64),
    /// Mean log-luminance and texture amplitude.
    pub level: f64,
    pub contrast: f64,
    pub texture: Texture,
}

impl RectObject {
    fn origin(&self, t: f64, shift: f64) -> (f64, f64) {
        (self.x + self.velocity.0 * t - shift, self.y + self.velocity.1 * t)
    }

    fn covers(&self, px: f64, py: f64, t: f64, shift: f64) -> Option<(f64, f64)> {
        let (ox, oy) = self.origin(t, shift);
        let (u, v) = (px - ox, py - oy);
        (u >= 0.0 && u < self.width && v >= 0.0 && v < self.height).then_some((u, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<RectObject>,
    pub background_depth: f64,
    pub background_velocity: (f64, f64),
    pub background_level: f64,
    pub background_contrast: f64,
    pub background_texture: Texture,
    /// Disparity in pixels is `baseline / depth`.
    pub baseline: f64,
    pub duration_us: u64,
    /// Render step of the event simulator.
    pub step_us: u64,
    /// Log-luminance change per event.
    pub theta: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Scene-local shift of a surface at `depth` in the given view.
    fn shift(&self, view: View, depth: f64) -> f64 {
        match view {
            View::Left => 0.0,
            View::Right => self.baseline / depth,
        }
    }

    /// Index of the nearest object covering the pixel center, if any.
    fn front(&self, px: f64, py: f64, t: f64, view: View) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if let Some((u, v)) = o.covers(px, py, t, self.shift(view, o.depth)) {
                if best.is_none_or(|(j, _, _)| o.depth < self.objects[j].depth) {
                    best = Some((i, u, v));
                }
            }
        }
        best
    }

    /// Log-luminance frame at time `t` seconds.
    pub fn render_log_luminance(&self, t: f64, view: View) -> Vec<f64> {
        let bg_shift = self.shift(view, self.background_depth);
        let (bx, by) = (self.background_velocity.0 * t - bg_shift, self.background_velocity.1 * t);
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let l = match self.front(px, py, t, view) {
                    Some((i, u, v)) => {
                        let o = &self.objects[i];
                        o.level + o.contrast * o.texture.sample(u, v)
                    }
                    None => {
                        // the background texture grid starts a margin away from the canvas
                        let m = BACKGROUND_MARGIN;
                        self.background_level
                            + self.background_contrast * self.background_texture.sample(px - bx + m, py - by + m)
                    }
                };
                out.push(l);
            }
        }
        out
    }

    /// Z-buffered depth of the left view at `t` seconds; fully valid.
    pub fn render_depth(&self, t: f64) -> DepthMap {
        let mut depth = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let d = match self.front(x as f64 + 0.5, y as f64 + 0.5, t, View::Left) {
                    Some((i, _, _)) => self.objects[i].depth,
                    None => self.background_depth,
                };
                depth.push(d as f32);
            }
        }
        let valid = vec![true; depth.len()];
        DepthMap::new(self.height, self.width, depth, valid).expect("depths are finite")
    }

    /// Simulates the event sensor over `[0, duration]`.
    pub fn generate_events(&self, view: View) -> EventStream {
        let n = self.height * self.width;
        let mut reference = self.render_log_luminance(0.0, view);
        let mut prev = reference.clone();
        let mut events = Vec::new();
        let steps = self.duration_us / self.step_us;
        for k in 1..=steps {
            let t_prev = (k - 1) * self.step_us;
            let cur = self.render_log_luminance((k * self.step_us) as f64 * 1e-6, view);
            for i in 0..n {
                let (l0, l1) = (prev[i], cur[i]);
                if l1 == l0 {
                    continue;
                }
                let (x, y) = ((i % self.width) as u16, (i / self.width) as u16);
                let at = |level: f64| {
                    let frac = ((level - l0) / (l1 - l0)).clamp(0.0, 1.0);
                    t_prev + (frac * self.step_us as f64).round() as u64
                };
                while cur[i] - reference[i] >= self.theta {
                    reference[i] += self.theta;
                    events.push(Event { t: at(reference[i]), x, y, polarity: Polarity::On });
                }
                while reference[i] - cur[i] >= self.theta {
                    reference[i] -= self.theta;
                    events.push(Event { t: at(reference[i]), x, y, polarity: Polarity::Off });
                }
            }
            prev = cur;
        }
        events.sort_by_key(|e| e.t);
        EventStream::new(self.height, self.width, events).expect("simulated events stay on the canvas")
    }
}

/// Extra texture border so a drifting background never runs off its grid.
const BACKGROUND_MARGIN: f64 = 16.0;

/// Distribution of scenes used to build a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFamily {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object depth range, meters.
    pub object_depth: (f64, f64),
    pub background_depth: (f64, f64),
    /// Object side length is `U(object_size) / depth` pixels, capped.
    pub object_size: (f64, f64),
    pub max_object_px: f64,
    /// Camera translation speed; a surface at depth `d` moves `ego_speed / d` px/s.
    pub ego_speed: f64,
    pub baseline: f64,
    pub theta: f64,
    pub duration_us: u64,
    pub step_us: u64,
    pub gt_period_us: u64,
    pub texture_cell: f64,
}

impl Default for SceneFamily {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 3,
            max_objects: 5,
            object_depth: (0.5, 4.0),
            background_depth: (7.5, 8.5),
            object_size: (16.0, 32.0),
            max_object_px: 32.0,
            ego_speed: 40.0,
            baseline: 4.0,
            theta: 0.15,
            duration_us: 250_000,
            step_us: 1_000,
            gt_period_us: 50_000,
            texture_cell: 2.0,
        }
    }
}

impl SceneFamily {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| Err(Error::config(field, detail.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("height", "canvas must be non-empty");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects", "exceeds max_objects");
        }
        if !(self.object_depth.0 > 0.0 && self.object_depth.0 <= self.object_depth.1) {
            return bad("object_depth", "need 0 < lo <= hi");
        }
        if !(self.background_depth.0 > 0.0 && self.background_depth.0 <= self.background_depth.1) {
            return bad("background_depth", "need 0 < lo <= hi");
        }
        if self.step_us == 0 || self.step_us > 1_000 {
            return bad("step_us", "render step must lie in (0, 1000] us");
        }
        if self.gt_period_us == 0 || self.duration_us % self.gt_period_us != 0 {
            return bad("gt_period_us", "must divide the duration");
        }
        if !(self.theta > 0.0) {
            return bad("theta", "must be positive");
        }
        Ok(())
    }

    /// Draws one scene.
    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = (angle.cos(), angle.sin());
        let duration = self.duration_us as f64 * 1e-6;
        let n = rng.random_range(self.min_objects..=self.max_objects);
        let objects = (0..n)
            .map(|_| {
                let depth = rng.random_range(self.object_depth.0..=self.object_depth.1);
                let side = |rng: &mut ChaCha8Rng| {
                    (rng.random_range(self.object_size.0..=self.object_size.1) / depth).clamp(2.0, self.max_object_px)
                };
                let (w, h) = (side(&mut rng), side(&mut rng));
                let speed = self.ego_speed / depth;
                let velocity = (speed * dir.0, speed * dir.1);
                // place the object so its center stays on the canvas at mid-chunk
                let cx = rng.random_range(0.0..self.width as f64) - velocity.0 * duration / 2.0;
                let cy = rng.random_range(0.0..self.height as f64) - velocity.1 * duration / 2.0;
                let level = rng.random_range(-0.5..=0.5);
                let contrast = rng.random_range(0.6..=1.0);
                let texture = Texture::random(&mut rng, w, h, self.texture_cell);
                RectObject { x: cx - w / 2.0, y: cy - h / 2.0, width: w, height: h, depth, velocity, level, contrast, texture }
            })
            .collect();
        let background_depth = rng.random_range(self.background_depth.0..=self.background_depth.1);
        let bg_speed = self.ego_speed / background_depth;
        let m = 2.0 * BACKGROUND_MARGIN;
        let background_texture =
            Texture::random(&mut rng, self.width as f64 + m, self.height as f64 + m, self.texture_cell * 1.5);
        SceneSpec {
            height: self.height,
            width: self.width,
            objects,
            background_depth,
            background_velocity: (bg_speed * dir.0, bg_speed * dir.1),
            background_level: rng.random_range(-0.3..=0.3),
            background_contrast: rng.random_range(0.4..=0.8),
            background_texture,
            baseline: self.baseline,
            duration_us: self.duration_us,
            step_us: self.step_us,
            theta: self.theta,
            seed,
        }
    }
}

/// One generated scene: both event streams and the depth sequence sampled
/// every `gt_period_us`, the last entry at the end of the chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub left: EventStream,
    pub right: EventStream,
    pub depth: Vec<DepthMap>,
}

pub fn generate_scene(family: &SceneFamily, seed: u64) -> SceneSample {
    let spec = family.sample(seed);
    let depth = (0..=family.duration_us / family.gt_period_us)
        .map(|k| spec.render_depth((k * family.gt_period_us) as f64 * 1e-6))
        .collect();
    SceneSample { left: spec.generate_events(View::Left), right: spec.generate_events(View::Right), depth }
}

fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// Seeded 80/20 partition of `0..count`.
pub fn split_indices(seed: u64, count: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4c49_5400_0000);
    idx.shuffle(&mut rng);
    let n_train = (count * 4).div_ceil(5);
    let (train, test) = idx.split_at(n_train);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: usize,
    pub seed: u64,
    pub left: String,
    pub right: String,
    pub depth: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub family: SceneFamily,
    pub n_frames: usize,
    pub frame_us: u64,
    pub samples: Vec<ManifestSample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Writes `count` scenes under `out_dir` plus `manifest.json`.
pub fn make_dataset(family: &SceneFamily, count: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    family.validate()?;
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut samples = Vec::with_capacity(count);
    for (id, s) in sample_seeds(seed, count).into_iter().enumerate() {
        let scene = generate_scene(family, s);
        let left = format!("{id:05}_left.evt");
        let right = format!("{id:05}_right.evt");
        write_evt(&scene.left, &out_dir.join(&left))?;
        write_evt(&scene.right, &out_dir.join(&right))?;
        let depth = scene
            .depth
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let name = format!("{id:05}_depth_{k}.f32");
                write_depth_raster(d, &out_dir.join(&name)).map(|_| name)
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(ManifestSample { id, seed: s, left, right, depth });
    }
    let (train, test) = split_indices(seed, count);
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed,
        family: family.clone(),
        n_frames: (family.duration_us / family.gt_period_us) as usize,
        frame_us: family.gt_period_us,
        samples,
        train,
        test,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(Error::io(&path))?;
    Ok(manifest)
}

/// Network-ready sample: binned chunks and the end-of-chunk depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub left: InputChunk,
    pub right: InputChunk,
    pub gt: DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    fn to_sample(scene: &SceneSample, n_frames: usize, frame_us: u64) -> Sample {
        Sample {
            left: make_chunk(&scene.left, 0, n_frames, frame_us),
            right: make_chunk(&scene.right, 0, n_frames, frame_us),
            gt: scene.depth.last().expect("depth sequence is non-empty").clone(),
        }
    }

    /// Builds the same dataset as [`make_dataset`] without touching disk.
    pub fn generate(family: &SceneFamily, count: usize, seed: u64) -> Result<Self> {
        family.validate()?;
        let n_frames = (family.duration_us / family.gt_period_us) as usize;
        let samples = sample_seeds(seed, count)
            .into_iter()
            .map(|s| Self::to_sample(&generate_scene(family, s), n_frames, family.gt_period_us))
            .collect();
        let (train, test) = split_indices(seed, count);
        Ok(Self { samples, train, test })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let path = |name: &str| -> PathBuf { dir.join(name) };
        let samples = manifest
            .samples
            .iter()
            .map(|m| {
                let last = m.depth.last().ok_or_else(|| Error::Format {
                    path: path("manifest.json").display().to_string(),
                    detail: format!("sample {} has no depth maps", m.id),
                })?;
                let scene = SceneSample {
                    left: read_evt(&path(&m.left))?,
                    right: read_evt(&path(&m.right))?,
                    depth: vec![read_depth_raster(&path(last))?],
                };
                Ok(Self::to_sample(&scene, manifest.n_frames, manifest.frame_us))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, train: manifest.train, test: manifest.test })
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().map(|&i| &self.samples[i])
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &Sample> {
        self.test.iter().map(|&i| &self.samples[i])
    }

    /// Mean ground-truth depth over all valid training pixels.
    pub fn train_mean_depth(&self) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in self.train_samples() {
            for (&d, &v) in s.gt.depth.iter().zip(&s.gt.valid) {
                if v {
                    sum += d as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(sum / n as f64)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.format_version),
        });
    }
    Ok(manifest)
}
