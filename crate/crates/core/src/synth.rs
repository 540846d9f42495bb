//! Synthetic referring-video data: moving coloured shapes with exact
//! per-frame masks and templated expressions. The temporal subset places a
//! same-looking distractor next to the target so only motion tells them
//! apart.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use soc_tensor::Tensor;

use crate::error::{io_err, Result, SocError};
use crate::metrics::BinaryMask;

/// Translation speed in pixels per frame.
pub const SPEED: f64 = 2.0;
/// Radius change of shrinking / growing shapes in pixels per frame.
pub const SCALE_RATE: f64 = 0.5;
pub const MIN_RADIUS: f64 = 5.0;
pub const MAX_RADIUS: f64 = 9.0;
/// Shrinking shapes never drop below this radius.
pub const SMALLEST_RADIUS: f64 = 2.0;
pub const MAX_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
        }
    }

    /// Whether the pixel-centre offset `(dx, dy)` from the shape centre lies
    /// inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Square => dx.abs() <= r && dy.abs() <= r,
            // Upward isosceles triangle: apex at (0, -r), base at y = r.
            Self::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 0.8, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    Left,
    Right,
    Up,
    Down,
    Shrink,
    Grow,
    /// Hidden for the first half of the clip, then moves right.
    AppearThenMove,
}

impl Motion {
    pub const ALL: [Motion; 8] = [
        Motion::Static,
        Motion::Left,
        Motion::Right,
        Motion::Up,
        Motion::Down,
        Motion::Shrink,
        Motion::Grow,
        Motion::AppearThenMove,
    ];

    fn phrases(self) -> &'static [&'static str] {
        match self {
            Self::Static => &["that stays still", "that does not move", "which keeps its place"],
            Self::Left => &["that moves left", "moving to the left", "which slides left"],
            Self::Right => &["that moves right", "moving to the right", "which slides right"],
            Self::Up => &["that moves up", "moving upward", "which rises"],
            Self::Down => &["that moves down", "moving downward", "which sinks"],
            Self::Shrink => &["that shrinks", "that gets smaller", "which becomes smaller"],
            Self::Grow => &["that grows", "that gets bigger", "which becomes bigger"],
            Self::AppearThenMove => &["that appears then moves right", "that shows up later and moves right"],
        }
    }

    /// Per-frame centre velocity.
    fn velocity(self) -> (f64, f64) {
        match self {
            Self::Left => (-1.0, 0.0),
            Self::Right | Self::AppearThenMove => (1.0, 0.0),
            Self::Up => (0.0, -1.0),
            Self::Down => (0.0, 1.0),
            _ => (0.0, 0.0),
        }
    }

    fn growth(self) -> f64 {
        match self {
            Self::Shrink => -1.0,
            Self::Grow => 1.0,
            _ => 0.0,
        }
    }
}

/// First frame on which a shape with this motion is visible.
pub fn first_visible_frame(motion: Motion, frames: usize) -> usize {
    match motion {
        Motion::AppearThenMove => frames / 2,
        _ => 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Appearance,
    Temporal,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Appearance => "appearance",
            Self::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Index into [`COLORS`].
    pub color: usize,
    /// Radius on the first visible frame.
    pub radius: f64,
    /// Centre on the first visible frame.
    pub x: f64,
    pub y: f64,
    pub motion: Motion,
    /// Multiplier on [`SPEED`] / [`SCALE_RATE`]; below 1 only after rescaling.
    pub motion_scale: f64,
}

impl ShapeSpec {
    /// Centre and radius at `frame`, or `None` while hidden.
    pub fn state(&self, frame: usize, frames: usize) -> Option<(f64, f64, f64)> {
        let start = first_visible_frame(self.motion, frames);
        if frame < start {
            return None;
        }
        let dt = (frame - start) as f64;
        let (vx, vy) = self.motion.velocity();
        let step = SPEED * self.motion_scale * dt;
        let r = self.radius + self.motion.growth() * SCALE_RATE * self.motion_scale * dt;
        Some((self.x + vx * step, self.y + vy * step, r))
    }

    pub fn rasterize(&self, frame: usize, frames: usize, height: usize, width: usize) -> BinaryMask {
        match self.state(frame, frames) {
            None => BinaryMask::empty(height, width),
            Some((cx, cy, r)) => BinaryMask::from_fn(height, width, |y, x| {
                self.kind.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r)
            }),
        }
    }

    pub fn appearance(&self) -> (ShapeKind, usize) {
        (self.kind, self.color)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub referred: usize,
    pub subset: Subset,
    pub seed: u64,
}

/// Every word the expression templates can emit.
pub const LEXICON: &[&str] = &[
    "the", "a", "that", "which", "is", "in", "video", "clip", "object", "shape", "stays", "still", "does", "not",
    "move", "keeps", "its", "place", "moves", "moving", "to", "left", "right", "up", "upward", "down",
    "downward", "slides", "rises", "sinks", "shrinks", "grows", "gets", "becomes", "smaller", "bigger",
    "appears", "then", "shows", "later", "and", "circle", "square", "triangle", "red", "green", "blue",
    "yellow", "cyan", "magenta", "orange", "white",
];

const APPEARANCE_TEMPLATES: &[&str] = &[
    "the {color} {kind}",
    "a {color} {kind}",
    "the {kind} that is {color}",
    "the {color} {kind} in the video",
    "the {color} {kind} shape in the clip",
];

const TEMPORAL_TEMPLATES: &[&str] = &["the {color} {kind} {motion}", "a {color} {kind} {motion}", "the {color} {kind} object {motion}"];

fn render(template: &str, shape: &ShapeSpec, motion_phrase: &str) -> String {
    template
        .replace("{color}", COLORS[shape.color].0)
        .replace("{kind}", shape.kind.word())
        .replace("{motion}", motion_phrase)
}

/// One generated clip with its expression and exact full-resolution masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T, 3, H, W]`, values in `[0, 1]`.
    pub clip: Tensor,
    pub expression: String,
    pub masks: Vec<BinaryMask>,
    pub subset: Subset,
    pub scene: SceneSpec,
}

/// Normalized `(cx, cy, w, h)` of the tight bounding box of a mask, with a
/// visibility flag (false for an empty mask, whose box is all zeros).
pub fn mask_box(mask: &BinaryMask) -> ([f64; 4], bool) {
    match mask.bounding_box() {
        None => ([0.0; 4], false),
        Some((x0, y0, x1, y1)) => {
            let (w, h) = (mask.width() as f64, mask.height() as f64);
            let (x0, y0, x1, y1) = (x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64);
            ([0.5 * (x0 + x1) / w, 0.5 * (y0 + y1) / h, (x1 - x0) / w, (y1 - y0) / h], true)
        }
    }
}

fn sample_shape<R: Rng + ?Sized>(rng: &mut R, kind: ShapeKind, color: usize, motion: Motion) -> ShapeSpec {
    ShapeSpec {
        kind,
        color,
        radius: rng.random_range(MIN_RADIUS..=MAX_RADIUS).round(),
        x: 0.0,
        y: 0.0,
        motion,
        motion_scale: 1.0,
    }
}

/// Picks a centre so the shape stays inside the frame on every visible
/// frame, halving the motion until one exists.
fn place<R: Rng + ?Sized>(rng: &mut R, shape: &mut ShapeSpec, frames: usize, height: usize, width: usize) -> Result<()> {
    let start = first_visible_frame(shape.motion, frames);
    let span = (frames - 1 - start) as f64;
    if shape.motion == Motion::Shrink {
        shape.radius = shape.radius.max(SMALLEST_RADIUS + SCALE_RATE * span);
    }
    for attempt in 0..MAX_ATTEMPTS {
        let s = shape.motion_scale;
        let r_max = shape.radius + shape.motion.growth().max(0.0) * SCALE_RATE * s * span;
        let (vx, vy) = shape.motion.velocity();
        let travel = SPEED * s * span;
        let range = |extent: usize, v: f64| {
            let lo = r_max - (v * travel).min(0.0);
            let hi = extent as f64 - r_max - (v * travel).max(0.0);
            (lo.ceil(), hi.floor())
        };
        let (xlo, xhi) = range(width, vx);
        let (ylo, yhi) = range(height, vy);
        if xlo <= xhi && ylo <= yhi {
            shape.x = rng.random_range(xlo..=xhi);
            shape.y = rng.random_range(ylo..=yhi);
            return Ok(());
        }
        if attempt + 1 < MAX_ATTEMPTS {
            shape.motion_scale *= 0.5;
            shape.radius = (shape.radius * 0.75).max(SMALLEST_RADIUS + SCALE_RATE * shape.motion_scale * span);
        }
    }
    Err(SocError::Generation {
        attempts: MAX_ATTEMPTS,
        reason: format!("a {} cannot stay inside a {height}x{width} frame", shape.kind.word()),
    })
}

/// Draws a scene: the referred shape, its distractors, and the expression.
pub fn sample_scene(
    seed: u64,
    subset: Subset,
    num_shapes: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<(SceneSpec, String)> {
    if subset == Subset::Temporal && num_shapes < 2 {
        return Err(SocError::Contract("temporal scenes need at least two shapes".into()));
    }
    if num_shapes == 0 || frames == 0 {
        return Err(SocError::Contract("scenes need at least one shape and one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = *ShapeKind::ALL.choose(&mut rng).expect("non-empty");
    let color = rng.random_range(0..COLORS.len());
    let motion = *Motion::ALL.choose(&mut rng).expect("non-empty");
    let target = sample_shape(&mut rng, kind, color, motion);
    let mut others = Vec::with_capacity(num_shapes - 1);
    if subset == Subset::Temporal {
        let alternatives: Vec<Motion> = Motion::ALL.iter().copied().filter(|&m| m != motion).collect();
        let m = *alternatives.choose(&mut rng).expect("non-empty");
        others.push(sample_shape(&mut rng, kind, color, m));
    }
    while others.len() < num_shapes - 1 {
        let k = *ShapeKind::ALL.choose(&mut rng).expect("non-empty");
        let c = rng.random_range(0..COLORS.len());
        let m = *Motion::ALL.choose(&mut rng).expect("non-empty");
        let clash = match subset {
            Subset::Appearance => (k, c) == (kind, color),
            Subset::Temporal => (k, c, m) == (kind, color, motion),
        };
        if !clash {
            others.push(sample_shape(&mut rng, k, c, m));
        }
    }
    let mut shapes = others;
    shapes.push(target);
    for shape in &mut shapes {
        place(&mut rng, shape, frames, height, width)?;
    }
    let referred = shapes.len() - 1;
    let target = &shapes[referred];
    let expression = match subset {
        Subset::Appearance => render(APPEARANCE_TEMPLATES.choose(&mut rng).expect("non-empty"), target, ""),
        Subset::Temporal => {
            let phrase = target.motion.phrases().choose(&mut rng).expect("non-empty");
            render(TEMPORAL_TEMPLATES.choose(&mut rng).expect("non-empty"), target, phrase)
        }
    };
    Ok((SceneSpec { shapes, referred, subset, seed }, expression))
}

/// Renders a scene. Shapes are painted in order, so the referred shape
/// (painted last) is never occluded and its mask is its full rasterization.
pub fn generate(id: &str, spec: &SceneSpec, expression: &str, frames: usize, height: usize, width: usize) -> Result<Sample> {
    if spec.referred >= spec.shapes.len() {
        return Err(SocError::Contract(format!("referred index {} out of range", spec.referred)));
    }
    let plane = height * width;
    let mut clip = vec![0.0; frames * 3 * plane];
    let mut masks = Vec::with_capacity(frames);
    for t in 0..frames {
        for shape in &spec.shapes {
            let m = shape.rasterize(t, frames, height, width);
            let rgb = COLORS[shape.color].1;
            for (p, _) in m.data().iter().enumerate().filter(|(_, &on)| on) {
                for (c, &v) in rgb.iter().enumerate() {
                    clip[(t * 3 + c) * plane + p] = v;
                }
            }
        }
        masks.push(spec.shapes[spec.referred].rasterize(t, frames, height, width));
    }
    Ok(Sample {
        id: id.to_string(),
        clip: Tensor::new(&[frames, 3, height, width], clip)?,
        expression: expression.to_string(),
        masks,
        subset: spec.subset,
        scene: spec.clone(),
    })
}

/// Scene seed for item `index` of a split; train and validation draw from
/// disjoint streams.
pub fn item_seed(seed: u64, split: Split, index: usize) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((split as u64) << 40)
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 1,
    Val = 2,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub frames: String,
    pub masks: String,
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub subset: Subset,
    pub expression: String,
    pub files: ManifestFiles,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub temporal_fraction: f64,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes_per_scene: usize,
}

impl DatasetSpec {
    pub fn from_config(cfg: &crate::config::Config) -> Self {
        Self {
            n_train: cfg.n_train,
            n_val: cfg.n_val,
            temporal_fraction: cfg.temporal_fraction,
            seed: cfg.seed,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            shapes_per_scene: cfg.shapes_per_scene,
        }
    }

    /// Subset of item `index` out of `count`: the first
    /// `round(temporal_fraction * count)` items are temporal.
    fn subset(&self, index: usize, count: usize) -> Subset {
        let temporal = (self.temporal_fraction * count as f64).round() as usize;
        if index < temporal {
            Subset::Temporal
        } else {
            Subset::Appearance
        }
    }

    /// Generates every sample in memory, in manifest order.
    pub fn samples(&self) -> Result<Vec<(Split, Sample)>> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(SocError::Contract("dataset needs at least one train and one val sample".into()));
        }
        let mut out = Vec::with_capacity(self.n_train + self.n_val);
        for (split, count) in [(Split::Train, self.n_train), (Split::Val, self.n_val)] {
            for i in 0..count {
                let subset = self.subset(i, count);
                let seed = item_seed(self.seed, split, i);
                let (scene, expr) =
                    sample_scene(seed, subset, self.shapes_per_scene, self.frames, self.height, self.width)?;
                let id = format!("{}_{i:05}", split.name());
                out.push((split, generate(&id, &scene, &expr, self.frames, self.height, self.width)?));
            }
        }
        Ok(out)
    }
}

/// Mask lines `id frame RLE...`, one per frame.
pub fn mask_lines(id: &str, masks: &[BinaryMask]) -> String {
    let mut out = String::new();
    for (t, m) in masks.iter().enumerate() {
        let runs: Vec<String> = m.to_rle().iter().map(usize::to_string).collect();
        out.push_str(&format!("{id} {t} {}\n", runs.join(" ")));
    }
    out
}

fn write_masks(path: &Path, sample: &Sample) -> Result<()> {
    fs::write(path, mask_lines(&sample.id, &sample.masks)).map_err(io_err(path))
}

fn read_masks(path: &Path, frames: usize, height: usize, width: usize) -> Result<Vec<BinaryMask>> {
    let bad = |reason: String| SocError::Format { path: path.to_path_buf(), reason };
    let file = File::open(path).map_err(io_err(path))?;
    let mut masks = Vec::with_capacity(frames);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let mut fields = line.split_whitespace();
        let _id = fields.next().ok_or_else(|| bad(format!("line {}: missing id", lineno + 1)))?;
        let frame: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad frame index", lineno + 1)))?;
        if frame != masks.len() {
            return Err(bad(format!("line {}: expected frame {}, found {frame}", lineno + 1, masks.len())));
        }
        let runs = fields
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        masks.push(BinaryMask::from_rle(height, width, &runs).map_err(|e| bad(e.to_string()))?);
    }
    if masks.len() != frames {
        return Err(bad(format!("expected {frames} frames, found {}", masks.len())));
    }
    Ok(masks)
}

/// Writes `frames/{id}.bin`, `masks/{id}.rle` and `manifest.jsonl` under
/// `dir`, creating directories as needed. Returns the manifest path.
pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<PathBuf> {
    let samples = spec.samples()?;
    for sub in ["frames", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let manifest_path = dir.join("manifest.jsonl");
    let file = File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut manifest = BufWriter::new(file);
    for (split, sample) in &samples {
        let files = ManifestFiles {
            frames: format!("frames/{}.bin", sample.id),
            masks: format!("masks/{}.rle", sample.id),
        };
        let frames_path = dir.join(&files.frames);
        let f = File::create(&frames_path).map_err(io_err(&frames_path))?;
        let mut w = BufWriter::new(f);
        sample.clip.write_to(&mut w).map_err(io_err(&frames_path))?;
        w.flush().map_err(io_err(&frames_path))?;
        write_masks(&dir.join(&files.masks), sample)?;
        let entry = ManifestEntry {
            id: sample.id.clone(),
            split: *split,
            subset: sample.subset,
            expression: sample.expression.clone(),
            files,
            scene: sample.scene.clone(),
        };
        let line = serde_json::to_string(&entry).expect("manifest entry serializes");
        writeln!(manifest, "{line}").map_err(io_err(&manifest_path))?;
    }
    manifest.flush().map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.jsonl");
    let file = File::open(&path).map_err(io_err(&path))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| SocError::Format { path: path.clone(), reason: format!("line {}: {e}", lineno + 1) })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads every sample of `split` from a dataset directory.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for entry in read_manifest(dir)?.into_iter().filter(|e| e.split == split) {
        let frames_path = dir.join(&entry.files.frames);
        let file = File::open(&frames_path).map_err(io_err(&frames_path))?;
        let clip = Tensor::read_from(&mut BufReader::new(file))
            .map_err(|e| SocError::Format { path: frames_path.clone(), reason: e.to_string() })?;
        let [t, _, h, w] = clip.shape() else {
            return Err(SocError::Format { path: frames_path, reason: format!("expected a [T,3,H,W] clip, got {:?}", clip.shape()) });
        };
        let masks = read_masks(&dir.join(&entry.files.masks), *t, *h, *w)?;
        out.push(Sample {
            id: entry.id,
            clip,
            expression: entry.expression,
            masks,
            subset: entry.subset,
            scene: entry.scene,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(motion: Motion, frames: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = sample_shape(&mut rng, ShapeKind::Square, 0, motion);
        place(&mut rng, &mut s, frames, 64, 64).unwrap();
        SceneSpec { shapes: vec![s], referred: 0, subset: Subset::Appearance, seed: 7 }
    }

    #[test]
    fn static_shape_has_identical_masks() {
        let spec = single(Motion::Static, 8);
        let s = generate("x", &spec, "the red square", 8, 64, 64).unwrap();
        assert!(s.masks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn moving_right_shifts_box_by_speed() {
        let spec = single(Motion::Right, 8);
        let s = generate("x", &spec, "", 8, 64, 64).unwrap();
        let cxs: Vec<f64> = s.masks.iter().map(|m| mask_box(m).0[0]).collect();
        for w in cxs.windows(2) {
            assert_eq!(w[1] - w[0], 2.0 / 64.0);
        }
    }

    #[test]
    fn appear_then_move_is_hidden_first() {
        let spec = single(Motion::AppearThenMove, 8);
        let s = generate("x", &spec, "", 8, 64, 64).unwrap();
        assert!(s.masks[..4].iter().all(BinaryMask::is_empty));
        assert!(s.masks[4..].iter().all(|m| !m.is_empty()));
    }

    #[test]
    fn tiny_frames_rescale_motion_or_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = sample_shape(&mut rng, ShapeKind::Circle, 1, Motion::Right);
        place(&mut rng, &mut s, 16, 32, 32).unwrap();
        assert!(s.motion_scale < 1.0);
        let mut s = sample_shape(&mut rng, ShapeKind::Circle, 1, Motion::Right);
        assert!(matches!(place(&mut rng, &mut s, 4, 2, 2), Err(SocError::Generation { attempts: 10, .. })));
    }

    #[test]
    fn expressions_use_the_lexicon() {
        for seed in 0..200 {
            for subset in [Subset::Appearance, Subset::Temporal] {
                let (_, e) = sample_scene(seed, subset, 3, 8, 64, 64).unwrap();
                for w in e.split_whitespace() {
                    assert!(LEXICON.contains(&w), "{w} missing from lexicon");
                }
            }
        }
    }

    #[test]
    fn seeds_are_disjoint_between_splits() {
        let train: Vec<u64> = (0..500).map(|i| item_seed(0, Split::Train, i)).collect();
        assert!((0..500).all(|i| !train.contains(&item_seed(0, Split::Val, i))));
    }
}
