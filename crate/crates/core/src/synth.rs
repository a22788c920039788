//! Synthetic moving-shape sequences, the FSQ1 file format and the dataset
//! directory layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureSequence, FeatureTensor};

pub const FSQ_MAGIC: &[u8; 4] = b"FSQ1";
pub const FSQ_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Triangle,
    Rect,
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Side of the bounding square, pixels.
    pub size: usize,
    pub intensity: f64,
    /// Top-left corner of the bounding square at frame 0, `[x, y]`.
    pub position: [f64; 2],
    /// Pixels per frame, `[vx, vy]`.
    pub velocity: [f64; 2],
    /// Channels the shape is drawn on; all channels when absent.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
}

/// From `frame` on, the shape (every shape when `shape` is absent) moves
/// with `velocity`. `frame` is the first frame displaced by the new velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionChange {
    pub frame: usize,
    pub velocity: [f64; 2],
    #[serde(default)]
    pub shape: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub shapes: Vec<ShapeSpec>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub events: Vec<DirectionChange>,
    #[serde(default)]
    pub seed: u64,
    /// Allows fractional positions and velocities, drawn with bilinear weights.
    #[serde(default)]
    pub bilinear: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return bad("canvas and channel count must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        let integral = |v: f64| v.fract() == 0.0;
        for (i, s) in self.shapes.iter().enumerate() {
            if s.size == 0 {
                return bad(format!("shape {i} has size 0"));
            }
            if !s.intensity.is_finite() || s.position.iter().chain(&s.velocity).any(|v| !v.is_finite()) {
                return bad(format!("shape {i} has non-finite fields"));
            }
            let [x, y] = s.position;
            if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
                return bad(format!("shape {i} starts outside the canvas"));
            }
            if !self.bilinear && !s.position.iter().chain(&s.velocity).all(|&v| integral(v)) {
                return bad(format!("shape {i} has fractional motion without bilinear placement"));
            }
            if let Some(ch) = &s.channels {
                if ch.iter().any(|&c| c >= self.channels) {
                    return bad(format!("shape {i} names a channel out of range"));
                }
            }
        }
        for e in &self.events {
            if e.frame == 0 {
                return bad("direction change at frame 0".into());
            }
            if e.shape.is_some_and(|s| s >= self.shapes.len()) {
                return bad(format!("event refers to missing shape {:?}", e.shape));
            }
            if !e.velocity.iter().all(|v| v.is_finite()) || (!self.bilinear && !e.velocity.iter().all(|&v| integral(v)))
            {
                return bad("event velocity must be finite (and integral without bilinear)".into());
            }
        }
        Ok(())
    }

    /// Top-left position of every shape at every frame.
    pub fn trajectories(&self, frames: usize) -> Vec<Vec<[f64; 2]>> {
        self.shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut pos = s.position;
                let mut vel = s.velocity;
                let mut out = Vec::with_capacity(frames);
                for t in 0..frames {
                    if t > 0 {
                        for e in &self.events {
                            if e.frame == t && e.shape.is_none_or(|k| k == i) {
                                vel = e.velocity;
                            }
                        }
                        pos = [pos[0] + vel[0], pos[1] + vel[1]];
                    }
                    out.push(pos);
                }
                out
            })
            .collect()
    }
}

/// Shape pattern on its bounding square.
fn pattern(kind: ShapeKind, size: usize, i: usize, j: usize) -> f64 {
    match kind {
        ShapeKind::Rect => 1.0,
        // right triangle with the right angle at the bottom left
        ShapeKind::Triangle => {
            if i <= j {
                1.0
            } else {
                0.0
            }
        }
        ShapeKind::Blob => {
            let c = (size as f64 - 1.0) / 2.0;
            let s = (size as f64 / 4.0).max(0.5);
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            (-r2 / (2.0 * s * s)).exp()
        }
    }
}

fn draw(frame: &mut FeatureTensor, shape: &ShapeSpec, pos: [f64; 2]) {
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let (bx, by) = (pos[0].floor(), pos[1].floor());
    let (fx, fy) = (pos[0] - bx, pos[1] - by);
    let taps = [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ];
    let channels: Vec<usize> = match &shape.channels {
        Some(c) => c.clone(),
        None => (0..frame.channels()).collect(),
    };
    for j in 0..shape.size {
        for i in 0..shape.size {
            let v = shape.intensity * pattern(shape.kind, shape.size, i, j);
            if v == 0.0 {
                continue;
            }
            for &(ox, oy, wt) in &taps {
                if wt == 0.0 {
                    continue;
                }
                let x = bx as i64 + i as i64 + ox;
                let y = by as i64 + j as i64 + oy;
                if x < 0 || y < 0 || x >= w || y >= h {
                    continue;
                }
                for &c in &channels {
                    let (x, y) = (x as usize, y as usize);
                    frame.set(c, x, y, frame.get(c, x, y) + wt * v);
                }
            }
        }
    }
}

/// Noise-free frames of the scene.
pub fn render_clean(spec: &SceneSpec, frames: usize) -> Result<FeatureSequence> {
    spec.validate()?;
    if frames < 2 {
        return Err(Error::BadSpec(format!("need at least 2 frames, got {frames}")));
    }
    let traj = spec.trajectories(frames);
    let out = (0..frames)
        .map(|t| {
            let mut f = FeatureTensor::zeros(spec.channels, spec.width, spec.height);
            for (s, path) in spec.shapes.iter().zip(&traj) {
                draw(&mut f, s, path[t]);
            }
            f
        })
        .collect();
    FeatureSequence::new(out)
}

/// Adds i.i.d. Gaussian noise with the scene's sigma, drawn from its seed.
pub fn add_noise(spec: &SceneSpec, clean: &FeatureSequence) -> Result<FeatureSequence> {
    if spec.noise_sigma == 0.0 {
        return Ok(clean.clone());
    }
    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::BadSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = clean
        .frames()
        .iter()
        .map(|f| {
            let (c, w, h) = f.shape();
            let data = f.as_slice().iter().map(|v| v + normal.sample(&mut rng)).collect();
            FeatureTensor::from_vec(c, w, h, data)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSequence::new(frames)
}

pub fn generate_sequence(spec: &SceneSpec, frames: usize) -> Result<FeatureSequence> {
    add_noise(spec, &render_clean(spec, frames)?)
}

/// Clean and noisy renderings of the same scene.
pub fn generate_pair(spec: &SceneSpec, frames: usize) -> Result<(FeatureSequence, FeatureSequence)> {
    let clean = render_clean(spec, frames)?;
    let noisy = add_noise(spec, &clean)?;
    Ok((clean, noisy))
}

pub fn to_bytes(seq: &FeatureSequence) -> Vec<u8> {
    let (c, w, h) = seq.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * seq.len() * c * w * h);
    out.extend_from_slice(FSQ_MAGIC);
    for v in [FSQ_VERSION, c as u32, w as u32, h as u32, seq.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in seq.frames() {
        for v in f.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 4 || &bytes[..4] != FSQ_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let version = word(0) as u32;
    if version != FSQ_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FSQ_VERSION,
        });
    }
    let (c, w, h, t) = (word(1), word(2), word(3), word(4));
    if c == 0 || w == 0 || h == 0 || t == 0 {
        return Err(Error::BadSpec(format!("empty dimensions C={c} W={w} H={h} T={t}")));
    }
    let plane = c
        .checked_mul(w)
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| Error::BadSpec("dimensions overflow".into()))?;
    let expected = plane
        .checked_mul(t)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::BadSpec("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let frames = values
        .chunks_exact(plane)
        .map(|d| FeatureTensor::from_vec(c, w, h, d.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    FeatureSequence::new(frames)
}

pub fn save_sequence(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(seq))?;
    Ok(())
}

pub fn load_sequence(path: &Path) -> Result<FeatureSequence> {
    from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub label: String,
    pub template: SceneSpec,
    pub count: usize,
    /// Each shape's start is offset by a uniform integer in `[-jitter, jitter]`
    /// per axis, then clamped into the canvas.
    #[serde(default)]
    pub jitter: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Fixed number of training sequences per class; overrides the fraction.
    #[serde(default)]
    pub train_per_class: Option<usize>,
}

fn default_train_fraction() -> f64 {
    0.85
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: default_train_fraction(),
            train_per_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default = "default_manifest_version")]
    pub version: u32,
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub split: SplitSpec,
}

fn default_manifest_version() -> u32 {
    MANIFEST_VERSION
}

impl DatasetManifest {
    pub fn from_json(s: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(s).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("version {} (expected {MANIFEST_VERSION})", self.version));
        }
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.frames < 2 {
            return bad(format!("frames {} < 2", self.frames));
        }
        let mut labels: Vec<&str> = self.classes.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate class labels".into());
        }
        for c in &self.classes {
            if c.count == 0 {
                return bad(format!("class {} has count 0", c.label));
            }
            c.template.validate()?;
            if let Some(n) = self.split.train_per_class {
                if n > c.count {
                    return bad(format!("train_per_class {n} exceeds count of {}", c.label));
                }
            }
        }
        let f = self.split.train_fraction;
        if !(0.0..=1.0).contains(&f) {
            return bad(format!("train fraction {f}"));
        }
        Ok(())
    }

    /// Training sequences per class. With a fraction, every class gets the
    /// floor of its share and the leftover of `⌊f·total⌋` goes to the classes
    /// with the largest remainders, lowest index first on ties.
    pub fn train_counts(&self) -> Vec<usize> {
        if let Some(n) = self.split.train_per_class {
            return vec![n; self.classes.len()];
        }
        let f = self.split.train_fraction;
        let total: usize = self.classes.iter().map(|c| c.count).sum();
        let target = ((f * total as f64) + 1e-9).floor() as usize;
        let shares: Vec<f64> = self.classes.iter().map(|c| f * c.count as f64).collect();
        let mut counts: Vec<usize> = shares
            .iter()
            .zip(&self.classes)
            .map(|(s, c)| ((s + 1e-9).floor() as usize).min(c.count))
            .collect();
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = shares[a] - counts[a] as f64;
            let rb = shares[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut left = target.saturating_sub(counts.iter().sum());
        for i in order {
            if left == 0 {
                break;
            }
            if counts[i] < self.classes[i].count {
                counts[i] += 1;
                left -= 1;
            }
        }
        counts
    }

    /// Scene for sequence `index` of class `class`, with its derived seed
    /// and jittered start positions.
    pub fn sequence_spec(&self, class: usize, index: usize) -> Result<SceneSpec> {
        let c = self
            .classes
            .get(class)
            .ok_or_else(|| Error::OutOfRange(format!("class {class}")))?;
        if index >= c.count {
            return Err(Error::OutOfRange(format!("index {index} of class {}", c.label)));
        }
        let seed = sequence_seed(self.seed, class, index);
        let mut spec = c.template.clone();
        spec.seed = seed;
        if c.jitter > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6a09_e667_f3bc_c908));
            let j = c.jitter as i64;
            for s in &mut spec.shapes {
                let dx = rng.random_range(-j..=j) as f64;
                let dy = rng.random_range(-j..=j) as f64;
                s.position[0] = (s.position[0] + dx).clamp(0.0, (spec.width - 1) as f64);
                s.position[1] = (s.position[1] + dy).clamp(0.0, (spec.height - 1) as f64);
            }
        }
        Ok(spec)
    }

    /// Clean and noisy versions of one sequence.
    pub fn generate_pair(&self, class: usize, index: usize) -> Result<(FeatureSequence, FeatureSequence)> {
        generate_pair(&self.sequence_spec(class, index)?, self.frames)
    }

    pub fn generate(&self, class: usize, index: usize) -> Result<FeatureSequence> {
        generate_sequence(&self.sequence_spec(class, index)?, self.frames)
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sequence_seed(master: u64, class: usize, index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ class as u64) ^ index as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub file: String,
    pub class: usize,
    pub label: String,
    pub index: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labels {
    pub classes: Vec<String>,
    pub sequences: Vec<SequenceEntry>,
}

pub fn sequence_file_name(class: usize, index: usize) -> String {
    format!("seq_{class}_{index}.fsq")
}

pub fn labels_for(manifest: &DatasetManifest) -> Labels {
    let train = manifest.train_counts();
    let mut sequences = Vec::new();
    for (ci, c) in manifest.classes.iter().enumerate() {
        for i in 0..c.count {
            sequences.push(SequenceEntry {
                file: sequence_file_name(ci, i),
                class: ci,
                label: c.label.clone(),
                index: i,
                split: if i < train[ci] { Split::Train } else { Split::Test },
            });
        }
    }
    Labels {
        classes: manifest.classes.iter().map(|c| c.label.clone()).collect(),
        sequences,
    }
}

/// Writes `manifest.json`, `labels.json` and one FSQ1 file per sequence.
pub fn generate_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<Labels> {
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    let labels = labels_for(manifest);
    let blobs = labels
        .sequences
        .par_iter()
        .map(|e| manifest.generate(e.class, e.index).map(|s| to_bytes(&s)))
        .collect::<Result<Vec<_>>>()?;
    for (e, b) in labels.sequences.iter().zip(&blobs) {
        fs::write(dir.join(&e.file), b)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&labels)? + "\n")?;
    Ok(labels)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub labels: Labels,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join("manifest.json"))?;
        let text = fs::read_to_string(dir.join("labels.json"))?;
        let labels: Labels = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        if labels.classes.len() != manifest.classes.len() {
            return Err(Error::Manifest("labels.json disagrees with manifest classes".into()));
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.classes.len()
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SequenceEntry> {
        self.labels.sequences.iter().filter(move |e| e.split == split)
    }

    pub fn load(&self, entry: &SequenceEntry) -> Result<FeatureSequence> {
        load_sequence(&self.root.join(&entry.file))
    }

    /// `(class, sequence)` pairs of a split, in file order.
    pub fn load_split(&self, split: Split) -> Result<Vec<(usize, FeatureSequence)>> {
        let entries: Vec<&SequenceEntry> = self.entries(split).collect();
        entries
            .par_iter()
            .map(|e| self.load(e).map(|s| (e.class, s)))
            .collect()
    }
}
