//! Synthetic depth-action benchmark. Each class moves one joint of a
//! six-joint stick figure along a class-specific axis and frequency; frames
//! render every joint as a Gaussian blob on a −1 background.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use prnn_tensor::{format, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{invalid, io_err, Error, Result};
use crate::pipeline::checkpoint::{read_json, write_json};
use crate::pipeline::Sample;
use crate::rng;
use crate::skeleton::{Joint, SkeletonAnnotation, REGRESSION_SUBSET};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// First row (as a fraction of the height) hidden by the lower-body mask.
pub const OCCLUSION_START: f64 = 0.6;

const MOVERS: [Joint; 5] = [
    Joint::RightHand,
    Joint::LeftHand,
    Joint::Head,
    Joint::RightFoot,
    Joint::LeftFoot,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occlusion {
    None,
    /// Rows from `OCCLUSION_START · H` down are zeroed in the depth frames;
    /// the skeleton stays complete.
    LowerBody,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

/// Motion pattern of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub class: usize,
    pub moving: Joint,
    pub axis: Axis,
    /// Oscillation cycles over a 20-frame window.
    pub cycles: f64,
    /// Oscillation amplitude in units of the frame side.
    pub amplitude: f64,
    /// Constant displacement of the moving joint, in units of the frame side.
    pub shift: f64,
    pub occlusion: Occlusion,
}

impl ActionSpec {
    /// Class `c` moves one of five joints; past five classes the axis
    /// flips, past ten the frequency rises.
    /// The constant shift points toward the frame center.
    pub fn for_class(class: usize, occlusion: Occlusion) -> Self {
        let moving = MOVERS[class % MOVERS.len()];
        let axis = if (class / MOVERS.len()).is_multiple_of(2) { Axis::Y } else { Axis::X };
        let rest = rest_pose(moving);
        let along = match axis {
            Axis::X => rest[0],
            Axis::Y => rest[1],
        };
        Self {
            class,
            moving,
            axis,
            cycles: 1.0 + 0.5 * (class / (2 * MOVERS.len())) as f64,
            amplitude: 0.08,
            shift: if along > 0.5 { -0.1 } else { 0.1 },
            occlusion,
        }
    }
}

/// Generator settings for a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub side: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// Standard deviation of per-joint positional jitter, in pixels.
    pub jitter: f64,
    /// Blob radius σ in pixels.
    pub blob_sigma: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    pub occlusion: Occlusion,
    pub base_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 10,
            split: [0.6, 0.2, 0.2],
            side: 32,
            t_min: 10,
            t_max: 30,
            jitter: 0.3,
            blob_sigma: 1.5,
            pixel_noise: 0.1,
            occlusion: Occlusion::None,
            base_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return invalid("dataset config", format!("K = {} (need at least 2 classes)", self.num_classes));
        }
        if self.per_class == 0 {
            return invalid("dataset config", "per_class must be positive");
        }
        if self.t_min < 2 || self.t_max < self.t_min {
            return invalid("dataset config", format!("length range [{}, {}]", self.t_min, self.t_max));
        }
        if self.side < 16 {
            return invalid("dataset config", format!("frame side {} < 16", self.side));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return invalid("dataset config", format!("split fractions {:?} must be >= 0 and sum to 1", self.split));
        }
        if !(self.jitter >= 0.0 && self.blob_sigma > 0.0 && self.pixel_noise >= 0.0) {
            return invalid("dataset config", "jitter and pixel_noise >= 0, blob_sigma > 0 required");
        }
        Ok(())
    }

    /// Sequences per class in each split; rounding remainder goes to train.
    pub fn split_counts(&self) -> [usize; 3] {
        let val = (self.split[1] * self.per_class as f64).round() as usize;
        let test = (self.split[2] * self.per_class as f64).round() as usize;
        let val = val.min(self.per_class);
        let test = test.min(self.per_class - val);
        [self.per_class - val - test, val, test]
    }

    pub fn sequence_seed(&self, class: usize, index: usize) -> u64 {
        rng::derive(self.base_seed, &[class as u64, index as u64])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    /// `[T, side, side]`, values in [−1, 1].
    pub frames: Tensor,
    pub skeleton: SkeletonAnnotation,
    pub label: usize,
    pub seed: u64,
}

/// Rest pose as fractions of the frame side, with per-joint depth.
fn rest_pose(joint: Joint) -> [f64; 3] {
    match joint {
        Joint::Head => [0.5, 0.18, 0.8],
        Joint::LeftHand => [0.28, 0.45, 0.6],
        Joint::RightHand => [0.72, 0.45, 0.6],
        Joint::LeftFoot => [0.38, 0.8, 0.4],
        Joint::RightFoot => [0.62, 0.8, 0.4],
        Joint::HipCenter => [0.5, 0.58, 0.5],
    }
}

/// Renders joints as blobs: background −1, each blob rises to its joint's
/// depth at the center; overlapping blobs take the maximum.
pub fn render_frame(joints: &[[f64; 3]], side: usize, sigma: f64) -> Vec<f64> {
    let mut px = vec![-1.0; side * side];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for &[jx, jy, d] in joints {
        for y in 0..side {
            let dy = y as f64 - jy;
            for x in 0..side {
                let dx = x as f64 - jx;
                let v = -1.0 + (d + 1.0) * (-(dx * dx + dy * dy) * inv).exp();
                let p = &mut px[y * side + x];
                if v > *p {
                    *p = v;
                }
            }
        }
    }
    px
}

/// First masked row under the lower-body occlusion.
pub fn occlusion_row(side: usize) -> usize {
    (OCCLUSION_START * side as f64).ceil() as usize
}

/// One sequence as a pure function of `(spec, cfg, seed, length)`.
pub fn generate_sequence(spec: &ActionSpec, cfg: &SynthConfig, seed: u64, length: usize) -> Result<SyntheticSequence> {
    if length < 2 {
        return invalid("sequence length", format!("{length} < 2"));
    }
    let side = cfg.side;
    let s = side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let jitter = Normal::new(0.0, cfg.jitter.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let noise = Normal::new(0.0, cfg.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let joints: Vec<Joint> = REGRESSION_SUBSET.to_vec();
    let mut coords = Vec::with_capacity(length * joints.len() * 3);
    let mut frames = Vec::with_capacity(length * side * side);
    let omega = 2.0 * PI * spec.cycles / 20.0;
    let mask_from = occlusion_row(side);
    for t in 0..length {
        let offset = s * (spec.shift + spec.amplitude * (omega * t as f64 + phase).sin());
        let mut pose = Vec::with_capacity(joints.len());
        for &j in &joints {
            let [fx, fy, d] = rest_pose(j);
            let mut x = fx * s;
            let mut y = fy * s;
            if j == spec.moving {
                match spec.axis {
                    Axis::X => x += offset,
                    Axis::Y => y += offset,
                }
            }
            if cfg.jitter > 0.0 {
                x += jitter.sample(&mut rng);
                y += jitter.sample(&mut rng);
            }
            if !(0.0..=s - 1.0).contains(&x) || !(0.0..=s - 1.0).contains(&y) {
                return invalid("trajectory", format!("{j:?} leaves the frame at t = {t} ({x:.2}, {y:.2})"));
            }
            pose.push([x, y, d]);
        }
        let mut px = render_frame(&pose, side, cfg.blob_sigma);
        if cfg.pixel_noise > 0.0 {
            for p in &mut px {
                *p = (*p + noise.sample(&mut rng)).clamp(-1.0, 1.0);
            }
        }
        if spec.occlusion == Occlusion::LowerBody {
            px[mask_from * side..].fill(0.0);
        }
        frames.extend(px);
        coords.extend(pose.iter().flatten());
    }
    Ok(SyntheticSequence {
        frames: Tensor::new(&[length, side, side], frames)?,
        skeleton: SkeletonAnnotation::new(joints, Tensor::new(&[length, REGRESSION_SUBSET.len(), 3], coords)?)?,
        label: spec.class,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Validation {
                what: "split",
                reason: format!("unknown split {s:?} (train, val, test)"),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Depth frames `[T, H, W]`, relative to the manifest directory.
    pub frames: String,
    /// Skeleton `[T, S, 3]`, relative to the manifest directory.
    pub skeleton: String,
    /// 0-based class index.
    pub label: usize,
    pub seed: u64,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub generator: String,
    pub num_classes: usize,
    pub joints: Vec<Joint>,
    pub config: SynthConfig,
    pub splits: BTreeMap<SplitName, Vec<ManifestEntry>>,
}

impl Manifest {
    pub fn split(&self, name: SplitName) -> &[ManifestEntry] {
        self.splits.get(&name).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Every sequence of the dataset with its split, in manifest order.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<(SplitName, String, SyntheticSequence)>> {
    cfg.validate()?;
    let counts = cfg.split_counts();
    let mut out = Vec::new();
    for class in 0..cfg.num_classes {
        let spec = ActionSpec::for_class(class, cfg.occlusion);
        for index in 0..cfg.per_class {
            let split = if index < counts[0] {
                SplitName::Train
            } else if index < counts[0] + counts[1] {
                SplitName::Val
            } else {
                SplitName::Test
            };
            let seed = cfg.sequence_seed(class, index);
            let mut len_rng = ChaCha8Rng::seed_from_u64(rng::derive(seed, &[rng::tag("length")]));
            let length = len_rng.gen_range(cfg.t_min..=cfg.t_max);
            let seq = generate_sequence(&spec, cfg, seed, length)?;
            out.push((split, format!("c{class}_{index:03}"), seq));
        }
    }
    Ok(out)
}

/// Writes all sequences and the manifest under `dir`.
pub fn build_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    let data = generate_dataset(cfg)?;
    let mut splits: BTreeMap<SplitName, Vec<ManifestEntry>> = BTreeMap::new();
    for name in SplitName::ALL {
        splits.insert(name, Vec::new());
        let sub = dir.join(name.as_str());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
    }
    for (split, id, seq) in data {
        let frames = format!("{}/{id}.frames.ptns", split.as_str());
        let skeleton = format!("{}/{id}.skeleton.ptns", split.as_str());
        format::write(dir.join(&frames), &seq.frames)?;
        format::write(dir.join(&skeleton), seq.skeleton.coords())?;
        splits.entry(split).or_default().push(ManifestEntry {
            id,
            frames,
            skeleton,
            label: seq.label,
            seed: seq.seed,
            length: seq.frames.shape()[0],
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        generator: rng::GENERATOR.to_string(),
        num_classes: cfg.num_classes,
        joints: REGRESSION_SUBSET.to_vec(),
        config: cfg.clone(),
        splits,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A manifest plus the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Accepts either the manifest file or its directory.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        if !file.exists() {
            return invalid("manifest", format!("{} not found", file.display()));
        }
        let manifest: Manifest = read_json(&file)?;
        if manifest.version != MANIFEST_VERSION {
            return invalid("manifest", format!("version {} unsupported", manifest.version));
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn read_frames(&self, entry: &ManifestEntry) -> Result<Tensor> {
        let t = format::read(self.root.join(&entry.frames))?;
        if t.rank() != 3 || t.shape()[0] != entry.length {
            return Err(Error::Shape(format!("{}: frames {:?}, length {}", entry.id, t.shape(), entry.length)));
        }
        Ok(t)
    }

    pub fn read_skeleton(&self, entry: &ManifestEntry) -> Result<SkeletonAnnotation> {
        let coords = format::read(self.root.join(&entry.skeleton))?;
        SkeletonAnnotation::new(self.manifest.joints.clone(), coords)
    }

    /// Samples with skeleton-derived inputs, for training.
    pub fn training_samples(&self, split: SplitName, cfg: &ModelConfig) -> Result<Vec<Sample>> {
        self.check_model(cfg)?;
        self.manifest
            .split(split)
            .iter()
            .map(|e| {
                let frames = self.read_frames(e)?;
                let skeleton = self.read_skeleton(e)?;
                Sample::prepare(&e.id, &frames, Some(&skeleton), e.label, cfg)
            })
            .collect()
    }

    /// Depth-only samples. Skeleton files are never opened.
    pub fn depth_samples(&self, split: SplitName, cfg: &ModelConfig) -> Result<Vec<Sample>> {
        self.check_model(cfg)?;
        self.manifest
            .split(split)
            .iter()
            .map(|e| Sample::prepare(&e.id, &self.read_frames(e)?, None, e.label, cfg))
            .collect()
    }

    fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.num_classes != self.manifest.num_classes {
            return Err(Error::Shape(format!(
                "model has K = {}, dataset has K = {}",
                cfg.num_classes, self.manifest.num_classes
            )));
        }
        Ok(())
    }
}
