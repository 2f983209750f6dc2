//! Frozen teacher network exposing its intermediate feature maps.
//!
//! Level 1 is the stem output; levels 2.. are the residual stages
//! (`conv2_x`, `conv3_x`, ...). Level 1 only ever feeds the level-2 student.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LevelModule, Op, ResidualBlock, Tensor};
use crate::tensorfile::TensorFile;

/// Per-channel statistics of the classification data the teachers were trained on.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet18,
    Resnet50,
    WideResnet50,
    Toy,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Resnet18 => "resnet18",
            Architecture::Resnet50 => "resnet50",
            Architecture::WideResnet50 => "wide_resnet50",
            Architecture::Toy => "toy",
        }
    }

    /// Builds the module list with zeroed parameters.
    fn modules(&self) -> Vec<LevelModule> {
        match self {
            Architecture::Toy => vec![
                LevelModule::stem(8, 3),
                LevelModule::Stage(vec![ResidualBlock::basic(8, 16, 2)]),
                LevelModule::Stage(vec![ResidualBlock::basic(16, 32, 2)]),
            ],
            Architecture::Resnet18 => {
                let mut out = vec![LevelModule::stem(64, 7)];
                let mut in_ch = 64;
                for (i, planes) in [64, 128, 256, 512].into_iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    out.push(LevelModule::Stage(vec![
                        ResidualBlock::basic(in_ch, planes, stride),
                        ResidualBlock::basic(planes, planes, 1),
                    ]));
                    in_ch = planes;
                }
                out
            }
            Architecture::Resnet50 | Architecture::WideResnet50 => {
                let widen = if *self == Architecture::WideResnet50 { 2 } else { 1 };
                let mut out = vec![LevelModule::stem(64, 7)];
                let mut in_ch = 64;
                for (i, (planes, depth)) in [(64, 3), (128, 4), (256, 6), (512, 3)]
                    .into_iter()
                    .enumerate()
                {
                    let stride = if i == 0 { 1 } else { 2 };
                    let (width, out_ch) = (planes * widen, planes * 4);
                    let mut blocks = vec![ResidualBlock::bottleneck(in_ch, width, out_ch, stride)];
                    for _ in 1..depth {
                        blocks.push(ResidualBlock::bottleneck(out_ch, width, out_ch, 1));
                    }
                    out.push(LevelModule::Stage(blocks));
                    in_ch = out_ch;
                }
                out
            }
        }
    }

    /// Feature levels exposed by the full network.
    pub fn num_levels(&self) -> usize {
        self.strides().len()
    }

    fn strides(&self) -> Vec<usize> {
        match self {
            Architecture::Toy => vec![4, 8, 16],
            _ => vec![4, 4, 8, 16, 32],
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(Architecture::Resnet18),
            "resnet50" => Ok(Architecture::Resnet50),
            "wide_resnet50" => Ok(Architecture::WideResnet50),
            "toy" => Ok(Architecture::Toy),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected resnet18 | resnet50 | wide_resnet50 | toy)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLevelSpec {
    pub level: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Where teacher weights come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightsSource {
    File(PathBuf),
    /// `<arch>.safetensors` in the local weights cache.
    Registry,
    /// Deterministic random weights.
    Seed(u64),
}

impl FromStr for WeightsSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "registry" {
            return Ok(WeightsSource::Registry);
        }
        if let Some(seed) = s.strip_prefix("seed:") {
            return seed
                .parse()
                .map(WeightsSource::Seed)
                .map_err(|_| Error::Config(format!("bad weights seed `{seed}`")));
        }
        Ok(WeightsSource::File(PathBuf::from(s)))
    }
}

impl fmt::Display for WeightsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightsSource::File(p) => write!(f, "{}", p.display()),
            WeightsSource::Registry => f.write_str("registry"),
            WeightsSource::Seed(s) => write!(f, "seed:{s}"),
        }
    }
}

/// Directory that registry keys resolve into: `$FEATIMIT_WEIGHTS_DIR`, else
/// `$HOME/.cache/featimit`.
pub fn registry_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("FEATIMIT_WEIGHTS_DIR") {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("featimit")
}

pub fn registry_path(arch: Architecture) -> PathBuf {
    registry_dir().join(format!("{}.safetensors", arch.as_str()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Teacher,
    Student,
}

/// One intermediate activation `channels × height × width` for a single image.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Array3<f32>,
    pub level: usize,
    pub source: FeatureSource,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, level: usize, source: FeatureSource) -> Self {
        FeatureMap {
            data,
            level,
            source,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// A pretrained classifier used as a fixed feature extractor. There is no
/// mutable access to its parameters once constructed.
#[derive(Clone, Debug)]
pub struct TeacherNetwork {
    architecture: Architecture,
    levels: Vec<FeatureLevelSpec>,
    modules: Vec<LevelModule>,
}

impl TeacherNetwork {
    fn from_modules(architecture: Architecture, modules: Vec<LevelModule>) -> Self {
        let levels = modules
            .iter()
            .zip(architecture.strides())
            .enumerate()
            .map(|(i, (m, stride))| FeatureLevelSpec {
                level: i + 1,
                channels: m.out_channels(),
                stride,
            })
            .collect();
        TeacherNetwork {
            architecture,
            levels,
            modules,
        }
    }

    /// Random weights from a fixed seed (fan-in normal convolutions, jittered
    /// normalization statistics).
    pub fn random(architecture: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modules = architecture.modules();
        for m in modules.iter_mut() {
            m.init_fresh(&mut rng);
            jitter_norms(m, &mut rng);
        }
        Self::from_modules(architecture, modules)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn level_specs(&self) -> &[FeatureLevelSpec] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn deepest_stride(&self) -> usize {
        self.levels.last().map_or(1, |l| l.stride)
    }

    /// The teacher module producing `level` (1-based).
    pub fn module(&self, level: usize) -> Option<&LevelModule> {
        level.checked_sub(1).and_then(|i| self.modules.get(i))
    }

    /// Drops every level above `max_level`.
    pub fn truncated(&self, max_level: usize) -> Result<Self> {
        if max_level == 0 || max_level > self.num_levels() {
            return Err(Error::contract(format!(
                "cannot truncate a {}-level teacher to {max_level} levels",
                self.num_levels()
            )));
        }
        Ok(TeacherNetwork {
            architecture: self.architecture,
            levels: self.levels[..max_level].to_vec(),
            modules: self.modules[..max_level].to_vec(),
        })
    }

    /// Stable identifier of the level layout, embedded in checkpoints.
    pub fn level_fingerprint(&self) -> String {
        self.levels
            .iter()
            .map(|l| format!("{}:{}/{}", l.level, l.channels, l.stride))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn checksum(&self) -> String {
        nn::checksum(self.named_modules())
    }

    fn named_modules(&self) -> impl Iterator<Item = (String, &LevelModule)> {
        self.modules.iter().enumerate().map(|(i, m)| {
            let prefix = if i == 0 {
                String::new()
            } else {
                format!("layer{i}")
            };
            (prefix, m)
        })
    }

    /// Writes the weights with torchvision state-dict names.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = TensorFile::default();
        for (prefix, m) in self.named_modules() {
            m.visit_tensors(&prefix, &mut |n, s, d| file.insert(n, s, d));
        }
        file.write(path)
    }

    /// Runs the frozen network on a normalized batch and returns one tensor per level.
    pub fn forward_batch(&self, normalized: &Tensor) -> Vec<Tensor> {
        let mut outs = Vec::with_capacity(self.modules.len());
        let mut x = normalized.clone();
        for m in &self.modules {
            x = m.forward_eval(&x);
            outs.push(x.clone());
        }
        outs
    }

    /// Checks the divisibility contract for an input of `h × w`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.deepest_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::contract(format!(
                "input {h}x{w} must have both sides divisible by the deepest stride {s}"
            )));
        }
        Ok(())
    }
}

fn jitter_norms<R: Rng>(m: &mut LevelModule, rng: &mut R) {
    match m {
        LevelModule::Stem(ops) => jitter_ops(ops, rng),
        LevelModule::Stage(blocks) => {
            for b in blocks {
                jitter_ops(&mut b.main, rng);
                jitter_ops(&mut b.shortcut, rng);
            }
        }
    }
}

fn jitter_ops<R: Rng>(ops: &mut [Op], rng: &mut R) {
    for op in ops {
        if let Op::Norm(bn) = op {
            bn.gamma.mapv_inplace(|_| rng.gen_range(0.8..1.2));
            bn.beta.mapv_inplace(|_| rng.gen_range(-0.05..0.05));
        }
    }
}

/// Loads a frozen teacher.
///
/// File and registry sources must hold torchvision-named tensors
/// (`conv1.weight`, `layer1.0.bn1.running_var`, ...); extra entries such as the
/// classifier head are ignored. Missing or mis-shaped tensors produce a
/// [`Error::Shape`] listing each offending name with expected and found shapes.
pub fn load_teacher(architecture: Architecture, source: &WeightsSource) -> Result<TeacherNetwork> {
    let path = match source {
        WeightsSource::Seed(seed) => return Ok(TeacherNetwork::random(architecture, *seed)),
        WeightsSource::File(p) => p.clone(),
        WeightsSource::Registry => registry_path(architecture),
    };
    if !path.exists() {
        return Err(Error::Load {
            reason: "weights file not found".into(),
            path,
        });
    }
    let file = TensorFile::read(&path)?;
    let mut modules = architecture.modules();
    let mut problems = Vec::new();
    let lookup = |name: &str| file.lookup(name);
    for (i, m) in modules.iter_mut().enumerate() {
        let prefix = if i == 0 {
            String::new()
        } else {
            format!("layer{i}")
        };
        m.load_tensors(&prefix, &lookup, &mut problems);
    }
    if !problems.is_empty() {
        let shown = problems.len().min(12);
        let more = problems.len() - shown;
        return Err(Error::Shape(format!(
            "{} does not match {architecture}: {}{}",
            path.display(),
            problems[..shown].join("; "),
            if more > 0 {
                format!("; ... and {more} more")
            } else {
                String::new()
            }
        )));
    }
    Ok(TeacherNetwork::from_modules(architecture, modules))
}

/// Channel-normalizes a `3 × H × W` image in `[0, 1]` with the ImageNet statistics.
pub fn normalize_image(image: &Array3<f32>) -> Array3<f32> {
    let mut out = image.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Teacher features for levels `1..=L` of one image.
pub fn extract_features(teacher: &TeacherNetwork, image: &Array3<f32>) -> Result<Vec<FeatureMap>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::contract(format!("expected a 3-channel image, got {c}")));
    }
    teacher.check_input(h, w)?;
    let batch = normalize_image(image).insert_axis(Axis(0));
    Ok(teacher
        .forward_batch(&batch)
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            FeatureMap::new(
                t.index_axis_move(Axis(0), 0),
                i + 1,
                FeatureSource::Teacher,
            )
        })
        .collect())
}

/// Teacher features for a batch of raw `[0, 1]` images `(n, 3, H, W)`.
pub fn extract_batch(teacher: &TeacherNetwork, images: &Tensor) -> Result<Vec<Tensor>> {
    let (_, c, h, w) = images.dim();
    if c != 3 {
        return Err(Error::contract(format!("expected 3-channel images, got {c}")));
    }
    teacher.check_input(h, w)?;
    let mut x = images.clone();
    for (ch, mut plane) in x.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (IMAGENET_MEAN[ch], IMAGENET_STD[ch]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    Ok(teacher.forward_batch(&x))
}
