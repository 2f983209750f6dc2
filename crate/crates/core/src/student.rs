//! Separate student blocks, one per (scale, level).
//!
//! Block `l` reads the teacher's level `l-1` activation and predicts the
//! teacher's level `l` activation. Blocks never see each other's outputs, so
//! any subset of a bank can be evaluated or dropped without retraining.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Architecture, FeatureLevelSpec, FeatureMap, FeatureSource, TeacherNetwork};
use crate::error::{Error, Result};
use crate::nn::{self, LevelModule, Tensor};
use crate::tensorfile::TensorFile;

pub const CHECKPOINT_FORMAT: &str = "featimit-scale-bank";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Input-size tag of an image-pyramid level (square side in pixels).
pub type ScaleId = usize;

/// Identifies a block across banks: `(scale, level)`. Ordered by scale then level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub scale: ScaleId,
    pub level: usize,
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}/l{}", self.scale, self.level)
    }
}

#[derive(Clone, Debug)]
pub struct StudentBlock {
    pub level: usize,
    pub scale: ScaleId,
    pub module: LevelModule,
}

impl StudentBlock {
    pub fn id(&self) -> BlockId {
        BlockId {
            scale: self.scale,
            level: self.level,
        }
    }

    /// Inference-mode forward on a batch of teacher level `l-1` activations.
    pub fn forward_batch(&self, input: &Tensor) -> Tensor {
        self.module.forward_eval(input)
    }

    pub fn checksum(&self) -> String {
        nn::checksum([(format!("level{}", self.level), &self.module)])
    }
}

/// The student group for one input scale: blocks for levels `2..=L`
/// (possibly pruned to a subset).
#[derive(Clone, Debug)]
pub struct ScaleBank {
    scale: ScaleId,
    architecture: Architecture,
    teacher_levels: Vec<FeatureLevelSpec>,
    blocks: BTreeMap<usize, StudentBlock>,
}

/// Parsed self-describing checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub scale: ScaleId,
    pub levels: Vec<usize>,
    pub teacher_levels: Vec<FeatureLevelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

/// Fresh bank of `L-1` blocks mirroring the teacher's stage topologies.
/// Each level draws from its own seeded stream, so blocks are reproducible
/// individually.
pub fn init_student_bank(teacher: &TeacherNetwork, scale: ScaleId, seed: u64) -> Result<ScaleBank> {
    let depth = teacher.num_levels();
    if depth < 2 {
        return Err(Error::contract(format!(
            "teacher has {depth} level(s); at least 2 are needed to imitate anything"
        )));
    }
    let mut blocks = BTreeMap::new();
    for level in 2..=depth {
        let mut module = teacher
            .module(level)
            .expect("level within teacher depth")
            .clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(level as u64);
        module.init_fresh(&mut rng);
        blocks.insert(level, StudentBlock { level, scale, module });
    }
    Ok(ScaleBank {
        scale,
        architecture: teacher.architecture(),
        teacher_levels: teacher.level_specs().to_vec(),
        blocks,
    })
}

impl ScaleBank {
    pub fn scale(&self) -> ScaleId {
        self.scale
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn levels(&self) -> Vec<usize> {
        self.blocks.keys().copied().collect()
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.blocks.values().map(StudentBlock::id).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, level: usize) -> Option<&StudentBlock> {
        self.blocks.get(&level)
    }

    pub fn block_mut(&mut self, level: usize) -> Option<&mut StudentBlock> {
        self.blocks.get_mut(&level)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &StudentBlock> {
        self.blocks.values()
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut StudentBlock> {
        self.blocks.values_mut()
    }

    pub fn remove_block(&mut self, level: usize) -> Option<StudentBlock> {
        self.blocks.remove(&level)
    }

    /// Keeps only the listed levels.
    pub fn retain_levels(&mut self, keep: &[usize]) {
        self.blocks.retain(|l, _| keep.contains(l));
    }

    pub fn checksum(&self) -> String {
        nn::checksum(
            self.blocks
                .values()
                .map(|b| (format!("level{}", b.level), &b.module)),
        )
    }

    /// Deepest teacher level any block needs.
    pub fn max_level(&self) -> usize {
        self.blocks.keys().next_back().copied().unwrap_or(1)
    }

    fn check_input(&self, level: usize, input_shape: &[usize]) -> Result<()> {
        let block = &self.blocks[&level];
        let want = block.module.in_channels();
        if input_shape[0] != want {
            return Err(Error::contract(format!(
                "level {level} student expects {want} input channels from teacher level {}, got shape {:?}",
                level - 1,
                input_shape
            )));
        }
        Ok(())
    }

    /// Student predictions for one image. `teacher` must hold levels `1..=L`
    /// in order; block `l` consumes only `teacher[l-2]` (level `l-1`).
    pub fn forward(&self, teacher: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        for (i, f) in teacher.iter().enumerate() {
            if f.level != i + 1 {
                return Err(Error::contract(format!(
                    "teacher features must list levels 1..L in order; position {i} holds level {}",
                    f.level
                )));
            }
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        for (&level, block) in &self.blocks {
            let (Some(input), Some(target)) = (teacher.get(level - 2), teacher.get(level - 1)) else {
                return Err(Error::contract(format!(
                    "level {level} student needs teacher levels {} and {level}; only {} provided",
                    level - 1,
                    teacher.len()
                )));
            };
            self.check_input(level, input.data.shape())?;
            let y = block
                .forward_batch(&input.data.clone().insert_axis(Axis(0)))
                .index_axis_move(Axis(0), 0);
            if y.shape() != target.data.shape() {
                return Err(Error::contract(format!(
                    "level {level}: student output {:?} does not match teacher {:?}",
                    y.shape(),
                    target.data.shape()
                )));
            }
            out.push(FeatureMap::new(y, level, FeatureSource::Student));
        }
        Ok(out)
    }

    pub fn header(&self, fingerprint: Option<&str>) -> CheckpointHeader {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: self.architecture,
            scale: self.scale,
            levels: self.levels(),
            teacher_levels: self.teacher_levels[..self.max_level().min(self.teacher_levels.len())].to_vec(),
            fingerprint: fingerprint.map(str::to_string),
        }
    }

    pub fn save(&self, path: &Path, fingerprint: Option<&str>) -> Result<()> {
        let header = serde_json::to_string(&self.header(fingerprint))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut file = TensorFile {
            header: Some(header),
            ..Default::default()
        };
        for b in self.blocks.values() {
            b.module
                .visit_tensors(&format!("level{}", b.level), &mut |n, s, d| file.insert(n, s, d));
        }
        file.write(path)
    }

    /// Loads a checkpoint and validates it against `teacher`.
    pub fn load(path: &Path, teacher: &TeacherNetwork) -> Result<(ScaleBank, CheckpointHeader)> {
        let file = TensorFile::read(path)?;
        let raw = file.header.as_deref().ok_or_else(|| {
            Error::Checkpoint(format!("{} has no checkpoint header", path.display()))
        })?;
        let header: CheckpointHeader = serde_json::from_str(raw)
            .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                path.display(),
                header.format,
                header.version
            )));
        }
        let mismatch = |what: String| {
            Error::Checkpoint(format!(
                "{} (format v{}): topology mismatch: {what}",
                path.display(),
                header.version
            ))
        };
        if header.architecture != teacher.architecture() {
            return Err(mismatch(format!(
                "checkpoint built for {}, teacher is {}",
                header.architecture,
                teacher.architecture()
            )));
        }
        let specs = teacher.level_specs();
        if header.teacher_levels.len() > specs.len()
            || header.teacher_levels[..] != specs[..header.teacher_levels.len()]
        {
            return Err(mismatch(format!(
                "level layout {:?} vs teacher {:?}",
                header.teacher_levels, specs
            )));
        }
        let mut blocks = BTreeMap::new();
        let mut problems = Vec::new();
        let lookup = |name: &str| file.lookup(name);
        for &level in &header.levels {
            let Some(template) = (level >= 2).then(|| teacher.module(level)).flatten() else {
                return Err(mismatch(format!("teacher has no level {level}")));
            };
            let mut module = template.clone();
            module.load_tensors(&format!("level{level}"), &lookup, &mut problems);
            blocks.insert(
                level,
                StudentBlock {
                    level,
                    scale: header.scale,
                    module,
                },
            );
        }
        if !problems.is_empty() {
            return Err(mismatch(problems.join("; ")));
        }
        let bank = ScaleBank {
            scale: header.scale,
            architecture: header.architecture,
            teacher_levels: specs.to_vec(),
            blocks,
        };
        Ok((bank, header))
    }
}

/// Free-function form of [`ScaleBank::forward`].
pub fn student_forward(bank: &ScaleBank, teacher_features: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
    bank.forward(teacher_features)
}
