//! Feature-regression training of student banks.
//!
//! Every channel vector is L2-normalized per pixel; the level loss is the
//! mean squared distance between normalized teacher and student vectors and
//! the total loss is the plain sum over levels.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{s, Array3, ArrayView3, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_batch, FeatureMap, TeacherNetwork};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::Tensor;
use crate::student::ScaleBank;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            batch_size: 16,
            epochs: 600,
            epsilon: 1e-12,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Progress snapshot emitted after every epoch.
#[derive(Clone, Debug, Default)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    /// Mean per-level loss over the epoch's batches.
    pub level_losses: BTreeMap<usize, f64>,
    pub total_loss: f64,
    pub elapsed: Duration,
    pub best_checkpoint: Option<PathBuf>,
    best_loss: Option<f64>,
}

/// Result of [`fit`]. The initial/final losses are measured over the whole
/// training set with the student in inference mode.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn check_finite(data: ArrayView3<'_, f32>) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::contract("feature map contains non-finite values"))
    }
}

/// Unit-normalizes the channel vector at every pixel. Vectors shorter than
/// `epsilon` become zero.
pub fn normalize_per_pixel(features: &FeatureMap, epsilon: f64) -> Result<FeatureMap> {
    if !(epsilon > 0.0) {
        return Err(Error::contract("epsilon must be positive"));
    }
    check_finite(features.data.view())?;
    let (_, h, w) = features.data.dim();
    let mut out = features.data.clone();
    for y in 0..h {
        for x in 0..w {
            let mut v = out.slice_mut(s![.., y, x]);
            let norm = v.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
            if norm < epsilon {
                v.fill(0.0);
            } else {
                v.mapv_inplace(|a| (a as f64 / norm) as f32);
            }
        }
    }
    Ok(FeatureMap::new(out, features.level, features.source))
}

fn check_pair(teacher: &FeatureMap, student: &FeatureMap) -> Result<()> {
    if teacher.data.shape() != student.data.shape() {
        return Err(Error::contract(format!(
            "level {}: teacher shape {:?} vs student shape {:?}",
            teacher.level,
            teacher.data.shape(),
            student.data.shape()
        )));
    }
    if teacher.level != student.level {
        return Err(Error::contract(format!(
            "comparing teacher level {} with student level {}",
            teacher.level, student.level
        )));
    }
    check_finite(teacher.data.view())?;
    check_finite(student.data.view())
}

/// Per-pixel squared distance between normalized channel vectors, `h × w`.
pub(crate) fn pixel_distances(teacher: ArrayView3<'_, f32>, student: ArrayView3<'_, f32>, epsilon: f64) -> ndarray::Array2<f64> {
    let (c, h, w) = teacher.dim();
    let mut out = ndarray::Array2::<f64>::zeros((h, w));
    let mut tn = vec![0.0f64; c];
    let mut sn = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                tn[k] = teacher[[k, y, x]] as f64;
                sn[k] = student[[k, y, x]] as f64;
            }
            unit_in_place(&mut tn, epsilon);
            unit_in_place(&mut sn, epsilon);
            out[[y, x]] = tn.iter().zip(&sn).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    out
}

fn unit_in_place(v: &mut [f64], epsilon: f64) -> f64 {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < epsilon {
        v.iter_mut().for_each(|a| *a = 0.0);
    } else {
        v.iter_mut().for_each(|a| *a /= norm);
    }
    norm
}

/// Mean over pixels of `‖t̂ − ŝ‖²`; lies in `[0, 4]`.
pub fn layer_loss(teacher: &FeatureMap, student: &FeatureMap, epsilon: f64) -> Result<f64> {
    check_pair(teacher, student)?;
    let d = pixel_distances(teacher.data.view(), student.data.view(), epsilon);
    Ok(d.mean().unwrap_or(0.0))
}

/// Level loss and its gradient with respect to the (unnormalized) student
/// features, in double precision. The gradient flows through the
/// normalization; pixels whose student vector is below `epsilon` get zero.
pub fn layer_loss_grad(teacher: ArrayView3<'_, f64>, student: ArrayView3<'_, f64>, epsilon: f64) -> (f64, Array3<f64>) {
    let (c, h, w) = student.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    let mut loss = 0.0;
    let mut t = vec![0.0f64; c];
    let mut s = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                t[k] = teacher[[k, y, x]];
                s[k] = student[[k, y, x]];
            }
            unit_in_place(&mut t, epsilon);
            let s_norm = unit_in_place(&mut s, epsilon);
            let mut dot = 0.0;
            let mut dist = 0.0;
            for k in 0..c {
                let d = s[k] - t[k];
                dist += d * d;
                dot += s[k] * 2.0 * d;
            }
            loss += dist;
            if s_norm >= epsilon {
                // d/ds of ‖s/|s| − t̂‖² = (g − ŝ(ŝ·g)) / |s| with g = 2(ŝ − t̂)
                for k in 0..c {
                    let g = 2.0 * (s[k] - t[k]);
                    grad[[k, y, x]] = scale * (g - s[k] * dot) / s_norm;
                }
            }
        }
    }
    (loss * scale, grad)
}

/// Plain sum of per-level losses.
pub fn total_loss(level_losses: &[f64]) -> f64 {
    level_losses.iter().sum()
}

/// Teacher activations for a set of images, held per level as `(n, c, h, w)`.
struct FeatureCache {
    levels: Vec<Tensor>,
}

impl FeatureCache {
    fn gather(&self, level: usize, order: &[usize]) -> Tensor {
        let src = &self.levels[level - 1];
        let (_, c, h, w) = src.dim();
        let mut out = Tensor::zeros((order.len(), c, h, w));
        for (i, &j) in order.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&src.index_axis(Axis(0), j));
        }
        out
    }
}

fn stack_images(images: &[&Array3<f32>]) -> Tensor {
    let (c, h, w) = images[0].dim();
    let mut out = Tensor::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out
}

/// Above this many cached bytes teacher features are recomputed per batch.
const CACHE_BUDGET_BYTES: usize = 1 << 30;

fn teacher_levels_for(teacher: &TeacherNetwork, images: &[&Array3<f32>], max_level: usize) -> Result<Vec<Tensor>> {
    let mut levels = extract_batch(teacher, &stack_images(images))?;
    levels.truncate(max_level);
    Ok(levels)
}

fn validate_dataset(images: &[Array3<f32>], scale: usize) -> Result<()> {
    if images.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    for (i, img) in images.iter().enumerate() {
        let (c, h, w) = img.dim();
        if c != 3 || h != scale || w != scale {
            return Err(Error::contract(format!(
                "training image {i} is {c}x{h}x{w}; bank expects 3x{scale}x{scale}"
            )));
        }
    }
    Ok(())
}

/// Inference-mode loss per level, averaged over `images`.
pub fn evaluate_loss(bank: &ScaleBank, teacher: &TeacherNetwork, images: &[Array3<f32>], epsilon: f64) -> Result<BTreeMap<usize, f64>> {
    validate_dataset(images, bank.scale())?;
    let mut sums: BTreeMap<usize, f64> = bank.levels().into_iter().map(|l| (l, 0.0)).collect();
    for chunk in images.chunks(16) {
        let refs: Vec<&Array3<f32>> = chunk.iter().collect();
        let levels = teacher_levels_for(teacher, &refs, bank.max_level())?;
        for block in bank.blocks() {
            let pred = block.forward_batch(&levels[block.level - 2]);
            let target = &levels[block.level - 1];
            let per_image = exec::map_range(chunk.len(), |i| {
                pixel_distances(target.index_axis(Axis(0), i), pred.index_axis(Axis(0), i), epsilon)
                    .mean()
                    .unwrap_or(0.0)
            });
            *sums.get_mut(&block.level).expect("level present") += per_image.iter().sum::<f64>();
        }
    }
    let n = images.len() as f64;
    sums.values_mut().for_each(|v| *v /= n);
    Ok(sums)
}

/// Callback invoked after every epoch. It may persist a checkpoint and
/// return its path; the path of the lowest-loss epoch is kept in
/// [`TrainState::best_checkpoint`].
pub type EpochCallback<'a> = dyn FnMut(&TrainState, &ScaleBank) -> Result<Option<PathBuf>> + 'a;

/// Trains `bank` with SGD + momentum on normal images already resized to the
/// bank's scale. The teacher is only read.
pub fn fit(
    bank: &mut ScaleBank,
    teacher: &TeacherNetwork,
    images: &[Array3<f32>],
    config: &TrainConfig,
    callback: &mut EpochCallback<'_>,
) -> Result<FitOutcome> {
    config.validate()?;
    validate_dataset(images, bank.scale())?;
    if bank.num_blocks() == 0 {
        return Err(Error::contract("bank has no student blocks"));
    }
    let start = Instant::now();
    let max_level = bank.max_level();
    let eps = config.epsilon;

    let per_image_bytes: usize = teacher.level_specs()[..max_level]
        .iter()
        .map(|s| s.channels * (bank.scale() / s.stride).pow(2) * 4)
        .sum();
    let cache = if per_image_bytes * images.len() <= CACHE_BUDGET_BYTES {
        let refs: Vec<&Array3<f32>> = images.iter().collect();
        let mut levels: Vec<Tensor> = Vec::new();
        for chunk in refs.chunks(16) {
            let part = teacher_levels_for(teacher, chunk, max_level)?;
            if levels.is_empty() {
                levels = part;
            } else {
                for (acc, p) in levels.iter_mut().zip(part) {
                    *acc = ndarray::concatenate(Axis(0), &[acc.view(), p.view()]).expect("matching shapes");
                }
            }
        }
        Some(FeatureCache { levels })
    } else {
        None
    };

    let initial_loss = total_loss(&evaluate_loss(bank, teacher, images, eps)?.into_values().collect::<Vec<_>>());

    let mut velocity: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(bank.scale() as u64);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut state = TrainState::default();
    let lr = config.learning_rate as f32;
    let mu = config.momentum as f32;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<usize, f64> = bank.levels().into_iter().map(|l| (l, 0.0)).collect();
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            if config.max_steps.is_some_and(|m| state.step >= m) {
                break 'epochs;
            }
            let levels: Vec<Tensor> = match &cache {
                Some(c) => (1..=max_level).map(|l| c.gather(l, batch)).collect(),
                None => {
                    let refs: Vec<&Array3<f32>> = batch.iter().map(|&i| &images[i]).collect();
                    teacher_levels_for(teacher, &refs, max_level)?
                }
            };
            let n = batch.len();
            for block in bank.blocks_mut() {
                let level = block.level;
                block.module.zero_grad();
                let (pred, trace) = block.module.forward_train(&levels[level - 2])?;
                let target = &levels[level - 1];
                let per_image = exec::map_range(n, |i| {
                    let t = target.index_axis(Axis(0), i).mapv(f64::from);
                    let s = pred.index_axis(Axis(0), i).mapv(f64::from);
                    layer_loss_grad(t.view(), s.view(), eps)
                });
                let mut grad = Tensor::zeros(pred.raw_dim());
                let mut batch_loss = 0.0;
                for (i, (loss, g)) in per_image.into_iter().enumerate() {
                    batch_loss += loss;
                    Zip::from(grad.index_axis_mut(Axis(0), i))
                        .and(&g)
                        .for_each(|o, &v| *o = (v / n as f64) as f32);
                }
                if !batch_loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at scale {} level {level}, epoch {epoch}, batch {batch_idx}",
                        block.scale
                    )));
                }
                *sums.get_mut(&level).expect("level present") += batch_loss;
                block.module.backward(trace, grad);

                let vel = velocity.entry(level).or_default();
                let mut k = 0usize;
                block.module.visit_params_mut(&mut |param, grad| {
                    if vel.len() <= k {
                        vel.push(vec![0.0; param.len()]);
                    }
                    let v = &mut vel[k];
                    if !grad.is_empty() {
                        for ((p, v), &g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
                            *v = mu * *v + g;
                            *p -= lr * *v;
                        }
                    }
                    k += 1;
                });
            }
            seen += n;
            state.step += 1;
        }
        if seen == 0 {
            break;
        }
        state.epoch = epoch + 1;
        state.level_losses = sums.into_iter().map(|(l, s)| (l, s / seen as f64)).collect();
        state.total_loss = total_loss(&state.level_losses.values().copied().collect::<Vec<_>>());
        state.elapsed = start.elapsed();
        if let Some(path) = callback(&state, bank)? {
            if state.best_loss.is_none_or(|b| state.total_loss < b) {
                state.best_loss = Some(state.total_loss);
                state.best_checkpoint = Some(path);
            }
        }
    }

    let final_loss = total_loss(&evaluate_loss(bank, teacher, images, eps)?.into_values().collect::<Vec<_>>());
    if !final_loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite final loss at scale {}",
            bank.scale()
        )));
    }
    state.elapsed = start.elapsed();
    Ok(FitOutcome {
        state,
        initial_loss,
        final_loss,
    })
}
