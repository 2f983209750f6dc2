use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::heatmap;
use crate::backbone::{load_teacher, TeacherNetwork};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, CategoryRow, Report};
use crate::pyramid_data::{
    build_validation_split, generate_synthetic_fixture, index_dataset, load_image, DatasetIndex, FixtureSpec,
    Sample, SampleRecord, Split,
};
use crate::resize::{resize_image, resize_plane};
use crate::scale_search::{prune_top_k, search_weights, ValidationSample, WeightFile, WeightVector};
use crate::scoring::{multi_scale_score, ReferenceSize};
use crate::student::{init_student_bank, BlockId, ScaleBank};
use crate::training::{fit, TrainState};

pub const CONFIG_ECHO: &str = "config.yaml";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const WEIGHTS_FILE: &str = "weights.txt";
pub const SEARCH_REPORT: &str = "search_report.txt";
pub const SCORES_DIR: &str = "scores";
pub const HEATMAPS_DIR: &str = "heatmaps";
pub const MANIFEST: &str = "manifest.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

/// A validated config plus the flags that are not config keys.
pub struct Run {
    pub cfg: RunConfig,
    pub fingerprint: String,
    pub force: bool,
}

impl Run {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Run {
            fingerprint: cfg.fingerprint(),
            cfg,
            force,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output.join(name)
    }

    pub fn checkpoint_path(&self, scale: usize) -> PathBuf {
        self.cfg.output.join("checkpoints").join(format!("scale_{scale}.safetensors"))
    }

    fn prepare_output(&self) -> Result<()> {
        let out = &self.cfg.output;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_text(&self.out(CONFIG_ECHO), &self.cfg.to_yaml())
    }

    fn teacher(&self) -> Result<TeacherNetwork> {
        let teacher = load_teacher(self.cfg.teacher, &self.cfg.weights_source()?)?.truncated(self.cfg.max_level())?;
        self.cfg.pyramid().validate_stride(teacher.deepest_stride())?;
        Ok(teacher)
    }

    fn check_fingerprint(&self, what: &str, found: Option<&str>) -> Result<()> {
        if found == Some(self.fingerprint.as_str()) {
            return Ok(());
        }
        let msg = format!(
            "{what} has fingerprint {} but the config gives {}",
            found.unwrap_or("<none>"),
            self.fingerprint
        );
        if self.force {
            eprintln!("warning: {msg}; continuing because of --force");
            Ok(())
        } else {
            Err(Error::Config(format!("{msg}; pass --force to mix them")))
        }
    }

    fn index(&self) -> Result<DatasetIndex> {
        index_dataset(&self.cfg.dataset.root, &self.cfg.dataset.category)
    }

    /// `(validation, evaluation)` records. Validation images never appear in
    /// the evaluation set.
    fn splits(&self) -> Result<(DatasetIndex, Vec<SampleRecord>)> {
        let index = self.index()?;
        let v = &self.cfg.validation;
        let (val, rest) = build_validation_split(&index, v.coverage, v.fraction, self.cfg.seed)?;
        let test = rest.records_in(Split::Test).cloned().collect();
        Ok((val, test))
    }

    fn load_banks(&self, teacher: &TeacherNetwork) -> Result<Vec<ScaleBank>> {
        let mut banks = Vec::with_capacity(self.cfg.scales.len());
        for &scale in &self.cfg.scales {
            let path = self.checkpoint_path(scale);
            let (bank, header) = ScaleBank::load(&path, teacher)?;
            if header.scale != scale || header.levels != self.cfg.levels {
                return Err(Error::Checkpoint(format!(
                    "{} holds scale {} levels {:?}; config wants scale {scale} levels {:?}",
                    path.display(),
                    header.scale,
                    header.levels,
                    self.cfg.levels
                )));
            }
            self.check_fingerprint(&path.display().to_string(), header.fingerprint.as_deref())?;
            banks.push(bank);
        }
        Ok(banks)
    }

    /// Applies `weights.txt` (or `explicit`) if present: banks are pruned to
    /// the kept blocks and the renormalized weights are returned.
    fn apply_weights(&self, banks: &mut Vec<ScaleBank>, explicit: Option<&Path>) -> Result<Option<WeightVector>> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = self.out(WEIGHTS_FILE);
                if !p.is_file() {
                    return Ok(None);
                }
                p
            }
        };
        let file = WeightFile::read(&path)?;
        self.check_fingerprint(&path.display().to_string(), file.fingerprint.as_deref())?;
        let all: Vec<BlockId> = banks.iter().flat_map(|b| b.block_ids()).collect();
        if file.logits.block_ids != all {
            return Err(Error::Config(format!(
                "{} lists blocks {:?}, checkpoints provide {:?}",
                path.display(),
                file.logits.block_ids,
                all
            )));
        }
        let w = file.kept_weights()?;
        for bank in banks.iter_mut() {
            let keep: Vec<usize> = w.block_ids.iter().filter(|id| id.scale == bank.scale()).map(|id| id.level).collect();
            bank.retain_levels(&keep);
        }
        banks.retain(|b| b.num_blocks() > 0);
        Ok(Some(w))
    }

    fn score_image(&self, banks: &[ScaleBank], teacher: &TeacherNetwork, image: &Array3<f32>, w: Option<&WeightVector>) -> Result<Array2<f64>> {
        Ok(multi_scale_score(banks, teacher, image, self.cfg.reference(), w, self.cfg.fusion, self.cfg.train.epsilon)?.data)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Nearest-style resize of a mask: bilinear on `{0, 1}` then `≥ 0.5`.
pub fn mask_to_reference(mask: &Array2<bool>, reference: ReferenceSize) -> Array2<bool> {
    if mask.dim() == (reference.height, reference.width) {
        return mask.clone();
    }
    let f = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    resize_plane(f.view(), reference.height, reference.width).mapv(|v| v >= 0.5)
}

fn load_samples(records: &[SampleRecord], category: &str) -> Result<Vec<Sample>> {
    records.iter().map(|r| r.load(category)).collect()
}

fn log_row(log: &mut String, scale: usize, state: &TrainState) {
    let _ = write!(log, "{scale},{},{}", state.epoch, state.step);
    for v in state.level_losses.values() {
        let _ = write!(log, ",{v:.9e}");
    }
    let _ = writeln!(log, ",{:.9e}", state.total_loss);
}

pub fn cmd_train(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let index = run.index()?;
    run.prepare_output()?;
    let teacher = run.teacher()?;
    let train: Vec<SampleRecord> = index.records_in(Split::Train).cloned().collect();
    let images: Vec<Array3<f32>> = load_samples(&train, &index.category)?.into_iter().map(|s| s.image).collect();

    let mut log = String::from("scale,epoch,step");
    for l in &cfg.levels {
        let _ = write!(log, ",loss_level{l}");
    }
    log.push_str(",total\n");
    for &scale in &cfg.scales {
        let mut bank = init_student_bank(&teacher, scale, cfg.seed)?;
        bank.retain_levels(&cfg.levels);
        let resized: Vec<Array3<f32>> = images.iter().map(|i| resize_image(i, scale, scale)).collect();
        let outcome = fit(&mut bank, &teacher, &resized, &cfg.train, &mut |state, _| {
            log_row(&mut log, scale, state);
            Ok(None)
        })?;
        let path = run.checkpoint_path(scale);
        bank.save(&path, Some(&run.fingerprint))?;
        eprintln!(
            "scale {scale}: loss {:.4} -> {:.4} after {} steps ({:.1}s), saved {}",
            outcome.initial_loss,
            outcome.final_loss,
            outcome.state.step,
            outcome.state.elapsed.as_secs_f64(),
            path.display()
        );
    }
    write_text(&run.out(TRAIN_LOG), &log)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreManifest {
    pub fingerprint: String,
    pub reference_size: usize,
    pub weights: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub image: PathBuf,
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            out.extend(files.into_iter().map(|f| (stem_of(&f), f)));
        } else {
            out.push((stem_of(p), p.clone()));
        }
    }
    Ok(out)
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

pub fn cmd_score(run: &Run, inputs: &[PathBuf], weights: Option<&Path>) -> Result<()> {
    let teacher = run.teacher()?;
    let mut banks = run.load_banks(&teacher)?;
    let w = run.apply_weights(&mut banks, weights)?;
    let items: Vec<(String, PathBuf)> = if inputs.is_empty() {
        run.splits()?.1.iter().map(|r| (r.output_stem(), r.image_path.clone())).collect()
    } else {
        expand_inputs(inputs)?
    };
    run.prepare_output()?;
    let scores = run.out(SCORES_DIR);
    let heat = run.out(HEATMAPS_DIR);
    std::fs::create_dir_all(&scores).map_err(|e| Error::io(&scores, e))?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (stem, path) in &items {
        let result = load_image(path).and_then(|img| {
            let map = run.score_image(&banks, &teacher, &img, w.as_ref())?;
            let npy = scores.join(format!("{stem}.npy"));
            ndarray_npy::write_npy(&npy, &map.mapv(|v| v as f32)).map_err(|e| Error::Load {
                path: npy.clone(),
                reason: e.to_string(),
            })?;
            heatmap::write_heatmap(&heat.join(format!("{stem}.png")), &map)?;
            if run.cfg.heatmap.overlay {
                heatmap::write_overlay(&heat.join(format!("{stem}_overlay.png")), &map, &img)?;
            }
            Ok(())
        });
        match result {
            Ok(()) => entries.push(ManifestEntry {
                stem: stem.clone(),
                image: path.clone(),
            }),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                failures.push((path.clone(), e));
            }
        }
    }
    let manifest = ScoreManifest {
        fingerprint: run.fingerprint.clone(),
        reference_size: run.cfg.reference_size,
        weights: if w.is_some() { WEIGHTS_FILE.into() } else { "uniform".into() },
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&scores.join(MANIFEST), &(json + "\n"))?;
    eprintln!("scored {} of {} inputs", manifest.entries.len(), items.len());
    if let Some((path, _)) = failures.first() {
        for (p, e) in &failures {
            eprintln!("  failed: {} ({e})", p.display());
        }
        return Err(Error::Load {
            path: path.clone(),
            reason: format!("{} of {} inputs could not be scored", failures.len(), items.len()),
        });
    }
    Ok(())
}

pub fn cmd_search(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let teacher = run.teacher()?;
    let banks = run.load_banks(&teacher)?;
    let (val, _) = run.splits()?;
    if val.records.is_empty() {
        return Err(Error::Config("validation split is empty; raise validation.coverage".into()));
    }
    let reference = cfg.reference();
    let samples: Vec<ValidationSample> = val
        .load_split(Split::Val)?
        .into_iter()
        .map(|s| ValidationSample {
            mask: mask_to_reference(&s.mask_or_empty(), reference),
            image: s.image,
        })
        .collect();
    let before: Vec<String> = std::iter::once(teacher.checksum()).chain(banks.iter().map(ScaleBank::checksum)).collect();
    let outcome = search_weights(&banks, &teacher, &samples, reference, &cfg.search, cfg.train.epsilon)?;
    let after: Vec<String> = std::iter::once(teacher.checksum()).chain(banks.iter().map(ScaleBank::checksum)).collect();
    if before != after {
        return Err(Error::contract("weight search modified network parameters"));
    }
    let n = outcome.logits.values.len();
    let k = cfg.search.k.unwrap_or(n);
    let (kept, weights) = prune_top_k(&outcome.logits, k)?;
    let file = WeightFile {
        fingerprint: Some(run.fingerprint.clone()),
        kept: outcome.logits.block_ids.iter().map(|id| kept.contains(id)).collect(),
        logits: outcome.logits.clone(),
        initial_loss: Some(outcome.initial_loss()),
        final_loss: Some(outcome.final_loss()),
    };
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    file.write(&run.out(WEIGHTS_FILE))?;

    let full: BTreeMap<BlockId, f64> = file
        .logits
        .block_ids
        .iter()
        .copied()
        .zip(crate::scale_search::softmax_weights(&file.logits).values)
        .collect();
    let mut rep = String::new();
    let _ = writeln!(rep, "fingerprint: {}", run.fingerprint);
    let _ = writeln!(rep, "validation images: {}", samples.len());
    let _ = writeln!(rep, "iterations: {}  step size: {}", cfg.search.iterations, cfg.search.learning_rate);
    let _ = writeln!(rep, "{:<10} {:>10} {:>10}  kept", "block", "weight", "pruned");
    for (id, w) in &full {
        let pruned = weights.block_ids.iter().position(|b| b == id).map(|i| weights.values[i]);
        let _ = writeln!(
            rep,
            "{:<10} {:>10.6} {:>10}  {}",
            id.to_string(),
            w,
            pruned.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            if pruned.is_some() { "yes" } else { "no" }
        );
    }
    let _ = writeln!(rep, "kept {k} of {n} blocks");
    let (a, b) = (outcome.initial_loss(), outcome.final_loss());
    let _ = writeln!(rep, "validation loss: initial {a:.9} final {b:.9}");
    let _ = writeln!(rep, "descent (final <= initial): {}", if b <= a { "pass" } else { "FAIL" });
    let _ = writeln!(rep, "network parameters unchanged: pass");
    write_text(&run.out(SEARCH_REPORT), &rep)?;
    eprint!("{rep}");
    Ok(())
}

pub fn cmd_eval(run: &Run, scores_dir: Option<&Path>) -> Result<()> {
    let cfg = &run.cfg;
    let reference = cfg.reference();
    let (_, test) = run.splits()?;
    let samples = load_samples(&test, &cfg.dataset.category)?;
    let masks: Vec<Array2<bool>> = samples.iter().map(|s| mask_to_reference(&s.mask_or_empty(), reference)).collect();
    let maps: Vec<Array2<f64>> = match scores_dir {
        Some(dir) => {
            let mpath = dir.join(MANIFEST);
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let manifest: ScoreManifest = serde_json::from_str(&text).map_err(|e| Error::Load {
                path: mpath.clone(),
                reason: e.to_string(),
            })?;
            run.check_fingerprint(&mpath.display().to_string(), Some(&manifest.fingerprint))?;
            if manifest.entries.len() != test.len() {
                return Err(Error::contract(format!(
                    "{} score maps for {} test images with ground truth",
                    manifest.entries.len(),
                    test.len()
                )));
            }
            test.iter()
                .map(|r| {
                    let stem = r.output_stem();
                    if !manifest.entries.iter().any(|e| e.stem == stem) {
                        return Err(Error::contract(format!("no score map for test image {stem}")));
                    }
                    let p = dir.join(format!("{stem}.npy"));
                    let m: Array2<f32> = ndarray_npy::read_npy(&p).map_err(|e| Error::Load {
                        path: p.clone(),
                        reason: e.to_string(),
                    })?;
                    Ok(m.mapv(f64::from))
                })
                .collect::<Result<_>>()?
        }
        None => {
            let teacher = run.teacher()?;
            let mut banks = run.load_banks(&teacher)?;
            let w = run.apply_weights(&mut banks, None)?;
            samples
                .iter()
                .map(|s| run.score_image(&banks, &teacher, &s.image, w.as_ref()))
                .collect::<Result<_>>()?
        }
    };
    if let Some((i, _)) = maps.iter().zip(&masks).enumerate().find(|(_, (m, g))| m.dim() != g.dim()) {
        return Err(Error::contract(format!(
            "score map {i} is {:?}, ground truth is {:?}",
            maps[i].dim(),
            masks[i].dim()
        )));
    }
    let result = evaluate(&maps, &masks, &cfg.metrics)?;
    let report = Report {
        rows: vec![CategoryRow::new(&cfg.dataset.category, &result)],
        fingerprint: Some(run.fingerprint.clone()),
        notes: vec![format!(
            "pixels pooled over {} images, {} ground-truth regions, AUPRO up to FPR {}",
            result.images, result.regions, cfg.metrics.fpr_limit
        )],
    };
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    write_text(&run.out(REPORT_CSV), &report.to_csv())?;
    write_text(&run.out(REPORT_TXT), &report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn cmd_fixture(out: &Path, spec: &FixtureSpec) -> Result<()> {
    let index = generate_synthetic_fixture(out, spec)?;
    let (train, _, test) = index.split_counts();
    eprintln!(
        "wrote {} ({} train, {} test) under {}",
        index.category,
        train,
        test,
        out.display()
    );
    Ok(())
}
