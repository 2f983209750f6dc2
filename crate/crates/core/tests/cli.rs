use std::path::PathBuf;
use std::process::{Command, Output};

use featimit::cli::{ManifestEntry, RunConfig, ScoreManifest};
use featimit::pyramid_data::{generate_synthetic_fixture, index_dataset, FixtureSpec, Split};
use featimit::scale_search::WeightFile;
use ndarray::Array2;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featimit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn featimit")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn setup(extra: &str) -> Setup {
    setup_with("search: { iterations: 40 }", extra)
}

fn setup_with(search: &str, extra: &str) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    generate_synthetic_fixture(&data, &FixtureSpec { n_normal: 6, n_anomalous: 8, size: 64, seed: 2 }).unwrap();
    let config = root.join("run.yaml");
    std::fs::write(
        &config,
        format!(
            "teacher: toy\nweights: \"seed:0\"\nscales: [64, 96]\nlevels: [2, 3]\nreference_size: 64\n\
             train: {{ epochs: 8, batch_size: 3 }}\ndataset: {{ root: {}, category: synthetic }}\n\
             validation: {{ coverage: 1.0, fraction: 0.25 }}\n{search}\noutput: {}\n{extra}",
            data.display(),
            root.join("out").display()
        ),
    )
    .unwrap();
    Setup { _dir: dir, root, config }
}

fn cfg(s: &Setup) -> &str {
    s.config.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

#[test]
fn full_pipeline_writes_all_artifacts() {
    let s = setup("heatmap: { overlay: true }\n");
    let out = s.root.join("out");
    ok(&["train", "--config", cfg(&s)]);
    for scale in [64, 96] {
        assert!(out.join(format!("checkpoints/scale_{scale}.safetensors")).is_file());
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("scale,epoch,step,loss_level2,loss_level3,total"));
    assert_eq!(log.lines().count(), 1 + 2 * 8);
    assert!(out.join("config.yaml").is_file());

    ok(&["search", "--config", cfg(&s)]);
    let wf = WeightFile::read(&out.join("weights.txt")).unwrap();
    assert_eq!(wf.kept, vec![true; 4]);
    assert!(wf.final_loss.unwrap() <= wf.initial_loss.unwrap());
    let rep = std::fs::read_to_string(out.join("search_report.txt")).unwrap();
    assert!(rep.contains("kept 4 of 4 blocks"), "{rep}");
    assert!(rep.contains("descent (final <= initial): pass"), "{rep}");

    ok(&["score", "--config", cfg(&s)]);
    let manifest: ScoreManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("scores/manifest.json")).unwrap()).unwrap();
    assert!(!manifest.entries.is_empty());
    for e in &manifest.entries {
        let m: Array2<f32> = ndarray_npy::read_npy(out.join(format!("scores/{}.npy", e.stem))).unwrap();
        assert_eq!(m.dim(), (64, 64));
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.join(format!("heatmaps/{}.png", e.stem)).is_file());
        assert!(out.join(format!("heatmaps/{}_overlay.png", e.stem)).is_file());
    }

    let o = ok(&["eval", "--config", cfg(&s), "--scores", out.join("scores").to_str().unwrap()]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("synthetic"), "{text}");
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("category,auroc,aupro"));
    // Computing maps from checkpoints gives the same report.
    let from_npy = std::fs::read_to_string(out.join("report.txt")).unwrap();
    ok(&["eval", "--config", cfg(&s)]);
    let from_ckpt = std::fs::read_to_string(out.join("report.txt")).unwrap();
    let first_row = |t: &str| t.lines().find(|l| l.starts_with("synthetic")).unwrap().to_string();
    assert_eq!(first_row(&from_npy), first_row(&from_ckpt));
}

#[test]
fn search_k_and_zero_iterations() {
    let s = setup_with("search: { iterations: 0, k: 2 }", "");
    ok(&["train", "--config", cfg(&s)]);
    ok(&["search", "--config", cfg(&s)]);
    let wf = WeightFile::read(&s.root.join("out/weights.txt")).unwrap();
    assert!(wf.logits.values.iter().all(|&v| v == 0.0));
    assert_eq!(wf.kept.iter().filter(|&&k| k).count(), 2);
    let w = wf.kept_weights().unwrap();
    assert_eq!(w.values, vec![0.5, 0.5]);
    // k from the command line overrides the config.
    ok(&["search", "--config", cfg(&s), "--k", "4"]);
    let wf = WeightFile::read(&s.root.join("out/weights.txt")).unwrap();
    assert_eq!(wf.kept, vec![true; 4]);
}

#[test]
fn perfect_predictor_reports_ones_and_counts_are_checked() {
    let s = setup("");
    let rc = RunConfig::load(&s.config).unwrap();
    let index = index_dataset(&rc.dataset.root, &rc.dataset.category).unwrap();
    let (_, rest) = featimit::pyramid_data::build_validation_split(&index, 1.0, 0.25, rc.seed).unwrap();
    let scores = s.root.join("perfect");
    std::fs::create_dir_all(&scores).unwrap();
    let mut entries = Vec::new();
    for r in rest.records_in(Split::Test) {
        let sample = r.load(&rc.dataset.category).unwrap();
        let m = sample.mask_or_empty().mapv(|b| if b { 1.0f32 } else { 0.0 });
        ndarray_npy::write_npy(scores.join(format!("{}.npy", r.output_stem())), &m).unwrap();
        entries.push(ManifestEntry { stem: r.output_stem(), image: r.image_path.clone() });
    }
    let write_manifest = |entries: Vec<ManifestEntry>, fp: &str| {
        let m = ScoreManifest { fingerprint: fp.into(), reference_size: 64, weights: "uniform".into(), entries };
        std::fs::write(scores.join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    };
    let n = entries.len();
    write_manifest(entries, &rc.fingerprint());
    let o = ok(&["eval", "--config", cfg(&s), "--scores", scores.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("synthetic    1.000    1.000"), "{text}");

    let short: Vec<ManifestEntry> = rest
        .records_in(Split::Test)
        .take(n - 1)
        .map(|r| ManifestEntry { stem: r.output_stem(), image: r.image_path.clone() })
        .collect();
    write_manifest(short, &rc.fingerprint());
    let o = run(&["eval", "--config", cfg(&s), "--scores", scores.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&format!("{} score maps for {n} test images", n - 1)), "{}", stderr(&o));
}

#[test]
fn mixed_fingerprints_need_force() {
    let s = setup("");
    ok(&["train", "--config", cfg(&s)]);
    let o = run(&["eval", "--config", cfg(&s), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    ok(&["eval", "--config", cfg(&s), "--seed", "9", "--force"]);
}

#[test]
fn corrupt_input_is_reported_and_the_batch_continues() {
    let s = setup("");
    ok(&["train", "--config", cfg(&s)]);
    let inputs = s.root.join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    let good = s.root.join("data/synthetic/test/good/000.png");
    std::fs::copy(&good, inputs.join("a.png")).unwrap();
    std::fs::write(inputs.join("b.png"), b"definitely not a png").unwrap();
    std::fs::copy(&good, inputs.join("c.png")).unwrap();
    let o = run(&["score", "--config", cfg(&s), "--input", inputs.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("scored 2 of 3 inputs"), "{err}");
    assert!(err.contains("failed:") && err.contains("b.png"), "{err}");
    assert!(s.root.join("out/scores/a.npy").is_file());
    assert!(s.root.join("out/scores/c.npy").is_file());
}

#[test]
fn training_is_bit_reproducible() {
    let s = setup("");
    let a = s.root.join("a");
    let b = s.root.join("b");
    ok(&["train", "--config", cfg(&s), "--out", a.to_str().unwrap()]);
    ok(&["train", "--config", cfg(&s), "--out", b.to_str().unwrap(), "--threads", "3"]);
    for f in ["checkpoints/scale_64.safetensors", "checkpoints/scale_96.safetensors", "train_log.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = run(&[
        "train", "--data-root", missing.to_str().unwrap(), "--category", "x", "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("layout"), "{}", stderr(&o));

    let bad = dir.path().join("bad.yaml");
    std::fs::write(&bad, "teacher: toy\nbogus_key: 1\n").unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = run(&["train", "--scales", "64,32"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fixture_subcommand_writes_an_indexable_tree() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["fixture", "--out", dir.path().to_str().unwrap(), "--n-normal", "4", "--n-anomalous", "2", "--size", "32"]);
    let idx = index_dataset(dir.path(), "synthetic").unwrap();
    assert_eq!(idx.split_counts().0, 4);
    assert_eq!(idx.records_in(Split::Test).filter(|r| !r.is_good()).count(), 2);
}
