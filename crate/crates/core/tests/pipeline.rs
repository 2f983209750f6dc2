use featimit::metrics::{evaluate, MetricConfig};
use featimit::pyramid_data::{generate_synthetic_fixture, FixtureSpec, Split};
use featimit::resize::resize_image;
use featimit::scoring::{multi_scale_score, FusionMode, ReferenceSize};
use featimit::student::init_student_bank;
use featimit::training::{fit, TrainConfig};
use featimit::{load_teacher, Architecture, WeightsSource};
use ndarray::Array3;

#[test]
fn trained_banks_separate_normal_from_anomalous() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic_fixture(dir.path(), &FixtureSpec::default()).unwrap();
    let teacher = load_teacher(Architecture::Toy, &WeightsSource::Seed(0)).unwrap();
    let train: Vec<Array3<f32>> = index.load_split(Split::Train).unwrap().into_iter().map(|s| s.image).collect();
    let config = TrainConfig { epochs: 60, ..TrainConfig::default() };
    let banks: Vec<_> = [64, 96]
        .iter()
        .map(|&scale| {
            let mut bank = init_student_bank(&teacher, scale, 1).unwrap();
            let imgs: Vec<_> = train.iter().map(|i| resize_image(i, scale, scale)).collect();
            let out = fit(&mut bank, &teacher, &imgs, &config, &mut |_, _| Ok(None)).unwrap();
            assert!(out.final_loss < out.initial_loss);
            bank
        })
        .collect();
    let reference = ReferenceSize::square(64);
    let score = |img: &Array3<f32>| multi_scale_score(&banks, &teacher, img, reference, None, FusionMode::Flat, 1e-12).unwrap();

    let normal_mean = score(&train[0]).data.mean().unwrap();
    let test = index.load_split(Split::Test).unwrap();
    let mut anomalous: Vec<f64> = test
        .iter()
        .filter(|s| s.mask.is_some())
        .map(|s| score(&s.image).data.mean().unwrap())
        .collect();
    anomalous.sort_by(f64::total_cmp);
    let median = anomalous[anomalous.len() / 2];
    assert!(normal_mean < median, "normal {normal_mean} vs anomalous median {median}");

    let maps: Vec<_> = test.iter().map(|s| score(&s.image).data).collect();
    let masks: Vec<_> = test.iter().map(|s| s.mask_or_empty()).collect();
    let r = evaluate(&maps, &masks, &MetricConfig::default()).unwrap();
    assert!(r.auroc > 0.5, "{}", r.auroc);
}

#[test]
fn overfit_model_scores_its_training_image_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic_fixture(
        dir.path(),
        &FixtureSpec { n_normal: 1, n_anomalous: 2, size: 64, seed: 8 },
    )
    .unwrap();
    let teacher = load_teacher(Architecture::Toy, &WeightsSource::Seed(0)).unwrap();
    let image = index.load_split(Split::Train).unwrap().remove(0).image;
    let mut bank = init_student_bank(&teacher, 64, 0).unwrap();
    let config = TrainConfig { epochs: 400, batch_size: 1, learning_rate: 0.1, ..TrainConfig::default() };
    fit(&mut bank, &teacher, std::slice::from_ref(&image), &config, &mut |_, _| Ok(None)).unwrap();
    let map = multi_scale_score(&[bank], &teacher, &image, ReferenceSize::square(64), None, FusionMode::Flat, 1e-12).unwrap();
    let max = map.data.iter().copied().fold(0.0, f64::max);
    assert!(max < 0.1, "max score {max}");
}
