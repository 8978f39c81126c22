use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsdistill::eval::{
    ensemble_embeddings, evaluate, linear_probe, rank_classes, report_from_scores, topk_accuracy,
    write_csv, Classifier, EvalError, ProbeConfig,
};
use zsdistill::model::TextTower;
use zsdistill::prompts::banks::ENSEMBLE_TEMPLATES;
use zsdistill::shapes::{default_classes, make_dataset, DatasetSpec};
use zsdistill::tensor::Tensor;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f32> {
    (0..n * d)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect()
}

fn quick_probe() -> ProbeConfig {
    ProbeConfig {
        reg_grid: vec![1e-3, 1e-1],
        steps: 200,
        ..Default::default()
    }
}

/// Class centres far apart along separate axes.
fn separable(seed: u64, per_class: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = classes;
    let mut x = gaussian(&mut rng, per_class * classes, d);
    let labels: Vec<usize> = (0..per_class * classes).map(|i| i % classes).collect();
    for (i, &l) in labels.iter().enumerate() {
        x[i * d + l] += 10.0;
    }
    (Tensor::new([labels.len(), d], x).unwrap(), labels)
}

#[test]
fn probe_separates_separable_classes() {
    let (tx, ty) = separable(0, 40, 8);
    let (vx, vy) = separable(1, 20, 8);
    let (_, rep) = linear_probe(&tx, &ty, &vx, &vy, &quick_probe()).unwrap();
    assert_eq!(rep.test_accuracy, 1.0);
    assert_eq!(rep.val_accuracy.len(), 2);
}

#[test]
fn probe_on_noise_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 16;
    let (n_train, n_test) = (400, 1600);
    let tx = Tensor::new([n_train, d], gaussian(&mut rng, n_train, d)).unwrap();
    let vx = Tensor::new([n_test, d], gaussian(&mut rng, n_test, d)).unwrap();
    let ty: Vec<usize> = (0..n_train).map(|_| rng.random_range(0..8)).collect();
    let mut vy: Vec<usize> = (0..n_test).map(|i| i % 8).collect();
    vy.shuffle(&mut rng);
    let (_, rep) = linear_probe(&tx, &ty, &vx, &vy, &quick_probe()).unwrap();
    assert!(
        (rep.test_accuracy - 0.125).abs() < 0.05,
        "{}",
        rep.test_accuracy
    );
}

#[test]
fn probe_needs_two_classes() {
    let (x, _) = separable(0, 4, 2);
    let y = vec![1; 8];
    assert!(matches!(
        linear_probe(&x, &y, &x, &y, &quick_probe()),
        Err(EvalError::SingleClass(1))
    ));
    assert!(matches!(
        linear_probe(&x, &y[..3], &x, &y, &quick_probe()),
        Err(EvalError::LabelCount(3, 8))
    ));
}

#[test]
fn k_larger_than_class_count_is_an_error() {
    let r = rank_classes(&Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap());
    assert!(matches!(
        topk_accuracy(&r, &[0], 3),
        Err(EvalError::KTooLarge { k: 3, m: 2 })
    ));
}

/// Equal scores for every class.
struct Uniform;

impl Classifier for Uniform {
    fn num_classes(&self) -> usize {
        8
    }

    fn scores(&self, images: &Tensor) -> zsdistill::eval::Result<Tensor> {
        let n = images.dims2().0;
        Ok(Tensor::zeros([n, 8]))
    }
}

#[test]
fn constant_scores_predict_class_zero() {
    let set = make_dataset(&DatasetSpec {
        per_class: 3,
        ..Default::default()
    })
    .unwrap();
    let r = evaluate(&Uniform, &set, "const", "natural").unwrap();
    assert_eq!(r.n, 24);
    assert!((r.top1 - 0.125).abs() < 1e-12);
    assert!((r.top5 - 0.625).abs() < 1e-12);
    assert_eq!(r.per_class[0], 1.0);
    assert!(r.per_class[1..].iter().all(|&v| v == 0.0));
    assert_eq!(r.condition, "clean");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_csv(&path, &[r]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,testset,condition,n,top1,top5,class_0,class_1,class_2,class_3,class_4,class_5,class_6,class_7"
    );
    assert_eq!(
        lines.next().unwrap(),
        "const,natural,clean,24,12.5,62.5,100.0,0.0,0.0,0.0,0.0,0.0,0.0,0.0"
    );
}

#[test]
fn ensembles_are_unit_norm() {
    let tower = TextTower::new(3);
    let e = ensemble_embeddings(&tower, &default_classes(), &ENSEMBLE_TEMPLATES).unwrap();
    assert_eq!(e.dims2().0, 8);
    for i in 0..8 {
        let n: f32 = e.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

fn scores_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<usize>)> {
    (1usize..20, 5usize..10).prop_flat_map(|(n, m)| {
        (
            Just(n),
            Just(m),
            prop::collection::vec(-5.0f32..5.0, n * m),
            prop::collection::vec(0..m, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_ignores_positive_scale((n, m, s, _) in scores_strategy(), e in -6i32..6) {
        let k = 2f32.powi(e);
        let a = Tensor::new([n, m], s.clone()).unwrap();
        let scaled = Tensor::new([n, m], s.iter().map(|v| v * k).collect()).unwrap();
        prop_assert_eq!(rank_classes(&a), rank_classes(&scaled));
    }

    #[test]
    fn top1_at_most_top5((n, m, s, labels) in scores_strategy()) {
        let r = report_from_scores(&Tensor::new([n, m], s).unwrap(), &labels, "m", "t", "clean").unwrap();
        prop_assert!(r.top1 <= r.top5);
        prop_assert!((0.0..=1.0).contains(&r.top1) && (0.0..=1.0).contains(&r.top5));
    }

    #[test]
    fn balanced_per_class_mean_is_top1(per in 1usize..5, m in 2usize..9, s in prop::collection::vec(-5.0f32..5.0, 8 * 4 * 8)) {
        let n = per * m;
        let labels: Vec<usize> = (0..n).map(|i| i % m).collect();
        let scores = Tensor::new([n, m], s[..n * m].to_vec()).unwrap();
        let r = report_from_scores(&scores, &labels, "m", "t", "clean").unwrap();
        let mean = r.per_class.iter().sum::<f64>() / m as f64;
        prop_assert!((mean - r.top1).abs() < 1e-12);
    }
}
