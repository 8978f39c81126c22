mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zsdistill::losses::{
    clip_loss, contrastive_image_loss, cross_entropy_head, feature_l2, hinton_kd,
    multi_positive_loss, multi_positive_loss_sets, LossError, Temperature,
};
use zsdistill::tensor::{Graph, ParamStore, Tensor};

fn value(f: impl FnOnce(&mut Graph<f64>) -> zsdistill::tensor::Var) -> f64 {
    let mut g = Graph::<f64>::new();
    let v = f(&mut g);
    g.value(v).item()
}

fn rows64(seed: u64, n: usize, d: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = unit_rows(&mut rng, n, d);
    Tensor::new([n, d], t.data().iter().map(|&x| x as f64).collect()).unwrap()
}

fn permute(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (_, d) = t.dims2();
    let mut out = Vec::new();
    for &p in perm {
        out.extend_from_slice(t.row(p));
    }
    Tensor::new([perm.len(), d], out).unwrap()
}

/// Direct evaluation of the symmetric InfoNCE objective.
fn clip_reference(a: &Tensor<f64>, b: &Tensor<f64>, scale: f64) -> f64 {
    let n = a.dims2().0;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let s: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| scale * dot(a.row(i), b.row(j))).collect())
        .collect();
    let lse = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for (i, row) in s.iter().enumerate() {
        let col: Vec<f64> = s.iter().map(|r| r[i]).collect();
        total += (lse(row) - row[i]) + (lse(&col) - row[i]);
    }
    total / (2.0 * n as f64)
}

#[test]
fn clip_matches_direct_formula() {
    for seed in 0..5 {
        let (a, b) = (rows64(seed, 5, D), rows64(seed + 100, 5, D));
        let t = Temperature::with_inv(10.0);
        let got = value(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            let tp = t.bind(g, false);
            clip_loss(g, x, y, tp).unwrap()
        });
        let scale = (t.log_inv as f64).exp();
        assert!((got - clip_reference(&a, &b, scale)).abs() < 1e-10);
    }
}

#[test]
fn feature_l2_is_sum_of_row_distances() {
    let a = Tensor::<f64>::from_rows(&[vec![3.0, 0.0], vec![1.0, 1.0]]).unwrap();
    let b = Tensor::<f64>::from_rows(&[vec![0.0, 4.0], vec![1.0, 1.0]]).unwrap();
    let got = value(|g| {
        let (x, y) = (g.constant(a), g.constant(b));
        feature_l2(g, x, y).unwrap()
    });
    assert!((got - 5.0).abs() < 1e-12);
}

#[test]
fn multi_positive_sets_average_the_positives() {
    let imgs = rows64(1, 2, D);
    let prompts = rows64(2, 3, D);
    let t = Temperature::with_inv(5.0);
    let both = value(|g| {
        let (x, z) = (g.constant(imgs.clone()), g.constant(prompts.clone()));
        let tp = t.bind(g, false);
        multi_positive_loss_sets(g, x, z, &[vec![0, 2], vec![1, 1]], tp).unwrap()
    });
    let single = |labels: [usize; 2]| {
        value(|g| {
            let (x, z) = (g.constant(imgs.clone()), g.constant(prompts.clone()));
            let tp = t.bind(g, false);
            multi_positive_loss(g, x, z, &labels, tp).unwrap()
        })
    };
    let expect = 0.5 * (single([0, 1]) + single([2, 1]));
    assert!((both - expect).abs() < 1e-10);
}

#[test]
fn bad_inputs_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rows64(0, 2, 4));
    let z = g.constant(rows64(1, 3, 4));
    let y = g.constant(rows64(2, 3, 4));
    let tp = Temperature::default().bind(&mut g, false);
    assert!(matches!(
        clip_loss(&mut g, x, y, tp),
        Err(LossError::Tensor(_))
    ));
    assert!(matches!(
        multi_positive_loss(&mut g, x, z, &[0], tp),
        Err(LossError::LabelCount(1, 2))
    ));
    assert!(matches!(
        multi_positive_loss(&mut g, x, z, &[0, 3], tp),
        Err(LossError::LabelOutOfRange {
            label: 3,
            classes: 3
        })
    ));
    assert!(matches!(
        multi_positive_loss_sets(&mut g, x, z, &[vec![0], vec![]], tp),
        Err(LossError::NoPositive(1))
    ));
    let l = g.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
    assert!(matches!(
        hinton_kd(&mut g, l, l, 0.0),
        Err(LossError::BadSoftening(_))
    ));
}

#[test]
fn temperature_clamp_holds_scale_and_stops_gradient() {
    let t = Temperature {
        log_inv: 200f32.ln(),
        ceiling: 100.0,
    };
    assert_eq!(t.inv(), 100.0);
    let mut g = Graph::<f64>::new();
    let a = g.constant(rows64(4, 3, D));
    let b = g.constant(rows64(5, 3, D));
    let tp = t.bind(&mut g, true);
    let l = clip_loss(&mut g, a, b, tp).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(tp.log_inv).unwrap().item(), 0.0);

    let mut store = ParamStore::new();
    store.insert(Temperature::PARAM, Tensor::scalar(7.0f32));
    t.clamp_store(&mut store);
    assert!((store.get(Temperature::PARAM).unwrap().item() - 100f32.ln()).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000, n in 1usize..6, inv in 1.0f32..100.0) {
        let (a, b) = (rows64(seed, n, D), rows64(seed ^ 0x55, n, D));
        let z = rows64(seed ^ 0xaa, M, D);
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize + i) % M).collect();
        let t = Temperature::with_inv(inv);
        let mut g = Graph::<f64>::new();
        let (x, y, zz) = (g.constant(a), g.constant(b), g.constant(z));
        let tp = t.bind(&mut g, false);
        let all = [
            feature_l2(&mut g, x, y).unwrap(),
            clip_loss(&mut g, x, y, tp).unwrap(),
            multi_positive_loss(&mut g, x, zz, &labels, tp).unwrap(),
            contrastive_image_loss(&mut g, x, y, tp).unwrap(),
            hinton_kd(&mut g, x, y, 2.0).unwrap(),
        ];
        for v in all {
            prop_assert!(g.value(v).item() >= -1e-12);
        }
    }

    #[test]
    fn clip_is_invariant_to_joint_permutation(seed in 0u64..10_000, n in 2usize..7) {
        let (a, b) = (rows64(seed, n, D), rows64(seed + 1, n, D));
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let t = Temperature::default();
        let eval = |a: Tensor<f64>, b: Tensor<f64>| value(|g| {
            let (x, y) = (g.constant(a), g.constant(b));
            let tp = t.bind(g, false);
            clip_loss(g, x, y, tp).unwrap()
        });
        let base = eval(a.clone(), b.clone());
        let moved = eval(permute(&a, &perm), permute(&b, &perm));
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn multi_positive_equals_cross_entropy_on_scaled_logits(seed in 0u64..10_000, n in 1usize..6, inv in 1.0f32..100.0) {
        let a = rows64(seed, n, D);
        let z = rows64(seed + 7, M, D);
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize * 3 + i) % M).collect();
        let t = Temperature::with_inv(inv);
        let mut g = Graph::<f64>::new();
        let (x, zz) = (g.constant(a), g.constant(z));
        let tp = t.bind(&mut g, false);
        let mp = multi_positive_loss(&mut g, x, zz, &labels, tp).unwrap();
        let zt = g.transpose(zz).unwrap();
        let s = g.matmul(x, zt).unwrap();
        let s = g.scale(s, t.inv() as f64);
        let ce = cross_entropy_head(&mut g, s, &labels).unwrap();
        prop_assert!((g.value(mp).item() - g.value(ce).item()).abs() < 1e-5);
    }

    #[test]
    fn effective_scale_never_exceeds_ceiling(s in -5.0f32..10.0) {
        let t = Temperature { log_inv: s, ceiling: 100.0 };
        prop_assert!(t.inv() <= 100.0);
        prop_assert!((t.inv() - s.exp().min(100.0)).abs() <= 1e-4 * s.exp().min(100.0));
    }
}
