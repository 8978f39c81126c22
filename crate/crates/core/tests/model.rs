use proptest::prelude::*;

use zsdistill::model::{Arch, Checkpoint, ImageModel, ModelError, TextTower, D_EMB};
use zsdistill::shapes::{make_dataset, DatasetSpec};
use zsdistill::tensor::{Graph, Tensor};

fn batch() -> Tensor {
    make_dataset(&DatasetSpec {
        per_class: 2,
        ..Default::default()
    })
    .unwrap()
    .images()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Arch::ALL {
        let m = ImageModel::new(arch, 11);
        let path = dir.path().join(format!("{arch}.zsdk"));
        m.to_checkpoint(11, "init").save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.meta.param_count, arch.param_count());
        let back = ImageModel::from_checkpoint(&ck, arch).unwrap();
        for ((n1, a), (n2, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(ck.to_bytes(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn wrong_architecture_is_rejected() {
    let ck = ImageModel::new(Arch::MlpSmall, 0).to_checkpoint(0, "init");
    assert!(matches!(
        ImageModel::from_checkpoint(&ck, Arch::MlpLarge),
        Err(ModelError::ArchMismatch { .. })
    ));
    assert!(matches!(
        TextTower::from_checkpoint(&ck),
        Err(ModelError::ArchMismatch { .. })
    ));
}

#[test]
fn distinct_load_errors() {
    let ck = ImageModel::new(Arch::MlpSmall, 0).to_checkpoint(0, "init");
    let bytes = ck.to_bytes();

    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&v),
        Err(ModelError::Version { found: 9, .. })
    ));

    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(
        Checkpoint::from_bytes(cut),
        Err(ModelError::Truncated(_))
    ));

    let mut extra = ck.clone();
    extra.params.insert("enc.l9.w", Tensor::zeros([1]));
    let e = ImageModel::from_checkpoint(&extra, Arch::MlpSmall).unwrap_err();
    assert!(
        matches!(&e, ModelError::UnknownParam(n) if n == "enc.l9.w"),
        "{e}"
    );
}

proptest! {
    #[test]
    fn any_magic_corruption_reports_bad_magic(pos in 0usize..4, flip in 1u8..=255) {
        let mut bytes = ImageModel::new(Arch::MlpSmall, 0).to_checkpoint(0, "init").to_bytes();
        bytes[pos] ^= flip;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        prop_assert!(err.to_string().contains("bad magic"), "{}", err);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = Checkpoint::from_bytes(&bytes);
    }
}

#[test]
fn encoding_is_deterministic_across_loads() {
    let x = batch();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.zsdk");
    ImageModel::new(Arch::ConvSmall, 5)
        .to_checkpoint(5, "init")
        .save(&path)
        .unwrap();
    let run = || {
        let m = ImageModel::from_checkpoint(&Checkpoint::load(&path).unwrap(), Arch::ConvSmall)
            .unwrap();
        m.encode_image(&x).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.shape(), &[16, D_EMB]);
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn frozen_text_tower_gets_no_gradient() {
    let mut t = TextTower::new(2);
    t.frozen = true;
    let mut g = Graph::new();
    let p = t.bind(&mut g);
    let z = t
        .embed_graph(&mut g, &p, &["a photo of a ring", "a photo of a bar"])
        .unwrap();
    let s = g.sum(z);
    g.backward(s).unwrap();
    assert!(p.values().all(|v| g.grad(*v).is_none()));

    t.frozen = false;
    let mut g = Graph::new();
    let p = t.bind(&mut g);
    let z = t.embed_graph(&mut g, &p, &["a photo of a ring"]).unwrap();
    let w = g.constant(Tensor::new([1, D_EMB], (0..D_EMB).map(|i| i as f32).collect()).unwrap());
    let y = g.mul(z, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(p.values().all(|v| g.grad(*v).is_some()));
}

#[test]
fn text_checkpoint_keeps_frozen_flag() {
    let mut t = TextTower::new(8);
    t.frozen = true;
    let back = TextTower::from_checkpoint(
        &Checkpoint::from_bytes(&t.to_checkpoint(8, "teacher").to_bytes()).unwrap(),
    )
    .unwrap();
    assert_eq!(back, t);
}
