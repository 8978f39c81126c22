//! Teacher, general-purpose pre-training of a small student, then
//! fine-tuning on synthetic data with a background cue under different
//! objectives. Evaluated zero-shot against the frozen teacher text tower.
//!
//! `cargo run --release --example distill`

use zsdistill::eval::evaluate;
use zsdistill::model::Arch;
use zsdistill::pipeline::{
    class_text, finetune_student, parse_loss, pretrain_student, train_teacher, FinetuneConfig,
    StageOpt, TeacherConfig,
};
use zsdistill::shapes::{make_dataset, DatasetSpec, Domain, SpuriousMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = |domain, spurious, per_class, split_seed| {
        make_dataset(&DatasetSpec {
            domain,
            spurious,
            per_class,
            split_seed,
            ..Default::default()
        })
    };
    let none = SpuriousMode::None;
    let tn = set(Domain::Natural, none, 96, 1)?;
    let ts = set(Domain::Synthetic, none, 96, 2)?;
    let pool = [
        set(Domain::Natural, none, 64, 3)?,
        set(Domain::Synthetic, none, 64, 4)?,
    ];
    let held = set(Domain::Natural, none, 8, 5)?;
    let train = set(Domain::Synthetic, SpuriousMode::Background, 64, 6)?;
    let tests = [
        ("natural", set(Domain::Natural, none, 32, 7)?),
        (
            "shuffled bg",
            set(Domain::Natural, SpuriousMode::ShuffledBackground, 32, 8)?,
        ),
    ];
    let mut quiet = |_: &str| {};

    let mut tc = TeacherConfig::default();
    tc.opt.steps = 600;
    let (teacher, _) = train_teacher(&tc, &[&tn, &ts], 0, &mut quiet)?;
    let z = class_text(&teacher.text, &tn.spec.classes)?;

    let po = StageOpt {
        steps: 800,
        lr: 1e-3,
        ..Default::default()
    };
    let (student, ps) = pretrain_student(
        Arch::MlpSmall,
        &po,
        &teacher,
        &[&pool[0], &pool[1]],
        &held,
        1,
        &mut quiet,
    )?;
    println!("pretrained: held-out cosine {:.3}", ps.heldout_cosine);

    let mut fc = FinetuneConfig::default();
    fc.opt.steps = 400;
    print!("{:16}", "");
    for (name, _) in &tests {
        print!("{name:>12}");
    }
    println!();
    let row = |label: &str,
               clf: &dyn zsdistill::eval::Classifier|
     -> Result<(), Box<dyn std::error::Error>> {
        print!("{label:16}");
        for (name, t) in &tests {
            print!("{:12.1}", 100.0 * evaluate(clf, t, label, name)?.top1);
        }
        println!();
        Ok(())
    };
    row("teacher", &teacher.zero_shot(&z))?;
    row("pretrained", &*student.classifier(&z))?;
    for loss in ["l2_feature", "clip", "mp", "l2_feature+clip"] {
        let (s, _) = finetune_student(
            &fc,
            &parse_loss(loss, 1.0)?,
            student.clone(),
            &teacher,
            &train,
            2,
            &mut quiet,
        )?;
        row(loss, &*s.classifier(&z))?;
    }
    Ok(())
}
