//! Trains a small teacher with the CLIP objective on captioned shapes,
//! reports zero-shot accuracy and saves both towers.
//!
//! `cargo run --release --example train_teacher -- 600`

use zsdistill::eval::evaluate;
use zsdistill::model::Checkpoint;
use zsdistill::pipeline::{class_text, train_teacher, Teacher, TeacherConfig};
use zsdistill::shapes::{make_dataset, DatasetSpec, Domain};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map_or(Ok(600), |s| s.parse())?;
    let set = |domain, per_class, split_seed| {
        make_dataset(&DatasetSpec {
            domain,
            per_class,
            split_seed,
            ..Default::default()
        })
    };
    let train = [set(Domain::Natural, 96, 1)?, set(Domain::Synthetic, 96, 2)?];
    let mut cfg = TeacherConfig::default();
    cfg.opt.steps = steps;
    let mut log = |s: &str| println!("{s}");
    let (teacher, stats) = train_teacher(&cfg, &[&train[0], &train[1]], 0, &mut log)?;
    println!("loss {:.3} -> {:.3}", stats.first_loss, stats.last_loss);

    let z = class_text(&teacher.text, &train[0].spec.classes)?;
    for (name, domain) in [
        ("natural", Domain::Natural),
        ("synthetic", Domain::Synthetic),
        ("sketch", Domain::Sketch),
    ] {
        let r = evaluate(
            &teacher.zero_shot(&z),
            &set(domain, 32, 50)?,
            "teacher",
            name,
        )?;
        println!(
            "{name:10} top-1 {:5.1}  top-5 {:5.1}",
            100.0 * r.top1,
            100.0 * r.top5
        );
    }

    let dir = std::env::temp_dir();
    let (image, text) = teacher.checkpoints(0);
    let (ip, tp) = (
        dir.join("teacher-image.zsdk"),
        dir.join("teacher-text.zsdk"),
    );
    image.save(&ip)?;
    text.save(&tp)?;
    let back =
        Teacher::from_checkpoints(&Checkpoint::load(&ip)?, &Checkpoint::load(&tp)?, cfg.arch)?;
    assert_eq!(back, teacher);
    println!("saved {} and {}", ip.display(), tp.display());
    Ok(())
}
