//! Corruption sweep and cross-domain evaluation of a trained teacher.
//!
//! `cargo run --release --example robustness`

use zsdistill::eval::{corruption_sweep, cross_domain_eval, write_csv};
use zsdistill::pipeline::{class_text, train_teacher, TeacherConfig};
use zsdistill::shapes::{make_dataset, CorruptionKind, DatasetSpec, Domain};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = |domain, per_class, split_seed| {
        make_dataset(&DatasetSpec {
            domain,
            per_class,
            split_seed,
            ..Default::default()
        })
    };
    let train = [set(Domain::Natural, 96, 1)?, set(Domain::Synthetic, 96, 2)?];
    let mut tc = TeacherConfig::default();
    tc.opt.steps = 600;
    let (teacher, _) = train_teacher(&tc, &[&train[0], &train[1]], 0, &mut |_| {})?;
    let classes = &train[0].spec.classes;
    let z = class_text(&teacher.text, classes)?;
    let clf = teacher.zero_shot(&z);

    let natural = set(Domain::Natural, 32, 10)?;
    let synthetic = set(Domain::Synthetic, 32, 11)?;
    let sketch = set(Domain::Sketch, 32, 12)?;
    let mut reports = cross_domain_eval(
        &clf,
        classes,
        &[
            ("natural", &natural),
            ("synthetic", &synthetic),
            ("sketch", &sketch),
        ],
        "teacher",
    )?;
    for severity in 1..=5 {
        let r = corruption_sweep(
            &clf,
            &natural,
            &CorruptionKind::ALL,
            severity,
            "teacher",
            "natural",
        )?;
        let per: Vec<String> = r
            .per_corruption
            .iter()
            .flatten()
            .map(|(k, v)| format!("{k} {:.0}", 100.0 * v))
            .collect();
        println!(
            "severity {severity}: mean {:5.1}  [{}]",
            100.0 * r.top1,
            per.join(", ")
        );
        reports.push(r);
    }
    for r in &reports[..3] {
        println!("{:10} {:5.1}", r.testset, 100.0 * r.top1);
    }
    let path = std::env::temp_dir().join("zsdistill_robustness.csv");
    write_csv(&path, &reports)?;
    println!("wrote {}", path.display());
    Ok(())
}
