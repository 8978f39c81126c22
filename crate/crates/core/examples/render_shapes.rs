//! Renders each class in every domain, with spurious cues and under every
//! corruption, as PNG files.
//!
//! `cargo run --example render_shapes -- out/shapes`

use std::path::PathBuf;

use zsdistill::shapes::{
    make_dataset, write_png, CorruptionKind, DatasetSpec, Domain, SpuriousMode,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "shapes_png".into()),
    );
    std::fs::create_dir_all(&dir)?;
    let mut n = 0;
    for domain in [Domain::Natural, Domain::Synthetic, Domain::Sketch] {
        for spurious in [
            SpuriousMode::None,
            SpuriousMode::Background,
            SpuriousMode::Marker,
        ] {
            let set = make_dataset(&DatasetSpec {
                domain,
                spurious,
                per_class: 1,
                split_seed: 7,
                ..Default::default()
            })?;
            for s in &set.samples {
                let name = format!(
                    "{}_{}_{}.png",
                    domain.as_str(),
                    s.spurious.tag().replace(':', "-"),
                    set.spec.classes[s.class_id].name
                );
                write_png(&dir.join(name), &s.pixels)?;
                n += 1;
            }
        }
    }
    let clean = make_dataset(&DatasetSpec {
        domain: Domain::Natural,
        per_class: 1,
        ..Default::default()
    })?;
    for kind in CorruptionKind::ALL {
        for severity in [1, 3, 5] {
            let c = clean.corrupted(kind, severity)?;
            write_png(
                &dir.join(format!("corrupt_{}_s{severity}.png", kind.as_str())),
                &c.samples[0].pixels,
            )?;
            n += 1;
        }
    }
    println!("{n} images in {}", dir.display());
    Ok(())
}
