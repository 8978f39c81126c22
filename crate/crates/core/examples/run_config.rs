//! Runs an experiment configuration end to end and prints its table.
//!
//! `cargo run --release --example run_config -- path/to/config.toml`
//! Without an argument a small built-in configuration is used.

use zsdistill::pipeline::{render_text, run_experiment, ExperimentConfig, RunOptions};

const SMALL: &str = r#"
name = "small"
out = "runs/example_small"

[data]
teacher_per_class = 64
pool_per_class = 48
finetune_per_class = 48
test_per_class = 24

[teacher.opt]
steps = 400

[teacher]
floor = 0.5
probe_floor = 0.5

[pretrain.opt]
steps = 600
lr = 1e-3

[finetune.opt]
steps = 300

[[testsets]]
name = "natural"
domain = "natural"

[[testsets]]
name = "synthetic"
domain = "synthetic"

[[testsets]]
name = "shuffled_background"
domain = "natural"
spurious = "shuffled_background"

[[runs]]
name = "l2"
loss = "l2_feature"
spurious = "background"

[[runs]]
name = "clip"
loss = "clip"
spurious = "background"

[[gates]]
name = "l2_beats_clip_shuffled"
plus = ["l2@shuffled_background"]
minus = ["clip@shuffled_background"]
at_least = 0.0
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::resolve(&p)?,
        None => ExperimentConfig::from_toml(SMALL, "built-in")?,
    };
    let summary = run_experiment(&cfg, &RunOptions::default())?;
    print!("{}", render_text(&cfg, &summary));
    println!("reports in {}", cfg.out.join("reports").display());
    Ok(())
}
