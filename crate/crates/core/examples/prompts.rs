//! Pairwise covering array over the built-in contextual dimensions and the
//! diversified prompts it yields for one class.
//!
//! `cargo run --example prompts -- 30` uses 30 options per dimension.

use zsdistill::prompts::{
    assemble_prompts, build_covering_array, simple_prompt_bank, write_prompts, ClassPrompt,
    OptionBank,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let v: usize = std::env::args().nth(1).map_or(Ok(15), |s| s.parse())?;
    let bank = OptionBank::builtin(v);
    let k = bank.dimensions.len();
    let array = build_covering_array(k, v, 2, 0)?;
    let cov = array.coverage();
    println!(
        "{k} dimensions x {v} options: {} rows cover {}/{} pairs (exhaustive would be {})",
        array.len(),
        cov.covered,
        cov.total,
        v.pow(k as u32)
    );
    let prompts = assemble_prompts(
        &ClassPrompt::new("saint bernard", "dog"),
        &bank.dimensions,
        &array,
    )?;
    for p in prompts.iter().take(5) {
        println!("  {p}");
    }
    println!("  ...");
    println!(
        "simple: {:?}",
        simple_prompt_bank(&[("saint bernard".into(), "dog".into())], 2)?
    );
    let path = std::env::temp_dir().join("zsdistill_prompts.txt");
    let lines: Vec<String> = prompts.iter().map(ToString::to_string).collect();
    write_prompts(&path, &lines)?;
    println!("wrote {}", path.display());
    Ok(())
}
