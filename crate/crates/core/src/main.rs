use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zsdistill::pipeline::{
    export_data, export_prompts, render_text, run_experiment, ExperimentConfig, RunOptions, Stage,
    Summary,
};

#[derive(Parser)]
#[command(
    name = "zsdistill",
    version,
    about = "Desk-scale zero-shot distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Bundled config name (table2_toy, table3_toy) or a TOML file.
    #[arg(long, default_value = "table2_toy")]
    config: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs only this stage (teacher, pretrain, finetune, eval).
    #[arg(long)]
    stage: Option<String>,
    /// Suppress the run log on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render and export every dataset of the first replicate.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Also write one PNG per sample.
        #[arg(long)]
        png: bool,
    },
    /// Export the diversified prompts of the synthetic training sets.
    GenPrompts {
        #[command(flatten)]
        common: Common,
    },
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// All configured stages, then reports; exits non-zero if a gate fails.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Rewrites the reports from `reports/summary.json` and prints them.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Prints the resolved configuration with every default filled in.
    PrintConfig {
        #[command(flatten)]
        common: Common,
        /// Print the built-in defaults instead of a config.
        #[arg(long)]
        defaults: bool,
    },
}

fn load(c: &Common) -> zsdistill::pipeline::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::resolve(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run_stage(c: &Common, stage: Option<Stage>) -> zsdistill::pipeline::Result<bool> {
    let cfg = load(c)?;
    let stages = match (&c.stage, stage) {
        (Some(s), _) => Some(vec![s.parse()?]),
        (None, Some(s)) => Some(vec![s]),
        (None, None) => None,
    };
    let ran_eval = stages.as_ref().is_none_or(|v| v.contains(&Stage::Eval));
    let summary = run_experiment(
        &cfg,
        &RunOptions {
            stages,
            echo: !c.quiet,
        },
    )?;
    if ran_eval {
        print!("{}", render_text(&cfg, &summary));
    }
    println!("trained steps: {}", summary.trained_steps);
    Ok(!ran_eval || summary.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common, png } => load(common).and_then(|cfg| {
            let dir = cfg.out.join("data");
            for (name, n) in export_data(&cfg, cfg.seed, &dir, *png)? {
                println!("{name:32} {n:6} samples");
            }
            Ok(true)
        }),
        Command::GenPrompts { common } => load(common).and_then(|cfg| {
            let path = cfg.out.join("prompts.csv");
            let n = export_prompts(&cfg, cfg.seed, &path)?;
            println!("{n} prompts -> {}", path.display());
            Ok(true)
        }),
        Command::TrainTeacher { common } => run_stage(common, Some(Stage::Teacher)),
        Command::Pretrain { common } => run_stage(common, Some(Stage::Pretrain)),
        Command::Finetune { common } => run_stage(common, Some(Stage::Finetune)),
        Command::Eval { common } => run_stage(common, Some(Stage::Eval)),
        Command::Run { common } => run_stage(common, None),
        Command::Report { common } => load(common).and_then(|cfg| {
            let s = Summary::load(&cfg.out.join("reports").join("summary.json"))?;
            zsdistill::pipeline::write_reports(&cfg.out, &cfg, &s)?;
            print!("{}", render_text(&cfg, &s));
            Ok(s.passed)
        }),
        Command::PrintConfig { common, defaults } => {
            let cfg = if *defaults {
                Ok(ExperimentConfig::default())
            } else {
                load(common)
            };
            cfg.map(|c| {
                print!("{}", c.to_toml());
                true
            })
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
