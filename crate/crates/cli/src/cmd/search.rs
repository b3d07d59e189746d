use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use footstrike::dataio::{cap_balance, load_sessions, participants};
use footstrike::models::Arch;
use footstrike::search::{
    run_search, scatter_csv, write_archive, SearchOptions, SearchOutcome, SearchSpace, SyntheticEvaluator,
    TrainingEvaluator,
};
use footstrike::stream::StreamConfig;
use footstrike::train::WindowSet;
use serde::Serialize;

use crate::common::{cost_model, create_dir, parse_arch, usage, write_json};
use crate::manifest::Run;

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum EvaluatorKind {
    /// Train every candidate with the two-step pipeline.
    Train,
    /// Closed-form F1 stand-in; fast, for exploring the search itself.
    Surrogate,
}

#[derive(clap::Args, Serialize)]
pub struct Args {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    /// Maximum number of evaluated configurations.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    #[arg(long, default_value_t = 20)]
    population: usize,
    /// Per-gene mutation probability.
    #[arg(long, default_value_t = 0.2)]
    mutation: f64,
    #[arg(long, default_value = "xc7s15")]
    platform: String,
    #[arg(long, value_enum, default_value_t = EvaluatorKind::Train)]
    evaluator: EvaluatorKind,
    /// Session file or directory; required by the training evaluator.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    hold_out: Option<String>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Retrains averaged per candidate.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 3800)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the genetic loop even when the whole space fits in the budget.
    #[arg(long)]
    force_ga: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    let space = SearchSpace::for_arch(a.arch);
    let opts = SearchOptions {
        budget: a.budget,
        population: a.population,
        mutation: a.mutation,
        seed: a.seed,
        force_ga: a.force_ga,
        ..SearchOptions::default()
    };
    let cost = cost_model(&a.platform)?;
    let run = Run::start("search", Some(a.seed), &a)?;
    let outcome: SearchOutcome = match a.evaluator {
        EvaluatorKind::Surrogate => run_search(&space, &SyntheticEvaluator { cost }, &opts)?,
        EvaluatorKind::Train => {
            let data = a.data.as_ref().ok_or_else(|| usage("the training evaluator needs --data"))?;
            let segments =
                load_sessions(data).with_context(|| format!("cannot load sessions from {}", data.display()))?;
            let segments = cap_balance(&segments, a.cap, false);
            let subject = match &a.hold_out {
                Some(p) => p.clone(),
                None => participants(&segments).into_iter().next().ok_or_else(|| usage("dataset has no segments"))?,
            };
            let set = WindowSet::from_segments(&segments, &StreamConfig::default())?;
            let ev =
                TrainingEvaluator { set, subject, cost, epochs: a.epochs, patience: a.patience, repeats: a.repeats };
            run_search(&space, &ev, &opts)?
        }
    };

    create_dir(&a.out)?;
    let archive_path = a.out.join("archive.jsonl");
    write_archive(&archive_path, &outcome.archive)?;
    let front_path = write_json(&a.out.join("front.json"), &outcome.front_trials())?;
    let scatter_path = a.out.join("scatter.csv");
    fs::write(&scatter_path, scatter_csv(&outcome.archive))
        .with_context(|| format!("cannot write {}", scatter_path.display()))?;
    run.finish(&a.out, &[archive_path, front_path, scatter_path])?;

    let failed = outcome.archive.iter().filter(|t| t.error.is_some()).count();
    println!(
        "{} trials ({}{} failed), {} on the front",
        outcome.archive.len(),
        if outcome.exhaustive { "exhaustive, " } else { "" },
        failed,
        outcome.front.len()
    );
    for t in outcome.front_trials() {
        println!("  {:<28} F1 {:.4}  {:.3} uJ", t.config.model_config().label(), t.f1, t.energy_uj);
    }
    Ok(())
}
