use std::path::PathBuf;

use anyhow::Result;
use footstrike::search::{pareto_front, read_archive, scatter_csv, Trial};
use serde::Serialize;

use crate::common::usage;

#[derive(clap::Args)]
pub struct Args {
    /// Output directory of a search run.
    #[arg(long, conflicts_with = "archive")]
    dir: Option<PathBuf>,
    /// Archive file written by a search run.
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Print a JSON summary instead of a table.
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    /// Print the scatter CSV of every trial.
    #[arg(long)]
    csv: bool,
}

#[derive(Serialize)]
struct Summary<'a> {
    trials: usize,
    failed: usize,
    deployable: usize,
    front: Vec<&'a Trial>,
}

pub fn run(a: Args) -> Result<()> {
    let path = match (&a.dir, &a.archive) {
        (Some(d), _) => d.join("archive.jsonl"),
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(usage("give --dir or --archive")),
    };
    let trials = read_archive(&path)?;
    if a.csv {
        print!("{}", scatter_csv(&trials));
        return Ok(());
    }
    let mut front: Vec<&Trial> = pareto_front(&trials).into_iter().map(|i| &trials[i]).collect();
    front.sort_by(|x, y| x.energy_uj.total_cmp(&y.energy_uj));
    let summary = Summary {
        trials: trials.len(),
        failed: trials.iter().filter(|t| t.error.is_some()).count(),
        deployable: trials.iter().filter(|t| t.deployable).count(),
        front,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    println!("{} trials, {} deployable, {} failed", summary.trials, summary.deployable, summary.failed);
    println!("{:<28} {:>5} {:>10} {:>8} {:>10}", "model", "batch", "lr", "F1", "energy uJ");
    for t in &summary.front {
        let c = &t.config;
        println!(
            "{:<28} {:>5} {:>10.3e} {:>8.4} {:>10.3}",
            c.model_config().label(),
            c.batch_size,
            c.lr,
            t.f1,
            t.energy_uj
        );
    }
    Ok(())
}
