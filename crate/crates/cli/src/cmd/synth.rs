use std::path::PathBuf;

use anyhow::Result;
use footstrike::dataio::{synth_dataset, write_sessions, SynthConfig};

use crate::common::create_dir;
use crate::manifest::Run;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    participants: usize,
    /// Seconds of recording per participant and label.
    #[arg(long, default_value_t = 60.0)]
    seconds: f64,
    #[arg(long, default_value_t = 100.0)]
    freq: f64,
    /// White-noise standard deviation in g.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Directory for the session files.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        participants: a.participants,
        seconds_per_class: a.seconds,
        freq_hz: a.freq,
        noise: a.noise,
    };
    let run = Run::start("synth", Some(a.seed), &cfg)?;
    let segments = synth_dataset(&cfg)?;
    create_dir(&a.out)?;
    let paths = write_sessions(&a.out, &segments)?;
    run.finish(&a.out, &paths)?;
    println!("wrote {} session files to {}", paths.len(), a.out.display());
    Ok(())
}
