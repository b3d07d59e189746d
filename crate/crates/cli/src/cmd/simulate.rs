use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use footstrike::dataio::{load_sessions, StrikeLabel};
use footstrike::models::{IntModel, Mode, Model, ModelConfig};
use footstrike::stream::{
    feedback_latency, realtime_bound, realtime_ok, simulate, worst_case_energy_rate, SimRecord, SimSummary,
    StreamConfig,
};
use footstrike::Tensor;
use serde::Serialize;

use crate::common::{cost_model, create_dir, usage, write_json, write_jsonl};
use crate::manifest::Run;

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum ModeArg {
    Float,
    FakeQuant,
    Int,
}

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// Float checkpoint or exported integer model.
    #[arg(long)]
    model: PathBuf,
    /// Arithmetic for float checkpoints; integer models always run in integers.
    #[arg(long, value_enum, default_value_t = ModeArg::Int)]
    mode: ModeArg,
    /// Session file; its segments are replayed back to back.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50)]
    w: usize,
    #[arg(long, default_value_t = 100.0)]
    f: f64,
    #[arg(long, default_value_t = 0.25)]
    s: f64,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    n_consec: usize,
    #[arg(long, default_value_t = 0.5)]
    cooldown: f64,
    /// Strike type that raises feedback.
    #[arg(long, default_value = "heel")]
    target: String,
    #[arg(long, default_value = "xc7s15")]
    platform: String,
    #[arg(long)]
    out: PathBuf,
}

enum Loaded {
    Float(Model),
    Int(IntModel),
}

impl Loaded {
    fn read(path: &PathBuf) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
        Ok(if value.get("requants").is_some() {
            Loaded::Int(IntModel::from_json(&text).with_context(|| format!("bad integer model {}", path.display()))?)
        } else {
            Loaded::Float(Model::from_json(&text).with_context(|| format!("bad checkpoint {}", path.display()))?)
        })
    }

    fn config(&self) -> &ModelConfig {
        match self {
            Loaded::Float(m) => &m.config,
            Loaded::Int(m) => &m.config,
        }
    }
}

#[derive(Serialize)]
struct Summary {
    model: String,
    #[serde(flatten)]
    sim: SimSummary,
    feedback_latency_s: f64,
    realtime_bound_s: f64,
    inference_latency_ms: f64,
    realtime_ok: bool,
    worst_case_power_mw: f64,
    /// Seconds before the first window is complete.
    cold_start_s: f64,
}

pub fn run(a: Args) -> Result<()> {
    let cfg = StreamConfig { w: a.w, f: a.f, s: a.s, d: a.d, n_consec: a.n_consec, cooldown: a.cooldown };
    cfg.validate()?;
    let target: StrikeLabel = a.target.parse()?;
    let model = Loaded::read(&a.model)?;
    let mcfg = model.config().clone();
    if mcfg.n != cfg.n() {
        return Err(usage(format!("model expects windows of {} samples but w / d = {}", mcfg.n, cfg.n())));
    }
    let cost = cost_model(&a.platform)?.cost(&mcfg)?;

    let segments = load_sessions(&a.data).with_context(|| format!("cannot load sessions from {}", a.data.display()))?;
    if let Some(s) = segments.iter().find(|s| s.freq_hz != cfg.f) {
        return Err(usage(format!("session sampled at {} Hz but --f is {}", s.freq_hz, cfg.f)));
    }
    let samples: Vec<[f64; 3]> = segments.iter().flat_map(|s| s.accel()).collect();

    let run = Run::start("simulate", None, &a)?;
    let records: Vec<SimRecord> = match &model {
        Loaded::Int(m) => simulate(&samples, &cfg, target.class(), |x: &Tensor| m.predict(x))?,
        Loaded::Float(m) => {
            let mode = match a.mode {
                ModeArg::Float => Mode::Float,
                ModeArg::FakeQuant => Mode::FakeQuant,
                ModeArg::Int => Mode::Int,
            };
            let int = if mode == Mode::Int { Some(m.export_int()?) } else { None };
            simulate(&samples, &cfg, target.class(), |x: &Tensor| match &int {
                Some(i) => i.predict(x),
                None => Ok(m.predict(&x.unsqueeze0()?, mode)?[0]),
            })?
        }
    };
    let inference_s = cost.latency_ms / 1e3;
    let summary = Summary {
        model: mcfg.label(),
        sim: SimSummary::from_records(&records),
        feedback_latency_s: feedback_latency(&cfg),
        realtime_bound_s: realtime_bound(&cfg),
        inference_latency_ms: cost.latency_ms,
        realtime_ok: realtime_ok(&cfg, inference_s),
        worst_case_power_mw: worst_case_energy_rate(&cfg, cost.energy_uj) / 1e3,
        cold_start_s: cfg.w as f64 / cfg.f,
    };

    create_dir(&a.out)?;
    let events: Vec<_> = records.iter().filter_map(|r| r.event).collect();
    let events_path = write_jsonl(&a.out.join("events.jsonl"), &events)?;
    let summary_path = write_json(&a.out.join("summary.json"), &summary)?;
    run.finish(&a.out, &[events_path, summary_path])?;
    println!(
        "{} windows, {} feedback events, first at {}",
        summary.sim.windows,
        summary.sim.events,
        summary.sim.first_event_t.map_or("-".into(), |t| format!("{t:.3} s"))
    );
    Ok(())
}
