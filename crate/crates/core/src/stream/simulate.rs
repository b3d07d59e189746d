use serde::{Deserialize, Serialize};

use super::{make_windows, StreamConfig, Trigger, TriggerConfig};
use crate::error::Result;
use crate::tensor::Tensor;

/// One simulated inference; `t` is the time the window completes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub window_index: usize,
    pub t: f64,
    pub predicted_class: usize,
    pub counter: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub event: Option<super::FeedbackEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub windows: usize,
    pub events: usize,
    pub first_event_t: Option<f64>,
    pub mean_counter: f64,
}

impl SimSummary {
    pub fn from_records(records: &[SimRecord]) -> Self {
        let events: Vec<f64> = records.iter().filter_map(|r| r.event.map(|e| e.t)).collect();
        let mean_counter = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.counter as f64).sum::<f64>() / records.len() as f64
        };
        Self { windows: records.len(), events: events.len(), first_event_t: events.first().copied(), mean_counter }
    }
}

/// Replays a raw stream through windowing, a classifier and the trigger.
///
/// `classify` maps one `[3, n]` window to a class index. The recorded
/// counter is the value after the step (0 right after an event).
pub fn simulate<F>(samples: &[[f64; 3]], cfg: &StreamConfig, target: usize, mut classify: F) -> Result<Vec<SimRecord>>
where
    F: FnMut(&Tensor) -> Result<usize>,
{
    let windows = make_windows(samples, cfg)?;
    let mut trigger = Trigger::new(TriggerConfig::from_stream(cfg, target))?;
    let mut out = Vec::with_capacity(windows.len());
    for w in &windows {
        let t = w.end as f64 / cfg.f;
        let pred = classify(&w.input)?;
        let event = trigger.step(pred, t)?;
        out.push(SimRecord { window_index: w.index, t, predicted_class: pred, counter: trigger.state.counter, event });
    }
    Ok(out)
}
