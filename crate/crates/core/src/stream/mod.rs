//! Sliding windows over a raw IMU stream, the consecutive-positive feedback
//! trigger and the timing/energy bounds that follow from the window layout.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

mod simulate;

pub use simulate::{simulate, SimRecord, SimSummary};

/// Sliding-window and trigger parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Window size in raw samples.
    pub w: usize,
    /// Sampling frequency in Hz.
    pub f: f64,
    /// Stride as a fraction of the window, in (0, 1].
    pub s: f64,
    /// Downsampling factor; must divide `w`.
    pub d: usize,
    pub n_consec: usize,
    /// Minimum seconds between two feedback events.
    pub cooldown: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { w: 50, f: 100.0, s: 0.25, d: 2, n_consec: 5, cooldown: 0.5 }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w == 0 {
            return Err(invalid("window size must be positive"));
        }
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(invalid(format!("sampling frequency must be positive, got {}", self.f)));
        }
        if !(self.s > 0.0 && self.s <= 1.0) {
            return Err(invalid(format!("stride ratio must lie in (0, 1], got {}", self.s)));
        }
        if self.d == 0 || !self.w.is_multiple_of(self.d) {
            return Err(invalid(format!("downsampling factor {} does not divide w = {}", self.d, self.w)));
        }
        if self.n_consec == 0 {
            return Err(invalid("n_consec must be positive"));
        }
        if !(self.cooldown.is_finite() && self.cooldown >= 0.0) {
            return Err(invalid(format!("cooldown must be a nonnegative number of seconds, got {}", self.cooldown)));
        }
        Ok(())
    }

    /// Model input length `w / d`.
    pub fn n(&self) -> usize {
        self.w / self.d
    }

    /// Stride in raw samples; fractional strides are allowed.
    pub fn stride(&self) -> f64 {
        self.w as f64 * self.s
    }

    /// First raw sample of window `k`.
    pub fn window_start(&self, k: usize) -> usize {
        (k as f64 * self.stride()).floor() as usize
    }

    /// Number of complete windows in a stream of `t` samples.
    pub fn window_count(&self, t: usize) -> usize {
        if t < self.w {
            return 0;
        }
        // the epsilon keeps exact multiples from flooring one short
        (((t - self.w) as f64 / self.stride()) + 1e-9).floor() as usize + 1
    }

    /// Seconds between consecutive window completions.
    pub fn hop_seconds(&self) -> f64 {
        self.stride() / self.f
    }
}

/// One model input cut from the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub index: usize,
    /// Raw sample interval `[start, end)`.
    pub start: usize,
    pub end: usize,
    /// `[3, n]`, channels first.
    pub input: Tensor,
}

/// Cuts triaxial samples into downsampled `[3, n]` windows.
///
/// Streams shorter than one window yield no windows.
pub fn make_windows(samples: &[[f64; 3]], cfg: &StreamConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    let n = cfg.n();
    let mut out = Vec::with_capacity(cfg.window_count(samples.len()));
    for k in 0..cfg.window_count(samples.len()) {
        let start = cfg.window_start(k);
        let end = start + cfg.w;
        let mut data = vec![0.0; 3 * n];
        for j in 0..n {
            let s = samples[start + j * cfg.d];
            for ch in 0..3 {
                data[ch * n + j] = s[ch];
            }
        }
        out.push(Window { index: k, start, end, input: Tensor::new(vec![3, n], data)? });
    }
    Ok(out)
}

/// Shortest time from the first positive window to feedback, ignoring the
/// cold start: `(N - 1) w s / f`.
pub fn feedback_latency(cfg: &StreamConfig) -> f64 {
    (cfg.n_consec - 1) as f64 * cfg.stride() / cfg.f
}

/// Largest inference time that keeps up with the window hop: `w s / f`.
pub fn realtime_bound(cfg: &StreamConfig) -> f64 {
    cfg.hop_seconds()
}

pub fn realtime_ok(cfg: &StreamConfig, t_infer_s: f64) -> bool {
    t_infer_s <= realtime_bound(cfg)
}

/// Upper bound on compute power when every hop runs one inference,
/// `E f / (w s)`. Units follow the input: joules give watts, microjoules
/// give microwatts.
pub fn worst_case_energy_rate(cfg: &StreamConfig, energy: f64) -> f64 {
    energy * cfg.f / cfg.stride()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub target: usize,
    pub n_consec: usize,
    pub cooldown: f64,
}

impl TriggerConfig {
    pub fn from_stream(cfg: &StreamConfig, target: usize) -> Self {
        Self { target, n_consec: cfg.n_consec, cooldown: cfg.cooldown }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    /// Consecutive target predictions, saturating at `n_consec`.
    pub counter: usize,
    pub last_event: Option<f64>,
    pub last_t: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub t: f64,
    pub class: usize,
}

/// Advances the trigger by one prediction.
///
/// The counter resets on any other class and after every emitted event.
/// A saturated counter held back by the cooldown fires as soon as the
/// cooldown has elapsed.
pub fn trigger_step(
    state: TriggerState,
    prediction: usize,
    t: f64,
    cfg: &TriggerConfig,
) -> Result<(TriggerState, Option<FeedbackEvent>)> {
    if let Some(prev) = state.last_t {
        if t < prev {
            return Err(Error::NonMonotoneTime { previous: prev, current: t });
        }
    }
    let mut next = state;
    next.last_t = Some(t);
    next.counter = if prediction == cfg.target { (state.counter + 1).min(cfg.n_consec) } else { 0 };
    let cooled = state.last_event.is_none_or(|e| t - e >= cfg.cooldown);
    if next.counter == cfg.n_consec && cooled {
        next.counter = 0;
        next.last_event = Some(t);
        return Ok((next, Some(FeedbackEvent { t, class: cfg.target })));
    }
    Ok((next, None))
}

/// Sequential trigger over one stream.
#[derive(Clone, Debug)]
pub struct Trigger {
    pub cfg: TriggerConfig,
    pub state: TriggerState,
}

impl Trigger {
    pub fn new(cfg: TriggerConfig) -> Result<Self> {
        if cfg.n_consec == 0 {
            return Err(invalid("n_consec must be positive"));
        }
        Ok(Self { cfg, state: TriggerState::default() })
    }

    pub fn step(&mut self, prediction: usize, t: f64) -> Result<Option<FeedbackEvent>> {
        let (s, ev) = trigger_step(self.state, prediction, t, &self.cfg)?;
        self.state = s;
        Ok(ev)
    }

    pub fn run(&mut self, preds: &[usize], times: &[f64]) -> Result<Vec<FeedbackEvent>> {
        if preds.len() != times.len() {
            return Err(Error::ShapeMismatch { op: "trigger", dim: "len", expected: preds.len(), got: times.len() });
        }
        let mut out = Vec::new();
        for (&p, &t) in preds.iter().zip(times) {
            out.extend(self.step(p, t)?);
        }
        Ok(out)
    }
}
