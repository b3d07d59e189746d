use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImuSample, LabeledSegment, StrikeLabel, FULL_SCALE_G};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub participants: usize,
    pub seconds_per_class: f64,
    pub freq_hz: f64,
    /// Standard deviation of the white noise in g.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, participants: 12, seconds_per_class: 60.0, freq_hz: 100.0, noise: 0.05 }
    }
}

/// Impact shape of one strike type.
struct Spike {
    amplitude: f64,
    /// Gaussian width in seconds.
    sigma: f64,
    /// Position within the step cycle, in cycles.
    phase: f64,
    /// Amplitude of the extra slow oscillation on the vertical axis.
    low_freq: f64,
}

const FOREFOOT_SPIKE: Spike = Spike { amplitude: 1.2, sigma: 0.010, phase: 0.20, low_freq: 0.0 };
const HEEL_SPIKE: Spike = Spike { amplitude: 1.6, sigma: 0.025, phase: 0.45, low_freq: 0.3 };

impl Spike {
    /// Positive lobe followed by a smaller rebound.
    fn at(&self, dt: f64) -> f64 {
        let g = |x: f64| (-0.5 * (x / self.sigma).powi(2)).exp();
        self.amplitude * (g(dt) - 0.5 * g(dt - 2.5 * self.sigma))
    }
}

struct Participant {
    gait_hz: f64,
    swing: f64,
    swing_phase: f64,
    tilt: f64,
}

fn participant_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Deterministic forefoot/heel sessions for `participants` runners.
///
/// Participant ids are `p01`, `p02`, ...; each gets one segment per label,
/// forefoot first.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<LabeledSegment>> {
    if cfg.participants == 0 {
        return Err(invalid("participants must be positive"));
    }
    if !(cfg.seconds_per_class > 0.0 && cfg.freq_hz > 0.0) {
        return Err(invalid("duration and frequency must be positive"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(invalid("noise must be a nonnegative number"));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| invalid(e.to_string()))?;
    let n = (cfg.seconds_per_class * cfg.freq_hz).round() as usize;
    let mut out = Vec::with_capacity(2 * cfg.participants);
    for p in 0..cfg.participants {
        let mut rng = participant_rng(cfg.seed, p);
        let who = Participant {
            gait_hz: rng.random_range(2.4..=3.2),
            swing: rng.random_range(0.3..=0.6),
            swing_phase: rng.random_range(0.0..2.0 * PI),
            tilt: rng.random_range(-0.3..=0.3),
        };
        for label in StrikeLabel::ALL {
            let spike = match label {
                StrikeLabel::Forefoot => &FOREFOOT_SPIKE,
                StrikeLabel::Heel => &HEEL_SPIKE,
            };
            let steps = (cfg.seconds_per_class * who.gait_hz).ceil() as usize + 2;
            let gains: Vec<f64> = (0..steps).map(|_| rng.random_range(0.9..=1.1)).collect();
            let mut samples = Vec::with_capacity(n);
            for i in 0..n {
                let t = i as f64 / cfg.freq_hz;
                let arm = 2.0 * PI * who.gait_hz / 2.0 * t + who.swing_phase;
                let cycle = t * who.gait_hz - spike.phase;
                let nearest = cycle.round() as i64;
                let mut impact = 0.0;
                for j in nearest - 1..=nearest + 1 {
                    if j < 0 || j as usize >= steps {
                        continue;
                    }
                    let tau = (j as f64 + spike.phase) / who.gait_hz;
                    impact += gains[j as usize] * spike.at(t - tau);
                }
                let slow = spike.low_freq * (PI * who.gait_hz * t).sin();
                let mut a =
                    [who.swing * arm.sin() + 0.3 * impact, 0.5 * who.swing * arm.cos() + who.tilt, impact + slow];
                for v in &mut a {
                    if cfg.noise > 0.0 {
                        *v += noise.sample(&mut rng);
                    }
                    *v = v.clamp(-FULL_SCALE_G, FULL_SCALE_G);
                }
                samples.push(ImuSample { t, ax: a[0], ay: a[1], az: a[2] });
            }
            out.push(LabeledSegment { participant: format!("p{:02}", p + 1), label, freq_hz: cfg.freq_hz, samples });
        }
    }
    Ok(out)
}
