//! Session files, class balancing and a synthetic gait generator.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FOREFOOT, HEEL};

mod synth;

pub use synth::{synth_dataset, SynthConfig};

/// Sensor full scale in g.
pub const FULL_SCALE_G: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl ImuSample {
    pub fn accel(&self) -> [f64; 3] {
        [self.ax, self.ay, self.az]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrikeLabel {
    Forefoot,
    Heel,
}

impl StrikeLabel {
    pub const ALL: [StrikeLabel; 2] = [StrikeLabel::Forefoot, StrikeLabel::Heel];

    pub fn class(self) -> usize {
        match self {
            StrikeLabel::Forefoot => FOREFOOT,
            StrikeLabel::Heel => HEEL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrikeLabel::Forefoot => "forefoot",
            StrikeLabel::Heel => "heel",
        }
    }
}

impl fmt::Display for StrikeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrikeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forefoot" => Ok(StrikeLabel::Forefoot),
            "heel" => Ok(StrikeLabel::Heel),
            other => Err(Error::InvalidArgument(format!("unknown label `{other}`"))),
        }
    }
}

/// One contiguous recording with a single label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub participant: String,
    pub label: StrikeLabel,
    pub freq_hz: f64,
    pub samples: Vec<ImuSample>,
}

impl LabeledSegment {
    pub fn accel(&self) -> Vec<[f64; 3]> {
        self.samples.iter().map(ImuSample::accel).collect()
    }

    /// Checks frequency, strictly increasing time and the sensor range.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.freq_hz.is_finite() && self.freq_hz > 0.0) {
            return Err(format!("freq_hz must be positive, got {}", self.freq_hz));
        }
        for (k, s) in self.samples.iter().enumerate() {
            for (axis, v) in [("ax", s.ax), ("ay", s.ay), ("az", s.az)] {
                if !v.is_finite() || v.abs() > FULL_SCALE_G {
                    return Err(format!("samples[{k}].{axis} = {v} is outside ±{FULL_SCALE_G} g"));
                }
            }
            if !s.t.is_finite() {
                return Err(format!("samples[{k}].t is not finite"));
            }
            if k > 0 && s.t <= self.samples[k - 1].t {
                return Err(format!("samples[{k}].t = {} does not increase (previous {})", s.t, self.samples[k - 1].t));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SessionFile {
    Many(Vec<LabeledSegment>),
    One(LabeledSegment),
}

/// Parses one session file holding a segment or an array of segments.
pub fn load_file(path: &Path) -> Result<Vec<LabeledSegment>> {
    let text = fs::read_to_string(path)?;
    // parse as a value first so syntax errors keep their line and column
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    let file: SessionFile = serde_json::from_value(value).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        message: format!("not a session or array of sessions: {e}"),
    })?;
    let segs = match file {
        SessionFile::Many(v) => v,
        SessionFile::One(s) => vec![s],
    };
    for (i, s) in segs.iter().enumerate() {
        s.validate().map_err(|m| Error::Data {
            path: path.to_path_buf(),
            message: if segs.len() > 1 { format!("segment {i}: {m}") } else { m },
        })?;
    }
    Ok(segs)
}

/// Run manifest that commands write next to their outputs; never a session.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Loads a session file, or every `*.json` file of a directory in name
/// order, skipping [`MANIFEST_FILE`].
pub fn load_sessions(path: &Path) -> Result<Vec<LabeledSegment>> {
    if path.is_file() {
        return load_file(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .filter(|p| p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(load_file(&f)?);
    }
    Ok(out)
}

/// File name used by [`write_sessions`]; a running index disambiguates
/// repeated (participant, label) pairs.
fn segment_file_name(seg: &LabeledSegment, index: usize) -> String {
    let safe: String = seg
        .participant
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}_{}_{index:03}.json", seg.label)
}

/// Writes one file per segment and returns the paths in input order.
pub fn write_sessions(dir: &Path, segments: &[LabeledSegment]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let p = dir.join(segment_file_name(seg, i));
        fs::write(&p, serde_json::to_string(seg)?)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Truncates each (participant, label) to at most `cap` samples, cutting
/// from the tail of the chronologically last segments.
///
/// With `equalize`, both labels of a participant are further truncated to
/// the smaller of their two totals.
pub fn cap_balance(segments: &[LabeledSegment], cap: usize, equalize: bool) -> Vec<LabeledSegment> {
    let mut totals: BTreeMap<(&str, StrikeLabel), usize> = BTreeMap::new();
    for s in segments {
        *totals.entry((s.participant.as_str(), s.label)).or_default() += s.samples.len();
    }
    let mut budget: BTreeMap<(&str, StrikeLabel), usize> = totals.iter().map(|(k, &v)| (*k, v.min(cap))).collect();
    if equalize {
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for ((p, _), &v) in &budget {
            per.entry(p).and_modify(|m| *m = (*m).min(v)).or_insert(v);
        }
        let has_both = |p: &str| StrikeLabel::ALL.iter().all(|l| totals.contains_key(&(p, *l)));
        for ((p, _), v) in budget.iter_mut() {
            if has_both(p) {
                *v = per[p];
            }
        }
    }
    let mut out = Vec::with_capacity(segments.len());
    for s in segments {
        let left = budget.get_mut(&(s.participant.as_str(), s.label)).expect("every key was counted");
        let keep = s.samples.len().min(*left);
        *left -= keep;
        if keep > 0 {
            out.push(LabeledSegment { samples: s.samples[..keep].to_vec(), ..s.clone() });
        }
    }
    out
}

/// Sorted, deduplicated participant ids.
pub fn participants(segments: &[LabeledSegment]) -> Vec<String> {
    let mut ids: Vec<String> = segments.iter().map(|s| s.participant.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}
