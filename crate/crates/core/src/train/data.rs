use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::LabeledSegment;
use crate::error::{invalid, Error, Result};
use crate::stream::{make_windows, StreamConfig};
use crate::tensor::Tensor;

/// Where a window came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub participant: String,
    pub label: usize,
    /// Index of the source segment in the loaded list.
    pub segment: usize,
    /// Raw sample interval `[start, end)` within the segment.
    pub start: usize,
    pub end: usize,
}

impl WindowMeta {
    pub fn overlaps(&self, other: &WindowMeta) -> bool {
        self.segment == other.segment && self.start < other.end && other.start < self.end
    }
}

/// Windows of every segment stored contiguously as `[C, n]` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub c: usize,
    pub n: usize,
    x: Vec<f64>,
    pub meta: Vec<WindowMeta>,
}

impl WindowSet {
    pub fn from_segments(segments: &[LabeledSegment], cfg: &StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n();
        let mut x = Vec::new();
        let mut meta = Vec::new();
        for (si, seg) in segments.iter().enumerate() {
            if (seg.freq_hz - cfg.f).abs() > 0.01 * cfg.f {
                return Err(invalid(format!(
                    "segment {si} of {} is sampled at {} Hz but the stream expects {} Hz",
                    seg.participant, seg.freq_hz, cfg.f
                )));
            }
            for w in make_windows(&seg.accel(), cfg)? {
                x.extend_from_slice(w.input.data());
                meta.push(WindowMeta {
                    participant: seg.participant.clone(),
                    label: seg.label.class(),
                    segment: si,
                    start: w.start,
                    end: w.end,
                });
            }
        }
        Ok(Self { c: 3, n, x, meta })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn window(&self, i: usize) -> Tensor {
        let per = self.c * self.n;
        Tensor::from_parts(vec![self.c, self.n], self.x[i * per..(i + 1) * per].to_vec())
    }

    /// `[B, C, n]` batch of the given windows.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let per = self.c * self.n;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.x[i * per..(i + 1) * per]);
        }
        Tensor::from_parts(vec![idx.len(), self.c, self.n], data)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.meta[i].label).collect()
    }

    pub fn participants(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.meta.iter().map(|m| m.participant.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn indices_of(&self, participant: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.meta[i].participant == participant).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

/// Fewest windows a segment may have and still be split.
pub const MIN_SPLIT_WINDOWS: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    fn extend(&mut self, other: Split) {
        self.train.extend(other.train);
        self.val.extend(other.val);
        self.test.extend(other.test);
    }
}

/// Block sizes `(round(r_train n), round(r_val n), rest)`.
pub fn split_sizes(n: usize, ratios: &SplitRatios) -> Result<(usize, usize, usize)> {
    if n < MIN_SPLIT_WINDOWS {
        return Err(invalid(format!("{n} windows are too few to split (need {MIN_SPLIT_WINDOWS})")));
    }
    let total = ratios.train + ratios.val + ratios.test;
    if [ratios.train, ratios.val, ratios.test].iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(invalid("split ratios must be nonnegative and sum to 1"));
    }
    let a = (ratios.train * n as f64).round() as usize;
    let b = ((ratios.val * n as f64).round() as usize).min(n - a);
    Ok((a, b, n - a - b))
}

/// Chronological train/val/test blocks within each segment.
///
/// Train windows that still share raw samples with a test window (only
/// possible when the validation block is shorter than the window overlap)
/// are dropped.
pub fn split_windows(meta: &[WindowMeta], idx: &[usize], ratios: &SplitRatios) -> Result<Split> {
    let mut by_segment: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        by_segment.entry(meta[i].segment).or_default().push(i);
    }
    let mut split = Split::default();
    for (seg, mut ids) in by_segment {
        ids.sort_by_key(|&i| (meta[i].start, i));
        let (a, b, _) = split_sizes(ids.len(), ratios)
            .map_err(|e| invalid(format!("segment {seg} of {}: {e}", meta[ids[0]].participant)))?;
        let test = ids[a + b..].to_vec();
        let train = ids[..a].iter().copied().filter(|&i| test.iter().all(|&j| !meta[i].overlaps(&meta[j]))).collect();
        split.extend(Split { train, val: ids[a..a + b].to_vec(), test });
    }
    Ok(split)
}

pub fn split_participant(set: &WindowSet, participant: &str, ratios: &SplitRatios) -> Result<Split> {
    let idx = set.indices_of(participant);
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!("unknown participant `{participant}`")));
    }
    split_windows(&set.meta, &idx, ratios)
}
