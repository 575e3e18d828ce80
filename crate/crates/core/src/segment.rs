//! Bar-aligned fixed-duration clip selection.
//!
//! Up to `count` clips of `target_s` seconds are anchored at evenly spaced
//! positions from the start to the end of a piece. Starts snap back to the
//! closest bar line, ends to the last bar line inside the window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiPiece, Timeline};
use crate::octuple::{OctupleToken, QuantConfig};

pub const DEFAULT_CLIP_SECONDS: f64 = 20.0;
pub const DEFAULT_CLIP_COUNT: usize = 3;

const EPS_S: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("piece has no notes")]
    EmptyPiece,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Begin,
    Middle,
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub piece_id: String,
    pub start_tick: u64,
    pub end_tick: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub region: Region,
    pub bar_aligned: bool,
}

impl Clip {
    /// Stable identifier, unique within a piece since clips never overlap.
    pub fn clip_id(&self) -> String {
        format!("{}@{}", self.piece_id, self.start_tick)
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Selects up to `count` non-overlapping clips of nominal length `target_s`.
///
/// Anchor `i` sits at `i * (L - target_s) / (count - 1)` seconds. A clip fits
/// when its start plus `target_s` stays within the piece; clips that do not
/// fit are dropped, so short pieces yield fewer clips.
pub fn select_clips(
    piece: &MidiPiece,
    piece_id: &str,
    target_s: f64,
    count: usize,
) -> Result<Vec<Clip>, SegmentError> {
    if piece.notes.is_empty() {
        return Err(SegmentError::EmptyPiece);
    }
    let tl = &piece.timeline;
    let total_s = tl.seconds_at(tl.end_tick);
    let bars = tl.bar_grid();
    let bar_s: Vec<f64> = bars.iter().map(|&b| tl.seconds_at(b)).collect();

    let mut clips: Vec<Clip> = Vec::new();
    for i in 0..count {
        let anchor = if count > 1 {
            i as f64 * (total_s - target_s).max(0.0) / (count - 1) as f64
        } else {
            0.0
        };
        let mut start = bars[bar_s
            .partition_point(|&s| s <= anchor + EPS_S)
            .saturating_sub(1)];
        if let Some(prev) = clips.last() {
            if start < prev.end_tick {
                match bars.iter().find(|&&b| b >= prev.end_tick) {
                    Some(&b) => start = b,
                    None => continue,
                }
            }
        }
        let start_s = tl.seconds_at(start);
        if start_s + target_s > total_s + EPS_S {
            continue;
        }
        let limit_s = start_s + target_s;
        let last_bar = bars
            .iter()
            .zip(&bar_s)
            .filter(|&(&b, &s)| b > start && s <= limit_s + EPS_S)
            .map(|(&b, _)| b)
            .next_back();
        let (end, bar_aligned) = match last_bar {
            Some(b) => (b, true),
            None => {
                let mut end = tl.seconds_to_tick(limit_s).min(tl.end_tick);
                if tl.seconds_at(end) > limit_s + EPS_S {
                    end -= 1;
                }
                (end, false)
            }
        };
        if end <= start {
            continue;
        }
        clips.push(Clip {
            piece_id: piece_id.to_string(),
            start_tick: start,
            end_tick: end,
            start_s,
            end_s: tl.seconds_at(end),
            region: region_of(i, count),
            bar_aligned,
        });
    }
    Ok(clips)
}

fn region_of(index: usize, count: usize) -> Region {
    if index == 0 {
        Region::Begin
    } else if index + 1 == count {
        Region::Late
    } else {
        Region::Middle
    }
}

/// Tokens whose snapped onset lies in the clip, with bars rebased to the
/// clip's first bar.
pub fn slice_tokens(
    tokens: &[OctupleToken],
    clip: &Clip,
    timeline: &Timeline,
    cfg: &QuantConfig,
) -> Vec<OctupleToken> {
    let bars = timeline.bar_grid();
    let unit_den = 4 * timeline.ticks_per_quarter as u64;
    let res = cfg.positions_per_bar_unit as u64;
    let first_bar = bars
        .partition_point(|&b| b <= clip.start_tick)
        .saturating_sub(1) as u32;
    tokens
        .iter()
        .filter(|t| {
            let bar_start = match bars.get(t.bar as usize) {
                Some(&b) => b,
                None => return false,
            };
            let onset = bar_start + t.position as u64 * unit_den / res;
            (clip.start_tick..clip.end_tick).contains(&onset)
        })
        .map(|t| OctupleToken {
            bar: t.bar - first_bar,
            ..*t
        })
        .collect()
}
