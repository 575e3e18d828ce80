//! Standard MIDI File ingestion.
//!
//! [`parse_smf`] turns format 0/1 files into a [`MidiPiece`]: a canonical,
//! sorted list of [`NoteEvent`]s plus a [`Timeline`] holding the tempo and
//! time-signature maps. The timeline provides tick/second conversion and the
//! bar grid used by clip segmentation.

mod parse;
mod timeline;
mod write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_smf, parse_smf_with_report, ParseReport};
pub use timeline::{bar_grid, ticks_to_seconds};
pub use write::write_smf;

/// Tempo used when a file carries no tempo event at tick 0 (120 BPM).
pub const DEFAULT_US_PER_QUARTER: u32 = 500_000;
/// Time signature used when a file carries none at tick 0.
pub const DEFAULT_TIME_SIGNATURE: (u8, u8) = (4, 4);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported MIDI file: {0}")]
    UnsupportedFormat(String),
    #[error("track {track} truncated at byte {offset}")]
    TruncatedTrack { track: usize, offset: usize },
    #[error("track {track}: malformed event at byte {offset}")]
    MalformedEvent { track: usize, offset: usize },
    #[error("tick {tick} outside timeline [0, {end_tick}]")]
    TickOutOfRange { tick: u64, end_tick: u64 },
}

/// One sounding note, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_tick: u64,
    pub duration_tick: u64,
    pub track: u16,
    pub channel: u8,
    /// Program active on the channel at note onset.
    pub program: u8,
}

impl NoteEvent {
    pub fn end_tick(&self) -> u64 {
        self.onset_tick + self.duration_tick
    }

    pub fn is_valid(&self) -> bool {
        self.pitch <= 127
            && (1..=127).contains(&self.velocity)
            && self.duration_tick > 0
            && self.channel <= 15
            && self.program <= 127
    }

    fn sort_key(&self) -> (u64, u16, u8, u8, u64, u8, u8) {
        (
            self.onset_tick,
            self.track,
            self.pitch,
            self.channel,
            self.duration_tick,
            self.velocity,
            self.program,
        )
    }
}

/// A tempo change: from `tick` on, one quarter note lasts `us_per_quarter` µs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoChange {
    pub tick: u64,
    pub us_per_quarter: u32,
}

impl TempoChange {
    pub fn bpm(&self) -> f64 {
        60_000_000.0 / self.us_per_quarter as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSigChange {
    pub tick: u64,
    pub numerator: u8,
    /// Always a power of two.
    pub denominator: u8,
}

/// Tempo and meter maps of a piece.
///
/// Both maps are sorted strictly by tick and start at tick 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub ticks_per_quarter: u16,
    pub tempo_map: Vec<TempoChange>,
    pub timesig_map: Vec<TimeSigChange>,
    pub end_tick: u64,
}

impl Timeline {
    /// Builds a timeline from raw (possibly unsorted, duplicated) map entries.
    ///
    /// Later entries win on duplicate ticks. Defaults are inserted at tick 0
    /// when missing. Zero tempos and signatures with a zero numerator or a
    /// non power-of-two denominator are discarded.
    pub fn new(
        ticks_per_quarter: u16,
        tempos: impl IntoIterator<Item = TempoChange>,
        timesigs: impl IntoIterator<Item = TimeSigChange>,
        end_tick: u64,
    ) -> Self {
        let mut tempo_map: Vec<TempoChange> = tempos
            .into_iter()
            .filter(|t| t.us_per_quarter > 0)
            .collect();
        tempo_map.sort_by_key(|t| t.tick);
        dedup_keep_last(&mut tempo_map, |t| t.tick);
        if tempo_map.first().is_none_or(|t| t.tick != 0) {
            tempo_map.insert(
                0,
                TempoChange {
                    tick: 0,
                    us_per_quarter: DEFAULT_US_PER_QUARTER,
                },
            );
        }

        let mut timesig_map: Vec<TimeSigChange> = timesigs
            .into_iter()
            .filter(|s| s.numerator > 0 && s.denominator.is_power_of_two())
            .collect();
        timesig_map.sort_by_key(|s| s.tick);
        dedup_keep_last(&mut timesig_map, |s| s.tick);
        if timesig_map.first().is_none_or(|s| s.tick != 0) {
            timesig_map.insert(
                0,
                TimeSigChange {
                    tick: 0,
                    numerator: DEFAULT_TIME_SIGNATURE.0,
                    denominator: DEFAULT_TIME_SIGNATURE.1,
                },
            );
        }

        Self {
            ticks_per_quarter: ticks_per_quarter.max(1),
            tempo_map,
            timesig_map,
            end_tick,
        }
    }

    /// Constant-tempo, constant-meter timeline.
    pub fn constant(ticks_per_quarter: u16, bpm: f64, timesig: (u8, u8), end_tick: u64) -> Self {
        let us = (60_000_000.0 / bpm).round() as u32;
        Self::new(
            ticks_per_quarter,
            [TempoChange {
                tick: 0,
                us_per_quarter: us,
            }],
            [TimeSigChange {
                tick: 0,
                numerator: timesig.0,
                denominator: timesig.1,
            }],
            end_tick,
        )
    }

    pub fn tempo_at(&self, tick: u64) -> TempoChange {
        active(&self.tempo_map, tick, |t| t.tick)
    }

    pub fn timesig_at(&self, tick: u64) -> TimeSigChange {
        active(&self.timesig_map, tick, |s| s.tick)
    }

    /// Bar length in ticks for a signature, at least one tick.
    pub fn bar_ticks(&self, numerator: u8, denominator: u8) -> u64 {
        let len = (numerator as u64 * 4 * self.ticks_per_quarter as u64 + denominator as u64 / 2)
            / denominator as u64;
        len.max(1)
    }
}

fn dedup_keep_last<T, K: PartialEq>(items: &mut Vec<T>, key: impl Fn(&T) -> K) {
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for item in items.drain(..) {
        match out.last_mut() {
            Some(last) if key(last) == key(&item) => *last = item,
            _ => out.push(item),
        }
    }
    *items = out;
}

fn active<T: Copy>(map: &[T], tick: u64, key: impl Fn(&T) -> u64) -> T {
    let idx = map.partition_point(|e| key(e) <= tick);
    map[idx.saturating_sub(1)]
}

/// A parsed piece: canonical note list plus timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidiPiece {
    pub notes: Vec<NoteEvent>,
    pub timeline: Timeline,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub composer: Option<String>,
}

impl MidiPiece {
    /// Builds a piece, sorting notes canonically and extending `end_tick`
    /// to cover every note.
    pub fn new(mut notes: Vec<NoteEvent>, mut timeline: Timeline) -> Self {
        sort_notes(&mut notes);
        let last = notes.iter().map(NoteEvent::end_tick).max().unwrap_or(0);
        timeline.end_tick = timeline.end_tick.max(last);
        Self {
            notes,
            timeline,
            title: None,
            composer: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Duration of the whole piece in seconds.
    pub fn duration_s(&self) -> f64 {
        self.timeline.seconds_at(self.timeline.end_tick)
    }
}

pub fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by_key(NoteEvent::sort_key);
}
