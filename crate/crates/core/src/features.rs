//! Basic musical features: tempo, key and time signature.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiPiece, Timeline};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureError {
    #[error("piece has no notes")]
    EmptyPiece,
}

/// Krumhansl–Kessler major-key probe-tone profile, tonic first.
pub const KK_MAJOR: [f64; 12] = [
    6.3500, 2.2300, 3.4800, 2.3300, 4.3800, 4.0900, 2.5200, 5.1900, 2.3900, 3.6600, 2.2900, 2.8800,
];
/// Krumhansl–Kessler minor-key probe-tone profile, tonic first.
pub const KK_MINOR: [f64; 12] = [
    6.3300, 2.6800, 3.5200, 5.3800, 2.6000, 3.5300, 2.5400, 4.7500, 3.9800, 2.6900, 3.3400, 3.1700,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Key {
    /// Pitch class of the tonic, 0 = C.
    pub tonic: u8,
    pub mode: Mode,
    /// Pearson correlation of the winning profile.
    pub confidence: f64,
}

const MAJOR_NAMES: [&str; 12] = [
    "C", "Db", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B",
];
const MINOR_NAMES: [&str; 12] = [
    "C", "C#", "D", "Eb", "E", "F", "F#", "G", "G#", "A", "Bb", "B",
];

impl Key {
    pub fn new(tonic: u8, mode: Mode) -> Self {
        Self {
            tonic: tonic % 12,
            mode,
            confidence: 1.0,
        }
    }

    /// Conventional tonic spelling for the mode.
    pub fn tonic_name(&self) -> &'static str {
        match self.mode {
            Mode::Major => MAJOR_NAMES[self.tonic as usize],
            Mode::Minor => MINOR_NAMES[self.tonic as usize],
        }
    }

    /// Sharps (positive) or flats (negative) in the key signature.
    pub fn accidentals(&self) -> i8 {
        const MAJOR: [i8; 12] = [0, -5, 2, -3, 4, -1, 6, 1, -4, 3, -2, 5];
        const MINOR: [i8; 12] = [-3, 4, -1, -6, 1, -4, 3, -2, 5, 0, -5, 2];
        match self.mode {
            Mode::Major => MAJOR[self.tonic as usize],
            Mode::Minor => MINOR[self.tonic as usize],
        }
    }

    /// Key as an ABC `K:` value, e.g. `Bb` or `F#m`.
    pub fn abc_name(&self) -> String {
        match self.mode {
            Mode::Major => self.tonic_name().to_string(),
            Mode::Minor => format!("{}m", self.tonic_name()),
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", self.tonic_name(), mode)
    }
}

/// Features attached to annotation tags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub tempo_bpm: f64,
    pub key: Key,
    pub timesig: (u8, u8),
    pub duration_s: f64,
}

/// Time-weighted mean BPM over `[0, end_tick]`.
pub fn estimate_tempo(timeline: &Timeline) -> f64 {
    estimate_tempo_range(timeline, 0, timeline.end_tick)
}

pub fn estimate_tempo_range(timeline: &Timeline, start: u64, end: u64) -> f64 {
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (i, seg) in timeline.tempo_map.iter().enumerate() {
        let seg_end = timeline.tempo_map.get(i + 1).map_or(u64::MAX, |n| n.tick);
        let lo = seg.tick.max(start);
        let hi = seg_end.min(end);
        if hi > lo {
            let secs = timeline.seconds_at(hi) - timeline.seconds_at(lo);
            weighted += secs * seg.bpm();
            total += secs;
        }
    }
    if total > 0.0 {
        weighted / total
    } else {
        timeline.tempo_at(start).bpm()
    }
}

/// Duration-weighted pitch-class histogram.
pub fn pitch_class_histogram(piece: &MidiPiece) -> [f64; 12] {
    let mut hist = [0.0; 12];
    for n in &piece.notes {
        hist[(n.pitch % 12) as usize] += n.duration_tick as f64;
    }
    hist
}

/// Pearson correlation of `hist` against `profile` rotated to `tonic`.
///
/// Sums run in profile order, so rotating the histogram and the tonic by the
/// same amount gives a bit-identical result.
pub fn profile_correlation(hist: &[f64; 12], profile: &[f64; 12], tonic: u8) -> f64 {
    let at = |i: usize| hist[(i + tonic as usize) % 12];
    let mean_h = (0..12).map(at).sum::<f64>() / 12.0;
    let mean_p = profile.iter().sum::<f64>() / 12.0;
    let (mut cov, mut var_h, mut var_p) = (0.0, 0.0, 0.0);
    for (i, &p) in profile.iter().enumerate() {
        let dh = at(i) - mean_h;
        let dp = p - mean_p;
        cov += dh * dp;
        var_h += dh * dh;
        var_p += dp * dp;
    }
    if var_h == 0.0 || var_p == 0.0 {
        return 0.0;
    }
    cov / (var_h * var_p).sqrt()
}

/// Krumhansl–Schmuckler key estimate.
///
/// Ties go to major before minor, then to the lowest tonic.
pub fn estimate_key(piece: &MidiPiece) -> Result<Key, FeatureError> {
    if piece.notes.is_empty() {
        return Err(FeatureError::EmptyPiece);
    }
    Ok(key_from_histogram(&pitch_class_histogram(piece)))
}

pub fn key_from_histogram(hist: &[f64; 12]) -> Key {
    let mut best = Key {
        tonic: 0,
        mode: Mode::Major,
        confidence: f64::NEG_INFINITY,
    };
    for (mode, profile) in [(Mode::Major, &KK_MAJOR), (Mode::Minor, &KK_MINOR)] {
        for tonic in 0..12u8 {
            let r = profile_correlation(hist, profile, tonic);
            if r > best.confidence {
                best = Key {
                    tonic,
                    mode,
                    confidence: r,
                };
            }
        }
    }
    best
}

/// Signature active for the most ticks; ties go to the earliest occurrence.
pub fn dominant_time_signature(timeline: &Timeline) -> (u8, u8) {
    dominant_time_signature_range(timeline, 0, timeline.end_tick)
}

pub fn dominant_time_signature_range(timeline: &Timeline, start: u64, end: u64) -> (u8, u8) {
    let mut totals: Vec<((u8, u8), u64)> = Vec::new();
    for (i, sig) in timeline.timesig_map.iter().enumerate() {
        let seg_end = timeline.timesig_map.get(i + 1).map_or(u64::MAX, |n| n.tick);
        let span = seg_end.min(end).saturating_sub(sig.tick.max(start));
        let key = (sig.numerator, sig.denominator);
        match totals.iter_mut().find(|(k, _)| *k == key) {
            Some((_, t)) => *t += span,
            None => totals.push((key, span)),
        }
    }
    let mut best = (timeline.timesig_at(start), 0u64);
    let mut best_sig = (best.0.numerator, best.0.denominator);
    for (sig, span) in totals {
        if span > best.1 {
            best.1 = span;
            best_sig = sig;
        }
    }
    best_sig
}

pub fn summarize(piece: &MidiPiece) -> Result<FeatureSummary, FeatureError> {
    Ok(FeatureSummary {
        tempo_bpm: estimate_tempo(&piece.timeline),
        key: estimate_key(piece)?,
        timesig: dominant_time_signature(&piece.timeline),
        duration_s: piece.duration_s(),
    })
}

/// Features of the excerpt `[start_tick, end_tick)`; notes count when their
/// onset falls inside.
pub fn summarize_range(
    piece: &MidiPiece,
    start_tick: u64,
    end_tick: u64,
) -> Result<FeatureSummary, FeatureError> {
    let mut hist = [0.0; 12];
    let mut any = false;
    for n in &piece.notes {
        if (start_tick..end_tick).contains(&n.onset_tick) {
            hist[(n.pitch % 12) as usize] += n.duration_tick as f64;
            any = true;
        }
    }
    if !any {
        return Err(FeatureError::EmptyPiece);
    }
    let tl = &piece.timeline;
    Ok(FeatureSummary {
        tempo_bpm: estimate_tempo_range(tl, start_tick, end_tick),
        key: key_from_histogram(&hist),
        timesig: dominant_time_signature_range(tl, start_tick, end_tick),
        duration_s: tl.seconds_at(end_tick) - tl.seconds_at(start_tick),
    })
}

/// Coarse tempo word used in captions and answers.
pub fn tempo_descriptor(bpm: f64) -> &'static str {
    match bpm {
        b if b < 76.0 => "slow",
        b if b < 108.0 => "moderate",
        b if b < 168.0 => "fast",
        _ => "very fast",
    }
}
