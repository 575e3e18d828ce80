//! OctupleMIDI tokenization.
//!
//! Every note becomes one eight-field [`OctupleToken`]. Field quantization is
//! explicit in [`QuantConfig`]; defaults follow the reference OctupleMIDI
//! ranges so indices stay compatible with encoders trained on them.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiPiece, NoteEvent, TempoChange, TimeSigChange, Timeline};

/// Ticks per quarter used for detokenized pieces.
pub const DETOKENIZE_TPQ: u16 = 480;
/// Instrument index reserved for percussion (MIDI channel 10).
pub const DRUM_INSTRUMENT: u16 = 128;
const DRUM_CHANNEL: u8 = 9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OctupleError {
    #[error("piece has no notes")]
    EmptyPiece,
    #[error("token {index}: {field} = {value} outside vocabulary of size {size}")]
    TokenOutOfRange {
        index: usize,
        field: &'static str,
        value: u32,
        size: u32,
    },
    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),
    #[error("token line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    /// Grid resolution as a fraction of a whole note (64 = 1/64-note grid).
    pub positions_per_bar_unit: u32,
    /// Duration bins in grid units; longer notes clamp to the last bin.
    pub duration_bins: u32,
    /// Uniform velocity bins of width 4 over 1..=127.
    pub velocity_bins: u32,
    /// Log-spaced tempo bins, bin i = 16 * 2^(i/12) BPM.
    pub tempo_bins: u32,
    pub max_bars: u32,
    pub timesig_vocab: Vec<(u8, u8)>,
    pub instrument_vocab_size: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            positions_per_bar_unit: 64,
            duration_bins: 128,
            velocity_bins: 32,
            tempo_bins: 49,
            max_bars: 256,
            timesig_vocab: default_timesig_vocab(),
            instrument_vocab_size: 129,
        }
    }
}

/// Every signature with a power-of-two denominator up to 64 and a bar no
/// longer than two whole notes.
pub fn default_timesig_vocab() -> Vec<(u8, u8)> {
    let mut vocab = Vec::new();
    for den in [1u8, 2, 4, 8, 16, 32, 64] {
        for num in 1..=(2 * den as u16).min(127) as u8 {
            vocab.push((num, den));
        }
    }
    vocab
}

const VELOCITY_WIDTH: u32 = 4;
const TEMPO_BASE_BPM: f64 = 16.0;
const TEMPO_STEPS_PER_OCTAVE: f64 = 12.0;

impl QuantConfig {
    pub fn validate(&self) -> Result<(), OctupleError> {
        let bad = |m: &str| Err(OctupleError::InvalidConfig(m.to_string()));
        if self.positions_per_bar_unit == 0
            || self.duration_bins == 0
            || self.velocity_bins == 0
            || self.tempo_bins == 0
            || self.max_bars == 0
            || self.instrument_vocab_size == 0
        {
            return bad("all bin counts must be positive");
        }
        if self.timesig_vocab.is_empty() {
            return bad("empty time-signature vocabulary");
        }
        let mut seen = self.timesig_vocab.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.timesig_vocab.len() {
            return bad("duplicate time signatures in vocabulary");
        }
        for &(n, d) in &self.timesig_vocab {
            if n == 0 || !d.is_power_of_two() {
                return bad("time signatures need n > 0 and a power-of-two denominator");
            }
            if !(n as u32 * self.positions_per_bar_unit).is_multiple_of(d as u32) {
                return bad("every vocabulary bar must span a whole number of grid units");
            }
        }
        Ok(())
    }

    /// Grid units in a bar of `sig`, rounded up.
    pub fn bar_positions(&self, sig: (u8, u8)) -> u32 {
        (sig.0 as u32 * self.positions_per_bar_unit).div_ceil(sig.1 as u32)
    }

    /// Size of the position vocabulary: the longest bar in the signature
    /// vocabulary.
    pub fn position_vocab_size(&self) -> u32 {
        self.timesig_vocab
            .iter()
            .map(|&s| self.bar_positions(s))
            .max()
            .unwrap_or(1)
    }

    /// Vocabulary sizes in token field order.
    pub fn vocab_sizes(&self) -> [u32; 8] {
        [
            self.max_bars,
            self.position_vocab_size(),
            self.instrument_vocab_size,
            128,
            self.duration_bins,
            self.velocity_bins,
            self.tempo_bins,
            self.timesig_vocab.len() as u32,
        ]
    }

    pub fn velocity_bin(&self, velocity: u8) -> u32 {
        ((velocity.max(1) as u32 - 1) / VELOCITY_WIDTH).min(self.velocity_bins - 1)
    }

    pub fn velocity_from_bin(&self, bin: u32) -> u8 {
        (bin * VELOCITY_WIDTH + 2).clamp(1, 127) as u8
    }

    pub fn tempo_bin(&self, bpm: f64) -> u32 {
        let raw = (TEMPO_STEPS_PER_OCTAVE * (bpm / TEMPO_BASE_BPM).log2()).round();
        raw.clamp(0.0, (self.tempo_bins - 1) as f64) as u32
    }

    pub fn tempo_from_bin(&self, bin: u32) -> f64 {
        TEMPO_BASE_BPM * 2f64.powf(bin as f64 / TEMPO_STEPS_PER_OCTAVE)
    }

    /// Duration bin for a tick length: grid units rounded half-up, clamped.
    pub fn duration_bin(&self, ticks: u64, tpq: u16) -> u32 {
        let units = round_half_up(ticks * self.positions_per_bar_unit as u64, 4 * tpq as u64);
        units.min(self.duration_bins as u64 - 1) as u32
    }

    /// Vocabulary index of `sig`, or of the entry with the closest bar length.
    /// Ties go to the earliest entry.
    pub fn timesig_index(&self, sig: (u8, u8)) -> (u32, bool) {
        if let Some(i) = self.timesig_vocab.iter().position(|&s| s == sig) {
            return (i as u32, true);
        }
        let target = sig.0 as f64 / sig.1 as f64;
        let (best, _) = self.timesig_vocab.iter().enumerate().fold(
            (0usize, f64::INFINITY),
            |(bi, bd), (i, &(n, d))| {
                let dist = (n as f64 / d as f64 / target).ln().abs();
                if dist < bd {
                    (i, dist)
                } else {
                    (bi, bd)
                }
            },
        );
        (best as u32, false)
    }
}

fn round_half_up(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// One note as eight quantized fields. Derived ordering is the canonical
/// token order: (bar, position, instrument, pitch, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OctupleToken {
    pub bar: u32,
    pub position: u32,
    pub instrument: u32,
    pub pitch: u32,
    pub duration: u32,
    pub velocity: u32,
    pub tempo: u32,
    pub timesig: u32,
}

impl OctupleToken {
    pub const FIELD_NAMES: [&'static str; 8] = [
        "bar",
        "position",
        "instrument",
        "pitch",
        "duration",
        "velocity",
        "tempo",
        "timesig",
    ];

    pub fn fields(&self) -> [u32; 8] {
        [
            self.bar,
            self.position,
            self.instrument,
            self.pitch,
            self.duration,
            self.velocity,
            self.tempo,
            self.timesig,
        ]
    }

    pub fn from_fields(f: [u32; 8]) -> Self {
        Self {
            bar: f[0],
            position: f[1],
            instrument: f[2],
            pitch: f[3],
            duration: f[4],
            velocity: f[5],
            tempo: f[6],
            timesig: f[7],
        }
    }

    /// Checks every field against the vocabulary and the position against
    /// the length of the token's own bar.
    pub fn check(&self, cfg: &QuantConfig, index: usize) -> Result<(), OctupleError> {
        for ((value, size), field) in self
            .fields()
            .into_iter()
            .zip(cfg.vocab_sizes())
            .zip(Self::FIELD_NAMES)
        {
            if value >= size {
                return Err(OctupleError::TokenOutOfRange {
                    index,
                    field,
                    value,
                    size,
                });
            }
        }
        let bar_len = cfg.bar_positions(cfg.timesig_vocab[self.timesig as usize]);
        if self.position >= bar_len {
            return Err(OctupleError::TokenOutOfRange {
                index,
                field: "position",
                value: self.position,
                size: bar_len,
            });
        }
        Ok(())
    }
}

impl fmt::Display for OctupleToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.fields();
        write!(
            f,
            "{} {} {} {} {} {} {} {}",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]
        )
    }
}

impl FromStr for OctupleToken {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 8 {
            return Err(format!("expected 8 integers, found {}", parts.len()));
        }
        let mut f = [0u32; 8];
        for (slot, part) in f.iter_mut().zip(parts) {
            *slot = part.parse().map_err(|e| format!("{part:?}: {e}"))?;
        }
        Ok(Self::from_fields(f))
    }
}

/// Line-oriented token text: eight space-separated integers per line.
pub fn write_tokens(tokens: &[OctupleToken]) -> String {
    let mut out = String::with_capacity(tokens.len() * 24);
    for t in tokens {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    out
}

pub fn read_tokens(text: &str) -> Result<Vec<OctupleToken>, OctupleError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.parse().map_err(|message| OctupleError::Parse {
                line: i + 1,
                message,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizeReport {
    /// Notes dropped because their bar index reached `max_bars`.
    pub truncated: usize,
    /// Notes whose time signature was not in the vocabulary.
    pub remapped_timesig: usize,
}

pub fn tokenize(piece: &MidiPiece, cfg: &QuantConfig) -> Result<Vec<OctupleToken>, OctupleError> {
    tokenize_with_report(piece, cfg).map(|(t, _)| t)
}

pub fn tokenize_with_report(
    piece: &MidiPiece,
    cfg: &QuantConfig,
) -> Result<(Vec<OctupleToken>, TokenizeReport), OctupleError> {
    cfg.validate()?;
    if piece.notes.is_empty() {
        return Err(OctupleError::EmptyPiece);
    }
    let tl = &piece.timeline;
    let tpq = tl.ticks_per_quarter as u64;
    let unit_den = 4 * tpq; // ticks * res / unit_den = grid units
    let res = cfg.positions_per_bar_unit as u64;
    let bars = tl.bar_grid();

    let mut report = TokenizeReport::default();
    let mut tokens = Vec::with_capacity(piece.notes.len());
    for note in &piece.notes {
        let mut bar = bars
            .partition_point(|&b| b <= note.onset_tick)
            .saturating_sub(1);
        let mut bar_start = bars.get(bar).copied().unwrap_or(0);
        let mut sig = tl.timesig_at(bar_start);
        let mut pos = round_half_up((note.onset_tick - bar_start) * res, unit_den);
        let bar_ticks = tl.bar_ticks(sig.numerator, sig.denominator);
        if pos * unit_den >= bar_ticks * res {
            // snapped onto the next bar line
            bar += 1;
            bar_start = bars.get(bar).copied().unwrap_or(bar_start + bar_ticks);
            sig = tl.timesig_at(bar_start);
            pos = 0;
        }
        if bar >= cfg.max_bars as usize {
            report.truncated += 1;
            continue;
        }
        let (timesig, known) = cfg.timesig_index((sig.numerator, sig.denominator));
        if !known {
            report.remapped_timesig += 1;
            let limit = cfg.bar_positions(cfg.timesig_vocab[timesig as usize]) as u64;
            pos = pos.min(limit - 1);
        }
        let snapped_tick = bar_start + pos * unit_den / res;
        tokens.push(OctupleToken {
            bar: bar as u32,
            position: pos as u32,
            instrument: instrument_of(note).min(cfg.instrument_vocab_size - 1),
            pitch: note.pitch.min(127) as u32,
            duration: cfg.duration_bin(note.duration_tick, tl.ticks_per_quarter),
            velocity: cfg.velocity_bin(note.velocity),
            tempo: cfg.tempo_bin(tl.tempo_at(snapped_tick).bpm()),
            timesig,
        });
    }
    if report.truncated > 0 {
        warn!(
            "{} note(s) beyond bar {} dropped",
            report.truncated, cfg.max_bars
        );
    }
    if report.remapped_timesig > 0 {
        warn!(
            "{} note(s) carried a time signature outside the vocabulary",
            report.remapped_timesig
        );
    }
    tokens.sort_unstable();
    Ok((tokens, report))
}

fn instrument_of(note: &NoteEvent) -> u32 {
    if note.channel == DRUM_CHANNEL {
        DRUM_INSTRUMENT as u32
    } else {
        note.program as u32
    }
}

/// Rebuilds a piece at [`DETOKENIZE_TPQ`] with notes at bin-center values.
///
/// Bars are laid out back to back; a bar without tokens keeps the previous
/// bar's signature. Tempo changes are placed at the first token that carries
/// a new tempo bin.
pub fn detokenize(tokens: &[OctupleToken], cfg: &QuantConfig) -> Result<MidiPiece, OctupleError> {
    cfg.validate()?;
    for (i, t) in tokens.iter().enumerate() {
        t.check(cfg, i)?;
    }
    let tpq = DETOKENIZE_TPQ as u64;
    let unit_ticks = 4 * tpq / cfg.positions_per_bar_unit as u64;
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();

    let nbars = sorted.last().map_or(0, |t| t.bar as usize + 1);
    let mut bar_sig: Vec<Option<(u8, u8)>> = vec![None; nbars];
    for t in &sorted {
        bar_sig[t.bar as usize].get_or_insert(cfg.timesig_vocab[t.timesig as usize]);
    }
    let mut bar_start = Vec::with_capacity(nbars);
    let mut timesigs = Vec::new();
    let mut tick = 0u64;
    let mut current = sorted
        .first()
        .map(|t| cfg.timesig_vocab[t.timesig as usize]);
    for (bar, sig) in bar_sig.iter().enumerate() {
        let sig = sig.or(current).unwrap_or((4, 4));
        if bar == 0 || Some(sig) != current {
            timesigs.push(TimeSigChange {
                tick,
                numerator: sig.0,
                denominator: sig.1,
            });
        }
        current = Some(sig);
        bar_start.push(tick);
        tick += sig.0 as u64 * 4 * tpq / sig.1 as u64;
    }

    let mut tempos: Vec<TempoChange> = Vec::new();
    let mut notes = Vec::with_capacity(sorted.len());
    for t in &sorted {
        let onset = bar_start[t.bar as usize] + t.position as u64 * unit_ticks;
        let us = (60_000_000.0 / cfg.tempo_from_bin(t.tempo)).round() as u32;
        if tempos.last().is_none_or(|last| last.us_per_quarter != us) {
            tempos.push(TempoChange {
                tick: onset,
                us_per_quarter: us,
            });
        }
        let (channel, program) = if t.instrument == DRUM_INSTRUMENT as u32 {
            (DRUM_CHANNEL, 0)
        } else {
            (0, t.instrument.min(127) as u8)
        };
        notes.push(NoteEvent {
            pitch: t.pitch as u8,
            velocity: cfg.velocity_from_bin(t.velocity),
            onset_tick: onset,
            duration_tick: (t.duration as u64 * unit_ticks).max(1),
            track: 0,
            channel,
            program,
        });
    }
    if let Some(first) = tempos.first_mut() {
        first.tick = 0;
    }
    let end = notes.iter().map(NoteEvent::end_tick).max().unwrap_or(0);
    Ok(MidiPiece::new(
        notes,
        Timeline::new(DETOKENIZE_TPQ, tempos, timesigs, end),
    ))
}
