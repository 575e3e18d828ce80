//! MIDI to ABC notation, the text-only baseline representation.
//!
//! Conversion targets a small ABC subset: notes, chords, rests, bar lines
//! and ties, with `L:1/8` and durations on a 1/32-note grid. Everything the
//! subset cannot carry is counted in [`LossReport`].
//!
//! Subset grammar of a voice body:
//!
//! ```text
//! body       = { element | bar | space } ;
//! element    = ( note | chord | rest ) ;
//! note       = [ accidental ] letter { octave } [ multiplier ] [ "-" ] ;
//! chord      = "[" note { note } "]" ;
//! rest       = "z" [ multiplier ] ;
//! accidental = "^" | "_" | "=" ;
//! letter     = "A".."G" | "a".."g" ;
//! octave     = "'" | "," ;
//! multiplier = digits [ "/" [ digits ] ] | "/" [ digits ] ;
//! bar        = "|" ;
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{dominant_time_signature, estimate_key, estimate_tempo, Key, Mode};
use crate::midi::{MidiPiece, NoteEvent};

/// Grid subdivisions per whole note.
const GRID_PER_WHOLE: u64 = 32;
/// Grid steps in one `L:1/8` unit.
const GRID_PER_UNIT: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbcError {
    #[error("piece has no notes")]
    EmptyPiece,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbcHeader {
    pub index: u32,
    pub title: String,
    pub meter: (u8, u8),
    /// Unit note length as a fraction of a whole note.
    pub unit: (u8, u8),
    pub tempo_bpm: u32,
    pub key: String,
}

/// Information the conversion could not keep.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossReport {
    /// Notes whose onset or duration moved to reach the 1/32 grid
    /// (tuplets and expressive timing end up here).
    pub quantized_notes: usize,
    /// Notes folded into an overlapping note of the same pitch in a voice.
    pub merged_notes: usize,
    /// Notes shorter than half a grid step, removed.
    pub dropped_notes: usize,
    /// Tempo changes beyond the first; only a mean tempo is notated.
    pub dropped_tempo_changes: usize,
    /// Meter changes beyond the first; bars follow the dominant meter.
    pub dropped_meter_changes: usize,
}

impl LossReport {
    pub fn is_lossless(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbcDocument {
    pub header: AbcHeader,
    /// (voice id, body) per MIDI track that has notes.
    pub voices: Vec<(String, String)>,
    pub loss_report: LossReport,
}

impl fmt::Display for AbcDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        writeln!(f, "X:{}", h.index)?;
        writeln!(f, "T:{}", h.title)?;
        writeln!(f, "M:{}/{}", h.meter.0, h.meter.1)?;
        writeln!(f, "L:{}/{}", h.unit.0, h.unit.1)?;
        writeln!(f, "Q:1/4={}", h.tempo_bpm)?;
        writeln!(f, "K:{}", h.key)?;
        let multi = self.voices.len() > 1;
        for (id, body) in &self.voices {
            if multi {
                writeln!(f, "V:{id}")?;
            }
            writeln!(f, "{body}")?;
        }
        Ok(())
    }
}

/// Converts a piece to ABC, one voice per track.
///
/// The key comes from `key_hint` or is estimated. Pieces count as on-grid
/// when every onset and duration sits on the 1/32-note grid and no two notes
/// of one pitch overlap within a track; on-grid pieces with a single tempo
/// and meter convert without loss.
pub fn to_abc(piece: &MidiPiece, key_hint: Option<Key>) -> Result<AbcDocument, AbcError> {
    if piece.notes.is_empty() {
        return Err(AbcError::EmptyPiece);
    }
    let key = match key_hint {
        Some(k) => k,
        None => estimate_key(piece).map_err(|_| AbcError::EmptyPiece)?,
    };
    let meter = dominant_time_signature(&piece.timeline);
    let tl = &piece.timeline;
    let mut loss = LossReport {
        dropped_tempo_changes: tl.tempo_map.len().saturating_sub(1),
        dropped_meter_changes: tl.timesig_map.len().saturating_sub(1),
        ..LossReport::default()
    };
    let bar_len = ((meter.0 as u64 * GRID_PER_WHOLE + meter.1 as u64 / 2) / meter.1 as u64).max(1);

    let mut by_track: BTreeMap<u16, Vec<&NoteEvent>> = BTreeMap::new();
    for n in &piece.notes {
        by_track.entry(n.track).or_default().push(n);
    }
    let speller = Speller::new(key);
    let voices = by_track
        .into_iter()
        .enumerate()
        .map(|(i, (_, notes))| {
            let grid = quantize_voice(&notes, tl.ticks_per_quarter as u64, &mut loss);
            ((i + 1).to_string(), render_voice(&grid, bar_len, &speller))
        })
        .collect();

    Ok(AbcDocument {
        header: AbcHeader {
            index: 1,
            title: piece
                .title
                .clone()
                .unwrap_or_else(|| "Untitled".to_string()),
            meter,
            unit: (1, 8),
            tempo_bpm: estimate_tempo(tl).round() as u32,
            key: key.abc_name(),
        },
        voices,
        loss_report: loss,
    })
}

/// A note on the 1/32 grid: (pitch, onset, end).
type GridNote = (u8, u64, u64);

fn quantize_voice(notes: &[&NoteEvent], tpq: u64, loss: &mut LossReport) -> Vec<GridNote> {
    // one grid step is tpq / 8 ticks
    let to_grid = |ticks: u64| (2 * ticks * 8 + tpq) / (2 * tpq);
    let mut out: Vec<GridNote> = Vec::with_capacity(notes.len());
    for n in notes {
        let on = to_grid(n.onset_tick);
        let end = to_grid(n.end_tick());
        if (n.onset_tick * 8) % tpq != 0 || (n.duration_tick * 8) % tpq != 0 {
            loss.quantized_notes += 1;
        }
        if end <= on {
            loss.dropped_notes += 1;
            continue;
        }
        out.push((n.pitch, on, end));
    }
    out.sort_unstable_by_key(|&(p, on, end)| (p, on, end));
    // fold overlapping same-pitch notes into one
    let mut merged: Vec<GridNote> = Vec::with_capacity(out.len());
    for note in out {
        match merged.last_mut() {
            Some(last) if last.0 == note.0 && note.1 < last.2 => {
                last.2 = last.2.max(note.2);
                loss.merged_notes += 1;
            }
            _ => merged.push(note),
        }
    }
    merged
}

fn render_voice(notes: &[GridNote], bar_len: u64, speller: &Speller) -> String {
    let end = notes.iter().map(|n| n.2).max().unwrap_or(0);
    let mut cuts: BTreeSet<u64> = notes.iter().flat_map(|n| [n.1, n.2]).collect();
    cuts.insert(0);
    cuts.extend((0..=end).step_by(bar_len as usize));
    let cuts: Vec<u64> = cuts.into_iter().filter(|&t| t <= end).collect();

    let mut out: Vec<String> = Vec::new();
    let mut accidentals = BarAccidentals::new(speller);
    let mut pending_rest = 0u64;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if lo > 0 && lo % bar_len == 0 {
            if pending_rest > 0 {
                out.push(format!("z{}", multiplier(pending_rest)));
                pending_rest = 0;
            }
            out.push("|".to_string());
            accidentals = BarAccidentals::new(speller);
        }
        let mut active: Vec<&GridNote> = notes.iter().filter(|n| n.1 <= lo && lo < n.2).collect();
        if active.is_empty() {
            pending_rest += hi - lo;
            continue;
        }
        if pending_rest > 0 {
            out.push(format!("z{}", multiplier(pending_rest)));
            pending_rest = 0;
        }
        active.sort_unstable_by_key(|n| n.0);
        let len = multiplier(hi - lo);
        let rendered: Vec<String> = active
            .iter()
            .map(|n| {
                let tie = if n.2 > hi { "-" } else { "" };
                format!("{}{}{}", accidentals.spell(n.0), len, tie)
            })
            .collect();
        if rendered.len() == 1 {
            out.push(rendered.into_iter().next().unwrap_or_default());
        } else {
            out.push(format!("[{}]", rendered.concat()));
        }
    }
    out.join(" ")
}

/// ABC length multiplier for `steps` grid steps relative to `L:1/8`.
fn multiplier(steps: u64) -> String {
    let g = gcd(steps, GRID_PER_UNIT);
    let (num, den) = (steps / g, GRID_PER_UNIT / g);
    match (num, den) {
        (1, 1) => String::new(),
        (n, 1) => n.to_string(),
        (1, d) => format!("/{d}"),
        (n, d) => format!("{n}/{d}"),
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

const LETTERS: [char; 7] = ['C', 'D', 'E', 'F', 'G', 'A', 'B'];
const LETTER_PC: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];

/// Letter index and alteration for each pitch class.
struct Speller {
    spelling: [(usize, i8); 12],
    signature: [i8; 7],
}

impl Speller {
    fn new(key: Key) -> Self {
        let acc = key.accidentals();
        let sharp = [
            (0, 0),
            (0, 1),
            (1, 0),
            (1, 1),
            (2, 0),
            (3, 0),
            (3, 1),
            (4, 0),
            (4, 1),
            (5, 0),
            (5, 1),
            (6, 0),
        ];
        let flat = [
            (0, 0),
            (1, -1),
            (1, 0),
            (2, -1),
            (2, 0),
            (3, 0),
            (4, -1),
            (4, 0),
            (5, -1),
            (5, 0),
            (6, -1),
            (6, 0),
        ];
        let mut signature = [0i8; 7];
        // order of sharps F C G D A E B and of flats B E A D G C F
        let sharp_order = [3, 0, 4, 1, 5, 2, 6];
        for &l in sharp_order.iter().take(acc.max(0) as usize) {
            signature[l] = 1;
        }
        for &l in sharp_order.iter().rev().take((-acc).max(0) as usize) {
            signature[l] = -1;
        }
        let use_flats = acc < 0 || (acc == 0 && key.mode == Mode::Minor && key.tonic != 9);
        Self {
            spelling: if use_flats { flat } else { sharp },
            signature,
        }
    }
}

struct BarAccidentals<'a> {
    speller: &'a Speller,
    /// Alteration in force per (letter, octave) within the current bar.
    state: BTreeMap<(usize, i32), i8>,
}

impl<'a> BarAccidentals<'a> {
    fn new(speller: &'a Speller) -> Self {
        Self {
            speller,
            state: BTreeMap::new(),
        }
    }

    fn spell(&mut self, pitch: u8) -> String {
        let (letter, alter) = self.speller.spelling[(pitch % 12) as usize];
        let natural = pitch as i32 - alter as i32;
        let octave = natural.div_euclid(12) - 1;
        debug_assert_eq!(natural.rem_euclid(12) as u8, LETTER_PC[letter]);
        let in_force = *self
            .state
            .get(&(letter, octave))
            .unwrap_or(&self.speller.signature[letter]);
        let mut s = String::new();
        if in_force != alter {
            s.push(match alter {
                1 => '^',
                -1 => '_',
                _ => '=',
            });
            self.state.insert((letter, octave), alter);
        }
        let upper = LETTERS[letter];
        if octave >= 5 {
            s.push(upper.to_ascii_lowercase());
            s.extend(std::iter::repeat_n('\'', (octave - 5) as usize));
        } else {
            s.push(upper);
            s.extend(std::iter::repeat_n(',', (4 - octave) as usize));
        }
        s
    }
}

/// A grammar violation, 1-based line and column in the rendered document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Grammar violations of the rendered document; empty when it conforms.
pub fn validate_abc(doc: &AbcDocument) -> Vec<Violation> {
    validate_abc_text(&doc.to_string())
}

/// Validates ABC text: header lines `X,T,M,L,Q,K` in order, then optional
/// `V:` lines and bodies in the subset grammar.
pub fn validate_abc_text(text: &str) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut lines = text.lines().enumerate();
    for field in ['X', 'T', 'M', 'L', 'Q', 'K'] {
        match lines.next() {
            Some((i, line)) => {
                if let Some(msg) = check_header(field, line) {
                    violations.push(Violation {
                        line: i + 1,
                        column: 1,
                        message: msg,
                    });
                }
            }
            None => {
                violations.push(Violation {
                    line: text.lines().count() + 1,
                    column: 1,
                    message: format!("missing header field {field}:"),
                });
                return violations;
            }
        }
    }
    for (i, line) in lines {
        if let Some(id) = line.strip_prefix("V:") {
            if id.trim().is_empty() {
                violations.push(Violation {
                    line: i + 1,
                    column: 3,
                    message: "empty voice id".into(),
                });
            }
            continue;
        }
        for (column, message) in check_body(line) {
            violations.push(Violation {
                line: i + 1,
                column,
                message,
            });
        }
    }
    violations
}

fn check_header(field: char, line: &str) -> Option<String> {
    let prefix = format!("{field}:");
    let Some(value) = line.strip_prefix(&prefix) else {
        return Some(format!("expected header field {prefix}"));
    };
    let fraction = |v: &str| -> bool {
        v.split_once('/').is_some_and(|(a, b)| {
            a.parse::<u32>().is_ok_and(|n| n > 0) && b.parse::<u32>().is_ok_and(|d| d > 0)
        })
    };
    let ok = match field {
        'X' => value.parse::<u32>().is_ok(),
        'T' => true,
        'M' | 'L' => fraction(value),
        'Q' => value
            .split_once('=')
            .is_some_and(|(f, bpm)| fraction(f) && bpm.parse::<u32>().is_ok()),
        'K' => valid_key(value),
        _ => false,
    };
    (!ok).then(|| format!("invalid value for {prefix} {value:?}"))
}

fn valid_key(value: &str) -> bool {
    let mut chars = value.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    if !('A'..='G').contains(&first) {
        return false;
    }
    let rest: String = chars.collect();
    let rest = rest.strip_prefix(['#', 'b']).unwrap_or(&rest);
    rest.is_empty() || rest == "m"
}

/// Column-tagged violations of one body line.
fn check_body(line: &str) -> Vec<(usize, String)> {
    let chars: Vec<char> = line.chars().collect();
    let mut errs = Vec::new();
    let mut i = 0;
    // a tie may only follow a note
    let mut after_note = false;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => {
                i += 1;
            }
            '|' => {
                after_note = false;
                i += 1;
            }
            '-' => {
                if !after_note {
                    errs.push((i + 1, "tie without a preceding note".into()));
                }
                after_note = false;
                i += 1;
            }
            'z' => {
                i = skip_multiplier(&chars, i + 1);
                after_note = false;
            }
            '[' => {
                let open = i;
                i += 1;
                let mut count = 0;
                let mut closed = false;
                while i < chars.len() {
                    match chars[i] {
                        ']' => {
                            closed = true;
                            i += 1;
                            break;
                        }
                        '-' if count > 0 => i += 1,
                        _ => match parse_note(&chars, i) {
                            Ok(next) => {
                                count += 1;
                                i = next;
                            }
                            Err(_) => break,
                        },
                    }
                }
                if !closed {
                    errs.push((open + 1, "unbalanced '['".into()));
                    // resynchronise after the offending chord
                    while i < chars.len() && !matches!(chars[i], ' ' | '|') {
                        i += 1;
                    }
                } else if count == 0 {
                    errs.push((open + 1, "empty chord".into()));
                } else {
                    i = skip_multiplier(&chars, i);
                }
                after_note = closed && count > 0;
            }
            _ => match parse_note(&chars, i) {
                Ok(next) => {
                    i = next;
                    after_note = true;
                }
                Err(msg) => {
                    errs.push((i + 1, msg));
                    i = skip_multiplier(&chars, i + 1);
                    after_note = false;
                }
            },
        }
    }
    errs
}

/// Parses one note starting at `i`, returning the index after it.
fn parse_note(chars: &[char], mut i: usize) -> Result<usize, String> {
    if matches!(chars.get(i), Some('^' | '_' | '=')) {
        i += 1;
    }
    match chars.get(i) {
        Some('A'..='G' | 'a'..='g') => i += 1,
        Some(c) => return Err(format!("invalid pitch letter {c:?}")),
        None => return Err("accidental without a note".into()),
    }
    while matches!(chars.get(i), Some('\'' | ',')) {
        i += 1;
    }
    Ok(skip_multiplier(chars, i))
}

fn skip_multiplier(chars: &[char], mut i: usize) -> usize {
    while matches!(chars.get(i), Some(c) if c.is_ascii_digit()) {
        i += 1;
    }
    if chars.get(i) == Some(&'/') {
        i += 1;
        while matches!(chars.get(i), Some(c) if c.is_ascii_digit()) {
            i += 1;
        }
    }
    i
}
