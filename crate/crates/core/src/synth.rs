//! Seeded synthetic pieces: tonal excerpts with known key, tempo and meter
//! for captioning experiments, pure scales, and random pieces for fuzzing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{tempo_descriptor, Key, Mode};
use crate::midi::{MidiPiece, NoteEvent, TempoChange, TimeSigChange, Timeline};

pub const MAJOR_STEPS: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
pub const HARMONIC_MINOR_STEPS: [u8; 7] = [0, 2, 3, 5, 7, 8, 11];

/// Meters used by the caption corpus.
pub const CAPTION_TIMESIGS: [(u8, u8); 4] = [(2, 4), (3, 4), (4, 4), (6, 8)];
/// One representative tempo per descriptor class (slow, moderate, fast,
/// very fast).
pub const CAPTION_TEMPOS: [f64; 4] = [66.0, 92.0, 132.0, 184.0];

const TPQ: u16 = 480;

fn steps(mode: Mode) -> &'static [u8; 7] {
    match mode {
        Mode::Major => &MAJOR_STEPS,
        Mode::Minor => &HARMONIC_MINOR_STEPS,
    }
}

/// Parameters of a tonal excerpt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TonalSpec {
    pub key: Key,
    pub bpm: f64,
    pub timesig: (u8, u8),
    pub bars: u32,
}

/// A melody on the key's scale (tonic-triad degrees three times as likely
/// as the others, tonic on every downbeat) over a sustained tonic bass.
pub fn tonal_piece(spec: &TonalSpec, seed: u64) -> MidiPiece {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (num, den) = spec.timesig;
    let beat = TPQ as u64 * 4 / den as u64;
    let bar = beat * num as u64;
    let scale = steps(spec.key.mode);
    let weighted: Vec<usize> = (0..7)
        .flat_map(|d| std::iter::repeat_n(d, if d % 2 == 0 && d < 5 { 3 } else { 1 }))
        .collect();
    let tonic = spec.key.tonic;
    let mut notes = Vec::new();
    for b in 0..spec.bars as u64 {
        let start = b * bar;
        notes.push(NoteEvent {
            pitch: 48 + tonic,
            velocity: 70,
            onset_tick: start,
            duration_tick: bar,
            track: 1,
            channel: 1,
            program: 32,
        });
        for i in 0..num as u64 {
            let degree = if i == 0 {
                0
            } else {
                *weighted.choose(&mut rng).unwrap_or(&0)
            };
            let octave = if rng.gen_bool(0.2) { 72 } else { 60 };
            notes.push(NoteEvent {
                pitch: octave + tonic + scale[degree],
                velocity: rng.gen_range(64..=100),
                onset_tick: start + i * beat,
                duration_tick: beat,
                track: 0,
                channel: 0,
                program: 0,
            });
        }
    }
    let end = spec.bars as u64 * bar;
    MidiPiece::new(notes, Timeline::constant(TPQ, spec.bpm, spec.timesig, end))
}

/// One octave of the key's scale in quarter notes, ending on the upper
/// tonic.
pub fn scale_piece(key: Key) -> MidiPiece {
    let base = 60 + key.tonic;
    let pitches = steps(key.mode)
        .iter()
        .map(|s| base + s)
        .chain(std::iter::once(base + 12));
    let notes = pitches
        .enumerate()
        .map(|(i, pitch)| NoteEvent {
            pitch,
            velocity: 80,
            onset_tick: i as u64 * TPQ as u64,
            duration_tick: TPQ as u64,
            track: 0,
            channel: 0,
            program: 0,
        })
        .collect();
    MidiPiece::new(notes, Timeline::constant(TPQ, 120.0, (4, 4), 0))
}

/// The caption describing a tonal excerpt.
pub fn caption_text(key: Key, bpm: f64, timesig: (u8, u8)) -> String {
    format!(
        "a {} piece in {} with a {}/{} time signature",
        tempo_descriptor(bpm),
        key.to_string().to_lowercase(),
        timesig.0,
        timesig.1
    )
}

/// A synthetic clip with its generating parameters and gold caption.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionClip {
    pub id: String,
    pub piece: MidiPiece,
    pub key: Key,
    pub bpm: f64,
    pub timesig: (u8, u8),
    pub caption: String,
}

/// `count` roughly 20-second clips with key, tempo class and meter drawn
/// uniformly.
pub fn caption_corpus(count: usize, seed: u64) -> Vec<CaptionClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let key = Key::new(
                rng.gen_range(0..12),
                if rng.gen_bool(0.5) {
                    Mode::Major
                } else {
                    Mode::Minor
                },
            );
            let bpm = CAPTION_TEMPOS[rng.gen_range(0..4)];
            let timesig = CAPTION_TIMESIGS[rng.gen_range(0..4)];
            let beat_s = 60.0 / bpm * 4.0 / timesig.1 as f64;
            let bars = (20.0 / (beat_s * timesig.0 as f64)).ceil() as u32;
            let spec = TonalSpec {
                key,
                bpm,
                timesig,
                bars,
            };
            let mut piece = tonal_piece(&spec, rng.gen());
            let id = format!("synth-{i:04}");
            piece.title = Some(id.clone());
            CaptionClip {
                caption: caption_text(key, bpm, timesig),
                id,
                piece,
                key,
                bpm,
                timesig,
            }
        })
        .collect()
}

/// Shape of randomly generated pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzOptions {
    pub max_notes: usize,
    pub max_tracks: u16,
    /// Upper bound on the onset of any note, in quarter notes.
    pub max_quarters: u64,
    pub tempo_changes: bool,
    pub meter_changes: bool,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        Self {
            max_notes: 200,
            max_tracks: 3,
            max_quarters: 256,
            tempo_changes: true,
            meter_changes: true,
        }
    }
}

/// A random valid piece: arbitrary onsets and durations, several tracks
/// and programs, drums on channel 9, optional tempo and meter changes.
pub fn fuzz_piece(rng: &mut impl Rng, opts: &FuzzOptions) -> MidiPiece {
    let tpq = *[96u16, 120, 192, 384, 480, 960].choose(rng).unwrap_or(&480);
    let span = opts.max_quarters.max(1) * tpq as u64;
    let n = rng.gen_range(1..=opts.max_notes.max(1));
    let tracks = rng.gen_range(1..=opts.max_tracks.max(1));
    let mut notes = Vec::with_capacity(n);
    for _ in 0..n {
        let track = rng.gen_range(0..tracks);
        let drums = rng.gen_bool(0.1);
        notes.push(NoteEvent {
            pitch: rng.gen_range(21..=108),
            velocity: rng.gen_range(1..=127),
            onset_tick: rng.gen_range(0..span),
            duration_tick: rng.gen_range(1..=4 * tpq as u64),
            track,
            channel: if drums { 9 } else { (track % 9) as u8 },
            program: rng.gen_range(0..=127),
        });
    }
    let mut tempos = vec![TempoChange {
        tick: 0,
        us_per_quarter: rng.gen_range(250_000..=1_500_000),
    }];
    if opts.tempo_changes {
        for _ in 0..rng.gen_range(0..4) {
            tempos.push(TempoChange {
                tick: rng.gen_range(0..span),
                us_per_quarter: rng.gen_range(250_000..=1_500_000),
            });
        }
    }
    let sig = |rng: &mut dyn rand::RngCore| {
        let den = *[2u8, 4, 4, 4, 8, 8, 16].choose(rng).unwrap_or(&4);
        (rng.gen_range(1..=(2 * den).min(12)), den)
    };
    let (num, den) = sig(rng);
    let mut sigs = vec![TimeSigChange {
        tick: 0,
        numerator: num,
        denominator: den,
    }];
    if opts.meter_changes {
        for _ in 0..rng.gen_range(0..3) {
            let (num, den) = sig(rng);
            sigs.push(TimeSigChange {
                tick: rng.gen_range(0..span),
                numerator: num,
                denominator: den,
            });
        }
    }
    MidiPiece::new(notes, Timeline::new(tpq, tempos, sigs, 0))
}

/// A random piece that converts to ABC without loss: one tempo and meter,
/// every onset and duration on the 1/32-note grid, and no overlapping notes
/// of the same pitch within a track.
pub fn on_grid_piece(rng: &mut impl Rng, max_notes: usize) -> MidiPiece {
    let tpq = *[96u16, 480, 960].choose(rng).unwrap_or(&480);
    let step = tpq as u64 / 8;
    let timesig = *[(2u8, 4u8), (3, 4), (4, 4), (6, 8), (5, 8), (7, 16), (3, 2)]
        .choose(rng)
        .unwrap_or(&(4, 4));
    let bpm = rng.gen_range(40.0..200.0);
    let tracks = rng.gen_range(1..=2u16);
    let n = rng.gen_range(1..=max_notes.max(1));
    let mut notes: Vec<NoteEvent> = Vec::with_capacity(n);
    for _ in 0..n {
        let track = rng.gen_range(0..tracks);
        let pitch = rng.gen_range(36..=96);
        let onset_tick = rng.gen_range(0..256) * step;
        let duration_tick = rng.gen_range(1..=32) * step;
        let clash = notes.iter().any(|o| {
            o.track == track
                && o.pitch == pitch
                && o.onset_tick < onset_tick + duration_tick
                && onset_tick < o.end_tick()
        });
        if clash {
            continue;
        }
        notes.push(NoteEvent {
            pitch,
            velocity: rng.gen_range(1..=127),
            onset_tick,
            duration_tick,
            track,
            channel: track as u8,
            program: 0,
        });
    }
    MidiPiece::new(notes, Timeline::constant(tpq, bpm, timesig, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::estimate_key;

    #[test]
    fn tonal_pieces_have_requested_features() {
        let spec = TonalSpec {
            key: Key::new(2, Mode::Minor),
            bpm: 92.0,
            timesig: (6, 8),
            bars: 8,
        };
        let p = tonal_piece(&spec, 7);
        let k = estimate_key(&p).unwrap();
        assert_eq!((k.tonic, k.mode), (2, Mode::Minor));
        assert_eq!(p.timeline.timesig_map[0].numerator, 6);
        assert_eq!(p, tonal_piece(&spec, 7));
    }

    #[test]
    fn captions() {
        assert_eq!(
            caption_text(Key::new(10, Mode::Major), 132.0, (3, 4)),
            "a fast piece in bb major with a 3/4 time signature"
        );
        let c = caption_corpus(5, 1);
        assert_eq!(c.len(), 5);
        for clip in &c {
            let d = clip.piece.duration_s();
            assert!((19.99..24.0).contains(&d), "{d}");
        }
        assert_eq!(c, caption_corpus(5, 1));
    }

    #[test]
    fn scales_span_an_octave() {
        let p = scale_piece(Key::new(0, Mode::Major));
        let pitches: Vec<u8> = p.notes.iter().map(|n| n.pitch).collect();
        assert_eq!(pitches, vec![60, 62, 64, 65, 67, 69, 71, 72]);
    }

    #[test]
    fn fuzz_and_grid_pieces_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = fuzz_piece(&mut rng, &FuzzOptions::default());
            assert!(p.notes.iter().all(NoteEvent::is_valid));
            let g = on_grid_piece(&mut rng, 40);
            let step = g.timeline.ticks_per_quarter as u64 / 8;
            assert!(g
                .notes
                .iter()
                .all(|n| n.onset_tick % step == 0 && n.duration_tick % step == 0));
        }
    }
}
