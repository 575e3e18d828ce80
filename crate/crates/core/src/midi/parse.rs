use std::collections::{HashMap, VecDeque};

use log::warn;

use super::{MidiError, MidiPiece, NoteEvent, TempoChange, TimeSigChange, Timeline};

/// Recoverable defects met while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    /// Note-ons never released; closed at the end of their track.
    pub dangling_note_ons: usize,
    /// Note-offs without a pending note-on.
    pub orphan_note_offs: usize,
    /// Notes released on their onset tick.
    pub zero_length_notes: usize,
    /// Track count declared in the header but not present.
    pub missing_tracks: usize,
}

/// Parses a format 0 or 1 Standard MIDI File.
pub fn parse_smf(bytes: &[u8]) -> Result<MidiPiece, MidiError> {
    parse_smf_with_report(bytes).map(|(piece, _)| piece)
}

pub fn parse_smf_with_report(bytes: &[u8]) -> Result<(MidiPiece, ParseReport), MidiError> {
    let mut cur = Cursor::new(bytes, usize::MAX);
    if cur.take(4).ok() != Some(b"MThd".as_slice()) {
        return Err(MidiError::MalformedHeader("missing MThd".into()));
    }
    let header_len =
        cur.u32()
            .map_err(|_| MidiError::MalformedHeader("truncated header".into()))? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader(format!(
            "header chunk length {header_len}"
        )));
    }
    let header = cur
        .take(header_len)
        .map_err(|_| MidiError::MalformedHeader("truncated header".into()))?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]) as usize;
    let division = u16::from_be_bytes([header[4], header[5]]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat("format 2".into())),
        f => return Err(MidiError::MalformedHeader(format!("format {f}"))),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per quarter".into()));
    }

    let mut report = ParseReport::default();
    let mut acc = Accumulator::default();
    let mut track = 0usize;
    while track < ntracks && !cur.at_end() {
        let id = cur.take(4).map_err(|_| MidiError::TruncatedTrack {
            track,
            offset: cur.pos,
        })?;
        let len = cur.u32().map_err(|_| MidiError::TruncatedTrack {
            track,
            offset: cur.pos,
        })? as usize;
        let start = cur.pos;
        let body = cur.take(len).map_err(|_| MidiError::TruncatedTrack {
            track,
            offset: start,
        })?;
        if id != b"MTrk" {
            // alien chunk, skipped per the file format rules
            continue;
        }
        parse_track(body, start, track, &mut acc, &mut report)?;
        track += 1;
    }
    report.missing_tracks = ntracks - track;
    if report.missing_tracks > 0 {
        warn!("{} declared track(s) missing", report.missing_tracks);
    }
    if report.dangling_note_ons > 0 {
        warn!(
            "{} dangling note-on(s) closed at end of track",
            report.dangling_note_ons
        );
    }

    let timeline = Timeline::new(division, acc.tempos, acc.timesigs, acc.end_tick);
    let mut piece = MidiPiece::new(acc.notes, timeline);
    piece.title = acc.title;
    piece.composer = acc.composer;
    Ok((piece, report))
}

#[derive(Default)]
struct Accumulator {
    notes: Vec<NoteEvent>,
    tempos: Vec<TempoChange>,
    timesigs: Vec<TimeSigChange>,
    end_tick: u64,
    title: Option<String>,
    composer: Option<String>,
}

struct Pending {
    onset: u64,
    velocity: u8,
    program: u8,
}

fn parse_track(
    body: &[u8],
    base: usize,
    track: usize,
    acc: &mut Accumulator,
    report: &mut ParseReport,
) -> Result<(), MidiError> {
    let mut cur = Cursor::new(body, base);
    let truncated = |cur: &Cursor<'_>| MidiError::TruncatedTrack {
        track,
        offset: cur.base + cur.pos,
    };
    let malformed = |offset: usize| MidiError::MalformedEvent { track, offset };

    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut programs = [0u8; 16];
    let mut pending: HashMap<(u8, u8), VecDeque<Pending>> = HashMap::new();

    while !cur.at_end() {
        tick += cur.vlq().map_err(|_| truncated(&cur))? as u64;
        let event_at = cur.base + cur.pos;
        let first = cur.u8().map_err(|_| truncated(&cur))?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            cur.pos -= 1;
            running.ok_or_else(|| malformed(event_at))?
        };

        match status {
            0xFF => {
                running = None;
                let kind = cur.u8().map_err(|_| truncated(&cur))?;
                let len = cur.vlq().map_err(|_| truncated(&cur))? as usize;
                let data = cur.take(len).map_err(|_| truncated(&cur))?;
                match kind {
                    0x2F => break,
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        acc.tempos.push(TempoChange {
                            tick,
                            us_per_quarter: us,
                        });
                    }
                    0x58 if len >= 2 => {
                        if data[1] < 8 {
                            acc.timesigs.push(TimeSigChange {
                                tick,
                                numerator: data[0],
                                denominator: 1 << data[1],
                            });
                        }
                    }
                    0x03 if acc.title.is_none() && track == 0 => {
                        acc.title = text(data);
                    }
                    0x02 if acc.composer.is_none() => {
                        acc.composer = text(data);
                    }
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.vlq().map_err(|_| truncated(&cur))? as usize;
                cur.take(len).map_err(|_| truncated(&cur))?;
            }
            0xF1..=0xFE => return Err(malformed(event_at)),
            _ => {
                running = Some(status);
                let channel = status & 0x0F;
                let nbytes = if matches!(status & 0xF0, 0xC0 | 0xD0) {
                    1
                } else {
                    2
                };
                let data = cur.take(nbytes).map_err(|_| truncated(&cur))?;
                if data.iter().any(|b| b & 0x80 != 0) {
                    return Err(malformed(event_at));
                }
                match status & 0xF0 {
                    0x90 if data[1] > 0 => {
                        pending
                            .entry((channel, data[0]))
                            .or_default()
                            .push_back(Pending {
                                onset: tick,
                                velocity: data[1],
                                program: programs[channel as usize],
                            });
                    }
                    0x80 | 0x90 => {
                        let queue = pending.get_mut(&(channel, data[0]));
                        match queue.and_then(VecDeque::pop_front) {
                            Some(p) => close(acc, report, track, channel, data[0], p, tick),
                            None => report.orphan_note_offs += 1,
                        }
                    }
                    0xC0 => programs[channel as usize] = data[0],
                    _ => {}
                }
            }
        }
    }

    let mut keys: Vec<_> = pending.keys().copied().collect();
    keys.sort_unstable();
    for key in keys {
        for p in pending.remove(&key).unwrap_or_default() {
            report.dangling_note_ons += 1;
            close(acc, report, track, key.0, key.1, p, tick);
        }
    }
    acc.end_tick = acc.end_tick.max(tick);
    Ok(())
}

fn close(
    acc: &mut Accumulator,
    report: &mut ParseReport,
    track: usize,
    channel: u8,
    pitch: u8,
    p: Pending,
    tick: u64,
) {
    if tick <= p.onset {
        report.zero_length_notes += 1;
        return;
    }
    acc.notes.push(NoteEvent {
        pitch,
        velocity: p.velocity,
        onset_tick: p.onset,
        duration_tick: tick - p.onset,
        track: track.min(u16::MAX as usize) as u16,
        channel,
        program: p.program,
    });
}

fn text(data: &[u8]) -> Option<String> {
    let s = String::from_utf8_lossy(data).trim().to_string();
    (!s.is_empty()).then_some(s)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

struct Eof;

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Self {
            bytes,
            pos: 0,
            base: if base == usize::MAX { 0 } else { base },
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], Eof> {
        let end = self.pos.checked_add(n).ok_or(Eof)?;
        let out = self.bytes.get(self.pos..end).ok_or(Eof)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, Eof> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Result<u32, Eof> {
        self.take(4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Result<u32, Eof> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Eof)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(format: u16, ntracks: u16, division: u16) -> Vec<u8> {
        let mut v = b"MThd".to_vec();
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&format.to_be_bytes());
        v.extend_from_slice(&ntracks.to_be_bytes());
        v.extend_from_slice(&division.to_be_bytes());
        v
    }

    fn track(events: &[u8]) -> Vec<u8> {
        let mut v = b"MTrk".to_vec();
        v.extend_from_slice(&(events.len() as u32).to_be_bytes());
        v.extend_from_slice(events);
        v
    }

    #[test]
    fn single_note_format0() {
        // on vel 80 at tick 0, off after 480 (VLQ 0x83 0x60), end of track
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[
            0x00, 0x90, 60, 80, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.notes.len(), 1);
        let n = piece.notes[0];
        assert_eq!(
            (n.pitch, n.velocity, n.onset_tick, n.duration_tick),
            (60, 80, 0, 480)
        );
        assert_eq!(piece.timeline.tempo_map[0].us_per_quarter, 500_000);
        assert_eq!(piece.timeline.end_tick, 480);
    }

    #[test]
    fn velocity_zero_is_note_off_with_running_status() {
        let mut bytes = header(0, 1, 480);
        // running status: second event omits 0x90
        bytes.extend(track(&[
            0x00, 0x90, 60, 80, 0x81, 0x70, 60, 0, 0x00, 0xFF, 0x2F, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.notes.len(), 1);
        assert_eq!(piece.notes[0].duration_tick, 240);
    }

    #[test]
    fn rejects_missing_magic() {
        assert!(matches!(
            parse_smf(b"RIFF\0\0\0\x06\0\0\0\x01\x01\xe0"),
            Err(MidiError::MalformedHeader(_))
        ));
        assert!(matches!(parse_smf(b""), Err(MidiError::MalformedHeader(_))));
    }

    #[test]
    fn rejects_format2_and_smpte() {
        assert!(matches!(
            parse_smf(&header(2, 0, 480)),
            Err(MidiError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            parse_smf(&header(1, 0, 0xE728)),
            Err(MidiError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn truncated_track() {
        let mut bytes = header(0, 1, 480);
        let mut t = track(&[0x00, 0x90, 60, 80, 0x83, 0x60, 0x80, 60, 0]);
        t.truncate(t.len() - 3);
        bytes.extend(t);
        assert!(matches!(
            parse_smf(&bytes),
            Err(MidiError::TruncatedTrack { .. })
        ));
    }

    #[test]
    fn dangling_note_closed_at_track_end() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[0x00, 0x90, 60, 80, 0x8F, 0x00, 0xFF, 0x2F, 0x00]));
        let (piece, report) = parse_smf_with_report(&bytes).unwrap();
        assert_eq!(report.dangling_note_ons, 1);
        assert_eq!(piece.notes[0].duration_tick, 1920);
    }

    #[test]
    fn overlapping_same_pitch_fifo() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[
            0x00, 0x90, 60, 80, // A on @0
            0x0A, 0x90, 60, 90, // B on @10
            0x0A, 0x80, 60, 0, // off @20 -> closes A
            0x0A, 0x80, 60, 0, // off @30 -> closes B
            0x00, 0xFF, 0x2F, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        let got: Vec<_> = piece
            .notes
            .iter()
            .map(|n| (n.onset_tick, n.duration_tick, n.velocity))
            .collect();
        assert_eq!(got, vec![(0, 20, 80), (10, 20, 90)]);
    }

    #[test]
    fn tempo_timesig_and_program() {
        let mut bytes = header(1, 2, 96);
        bytes.extend(track(&[
            0x00, 0xFF, 0x51, 0x03, 0x0F, 0x42, 0x40, // 1_000_000 us
            0x00, 0xFF, 0x58, 0x04, 0x03, 0x02, 0x18, 0x08, // 3/4
            0x00, 0xFF, 0x03, 0x02, b'H', b'i', 0x00, 0xFF, 0x2F, 0x00,
        ]));
        bytes.extend(track(&[
            0x00, 0xC1, 0x05, 0x00, 0x91, 64, 100, 0x60, 0x81, 64, 0x40, 0x00, 0xFF, 0x2F, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.timeline.tempo_map[0].us_per_quarter, 1_000_000);
        let sig = piece.timeline.timesig_map[0];
        assert_eq!((sig.numerator, sig.denominator), (3, 4));
        assert_eq!(piece.title.as_deref(), Some("Hi"));
        let n = piece.notes[0];
        assert_eq!(
            (n.track, n.channel, n.program, n.duration_tick),
            (1, 1, 5, 96)
        );
    }
}
