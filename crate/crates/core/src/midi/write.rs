use super::MidiPiece;

/// Serializes a piece as a format-1 Standard MIDI File.
///
/// Track 0 carries title, composer, tempo and time-signature meta events in
/// addition to any notes whose `track` is 0. Same-pitch notes that overlap on
/// one channel cannot be represented unambiguously; they are written as-is
/// and re-parse under FIFO matching.
pub fn write_smf(piece: &MidiPiece) -> Vec<u8> {
    let ntracks = piece
        .notes
        .iter()
        .map(|n| n.track as usize + 1)
        .max()
        .unwrap_or(1);
    // (tick, order, bytes); order sorts offs before program changes before ons
    let mut tracks: Vec<Vec<(u64, u8, Vec<u8>)>> = vec![Vec::new(); ntracks];

    let conductor = &mut tracks[0];
    if let Some(title) = &piece.title {
        conductor.push((0, 0, meta(0x03, title.as_bytes())));
    }
    if let Some(composer) = &piece.composer {
        conductor.push((0, 0, meta(0x02, composer.as_bytes())));
    }
    for t in &piece.timeline.tempo_map {
        let us = t.us_per_quarter.to_be_bytes();
        conductor.push((t.tick, 0, meta(0x51, &us[1..])));
    }
    for s in &piece.timeline.timesig_map {
        let dd = s.denominator.trailing_zeros() as u8;
        conductor.push((s.tick, 0, meta(0x58, &[s.numerator, dd, 24, 8])));
    }

    let mut programs = vec![[0u8; 16]; ntracks];
    for n in &piece.notes {
        let events = &mut tracks[n.track as usize];
        let ch = n.channel & 0x0F;
        let current = &mut programs[n.track as usize][ch as usize];
        if *current != n.program {
            *current = n.program;
            events.push((n.onset_tick, 2, vec![0xC0 | ch, n.program]));
        }
        events.push((n.onset_tick, 3, vec![0x90 | ch, n.pitch, n.velocity]));
        events.push((n.end_tick(), 1, vec![0x80 | ch, n.pitch, 0]));
    }

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(ntracks as u16).to_be_bytes());
    out.extend_from_slice(&piece.timeline.ticks_per_quarter.to_be_bytes());

    for mut events in tracks {
        // stable sort keeps note-on/off insertion order within one tick
        events.sort_by_key(|e| (e.0, e.1));
        let mut body = Vec::new();
        let mut last = 0u64;
        for (tick, _, bytes) in events {
            write_vlq(&mut body, (tick - last) as u32);
            body.extend_from_slice(&bytes);
            last = tick;
        }
        let end = piece.timeline.end_tick.max(last);
        write_vlq(&mut body, (end - last) as u32);
        body.extend_from_slice(&[0xFF, 0x2F, 0x00]);
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    out
}

fn meta(kind: u8, data: &[u8]) -> Vec<u8> {
    let mut v = vec![0xFF, kind];
    write_vlq(&mut v, data.len() as u32);
    v.extend_from_slice(data);
    v
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = (value & 0x7F) as u8 | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}
