use super::{MidiError, Timeline};

impl Timeline {
    /// Seconds elapsed at `tick`, extrapolating the last tempo past `end_tick`.
    pub fn seconds_at(&self, tick: u64) -> f64 {
        let tpq = self.ticks_per_quarter as f64;
        let mut seconds = 0.0;
        for (i, seg) in self.tempo_map.iter().enumerate() {
            if seg.tick >= tick {
                break;
            }
            let seg_end = self
                .tempo_map
                .get(i + 1)
                .map_or(tick, |next| next.tick.min(tick));
            seconds += (seg_end - seg.tick) as f64 * seg.us_per_quarter as f64 / (tpq * 1e6);
        }
        seconds
    }

    /// Checked variant of [`Timeline::seconds_at`].
    pub fn ticks_to_seconds(&self, tick: u64) -> Result<f64, MidiError> {
        if tick > self.end_tick {
            return Err(MidiError::TickOutOfRange {
                tick,
                end_tick: self.end_tick,
            });
        }
        Ok(self.seconds_at(tick))
    }

    /// Nearest tick whose time is `seconds`. Negative input maps to tick 0.
    pub fn seconds_to_tick(&self, seconds: f64) -> u64 {
        if seconds <= 0.0 {
            return 0;
        }
        let tpq = self.ticks_per_quarter as f64;
        let mut elapsed = 0.0;
        for (i, seg) in self.tempo_map.iter().enumerate() {
            let sec_per_tick = seg.us_per_quarter as f64 / (tpq * 1e6);
            if let Some(next) = self.tempo_map.get(i + 1) {
                let seg_secs = (next.tick - seg.tick) as f64 * sec_per_tick;
                if elapsed + seg_secs < seconds {
                    elapsed += seg_secs;
                    continue;
                }
            }
            return seg.tick + ((seconds - elapsed) / sec_per_tick).round() as u64;
        }
        unreachable!("tempo map always has an entry at tick 0")
    }

    /// Bar start ticks over `[0, end_tick]`.
    ///
    /// The grid restarts at every time-signature change, so a change in the
    /// middle of a bar opens a new bar.
    pub fn bar_grid(&self) -> Vec<u64> {
        let mut bars = Vec::new();
        for (i, sig) in self.timesig_map.iter().enumerate() {
            if sig.tick > self.end_tick {
                break;
            }
            let seg_end = self
                .timesig_map
                .get(i + 1)
                .map_or(self.end_tick + 1, |next| next.tick.min(self.end_tick + 1));
            let len = self.bar_ticks(sig.numerator, sig.denominator);
            let mut t = sig.tick;
            while t < seg_end {
                bars.push(t);
                t += len;
            }
        }
        bars
    }
}

/// Seconds at `tick`; fails past the end of the timeline.
pub fn ticks_to_seconds(timeline: &Timeline, tick: u64) -> Result<f64, MidiError> {
    timeline.ticks_to_seconds(tick)
}

pub fn bar_grid(timeline: &Timeline) -> Vec<u64> {
    timeline.bar_grid()
}
