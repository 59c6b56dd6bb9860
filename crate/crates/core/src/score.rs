//! Music score input: phoneme/pitch/duration events and their expansion to
//! frame-level conditioning.

use std::collections::HashMap;

use crate::{Error, Result};

/// MIDI sentinel for rests.
pub const REST: i32 = -1;
/// Phoneme symbol used for rests.
pub const REST_PHONEME: &str = "SP";
/// Desk-scale guard on utterance length.
pub const MAX_SCORE_SECONDS: f64 = 30.0;

/// Ordered phoneme symbols; the index of a symbol is its line number.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.is_empty() {
            return Err(Error::invalid("phoneme inventory is empty"));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) || s.contains(',') {
                return Err(Error::invalid(format!("bad phoneme symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate phoneme {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// One symbol per line. Trailing blank lines are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).collect();
        let end = lines.iter().rposition(|l| !l.is_empty()).map_or(0, |i| i + 1);
        Self::new(lines[..end].iter().copied())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEvent {
    pub phoneme_id: usize,
    /// MIDI note number, or [`REST`].
    pub midi_pitch: i32,
    pub duration_sec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MusicScore {
    pub utterance_id: String,
    pub events: Vec<ScoreEvent>,
    pub speaker_id: usize,
}

impl MusicScore {
    pub fn new(utterance_id: impl Into<String>, events: Vec<ScoreEvent>, speaker_id: usize) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::invalid("score has no events"));
        }
        for (i, e) in events.iter().enumerate() {
            if !(e.duration_sec > 0.0 && e.duration_sec.is_finite()) {
                return Err(Error::invalid(format!("event {i} has non-positive duration")));
            }
            if !(e.midi_pitch == REST || (0..=127).contains(&e.midi_pitch)) {
                return Err(Error::invalid(format!("event {i} has MIDI pitch {}", e.midi_pitch)));
            }
        }
        let score = Self {
            utterance_id: utterance_id.into(),
            events,
            speaker_id,
        };
        if score.total_duration_sec() > MAX_SCORE_SECONDS {
            return Err(Error::invalid(format!(
                "score lasts {:.2} s, above the {MAX_SCORE_SECONDS} s limit",
                score.total_duration_sec()
            )));
        }
        Ok(score)
    }

    pub fn total_duration_sec(&self) -> f64 {
        self.events.iter().map(|e| e.duration_sec).sum()
    }

    /// Writes the tab-separated score format (no header).
    pub fn to_text(&self, inventory: &PhonemeInventory) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            let sym = inventory
                .symbol(e.phoneme_id)
                .ok_or_else(|| Error::invalid(format!("phoneme id {} not in inventory", e.phoneme_id)))?;
            out.push_str(&format!("{sym}\t{}\t{}\n", e.midi_pitch, e.duration_sec));
        }
        Ok(out)
    }
}

/// Parses `phoneme<TAB>midi<TAB>duration_sec` lines. A first line whose MIDI
/// column is not an integer is taken as a header; `#` starts a comment line.
pub fn parse_score(
    text: &str,
    inventory: &PhonemeInventory,
    utterance_id: &str,
    speaker_id: usize,
) -> Result<MusicScore> {
    let mut events = Vec::new();
    let mut seen_content = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let first = !seen_content;
        seen_content = true;
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let midi = match fields[1].parse::<i32>() {
            Ok(m) => m,
            Err(_) if first => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("MIDI pitch {:?} is not an integer", fields[1]),
                })
            }
        };
        if !(midi == REST || (0..=127).contains(&midi)) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("MIDI pitch {midi} outside 0..=127 (use {REST} for rests)"),
            });
        }
        let duration_sec: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("duration {:?} is not a number", fields[2]),
        })?;
        if !(duration_sec > 0.0 && duration_sec.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duration must be positive, got {duration_sec}"),
            });
        }
        let phoneme_id = inventory.id(fields[0]).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("unknown phoneme {:?}", fields[0]),
        })?;
        events.push(ScoreEvent {
            phoneme_id,
            midi_pitch: midi,
            duration_sec,
        });
    }
    if events.is_empty() {
        return Err(Error::invalid("score file contains no events"));
    }
    MusicScore::new(utterance_id, events, speaker_id)
}

/// Frame-level conditioning produced by [`length_regulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub phoneme_per_frame: Vec<usize>,
    pub pitch_per_frame: Vec<i32>,
    pub n_frames: usize,
    /// Frames assigned to each event, in score order.
    pub event_frames: Vec<usize>,
}

impl FrameScore {
    pub fn truncated(&self, frames: usize) -> Self {
        let n = frames.min(self.n_frames);
        let mut event_frames = Vec::new();
        let mut left = n;
        for &c in &self.event_frames {
            if left == 0 {
                break;
            }
            event_frames.push(c.min(left));
            left -= c.min(left);
        }
        Self {
            phoneme_per_frame: self.phoneme_per_frame[..n].to_vec(),
            pitch_per_frame: self.pitch_per_frame[..n].to_vec(),
            n_frames: n,
            event_frames,
        }
    }
}

/// Expands events to frames using cumulative rounding, so the total frame
/// count is `round(total_duration * frame_rate)` regardless of how the
/// per-event fractions fall.
pub fn length_regulate(score: &MusicScore, frame_rate_hz: f64) -> Result<FrameScore> {
    if !(frame_rate_hz > 0.0) {
        return Err(Error::invalid("frame rate must be positive"));
    }
    let mut phoneme_per_frame = Vec::new();
    let mut pitch_per_frame = Vec::new();
    let mut event_frames = Vec::with_capacity(score.events.len());
    let mut elapsed = 0.0;
    let mut emitted = 0usize;
    for (index, e) in score.events.iter().enumerate() {
        elapsed += e.duration_sec;
        let boundary = (elapsed * frame_rate_hz).round() as usize;
        let count = boundary.saturating_sub(emitted);
        if count == 0 {
            return Err(Error::DegenerateDuration { index });
        }
        phoneme_per_frame.extend(std::iter::repeat_n(e.phoneme_id, count));
        pitch_per_frame.extend(std::iter::repeat_n(e.midi_pitch, count));
        event_frames.push(count);
        emitted = boundary;
    }
    Ok(FrameScore {
        n_frames: emitted,
        phoneme_per_frame,
        pitch_per_frame,
        event_frames,
    })
}

/// Equal-tempered frequency of a MIDI note; rests map to 0 Hz.
pub fn midi_to_hz(midi: i32) -> f64 {
    if midi == REST {
        0.0
    } else {
        440.0 * 2f64.powf((midi as f64 - 69.0) / 12.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inv() -> PhonemeInventory {
        PhonemeInventory::new(["SP", "a", "i", "u"]).unwrap()
    }

    fn score(durs: &[f64]) -> MusicScore {
        let events = durs
            .iter()
            .enumerate()
            .map(|(i, &d)| ScoreEvent {
                phoneme_id: i % 4,
                midi_pitch: 60 + i as i32,
                duration_sec: d,
            })
            .collect();
        MusicScore::new("u", events, 0).unwrap()
    }

    #[test]
    fn single_line() {
        let s = parse_score("a\t69\t0.5", &inv(), "u1", 0).unwrap();
        assert_eq!(
            s.events,
            vec![ScoreEvent {
                phoneme_id: 1,
                midi_pitch: 69,
                duration_sec: 0.5
            }]
        );
    }

    #[test]
    fn header_and_three_lines_keep_order() {
        let text = "phoneme\tmidi\tduration_sec\na\t60\t0.2\nSP\t-1\t0.1\nu\t64\t0.3\n";
        let s = parse_score(text, &inv(), "u", 1).unwrap();
        let got: Vec<(usize, i32)> = s.events.iter().map(|e| (e.phoneme_id, e.midi_pitch)).collect();
        assert_eq!(got, vec![(1, 60), (0, REST), (3, 64)]);
        assert_eq!(s.speaker_id, 1);
    }

    #[test]
    fn negative_duration_is_a_parse_error() {
        match parse_score("a\t69\t-0.1", &inv(), "u", 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "a\t60\t0.2\ni\t61\n";
        match parse_score(text, &inv(), "u", 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_score("a\t60\t0.2\nzz\t61\t0.1", &inv(), "u", 0) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("unknown phoneme"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_is_invalid() {
        assert!(matches!(parse_score("", &inv(), "u", 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            parse_score("# nothing\n\n", &inv(), "u", 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn inventory_round_trips_through_text() {
        let i = inv();
        assert_eq!(PhonemeInventory::from_text(&i.to_text()).unwrap(), i);
        assert!(PhonemeInventory::from_text("a\na\n").is_err());
    }

    #[test]
    fn single_event_regulation() {
        let fs = length_regulate(&score(&[0.1]), 50.0).unwrap();
        assert_eq!(fs.n_frames, 5);
        assert!(fs.phoneme_per_frame.iter().all(|&p| p == 0));
        assert!(fs.pitch_per_frame.iter().all(|&p| p == 60));
    }

    #[test]
    fn cumulative_rounding_preserves_total() {
        let fs = length_regulate(&score(&[0.03, 0.03, 0.04]), 50.0).unwrap();
        assert_eq!(fs.event_frames.iter().sum::<usize>(), 5);
        assert_eq!(fs.n_frames, 5);
    }

    #[test]
    fn two_halves_are_labelled_in_order() {
        let fs = length_regulate(&score(&[0.5, 0.5]), 50.0).unwrap();
        assert!(fs.pitch_per_frame[..25].iter().all(|&p| p == 60));
        assert!(fs.pitch_per_frame[25..].iter().all(|&p| p == 61));
    }

    #[test]
    fn zero_frame_event_is_reported() {
        match length_regulate(&score(&[0.1, 0.001, 0.1]), 50.0) {
            Err(Error::DegenerateDuration { index }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overlong_score_is_rejected() {
        let events = vec![ScoreEvent { phoneme_id: 1, midi_pitch: 60, duration_sec: 31.0 }];
        assert!(MusicScore::new("u", events, 0).is_err());
    }

    #[test]
    fn midi_conversion() {
        assert_eq!(midi_to_hz(69), 440.0);
        assert!((midi_to_hz(57) - 220.0).abs() < 1e-12);
        assert_eq!(midi_to_hz(REST), 0.0);
    }

    proptest! {
        #[test]
        fn total_frames_match_rounded_duration(durs in prop::collection::vec(0.05f64..0.6, 1..20)) {
            let s = score(&durs);
            let fs = length_regulate(&s, 50.0).unwrap();
            let total: f64 = durs.iter().sum();
            prop_assert_eq!(fs.event_frames.iter().sum::<usize>(), (total * 50.0).round() as usize);
            prop_assert_eq!(fs.phoneme_per_frame.len(), fs.n_frames);
            prop_assert_eq!(fs.pitch_per_frame.len(), fs.n_frames);
        }

        #[test]
        fn reversing_events_reverses_blocks(durs in prop::collection::vec(1usize..12, 1..10)) {
            // Whole-frame durations so both orders round identically.
            let secs: Vec<f64> = durs.iter().map(|&d| d as f64 / 50.0).collect();
            let fwd = score(&secs);
            let mut rev = fwd.clone();
            rev.events.reverse();
            let a = length_regulate(&fwd, 50.0).unwrap();
            let b = length_regulate(&rev, 50.0).unwrap();
            let mut expected = a.event_frames.clone();
            expected.reverse();
            prop_assert_eq!(&b.event_frames, &expected);
            let mut blocks_a: Vec<Vec<i32>> = Vec::new();
            let mut off = 0;
            for &c in &a.event_frames {
                blocks_a.push(a.pitch_per_frame[off..off + c].to_vec());
                off += c;
            }
            blocks_a.reverse();
            prop_assert_eq!(blocks_a.concat(), b.pitch_per_frame);
        }
    }
}
