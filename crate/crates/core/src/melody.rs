//! Symbolic note-event format and lyric segmentation.
//!
//! A melody is one text line of note events separated by `|`. Each event is
//! `lyric,pitch,duration_ms`, where `lyric` is a syllable or the melisma
//! marker `-`, `pitch` is a MIDI note number and `duration_ms` is a positive
//! integer:
//!
//! ```text
//! shine,67,500|on,69,250|-,71,250
//! ```
//!
//! Whitespace around fields is tolerated on input and never emitted on
//! output, so `serialize_melody` produces the canonical form.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separates note events.
pub const EVENT_DELIMITER: char = '|';
/// Separates the fields of one note event.
pub const FIELD_DELIMITER: char = ',';
/// Lyric token marking a melisma (continuation of the previous syllable).
pub const MELISMA: &str = "-";

/// Highest valid MIDI note number.
pub const MIDI_MAX: u8 = 127;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty input")]
    EmptyInput,
    #[error("event {index}: expected 3 fields, found {found}")]
    BadFieldCount { index: usize, found: usize },
    #[error("event {index}: lyric {lyric:?} is empty or contains reserved characters")]
    InvalidLyric { index: usize, lyric: String },
    #[error("event {index}: pitch {raw:?} is not an integer")]
    NonIntegerPitch { index: usize, raw: String },
    #[error("event {index}: pitch {pitch} outside MIDI range 0..=127")]
    PitchOutOfMidiRange { index: usize, pitch: i64 },
    #[error("event {index}: duration {raw:?} is not an integer")]
    NonIntegerDuration { index: usize, raw: String },
    #[error("event {index}: duration {duration} is not positive")]
    NonPositiveDuration { index: usize, duration: i64 },
    #[error("event {index}: duration {duration} exceeds the supported maximum")]
    DurationOverflow { index: usize, duration: i64 },
    #[error("event 0: a melody cannot start with a melisma")]
    LeadingMelisma,
}

impl ParseError {
    /// Index of the offending note event, when the error is tied to one.
    pub fn event_index(&self) -> Option<usize> {
        match self {
            ParseError::EmptyInput => None,
            ParseError::LeadingMelisma => Some(0),
            ParseError::BadFieldCount { index, .. }
            | ParseError::InvalidLyric { index, .. }
            | ParseError::NonIntegerPitch { index, .. }
            | ParseError::PitchOutOfMidiRange { index, .. }
            | ParseError::NonIntegerDuration { index, .. }
            | ParseError::NonPositiveDuration { index, .. }
            | ParseError::DurationOverflow { index, .. } => Some(*index),
        }
    }
}

/// One note event: lyric syllable (or `-`), MIDI pitch, duration in ms.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Note {
    pub lyric: String,
    pub pitch: u8,
    pub duration_ms: u32,
}

impl Note {
    /// Builds a note, checking the same invariants the parser enforces.
    pub fn new(lyric: impl Into<String>, pitch: u8, duration_ms: u32) -> Result<Self, ParseError> {
        let lyric = lyric.into();
        if !is_valid_lyric(&lyric) {
            return Err(ParseError::InvalidLyric { index: 0, lyric });
        }
        if pitch > MIDI_MAX {
            return Err(ParseError::PitchOutOfMidiRange {
                index: 0,
                pitch: pitch as i64,
            });
        }
        if duration_ms == 0 {
            return Err(ParseError::NonPositiveDuration {
                index: 0,
                duration: 0,
            });
        }
        Ok(Self {
            lyric,
            pitch,
            duration_ms,
        })
    }

    pub fn is_melisma(&self) -> bool {
        self.lyric == MELISMA
    }
}

/// An ordered, non-empty note sequence.
///
/// `lyric_line` optionally records the lyric text the melody was written
/// for. It is not part of the note-event text and is `None` after parsing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Melody {
    notes: Vec<Note>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyric_line: Option<String>,
}

impl Melody {
    pub fn new(notes: Vec<Note>) -> Result<Self, ParseError> {
        let first = notes.first().ok_or(ParseError::EmptyInput)?;
        if first.is_melisma() {
            return Err(ParseError::LeadingMelisma);
        }
        for (index, note) in notes.iter().enumerate() {
            if !is_valid_lyric(&note.lyric) {
                return Err(ParseError::InvalidLyric {
                    index,
                    lyric: note.lyric.clone(),
                });
            }
            if note.pitch > MIDI_MAX {
                return Err(ParseError::PitchOutOfMidiRange {
                    index,
                    pitch: note.pitch as i64,
                });
            }
            if note.duration_ms == 0 {
                return Err(ParseError::NonPositiveDuration { index, duration: 0 });
            }
        }
        Ok(Self {
            notes,
            lyric_line: None,
        })
    }

    pub fn with_lyric_line(mut self, line: impl Into<String>) -> Self {
        self.lyric_line = Some(line.into());
        self
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn pitches(&self) -> Vec<u8> {
        self.notes.iter().map(|n| n.pitch).collect()
    }

    pub fn durations(&self) -> Vec<u32> {
        self.notes.iter().map(|n| n.duration_ms).collect()
    }

    /// Non-melisma lyric tokens in order.
    pub fn syllables(&self) -> impl Iterator<Item = &str> {
        self.notes
            .iter()
            .filter(|n| !n.is_melisma())
            .map(|n| n.lyric.as_str())
    }
}

impl fmt::Display for Melody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, note) in self.notes.iter().enumerate() {
            if i > 0 {
                write!(f, "{EVENT_DELIMITER}")?;
            }
            write!(
                f,
                "{}{FIELD_DELIMITER}{}{FIELD_DELIMITER}{}",
                note.lyric, note.pitch, note.duration_ms
            )?;
        }
        Ok(())
    }
}

fn is_valid_lyric(lyric: &str) -> bool {
    if lyric.is_empty() || lyric != lyric.trim() {
        return false;
    }
    if lyric
        .chars()
        .any(|c| c == FIELD_DELIMITER || c == EVENT_DELIMITER || c.is_control())
    {
        return false;
    }
    lyric == MELISMA || !lyric.contains('-')
}

/// Parses one melody line. Never panics, whatever the input.
pub fn parse_melody(text: &str) -> Result<Melody, ParseError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let mut notes = Vec::new();
    for (index, event) in text.split(EVENT_DELIMITER).enumerate() {
        let fields: Vec<&str> = event.split(FIELD_DELIMITER).map(str::trim).collect();
        if fields.len() != 3 {
            return Err(ParseError::BadFieldCount {
                index,
                found: fields.len(),
            });
        }
        let lyric = fields[0];
        if !is_valid_lyric(lyric) {
            return Err(ParseError::InvalidLyric {
                index,
                lyric: lyric.to_string(),
            });
        }
        if index == 0 && lyric == MELISMA {
            return Err(ParseError::LeadingMelisma);
        }
        let pitch: i64 = fields[1].parse().map_err(|_| ParseError::NonIntegerPitch {
            index,
            raw: fields[1].to_string(),
        })?;
        if !(0..=MIDI_MAX as i64).contains(&pitch) {
            return Err(ParseError::PitchOutOfMidiRange { index, pitch });
        }
        let duration: i64 = fields[2]
            .parse()
            .map_err(|_| ParseError::NonIntegerDuration {
                index,
                raw: fields[2].to_string(),
            })?;
        if duration <= 0 {
            return Err(ParseError::NonPositiveDuration { index, duration });
        }
        let duration_ms = u32::try_from(duration)
            .map_err(|_| ParseError::DurationOverflow { index, duration })?;
        notes.push(Note {
            lyric: lyric.to_string(),
            pitch: pitch as u8,
            duration_ms,
        });
    }
    Ok(Melody {
        notes,
        lyric_line: None,
    })
}

/// Canonical single-line text form. Inverse of [`parse_melody`].
pub fn serialize_melody(melody: &Melody) -> String {
    melody.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    English,
    Chinese,
}

impl Language {
    /// Chinese if the text contains any CJK ideograph, English otherwise.
    pub fn detect(text: &str) -> Self {
        if text.chars().any(is_cjk) {
            Language::Chinese
        } else {
            Language::English
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::English => f.write_str("english"),
            Language::Chinese => f.write_str("chinese"),
        }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LyricError {
    #[error("lyric is empty after normalization")]
    EmptyLyric,
}

/// Input lyric split into units: words for English, characters for Chinese.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LyricLine {
    words: Vec<String>,
    language: Language,
}

impl LyricLine {
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Human-readable text: words joined by spaces (English) or concatenated (Chinese).
    pub fn text(&self) -> String {
        match self.language {
            Language::English => self.words.join(" "),
            Language::Chinese => self.words.concat(),
        }
    }
}

/// Lowercases and drops everything that is not alphanumeric.
pub fn normalize_unit(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

pub fn split_lyric(text: &str, language: Language) -> Result<LyricLine, LyricError> {
    let words: Vec<String> = match language {
        Language::English => text
            .split_whitespace()
            .map(normalize_unit)
            .filter(|w| !w.is_empty())
            .collect(),
        Language::Chinese => text
            .chars()
            .filter(|c| c.is_alphanumeric())
            .map(|c| c.to_lowercase().collect::<String>())
            .collect(),
    };
    if words.is_empty() {
        return Err(LyricError::EmptyLyric);
    }
    Ok(LyricLine { words, language })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_three_note_example() {
        let m = parse_melody("shine,67,500|on,69,250|-,71,250").unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.notes()[2].is_melisma());
        assert_eq!(m.notes()[2].pitch, 71);
        assert_eq!(m.syllables().collect::<Vec<_>>(), ["shine", "on"]);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_melody(""), Err(ParseError::EmptyInput));
        assert_eq!(parse_melody("   \n"), Err(ParseError::EmptyInput));
        assert_eq!(
            parse_melody("la,200,500"),
            Err(ParseError::PitchOutOfMidiRange {
                index: 0,
                pitch: 200
            })
        );
        assert_eq!(
            parse_melody("la,60"),
            Err(ParseError::BadFieldCount { index: 0, found: 2 })
        );
        assert_eq!(parse_melody("-,60,500"), Err(ParseError::LeadingMelisma));
        assert_eq!(
            parse_melody("la,60,500|"),
            Err(ParseError::BadFieldCount { index: 1, found: 1 })
        );
        assert!(matches!(
            parse_melody("la,6x,500"),
            Err(ParseError::NonIntegerPitch { index: 0, .. })
        ));
        assert!(matches!(
            parse_melody("la,-1,500"),
            Err(ParseError::PitchOutOfMidiRange {
                index: 0,
                pitch: -1
            })
        ));
        assert_eq!(
            parse_melody("la,60,500|da,62,0"),
            Err(ParseError::NonPositiveDuration {
                index: 1,
                duration: 0
            })
        );
        assert!(matches!(
            parse_melody("la,60,1.5"),
            Err(ParseError::NonIntegerDuration { .. })
        ));
        assert!(matches!(
            parse_melody("la,60,99999999999"),
            Err(ParseError::DurationOverflow { .. })
        ));
        assert!(matches!(
            parse_melody("well-known,60,500"),
            Err(ParseError::InvalidLyric { index: 0, .. })
        ));
        assert!(matches!(
            parse_melody(",60,500"),
            Err(ParseError::InvalidLyric { .. })
        ));
    }

    #[test]
    fn error_names_offending_event() {
        let err = parse_melody("a,60,100|b,61,100|c,x,100").unwrap_err();
        assert_eq!(err.event_index(), Some(2));
    }

    #[test]
    fn serializes_canonically() {
        let m = Melody::new(vec![Note::new("la", 60, 500).unwrap()]).unwrap();
        assert_eq!(serialize_melody(&m), "la,60,500");
        let m = Melody::new(vec![
            Note::new("a", 60, 100).unwrap(),
            Note::new("-", 62, 100).unwrap(),
        ])
        .unwrap();
        assert_eq!(serialize_melody(&m), "a,60,100|-,62,100");
        let spaced = parse_melody("  a , 60 ,100 | - ,62, 100 ").unwrap();
        assert_eq!(serialize_melody(&spaced), "a,60,100|-,62,100");
    }

    #[test]
    fn melody_constructor_enforces_invariants() {
        assert_eq!(Melody::new(vec![]), Err(ParseError::EmptyInput));
        assert_eq!(
            Melody::new(vec![Note::new("-", 60, 100).unwrap()]),
            Err(ParseError::LeadingMelisma)
        );
        assert!(Note::new("a|b", 60, 100).is_err());
        assert!(Note::new("a", 128, 100).is_err());
        assert!(Note::new("a", 60, 0).is_err());
    }

    #[test]
    fn split_lyric_examples() {
        let l = split_lyric("Shine on me", Language::English).unwrap();
        assert_eq!(l.words(), ["shine", "on", "me"]);
        let l = split_lyric("你好", Language::Chinese).unwrap();
        assert_eq!(l.words(), ["你", "好"]);
        assert_eq!(
            split_lyric("  ", Language::English),
            Err(LyricError::EmptyLyric)
        );
        let l = split_lyric("Hello, world!  ...", Language::English).unwrap();
        assert_eq!(l.words(), ["hello", "world"]);
        let l = split_lyric("你 好，世界。", Language::Chinese).unwrap();
        assert_eq!(l.words(), ["你", "好", "世", "界"]);
        assert_eq!(l.text(), "你好世界");
    }

    #[test]
    fn detects_language() {
        assert_eq!(Language::detect("hello there"), Language::English);
        assert_eq!(Language::detect("我爱你"), Language::Chinese);
    }

    fn arb_lyric() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(MELISMA.to_string()),
            "[a-z]{1,6}",
            "[你好世界月光]{1,2}"
        ]
    }

    fn arb_melody() -> impl Strategy<Value = Melody> {
        (
            "[a-z]{1,6}",
            prop::collection::vec((arb_lyric(), 0u8..=127, 1u32..=10_000), 0..12),
        )
            .prop_map(|(first, rest)| {
                let mut notes = vec![Note {
                    lyric: first,
                    pitch: 60,
                    duration_ms: 500,
                }];
                notes.extend(rest.into_iter().map(|(lyric, pitch, duration_ms)| Note {
                    lyric,
                    pitch,
                    duration_ms,
                }));
                Melody::new(notes).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn parse_inverts_serialize(m in arb_melody()) {
            let text = serialize_melody(&m);
            prop_assert_eq!(parse_melody(&text).unwrap(), m);
            prop_assert!(!text.contains(char::is_whitespace));
        }

        #[test]
        fn parser_total_on_arbitrary_text(s in "\\PC{0,64}") {
            let _ = parse_melody(&s);
        }

        #[test]
        fn parser_total_on_delimiter_soup(s in "[-0-9a-z,| ]{0,40}") {
            if let Ok(m) = parse_melody(&s) {
                prop_assert_eq!(parse_melody(&serialize_melody(&m)).unwrap(), m);
            }
        }
    }
}
