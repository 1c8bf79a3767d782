//! The five melody constraints: Format, Lyric, Note (monotony), Duration and
//! Register.
//!
//! [`evaluate`] runs the Format check first. When the text does not parse the
//! remaining rules are marked [`Verdict::NotEvaluated`] and the melody counts
//! as violating Format only.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::melody::{normalize_unit, parse_melody, LyricLine, Melody, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    Format,
    Lyric,
    Note,
    Duration,
    Register,
}

impl RuleId {
    pub const ALL: [RuleId; 5] = [
        RuleId::Format,
        RuleId::Lyric,
        RuleId::Note,
        RuleId::Duration,
        RuleId::Register,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleId::Format => "format",
            RuleId::Lyric => "lyric",
            RuleId::Note => "note",
            RuleId::Duration => "duration",
            RuleId::Register => "register",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotEvaluated,
}

impl Verdict {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("tau_note {0} outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("duration bounds [{0}, {1}] are empty or non-positive")]
    DurationBounds(u32, u32),
    #[error("final-note duration bounds [{0}, {1}] are empty or non-positive")]
    FinalDurationBounds(u32, u32),
    #[error("register [{0}, {1}] is empty or outside MIDI range")]
    RegisterBounds(u8, u8),
}

/// Thresholds for the Note, Duration and Register rules. All intervals are
/// inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleConfig {
    pub tau_note: f64,
    pub d_min_ms: u32,
    pub d_max_ms: u32,
    pub d_final_min_ms: u32,
    pub d_final_max_ms: u32,
    pub p_min: u8,
    pub p_max: u8,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            tau_note: 0.5,
            d_min_ms: 125,
            d_max_ms: 2000,
            d_final_min_ms: 250,
            d_final_max_ms: 4000,
            p_min: 60,
            p_max: 84,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.tau_note) {
            return Err(ConfigError::TauOutOfRange(self.tau_note));
        }
        if self.d_min_ms == 0 || self.d_min_ms > self.d_max_ms {
            return Err(ConfigError::DurationBounds(self.d_min_ms, self.d_max_ms));
        }
        if self.d_final_min_ms == 0 || self.d_final_min_ms > self.d_final_max_ms {
            return Err(ConfigError::FinalDurationBounds(
                self.d_final_min_ms,
                self.d_final_max_ms,
            ));
        }
        if self.p_min > self.p_max || self.p_max > 127 {
            return Err(ConfigError::RegisterBounds(self.p_min, self.p_max));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("RuleConfig serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Why a rule failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    Format { error: String, event: Option<usize> },
    Lyric { reason: String },
    Note { ratio: f64, threshold: f64 },
    Duration { offending: Vec<(usize, u32)> },
    Register { offending: Vec<(usize, u8)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    verdicts: [Verdict; 5],
    pub details: Vec<Violation>,
    pub compliant: bool,
}

impl RuleReport {
    pub fn verdict(&self, rule: RuleId) -> Verdict {
        self.verdicts[rule.index()]
    }

    pub fn verdicts(&self) -> impl Iterator<Item = (RuleId, Verdict)> + '_ {
        RuleId::ALL
            .into_iter()
            .map(|r| (r, self.verdicts[r.index()]))
    }

    /// Rules counted as violated. A Format failure is reported alone.
    pub fn failed_rules(&self) -> Vec<RuleId> {
        RuleId::ALL
            .into_iter()
            .filter(|r| self.verdicts[r.index()] == Verdict::Fail)
            .collect()
    }

    pub fn ratio(&self) -> Option<f64> {
        self.details.iter().find_map(|d| match d {
            Violation::Note { ratio, .. } => Some(*ratio),
            _ => None,
        })
    }
}

/// Format verdict plus the parsed melody when it passes.
pub fn check_format(text: &str) -> (Verdict, Result<Melody, ParseError>) {
    let parsed = parse_melody(text);
    (Verdict::from_pass(parsed.is_ok()), parsed)
}

/// Lyric verdict, with a reason on failure.
///
/// The non-melisma tokens must split the input units in order: each unit is
/// covered by one or more consecutive tokens and no token spans two units.
pub fn check_lyric_detail(melody: &Melody, lyric: &LyricLine) -> Result<(), String> {
    let units: Vec<String> = lyric.words().iter().map(|w| normalize_unit(w)).collect();
    let mut unit = 0;
    let mut offset = 0;
    for (i, token) in melody.syllables().enumerate() {
        let token = normalize_unit(token);
        if token.is_empty() {
            return Err(format!("syllable {i} has no letters"));
        }
        let Some(current) = units.get(unit) else {
            return Err(format!(
                "syllable {i} {token:?} beyond the end of the lyric"
            ));
        };
        if !current[offset..].starts_with(&token) {
            return Err(format!(
                "syllable {i} {token:?} does not continue unit {current:?}"
            ));
        }
        offset += token.len();
        if offset == current.len() {
            unit += 1;
            offset = 0;
        }
    }
    if unit < units.len() {
        return Err(format!(
            "lyric units from {:?} onward are missing",
            units[unit]
        ));
    }
    Ok(())
}

pub fn check_lyric(melody: &Melody, lyric: &LyricLine) -> Verdict {
    Verdict::from_pass(check_lyric_detail(melody, lyric).is_ok())
}

/// Fraction of adjacent note pairs with identical pitch; 0 for a single note.
pub fn monotony_ratio(pitches: &[u8]) -> f64 {
    if pitches.len() < 2 {
        return 0.0;
    }
    let repeats = pitches.windows(2).filter(|w| w[0] == w[1]).count();
    repeats as f64 / (pitches.len() - 1) as f64
}

pub fn check_note(melody: &Melody, cfg: &RuleConfig) -> (Verdict, f64) {
    let ratio = monotony_ratio(&melody.pitches());
    (Verdict::from_pass(ratio <= cfg.tau_note), ratio)
}

/// Notes outside their duration range, as `(index, duration)`.
pub fn duration_offenders(melody: &Melody, cfg: &RuleConfig) -> Vec<(usize, u32)> {
    let last = melody.len() - 1;
    melody
        .notes()
        .iter()
        .enumerate()
        .filter(|(i, n)| {
            let (lo, hi) = if *i == last {
                (cfg.d_final_min_ms, cfg.d_final_max_ms)
            } else {
                (cfg.d_min_ms, cfg.d_max_ms)
            };
            !(lo..=hi).contains(&n.duration_ms)
        })
        .map(|(i, n)| (i, n.duration_ms))
        .collect()
}

pub fn check_duration(melody: &Melody, cfg: &RuleConfig) -> Verdict {
    Verdict::from_pass(duration_offenders(melody, cfg).is_empty())
}

pub fn register_offenders(melody: &Melody, cfg: &RuleConfig) -> Vec<(usize, u8)> {
    melody
        .notes()
        .iter()
        .enumerate()
        .filter(|(_, n)| !(cfg.p_min..=cfg.p_max).contains(&n.pitch))
        .map(|(i, n)| (i, n.pitch))
        .collect()
}

pub fn check_register(melody: &Melody, cfg: &RuleConfig) -> Verdict {
    Verdict::from_pass(register_offenders(melody, cfg).is_empty())
}

/// Runs all five rules on a raw generation.
pub fn evaluate(text: &str, lyric: &LyricLine, cfg: &RuleConfig) -> RuleReport {
    let melody = match parse_melody(text) {
        Ok(m) => m,
        Err(e) => {
            return RuleReport {
                verdicts: [
                    Verdict::Fail,
                    Verdict::NotEvaluated,
                    Verdict::NotEvaluated,
                    Verdict::NotEvaluated,
                    Verdict::NotEvaluated,
                ],
                details: vec![Violation::Format {
                    event: e.event_index(),
                    error: e.to_string(),
                }],
                compliant: false,
            }
        }
    };
    evaluate_melody(&melody, lyric, cfg)
}

/// The four semantic rules on an already parsed melody; Format passes.
pub fn evaluate_melody(melody: &Melody, lyric: &LyricLine, cfg: &RuleConfig) -> RuleReport {
    let mut details = Vec::new();

    let lyric_verdict = match check_lyric_detail(melody, lyric) {
        Ok(()) => Verdict::Pass,
        Err(reason) => {
            details.push(Violation::Lyric { reason });
            Verdict::Fail
        }
    };

    let (note_verdict, ratio) = check_note(melody, cfg);
    if note_verdict == Verdict::Fail {
        details.push(Violation::Note {
            ratio,
            threshold: cfg.tau_note,
        });
    }

    let durations = duration_offenders(melody, cfg);
    let duration_verdict = Verdict::from_pass(durations.is_empty());
    if !durations.is_empty() {
        details.push(Violation::Duration {
            offending: durations,
        });
    }

    let registers = register_offenders(melody, cfg);
    let register_verdict = Verdict::from_pass(registers.is_empty());
    if !registers.is_empty() {
        details.push(Violation::Register {
            offending: registers,
        });
    }

    let verdicts = [
        Verdict::Pass,
        lyric_verdict,
        note_verdict,
        duration_verdict,
        register_verdict,
    ];
    RuleReport {
        compliant: verdicts.iter().all(|v| v.is_pass()),
        verdicts,
        details,
    }
}
