//! Discretization of note events into a token stream.
//!
//! Every note becomes three tokens: a lead token (`Advance` consumes the next
//! lyric unit, `Melisma` continues the previous one), a pitch token and a
//! duration-bucket token. A sequence is framed by one of several `Begin`
//! variants (chosen from the prompt) and `End`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::melody::{LyricLine, Melody, MELISMA};

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Begin(usize),
    End,
    Advance,
    Melisma,
    Pitch(u8),
    Duration(usize),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Begin(b) => write!(f, "begin/{b}"),
            Token::End => f.write_str("end"),
            Token::Advance => f.write_str("advance"),
            Token::Melisma => f.write_str("melisma"),
            Token::Pitch(p) => write!(f, "pitch/{p}"),
            Token::Duration(b) => write!(f, "dur/{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VocabError {
    #[error("pitch window [{0}, {1}] is empty or outside MIDI range")]
    PitchWindow(u8, u8),
    #[error("duration bucket edges must be positive and strictly increasing")]
    DurationEdges,
    #[error("prompt bucket edges must be positive and strictly increasing")]
    PromptEdges,
    #[error("note {index}: pitch {pitch} outside the vocabulary window")]
    PitchOutsideWindow { index: usize, pitch: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub pitch_min: u8,
    pub pitch_max: u8,
    /// Bucket edges in ms. `n` edges give `n + 1` buckets: below the first
    /// edge, between consecutive edges, and at or above the last edge.
    pub duration_edges: Vec<u32>,
    /// Lyric-length edges selecting the begin variant: `n` edges give `n + 1`
    /// variants.
    pub prompt_edges: Vec<usize>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            pitch_min: 48,
            pitch_max: 96,
            duration_edges: vec![125, 250, 500, 1000, 2000, 4000],
            prompt_edges: vec![3, 5, 7],
        }
    }
}

impl VocabConfig {
    pub fn validate(&self) -> Result<(), VocabError> {
        if self.pitch_min > self.pitch_max || self.pitch_max > 127 {
            return Err(VocabError::PitchWindow(self.pitch_min, self.pitch_max));
        }
        if self.duration_edges.is_empty()
            || self.duration_edges[0] < 2
            || self.duration_edges.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(VocabError::DurationEdges);
        }
        if self.prompt_edges.first() == Some(&0)
            || self.prompt_edges.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(VocabError::PromptEdges);
        }
        Ok(())
    }
}

/// Duration bucketing shared by the tokenizer and the DD metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationBuckets {
    edges: Vec<u32>,
}

impl DurationBuckets {
    pub fn new(edges: Vec<u32>) -> Self {
        Self { edges }
    }

    pub fn len(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bucket_of(&self, duration_ms: u32) -> usize {
        self.edges.partition_point(|&e| e <= duration_ms)
    }

    /// Representative duration of a bucket: geometric mean of its edges,
    /// rounded. The open-ended outer buckets use `edge / sqrt 2` and
    /// `edge * sqrt 2`.
    pub fn representative(&self, bucket: usize) -> u32 {
        let e = &self.edges;
        let value = if bucket == 0 {
            e[0] as f64 / std::f64::consts::SQRT_2
        } else if bucket >= e.len() {
            e[e.len() - 1] as f64 * std::f64::consts::SQRT_2
        } else {
            (e[bucket - 1] as f64 * e[bucket] as f64).sqrt()
        };
        value.round() as u32
    }

    pub fn representatives(&self) -> Vec<u32> {
        (0..self.len()).map(|b| self.representative(b)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    config: VocabConfig,
    tokens: Vec<Token>,
    buckets: DurationBuckets,
}

impl Vocabulary {
    pub fn new(config: VocabConfig) -> Result<Self, VocabError> {
        config.validate()?;
        let mut tokens: Vec<Token> = (0..=config.prompt_edges.len()).map(Token::Begin).collect();
        tokens.extend([Token::End, Token::Advance, Token::Melisma]);
        tokens.extend((config.pitch_min..=config.pitch_max).map(Token::Pitch));
        let buckets = DurationBuckets::new(config.duration_edges.clone());
        tokens.extend((0..buckets.len()).map(Token::Duration));
        Ok(Self {
            config,
            tokens,
            buckets,
        })
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        self.tokens.get(id).copied()
    }

    pub fn buckets(&self) -> &DurationBuckets {
        &self.buckets
    }

    pub fn n_begin(&self) -> usize {
        self.config.prompt_edges.len() + 1
    }

    pub fn begin(&self, variant: usize) -> TokenId {
        variant.min(self.n_begin() - 1)
    }

    pub fn end(&self) -> TokenId {
        self.n_begin()
    }

    pub fn advance(&self) -> TokenId {
        self.n_begin() + 1
    }

    pub fn melisma(&self) -> TokenId {
        self.n_begin() + 2
    }

    pub fn pitch(&self, pitch: u8) -> Option<TokenId> {
        (self.config.pitch_min..=self.config.pitch_max)
            .contains(&pitch)
            .then(|| self.n_begin() + 3 + (pitch - self.config.pitch_min) as usize)
    }

    pub fn n_pitches(&self) -> usize {
        (self.config.pitch_max - self.config.pitch_min) as usize + 1
    }

    /// Position of a pitch token within the pitch window.
    pub fn pitch_index(&self, id: TokenId) -> Option<usize> {
        match self.tokens.get(id) {
            Some(Token::Pitch(p)) => Some((p - self.config.pitch_min) as usize),
            _ => None,
        }
    }

    pub fn duration(&self, bucket: usize) -> Option<TokenId> {
        let first =
            self.n_begin() + 3 + (self.config.pitch_max - self.config.pitch_min) as usize + 1;
        (bucket < self.buckets.len()).then_some(first + bucket)
    }

    /// Begin variant for a lyric of `units` units.
    pub fn prompt_bucket(&self, units: usize) -> usize {
        self.config.prompt_edges.partition_point(|&e| e <= units)
    }

    /// Token stream for a melody, framed by `Begin(prompt_id)` and `End`.
    pub fn encode(&self, melody: &Melody, prompt_id: usize) -> Result<Vec<TokenId>, VocabError> {
        let mut ids = Vec::with_capacity(melody.len() * 3 + 2);
        ids.push(self.begin(prompt_id));
        for (index, note) in melody.notes().iter().enumerate() {
            ids.push(if note.is_melisma() {
                self.melisma()
            } else {
                self.advance()
            });
            ids.push(
                self.pitch(note.pitch)
                    .ok_or(VocabError::PitchOutsideWindow {
                        index,
                        pitch: note.pitch,
                    })?,
            );
            ids.push(
                self.duration(self.buckets.bucket_of(note.duration_ms))
                    .expect("bucket in range"),
            );
        }
        ids.push(self.end());
        Ok(ids)
    }

    /// Renders a token stream as melody text for `lyric`.
    ///
    /// Leading `Begin` tokens are skipped and decoding stops at `End`. Each
    /// `Advance` consumes the next lyric unit (repeating the last unit once
    /// the lyric is exhausted) and `Melisma` emits `-`. Tokens that break the
    /// lead/pitch/duration pattern are written as they come, so malformed
    /// streams produce text that fails the Format or Lyric rule downstream.
    pub fn decode(&self, ids: &[TokenId], lyric: &LyricLine) -> String {
        let units = lyric.words();
        let mut consumed = 0usize;
        let mut events: Vec<Vec<String>> = Vec::new();
        let body = ids
            .iter()
            .skip_while(|&&id| matches!(self.token(id), Some(Token::Begin(_))));
        for &id in body {
            match self.token(id) {
                Some(Token::End) => break,
                Some(Token::Advance) => {
                    let unit = units
                        .get(consumed)
                        .or(units.last())
                        .cloned()
                        .unwrap_or_default();
                    consumed += 1;
                    events.push(vec![unit]);
                }
                Some(Token::Melisma) => events.push(vec![MELISMA.to_string()]),
                other => {
                    let field = match other {
                        Some(Token::Pitch(p)) => p.to_string(),
                        Some(Token::Duration(b)) => self.buckets.representative(b).to_string(),
                        _ => "?".to_string(),
                    };
                    match events.last_mut() {
                        Some(event) => event.push(field),
                        None => events.push(vec![field]),
                    }
                }
            }
        }
        events
            .iter()
            .map(|e| e.join(","))
            .collect::<Vec<_>>()
            .join("|")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::melody::{parse_melody, split_lyric, Language};
    use crate::rules::{evaluate, RuleConfig, RuleId, Verdict};

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabConfig::default()).unwrap()
    }

    #[test]
    fn ids_are_dense_and_reserved_tokens_distinct() {
        let v = vocab();
        assert_eq!(v.len(), 4 + 3 + 49 + 7);
        for (id, tok) in v.tokens().iter().enumerate() {
            let back = match *tok {
                Token::Begin(b) => v.begin(b),
                Token::End => v.end(),
                Token::Advance => v.advance(),
                Token::Melisma => v.melisma(),
                Token::Pitch(p) => v.pitch(p).unwrap(),
                Token::Duration(b) => v.duration(b).unwrap(),
            };
            assert_eq!(back, id);
        }
        assert_ne!(v.begin(0), v.end());
        assert_eq!(v.pitch(47), None);
        assert_eq!(v.duration(7), None);
    }

    #[test]
    fn duration_buckets() {
        let b = DurationBuckets::new(vec![125, 250, 500, 1000, 2000, 4000]);
        assert_eq!(b.len(), 7);
        assert_eq!(b.bucket_of(1), 0);
        assert_eq!(b.bucket_of(124), 0);
        assert_eq!(b.bucket_of(125), 1);
        assert_eq!(b.bucket_of(500), 3);
        assert_eq!(b.bucket_of(4000), 6);
        assert_eq!(
            b.representatives(),
            vec![88, 177, 354, 707, 1414, 2828, 5657]
        );
        for bucket in 0..b.len() {
            assert_eq!(b.bucket_of(b.representative(bucket)), bucket);
        }
    }

    #[test]
    fn prompt_buckets() {
        let v = vocab();
        assert_eq!(v.prompt_bucket(1), 0);
        assert_eq!(v.prompt_bucket(3), 1);
        assert_eq!(v.prompt_bucket(6), 2);
        assert_eq!(v.prompt_bucket(20), 3);
    }

    #[test]
    fn encode_decode_well_formed_stream() {
        let v = vocab();
        let lyric = split_lyric("shine on me", Language::English).unwrap();
        let m = parse_melody("shine,67,354|on,69,177|-,71,177|me,72,1414").unwrap();
        let ids = v.encode(&m, 1).unwrap();
        assert_eq!(ids.len(), 14);
        let text = v.decode(&ids, &lyric);
        assert_eq!(parse_melody(&text).unwrap(), m);
        assert!(evaluate(&text, &lyric, &RuleConfig::default()).compliant);
    }

    #[test]
    fn encode_rejects_pitch_outside_window() {
        let m = parse_melody("a,30,500").unwrap();
        assert_eq!(
            vocab().encode(&m, 0),
            Err(VocabError::PitchOutsideWindow {
                index: 0,
                pitch: 30
            })
        );
    }

    #[test]
    fn decode_without_advance_fails_lyric() {
        let v = vocab();
        let lyric = split_lyric("shine on", Language::English).unwrap();
        // melisma-led stream: parses only if it starts with a syllable, so lead with Pitch
        let ids = vec![
            v.begin(0),
            v.pitch(60).unwrap(),
            v.duration(3).unwrap(),
            v.end(),
        ];
        let r = evaluate(&v.decode(&ids, &lyric), &lyric, &RuleConfig::default());
        assert!(!r.compliant);
        let ids = vec![
            v.begin(0),
            v.advance(),
            v.pitch(60).unwrap(),
            v.duration(3).unwrap(),
            v.end(),
        ];
        let r = evaluate(&v.decode(&ids, &lyric), &lyric, &RuleConfig::default());
        assert_eq!(r.verdict(RuleId::Lyric), Verdict::Fail);
    }

    #[test]
    fn decode_empty_body_fails_format() {
        let v = vocab();
        let lyric = split_lyric("la", Language::English).unwrap();
        let text = v.decode(&[v.begin(0), v.end()], &lyric);
        assert_eq!(text, "");
        assert_eq!(
            evaluate(&text, &lyric, &RuleConfig::default()).verdict(RuleId::Format),
            Verdict::Fail
        );
    }

    #[test]
    fn decode_over_consumption_fails_lyric() {
        let v = vocab();
        let lyric = split_lyric("la", Language::English).unwrap();
        let note = |lead| vec![lead, v.pitch(62).unwrap(), v.duration(3).unwrap()];
        let mut ids = vec![v.begin(0)];
        ids.extend(note(v.advance()));
        ids.extend(note(v.advance()));
        ids.push(v.end());
        let text = v.decode(&ids, &lyric);
        assert_eq!(text, "la,62,707|la,62,707");
        let r = evaluate(&text, &lyric, &RuleConfig::default());
        assert_eq!(r.verdict(RuleId::Lyric), Verdict::Fail);
    }

    #[test]
    fn config_validation() {
        assert!(VocabConfig {
            pitch_min: 90,
            pitch_max: 80,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(VocabConfig {
            duration_edges: vec![500, 250],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(VocabConfig {
            duration_edges: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(VocabConfig {
            prompt_edges: vec![0],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(VocabConfig {
            prompt_edges: vec![],
            ..Default::default()
        }
        .validate()
        .is_ok());
    }
}
