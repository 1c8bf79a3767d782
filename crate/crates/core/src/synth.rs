//! Synthetic lyric/melody corpora with injected rule violations.
//!
//! Compliant lines use durations that are exact duration-bucket
//! representatives, so they tokenize without loss. A violating line is a
//! compliant line with one targeted perturbation, and it fails exactly the
//! rule that perturbation targets.
//!
//! Corpus files hold one `lyric<TAB>melody` pair per line; lines starting
//! with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::melody::{parse_melody, split_lyric, Language, LyricLine, Melody, Note};
use crate::policy::PromptEncoding;
use crate::rules::{evaluate, RuleConfig, RuleId};
use crate::vocab::{TokenId, Vocabulary};

const ENGLISH_WORDS: &[&str] = &[
    "love", "light", "night", "heart", "sky", "rain", "fire", "dream", "home", "sun", "moon",
    "star", "sea", "wind", "song", "time", "road", "day", "blue", "gold", "shine", "fall", "rise",
    "hold", "run", "stay", "fly", "sing", "walk", "burn", "my", "your", "the", "we", "you", "all",
    "far", "away", "again", "tonight", "forever", "river", "summer", "morning", "shadow", "silver",
    "echo", "ocean", "wonder", "angel",
];

const CHINESE_CHARS: &[&str] = &[
    "我", "你", "爱", "心", "天", "风", "雨", "月", "光", "梦", "海", "花", "夜", "星", "歌", "走",
    "飞", "等", "想", "远", "春", "秋", "山", "水", "云", "火", "时", "路", "人", "家", "笑", "泪",
    "听", "说", "唱", "看", "念", "情", "年", "空",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("corpus i/o: {0}")]
    Io(#[from] io::Error),
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    /// Probability that a line carries one injected violation.
    pub violation_rate: f64,
    /// Probability that a line's lyric is Chinese.
    pub chinese_fraction: f64,
    pub min_units: usize,
    pub max_units: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            violation_rate: 0.3,
            chinese_fraction: 0.5,
            min_units: 2,
            max_units: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n == 0 {
            return Err(SynthError::Config("n must be at least 1".into()));
        }
        for (name, p) in [
            ("violation_rate", self.violation_rate),
            ("chinese_fraction", self.chinese_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if self.min_units < 2 || self.min_units > self.max_units {
            return Err(SynthError::Config(format!(
                "unit range {}..={} must be non-empty and start at 2 or more",
                self.min_units, self.max_units
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub lyric: LyricLine,
    /// Melody text; may be deliberately malformed.
    pub text: String,
}

/// Which violation, if any, a synthetic line was given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    None,
    Violation(RuleId),
}

pub fn random_lyric(rng: &mut impl Rng, cfg: &SynthConfig) -> LyricLine {
    let units = rng.gen_range(cfg.min_units..=cfg.max_units);
    if rng.gen_bool(cfg.chinese_fraction) {
        let text: String = (0..units)
            .map(|_| *CHINESE_CHARS.choose(rng).unwrap())
            .collect();
        split_lyric(&text, Language::Chinese).expect("non-empty")
    } else {
        let words: Vec<&str> = (0..units)
            .map(|_| *ENGLISH_WORDS.choose(rng).unwrap())
            .collect();
        split_lyric(&words.join(" "), Language::English).expect("non-empty")
    }
}

/// Prompts only, for generation and evaluation.
pub fn synth_prompts(n: usize, cfg: &SynthConfig) -> Vec<LyricLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..n).map(|_| random_lyric(&mut rng, cfg)).collect()
}

const BODY_DURATIONS: [u32; 4] = [177, 354, 707, 1414];
const FINAL_DURATIONS: [u32; 4] = [354, 707, 1414, 2828];

/// A melody passing all five rules under the default [`RuleConfig`].
pub fn compliant_melody(rng: &mut impl Rng, lyric: &LyricLine, rules: &RuleConfig) -> Melody {
    loop {
        let mut notes = Vec::new();
        let mut pitch: i32 = rng.gen_range(64..=78);
        for word in lyric.words() {
            let melismas = if rng.gen_bool(0.2) { 1 } else { 0 };
            for k in 0..=melismas {
                let lyric = if k == 0 { word.as_str() } else { "-" };
                notes.push(
                    Note::new(lyric, pitch as u8, *BODY_DURATIONS.choose(rng).unwrap())
                        .expect("valid note"),
                );
                let step = if rng.gen_bool(0.15) {
                    0
                } else {
                    *[-4, -3, -2, -1, 1, 2, 3, 4].choose(rng).unwrap()
                };
                pitch = (pitch + step).clamp(rules.p_min as i32 + 2, rules.p_max as i32 - 2);
            }
        }
        let last = notes.last_mut().unwrap();
        last.duration_ms = *FINAL_DURATIONS.choose(rng).unwrap();
        let melody = Melody::new(notes).expect("valid melody");
        if evaluate(&melody.to_string(), lyric, rules).compliant {
            return melody;
        }
    }
}

/// Applies one targeted perturbation so that exactly `rule` fails. Retries
/// with fresh randomness until that holds.
pub fn inject(
    rng: &mut impl Rng,
    melody: &Melody,
    lyric: &LyricLine,
    rule: RuleId,
    rules: &RuleConfig,
) -> String {
    loop {
        let mut notes = melody.notes().to_vec();
        let last = notes.len() - 1;
        let text = match rule {
            RuleId::Format => corrupt(rng, &melody.to_string()),
            RuleId::Register => {
                let i = rng.gen_range(0..notes.len());
                notes[i].pitch = if rng.gen_bool(0.5) {
                    rng.gen_range(48..rules.p_min)
                } else {
                    rng.gen_range(rules.p_max + 1..=96)
                };
                Melody::new(notes).unwrap().to_string()
            }
            RuleId::Duration => {
                let i = rng.gen_range(0..notes.len());
                notes[i].duration_ms = if i == last {
                    *[88, 177, 5657].choose(rng).unwrap()
                } else {
                    *[88, 2828, 5657].choose(rng).unwrap()
                };
                Melody::new(notes).unwrap().to_string()
            }
            RuleId::Note => {
                let p = notes[rng.gen_range(0..notes.len())].pitch;
                for n in &mut notes {
                    n.pitch = p;
                }
                Melody::new(notes).unwrap().to_string()
            }
            RuleId::Lyric => {
                // drop one syllable note together with its melismas
                let starts: Vec<usize> = (0..notes.len())
                    .filter(|&i| !notes[i].is_melisma())
                    .collect();
                let k = rng.gen_range(0..starts.len());
                let end = starts.get(k + 1).copied().unwrap_or(notes.len());
                notes.drain(starts[k]..end);
                if notes.is_empty() {
                    continue;
                }
                let n = notes.len();
                notes[n - 1].duration_ms = notes[n - 1].duration_ms.max(rules.d_final_min_ms);
                Melody::new(notes).unwrap().to_string()
            }
        };
        if evaluate(&text, lyric, rules).failed_rules() == [rule] {
            return text;
        }
    }
}

fn corrupt(rng: &mut impl Rng, text: &str) -> String {
    let events: Vec<&str> = text.split('|').collect();
    let i = rng.gen_range(0..events.len());
    let fields: Vec<&str> = events[i].split(',').collect();
    let bad = match rng.gen_range(0..4) {
        0 => format!("{},{}", fields[0], fields[1]),
        1 => format!("{},{}x,{}", fields[0], fields[1], fields[2]),
        2 => format!("{},{},-{}", fields[0], fields[1], fields[2]),
        _ => format!("{},{},{}", fields[0], 130 + rng.gen_range(0..50), fields[2]),
    };
    let mut out: Vec<String> = events.iter().map(|e| e.to_string()).collect();
    out[i] = bad;
    out.join("|")
}

/// Generates a corpus; the second vector records what was injected per line.
pub fn synth_corpus(
    cfg: &SynthConfig,
    rules: &RuleConfig,
) -> Result<(Vec<CorpusEntry>, Vec<Injection>), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.n);
    let mut injections = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let lyric = random_lyric(&mut rng, cfg);
        let melody = compliant_melody(&mut rng, &lyric, rules);
        let (text, injection) = if rng.gen_bool(cfg.violation_rate) {
            let rule = *RuleId::ALL.choose(&mut rng).unwrap();
            (
                inject(&mut rng, &melody, &lyric, rule, rules),
                Injection::Violation(rule),
            )
        } else {
            (melody.to_string(), Injection::None)
        };
        entries.push(CorpusEntry { lyric, text });
        injections.push(injection);
    }
    Ok((entries, injections))
}

pub fn corpus_to_string(entries: &[CorpusEntry], header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        writeln!(out, "# {line}").unwrap();
    }
    for e in entries {
        writeln!(out, "{}\t{}", e.lyric.text(), e.text).unwrap();
    }
    out
}

pub fn write_corpus(
    entries: &[CorpusEntry],
    header: &[String],
    path: impl AsRef<Path>,
) -> Result<(), SynthError> {
    fs::write(path, corpus_to_string(entries, header))?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>, SynthError> {
    corpus_from_str(&fs::read_to_string(path)?)
}

/// Parses corpus text. The language of each lyric is detected from its
/// characters. Melody texts are kept verbatim, valid or not.
pub fn corpus_from_str(text: &str) -> Result<Vec<CorpusEntry>, SynthError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (lyric, melody) = line.split_once('\t').ok_or_else(|| SynthError::Malformed {
            line: i + 1,
            reason: "expected `lyric<TAB>melody`".into(),
        })?;
        let lyric =
            split_lyric(lyric, Language::detect(lyric)).map_err(|e| SynthError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
        entries.push(CorpusEntry {
            lyric,
            text: melody.to_string(),
        });
    }
    Ok(entries)
}

/// Reads a prompt file: one lyric per line, or a corpus file whose melody
/// column is ignored.
pub fn prompts_from_str(text: &str) -> Result<Vec<LyricLine>, SynthError> {
    let mut prompts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let lyric = line.split('\t').next().unwrap_or("");
        prompts.push(split_lyric(lyric, Language::detect(lyric)).map_err(|e| {
            SynthError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            }
        })?);
    }
    Ok(prompts)
}

/// Token sequences for maximum-likelihood training. Lines that do not parse
/// or fall outside the vocabulary are skipped; their count is returned.
pub fn training_sequences(
    entries: &[CorpusEntry],
    vocab: &Vocabulary,
) -> (Vec<(PromptEncoding, Vec<TokenId>)>, usize) {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let Ok(melody) = parse_melody(&e.text) else {
            continue;
        };
        let x = PromptEncoding::new(&e.lyric, vocab);
        if let Ok(ids) = vocab.encode(&melody, x.prompt_id) {
            out.push((x, ids));
        }
    }
    let skipped = entries.len() - out.len();
    (out, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{VocabConfig, Vocabulary};

    fn cfg(n: usize, rate: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n,
            violation_rate: rate,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn rate_zero_is_all_compliant_and_rate_one_all_violating() {
        let rules = RuleConfig::default();
        let (entries, _) = synth_corpus(&cfg(300, 0.0, 1), &rules).unwrap();
        assert!(entries
            .iter()
            .all(|e| evaluate(&e.text, &e.lyric, &rules).compliant));
        let (entries, _) = synth_corpus(&cfg(300, 1.0, 2), &rules).unwrap();
        assert!(entries
            .iter()
            .all(|e| !evaluate(&e.text, &e.lyric, &rules).compliant));
    }

    #[test]
    fn observed_rate_within_three_sigma() {
        let rules = RuleConfig::default();
        let (entries, _) = synth_corpus(&cfg(1000, 0.1, 3), &rules).unwrap();
        let bad = entries
            .iter()
            .filter(|e| !evaluate(&e.text, &e.lyric, &rules).compliant)
            .count();
        let rate = bad as f64 / 1000.0;
        assert!((0.07..=0.13).contains(&rate), "{rate}");
    }

    #[test]
    fn each_violation_hits_exactly_its_rule() {
        let rules = RuleConfig::default();
        let (entries, injections) = synth_corpus(&cfg(500, 1.0, 4), &rules).unwrap();
        let mut seen = [0; 5];
        for (e, inj) in entries.iter().zip(&injections) {
            let Injection::Violation(rule) = inj else {
                panic!("rate 1 left a clean line")
            };
            assert_eq!(evaluate(&e.text, &e.lyric, &rules).failed_rules(), [*rule]);
            seen[rule.index()] += 1;
        }
        assert!(seen.iter().all(|&c| c > 60), "{seen:?}");
    }

    #[test]
    fn parsable_lines_tokenize_losslessly() {
        let rules = RuleConfig::default();
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        let (entries, _) = synth_corpus(&cfg(400, 0.5, 5), &rules).unwrap();
        for e in &entries {
            // decoding reads syllables off the lyric, so only lyric-faithful lines come back verbatim
            let Ok(m) = crate::melody::parse_melody(&e.text) else {
                continue;
            };
            if crate::rules::check_lyric(&m, &e.lyric) == crate::rules::Verdict::Pass {
                let ids = vocab.encode(&m, 0).unwrap();
                assert_eq!(vocab.decode(&ids, &e.lyric), e.text);
            }
        }
    }

    #[test]
    fn deterministic_and_round_trips_through_files() {
        let rules = RuleConfig::default();
        let (a, _) = synth_corpus(&cfg(200, 0.3, 6), &rules).unwrap();
        let (b, _) = synth_corpus(&cfg(200, 0.3, 6), &rules).unwrap();
        assert_eq!(a, b);
        let text = corpus_to_string(&a, &["seed 6".into()]);
        assert_eq!(corpus_from_str(&text).unwrap(), a);
        assert_eq!(
            prompts_from_str(&text).unwrap(),
            a.iter().map(|e| e.lyric.clone()).collect::<Vec<_>>()
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        write_corpus(&a, &[], &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), a);
    }

    #[test]
    fn training_sequences_skip_unparsable_lines() {
        let rules = RuleConfig::default();
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        let (entries, injections) = synth_corpus(&cfg(300, 0.5, 7), &rules).unwrap();
        let (seqs, skipped) = training_sequences(&entries, &vocab);
        let corrupted = injections
            .iter()
            .filter(|i| **i == Injection::Violation(RuleId::Format))
            .count();
        assert_eq!(skipped, corrupted);
        assert_eq!(seqs.len() + skipped, entries.len());
    }

    #[test]
    fn config_validation_and_malformed_lines() {
        assert!(cfg(0, 0.1, 0).validate().is_err());
        assert!(cfg(5, 1.5, 0).validate().is_err());
        assert!(SynthConfig {
            min_units: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(matches!(
            corpus_from_str("no tab here"),
            Err(SynthError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            corpus_from_str("# c\n!!!\tx"),
            Err(SynthError::Malformed { line: 2, .. })
        ));
    }
}
