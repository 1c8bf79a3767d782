//! Preference data construction from rule-checked policy samples.
//!
//! For every prompt the policy draws `k` candidates, each is checked against
//! the five rules and duplicates (same text) are dropped. Then:
//!
//! * at least one compliant and one violating candidate: one
//!   [`PreferencePair`]. The winner is the compliant candidate the policy
//!   likes most; the loser is the violating candidate with the most failed
//!   rules, then the lowest log-probability, then the lowest sample index.
//! * no compliant candidate: one [`UnpairedSample`] per distinct violating
//!   candidate.
//! * every candidate compliant: nothing.
//!
//! Candidate `i` of a prompt is sampled with a seed derived from the run
//! seed, the prompt text and `i`, so the first `k'` candidates of a `k` run
//! equal a `k'` run.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::melody::LyricLine;
use crate::policy::{Policy, PolicyError, PromptEncoding};
use crate::rules::{evaluate, RuleConfig, RuleId, RuleReport};
use crate::vocab::{TokenId, VocabConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrefError {
    #[error("k must be at least 2, got {0}")]
    TooFewCandidates(usize),
    #[error("no prompts given")]
    NoPrompts,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("dataset inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            k: 8,
            temperature: 1.0,
            max_len: 96,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub lyric: LyricLine,
    pub encoding: PromptEncoding,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub winner: Response,
    pub loser: Response,
    pub loser_violations: Vec<RuleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnpairedSample {
    pub prompt: Prompt,
    pub undesirable: Response,
    pub violations: Vec<RuleId>,
}

/// How a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub generation: GenerationConfig,
    pub rules: RuleConfig,
    pub rules_digest: String,
    pub vocab: VocabConfig,
    pub prompts: usize,
    /// Free-form run information, such as the command that wrote the file.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub run: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub paired: Vec<PreferencePair>,
    pub unpaired: Vec<UnpairedSample>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub truncated: bool,
    pub log_prob: f64,
}

/// Seed for candidate `index` of the prompt `lyric`.
pub fn candidate_seed(seed: u64, lyric: &LyricLine, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(lyric.text().as_bytes());
    h.update([lyric.language() as u8]);
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub fn generate_candidates(
    policy: &Policy,
    lyric: &LyricLine,
    gen: &GenerationConfig,
) -> Result<Vec<Candidate>, PrefError> {
    if gen.k < 2 {
        return Err(PrefError::TooFewCandidates(gen.k));
    }
    let x = policy.encode_prompt(lyric);
    (0..gen.k)
        .map(|index| {
            let sample = policy.sample(
                &x,
                gen.temperature,
                gen.max_len,
                candidate_seed(gen.seed, lyric, index),
            )?;
            let log_prob = policy.log_prob(&x, &sample.tokens)?;
            Ok(Candidate {
                index,
                text: policy.vocab().decode(&sample.tokens, lyric),
                tokens: sample.tokens,
                truncated: sample.truncated,
                log_prob,
            })
        })
        .collect()
}

/// One sampled response per prompt, using the same seed derivation as
/// candidate 0 so different policies are compared on common randomness.
pub fn sample_responses(
    policy: &Policy,
    prompts: &[LyricLine],
    gen: &GenerationConfig,
) -> Result<Vec<Response>, PrefError> {
    prompts
        .par_iter()
        .map(|lyric| {
            let x = policy.encode_prompt(lyric);
            let sample = policy.sample(
                &x,
                gen.temperature,
                gen.max_len,
                candidate_seed(gen.seed, lyric, 0),
            )?;
            Ok(Response {
                text: policy.vocab().decode(&sample.tokens, lyric),
                tokens: sample.tokens,
            })
        })
        .collect()
}

/// What one prompt contributed.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptOutcome {
    Pair(PreferencePair),
    Unpaired(Vec<UnpairedSample>),
    AllCompliant,
}

/// Applies the pairing rule to already generated candidates.
pub fn select(prompt: &Prompt, candidates: &[Candidate], cfg: &RuleConfig) -> PromptOutcome {
    let mut seen = HashSet::new();
    let mut compliant: Vec<&Candidate> = Vec::new();
    let mut violating: Vec<(&Candidate, RuleReport)> = Vec::new();
    for c in candidates {
        if !seen.insert(c.text.as_str()) {
            continue;
        }
        let report = evaluate(&c.text, &prompt.lyric, cfg);
        if report.compliant {
            compliant.push(c);
        } else {
            violating.push((c, report));
        }
    }
    let response = |c: &Candidate| Response {
        tokens: c.tokens.clone(),
        text: c.text.clone(),
    };

    if violating.is_empty() {
        return PromptOutcome::AllCompliant;
    }
    if compliant.is_empty() {
        return PromptOutcome::Unpaired(
            violating
                .iter()
                .map(|(c, r)| UnpairedSample {
                    prompt: prompt.clone(),
                    undesirable: response(c),
                    violations: r.failed_rules(),
                })
                .collect(),
        );
    }
    let winner = compliant
        .iter()
        .copied()
        .reduce(|best, c| if c.log_prob > best.log_prob { c } else { best })
        .unwrap();
    let (loser, report) = violating
        .iter()
        .reduce(|best, cand| {
            let key =
                |(c, r): &(&Candidate, RuleReport)| (r.failed_rules().len(), c.log_prob, c.index);
            let (bf, bl, bi) = key(best);
            let (cf, cl, ci) = key(cand);
            let better = cf > bf || (cf == bf && (cl < bl || (cl == bl && ci < bi)));
            if better {
                cand
            } else {
                best
            }
        })
        .unwrap();
    PromptOutcome::Pair(PreferencePair {
        prompt: prompt.clone(),
        winner: response(winner),
        loser: response(loser),
        loser_violations: report.failed_rules(),
    })
}

pub fn build_dataset(
    policy: &Policy,
    prompts: &[LyricLine],
    cfg: &RuleConfig,
    gen: &GenerationConfig,
) -> Result<PreferenceDataset, PrefError> {
    if prompts.is_empty() {
        return Err(PrefError::NoPrompts);
    }
    if gen.k < 2 {
        return Err(PrefError::TooFewCandidates(gen.k));
    }
    let outcomes: Vec<PromptOutcome> = prompts
        .par_iter()
        .map(|lyric| {
            let prompt = Prompt {
                lyric: lyric.clone(),
                encoding: policy.encode_prompt(lyric),
            };
            let candidates = generate_candidates(policy, lyric, gen)?;
            Ok(select(&prompt, &candidates, cfg))
        })
        .collect::<Result<_, PrefError>>()?;

    let mut paired = Vec::new();
    let mut unpaired = Vec::new();
    for outcome in outcomes {
        match outcome {
            PromptOutcome::Pair(p) => paired.push(p),
            PromptOutcome::Unpaired(u) => unpaired.extend(u),
            PromptOutcome::AllCompliant => {}
        }
    }
    Ok(PreferenceDataset {
        paired,
        unpaired,
        provenance: Provenance {
            generation: gen.clone(),
            rules: cfg.clone(),
            rules_digest: cfg.digest(),
            vocab: policy.vocab().config().clone(),
            prompts: prompts.len(),
            run: Vec::new(),
        },
    })
}

impl PreferenceDataset {
    pub fn is_empty(&self) -> bool {
        self.paired.is_empty() && self.unpaired.is_empty()
    }

    /// Prompts that produced unpaired samples.
    pub fn unpaired_prompts(&self) -> usize {
        self.unpaired
            .iter()
            .map(|u| &u.prompt)
            .collect::<HashSet<_>>()
            .len()
    }

    /// Share of paired prompts among prompts that produced any record.
    pub fn paired_fraction(&self) -> Option<f64> {
        let emitting = self.paired.len() + self.unpaired_prompts();
        (emitting > 0).then(|| self.paired.len() as f64 / emitting as f64)
    }

    /// Re-checks every stored record and the provenance digest.
    pub fn validate(&self) -> Result<(), PrefError> {
        let cfg = &self.provenance.rules;
        if cfg.digest() != self.provenance.rules_digest {
            return Err(PrefError::Inconsistent(
                "rule config digest does not match".into(),
            ));
        }
        let paired_prompts: HashSet<&Prompt> = self.paired.iter().map(|p| &p.prompt).collect();
        for (i, p) in self.paired.iter().enumerate() {
            if !evaluate(&p.winner.text, &p.prompt.lyric, cfg).compliant {
                return Err(PrefError::Inconsistent(format!(
                    "pair {i}: winner violates the rules"
                )));
            }
            let loser = evaluate(&p.loser.text, &p.prompt.lyric, cfg);
            if loser.compliant {
                return Err(PrefError::Inconsistent(format!(
                    "pair {i}: loser is compliant"
                )));
            }
            if loser.failed_rules() != p.loser_violations {
                return Err(PrefError::Inconsistent(format!(
                    "pair {i}: recorded violations differ"
                )));
            }
            if p.winner == p.loser {
                return Err(PrefError::Inconsistent(format!(
                    "pair {i}: winner equals loser"
                )));
            }
        }
        for (i, u) in self.unpaired.iter().enumerate() {
            if paired_prompts.contains(&u.prompt) {
                return Err(PrefError::Inconsistent(format!(
                    "unpaired {i}: prompt also has a pair"
                )));
            }
            let report = evaluate(&u.undesirable.text, &u.prompt.lyric, cfg);
            if report.compliant || report.failed_rules() != u.violations {
                return Err(PrefError::Inconsistent(format!(
                    "unpaired {i}: verdict differs from record"
                )));
            }
        }
        Ok(())
    }
}
