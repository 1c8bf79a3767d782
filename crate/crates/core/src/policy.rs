//! Tabular autoregressive policy over the melody token vocabulary.
//!
//! The policy is a table of logits: one row per conditioning context, one
//! column per next token. With [`Conditioning::PrevToken`] the context is
//! the previous token alone (a plain bigram, `V x V`). With
//! [`Conditioning::LyricState`] the context is the previous token together
//! with whether lyric units remain to be sung (`2V x V`), which lets the
//! table learn when to stop and when to stop advancing through the lyric.
//! [`Conditioning::PitchContext`] additionally keys the pitch choice (the
//! token after an advance or melisma token) by the previous note's pitch,
//! so the table can learn melodic intervals instead of a pitch marginal.
//! The context of every transition is a deterministic function of the prompt
//! and the prefix, so log-probabilities and gradients stay exact.

use ndarray::{Array2, ArrayView1};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::melody::LyricLine;
use crate::optim::{Optimizer, OptimizerKind};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("token {id} at position {position} is outside the vocabulary (size {size})")]
    TokenOutOfVocab {
        position: usize,
        id: TokenId,
        size: usize,
    },
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("logit table has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("logit table contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    PrevToken,
    LyricState,
    #[default]
    PitchContext,
}

impl Conditioning {
    pub fn name(self) -> &'static str {
        match self {
            Conditioning::PrevToken => "prev-token",
            Conditioning::LyricState => "lyric-state",
            Conditioning::PitchContext => "pitch-context",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "prev-token" => Some(Conditioning::PrevToken),
            "lyric-state" => Some(Conditioning::LyricState),
            "pitch-context" => Some(Conditioning::PitchContext),
            _ => None,
        }
    }

    pub fn rows(self, vocab: &Vocabulary) -> usize {
        let v = vocab.len();
        match self {
            Conditioning::PrevToken => v,
            Conditioning::LyricState => 2 * v,
            // two note-start tokens x lyric flag x (previous pitch or none)
            Conditioning::PitchContext => 2 * v + 4 * (vocab.n_pitches() + 1),
        }
    }
}

/// What the policy sees of the input lyric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptEncoding {
    /// Begin-token variant, bucketed by lyric length.
    pub prompt_id: usize,
    pub lyric_units: usize,
}

impl PromptEncoding {
    pub fn new(lyric: &LyricLine, vocab: &Vocabulary) -> Self {
        Self {
            prompt_id: vocab.prompt_bucket(lyric.len()),
            lyric_units: lyric.len(),
        }
    }
}

/// Prefix state that, with the previous token, selects a table row.
#[derive(Debug, Clone, Copy, Default)]
struct Cursor {
    advanced: usize,
    last_pitch: Option<usize>,
}

/// Outcome of autoregressive sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    /// Generation hit `max_len` before emitting `End`.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            optimizer: OptimizerKind::default(),
        }
    }
}

pub fn log_softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

pub fn softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    vocab: Vocabulary,
    conditioning: Conditioning,
    theta: Array2<f64>,
}

impl Policy {
    /// All-zero logits: every next token equally likely.
    pub fn uniform(vocab: Vocabulary, conditioning: Conditioning) -> Self {
        let v = vocab.len();
        Self {
            theta: Array2::zeros((conditioning.rows(&vocab), v)),
            vocab,
            conditioning,
        }
    }

    pub fn from_logits(
        vocab: Vocabulary,
        conditioning: Conditioning,
        theta: Array2<f64>,
    ) -> Result<Self, PolicyError> {
        let expected = (conditioning.rows(&vocab), vocab.len());
        if theta.dim() != expected {
            return Err(PolicyError::ShapeMismatch {
                got: theta.dim(),
                expected,
            });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(Self {
            vocab,
            conditioning,
            theta,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut Array2<f64> {
        &mut self.theta
    }

    pub fn encode_prompt(&self, lyric: &LyricLine) -> PromptEncoding {
        PromptEncoding::new(lyric, &self.vocab)
    }

    fn row(&self, prev: TokenId, cursor: &Cursor, x: &PromptEncoding) -> usize {
        let v = self.vocab.len();
        let units_left = cursor.advanced < x.lyric_units;
        let flat = prev + if units_left { v } else { 0 };
        match self.conditioning {
            Conditioning::PrevToken => prev,
            Conditioning::LyricState => flat,
            Conditioning::PitchContext => {
                let melisma = prev == self.vocab.melisma();
                if !melisma && prev != self.vocab.advance() {
                    return flat;
                }
                let slots = self.vocab.n_pitches() + 1;
                let block = 2 * melisma as usize + units_left as usize;
                2 * v + block * slots + cursor.last_pitch.unwrap_or(slots - 1)
            }
        }
    }

    fn advance_cursor(&self, cursor: &mut Cursor, next: TokenId) {
        if next == self.vocab.advance() {
            cursor.advanced += 1;
        } else if let Some(i) = self.vocab.pitch_index(next) {
            cursor.last_pitch = Some(i);
        }
    }

    /// `(row, next)` for every transition of `y`.
    pub fn transitions(
        &self,
        x: &PromptEncoding,
        y: &[TokenId],
    ) -> Result<Vec<(usize, TokenId)>, PolicyError> {
        if y.is_empty() {
            return Err(PolicyError::EmptySequence);
        }
        let size = self.vocab.len();
        if let Some((position, &id)) = y.iter().enumerate().find(|(_, &id)| id >= size) {
            return Err(PolicyError::TokenOutOfVocab { position, id, size });
        }
        let mut cursor = Cursor::default();
        let mut out = Vec::with_capacity(y.len() - 1);
        for w in y.windows(2) {
            out.push((self.row(w[0], &cursor, x), w[1]));
            self.advance_cursor(&mut cursor, w[1]);
        }
        Ok(out)
    }

    /// `log pi(y | x)`, summed over the transitions of `y`.
    pub fn log_prob(&self, x: &PromptEncoding, y: &[TokenId]) -> Result<f64, PolicyError> {
        Ok(self
            .transitions(x, y)?
            .into_iter()
            .map(|(row, next)| log_softmax(self.theta.row(row))[next])
            .sum())
    }

    /// Gradient of [`Policy::log_prob`] with respect to the logit table.
    pub fn grad_log_prob(
        &self,
        x: &PromptEncoding,
        y: &[TokenId],
    ) -> Result<Array2<f64>, PolicyError> {
        let mut grad = Array2::zeros(self.theta.raw_dim());
        self.accumulate_grad(x, y, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// `grad += scale * d log pi(y|x) / d theta`; returns `log pi(y|x)`.
    pub fn accumulate_grad(
        &self,
        x: &PromptEncoding,
        y: &[TokenId],
        scale: f64,
        grad: &mut Array2<f64>,
    ) -> Result<f64, PolicyError> {
        let mut total = 0.0;
        for (row, next) in self.transitions(x, y)? {
            let log_probs = log_softmax(self.theta.row(row));
            total += log_probs[next];
            let mut g = grad.row_mut(row);
            for (gi, lp) in g.iter_mut().zip(&log_probs) {
                *gi -= scale * lp.exp();
            }
            g[next] += scale;
        }
        Ok(total)
    }

    pub fn sample(
        &self,
        x: &PromptEncoding,
        temperature: f64,
        max_len: usize,
        seed: u64,
    ) -> Result<Sample, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(x, temperature, max_len, &mut rng)
    }

    /// Samples up to `max_len` tokens after the begin token from the
    /// temperature-scaled softmax. Small temperatures approach greedy
    /// argmax decoding.
    pub fn sample_with<R: rand::Rng>(
        &self,
        x: &PromptEncoding,
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Sample, PolicyError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::InvalidTemperature(temperature));
        }
        let end = self.vocab.end();
        let mut tokens = vec![self.vocab.begin(x.prompt_id)];
        let mut cursor = Cursor::default();
        while tokens.len() <= max_len {
            let row = self
                .theta
                .row(self.row(*tokens.last().unwrap(), &cursor, x));
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = row
                .iter()
                .map(|&l| ((l - max) / temperature).exp())
                .collect();
            let next = WeightedIndex::new(&weights)
                .expect("argmax weight is 1")
                .sample(rng);
            tokens.push(next);
            self.advance_cursor(&mut cursor, next);
            if next == end {
                return Ok(Sample {
                    tokens,
                    truncated: false,
                });
            }
        }
        Ok(Sample {
            tokens,
            truncated: true,
        })
    }

    /// Argmax decoding.
    pub fn greedy(&self, x: &PromptEncoding, max_len: usize) -> Sample {
        let end = self.vocab.end();
        let mut tokens = vec![self.vocab.begin(x.prompt_id)];
        let mut cursor = Cursor::default();
        while tokens.len() <= max_len {
            let row = self
                .theta
                .row(self.row(*tokens.last().unwrap(), &cursor, x));
            let next = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &l)| {
                    if l > best.1 {
                        (i, l)
                    } else {
                        best
                    }
                })
                .0;
            tokens.push(next);
            self.advance_cursor(&mut cursor, next);
            if next == end {
                return Sample {
                    tokens,
                    truncated: false,
                };
            }
        }
        Sample {
            tokens,
            truncated: true,
        }
    }

    /// Mean log-likelihood of a corpus.
    pub fn corpus_log_likelihood(
        &self,
        corpus: &[(PromptEncoding, Vec<TokenId>)],
    ) -> Result<f64, PolicyError> {
        if corpus.is_empty() {
            return Err(PolicyError::EmptyCorpus);
        }
        let mut total = 0.0;
        for (x, y) in corpus {
            total += self.log_prob(x, y)?;
        }
        Ok(total / corpus.len() as f64)
    }

    /// Maximum-likelihood fit by full-batch gradient ascent on the mean
    /// corpus log-likelihood. Returns the trained copy and the mean
    /// log-likelihood after each epoch.
    pub fn train_mle(
        &self,
        corpus: &[(PromptEncoding, Vec<TokenId>)],
        cfg: &MleConfig,
    ) -> Result<(Policy, Vec<f64>), PolicyError> {
        if corpus.is_empty() {
            return Err(PolicyError::EmptyCorpus);
        }
        // The gradient depends on the corpus only through transition counts.
        let mut counts = Array2::<f64>::zeros(self.theta.raw_dim());
        for (x, y) in corpus {
            for (row, next) in self.transitions(x, y)? {
                counts[[row, next]] += 1.0;
            }
        }
        let n = corpus.len() as f64;
        let row_totals: Vec<f64> = counts.rows().into_iter().map(|r| r.sum()).collect();
        let visited: Vec<usize> = (0..row_totals.len())
            .filter(|&r| row_totals[r] > 0.0)
            .collect();

        let mut policy = self.clone();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut neg_grad = Array2::<f64>::zeros(self.theta.raw_dim());
        for _ in 0..cfg.epochs {
            for &r in &visited {
                let probs = softmax(policy.theta.row(r));
                let mut g = neg_grad.row_mut(r);
                for (c, (gi, p)) in g.iter_mut().zip(&probs).enumerate() {
                    *gi = -(counts[[r, c]] - row_totals[r] * p) / n;
                }
            }
            opt.step(&mut policy.theta, &neg_grad);
            let ll: f64 = visited
                .iter()
                .map(|&r| {
                    let lp = log_softmax(policy.theta.row(r));
                    counts
                        .row(r)
                        .iter()
                        .zip(&lp)
                        .filter(|(c, _)| **c > 0.0)
                        .map(|(c, l)| c * l)
                        .sum::<f64>()
                })
                .sum();
            history.push(ll / n);
        }
        Ok((policy, history))
    }
}
