//! Preference losses and the sequential DPO then KTO schedule.
//!
//! With `delta(y) = log pi_theta(y|x) - log pi_ref(y|x)`:
//!
//! ```text
//! dpo(x, y_w, y_l) = -log sigmoid(beta * (delta(y_w) - delta(y_l)))
//! kto(x, y_u)      = -log(1 - sigmoid(beta * delta(y_u)))
//! ```
//!
//! The KTO term is the undesirable branch only, without a KL reference
//! point, and is minimized: lowering `delta(y_u)` lowers the loss, so
//! training pushes probability away from rule-violating outputs.
//!
//! Training runs through [`AlignState`], whose phase is tracked in the type:
//! DPO must run before KTO.
//!
//! ```compile_fail
//! # use melodyalign::align::*;
//! # fn f(state: AlignState<Dpo>, cfg: &AlignConfig) {
//! // KTO is not available before DPO has run.
//! let _ = state.train_kto(&[], cfg);
//! # }
//! ```

use std::fmt;
use std::io::{self, Write};
use std::marker::PhantomData;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{Policy, PolicyError};
use crate::prefs::{PreferenceDataset, PreferencePair, UnpairedSample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("{0} phase has epochs to run but its dataset is empty")]
    EmptyDataset(Phase),
    #[error("invalid alignment config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub beta: f64,
    /// Overrides `beta` for the DPO phase.
    pub dpo_beta: Option<f64>,
    /// Overrides `beta` for the KTO phase.
    pub kto_beta: Option<f64>,
    pub lr: f64,
    pub dpo_epochs: usize,
    pub kto_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            dpo_beta: None,
            kto_beta: None,
            lr: 1e-2,
            dpo_epochs: 20,
            kto_epochs: 20,
            batch_size: 16,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        for (name, b) in [
            ("beta", Some(self.beta)),
            ("dpo_beta", self.dpo_beta),
            ("kto_beta", self.kto_beta),
        ] {
            if let Some(b) = b {
                if !(b > 0.0 && b.is_finite()) {
                    return Err(AlignError::Config(format!(
                        "{name} must be positive, got {b}"
                    )));
                }
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AlignError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(AlignError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn beta_for(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Dpo => self.dpo_beta.unwrap_or(self.beta),
            _ => self.kto_beta.unwrap_or(self.beta),
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// DPO loss and its derivative with respect to the margin
/// `delta_w - delta_l`.
pub fn dpo_scalar(margin: f64, beta: f64) -> (f64, f64) {
    (softplus(-beta * margin), -beta * sigmoid(-beta * margin))
}

/// Undesirable-branch KTO loss and its derivative with respect to `delta_u`.
pub fn kto_scalar(delta: f64, beta: f64) -> (f64, f64) {
    (softplus(beta * delta), beta * sigmoid(beta * delta))
}

pub fn dpo_loss(
    policy: &Policy,
    reference: &Policy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<(f64, Array2<f64>), PolicyError> {
    let x = &pair.prompt.encoding;
    let ref_w = reference.log_prob(x, &pair.winner.tokens)?;
    let ref_l = reference.log_prob(x, &pair.loser.tokens)?;
    let mut grad = Array2::zeros(policy.theta().raw_dim());
    let loss = dpo_accumulate(policy, pair, ref_w, ref_l, beta, 1.0, &mut grad)?;
    Ok((loss, grad))
}

pub fn kto_loss(
    policy: &Policy,
    reference: &Policy,
    sample: &UnpairedSample,
    beta: f64,
) -> Result<(f64, Array2<f64>), PolicyError> {
    let ref_u = reference.log_prob(&sample.prompt.encoding, &sample.undesirable.tokens)?;
    let mut grad = Array2::zeros(policy.theta().raw_dim());
    let loss = kto_accumulate(policy, sample, ref_u, beta, 1.0, &mut grad)?;
    Ok((loss, grad))
}

fn dpo_accumulate(
    policy: &Policy,
    pair: &PreferencePair,
    ref_w: f64,
    ref_l: f64,
    beta: f64,
    scale: f64,
    grad: &mut Array2<f64>,
) -> Result<f64, PolicyError> {
    let x = &pair.prompt.encoding;
    let margin = (policy.log_prob(x, &pair.winner.tokens)? - ref_w)
        - (policy.log_prob(x, &pair.loser.tokens)? - ref_l);
    let (loss, dmargin) = dpo_scalar(margin, beta);
    policy.accumulate_grad(x, &pair.winner.tokens, scale * dmargin, grad)?;
    policy.accumulate_grad(x, &pair.loser.tokens, -scale * dmargin, grad)?;
    Ok(loss)
}

fn kto_accumulate(
    policy: &Policy,
    sample: &UnpairedSample,
    ref_u: f64,
    beta: f64,
    scale: f64,
    grad: &mut Array2<f64>,
) -> Result<f64, PolicyError> {
    let x = &sample.prompt.encoding;
    let d = policy.log_prob(x, &sample.undesirable.tokens)? - ref_u;
    let (loss, dd) = kto_scalar(d, beta);
    policy.accumulate_grad(x, &sample.undesirable.tokens, scale * dd, grad)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dpo,
    Kto,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Dpo => "dpo",
            Phase::Kto => "kto",
            Phase::Done => "done",
        })
    }
}

/// Type-level phase markers for [`AlignState`].
#[derive(Debug)]
pub struct Dpo;
#[derive(Debug)]
pub struct Kto;
#[derive(Debug)]
pub struct Done;

pub trait PhaseMarker {
    const PHASE: Phase;
}
impl PhaseMarker for Dpo {
    const PHASE: Phase = Phase::Dpo;
}
impl PhaseMarker for Kto {
    const PHASE: Phase = Phase::Kto;
}
impl PhaseMarker for Done {
    const PHASE: Phase = Phase::Done;
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Policy under training plus the frozen reference it started from.
#[derive(Debug)]
pub struct AlignState<P> {
    policy: Policy,
    reference: Policy,
    history: Vec<StepRecord>,
    _phase: PhantomData<P>,
}

impl<P: PhaseMarker> AlignState<P> {
    pub fn phase(&self) -> Phase {
        P::PHASE
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn reference(&self) -> &Policy {
        &self.reference
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }

    fn advance<Q>(self) -> AlignState<Q> {
        AlignState {
            policy: self.policy,
            reference: self.reference,
            history: self.history,
            _phase: PhantomData,
        }
    }
}

impl AlignState<Dpo> {
    /// Freezes a copy of `policy` as the reference.
    pub fn new(policy: Policy) -> Self {
        Self {
            reference: policy.clone(),
            policy,
            history: Vec::new(),
            _phase: PhantomData,
        }
    }

    pub fn train_dpo(
        mut self,
        paired: &[PreferencePair],
        cfg: &AlignConfig,
    ) -> Result<AlignState<Kto>, AlignError> {
        cfg.validate()?;
        if cfg.dpo_epochs > 0 && paired.is_empty() {
            return Err(AlignError::EmptyDataset(Phase::Dpo));
        }
        let refs: Vec<(f64, f64)> = paired
            .iter()
            .map(|p| {
                let x = &p.prompt.encoding;
                Ok((
                    self.reference.log_prob(x, &p.winner.tokens)?,
                    self.reference.log_prob(x, &p.loser.tokens)?,
                ))
            })
            .collect::<Result<_, PolicyError>>()?;
        let beta = cfg.beta_for(Phase::Dpo);
        run_phase(
            &mut self.policy,
            &mut self.history,
            Phase::Dpo,
            cfg,
            cfg.dpo_epochs,
            paired.len(),
            |policy, i, scale, grad| {
                dpo_accumulate(policy, &paired[i], refs[i].0, refs[i].1, beta, scale, grad)
            },
        )?;
        Ok(self.advance())
    }
}

impl AlignState<Kto> {
    pub fn train_kto(
        mut self,
        unpaired: &[UnpairedSample],
        cfg: &AlignConfig,
    ) -> Result<AlignState<Done>, AlignError> {
        cfg.validate()?;
        if cfg.kto_epochs > 0 && unpaired.is_empty() {
            return Err(AlignError::EmptyDataset(Phase::Kto));
        }
        let refs: Vec<f64> = unpaired
            .iter()
            .map(|u| {
                self.reference
                    .log_prob(&u.prompt.encoding, &u.undesirable.tokens)
            })
            .collect::<Result<_, _>>()?;
        let beta = cfg.beta_for(Phase::Kto);
        run_phase(
            &mut self.policy,
            &mut self.history,
            Phase::Kto,
            cfg,
            cfg.kto_epochs,
            unpaired.len(),
            |policy, i, scale, grad| {
                kto_accumulate(policy, &unpaired[i], refs[i], beta, scale, grad)
            },
        )?;
        Ok(self.advance())
    }
}

impl AlignState<Done> {
    pub fn into_policy(self) -> Policy {
        self.policy
    }

    pub fn into_parts(self) -> (Policy, Vec<StepRecord>) {
        (self.policy, self.history)
    }
}

fn epoch_seed(seed: u64, phase: Phase, epoch: usize) -> u64 {
    seed ^ ((phase as u64 + 1) << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seeded mini-batch loop over `n` records, minimizing the mean loss.
fn run_phase<F>(
    policy: &mut Policy,
    history: &mut Vec<StepRecord>,
    phase: Phase,
    cfg: &AlignConfig,
    epochs: usize,
    n: usize,
    term: F,
) -> Result<(), PolicyError>
where
    F: Fn(&Policy, usize, f64, &mut Array2<f64>) -> Result<f64, PolicyError> + Sync,
{
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(
            cfg.seed, phase, epoch,
        )));
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let current: &Policy = policy;
            let parts: Vec<(f64, Array2<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Array2::zeros(current.theta().raw_dim());
                    let loss = term(current, i, scale, &mut g)?;
                    Ok((loss, g))
                })
                .collect::<Result<_, PolicyError>>()?;
            let mut grad = Array2::zeros(policy.theta().raw_dim());
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l * scale;
                grad += g;
            }
            opt.step(policy.theta_mut(), &grad);
            history.push(StepRecord {
                phase,
                step: history.len(),
                loss,
                grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            });
        }
    }
    Ok(())
}

/// Sequential alignment: DPO on the paired data, then KTO on the unpaired
/// data, against a reference frozen from `policy`.
pub fn align(
    policy: &Policy,
    ds: &PreferenceDataset,
    cfg: &AlignConfig,
) -> Result<(Policy, Vec<StepRecord>), AlignError> {
    let done = AlignState::new(policy.clone())
        .train_dpo(&ds.paired, cfg)?
        .train_kto(&ds.unpaired, cfg)?;
    Ok(done.into_parts())
}

/// Writes the step log as JSON lines after a header line.
pub fn write_training_log(
    records: &[StepRecord],
    header: &serde_json::Value,
    path: impl AsRef<Path>,
) -> io::Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for r in records {
        writeln!(
            out,
            "{}",
            serde_json::to_string(r).expect("records serialize")
        )?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::melody::{split_lyric, Language};
    use crate::optim::OptimizerKind;
    use crate::policy::{Conditioning, PromptEncoding};
    use crate::prefs::{Prompt, Response};
    use crate::rules::RuleId;
    use crate::vocab::TokenId;
    use crate::vocab::{VocabConfig, Vocabulary};
    use rand::Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabConfig {
            pitch_min: 60,
            pitch_max: 63,
            duration_edges: vec![250, 1000],
            prompt_edges: vec![2],
        })
        .unwrap()
    }

    fn random_policy(rng: &mut impl Rng) -> Policy {
        let v = vocab();
        let n = v.len();
        let theta = Array2::from_shape_fn((2 * n, n), |_| rng.gen_range(-1.5..1.5));
        Policy::from_logits(v, Conditioning::LyricState, theta).unwrap()
    }

    fn prompt() -> Prompt {
        let lyric = split_lyric("la di", Language::English).unwrap();
        Prompt {
            encoding: PromptEncoding {
                prompt_id: 1,
                lyric_units: 2,
            },
            lyric,
        }
    }

    fn random_tokens(rng: &mut impl Rng) -> Vec<TokenId> {
        let n = vocab().len();
        let len = rng.gen_range(3..10);
        std::iter::once(1)
            .chain((1..len).map(|_| rng.gen_range(0..n)))
            .collect()
    }

    fn response(tokens: Vec<TokenId>) -> Response {
        Response {
            text: format!("{tokens:?}"),
            tokens,
        }
    }

    fn random_pair(rng: &mut impl Rng) -> PreferencePair {
        PreferencePair {
            prompt: prompt(),
            winner: response(random_tokens(rng)),
            loser: response(random_tokens(rng)),
            loser_violations: vec![RuleId::Format],
        }
    }

    fn random_unpaired(rng: &mut impl Rng) -> UnpairedSample {
        UnpairedSample {
            prompt: prompt(),
            undesirable: response(random_tokens(rng)),
            violations: vec![RuleId::Note],
        }
    }

    #[test]
    fn sigmoid_identity_and_softplus_stability() {
        for &x in &[-800.0, -30.0, -1.0, -1e-9, 0.0, 0.3, 5.0, 40.0, 800.0] {
            assert!((1.0 - sigmoid(x) - sigmoid(-x)).abs() < 1e-15, "{x}");
            assert!(softplus(x).is_finite());
        }
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn scalar_examples() {
        // -ln(1 / (1 + e^-0.2))
        let expected = (1.0 + (-0.2f64).exp()).ln();
        assert!((expected - 0.598139).abs() < 1e-6);
        assert!((dpo_scalar(2.0, 0.1).0 - expected).abs() < 1e-15);
        assert!((kto_scalar(-2.0, 0.1).0 - expected).abs() < 1e-15);
        // the KTO term equals a DPO-style -ln sigmoid(-beta * delta)
        for &d in &[-7.0, -0.5, 0.0, 3.0] {
            assert!((kto_scalar(d, 0.1).0 - softplus(-(0.1 * -d))).abs() < 1e-15);
        }
    }

    #[test]
    fn losses_are_ln2_at_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_policy(&mut rng);
        for beta in [0.01, 0.1, 1.0] {
            let (l, _) = dpo_loss(&p, &p, &random_pair(&mut rng), beta).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-12);
            let (l, _) = kto_loss(&p, &p, &random_unpaired(&mut rng), beta).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn dpo_gradient_at_reference_is_half_beta_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_policy(&mut rng);
        let pair = random_pair(&mut rng);
        let (_, g) = dpo_loss(&p, &p, &pair, 0.1).unwrap();
        let gw = p
            .grad_log_prob(&pair.prompt.encoding, &pair.winner.tokens)
            .unwrap();
        let gl = p
            .grad_log_prob(&pair.prompt.encoding, &pair.loser.tokens)
            .unwrap();
        let expected = (gw - gl) * -0.05;
        assert!(g
            .iter()
            .zip(expected.iter())
            .all(|(a, b)| (a - b).abs() < 1e-14));
    }

    fn check_fd<F: Fn(&Policy) -> f64>(p: &Policy, analytic: &Array2<f64>, f: F) {
        let h = 1e-5;
        for ((r, c), &a) in analytic.indexed_iter() {
            let mut plus = p.clone();
            plus.theta_mut()[[r, c]] += h;
            let mut minus = p.clone();
            minus.theta_mut()[[r, c]] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let err = (fd - a).abs() / a.abs().max(fd.abs()).max(1.0);
            assert!(err < 1e-5, "({r},{c}) fd {fd} analytic {a}");
        }
    }

    #[test]
    fn dpo_and_kto_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let reference = random_policy(&mut rng);
            let p = random_policy(&mut rng);
            let beta = rng.gen_range(0.05..2.0);
            let pair = random_pair(&mut rng);
            let (_, g) = dpo_loss(&p, &reference, &pair, beta).unwrap();
            check_fd(&p, &g, |q| dpo_loss(q, &reference, &pair, beta).unwrap().0);
            let u = random_unpaired(&mut rng);
            let (_, g) = kto_loss(&p, &reference, &u, beta).unwrap();
            check_fd(&p, &g, |q| kto_loss(q, &reference, &u, beta).unwrap().0);
        }
    }

    #[test]
    fn losses_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (a, b) = (random_policy(&mut rng), random_policy(&mut rng));
            assert!(dpo_loss(&a, &b, &random_pair(&mut rng), 1.0).unwrap().0 > 0.0);
            assert!(kto_loss(&a, &b, &random_unpaired(&mut rng), 1.0).unwrap().0 > 0.0);
        }
    }

    #[test]
    fn one_kto_step_lowers_undesirable_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_policy(&mut rng);
        let u = random_unpaired(&mut rng);
        let cfg = AlignConfig {
            kto_epochs: 1,
            dpo_epochs: 0,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            ..Default::default()
        };
        let before = p
            .log_prob(&u.prompt.encoding, &u.undesirable.tokens)
            .unwrap();
        let done = AlignState::new(p)
            .train_dpo(&[], &cfg)
            .unwrap()
            .train_kto(std::slice::from_ref(&u), &cfg)
            .unwrap();
        assert_eq!(done.steps(), 1);
        let after = done
            .policy()
            .log_prob(&u.prompt.encoding, &u.undesirable.tokens)
            .unwrap();
        assert!(after < before);
    }

    fn single_pair() -> (Policy, PreferencePair) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_policy(&mut rng);
        let mut pair = random_pair(&mut rng);
        while pair.winner.tokens == pair.loser.tokens {
            pair = random_pair(&mut rng);
        }
        (p, pair)
    }

    #[test]
    fn dpo_on_one_pair_drives_loss_down_and_margin_up() {
        let (p, pair) = single_pair();
        let cfg = AlignConfig {
            dpo_epochs: 400,
            kto_epochs: 0,
            lr: 0.1,
            ..Default::default()
        };
        let x = pair.prompt.encoding;
        let margin = |q: &Policy| {
            q.log_prob(&x, &pair.winner.tokens).unwrap()
                - q.log_prob(&x, &pair.loser.tokens).unwrap()
        };
        let mut state = AlignState::new(p.clone());
        let mut margins = vec![margin(&p)];
        // epoch-by-epoch: re-enter with a fresh state seeded from the current policy
        for _ in 0..8 {
            let chunk = AlignConfig {
                dpo_epochs: 50,
                ..cfg.clone()
            };
            let reference = state.reference().clone();
            let next = AlignState {
                policy: state.policy().clone(),
                reference,
                history: vec![],
                _phase: PhantomData::<Dpo>,
            }
            .train_dpo(std::slice::from_ref(&pair), &chunk)
            .unwrap();
            margins.push(margin(next.policy()));
            state = AlignState {
                policy: next.policy().clone(),
                reference: next.reference().clone(),
                history: vec![],
                _phase: PhantomData,
            };
        }
        assert!(margins.windows(2).all(|w| w[1] > w[0]), "{margins:?}");
        let (loss, _) = dpo_loss(state.policy(), &p, &pair, cfg.beta).unwrap();
        assert!(loss < 0.1, "{loss}");
    }

    #[test]
    fn dpo_loss_non_increasing_with_small_sgd_steps() {
        let (p, pair) = single_pair();
        let cfg = AlignConfig {
            dpo_epochs: 200,
            kto_epochs: 0,
            lr: 0.05,
            optimizer: OptimizerKind::Sgd,
            ..Default::default()
        };
        let state = AlignState::new(p)
            .train_dpo(std::slice::from_ref(&pair), &cfg)
            .unwrap();
        let losses: Vec<f64> = state.history().iter().map(|r| r.loss).collect();
        assert_eq!(losses.len(), 200);
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert!((losses[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leave_policy_unchanged() {
        let (p, _) = single_pair();
        let cfg = AlignConfig {
            dpo_epochs: 0,
            kto_epochs: 0,
            ..Default::default()
        };
        let kto = AlignState::new(p.clone()).train_dpo(&[], &cfg).unwrap();
        assert_eq!(kto.phase(), Phase::Kto);
        assert_eq!(kto.policy(), &p);
        let done = kto.train_kto(&[], &cfg).unwrap();
        assert_eq!(done.phase(), Phase::Done);
        assert_eq!(done.into_policy(), p);
    }

    #[test]
    fn empty_data_with_epochs_is_an_error() {
        let (p, _) = single_pair();
        let cfg = AlignConfig::default();
        assert_eq!(
            AlignState::new(p.clone()).train_dpo(&[], &cfg).unwrap_err(),
            AlignError::EmptyDataset(Phase::Dpo)
        );
        let kto = AlignState::new(p)
            .train_dpo(
                &[],
                &AlignConfig {
                    dpo_epochs: 0,
                    ..cfg.clone()
                },
            )
            .unwrap();
        assert_eq!(
            kto.train_kto(&[], &cfg).unwrap_err(),
            AlignError::EmptyDataset(Phase::Kto)
        );
    }

    #[test]
    fn training_is_seed_deterministic_and_reference_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_policy(&mut rng);
        let paired: Vec<_> = (0..10).map(|_| random_pair(&mut rng)).collect();
        let unpaired: Vec<_> = (0..6).map(|_| random_unpaired(&mut rng)).collect();
        let cfg = AlignConfig {
            dpo_epochs: 5,
            kto_epochs: 5,
            batch_size: 3,
            ..Default::default()
        };
        let run = || {
            let kto = AlignState::new(p.clone()).train_dpo(&paired, &cfg).unwrap();
            assert_eq!(kto.reference(), &p);
            let done = kto.train_kto(&unpaired, &cfg).unwrap();
            assert_eq!(done.reference(), &p);
            done.into_parts()
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.len(), 5 * 4 + 5 * 2);
        assert!(ha[..20].iter().all(|r| r.phase == Phase::Dpo));
        assert!(ha[20..].iter().all(|r| r.phase == Phase::Kto));
    }

    #[test]
    fn kto_lowers_every_undesirable_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_policy(&mut rng);
        let unpaired: Vec<_> = (0..5).map(|_| random_unpaired(&mut rng)).collect();
        let cfg = AlignConfig {
            dpo_epochs: 0,
            kto_epochs: 30,
            batch_size: 2,
            ..Default::default()
        };
        let done = AlignState::new(p.clone())
            .train_dpo(&[], &cfg)
            .unwrap()
            .train_kto(&unpaired, &cfg)
            .unwrap();
        for u in &unpaired {
            let x = &u.prompt.encoding;
            let before = p.log_prob(x, &u.undesirable.tokens).unwrap();
            let after = done.policy().log_prob(x, &u.undesirable.tokens).unwrap();
            assert!(after <= before + 1e-6, "{before} -> {after}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(AlignConfig::default().validate().is_ok());
        assert!(AlignConfig {
            beta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AlignConfig {
            kto_beta: Some(-1.0),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AlignConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AlignConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let cfg = AlignConfig {
            kto_beta: Some(0.5),
            ..Default::default()
        };
        assert_eq!(cfg.beta_for(Phase::Dpo), 0.1);
        assert_eq!(cfg.beta_for(Phase::Kto), 0.5);
    }
}
