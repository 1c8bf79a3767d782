//! Library-level pipeline checks on synthetic data: corpus, MLE, preference
//! data and alignment.

use std::collections::HashSet;

use melodyalign::align::{AlignConfig, AlignState};
use melodyalign::optim::OptimizerKind;
use melodyalign::policy::{Conditioning, MleConfig, Policy};
use melodyalign::prefs::{build_dataset, GenerationConfig, PreferenceDataset};
use melodyalign::rules::{evaluate, RuleConfig};
use melodyalign::synth::{synth_corpus, synth_prompts, training_sequences, SynthConfig};
use melodyalign::vocab::{VocabConfig, Vocabulary};

fn sft(violation_rate: f64, seed: u64) -> Policy {
    let rules = RuleConfig::default();
    let (corpus, _) = synth_corpus(
        &SynthConfig {
            n: 2000,
            violation_rate,
            seed,
            ..Default::default()
        },
        &rules,
    )
    .unwrap();
    let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
    let (seqs, _) = training_sequences(&corpus, &vocab);
    let (policy, history) = Policy::uniform(vocab, Conditioning::default())
        .train_mle(&seqs, &MleConfig::default())
        .unwrap();
    assert!(history.last().unwrap() > &history[0]);
    policy
}

fn dataset(policy: &Policy, n: usize, seed: u64) -> PreferenceDataset {
    let prompts = synth_prompts(
        n,
        &SynthConfig {
            seed,
            ..Default::default()
        },
    );
    build_dataset(
        policy,
        &prompts,
        &RuleConfig::default(),
        &GenerationConfig::default(),
    )
    .unwrap()
}

#[test]
fn calibrated_split_is_mostly_paired() {
    let ds = dataset(&sft(0.1, 11), 500, 12);
    let fraction = ds.paired_fraction().unwrap();
    assert!(
        (0.8..=0.97).contains(&fraction),
        "paired fraction {fraction}"
    );
}

#[test]
fn dataset_partition_and_self_consistency() {
    let ds = dataset(&sft(0.3, 21), 500, 22);
    assert!(!ds.paired.is_empty() && !ds.unpaired.is_empty());
    ds.validate().unwrap();
    let rules = RuleConfig::default();
    let paired: HashSet<_> = ds.paired.iter().map(|p| &p.prompt).collect();
    assert!(ds.unpaired.iter().all(|u| !paired.contains(&u.prompt)));
    for p in &ds.paired {
        assert!(evaluate(&p.winner.text, &p.prompt.lyric, &rules).compliant);
        assert!(!evaluate(&p.loser.text, &p.prompt.lyric, &rules).compliant);
    }
    for u in &ds.unpaired {
        assert!(!evaluate(&u.undesirable.text, &u.prompt.lyric, &rules).compliant);
    }
}

fn pipeline_align() -> AlignConfig {
    AlignConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 3.0,
        kto_beta: Some(0.01),
        dpo_epochs: 20,
        kto_epochs: 10,
        ..Default::default()
    }
}

#[test]
fn sequential_alignment_keeps_pair_order_and_lowers_undesirable_samples() {
    let policy = sft(0.3, 31);
    let ds = dataset(&policy, 1000, 32);
    let cfg = pipeline_align();
    let kto = AlignState::new(policy.clone())
        .train_dpo(&ds.paired, &cfg)
        .unwrap();
    let before: Vec<f64> = ds
        .unpaired
        .iter()
        .map(|u| {
            kto.policy()
                .log_prob(&u.prompt.encoding, &u.undesirable.tokens)
                .unwrap()
        })
        .collect();
    let done = kto.train_kto(&ds.unpaired, &cfg).unwrap();
    assert_eq!(done.reference(), &policy);
    let aligned = done.policy();

    // Samples share transitions, so pushing one down can lift a sibling. The
    // aggregate must fall and lifted samples must stay rare.
    let after: Vec<f64> = ds
        .unpaired
        .iter()
        .map(|u| {
            aligned
                .log_prob(&u.prompt.encoding, &u.undesirable.tokens)
                .unwrap()
        })
        .collect();
    let raised = after
        .iter()
        .zip(&before)
        .filter(|(a, b)| **a > **b + 1e-6)
        .count();
    assert!(
        raised * 100 <= ds.unpaired.len(),
        "{raised} of {} undesirable samples gained probability",
        ds.unpaired.len()
    );
    assert!(after.iter().sum::<f64>() < before.iter().sum::<f64>());

    let ordered = ds
        .paired
        .iter()
        .filter(|p| {
            let x = &p.prompt.encoding;
            aligned.log_prob(x, &p.winner.tokens).unwrap()
                > aligned.log_prob(x, &p.loser.tokens).unwrap()
        })
        .count();
    let share = ordered as f64 / ds.paired.len() as f64;
    assert!(share >= 0.95, "winners ahead on {share:.3} of pairs");
}
