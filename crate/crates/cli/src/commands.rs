//! One function per verb. Each reads its inputs, calls into the library and
//! writes one output file that starts with the provenance header.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use melodyalign::align::{align, write_training_log, Phase};
use melodyalign::checkpoint;
use melodyalign::dataset::{read_dataset, write_dataset};
use melodyalign::metrics::{evaluate_set, violation_report};
use melodyalign::policy::Policy;
use melodyalign::prefs::{build_dataset, sample_responses};
use melodyalign::rules::RuleId;
use melodyalign::synth::{
    corpus_from_str, prompts_from_str, synth_corpus, synth_prompts, training_sequences, Injection,
};
use melodyalign::vocab::Vocabulary;
use melodyalign::{parse_melody, LyricLine, Melody};
use serde_json::{json, Value};

use crate::args::{CheckArgs, Cli, Command, EvalArgs, ReportArgs, SynthArgs};
use crate::config::AppConfig;

/// `melodyalign <version> <verb> seed=<seed> config=<digest>`
pub fn provenance(cli: &Cli, cfg: &AppConfig) -> String {
    let verb = match &cli.command {
        Command::SynthCorpus(_) => "synth-corpus",
        Command::TrainMle(_) => "train-mle",
        Command::GenPrefs(_) => "gen-prefs",
        Command::Align(_) => "align",
        Command::Check(_) => "check",
        Command::Eval(_) => "eval",
        Command::Report(_) => "report",
    };
    let seed = cli
        .stage_seed(cfg)
        .map_or_else(|| "none".to_string(), |s| s.to_string());
    format!(
        "melodyalign {} {verb} seed={seed} config={}",
        env!("CARGO_PKG_VERSION"),
        cfg.digest()
    )
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    let header = provenance(cli, &cfg);
    match &cli.command {
        Command::SynthCorpus(a) => synth(a, &cfg, &header),
        Command::TrainMle(_) => train_mle(&cfg, &header),
        Command::GenPrefs(_) => gen_prefs(&cfg, &header),
        Command::Align(_) => run_align(&cfg, &header),
        Command::Check(a) => check(a, &cfg, &header),
        Command::Eval(a) => eval(a, &cfg, &header),
        Command::Report(a) => report(a, &cfg, &header),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("missing input {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write(path, &format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn show(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn load_policy(path: &Path) -> Result<Policy> {
    read(path)?;
    checkpoint::read(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth(a: &SynthArgs, cfg: &AppConfig, header: &str) -> Result<()> {
    let s = &cfg.synth;
    if a.prompts_only {
        let prompts = synth_prompts(s.n, s);
        let mut out = format!("# {header}\n");
        for p in &prompts {
            out.push_str(&p.text());
            out.push('\n');
        }
        write(&cfg.paths.prompts, &out)?;
        println!(
            "wrote {} prompts to {}",
            prompts.len(),
            cfg.paths.prompts.display()
        );
        return Ok(());
    }
    let (entries, injections) = synth_corpus(s, &cfg.rules)?;
    let violating = injections.iter().filter(|i| **i != Injection::None).count();
    let lines = [
        header.to_string(),
        format!(
            "n={} violating={violating} violation_rate={}",
            s.n, s.violation_rate
        ),
    ];
    let text = melodyalign::synth::corpus_to_string(&entries, &lines);
    write(&cfg.paths.corpus, &text)?;
    println!(
        "wrote {} lines ({violating} violating) to {}",
        entries.len(),
        cfg.paths.corpus.display()
    );
    Ok(())
}

fn train_mle(cfg: &AppConfig, header: &str) -> Result<()> {
    let entries = corpus_from_str(&read(&cfg.paths.corpus)?)?;
    let vocab = Vocabulary::new(cfg.vocab.clone())?;
    let (seqs, skipped) = training_sequences(&entries, &vocab);
    let (policy, history) = Policy::uniform(vocab, cfg.conditioning).train_mle(&seqs, &cfg.mle)?;
    let last = history.last().copied().unwrap_or(f64::NAN);
    let lines = [
        header.to_string(),
        format!(
            "trained on {} lines, skipped {skipped}, mean log-likelihood {last:.6}",
            seqs.len()
        ),
    ];
    ensure_parent(&cfg.paths.sft)?;
    checkpoint::write(&policy, &lines, &cfg.paths.sft)?;
    println!(
        "{} ({} epochs) -> {}",
        lines[1],
        history.len(),
        cfg.paths.sft.display()
    );
    Ok(())
}

fn gen_prefs(cfg: &AppConfig, header: &str) -> Result<()> {
    let policy = load_policy(&cfg.paths.sft)?;
    let prompts = prompts_from_str(&read(&cfg.paths.prompts)?)?;
    let mut ds = build_dataset(&policy, &prompts, &cfg.rules, &cfg.generation)?;
    ds.provenance.run.push(header.to_string());
    ensure_parent(&cfg.paths.dataset)?;
    write_dataset(&ds, &cfg.paths.dataset)?;
    let fraction = show(ds.paired_fraction());
    println!(
        "{} pairs, {} unpaired samples from {} prompts (paired fraction {fraction}) -> {}",
        ds.paired.len(),
        ds.unpaired.len(),
        ds.unpaired_prompts(),
        cfg.paths.dataset.display()
    );
    Ok(())
}

fn run_align(cfg: &AppConfig, header: &str) -> Result<()> {
    let policy = load_policy(&cfg.paths.sft)?;
    read(&cfg.paths.dataset)?;
    let ds = read_dataset(&cfg.paths.dataset)
        .with_context(|| format!("loading {}", cfg.paths.dataset.display()))?;
    ds.validate()?;
    let (aligned, history) = align(&policy, &ds, &cfg.align)?;
    let last = |phase| {
        history
            .iter()
            .rev()
            .find(|r| r.phase == phase)
            .map(|r| r.loss)
    };
    let summary = format!(
        "{} pairs, {} unpaired, {} steps, final dpo loss {}, final kto loss {}",
        ds.paired.len(),
        ds.unpaired.len(),
        history.len(),
        show(last(Phase::Dpo)),
        show(last(Phase::Kto))
    );
    ensure_parent(&cfg.paths.aligned)?;
    checkpoint::write(
        &aligned,
        &[header.to_string(), summary.clone()],
        &cfg.paths.aligned,
    )?;
    ensure_parent(&cfg.paths.align_log)?;
    write_training_log(
        &history,
        &json!({ "provenance": header }),
        &cfg.paths.align_log,
    )?;
    println!("{summary} -> {}", cfg.paths.aligned.display());
    Ok(())
}

/// Either melody texts from a corpus file, or one sample per prompt.
fn texts_and_lyrics(
    texts: Option<&Path>,
    prompts: &Path,
    cfg: &AppConfig,
) -> Result<(Vec<String>, Vec<LyricLine>)> {
    if let Some(path) = texts {
        let entries = corpus_from_str(&read(path)?)?;
        return Ok(entries.into_iter().map(|e| (e.text, e.lyric)).unzip());
    }
    let policy = load_policy(&cfg.paths.aligned)?;
    let lyrics = prompts_from_str(&read(prompts)?)?;
    let responses = sample_responses(&policy, &lyrics, &cfg.generation)?;
    Ok((responses.into_iter().map(|r| r.text).collect(), lyrics))
}

fn check(a: &CheckArgs, cfg: &AppConfig, header: &str) -> Result<()> {
    let (texts, lyrics) = texts_and_lyrics(a.texts.as_deref(), &cfg.paths.heldout, cfg)?;
    let rep = violation_report(&texts, &lyrics, &cfg.rules)?;
    write_json(
        &cfg.paths.check_report,
        &json!({ "provenance": header, "violations": rep.to_json() }),
    )?;
    if a.csv.is_some() {
        write(&cfg.paths.table, &format!("# {header}\n{}", rep.to_csv()))?;
    }
    println!(
        "{} of {} compliant, {} violations -> {}",
        rep.compliant,
        rep.total,
        rep.total_violations(),
        cfg.paths.check_report.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs, cfg: &AppConfig, header: &str) -> Result<()> {
    let entries = corpus_from_str(&read(&cfg.paths.heldout)?)?;
    let refs: Vec<Melody> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            parse_melody(&e.text).with_context(|| format!("reference {} does not parse", i + 1))
        })
        .collect::<Result<_>>()?;
    let (gens, lyrics) = match &a.texts {
        Some(path) => {
            let gens = corpus_from_str(&read(path)?)?;
            if gens.len() != refs.len() {
                bail!("{} generations for {} references", gens.len(), refs.len());
            }
            (
                gens.into_iter().map(|e| e.text).collect::<Vec<_>>(),
                entries.iter().map(|e| e.lyric.clone()).collect::<Vec<_>>(),
            )
        }
        None => texts_and_lyrics(None, &cfg.paths.heldout, cfg)?,
    };
    let metrics = evaluate_set(&gens, &refs, &cfg.metrics)?;
    let rep = violation_report(&gens, &lyrics, &cfg.rules)?;
    write_json(
        &cfg.paths.eval_report,
        &json!({ "provenance": header, "metrics": metrics, "violations": rep.to_json() }),
    )?;
    println!(
        "PD {} DD {} MD {} over {} melodies ({} skipped) -> {}",
        show(metrics.pd),
        show(metrics.dd),
        show(metrics.md),
        metrics.n_evaluated,
        metrics.n_skipped,
        cfg.paths.eval_report.display()
    );
    Ok(())
}

fn report(a: &ReportArgs, cfg: &AppConfig, header: &str) -> Result<()> {
    let mut out = format!("# {header}\nlabel,rule,count,rate\n");
    for input in &a.inputs {
        let (label, path) = match input.split_once('=') {
            Some((label, path)) => (label.to_string(), Path::new(path)),
            None => {
                let path = Path::new(input.as_str());
                (
                    path.file_stem()
                        .map_or_else(|| input.clone(), |s| s.to_string_lossy().into_owned()),
                    path,
                )
            }
        };
        let value: Value = serde_json::from_str(&read(path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        let rules = value
            .pointer("/violations/rules")
            .with_context(|| format!("{} is not a check or eval report", path.display()))?;
        for rule in RuleId::ALL {
            let entry = &rules[rule.name()];
            let (Some(count), Some(rate)) = (entry["count"].as_u64(), entry["rate"].as_f64())
            else {
                bail!("{}: no numbers for rule {}", path.display(), rule.name());
            };
            out.push_str(&format!("{label},{},{count},{rate}\n", rule.name()));
        }
    }
    write(&cfg.paths.table, &out)?;
    println!(
        "wrote {} reports to {}",
        a.inputs.len(),
        cfg.paths.table.display()
    );
    Ok(())
}
