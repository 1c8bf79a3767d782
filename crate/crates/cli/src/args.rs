//! Command-line arguments and their merge into [`AppConfig`].
//!
//! A flag beats the config file, which beats the built-in default.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use melodyalign::metrics::HistogramMode;
use melodyalign::optim::OptimizerKind;
use melodyalign::policy::Conditioning;

use crate::config::AppConfig;

#[derive(Debug, Parser)]
#[command(
    name = "melodyalign",
    version,
    about = "Rule-checked preference alignment for lyric-to-melody generation"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the stage this verb runs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file of this verb.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub rules: RuleArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct RuleArgs {
    /// Largest allowed share of repeated adjacent pitches.
    #[arg(long, global = true)]
    pub tau_note: Option<f64>,
    /// Shortest allowed non-final note (ms).
    #[arg(long, global = true)]
    pub d_min_ms: Option<u32>,
    /// Longest allowed non-final note (ms).
    #[arg(long, global = true)]
    pub d_max_ms: Option<u32>,
    /// Shortest allowed final note (ms).
    #[arg(long, global = true)]
    pub d_final_min_ms: Option<u32>,
    /// Longest allowed final note (ms).
    #[arg(long, global = true)]
    pub d_final_max_ms: Option<u32>,
    /// Lowest allowed MIDI pitch.
    #[arg(long, global = true)]
    pub p_min: Option<u8>,
    /// Highest allowed MIDI pitch.
    #[arg(long, global = true)]
    pub p_max: Option<u8>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic lyric/melody corpus, or a prompt list.
    SynthCorpus(SynthArgs),
    /// Fit the tabular policy to a corpus by maximum likelihood.
    TrainMle(TrainArgs),
    /// Sample candidates, rule-check them and write a preference dataset.
    GenPrefs(GenPrefsArgs),
    /// Run DPO on the pairs, then KTO on the unpaired samples.
    Align(AlignArgs),
    /// Count rule violations of melody texts or of a policy's samples.
    Check(CheckArgs),
    /// Compare generations with reference melodies.
    Eval(EvalArgs),
    /// Turn check or eval reports into one CSV table.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub violation_rate: Option<f64>,
    #[arg(long)]
    pub chinese_fraction: Option<f64>,
    #[arg(long)]
    pub min_units: Option<usize>,
    #[arg(long)]
    pub max_units: Option<usize>,
    /// Write lyrics only, one per line.
    #[arg(long)]
    pub prompts_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

impl OptimizerArg {
    /// Keeps configured Adam moments when the kind does not change.
    fn apply(self, current: OptimizerKind) -> OptimizerKind {
        match (self, current) {
            (OptimizerArg::Sgd, _) => OptimizerKind::Sgd,
            (OptimizerArg::Adam, adam @ OptimizerKind::Adam { .. }) => adam,
            (OptimizerArg::Adam, OptimizerKind::Sgd) => OptimizerKind::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConditioningArg {
    PrevToken,
    LyricState,
    PitchContext,
}

impl From<ConditioningArg> for Conditioning {
    fn from(c: ConditioningArg) -> Self {
        match c {
            ConditioningArg::PrevToken => Conditioning::PrevToken,
            ConditioningArg::LyricState => Conditioning::LyricState,
            ConditioningArg::PitchContext => Conditioning::PitchContext,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    pub conditioning: Option<ConditioningArg>,
}

#[derive(Debug, Args, Default)]
pub struct GenerationArgs {
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct GenPrefsArgs {
    /// Checkpoint to sample from.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub generation: GenerationArgs,
}

#[derive(Debug, Args, Default)]
pub struct AlignArgs {
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Where to write the per-step loss log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub dpo_beta: Option<f64>,
    #[arg(long)]
    pub kto_beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dpo_epochs: Option<usize>,
    #[arg(long)]
    pub kto_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
}

#[derive(Debug, Args, Default)]
pub struct CheckArgs {
    /// Corpus-format file of melodies to check. Takes precedence over
    /// sampling from `--policy`.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Also write the per-rule table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub generation: GenerationArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Pooled,
    PerPair,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    /// Corpus-format file of reference melodies; its lyrics are the prompts.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Corpus-format file of generations, index-aligned with the references.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub generation: GenerationArgs,
}

#[derive(Debug, Args, Default)]
pub struct ReportArgs {
    /// Report files, each optionally prefixed with `label=`.
    #[arg(required = true)]
    pub inputs: Vec<String>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl Cli {
    /// Loads the config file, if any, and applies every flag on top.
    pub fn resolve(&self) -> Result<AppConfig> {
        let base = match &self.config {
            Some(path) => AppConfig::load(path)?,
            None => AppConfig::default(),
        };
        let cfg = self.apply(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&self, mut cfg: AppConfig) -> AppConfig {
        let r = &self.rules;
        set(&mut cfg.rules.tau_note, r.tau_note);
        set(&mut cfg.rules.d_min_ms, r.d_min_ms);
        set(&mut cfg.rules.d_max_ms, r.d_max_ms);
        set(&mut cfg.rules.d_final_min_ms, r.d_final_min_ms);
        set(&mut cfg.rules.d_final_max_ms, r.d_final_max_ms);
        set(&mut cfg.rules.p_min, r.p_min);
        set(&mut cfg.rules.p_max, r.p_max);

        let generation = |cfg: &mut AppConfig, g: &GenerationArgs| {
            set(&mut cfg.generation.temperature, g.temperature);
            set(&mut cfg.generation.max_len, g.max_len);
            set(&mut cfg.generation.seed, self.seed);
        };
        match &self.command {
            Command::SynthCorpus(a) => {
                set(&mut cfg.synth.n, a.n);
                set(&mut cfg.synth.violation_rate, a.violation_rate);
                set(&mut cfg.synth.chinese_fraction, a.chinese_fraction);
                set(&mut cfg.synth.min_units, a.min_units);
                set(&mut cfg.synth.max_units, a.max_units);
                set(&mut cfg.synth.seed, self.seed);
                let out = if a.prompts_only {
                    &mut cfg.paths.prompts
                } else {
                    &mut cfg.paths.corpus
                };
                set(out, self.out.clone());
            }
            Command::TrainMle(a) => {
                set(&mut cfg.paths.corpus, a.corpus.clone());
                set(&mut cfg.mle.epochs, a.epochs);
                set(&mut cfg.mle.lr, a.lr);
                let optimizer = a.optimizer.map(|o| o.apply(cfg.mle.optimizer));
                set(&mut cfg.mle.optimizer, optimizer);
                set(&mut cfg.conditioning, a.conditioning.map(Into::into));
                set(&mut cfg.paths.sft, self.out.clone());
            }
            Command::GenPrefs(a) => {
                set(&mut cfg.paths.sft, a.policy.clone());
                set(&mut cfg.paths.prompts, a.prompts.clone());
                set(&mut cfg.generation.k, a.k);
                generation(&mut cfg, &a.generation);
                set(&mut cfg.paths.dataset, self.out.clone());
            }
            Command::Align(a) => {
                set(&mut cfg.paths.sft, a.policy.clone());
                set(&mut cfg.paths.dataset, a.dataset.clone());
                set(&mut cfg.paths.align_log, a.log.clone());
                set(&mut cfg.align.beta, a.beta);
                set(&mut cfg.align.dpo_beta, a.dpo_beta.map(Some));
                set(&mut cfg.align.kto_beta, a.kto_beta.map(Some));
                set(&mut cfg.align.lr, a.lr);
                set(&mut cfg.align.dpo_epochs, a.dpo_epochs);
                set(&mut cfg.align.kto_epochs, a.kto_epochs);
                set(&mut cfg.align.batch_size, a.batch_size);
                let optimizer = a.optimizer.map(|o| o.apply(cfg.align.optimizer));
                set(&mut cfg.align.optimizer, optimizer);
                set(&mut cfg.align.seed, self.seed);
                set(&mut cfg.paths.aligned, self.out.clone());
            }
            Command::Check(a) => {
                set(&mut cfg.paths.aligned, a.policy.clone());
                set(&mut cfg.paths.heldout, a.prompts.clone());
                set(&mut cfg.paths.table, a.csv.clone());
                generation(&mut cfg, &a.generation);
                set(&mut cfg.paths.check_report, self.out.clone());
            }
            Command::Eval(a) => {
                set(&mut cfg.paths.aligned, a.policy.clone());
                set(&mut cfg.paths.heldout, a.refs.clone());
                set(
                    &mut cfg.metrics.mode,
                    a.mode.map(|m| match m {
                        ModeArg::Pooled => HistogramMode::Pooled,
                        ModeArg::PerPair => HistogramMode::PerPair,
                    }),
                );
                generation(&mut cfg, &a.generation);
                set(&mut cfg.paths.eval_report, self.out.clone());
            }
            Command::Report(_) => set(&mut cfg.paths.table, self.out.clone()),
        }
        cfg
    }

    /// The seed the verb runs with, if it uses randomness at all.
    pub fn stage_seed(&self, cfg: &AppConfig) -> Option<u64> {
        match &self.command {
            Command::SynthCorpus(_) => Some(cfg.synth.seed),
            Command::GenPrefs(_) | Command::Check(_) | Command::Eval(_) => {
                Some(cfg.generation.seed)
            }
            Command::Align(_) => Some(cfg.align.seed),
            Command::TrainMle(_) | Command::Report(_) => None,
        }
    }
}
