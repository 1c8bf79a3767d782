//! Rule-based preference alignment for lyric-to-melody generation.
//!
//! The pipeline: a tabular autoregressive [`policy`] is fit to a melody
//! corpus by maximum likelihood, sampled for candidate melodies that the
//! [`rules`] engine sorts into preference data ([`prefs`]), and then aligned
//! with DPO followed by KTO ([`align`]). [`metrics`] scores the results.

pub mod align;
pub mod checkpoint;
pub mod dataset;
pub mod melody;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod prefs;
pub mod rules;
pub mod synth;
pub mod vocab;

pub use melody::{parse_melody, serialize_melody, Language, LyricLine, Melody, Note};
pub use policy::{Conditioning, Policy};
pub use rules::{evaluate, RuleConfig, RuleId};
