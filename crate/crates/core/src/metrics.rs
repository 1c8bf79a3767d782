//! Objective evaluation: pitch and duration distribution similarity (PD,
//! DD), DTW melody distance (MD) and per-rule violation counts.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::melody::{parse_melody, LyricLine, Melody, MIDI_MAX};
use crate::rules::{evaluate, RuleConfig, RuleId};
use crate::vocab::{DurationBuckets, VocabConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("histogram has zero norm")]
    ZeroNormHistogram,
    #[error("histograms use different bins")]
    BinMismatch,
    #[error("pitch sequence is empty")]
    EmptySequence,
    #[error("{gens} generations but {refs} references")]
    LengthMismatch { gens: usize, refs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<u32>,
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn zeros(bins: Vec<u32>) -> Self {
        let counts = vec![0.0; bins.len()];
        Self { bins, counts }
    }

    /// Bins are the raw MIDI values 0 to 127.
    pub fn pitch() -> Self {
        Self::zeros((0..=MIDI_MAX as u32).collect())
    }

    /// One bin per duration bucket, labelled by bucket index.
    pub fn duration(buckets: &DurationBuckets) -> Self {
        Self::zeros((0..buckets.len() as u32).collect())
    }

    pub fn add_pitches(&mut self, melody: &Melody) {
        for p in melody.pitches() {
            self.counts[p as usize] += 1.0;
        }
    }

    pub fn add_durations(&mut self, melody: &Melody, buckets: &DurationBuckets) {
        for d in melody.durations() {
            self.counts[buckets.bucket_of(d)] += 1.0;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            bins: self.bins.clone(),
            counts: self.counts.iter().map(|x| x * c).collect(),
        }
    }
}

pub fn cosine_similarity(a: &Histogram, b: &Histogram) -> Result<f64, MetricsError> {
    if a.bins != b.bins || a.counts.len() != b.counts.len() {
        return Err(MetricsError::BinMismatch);
    }
    let dot: f64 = a.counts.iter().zip(&b.counts).map(|(x, y)| x * y).sum();
    let na: f64 = a.counts.iter().map(|x| x * x).sum();
    let nb: f64 = b.counts.iter().map(|x| x * x).sum();
    if na <= 0.0 || nb <= 0.0 {
        return Err(MetricsError::ZeroNormHistogram);
    }
    Ok((dot / (na * nb).sqrt()).clamp(0.0, 1.0))
}

/// DTW alignment summary. Among minimum-cost warping paths the shortest is
/// reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dtw {
    pub cost: u64,
    pub path_len: usize,
    /// `cost / path_len`.
    pub normalized: f64,
}

/// DTW over pitch contours with `|a_i - b_j|` as local cost and match,
/// insert and delete moves.
pub fn dtw(a: &[u8], b: &[u8]) -> Result<Dtw, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let m = b.len();
    // (cost, path length) compared lexicographically
    let mut prev = vec![(u64::MAX, usize::MAX); m];
    let mut cur = vec![(0u64, 0usize); m];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            let local = (x as i64 - y as i64).unsigned_abs();
            let best = if i == 0 && j == 0 {
                (0, 0)
            } else {
                let mut best = (u64::MAX, usize::MAX);
                if i > 0 {
                    best = best.min(prev[j]);
                }
                if j > 0 {
                    best = best.min(cur[j - 1]);
                }
                if i > 0 && j > 0 {
                    best = best.min(prev[j - 1]);
                }
                best
            };
            cur[j] = (best.0 + local, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, path_len) = prev[m - 1];
    Ok(Dtw {
        cost,
        path_len,
        normalized: cost as f64 / path_len as f64,
    })
}

/// Path-length normalized DTW distance.
pub fn melody_distance(gen: &[u8], reference: &[u8]) -> Result<f64, MetricsError> {
    dtw(gen, reference).map(|d| d.normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistogramMode {
    /// One histogram over all notes of the set.
    #[default]
    Pooled,
    /// Mean of per-pair similarities.
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub duration_edges: Vec<u32>,
    pub mode: HistogramMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            duration_edges: VocabConfig::default().duration_edges,
            mode: HistogramMode::Pooled,
        }
    }
}

/// PD, DD and MD over the parsable generations. Values are `None` when
/// nothing could be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pd: Option<f64>,
    pub dd: Option<f64>,
    pub md: Option<f64>,
    /// Mean unnormalized DTW cost.
    pub md_raw: Option<f64>,
    pub n_evaluated: usize,
    pub n_skipped: usize,
}

pub fn evaluate_set(
    gens: &[String],
    refs: &[Melody],
    cfg: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    if gens.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            gens: gens.len(),
            refs: refs.len(),
        });
    }
    let pairs: Vec<(Melody, &Melody)> = gens
        .iter()
        .zip(refs)
        .filter_map(|(g, r)| parse_melody(g).ok().map(|g| (g, r)))
        .collect();
    let n_skipped = gens.len() - pairs.len();
    if pairs.is_empty() {
        return Ok(MetricsReport {
            pd: None,
            dd: None,
            md: None,
            md_raw: None,
            n_evaluated: 0,
            n_skipped,
        });
    }
    let buckets = DurationBuckets::new(cfg.duration_edges.clone());

    let dtws: Vec<Dtw> = pairs
        .par_iter()
        .map(|(g, r)| dtw(&g.pitches(), &r.pitches()))
        .collect::<Result<_, _>>()?;
    let n = pairs.len() as f64;
    let md = dtws.iter().map(|d| d.normalized).sum::<f64>() / n;
    let md_raw = dtws.iter().map(|d| d.cost as f64).sum::<f64>() / n;

    let (pd, dd) = match cfg.mode {
        HistogramMode::Pooled => {
            let (mut gp, mut rp) = (Histogram::pitch(), Histogram::pitch());
            let (mut gd, mut rd) = (Histogram::duration(&buckets), Histogram::duration(&buckets));
            for (g, r) in &pairs {
                gp.add_pitches(g);
                rp.add_pitches(r);
                gd.add_durations(g, &buckets);
                rd.add_durations(r, &buckets);
            }
            (cosine_similarity(&gp, &rp)?, cosine_similarity(&gd, &rd)?)
        }
        HistogramMode::PerPair => {
            let (mut pd, mut dd) = (0.0, 0.0);
            for (g, r) in &pairs {
                let (mut gp, mut rp) = (Histogram::pitch(), Histogram::pitch());
                let (mut gd, mut rd) =
                    (Histogram::duration(&buckets), Histogram::duration(&buckets));
                gp.add_pitches(g);
                rp.add_pitches(r);
                gd.add_durations(g, &buckets);
                rd.add_durations(r, &buckets);
                pd += cosine_similarity(&gp, &rp)?;
                dd += cosine_similarity(&gd, &rd)?;
            }
            (pd / n, dd / n)
        }
    };
    Ok(MetricsReport {
        pd: Some(pd),
        dd: Some(dd),
        md: Some(md),
        md_raw: Some(md_raw),
        n_evaluated: pairs.len(),
        n_skipped,
    })
}

/// Per-rule violation counts over a set of generations. An unparsable text
/// counts toward Format only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub total: usize,
    pub compliant: usize,
    pub counts: [usize; 5],
    pub rates: [f64; 5],
}

impl ViolationReport {
    pub fn count(&self, rule: RuleId) -> usize {
        self.counts[rule.index()]
    }

    pub fn rate(&self, rule: RuleId) -> f64 {
        self.rates[rule.index()]
    }

    /// Sum of per-rule counts; a melody failing two rules counts twice.
    pub fn total_violations(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let per_rule: serde_json::Map<String, serde_json::Value> = RuleId::ALL
            .iter()
            .map(|r| {
                (
                    r.name().to_string(),
                    serde_json::json!({ "count": self.count(*r), "rate": self.rate(*r) }),
                )
            })
            .collect();
        serde_json::json!({
            "total": self.total,
            "compliant": self.compliant,
            "total_violations": self.total_violations(),
            "rules": per_rule,
        })
    }

    /// `rule,count,rate` table, one row per rule.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rule,count,rate\n");
        for r in RuleId::ALL {
            writeln!(out, "{},{},{}", r.name(), self.count(r), self.rate(r)).unwrap();
        }
        out
    }
}

pub fn violation_report(
    texts: &[String],
    lyrics: &[LyricLine],
    cfg: &RuleConfig,
) -> Result<ViolationReport, MetricsError> {
    if texts.len() != lyrics.len() {
        return Err(MetricsError::LengthMismatch {
            gens: texts.len(),
            refs: lyrics.len(),
        });
    }
    let reports: Vec<_> = texts
        .par_iter()
        .zip(lyrics)
        .map(|(t, l)| evaluate(t, l, cfg))
        .collect();
    let mut counts = [0usize; 5];
    let mut compliant = 0;
    for rep in &reports {
        compliant += rep.compliant as usize;
        for r in rep.failed_rules() {
            counts[r.index()] += 1;
        }
    }
    let total = texts.len();
    let rates = counts.map(|c| {
        if total == 0 {
            0.0
        } else {
            c as f64 / total as f64
        }
    });
    Ok(ViolationReport {
        total,
        compliant,
        counts,
        rates,
    })
}
