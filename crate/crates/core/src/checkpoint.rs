//! Plain-text policy checkpoints.
//!
//! ```text
//! melodyalign-policy 1
//! # <free-form provenance lines>
//! conditioning lyric-state
//! pitch-window 48 96
//! duration-edges 125 250 500 1000 2000 4000
//! prompt-edges 3 5 7
//! vocab 63
//! 0 begin/0
//! ...
//! 62 dur/6
//! theta 126 63
//! <63 space-separated logits, row 0>
//! ...
//! ```
//!
//! Logits are written with Rust's shortest round-trip float formatting, so
//! reading a checkpoint back reproduces the table bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::policy::{Conditioning, Policy, PolicyError};
use crate::vocab::{VocabConfig, VocabError, Vocabulary};

pub const MAGIC: &str = "melodyalign-policy";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a policy checkpoint")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub fn to_string(policy: &Policy, provenance: &[String]) -> String {
    let cfg = policy.vocab().config();
    let join = |xs: &[String]| xs.join(" ");
    let mut out = String::new();
    writeln!(out, "{MAGIC} {VERSION}").unwrap();
    for line in provenance {
        writeln!(out, "# {line}").unwrap();
    }
    writeln!(out, "conditioning {}", policy.conditioning().name()).unwrap();
    writeln!(out, "pitch-window {} {}", cfg.pitch_min, cfg.pitch_max).unwrap();
    writeln!(
        out,
        "duration-edges {}",
        join(
            &cfg.duration_edges
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
        )
    )
    .unwrap();
    writeln!(
        out,
        "prompt-edges {}",
        join(
            &cfg.prompt_edges
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
        )
    )
    .unwrap();
    writeln!(out, "vocab {}", policy.vocab().len()).unwrap();
    for (id, token) in policy.vocab().tokens().iter().enumerate() {
        writeln!(out, "{id} {token}").unwrap();
    }
    let theta = policy.theta();
    writeln!(out, "theta {} {}", theta.nrows(), theta.ncols()).unwrap();
    for row in theta.rows() {
        writeln!(
            out,
            "{}",
            join(&row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>())
        )
        .unwrap();
    }
    out
}

pub fn write(
    policy: &Policy,
    provenance: &[String],
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    fs::write(path, to_string(policy, provenance))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Policy, CheckpointError> {
    from_str(&fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str), CheckpointError> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            if !line.starts_with('#') {
                return Ok((i + 1, line));
            }
        }
        Err(CheckpointError::Malformed {
            line: self.last + 1,
            reason: "unexpected end of file".into(),
        })
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>), CheckpointError> {
        let (n, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(CheckpointError::Malformed {
                line: n,
                reason: format!("expected `{key}`"),
            });
        }
        Ok((n, parts.collect()))
    }
}

fn parse_all<T: std::str::FromStr>(line: usize, parts: &[&str]) -> Result<Vec<T>, CheckpointError> {
    parts
        .iter()
        .map(|p| {
            p.parse().map_err(|_| CheckpointError::Malformed {
                line,
                reason: format!("bad number {p:?}"),
            })
        })
        .collect()
}

pub fn from_str(text: &str) -> Result<Policy, CheckpointError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (_, header) = lines.next_line().map_err(|_| CheckpointError::BadMagic)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let version = parts.next().unwrap_or("");
    if version != VERSION.to_string() {
        return Err(CheckpointError::Version {
            found: version.to_string(),
        });
    }

    let (n, cond) = lines.keyed("conditioning")?;
    let conditioning = cond
        .first()
        .and_then(|c| Conditioning::from_name(c))
        .ok_or_else(|| CheckpointError::Malformed {
            line: n,
            reason: "unknown conditioning".into(),
        })?;
    let (n, window) = lines.keyed("pitch-window")?;
    let window: Vec<u8> = parse_all(n, &window)?;
    if window.len() != 2 {
        return Err(CheckpointError::Malformed {
            line: n,
            reason: "pitch-window needs two values".into(),
        });
    }
    let (n, edges) = lines.keyed("duration-edges")?;
    let duration_edges = parse_all(n, &edges)?;
    let (n, edges) = lines.keyed("prompt-edges")?;
    let prompt_edges = parse_all(n, &edges)?;
    let vocab = Vocabulary::new(VocabConfig {
        pitch_min: window[0],
        pitch_max: window[1],
        duration_edges,
        prompt_edges,
    })?;

    let (n, size) = lines.keyed("vocab")?;
    let size: Vec<usize> = parse_all(n, &size)?;
    if size != [vocab.len()] {
        return Err(CheckpointError::Malformed {
            line: n,
            reason: format!("vocabulary size should be {}", vocab.len()),
        });
    }
    for (id, token) in vocab.tokens().iter().enumerate() {
        let (n, line) = lines.next_line()?;
        if line != format!("{id} {token}") {
            return Err(CheckpointError::Malformed {
                line: n,
                reason: format!("expected `{id} {token}`"),
            });
        }
    }

    let (n, shape) = lines.keyed("theta")?;
    let shape: Vec<usize> = parse_all(n, &shape)?;
    if shape.len() != 2 {
        return Err(CheckpointError::Malformed {
            line: n,
            reason: "theta needs rows and columns".into(),
        });
    }
    let mut values = Vec::with_capacity(shape[0] * shape[1]);
    for _ in 0..shape[0] {
        let (n, line) = lines.next_line()?;
        let row: Vec<f64> = parse_all(n, &line.split_whitespace().collect::<Vec<_>>())?;
        if row.len() != shape[1] {
            return Err(CheckpointError::Malformed {
                line: n,
                reason: format!("expected {} values", shape[1]),
            });
        }
        values.extend(row);
    }
    let theta = Array2::from_shape_vec((shape[0], shape[1]), values).expect("shape checked");
    Ok(Policy::from_logits(vocab, conditioning, theta)?)
}
