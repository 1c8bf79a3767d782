//! First-order optimizers over a dense parameter matrix. Both minimize.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "OptimizerRepr")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Flat form read from config files, so that a stray key is an error for
/// every kind.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerRepr {
    kind: String,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
}

impl TryFrom<OptimizerRepr> for OptimizerKind {
    type Error = String;

    fn try_from(r: OptimizerRepr) -> Result<Self, String> {
        match r.kind.as_str() {
            "sgd" if r.beta1.is_none() && r.beta2.is_none() && r.eps.is_none() => {
                Ok(OptimizerKind::Sgd)
            }
            "sgd" => Err("sgd takes no moment parameters".into()),
            "adam" => Ok(OptimizerKind::Adam {
                beta1: r.beta1.unwrap_or(0.9),
                beta2: r.beta2.unwrap_or(0.999),
                eps: r.eps.unwrap_or(1e-8),
            }),
            other => Err(format!("unknown optimizer `{other}`, expected sgd or adam")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Option<Array2<f64>>,
    v: Option<Array2<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one descent step `params -= update(grad)`.
    pub fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => params.scaled_add(-self.lr, grad),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let m = self.m.get_or_insert_with(|| Array2::zeros(grad.raw_dim()));
                let v = self.v.get_or_insert_with(|| Array2::zeros(grad.raw_dim()));
                m.zip_mut_with(grad, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                v.zip_mut_with(grad, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                let lr = self.lr;
                ndarray::Zip::from(params)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
            }
        }
    }
}
