//! Parameter-set optimizers: plain gradient descent and AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    PlainDescent,
    /// Adaptive moments with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Option<(ParamSet, ParamSet)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: None,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Returns the updated parameters. Rejects non-finite gradients.
    pub fn step(&mut self, params: &ParamSet, grad: &ParamSet) -> Result<ParamSet> {
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                op: "optimizer gradient".into(),
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::PlainDescent => params.add_scaled(grad, -self.lr),
            OptimizerKind::AdamW => {
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (params.zeros_like(), params.zeros_like()));
                let (b1, b2) = (self.beta1, self.beta2);
                *m = m.zip_map(grad, |m, g| m.zip_map(g, |m, g| b1 * m + (1.0 - b1) * g))?;
                *v = v.zip_map(grad, |v, g| v.zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g))?;
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
                let out = params.map(|name, p| {
                    let m = m.get(name).expect("same layout");
                    let v = v.get(name).expect("same layout");
                    let data = p
                        .data()
                        .iter()
                        .zip(m.data().iter().zip(v.data()))
                        .map(|(&p, (&m, &v))| {
                            let update = (m / c1) / ((v / c2).sqrt() + eps) + wd * p;
                            p - lr * update
                        })
                        .collect();
                    Tensor::from_vec(p.rows(), p.cols(), data)
                });
                Ok(out.with_version(params.version() + 1))
            }
        }
    }
}
