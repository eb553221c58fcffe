//! Fast gradient sign attacks on point clouds.
//!
//! Every coordinate of every point moves along the gradient of the
//! classification loss with respect to that coordinate. The model is only
//! read: parameters enter the tape as constants, so neither their values
//! nor their gradient slots are touched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{stack_points, unstack_cloud, PointCloud};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    /// `x + eps * sgn(grad)`, with `sgn(0) = 0`.
    Sign,
    /// `x + eps * grad`, unclipped.
    Grad,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Sign => "sign",
            AttackMode::Grad => "grad",
        })
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign" => Ok(AttackMode::Sign),
            "grad" => Ok(AttackMode::Grad),
            other => Err(Error::config(format!(
                "unknown attack mode {other:?} (expected sign or grad)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub mode: AttackMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.1,
            mode: AttackMode::Sign,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// How per-cloud losses combine into the differentiated scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Batch mean, as used by the training loss.
    Mean,
    /// Batch sum: each cloud gets the gradient of its own loss.
    Sum,
}

/// Gradient of the classification NLL with respect to the input batch,
/// together with the loss value (reduced as requested).
pub fn input_gradient(
    bundle: &ModelBundle,
    batch: &Tensor,
    labels: &[usize],
    reduction: Reduction,
) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, &[]);
    let x = tape.variable(batch.clone());
    let z = bundle.extract(&mut tape, &bound, x)?;
    let lp = bundle.classify_on(&mut tape, &bound, z)?;
    let mut loss = tape.nll_loss(lp, labels)?;
    if reduction == Reduction::Sum {
        loss = tape.scale(loss, labels.len() as f64);
    }
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    let grad = tape.grad(x).expect("input requires grad").to_vec();
    Ok((Tensor::new(batch.shape().to_vec(), grad)?, value))
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves `batch` along `grad` per `cfg`. Coordinates with a zero step are
/// copied unchanged.
pub fn perturb(batch: &Tensor, grad: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut out = batch.clone();
    if cfg.epsilon == 0.0 {
        return Ok(out);
    }
    for (x, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        let step = match cfg.mode {
            AttackMode::Sign => cfg.epsilon * sgn(g),
            AttackMode::Grad => cfg.epsilon * g,
        };
        if step != 0.0 {
            *x += step;
        }
    }
    Ok(out)
}

/// One-step attack on a batch `[B, N, 3]` using the batch-mean loss.
pub fn fgsm(
    bundle: &ModelBundle,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(batch.clone());
    }
    let (grad, _) = input_gradient(bundle, batch, labels, Reduction::Mean)?;
    perturb(batch, &grad, cfg)
}

/// Suffix appended to the source id of an attacked cloud.
pub const ADVERSARIAL_SUFFIX: &str = "_adv";

/// Attacks every cloud against its own loss; labels are preserved.
///
/// Clouds are processed in chunks of up to `chunk` equally sized clouds.
/// The result does not depend on the chunking.
pub fn attack_dataset(
    bundle: &ModelBundle,
    clouds: &[PointCloud],
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<Vec<PointCloud>> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::config("no clouds to attack"));
    }
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(clouds.len());
    let mut start = 0;
    while start < clouds.len() {
        let n = clouds[start].len();
        let mut end = start + 1;
        while end < clouds.len() && end - start < chunk && clouds[end].len() == n {
            end += 1;
        }
        let members: Vec<&PointCloud> = clouds[start..end].iter().collect();
        let batch = stack_points(&members)?;
        let labels: Vec<usize> = members.iter().map(|c| c.label).collect();
        let adversarial = if cfg.epsilon == 0.0 {
            batch
        } else {
            let (grad, _) = input_gradient(bundle, &batch, &labels, Reduction::Sum)?;
            perturb(&batch, &grad, cfg)?
        };
        for (i, c) in members.iter().enumerate() {
            let mut adv = unstack_cloud(&adversarial, i, c);
            adv.source_id.push_str(ADVERSARIAL_SUFFIX);
            out.push(adv);
        }
        start = end;
    }
    Ok(out)
}
